//! Nucleus segmentation, patch cropping, focus scoring, plate heatmaps and
//! occlusion saliency.

pub mod filters;
pub mod focus;
pub mod heatmap;
pub mod patch;
pub mod saliency;
pub mod segment;

pub use focus::{focus_features, focus_score, train_focus_model, FocusModel, FocusScore};
pub use heatmap::{plate_gradient_metrics, plate_heatmap, PlateGradientMetrics};
pub use patch::{crop_patches, CellPatch, DEFAULT_PATCH_SIZE};
pub use saliency::{background_fill, occlusion_saliency, SaliencyGrid};
pub use segment::{segment_nuclei, write_detections_csv, NucleusDetection, Segmentation};

/// Default nuclear-stain channel.
pub const NUCLEUS_CHANNEL: usize = 0;
/// Default minimum component area for a detection, in pixels.
pub const MIN_NUCLEUS_AREA: usize = 4;
