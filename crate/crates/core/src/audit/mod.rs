//! Nuisance-factor prediction against permuted baselines, held-out
//! disease prediction, the density-confound comparison, and the report
//! that collects them.

pub mod disease;
pub mod nuisance;
pub mod report;

pub use disease::{
    density_confound_check, density_pdp, disease_audit, DensityCheck, DiseaseAuditResult, FoldResult,
    ModelFamily, PdpSummary,
};
pub use nuisance::{nuisance_audit, NuisanceAuditResult, NuisanceFactor, NuisanceOptions};
pub use report::{AuditReport, ReportFormat, REPORT_SCHEMA_VERSION};
