//! 96-well plate heatmaps as standalone SVG.
//!
//! Each well is a cell of the 8×12 grid, subdivided into one square per
//! site: a `√s × √s` block when `s` is a perfect square, a `1 × s`
//! horizontal strip otherwise. Colours interpolate linearly between the
//! viridis stops in [`VIRIDIS`] from the minimum value (dark purple) to the
//! maximum (yellow). All coordinates and values are printed with 4 decimals,
//! so identical input gives identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::experiment::{WellAddress, PLATE_COLS, PLATE_ROWS};
use crate::learn::metrics::{mean, spearman};

pub const VIRIDIS: [[u8; 3]; 5] = [
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
];

const WELL_PX: f64 = 40.0;
const MARGIN: f64 = 30.0;
const LEGEND_H: f64 = 50.0;
const MISSING: &str = "#d0d0d0";

/// Colour for `t ∈ [0, 1]`.
pub fn viridis(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    std::array::from_fn(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
}

fn hex(rgb: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2])
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// `(rows, cols)` of the per-well site subgrid.
pub fn site_layout(sites_per_well: u32) -> (u32, u32) {
    let r = (sites_per_well as f64).sqrt().round() as u32;
    if r * r == sites_per_well {
        (r, r)
    } else {
        (1, sites_per_well)
    }
}

pub fn plate_heatmap(
    values: &BTreeMap<(WellAddress, u32), f64>,
    sites_per_well: u32,
    title: &str,
) -> Result<String> {
    if sites_per_well == 0 {
        return Err(Error::Input("sites_per_well must be at least 1".into()));
    }
    for ((well, site), v) in values {
        if *site >= sites_per_well {
            return Err(Error::Input(format!(
                "site {site} of well {well} exceeds {sites_per_well} sites per well"
            )));
        }
        if !v.is_finite() {
            return Err(Error::Input(format!(
                "heatmap value for well {well} site {site} is not finite ({v})"
            )));
        }
    }
    let lo = values.values().copied().fold(f64::INFINITY, f64::min);
    let hi = values.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };

    let (sr, sc) = site_layout(sites_per_well);
    let grid_w = PLATE_COLS as f64 * WELL_PX;
    let grid_h = PLATE_ROWS as f64 * WELL_PX;
    let width = grid_w + 2.0 * MARGIN;
    let height = grid_h + 2.0 * MARGIN + LEGEND_H;
    let (cell_w, cell_h) = (WELL_PX / sc as f64, WELL_PX / sr as f64);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.4}" height="{height:.4}" viewBox="0 0 {width:.4} {height:.4}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(svg, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN:.4}" y="{:.4}" font-size="12">{}</text>"#,
        MARGIN - 14.0,
        escape(title)
    );
    for col in 0..PLATE_COLS {
        let _ = writeln!(
            svg,
            r#"<text x="{:.4}" y="{:.4}" text-anchor="middle">{}</text>"#,
            MARGIN + (col as f64 + 0.5) * WELL_PX,
            MARGIN - 3.0,
            col + 1
        );
    }
    for well in WellAddress::all() {
        if well.col() == 0 {
            let _ = writeln!(
                svg,
                r#"<text x="{:.4}" y="{:.4}" text-anchor="end">{}</text>"#,
                MARGIN - 4.0,
                MARGIN + (well.row() as f64 + 0.5) * WELL_PX + 3.0,
                well.row_letter()
            );
        }
        let x0 = MARGIN + well.col() as f64 * WELL_PX;
        let y0 = MARGIN + well.row() as f64 * WELL_PX;
        for site in 0..sites_per_well {
            let (r, c) = (site / sc, site % sc);
            let fill = match values.get(&(well, site)) {
                Some(v) => hex(viridis(scale(*v))),
                None => MISSING.to_string(),
            };
            let _ = writeln!(
                svg,
                r#"<rect x="{:.4}" y="{:.4}" width="{cell_w:.4}" height="{cell_h:.4}" fill="{fill}"/>"#,
                x0 + c as f64 * cell_w,
                y0 + r as f64 * cell_h
            );
        }
        let _ = writeln!(
            svg,
            r##"<rect x="{x0:.4}" y="{y0:.4}" width="{WELL_PX:.4}" height="{WELL_PX:.4}" fill="none" stroke="#ffffff" stroke-width="1"/>"##
        );
    }

    let ly = MARGIN + grid_h + 15.0;
    let steps = 50;
    let bar_w = grid_w / 2.0;
    let _ = writeln!(svg, r#"<g id="legend">"#);
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{:.4}" y="{ly:.4}" width="{:.4}" height="12.0000" fill="{}"/>"#,
            MARGIN + i as f64 * bar_w / steps as f64,
            bar_w / steps as f64 + 0.5,
            hex(viridis(t))
        );
    }
    let (lo_s, hi_s) = if values.is_empty() {
        ("n/a".to_string(), "n/a".to_string())
    } else {
        (format!("{lo:.4}"), format!("{hi:.4}"))
    };
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN:.4}" y="{:.4}">min {lo_s}</text>"#,
        ly + 26.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.4}" y="{:.4}" text-anchor="end">max {hi_s}</text>"#,
        MARGIN + bar_w,
        ly + 26.0
    );
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Spatial summary of per-well values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateGradientMetrics {
    /// Mean over the four central wells (D06, D07, E06, E07).
    pub center_mean: f64,
    /// Mean over the four corner wells.
    pub corner_mean: f64,
    /// Mean over wells on the plate edge.
    pub edge_mean: f64,
    /// Spearman correlation between value and normalized center distance.
    pub distance_spearman: f64,
    pub range: f64,
}

impl PlateGradientMetrics {
    pub fn center_minus_corner(&self) -> f64 {
        self.center_mean - self.corner_mean
    }
}

/// Averages values per well (any number of sites each) and summarises the
/// center-to-edge pattern. Wells without values are ignored.
pub fn plate_gradient_metrics(values: &[(WellAddress, f64)]) -> Option<PlateGradientMetrics> {
    let mut per_well: BTreeMap<WellAddress, Vec<f64>> = BTreeMap::new();
    for (w, v) in values {
        per_well.entry(*w).or_default().push(*v);
    }
    let well_mean: BTreeMap<WellAddress, f64> =
        per_well.into_iter().map(|(w, v)| (w, mean(&v))).collect();
    let pick = |pred: &dyn Fn(WellAddress) -> bool| -> Option<f64> {
        let v: Vec<f64> = well_mean
            .iter()
            .filter(|(w, _)| pred(**w))
            .map(|(_, v)| *v)
            .collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    let (lr, lc) = (PLATE_ROWS - 1, PLATE_COLS - 1);
    let center_mean = pick(&|w| (3..=4).contains(&w.row()) && (5..=6).contains(&w.col()))?;
    let corner_mean = pick(&|w| (w.row() == 0 || w.row() == lr) && (w.col() == 0 || w.col() == lc))?;
    let edge_mean = pick(&|w| w.row() == 0 || w.row() == lr || w.col() == 0 || w.col() == lc)?;
    let dist: Vec<f64> = well_mean.keys().map(|w| w.normalized_center_distance()).collect();
    let vals: Vec<f64> = well_mean.values().copied().collect();
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    Some(PlateGradientMetrics {
        center_mean,
        corner_mean,
        edge_mean,
        distance_spearman: spearman(&dist, &vals),
        range: hi - lo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_fills(svg: &str) -> Vec<String> {
        svg.lines()
            .filter(|l| l.starts_with("<rect") && !l.contains("fill=\"none\"") && !l.contains("height=\"12.0000\""))
            .map(|l| {
                let i = l.find("fill=\"").unwrap() + 6;
                l[i..i + 7].to_string()
            })
            .collect()
    }

    fn by_distance(sites: u32) -> BTreeMap<(WellAddress, u32), f64> {
        WellAddress::all()
            .flat_map(|w| (0..sites).map(move |s| ((w, s), w.normalized_center_distance())))
            .collect()
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(viridis(0.0), VIRIDIS[0]);
        assert_eq!(viridis(1.0), VIRIDIS[4]);
        assert_eq!(viridis(0.5), VIRIDIS[2]);
    }

    #[test]
    fn equal_values_single_color() {
        let v: BTreeMap<_, _> = WellAddress::all().map(|w| ((w, 0), 0.7)).collect();
        let svg = plate_heatmap(&v, 1, "flat").unwrap();
        let fills = parse_fills(&svg);
        assert_eq!(fills.len(), 96);
        assert!(fills.iter().all(|f| f == &fills[0]));
    }

    #[test]
    fn distance_map_is_dark_at_center_bright_at_corners() {
        let svg = plate_heatmap(&by_distance(4), 4, "distance").unwrap();
        let fills = parse_fills(&svg);
        assert_eq!(fills.len(), 96 * 4);
        // Corner A01 carries the maximum value and so the top stop.
        assert_eq!(fills[0], hex(VIRIDIS[4]));
        let center = WellAddress::new(3, 5).unwrap().index() * 4;
        let luminance = |h: &str| {
            let p = |i| u8::from_str_radix(&h[i..i + 2], 16).unwrap() as u32;
            p(1) + p(3) + p(5)
        };
        assert!(luminance(&fills[center]) < luminance(&fills[0]));
    }

    #[test]
    fn byte_identical_and_has_legend() {
        let v = by_distance(9);
        let a = plate_heatmap(&v, 9, "t").unwrap();
        assert_eq!(a, plate_heatmap(&v, 9, "t").unwrap());
        assert!(a.contains("min 0.1085") && a.contains("max 1.0000"), "{a}");
        assert_eq!(site_layout(9), (3, 3));
        assert_eq!(site_layout(3), (1, 3));
    }

    #[test]
    fn non_finite_value_named() {
        let mut v = by_distance(1);
        v.insert((WellAddress::new(2, 3).unwrap(), 0), f64::NAN);
        let err = plate_heatmap(&v, 1, "x").unwrap_err().to_string();
        assert!(err.contains("C04"), "{err}");
    }

    #[test]
    fn gradient_metrics_on_distance() {
        let vals: Vec<_> = WellAddress::all()
            .map(|w| (w, 1.0 - w.normalized_center_distance()))
            .collect();
        let m = plate_gradient_metrics(&vals).unwrap();
        assert!((m.corner_mean - 0.0).abs() < 1e-12);
        assert!(m.center_minus_corner() > 0.8);
        assert!((m.distance_spearman + 1.0).abs() < 1e-12);
    }
}
