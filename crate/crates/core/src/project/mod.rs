//! PCA and exact t-SNE projections for eyeballing nuisance structure, plus
//! a nearest-neighbour purity score that quantifies what the eye sees.

pub mod pca;
pub mod tsne;

use std::collections::BTreeMap;
use std::fmt::Write;

use ndarray::Array2;
use rayon::prelude::*;

pub use pca::{pca, Pca};
pub use tsne::{affinities, subsample_rows, tsne, Affinities, Projection2D, TsneOptions, MAX_TSNE_ROWS};

use crate::error::{Error, Result};
use crate::features::FeatureTable;

pub const DEFAULT_PCA_DIMS: usize = 30;
pub const MAX_CATEGORIES: usize = 20;

/// Categorical palette: the 20 colours of matplotlib's `tab20`, dark shade
/// of each hue first.
pub const PALETTE: [&str; MAX_CATEGORIES] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94",
    "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5",
];

/// Mean fraction of each point's `k` nearest neighbours (Euclidean,
/// excluding itself, ties broken by index) that share its label.
pub fn neighbor_purity(coords: &[[f64; 2]], labels: &[String], k: usize) -> f64 {
    let n = coords.len();
    assert_eq!(n, labels.len());
    if n < 2 {
        return 1.0;
    }
    let k = k.min(n - 1);
    let per_point: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = coords[i][0] - coords[j][0];
                    let dy = coords[i][1] - coords[j][1];
                    (dx * dx + dy * dy, j)
                })
                .collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d[..k].iter().filter(|(_, j)| labels[*j] == labels[i]).count() as f64 / k as f64
        })
        .collect();
    per_point.iter().sum::<f64>() / n as f64
}

/// Column-wise z-scores; constant columns are dropped.
pub fn standardize_columns(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows() as f64;
    let mut keep = Vec::new();
    let mut stats = Vec::new();
    for (j, col) in x.columns().into_iter().enumerate() {
        let m = col.sum() / n;
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        if sd > 1e-12 * (1.0 + m.abs()) {
            keep.push(j);
            stats.push((m, sd));
        }
    }
    Array2::from_shape_fn((x.nrows(), keep.len()), |(i, c)| {
        (x[[i, keep[c]]] - stats[c].0) / stats[c].1
    })
}

/// Standard preprocessing for t-SNE on a feature table: z-score columns,
/// subsample to [`MAX_TSNE_ROWS`], PCA to at most `pca_dims` dimensions.
/// Returns the reduced matrix and the kept row indices.
pub fn prepare_embedding_input(
    table: &FeatureTable,
    pca_dims: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let rows = subsample_rows(table.len(), MAX_TSNE_ROWS, seed);
    let all: Vec<usize> = (0..table.width()).collect();
    let x = standardize_columns(&table.submatrix(&rows, &all));
    if x.ncols() == 0 {
        return Err(Error::Degenerate("every feature column is constant".into()));
    }
    let k = pca_dims.min(x.ncols()).min(x.nrows());
    let reduced = if k < x.ncols() {
        pca(x.view(), k)?.projected
    } else {
        x
    };
    Ok((reduced, rows))
}

/// Scatter plot of a projection coloured by a categorical column. Points
/// are drawn in input order; categories are sorted and coloured by
/// [`PALETTE`] in that order.
pub fn scatter_svg(projection: &Projection2D, labels: &[String], title: &str) -> Result<String> {
    if labels.len() != projection.coords.len() {
        return Err(Error::Input(format!(
            "{} labels for {} points",
            labels.len(),
            projection.coords.len()
        )));
    }
    let mut cats: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        cats.entry(l.as_str()).or_insert(0);
    }
    if cats.len() > MAX_CATEGORIES {
        return Err(Error::Input(format!(
            "{} categories exceed the {MAX_CATEGORIES}-colour palette; colour by a coarser column such as batch or condition",
            cats.len()
        )));
    }
    for (i, v) in cats.values_mut().enumerate() {
        *v = i;
    }

    let (w, h, pad, legend_w) = (600.0, 600.0, 30.0, 160.0);
    let xs = projection.coords.iter().map(|c| c[0]);
    let ys = projection.coords.iter().map(|c| c[1]);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let sx = |v: f64| if x1 > x0 { pad + (v - x0) / (x1 - x0) * (w - 2.0 * pad) } else { w / 2.0 };
    let sy = |v: f64| if y1 > y0 { h - pad - (v - y0) / (y1 - y0) * (h - 2.0 * pad) } else { h / 2.0 };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.4}" height="{h:.4}" viewBox="0 0 {:.4} {h:.4}" font-family="sans-serif" font-size="11">"#,
        w + legend_w,
        w + legend_w
    );
    let _ = writeln!(svg, "<title>{}</title>", escape(title));
    let _ = writeln!(
        svg,
        r##"<rect x="0" y="0" width="{w:.4}" height="{h:.4}" fill="#ffffff" stroke="#cccccc"/>"##
    );
    for (c, l) in projection.coords.iter().zip(labels) {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.4}" cy="{:.4}" r="2.5000" fill="{}" fill-opacity="0.8"/>"#,
            sx(c[0]),
            sy(c[1]),
            PALETTE[cats[l.as_str()]]
        );
    }
    let _ = writeln!(svg, r#"<g id="legend">"#);
    for (i, (name, idx)) in cats.iter().enumerate() {
        let y = pad + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{:.4}" y="{:.4}" width="10.0000" height="10.0000" fill="{}"/>"#,
            w + 10.0,
            y,
            PALETTE[*idx]
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.4}" y="{:.4}">{}</text>"#,
            w + 26.0,
            y + 9.0,
            escape(name)
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
