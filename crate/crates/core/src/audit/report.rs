use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::disease::{DensityCheck, DiseaseAuditResult, PdpSummary};
use super::nuisance::NuisanceAuditResult;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Decimal places for every float in report.json.
pub const JSON_DECIMALS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditReport {
    pub schema_version: u32,
    pub config_digest: Option<String>,
    /// SHA-256 of each input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub nuisance: Option<NuisanceAuditResult>,
    pub disease: Vec<DiseaseAuditResult>,
    pub density: Option<DensityCheck>,
    pub pdp: Vec<PdpSummary>,
    /// Figures, as paths relative to the report.
    pub svgs: Vec<String>,
    pub narrative: Vec<String>,
}

impl Default for AuditReport {
    fn default() -> Self {
        AuditReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config_digest: None,
            inputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
            nuisance: None,
            disease: Vec::new(),
            density: None,
            pdp: Vec::new(),
            svgs: Vec::new(),
            narrative: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

impl AuditReport {
    pub fn any_bias(&self) -> bool {
        self.nuisance.as_ref().is_some_and(|n| n.any_biased())
            || self.disease.iter().any(|d| d.covariate_coincidence)
            || self.density.as_ref().is_some_and(|d| d.confound)
    }

    /// Regenerates the verdict sentences from the results.
    pub fn refresh_narrative(&mut self) {
        let mut lines = Vec::new();
        if let Some(n) = &self.nuisance {
            for f in &n.factors {
                let verdict = if f.biased { "biased" } else { "unbiased" };
                lines.push(format!(
                    "{}: {verdict} (accuracy {:.3} vs permuted {:.3} ± {:.3}, chance {:.3})",
                    f.factor.as_str(),
                    f.accuracy,
                    f.baseline_mean,
                    f.baseline_sd,
                    f.chance
                ));
            }
            for s in &n.skipped {
                lines.push(format!("{}: skipped, {}", s.factor.as_str(), s.note));
            }
        }
        for d in &self.disease {
            let median = d.median_auc.map_or("n/a".to_string(), |m| format!("{m:.3}"));
            let mut line = format!("disease ({}): median AUC {median}", d.family.as_str());
            if let (Some(w), Some(a)) = (d.worst_fold, d.worst_auc) {
                let _ = write!(line, ", worst fold {w} at {a:.3}");
            }
            if d.covariate_coincidence {
                line.push_str("; the worst fold holds out a same-source pair, check lab source as a covariate");
            }
            lines.push(line);
        }
        if let Some(c) = &self.density {
            let fmt = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            lines.push(format!(
                "density: {} (median AUC full {}, density only {})",
                if c.confound { "cell density alone matches the full model, likely confounder" } else { "no density confound" },
                fmt(c.full.median_auc),
                fmt(c.density_only.median_auc)
            ));
        }
        if lines.is_empty() {
            lines.push("no audits were run".to_string());
        }
        self.narrative = lines;
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Markdown => Ok(self.to_markdown()),
        }
    }

    /// Canonical JSON: sorted keys, two-space indent, floats with
    /// [`JSON_DECIMALS`] decimals.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)
            .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
        let mut out = String::new();
        write_canonical(&value, 0, &mut out);
        out.push('\n');
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("report is not valid JSON: {e}")))?;
        match value.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == REPORT_SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Schema(format!(
                    "report schema version {v}, expected {REPORT_SCHEMA_VERSION}"
                )))
            }
            None => return Err(Error::Schema("report has no schema_version".into())),
        }
        let report: AuditReport = serde_json::from_value(value)
            .map_err(|e| Error::Schema(format!("report does not match the schema: {e}")))?;
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |what: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Schema(format!("{what} {v} outside [0, 1]")))
            }
        };
        if let Some(n) = &self.nuisance {
            if n.options.repeats < 3 {
                return Err(Error::Schema("nuisance audit with fewer than 3 repeats".into()));
            }
            for f in &n.factors {
                unit("accuracy", f.accuracy)?;
                for b in &f.baseline {
                    unit("baseline accuracy", *b)?;
                }
                if f.baseline.len() != n.options.repeats {
                    return Err(Error::Schema(format!(
                        "{} has {} baseline values for {} repeats",
                        f.factor.as_str(),
                        f.baseline.len(),
                        n.options.repeats
                    )));
                }
            }
        }
        let density = self.density.iter().flat_map(|c| [&c.full, &c.density_only]);
        for d in self.disease.iter().chain(density) {
            for f in &d.folds {
                if let Some(a) = f.auc {
                    unit("AUC", a)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Audit report\n");
        let _ = writeln!(md, "- schema version: {}", self.schema_version);
        let _ = writeln!(
            md,
            "- config digest: {}",
            self.config_digest.as_deref().unwrap_or("n/a")
        );
        for (role, digest) in &self.inputs {
            let _ = writeln!(md, "- input {role}: `{digest}`");
        }
        for (name, seed) in &self.seeds {
            let _ = writeln!(md, "- seed {name}: {seed}");
        }

        let _ = writeln!(md, "\n## Verdicts\n");
        let _ = writeln!(
            md,
            "Overall: **{}**\n",
            if self.any_bias() { "bias detected" } else { "no bias detected" }
        );
        for line in &self.narrative {
            let _ = writeln!(md, "- {line}");
        }

        let _ = writeln!(md, "\n## Nuisance factors\n");
        match &self.nuisance {
            None => {
                let _ = writeln!(md, "No nuisance audit in this report.");
            }
            Some(n) => {
                let _ = writeln!(
                    md,
                    "{} samples{}, {} permutation repeats, lambda {}.\n",
                    n.n_samples,
                    if n.controls_only { " from control wells" } else { "" },
                    n.options.repeats,
                    n.options.lambda
                );
                let _ = writeln!(md, "| factor | classes | accuracy | permuted mean | permuted sd | chance | verdict |");
                let _ = writeln!(md, "|---|---|---|---|---|---|---|");
                for f in &n.factors {
                    let _ = writeln!(
                        md,
                        "| {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |",
                        f.factor.as_str(),
                        f.classes,
                        f.accuracy,
                        f.baseline_mean,
                        f.baseline_sd,
                        f.chance,
                        if f.biased { "biased" } else { "unbiased" }
                    );
                }
                for s in &n.skipped {
                    let _ = writeln!(md, "\nSkipped {}: {}", s.factor.as_str(), s.note);
                }
            }
        }

        let _ = writeln!(md, "\n## Disease prediction\n");
        if self.disease.is_empty() {
            let _ = writeln!(md, "No disease audit in this report.");
        }
        for d in &self.disease {
            disease_table(&mut md, d);
        }

        let _ = writeln!(md, "\n## Density confound\n");
        match &self.density {
            None => {
                let _ = writeln!(md, "No density check in this report.");
            }
            Some(c) => {
                let _ = writeln!(md, "Confound flag: **{}**\n", if c.confound { "set" } else { "unset" });
                let _ = writeln!(md, "| fold | full AUC | density-only AUC | delta |");
                let _ = writeln!(md, "|---|---|---|---|");
                for ((f, d), delta) in c.full.folds.iter().zip(&c.density_only.folds).zip(&c.deltas) {
                    let _ = writeln!(
                        md,
                        "| {} | {} | {} | {} |",
                        f.fold,
                        opt3(f.auc),
                        opt3(d.auc),
                        opt3(*delta)
                    );
                }
                let _ = writeln!(
                    md,
                    "\nMedian AUC: full {}, density only {}.",
                    opt3(c.full.median_auc),
                    opt3(c.density_only.median_auc)
                );
            }
        }

        let _ = writeln!(md, "\n## Partial dependence\n");
        if self.pdp.is_empty() {
            let _ = writeln!(md, "No partial dependence curves in this report.");
        } else {
            let _ = writeln!(md, "| feature | class | points | min | max | range | monotone |");
            let _ = writeln!(md, "|---|---|---|---|---|---|---|");
            for p in &self.pdp {
                let _ = writeln!(
                    md,
                    "| {} ({}) | {} | {} | {:.3} | {:.3} | {:.3} | {} |",
                    p.feature,
                    p.feature_label,
                    p.class,
                    p.grid_points,
                    p.min_probability,
                    p.max_probability,
                    p.range,
                    if p.monotone { "yes" } else { "no" }
                );
            }
        }

        let _ = writeln!(md, "\n## Figures\n");
        if self.svgs.is_empty() {
            let _ = writeln!(md, "No figures.");
        }
        for path in &self.svgs {
            let _ = writeln!(md, "![{path}]({path})\n");
        }
        md
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn opt3(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |x| format!("{x:.3}"))
}

fn disease_table(md: &mut String, d: &DiseaseAuditResult) {
    let _ = writeln!(
        md,
        "### {} features ({} columns)\n",
        d.family.as_str(),
        d.features.len()
    );
    let _ = writeln!(md, "| fold | held out | same source | train | test | AUC | note |");
    let _ = writeln!(md, "|---|---|---|---|---|---|---|");
    for f in &d.folds {
        let held = match (&f.test_pair, &f.test_batch) {
            (Some((h, dd)), _) => format!("{h} / {dd}"),
            (None, Some(b)) => b.clone(),
            (None, None) => String::new(),
        };
        let same = f.same_source.map_or("", |s| if s { "yes" } else { "no" });
        let _ = writeln!(
            md,
            "| {} | {held} | {same} | {} | {} | {} | {} |",
            f.fold,
            f.n_train,
            f.n_test,
            opt3(f.auc),
            f.error.as_deref().unwrap_or("")
        );
    }
    let _ = writeln!(
        md,
        "\nMedian AUC {}; worst fold {} at {}; covariate coincidence {}.\n",
        opt3(d.median_auc),
        d.worst_fold.map_or("n/a".to_string(), |w| w.to_string()),
        opt3(d.worst_auc),
        if d.covariate_coincidence { "**set**" } else { "unset" }
    );
}

fn format_float(v: f64) -> String {
    let s = format!("{v:.JSON_DECIMALS$}");
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn write_canonical(value: &Value, depth: usize, out: &mut String) {
    let indent = |d: usize| "  ".repeat(d);
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&format_float(n.as_f64().unwrap_or(0.0)));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&indent(depth + 1));
                write_canonical(item, depth + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&indent(depth));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&indent(depth + 1));
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_canonical(&map[k.as_str()], depth + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&indent(depth));
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_valid_and_stable() {
        let mut r = AuditReport::default();
        r.refresh_narrative();
        let json = r.to_json().unwrap();
        assert_eq!(json, r.to_json().unwrap());
        let back = AuditReport::from_json(&json).unwrap();
        assert_eq!(back, r);
        assert!(!r.any_bias());
        let md = r.to_markdown();
        assert!(md.contains("No nuisance audit"));
        assert!(md.contains("No disease audit"));
        assert_eq!(md, back.to_markdown());
    }

    #[test]
    fn floats_have_fixed_decimals_and_keys_are_sorted() {
        let v = serde_json::json!({"b": 0.1 + 0.2, "a": [1, -0.0000001, 2.5], "c": null});
        let mut out = String::new();
        write_canonical(&v, 0, &mut out);
        assert_eq!(
            out,
            "{\n  \"a\": [\n    1,\n    0.000000,\n    2.500000\n  ],\n  \"b\": 0.300000,\n  \"c\": null\n}"
        );
    }

    #[test]
    fn version_mismatch_rejected() {
        let json = AuditReport::default().to_json().unwrap().replace(
            "\"schema_version\": 1",
            "\"schema_version\": 99",
        );
        let err = AuditReport::from_json(&json).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
        assert!(AuditReport::from_json("{}").is_err());
        assert!(AuditReport::from_json("not json").is_err());
    }

    #[test]
    fn markdown_links_every_svg() {
        let r = AuditReport {
            svgs: vec!["plots/focus_b0_p0.svg".into(), "tsne.svg".into()],
            ..AuditReport::default()
        };
        let md = AuditReport::from_json(&r.to_json().unwrap()).unwrap().to_markdown();
        for p in &r.svgs {
            assert!(md.contains(&format!("]({p})")));
        }
    }
}
