//! Experiment metadata: the batch → plate → well → site hierarchy, cell
//! lines, and the JSON-lines manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLATE_ROWS: u8 = 8;
pub const PLATE_COLS: u8 = 12;
pub const WELLS_PER_PLATE: usize = PLATE_ROWS as usize * PLATE_COLS as usize;

/// A well on a fixed 8×12 plate. Rows are 0-based (A = 0), columns 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u8; 2]", into = "[u8; 2]")]
pub struct WellAddress {
    row: u8,
    col: u8,
}

impl WellAddress {
    pub fn new(row: u8, col: u8) -> Result<Self> {
        if row >= PLATE_ROWS || col >= PLATE_COLS {
            return Err(Error::Validation(format!(
                "well ({row}, {col}) outside the 8x12 plate"
            )));
        }
        Ok(WellAddress { row, col })
    }

    pub fn row(self) -> u8 {
        self.row
    }

    pub fn col(self) -> u8 {
        self.col
    }

    /// Row-major index in `0..96`.
    pub fn index(self) -> usize {
        self.row as usize * PLATE_COLS as usize + self.col as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        if index >= WELLS_PER_PLATE {
            return Err(Error::Validation(format!("well index {index} >= 96")));
        }
        Ok(WellAddress {
            row: (index / PLATE_COLS as usize) as u8,
            col: (index % PLATE_COLS as usize) as u8,
        })
    }

    pub fn all() -> impl Iterator<Item = WellAddress> {
        (0..WELLS_PER_PLATE).map(|i| WellAddress::from_index(i).unwrap())
    }

    /// Euclidean distance of (row, col) from the plate center (3.5, 5.5),
    /// divided by the corner distance so the result lies in `[0, 1]`.
    pub fn normalized_center_distance(self) -> f64 {
        let cr = (PLATE_ROWS as f64 - 1.0) / 2.0;
        let cc = (PLATE_COLS as f64 - 1.0) / 2.0;
        let dr = self.row as f64 - cr;
        let dc = self.col as f64 - cc;
        (dr * dr + dc * dc).sqrt() / (cr * cr + cc * cc).sqrt()
    }

    pub fn row_letter(self) -> char {
        (b'A' + self.row) as char
    }
}

impl fmt::Display for WellAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:02}", self.row_letter(), self.col + 1)
    }
}

impl TryFrom<[u8; 2]> for WellAddress {
    type Error = Error;

    fn try_from(v: [u8; 2]) -> Result<Self> {
        WellAddress::new(v[0], v[1])
    }
}

impl From<WellAddress> for [u8; 2] {
    fn from(w: WellAddress) -> Self {
        [w.row, w.col]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteKey {
    pub batch: String,
    pub plate: String,
    pub well: WellAddress,
    pub site_index: u32,
}

impl SiteKey {
    /// Stable string id, e.g. `b0/p1/C07/s2`. Used as the key in feature
    /// tables, ground truth and fold specs.
    pub fn id(&self) -> String {
        format!(
            "{}/{}/{}/s{}",
            self.batch, self.plate, self.well, self.site_index
        )
    }

    /// Plate identity that is unique across batches.
    pub fn plate_id(&self) -> String {
        format!("{}/{}", self.batch, self.plate)
    }
}

impl fmt::Display for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Healthy,
    Disease,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Healthy => "healthy",
            Condition::Disease => "disease",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "healthy" => Ok(Condition::Healthy),
            "disease" => Ok(Condition::Disease),
            other => Err(Error::Validation(format!("unknown condition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LabSource {
    A,
    B,
}

impl LabSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabSource::A => "A",
            LabSource::B => "B",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(LabSource::A),
            "B" => Ok(LabSource::B),
            other => Err(Error::Validation(format!("unknown lab source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellLine {
    pub id: String,
    pub subject_id: String,
    pub condition: Condition,
    /// Free-form subtype label, e.g. `sma2` or `TDPmut`.
    #[serde(default)]
    pub subtype: String,
    pub lab_source: LabSource,
}

/// A held-out healthy/disease pair, as listed in `pairs.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinePair {
    pub healthy: String,
    pub disease: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteRecord {
    pub key: SiteKey,
    pub cell_line: String,
    /// Relative paths are resolved against the manifest's directory.
    pub image_path: String,
    pub is_control: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExperimentManifest {
    pub config_digest: String,
    pub cell_lines: Vec<CellLine>,
    pub sites: Vec<SiteRecord>,
}

const MANIFEST_KIND: &str = "manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    kind: String,
    version: u32,
    config_digest: String,
    cell_lines: Vec<CellLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SiteLine {
    batch: String,
    plate: String,
    row: u8,
    col: u8,
    site: u32,
    cell_line: String,
    is_control: bool,
    image_path: String,
}

impl ExperimentManifest {
    pub fn cell_line(&self, id: &str) -> Option<&CellLine> {
        self.cell_lines.iter().find(|l| l.id == id)
    }

    pub fn cell_line_map(&self) -> BTreeMap<&str, &CellLine> {
        self.cell_lines.iter().map(|l| (l.id.as_str(), l)).collect()
    }

    /// Checks referential integrity and key uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut line_ids = BTreeSet::new();
        for line in &self.cell_lines {
            if !line_ids.insert(line.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate cell line id {:?}",
                    line.id
                )));
            }
        }

        let mut dangling: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        let mut keys = BTreeSet::new();
        for site in &self.sites {
            for (what, id) in [("batch", &site.key.batch), ("plate", &site.key.plate)] {
                if id.is_empty() || id.contains('/') || id.contains('#') {
                    return Err(Error::Validation(format!(
                        "{what} id {id:?} must be nonempty and free of '/' and '#'"
                    )));
                }
            }
            if !line_ids.contains(site.cell_line.as_str()) {
                dangling
                    .entry(site.cell_line.as_str())
                    .or_default()
                    .push(site.key.id());
            }
            if !keys.insert(&site.key) {
                return Err(Error::Validation(format!(
                    "duplicate site key {}",
                    site.key
                )));
            }
        }
        if !dangling.is_empty() {
            let detail: Vec<String> = dangling
                .iter()
                .map(|(line, sites)| {
                    let shown: Vec<&str> = sites.iter().take(5).map(String::as_str).collect();
                    let more = if sites.len() > 5 {
                        format!(" and {} more", sites.len() - 5)
                    } else {
                        String::new()
                    };
                    format!("unknown cell line {line:?} referenced by {}{more}", shown.join(", "))
                })
                .collect();
            return Err(Error::Validation(detail.join("; ")));
        }
        Ok(())
    }

    pub fn batches(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.sites.iter().map(|s| s.key.batch.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    pub fn has_controls(&self) -> bool {
        self.sites.iter().any(|s| s.is_control)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        self.validate()?;
        let header = HeaderLine {
            kind: MANIFEST_KIND.into(),
            version: MANIFEST_VERSION,
            config_digest: self.config_digest.clone(),
            cell_lines: self.cell_lines.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for site in &self.sites {
            let line = SiteLine {
                batch: site.key.batch.clone(),
                plate: site.key.plate.clone(),
                row: site.key.well.row(),
                col: site.key.well.col(),
                site: site.key.site_index,
                cell_line: site.cell_line.clone(),
                is_control: site.is_control,
                image_path: site.image_path.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("site serializes"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::from_lines(text.lines().map(|l| Ok(l.to_owned())))
    }

    fn from_lines(lines: impl Iterator<Item = Result<String>>) -> Result<Self> {
        let mut lines = lines.enumerate();
        let header: HeaderLine = match lines.next() {
            Some((_, line)) => serde_json::from_str(&line?)
                .map_err(|e| Error::Format(format!("manifest line 1: {e}")))?,
            None => return Err(Error::Format("manifest is empty (no header line)".into())),
        };
        if header.kind != MANIFEST_KIND {
            return Err(Error::Format(format!(
                "manifest header kind {:?}, expected {MANIFEST_KIND:?}",
                header.kind
            )));
        }
        if header.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                header.version
            )));
        }

        let mut sites = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: SiteLine = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
            let well = WellAddress::new(s.row, s.col)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
            sites.push(SiteRecord {
                key: SiteKey {
                    batch: s.batch,
                    plate: s.plate,
                    well,
                    site_index: s.site,
                },
                cell_line: s.cell_line,
                image_path: s.image_path,
                is_control: s.is_control,
            });
        }

        let manifest = ExperimentManifest {
            config_digest: header.config_digest,
            cell_lines: header.cell_lines,
            sites,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn save_manifest(manifest: &ExperimentManifest, path: &Path) -> Result<()> {
    let text = manifest.to_jsonl()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<ExperimentManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    ExperimentManifest::from_lines(reader.lines().map(|l| l.map_err(|e| Error::io(path, e))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, condition: Condition, lab: LabSource) -> CellLine {
        CellLine {
            id: id.into(),
            subject_id: format!("subj-{id}"),
            condition,
            subtype: String::new(),
            lab_source: lab,
        }
    }

    fn site(batch: &str, row: u8, col: u8, line: &str) -> SiteRecord {
        SiteRecord {
            key: SiteKey {
                batch: batch.into(),
                plate: "p0".into(),
                well: WellAddress::new(row, col).unwrap(),
                site_index: 0,
            },
            cell_line: line.into(),
            image_path: "img.ptns".into(),
            is_control: row == 0,
        }
    }

    #[test]
    fn well_geometry() {
        assert!(WellAddress::new(8, 0).is_err());
        assert!(WellAddress::new(0, 12).is_err());
        let corner = WellAddress::new(0, 0).unwrap();
        assert!((corner.normalized_center_distance() - 1.0).abs() < 1e-15);
        assert!((WellAddress::new(7, 11).unwrap().normalized_center_distance() - 1.0).abs() < 1e-15);
        assert_eq!(corner.to_string(), "A01");
        assert_eq!(WellAddress::new(2, 6).unwrap().to_string(), "C07");
        for w in WellAddress::all() {
            assert_eq!(WellAddress::from_index(w.index()).unwrap(), w);
        }
    }

    #[test]
    fn empty_manifest_round_trips() {
        let m = ExperimentManifest::default();
        let text = m.to_jsonl().unwrap();
        assert_eq!(ExperimentManifest::from_jsonl(&text).unwrap(), m);
    }

    #[test]
    fn dangling_line_named() {
        let m = ExperimentManifest {
            config_digest: "x".into(),
            cell_lines: vec![line("H1", Condition::Healthy, LabSource::A)],
            sites: vec![site("b0", 0, 0, "H1"), site("b0", 1, 0, "X")],
        };
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("\"X\""), "{err}");
        assert!(err.contains("b0/p0/B01/s0"), "{err}");
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let header = r#"{"kind":"manifest","version":1,"config_digest":"d","cell_lines":[]}"#;
        let bad = r#"{"batch":"b","plate":"p","row":0,"col":0,"site":0,"cell_line":"H","is_control":false,"image_path":"x","colour":"red"}"#;
        let err = ExperimentManifest::from_jsonl(&format!("{header}\n{bad}\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("colour"), "{err}");
    }

    #[test]
    fn header_kind_and_version_checked() {
        let wrong_kind = r#"{"kind":"features","version":1,"config_digest":"d","cell_lines":[]}"#;
        assert!(matches!(
            ExperimentManifest::from_jsonl(wrong_kind),
            Err(Error::Format(_))
        ));
        let wrong_version = r#"{"kind":"manifest","version":2,"config_digest":"d","cell_lines":[]}"#;
        assert!(matches!(
            ExperimentManifest::from_jsonl(wrong_version),
            Err(Error::Format(_))
        ));
        assert!(ExperimentManifest::from_jsonl("").is_err());
    }

    #[test]
    fn duplicate_site_rejected() {
        let m = ExperimentManifest {
            config_digest: String::new(),
            cell_lines: vec![line("H1", Condition::Healthy, LabSource::A)],
            sites: vec![site("b0", 0, 0, "H1"), site("b0", 0, 0, "H1")],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn file_round_trip() {
        let m = ExperimentManifest {
            config_digest: "abc".into(),
            cell_lines: vec![
                line("H1", Condition::Healthy, LabSource::A),
                line("D1", Condition::Disease, LabSource::B),
            ],
            sites: vec![site("b0", 0, 3, "H1"), site("b1", 7, 11, "D1")],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }
}
