use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::experiment::{
    CellLine, Condition, ExperimentManifest, LabSource, SiteKey, SiteRecord, WellAddress,
};

use super::extract::SCHEMA_VERSION;

pub const METADATA_COLUMNS: [&str; 10] = [
    "key",
    "batch",
    "plate",
    "row",
    "col",
    "site",
    "cell_line",
    "condition",
    "lab_source",
    "is_control",
];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    /// Site id, or `site#k` for the k-th patch of a site.
    pub key: String,
    pub batch: String,
    pub plate: String,
    pub row: u8,
    pub col: u8,
    pub site: u32,
    pub cell_line: String,
    pub condition: Condition,
    pub lab_source: LabSource,
    pub is_control: bool,
    pub values: Vec<f64>,
}

impl FeatureRow {
    pub fn new(key: String, site: &SiteRecord, line: &CellLine, values: Vec<f64>) -> Self {
        FeatureRow {
            key,
            batch: site.key.batch.clone(),
            plate: site.key.plate.clone(),
            row: site.key.well.row(),
            col: site.key.well.col(),
            site: site.key.site_index,
            cell_line: line.id.clone(),
            condition: line.condition,
            lab_source: line.lab_source,
            is_control: site.is_control,
            values,
        }
    }

    /// The site this row belongs to (the key without any `#k` suffix).
    pub fn site_id(&self) -> &str {
        self.key.split('#').next().unwrap_or(&self.key)
    }

    pub fn well(&self) -> WellAddress {
        WellAddress::new(self.row, self.col).expect("validated on construction")
    }

    /// Metadata value by column name. `plate` is qualified by its batch
    /// (`b0/p1`) because plate ids repeat across batches.
    pub fn metadata(&self, column: &str) -> Option<String> {
        Some(match column {
            "key" => self.key.clone(),
            "batch" => self.batch.clone(),
            "plate" => format!("{}/{}", self.batch, self.plate),
            "row" => self.well().row_letter().to_string(),
            "col" | "column" => format!("{:02}", self.col + 1),
            "well" => self.well().to_string(),
            "site" => self.site.to_string(),
            "cell_line" => self.cell_line.clone(),
            "condition" => self.condition.as_str().to_string(),
            "lab_source" => self.lab_source.as_str().to_string(),
            "is_control" => self.is_control.to_string(),
            _ => return None,
        })
    }
}

/// Feature rows sorted by key, with joined experiment metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub schema_version: u32,
    pub feature_names: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    /// Sorts rows by key and checks widths, finiteness, key uniqueness and
    /// well addresses.
    pub fn new(feature_names: Vec<String>, mut rows: Vec<FeatureRow>) -> Result<Self> {
        let names: BTreeSet<&str> = feature_names.iter().map(String::as_str).collect();
        if names.len() != feature_names.len() {
            return Err(Error::Schema("duplicate feature column names".into()));
        }
        if let Some(clash) = feature_names.iter().find(|n| METADATA_COLUMNS.contains(&n.as_str())) {
            return Err(Error::Schema(format!("feature column {clash:?} clashes with metadata")));
        }
        rows.sort_by(|a, b| a.key.cmp(&b.key));
        for pair in rows.windows(2) {
            if pair[0].key == pair[1].key {
                return Err(Error::Validation(format!("duplicate row key {:?}", pair[0].key)));
            }
        }
        for r in &rows {
            if r.values.len() != feature_names.len() {
                return Err(Error::Schema(format!(
                    "row {:?} has {} values for {} features",
                    r.key,
                    r.values.len(),
                    feature_names.len()
                )));
            }
            if let Some(j) = r.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "row {:?} feature {:?} is not finite",
                    r.key, feature_names[j]
                )));
            }
            WellAddress::new(r.row, r.col)?;
        }
        Ok(FeatureTable {
            schema_version: SCHEMA_VERSION,
            feature_names,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows.len(), self.width()), |(i, j)| self.rows[i].values[j])
    }

    /// Matrix of the given rows and feature columns, in the order given.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| {
            self.rows[rows[i]].values[cols[j]]
        })
    }

    pub fn metadata_column(&self, column: &str) -> Result<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                r.metadata(column)
                    .ok_or_else(|| Error::Input(format!("unknown metadata column {column:?}")))
            })
            .collect()
    }

    /// Table restricted to rows matching `keep`.
    pub fn filter(&self, keep: impl Fn(&FeatureRow) -> bool) -> FeatureTable {
        FeatureTable {
            schema_version: self.schema_version,
            feature_names: self.feature_names.clone(),
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// A manifest view of the table's sites and cell lines, for building
    /// cross-validation folds. Image paths are empty.
    pub fn to_manifest(&self) -> Result<ExperimentManifest> {
        let mut lines: BTreeMap<&str, CellLine> = BTreeMap::new();
        let mut sites: BTreeMap<&str, SiteRecord> = BTreeMap::new();
        for r in &self.rows {
            let line = lines.entry(r.cell_line.as_str()).or_insert_with(|| CellLine {
                id: r.cell_line.clone(),
                subject_id: r.cell_line.clone(),
                condition: r.condition,
                subtype: String::new(),
                lab_source: r.lab_source,
            });
            if line.condition != r.condition || line.lab_source != r.lab_source {
                return Err(Error::Validation(format!(
                    "cell line {:?} has inconsistent condition or lab source at row {:?}",
                    r.cell_line, r.key
                )));
            }
            sites.entry(r.site_id()).or_insert_with(|| SiteRecord {
                key: SiteKey {
                    batch: r.batch.clone(),
                    plate: r.plate.clone(),
                    well: r.well(),
                    site_index: r.site,
                },
                cell_line: r.cell_line.clone(),
                image_path: String::new(),
                is_control: r.is_control,
            });
        }
        let manifest = ExperimentManifest {
            config_digest: String::new(),
            cell_lines: lines.into_values().collect(),
            sites: sites.into_values().collect(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// CSV text: the metadata columns, then one column per feature, floats
    /// in scientific notation with 9 significant digits.
    pub fn to_csv_string(&self) -> String {
        let mut out = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = METADATA_COLUMNS
            .iter()
            .copied()
            .chain(self.feature_names.iter().map(String::as_str))
            .collect();
        out.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.key.clone(),
                r.batch.clone(),
                r.plate.clone(),
                r.row.to_string(),
                r.col.to_string(),
                r.site.to_string(),
                r.cell_line.clone(),
                r.condition.as_str().to_string(),
                r.lab_source.as_str().to_string(),
                r.is_control.to_string(),
            ];
            rec.extend(r.values.iter().map(|v| format!("{v:.8e}")));
            out.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(out.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Format(format!("features header: {e}")))?
            .clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < METADATA_COLUMNS.len() || cols[..METADATA_COLUMNS.len()] != METADATA_COLUMNS {
            return Err(Error::Schema(format!(
                "features header must start with {}",
                METADATA_COLUMNS.join(",")
            )));
        }
        let feature_names: Vec<String> = cols[METADATA_COLUMNS.len()..]
            .iter()
            .map(|s| s.to_string())
            .collect();

        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row_no = i + 1;
            let rec = rec.map_err(|e| Error::Parse {
                row: row_no,
                column: String::new(),
                message: e.to_string(),
            })?;
            let field = |j: usize| rec.get(j).unwrap_or("");
            let parse_err = |j: usize, message: String| Error::Parse {
                row: row_no,
                column: cols[j].to_string(),
                message,
            };
            let int = |j: usize| -> Result<u64> {
                field(j)
                    .parse::<u64>()
                    .map_err(|e| parse_err(j, format!("{:?}: {e}", field(j))))
            };
            let condition = Condition::parse(field(7)).map_err(|e| parse_err(7, e.to_string()))?;
            let lab_source = LabSource::parse(field(8)).map_err(|e| parse_err(8, e.to_string()))?;
            let is_control = field(9)
                .parse::<bool>()
                .map_err(|e| parse_err(9, format!("{:?}: {e}", field(9))))?;
            let values = (METADATA_COLUMNS.len()..cols.len())
                .map(|j| {
                    field(j)
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| parse_err(j, format!("non-numeric value {:?}", field(j))))
                })
                .collect::<Result<Vec<f64>>>()?;
            let narrow = |j: usize, v: u64, max: u64| {
                if v > max {
                    Err(parse_err(j, format!("{v} out of range")))
                } else {
                    Ok(v)
                }
            };
            rows.push(FeatureRow {
                key: field(0).to_string(),
                batch: field(1).to_string(),
                plate: field(2).to_string(),
                row: narrow(3, int(3)?, 7)? as u8,
                col: narrow(4, int(4)?, 11)? as u8,
                site: narrow(5, int(5)?, u32::MAX as u64)? as u32,
                cell_line: field(6).to_string(),
                condition,
                lab_source,
                is_control,
                values,
            });
        }
        Self::new(feature_names, rows)
    }
}

/// Reads an externally computed embedding CSV (first column the row key,
/// the rest numeric) and joins it to `manifest` metadata. Keys are site ids
/// or `site#k` patch ids.
pub fn import_external_embeddings(path: &Path, manifest: &ExperimentManifest) -> Result<FeatureTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    if header.len() < 2 {
        return Err(Error::Schema(format!(
            "{}: need a key column and at least one numeric column",
            path.display()
        )));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();

    let sites: BTreeMap<String, &SiteRecord> =
        manifest.sites.iter().map(|s| (s.key.id(), s)).collect();
    let lines = manifest.cell_line_map();
    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row_no = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row: row_no,
            column: String::new(),
            message: e.to_string(),
        })?;
        let key = rec.get(0).unwrap_or("").to_string();
        let values = (1..header.len())
            .map(|j| {
                let cell = rec.get(j).unwrap_or("");
                cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                    row: row_no,
                    column: header[j].to_string(),
                    message: format!("non-numeric value {cell:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let site_id = key.split('#').next().unwrap_or("");
        match sites.get(site_id) {
            Some(site) => {
                let line = lines
                    .get(site.cell_line.as_str())
                    .ok_or_else(|| Error::Validation(format!("unknown cell line {:?}", site.cell_line)))?;
                rows.push(FeatureRow::new(key, site, line, values));
            }
            None => unmatched.push(key),
        }
    }
    if !unmatched.is_empty() {
        let shown: Vec<&str> = unmatched.iter().take(5).map(String::as_str).collect();
        return Err(Error::Join(format!(
            "{} embedding rows have no matching manifest site (e.g. {})",
            unmatched.len(),
            shown.join(", ")
        )));
    }
    FeatureTable::new(names, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{SimConfig, Simulation};
    use std::io::Write;

    fn manifest() -> ExperimentManifest {
        let cfg = SimConfig {
            batches: 1,
            plates_per_batch: 1,
            sites_per_well: 1,
            ..SimConfig::default()
        };
        Simulation::new(cfg).unwrap().manifest().clone()
    }

    fn table(m: &ExperimentManifest, n: usize) -> FeatureTable {
        let rows = m.sites[..n]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let line = m.cell_line(&s.cell_line).unwrap();
                let values = vec![i as f64 * 0.1, 1.0 / (i as f64 + 3.0), -2.5e-7 * i as f64];
                FeatureRow::new(s.key.id(), s, line, values)
            })
            .collect();
        FeatureTable::new(vec!["f000".into(), "f001".into(), "f002".into()], rows).unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let m = manifest();
        let t = table(&m, 10);
        let text = t.to_csv_string();
        assert!(text.starts_with("key,batch,plate,row,col,site,cell_line,condition,lab_source,is_control,f000"));
        let back = FeatureTable::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(back.rows.len(), 10);
        for (a, b) in t.rows.iter().zip(&back.rows) {
            assert_eq!(a.key, b.key);
            assert_eq!(a.cell_line, b.cell_line);
            for (x, y) in a.values.iter().zip(&b.values) {
                // 9 significant digits.
                assert!((x - y).abs() <= 5e-9 * x.abs());
            }
        }
        assert_eq!(back.to_csv_string(), text);
    }

    #[test]
    fn rows_sorted_and_unique() {
        let m = manifest();
        let mut t = table(&m, 5);
        let keys: Vec<_> = t.rows.iter().map(|r| r.key.clone()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        t.rows.push(t.rows[0].clone());
        assert!(FeatureTable::new(t.feature_names.clone(), t.rows).is_err());
    }

    #[test]
    fn bad_numeric_cell_names_row_and_column() {
        let m = manifest();
        let text = table(&m, 3).to_csv_string().replacen("e-1,", "e-1x,", 1);
        match FeatureTable::from_csv_reader(text.as_bytes()) {
            Err(Error::Parse { row, column, .. }) => {
                assert!(row >= 1);
                assert!(column.starts_with('f'));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn external_import() {
        let m = manifest();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "key,e0,e1,e2,e3,e4,e5,e6,e7").unwrap();
        for s in &m.sites[..3] {
            writeln!(f, "{},1,2,3,4,5,6,7,8.5", s.key.id()).unwrap();
        }
        drop(f);
        let t = import_external_embeddings(&path, &m).unwrap();
        assert_eq!((t.len(), t.width()), (3, 8));
        assert_eq!(t.rows[0].values[7], 8.5);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "key,e0\nb9/p9/A01/s0,1\n").unwrap();
        assert!(matches!(import_external_embeddings(&bad, &m), Err(Error::Join(_))));

        let nonnum = dir.path().join("nonnum.csv");
        std::fs::write(&nonnum, format!("key,e0,e1\n{},1,abc\n", m.sites[0].key.id())).unwrap();
        match import_external_embeddings(&nonnum, &m) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "e1");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_view_builds_folds() {
        let m = manifest();
        let t = table(&m, 96);
        let view = t.to_manifest().unwrap();
        assert_eq!(view.sites.len(), 96);
        assert_eq!(view.cell_lines.len(), 24);
    }

    #[test]
    fn metadata_plate_is_qualified() {
        let m = manifest();
        let t = table(&m, 1);
        assert_eq!(t.rows[0].metadata("plate").unwrap(), "b0/p0");
        assert!(t.metadata_column("nope").is_err());
    }
}
