//! Sample-table data model, CSV format and stratified fold planning.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Electrode channels per recording.
pub const N_CHANNELS: usize = 60;
/// Channel features plus the time column.
pub const N_MEA_FEATURES: usize = N_CHANNELS + 1;
pub const N_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    Control,
    #[serde(rename = "DENV2")]
    Denv2,
    #[serde(rename = "ZIKV")]
    Zikv,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; N_CLASSES] =
        [ClassLabel::Control, ClassLabel::Denv2, ClassLabel::Zikv];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Control => "Control",
            ClassLabel::Denv2 => "DENV2",
            ClassLabel::Zikv => "ZIKV",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "Control" => Ok(ClassLabel::Control),
            "DENV2" => Ok(ClassLabel::Denv2),
            "ZIKV" => Ok(ClassLabel::Zikv),
            other => Err(format!("unknown label token {other:?}")),
        }
    }
}

/// Recording day, in days post-infection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Dpi(u8);

impl Dpi {
    pub const VALID: [u8; 5] = [0, 1, 2, 3, 7];

    pub fn new(day: u8) -> Result<Self> {
        if Self::VALID.contains(&day) {
            Ok(Dpi(day))
        } else {
            Err(Error::invalid(format!(
                "dpi must be one of {:?}, got {day}",
                Self::VALID
            )))
        }
    }

    pub fn all() -> [Dpi; 5] {
        Self::VALID.map(Dpi)
    }

    pub fn day(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Dpi {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Dpi::new(v).map_err(|e| e.to_string())
    }
}

impl From<Dpi> for u8 {
    fn from(d: Dpi) -> u8 {
        d.0
    }
}

impl fmt::Display for Dpi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Column names of the raw MEA schema: `ch01..ch60,time`.
pub fn mea_columns() -> Vec<String> {
    (1..=N_CHANNELS)
        .map(|c| format!("ch{c:02}"))
        .chain(std::iter::once("time".to_string()))
        .collect()
}

/// Row-major sample matrix with one label per row and one dpi tag per table.
///
/// The width is free so the same type carries raw 61-column tables, PCA
/// scores and CNN embeddings; the CSV loader is what enforces the raw schema.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    columns: Vec<String>,
    features: Vec<f64>,
    labels: Vec<ClassLabel>,
    dpi: Dpi,
}

impl FeatureTable {
    pub fn new(
        columns: Vec<String>,
        features: Vec<f64>,
        labels: Vec<ClassLabel>,
        dpi: Dpi,
    ) -> Result<Self> {
        let width = columns.len();
        if width == 0 {
            return Err(Error::invalid("feature table needs at least one column"));
        }
        if features.len() != width * labels.len() {
            return Err(Error::DimensionMismatch {
                expected: width * labels.len(),
                actual: features.len(),
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at row {}, column {}",
                i / width,
                columns[i % width]
            )));
        }
        Ok(FeatureTable {
            columns,
            features,
            labels,
            dpi,
        })
    }

    /// Table with generated column names `<prefix>01, <prefix>02, ...`.
    pub fn with_prefix(
        prefix: &str,
        width: usize,
        features: Vec<f64>,
        labels: Vec<ClassLabel>,
        dpi: Dpi,
    ) -> Result<Self> {
        let columns = (1..=width).map(|j| format!("{prefix}{j:02}")).collect();
        Self::new(columns, features, labels, dpi)
    }

    pub fn empty_mea(dpi: Dpi) -> Self {
        FeatureTable {
            columns: mea_columns(),
            features: Vec::new(),
            labels: Vec::new(),
            dpi,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }

    pub fn dpi(&self) -> Dpi {
        self.dpi
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_features();
        &self.features[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.n_features())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut counts = [0; N_CLASSES];
        for l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }

    /// New table holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> FeatureTable {
        let w = self.n_features();
        let mut features = Vec::with_capacity(rows.len() * w);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        FeatureTable {
            columns: self.columns.clone(),
            features,
            labels,
            dpi: self.dpi,
        }
    }

    /// Same labels and dpi, new feature matrix.
    pub fn with_features(&self, columns: Vec<String>, features: Vec<f64>) -> Result<FeatureTable> {
        FeatureTable::new(columns, features, self.labels.clone(), self.dpi)
    }

    /// Concatenates tables with identical columns. The dpi of the first table
    /// is kept.
    pub fn concat(tables: &[FeatureTable]) -> Result<FeatureTable> {
        let first = tables
            .first()
            .ok_or(Error::Empty("no tables to concatenate"))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for t in tables {
            if t.columns != first.columns {
                return Err(Error::invalid(
                    "cannot concatenate tables with different columns",
                ));
            }
            features.extend_from_slice(&t.features);
            labels.extend_from_slice(&t.labels);
        }
        FeatureTable::new(first.columns.clone(), features, labels, first.dpi)
    }
}

/// Conventional file name `<class-mix>_dpi<d>.csv` for a table.
pub fn table_file_name(table: &FeatureTable) -> String {
    let counts = table.class_counts();
    let mix: Vec<String> = ClassLabel::ALL
        .iter()
        .filter(|c| counts[c.index()] > 0)
        .map(|c| c.as_str().to_ascii_lowercase())
        .collect();
    let mix = if mix.is_empty() {
        "empty".to_string()
    } else {
        mix.join("-")
    };
    format!("{mix}_dpi{}.csv", table.dpi())
}

/// Loads a raw MEA table (`ch01..ch60,time,label`).
pub fn load_feature_table(path: &Path, dpi: Dpi) -> Result<FeatureTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::with_capacity(1 << 20, file));
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let header = reader.headers()?.clone();
    let expected = mea_columns();
    let n_header_features = header.len().saturating_sub(1);
    if n_header_features != N_MEA_FEATURES {
        return Err(parse_err(
            1,
            format!(
                "expected {N_MEA_FEATURES} feature columns plus label, found {n_header_features}"
            ),
        ));
    }
    for (j, name) in expected
        .iter()
        .chain(std::iter::once(&"label".to_string()))
        .enumerate()
    {
        if &header[j] != name {
            return Err(parse_err(
                1,
                format!(
                    "column {} should be {name:?}, found {:?}",
                    j + 1,
                    &header[j]
                ),
            ));
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut record = csv::StringRecord::new();
    while reader.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != N_MEA_FEATURES + 1 {
            return Err(parse_err(
                line,
                format!(
                    "expected {} fields, found {}",
                    N_MEA_FEATURES + 1,
                    record.len()
                ),
            ));
        }
        for j in 0..N_MEA_FEATURES {
            let v: f64 = record[j].trim().parse().map_err(|_| {
                parse_err(
                    line,
                    format!("bad number {:?} in column {}", &record[j], expected[j]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("non-finite value in column {}", expected[j]),
                ));
            }
            features.push(v);
        }
        let label = record[N_MEA_FEATURES]
            .trim()
            .parse::<ClassLabel>()
            .map_err(|m| parse_err(line, m))?;
        labels.push(label);
    }
    FeatureTable::new(expected, features, labels, dpi)
}

/// Writes `table` as CSV with a `label` column appended. Values use Rust's
/// shortest round-trip float formatting, so loading gives back identical bits.
pub fn save_feature_table(table: &FeatureTable, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new().from_writer(BufWriter::with_capacity(1 << 20, file));
    let mut header: Vec<&str> = table.columns.iter().map(String::as_str).collect();
    header.push("label");
    writer.write_record(&header)?;
    let mut buf: Vec<String> = Vec::with_capacity(table.n_features() + 1);
    for (row, label) in table.rows().zip(&table.labels) {
        buf.clear();
        buf.extend(row.iter().map(|v| v.to_string()));
        buf.push(label.as_str().to_string());
        writer.write_record(&buf)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Assignment of every row to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified k-fold assignment.
///
/// Rows of each class are shuffled and dealt round-robin over the folds. Each
/// class starts dealing where the previous class stopped, so total fold sizes
/// also differ by at most one. Classes absent from the table are ignored.
pub fn stratified_kfold(table: &FeatureTable, k: usize, seed: u64) -> Result<FoldPlan> {
    stratified_kfold_labels(table.labels(), k, seed)
}

pub fn stratified_kfold_labels(labels: &[ClassLabel], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    for (c, rows) in by_class.iter().enumerate() {
        if !rows.is_empty() && rows.len() < k {
            return Err(Error::invalid(format!(
                "class {} has {} rows, fewer than k = {k}",
                ClassLabel::ALL[c],
                rows.len()
            )));
        }
    }
    if labels.is_empty() {
        return Err(Error::Empty("cannot fold an empty table"));
    }

    let mut assignments = vec![usize::MAX; labels.len()];
    let mut offset = 0;
    for (c, rows) in by_class.iter_mut().enumerate() {
        let mut rng = rng::stream(seed, &[0xF01D, c as u64]);
        rows.shuffle(&mut rng);
        for (j, &r) in rows.iter().enumerate() {
            assignments[r] = (offset + j) % k;
        }
        offset = (offset + rows.len()) % k;
    }
    Ok(FoldPlan {
        k,
        assignments,
        seed,
    })
}

/// Row indices of one cross-validation round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Test rows are fold `i`, validation rows fold `(i + 1) mod k`, training rows
/// everything else. Row order inside each part follows the table.
pub fn split_indices(plan: &FoldPlan, i: usize) -> Result<SplitIndices> {
    if i >= plan.k {
        return Err(Error::invalid(format!(
            "fold index {i} out of range for k = {}",
            plan.k
        )));
    }
    let val_fold = (i + 1) % plan.k;
    let mut split = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (r, &f) in plan.assignments.iter().enumerate() {
        if f == i {
            split.test.push(r);
        } else if f == val_fold {
            split.val.push(r);
        } else {
            split.train.push(r);
        }
    }
    Ok(split)
}

#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train: FeatureTable,
    pub val: FeatureTable,
    pub test: FeatureTable,
    pub indices: SplitIndices,
}

pub fn materialize_fold(table: &FeatureTable, plan: &FoldPlan, i: usize) -> Result<FoldSplit> {
    if plan.assignments.len() != table.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: table.n_rows(),
            actual: plan.assignments.len(),
        });
    }
    let indices = split_indices(plan, i)?;
    Ok(FoldSplit {
        train: table.select(&indices.train),
        val: table.select(&indices.val),
        test: table.select(&indices.test),
        indices,
    })
}
