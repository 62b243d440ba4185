//! On-disk artifacts: feature tables, triplet lists, score matrices, reports.
//!
//! Formats are plain text and deterministic. Reals are written with
//! round-trip-exact decimal formatting, so every save/load pair is the
//! identity. Lines starting with `#` are headers (config fingerprints) and
//! are skipped by the parsers.

mod synth;

pub use synth::{synth_dataset, SynthData, SynthSpec, ATTRIBUTE_POOL};

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}:{line}: dimension mismatch: expected {expected}, got {got}")]
    Dimension { path: String, line: usize, expected: usize, got: usize },
    #[error("duplicate id `{id}`")]
    DuplicateId { id: String },
    #[error("id `{id}` does not resolve in the feature store")]
    UnresolvedId { id: String },
    #[error("invalid value: {0}")]
    Invalid(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DatastoreError {
    DatastoreError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DatastoreError {
    DatastoreError::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

/// Item category. The fixed set mirrors the three retrieval tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Shirt,
    Dress,
    Toptee,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Shirt, Category::Dress, Category::Toptee];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Shirt => "shirt",
            Category::Dress => "dress",
            Category::Toptee => "toptee",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = DatastoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shirt" => Ok(Category::Shirt),
            "dress" => Ok(Category::Dress),
            "toptee" => Ok(Category::Toptee),
            other => Err(DatastoreError::Invalid(format!("unknown category `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One precomputed embedding, keyed by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub id: String,
    pub category: Category,
    pub values: Vec<f64>,
}

/// Set of feature vectors sharing one dimension, in file order.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    items: Vec<FeatureVector>,
    index: HashMap<String, usize>,
    dim: Option<usize>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, fv: FeatureVector) -> Result<(), DatastoreError> {
        if let Some(dim) = self.dim {
            if fv.values.len() != dim {
                return Err(DatastoreError::Invalid(format!(
                    "feature `{}` has dim {}, store has dim {dim}",
                    fv.id,
                    fv.values.len()
                )));
            }
        } else {
            self.dim = Some(fv.values.len());
        }
        if fv.values.iter().any(|v| !v.is_finite()) {
            return Err(DatastoreError::Invalid(format!("feature `{}` has non-finite values", fv.id)));
        }
        if self.index.contains_key(&fv.id) {
            return Err(DatastoreError::DuplicateId { id: fv.id });
        }
        self.index.insert(fv.id.clone(), self.items.len());
        self.items.push(fv);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&FeatureVector> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn require(&self, id: &str) -> Result<&FeatureVector, DatastoreError> {
        self.get(id).ok_or_else(|| DatastoreError::UnresolvedId { id: id.to_string() })
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureVector> {
        self.items.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|f| f.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Undefined until the first insert.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }
}

/// One training or evaluation query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub candidate_id: String,
    pub target_id: String,
    pub captions: Vec<String>,
    pub category: Category,
    pub split: Split,
}

/// Similarity of every query against every gallery item, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
    values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(
        query_ids: Vec<String>,
        gallery_ids: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self, DatastoreError> {
        if query_ids.is_empty() || gallery_ids.is_empty() {
            return Err(DatastoreError::Invalid("score matrix must be at least 1x1".into()));
        }
        if values.len() != query_ids.len() * gallery_ids.len() {
            return Err(DatastoreError::Invalid(format!(
                "score matrix {}x{} expects {} values, got {}",
                query_ids.len(),
                gallery_ids.len(),
                query_ids.len() * gallery_ids.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(DatastoreError::Invalid("score matrix contains NaN".into()));
        }
        Ok(ScoreMatrix { query_ids, gallery_ids, values })
    }

    pub fn n_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn n_gallery(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let g = self.gallery_ids.len();
        &self.values[i * g..(i + 1) * g]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Keeps only the rows at `rows`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<ScoreMatrix, DatastoreError> {
        let g = self.gallery_ids.len();
        let mut values = Vec::with_capacity(rows.len() * g);
        let mut query_ids = Vec::with_capacity(rows.len());
        for &r in rows {
            query_ids.push(self.query_ids[r].clone());
            values.extend_from_slice(self.row(r));
        }
        ScoreMatrix::new(query_ids, self.gallery_ids.clone(), values)
    }
}

/// Per-category recall percentages plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// The two cutoffs, smallest first.
    pub k: (usize, usize),
    /// category -> [recall@k.0, recall@k.1], in percent.
    pub categories: std::collections::BTreeMap<Category, [f64; 2]>,
    /// Arithmetic mean of all per-category entries.
    pub average: f64,
}

impl RecallReport {
    pub fn from_categories(
        k: (usize, usize),
        categories: std::collections::BTreeMap<Category, [f64; 2]>,
    ) -> Self {
        let mut sum = 0.0;
        let mut n = 0usize;
        for vals in categories.values() {
            sum += vals[0] + vals[1];
            n += 2;
        }
        let average = sum / n as f64;
        RecallReport { k, categories, average }
    }

    /// Plain-text table for standard output.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10}{:>10}{:>10}\n", "category", format!("R@{}", self.k.0), format!("R@{}", self.k.1)));
        for (cat, vals) in &self.categories {
            out.push_str(&format!("{:<10}{:>10.2}{:>10.2}\n", cat.to_string(), vals[0], vals[1]));
        }
        out.push_str(&format!("{:<10}{:>10.2}\n", "average", self.average));
        out
    }
}

fn format_reals(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 8);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("{v}"));
    }
    s
}

/// Loads a feature table: `id<TAB>category<TAB>v1,v2,...,vd` per line.
pub fn load_feature_store(path: &Path) -> Result<FeatureStore, DatastoreError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut store = FeatureStore::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (id, cat_s, vals_s) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(parse_err(path, lineno, "expected id<TAB>category<TAB>values")),
        };
        if fields.next().is_some() {
            return Err(parse_err(path, lineno, "too many fields"));
        }
        let category: Category = cat_s
            .parse()
            .map_err(|e: DatastoreError| parse_err(path, lineno, e.to_string()))?;
        let values: Vec<f64> = vals_s
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| parse_err(path, lineno, format!("bad real `{v}`: {e}")))
            })
            .collect::<Result<_, _>>()?;
        if let Some(dim) = store.dim() {
            if values.len() != dim {
                return Err(DatastoreError::Dimension {
                    path: path.display().to_string(),
                    line: lineno,
                    expected: dim,
                    got: values.len(),
                });
            }
        }
        store
            .insert(FeatureVector { id: id.to_string(), category, values })
            .map_err(|e| match e {
                DatastoreError::DuplicateId { id } => DatastoreError::DuplicateId { id },
                other => parse_err(path, lineno, other.to_string()),
            })?;
    }
    Ok(store)
}

pub fn save_feature_store(
    path: &Path,
    store: &FeatureStore,
    config_hash: u64,
) -> Result<(), DatastoreError> {
    let mut out = String::new();
    out.push_str(&format!("# cir-features config_hash={config_hash:016x}\n"));
    for fv in store.iter() {
        out.push_str(&format!("{}\t{}\t{}\n", fv.id, fv.category, format_reals(&fv.values)));
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Loads triplets from JSON Lines. The first line may be a
/// `{"config_hash": "..."}` header.
pub fn load_triplets(path: &Path) -> Result<Vec<TripletRecord>, DatastoreError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        if lineno == 1 {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
                if v.get("config_hash").is_some() && v.get("candidate_id").is_none() {
                    continue;
                }
            }
        }
        let rec: TripletRecord = serde_json::from_str(line)
            .map_err(|e| parse_err(path, lineno, format!("bad triplet record: {e}")))?;
        if rec.captions.is_empty() {
            return Err(parse_err(path, lineno, "captions must be non-empty"));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn save_triplets(
    path: &Path,
    records: &[TripletRecord],
    config_hash: u64,
) -> Result<(), DatastoreError> {
    let mut out = String::new();
    out.push_str(&format!("{{\"config_hash\":\"{config_hash:016x}\"}}\n"));
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("triplet serialization"));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Referential integrity: all triplet ids resolve and captions are present.
pub fn validate_triplets(
    store: &FeatureStore,
    records: &[TripletRecord],
) -> Result<(), DatastoreError> {
    for rec in records {
        store.require(&rec.candidate_id)?;
        store.require(&rec.target_id)?;
        if rec.captions.is_empty() || rec.captions.iter().any(|c| c.trim().is_empty()) {
            return Err(DatastoreError::Invalid(format!(
                "triplet {} -> {} has an empty caption",
                rec.candidate_id, rec.target_id
            )));
        }
    }
    Ok(())
}

/// Saves a score matrix: a header row of gallery ids, then one
/// `query_id<TAB>s1<TAB>...<TAB>sg` row per query.
pub fn save_score_matrix(
    path: &Path,
    m: &ScoreMatrix,
    config_hash: u64,
) -> Result<(), DatastoreError> {
    let mut out = String::new();
    out.push_str(&format!("# cir-scores config_hash={config_hash:016x}\n"));
    out.push_str(&m.gallery_ids.join("\t"));
    out.push('\n');
    for (i, q) in m.query_ids.iter().enumerate() {
        out.push_str(q);
        for v in m.row(i) {
            out.push('\t');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load_score_matrix(path: &Path) -> Result<ScoreMatrix, DatastoreError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut gallery_ids: Option<Vec<String>> = None;
    let mut query_ids = Vec::new();
    let mut values = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match &gallery_ids {
            None => {
                gallery_ids = Some(line.split('\t').map(String::from).collect());
            }
            Some(gal) => {
                let mut fields = line.split('\t');
                let q = fields
                    .next()
                    .ok_or_else(|| parse_err(path, lineno, "empty row"))?;
                let row: Vec<f64> = fields
                    .map(|v| {
                        v.parse::<f64>()
                            .map_err(|e| parse_err(path, lineno, format!("bad real `{v}`: {e}")))
                    })
                    .collect::<Result<_, _>>()?;
                if row.len() != gal.len() {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("row has {} values, header has {} gallery ids", row.len(), gal.len()),
                    ));
                }
                query_ids.push(q.to_string());
                values.extend(row);
            }
        }
    }
    let gallery_ids =
        gallery_ids.ok_or_else(|| parse_err(path, 1, "missing gallery header row"))?;
    ScoreMatrix::new(query_ids, gallery_ids, values)
}

pub fn save_report(
    path: &Path,
    report: &RecallReport,
    config_hash: u64,
) -> Result<(), DatastoreError> {
    #[derive(Serialize)]
    struct Out<'a> {
        config_hash: String,
        #[serde(flatten)]
        report: &'a RecallReport,
    }
    let payload = Out { config_hash: format!("{config_hash:016x}"), report };
    let json = serde_json::to_string_pretty(&payload).expect("report serialization");
    fs::write(path, json + "\n").map_err(|e| io_err(path, e))
}
