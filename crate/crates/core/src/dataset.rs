//! Multi-view datasets with entry-, view- and label-level missingness.
//!
//! Missing entries are stored as NaN in memory and as empty cells on disk, but the
//! boolean mask is the only thing inference ever consults. A sample whose mask row
//! is all-false for a view has that whole view missing.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BionicError, Result};

/// Magic prefix of the binary matrix format.
pub const BMV_MAGIC: &[u8; 4] = b"BMV1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Structured,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub name: String,
    pub kind: ViewKind,
    pub dim: usize,
    pub feature_names: Vec<String>,
}

impl ViewSpec {
    pub fn new(name: impl Into<String>, kind: ViewKind, dim: usize) -> Self {
        ViewSpec {
            name: name.into(),
            kind,
            dim,
            feature_names: (0..dim).map(|j| format!("f{j}")).collect(),
        }
    }
}

/// Values and observation mask of one view. `mask[(n, j)] == true` means observed.
#[derive(Debug, Clone)]
pub struct ViewBlock {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl ViewBlock {
    /// Builds a block, overwriting every unobserved position with the NaN sentinel.
    pub fn new(mut values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(BionicError::validation(format!(
                "values {:?} and mask {:?} differ in shape",
                values.shape(),
                mask.shape()
            )));
        }
        for (v, &m) in values.iter_mut().zip(mask.iter()) {
            if m {
                if !v.is_finite() {
                    return Err(BionicError::validation("non-finite value at an observed position"));
                }
            } else {
                *v = f64::NAN;
            }
        }
        Ok(ViewBlock { values, mask })
    }

    /// Mask derived from finiteness: NaN entries are missing.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_infinite()) {
            return Err(BionicError::validation("infinite value in view"));
        }
        let mask = values.map(|v| v.is_finite());
        ViewBlock::new(values, mask)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn row_observed(&self, n: usize) -> bool {
        (0..self.ncols()).any(|j| self.mask[(n, j)])
    }

    fn select_rows(&self, rows: &[usize]) -> ViewBlock {
        ViewBlock {
            values: DMatrix::from_fn(rows.len(), self.ncols(), |i, j| self.values[(rows[i], j)]),
            mask: DMatrix::from_fn(rows.len(), self.ncols(), |i, j| self.mask[(rows[i], j)]),
        }
    }

    fn same_bits(&self, other: &ViewBlock) -> bool {
        self.mask == other.mask
            && self.values.shape() == other.values.shape()
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .zip(self.mask.iter())
                .all(|((a, b), &m)| !m || a.to_bits() == b.to_bits())
    }
}

/// One-hot labels with a per-sample labeled flag.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBlock {
    onehot: DMatrix<f64>,
    label_mask: Vec<bool>,
}

impl LabelBlock {
    pub fn from_classes(classes: &[Option<usize>], n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(BionicError::validation("at least two classes are required"));
        }
        let mut onehot = DMatrix::zeros(classes.len(), n_classes);
        let mut label_mask = Vec::with_capacity(classes.len());
        for (n, c) in classes.iter().enumerate() {
            match *c {
                Some(c) if c >= n_classes => {
                    return Err(BionicError::validation(format!(
                        "label {c} outside 0..{}",
                        n_classes - 1
                    )))
                }
                Some(c) => {
                    onehot[(n, c)] = 1.0;
                    label_mask.push(true);
                }
                None => label_mask.push(false),
            }
        }
        Ok(LabelBlock { onehot, label_mask })
    }

    pub fn unlabeled(n: usize, n_classes: usize) -> Result<Self> {
        LabelBlock::from_classes(&vec![None; n], n_classes)
    }

    pub fn onehot(&self) -> &DMatrix<f64> {
        &self.onehot
    }

    pub fn label_mask(&self) -> &[bool] {
        &self.label_mask
    }

    pub fn n_classes(&self) -> usize {
        self.onehot.ncols()
    }

    pub fn class_of(&self, n: usize) -> Option<usize> {
        if !self.label_mask[n] {
            return None;
        }
        (0..self.n_classes()).find(|&c| self.onehot[(n, c)] == 1.0)
    }

    pub fn classes(&self) -> Vec<Option<usize>> {
        (0..self.label_mask.len()).map(|n| self.class_of(n)).collect()
    }
}

/// Observations of a single sample: raw row values and masks per view.
#[derive(Debug, Clone)]
pub struct Sample {
    pub values: Vec<DVector<f64>>,
    pub masks: Vec<Vec<bool>>,
}

impl Sample {
    pub fn is_observed(&self, view: usize) -> bool {
        self.masks[view].iter().any(|&m| m)
    }
}

#[derive(Debug, Clone)]
pub struct MultiViewDataset {
    specs: Vec<ViewSpec>,
    blocks: Vec<ViewBlock>,
    labels: LabelBlock,
    ids: Vec<String>,
}

impl MultiViewDataset {
    /// Checks structural invariants. Coverage (every sample has a view) is checked
    /// by [`validate_dataset`].
    pub fn new(
        specs: Vec<ViewSpec>,
        blocks: Vec<ViewBlock>,
        labels: LabelBlock,
        ids: Vec<String>,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(BionicError::validation("dataset needs at least one view"));
        }
        if specs.len() != blocks.len() {
            return Err(BionicError::validation("view spec and block counts differ"));
        }
        let n = ids.len();
        let mut names = HashSet::new();
        for (spec, block) in specs.iter().zip(&blocks) {
            if !names.insert(spec.name.as_str()) {
                return Err(BionicError::validation(format!("duplicate view name '{}'", spec.name)));
            }
            if spec.dim == 0 {
                return Err(BionicError::validation(format!("view '{}' has zero features", spec.name)));
            }
            if spec.feature_names.len() != spec.dim {
                return Err(BionicError::validation(format!(
                    "view '{}' feature name count differs from dim",
                    spec.name
                )));
            }
            if block.nrows() != n {
                return Err(BionicError::validation(format!(
                    "row-count mismatch: view '{}' has {} rows, expected {n}",
                    spec.name,
                    block.nrows()
                )));
            }
            if block.ncols() != spec.dim {
                return Err(BionicError::validation(format!(
                    "view '{}' has {} columns, spec says {}",
                    spec.name,
                    block.ncols(),
                    spec.dim
                )));
            }
        }
        if labels.label_mask.len() != n {
            return Err(BionicError::validation("label block row count differs from sample count"));
        }
        for r in 0..n {
            let s: f64 = labels.onehot.row(r).sum();
            if labels.label_mask[r] && s != 1.0 {
                return Err(BionicError::validation(format!("labeled row {r} is not one-hot")));
            }
            if !labels.label_mask[r] && s != 0.0 {
                return Err(BionicError::validation(format!("unlabeled row {r} is not all-zero")));
            }
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(BionicError::validation(format!("duplicate sample identifier '{id}'")));
            }
        }
        Ok(MultiViewDataset {
            specs,
            blocks,
            labels,
            ids,
        })
    }

    /// Convenience constructor with ids "0".."n-1".
    pub fn with_default_ids(specs: Vec<ViewSpec>, blocks: Vec<ViewBlock>, labels: LabelBlock) -> Result<Self> {
        let n = labels.label_mask.len();
        MultiViewDataset::new(specs, blocks, labels, (0..n).map(|i| i.to_string()).collect())
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn n_views(&self) -> usize {
        self.specs.len()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.n_classes()
    }

    pub fn specs(&self) -> &[ViewSpec] {
        &self.specs
    }

    pub fn blocks(&self) -> &[ViewBlock] {
        &self.blocks
    }

    pub fn block(&self, m: usize) -> &ViewBlock {
        &self.blocks[m]
    }

    pub fn labels(&self) -> &LabelBlock {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn sample(&self, n: usize) -> Sample {
        Sample {
            values: self.blocks.iter().map(|b| b.values.row(n).transpose()).collect(),
            masks: self
                .blocks
                .iter()
                .map(|b| (0..b.ncols()).map(|j| b.mask[(n, j)]).collect())
                .collect(),
        }
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.labels.label_mask[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.labels.label_mask[i]).collect()
    }

    /// Same inputs with every label hidden.
    pub fn without_labels(&self) -> MultiViewDataset {
        MultiViewDataset {
            specs: self.specs.clone(),
            blocks: self.blocks.clone(),
            labels: LabelBlock::unlabeled(self.n(), self.n_classes()).expect("n_classes >= 2"),
            ids: self.ids.clone(),
        }
    }

    pub fn with_labels(&self, labels: LabelBlock) -> Result<MultiViewDataset> {
        MultiViewDataset::new(self.specs.clone(), self.blocks.clone(), labels, self.ids.clone())
    }

    /// Row-wise concatenation. Views must match by name, kind and dimension.
    pub fn concat(&self, other: &MultiViewDataset) -> Result<MultiViewDataset> {
        if self.n_views() != other.n_views() {
            return Err(BionicError::validation("cannot concatenate datasets with different view counts"));
        }
        for (a, b) in self.specs.iter().zip(&other.specs) {
            if a.name != b.name || a.kind != b.kind || a.dim != b.dim {
                return Err(BionicError::validation(format!(
                    "view '{}' does not match '{}' for concatenation",
                    a.name, b.name
                )));
            }
        }
        if self.n_classes() != other.n_classes() {
            return Err(BionicError::validation("class counts differ"));
        }
        let n1 = self.n();
        let n = n1 + other.n();
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| {
                let d = a.ncols();
                ViewBlock {
                    values: DMatrix::from_fn(n, d, |i, j| if i < n1 { a.values[(i, j)] } else { b.values[(i - n1, j)] }),
                    mask: DMatrix::from_fn(n, d, |i, j| if i < n1 { a.mask[(i, j)] } else { b.mask[(i - n1, j)] }),
                }
            })
            .collect();
        let mut classes = self.labels.classes();
        classes.extend(other.labels.classes());
        let labels = LabelBlock::from_classes(&classes, self.n_classes())?;
        let mut ids = self.ids.clone();
        ids.extend(other.ids.iter().cloned());
        MultiViewDataset::new(self.specs.clone(), blocks, labels, ids)
    }

    /// Bitwise equality over specs, masks, observed values, labels and ids.
    pub fn same_content(&self, other: &MultiViewDataset) -> bool {
        self.specs == other.specs
            && self.ids == other.ids
            && self.labels == other.labels
            && self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.same_bits(b))
    }
}

/// Row-restricted copy. Indices must be in range and duplicate-free.
pub fn subset(d: &MultiViewDataset, rows: &[usize]) -> Result<MultiViewDataset> {
    let mut seen = HashSet::with_capacity(rows.len());
    for &r in rows {
        if r >= d.n() {
            return Err(BionicError::validation(format!("row index {r} out of range for {} samples", d.n())));
        }
        if !seen.insert(r) {
            return Err(BionicError::validation(format!("duplicate row index {r}")));
        }
    }
    let blocks = d.blocks.iter().map(|b| b.select_rows(rows)).collect();
    let classes: Vec<Option<usize>> = rows.iter().map(|&r| d.labels.class_of(r)).collect();
    let labels = LabelBlock::from_classes(&classes, d.n_classes())?;
    let ids = rows.iter().map(|&r| d.ids[r].clone()).collect();
    Ok(MultiViewDataset {
        specs: d.specs.clone(),
        blocks,
        labels,
        ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMissingness {
    pub name: String,
    /// Percentage of samples whose entire view is missing.
    pub view_missing_pct: f64,
    /// Percentage of missing entries among samples where the view is present.
    pub feature_missing_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n: usize,
    pub views: Vec<ViewMissingness>,
    pub label_coverage_pct: f64,
}

/// Summarizes missingness; a sample with no observed view is a hard error.
pub fn validate_dataset(d: &MultiViewDataset) -> Result<ValidationReport> {
    let n = d.n();
    for i in 0..n {
        if !d.blocks.iter().any(|b| b.row_observed(i)) {
            return Err(BionicError::validation(format!(
                "sample '{}' has no observed view",
                d.ids[i]
            )));
        }
    }
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 * 100.0 / den as f64 };
    let views = d
        .specs
        .iter()
        .zip(&d.blocks)
        .map(|(spec, b)| {
            let present: Vec<usize> = (0..n).filter(|&i| b.row_observed(i)).collect();
            let missing_entries: usize = present
                .iter()
                .map(|&i| (0..b.ncols()).filter(|&j| !b.mask[(i, j)]).count())
                .sum();
            ViewMissingness {
                name: spec.name.clone(),
                view_missing_pct: pct(n - present.len(), n),
                feature_missing_pct: pct(missing_entries, present.len() * b.ncols()),
            }
        })
        .collect();
    let labeled = d.labels.label_mask.iter().filter(|&&m| m).count();
    Ok(ValidationReport {
        n,
        views,
        label_coverage_pct: pct(labeled, n),
    })
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSource {
    pub name: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub kind: ViewKind,
    /// Required only when `path` is absent (a view missing for every row).
    #[serde(default)]
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub views: Vec<ViewSource>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub n_classes: Option<usize>,
}

struct RawTable {
    ids: Option<Vec<String>>,
    names: Vec<String>,
    values: DMatrix<f64>,
}

fn is_bmv(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("bmv") | Some("bin"))
}

fn read_csv_table(path: &Path) -> Result<RawTable> {
    let csv_err = |source| BionicError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(|e| BionicError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|s| s.trim().to_string()).collect();
    let has_id = header.first().map(|h| h == "id").unwrap_or(false);
    let names: Vec<String> = header.iter().skip(usize::from(has_id)).cloned().collect();
    if names.is_empty() {
        return Err(BionicError::validation(format!("{} has no feature columns", path.display())));
    }
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut nrows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(BionicError::validation(format!(
                "{}: row {} has {} cells, header has {}",
                path.display(),
                r + 1,
                rec.len(),
                header.len()
            )));
        }
        let mut cells = rec.iter();
        if has_id {
            ids.push(cells.next().unwrap_or("").trim().to_string());
        }
        for (j, cell) in cells.enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                data.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                BionicError::validation(format!(
                    "{}: non-numeric cell '{cell}' at row {}, column '{}'",
                    path.display(),
                    r + 1,
                    names[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(BionicError::validation(format!(
                    "{}: non-finite cell '{cell}' at row {}",
                    path.display(),
                    r + 1
                )));
            }
            data.push(v);
        }
        nrows += 1;
    }
    Ok(RawTable {
        ids: has_id.then_some(ids),
        values: DMatrix::from_row_slice(nrows, names.len(), &data),
        names,
    })
}

/// Reads a `BMV1` binary matrix: magic, u64 rows, u64 cols, row-major LE f64. NaN marks missing.
pub fn read_bmv(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| BionicError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| BionicError::io(path, e))?;
    if buf.len() < 20 || &buf[0..4] != BMV_MAGIC {
        return Err(BionicError::validation(format!("{}: not a BMV1 file", path.display())));
    }
    let rows = u64::from_le_bytes(buf[4..12].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| BionicError::validation("BMV1 dimensions overflow"))?;
    if buf.len() - 20 != expected {
        return Err(BionicError::validation(format!(
            "{}: payload has {} bytes, expected {expected}",
            path.display(),
            buf.len() - 20
        )));
    }
    let data: Vec<f64> = buf[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn write_bmv(path: &Path, values: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| BionicError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| BionicError::io(path, e));
    put(BMV_MAGIC)?;
    put(&(values.nrows() as u64).to_le_bytes())?;
    put(&(values.ncols() as u64).to_le_bytes())?;
    for i in 0..values.nrows() {
        for j in 0..values.ncols() {
            put(&values[(i, j)].to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| BionicError::io(path, e))
}

fn read_table(path: &Path) -> Result<RawTable> {
    if is_bmv(path) {
        let values = read_bmv(path)?;
        if values.iter().any(|v| v.is_infinite()) {
            return Err(BionicError::validation(format!("{}: infinite value", path.display())));
        }
        let names = (0..values.ncols()).map(|j| format!("f{j}")).collect();
        Ok(RawTable { ids: None, names, values })
    } else {
        read_csv_table(path)
    }
}

fn read_labels(path: &Path) -> Result<Vec<(String, Option<i64>)>> {
    let csv_err = |source| BionicError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(|e| BionicError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|s| s.trim().to_string()).collect();
    if header.len() != 2 || header[0] != "id" || header[1] != "label" {
        return Err(BionicError::validation(format!(
            "{}: label file header must be 'id,label'",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        let cell = rec.get(1).unwrap_or("").trim();
        let label = if cell.is_empty() {
            None
        } else {
            Some(cell.parse::<i64>().map_err(|_| {
                BionicError::validation(format!("{}: non-integer label '{cell}' at row {}", path.display(), r + 1))
            })?)
        };
        out.push((id, label));
    }
    Ok(out)
}

/// Loads and validates a dataset described by `config`.
pub fn load_dataset(config: &DatasetConfig) -> Result<MultiViewDataset> {
    if config.views.is_empty() {
        return Err(BionicError::validation("config lists no views"));
    }
    let mut tables: Vec<Option<RawTable>> = Vec::with_capacity(config.views.len());
    for v in &config.views {
        tables.push(match &v.path {
            Some(p) => Some(read_table(p)?),
            None => None,
        });
    }
    let n = match tables.iter().flatten().next() {
        Some(t) => t.values.nrows(),
        None => return Err(BionicError::validation("every view path is absent")),
    };
    let mut ids: Option<Vec<String>> = None;
    for (src, t) in config.views.iter().zip(&tables) {
        let Some(t) = t else { continue };
        if t.values.nrows() != n {
            return Err(BionicError::validation(format!(
                "row-count mismatch: view '{}' has {} rows, expected {n}",
                src.name,
                t.values.nrows()
            )));
        }
        if let Some(tid) = &t.ids {
            match &ids {
                Some(existing) if existing != tid => {
                    return Err(BionicError::validation(format!(
                        "sample ids of view '{}' disagree with earlier views",
                        src.name
                    )))
                }
                Some(_) => {}
                None => ids = Some(tid.clone()),
            }
        }
    }
    let ids = ids.unwrap_or_else(|| (0..n).map(|i| i.to_string()).collect());

    let mut specs = Vec::with_capacity(tables.len());
    let mut blocks = Vec::with_capacity(tables.len());
    for (src, t) in config.views.iter().zip(tables) {
        match t {
            Some(t) => {
                if let Some(dim) = src.dim {
                    if dim != t.values.ncols() {
                        return Err(BionicError::validation(format!(
                            "view '{}' has {} columns, config says {dim}",
                            src.name,
                            t.values.ncols()
                        )));
                    }
                }
                specs.push(ViewSpec {
                    name: src.name.clone(),
                    kind: src.kind,
                    dim: t.values.ncols(),
                    feature_names: t.names,
                });
                blocks.push(ViewBlock::from_values(t.values)?);
            }
            None => {
                let dim = src.dim.ok_or_else(|| {
                    BionicError::validation(format!("view '{}' has no path and no dim", src.name))
                })?;
                specs.push(ViewSpec::new(src.name.clone(), src.kind, dim));
                blocks.push(ViewBlock::new(DMatrix::from_element(n, dim, f64::NAN), DMatrix::from_element(n, dim, false))?);
            }
        }
    }

    let mut classes: Vec<Option<usize>> = vec![None; n];
    if let Some(lp) = &config.labels {
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut seen = HashSet::new();
        for (id, label) in read_labels(lp)? {
            let &row = index
                .get(id.as_str())
                .ok_or_else(|| BionicError::validation(format!("label for unknown sample id '{id}'")))?;
            if !seen.insert(row) {
                return Err(BionicError::validation(format!("duplicate label row for sample '{id}'")));
            }
            if let Some(l) = label {
                if l < 0 {
                    return Err(BionicError::validation(format!("negative label {l} for sample '{id}'")));
                }
                classes[row] = Some(l as usize);
            }
        }
    }
    let max_label = classes.iter().flatten().copied().max();
    let n_classes = match config.n_classes {
        Some(c) => {
            if let Some(m) = max_label {
                if m >= c {
                    return Err(BionicError::validation(format!("label {m} outside 0..{}", c.saturating_sub(1))));
                }
            }
            c
        }
        None => max_label.map(|m| (m + 1).max(2)).unwrap_or(2),
    };
    let labels = LabelBlock::from_classes(&classes, n_classes)?;
    let d = MultiViewDataset::new(specs, blocks, labels, ids)?;
    validate_dataset(&d)?;
    Ok(d)
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes one CSV per view (with an id column) plus `labels.csv` into `dir`,
/// returning a config that loads the same dataset back.
pub fn save_dataset(d: &MultiViewDataset, dir: &Path) -> Result<DatasetConfig> {
    std::fs::create_dir_all(dir).map_err(|e| BionicError::io(dir, e))?;
    let mut views = Vec::with_capacity(d.n_views());
    for (spec, block) in d.specs.iter().zip(&d.blocks) {
        let path = dir.join(format!("{}.csv", spec.name));
        write_view_csv(&path, d.ids(), &spec.feature_names, block.values(), block.mask())?;
        views.push(ViewSource {
            name: spec.name.clone(),
            path: Some(path),
            kind: spec.kind,
            dim: Some(spec.dim),
        });
    }
    let labels_path = dir.join("labels.csv");
    write_labels_csv(&labels_path, d)?;
    Ok(DatasetConfig {
        views,
        labels: Some(labels_path),
        n_classes: Some(d.n_classes()),
    })
}

pub fn write_view_csv(
    path: &Path,
    ids: &[String],
    names: &[String],
    values: &DMatrix<f64>,
    mask: &DMatrix<bool>,
) -> Result<()> {
    let csv_err = |source| BionicError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["id".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        for j in 0..values.ncols() {
            rec.push(if mask[(i, j)] { fmt_f64(values[(i, j)]) } else { String::new() });
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| BionicError::io(path, e))
}

/// Labeled rows only; unlabeled samples are simply absent from the file.
pub fn write_labels_csv(path: &Path, d: &MultiViewDataset) -> Result<()> {
    let csv_err = |source| BionicError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["id", "label"]).map_err(csv_err)?;
    for (i, id) in d.ids.iter().enumerate() {
        if let Some(c) = d.labels.class_of(i) {
            w.write_record([id.clone(), c.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| BionicError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> MultiViewDataset {
        let a = DMatrix::from_fn(n, 2, |i, j| (i * 2 + j) as f64);
        let b = DMatrix::from_fn(n, 3, |i, j| (i as f64) - (j as f64) * 0.5);
        let classes: Vec<Option<usize>> = (0..n).map(|i| Some(i % 2)).collect();
        MultiViewDataset::with_default_ids(
            vec![ViewSpec::new("a", ViewKind::Structured, 2), ViewSpec::new("b", ViewKind::Embedding, 3)],
            vec![ViewBlock::from_values(a).unwrap(), ViewBlock::from_values(b).unwrap()],
            LabelBlock::from_classes(&classes, 2).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn subset_identity_empty_and_slice() {
        let d = toy(10);
        let all: Vec<usize> = (0..10).collect();
        assert!(subset(&d, &all).unwrap().same_content(&d));
        assert_eq!(subset(&d, &[]).unwrap().n(), 0);
        let s = subset(&d, &[0, 2]).unwrap();
        assert_eq!(s.n(), 2);
        assert_eq!(s.block(1).values().row(1), d.block(1).values().row(2));
        assert_eq!(s.labels().class_of(1), Some(0));
    }

    #[test]
    fn subset_rejects_bad_indices() {
        let d = toy(4);
        assert!(subset(&d, &[4]).is_err());
        assert!(subset(&d, &[1, 1]).is_err());
    }

    #[test]
    fn validate_reports_zero_on_full_data() {
        let r = validate_dataset(&toy(6)).unwrap();
        assert!(r.views.iter().all(|v| v.view_missing_pct == 0.0 && v.feature_missing_pct == 0.0));
        assert_eq!(r.label_coverage_pct, 100.0);
    }

    #[test]
    fn validate_view_level_percentage() {
        let n = 1000;
        let mut mask = DMatrix::from_element(n, 2, true);
        for i in 0..613 {
            mask[(i, 0)] = false;
            mask[(i, 1)] = false;
        }
        let d = MultiViewDataset::with_default_ids(
            vec![ViewSpec::new("ct", ViewKind::Embedding, 2), ViewSpec::new("clin", ViewKind::Structured, 1)],
            vec![
                ViewBlock::new(DMatrix::zeros(n, 2), mask).unwrap(),
                ViewBlock::from_values(DMatrix::zeros(n, 1)).unwrap(),
            ],
            LabelBlock::unlabeled(n, 2).unwrap(),
        )
        .unwrap();
        let r = validate_dataset(&d).unwrap();
        assert_eq!(r.views[0].view_missing_pct, 61.3);
        assert_eq!(r.views[1].view_missing_pct, 0.0);
    }

    #[test]
    fn sample_without_views_is_hard_error() {
        let mut mask = DMatrix::from_element(3, 2, true);
        mask[(1, 0)] = false;
        mask[(1, 1)] = false;
        let d = MultiViewDataset::with_default_ids(
            vec![ViewSpec::new("a", ViewKind::Structured, 2)],
            vec![ViewBlock::new(DMatrix::zeros(3, 2), mask).unwrap()],
            LabelBlock::unlabeled(3, 2).unwrap(),
        )
        .unwrap();
        assert!(matches!(validate_dataset(&d), Err(BionicError::Validation(_))));
    }

    #[test]
    fn masked_positions_hold_nan() {
        let mut mask = DMatrix::from_element(2, 2, true);
        mask[(0, 1)] = false;
        let b = ViewBlock::new(DMatrix::from_element(2, 2, 3.0), mask).unwrap();
        assert!(b.values()[(0, 1)].is_nan());
        assert_eq!(b.values()[(1, 1)], 3.0);
    }

    #[test]
    fn labels_reject_out_of_range_and_single_class() {
        assert!(LabelBlock::from_classes(&[Some(2)], 2).is_err());
        assert!(LabelBlock::from_classes(&[Some(0)], 1).is_err());
    }
}
