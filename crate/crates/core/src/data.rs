//! Dataset ingestion, norm-bounded normalization, seeded splitting and
//! synthetic cluster generation.
//!
//! Every vector the defense sees lives in the unit `L_p` ball. Normalization
//! gets there with a per-feature min-max map followed by a global division by
//! `d^(1/p)`, which keeps nearest-neighbour order intact.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order of an `L_p` norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Norm {
    L1,
    #[default]
    L2,
    Inf,
}

impl Norm {
    pub fn from_order(p: &str) -> Option<Self> {
        match p.trim().to_ascii_lowercase().as_str() {
            "1" => Some(Norm::L1),
            "2" => Some(Norm::L2),
            "inf" | "infinity" | "max" => Some(Norm::Inf),
            _ => None,
        }
    }

    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Inf => v.iter().fold(0.0, |acc: f64, x| acc.max(x.abs())),
        }
    }

    /// `||a - b||_p`. Callers check that lengths agree.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
        match self {
            Norm::L1 => diffs.sum(),
            Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            Norm::Inf => diffs.fold(0.0, f64::max),
        }
    }

    /// Divisor that maps the unit hypercube into the unit ball: `d^(1/p)`.
    pub fn cube_divisor(self, dim: usize) -> f64 {
        let d = dim.max(1) as f64;
        match self {
            Norm::L1 => d,
            Norm::L2 => d.sqrt(),
            Norm::Inf => 1.0,
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Norm::L1 => f.write_str("1"),
            Norm::L2 => f.write_str("2"),
            Norm::Inf => f.write_str("inf"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NormRepr {
    Int(u32),
    Text(String),
}

impl Serialize for Norm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Norm::L1 => NormRepr::Int(1),
            Norm::L2 => NormRepr::Int(2),
            Norm::Inf => NormRepr::Text("inf".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Norm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = NormRepr::deserialize(d)?;
        let text = match repr {
            NormRepr::Int(p) => p.to_string(),
            NormRepr::Text(t) => t,
        };
        Norm::from_order(&text).ok_or_else(|| {
            serde::de::Error::custom(format!(
                "unsupported norm order `{text}` (expected 1, 2 or \"inf\")"
            ))
        })
    }
}

/// How one raw CSV column maps onto encoded feature columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ColumnEncoding {
    Numeric {
        name: String,
    },
    /// One-hot block; `levels` in first-appearance order.
    Categorical {
        name: String,
        levels: Vec<String>,
    },
}

impl ColumnEncoding {
    pub fn width(&self) -> usize {
        match self {
            ColumnEncoding::Numeric { .. } => 1,
            ColumnEncoding::Categorical { levels, .. } => levels.len(),
        }
    }
}

/// Affine map from raw features into the unit `L_p` ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub norm_divisor: f64,
    pub p: Norm,
}

impl NormalizationSpec {
    pub fn fit(features: &[Vec<f64>], dim: usize, p: Norm) -> Self {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for row in features {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self {
            min,
            max,
            norm_divisor: p.cube_divisor(dim),
            p,
        }
    }

    /// Maps a raw vector into the bounded domain. Out-of-range values are
    /// clipped to the fitted range first, so adversarial queries stay inside
    /// the ball too.
    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.min.len() {
            return Err(Error::DimensionMismatch {
                expected: self.min.len(),
                actual: raw.len(),
            });
        }
        Ok(raw
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let (lo, hi) = (self.min[j], self.max[j]);
                let span = hi - lo;
                if span <= 0.0 || !span.is_finite() {
                    0.0
                } else {
                    (v.clamp(lo, hi) - lo) / span / self.norm_divisor
                }
            })
            .collect())
    }
}

/// Labeled feature matrix with its class vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
    dim: usize,
    class_names: Vec<String>,
    schema: Vec<ColumnEncoding>,
    normalization: Option<NormalizationSpec>,
}

impl Dataset {
    /// Builds a dataset, checking shape, label range and finiteness.
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features.first().map_or(0, Vec::len);
        for (i, row) in features.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("sample {i} has a non-finite feature")));
            }
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        let class_names = (0..num_classes).map(|c| c.to_string()).collect();
        let schema = (0..dim)
            .map(|j| ColumnEncoding::Numeric {
                name: format!("x{j}"),
            })
            .collect();
        Ok(Self {
            features,
            labels,
            num_classes,
            dim,
            class_names,
            schema,
            normalization: None,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes {
            return Err(Error::Invalid(format!(
                "{} class names for {} classes",
                names.len(),
                self.num_classes
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn schema(&self) -> &[ColumnEncoding] {
        &self.schema
    }

    pub fn normalization(&self) -> Option<&NormalizationSpec> {
        self.normalization.as_ref()
    }

    /// Rows at `indices`, in that order, keeping vocabulary and schema.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            dim: self.dim,
            class_names: self.class_names.clone(),
            schema: self.schema.clone(),
            normalization: self.normalization.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Recovers raw cell strings from an encoded row using the schema.
    /// One-hot blocks decode to their level; numeric columns print as-is.
    pub fn decode_row(&self, encoded: &[f64]) -> Result<Vec<String>> {
        let width: usize = self.schema.iter().map(ColumnEncoding::width).sum();
        if encoded.len() != width {
            return Err(Error::DimensionMismatch {
                expected: width,
                actual: encoded.len(),
            });
        }
        let mut out = Vec::with_capacity(self.schema.len());
        let mut offset = 0;
        for col in &self.schema {
            match col {
                ColumnEncoding::Numeric { .. } => out.push(encoded[offset].to_string()),
                ColumnEncoding::Categorical { name, levels } => {
                    let block = &encoded[offset..offset + levels.len()];
                    let hot: Vec<usize> = (0..block.len()).filter(|&k| block[k] == 1.0).collect();
                    if hot.len() != 1 || block.iter().any(|&v| v != 0.0 && v != 1.0) {
                        return Err(Error::Invalid(format!("column `{name}` is not a one-hot block")));
                    }
                    out.push(levels[hot[0]].clone());
                }
            }
            offset += col.width();
        }
        Ok(out)
    }
}

/// Reads a headered CSV. Categorical columns are one-hot encoded; the label
/// column becomes dense class ids in first-appearance order.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    categorical_columns: &BTreeSet<String>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_idx =
        headers
            .iter()
            .position(|h| h == label_column)
            .ok_or_else(|| Error::UnknownLabelColumn {
                path: path.to_path_buf(),
                column: label_column.to_string(),
            })?;
    for name in categorical_columns {
        if !headers.contains(name) {
            return Err(Error::Invalid(format!(
                "{}: categorical column `{name}` not found in header",
                path.display()
            )));
        }
    }

    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&j| j != label_idx).collect();
    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        rows.push(record.iter().map(|c| c.trim().to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }

    // Data rows start on line 2 of the file.
    let cell_err = |row: usize, col: usize, message: String| Error::Cell {
        path: path.to_path_buf(),
        row: row + 2,
        column: headers[col].clone(),
        message,
    };

    let mut schema = Vec::with_capacity(feature_cols.len());
    let mut level_maps: Vec<Option<HashMap<String, usize>>> = Vec::with_capacity(feature_cols.len());
    for &j in &feature_cols {
        let name = headers[j].clone();
        if categorical_columns.contains(&name) {
            let mut levels: Vec<String> = Vec::new();
            let mut map = HashMap::new();
            for (r, row) in rows.iter().enumerate() {
                let cell = &row[j];
                if cell.is_empty() {
                    return Err(cell_err(r, j, "missing value".into()));
                }
                if !map.contains_key(cell) {
                    map.insert(cell.clone(), levels.len());
                    levels.push(cell.clone());
                }
            }
            schema.push(ColumnEncoding::Categorical { name, levels });
            level_maps.push(Some(map));
        } else {
            schema.push(ColumnEncoding::Numeric { name });
            level_maps.push(None);
        }
    }

    let mut class_names: Vec<String> = Vec::new();
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut features = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let raw_label = &row[label_idx];
        if raw_label.is_empty() {
            return Err(cell_err(r, label_idx, "missing label".into()));
        }
        let next = class_names.len();
        let label = *class_ids.entry(raw_label.clone()).or_insert_with(|| {
            class_names.push(raw_label.clone());
            next
        });
        labels.push(label);

        let mut encoded = Vec::new();
        for (k, &j) in feature_cols.iter().enumerate() {
            let cell = &row[j];
            match (&level_maps[k], &schema[k]) {
                (Some(map), ColumnEncoding::Categorical { levels, .. }) => {
                    let hot = map[cell];
                    encoded.extend((0..levels.len()).map(|l| if l == hot { 1.0 } else { 0.0 }));
                }
                _ => {
                    if cell.is_empty() {
                        return Err(cell_err(r, j, "missing value".into()));
                    }
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| cell_err(r, j, format!("cannot parse `{cell}` as a number")))?;
                    if !v.is_finite() {
                        return Err(cell_err(r, j, format!("non-finite value `{cell}`")));
                    }
                    encoded.push(v);
                }
            }
        }
        features.push(encoded);
    }

    let num_classes = class_names.len();
    let mut ds = Dataset::new(features, labels, num_classes)?.with_class_names(class_names)?;
    ds.schema = schema;
    Ok(ds)
}

/// Min-max scales every feature to `[0, 1]`, then divides by `d^(1/p)` so
/// every in-range vector satisfies `||x||_p <= 1`.
pub fn normalize(ds: &Dataset, p: Norm) -> Result<(Dataset, NormalizationSpec)> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let spec = NormalizationSpec::fit(&ds.features, ds.dim, p);
    let features = ds
        .features
        .iter()
        .map(|row| spec.apply(row))
        .collect::<Result<Vec<_>>>()?;
    let mut out = ds.clone();
    out.features = features;
    out.normalization = Some(spec.clone());
    Ok((out, spec))
}

/// Disjoint target/shadow partitions plus balanced evaluation sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target_train: Vec<usize>,
    pub target_test: Vec<usize>,
    pub shadow_pool: Vec<usize>,
    /// Drawn from `target_train`.
    pub eval_members: Vec<usize>,
    /// Drawn from `target_test`.
    pub eval_nonmembers: Vec<usize>,
    pub seed: u64,
}

/// Shuffles `0..n` under `seed` and cuts it into the three partitions.
pub fn split(n: usize, fractions: (f64, f64, f64), eval_size: usize, seed: u64) -> Result<SplitPlan> {
    let (ft, fe, fs) = fractions;
    if [ft, fe, fs].iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Split("fractions must lie in [0, 1]".into()));
    }
    if ft + fe + fs > 1.0 + 1e-9 {
        return Err(Error::Split(format!("fractions sum to {} > 1", ft + fe + fs)));
    }
    let size = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
    let (n_train, n_test, n_shadow) = (size(ft), size(fe), size(fs));
    for (name, len) in [
        ("target_train", n_train),
        ("target_test", n_test),
        ("shadow_pool", n_shadow),
    ] {
        if len == 0 {
            return Err(Error::Split(format!("partition {name} is empty")));
        }
    }
    if eval_size == 0 {
        return Err(Error::Split("eval_size must be positive".into()));
    }
    if eval_size > n_train.min(n_test) {
        return Err(Error::Split(format!(
            "eval_size {eval_size} exceeds min(|target_train| = {n_train}, |target_test| = {n_test})"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let target_train = order[..n_train].to_vec();
    let target_test = order[n_train..n_train + n_test].to_vec();
    let shadow_pool = order[n_train + n_test..n_train + n_test + n_shadow].to_vec();
    Ok(SplitPlan {
        eval_members: target_train[..eval_size].to_vec(),
        eval_nonmembers: target_test[..eval_size].to_vec(),
        target_train,
        target_test,
        shadow_pool,
        seed,
    })
}

/// `num_classes` isotropic Gaussian clusters around centers drawn uniformly
/// from the unit cube, normalized for `p`. Samples are class-major.
pub fn synth_blobs(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
    p: Norm,
) -> Result<Dataset> {
    if num_classes < 2 || dim < 1 || per_class < 1 {
        return Err(Error::Invalid(
            "synth_blobs needs at least 2 classes, 1 dimension and 1 sample per class".into(),
        ));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Invalid(format!("spread must be positive, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0);
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Invalid(e.to_string()))?;
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut features = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            features.push(center.iter().map(|&m| m + noise.sample(&mut rng)).collect());
            labels.push(c);
        }
    }
    let raw = Dataset::new(features, labels, num_classes)?;
    Ok(normalize(&raw, p)?.0)
}
