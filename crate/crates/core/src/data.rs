//! Datasets: synthetic Gaussian mixtures, long-tail subsampling,
//! class-incremental splits, and the two on-disk formats (feature CSV and
//! the binary logit file).
//!
//! Everything random takes an explicit seed and uses its own derived
//! stream, so a run is reproducible from one base seed.

use crate::numerics::LogitMatrix;
use crate::{derive_seed, Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

/// Magic bytes of the binary logit file.
const LOGIT_MAGIC: &[u8; 4] = b"EALG";
const LOGIT_VERSION: u32 = 1;
const FLAG_LABELS: u8 = 0b0000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Feature rows with integer class labels.
///
/// Invariants: `features.len() == len * feature_dim`, every feature finite,
/// every label below `class_count`. Per-class counts are materialized at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    class_count: usize,
    counts: Vec<usize>,
    split: Split,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        feature_dim: usize,
        class_count: usize,
        split: Split,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if feature_dim == 0 || class_count == 0 {
            return Err(Error::Config(
                "dataset needs positive feature dim and class count".into(),
            ));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::LengthMismatch {
                context: "dataset features",
                expected: labels.len() * feature_dim,
                got: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        let mut counts = vec![0usize; class_count];
        for &l in &labels {
            if l >= class_count {
                return Err(Error::IndexOutOfRange {
                    context: "dataset label",
                    index: l,
                    len: class_count,
                });
            }
            counts[l] += 1;
        }
        Ok(Self {
            features,
            labels,
            feature_dim,
            class_count,
            counts,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features_flat(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn rows_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Concatenation; the label space becomes the wider of the two.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if other.feature_dim != self.feature_dim {
            return Err(Error::LengthMismatch {
                context: "merge feature dim",
                expected: self.feature_dim,
                got: other.feature_dim,
            });
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(
            features,
            labels,
            self.feature_dim,
            self.class_count.max(other.class_count),
            self.split,
        )
    }

    /// Rows whose label is below `class_limit`, in a label space of exactly
    /// that many classes. Used to evaluate on the classes seen so far.
    pub fn restrict_to_first_classes(&self, class_limit: usize) -> Result<Self> {
        if class_limit == 0 || class_limit > self.class_count {
            return Err(Error::Config(format!(
                "class limit {class_limit} outside 1..={}",
                self.class_count
            )));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l < class_limit {
                features.extend_from_slice(self.feature_row(i));
                labels.push(l);
            }
        }
        Self::new(features, labels, self.feature_dim, class_limit, self.split)
    }

    /// Population standard deviation of each feature dimension.
    pub fn per_dimension_std(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.feature_dim];
        for row in self.features.chunks_exact(self.feature_dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.feature_dim];
        for row in self.features.chunks_exact(self.feature_dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.into_iter().map(|s| (s / n).sqrt()).collect()
    }
}

/// Isotropic Gaussian blob per class, with means shared between draws so
/// train and test splits come from the same distribution.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    means: Vec<f64>, // class_count x dim
    class_count: usize,
    dim: usize,
    within_sigma: f64,
}

impl GaussianMixture {
    pub fn new(
        class_count: usize,
        dim: usize,
        mean_spread: f64,
        within_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::Config(format!(
                "mixture needs at least 2 classes, got {class_count}"
            )));
        }
        if dim == 0 {
            return Err(Error::Config("mixture needs a positive dimension".into()));
        }
        if !mean_spread.is_finite() || mean_spread < 0.0 || !within_sigma.is_finite()
            || within_sigma < 0.0
        {
            return Err(Error::Config(format!(
                "mean spread {mean_spread} and sigma {within_sigma} must be finite and non-negative"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6d65616e)); // "mean"
        let means = (0..class_count * dim)
            .map(|_| mean_spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            means,
            class_count,
            dim,
            within_sigma,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `n_per_class` samples of every class, grouped by class.
    pub fn sample(&self, n_per_class: usize, seed: u64, split: Split) -> Result<LabeledDataset> {
        if n_per_class == 0 {
            return Err(Error::Config("need at least one sample per class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x73616d70)); // "samp"
        let mut features = Vec::with_capacity(self.class_count * n_per_class * self.dim);
        let mut labels = Vec::with_capacity(self.class_count * n_per_class);
        for c in 0..self.class_count {
            let mean = &self.means[c * self.dim..(c + 1) * self.dim];
            for _ in 0..n_per_class {
                for &m in mean {
                    let z: f64 = rng.sample(StandardNormal);
                    features.push(m + self.within_sigma * z);
                }
                labels.push(c);
            }
        }
        LabeledDataset::new(features, labels, self.dim, self.class_count, split)
    }
}

/// One-shot balanced synthetic dataset; see [`GaussianMixture`] when train
/// and test must share class means.
pub fn synth_gaussians(
    class_count: usize,
    dim: usize,
    mean_spread: f64,
    within_sigma: f64,
    n_per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    GaussianMixture::new(class_count, dim, mean_spread, within_sigma, seed)?.sample(
        n_per_class,
        derive_seed(seed, 1),
        Split::Train,
    )
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Exponential class-count profile: class c keeps
/// `round(n_max * ratio^(-c / (C-1)))` samples, floored at one. Requires a
/// balanced input and `ratio >= 1`, so counts fall from `n_max` for class 0
/// to `round(n_max / ratio)` for the last class.
pub fn make_long_tailed(
    dataset: &LabeledDataset,
    ratio: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(ratio.is_finite() && ratio >= 1.0) {
        return Err(Error::Config(format!(
            "imbalance ratio must be >= 1, got {ratio}"
        )));
    }
    let c = dataset.class_count();
    if c < 2 {
        return Err(Error::Config("long-tail profile needs >= 2 classes".into()));
    }
    let n_max = dataset.counts()[0];
    if dataset.counts().iter().any(|&n| n != n_max) || n_max == 0 {
        return Err(Error::Config(
            "long-tail subsampling expects a balanced input dataset".into(),
        ));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for class in 0..c {
        let keep = round_half_up(n_max as f64 * ratio.powf(-(class as f64) / (c as f64 - 1.0)))
            .max(1);
        let rows = dataset.rows_of_class(class);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
        let mut chosen: Vec<usize> =
            rand::seq::index::sample(&mut rng, rows.len(), keep.min(rows.len())).into_vec();
        chosen.sort_unstable();
        for idx in chosen {
            features.extend_from_slice(dataset.feature_row(rows[idx]));
            labels.push(class);
        }
    }
    LabeledDataset::new(
        features,
        labels,
        dataset.feature_dim(),
        c,
        dataset.split(),
    )
}

/// A class-incremental stream: disjoint class groups in a seeded random
/// order, with labels remapped so step b trains classes
/// `b*k .. (b+1)*k` in the new space.
#[derive(Debug, Clone)]
pub struct IncrementalSplits {
    steps: Vec<LabeledDataset>,
    class_order: Vec<usize>, // new label -> original class
}

impl IncrementalSplits {
    pub fn steps(&self) -> &[LabeledDataset] {
        &self.steps
    }

    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    /// Maps another dataset (typically the test split) into the same
    /// remapped label space, keeping all classes.
    pub fn remap(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if other.class_count() != self.class_order.len() {
            return Err(Error::LengthMismatch {
                context: "remap class count",
                expected: self.class_order.len(),
                got: other.class_count(),
            });
        }
        let mut new_of_old = vec![0usize; self.class_order.len()];
        for (new, &old) in self.class_order.iter().enumerate() {
            new_of_old[old] = new;
        }
        let labels = other.labels().iter().map(|&l| new_of_old[l]).collect();
        LabeledDataset::new(
            other.features_flat().to_vec(),
            labels,
            other.feature_dim(),
            other.class_count(),
            other.split(),
        )
    }
}

pub fn make_incremental_splits(
    dataset: &LabeledDataset,
    steps: usize,
    classes_per_step: usize,
    seed: u64,
) -> Result<IncrementalSplits> {
    if steps == 0 || classes_per_step == 0 {
        return Err(Error::Config(
            "steps and classes per step must be positive".into(),
        ));
    }
    if steps * classes_per_step != dataset.class_count() {
        return Err(Error::Config(format!(
            "{} classes cannot be split into {steps} steps of {classes_per_step}",
            dataset.class_count()
        )));
    }
    let mut class_order: Vec<usize> = (0..dataset.class_count()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6f72646572)); // "order"
    class_order.shuffle(&mut rng);
    let mut new_of_old = vec![0usize; class_order.len()];
    for (new, &old) in class_order.iter().enumerate() {
        new_of_old[old] = new;
    }
    let mut step_sets = Vec::with_capacity(steps);
    for b in 0..steps {
        let lo = b * classes_per_step;
        let hi = lo + classes_per_step;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, &old) in dataset.labels().iter().enumerate() {
            let new = new_of_old[old];
            if (lo..hi).contains(&new) {
                features.extend_from_slice(dataset.feature_row(i));
                labels.push(new);
            }
        }
        step_sets.push(LabeledDataset::new(
            features,
            labels,
            dataset.feature_dim(),
            hi,
            dataset.split(),
        )?);
    }
    Ok(IncrementalSplits {
        steps: step_sets,
        class_order,
    })
}

/// Writes `f0,...,f{D-1},label` rows; floats keep full round-trip precision.
pub fn write_csv_dataset(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..dataset.feature_dim()).map(|d| format!("f{d}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for (i, &label) in dataset.labels().iter().enumerate() {
        let mut record: Vec<String> = dataset
            .feature_row(i)
            .iter()
            .map(|v| v.to_string())
            .collect();
        record.push(label.to_string());
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv_dataset(path: &Path, split: Split) -> Result<LabeledDataset> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.len() < 2 || headers.iter().next_back() != Some("label") {
        return Err(Error::Parse(format!(
            "{}: expected header f0,..,f{{D-1}},label",
            path.display()
        )));
    }
    let dim = headers.len() - 1;
    for (d, name) in headers.iter().take(dim).enumerate() {
        if name != format!("f{d}") {
            return Err(Error::Parse(format!(
                "{}: feature column {d} named {name:?}, expected \"f{d}\"",
                path.display()
            )));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != dim + 1 {
            return Err(Error::Parse(format!(
                "{} row {}: {} fields, expected {}",
                path.display(),
                line + 2,
                record.len(),
                dim + 1
            )));
        }
        for field in record.iter().take(dim) {
            let v: f64 = field.parse().map_err(|_| {
                Error::Parse(format!(
                    "{} row {}: bad float {field:?}",
                    path.display(),
                    line + 2
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Parse(format!(
                    "{} row {}: non-finite feature",
                    path.display(),
                    line + 2
                )));
            }
            features.push(v);
        }
        let label: usize = record[dim].parse().map_err(|_| {
            Error::Parse(format!(
                "{} row {}: bad label {:?}",
                path.display(),
                line + 2,
                &record[dim]
            ))
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    let class_count = labels.iter().max().unwrap() + 1;
    LabeledDataset::new(features, labels, dim, class_count, split)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Writes the binary logit format: magic `EALG`, version u32, flag byte
/// (bit 0 = labels present), S and C as u64, S*C little-endian f32 values
/// row-major, then S u32 labels when flagged. All integers little-endian.
pub fn write_logit_file(
    path: &Path,
    logits: &LogitMatrix,
    labels: Option<&[usize]>,
) -> Result<()> {
    if let Some(labels) = labels {
        if labels.len() != logits.sample_count() {
            return Err(Error::LengthMismatch {
                context: "logit file labels",
                expected: logits.sample_count(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= logits.class_count()) {
            return Err(Error::IndexOutOfRange {
                context: "logit file label",
                index: bad,
                len: logits.class_count(),
            });
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(LOGIT_MAGIC)?;
    w.write_all(&LOGIT_VERSION.to_le_bytes())?;
    w.write_all(&[if labels.is_some() { FLAG_LABELS } else { 0 }])?;
    w.write_all(&(logits.sample_count() as u64).to_le_bytes())?;
    w.write_all(&(logits.class_count() as u64).to_le_bytes())?;
    for &v in logits.as_flat() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    if let Some(labels) = labels {
        for &l in labels {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_logit_file(path: &Path) -> Result<(LogitMatrix, Option<Vec<usize>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    if bytes.len() < 25 {
        return Err(fail("file shorter than the fixed header"));
    }
    if &bytes[0..4] != LOGIT_MAGIC {
        return Err(fail("bad magic, not a logit file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != LOGIT_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let flags = bytes[8];
    if flags & !FLAG_LABELS != 0 {
        return Err(fail(&format!("unknown flag bits {flags:#04x}")));
    }
    let s = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
    let c = u64::from_le_bytes(bytes[17..25].try_into().expect("8 bytes")) as usize;
    let has_labels = flags & FLAG_LABELS != 0;
    let value_bytes = s
        .checked_mul(c)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail("size overflow"))?;
    let label_bytes = if has_labels { s * 4 } else { 0 };
    if bytes.len() != 25 + value_bytes + label_bytes {
        return Err(fail(&format!(
            "expected {} bytes total, found {}",
            25 + value_bytes + label_bytes,
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(s * c);
    for chunk in bytes[25..25 + value_bytes].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(fail("non-finite logit value"));
        }
        values.push(v as f64);
    }
    let logits = LogitMatrix::from_flat(values, s, c)?;
    let labels = if has_labels {
        let mut labels = Vec::with_capacity(s);
        for chunk in bytes[25 + value_bytes..].chunks_exact(4) {
            let l = u32::from_le_bytes(chunk.try_into().expect("4 bytes")) as usize;
            if l >= c {
                return Err(fail(&format!("label {l} out of range for {c} classes")));
            }
            labels.push(l);
        }
        Some(labels)
    } else {
        None
    };
    Ok((logits, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_gaussians(3, 4, 2.0, 1.0, 10, 42).unwrap();
        let b = synth_gaussians(3, 4, 2.0, 1.0, 10, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts(), &[10, 10, 10]);
        assert_eq!(a.len(), 30);
        let c = synth_gaussians(3, 4, 2.0, 1.0, 10, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_rejects_bad_parameters() {
        assert!(synth_gaussians(1, 4, 1.0, 1.0, 10, 0).is_err());
        assert!(synth_gaussians(3, 0, 1.0, 1.0, 10, 0).is_err());
        assert!(synth_gaussians(3, 4, -1.0, 1.0, 10, 0).is_err());
        assert!(synth_gaussians(3, 4, 1.0, 1.0, 0, 0).is_err());
    }

    #[test]
    fn mixture_shares_means_across_splits() {
        let mix = GaussianMixture::new(3, 2, 100.0, 0.01, 7).unwrap();
        let train = mix.sample(20, 1, Split::Train).unwrap();
        let test = mix.sample(20, 2, Split::Test).unwrap();
        // with tiny within-class noise, class centroids nearly coincide
        for c in 0..3 {
            let centroid = |d: &LabeledDataset| -> Vec<f64> {
                let rows = d.rows_of_class(c);
                let mut m = [0.0; 2];
                for &r in &rows {
                    for (mm, v) in m.iter_mut().zip(d.feature_row(r)) {
                        *mm += v;
                    }
                }
                m.iter().map(|v| v / rows.len() as f64).collect()
            };
            let (a, b) = (centroid(&train), centroid(&test));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 0.02, "class {c}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn well_separated_blobs_are_linearly_separable() {
        use crate::model::{Head, MlpClassifier};
        use crate::training::{train, LrSchedule, OptimizerKind, SgdConfig};
        let data = synth_gaussians(4, 6, 10.0, 0.5, 30, 3).unwrap();
        let mut model = MlpClassifier::init(6, &[], 4, Head::Affine, 3).unwrap();
        let cfg = SgdConfig {
            learning_rate: 0.5,
            schedule: LrSchedule::Cosine,
            warmup_epochs: 0,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 40,
            temperature: 2.0,
            optimizer: OptimizerKind::Sgd,
            seed: 3,
        };
        train(&mut model, &data, &cfg, None).unwrap();
        let logits = model.batch_logits(data.features_flat()).unwrap();
        let acc = crate::metrics::topk_accuracy(&logits, data.labels(), 1).unwrap();
        assert!(acc >= 99.0, "train accuracy {acc}");
    }

    #[test]
    fn long_tail_counts_follow_the_profile() {
        let data = synth_gaussians(10, 3, 5.0, 1.0, 500, 1).unwrap();
        let lt = make_long_tailed(&data, 100.0, 9).unwrap();
        assert_eq!(lt.counts(), &[500, 300, 180, 108, 65, 39, 23, 14, 8, 5]);
        // nonincreasing, endpoints exact
        assert!(lt.counts().windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(lt.counts()[0], 500);
        assert_eq!(lt.counts()[9], round_half_up(500.0 / 100.0));
    }

    #[test]
    fn long_tail_ratio_one_keeps_everything() {
        let data = synth_gaussians(4, 2, 5.0, 1.0, 12, 2).unwrap();
        let lt = make_long_tailed(&data, 1.0, 5).unwrap();
        assert_eq!(lt.counts(), data.counts());
        assert_eq!(lt.len(), data.len());
    }

    #[test]
    fn long_tail_floors_at_one_sample() {
        let data = synth_gaussians(3, 2, 5.0, 1.0, 20, 2).unwrap();
        let lt = make_long_tailed(&data, 1000.0, 5).unwrap();
        assert_eq!(lt.counts()[2], 1); // round(20/1000) would be 0
    }

    #[test]
    fn long_tail_rejects_bad_inputs() {
        let data = synth_gaussians(3, 2, 5.0, 1.0, 20, 2).unwrap();
        assert!(make_long_tailed(&data, 0.5, 0).is_err());
        let lt = make_long_tailed(&data, 10.0, 0).unwrap();
        assert!(make_long_tailed(&lt, 10.0, 0).is_err()); // already imbalanced
    }

    #[test]
    fn incremental_splits_cover_all_classes_disjointly() {
        let data = synth_gaussians(10, 2, 5.0, 1.0, 7, 4).unwrap();
        let inc = make_incremental_splits(&data, 5, 2, 11).unwrap();
        assert_eq!(inc.steps().len(), 5);
        let mut order = inc.class_order().to_vec();
        order.sort_unstable();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
        for (b, step) in inc.steps().iter().enumerate() {
            assert_eq!(step.class_count(), (b + 1) * 2);
            let mut seen: Vec<usize> = step.labels().to_vec();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen, vec![b * 2, b * 2 + 1]);
            assert_eq!(step.len(), 14);
        }
        // deterministic in the seed
        let again = make_incremental_splits(&data, 5, 2, 11).unwrap();
        assert_eq!(inc.class_order(), again.class_order());
        let other = make_incremental_splits(&data, 5, 2, 12).unwrap();
        assert_ne!(inc.class_order(), other.class_order());
    }

    #[test]
    fn incremental_split_rejects_non_divisible() {
        let data = synth_gaussians(10, 2, 5.0, 1.0, 5, 4).unwrap();
        assert!(matches!(
            make_incremental_splits(&data, 3, 4, 0),
            Err(Error::Config(_))
        ));
        assert!(make_incremental_splits(&data, 0, 2, 0).is_err());
    }

    #[test]
    fn remap_moves_test_labels_into_stream_space() {
        let mix = GaussianMixture::new(4, 2, 5.0, 1.0, 1).unwrap();
        let train = mix.sample(6, 2, Split::Train).unwrap();
        let test = mix.sample(3, 3, Split::Test).unwrap();
        let inc = make_incremental_splits(&train, 2, 2, 21).unwrap();
        let remapped = inc.remap(&test).unwrap();
        assert_eq!(remapped.len(), test.len());
        for (i, &new_label) in remapped.labels().iter().enumerate() {
            let old_label = test.labels()[i];
            assert_eq!(inc.class_order()[new_label], old_label);
        }
    }

    #[test]
    fn csv_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let data = synth_gaussians(3, 4, 2.0, 1.0, 5, 8).unwrap();
        write_csv_dataset(&path, &data).unwrap();
        let back = load_csv_dataset(&path, Split::Train).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn csv_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, content: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, content).unwrap();
            p
        };
        let missing = write("a.csv", "f0,f1,label\n1.0,2.0\n");
        assert!(load_csv_dataset(&missing, Split::Train).is_err());
        let nan = write("b.csv", "f0,label\nNaN,0\n");
        assert!(load_csv_dataset(&nan, Split::Train).is_err());
        let bad_label = write("c.csv", "f0,label\n1.0,-3\n");
        assert!(load_csv_dataset(&bad_label, Split::Train).is_err());
        let empty = write("d.csv", "");
        assert!(load_csv_dataset(&empty, Split::Train).is_err());
        let no_rows = write("e.csv", "f0,label\n");
        assert!(load_csv_dataset(&no_rows, Split::Train).is_err());
        let bad_header = write("f.csv", "x,y\n1.0,0\n");
        assert!(load_csv_dataset(&bad_header, Split::Train).is_err());
    }

    #[test]
    fn logit_file_round_trip_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logits.bin");
        // f32-exact values so the round trip is bit-identical
        let m = LogitMatrix::from_rows(&[vec![1.5, -2.25], vec![0.5, 8.0]]).unwrap();
        write_logit_file(&path, &m, Some(&[0, 1])).unwrap();
        let (back, labels) = load_logit_file(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(labels, Some(vec![0, 1]));

        write_logit_file(&path, &m, None).unwrap();
        let (back, labels) = load_logit_file(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(labels, None);
    }

    #[test]
    fn logit_file_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logits.bin");
        let m = LogitMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        write_logit_file(&path, &m, None).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(load_logit_file(&path).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(load_logit_file(&path).is_err());

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 2);
        std::fs::write(&path, &truncated).unwrap();
        assert!(load_logit_file(&path).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        assert!(load_logit_file(&path).is_err());

        assert!(write_logit_file(&path, &m, Some(&[5])).is_err());
    }

    #[test]
    fn dataset_validates_construction() {
        assert!(LabeledDataset::new(vec![], vec![], 2, 2, Split::Train).is_err());
        assert!(LabeledDataset::new(vec![1.0], vec![0], 2, 2, Split::Train).is_err());
        assert!(LabeledDataset::new(vec![1.0, 2.0], vec![5], 2, 2, Split::Train).is_err());
        assert!(LabeledDataset::new(vec![f64::NAN, 0.0], vec![0], 2, 2, Split::Train).is_err());
    }

    #[test]
    fn restrict_keeps_only_early_classes() {
        let data = synth_gaussians(4, 2, 5.0, 1.0, 3, 6).unwrap();
        let first_two = data.restrict_to_first_classes(2).unwrap();
        assert_eq!(first_two.class_count(), 2);
        assert_eq!(first_two.len(), 6);
        assert!(first_two.labels().iter().all(|&l| l < 2));
        assert!(data.restrict_to_first_classes(0).is_err());
        assert!(data.restrict_to_first_classes(9).is_err());
    }
}
