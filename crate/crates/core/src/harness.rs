//! End-to-end experiment loops.
//!
//! [`run_lt`] trains once on a long-tailed set, estimates shift scalars
//! from a balanced re-sampled subset of the training data, and evaluates
//! with and without the correction on a balanced test set.
//!
//! [`run_cil`] replays a class-incremental stream: plain cross entropy on
//! the first step, then compound training against the previous step's
//! corrected model, a two-cluster shift (old classes are the anchor) after
//! every step, and a capacity-bounded rehearsal buffer.
//!
//! Both runs are fully reproducible from one seed; every random consumer
//! gets its own derived stream. The run directory layout is
//! `config.json`, `metrics.json`, `traces.csv`, `energy_per_class.csv`,
//! `confusion.csv`, plus `checkpoint` / `shifts.json` (per step for the
//! incremental mode).

use crate::aligning::{
    apply_shifts_to_matrix, cluster_shifts, jenks_breaks, select_num_clusters, ClusterAssignment,
    ShiftVector,
};
use crate::data::{make_incremental_splits, LabeledDataset, Split};
use crate::metrics::{
    avg_incremental, energy_bias_diagnostic, macro_accuracy, predict, split_accuracies,
    ConfusionMatrix, SplitAccuracies, SplitThresholds,
};
use crate::model::{Head, MlpClassifier};
use crate::numerics::{neg_free_energies, LogitMatrix};
use crate::training::{
    lambda_weight, step_weight_decay, train, DistillTarget, EpochStat, SgdConfig,
};
use crate::{derive_seed, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const STREAM_MODEL_INIT: u64 = 0xA1;
const STREAM_TRAIN: u64 = 0xB000; // + step
const STREAM_EXPAND: u64 = 0xC000; // + step
const STREAM_EA: u64 = 0xD000; // + step
const STREAM_BUFFER: u64 = 0xE000; // + step
const STREAM_SPLIT_ORDER: u64 = 0xF1;

/// Architecture of the classifier used by the harness runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub hidden_dims: Vec<usize>,
    pub head: Head,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_dims: Vec::new(),
            head: Head::Affine,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, input_dim: usize, class_count: usize, seed: u64) -> Result<MlpClassifier> {
        MlpClassifier::init(input_dim, &self.hidden_dims, class_count, self.head, seed)
    }
}

/// How the balanced sampling set for shift estimation is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EaParams {
    /// Base exemplars per class, capped by the scarcest class.
    pub per_class: usize,
    /// Jitter standard deviation as a fraction of each feature dimension's
    /// training standard deviation.
    pub jitter_scale: f64,
    /// Jittered copies emitted per exemplar.
    pub replication: usize,
}

impl Default for EaParams {
    fn default() -> Self {
        Self {
            per_class: 64,
            jitter_scale: 0.1,
            replication: 8,
        }
    }
}

/// Balanced, jitter-augmented sampling set: the same number of base
/// exemplars for every class of interest, each emitted `replication` times
/// with Gaussian feature noise.
#[derive(Debug, Clone)]
pub struct EaSampleSet {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    per_class: usize,
    replication: usize,
    sigma: Vec<f64>,
}

impl EaSampleSet {
    pub fn features_flat(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Effective base exemplars per class after capping.
    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn replication(&self) -> usize {
        self.replication
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `min(per_class, scarcest availability)` exemplars per class of
/// interest without replacement, then emits `replication` jittered copies
/// of each (`sigma` is per feature dimension). The result is exactly
/// balanced; a class of interest without samples is an error.
pub fn build_ea_sampleset(
    data: &LabeledDataset,
    classes: &[usize],
    per_class: usize,
    sigma: &[f64],
    replication: usize,
    seed: u64,
) -> Result<EaSampleSet> {
    if classes.is_empty() {
        return Err(Error::Empty("sampling-set classes"));
    }
    if per_class == 0 || replication == 0 {
        return Err(Error::Config(
            "sampling set needs per_class >= 1 and replication >= 1".into(),
        ));
    }
    if sigma.len() != data.feature_dim() {
        return Err(Error::LengthMismatch {
            context: "sampling-set sigma",
            expected: data.feature_dim(),
            got: sigma.len(),
        });
    }
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::NonFinite("sampling-set sigma"));
    }
    let mut scarcest = usize::MAX;
    for &c in classes {
        if c >= data.class_count() {
            return Err(Error::IndexOutOfRange {
                context: "sampling-set class",
                index: c,
                len: data.class_count(),
            });
        }
        let n = data.counts()[c];
        if n == 0 {
            return Err(Error::Config(format!(
                "class {c} has no samples to build the sampling set"
            )));
        }
        scarcest = scarcest.min(n);
    }
    let effective = per_class.min(scarcest);
    let dim = data.feature_dim();
    let mut features = Vec::with_capacity(classes.len() * effective * replication * dim);
    let mut labels = Vec::with_capacity(classes.len() * effective * replication);
    for &c in classes {
        let rows = data.rows_of_class(c);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
        let mut chosen: Vec<usize> =
            rand::seq::index::sample(&mut rng, rows.len(), effective).into_vec();
        chosen.sort_unstable();
        for idx in chosen {
            let base = data.feature_row(rows[idx]);
            for _ in 0..replication {
                for (v, s) in base.iter().zip(sigma) {
                    let z: f64 = rng.sample(StandardNormal);
                    features.push(v + s * z);
                }
                labels.push(c);
            }
        }
    }
    Ok(EaSampleSet {
        features,
        labels,
        feature_dim: dim,
        per_class: effective,
        replication,
        sigma: sigma.to_vec(),
    })
}

/// Capacity-bounded exemplar store with equal per-class quotas.
///
/// The quota is `floor(capacity / classes)` with the remainder going to the
/// lowest class indices; growing the class set re-partitions and randomly
/// down-samples what is already stored. Total storage never exceeds the
/// capacity.
#[derive(Debug, Clone)]
pub struct RehearsalBuffer {
    capacity: usize,
    feature_dim: usize,
    stored: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl RehearsalBuffer {
    pub fn new(capacity: usize, feature_dim: usize) -> Self {
        Self {
            capacity,
            feature_dim,
            stored: BTreeMap::new(),
        }
    }

    pub fn quotas(capacity: usize, classes: usize) -> Vec<usize> {
        let base = capacity / classes;
        let remainder = capacity % classes;
        (0..classes)
            .map(|i| base + usize::from(i < remainder))
            .collect()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_stored(&self) -> usize {
        self.stored.values().map(Vec::len).sum()
    }

    pub fn class_count(&self) -> usize {
        self.stored.len()
    }

    pub fn count_of(&self, class: usize) -> usize {
        self.stored.get(&class).map_or(0, Vec::len)
    }

    /// Smallest stored per-class count; zero when empty.
    pub fn min_class_count(&self) -> usize {
        self.stored.values().map(Vec::len).min().unwrap_or(0)
    }

    /// Absorbs the classes of `batch`: re-partitions quotas over the union
    /// of stored and incoming classes, down-samples existing exemplars, and
    /// samples the new classes from the batch.
    pub fn update(&mut self, batch: &LabeledDataset, seed: u64) -> Result<()> {
        if batch.feature_dim() != self.feature_dim {
            return Err(Error::LengthMismatch {
                context: "rehearsal feature dim",
                expected: self.feature_dim,
                got: batch.feature_dim(),
            });
        }
        let mut classes: Vec<usize> = self.stored.keys().cloned().collect();
        for (c, &n) in batch.counts().iter().enumerate() {
            if n > 0 && !self.stored.contains_key(&c) {
                classes.push(c);
            }
        }
        classes.sort_unstable();
        let quotas = Self::quotas(self.capacity, classes.len());
        for (&class, &quota) in classes.iter().zip(&quotas) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
            match self.stored.get_mut(&class) {
                Some(existing) => {
                    if existing.len() > quota {
                        let mut keep: Vec<usize> =
                            rand::seq::index::sample(&mut rng, existing.len(), quota).into_vec();
                        keep.sort_unstable();
                        let kept: Vec<Vec<f64>> =
                            keep.into_iter().map(|i| existing[i].clone()).collect();
                        *existing = kept;
                    }
                }
                None => {
                    let rows = batch.rows_of_class(class);
                    let take = quota.min(rows.len());
                    let mut chosen: Vec<usize> =
                        rand::seq::index::sample(&mut rng, rows.len(), take).into_vec();
                    chosen.sort_unstable();
                    let exemplars = chosen
                        .into_iter()
                        .map(|i| batch.feature_row(rows[i]).to_vec())
                        .collect();
                    self.stored.insert(class, exemplars);
                }
            }
        }
        debug_assert!(self.total_stored() <= self.capacity);
        Ok(())
    }

    /// All stored exemplars as a dataset; `None` when nothing is stored.
    pub fn to_dataset(&self, class_count: usize) -> Result<Option<LabeledDataset>> {
        if self.total_stored() == 0 {
            return Ok(None);
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (&class, exemplars) in &self.stored {
            for row in exemplars {
                features.extend_from_slice(row);
                labels.push(class);
            }
        }
        LabeledDataset::new(features, labels, self.feature_dim, class_count, Split::Train)
            .map(Some)
    }
}

/// Settings specific to the incremental stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CilConfig {
    pub lambda_base: f64,
    pub decay_base: f64,
    pub decay_eta: f64,
    pub rehearsal_capacity: usize,
    pub steps: usize,
    pub classes_per_step: usize,
}

impl Default for CilConfig {
    fn default() -> Self {
        Self {
            lambda_base: 1.0,
            decay_base: 5e-4,
            decay_eta: 0.5,
            rehearsal_capacity: 50,
            steps: 5,
            classes_per_step: 2,
        }
    }
}

/// Settings specific to the long-tailed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LtConfig {
    pub ea: EaParams,
    pub candidate_clusters: Vec<usize>,
    pub thresholds: SplitThresholds,
}

impl Default for LtConfig {
    fn default() -> Self {
        Self {
            ea: EaParams::default(),
            candidate_clusters: vec![1, 2, 3, 4, 5],
            thresholds: SplitThresholds::default(),
        }
    }
}

/// Metrics of one model state on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBlock {
    pub top1_micro: f64,
    pub top1_macro: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top5_micro: Option<f64>,
    pub per_class_accuracy: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitAccuracies>,
    pub confusion: ConfusionMatrix,
}

/// Scores a logit matrix against labels. When per-class training counts are
/// supplied the block also carries many/medium/few split accuracies.
pub fn eval_block(
    logits: &LogitMatrix,
    labels: &[usize],
    split_info: Option<(&[usize], SplitThresholds)>,
) -> Result<EvalBlock> {
    let confusion = ConfusionMatrix::from_logits(logits, labels)?;
    let per_class = confusion.per_class_accuracy();
    let splits = match split_info {
        Some((counts, thresholds)) => Some(split_accuracies(&per_class, counts, thresholds)?),
        None => None,
    };
    let top5 = if logits.class_count() >= 5 {
        Some(crate::metrics::topk_accuracy(logits, labels, 5)?)
    } else {
        None
    };
    Ok(EvalBlock {
        top1_micro: crate::metrics::topk_accuracy(logits, labels, 1)?,
        top1_macro: macro_accuracy(&per_class),
        top5_micro: top5,
        per_class_accuracy: per_class,
        splits,
        confusion,
    })
}

/// Per-class energy table for export: estimated negative free energy
/// before and after correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRow {
    pub class: usize,
    pub count: usize,
    pub before: f64,
    pub after: f64,
}

/// Everything measured on the long-tailed run; `report` is what lands in
/// metrics.json.
#[derive(Debug, Clone)]
pub struct LtOutcome {
    pub report: LtReport,
    pub model: MlpClassifier,
    pub shifts: ShiftVector,
    pub clusters: ClusterAssignment,
    pub ea_logits: LogitMatrix,
    pub trace: Vec<EpochStat>,
    pub energy: Vec<EnergyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtReport {
    pub mode: String,
    pub seed: u64,
    pub train_counts: Vec<usize>,
    pub selected_clusters: usize,
    pub cluster_of: Vec<usize>,
    pub anchor_cluster: usize,
    pub alphas: Vec<f64>,
    pub spearman_before: Option<f64>,
    pub spearman_after: Option<f64>,
    pub uncorrected: EvalBlock,
    pub corrected: EvalBlock,
}

/// Long-tailed recipe: train with cross entropy, estimate shifts from a
/// balanced re-sampled subset of the training data, pick the cluster count
/// on that same set, evaluate on the balanced test set.
pub fn run_lt(
    train_data: &LabeledDataset,
    test_data: &LabeledDataset,
    model_spec: &ModelSpec,
    lt: &LtConfig,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<LtOutcome> {
    if train_data.feature_dim() != test_data.feature_dim()
        || train_data.class_count() != test_data.class_count()
    {
        return Err(Error::Config(
            "train and test sets disagree on shape".into(),
        ));
    }
    if let Some(c) = train_data.counts().iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {c} has zero training samples")));
    }
    if let Some(c) = test_data.counts().iter().position(|&n| n == 0) {
        return Err(Error::Config(format!(
            "class {c} has no test samples; balanced evaluation needs every class"
        )));
    }
    let classes = train_data.class_count();
    let mut model = model_spec.build(
        train_data.feature_dim(),
        classes,
        derive_seed(seed, STREAM_MODEL_INIT),
    )?;
    let sgd_used = SgdConfig {
        seed: derive_seed(seed, STREAM_TRAIN + 1),
        ..sgd.clone()
    };
    let trace = train(&mut model, train_data, &sgd_used, None)?;

    let sigma: Vec<f64> = train_data
        .per_dimension_std()
        .into_iter()
        .map(|s| s * lt.ea.jitter_scale)
        .collect();
    let all_classes: Vec<usize> = (0..classes).collect();
    let ea = build_ea_sampleset(
        train_data,
        &all_classes,
        lt.ea.per_class,
        &sigma,
        lt.ea.replication,
        derive_seed(seed, STREAM_EA + 1),
    )?;
    let ea_logits = model.batch_logits(ea.features_flat())?;

    let counts = train_data.counts();
    let distinct = {
        let mut d = counts.to_vec();
        d.sort_unstable();
        d.dedup();
        d.len()
    };
    let feasible: Vec<usize> = lt
        .candidate_clusters
        .iter()
        .cloned()
        .filter(|&m| m >= 1 && m <= distinct)
        .collect();
    if feasible.is_empty() {
        return Err(Error::Config(format!(
            "no candidate cluster count is feasible for {distinct} distinct count values"
        )));
    }
    let selected = select_num_clusters(&feasible, counts, &ea_logits, ea.labels())?;
    let clusters = jenks_breaks(counts, selected)?;
    let shifts = cluster_shifts(&ea_logits, &clusters)?;

    let energies_before = neg_free_energies(&ea_logits)?;
    let energy: Vec<EnergyRow> = (0..classes)
        .map(|c| EnergyRow {
            class: c,
            count: counts[c],
            before: energies_before[c],
            after: energies_before[c] + shifts.alphas[c],
        })
        .collect();
    let spearman_before = energy_bias_diagnostic(counts, &energies_before)?;
    let after: Vec<f64> = energy.iter().map(|r| r.after).collect();
    let spearman_after = energy_bias_diagnostic(counts, &after)?;

    let test_logits = model.batch_logits(test_data.features_flat())?;
    let corrected_logits = apply_shifts_to_matrix(&test_logits, &shifts)?;
    let split_info = Some((counts, lt.thresholds));
    let uncorrected = eval_block(&test_logits, test_data.labels(), split_info)?;
    let corrected = eval_block(&corrected_logits, test_data.labels(), split_info)?;

    let report = LtReport {
        mode: "train-lt".into(),
        seed,
        train_counts: counts.to_vec(),
        selected_clusters: selected,
        cluster_of: clusters.cluster_of().to_vec(),
        anchor_cluster: clusters.anchor_cluster(),
        alphas: shifts.alphas.clone(),
        spearman_before,
        spearman_after,
        uncorrected,
        corrected,
    };
    Ok(LtOutcome {
        report,
        model,
        shifts,
        clusters,
        ea_logits,
        trace,
        energy,
    })
}

/// One incremental step as measured on the seen-class test slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CilStepReport {
    pub step: usize,
    pub seen_classes: usize,
    pub top1_raw: f64,
    pub top1_corrected: f64,
    /// Fraction of old-class test samples predicted as new classes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub old_to_new_raw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub old_to_new_corrected: Option<f64>,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CilReport {
    pub mode: String,
    pub seed: u64,
    pub ea_enabled: bool,
    pub class_order: Vec<usize>,
    pub per_step_top1: Vec<f64>,
    pub avg_incremental: Option<f64>,
    pub steps: Vec<CilStepReport>,
    pub final_eval: EvalBlock,
}

/// Per-step state kept for inspection next to the serializable report.
#[derive(Debug, Clone)]
pub struct CilStepOutcome {
    pub model: MlpClassifier,
    pub shifts: Option<ShiftVector>,
    pub clusters: Option<ClusterAssignment>,
    pub ea_logits: Option<LogitMatrix>,
    pub trace: Vec<EpochStat>,
}

#[derive(Debug, Clone)]
pub struct CilOutcome {
    pub report: CilReport,
    pub steps: Vec<CilStepOutcome>,
    pub energy: Vec<EnergyRow>,
}

/// Class-incremental recipe. With `enable_ea` off, the shifts are pinned to
/// zero everywhere (teacher correction and evaluation) while rehearsal and
/// distillation stay on, which isolates the effect of the correction.
#[allow(clippy::too_many_arguments)]
pub fn run_cil(
    train_data: &LabeledDataset,
    test_data: &LabeledDataset,
    model_spec: &ModelSpec,
    cil: &CilConfig,
    ea_params: &EaParams,
    sgd: &SgdConfig,
    enable_ea: bool,
    seed: u64,
) -> Result<CilOutcome> {
    if train_data.feature_dim() != test_data.feature_dim()
        || train_data.class_count() != test_data.class_count()
    {
        return Err(Error::Config(
            "train and test sets disagree on shape".into(),
        ));
    }
    if cil.classes_per_step < 2 {
        return Err(Error::Config(
            "need at least 2 classes per step to train the first model".into(),
        ));
    }
    if let Some(c) = test_data.counts().iter().position(|&n| n == 0) {
        return Err(Error::Config(format!(
            "class {c} has no test samples; per-step evaluation needs every class"
        )));
    }
    let splits = make_incremental_splits(
        train_data,
        cil.steps,
        cil.classes_per_step,
        derive_seed(seed, STREAM_SPLIT_ORDER),
    )?;
    let test_remapped = splits.remap(test_data)?;

    let mut buffer = RehearsalBuffer::new(cil.rehearsal_capacity, train_data.feature_dim());
    let mut model: Option<MlpClassifier> = None;
    let mut teacher: Option<(MlpClassifier, ShiftVector)> = None;
    let mut step_outcomes = Vec::with_capacity(cil.steps);
    let mut step_reports = Vec::with_capacity(cil.steps);
    let mut per_step_top1 = Vec::with_capacity(cil.steps);
    let mut final_energy = Vec::new();
    let mut final_eval = None;

    for b in 1..=cil.steps {
        let step_data = &splits.steps()[b - 1];
        let seen = b * cil.classes_per_step;
        let old = seen - cil.classes_per_step;
        let step_sgd = SgdConfig {
            weight_decay: step_weight_decay(cil.decay_base, cil.decay_eta, b)?,
            seed: derive_seed(seed, STREAM_TRAIN + b as u64),
            ..sgd.clone()
        };

        let (trace, train_set) = if b == 1 {
            let mut m = model_spec.build(
                train_data.feature_dim(),
                seen,
                derive_seed(seed, STREAM_MODEL_INIT),
            )?;
            let trace = train(&mut m, step_data, &step_sgd, None)?;
            model = Some(m);
            (trace, step_data.clone())
        } else {
            let m = model.as_mut().expect("model exists after step 1");
            m.expand_classes(seen, derive_seed(seed, STREAM_EXPAND + b as u64))?;
            let train_set = match buffer.to_dataset(seen)? {
                Some(rehearsal) => step_data.merge(&rehearsal)?,
                None => step_data.clone(),
            };
            let (teacher_model, teacher_shifts) =
                teacher.as_ref().expect("teacher exists after step 1");
            let distill = DistillTarget {
                teacher: teacher_model,
                shifts: teacher_shifts,
                lambda: lambda_weight(cil.lambda_base, old, cil.classes_per_step)?,
            };
            let trace = train(m, &train_set, &step_sgd, Some(&distill))?;
            (trace, train_set)
        };
        let m = model.as_ref().expect("trained above");

        // Sampling set and two-cluster shift; the old classes are the anchor.
        let (shifts, clusters, ea_logits) = if b == 1 {
            (ShiftVector::zero(seen), None, None)
        } else {
            let sigma: Vec<f64> = train_set
                .per_dimension_std()
                .into_iter()
                .map(|s| s * ea_params.jitter_scale)
                .collect();
            let all_seen: Vec<usize> = (0..seen).collect();
            let ea = build_ea_sampleset(
                &train_set,
                &all_seen,
                ea_params.per_class,
                &sigma,
                ea_params.replication,
                derive_seed(seed, STREAM_EA + b as u64),
            )?;
            let ea_logits = m.batch_logits(ea.features_flat())?;
            let cluster_of: Vec<usize> = (0..seen).map(|c| usize::from(c >= old)).collect();
            let clusters = ClusterAssignment::new(cluster_of, 0)?;
            let shifts = if enable_ea {
                cluster_shifts(&ea_logits, &clusters)?
            } else {
                ShiftVector::zero(seen)
            };
            if b == cil.steps {
                let energies = neg_free_energies(&ea_logits)?;
                final_energy = (0..seen)
                    .map(|c| EnergyRow {
                        class: c,
                        count: train_set.counts()[c],
                        before: energies[c],
                        after: energies[c] + shifts.alphas[c],
                    })
                    .collect();
            }
            (shifts, Some(clusters), Some(ea_logits))
        };

        // Evaluate raw and corrected on the seen-class slice.
        let test_slice = test_remapped.restrict_to_first_classes(seen)?;
        let raw_logits = m.batch_logits(test_slice.features_flat())?;
        let corrected_logits = apply_shifts_to_matrix(&raw_logits, &shifts)?;
        let top1_raw = crate::metrics::topk_accuracy(&raw_logits, test_slice.labels(), 1)?;
        let top1_corrected =
            crate::metrics::topk_accuracy(&corrected_logits, test_slice.labels(), 1)?;
        let (old_to_new_raw, old_to_new_corrected) = if old == 0 {
            (None, None)
        } else {
            (
                Some(old_to_new_mass(&raw_logits, test_slice.labels(), old)),
                Some(old_to_new_mass(&corrected_logits, test_slice.labels(), old)),
            )
        };
        per_step_top1.push(top1_corrected);
        if b == cil.steps {
            final_eval = Some(eval_block(&corrected_logits, test_slice.labels(), None)?);
            if final_energy.is_empty() {
                // single-step stream: identity correction, energies from the
                // training data itself
                let logits = m.batch_logits(step_data.features_flat())?;
                let energies = neg_free_energies(&logits)?;
                final_energy = (0..seen)
                    .map(|c| EnergyRow {
                        class: c,
                        count: step_data.counts()[c],
                        before: energies[c],
                        after: energies[c],
                    })
                    .collect();
            }
        }
        step_reports.push(CilStepReport {
            step: b,
            seen_classes: seen,
            top1_raw,
            top1_corrected,
            old_to_new_raw,
            old_to_new_corrected,
            alphas: shifts.alphas.clone(),
        });

        // Next teacher is the corrected snapshot of this step's model.
        teacher = Some((m.clone(), shifts.clone()));
        buffer.update(step_data, derive_seed(seed, STREAM_BUFFER + b as u64))?;
        assert!(
            buffer.total_stored() <= cil.rehearsal_capacity,
            "rehearsal buffer exceeded its capacity"
        );
        step_outcomes.push(CilStepOutcome {
            model: m.clone(),
            shifts: (b > 1).then(|| shifts.clone()),
            clusters,
            ea_logits,
            trace,
        });
    }

    let report = CilReport {
        mode: "train-cil".into(),
        seed,
        ea_enabled: enable_ea,
        class_order: splits.class_order().to_vec(),
        avg_incremental: avg_incremental(&per_step_top1),
        per_step_top1,
        steps: step_reports,
        final_eval: final_eval.expect("at least one step ran"),
    };
    Ok(CilOutcome {
        report,
        steps: step_outcomes,
        energy: final_energy,
    })
}

/// Fraction of old-class test samples predicted as any new class.
fn old_to_new_mass(logits: &LogitMatrix, labels: &[usize], old_classes: usize) -> f64 {
    let mut old_total = 0usize;
    let mut leaked = 0usize;
    for (row, &label) in logits.rows().zip(labels) {
        if label < old_classes {
            old_total += 1;
            if predict(row) >= old_classes {
                leaked += 1;
            }
        }
    }
    leaked as f64 / old_total as f64
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_traces(path: &Path, traces: &[(String, &[EpochStat])]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,split,value")?;
    for (split, stats) in traces {
        for s in *stats {
            writeln!(f, "{},{},{}", s.epoch, split, s.loss)?;
        }
    }
    Ok(())
}

fn write_energy(path: &Path, rows: &[EnergyRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "class,count,neg_free_energy_before,neg_free_energy_after")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.class, r.count, r.before, r.after)?;
    }
    Ok(())
}

/// Writes the long-tailed run directory: `config.json` echoes the resolved
/// configuration, plus `checkpoint`, `shifts.json`, `metrics.json`,
/// `traces.csv`, `energy_per_class.csv`, `confusion.csv`.
pub fn write_lt_run_dir(
    dir: &Path,
    outcome: &LtOutcome,
    config_echo: &serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), config_echo)?;
    outcome.model.save_checkpoint(&dir.join("checkpoint"), 1)?;
    outcome.shifts.save(&dir.join("shifts.json"))?;
    write_json(&dir.join("metrics.json"), &outcome.report)?;
    write_traces(
        &dir.join("traces.csv"),
        &[("train".to_string(), &outcome.trace)],
    )?;
    write_energy(&dir.join("energy_per_class.csv"), &outcome.energy)?;
    outcome
        .report
        .corrected
        .confusion
        .write_csv(&dir.join("confusion.csv"))?;
    Ok(())
}

/// Writes the incremental run directory: `config.json`, per-step
/// `step_k/checkpoint` and `step_k/shifts.json` (steps 2 and later), plus
/// `metrics.json`, `traces.csv`, `energy_per_class.csv`, `confusion.csv`.
pub fn write_cil_run_dir(
    dir: &Path,
    outcome: &CilOutcome,
    config_echo: &serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), config_echo)?;
    write_json(&dir.join("metrics.json"), &outcome.report)?;
    let mut traces: Vec<(String, &[EpochStat])> = Vec::new();
    for (i, step) in outcome.steps.iter().enumerate() {
        let step_dir = dir.join(format!("step_{}", i + 1));
        std::fs::create_dir_all(&step_dir)?;
        step.model
            .save_checkpoint(&step_dir.join("checkpoint"), (i + 1) as u64)?;
        if let Some(shifts) = &step.shifts {
            shifts.save(&step_dir.join("shifts.json"))?;
        }
        traces.push((format!("step{}", i + 1), &step.trace));
    }
    write_traces(&dir.join("traces.csv"), &traces)?;
    write_energy(&dir.join("energy_per_class.csv"), &outcome.energy)?;
    outcome
        .report
        .final_eval
        .confusion
        .write_csv(&dir.join("confusion.csv"))?;
    Ok(())
}
