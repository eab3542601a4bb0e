//! Shift scalars that equalize per-class free energies.
//!
//! The correction is one additive scalar per class. In per-class mode every
//! class gets `alpha_j = lse(col anchor) - lse(col j)`, so after adding
//! `alpha_j` to class j's logit every class has the anchor's estimated free
//! energy. When per-class estimates are too noisy (few samples per class),
//! classes are first grouped by their training-set size with exact natural
//! breaks ([`jenks_breaks`]) and one shared scalar is computed per group
//! from the group means of the column log-sum-exps.
//!
//! The anchor (class or cluster) is the reference whose energy everyone
//! else is moved to; its own shift is exactly zero.

use crate::numerics::{neg_free_energies, LogitMatrix};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Whether shifts were estimated independently per class or shared per
/// count cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftMode {
    PerClass,
    PerCluster,
}

/// Per-class additive logit corrections.
///
/// `anchor` names a class index in per-class mode and a cluster index in
/// per-cluster mode. The anchor's entries are exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftVector {
    pub mode: ShiftMode,
    pub anchor: usize,
    pub alphas: Vec<f64>,
}

impl ShiftVector {
    /// Identity correction: all shifts zero.
    pub fn zero(class_count: usize) -> Self {
        Self {
            mode: ShiftMode::PerCluster,
            anchor: 0,
            alphas: vec![0.0; class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.alphas.len()
    }

    /// Checks the invariants that can be seen from the vector alone.
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::Empty("shift vector"));
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("shift vector"));
        }
        match self.mode {
            ShiftMode::PerClass => {
                if self.anchor >= self.alphas.len() {
                    return Err(Error::IndexOutOfRange {
                        context: "shift vector anchor class",
                        index: self.anchor,
                        len: self.alphas.len(),
                    });
                }
                if self.alphas[self.anchor] != 0.0 {
                    return Err(Error::Config(format!(
                        "anchor class {} must have zero shift, got {}",
                        self.anchor, self.alphas[self.anchor]
                    )));
                }
            }
            ShiftMode::PerCluster => {
                // The cluster map is not stored here; the weakest visible
                // consequence is that the anchor cluster's classes are zero.
                if !self.alphas.contains(&0.0) {
                    return Err(Error::Config(
                        "per-cluster shift vector has no zero (anchor) entry".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let v: Self = serde_json::from_str(&text)?;
        v.validate()?;
        Ok(v)
    }
}

/// Adds the shifts to one logit row.
pub fn apply_shifts(row: &[f64], shifts: &ShiftVector) -> Result<Vec<f64>> {
    if row.len() != shifts.alphas.len() {
        return Err(Error::LengthMismatch {
            context: "apply_shifts",
            expected: shifts.alphas.len(),
            got: row.len(),
        });
    }
    Ok(row
        .iter()
        .zip(&shifts.alphas)
        .map(|(v, a)| v + a)
        .collect())
}

/// Adds the shifts to every row of a matrix.
pub fn apply_shifts_to_matrix(logits: &LogitMatrix, shifts: &ShiftVector) -> Result<LogitMatrix> {
    if logits.class_count() != shifts.alphas.len() {
        return Err(Error::LengthMismatch {
            context: "apply_shifts_to_matrix",
            expected: shifts.alphas.len(),
            got: logits.class_count(),
        });
    }
    let mut values = Vec::with_capacity(logits.sample_count() * logits.class_count());
    for row in logits.rows() {
        values.extend(row.iter().zip(&shifts.alphas).map(|(v, a)| v + a));
    }
    LogitMatrix::from_flat(values, logits.sample_count(), logits.class_count())
}

/// Independent per-class shifts toward the anchor class's free energy.
pub fn per_class_shifts(logits: &LogitMatrix, anchor: usize) -> Result<ShiftVector> {
    if anchor >= logits.class_count() {
        return Err(Error::IndexOutOfRange {
            context: "per_class_shifts anchor",
            index: anchor,
            len: logits.class_count(),
        });
    }
    let lses = neg_free_energies(logits)?;
    let alphas = lses.iter().map(|l| lses[anchor] - l).collect();
    let v = ShiftVector {
        mode: ShiftMode::PerClass,
        anchor,
        alphas,
    };
    v.validate()?;
    Ok(v)
}

/// A partition of the classes into count clusters.
///
/// Cluster ids are dense in `0..num_clusters` and every cluster is
/// non-empty. When produced by [`jenks_breaks`], cluster 0 holds the
/// largest training counts and ids descend from there, so the clusters are
/// contiguous intervals of the count-sorted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    cluster_of: Vec<usize>,
    num_clusters: usize,
    sizes: Vec<usize>,
    anchor_cluster: usize,
}

impl ClusterAssignment {
    pub fn new(cluster_of: Vec<usize>, anchor_cluster: usize) -> Result<Self> {
        if cluster_of.is_empty() {
            return Err(Error::Empty("cluster assignment"));
        }
        let num_clusters = cluster_of.iter().max().unwrap() + 1;
        let mut sizes = vec![0usize; num_clusters];
        for &k in &cluster_of {
            sizes[k] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("cluster {empty} is empty")));
        }
        if anchor_cluster >= num_clusters {
            return Err(Error::IndexOutOfRange {
                context: "anchor cluster",
                index: anchor_cluster,
                len: num_clusters,
            });
        }
        Ok(Self {
            cluster_of,
            num_clusters,
            sizes,
            anchor_cluster,
        })
    }

    pub fn cluster_of(&self) -> &[usize] {
        &self.cluster_of
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn anchor_cluster(&self) -> usize {
        self.anchor_cluster
    }

    pub fn class_count(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn with_anchor(mut self, anchor_cluster: usize) -> Result<Self> {
        if anchor_cluster >= self.num_clusters {
            return Err(Error::IndexOutOfRange {
                context: "anchor cluster",
                index: anchor_cluster,
                len: self.num_clusters,
            });
        }
        self.anchor_cluster = anchor_cluster;
        Ok(self)
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.cluster_of
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == cluster)
            .map(|(c, _)| c)
            .collect()
    }
}

/// Shared per-cluster shifts: for each cluster, the difference between the
/// anchor cluster's mean column log-sum-exp and this cluster's mean.
pub fn cluster_shifts(logits: &LogitMatrix, clusters: &ClusterAssignment) -> Result<ShiftVector> {
    if logits.class_count() != clusters.class_count() {
        return Err(Error::LengthMismatch {
            context: "cluster_shifts",
            expected: clusters.class_count(),
            got: logits.class_count(),
        });
    }
    let lses = neg_free_energies(logits)?;
    let mut sums = vec![0.0f64; clusters.num_clusters()];
    for (class, &k) in clusters.cluster_of().iter().enumerate() {
        sums[k] += lses[class];
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(clusters.sizes())
        .map(|(s, &n)| s / n as f64)
        .collect();
    let anchor_mean = means[clusters.anchor_cluster()];
    let per_cluster: Vec<f64> = means.iter().map(|m| anchor_mean - m).collect();
    let alphas = clusters
        .cluster_of()
        .iter()
        .map(|&k| per_cluster[k])
        .collect();
    let v = ShiftVector {
        mode: ShiftMode::PerCluster,
        anchor: clusters.anchor_cluster(),
        alphas,
    };
    v.validate()?;
    Ok(v)
}

/// Exact natural-breaks clustering of per-class training counts.
///
/// Minimizes the total within-cluster sum of squared deviations over all
/// partitions of the count-sorted classes into `m` contiguous groups, by
/// dynamic programming over the distinct count values. Classes with equal
/// counts always land in the same cluster. Cluster 0 gets the largest
/// counts. The anchor defaults to the fewest-count cluster.
pub fn jenks_breaks(counts: &[usize], m: usize) -> Result<ClusterAssignment> {
    if counts.is_empty() {
        return Err(Error::Empty("jenks_breaks counts"));
    }
    if m == 0 {
        return Err(Error::Config("jenks_breaks needs at least one cluster".into()));
    }
    let mut distinct: Vec<usize> = counts.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let v = distinct.len();
    if m > v {
        return Err(Error::DegenerateClustering {
            requested: m,
            distinct: v,
        });
    }

    // Weighted prefix sums over the distinct ascending values; the weight of
    // a value is how many classes carry it, so group costs equal the plain
    // per-class sum of squares.
    let mut weight = vec![0.0f64; v + 1];
    let mut sum = vec![0.0f64; v + 1];
    let mut sumsq = vec![0.0f64; v + 1];
    for (i, &val) in distinct.iter().enumerate() {
        let w = counts.iter().filter(|&&c| c == val).count() as f64;
        let x = val as f64;
        weight[i + 1] = weight[i] + w;
        sum[i + 1] = sum[i] + w * x;
        sumsq[i + 1] = sumsq[i] + w * x * x;
    }
    // Inclusive 1-based range a..=b of distinct values.
    let ssq = |a: usize, b: usize| -> f64 {
        let w = weight[b] - weight[a - 1];
        let s = sum[b] - sum[a - 1];
        let q = sumsq[b] - sumsq[a - 1];
        (q - s * s / w).max(0.0)
    };

    let mut cost = vec![vec![f64::INFINITY; v + 1]; m + 1];
    let mut split = vec![vec![0usize; v + 1]; m + 1];
    for i in 1..=v {
        cost[1][i] = ssq(1, i);
        split[1][i] = 1;
    }
    for k in 2..=m {
        for i in k..=v {
            for j in k..=i {
                let c = cost[k - 1][j - 1] + ssq(j, i);
                if c < cost[k][i] {
                    cost[k][i] = c;
                    split[k][i] = j;
                }
            }
        }
    }

    // group_of_value[i] in ascending-value order, then relabel so cluster 0
    // holds the largest counts.
    let mut group_of_value = vec![0usize; v];
    let mut end = v;
    for k in (1..=m).rev() {
        let start = split[k][end];
        for item in group_of_value.iter_mut().take(end).skip(start - 1) {
            *item = k - 1;
        }
        end = start - 1;
    }
    let cluster_of: Vec<usize> = counts
        .iter()
        .map(|c| {
            let idx = distinct.binary_search(c).expect("value came from counts");
            m - 1 - group_of_value[idx]
        })
        .collect();

    let assignment = ClusterAssignment::new(cluster_of, 0)?;
    let anchor = select_anchor(counts, &assignment)?;
    assignment.with_anchor(anchor)
}

/// The cluster with the smallest mean training count; ties go to the lower
/// cluster index.
pub fn select_anchor(counts: &[usize], clusters: &ClusterAssignment) -> Result<usize> {
    if counts.len() != clusters.class_count() {
        return Err(Error::LengthMismatch {
            context: "select_anchor",
            expected: clusters.class_count(),
            got: counts.len(),
        });
    }
    let mut sums = vec![0.0f64; clusters.num_clusters()];
    for (class, &k) in clusters.cluster_of().iter().enumerate() {
        sums[k] += counts[class] as f64;
    }
    let mut best = 0;
    let mut best_mean = f64::INFINITY;
    for (k, (s, &n)) in sums.iter().zip(clusters.sizes()).enumerate() {
        let mean = s / n as f64;
        if mean < best_mean {
            best_mean = mean;
            best = k;
        }
    }
    Ok(best)
}

/// Picks the cluster count whose correction scores the best top-1 accuracy
/// on the labeled sampling set; ties go to the smaller count.
///
/// Every candidate must be feasible for [`jenks_breaks`] on these counts.
pub fn select_num_clusters(
    candidates: &[usize],
    counts: &[usize],
    logits: &LogitMatrix,
    labels: &[usize],
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("cluster count candidates"));
    }
    let mut ordered: Vec<usize> = candidates.to_vec();
    ordered.sort_unstable();
    ordered.dedup();
    let mut best_m = 0;
    let mut best_acc = f64::NEG_INFINITY;
    for &m in &ordered {
        let clusters = jenks_breaks(counts, m)?;
        let shifts = cluster_shifts(logits, &clusters)?;
        let corrected = apply_shifts_to_matrix(logits, &shifts)?;
        let acc = crate::metrics::topk_accuracy(&corrected, labels, 1)?;
        if acc > best_acc {
            best_acc = acc;
            best_m = m;
        }
    }
    Ok(best_m)
}
