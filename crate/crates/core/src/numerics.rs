//! Numerically stable primitives over logits.
//!
//! Everything here works in `f64` regardless of how logits were stored on
//! disk. `log_sum_exp` uses the usual max-shift so that
//! `lse(x) = m + ln(sum exp(x_i - m))` never overflows; with at least one
//! term equal to `exp(0)` the inner sum is >= 1, which gives the bounds
//! `max(x) <= lse(x) <= max(x) + ln(n)`.
//!
//! [`neg_free_energy`] turns a column of a [`LogitMatrix`] into a Monte
//! Carlo estimate of the negative free energy of that class: for a sampling
//! set drawn uniformly from a distribution with density q over the inputs,
//! `lse(column j)` estimates `log integral exp(f(x)[j]) dx` up to the
//! additive constant `log(S q)`. The constant is shared by every class, so
//! differences of these values (the shift scalars) do not depend on it.

use crate::{Error, Result};

/// A dense S x C matrix of logits, row-major, one row per sample.
///
/// Invariants: S >= 1, C >= 2, every entry finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    values: Vec<f64>,
    sample_count: usize,
    class_count: usize,
}

impl LogitMatrix {
    /// Builds a matrix from a flat row-major buffer of length `samples * classes`.
    pub fn from_flat(values: Vec<f64>, samples: usize, classes: usize) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Empty("logit matrix needs at least one sample row"));
        }
        if classes < 2 {
            return Err(Error::Config(format!(
                "logit matrix needs at least 2 classes, got {classes}"
            )));
        }
        if values.len() != samples * classes {
            return Err(Error::LengthMismatch {
                context: "logit matrix buffer",
                expected: samples * classes,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logit matrix"));
        }
        Ok(Self {
            values,
            sample_count: samples,
            class_count: classes,
        })
    }

    /// Builds a matrix from per-sample rows, all of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("logit matrix needs at least one sample row"));
        }
        let classes = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * classes);
        for row in rows {
            if row.len() != classes {
                return Err(Error::LengthMismatch {
                    context: "logit matrix row",
                    expected: classes,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::from_flat(values, rows.len(), classes)
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.class_count..(s + 1) * self.class_count]
    }

    /// Copies column `j` out of the row-major storage.
    pub fn column(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.class_count {
            return Err(Error::IndexOutOfRange {
                context: "logit matrix column",
                index: j,
                len: self.class_count,
            });
        }
        Ok((0..self.sample_count)
            .map(|s| self.values[s * self.class_count + j])
            .collect())
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.class_count)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }
}

/// Stable log(sum_i exp(values[i])).
///
/// Errors on empty or non-finite input. The result respects
/// `max(values) <= lse <= max(values) + ln(len)`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("log_sum_exp"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log_sum_exp"));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Stable softmax. Entries land in [0, 1] and sum to 1 within 1e-12;
/// adding a constant to every logit leaves the output unchanged.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Monte Carlo estimate of the negative free energy of class `class_index`:
/// the log-sum-exp of that class's logit over all sampling rows.
///
/// The estimate carries an additive constant `log(S q)` shared by all
/// classes; only differences between classes are meaningful. With S = 1 it
/// degenerates to the raw logit.
pub fn neg_free_energy(logits: &LogitMatrix, class_index: usize) -> Result<f64> {
    let column = logits.column(class_index)?;
    log_sum_exp(&column)
}

/// Negative free energy of every class, in class order.
pub fn neg_free_energies(logits: &LogitMatrix) -> Result<Vec<f64>> {
    (0..logits.class_count())
        .map(|j| neg_free_energy(logits, j))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn lse_single_element_is_identity() {
        assert_eq!(log_sum_exp(&[3.5]).unwrap(), 3.5);
    }

    #[test]
    fn lse_of_two_zeros_is_ln_two() {
        let got = log_sum_exp(&[0.0, 0.0]).unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-15, "got {got}");
    }

    #[test]
    fn lse_survives_large_magnitudes() {
        // naive exp(1000) overflows; max-shift must not.
        let got = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((got - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        let neg = log_sum_exp(&[-1000.0, -1000.0]).unwrap();
        assert!((neg - (-1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn lse_rejects_empty_and_non_finite() {
        assert!(matches!(log_sum_exp(&[]), Err(Error::Empty(_))));
        assert!(matches!(
            log_sum_exp(&[1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            log_sum_exp(&[1.0, f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn neg_free_energy_matches_hand_value() {
        // rows [[2,1],[0,1]]: column 0 is [2,0], lse = 2 + ln(1 + e^-2).
        let m = LogitMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let got = neg_free_energy(&m, 0).unwrap();
        assert!((got - 2.1269280110429727).abs() < 1e-12, "got {got}");
        let col1 = neg_free_energy(&m, 1).unwrap();
        assert!((col1 - 1.6931471805599452).abs() < 1e-12, "got {col1}");
    }

    #[test]
    fn neg_free_energy_rejects_out_of_range_class() {
        let m = LogitMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            neg_free_energy(&m, 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn logit_matrix_validates_shape() {
        assert!(LogitMatrix::from_flat(vec![0.0; 6], 0, 2).is_err());
        assert!(LogitMatrix::from_flat(vec![0.0; 3], 3, 1).is_err());
        assert!(LogitMatrix::from_flat(vec![0.0; 5], 2, 3).is_err());
        assert!(LogitMatrix::from_flat(vec![f64::NAN; 4], 2, 2).is_err());
        let m = LogitMatrix::from_flat(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0]);
        assert_eq!(m.column(1).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn appending_a_sample_never_decreases_neg_free_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let s = rng.random_range(1..20usize);
            let rows: Vec<Vec<f64>> = (0..s)
                .map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect())
                .collect();
            let base = LogitMatrix::from_rows(&rows).unwrap();
            let mut extended = rows.clone();
            extended.push((0..3).map(|_| rng.random_range(-5.0..5.0)).collect());
            let bigger = LogitMatrix::from_rows(&extended).unwrap();
            for j in 0..3 {
                assert!(
                    neg_free_energy(&bigger, j).unwrap() >= neg_free_energy(&base, j).unwrap()
                );
            }
        }
    }

    #[test]
    fn estimator_variance_shrinks_with_sample_count() {
        // lse(column) - ln(S) over i.i.d. N(0,1) logits concentrates as S grows.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let variance_at = |s: usize, rng: &mut ChaCha8Rng| {
            let reps = 100;
            let estimates: Vec<f64> = (0..reps)
                .map(|_| {
                    let col: Vec<f64> = (0..s).map(|_| rng.sample(StandardNormal)).collect();
                    log_sum_exp(&col).unwrap() - (s as f64).ln()
                })
                .collect();
            let mean = estimates.iter().sum::<f64>() / reps as f64;
            estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / reps as f64
        };
        let v10 = variance_at(10, &mut rng);
        let v100 = variance_at(100, &mut rng);
        let v1000 = variance_at(1000, &mut rng);
        assert!(v100 < v10, "v10={v10} v100={v100}");
        assert!(v1000 < v100, "v100={v100} v1000={v1000}");
    }

    proptest! {
        #[test]
        fn lse_bounds_hold(values in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let lse = log_sum_exp(&values).unwrap();
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lse >= max - 1e-12);
            prop_assert!(lse <= max + (values.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn lse_shift_property(values in proptest::collection::vec(-30.0f64..30.0, 1..20), c in -40.0f64..40.0) {
            let base = log_sum_exp(&values).unwrap();
            let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
            let got = log_sum_exp(&shifted).unwrap();
            prop_assert!((got - (base + c)).abs() <= 1e-10, "{got} vs {}", base + c);
        }

        #[test]
        fn softmax_is_a_distribution_and_shift_invariant(
            values in proptest::collection::vec(-30.0f64..30.0, 2..12),
            c in -20.0f64..20.0,
        ) {
            let p = softmax(&values).unwrap();
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
