//! Teacher soft labels from an ensemble of client predictions.
//!
//! Both aggregators combine raw logits first and apply the softmax afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax_rows, Matrix};
use crate::scalar::Scalar;

/// Row-stochastic teacher distribution, one row per distillation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SoftLabelBatch<T> {
    probabilities: Matrix<T>,
}

impl<T: Scalar> SoftLabelBatch<T> {
    /// `softmax(logits / temperature)` row by row.
    pub fn from_logits(logits: &Matrix<T>, temperature: T) -> Result<Self> {
        if !(temperature > T::zero()) {
            return Err(Error::param(
                "temperature",
                format!("must be positive, got {temperature}"),
            ));
        }
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite teacher logits".into()));
        }
        Ok(Self {
            probabilities: softmax_rows(logits, temperature),
        })
    }

    /// Wraps an existing distribution matrix after checking it is row-stochastic.
    pub fn from_probabilities(probabilities: Matrix<T>) -> Result<Self> {
        let tol = T::of(1e-6);
        for (r, row) in probabilities.iter_rows().enumerate() {
            let sum: T = row.iter().copied().sum();
            if row.iter().any(|&p| !(p >= T::zero())) || (sum - T::one()).abs() > tol {
                return Err(Error::Argument(format!("row {r} is not a probability distribution")));
            }
        }
        Ok(Self { probabilities })
    }

    pub fn probabilities(&self) -> &Matrix<T> {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.probabilities.cols()
    }

    /// Teacher rows for a mini-batch.
    pub fn select(&self, indices: &[usize]) -> Matrix<T> {
        self.probabilities.select_rows(indices)
    }
}

fn check_shapes<T: Scalar>(logits: &[Matrix<T>]) -> Result<(usize, usize)> {
    let first = logits
        .first()
        .ok_or_else(|| Error::Argument("ensemble has no members".into()))?;
    for m in logits {
        if m.rows() != first.rows() {
            return Err(Error::dim("ensemble logit rows", first.rows(), m.rows()));
        }
        if m.cols() != first.cols() {
            return Err(Error::dim("ensemble logit classes", first.cols(), m.cols()));
        }
    }
    Ok(first.shape())
}

/// `Σ_i w_i(r) f_i(x_r)` row by row.
fn combine<T: Scalar>(logits: &[Matrix<T>], weight: impl Fn(usize, usize) -> T) -> Matrix<T> {
    let (rows, cols) = logits[0].shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let row = out.row_mut(r);
        for (i, m) in logits.iter().enumerate() {
            let w = weight(i, r);
            for (o, &z) in row.iter_mut().zip(m.row(r)) {
                *o += w * z;
            }
        }
    }
    out
}

/// Arithmetic mean of the client logit matrices.
pub fn mean_logits<T: Scalar>(logits: &[Matrix<T>]) -> Result<Matrix<T>> {
    check_shapes(logits)?;
    let uniform = T::one() / T::of_usize(logits.len());
    Ok(combine(logits, |_, _| uniform))
}

/// Per-sample score-weighted mean of the client logits.
///
/// A sample whose scores are all equal gets exactly uniform weights, so the
/// result is bit-identical to [`mean_logits`] there.
pub fn weighted_logits<T: Scalar>(logits: &[Matrix<T>], scores: &[Vec<T>]) -> Result<Matrix<T>> {
    let (rows, _) = check_shapes(logits)?;
    if scores.len() != logits.len() {
        return Err(Error::dim("ensemble scores", logits.len(), scores.len()));
    }
    for (client, s) in scores.iter().enumerate() {
        if s.len() != rows {
            return Err(Error::dim("client scores", rows, s.len()));
        }
        if let Some(sample) = s.iter().position(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::Score {
                client,
                sample,
                value: s[sample].as_f64(),
            });
        }
    }
    let uniform = T::one() / T::of_usize(logits.len());
    let totals: Vec<Option<T>> = (0..rows)
        .map(|r| {
            let first = scores[0][r];
            if scores.iter().all(|s| s[r] == first) {
                None
            } else {
                Some(scores.iter().map(|s| s[r]).sum())
            }
        })
        .collect();
    Ok(combine(logits, |i, r| match totals[r] {
        None => uniform,
        Some(total) => scores[i][r] / total,
    }))
}

/// `softmax(mean_i f_i(x))`.
pub fn aggregate_mean<T: Scalar>(logits: &[Matrix<T>]) -> Result<SoftLabelBatch<T>> {
    SoftLabelBatch::from_logits(&mean_logits(logits)?, T::one())
}

/// `softmax(Σ_i s_i(x) f_i(x) / Σ_i s_i(x))`.
pub fn aggregate_weighted<T: Scalar>(logits: &[Matrix<T>], scores: &[Vec<T>]) -> Result<SoftLabelBatch<T>> {
    SoftLabelBatch::from_logits(&weighted_logits(logits, scores)?, T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::softmax;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_f64_rows(rows)
    }

    #[test]
    fn mean_examples() {
        let a = m(&[&[2.0, 0.0]]);
        let b = m(&[&[0.0, 2.0]]);
        let out = aggregate_mean(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(out.probabilities().row(0), &[0.5, 0.5]);
        let single = aggregate_mean(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.probabilities().row(0), softmax(a.row(0)).unwrap().as_slice());
        assert_eq!(aggregate_mean(&[b, a]).unwrap(), out);
    }

    #[test]
    fn weighted_examples() {
        let a = m(&[&[2.0, 0.0]]);
        let b = m(&[&[0.0, 2.0]]);
        let out = aggregate_weighted(&[a.clone(), b.clone()], &[vec![0.8], vec![0.2]]).unwrap();
        let p = out.probabilities().row(0);
        assert!((p[0] - 0.76852).abs() < 1e-4 && (p[1] - 0.23148).abs() < 1e-4);

        let dominant = aggregate_weighted(&[a.clone(), b], &[vec![1.0], vec![1e-8]]).unwrap();
        let reference = softmax(a.row(0)).unwrap();
        for (x, y) in dominant.probabilities().row(0).iter().zip(&reference) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        let a = m(&[&[2.0, 0.0]]);
        assert!(matches!(aggregate_mean::<f64>(&[]), Err(Error::Argument(_))));
        assert!(matches!(
            aggregate_mean(&[a.clone(), m(&[&[1.0, 2.0, 3.0]])]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            aggregate_weighted(&[a.clone(), a.clone()], &[vec![0.5], vec![0.0]]),
            Err(Error::Score {
                client: 1,
                sample: 0,
                ..
            })
        ));
        assert!(matches!(
            aggregate_weighted(std::slice::from_ref(&a), &[vec![0.5, 0.5]]),
            Err(Error::Dimension { .. })
        ));
    }

    fn instance() -> impl Strategy<Value = (Vec<Matrix<f64>>, Vec<Vec<f64>>)> {
        (1usize..5, 1usize..6, 2usize..5).prop_flat_map(|(k, rows, cols)| {
            (
                prop::collection::vec(prop::collection::vec(-10.0f64..10.0, rows * cols), k).prop_map(move |ms| {
                    ms.into_iter()
                        .map(|d| Matrix::from_vec(rows, cols, d).unwrap())
                        .collect()
                }),
                prop::collection::vec(prop::collection::vec(1e-8f64..1.0, rows), k),
            )
        })
    }

    proptest! {
        #[test]
        fn uniform_scores_reduce_to_mean((logits, scores) in instance(), c in 1e-8f64..5.0) {
            let uniform: Vec<Vec<f64>> = scores.iter().map(|s| vec![c; s.len()]).collect();
            let w = aggregate_weighted(&logits, &uniform).unwrap();
            let mean = aggregate_mean(&logits).unwrap();
            prop_assert_eq!(w, mean);
        }

        #[test]
        fn output_is_row_stochastic((logits, scores) in instance()) {
            for out in [aggregate_weighted(&logits, &scores).unwrap(), aggregate_mean(&logits).unwrap()] {
                for row in out.probabilities().iter_rows() {
                    prop_assert!(row.iter().all(|&p| p >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn per_sample_score_scaling_is_invisible((logits, scores) in instance(), c in 0.01f64..100.0) {
            let scaled: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().map(|v| v * c).collect()).collect();
            let a = aggregate_weighted(&logits, &scores).unwrap();
            let b = aggregate_weighted(&logits, &scaled).unwrap();
            for (x, y) in a.probabilities().as_slice().iter().zip(b.probabilities().as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn weighted_logits_stay_in_convex_hull((logits, scores) in instance()) {
            // Every coordinate of a convex combination lies between the smallest
            // and largest corresponding client coordinate.
            let out = weighted_logits(&logits, &scores).unwrap();
            for r in 0..out.rows() {
                for (j, &o) in out.row(r).iter().enumerate() {
                    let lo = logits.iter().map(|m| m.get(r, j)).fold(f64::INFINITY, f64::min);
                    let hi = logits.iter().map(|m| m.get(r, j)).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(o >= lo - 1e-9 && o <= hi + 1e-9);
                }
            }
        }

        #[test]
        fn two_member_output_lies_on_segment(a in prop::collection::vec(-5.0f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 3), s in 1e-6f64..1.0) {
            let ma = Matrix::from_vec(1, 3, a.clone()).unwrap();
            let mb = Matrix::from_vec(1, 3, b.clone()).unwrap();
            let out = weighted_logits(&[ma, mb], &[vec![s], vec![1.0 - s + 1e-6]]).unwrap();
            // out = b + t (a - b) for a single t in [0, 1].
            let j = (0..3).max_by(|&x, &y| (a[x] - b[x]).abs().total_cmp(&(a[y] - b[y]).abs())).unwrap();
            prop_assume!((a[j] - b[j]).abs() > 1e-3);
            let t = (out.get(0, j) - b[j]) / (a[j] - b[j]);
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&t));
            for k in 0..3 {
                prop_assert!((out.get(0, k) - (b[k] + t * (a[k] - b[k]))).abs() < 1e-9);
            }
        }
    }
}
