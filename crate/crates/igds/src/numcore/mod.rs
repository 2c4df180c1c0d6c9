//! Dense real-valued tensor arithmetic and the differentiation contract used
//! by the toy transformer and the sparse autoencoder.
//!
//! Everything trains in double precision; the only contract the rest of the
//! crate relies on is that analytic gradients agree with centered finite
//! differences to better than 1e-4 relative error (see [`grad_check`]).

pub mod optim;
pub mod tape;

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("dimension mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("vector length mismatch: expected {expected}, got {got}")]
    LenMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, NumError>;

/// Row-major dense matrix of f64 values. Entries are finite after every
/// public operation.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    inner: Array2<f64>,
}

impl RealMatrix {
    pub fn from_rows_cols(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumError::LenMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        let inner = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| NumError::InvalidParam(e.to_string()))?;
        let m = RealMatrix { inner };
        m.check_finite("from_rows_cols")?;
        Ok(m)
    }

    pub fn from_array(inner: Array2<f64>) -> Self {
        RealMatrix { inner }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        RealMatrix {
            inner: Array2::zeros((rows, cols)),
        }
    }

    pub fn identity(n: usize) -> Self {
        RealMatrix {
            inner: Array2::eye(n),
        }
    }

    pub fn rows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn cols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.inner[[r, c]]
    }

    pub fn row(&self, r: usize) -> RealVector {
        RealVector::from_array(self.inner.row(r).to_owned())
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.inner
    }

    pub fn into_array(self) -> Array2<f64> {
        self.inner
    }

    fn check_finite(&self, op: &str) -> Result<()> {
        if self.inner.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumError::NonFinite(op.to_string()))
        }
    }
}

/// Dense vector of f64 values; entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct RealVector {
    inner: Array1<f64>,
}

impl RealVector {
    pub fn from_vec(data: Vec<f64>) -> Self {
        RealVector {
            inner: Array1::from_vec(data),
        }
    }

    pub fn from_array(inner: Array1<f64>) -> Self {
        RealVector { inner }
    }

    pub fn zeros(dim: usize) -> Self {
        RealVector {
            inner: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.inner.len()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.inner[i]
    }

    pub fn as_slice(&self) -> &[f64] {
        self.inner.as_slice().expect("contiguous")
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.inner
    }

    pub fn scaled(&self, c: f64) -> RealVector {
        RealVector::from_array(&self.inner * c)
    }
}

/// Standard matrix product. Fails on inner-dimension mismatch.
pub fn matmul(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    if a.cols() != b.rows() {
        return Err(NumError::DimMismatch {
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let out = RealMatrix {
        inner: a.inner.dot(&b.inner),
    };
    out.check_finite("matmul")?;
    Ok(out)
}

/// Elementwise max(0, x).
pub fn relu(x: &RealVector) -> RealVector {
    RealVector::from_array(x.inner.mapv(|v| v.max(0.0)))
}

/// Elementwise x * 1[x > theta]; theta must be nonnegative.
pub fn jumprelu(x: &RealVector, theta: f64) -> Result<RealVector> {
    if theta < 0.0 || !theta.is_finite() {
        return Err(NumError::InvalidParam(format!(
            "jumprelu threshold must be nonnegative and finite, got {theta}"
        )));
    }
    Ok(RealVector::from_array(
        x.inner.mapv(|v| if v > theta { v } else { 0.0 }),
    ))
}

/// Mean over positions of -log softmax(logits_t)[target_t].
///
/// `logits` is T x V; `targets` holds one token id per position.
pub fn cross_entropy(logits: &RealMatrix, targets: &[usize]) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(NumError::LenMismatch {
            expected: logits.rows(),
            got: targets.len(),
        });
    }
    let vocab = logits.cols();
    let mut total = 0.0;
    for (t, &target) in targets.iter().enumerate() {
        if target >= vocab {
            return Err(NumError::IndexOutOfRange {
                index: target,
                limit: vocab,
            });
        }
        let row = logits.inner.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[target];
    }
    let mean = total / targets.len() as f64;
    if !mean.is_finite() {
        return Err(NumError::NonFinite("cross_entropy".to_string()));
    }
    Ok(mean)
}

/// Compare an analytic gradient against centered finite differences.
///
/// Returns the max over parameters of
/// |analytic - fd| / (|analytic| + |fd| + 1e-12).
pub fn grad_check<F>(
    f: F,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if epsilon <= 0.0 {
        return Err(NumError::InvalidParam(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if analytic.len() != params.len() {
        return Err(NumError::LenMismatch {
            expected: params.len(),
            got: analytic.len(),
        });
    }
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + epsilon;
        let up = f(&work)?;
        work[i] = orig - epsilon;
        let down = f(&work)?;
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumError::NonFinite("grad_check evaluation".to_string()));
        }
        let fd = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let m = RealMatrix::from_rows_cols(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = RealMatrix::identity(2);
        let out = matmul(&i, &m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = RealMatrix::from_rows_cols(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = RealMatrix::from_rows_cols(2, 1, vec![0.0, 1.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.get(0, 0), 2.0);
        assert_eq!(out.get(1, 0), 4.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = RealMatrix::zeros(2, 3);
        let b = RealMatrix::zeros(2, 2);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn matmul_associative_on_random_triples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let data = |rng: &mut rand_chacha::ChaCha8Rng| {
                (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()
            };
            let a = RealMatrix::from_rows_cols(8, 8, data(&mut rng)).unwrap();
            let b = RealMatrix::from_rows_cols(8, 8, data(&mut rng)).unwrap();
            let c = RealMatrix::from_rows_cols(8, 8, data(&mut rng)).unwrap();
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for r in 0..8 {
                for cc in 0..8 {
                    let l = left.get(r, cc);
                    let rv = right.get(r, cc);
                    assert!((l - rv).abs() <= 1e-10 * (1.0 + l.abs().max(rv.abs())));
                }
            }
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(
            relu(&RealVector::from_vec(vec![0.0, 0.0, 0.0])).as_slice(),
            &[0.0, 0.0, 0.0]
        );
        assert_eq!(
            relu(&RealVector::from_vec(vec![-1.5, 2.0])).as_slice(),
            &[0.0, 2.0]
        );
        assert_eq!(
            relu(&RealVector::from_vec(vec![3.0, -3.0])).as_slice(),
            &[3.0, 0.0]
        );
    }

    #[test]
    fn jumprelu_cases() {
        assert_eq!(
            jumprelu(&RealVector::from_vec(vec![0.4]), 0.5).unwrap().as_slice(),
            &[0.0]
        );
        assert_eq!(
            jumprelu(&RealVector::from_vec(vec![0.7]), 0.5).unwrap().as_slice(),
            &[0.7]
        );
        assert_eq!(
            jumprelu(&RealVector::from_vec(vec![-1.0, 2.0]), 0.0)
                .unwrap()
                .as_slice(),
            &[0.0, 2.0]
        );
        assert!(jumprelu(&RealVector::from_vec(vec![1.0]), -0.1).is_err());
    }

    #[test]
    fn jumprelu_zero_theta_matches_relu_off_zero() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..100)
            .map(|_| {
                let v: f64 = rng.gen_range(-2.0..2.0);
                if v == 0.0 {
                    0.5
                } else {
                    v
                }
            })
            .collect();
        let v = RealVector::from_vec(xs);
        assert_eq!(jumprelu(&v, 0.0).unwrap(), relu(&v));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = RealMatrix::zeros(3, 4);
        let ce = cross_entropy(&logits, &[0, 1, 2]).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_margin_approaches_zero() {
        let logits = RealMatrix::from_rows_cols(1, 3, vec![50.0, 0.0, 0.0]).unwrap();
        let ce = cross_entropy(&logits, &[0]).unwrap();
        assert!(ce >= 0.0 && ce < 1e-10);
    }

    #[test]
    fn cross_entropy_direct_softmax() {
        let logits = RealMatrix::from_rows_cols(1, 2, vec![0.0, 3.0f64.ln()]).unwrap();
        let ce = cross_entropy(&logits, &[1]).unwrap();
        assert!((ce - (-(3.0f64 / 4.0).ln())).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_out_of_range_target() {
        let logits = RealMatrix::zeros(1, 4);
        assert!(matches!(
            cross_entropy(&logits, &[4]),
            Err(NumError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn grad_check_quadratic() {
        let f = |p: &[f64]| Ok(p[0] * p[0]);
        let err = grad_check(f, &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-8, "err={err}");
    }

    #[test]
    fn grad_check_constant() {
        let f = |_: &[f64]| Ok(42.0);
        let err = grad_check(f, &[1.0, 2.0], &[0.0, 0.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }
}
