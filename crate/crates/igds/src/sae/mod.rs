//! Sparse autoencoder over residual-stream states.
//!
//! encode projects a d_model residual into a nonnegative d_sae code,
//! decode reconstructs, and feature_vector extracts a single feature's
//! contribution (activation times its decoder row) — the vector that the
//! amplification intervention adds back into the residual stream.

pub mod io;
pub mod train;

use thiserror::Error;

use crate::numcore::{RealMatrix, RealVector};

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("feature index {index} out of range (d_sae {d_sae})")]
    FeatureOutOfRange { index: usize, d_sae: usize },
    #[error("invalid sae: {0}")]
    Invalid(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
}

pub type Result<T> = std::result::Result<T, SaeError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SaeActivation {
    Relu,
    JumpRelu { theta: f64 },
}

impl SaeActivation {
    fn apply(&self, v: f64) -> f64 {
        match self {
            SaeActivation::Relu => v.max(0.0),
            SaeActivation::JumpRelu { theta } => {
                if v > *theta {
                    v
                } else {
                    0.0
                }
            }
        }
    }
}

/// Encoder/decoder weights for the SAE attached to one model layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub layer: usize,
    pub w_enc: RealMatrix,
    pub b_enc: RealVector,
    pub w_dec: RealMatrix,
    pub b_dec: RealVector,
    pub activation: SaeActivation,
}

impl SaeParams {
    pub fn new(
        layer: usize,
        w_enc: RealMatrix,
        b_enc: RealVector,
        w_dec: RealMatrix,
        b_dec: RealVector,
        activation: SaeActivation,
    ) -> Result<Self> {
        let d_model = w_enc.rows();
        let d_sae = w_enc.cols();
        if d_sae < d_model {
            return Err(SaeError::Invalid(format!(
                "d_sae {d_sae} must be >= d_model {d_model}"
            )));
        }
        if b_enc.dim() != d_sae {
            return Err(SaeError::DimMismatch {
                expected: d_sae,
                got: b_enc.dim(),
            });
        }
        if w_dec.rows() != d_sae || w_dec.cols() != d_model {
            return Err(SaeError::Invalid(format!(
                "w_dec must be {d_sae}x{d_model}, got {}x{}",
                w_dec.rows(),
                w_dec.cols()
            )));
        }
        if b_dec.dim() != d_model {
            return Err(SaeError::DimMismatch {
                expected: d_model,
                got: b_dec.dim(),
            });
        }
        if let SaeActivation::JumpRelu { theta } = activation {
            if theta < 0.0 || !theta.is_finite() {
                return Err(SaeError::Invalid(format!(
                    "jumprelu threshold must be nonnegative, got {theta}"
                )));
            }
        }
        Ok(SaeParams {
            layer,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            activation,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn d_sae(&self) -> usize {
        self.w_enc.cols()
    }
}

/// activation(W_enc^T h + b_enc); elementwise nonnegative.
pub fn encode(sae: &SaeParams, h: &RealVector) -> Result<RealVector> {
    let d_model = sae.d_model();
    if h.dim() != d_model {
        return Err(SaeError::DimMismatch {
            expected: d_model,
            got: h.dim(),
        });
    }
    let d_sae = sae.d_sae();
    let w = sae.w_enc.as_array();
    let hv = h.as_slice();
    let mut out = vec![0.0; d_sae];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &hi) in hv.iter().enumerate() {
            acc += w[[i, j]] * hi;
        }
        acc += sae.b_enc.get(j);
        *slot = sae.activation.apply(acc);
    }
    Ok(RealVector::from_vec(out))
}

/// a^T W_dec + b_dec.
pub fn decode(sae: &SaeParams, a: &RealVector) -> Result<RealVector> {
    let d_sae = sae.d_sae();
    if a.dim() != d_sae {
        return Err(SaeError::DimMismatch {
            expected: d_sae,
            got: a.dim(),
        });
    }
    let d_model = sae.d_model();
    let w = sae.w_dec.as_array();
    let av = a.as_slice();
    let mut out = vec![0.0; d_model];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (f, &af) in av.iter().enumerate() {
            acc += af * w[[f, i]];
        }
        *slot = acc + sae.b_dec.get(i);
    }
    Ok(RealVector::from_vec(out))
}

/// encode(h)[f] times decoder row f: the feature's influence vector.
pub fn feature_vector(sae: &SaeParams, h: &RealVector, f: usize) -> Result<RealVector> {
    if f >= sae.d_sae() {
        return Err(SaeError::FeatureOutOfRange {
            index: f,
            d_sae: sae.d_sae(),
        });
    }
    let code = encode(sae, h)?;
    Ok(sae.w_dec.row(f).scaled(code.get(f)))
}

/// Per-feature fraction of states with a positive code, ascending by rate
/// (ties by feature index).
pub fn dead_feature_report(sae: &SaeParams, states: &[RealVector]) -> Result<Vec<(usize, f64)>> {
    if states.is_empty() {
        return Err(SaeError::EmptyInput("dead_feature_report batch".into()));
    }
    let d_sae = sae.d_sae();
    let mut counts = vec![0usize; d_sae];
    for h in states {
        let code = encode(sae, h)?;
        for (f, count) in counts.iter_mut().enumerate() {
            if code.get(f) > 0.0 {
                *count += 1;
            }
        }
    }
    let n = states.len() as f64;
    let mut out: Vec<(usize, f64)> = counts
        .into_iter()
        .enumerate()
        .map(|(f, c)| (f, c as f64 / n))
        .collect();
    out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(out)
}

#[cfg(test)]
pub(crate) fn random_sae(
    layer: usize,
    d_model: usize,
    d_sae: usize,
    activation: SaeActivation,
    seed: u64,
) -> SaeParams {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |r: usize, c: usize| {
        RealMatrix::from_rows_cols(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    };
    let w_enc = mat(d_model, d_sae);
    let w_dec = mat(d_sae, d_model);
    let b_enc = RealVector::zeros(d_sae);
    let b_dec = RealVector::zeros(d_model);
    SaeParams::new(layer, w_enc, b_enc, w_dec, b_dec, activation).unwrap()
}
