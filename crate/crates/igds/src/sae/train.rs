//! SAE training: reconstruction MSE plus an L1 sparsity penalty on the
//! codes, with decoder rows renormalized to unit norm after every step.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numcore::optim::AdaptiveMoment;
use crate::numcore::tape::Tape;
use crate::numcore::{RealMatrix, RealVector};

use super::{Result, SaeActivation, SaeError, SaeParams};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SaeTrainConfig {
    pub l1_coeff: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l1_coeff < 0.0 {
            return Err(SaeError::Invalid("l1_coeff must be nonnegative".into()));
        }
        if self.lr <= 0.0 {
            return Err(SaeError::Invalid("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(SaeError::Invalid("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Seeded initialization: random unit-norm decoder rows, encoder tied to
/// the decoder transpose, zero biases.
pub fn init_sae(
    layer: usize,
    d_model: usize,
    d_sae: usize,
    activation: SaeActivation,
    seed: u64,
) -> Result<SaeParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w_dec = Array2::zeros((d_sae, d_model));
    for mut row in w_dec.rows_mut() {
        let mut norm = 0.0f64;
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
            norm += *v * *v;
        }
        let norm = norm.sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    let w_enc = w_dec.t().to_owned();
    SaeParams::new(
        layer,
        RealMatrix::from_array(w_enc),
        RealVector::zeros(d_sae),
        RealMatrix::from_array(w_dec),
        RealVector::zeros(d_model),
        activation,
    )
}

/// Train on a states matrix (one residual vector per row).
///
/// Deterministic given the config seed; returns the final parameters and
/// the per-step loss trajectory.
pub fn train_sae(
    states: &[RealVector],
    cfg: &SaeTrainConfig,
    layer: usize,
    d_sae: usize,
    activation: SaeActivation,
) -> Result<(SaeParams, Vec<f64>)> {
    if states.is_empty() {
        return Err(SaeError::EmptyInput("sae training states".into()));
    }
    let d_model = states[0].dim();
    let mut mat = Array2::zeros((states.len(), d_model));
    for (i, s) in states.iter().enumerate() {
        if s.dim() != d_model {
            return Err(SaeError::DimMismatch {
                expected: d_model,
                got: s.dim(),
            });
        }
        mat.row_mut(i).assign(s.as_array());
    }
    train_sae_batch(&mat, cfg, layer, d_sae, activation)
}

/// As [`train_sae`] on a pre-assembled matrix of states.
pub fn train_sae_batch(
    states: &Array2<f64>,
    cfg: &SaeTrainConfig,
    layer: usize,
    d_sae: usize,
    activation: SaeActivation,
) -> Result<(SaeParams, Vec<f64>)> {
    cfg.validate()?;
    let n = states.nrows();
    let d_model = states.ncols();
    if n == 0 {
        return Err(SaeError::EmptyInput("sae training states".into()));
    }
    if n < cfg.batch_size {
        return Err(SaeError::Invalid(format!(
            "need at least batch_size ({}) states, got {n}",
            cfg.batch_size
        )));
    }

    let init = init_sae(layer, d_model, d_sae, activation, cfg.seed)?;
    if cfg.steps == 0 {
        return Ok((init, Vec::new()));
    }

    let mut w_enc = init.w_enc.as_array().clone();
    let mut b_enc = Array2::zeros((1, d_sae));
    let mut w_dec = init.w_dec.as_array().clone();
    let mut b_dec = Array2::zeros((1, d_model));

    let shapes = [
        (d_model, d_sae),
        (1, d_sae),
        (d_sae, d_model),
        (1, d_model),
    ];
    let mut opt = AdaptiveMoment::new(cfg.lr, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut trajectory = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        if cursor + cfg.batch_size > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let mut batch = Array2::zeros((cfg.batch_size, d_model));
        for (bi, &si) in idx.iter().enumerate() {
            batch.row_mut(bi).assign(&states.row(si));
        }

        let (loss, grads) = sae_step_loss_grads(
            &w_enc, &b_enc, &w_dec, &b_dec, activation, &batch, cfg.l1_coeff,
        );
        trajectory.push(loss);
        {
            let mut blocks = [&mut w_enc, &mut b_enc, &mut w_dec, &mut b_dec];
            opt.step(&mut blocks, &grads);
        }
        renormalize_rows(&mut w_dec);
    }

    let params = SaeParams::new(
        layer,
        RealMatrix::from_array(w_enc),
        RealVector::from_array(b_enc.index_axis(Axis(0), 0).to_owned()),
        RealMatrix::from_array(w_dec),
        RealVector::from_array(b_dec.index_axis(Axis(0), 0).to_owned()),
        activation,
    )?;
    Ok((params, trajectory))
}

fn renormalize_rows(w: &mut Array2<f64>) {
    for mut row in w.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
}

fn sae_step_loss_grads(
    w_enc: &Array2<f64>,
    b_enc: &Array2<f64>,
    w_dec: &Array2<f64>,
    b_dec: &Array2<f64>,
    activation: SaeActivation,
    batch: &Array2<f64>,
    l1_coeff: f64,
) -> (f64, Vec<Array2<f64>>) {
    let d_sae = w_enc.ncols();
    let mut tape = Tape::new();
    let we = tape.param(w_enc.clone());
    let be = tape.param(b_enc.clone());
    let wd = tape.param(w_dec.clone());
    let bd = tape.param(b_dec.clone());
    let h = tape.input(batch.clone());
    let pre = tape.matmul(h, we);
    let pre_b = tape.add_row(pre, be);
    let code = match activation {
        SaeActivation::Relu => tape.relu(pre_b),
        SaeActivation::JumpRelu { theta } => tape.jumprelu(pre_b, theta),
    };
    let lin = tape.matmul(code, wd);
    let recon = tape.add_row(lin, bd);
    let mse = tape.mse_to(recon, batch.clone());
    let l1 = tape.mean_abs(code);
    // mean_abs averages over batch and features; scale by d_sae so the
    // penalty is the mean L1 norm of the codes.
    let loss = tape.add_scaled(mse, l1, l1_coeff * d_sae as f64);
    let value = tape.value(loss)[[0, 0]];
    let grads = tape.backward(loss);
    (value, grads)
}

/// Loss and flat analytic gradient for gradient verification.
/// Parameter order: w_enc, b_enc, w_dec, b_dec.
pub fn sae_loss_and_flat_grad(
    sae: &SaeParams,
    batch: &Array2<f64>,
    l1_coeff: f64,
) -> (f64, Vec<f64>) {
    let b_enc = sae
        .b_enc
        .as_array()
        .clone()
        .insert_axis(Axis(0));
    let b_dec = sae
        .b_dec
        .as_array()
        .clone()
        .insert_axis(Axis(0));
    let (loss, grads) = sae_step_loss_grads(
        sae.w_enc.as_array(),
        &b_enc,
        sae.w_dec.as_array(),
        &b_dec,
        sae.activation,
        batch,
        l1_coeff,
    );
    let flat = grads
        .iter()
        .flat_map(|g| g.iter().cloned().collect::<Vec<f64>>())
        .collect();
    (loss, flat)
}

/// Flat parameter vector in the order used by [`sae_loss_and_flat_grad`].
pub fn sae_to_flat(sae: &SaeParams) -> Vec<f64> {
    let mut out: Vec<f64> = sae.w_enc.as_array().iter().cloned().collect();
    out.extend(sae.b_enc.as_slice());
    out.extend(sae.w_dec.as_array().iter());
    out.extend(sae.b_dec.as_slice());
    out
}

/// Rebuild an SAE from a flat parameter vector.
pub fn sae_from_flat(template: &SaeParams, flat: &[f64]) -> SaeParams {
    let d_model = template.d_model();
    let d_sae = template.d_sae();
    let mut off = 0;
    let mut take = |n: usize| {
        let s = flat[off..off + n].to_vec();
        off += n;
        s
    };
    let w_enc = RealMatrix::from_rows_cols(d_model, d_sae, take(d_model * d_sae)).unwrap();
    let b_enc = RealVector::from_vec(take(d_sae));
    let w_dec = RealMatrix::from_rows_cols(d_sae, d_model, take(d_sae * d_model)).unwrap();
    let b_dec = RealVector::from_vec(take(d_model));
    assert_eq!(off, flat.len());
    SaeParams::new(template.layer, w_enc, b_enc, w_dec, b_dec, template.activation).unwrap()
}

/// Mean squared reconstruction error of the SAE over a batch of states.
pub fn reconstruction_mse(sae: &SaeParams, states: &[RealVector]) -> Result<f64> {
    if states.is_empty() {
        return Err(SaeError::EmptyInput("mse states".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for h in states {
        let code = super::encode(sae, h)?;
        let recon = super::decode(sae, &code)?;
        for i in 0..h.dim() {
            let d = recon.get(i) - h.get(i);
            total += d * d;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
