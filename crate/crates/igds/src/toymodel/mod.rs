//! Small decoder-only transformer with per-layer residual-stream access.
//!
//! The model exposes everything the identification and scoring stages need:
//! residual taps at arbitrary layers, greedy/sampled generation, additive
//! residual-stream interventions, and next-token training (full-sequence
//! pretraining plus target-masked supervised fine-tuning).

pub mod checkpoint;
pub mod forward;
pub mod generate;
pub mod train;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::numcore::{NumError, RealVector};

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("layer {layer} out of range for model with {n_layers} layers")]
    UnknownLayer { layer: usize, n_layers: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("vector dimension {got} does not match d_model {expected}")]
    VectorDim { expected: usize, got: usize },
    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(ModelError::BadConfig("vocab_size must be >= 2".into()));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::BadConfig("max_seq_len must be >= 2".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(ModelError::BadConfig("n_layers must be >= 1".into()));
        }
        Ok(())
    }
}

/// One decoder block: pre-norm attention then pre-norm MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
    pub w_mlp_in: Array2<f64>,
    pub b_mlp_in: Array2<f64>,
    pub w_mlp_out: Array2<f64>,
    pub b_mlp_out: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub token_embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_gain: Array2<f64>,
    pub final_bias: Array2<f64>,
    pub unembed: Array2<f64>,
}

impl TransformerParams {
    /// Canonical (name, block) traversal used by the optimizer, the tape
    /// parameter registry, and the checkpoint writer. Order is load-bearing.
    pub fn named_blocks(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> =
            vec![("token_embed".into(), &self.token_embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_gain"), &l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &l.ln1_bias));
            out.push((format!("layer{i}.w_q"), &l.w_q));
            out.push((format!("layer{i}.w_k"), &l.w_k));
            out.push((format!("layer{i}.w_v"), &l.w_v));
            out.push((format!("layer{i}.w_o"), &l.w_o));
            out.push((format!("layer{i}.ln2_gain"), &l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &l.ln2_bias));
            out.push((format!("layer{i}.w_mlp_in"), &l.w_mlp_in));
            out.push((format!("layer{i}.b_mlp_in"), &l.b_mlp_in));
            out.push((format!("layer{i}.w_mlp_out"), &l.w_mlp_out));
            out.push((format!("layer{i}.b_mlp_out"), &l.b_mlp_out));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.token_embed];
        for l in self.layers.iter_mut() {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(&mut l.w_q);
            out.push(&mut l.w_k);
            out.push(&mut l.w_v);
            out.push(&mut l.w_o);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(&mut l.w_mlp_in);
            out.push(&mut l.b_mlp_in);
            out.push(&mut l.w_mlp_out);
            out.push(&mut l.b_mlp_out);
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.unembed);
        out
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.named_blocks()
            .iter()
            .map(|(_, b)| (b.nrows(), b.ncols()))
            .collect()
    }

    /// All parameters concatenated in canonical block order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.named_blocks()
            .iter()
            .flat_map(|(_, b)| b.iter().cloned().collect::<Vec<f64>>())
            .collect()
    }

    /// Rebuild parameters from a flat vector produced by [`Self::to_flat`].
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            for (dst, &src) in block.iter_mut().zip(&flat[offset..offset + n]) {
                *dst = src;
            }
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }
}

/// Residual-stream value at (layer, position): the output of block `layer`
/// exactly as the next block consumes it.
#[derive(Debug, Clone)]
pub struct ResidualTap {
    pub layer: usize,
    pub position: usize,
    pub state: RealVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionPolicy {
    /// Add the vector only at the critical position.
    CriticalOnly,
    /// Add the vector at every position from the critical position onward,
    /// including generated positions.
    AllFromCritical,
}

/// Additive residual-stream edit applied at the output of one layer.
#[derive(Debug, Clone)]
pub struct InterventionSpec {
    pub layer: usize,
    pub vector: RealVector,
    pub scale: f64,
    pub policy: PositionPolicy,
    /// Prompt position the policy is anchored to.
    pub critical_pos: usize,
}

impl InterventionSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers {
            return Err(ModelError::UnknownLayer {
                layer: self.layer,
                n_layers: cfg.n_layers,
            });
        }
        if self.vector.dim() != cfg.d_model {
            return Err(ModelError::VectorDim {
                expected: cfg.d_model,
                got: self.vector.dim(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub source: String,
    pub on_task: bool,
}

/// One supervised example: prompt tokens, target tokens, and the critical
/// token position the identification and scoring stages read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSample {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub critical_pos: usize,
    pub meta: SampleMeta,
}

impl DataSample {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(ModelError::EmptyInput("sample prompt".into()));
        }
        if self.target.is_empty() {
            return Err(ModelError::EmptyInput("sample target".into()));
        }
        if self.critical_pos >= self.prompt.len() {
            return Err(ModelError::BadConfig(format!(
                "critical_pos {} not inside prompt of length {}",
                self.critical_pos,
                self.prompt.len()
            )));
        }
        Ok(())
    }

    /// Prompt and target concatenated, the sequence SFT trains on.
    pub fn full_sequence(&self) -> Vec<TokenId> {
        let mut out = self.prompt.clone();
        out.extend_from_slice(&self.target);
        out
    }
}

/// Shared monotone counter of full-sequence forward passes.
#[derive(Debug, Clone, Default)]
pub struct PassCounter(Arc<AtomicU64>);

impl PassCounter {
    pub fn new() -> Self {
        PassCounter(Arc::new(AtomicU64::new(0)))
    }

    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Immutable transformer handle: config, weights, the fixed sinusoidal
/// position table, and the shared forward-pass counter.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: TransformerParams,
    pos_table: Array2<f64>,
    counter: PassCounter,
}

impl Model {
    /// Seeded random initialization from the config.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg);
        Ok(Model {
            pos_table: sinusoidal_table(cfg.max_seq_len, cfg.d_model),
            cfg,
            params,
            counter: PassCounter::new(),
        })
    }

    pub fn with_params(cfg: ModelConfig, params: TransformerParams) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            pos_table: sinusoidal_table(cfg.max_seq_len, cfg.d_model),
            cfg,
            params,
            counter: PassCounter::new(),
        })
    }

    /// Same weights, same counter, new parameter value.
    pub fn replace_params(&self, params: TransformerParams) -> Model {
        Model {
            cfg: self.cfg,
            params,
            pos_table: self.pos_table.clone(),
            counter: self.counter.clone(),
        }
    }

    pub fn pos_table(&self) -> &Array2<f64> {
        &self.pos_table
    }

    pub fn counter(&self) -> &PassCounter {
        &self.counter
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput("token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.cfg.max_seq_len,
            });
        }
        for &t in tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        Ok(())
    }
}

fn sinusoidal_table(max_len: usize, d_model: usize) -> Array2<f64> {
    Array2::from_shape_fn((max_len, d_model), |(pos, j)| {
        let pair = (j / 2) as f64;
        let rate = 1.0 / 10_000f64.powf(2.0 * pair / d_model as f64);
        let angle = pos as f64 * rate;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn init_params(cfg: &ModelConfig) -> TransformerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed as u64);
    let d = cfg.d_model;
    let hidden = 4 * d;
    let normal = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
    };
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            ln1_gain: Array2::ones((1, d)),
            ln1_bias: Array2::zeros((1, d)),
            w_q: normal(&mut rng, d, d),
            w_k: normal(&mut rng, d, d),
            w_v: normal(&mut rng, d, d),
            w_o: normal(&mut rng, d, d),
            ln2_gain: Array2::ones((1, d)),
            ln2_bias: Array2::zeros((1, d)),
            w_mlp_in: normal(&mut rng, d, hidden),
            b_mlp_in: Array2::zeros((1, hidden)),
            w_mlp_out: normal(&mut rng, hidden, d),
            b_mlp_out: Array2::zeros((1, d)),
        })
        .collect();
    TransformerParams {
        token_embed: normal(&mut rng, cfg.vocab_size, d),
        layers,
        final_gain: Array2::ones((1, d)),
        final_bias: Array2::zeros((1, d)),
        unembed: normal(&mut rng, d, cfg.vocab_size),
    }
}

#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 24,
        seed: 5,
    }
}
