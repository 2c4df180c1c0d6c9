//! Next-token training: full-sequence pretraining and target-masked SFT.
//!
//! One training step records the whole minibatch on a single tape (the
//! parameters are registered once), takes the mean of per-sequence losses,
//! and applies one adaptive-moment update. Runs are deterministic given
//! (params, data, config).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::forward::{forward_on_tape, register_params};
use super::{DataSample, Model, ModelError, Result, TokenId};
use crate::numcore::optim::AdaptiveMoment;
use crate::numcore::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(ModelError::BadConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::BadConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Next-token pretraining over raw token sequences; loss at every position.
pub fn train(model: &Model, corpus: &[Vec<TokenId>], cfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyInput("training corpus".into()));
    }
    let items: Vec<(Vec<TokenId>, usize)> = corpus.iter().map(|s| (s.clone(), 0)).collect();
    run_training(model, items, cfg)
}

/// Supervised fine-tuning: cross-entropy over target-token positions only.
pub fn sft(model: &Model, dataset: &[DataSample], cfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyInput("sft dataset".into()));
    }
    let mut items = Vec::with_capacity(dataset.len());
    for s in dataset {
        s.validate()?;
        // Label position j predicts full[j+1]; target tokens start at
        // prompt.len(), so labels from prompt.len()-1 onward count.
        items.push((s.full_sequence(), s.prompt.len() - 1));
    }
    run_training(model, items, cfg)
}

/// Loss of one sample under fixed parameters, masked like SFT training.
pub fn sample_loss(model: &Model, sample: &DataSample) -> Result<f64> {
    sample.validate()?;
    let full = sample.full_sequence();
    sequence_loss(model, &full, sample.prompt.len() - 1)
}

/// Masked next-token loss of one sequence: labels at positions >= mask_from.
pub fn sequence_loss(model: &Model, tokens: &[TokenId], mask_from: usize) -> Result<f64> {
    model.check_tokens(tokens)?;
    if tokens.len() < 2 {
        return Err(ModelError::EmptyInput("sequence needs at least two tokens".into()));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let labels: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let mask: Vec<bool> = (0..labels.len()).map(|j| j >= mask_from).collect();
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::EmptyInput("loss mask selects no positions".into()));
    }
    let mut tape = Tape::new();
    let nodes = register_params(&mut tape, model, false);
    let (logits, _) = forward_on_tape(&mut tape, &nodes, model, inputs, &Default::default(), None);
    let loss = tape.mean_ce_masked(logits, labels, mask);
    Ok(tape.value(loss)[[0, 0]])
}

/// Masked loss of one sequence together with its flat analytic gradient,
/// visiting parameters in canonical block order. Gradient-verification entry
/// point; training itself uses the batched path below.
pub fn loss_and_flat_grad(
    model: &Model,
    tokens: &[TokenId],
    mask_from: usize,
) -> Result<(f64, Vec<f64>)> {
    model.check_tokens(tokens)?;
    if tokens.len() < 2 {
        return Err(ModelError::EmptyInput("sequence needs at least two tokens".into()));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let labels: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let mask: Vec<bool> = (0..labels.len()).map(|j| j >= mask_from).collect();
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::EmptyInput("loss mask selects no positions".into()));
    }
    let mut tape = Tape::new();
    let nodes = register_params(&mut tape, model, true);
    let (logits, _) = forward_on_tape(&mut tape, &nodes, model, inputs, &Default::default(), None);
    let loss = tape.mean_ce_masked(logits, labels, mask);
    let value = tape.value(loss)[[0, 0]];
    let grads = tape.backward(loss);
    let flat = grads
        .iter()
        .flat_map(|g| g.iter().cloned().collect::<Vec<f64>>())
        .collect();
    Ok((value, flat))
}

fn run_training(
    model: &Model,
    items: Vec<(Vec<TokenId>, usize)>,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    for (tokens, mask_from) in &items {
        model.check_tokens(tokens)?;
        if tokens.len() < 2 {
            return Err(ModelError::EmptyInput(
                "training sequence needs at least two tokens".into(),
            ));
        }
        if *mask_from >= tokens.len() - 1 {
            return Err(ModelError::EmptyInput("loss mask selects no positions".into()));
        }
    }

    let mut out = model.clone();
    let shapes = out.params.shapes();
    let mut opt = AdaptiveMoment::new(cfg.lr, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trajectory = Vec::new();
    let mut steps = 0usize;

    'epochs: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if let Some(cap) = cfg.max_steps {
                if steps >= cap {
                    break 'epochs;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            // Per-sequence forwards are independent; fold gradients in chunk
            // order so the update is identical at any thread count.
            let parts: Vec<(f64, Vec<ndarray::Array2<f64>>)> = chunk
                .par_iter()
                .map(|&i| {
                    let (tokens, mask_from) = &items[i];
                    let inputs = &tokens[..tokens.len() - 1];
                    let labels: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
                    let mask: Vec<bool> = (0..labels.len()).map(|j| j >= *mask_from).collect();
                    let mut tape = Tape::new();
                    let nodes = register_params(&mut tape, &out, true);
                    let (logits, _) =
                        forward_on_tape(&mut tape, &nodes, &out, inputs, &Default::default(), None);
                    let loss = tape.mean_ce_masked(logits, labels, mask);
                    let value = tape.value(loss)[[0, 0]];
                    (value, tape.backward(loss))
                })
                .collect();

            let mut batch_loss = 0.0;
            let mut grads: Vec<ndarray::Array2<f64>> =
                shapes.iter().map(|&(r, c)| ndarray::Array2::zeros((r, c))).collect();
            for (value, part) in parts {
                batch_loss += value * scale;
                for (g, p) in grads.iter_mut().zip(part) {
                    g.scaled_add(scale, &p);
                }
            }
            let mut blocks = out.params.blocks_mut();
            opt.step(&mut blocks, &grads);
            trajectory.push(batch_loss);
            steps += 1;
        }
    }
    Ok((out, trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::generate::{generate, GenMode};
    use crate::toymodel::{tiny_config, SampleMeta};

    #[test]
    fn zero_epochs_is_a_no_op() {
        let model = Model::new(tiny_config()).unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            epochs: 0,
            seed: 1,
            max_steps: None,
        };
        let (trained, losses) = train(&model, &[vec![1, 2, 3]], &cfg).unwrap();
        assert!(losses.is_empty());
        assert_eq!(trained.params, model.params);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let model = Model::new(tiny_config()).unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            epochs: 1,
            seed: 1,
            max_steps: None,
        };
        assert!(matches!(
            train(&model, &[], &cfg),
            Err(ModelError::EmptyInput(_))
        ));
    }

    #[test]
    fn learns_alternating_sequence() {
        let model = Model::new(tiny_config()).unwrap();
        let seqs: Vec<Vec<TokenId>> = (0..16)
            .map(|i| {
                let start = i % 2;
                (0..10).map(|j| ((start + j) % 2) as TokenId).collect()
            })
            .collect();
        let cfg = TrainConfig {
            lr: 3e-3,
            batch_size: 8,
            epochs: 200,
            seed: 7,
            max_steps: Some(200),
        };
        let (trained, losses) = train(&model, &seqs, &cfg).unwrap();
        let final_loss = *losses.last().unwrap();
        assert!(final_loss < 0.1, "final loss {final_loss}");
        let out = generate(&trained, &[0, 1, 0], 4, &GenMode::Greedy).unwrap();
        assert_eq!(out, vec![1, 0, 1, 0]);
    }

    #[test]
    fn training_is_deterministic() {
        let model = Model::new(tiny_config()).unwrap();
        let seqs = vec![vec![1u32, 2, 3, 4], vec![4, 3, 2, 1], vec![5, 6, 7, 8]];
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            epochs: 3,
            seed: 42,
            max_steps: None,
        };
        let (a, la) = train(&model, &seqs, &cfg).unwrap();
        let (b, lb) = train(&model, &seqs, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn sft_masks_prompt_positions() {
        // With frozen params the loss must ignore the prompt's label terms:
        // two samples with different prompt interiors but identical forward
        // state at target positions would differ only via the forward
        // computation. Here we check the masking arithmetic directly.
        let model = Model::new(tiny_config()).unwrap();
        let sample = DataSample {
            prompt: vec![1, 2, 3],
            target: vec![4, 5],
            critical_pos: 2,
            meta: SampleMeta {
                source: "t".into(),
                on_task: true,
            },
        };
        let full = sample.full_sequence();
        let masked = sample_loss(&model, &sample).unwrap();
        // Recompute from raw logits: mean CE over the last two label slots.
        let (logits, _) = crate::toymodel::forward::forward_with_taps(
            &model,
            &full[..full.len() - 1],
            &Default::default(),
        )
        .unwrap();
        let labels: Vec<usize> = full[1..].iter().map(|&t| t as usize).collect();
        let mut total = 0.0;
        for j in 2..labels.len() {
            let row: Vec<f64> = (0..logits.cols()).map(|c| logits.get(j, c)).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[labels[j]];
        }
        let expect = total / 2.0;
        assert!((masked - expect).abs() < 1e-12);
    }

    #[test]
    fn transformer_gradient_matches_finite_differences() {
        let cfg = crate::toymodel::ModelConfig {
            vocab_size: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 8,
            seed: 21,
        };
        let model = Model::new(cfg).unwrap();
        let tokens: Vec<TokenId> = vec![1, 4, 2, 5, 0];
        let (_, analytic) = loss_and_flat_grad(&model, &tokens, 1).unwrap();
        let base = model.params.to_flat();
        let f = |flat: &[f64]| {
            let mut m = model.clone();
            m.params.assign_flat(flat);
            loss_and_flat_grad(&m, &tokens, 1)
                .map(|(v, _)| v)
                .map_err(|_| crate::numcore::NumError::NonFinite("loss".into()))
        };
        let err = crate::numcore::grad_check(f, &base, &analytic, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn duplicated_dataset_keeps_batch_gradient_direction() {
        // Mean loss over a duplicated batch equals the original mean loss;
        // with batch_size covering the whole set the first step must match.
        let model = Model::new(tiny_config()).unwrap();
        let base = vec![vec![1u32, 2, 3, 4], vec![4, 3, 2, 1]];
        let doubled = vec![base[0].clone(), base[1].clone(), base[0].clone(), base[1].clone()];
        let cfg = |bs: usize| TrainConfig {
            lr: 1e-3,
            batch_size: bs,
            epochs: 1,
            seed: 9,
            max_steps: Some(1),
        };
        let (a, _) = train(&model, &base, &cfg(2)).unwrap();
        let (b, _) = train(&model, &doubled, &cfg(4)).unwrap();
        for (x, y) in a.params.named_blocks().iter().zip(b.params.named_blocks()) {
            for (u, v) in x.1.iter().zip(y.1.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
