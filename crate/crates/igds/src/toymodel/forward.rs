//! The single forward implementation behind inference, generation, and
//! training. Every caller goes through `forward_on_tape`, so residual taps,
//! interventions, and gradients all see exactly the same computation.

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::numcore::tape::{NodeId, Tape};
use crate::numcore::{RealMatrix, RealVector};

use super::{InterventionSpec, Model, ModelError, PositionPolicy, ResidualTap, Result, TokenId};

/// Tape node ids for every parameter block, in canonical order.
pub(crate) struct ParamNodes {
    pub token_embed: NodeId,
    pub layers: Vec<LayerNodes>,
    pub final_gain: NodeId,
    pub final_bias: NodeId,
    pub unembed: NodeId,
}

pub(crate) struct LayerNodes {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub w_mlp_in: NodeId,
    pub b_mlp_in: NodeId,
    pub w_mlp_out: NodeId,
    pub b_mlp_out: NodeId,
}

/// Register every weight block on the tape. `trainable` decides whether the
/// blocks join the gradient registry or enter as plain inputs.
pub(crate) fn register_params(tape: &mut Tape, model: &Model, trainable: bool) -> ParamNodes {
    let mut reg = |v: &Array2<f64>| {
        if trainable {
            tape.param(v.clone())
        } else {
            tape.input(v.clone())
        }
    };
    let token_embed = reg(&model.params.token_embed);
    let layers = model
        .params
        .layers
        .iter()
        .map(|l| LayerNodes {
            ln1_gain: reg(&l.ln1_gain),
            ln1_bias: reg(&l.ln1_bias),
            w_q: reg(&l.w_q),
            w_k: reg(&l.w_k),
            w_v: reg(&l.w_v),
            w_o: reg(&l.w_o),
            ln2_gain: reg(&l.ln2_gain),
            ln2_bias: reg(&l.ln2_bias),
            w_mlp_in: reg(&l.w_mlp_in),
            b_mlp_in: reg(&l.b_mlp_in),
            w_mlp_out: reg(&l.w_mlp_out),
            b_mlp_out: reg(&l.b_mlp_out),
        })
        .collect();
    ParamNodes {
        token_embed,
        layers,
        final_gain: reg(&model.params.final_gain),
        final_bias: reg(&model.params.final_bias),
        unembed: reg(&model.params.unembed),
    }
}

const LN_EPS: f64 = 1e-5;

/// Run one sequence through the model on an existing tape.
///
/// Returns the logits node (T x V) plus the residual node after each layer
/// in `tap_layers`. The residual reported for layer l is the value the next
/// block actually consumes, i.e. it includes any intervention at layer l.
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    nodes: &ParamNodes,
    model: &Model,
    tokens: &[TokenId],
    tap_layers: &BTreeSet<usize>,
    intervention: Option<&InterventionSpec>,
) -> (NodeId, Vec<(usize, NodeId)>) {
    let cfg = &model.cfg;
    let t = tokens.len();
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let dh = d / n_heads;

    model.counter().bump();

    let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let embedded = tape.gather_rows(nodes.token_embed, ids);
    let pos = tape.input(
        model
            .pos_table()
            .slice(ndarray::s![..t, ..])
            .to_owned(),
    );
    let mut x = tape.add(embedded, pos);

    let mut taps = Vec::new();
    for (layer_idx, layer) in nodes.layers.iter().enumerate() {
        // Attention sublayer.
        let normed = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LN_EPS);
        let q = tape.matmul(normed, layer.w_q);
        let k = tape.matmul(normed, layer.w_k);
        let v = tape.matmul(normed, layer.w_v);
        let mut head_outputs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let lo = h * dh;
            let hi = lo + dh;
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let raw = tape.matmul_nt(qh, kh);
            let scaled = tape.scale(raw, 1.0 / (dh as f64).sqrt());
            let probs = tape.causal_softmax(scaled);
            head_outputs.push(tape.matmul(probs, vh));
        }
        let ctx = if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            tape.concat_cols(head_outputs)
        };
        let attn_out = tape.matmul(ctx, layer.w_o);
        x = tape.add(x, attn_out);

        // MLP sublayer.
        let normed2 = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias, LN_EPS);
        let pre = tape.matmul(normed2, layer.w_mlp_in);
        let pre_b = tape.add_row(pre, layer.b_mlp_in);
        let act = tape.relu(pre_b);
        let mlp = tape.matmul(act, layer.w_mlp_out);
        let mlp_b = tape.add_row(mlp, layer.b_mlp_out);
        x = tape.add(x, mlp_b);

        if let Some(spec) = intervention {
            if spec.layer == layer_idx && spec.critical_pos < t {
                let scaled_vec = tape.input(Array2::from_shape_fn((1, d), |(_, j)| {
                    spec.scale * spec.vector.get(j)
                }));
                let (from, to) = match spec.policy {
                    PositionPolicy::CriticalOnly => (spec.critical_pos, spec.critical_pos + 1),
                    PositionPolicy::AllFromCritical => (spec.critical_pos, t),
                };
                x = tape.add_rows_range(x, scaled_vec, from, to);
            }
        }

        if tap_layers.contains(&layer_idx) {
            taps.push((layer_idx, x));
        }
    }

    let final_norm = tape.layer_norm(x, nodes.final_gain, nodes.final_bias, LN_EPS);
    let logits = tape.matmul(final_norm, nodes.unembed);
    (logits, taps)
}

/// One inference forward pass: logits for every position and a tap for every
/// requested (layer, position) pair, ordered by layer then position.
pub fn forward_with_taps(
    model: &Model,
    tokens: &[TokenId],
    tap_layers: &BTreeSet<usize>,
) -> Result<(RealMatrix, Vec<ResidualTap>)> {
    forward_with_taps_intervened(model, tokens, tap_layers, None)
}

/// Same as [`forward_with_taps`] but with an optional residual-stream edit.
pub fn forward_with_taps_intervened(
    model: &Model,
    tokens: &[TokenId],
    tap_layers: &BTreeSet<usize>,
    intervention: Option<&InterventionSpec>,
) -> Result<(RealMatrix, Vec<ResidualTap>)> {
    model.check_tokens(tokens)?;
    for &l in tap_layers {
        if l >= model.cfg.n_layers {
            return Err(ModelError::UnknownLayer {
                layer: l,
                n_layers: model.cfg.n_layers,
            });
        }
    }
    if let Some(spec) = intervention {
        spec.validate(&model.cfg)?;
    }
    let mut tape = Tape::new();
    let nodes = register_params(&mut tape, model, false);
    let (logits, tap_nodes) = forward_on_tape(&mut tape, &nodes, model, tokens, tap_layers, intervention);
    let logits_val = RealMatrix::from_array(tape.value(logits).clone());
    let mut taps = Vec::new();
    for (layer, node) in tap_nodes {
        let value = tape.value(node);
        for pos in 0..tokens.len() {
            taps.push(ResidualTap {
                layer,
                position: pos,
                state: RealVector::from_array(value.row(pos).to_owned()),
            });
        }
    }
    Ok((logits_val, taps))
}

/// Residual state at one (layer, position) without materializing every tap.
pub fn residual_at(
    model: &Model,
    tokens: &[TokenId],
    layer: usize,
    position: usize,
) -> Result<RealVector> {
    if position >= tokens.len() {
        return Err(ModelError::BadConfig(format!(
            "position {position} outside sequence of length {}",
            tokens.len()
        )));
    }
    let mut set = BTreeSet::new();
    set.insert(layer);
    let (_, taps) = forward_with_taps(model, tokens, &set)?;
    Ok(taps
        .into_iter()
        .find(|t| t.position == position)
        .expect("tap exists for every position")
        .state)
}
