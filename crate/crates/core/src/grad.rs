//! Exact analytic backward pass.
//!
//! Gradients flow through the residual, the shared map, the expert FFNs and
//! the softmax gate weights (the top-k *selection* is piecewise constant and
//! contributes no gradient). Expert parameter gradients are accumulated only
//! for activated experts, so an expert never activated by a batch keeps an
//! all-zero gradient tensor — exactly zero, not approximately.
//!
//! `backward` returns gradients for a caller-supplied set of expert FFNs and
//! nothing else; router, shared maps, embeddings and the head have no
//! gradient surface there. `backward_full` is the pretraining entry point
//! and differentiates every parameter.

use std::collections::BTreeMap;

use crate::error::{Result, RiseError};
use crate::linalg::{log_sum_exp, Matrix};
use crate::model::{silu, silu_prime, ExpertId, ExpertSet, MoeModel};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrad {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl ExpertGrad {
    fn zeros(d_model: usize, d_hidden: usize) -> Self {
        ExpertGrad {
            w1: Matrix::zeros(d_model, d_hidden),
            w2: Matrix::zeros(d_hidden, d_model),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.w1
            .data()
            .iter()
            .chain(self.w2.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        let s: f64 = self
            .w1
            .data()
            .iter()
            .chain(self.w2.data().iter())
            .map(|v| v * v)
            .sum();
        s.sqrt()
    }

    pub fn is_exactly_zero(&self) -> bool {
        self.w1.data().iter().all(|v| *v == 0.0) && self.w2.data().iter().all(|v| *v == 0.0)
    }
}

/// Expert-parameter gradients for a masked backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Mean NLL over all predicted positions in the batch.
    pub loss: f64,
    /// Number of predicted positions the mean was taken over.
    pub positions: usize,
    entries: BTreeMap<ExpertId, ExpertGrad>,
}

impl Gradients {
    pub fn get(&self, id: &ExpertId) -> Option<&ExpertGrad> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ExpertId, &ExpertGrad)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Gradients for the pre-trainable parameters: embeddings, every expert
/// FFN, and the output head. Routers and shared maps are never trained, so
/// no gradient is ever formed for them.
#[derive(Debug, Clone)]
pub struct FullGradients {
    pub loss: f64,
    pub positions: usize,
    pub embedding: Matrix,
    pub experts: BTreeMap<ExpertId, ExpertGrad>,
    pub head: Matrix,
}

struct Accum {
    experts: BTreeMap<ExpertId, ExpertGrad>,
    embedding: Option<Matrix>,
    head: Option<Matrix>,
}

impl Accum {
    fn masked(model: &MoeModel, mask: &ExpertSet) -> Accum {
        let c = &model.config;
        let experts = mask
            .iter()
            .map(|id| (*id, ExpertGrad::zeros(c.d_model, c.d_expert_hidden)))
            .collect();
        Accum {
            experts,
            embedding: None,
            head: None,
        }
    }

    fn full(model: &MoeModel) -> Accum {
        let c = &model.config;
        let experts = ExpertSet::full_universe(c)
            .iter()
            .map(|id| (*id, ExpertGrad::zeros(c.d_model, c.d_expert_hidden)))
            .collect();
        Accum {
            experts,
            embedding: Some(Matrix::zeros(c.vocab_size, c.d_model)),
            head: Some(Matrix::zeros(c.d_model, c.vocab_size)),
        }
    }
}

struct LayerCache {
    selected: Vec<usize>,
    weights: Vec<f64>,
    /// Pre-activations h·w1 per selected expert.
    pre_acts: Vec<Vec<f64>>,
    /// silu(pre_acts) per selected expert.
    acts: Vec<Vec<f64>>,
    /// Expert outputs acts·w2 per selected expert.
    outputs: Vec<Vec<f64>>,
}

struct TokenCache {
    /// Hidden states h^(0)..h^(L); h^(l) is the input to layer l.
    hidden: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
}

fn forward_cached(model: &MoeModel, token: u32) -> TokenCache {
    let mut hidden = Vec::with_capacity(model.config.n_layers + 1);
    let mut layer_caches = Vec::with_capacity(model.config.n_layers);
    let mut h: Vec<f64> = model.token_embedding.row(token as usize).to_vec();
    for layer in &model.layers {
        let logits = layer.router.vecmat(&h);
        let (selected, weights) =
            crate::model::route_top_k(layer, &logits, model.config.top_k);

        let mut out = h.clone();
        let shared_out = layer.shared.vecmat(&h);
        for (o, s) in out.iter_mut().zip(shared_out.iter()) {
            *o += s;
        }
        let mut pre_acts = Vec::with_capacity(selected.len());
        let mut acts = Vec::with_capacity(selected.len());
        let mut outputs = Vec::with_capacity(selected.len());
        for (&idx, &w) in selected.iter().zip(weights.iter()) {
            let expert = &layer.experts[idx];
            let u = expert.w1.vecmat(&h);
            let a: Vec<f64> = u.iter().map(|&x| silu(x)).collect();
            let y = expert.w2.vecmat(&a);
            for (o, v) in out.iter_mut().zip(y.iter()) {
                *o += w * v;
            }
            pre_acts.push(u);
            acts.push(a);
            outputs.push(y);
        }
        hidden.push(h);
        layer_caches.push(LayerCache {
            selected,
            weights,
            pre_acts,
            acts,
            outputs,
        });
        h = out;
    }
    hidden.push(h);
    TokenCache {
        hidden,
        layers: layer_caches,
    }
}

fn validate_batch(model: &MoeModel, batch: &[Vec<u32>]) -> Result<usize> {
    if batch.is_empty() {
        return Err(RiseError::Input("empty batch".into()));
    }
    let mut positions = 0;
    for seq in batch {
        model.validate_tokens(seq)?;
        if seq.len() < 2 {
            return Err(RiseError::Input(
                "sequences must have at least 2 tokens for next-token loss".into(),
            ));
        }
        positions += seq.len() - 1;
    }
    Ok(positions)
}

/// Backward engine shared by masked and full modes. Sequences and positions
/// are processed in order; per layer the accumulation order is residual,
/// shared map, experts ascending, gate jacobian.
fn run_backward(model: &MoeModel, batch: &[Vec<u32>], accum: &mut Accum) -> Result<(f64, usize)> {
    let positions = validate_batch(model, batch)?;
    let inv_positions = 1.0 / positions as f64;
    let mut total_nll = 0.0;

    for seq in batch {
        for t in 0..seq.len() - 1 {
            let input = seq[t];
            let target = seq[t + 1] as usize;
            let cache = forward_cached(model, input);
            let h_final = cache.hidden.last().unwrap();
            let logits = model.output_head.vecmat(h_final);

            let lse = log_sum_exp(&logits);
            total_nll += lse - logits[target];

            // dL/dlogits = (softmax - onehot) / positions
            let mut dlogits: Vec<f64> =
                logits.iter().map(|&z| (z - lse).exp() * inv_positions).collect();
            dlogits[target] -= inv_positions;

            if let Some(head) = accum.head.as_mut() {
                for (r, &hr) in h_final.iter().enumerate() {
                    let row = head.row_mut(r);
                    for (c, &dl) in dlogits.iter().enumerate() {
                        row[c] += hr * dl;
                    }
                }
            }

            let mut dh = model.output_head.matvec(&dlogits);

            for l in (0..model.config.n_layers).rev() {
                let layer = &model.layers[l];
                let lc = &cache.layers[l];
                let h = &cache.hidden[l];

                // Residual path.
                let mut dh_prev = dh.clone();

                // Shared linear map (frozen; only propagates).
                let d_shared_in = layer.shared.matvec(&dh);
                for (d, v) in dh_prev.iter_mut().zip(d_shared_in.iter()) {
                    *d += v;
                }

                // Expert paths: dL/dw_j is needed for the gate jacobian even
                // when the expert itself is not tracked.
                let mut d_gate = Vec::with_capacity(lc.selected.len());
                for (j, &idx) in lc.selected.iter().enumerate() {
                    let expert = &layer.experts[idx];
                    let w = lc.weights[j];
                    let y = &lc.outputs[j];
                    d_gate.push(y.iter().zip(dh.iter()).map(|(a, b)| a * b).sum::<f64>());

                    // dL/dy = w * dh
                    let dy: Vec<f64> = dh.iter().map(|&v| w * v).collect();
                    let da = expert.w2.matvec(&dy);
                    let du: Vec<f64> = da
                        .iter()
                        .zip(lc.pre_acts[j].iter())
                        .map(|(&g, &u)| g * silu_prime(u))
                        .collect();

                    if let Some(grad) = accum.experts.get_mut(&ExpertId::new(l, idx)) {
                        for (r, &hr) in h.iter().enumerate() {
                            let row = grad.w1.row_mut(r);
                            for (c, &dc) in du.iter().enumerate() {
                                row[c] += hr * dc;
                            }
                        }
                        for (r, &ar) in lc.acts[j].iter().enumerate() {
                            let row = grad.w2.row_mut(r);
                            for (c, &dc) in dy.iter().enumerate() {
                                row[c] += ar * dc;
                            }
                        }
                    }

                    // du already carries the gate weight through dy.
                    let dh_from_expert = expert.w1.matvec(&du);
                    for (d, v) in dh_prev.iter_mut().zip(dh_from_expert.iter()) {
                        *d += v;
                    }
                }

                // Gate softmax jacobian over the selected logits (the
                // router itself is frozen; this only propagates into dh).
                let weighted_sum: f64 = d_gate
                    .iter()
                    .zip(lc.weights.iter())
                    .map(|(dg, w)| dg * w)
                    .sum();
                for (j, &idx) in lc.selected.iter().enumerate() {
                    let dz = lc.weights[j] * (d_gate[j] - weighted_sum);
                    for r in 0..dh_prev.len() {
                        dh_prev[r] += layer.router.get(r, idx) * dz;
                    }
                }

                dh = dh_prev;
            }

            if let Some(embedding) = accum.embedding.as_mut() {
                let row = embedding.row_mut(input as usize);
                for (e, v) in row.iter_mut().zip(dh.iter()) {
                    *e += v;
                }
            }
        }
    }

    Ok((total_nll * inv_positions, positions))
}

/// Analytic gradients for the expert FFNs named in `mask`, on the causal LM
/// loss over `batch` (inputs are each sequence without its last token,
/// targets the sequence shifted by one). Gradient tensors exist for every
/// masked expert; experts never activated by the batch keep exact zeros.
pub fn backward(model: &MoeModel, batch: &[Vec<u32>], mask: &ExpertSet) -> Result<Gradients> {
    mask.validate_bounds(&model.config)?;
    let mut accum = Accum::masked(model, mask);
    let (loss, positions) = run_backward(model, batch, &mut accum)?;
    Ok(Gradients {
        loss,
        positions,
        entries: accum.experts,
    })
}

/// Gradients for every pre-trainable parameter; the pre-training path.
pub fn backward_full(model: &MoeModel, batch: &[Vec<u32>]) -> Result<FullGradients> {
    let mut accum = Accum::full(model);
    let (loss, positions) = run_backward(model, batch, &mut accum)?;
    Ok(FullGradients {
        loss,
        positions,
        embedding: accum.embedding.unwrap(),
        experts: accum.experts,
        head: accum.head.unwrap(),
    })
}

/// The loss `backward` differentiates, computed forward-only: mean NLL over
/// all predicted positions of the batch.
pub fn batch_loss(model: &MoeModel, batch: &[Vec<u32>]) -> Result<f64> {
    let positions = validate_batch(model, batch)?;
    let mut total = 0.0;
    for seq in batch {
        let inputs = &seq[..seq.len() - 1];
        let (logits, _) = model.forward(inputs)?;
        for (t, &target) in seq[1..].iter().enumerate() {
            let row = logits.row(t);
            total += log_sum_exp(row) - row[target as usize];
        }
    }
    Ok(total / positions as f64)
}
