//! The toy mixture-of-experts language model.
//!
//! Each token is processed independently: embedding lookup, a stack of MoE
//! layers (residual + frozen-style shared linear map + top-k routed expert
//! FFNs with renormalized softmax gate weights), then a linear output head.
//! There is no attention, so a token's logits depend only on its own id.
//!
//! Summation order is fixed everywhere: residual, then the shared map, then
//! experts in ascending index order. Repeated forward calls on the same
//! model and tokens are bit-identical.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RiseError};
use crate::linalg::{log_sum_exp, Matrix};
use crate::rng::DetRng;

/// Smooth gated nonlinearity used inside every expert FFN: x * sigmoid(x).
#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Derivative of `silu`.
#[inline]
pub fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Upper bound on |silu'(x)| over all of R (the true supremum is ~1.0998).
pub const SILU_DERIV_BOUND: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_expert_hidden: usize,
    pub n_layers: usize,
    pub n_experts_per_layer: usize,
    pub top_k: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The default desk-scale model used across the pipeline.
    pub fn toy(seed: u64) -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 32,
            d_expert_hidden: 64,
            n_layers: 8,
            n_experts_per_layer: 16,
            top_k: 2,
            max_seq_len: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1
            || self.d_model < 1
            || self.d_expert_hidden < 1
            || self.max_seq_len < 1
        {
            return Err(RiseError::Config(
                "all dimensions must be at least 1".into(),
            ));
        }
        if self.n_experts_per_layer < 1 {
            return Err(RiseError::Config(
                "n_experts_per_layer must be at least 1".into(),
            ));
        }
        if self.top_k < 1 || self.top_k > self.n_experts_per_layer {
            return Err(RiseError::Config(format!(
                "top_k must satisfy 1 <= top_k <= n_experts_per_layer, got top_k={} with {} experts",
                self.top_k, self.n_experts_per_layer
            )));
        }
        if self.n_layers < 3 {
            return Err(RiseError::Config(format!(
                "n_layers must be at least 3 for a shallow/middle/deep partition, got {}",
                self.n_layers
            )));
        }
        Ok(())
    }

    /// Total number of scalar parameters implied by the shapes.
    pub fn param_count(&self) -> usize {
        let per_expert = 2 * self.d_model * self.d_expert_hidden;
        let per_layer = self.d_model * self.n_experts_per_layer
            + self.d_model * self.d_model
            + self.n_experts_per_layer * per_expert;
        self.vocab_size * self.d_model          // token embedding
            + self.n_layers * per_layer
            + self.d_model * self.vocab_size // output head
    }

    /// Parameters held by a single expert FFN.
    pub fn params_per_expert(&self) -> usize {
        2 * self.d_model * self.d_expert_hidden
    }
}

/// Identifies one expert FFN: (layer, expert index within layer).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ExpertId {
    pub layer: usize,
    pub expert: usize,
}

impl ExpertId {
    pub fn new(layer: usize, expert: usize) -> Self {
        ExpertId { layer, expert }
    }

    pub fn in_bounds(&self, config: &ModelConfig) -> bool {
        self.layer < config.n_layers && self.expert < config.n_experts_per_layer
    }
}

/// An ordered set of expert ids; the currency of selection, masking and
/// pruning. Iteration order is always (layer, expert) ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSet {
    ids: BTreeSet<ExpertId>,
}

impl ExpertSet {
    pub fn new() -> Self {
        ExpertSet::default()
    }

    pub fn insert(&mut self, id: ExpertId) -> bool {
        self.ids.insert(id)
    }

    pub fn contains(&self, id: &ExpertId) -> bool {
        self.ids.contains(id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExpertId> {
        self.ids.iter()
    }

    /// Expert indices this set holds within one layer, ascending.
    pub fn experts_in_layer(&self, layer: usize) -> Vec<usize> {
        self.ids
            .iter()
            .filter(|id| id.layer == layer)
            .map(|id| id.expert)
            .collect()
    }

    pub fn intersection(&self, other: &ExpertSet) -> ExpertSet {
        ExpertSet {
            ids: self.ids.intersection(&other.ids).cloned().collect(),
        }
    }

    pub fn union(&self, other: &ExpertSet) -> ExpertSet {
        ExpertSet {
            ids: self.ids.union(&other.ids).cloned().collect(),
        }
    }

    /// Every expert id of a model with the given shape.
    pub fn full_universe(config: &ModelConfig) -> ExpertSet {
        let mut set = ExpertSet::new();
        for layer in 0..config.n_layers {
            for expert in 0..config.n_experts_per_layer {
                set.insert(ExpertId::new(layer, expert));
            }
        }
        set
    }

    pub fn validate_bounds(&self, config: &ModelConfig) -> Result<()> {
        for id in &self.ids {
            if !id.in_bounds(config) {
                return Err(RiseError::Input(format!(
                    "expert id (layer {}, expert {}) out of bounds for model with {} layers x {} experts",
                    id.layer, id.expert, config.n_layers, config.n_experts_per_layer
                )));
            }
        }
        Ok(())
    }
}

impl FromIterator<ExpertId> for ExpertSet {
    fn from_iter<T: IntoIterator<Item = ExpertId>>(iter: T) -> Self {
        ExpertSet {
            ids: iter.into_iter().collect(),
        }
    }
}

/// One expert FFN: out = silu(h · w1) · w2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    /// d_model x d_expert_hidden
    pub w1: Matrix,
    /// d_expert_hidden x d_model
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    /// d_model x n_experts: router logits are h · router.
    pub router: Matrix,
    /// d_model x d_model: the frozen shared linear map added to the residual.
    pub shared: Matrix,
    pub experts: Vec<Expert>,
    /// Pruned experts are removed from routing candidacy.
    pub pruned: Vec<bool>,
}

impl MoeLayer {
    pub fn survivors(&self) -> usize {
        self.pruned.iter().filter(|p| !**p).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeModel {
    pub config: ModelConfig,
    /// vocab_size x d_model
    pub token_embedding: Matrix,
    pub layers: Vec<MoeLayer>,
    /// d_model x vocab_size
    pub output_head: Matrix,
}

/// Routing decisions for one token at one layer: the activated expert
/// indices (ascending) and the gate weights used in the combination,
/// aligned index-for-index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRouting {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Per-token, per-layer routing decisions captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    /// indexed [token][layer]
    pub tokens: Vec<Vec<TokenRouting>>,
}

impl RoutingTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// True when the activated expert sets match position-for-position
    /// (gate weights are ignored).
    pub fn same_routing(&self, other: &RoutingTrace) -> bool {
        self.tokens.len() == other.tokens.len()
            && self
                .tokens
                .iter()
                .zip(other.tokens.iter())
                .all(|(a, b)| {
                    a.len() == b.len()
                        && a.iter().zip(b.iter()).all(|(x, y)| x.experts == y.experts)
                })
    }
}

// Initialization scales. The shared map and the expert output side are kept
// small so layer maps stay close to the residual and perturbations do not
// blow up across depth.
const EMBED_STD: f64 = 0.4;
const SHARED_SCALE: f64 = 0.15;
const W2_SCALE: f64 = 0.25;

fn fill_gaussian(m: &mut Matrix, std: f64, rng: &mut DetRng) {
    for v in m.data_mut() {
        *v = rng.gaussian() * std;
    }
}

/// Build a model from a config, filling every matrix from a single seeded
/// stream in a fixed order (embedding; per layer: router, shared, experts
/// w1 then w2; head). Identical configs give bit-identical models.
pub fn init_model(config: &ModelConfig) -> Result<MoeModel> {
    config.validate()?;
    let mut rng = DetRng::seed_from_u64(config.seed);
    let d = config.d_model;
    let dh = config.d_expert_hidden;
    let ne = config.n_experts_per_layer;

    let mut token_embedding = Matrix::zeros(config.vocab_size, d);
    fill_gaussian(&mut token_embedding, EMBED_STD, &mut rng);

    let router_std = 1.0 / (d as f64).sqrt();
    let shared_std = SHARED_SCALE / (d as f64).sqrt();
    let w1_std = 1.0 / (d as f64).sqrt();
    let w2_std = W2_SCALE / (dh as f64).sqrt();
    let head_std = 1.0 / (d as f64).sqrt();

    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let mut router = Matrix::zeros(d, ne);
        fill_gaussian(&mut router, router_std, &mut rng);
        let mut shared = Matrix::zeros(d, d);
        fill_gaussian(&mut shared, shared_std, &mut rng);
        let mut experts = Vec::with_capacity(ne);
        for _ in 0..ne {
            let mut w1 = Matrix::zeros(d, dh);
            fill_gaussian(&mut w1, w1_std, &mut rng);
            let mut w2 = Matrix::zeros(dh, d);
            fill_gaussian(&mut w2, w2_std, &mut rng);
            experts.push(Expert { w1, w2 });
        }
        layers.push(MoeLayer {
            router,
            shared,
            experts,
            pruned: vec![false; ne],
        });
    }

    let mut output_head = Matrix::zeros(d, config.vocab_size);
    fill_gaussian(&mut output_head, head_std, &mut rng);

    Ok(MoeModel {
        config: *config,
        token_embedding,
        layers,
        output_head,
    })
}

/// Select the top-k experts of one layer by router logit, skipping pruned
/// experts. Ties break toward the lower expert index. Returns ascending
/// expert indices plus the softmax of their logits (renormalized over the
/// selected set).
pub(crate) fn route_top_k(
    layer: &MoeLayer,
    logits: &[f64],
    top_k: usize,
) -> (Vec<usize>, Vec<f64>) {
    let mut candidates: Vec<usize> = (0..logits.len()).filter(|&i| !layer.pruned[i]).collect();
    // Sort by logit descending; equal logits keep the lower index first.
    candidates.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .expect("router logits must be finite")
            .then(a.cmp(&b))
    });
    let k = top_k.min(candidates.len());
    let mut selected: Vec<usize> = candidates[..k].to_vec();
    selected.sort_unstable();

    // Softmax over the selected logits only.
    let max_logit = selected
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = selected.iter().map(|&i| (logits[i] - max_logit).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    (selected, weights)
}

impl MoeModel {
    pub fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(RiseError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(RiseError::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(RiseError::Input(format!(
                    "token id {} out of range for vocab size {}",
                    t, self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Run one token id through the layer stack, returning the final hidden
    /// state and the per-layer routing decisions.
    pub(crate) fn forward_token(&self, token: u32) -> (Vec<f64>, Vec<TokenRouting>) {
        let mut h: Vec<f64> = self.token_embedding.row(token as usize).to_vec();
        let mut routing = Vec::with_capacity(self.config.n_layers);
        for layer in &self.layers {
            let (h_next, tr) = self.layer_forward(layer, &h);
            h = h_next;
            routing.push(tr);
        }
        (h, routing)
    }

    pub(crate) fn layer_forward(&self, layer: &MoeLayer, h: &[f64]) -> (Vec<f64>, TokenRouting) {
        let logits = layer.router.vecmat(h);
        let (selected, weights) = route_top_k(layer, &logits, self.config.top_k);

        // residual + shared map + weighted experts, in that order
        let mut out = h.to_vec();
        let shared_out = layer.shared.vecmat(h);
        for (o, s) in out.iter_mut().zip(shared_out.iter()) {
            *o += s;
        }
        for (&idx, &w) in selected.iter().zip(weights.iter()) {
            let expert = &layer.experts[idx];
            let mut hidden = expert.w1.vecmat(h);
            for u in &mut hidden {
                *u = silu(*u);
            }
            let y = expert.w2.vecmat(&hidden);
            for (o, v) in out.iter_mut().zip(y.iter()) {
                *o += w * v;
            }
        }
        (
            out,
            TokenRouting {
                experts: selected,
                weights,
            },
        )
    }

    /// Forward pass over a token sequence. Returns per-position logits
    /// (seq_len x vocab_size) and the routing trace.
    pub fn forward(&self, tokens: &[u32]) -> Result<(Matrix, RoutingTrace)> {
        self.validate_tokens(tokens)?;
        let mut logits = Matrix::zeros(tokens.len(), self.config.vocab_size);
        let mut trace = Vec::with_capacity(tokens.len());
        for (t, &token) in tokens.iter().enumerate() {
            let (h, routing) = self.forward_token(token);
            let row = self.output_head.vecmat(&h);
            logits.row_mut(t).copy_from_slice(&row);
            trace.push(routing);
        }
        Ok((logits, RoutingTrace { tokens: trace }))
    }

    /// Remove `victims` from routing candidacy. Every layer must keep at
    /// least `top_k` unpruned experts so routing stays feasible.
    pub fn prune_experts(&self, victims: &ExpertSet) -> Result<MoeModel> {
        victims.validate_bounds(&self.config)?;
        let mut pruned = self.clone();
        for id in victims.iter() {
            pruned.layers[id.layer].pruned[id.expert] = true;
        }
        for (l, layer) in pruned.layers.iter().enumerate() {
            let survivors = layer.survivors();
            if survivors < self.config.top_k {
                return Err(RiseError::Config(format!(
                    "pruning leaves layer {} with {} experts, fewer than top_k={}",
                    l, survivors, self.config.top_k
                )));
            }
        }
        Ok(pruned)
    }

    /// The set of experts currently pruned out of routing.
    pub fn pruned_set(&self) -> ExpertSet {
        let mut set = ExpertSet::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (i, &p) in layer.pruned.iter().enumerate() {
                if p {
                    set.insert(ExpertId::new(l, i));
                }
            }
        }
        set
    }

    pub fn all_finite(&self) -> bool {
        self.token_embedding.all_finite()
            && self.output_head.all_finite()
            && self.layers.iter().all(|l| {
                l.router.all_finite()
                    && l.shared.all_finite()
                    && l.experts.iter().all(|e| e.w1.all_finite() && e.w2.all_finite())
            })
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }
}

/// Mean negative log-likelihood of `targets` under per-position `logits`.
///
/// Row t of `logits` is scored against `targets[t]`; the caller applies the
/// next-token shift (pass logits for positions 0..n-1 and targets x_1..x_n).
pub fn loss_lm(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(RiseError::Input(format!(
            "logits rows {} do not match target length {}",
            logits.rows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(RiseError::Input("no positions to score".into()));
    }
    let vocab = logits.cols();
    let mut total = 0.0;
    for (t, &target) in targets.iter().enumerate() {
        if target as usize >= vocab {
            return Err(RiseError::Input(format!(
                "target id {} out of range for vocab size {}",
                target, vocab
            )));
        }
        let row = logits.row(t);
        total += log_sum_exp(row) - row[target as usize];
    }
    Ok(total / targets.len() as f64)
}
