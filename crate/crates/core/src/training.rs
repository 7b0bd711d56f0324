//! Selective training of expert subnetworks and full-parameter base
//! pre-training.
//!
//! `train` updates only the expert FFNs named in the mask; every other
//! parameter of the returned model is bit-identical to the input model.
//! `pretrain` updates everything and exists to produce the vanilla base
//! model the analysis pipeline studies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RiseError};
use crate::grad::{backward, backward_full};
use crate::linalg::Matrix;
use crate::model::{ExpertId, ExpertSet, MoeModel};
use crate::rng::DetRng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Plain gradient descent: theta -= lr * g. Exact one-step semantics,
    /// the right choice for theorem-verification runs.
    Sgd,
    /// Adaptive-moment method for end-to-end quality runs.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Non-negative; zero performs null updates (useful as a control).
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(RiseError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(RiseError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RiseError::Config(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// The trainable-parameter mask: exactly the FFN parameters of the selected
/// experts. Router, shared maps, embeddings and the head can never be
/// masked in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMask {
    pub experts: ExpertSet,
}

impl ParamMask {
    pub fn masked_param_count(&self, model: &MoeModel) -> usize {
        self.experts.len() * model.config.params_per_expert()
    }
}

pub fn build_mask(selected: &ExpertSet, model: &MoeModel) -> Result<ParamMask> {
    selected.validate_bounds(&model.config)?;
    Ok(ParamMask {
        experts: selected.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: MoeModel,
    /// Batch mean loss per optimization step.
    pub loss_history: Vec<f64>,
}

struct AdamTensor {
    m: Matrix,
    v: Matrix,
}

impl AdamTensor {
    fn like(shape: &Matrix) -> Self {
        AdamTensor {
            m: Matrix::zeros(shape.rows(), shape.cols()),
            v: Matrix::zeros(shape.rows(), shape.cols()),
        }
    }
}

fn sgd_step(theta: &mut Matrix, grad: &Matrix, lr: f64) {
    for (t, g) in theta.data_mut().iter_mut().zip(grad.data().iter()) {
        *t -= lr * g;
    }
}

fn adam_step(theta: &mut Matrix, grad: &Matrix, state: &mut AdamTensor, lr: f64, step: usize) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    let data = theta.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..data.len() {
        let g = grad.data()[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Epoch/batch schedule shared by both training paths: sequence indices are
/// reshuffled each epoch from one seeded stream and chunked into batches.
fn batch_schedule(n_sequences: usize, config: &TrainConfig) -> Vec<Vec<usize>> {
    let mut rng = DetRng::seed_from_u64(config.seed);
    let mut batches = Vec::new();
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..n_sequences).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            batches.push(chunk.to_vec());
        }
    }
    batches
}

fn gather<'a>(corpus: &'a [Vec<u32>], indices: &[usize]) -> Vec<Vec<u32>> {
    indices.iter().map(|&i| corpus[i].clone()).collect()
}

/// Train only the masked expert FFNs on the corpus with the causal LM loss.
/// Deterministic given the seed; every unmasked parameter of the result is
/// bit-identical to the input model.
pub fn train(
    model: &MoeModel,
    corpus: &[Vec<u32>],
    mask: &ParamMask,
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    mask.experts.validate_bounds(&model.config)?;
    if corpus.is_empty() {
        return Err(RiseError::Input("empty training corpus".into()));
    }

    let mut current = model.clone();
    let mut loss_history = Vec::new();
    let mut adam: BTreeMap<ExpertId, (AdamTensor, AdamTensor)> = BTreeMap::new();
    if config.optimizer == Optimizer::Adam {
        for id in mask.experts.iter() {
            let expert = &current.layers[id.layer].experts[id.expert];
            adam.insert(*id, (AdamTensor::like(&expert.w1), AdamTensor::like(&expert.w2)));
        }
    }

    for (step, batch_indices) in batch_schedule(corpus.len(), config).iter().enumerate() {
        let batch = gather(corpus, batch_indices);
        let grads = backward(&current, &batch, &mask.experts)?;
        if !grads.loss.is_finite() {
            return Err(RiseError::Training(format!(
                "non-finite loss at step {step}"
            )));
        }
        loss_history.push(grads.loss);

        for (id, grad) in grads.iter() {
            let expert = &mut current.layers[id.layer].experts[id.expert];
            match config.optimizer {
                Optimizer::Sgd => {
                    sgd_step(&mut expert.w1, &grad.w1, config.learning_rate);
                    sgd_step(&mut expert.w2, &grad.w2, config.learning_rate);
                }
                Optimizer::Adam => {
                    let (s1, s2) = adam.get_mut(id).unwrap();
                    adam_step(&mut expert.w1, &grad.w1, s1, config.learning_rate, step + 1);
                    adam_step(&mut expert.w2, &grad.w2, s2, config.learning_rate, step + 1);
                }
            }
        }
    }

    Ok(TrainRun {
        model: current,
        loss_history,
    })
}

struct PretrainAdam {
    embedding: AdamTensor,
    experts: BTreeMap<ExpertId, (AdamTensor, AdamTensor)>,
    head: AdamTensor,
}

/// Base pre-training on a (mixed) corpus; produces the vanilla model that
/// profiling, selection and selective training operate on. Embeddings,
/// expert FFNs and the output head are trained; routers and shared maps
/// stay at their initialization, so routing changes only through hidden
/// states.
pub fn pretrain(model: &MoeModel, corpus: &[Vec<u32>], config: &TrainConfig) -> Result<TrainRun> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(RiseError::Input("empty training corpus".into()));
    }

    let mut current = model.clone();
    let mut loss_history = Vec::new();
    let mut adam = if config.optimizer == Optimizer::Adam {
        Some(PretrainAdam {
            embedding: AdamTensor::like(&current.token_embedding),
            experts: ExpertSet::full_universe(&current.config)
                .iter()
                .map(|id| {
                    let e = &current.layers[id.layer].experts[id.expert];
                    (*id, (AdamTensor::like(&e.w1), AdamTensor::like(&e.w2)))
                })
                .collect(),
            head: AdamTensor::like(&current.output_head),
        })
    } else {
        None
    };

    for (step, batch_indices) in batch_schedule(corpus.len(), config).iter().enumerate() {
        let batch = gather(corpus, batch_indices);
        let grads = backward_full(&current, &batch)?;
        if !grads.loss.is_finite() {
            return Err(RiseError::Training(format!(
                "non-finite loss at step {step}"
            )));
        }
        loss_history.push(grads.loss);
        let lr = config.learning_rate;

        match adam.as_mut() {
            None => {
                sgd_step(&mut current.token_embedding, &grads.embedding, lr);
                for (l, layer) in current.layers.iter_mut().enumerate() {
                    for (i, expert) in layer.experts.iter_mut().enumerate() {
                        let g = &grads.experts[&ExpertId::new(l, i)];
                        sgd_step(&mut expert.w1, &g.w1, lr);
                        sgd_step(&mut expert.w2, &g.w2, lr);
                    }
                }
                sgd_step(&mut current.output_head, &grads.head, lr);
            }
            Some(state) => {
                let t = step + 1;
                adam_step(&mut current.token_embedding, &grads.embedding, &mut state.embedding, lr, t);
                for (l, layer) in current.layers.iter_mut().enumerate() {
                    for (i, expert) in layer.experts.iter_mut().enumerate() {
                        let id = ExpertId::new(l, i);
                        let g = &grads.experts[&id];
                        let (s1, s2) = state.experts.get_mut(&id).unwrap();
                        adam_step(&mut expert.w1, &g.w1, s1, lr, t);
                        adam_step(&mut expert.w2, &g.w2, s2, lr, t);
                    }
                }
                adam_step(&mut current.output_head, &grads.head, &mut state.head, lr, t);
            }
        }
    }

    Ok(TrainRun {
        model: current,
        loss_history,
    })
}
