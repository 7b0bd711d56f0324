//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! offset 0   magic "RISEMOE1" (8 bytes)
//! offset 8   config: vocab_size, d_model, d_expert_hidden, n_layers,
//!            n_experts_per_layer, top_k, max_seq_len, seed   (8 x u64)
//! offset 72  pruned flags, one byte per expert, layer-major
//! then       matrices as row-major f64 runs, in the order
//!            token_embedding; per layer: router, shared,
//!            expert_0.w1, expert_0.w2, ..., expert_{N-1}.w2; output_head
//! ```
//!
//! Writing and re-reading a checkpoint reproduces the in-memory model
//! bit-for-bit.

use std::fs;
use std::path::Path;

use crate::error::{Result, RiseError};
use crate::linalg::Matrix;
use crate::model::{Expert, ModelConfig, MoeLayer, MoeModel};

pub const MAGIC: &[u8; 8] = b"RISEMOE1";

fn push_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &MoeModel) -> Vec<u8> {
    let c = &model.config;
    let mut buf = Vec::with_capacity(80 + model.param_count() * 8);
    buf.extend_from_slice(MAGIC);
    for field in [
        c.vocab_size as u64,
        c.d_model as u64,
        c.d_expert_hidden as u64,
        c.n_layers as u64,
        c.n_experts_per_layer as u64,
        c.top_k as u64,
        c.max_seq_len as u64,
        c.seed,
    ] {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    for layer in &model.layers {
        for &p in &layer.pruned {
            buf.push(p as u8);
        }
    }
    push_matrix(&mut buf, &model.token_embedding);
    for layer in &model.layers {
        push_matrix(&mut buf, &layer.router);
        push_matrix(&mut buf, &layer.shared);
        for expert in &layer.experts {
            push_matrix(&mut buf, &expert.w1);
            push_matrix(&mut buf, &expert.w2);
        }
    }
    push_matrix(&mut buf, &model.output_head);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(RiseError::Format(format!(
                "checkpoint truncated at byte {} (needed {} more)",
                self.pos, n
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        let bytes = self.take(8)?;
        Ok(u64::from_le_bytes(bytes.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let bytes = self.take(rows * cols * 8)?;
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in bytes.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<MoeModel> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(RiseError::Format(
            "bad checkpoint magic (expected RISEMOE1)".into(),
        ));
    }
    let config = ModelConfig {
        vocab_size: r.u64()? as usize,
        d_model: r.u64()? as usize,
        d_expert_hidden: r.u64()? as usize,
        n_layers: r.u64()? as usize,
        n_experts_per_layer: r.u64()? as usize,
        top_k: r.u64()? as usize,
        max_seq_len: r.u64()? as usize,
        seed: r.u64()?,
    };
    config.validate().map_err(|e| RiseError::Format(format!("checkpoint carries invalid config: {e}")))?;

    let mut pruned_flags = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let bytes = r.take(config.n_experts_per_layer)?;
        pruned_flags.push(bytes.iter().map(|&b| b != 0).collect::<Vec<bool>>());
    }

    let token_embedding = r.matrix(config.vocab_size, config.d_model)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for pruned in pruned_flags {
        let router = r.matrix(config.d_model, config.n_experts_per_layer)?;
        let shared = r.matrix(config.d_model, config.d_model)?;
        let mut experts = Vec::with_capacity(config.n_experts_per_layer);
        for _ in 0..config.n_experts_per_layer {
            let w1 = r.matrix(config.d_model, config.d_expert_hidden)?;
            let w2 = r.matrix(config.d_expert_hidden, config.d_model)?;
            experts.push(Expert { w1, w2 });
        }
        layers.push(MoeLayer {
            router,
            shared,
            experts,
            pruned,
        });
    }
    let output_head = r.matrix(config.d_model, config.vocab_size)?;
    if r.pos != buf.len() {
        return Err(RiseError::Format(format!(
            "checkpoint has {} trailing bytes",
            buf.len() - r.pos
        )));
    }
    let model = MoeModel {
        config,
        token_embedding,
        layers,
        output_head,
    };
    if !model.all_finite() {
        return Err(RiseError::Format(
            "checkpoint contains non-finite parameter values".into(),
        ));
    }
    Ok(model)
}

pub fn write_file(model: &MoeModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<MoeModel> {
    let buf = fs::read(path)?;
    from_bytes(&buf)
}
