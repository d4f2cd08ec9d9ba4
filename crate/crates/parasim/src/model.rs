//! Model geometry: the handful of shape parameters that drive weight
//! footprints, KV cache sizing, and toy-scale partition checks.

use thiserror::Error;

/// Geometry of a served model. Counts are per the full (unsharded) model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: usize,
    /// Hidden dimension D.
    pub hidden_dim: usize,
    /// KV head count H_base (GQA models have fewer KV heads than query heads).
    pub num_kv_heads: usize,
    pub head_dim: usize,
    /// Element size P_size in bytes (2 for fp16/bf16).
    pub elem_bytes: usize,
    /// Total dense parameter footprint in bytes.
    pub weight_bytes: u64,
    pub max_model_len: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelSpecError {
    #[error("model field {0} must be positive")]
    ZeroCount(&'static str),
    #[error("head_dim {head_dim} does not divide hidden_dim {hidden_dim}")]
    HeadDimMisaligned { hidden_dim: usize, head_dim: usize },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), Vec<ModelSpecError>> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("elem_bytes", self.elem_bytes),
            ("max_model_len", self.max_model_len),
        ] {
            if v == 0 {
                errs.push(ModelSpecError::ZeroCount(name));
            }
        }
        if self.weight_bytes == 0 {
            errs.push(ModelSpecError::ZeroCount("weight_bytes"));
        }
        if self.head_dim != 0 && self.hidden_dim % self.head_dim != 0 {
            errs.push(ModelSpecError::HeadDimMisaligned {
                hidden_dim: self.hidden_dim,
                head_dim: self.head_dim,
            });
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Query head count, derived as D / head_dim.
    pub fn num_q_heads(&self) -> usize {
        self.hidden_dim / self.head_dim
    }
}

/// Total KV cache bytes appended per token across the whole model
/// (all layers, key plus value, every KV head). This is the group-wide
/// figure; per-device consumption under TP degree p is this divided by p.
pub fn kv_bytes_per_token(spec: &ModelSpec) -> u64 {
    2 * spec.num_layers as u64
        * spec.num_kv_heads as u64
        * spec.head_dim as u64
        * spec.elem_bytes as u64
}

/// Named geometry presets used by the capacity calculator and the CLI.
pub mod presets {
    use super::ModelSpec;

    /// Dense 70B-class model: 80 layers, D=8192, 8 KV heads, fp16 weights
    /// of roughly 140 GB. Does not fit a single device; used for TP
    /// capacity math.
    pub fn llama70b_like() -> ModelSpec {
        ModelSpec {
            name: "llama70b-like".to_string(),
            num_layers: 80,
            hidden_dim: 8192,
            num_kv_heads: 8,
            head_dim: 128,
            elem_bytes: 2,
            weight_bytes: 140_000_000_000,
            max_model_len: 131_072,
        }
    }

    /// Sparse 120B-class MoE geometry. Expert routing is out of scope; only
    /// the attention geometry and total weight footprint matter here.
    pub fn moe120b_like() -> ModelSpec {
        ModelSpec {
            name: "moe120b-like".to_string(),
            num_layers: 36,
            hidden_dim: 2880,
            num_kv_heads: 8,
            head_dim: 64,
            elem_bytes: 2,
            weight_bytes: 120_000_000_000,
            max_model_len: 131_072,
        }
    }

    /// Dense 8B-class ultra-long-context model; fits one device in DP mode,
    /// so it is the default for end-to-end serving simulations.
    pub fn longctx8b_like() -> ModelSpec {
        ModelSpec {
            name: "longctx8b-like".to_string(),
            num_layers: 32,
            hidden_dim: 4096,
            num_kv_heads: 8,
            head_dim: 128,
            elem_bytes: 2,
            weight_bytes: 16_000_000_000,
            max_model_len: 4_000_000,
        }
    }

    /// Tiny geometry for unit tests and toy-scale numeric verification.
    pub fn toy(num_layers: usize, hidden_dim: usize, num_kv_heads: usize, head_dim: usize) -> ModelSpec {
        ModelSpec {
            name: "toy".to_string(),
            num_layers,
            hidden_dim,
            num_kv_heads,
            head_dim,
            elem_bytes: 2,
            weight_bytes: 1_000,
            max_model_len: 65_536,
        }
    }

    pub fn by_name(name: &str) -> Option<ModelSpec> {
        match name {
            "llama70b" | "llama70b-like" => Some(llama70b_like()),
            "moe120b" | "moe120b-like" => Some(moe120b_like()),
            "longctx8b" | "longctx8b-like" | "8b" => Some(longctx8b_like()),
            _ => None,
        }
    }
}
