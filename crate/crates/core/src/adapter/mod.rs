//! Gated multi-head query/key cross-attention that refines each category
//! embedding from its own support shots.
//!
//! Per class and per block: `q = W2 w`, `k_j = W1 F_j`; both are split into
//! `H` heads and each head attends over the `K` shots with scale
//! `1/sqrt(m·D/H)`. The aggregated feature for head `h` is the attention
//! weighted sum of the raw shot sub-vectors (there is no value projection
//! unless the ablation flag asks for one). A sigmoid gate computed from `w`
//! scales the aggregate before the residual add `w <- w + g * F_hat`.

mod backward;
mod checkpoint;
mod forward;

pub use backward::{backward, loss, Backward};
pub use checkpoint::{checkpoint_sha256, load_checkpoint, save_checkpoint, CheckpointHeader, Objective, CHECKPOINT_FORMAT, HEADER_FILE};
pub use forward::{adapter_logits, canonical_order, refine, BlockTrace, RefinedClasses};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, RngSeed, SeededRng};

/// How the residual gate is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// One scalar per class: `sigmoid(Wg · w + bg)`.
    Scalar,
    /// One gate per dimension: `sigmoid(Wg w + bg)` with `Wg` of size `D×D`.
    Elementwise,
    /// No gate; the aggregate is added with weight 1.
    Disabled,
}

impl std::str::FromStr for GateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(GateMode::Scalar),
            "elementwise" => Ok(GateMode::Elementwise),
            "disabled" | "none" => Ok(GateMode::Disabled),
            other => Err(Error::Config(format!(
                "unknown gate mode {other:?} (scalar, elementwise, disabled)"
            ))),
        }
    }
}

/// Shape and ablation switches of an adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub width_mult: usize,
    pub gate: GateMode,
    /// `false` replaces attention with a plain mean over the shots.
    pub attention: bool,
    pub value_projection: bool,
    pub gate_bias_init: f64,
}

pub const DEFAULT_HEADS: usize = 8;
/// Gate starts at sigmoid(0) = 0.5, an even blend of text embedding and
/// aggregated shots.
pub const DEFAULT_GATE_BIAS: f64 = 0.0;

impl AdapterConfig {
    pub fn new(dim: usize) -> Self {
        AdapterConfig {
            dim,
            heads: DEFAULT_HEADS,
            depth: 1,
            width_mult: 1,
            gate: GateMode::Scalar,
            attention: true,
            value_projection: false,
            gate_bias_init: DEFAULT_GATE_BIAS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.depth == 0 || self.width_mult == 0 {
            return Err(Error::Config(format!(
                "dim, heads, depth and width_mult must all be >= 1 (got {}, {}, {}, {})",
                self.dim, self.heads, self.depth, self.width_mult
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !self.gate_bias_init.is_finite() {
            return Err(Error::Config("gate_bias_init must be finite".into()));
        }
        Ok(())
    }

    /// Width of the projected queries and keys.
    pub fn proj_dim(&self) -> usize {
        self.width_mult * self.dim
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn proj_head_dim(&self) -> usize {
        self.proj_dim() / self.heads
    }

    fn gate_rows(&self) -> usize {
        match self.gate {
            GateMode::Scalar => 1,
            GateMode::Elementwise => self.dim,
            GateMode::Disabled => 0,
        }
    }

    /// Learnable parameters. The default configuration has
    /// `L · (2·m·D² + D + 1)`.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let proj = if self.attention { 2 * self.proj_dim() * d } else { 0 };
        let value = if self.value_projection { d * d } else { 0 };
        let gate = self.gate_rows() * (d + 1);
        self.depth * (proj + value + gate)
    }
}

/// Weights of one cascaded block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// `W1`, `(m·D) × D`, applied to shots.
    pub key_proj: Matrix<f64>,
    /// `W2`, `(m·D) × D`, applied to the category embedding.
    pub query_proj: Matrix<f64>,
    /// `D × D`, present only for the value-projection ablation.
    pub value_proj: Option<Matrix<f64>>,
    /// `1 × D` (scalar gate), `D × D` (elementwise) or `0 × D` (disabled).
    pub gate_weight: Matrix<f64>,
    pub gate_bias: Vec<f64>,
}

/// A full adapter: configuration plus one [`BlockParams`] per block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub config: AdapterConfig,
    pub blocks: Vec<BlockParams>,
    /// Forces the gate output to a constant. Not persisted.
    pub gate_override: Option<f64>,
}

impl AdapterParams {
    /// Scaled-uniform projections, `Wg = 0`, `bg = gate_bias_init`.
    pub fn init(config: &AdapterConfig, seed: RngSeed) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let (d, p) = (config.dim, config.proj_dim());
        let blocks = (0..config.depth)
            .map(|_| {
                let (key_proj, query_proj) = if config.attention {
                    (
                        Matrix::scaled_uniform(p, d, d, &mut rng),
                        Matrix::scaled_uniform(p, d, d, &mut rng),
                    )
                } else {
                    (Matrix::zeros(0, d), Matrix::zeros(0, d))
                };
                let value_proj = config
                    .value_projection
                    .then(|| Matrix::scaled_uniform(d, d, d, &mut rng));
                BlockParams {
                    key_proj,
                    query_proj,
                    value_proj,
                    gate_weight: Matrix::zeros(config.gate_rows(), d),
                    gate_bias: vec![config.gate_bias_init; config.gate_rows()],
                }
            })
            .collect();
        Ok(AdapterParams {
            config: config.clone(),
            blocks,
            gate_override: None,
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.gate_override = None;
        z.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn with_gate_override(mut self, value: Option<f64>) -> Self {
        self.gate_override = value;
        self
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    /// Visits every tensor in the canonical order used by flattening and
    /// checkpoints.
    pub fn for_each_tensor(&self, mut f: impl FnMut(String, &[f64])) {
        for (l, b) in self.blocks.iter().enumerate() {
            if self.config.attention {
                f(format!("block{l}.key_proj"), b.key_proj.data());
                f(format!("block{l}.query_proj"), b.query_proj.data());
            }
            if let Some(v) = &b.value_proj {
                f(format!("block{l}.value_proj"), v.data());
            }
            if self.config.gate != GateMode::Disabled {
                f(format!("block{l}.gate_weight"), b.gate_weight.data());
                f(format!("block{l}.gate_bias"), &b.gate_bias);
            }
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(String, &mut [f64])) {
        let attention = self.config.attention;
        let gated = self.config.gate != GateMode::Disabled;
        for (l, b) in self.blocks.iter_mut().enumerate() {
            if attention {
                f(format!("block{l}.key_proj"), b.key_proj.data_mut());
                f(format!("block{l}.query_proj"), b.query_proj.data_mut());
            }
            if let Some(v) = &mut b.value_proj {
                f(format!("block{l}.value_proj"), v.data_mut());
            }
            if gated {
                f(format!("block{l}.gate_weight"), b.gate_weight.data_mut());
                f(format!("block{l}.gate_bias"), &mut b.gate_bias);
            }
        }
    }

    /// Shapes in canonical order, as `(name, dims)`.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<u64>)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            let dims = |m: &Matrix<f64>| vec![m.rows() as u64, m.cols() as u64];
            if self.config.attention {
                out.push((format!("block{l}.key_proj"), dims(&b.key_proj)));
                out.push((format!("block{l}.query_proj"), dims(&b.query_proj)));
            }
            if let Some(v) = &b.value_proj {
                out.push((format!("block{l}.value_proj"), dims(v)));
            }
            if self.config.gate != GateMode::Disabled {
                out.push((format!("block{l}.gate_weight"), dims(&b.gate_weight)));
                out.push((format!("block{l}.gate_bias"), vec![b.gate_bias.len() as u64]));
            }
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_tensor(|_, t| out.extend_from_slice(t));
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.param_count();
        if flat.len() != n {
            return Err(Error::shape("flat adapter parameters", n, flat.len()));
        }
        let mut off = 0;
        self.for_each_tensor_mut(|_, t| {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        });
        Ok(())
    }

    pub fn from_flat(template: &AdapterParams, flat: &[f64]) -> Result<Self> {
        let mut p = template.clone();
        p.load_flat(flat)?;
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Learnable parameter count of a configuration.
pub fn param_count(config: &AdapterConfig) -> usize {
    config.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_formula() {
        let mut c = AdapterConfig::new(4);
        c.heads = 1;
        assert_eq!(param_count(&c), 37);
        let p = AdapterParams::init(&c, RngSeed(0)).unwrap();
        assert_eq!(p.param_count(), 37);
        assert_eq!(p.to_flat().len(), 37);

        let mut big = AdapterConfig::new(1024);
        big.heads = 8;
        assert_eq!(param_count(&big), 2_098_177);
        for (l, m) in [(1, 2), (1, 4), (2, 1), (4, 1)] {
            big.depth = l;
            big.width_mult = m;
            assert_eq!(param_count(&big), l * (2 * m * 1024 * 1024 + 1025));
        }
    }

    #[test]
    fn variant_counts() {
        let mut c = AdapterConfig::new(8);
        c.heads = 2;
        c.value_projection = true;
        c.gate = GateMode::Elementwise;
        c.depth = 2;
        let p = AdapterParams::init(&c, RngSeed(1)).unwrap();
        assert_eq!(p.param_count(), c.param_count());
        assert_eq!(c.param_count(), 2 * (2 * 64 + 64 + 8 * 9));
        c.attention = false;
        c.gate = GateMode::Disabled;
        c.value_projection = false;
        assert_eq!(c.param_count(), 0);
    }

    #[test]
    fn rejects_bad_heads() {
        let mut c = AdapterConfig::new(10);
        c.heads = 3;
        assert!(matches!(AdapterParams::init(&c, RngSeed(0)), Err(Error::Config(_))));
        c.heads = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_flat_roundtrips() {
        let mut c = AdapterConfig::new(8);
        c.heads = 2;
        let a = AdapterParams::init(&c, RngSeed(3)).unwrap();
        assert_eq!(a, AdapterParams::init(&c, RngSeed(3)).unwrap());
        assert_ne!(a, AdapterParams::init(&c, RngSeed(4)).unwrap());
        assert_eq!(a.blocks[0].gate_bias, vec![DEFAULT_GATE_BIAS]);
        assert!(a.blocks[0].gate_weight.data().iter().all(|&v| v == 0.0));
        let flat: Vec<f64> = (0..a.param_count()).map(|i| i as f64).collect();
        let b = AdapterParams::from_flat(&a, &flat).unwrap();
        assert_eq!(b.to_flat(), flat);
        assert!(AdapterParams::from_flat(&a, &flat[1..]).is_err());
    }
}
