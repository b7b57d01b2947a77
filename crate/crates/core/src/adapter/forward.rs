use rayon::prelude::*;

use super::{AdapterParams, BlockParams, GateMode};
use crate::error::{Error, Result};
use crate::tensor::{dot, sigmoid, softmax_in_place, Matrix, Scalar};
use crate::zeroshot::{cosine_logits, LogitsMatrix};

/// Intermediate values of one block applied to one class.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    /// Category embedding entering the block.
    pub input: Vec<f64>,
    /// Projected query, `m·D`. Empty without attention.
    pub query: Vec<f64>,
    /// Projected keys, `K × m·D`. Empty without attention.
    pub keys: Matrix<f64>,
    /// Attended values, `K × D`: the raw shots unless values are projected.
    pub values: Matrix<f64>,
    /// `H × K`, every row a distribution over the shots.
    pub attention: Matrix<f64>,
    /// Aggregated support feature `F_hat`, `D`.
    pub aggregated: Vec<f64>,
    /// Gate output: one entry (scalar gate, override, disabled) or `D`.
    pub gate: Vec<f64>,
}

impl BlockTrace {
    /// `w_out = w_in + g * F_hat`.
    pub fn output(&self) -> Vec<f64> {
        let g = &self.gate;
        self.input
            .iter()
            .zip(&self.aggregated)
            .enumerate()
            .map(|(d, (w, f))| w + g[if g.len() == 1 { 0 } else { d }] * f)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedClasses {
    /// Refined category embeddings, `N × D`.
    pub refined: Matrix<f64>,
    /// `traces[class][block]`.
    pub traces: Vec<Vec<BlockTrace>>,
}

impl RefinedClasses {
    pub fn n_classes(&self) -> usize {
        self.refined.rows()
    }

    /// Gate outputs of one block, one vector per class.
    pub fn gate_values(&self, block: usize) -> Vec<&[f64]> {
        self.traces.iter().map(|t| t[block].gate.as_slice()).collect()
    }

    pub fn attention_weights(&self, class: usize, block: usize) -> &Matrix<f64> {
        &self.traces[class][block].attention
    }

    /// Attention rows are distributions and learned gates lie in `(0, 1)`.
    pub fn check_invariants(&self, gated: bool) -> Result<()> {
        for (c, blocks) in self.traces.iter().enumerate() {
            for (l, t) in blocks.iter().enumerate() {
                for (h, row) in t.attention.iter_rows().enumerate() {
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > 1e-6 || row.iter().any(|&a| a < 0.0) {
                        return Err(Error::Numeric(format!(
                            "attention row of class {c}, block {l}, head {h} sums to {s}"
                        )));
                    }
                }
                if gated && t.gate.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
                    return Err(Error::Numeric(format!(
                        "gate of class {c}, block {l} left (0, 1)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Order in which a class's shots are aggregated: lexicographic by value
/// under `total_cmp`, ties by original index. Summing in this order makes
/// refinement bitwise independent of how the shots were listed.
pub fn canonical_order<T: Scalar>(shots: &Matrix<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..shots.rows()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (shots.row(a), shots.row(b));
        ra.iter()
            .zip(rb)
            .map(|(x, y)| x.to_f64().total_cmp(&y.to_f64()))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

pub(crate) fn canonical_shots<T: Scalar>(shots: &Matrix<T>) -> Matrix<f64> {
    shots.select_rows(&canonical_order(shots)).cast::<f64>()
}

/// Refines every category embedding with its own support shots. Attention
/// columns in the traces follow [`canonical_order`].
pub fn refine<T: Scalar>(
    classes: &Matrix<T>,
    support: &[Matrix<T>],
    params: &AdapterParams,
) -> Result<RefinedClasses> {
    let cfg = &params.config;
    cfg.validate()?;
    let d = cfg.dim;
    if classes.cols() != d {
        return Err(Error::shape("refine: class embeddings", format!("dim {d}"), classes.cols()));
    }
    if support.len() != classes.rows() {
        return Err(Error::shape(
            "refine: support",
            format!("{} classes", classes.rows()),
            support.len(),
        ));
    }
    if params.blocks.len() != cfg.depth {
        return Err(Error::shape("refine: blocks", cfg.depth, params.blocks.len()));
    }
    for (c, s) in support.iter().enumerate() {
        if s.rows() == 0 {
            return Err(Error::MissingSupport { class: c });
        }
        if s.cols() != d {
            return Err(Error::shape(format!("refine: support of class {c}"), format!("dim {d}"), s.cols()));
        }
    }

    let per_class: Vec<(Vec<f64>, Vec<BlockTrace>)> = (0..classes.rows())
        .into_par_iter()
        .map(|c| {
            let shots = canonical_shots(&support[c]);
            let mut w: Vec<f64> = classes.row(c).iter().map(|v| v.to_f64()).collect();
            let mut traces = Vec::with_capacity(cfg.depth);
            for (l, block) in params.blocks.iter().enumerate() {
                let t = block_forward(block, params, &w, &shots);
                if t.aggregated.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite aggregate for class {c} in block {l}"
                    )));
                }
                w = t.output();
                traces.push(t);
            }
            Ok((w, traces))
        })
        .collect::<Result<_>>()?;

    let mut refined = Matrix::zeros(classes.rows(), d);
    let mut traces = Vec::with_capacity(per_class.len());
    for (c, (w, t)) in per_class.into_iter().enumerate() {
        refined.row_mut(c).copy_from_slice(&w);
        traces.push(t);
    }
    Ok(RefinedClasses { refined, traces })
}

fn block_forward(block: &BlockParams, params: &AdapterParams, w: &[f64], shots: &Matrix<f64>) -> BlockTrace {
    let cfg = &params.config;
    let (d, h) = (cfg.dim, cfg.heads);
    let (hd, phd) = (cfg.head_dim(), cfg.proj_head_dim());
    let k = shots.rows();

    let values = match &block.value_proj {
        Some(wv) => shots.matmul_transposed(wv).expect("value projection is D×D"),
        None => shots.clone(),
    };

    let mut attention = Matrix::zeros(h, k);
    let mut aggregated = vec![0.0; d];
    let (query, keys) = if cfg.attention {
        let query = block.query_proj.matvec(w);
        let keys = shots.matmul_transposed(&block.key_proj).expect("key projection is mD×D");
        let scale = 1.0 / (phd as f64).sqrt();
        let mut scores = vec![0.0; k];
        for head in 0..h {
            let qh = &query[head * phd..(head + 1) * phd];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = scale * dot(&keys.row(j)[head * phd..(head + 1) * phd], qh);
            }
            softmax_in_place(&mut scores);
            attention.row_mut(head).copy_from_slice(&scores);
            let out = &mut aggregated[head * hd..(head + 1) * hd];
            for (j, &a) in scores.iter().enumerate() {
                for (o, &v) in out.iter_mut().zip(&values.row(j)[head * hd..(head + 1) * hd]) {
                    *o += a * v;
                }
            }
        }
        (query, keys)
    } else {
        let a = 1.0 / k as f64;
        attention.data_mut().iter_mut().for_each(|v| *v = a);
        for j in 0..k {
            for (o, &v) in aggregated.iter_mut().zip(values.row(j)) {
                *o += a * v;
            }
        }
        (Vec::new(), Matrix::zeros(0, cfg.proj_dim()))
    };

    let gate = match (params.gate_override, cfg.gate) {
        (Some(c), _) => vec![c],
        (None, GateMode::Disabled) => vec![1.0],
        (None, GateMode::Scalar | GateMode::Elementwise) => block
            .gate_weight
            .matvec(w)
            .iter()
            .zip(&block.gate_bias)
            .map(|(z, b)| sigmoid(z + b))
            .collect(),
    };

    BlockTrace {
        input: w.to_vec(),
        query,
        keys,
        values,
        attention,
        aggregated,
        gate,
    }
}

/// Cosine logits of `queries` against the refined category embeddings.
pub fn adapter_logits<T: Scalar>(
    queries: &Matrix<T>,
    classes: &Matrix<T>,
    support: &[Matrix<T>],
    params: &AdapterParams,
) -> Result<LogitsMatrix> {
    let refined = refine(classes, support, params)?;
    cosine_logits(&queries.cast::<f64>(), &refined.refined)
}
