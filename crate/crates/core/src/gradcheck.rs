//! Finite-difference verification of the adapter's analytic gradients on
//! small seeded random tasks.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{backward, loss, AdapterConfig, AdapterParams, GateMode};
use crate::error::Result;
use crate::tensor::{finite_diff_grad, Matrix, RngSeed, SeededRng, DEFAULT_NORM_EPS};

/// Central-difference step.
pub const STEP: f64 = 1e-3;
/// Temperature used inside the checked loss.
pub const TEMPERATURE: f64 = 5.0;
/// Denominator floor of the relative error, so that components whose true
/// value is near zero are compared on an absolute scale.
pub const DENOM_FLOOR: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (usize, f64) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub seed: u64,
    pub depth: usize,
    pub gate: GateMode,
    pub value_projection: bool,
    pub attention: bool,
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub step: f64,
    pub temperature: f64,
    pub denom_floor: f64,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Shape of each random task.
pub const N: usize = 3;
pub const K: usize = 2;
pub const D: usize = 8;
pub const H: usize = 2;
pub const QUERIES: usize = 6;

fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix<f64> {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("sized")
}

/// Checks one configuration on a task drawn from `seed`. Features are unit
/// rows as in real use. Weights come from the regular initializer, with gate
/// biases redrawn in `[-1, 1]` so that gates sit away from saturation.
pub fn check_case(config: &AdapterConfig, seed: u64) -> Result<CaseResult> {
    let mut rng = SeededRng::derived(RngSeed(seed), 11);
    let d = config.dim;
    let classes = random_matrix(N, d, &mut rng).l2_normalize_rows(DEFAULT_NORM_EPS)?;
    let support: Vec<_> = (0..N)
        .map(|_| random_matrix(K, d, &mut rng).l2_normalize_rows(DEFAULT_NORM_EPS))
        .collect::<Result<_>>()?;
    let queries = random_matrix(QUERIES, d, &mut rng).l2_normalize_rows(DEFAULT_NORM_EPS)?;
    let labels: Vec<usize> = (0..QUERIES).map(|i| i % N).collect();
    let mut params = AdapterParams::init(config, RngSeed(seed))?;
    for b in &mut params.blocks {
        b.gate_bias.iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
    }

    let analytic = backward(&queries, &labels, &classes, &support, &params, TEMPERATURE)?
        .grads
        .to_flat();
    let numeric = finite_diff_grad(
        |flat| {
            let p = AdapterParams::from_flat(&params, flat).expect("same layout");
            loss(&queries, &labels, &classes, &support, &p, TEMPERATURE).unwrap_or(f64::NAN)
        },
        &params.to_flat(),
        STEP,
    )?;
    let (worst, err) = max_relative_error(&analytic, &numeric, DENOM_FLOOR);

    let mut offset = 0;
    let mut worst_tensor = String::new();
    for (name, dims) in params.tensor_shapes() {
        let len: u64 = dims.iter().product();
        if worst < offset + len as usize && worst_tensor.is_empty() {
            worst_tensor = format!("{name}[{}]", worst - offset);
        }
        offset += len as usize;
    }
    Ok(CaseResult {
        seed,
        depth: config.depth,
        gate: config.gate,
        value_projection: config.value_projection,
        attention: config.attention,
        params: params.param_count(),
        max_rel_error: err,
        worst_tensor,
    })
}

/// The configurations exercised per seed: the default adapter at depth 1
/// and 2, plus the gate and value-projection variants at depth 2.
pub fn suite_configs() -> Vec<AdapterConfig> {
    let mut base = AdapterConfig::new(D);
    base.heads = H;
    let mut out = Vec::new();
    for depth in [1, 2] {
        let mut c = base.clone();
        c.depth = depth;
        out.push(c);
    }
    let mut c = base.clone();
    c.depth = 2;
    c.gate = GateMode::Elementwise;
    out.push(c);
    let mut c = base.clone();
    c.depth = 2;
    c.value_projection = true;
    out.push(c);
    out
}

/// Runs every suite configuration on `seeds` consecutive seeds starting at
/// `first_seed`.
pub fn run_suite(first_seed: u64, seeds: usize) -> Result<GradcheckReport> {
    let start = Instant::now();
    let configs = suite_configs();
    let mut cases = Vec::new();
    for s in 0..seeds as u64 {
        for c in &configs {
            cases.push(check_case(c, first_seed + s)?);
        }
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        cases,
        max_rel_error,
        tolerance: TOLERANCE,
        step: STEP,
        temperature: TEMPERATURE,
        denom_floor: DENOM_FLOOR,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(2.0, 1.0, 1e-3), 0.5);
        assert_eq!(relative_error(0.0, 0.0, 1e-3), 0.0);
        assert!((relative_error(1e-6, 0.0, 1e-3) - 1e-3).abs() < 1e-15);
        assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 1.0], 1e-3), (1, 0.5));
    }

    #[test]
    fn suite_passes_for_a_few_seeds() {
        let r = run_suite(100, 3).unwrap();
        assert_eq!(r.cases.len(), 3 * suite_configs().len());
        assert!(r.passed(), "{:?}", r.cases.iter().map(|c| c.max_rel_error).collect::<Vec<_>>());
    }
}
