//! Meta-training on the base classes: mean cross-entropy over
//! temperature-scaled cosine logits, AdamW with decoupled weight decay and a
//! cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_logits, backward, AdapterConfig, AdapterParams};
use crate::error::{Error, Result};
use crate::store::{Pool, Side, Task};
use crate::tensor::{FeatureMatrix, Matrix, RngSeed, SeededRng};
use crate::zeroshot::{count_correct, top1, LogitsMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportResample {
    Fixed,
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub temperature: f64,
    pub seed: RngSeed,
    pub support_resample: SupportResample,
    /// Shots per class used for refinement; defaults to the task's `K`.
    pub shots: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            lr: 1e-4,
            lr_min: 1e-6,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            temperature: 100.0,
            seed: RngSeed(0),
            support_resample: SupportResample::Fixed,
            shots: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [("lr", self.lr), ("lr_min", self.lr_min), ("weight_decay", self.weight_decay)];
        for (k, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be finite and >= 0, got {v}")));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{k} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("eps and temperature must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean over rows of `-log softmax(tau * logits)[label]`.
pub fn cross_entropy(logits: &LogitsMatrix, labels: &[usize], temperature: f64) -> f64 {
    let rows = logits.rows();
    if rows == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate().take(rows) {
        total += row_loss(logits.values.row(r), y, temperature);
    }
    total / rows as f64
}

/// `log(sum exp(tau x_j)) - tau x_y`, written as
/// `(m - tau x_y) + log1p(sum_{j != argmax} exp(tau x_j - m))` so that tiny
/// losses keep their relative precision.
fn row_loss(row: &[f64], y: usize, tau: f64) -> f64 {
    let (amax, m) = row
        .iter()
        .enumerate()
        .map(|(j, &x)| (j, tau * x))
        .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != amax)
        .map(|(_, &x)| (tau * x - m).exp())
        .sum();
    (m - tau * row[y]) + rest.ln_1p()
}

/// Loss and its gradient with respect to the untempered logits.
pub fn cross_entropy_grad(logits: &LogitsMatrix, labels: &[usize], temperature: f64) -> (f64, Matrix<f64>) {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut grad = Matrix::zeros(rows, cols);
    if rows == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / rows as f64;
    let mut total = 0.0;
    for r in 0..rows {
        let row = logits.values.row(r);
        total += row_loss(row, labels[r], temperature);
        let mut p: Vec<f64> = row.iter().map(|x| temperature * x).collect();
        crate::tensor::softmax_in_place(&mut p);
        p[labels[r]] -= 1.0;
        for (g, v) in grad.row_mut(r).iter_mut().zip(p) {
            *g = temperature * v * inv;
        }
    }
    (total * inv, grad)
}

/// AdamW moments over the flattened parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Decoupled weight decay `p -= lr·wd·p`, then the bias-corrected Adam step.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    config: &TrainConfig,
    lr_t: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adamw_step", params.len(), grads.len()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at flat index {i}")));
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= lr_t * config.weight_decay * params[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr_t * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

/// `lr_min + (lr - lr_min)/2 · (1 + cos(pi · step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub base_top1: f64,
    pub lr_start: f64,
    pub lr_end: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Json {
                    path: "<train log>".into(),
                    source: e,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: AdapterParams,
    pub log: TrainLog,
    pub base_classes: Vec<usize>,
}

/// Trains an adapter on the task's base classes using the training query
/// pool. Deterministic given `config.seed`.
pub fn train(task: &Task, adapter: &AdapterConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    adapter.validate()?;
    if adapter.dim != task.dim() {
        return Err(Error::Config(format!(
            "adapter dim {} does not match task dim {}",
            adapter.dim,
            task.dim()
        )));
    }
    let base = task.side_classes(Side::Base)?;
    if base.is_empty() {
        return Err(Error::Config("base split is empty".into()));
    }
    let view = task.view(&base, Pool::Train, None)?;
    if view.labels.is_empty() {
        return Err(Error::Config("no training queries for the base classes".into()));
    }
    let k = config.shots.unwrap_or(task.shots());
    if k == 0 {
        return Err(Error::Support("training needs at least one shot per class".into()));
    }
    for (j, s) in view.support.iter().enumerate() {
        if s.rows() < k {
            return Err(Error::Support(format!(
                "class {} has {} candidate shots, {k} required",
                base[j],
                s.rows()
            )));
        }
    }

    let mut support_rng = SeededRng::derived(config.seed, 1);
    let mut shuffle_rng = SeededRng::derived(config.seed, 2);
    let draw = |rng: &mut SeededRng| -> Vec<FeatureMatrix> {
        view.support
            .iter()
            .map(|s| s.select_rows(&rng.sample_indices(s.rows(), k)))
            .collect()
    };
    let mut support = draw(&mut support_rng);

    let mut params = AdapterParams::init(adapter, config.seed)?;
    let mut flat = params.to_flat();
    let mut state = OptimizerState::new(flat.len());

    let q = view.labels.len();
    let steps_per_epoch = q.div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..q).collect();
    let mut step = 0;
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        if epoch > 1 && config.support_resample == SupportResample::PerEpoch {
            support = draw(&mut support_rng);
        }
        shuffle_rng.shuffle(&mut order);
        let lr_start = cosine_lr(step, total, config.lr, config.lr_min);
        let mut lr_end = lr_start;
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let lr_t = cosine_lr(step, total, config.lr, config.lr_min);
            lr_end = lr_t;
            let queries = view.queries.select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| view.labels[i]).collect();
            let b = backward(&queries, &labels, &view.text, &support, &params, config.temperature)?;
            loss_sum += b.loss * batch.len() as f64;
            let g = b.grads.to_flat();
            adamw_step(&mut flat, &g, &mut state, config, lr_t)?;
            params.load_flat(&flat)?;
            step += 1;
        }
        let logits = adapter_logits(&view.queries, &view.text, &support, &params)?;
        let correct = count_correct(&top1(&logits), &view.labels);
        log.records.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / q as f64,
            base_top1: 100.0 * correct as f64 / q as f64,
            lr_start,
            lr_end,
        });
    }

    Ok(TrainOutcome {
        params,
        log,
        base_classes: base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{synth_task, SynthSpec};

    fn logits(rows: &[&[f64]]) -> LogitsMatrix {
        LogitsMatrix {
            values: Matrix::from_rows(rows).unwrap(),
            temperature_applied: false,
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&logits(&[&[0.3, 0.3, 0.3, 0.3]]), &[2], 100.0);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = cross_entropy(&logits(&[&[1.0, -1.0]]), &[0], 100.0);
        assert!(l < 1e-80);
        // log(1 + e^-50) at 50 digits.
        let l = cross_entropy(&logits(&[&[1.0, 0.5]]), &[0], 100.0);
        let want = 1.928_749_847_963_917_8e-22;
        assert!(((l - want) / want).abs() < 1e-12, "{l}");
        // wrong label: 50 + log1p(e^-50)
        let l = cross_entropy(&logits(&[&[1.0, 0.5]]), &[1], 100.0);
        assert!((l - 50.0).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_differences() {
        let base = [[0.2, -0.4, 0.9], [0.1, 0.0, -0.3]];
        let labels = [2, 0];
        let l = logits(&[&base[0], &base[1]]);
        let (_, g) = cross_entropy_grad(&l, &labels, 7.0);
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..3 {
                let mut up = l.clone();
                up.values.set(r, c, base[r][c] + h);
                let mut dn = l.clone();
                dn.values.set(r, c, base[r][c] - h);
                let fd = (cross_entropy(&up, &labels, 7.0) - cross_entropy(&dn, &labels, 7.0)) / (2.0 * h);
                assert!((fd - g.get(r, c)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn adamw_examples() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = vec![1.0, -2.0];
        let mut s = OptimizerState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &cfg, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![1.0];
        let mut s = OptimizerState::new(1);
        adamw_step(&mut p, &[1.0], &mut s, &cfg, 0.1).unwrap();
        // m_hat = v_hat = 1: p = 1 - 0.1 / (1 + 1e-8)
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-8);

        let cfg = TrainConfig { weight_decay: 0.01, ..TrainConfig::default() };
        let mut p = vec![1.0];
        let mut s = OptimizerState::new(1);
        adamw_step(&mut p, &[0.0], &mut s, &cfg, 0.1).unwrap();
        assert!((p[0] - 0.999).abs() < 1e-15);

        assert!(adamw_step(&mut p, &[f64::NAN], &mut s, &cfg, 0.1).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-6), 1e-4);
        assert!((cosine_lr(100, 100, 1e-4, 1e-6) - 1e-6).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4, 1e-6) - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
    }

    fn small_task() -> Task {
        synth_task(&SynthSpec {
            n_classes: 6,
            shots: 4,
            dim: 16,
            queries_per_class: 10,
            cluster_spread: 0.3,
            base_fraction: 0.5,
            seed: RngSeed(2),
            geometry_seed: None,
        })
        .unwrap()
    }

    fn small_adapter() -> AdapterConfig {
        let mut c = AdapterConfig::new(16);
        c.heads = 4;
        c
    }

    #[test]
    fn zero_lr_keeps_initial_params() {
        let task = small_task();
        let cfg = TrainConfig { lr: 0.0, lr_min: 0.0, weight_decay: 0.0, epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let out = train(&task, &small_adapter(), &cfg).unwrap();
        assert_eq!(out.params, AdapterParams::init(&small_adapter(), cfg.seed).unwrap());
        assert_eq!(out.log.records.len(), 2);
    }

    #[test]
    fn training_is_deterministic_and_leaves_task_untouched() {
        let task = small_task();
        let before = task.clone();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, lr: 1e-2, support_resample: SupportResample::PerEpoch, shots: Some(3), ..TrainConfig::default() };
        let a = train(&task, &small_adapter(), &cfg).unwrap();
        let b = train(&task, &small_adapter(), &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        assert_eq!(task, before);
        assert_eq!(TrainLog::from_jsonl(&a.log.to_jsonl()).unwrap(), a.log);
    }

    #[test]
    fn too_few_shots_is_an_error() {
        let task = small_task();
        let cfg = TrainConfig { shots: Some(5), ..TrainConfig::default() };
        assert!(matches!(train(&task, &small_adapter(), &cfg), Err(Error::Support(_))));
    }
}
