//! Evaluation protocols and reports: per-side top-1 within a task, frozen
//! transfer from a source task to a target task, and JSON / CSV / Markdown
//! rendering.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{refine, AdapterConfig, AdapterParams, GateMode};
use crate::error::{Error, Result};
use crate::store::{ClassView, Pool, Side, Task};
use crate::tensor::{RngSeed, SeededRng};
use crate::tip::{search_tip, tip_logits, CacheModel, TipGrid, TipParams, TipSearch};
use crate::zeroshot::{cosine_logits, top1, zeroshot_logits, LogitsMatrix};

/// Recorded in every report.
pub const NOVEL_PROTOCOL: &str = "per-side: each side is classified among its own classes only";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Zeroshot,
    Tip,
    Meta,
}

impl Method {
    pub fn display_name(self) -> &'static str {
        match self {
            Method::Zeroshot => "Zero-shot",
            Method::Tip => "Tip-Adapter",
            Method::Meta => "Meta-Adapter",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Zeroshot => "zeroshot",
            Method::Tip => "tip",
            Method::Meta => "meta",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeroshot" => Ok(Method::Zeroshot),
            "tip" => Ok(Method::Tip),
            "meta" => Ok(Method::Meta),
            _ => Err(Error::Config(format!("unknown method {s:?} (zeroshot, tip, meta)"))),
        }
    }
}

/// What a method needs besides the task.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub tip: Option<TipParams>,
    pub meta: Option<AdapterParams>,
    /// Pass-through provenance, e.g. a checkpoint hash.
    pub extra: serde_json::Value,
}

impl Artifacts {
    pub fn zeroshot() -> Self {
        Artifacts::default()
    }

    pub fn tip(p: TipParams) -> Self {
        Artifacts { tip: Some(p), ..Artifacts::default() }
    }

    pub fn meta(p: AdapterParams) -> Self {
        Artifacts { meta: Some(p), ..Artifacts::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Evaluation-side shots per class; the task's `K` when `None`.
    pub shots: Option<usize>,
    pub pool: Pool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { shots: None, pool: Pool::Eval }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub name: String,
    pub side: Side,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub task: String,
    pub n_classes: usize,
    pub dim: usize,
    pub shots: usize,
    pub pool: Pool,
    pub protocol: String,
    pub tip: Option<TipParams>,
    pub adapter: Option<AdapterConfig>,
    pub gate_override: Option<f64>,
    /// SHA-256 of the little-endian flat adapter parameters.
    pub params_sha256: Option<String>,
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub dataset: String,
    pub source: String,
    pub target: String,
    pub shots: usize,
    pub top1_base: Option<f64>,
    pub top1_novel: Option<f64>,
    pub top1_all: Option<f64>,
    pub harmonic_mean: Option<f64>,
    pub per_class_acc: Vec<ClassAccuracy>,
    pub fingerprint: Fingerprint,
}

/// `2ab / (a + b)`, zero when both are zero.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

pub fn params_sha256(params: &AdapterParams) -> String {
    let mut h = Sha256::new();
    for v in params.to_flat() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn view_logits(method: Method, view: &ClassView, artifacts: &Artifacts) -> Result<LogitsMatrix> {
    match method {
        Method::Zeroshot => zeroshot_logits(&view.queries, &view.text),
        Method::Tip => {
            let p = artifacts
                .tip
                .ok_or_else(|| Error::Config("tip evaluation needs alpha and beta".into()))?;
            let cache = CacheModel::from_support(&view.support)?;
            tip_logits(&view.queries, &view.text, &cache, p)
        }
        Method::Meta => {
            let params = artifacts
                .meta
                .as_ref()
                .ok_or_else(|| Error::Config("meta evaluation needs adapter parameters".into()))?;
            if params.config.dim != view.text.cols() {
                return Err(Error::Config(format!(
                    "adapter dim {} does not match task dim {}",
                    params.config.dim,
                    view.text.cols()
                )));
            }
            let refined = refine(&view.text, &view.support, params)?;
            let gated = params.gate_override.is_none() && params.config.gate != GateMode::Disabled;
            refined.check_invariants(gated)?;
            cosine_logits(&view.queries.cast::<f64>(), &refined.refined)
        }
    }
}

/// Top-1 on one side, returning the overall percent and per-class counts.
fn eval_side(
    method: Method,
    task: &Task,
    side: Side,
    artifacts: &Artifacts,
    opts: EvalOptions,
) -> Result<(f64, Vec<ClassAccuracy>)> {
    let view = task.side_view(side, opts.pool, opts.shots)?;
    if view.classes.is_empty() {
        return Err(Error::Split(format!("the {side} side of {:?} is empty", task.name())));
    }
    if view.labels.is_empty() {
        return Err(Error::Config(format!("no {side} queries to evaluate on")));
    }
    let logits = view_logits(method, &view, artifacts)?;
    let preds = top1(&logits);
    let mut correct = vec![0usize; view.classes.len()];
    let mut total = vec![0usize; view.classes.len()];
    for (&p, &l) in preds.iter().zip(&view.labels) {
        total[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    let hits: usize = correct.iter().sum();
    let per_class = view
        .classes
        .iter()
        .enumerate()
        .map(|(j, &c)| ClassAccuracy {
            class: c,
            name: task.class_names()[c].clone(),
            side,
            correct: correct[j],
            total: total[j],
            accuracy: if total[j] == 0 { 0.0 } else { 100.0 * correct[j] as f64 / total[j] as f64 },
        })
        .collect();
    Ok((100.0 * hits as f64 / view.labels.len() as f64, per_class))
}

fn fingerprint(task: &Task, artifacts: &Artifacts, opts: EvalOptions, method: Method) -> Fingerprint {
    let meta = if method == Method::Meta { artifacts.meta.as_ref() } else { None };
    Fingerprint {
        task: task.name().to_string(),
        n_classes: task.n_classes(),
        dim: task.dim(),
        shots: opts.shots.unwrap_or(task.shots()),
        pool: opts.pool,
        protocol: NOVEL_PROTOCOL.to_string(),
        tip: if method == Method::Tip { artifacts.tip } else { None },
        adapter: meta.map(|p| p.config.clone()),
        gate_override: meta.and_then(|p| p.gate_override),
        params_sha256: meta.map(params_sha256),
        extra: artifacts.extra.clone(),
    }
}

/// Evaluates `method` on one side of `task`. `Side::All` classifies among all
/// classes and fills `top1_all`.
pub fn eval_method(method: Method, task: &Task, side: Side, artifacts: &Artifacts, opts: EvalOptions) -> Result<EvalReport> {
    let (acc, per_class_acc) = eval_side(method, task, side, artifacts, opts)?;
    let mut r = EvalReport {
        method,
        dataset: task.name().to_string(),
        source: task.name().to_string(),
        target: task.name().to_string(),
        shots: opts.shots.unwrap_or(task.shots()),
        top1_base: None,
        top1_novel: None,
        top1_all: None,
        harmonic_mean: None,
        per_class_acc,
        fingerprint: fingerprint(task, artifacts, opts, method),
    };
    match side {
        Side::Base => r.top1_base = Some(acc),
        Side::Novel => r.top1_novel = Some(acc),
        Side::All => r.top1_all = Some(acc),
    }
    Ok(r)
}

/// Base and novel sides evaluated independently, plus their harmonic mean.
pub fn eval_cross_category(method: Method, task: &Task, artifacts: &Artifacts, opts: EvalOptions) -> Result<EvalReport> {
    let mut r = eval_method(method, task, Side::Base, artifacts, opts)?;
    let novel = eval_method(method, task, Side::Novel, artifacts, opts)?;
    r.top1_novel = novel.top1_novel;
    r.per_class_acc.extend(novel.per_class_acc);
    r.per_class_acc.sort_by_key(|c| c.class);
    r.harmonic_mean = Some(harmonic_mean(r.top1_base.unwrap_or(0.0), r.top1_novel.unwrap_or(0.0)));
    Ok(r)
}

/// Applies frozen artifacts from `source` to `target`. Uses the target's text
/// embeddings and shots. With a split on the target both sides are reported,
/// otherwise all classes.
pub fn cross_dataset(method: Method, source: &str, artifacts: &Artifacts, target: &Task, opts: EvalOptions) -> Result<EvalReport> {
    if let Some(p) = &artifacts.meta {
        if p.config.dim != target.dim() {
            return Err(Error::Transfer(format!(
                "source adapter has dim {}, target {:?} has dim {}",
                p.config.dim,
                target.name(),
                target.dim()
            )));
        }
    }
    let mut r = if target.split().is_some() {
        eval_cross_category(method, target, artifacts, opts)?
    } else {
        eval_method(method, target, Side::All, artifacts, opts)?
    };
    r.source = source.to_string();
    Ok(r)
}

/// Validation queries for the cache-model search: a seeded `fraction` of the
/// base classes' training-pool queries.
pub fn tip_validation_view(task: &Task, fraction: f64, seed: RngSeed, shots: Option<usize>) -> Result<ClassView> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("validation fraction must lie in (0, 1], got {fraction}")));
    }
    let mut view = task.side_view(Side::Base, Pool::Train, shots)?;
    let n = view.labels.len();
    let take = ((n as f64 * fraction).ceil() as usize).clamp(1.min(n), n);
    let mut rows = SeededRng::derived(seed, 3).sample_indices(n, take);
    rows.sort_unstable();
    view.queries = view.queries.select_rows(&rows);
    view.labels = rows.iter().map(|&r| view.labels[r]).collect();
    Ok(view)
}

pub fn search_tip_on_base(task: &Task, grid: &TipGrid, fraction: f64, seed: RngSeed, shots: Option<usize>) -> Result<TipSearch> {
    search_tip(&tip_validation_view(task, fraction, seed, shots)?, grid)
}

/// Checks the report's own invariants.
pub fn check_invariants(r: &EvalReport) -> Result<()> {
    for (k, v) in [("base", r.top1_base), ("novel", r.top1_novel), ("all", r.top1_all), ("hmean", r.harmonic_mean)] {
        if let Some(v) = v {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Numeric(format!("{k} accuracy {v} outside [0, 100]")));
            }
        }
    }
    if let (Some(a), Some(b), Some(h)) = (r.top1_base, r.top1_novel, r.harmonic_mean) {
        if (harmonic_mean(a, b) - h).abs() > 1e-9 {
            return Err(Error::Numeric(format!("harmonic mean {h} inconsistent with {a} and {b}")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::Config(format!("unknown format {s:?} (json, markdown, csv)"))),
        }
    }
}

pub const CSV_HEADER: &str = "method,source,target,shots,base,novel,hmean";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

/// Novel column of a report: the novel side, or all classes when no split
/// was evaluated.
fn novel_or_all(r: &EvalReport) -> Option<f64> {
    r.top1_novel.or(r.top1_all)
}

pub fn emit_report(r: &EvalReport, format: ReportFormat) -> String {
    emit_reports(std::slice::from_ref(r), format)
}

/// Several reports in one document. JSON gives an object for one report and
/// an array otherwise.
pub fn emit_reports(reports: &[EvalReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])
            } else {
                serde_json::to_string_pretty(reports)
            }
            .expect("reports serialize");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from(CSV_HEADER);
            s.push('\n');
            for r in reports {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    r.method,
                    r.source,
                    r.target,
                    r.shots,
                    cell(r.top1_base),
                    cell(novel_or_all(r)),
                    cell(r.harmonic_mean)
                );
            }
            s
        }
        ReportFormat::Markdown => {
            let mut s = String::from("| Method | Source | Target | K | Base | Novel | H |\n");
            s.push_str("|---|---|---|---:|---:|---:|---:|\n");
            for r in reports {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {} | {} |",
                    r.method.display_name(),
                    r.source,
                    r.target,
                    r.shots,
                    cell(r.top1_base),
                    cell(novel_or_all(r)),
                    cell(r.harmonic_mean)
                );
            }
            s.push('\n');
            s.push_str("Accuracies are top-1 percent. Base and novel are each classified among their own classes.\n");
            s
        }
    }
}
