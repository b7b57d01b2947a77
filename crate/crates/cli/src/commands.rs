use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use metaadapter_core::adapter::{checkpoint_sha256, load_checkpoint, save_checkpoint, Objective, DEFAULT_HEADS};
use metaadapter_core::embx;
use metaadapter_core::eval::{
    check_invariants, cross_dataset, emit_report, eval_cross_category, eval_method, search_tip_on_base, Artifacts,
    EvalOptions, EvalReport, Method, ReportFormat,
};
use metaadapter_core::gradcheck::run_suite;
use metaadapter_core::store::{load_task, save_task, split_by_zeroshot, synth_task, Pool, Side, SynthSpec, Task};
use metaadapter_core::tip::{TipGrid, TipParams};
use metaadapter_core::train::{train, SupportResample, TrainConfig};
use metaadapter_core::{AdapterConfig, AdapterParams, GateMode, RngSeed};

use crate::settings::{valid_keys, Settings};

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}
use crate::{AdapterFlags, Command, Common, EvalFlags};

struct Ctx {
    name: &'static str,
    settings: Settings,
    out_dir: PathBuf,
    inputs: BTreeMap<String, String>,
    context: BTreeMap<String, Value>,
}

fn sha256_file(p: &Path) -> Result<String> {
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

impl Ctx {
    fn new(name: &'static str, common: Common, sub: &clap::Command) -> Result<Self> {
        let mut settings = Settings::load(common.config.as_deref(), &common.set, &valid_keys(sub))?;
        let out_dir = PathBuf::from(settings.get("out-dir", path_str(common.out_dir), "out".to_string())?);
        Ok(Ctx {
            name,
            settings,
            out_dir,
            inputs: BTreeMap::new(),
            context: BTreeMap::new(),
        })
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        Ok(self.settings.opt(key, path_str(flag))?.map(PathBuf::from))
    }

    fn input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        let p = self.path(key, flag)?.ok_or_else(|| anyhow!("--{key} is required"))?;
        let hashed = if p.is_dir() { p.join(metaadapter_core::adapter::HEADER_FILE) } else { p.clone() };
        self.inputs.insert(p.display().to_string(), sha256_file(&hashed)?);
        Ok(p)
    }

    fn load_task(&mut self, flag: Option<PathBuf>) -> Result<Task> {
        let p = self.input("manifest", flag)?;
        let task = load_task(&p)?;
        self.context.insert("task".into(), json!(task.name()));
        Ok(task)
    }

    fn fingerprint(&self) -> Value {
        json!({
            "tool": "metaadapter",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.name,
            "settings": self.settings.resolved(),
            "inputs": self.inputs,
            "context": self.context,
        })
    }

    fn fingerprint_id(&self) -> String {
        hex::encode(Sha256::digest(self.fingerprint().to_string()))
    }

    fn write(&self, ext: &str, contents: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let p = self.out_dir.join(format!("{}.{ext}", self.name));
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    fn write_json(&self, v: &Value) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.write("json", &s)
    }

    fn finish(&self) {
        say!("fingerprint: {}", self.fingerprint_id());
    }
}

pub fn run(cmd: Command, sub: &clap::Command) -> Result<()> {
    let name = cmd.name();
    match cmd {
        Command::Synth { common, seed, classes, shots, dim, queries_per_class, spread, base_fraction, geometry_seed, task_dir } => {
            let mut ctx = Ctx::new(name, common, sub)?;
            let d = SynthSpec::default();
            let s = &mut ctx.settings;
            let spec = SynthSpec {
                seed: RngSeed(s.get("seed", seed, d.seed.0)?),
                n_classes: s.get("classes", classes, d.n_classes)?,
                shots: s.get("shots", shots, d.shots)?,
                dim: s.get("dim", dim, d.dim)?,
                queries_per_class: s.get("queries-per-class", queries_per_class, d.queries_per_class)?,
                cluster_spread: s.get("spread", spread, d.cluster_spread)?,
                base_fraction: s.get("base-fraction", base_fraction, d.base_fraction)?,
                geometry_seed: s.opt("geometry-seed", geometry_seed)?.map(RngSeed),
            };
            let dir = ctx.path("task-dir", task_dir)?.unwrap_or_else(|| ctx.out_dir.join("task"));
            let task = synth_task(&spec)?;
            let manifest = save_task(&task, &dir)?;
            ctx.context.insert("task".into(), json!(task.name()));
            ctx.write_json(&json!({
                "manifest": manifest,
                "spec": spec,
                "fingerprint": ctx.fingerprint(),
            }))?;
            say!("wrote {}", manifest.display());
            ctx.finish();
        }
        Command::Split { common, manifest, base_fraction, task_dir } => {
            let mut ctx = Ctx::new(name, common, sub)?;
            let task = ctx.load_task(manifest)?;
            let bf = ctx.settings.get("base-fraction", base_fraction, 0.5)?;
            let dir = ctx.path("task-dir", task_dir)?.unwrap_or_else(|| ctx.out_dir.join("split"));
            let (split, summary) = split_by_zeroshot(&task, bf)?;
            let manifest = save_task(&split, &dir)?;
            ctx.write_json(&json!({
                "manifest": manifest,
                "summary": summary,
                "fingerprint": ctx.fingerprint(),
            }))?;
            say!("base {:?}", summary.base);
            say!("novel {:?}", summary.novel);
            say!("wrote {}", manifest.display());
            ctx.finish();
        }
        Command::EvalZeroshot { common, eval } => {
            let mut ctx = Ctx::new(name, common, sub)?;
            let task = ctx.load_task(eval.manifest.clone())?;
            evaluate(ctx, eval, Method::Zeroshot, &task, Artifacts::zeroshot(), None)?;
        }
        Command::SearchTip { common, manifest, alphas, betas, val_fraction, seed, shots } => {
            let mut ctx = Ctx::new(name, common, sub)?;
            let task = ctx.load_task(manifest)?;
            let d = TipGrid::default();
            let s = &mut ctx.settings;
            let grid = TipGrid {
                alphas: match s.opt("alphas", alphas)? {
                    Some(v) => parse_grid(&v)?,
                    None => d.alphas,
                },
                betas: match s.opt("betas", betas)? {
                    Some(v) => parse_grid(&v)?,
                    None => d.betas,
                },
            };
            let frac = s.get("val-fraction", val_fraction, 0.2)?;
            let seed = RngSeed(s.get("seed", seed, 0)?);
            let shots = s.opt("shots", shots)?;
            let search = search_tip_on_base(&task, &grid, frac, seed, shots)?;
            ctx.write_json(&json!({
                "alpha": search.best.alpha,
                "beta": search.best.beta,
                "validation_top1": search.accuracy(),
                "search": search,
                "fingerprint": ctx.fingerprint(),
            }))?;
            say!(
                "alpha {} beta {} (validation top-1 {:.2}% on {} queries)",
                search.best.alpha,
                search.best.beta,
                search.accuracy(),
                search.total
            );
            ctx.finish();
        }
        Command::EvalTip { common, eval, alpha, beta, tip } => {
            let mut ctx = Ctx::new(name, common, sub)?;
            let task = ctx.load_task(eval.manifest.clone())?;
            let (p, _) = tip_params(&mut ctx, alpha, beta, tip)?;
            evaluate(ctx, eval, Method::Tip, &task, Artifacts::tip(p), None)?;
        }
        Command::TrainMeta {
            common,
            manifest,
            checkpoint,
            adapter,
            epochs,
            batch_size,
            lr,
            lr_min,
            weight_decay,
            beta1,
            beta2,
            eps,
            temperature,
            seed,
            support_resample,
            shots,
        } => {
            let mut ctx = Ctx::new(name, common, sub)?;
            let task = ctx.load_task(manifest)?;
            let acfg = adapter_config(&mut ctx.settings, adapter, task.dim())?;
            let d = TrainConfig::default();
            let s = &mut ctx.settings;
            let cfg = TrainConfig {
                epochs: s.get("epochs", epochs, d.epochs)?,
                batch_size: s.get("batch-size", batch_size, d.batch_size)?,
                lr: s.get("lr", lr, d.lr)?,
                lr_min: s.get("lr-min", lr_min, d.lr_min)?,
                weight_decay: s.get("weight-decay", weight_decay, d.weight_decay)?,
                beta1: s.get("beta1", beta1, d.beta1)?,
                beta2: s.get("beta2", beta2, d.beta2)?,
                eps: s.get("eps", eps, d.eps)?,
                temperature: s.get("temperature", temperature, d.temperature)?,
                seed: RngSeed(s.get("seed", seed, d.seed.0)?),
                support_resample: match s.get("support-resample", support_resample, "fixed".to_string())?.as_str() {
                    "fixed" => SupportResample::Fixed,
                    "per_epoch" | "per-epoch" => SupportResample::PerEpoch,
                    other => bail!("unknown support-resample {other:?} (fixed, per_epoch)"),
                },
                shots: s.opt("shots", shots)?,
            };
            let ckpt = ctx.path("checkpoint", checkpoint)?.unwrap_or_else(|| ctx.out_dir.join("checkpoint"));
            let out = train(&task, &acfg, &cfg)?;
            for r in &out.log.records {
                say!(
                    "epoch {} loss {:.6} base top-1 {:.2}% lr {:.3e}..{:.3e}",
                    r.epoch, r.mean_loss, r.base_top1, r.lr_start, r.lr_end
                );
            }
            let header = save_checkpoint(&ckpt, &out.params, cfg.seed, Objective::cross_entropy(cfg.temperature), ctx.fingerprint())?;
            let sha = checkpoint_sha256(&header)?;
            ctx.write("log", &out.log.to_jsonl())?;
            ctx.write_json(&json!({
                "checkpoint": header,
                "checkpoint_sha256": sha,
                "param_count": out.params.param_count(),
                "base_classes": out.base_classes,
                "train_config": cfg,
                "log": out.log.records,
                "fingerprint": ctx.fingerprint(),
            }))?;
            say!("checkpoint {} sha256 {sha}", header.display());
            ctx.finish();
        }
        Command::EvalMeta { common, eval, checkpoint, gate_override } => {
            let mut ctx = Ctx::new(name, common, sub)?;
            let task = ctx.load_task(eval.manifest.clone())?;
            let (params, _) = meta_params(&mut ctx, checkpoint, gate_override)?;
            evaluate(ctx, eval, Method::Meta, &task, Artifacts::meta(params), None)?;
        }
        Command::Transfer { common, eval, method, checkpoint, gate_override, alpha, beta, tip, source } => {
            let mut ctx = Ctx::new(name, common, sub)?;
            let method: Method = ctx.settings.get("method", method, "meta".to_string())?.parse()?;
            let task = ctx.load_task(eval.manifest.clone())?;
            let (artifacts, from) = match method {
                Method::Meta => {
                    let (p, src) = meta_params(&mut ctx, checkpoint, gate_override)?;
                    (Artifacts::meta(p), src)
                }
                Method::Tip => {
                    let (p, src) = tip_params(&mut ctx, alpha, beta, tip)?;
                    (Artifacts::tip(p), src)
                }
                Method::Zeroshot => (Artifacts::zeroshot(), None),
            };
            let source = ctx.settings.opt("source", source)?.or(from).unwrap_or_else(|| "source".into());
            evaluate(ctx, eval, method, &task, artifacts, Some(source))?;
        }
        Command::Gradcheck { common, seed, seeds } => {
            let mut ctx = Ctx::new(name, common, sub)?;
            let first = ctx.settings.get("seed", seed, 0u64)?;
            let n = ctx.settings.get("seeds", seeds, 20usize)?;
            if n == 0 {
                bail!("--seeds must be >= 1");
            }
            let report = run_suite(first, n)?;
            ctx.write_json(&json!({ "report": report, "fingerprint": ctx.fingerprint() }))?;
            say!(
                "max relative error: {:.3e} (tolerance {:.0e}, {} cases, {:.2}s)",
                report.max_rel_error,
                report.tolerance,
                report.cases.len(),
                report.seconds
            );
            ctx.finish();
            if !report.passed() {
                bail!("gradient check failed: {:.3e} > {:.0e}", report.max_rel_error, report.tolerance);
            }
        }
        Command::Inspect { common, paths } => {
            let mut ctx = Ctx::new(name, common, sub)?;
            let mut items = Vec::new();
            for p in &paths {
                items.push(inspect(p)?);
                ctx.inputs.insert(p.display().to_string(), String::new());
            }
            let out = json!(items);
            say!("{}", serde_json::to_string_pretty(&out)?);
            ctx.write_json(&json!({ "items": out, "fingerprint": ctx.fingerprint() }))?;
        }
    }
    Ok(())
}

fn adapter_config(s: &mut Settings, f: AdapterFlags, dim: usize) -> Result<AdapterConfig> {
    let mut c = AdapterConfig::new(dim);
    c.heads = s.get("heads", f.heads, DEFAULT_HEADS)?;
    c.depth = s.get("depth", f.depth, c.depth)?;
    c.width_mult = s.get("width-mult", f.width_mult, c.width_mult)?;
    c.gate = s.get("gate", f.gate, "scalar".to_string())?.parse::<GateMode>()?;
    c.attention = !s.get("no-attention", f.no_attention, false)?;
    c.value_projection = s.get("value-projection", f.value_projection, false)?;
    c.gate_bias_init = s.get("gate-bias-init", f.gate_bias_init, c.gate_bias_init)?;
    c.validate()?;
    Ok(c)
}

fn meta_params(ctx: &mut Ctx, checkpoint: Option<PathBuf>, gate_override: Option<f64>) -> Result<(AdapterParams, Option<String>)> {
    let ckpt = ctx.input("checkpoint", checkpoint)?;
    let (params, header) = load_checkpoint(&ckpt)?;
    let g = ctx.settings.opt("gate-override", gate_override)?;
    if let Some(g) = g {
        if !g.is_finite() {
            bail!("gate-override must be finite");
        }
    }
    ctx.context.insert("checkpoint_sha256".into(), json!(checkpoint_sha256(&ckpt)?));
    let source = header
        .train_fingerprint
        .pointer("/context/task")
        .and_then(Value::as_str)
        .map(str::to_string);
    Ok((params.with_gate_override(g), source))
}

/// Alpha and beta from flags or a `search-tip.json`, plus the task the
/// search ran on when known.
fn tip_params(ctx: &mut Ctx, alpha: Option<f64>, beta: Option<f64>, tip: Option<PathBuf>) -> Result<(TipParams, Option<String>)> {
    let (mut a, mut b, mut source) = (None, None, None);
    if let Some(p) = ctx.path("tip", tip)? {
        ctx.input("tip", Some(p.clone()))?;
        let v: Value = serde_json::from_slice(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?;
        a = v.get("alpha").and_then(Value::as_f64);
        b = v.get("beta").and_then(Value::as_f64);
        source = v.pointer("/fingerprint/context/task").and_then(Value::as_str).map(str::to_string);
        if a.is_none() || b.is_none() {
            bail!("{} has no alpha/beta", p.display());
        }
    }
    let alpha = ctx.settings.opt("alpha", alpha)?.or(a).ok_or_else(|| anyhow!("--alpha or --tip is required"))?;
    let beta = ctx.settings.opt("beta", beta)?.or(b).ok_or_else(|| anyhow!("--beta or --tip is required"))?;
    Ok((TipParams::new(alpha, beta)?, source))
}

fn evaluate(mut ctx: Ctx, eval: EvalFlags, method: Method, task: &Task, mut artifacts: Artifacts, source: Option<String>) -> Result<()> {
    let side = ctx.settings.opt("side", eval.side)?;
    let shots = ctx.settings.opt("shots", eval.shots)?;
    let format: ReportFormat = ctx.settings.get("format", eval.format, "json".to_string())?.parse()?;
    let opts = EvalOptions { shots, pool: Pool::Eval };
    artifacts.extra = ctx.fingerprint();

    let report: EvalReport = match (side.as_deref(), &source) {
        (None, Some(src)) => cross_dataset(method, src, &artifacts, task, opts)?,
        (None, None) if task.split().is_none() => eval_method(method, task, Side::All, &artifacts, opts)?,
        (None | Some("both"), _) => {
            if source.is_some() {
                check_transfer_dims(&artifacts, task)?;
            }
            eval_cross_category(method, task, &artifacts, opts)?
        }
        (Some(s), _) => {
            if source.is_some() {
                check_transfer_dims(&artifacts, task)?;
            }
            eval_method(method, task, s.parse()?, &artifacts, opts)?
        }
    };
    let report = match source {
        Some(src) => EvalReport { source: src, ..report },
        None => report,
    };
    check_invariants(&report)?;
    ctx.write_json(&serde_json::to_value(&report)?)?;
    {
        use std::io::Write as _;
        let _ = std::io::stdout().write_all(emit_report(&report, format).as_bytes());
    }
    ctx.finish();
    Ok(())
}

fn check_transfer_dims(artifacts: &Artifacts, target: &Task) -> Result<()> {
    if let Some(p) = &artifacts.meta {
        if p.config.dim != target.dim() {
            return Err(metaadapter_core::Error::Transfer(format!(
                "source adapter has dim {}, target {:?} has dim {}",
                p.config.dim,
                target.name(),
                target.dim()
            ))
            .into());
        }
    }
    Ok(())
}

/// `a,b,c` or inclusive `start:stop:step`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let vals = if parts.len() == 3 {
        let [start, stop, step] = [parts[0], parts[1], parts[2]].map(|p| p.trim().parse::<f64>());
        let (start, stop, step) = (start?, stop?, step?);
        if !(step > 0.0) || stop < start {
            bail!("range {s:?} needs step > 0 and stop >= start");
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| {
                let v = start + i as f64 * step;
                format!("{v:.12}").parse::<f64>().expect("formatted float parses")
            })
            .collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| anyhow!("bad grid value {p:?}: {e}")))
            .collect::<Result<Vec<_>>>()?
    };
    if vals.is_empty() {
        bail!("empty grid {s:?}");
    }
    Ok(vals)
}

fn inspect(p: &Path) -> Result<Value> {
    let is_ckpt = p.is_dir() || p.file_name().is_some_and(|n| n == metaadapter_core::adapter::HEADER_FILE);
    if p.extension().is_some_and(|e| e == "embx") {
        let h = embx::read_header(p)?;
        Ok(json!({ "path": p, "kind": "embx", "header": h, "numel": h.numel() }))
    } else if is_ckpt {
        let (params, header) = load_checkpoint(p)?;
        Ok(json!({ "path": p, "kind": "checkpoint", "header": header, "finite": params.is_finite() }))
    } else {
        let t = load_task(p)?;
        let count = |side| t.side_classes(side).map(|c| c.len()).ok();
        Ok(json!({
            "path": p,
            "kind": "manifest",
            "dataset": t.name(),
            "classes": t.n_classes(),
            "shots": t.shots(),
            "dim": t.dim(),
            "base": count(Side::Base),
            "novel": count(Side::Novel),
            "eval_queries": t.query_pool(Pool::Eval)?.len(),
            "train_queries": t.query_pool(Pool::Train).ok().map(|q| q.len()),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("0:0.3:0.1").unwrap(), vec![0.0, 0.1, 0.2, 0.3]);
        assert_eq!(parse_grid("1, 2.5").unwrap(), vec![1.0, 2.5]);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("a").is_err());
    }
}
