//! Acceptance gate: one PASS/FAIL line per criterion. Runs the library and
//! the `metaadapter` binary; exits nonzero when any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde_json::Value;

use metaadapter_core::adapter::{adapter_logits, param_count, refine};
use metaadapter_core::gradcheck::{run_suite, suite_configs, TOLERANCE};
use metaadapter_core::tip::{tip_logits, CacheModel, TipParams};
use metaadapter_core::zeroshot::{top1, zeroshot_logits};
use metaadapter_core::{AdapterConfig, AdapterParams, FeatureMatrix, Matrix, RngSeed, SeededRng};

struct Gate {
    failures: usize,
}

impl Gate {
    fn check(&mut self, name: &str, outcome: Result<String, String>) {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_metaadapter")
}

fn fixture_manifest() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny/manifest.json")
}

/// Runs the binary single-threaded and returns `{out}/{subcommand}.json`.
fn run(out: &Path, args: &[&str]) -> Result<Value, String> {
    let o = Command::new(bin())
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env("ENGINE_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "{} exited {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        ));
    }
    let p = out.join(format!("{}.json", args[0]));
    let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn accuracy_fields(v: &Value) -> Value {
    serde_json::json!({
        "top1_base": v["top1_base"],
        "top1_novel": v["top1_novel"],
        "top1_all": v["top1_all"],
        "harmonic_mean": v["harmonic_mean"],
        "per_class_acc": v["per_class_acc"],
    })
}

fn gradient_correctness() -> Result<String, String> {
    let start = Instant::now();
    let r = run_suite(0, 20).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let depths: std::collections::BTreeSet<usize> = r.cases.iter().map(|c| c.depth).collect();
    let detail = format!(
        "{} cases over 20 seeds, L in {depths:?}, max rel err {:.3e} (limit {TOLERANCE:.0e}), {secs:.2}s",
        r.cases.len(),
        r.max_rel_error
    );
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cli = run(dir.path(), &["gradcheck", "--seed", "3"])?;
    let cli_err = cli["report"]["max_rel_error"].as_f64().unwrap_or(f64::INFINITY);
    let ok = r.passed() && secs < 30.0 && depths.len() == 2 && cli_err <= TOLERANCE && suite_configs().len() >= 2;
    if ok {
        Ok(format!("{detail}; cli gradcheck --seed 3 {cli_err:.3e}"))
    } else {
        Err(format!("{detail}; cli {cli_err:.3e}"))
    }
}

fn zero_shot_equivalence() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path();
    let m = fixture_manifest();
    let m = m.to_str().unwrap();
    run(out, &["train-meta", "--manifest", m, "--seed", "1"])?;
    let ckpt = out.join("checkpoint");
    let meta = run(out, &["eval-meta", "--manifest", m, "--checkpoint", ckpt.to_str().unwrap(), "--gate-override", "0"])?;
    let zs = run(out, &["eval-zeroshot", "--manifest", m])?;
    let (a, b) = (accuracy_fields(&meta), accuracy_fields(&zs));
    let bitwise = ["top1_base", "top1_novel", "harmonic_mean"]
        .iter()
        .all(|k| a[k].as_f64().map(f64::to_bits) == b[k].as_f64().map(f64::to_bits));
    if a == b && bitwise {
        Ok(format!(
            "bundled fixture base {} novel {} H {} in both reports",
            b["top1_base"], b["top1_novel"], b["harmonic_mean"]
        ))
    } else {
        Err(format!("meta {a} vs zero-shot {b}"))
    }
}

fn random_rows(rows: usize, d: usize, rng: &mut SeededRng) -> FeatureMatrix {
    Matrix::new(rows, d, (0..rows * d).map(|_| rng.normal() as f32).collect()).unwrap()
}

/// Cache-model logits with plain loops.
fn tip_oracle(q: &FeatureMatrix, classes: &FeatureMatrix, shots: &[FeatureMatrix], alpha: f64, beta: f64) -> Vec<Vec<f64>> {
    let cos = |x: &[f32], y: &[f32]| {
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for i in 0..x.len() {
            xy += x[i] as f64 * y[i] as f64;
            xx += x[i] as f64 * x[i] as f64;
            yy += y[i] as f64 * y[i] as f64;
        }
        xy / (xx.sqrt() * yy.sqrt())
    };
    (0..q.rows())
        .map(|r| {
            (0..classes.rows())
                .map(|i| {
                    let mut v = cos(q.row(r), classes.row(i));
                    for j in 0..shots[i].rows() {
                        v += alpha * (-beta * (1.0 - cos(q.row(r), shots[i].row(j)))).exp();
                    }
                    v
                })
                .collect()
        })
        .collect()
}

fn tip_degeneracy() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path();
    let mut checked = Vec::new();
    let synth = run(out, &["synth", "--seed", "7"])?;
    let seven = synth["manifest"].as_str().unwrap().to_string();
    for m in [fixture_manifest().to_str().unwrap().to_string(), seven] {
        for beta in ["0.5", "5.5"] {
            let tip = run(out, &["eval-tip", "--manifest", &m, "--alpha", "0", "--beta", beta])?;
            let zs = run(out, &["eval-zeroshot", "--manifest", &m])?;
            if accuracy_fields(&tip) != accuracy_fields(&zs) {
                return Err(format!("eval-tip alpha=0 beta={beta} differs from eval-zeroshot on {m}"));
            }
        }
        checked.push(Path::new(&m).parent().unwrap().file_name().unwrap().to_string_lossy().into_owned());
    }

    let mut rng = SeededRng::new(RngSeed(42));
    for _ in 0..20 {
        let (n, k, d) = (2 + rng.below(5), 1 + rng.below(4), 2 + rng.below(20));
        let q = random_rows(6, d, &mut rng);
        let c = random_rows(n, d, &mut rng);
        let shots: Vec<_> = (0..n).map(|_| random_rows(k, d, &mut rng)).collect();
        let cache = CacheModel::from_support(&shots).unwrap();
        let tip = tip_logits(&q, &c, &cache, TipParams::new(0.0, 1.0 + rng.uniform(0.0, 9.0)).unwrap()).unwrap();
        if tip != zeroshot_logits(&q, &c).unwrap() {
            return Err("alpha=0 logits differ from zero-shot on a random task".into());
        }
    }

    let mut rng = SeededRng::new(RngSeed(2));
    let q = random_rows(3, 4, &mut rng);
    let c = random_rows(2, 4, &mut rng);
    let shots: Vec<_> = (0..2).map(|_| random_rows(1, 4, &mut rng)).collect();
    let got = tip_logits(&q, &c, &CacheModel::from_support(&shots).unwrap(), TipParams::new(1.0, 5.5).unwrap()).unwrap();
    let want = tip_oracle(&q, &c, &shots, 1.0, 5.5);
    let mut worst = 0.0f64;
    for (r, row) in want.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            worst = worst.max((got.values.get(r, i) - v).abs());
        }
    }
    if worst > 1e-5 {
        return Err(format!("scalar-loop oracle differs by {worst:.3e}"));
    }
    Ok(format!(
        "eval-tip alpha=0 == eval-zeroshot on {checked:?} and 20 random tasks; oracle N=2,K=1,D=4 max diff {worst:.1e}"
    ))
}

fn invariances() -> Result<String, String> {
    let mut rng = SeededRng::new(RngSeed(100));
    for trial in 0..100 {
        let (n, k) = (1 + rng.below(4), 1 + rng.below(6));
        let h = [1, 2, 4][rng.below(3)];
        let mut cfg = AdapterConfig::new(8);
        cfg.heads = h;
        cfg.depth = 1 + rng.below(2);
        cfg.width_mult = 1 + rng.below(2);
        cfg.value_projection = rng.below(2) == 1;
        let p = AdapterParams::init(&cfg, RngSeed(trial)).unwrap();
        let classes = random_rows(n, 8, &mut rng);
        let support: Vec<_> = (0..n).map(|_| random_rows(k, 8, &mut rng)).collect();
        let permuted: Vec<_> = support
            .iter()
            .map(|s| {
                let mut idx: Vec<usize> = (0..k).collect();
                rng.shuffle(&mut idx);
                s.select_rows(&idx)
            })
            .collect();
        let a = refine(&classes, &support, &p).unwrap();
        let b = refine(&classes, &permuted, &p).unwrap();
        if a.refined.data() != b.refined.data() {
            return Err(format!("refine changed under shot permutation in trial {trial}"));
        }
    }
    let mut rng = SeededRng::new(RngSeed(101));
    let p = AdapterParams::init(&AdapterConfig::new(16), RngSeed(0)).unwrap();
    for trial in 0..100 {
        let n = 2 + rng.below(8);
        let q = random_rows(12, 16, &mut rng);
        let c = random_rows(n, 16, &mut rng);
        let support: Vec<_> = (0..n).map(|_| random_rows(3, 16, &mut rng)).collect();
        let mut scaled = q.clone();
        for r in 0..scaled.rows() {
            let s = rng.uniform(1e-3, 1e3) as f32;
            scaled.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let zs = (top1(&zeroshot_logits(&q, &c).unwrap()), top1(&zeroshot_logits(&scaled, &c).unwrap()));
        let meta = (
            top1(&adapter_logits(&q, &c, &support, &p).unwrap()),
            top1(&adapter_logits(&scaled, &c, &support, &p).unwrap()),
        );
        if zs.0 != zs.1 || meta.0 != meta.1 {
            return Err(format!("top-1 changed under positive rescaling in trial {trial}"));
        }
    }
    Ok("shot permutation: refine bitwise equal in 100/100 trials; positive rescaling: zero-shot and adapter top-1 equal in 100/100 trials".into())
}

fn parameter_counts() -> Result<String, String> {
    let count = |l: usize, m: usize| {
        let mut c = AdapterConfig::new(1024);
        c.heads = 8;
        c.depth = l;
        c.width_mult = m;
        param_count(&c)
    };
    let rows = [("base", count(1, 1), 2.1e6), ("L=2", count(2, 1), 4.2e6), ("L=4", count(4, 1), 8.4e6), ("m=4", count(1, 4), 8.4e6)];
    let mut detail = Vec::new();
    let mut ok = count(1, 1) == 2_098_177;
    for (name, got, reference) in rows {
        let rel = (got as f64 - reference).abs() / reference;
        ok &= rel <= 0.05;
        detail.push(format!("{name} {got} ({:+.2}% vs {:.1}M)", 100.0 * (got as f64 - reference) / reference, reference / 1e6));
    }
    let built = AdapterParams::init(&AdapterConfig::new(1024), RngSeed(0)).unwrap().param_count();
    ok &= built == 2_098_177;
    if ok {
        Ok(detail.join(", "))
    } else {
        Err(detail.join(", "))
    }
}

fn meta_generalization(out: &Path) -> Result<String, String> {
    let start = Instant::now();
    run(out, &["synth", "--seed", "7", "--classes", "16", "--shots", "16", "--dim", "64", "--spread", "0.35"])?;
    let task = out.join("task/manifest.json");
    run(out, &["split", "--manifest", task.to_str().unwrap(), "--base-fraction", "0.5"])?;
    let m = out.join("split/manifest.json");
    let m = m.to_str().unwrap();
    let zs = run(out, &["eval-zeroshot", "--manifest", m, "--side", "novel"])?;
    let train = run(out, &["train-meta", "--manifest", m, "--epochs", "5", "--seed", "7"])?;
    let ckpt = out.join("checkpoint");
    let meta = run(out, &["eval-meta", "--manifest", m, "--checkpoint", ckpt.to_str().unwrap(), "--side", "novel"])?;
    let secs = start.elapsed().as_secs_f64();

    let first_sha = train["checkpoint_sha256"].as_str().unwrap_or_default().to_string();
    let again = run(out, &["train-meta", "--manifest", m, "--epochs", "5", "--seed", "7"])?;
    let deterministic = again["checkpoint_sha256"].as_str() == Some(&first_sha);

    let z = zs["top1_novel"].as_f64().ok_or("no zero-shot novel accuracy")?;
    let a = meta["top1_novel"].as_f64().ok_or("no meta novel accuracy")?;
    let detail = format!(
        "novel top-1 zero-shot {z:.2} -> meta {a:.2} ({:+.2} points, need >= 5), same-seed checkpoints identical: {deterministic}, {secs:.2}s single-threaded",
        a - z
    );
    if a - z >= 5.0 && deterministic && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn loss_trajectory(out: &Path) -> Result<String, String> {
    let m = out.join("split/manifest.json");
    let m = m.to_str().unwrap();
    let read = |dir: &Path| std::fs::read_to_string(dir.join("train-meta.log")).map_err(|e| e.to_string());
    let a_dir = out.join("run_a");
    let b_dir = out.join("run_b");
    run(&a_dir, &["train-meta", "--manifest", m, "--seed", "7"])?;
    run(&b_dir, &["train-meta", "--manifest", m, "--seed", "7"])?;
    let (a, b) = (read(&a_dir)?, read(&b_dir)?);
    let losses: Vec<f64> = a
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["mean_loss"].as_f64().unwrap())
        .collect();
    let (first, last) = (losses[0], *losses.last().unwrap());
    let detail = format!("epoch 1 loss {first:.6} -> epoch {} loss {last:.6}, same-seed logs identical: {}", losses.len(), a == b);
    if last < first && a == b {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let mut gate = Gate { failures: 0 };
    let work = tempfile::tempdir().expect("temp dir");
    gate.check("gradient correctness", gradient_correctness());
    gate.check("zero-shot equivalence", zero_shot_equivalence());
    gate.check("tip degeneracy", tip_degeneracy());
    gate.check("permutation/scale invariances", invariances());
    gate.check("parameter count", parameter_counts());
    gate.check("synthetic meta-generalization", meta_generalization(work.path()));
    gate.check("loss trajectory", loss_trajectory(work.path()));
    if gate.failures > 0 {
        println!("{} acceptance criteria failed", gate.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
