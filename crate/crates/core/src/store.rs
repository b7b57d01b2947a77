//! Task manifests, resident task data, the synthetic task generator and the
//! zero-shot base/novel split.
//!
//! A manifest is a JSON document whose paths are resolved against its own
//! directory. Every referenced matrix is an `EMBX` container; multi-axis
//! tensors are flattened row-major with the class axis outermost.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::embx::{self, Container, Payload};
use crate::error::{Error, Result};
use crate::tensor::{norm, FeatureMatrix, Matrix, RngSeed, SeededRng, DEFAULT_NORM_EPS};
use crate::zeroshot;

/// Rows whose norm is within this distance of 1 are kept bit-for-bit.
const RENORM_TOLERANCE: f64 = 1e-6;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Base,
    Novel,
}

/// Which classes an evaluation is restricted to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Base,
    Novel,
    All,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Base => "base",
            Side::Novel => "novel",
            Side::All => "all",
        })
    }
}

impl std::str::FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Side::Base),
            "novel" => Ok(Side::Novel),
            "all" => Ok(Side::All),
            other => Err(Error::Config(format!("unknown side {other:?} (base, novel, all)"))),
        }
    }
}

/// Query pool: training-side queries feed the split, Tip-Adapter validation and
/// meta-training; evaluation queries are only ever used for reported accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Train,
    Eval,
}

/// On-disk description of one dataset split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub dataset_name: String,
    pub embed_dim: usize,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub split: Option<Vec<SplitLabel>>,
    pub text_embeddings: String,
    pub support: String,
    pub query_features: String,
    pub query_labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_query_features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_query_labels: Option<String>,
    pub shots: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A single read of task data, recorded when tracing is enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Access {
    Text(usize),
    Support(usize),
    Query { pool: Pool, class: usize },
}

/// Shared log of which classes' data have been read.
#[derive(Clone, Debug, Default)]
pub struct AccessTrace(Arc<Mutex<BTreeSet<Access>>>);

impl AccessTrace {
    fn record(&self, a: Access) {
        self.0.lock().expect("trace lock").insert(a);
    }

    pub fn snapshot(&self) -> BTreeSet<Access> {
        self.0.lock().expect("trace lock").clone()
    }

    pub fn clear(&self) {
        self.0.lock().expect("trace lock").clear();
    }
}

/// A loaded, validated task. Immutable once built.
#[derive(Clone, Debug)]
pub struct Task {
    name: String,
    class_names: Vec<String>,
    split: Option<Vec<SplitLabel>>,
    text: FeatureMatrix,
    support: Vec<FeatureMatrix>,
    queries: QuerySet,
    train_queries: Option<QuerySet>,
    shots: usize,
    trace: Option<AccessTrace>,
}

impl PartialEq for Task {
    fn eq(&self, o: &Self) -> bool {
        self.name == o.name
            && self.class_names == o.class_names
            && self.split == o.split
            && self.text == o.text
            && self.support == o.support
            && self.queries == o.queries
            && self.train_queries == o.train_queries
            && self.shots == o.shots
    }
}

/// The slice of a task an evaluation or training run is allowed to see.
/// Labels are local indices into `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassView {
    pub classes: Vec<usize>,
    pub text: FeatureMatrix,
    pub support: Vec<FeatureMatrix>,
    pub queries: FeatureMatrix,
    pub labels: Vec<usize>,
}

impl ClassView {
    pub fn shots(&self) -> usize {
        self.support.first().map_or(0, |s| s.rows())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    /// Zero-shot accuracy per class (fraction in `[0, 1]`) on the training pool.
    pub accuracies: Vec<f64>,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl Task {
    pub fn new(
        name: impl Into<String>,
        class_names: Vec<String>,
        text: FeatureMatrix,
        support: Vec<FeatureMatrix>,
        queries: QuerySet,
        train_queries: Option<QuerySet>,
    ) -> Result<Self> {
        let n = class_names.len();
        let d = text.cols();
        if text.rows() != n {
            return Err(Error::shape("text embeddings", format!("{n} rows"), text.rows()));
        }
        if support.len() != n {
            return Err(Error::shape("support", format!("{n} classes"), support.len()));
        }
        let shots = support.first().map_or(0, |s| s.rows());
        for (i, s) in support.iter().enumerate() {
            if s.shape() != (shots, d) {
                return Err(Error::shape(
                    format!("support of class {i}"),
                    format!("{shots}x{d}"),
                    format!("{}x{}", s.rows(), s.cols()),
                ));
            }
        }
        for (pool, q) in [("queries", Some(&queries)), ("train queries", train_queries.as_ref())] {
            let Some(q) = q else { continue };
            if q.features.cols() != d || q.features.rows() != q.labels.len() {
                return Err(Error::shape(
                    pool,
                    format!("{}x{d}", q.labels.len()),
                    format!("{}x{}", q.features.rows(), q.features.cols()),
                ));
            }
            if let Some(bad) = q.labels.iter().find(|&&l| l >= n) {
                return Err(Error::shape(format!("{pool} labels"), format!("< {n}"), bad));
            }
        }
        Ok(Task {
            name: name.into(),
            class_names,
            split: None,
            text,
            support,
            queries,
            train_queries,
            shots,
            trace: None,
        })
    }

    pub fn with_split(mut self, split: Option<Vec<SplitLabel>>) -> Result<Self> {
        if let Some(s) = &split {
            if s.len() != self.n_classes() {
                return Err(Error::shape("split", self.n_classes(), s.len()));
            }
        }
        self.split = split;
        Ok(self)
    }

    /// Starts recording every class-level read made through this task.
    pub fn enable_trace(&mut self) -> AccessTrace {
        let t = AccessTrace::default();
        self.trace = Some(t.clone());
        t
    }

    fn record(&self, a: Access) {
        if let Some(t) = &self.trace {
            t.record(a);
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn split(&self) -> Option<&[SplitLabel]> {
        self.split.as_deref()
    }

    pub fn has_train_pool(&self) -> bool {
        self.train_queries.is_some()
    }

    /// All text embeddings.
    pub fn text(&self) -> &FeatureMatrix {
        (0..self.n_classes()).for_each(|c| self.record(Access::Text(c)));
        &self.text
    }

    pub fn support(&self, class: usize) -> &FeatureMatrix {
        self.record(Access::Support(class));
        &self.support[class]
    }

    pub fn query_pool(&self, pool: Pool) -> Result<&QuerySet> {
        let q = match pool {
            Pool::Eval => &self.queries,
            Pool::Train => self.train_queries.as_ref().ok_or_else(|| {
                Error::Config(format!("task {:?} has no training query pool", self.name))
            })?,
        };
        for &l in q.labels.iter().collect::<BTreeSet<_>>() {
            self.record(Access::Query { pool, class: l });
        }
        Ok(q)
    }

    /// Classes on one side of the split, ascending.
    pub fn side_classes(&self, side: Side) -> Result<Vec<usize>> {
        match side {
            Side::All => Ok((0..self.n_classes()).collect()),
            Side::Base | Side::Novel => {
                let split = self.split.as_ref().ok_or_else(|| {
                    Error::Config(format!("task {:?} has no base/novel split", self.name))
                })?;
                let want = if side == Side::Base { SplitLabel::Base } else { SplitLabel::Novel };
                Ok(split
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s == want)
                    .map(|(i, _)| i)
                    .collect())
            }
        }
    }

    /// Restricts the task to `classes`: their text rows, their first `shots`
    /// support rows (all when `None`) and the `pool` queries labeled with them.
    /// Nothing belonging to other classes is read.
    pub fn view(&self, classes: &[usize], pool: Pool, shots: Option<usize>) -> Result<ClassView> {
        let k = shots.unwrap_or(self.shots);
        if k > self.shots {
            return Err(Error::Support(format!(
                "requested {k} shots but task {:?} provides {}",
                self.name, self.shots
            )));
        }
        let mut local = vec![usize::MAX; self.n_classes()];
        for (j, &c) in classes.iter().enumerate() {
            if c >= self.n_classes() {
                return Err(Error::shape("view classes", format!("< {}", self.n_classes()), c));
            }
            local[c] = j;
        }
        let q = match pool {
            Pool::Eval => &self.queries,
            Pool::Train => self.train_queries.as_ref().ok_or_else(|| {
                Error::Config(format!("task {:?} has no training query pool", self.name))
            })?,
        };
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (r, &l) in q.labels.iter().enumerate() {
            if local[l] != usize::MAX {
                rows.push(r);
                labels.push(local[l]);
                self.record(Access::Query { pool, class: l });
            }
        }
        let mut text_rows = Vec::with_capacity(classes.len());
        let mut support = Vec::with_capacity(classes.len());
        for &c in classes {
            self.record(Access::Text(c));
            text_rows.push(c);
            let s = self.support(c);
            support.push(s.select_rows(&(0..k).collect::<Vec<_>>()));
        }
        Ok(ClassView {
            classes: classes.to_vec(),
            text: self.text.select_rows(&text_rows),
            support,
            queries: q.features.select_rows(&rows),
            labels,
        })
    }

    pub fn side_view(&self, side: Side, pool: Pool, shots: Option<usize>) -> Result<ClassView> {
        let classes = self.side_classes(side)?;
        self.view(&classes, pool, shots)
    }
}

/// Loads and validates a manifest and everything it references.
pub fn load_task(manifest_path: &Path) -> Result<Task> {
    let raw = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: TaskManifest = serde_json::from_slice(&raw).map_err(|e| Error::Json {
        path: manifest_path.into(),
        source: e,
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let bad = |reason: String| Error::Manifest {
        path: manifest_path.into(),
        reason,
    };

    let n = manifest.class_names.len();
    let d = manifest.embed_dim;
    let k = manifest.shots;
    if n == 0 || d == 0 {
        return Err(bad(format!("empty task: {n} classes, embed_dim {d}")));
    }
    if let Some(s) = &manifest.split {
        if s.len() != n {
            return Err(bad(format!("split has {} labels for {n} classes", s.len())));
        }
    }

    let text_path = base.join(&manifest.text_embeddings);
    let text = load_rows(&text_path, &[n as u64, d as u64], n, d)?;

    let support_path = base.join(&manifest.support);
    let flat = load_rows(&support_path, &[n as u64, k as u64, d as u64], n * k, d)?;
    let support = (0..n)
        .map(|c| flat.select_rows(&(c * k..(c + 1) * k).collect::<Vec<_>>()))
        .collect();

    let queries = load_queries(base, &manifest.query_features, &manifest.query_labels, n, d)?;
    let train_queries = match (&manifest.train_query_features, &manifest.train_query_labels) {
        (Some(f), Some(l)) => Some(load_queries(base, f, l, n, d)?),
        (None, None) => None,
        _ => {
            return Err(bad(
                "train_query_features and train_query_labels must be given together".into(),
            ))
        }
    };

    Task::new(
        manifest.dataset_name,
        manifest.class_names,
        text,
        support,
        queries,
        train_queries,
    )?
    .with_split(manifest.split)
}

fn load_queries(base: &Path, features: &str, labels: &str, n: usize, d: usize) -> Result<QuerySet> {
    let fpath = base.join(features);
    let header = embx::read_header(&fpath)?;
    let q = header.dims.first().copied().unwrap_or(0);
    let features = load_rows(&fpath, &[q, d as u64], q as usize, d)?;
    let lpath = base.join(labels);
    let lc = embx::read(&lpath)?;
    if lc.dims != [q] {
        return Err(Error::shape(
            format!("{}", lpath.display()),
            format!("[{q}]"),
            format!("{:?}", lc.dims),
        ));
    }
    let mut out = Vec::with_capacity(q as usize);
    for (i, v) in lc.values_f64().into_iter().enumerate() {
        if v.fract() != 0.0 || v < 0.0 || v >= n as f64 {
            return Err(Error::Manifest {
                path: lpath.clone(),
                reason: format!("label {v} at index {i} is not a class index in [0, {n})"),
            });
        }
        out.push(v as usize);
    }
    Ok(QuerySet { features, labels: out })
}

/// Reads a container, checks its dims, and renormalizes its rows.
fn load_rows(path: &Path, dims: &[u64], rows: usize, cols: usize) -> Result<FeatureMatrix> {
    let c = embx::read(path)?;
    if c.dims != dims {
        return Err(Error::shape(
            format!("{}", path.display()),
            format!("{dims:?}"),
            format!("{:?}", c.dims),
        ));
    }
    let values = match c.payload {
        Payload::F32(v) => v,
        Payload::F64(_) => {
            return Err(Error::Format {
                path: path.into(),
                reason: "feature files must be f32 (dtype 0)".into(),
            })
        }
    };
    let mut m = Matrix::new(rows, cols, values)?;
    for r in 0..rows {
        let n = norm(m.row(r));
        if n < DEFAULT_NORM_EPS {
            return Err(Error::DegenerateEmbedding {
                context: path.display().to_string(),
                row: r,
                eps: DEFAULT_NORM_EPS,
            });
        }
        if (n - 1.0).abs() > RENORM_TOLERANCE {
            for v in m.row_mut(r) {
                *v = (*v as f64 / n) as f32;
            }
        }
    }
    Ok(m)
}

/// Writes `task` as `manifest.json` plus containers into `dir`.
pub fn save_task(task: &Task, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = task.n_classes() as u64;
    let d = task.dim() as u64;
    let k = task.shots as u64;

    embx::write(
        &dir.join("text.embx"),
        &Container::f32(vec![n, d], task.text.data().to_vec()),
    )?;
    let mut flat = Vec::with_capacity((n * k * d) as usize);
    for s in &task.support {
        flat.extend_from_slice(s.data());
    }
    embx::write(&dir.join("support.embx"), &Container::f32(vec![n, k, d], flat))?;
    write_queries(dir, "queries", &task.queries)?;
    if let Some(t) = &task.train_queries {
        write_queries(dir, "train_queries", t)?;
    }

    let manifest = TaskManifest {
        dataset_name: task.name.clone(),
        embed_dim: task.dim(),
        class_names: task.class_names.clone(),
        split: task.split.clone(),
        text_embeddings: "text.embx".into(),
        support: "support.embx".into(),
        query_features: "queries.embx".into(),
        query_labels: "queries_labels.embx".into(),
        train_query_features: task.train_queries.as_ref().map(|_| "train_queries.embx".into()),
        train_query_labels: task
            .train_queries
            .as_ref()
            .map(|_| "train_queries_labels.embx".into()),
        shots: task.shots,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_queries(dir: &Path, stem: &str, q: &QuerySet) -> Result<()> {
    let rows = q.len() as u64;
    embx::write(
        &dir.join(format!("{stem}.embx")),
        &Container::f32(vec![rows, q.features.cols() as u64], q.features.data().to_vec()),
    )?;
    embx::write(
        &dir.join(format!("{stem}_labels.embx")),
        &Container::f32(vec![rows], q.labels.iter().map(|&l| l as f32).collect()),
    )
}

/// Parameters of a synthetic clustered task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub shots: usize,
    pub dim: usize,
    /// Queries drawn per class for each of the training and evaluation pools.
    pub queries_per_class: usize,
    pub cluster_spread: f64,
    pub base_fraction: f64,
    pub seed: RngSeed,
    /// Seed of the class centers; `seed` when absent. Tasks sharing it share
    /// cluster geometry while their samples differ.
    #[serde(default)]
    pub geometry_seed: Option<RngSeed>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 16,
            shots: 16,
            dim: 64,
            queries_per_class: 32,
            cluster_spread: 0.35,
            base_fraction: 0.5,
            seed: RngSeed(7),
            geometry_seed: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cluster_spread > 0.0) || !self.cluster_spread.is_finite() {
            return Err(Error::Config(format!(
                "cluster_spread must be > 0, got {}",
                self.cluster_spread
            )));
        }
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return Err(Error::Config(format!(
                "base_fraction must lie in (0, 1), got {}",
                self.base_fraction
            )));
        }
        if self.n_classes == 0 || self.dim == 0 || self.queries_per_class == 0 {
            return Err(Error::Config(
                "n_classes, dim and queries_per_class must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Number of base classes for a fraction of `n` (`ceil`, robust to float noise).
pub fn base_count(base_fraction: f64, n: usize) -> usize {
    (((base_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Generates a clustered task: unit-norm centers; every text row, shot and
/// query is its class center plus isotropic Gaussian noise scaled by
/// `cluster_spread` per coordinate, renormalized. The first
/// `ceil(base_fraction * n)` classes are labeled base.
pub fn synth_task(spec: &SynthSpec) -> Result<Task> {
    spec.validate()?;
    let (n, k, d, qpc) = (spec.n_classes, spec.shots, spec.dim, spec.queries_per_class);
    let s = spec.cluster_spread;

    let mut rng = SeededRng::derived(spec.geometry_seed.unwrap_or(spec.seed), 0);
    let centers: Vec<Vec<f64>> = (0..n)
        .map(|_| unit((0..d).map(|_| rng.normal()).collect()))
        .collect::<Result<_>>()?;

    let sample = |stream: u64, per_class: usize| -> Result<Vec<f32>> {
        let mut rng = SeededRng::derived(spec.seed, stream);
        let mut out = Vec::with_capacity(n * per_class * d);
        for c in &centers {
            for _ in 0..per_class {
                let v = c.iter().map(|x| x + s * rng.normal()).collect();
                out.extend(unit(v)?.into_iter().map(|x| x as f32));
            }
        }
        Ok(out)
    };

    let text = Matrix::new(n, d, sample(1, 1)?)?;
    let shots_flat = sample(2, k)?;
    let support = (0..n)
        .map(|c| Matrix::new(k, d, shots_flat[c * k * d..(c + 1) * k * d].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat(c).take(qpc)).collect();
    let train = QuerySet {
        features: Matrix::new(n * qpc, d, sample(3, qpc)?)?,
        labels: labels.clone(),
    };
    let eval = QuerySet {
        features: Matrix::new(n * qpc, d, sample(4, qpc)?)?,
        labels,
    };

    let nb = base_count(spec.base_fraction, n);
    let split = (0..n)
        .map(|c| if c < nb { SplitLabel::Base } else { SplitLabel::Novel })
        .collect();
    Task::new(
        format!("synth-{}", spec.seed.0),
        (0..n).map(|c| format!("class_{c:03}")).collect(),
        text,
        support,
        eval,
        Some(train),
    )?
    .with_split(Some(split))
}

fn unit(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = norm(&v);
    if n < DEFAULT_NORM_EPS {
        return Err(Error::Numeric("generated a zero-norm vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Assigns base/novel by zero-shot per-class accuracy on the training pool:
/// highest accuracy first, ties by ascending class index, the first
/// `ceil(base_fraction * N)` classes become base.
pub fn split_by_zeroshot(task: &Task, base_fraction: f64) -> Result<(Task, SplitSummary)> {
    if !(base_fraction > 0.0 && base_fraction < 1.0) {
        return Err(Error::Config(format!(
            "base_fraction must lie in (0, 1), got {base_fraction}"
        )));
    }
    let pool = task.query_pool(Pool::Train).map_err(|_| {
        Error::Split(format!(
            "task {:?} has no training query pool; split accuracies are never computed on evaluation queries",
            task.name
        ))
    })?;
    let n = task.n_classes();
    let preds = zeroshot::top1(&zeroshot::zeroshot_logits(&pool.features, task.text())?);
    let mut correct = vec![0u64; n];
    let mut count = vec![0u64; n];
    for (&p, &l) in preds.iter().zip(&pool.labels) {
        count[l] += 1;
        correct[l] += u64::from(p == l);
    }
    if let Some(c) = count.iter().position(|&c| c == 0) {
        return Err(Error::Split(format!(
            "class {c} ({:?}) has no training queries",
            task.class_names[c]
        )));
    }
    let order = rank_by_accuracy(&correct, &count);
    let nb = base_count(base_fraction, n);
    let mut labels = vec![SplitLabel::Novel; n];
    for &c in &order[..nb] {
        labels[c] = SplitLabel::Base;
    }
    let mut base: Vec<usize> = order[..nb].to_vec();
    let mut novel: Vec<usize> = order[nb..].to_vec();
    base.sort_unstable();
    novel.sort_unstable();
    let summary = SplitSummary {
        accuracies: correct
            .iter()
            .zip(&count)
            .map(|(&a, &b)| a as f64 / b as f64)
            .collect(),
        base,
        novel,
    };
    Ok((task.clone().with_split(Some(labels))?, summary))
}

/// Classes ordered by descending `correct/count`, ties by ascending index.
/// Ratios are compared exactly by cross-multiplication.
fn rank_by_accuracy(correct: &[u64], count: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..correct.len()).collect();
    order.sort_by(|&a, &b| {
        let lhs = correct[a] as u128 * count[b] as u128;
        let rhs = correct[b] as u128 * count[a] as u128;
        rhs.cmp(&lhs).then(a.cmp(&b))
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            n_classes: 6,
            shots: 3,
            dim: 8,
            queries_per_class: 5,
            cluster_spread: 0.3,
            base_fraction: 0.5,
            seed: RngSeed(seed),
            geometry_seed: None,
        }
    }

    #[test]
    fn shared_geometry_shares_centers_only() {
        let a = synth_task(&SynthSpec { cluster_spread: 1e-6, ..tiny_spec(1) }).unwrap();
        let b = synth_task(&SynthSpec { cluster_spread: 1e-6, geometry_seed: Some(RngSeed(1)), ..tiny_spec(2) }).unwrap();
        let c = synth_task(&SynthSpec { cluster_spread: 1e-6, ..tiny_spec(2) }).unwrap();
        let close = |x: &Task, y: &Task| {
            x.text.data().iter().zip(y.text.data()).all(|(p, q)| (p - q).abs() < 1e-4)
        };
        assert!(close(&a, &b));
        assert!(!close(&a, &c));
        assert_ne!(a.queries, b.queries);
    }

    #[test]
    fn ranking_orders_and_breaks_ties() {
        assert_eq!(rank_by_accuracy(&[9, 1], &[10, 10]), vec![0, 1]);
        assert_eq!(rank_by_accuracy(&[1, 9], &[10, 10]), vec![1, 0]);
        assert_eq!(rank_by_accuracy(&[2, 2, 2, 2], &[4, 4, 4, 4]), vec![0, 1, 2, 3]);
        // 1/2 == 2/4 exactly
        assert_eq!(rank_by_accuracy(&[2, 1], &[4, 2]), vec![0, 1]);
    }

    #[test]
    fn base_count_rounds_up() {
        assert_eq!(base_count(0.5, 16), 8);
        assert_eq!(base_count(0.3, 10), 3);
        assert_eq!(base_count(0.34, 10), 4);
        assert_eq!(base_count(0.5, 3), 2);
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        let a = synth_task(&tiny_spec(1)).unwrap();
        let b = synth_task(&tiny_spec(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_task(&tiny_spec(2)).unwrap());
        for r in a.text().iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-6);
        }
        assert_eq!(a.side_classes(Side::Base).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn synth_rejects_bad_spread() {
        let mut s = tiny_spec(1);
        s.cluster_spread = 0.0;
        assert!(matches!(synth_task(&s), Err(Error::Config(_))));
        s.cluster_spread = -1.0;
        assert!(synth_task(&s).is_err());
    }

    #[test]
    fn split_partitions_classes() {
        let t = synth_task(&tiny_spec(3)).unwrap();
        let (split, summary) = split_by_zeroshot(&t, 0.5).unwrap();
        let mut all: Vec<usize> = summary.base.iter().chain(&summary.novel).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert_eq!(summary.base.len(), 3);
        assert_eq!(split.side_classes(Side::Base).unwrap(), summary.base);
    }

    #[test]
    fn split_requires_training_queries_per_class() {
        let t = synth_task(&tiny_spec(3)).unwrap();
        let train = t.train_queries.clone().unwrap();
        let keep: Vec<usize> = (0..train.len()).filter(|&r| train.labels[r] != 4).collect();
        let pruned = QuerySet {
            features: train.features.select_rows(&keep),
            labels: keep.iter().map(|&r| train.labels[r]).collect(),
        };
        let mut t2 = t.clone();
        t2.train_queries = Some(pruned);
        let err = split_by_zeroshot(&t2, 0.5).unwrap_err();
        assert!(err.to_string().contains("class 4"), "{err}");

        let mut t3 = t;
        t3.train_queries = None;
        assert!(matches!(split_by_zeroshot(&t3, 0.5), Err(Error::Split(_))));
    }

    #[test]
    fn view_restricts_and_relabels() {
        let t = synth_task(&tiny_spec(5)).unwrap();
        let v = t.view(&[4, 1], Pool::Eval, Some(2)).unwrap();
        assert_eq!(v.text.row(0), t.text.row(4));
        assert_eq!(v.support[1].rows(), 2);
        assert_eq!(v.labels.len(), 10);
        assert!(v.labels.iter().all(|&l| l < 2));
        assert!(t.view(&[0], Pool::Eval, Some(4)).is_err());
    }
}
