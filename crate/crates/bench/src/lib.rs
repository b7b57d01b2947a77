//! Benchmark inputs; the benchmarks themselves live in `benches/`.

use metaadapter_core::{FeatureMatrix, Matrix, RngSeed, SeededRng};

/// Random unit-norm task: `classes`, per-class shots and labelled queries.
pub struct BenchTask {
    pub classes: FeatureMatrix,
    pub support: Vec<FeatureMatrix>,
    pub queries: FeatureMatrix,
    pub labels: Vec<usize>,
}

pub fn unit_rows(rows: usize, dim: usize, rng: &mut SeededRng) -> FeatureMatrix {
    let m = Matrix::new(rows, dim, (0..rows * dim).map(|_| rng.normal() as f32).collect()).expect("shape");
    m.l2_normalize_rows(1e-12).expect("nonzero rows")
}

pub fn bench_task(n: usize, k: usize, dim: usize, queries: usize, seed: u64) -> BenchTask {
    let mut rng = SeededRng::new(RngSeed(seed));
    BenchTask {
        classes: unit_rows(n, dim, &mut rng),
        support: (0..n).map(|_| unit_rows(k, dim, &mut rng)).collect(),
        queries: unit_rows(queries, dim, &mut rng),
        labels: (0..queries).map(|_| rng.below(n)).collect(),
    }
}
