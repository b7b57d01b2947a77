//! Analytic gradients of the mean cross-entropy over temperature-scaled
//! cosine logits with respect to every adapter parameter.

use super::forward::{canonical_shots, refine, BlockTrace};
use super::{AdapterParams, BlockParams, GateMode};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Matrix, Scalar};
use crate::train::{cross_entropy, cross_entropy_grad};
use crate::zeroshot::{cosine_logits, unit_rows};

#[derive(Clone, Debug, PartialEq)]
pub struct Backward {
    pub loss: f64,
    /// Same layout as the parameters.
    pub grads: AdapterParams,
}

/// Forward loss only.
pub fn loss<T: Scalar>(
    queries: &Matrix<T>,
    labels: &[usize],
    classes: &Matrix<T>,
    support: &[Matrix<T>],
    params: &AdapterParams,
    temperature: f64,
) -> Result<f64> {
    let refined = refine(classes, support, params)?;
    let logits = cosine_logits(&queries.cast::<f64>(), &refined.refined)?;
    check_labels(labels, queries.rows(), classes.rows())?;
    Ok(cross_entropy(&logits, labels, temperature))
}

fn check_labels(labels: &[usize], q: usize, n: usize) -> Result<()> {
    if labels.len() != q {
        return Err(Error::shape("labels", q, labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::shape("labels", format!("< {n}"), bad));
    }
    Ok(())
}

pub fn backward<T: Scalar>(
    queries: &Matrix<T>,
    labels: &[usize],
    classes: &Matrix<T>,
    support: &[Matrix<T>],
    params: &AdapterParams,
    temperature: f64,
) -> Result<Backward> {
    check_labels(labels, queries.rows(), classes.rows())?;
    let refined = refine(classes, support, params)?;
    let unit_q = unit_rows(queries, "queries")?;
    let logits = cosine_logits(&unit_q, &refined.refined)?;
    let (loss, dcos) = cross_entropy_grad(&logits, labels, temperature);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }

    let mut grads = params.zeros_like();
    let d = params.config.dim;
    for c in 0..refined.n_classes() {
        // d loss / d w_hat through the cosine normalization of w_hat.
        let w_hat = refined.refined.row(c);
        let n = norm(w_hat);
        let mut gu = vec![0.0; d];
        for q in 0..unit_q.rows() {
            let s = dcos.get(q, c);
            if s != 0.0 {
                for (g, &f) in gu.iter_mut().zip(unit_q.row(q)) {
                    *g += s * f;
                }
            }
        }
        let proj = dot(&gu, w_hat) / n;
        let mut gw: Vec<f64> = gu
            .iter()
            .zip(w_hat)
            .map(|(g, w)| (g - proj * w / n) / n)
            .collect();

        let shots = canonical_shots(&support[c]);
        for l in (0..params.config.depth).rev() {
            gw = block_backward(
                &params.blocks[l],
                &mut grads.blocks[l],
                params,
                &refined.traces[c][l],
                &shots,
                &gw,
            )
            .map_err(|what| {
                Error::Numeric(format!("non-finite gradient ({what}) for class {c} in block {l}"))
            })?;
        }
    }
    Ok(Backward { loss, grads })
}

/// Accumulates this block's parameter gradients and returns
/// `d loss / d w_in`.
fn block_backward(
    block: &BlockParams,
    grads: &mut BlockParams,
    params: &AdapterParams,
    t: &BlockTrace,
    shots: &Matrix<f64>,
    gw_out: &[f64],
) -> std::result::Result<Vec<f64>, String> {
    let cfg = &params.config;
    let (d, h) = (cfg.dim, cfg.heads);
    let (hd, phd) = (cfg.head_dim(), cfg.proj_head_dim());
    let k = shots.rows();

    let mut gw_in = gw_out.to_vec();

    // Residual gate.
    let dagg: Vec<f64> = match (params.gate_override, cfg.gate) {
        (Some(_), _) | (None, GateMode::Disabled) => {
            gw_out.iter().map(|g| t.gate[0] * g).collect()
        }
        (None, GateMode::Scalar) => {
            let g = t.gate[0];
            let dz = dot(gw_out, &t.aggregated) * g * (1.0 - g);
            grads.gate_weight.add_outer(&[dz], &t.input, 1.0);
            grads.gate_bias[0] += dz;
            for (gi, &wg) in gw_in.iter_mut().zip(block.gate_weight.row(0)) {
                *gi += dz * wg;
            }
            gw_out.iter().map(|x| g * x).collect()
        }
        (None, GateMode::Elementwise) => {
            let dz: Vec<f64> = (0..d)
                .map(|i| gw_out[i] * t.aggregated[i] * t.gate[i] * (1.0 - t.gate[i]))
                .collect();
            grads.gate_weight.add_outer(&dz, &t.input, 1.0);
            for (b, z) in grads.gate_bias.iter_mut().zip(&dz) {
                *b += z;
            }
            for (gi, v) in gw_in.iter_mut().zip(block.gate_weight.matvec_transposed(&dz)) {
                *gi += v;
            }
            (0..d).map(|i| t.gate[i] * gw_out[i]).collect()
        }
    };
    if dagg.iter().any(|v| !v.is_finite()) {
        return Err("gate".into());
    }

    // Attention (or mean) aggregation over the shots.
    let mut dvalues = Matrix::<f64>::zeros(k, d);
    if cfg.attention {
        let scale = 1.0 / (phd as f64).sqrt();
        let mut dq = vec![0.0; cfg.proj_dim()];
        let mut dkeys = Matrix::<f64>::zeros(k, cfg.proj_dim());
        let mut da = vec![0.0; k];
        for head in 0..h {
            let a = t.attention.row(head);
            let dagg_h = &dagg[head * hd..(head + 1) * hd];
            for j in 0..k {
                let v = &t.values.row(j)[head * hd..(head + 1) * hd];
                da[j] = dot(dagg_h, v);
                for (dv, g) in dvalues.row_mut(j)[head * hd..(head + 1) * hd].iter_mut().zip(dagg_h) {
                    *dv += a[j] * g;
                }
            }
            let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            let qh = &t.query[head * phd..(head + 1) * phd];
            for j in 0..k {
                let ds = a[j] * (da[j] - mean) * scale;
                if !ds.is_finite() {
                    return Err(format!("attention head {head}"));
                }
                let kh = &t.keys.row(j)[head * phd..(head + 1) * phd];
                for (o, &x) in dq[head * phd..(head + 1) * phd].iter_mut().zip(kh) {
                    *o += ds * x;
                }
                for (o, &x) in dkeys.row_mut(j)[head * phd..(head + 1) * phd].iter_mut().zip(qh) {
                    *o += ds * x;
                }
            }
        }
        grads.query_proj.add_outer(&dq, &t.input, 1.0);
        for (gi, v) in gw_in.iter_mut().zip(block.query_proj.matvec_transposed(&dq)) {
            *gi += v;
        }
        for j in 0..k {
            grads.key_proj.add_outer(dkeys.row(j), shots.row(j), 1.0);
        }
    } else if cfg.value_projection {
        let a = 1.0 / k as f64;
        for j in 0..k {
            for (dv, g) in dvalues.row_mut(j).iter_mut().zip(&dagg) {
                *dv += a * g;
            }
        }
    }

    if let Some(gv) = grads.value_proj.as_mut() {
        for j in 0..k {
            gv.add_outer(dvalues.row(j), shots.row(j), 1.0);
        }
    }

    if gw_in.iter().any(|v| !v.is_finite()) {
        return Err("input".into());
    }
    Ok(gw_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::tensor::{RngSeed, SeededRng};

    fn rand_m(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix<f64> {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn perturbed(params: &AdapterParams, rng: &mut SeededRng) -> AdapterParams {
        let mut p = params.clone();
        p.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = rng.uniform(-0.6, 0.6)));
        p
    }

    fn check(config: AdapterConfig, seed: u64) -> f64 {
        crate::gradcheck::check_case(&config, seed).unwrap().max_rel_error
    }

    #[test]
    fn variants_match_finite_differences() {
        let mut c = AdapterConfig::new(8);
        c.heads = 2;
        c.depth = 2;
        assert!(check(c.clone(), 1) < 1e-4);
        let mut w = c.clone();
        w.width_mult = 2;
        assert!(check(w, 2) < 1e-4);
        let mut e = c.clone();
        e.gate = GateMode::Elementwise;
        assert!(check(e, 3) < 1e-4);
        let mut vp = c.clone();
        vp.value_projection = true;
        assert!(check(vp, 4) < 1e-4);
        let mut mean = c.clone();
        mean.attention = false;
        mean.value_projection = true;
        assert!(check(mean, 5) < 1e-4);
        let mut ng = c;
        ng.gate = GateMode::Disabled;
        assert!(check(ng, 6) < 1e-4);
    }

    #[test]
    fn symmetric_task_has_zero_bias_gradient() {
        let mut c = AdapterConfig::new(2);
        c.heads = 1;
        let params = AdapterParams::init(&c, RngSeed(0)).unwrap().zeros_like();
        let classes = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let support = vec![
            Matrix::from_rows(&[[0.8, 0.6], [0.6, -0.8]]).unwrap(),
            Matrix::from_rows(&[[0.6, 0.8], [-0.8, 0.6]]).unwrap(),
        ];
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let queries = Matrix::from_rows(&[[s, s], [s, s]]).unwrap();
        let b = backward(&queries, &[0, 1], &classes, &support, &params, 10.0).unwrap();
        assert!(b.grads.blocks[0].gate_bias[0].abs() < 1e-12);
    }

    #[test]
    fn closed_gate_cuts_projection_gradients() {
        let mut c = AdapterConfig::new(8);
        c.heads = 2;
        c.depth = 2;
        let mut rng = SeededRng::new(RngSeed(12));
        let params = perturbed(&AdapterParams::init(&c, RngSeed(1)).unwrap(), &mut rng)
            .with_gate_override(Some(0.0));
        let classes = rand_m(3, 8, &mut rng);
        let support: Vec<_> = (0..3).map(|_| rand_m(2, 8, &mut rng)).collect();
        let queries = rand_m(4, 8, &mut rng);
        let b = backward(&queries, &[0, 1, 2, 0], &classes, &support, &params, 100.0).unwrap();
        for blk in &b.grads.blocks {
            assert!(blk.key_proj.data().iter().all(|&v| v == 0.0));
            assert!(blk.query_proj.data().iter().all(|&v| v == 0.0));
        }
    }
}
