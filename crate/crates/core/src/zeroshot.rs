//! Cosine-similarity (zero-shot) classifier.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Matrix, Scalar, DEFAULT_NORM_EPS};

/// Query × class score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsMatrix {
    pub values: Matrix<f64>,
    /// `false` while entries are raw cosines in `[-1, 1]`.
    pub temperature_applied: bool,
}

impl LogitsMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn scaled(&self, temperature: f64) -> LogitsMatrix {
        let mut values = self.values.clone();
        values.data_mut().iter_mut().for_each(|v| *v *= temperature);
        LogitsMatrix {
            values,
            temperature_applied: true,
        }
    }
}

/// Rows scaled to unit length in `f64`.
pub(crate) fn unit_rows<T: Scalar>(m: &Matrix<T>, what: &str) -> Result<Matrix<f64>> {
    let mut out = m.cast::<f64>();
    for r in 0..out.rows() {
        let n = norm(out.row(r));
        if !(n >= DEFAULT_NORM_EPS) {
            return Err(Error::DegenerateEmbedding {
                context: what.into(),
                row: r,
                eps: DEFAULT_NORM_EPS,
            });
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Cosine between every query and every class row.
pub fn cosine_logits<T: Scalar>(queries: &Matrix<T>, classes: &Matrix<T>) -> Result<LogitsMatrix> {
    if queries.cols() != classes.cols() {
        return Err(Error::shape(
            "cosine logits",
            format!("query dim == class dim ({})", classes.cols()),
            queries.cols(),
        ));
    }
    let q = unit_rows(queries, "queries")?;
    let c = unit_rows(classes, "classes")?;
    let mut values = Matrix::zeros(q.rows(), c.rows());
    let width = c.rows().max(1);
    values.data_mut().par_chunks_mut(width).enumerate().for_each(|(i, row)| {
        let qi = q.row(i);
        for (j, out) in row.iter_mut().enumerate() {
            *out = dot(qi, c.row(j));
        }
    });
    Ok(LogitsMatrix {
        values,
        temperature_applied: false,
    })
}

/// Zero-shot logits of `queries` against category embeddings. Inputs need
/// not be normalized.
pub fn zeroshot_logits<T: Scalar>(queries: &Matrix<T>, classes: &Matrix<T>) -> Result<LogitsMatrix> {
    cosine_logits(queries, classes)
}

/// Per-row argmax; ties go to the lowest class index.
pub fn top1(logits: &LogitsMatrix) -> Vec<usize> {
    logits
        .values
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Correct predictions out of `labels.len()`.
pub fn count_correct(preds: &[usize], labels: &[usize]) -> usize {
    preds.iter().zip(labels).filter(|(p, l)| p == l).count()
}
