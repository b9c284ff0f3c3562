use rayon::prelude::*;

use super::{MetricsError, MetricsResult};
use crate::autograd::Tensor;

/// Which signal a batch carries. Only used for labeling errors and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    Input,
    Content,
    Style,
}

impl std::fmt::Display for SignalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SignalKind::Input => "x",
            SignalKind::Content => "c",
            SignalKind::Style => "s",
        })
    }
}

/// N samples of one signal, each flattened to a fixed dimension. At least
/// two samples, uniform dimension, finite values (inherited from [`Tensor`]).
#[derive(Debug, Clone)]
pub struct SignalBatch {
    pub kind: SignalKind,
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl SignalBatch {
    pub fn from_rows(kind: SignalKind, rows: &[Vec<f64>]) -> MetricsResult<Self> {
        if rows.len() < 2 {
            return Err(MetricsError::TooFewSamples { need: 2, got: rows.len() });
        }
        let dim = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (index, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(MetricsError::DimMismatch { index, expected: dim, got: row.len() });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { kind, n: rows.len(), dim, data })
    }

    /// Flattens each tensor; shapes may differ as long as element counts
    /// match, since distance only sees the flattened vector.
    pub fn from_tensors(kind: SignalKind, tensors: &[Tensor]) -> MetricsResult<Self> {
        if tensors.len() < 2 {
            return Err(MetricsError::TooFewSamples { need: 2, got: tensors.len() });
        }
        let dim = tensors[0].numel();
        let mut data = Vec::with_capacity(tensors.len() * dim);
        for (index, t) in tensors.iter().enumerate() {
            if t.numel() != dim {
                return Err(MetricsError::DimMismatch { index, expected: dim, got: t.numel() });
            }
            data.extend_from_slice(t.data());
        }
        Ok(Self { kind, n: tensors.len(), dim, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Symmetric N x N matrix of Euclidean distances, or its double-centered
/// form once [`double_center`] has run.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    vals: Vec<f64>,
    centered: bool,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.vals[i * self.n + j]
    }
}

/// Euclidean distances between all sample pairs. Rows are filled in
/// parallel; each entry depends only on its own pair, so the result does not
/// depend on thread count.
pub fn pairwise_distances(batch: &SignalBatch) -> DistanceMatrix {
    let n = batch.n;
    let mut vals = vec![0.0; n * n];
    vals.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a = batch.row(i);
        for j in (i + 1)..n {
            let b = batch.row(j);
            let d2: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
            row[j] = d2.sqrt();
        }
    });
    // mirror the strict upper triangle; diagonal stays zero
    for i in 0..n {
        for j in (i + 1)..n {
            vals[j * n + i] = vals[i * n + j];
        }
    }
    DistanceMatrix { n, vals, centered: false }
}

/// Subtracts row means, column means, and adds back the grand mean:
/// `A[i,j] = D[i,j] - rm[i] - cm[j] + gm`. Input must be uncentered.
pub fn double_center(d: &DistanceMatrix) -> MetricsResult<DistanceMatrix> {
    if d.centered {
        return Err(MetricsError::AlreadyCentered);
    }
    let n = d.n;
    let nf = n as f64;
    let mut row_means = vec![0.0; n];
    for i in 0..n {
        row_means[i] = d.vals[i * n..(i + 1) * n].iter().sum::<f64>() / nf;
    }
    // the matrix is symmetric, so column means equal row means
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut vals = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            vals[i * n + j] = d.vals[i * n + j] - row_means[i] - row_means[j] + grand;
        }
    }
    Ok(DistanceMatrix { n, vals, centered: true })
}

/// `sqrt(max(0, mean(A o B)))` over two double-centered matrices of equal
/// size. The max guard absorbs the tiny negative means float error can
/// produce.
pub fn distance_covariance(a: &DistanceMatrix, b: &DistanceMatrix) -> MetricsResult<f64> {
    if !a.centered || !b.centered {
        return Err(MetricsError::NotCentered);
    }
    if a.n != b.n {
        return Err(MetricsError::SizeMismatch { a: a.n, b: b.n });
    }
    let mean = a
        .vals
        .iter()
        .zip(&b.vals)
        .map(|(&x, &y)| x * y)
        .sum::<f64>()
        / (a.n * a.n) as f64;
    Ok(mean.max(0.0).sqrt())
}

/// Distance correlation in [0,1]. Zero when either marginal distance
/// covariance vanishes (constant signals), never NaN.
pub fn distance_correlation(u: &SignalBatch, v: &SignalBatch) -> MetricsResult<f64> {
    if u.n != v.n {
        return Err(MetricsError::SizeMismatch { a: u.n, b: v.n });
    }
    let a = double_center(&pairwise_distances(u))?;
    let b = double_center(&pairwise_distances(v))?;
    let duv = distance_covariance(&a, &b)?;
    let duu = distance_covariance(&a, &a)?;
    let dvv = distance_covariance(&b, &b)?;
    if duu == 0.0 || dvv == 0.0 {
        return Ok(0.0);
    }
    Ok((duv / (duu * dvv).sqrt()).clamp(0.0, 1.0))
}
