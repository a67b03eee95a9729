//! Sparse rows, row-major dense blocks and a randomized truncated SVD.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::synth_cohort::stream_rng;

/// Sparse row: `(column, value)` pairs sorted by column.
pub type SparseVec = Vec<(u32, f64)>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let mut out = Mat::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.data[i * m.ncols() + j] = m[(i, j)];
            }
        }
        out
    }
}

/// Compressed sparse rows together with the transposed layout.
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    rows: Vec<SparseVec>,
    cols: Vec<Vec<(u32, f64)>>,
}

impl Csr {
    pub fn new(rows: &[SparseVec], n_cols: usize) -> Self {
        let mut cols = vec![Vec::new(); n_cols];
        for (i, r) in rows.iter().enumerate() {
            for &(j, v) in r {
                cols[j as usize].push((i as u32, v));
            }
        }
        Self {
            n_rows: rows.len(),
            n_cols,
            rows: rows.to_vec(),
            cols,
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.iter().map(|(_, v)| v * v))
            .sum()
    }

    /// `A · B` for dense `B` (n_cols × k).
    fn mul_dense(&self, b: &Mat) -> Mat {
        let k = b.cols;
        let rows: Vec<Vec<f64>> = par::map(&self.rows, |r| {
            let mut out = vec![0.0; k];
            for &(j, v) in r {
                for (o, x) in out.iter_mut().zip(b.row(j as usize)) {
                    *o += v * x;
                }
            }
            out
        });
        Mat {
            rows: self.n_rows,
            cols: k,
            data: rows.concat(),
        }
    }

    /// `Aᵀ · B` for dense `B` (n_rows × k).
    fn tmul_dense(&self, b: &Mat) -> Mat {
        let k = b.cols;
        let cols: Vec<Vec<f64>> = par::map(&self.cols, |c| {
            let mut out = vec![0.0; k];
            for &(i, v) in c {
                for (o, x) in out.iter_mut().zip(b.row(i as usize)) {
                    *o += v * x;
                }
            }
            out
        });
        Mat {
            rows: self.n_cols,
            cols: k,
            data: cols.concat(),
        }
    }
}

fn orthonormalize(m: &Mat) -> Mat {
    let q = m.to_dmatrix().qr().q();
    Mat::from_dmatrix(&q)
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
fn sorted_eigen(g: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (vals, vecs)
}

/// Truncated SVD right factor: projects rows of the fitted matrix onto the
/// top right-singular subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdProjector {
    pub version: u32,
    pub n_features: usize,
    pub rank: usize,
    /// `n_features × rank`, row-major, orthonormal columns.
    pub projection: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub power_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdOptions {
    pub oversample: usize,
    /// Minimum number of power iterations.
    pub power_iterations: usize,
    /// Further iterations run until the captured energy (sum of the top-rank
    /// Ritz values) changes by less than this relative amount.
    pub energy_tol: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            oversample: 10,
            power_iterations: 2,
            energy_tol: 1e-10,
            max_iterations: 300,
            seed: 0,
        }
    }
}

/// Randomized range finder with subspace iteration over the row space.
///
/// The requested rank is clamped to `min(rank, N, M)`.
pub fn randomized_svd(a: &Csr, rank: usize, opts: SvdOptions) -> Result<SvdProjector> {
    let (n, m) = (a.n_rows, a.n_cols);
    if n < 2 || m < 1 {
        return Err(Error::Degenerate(format!(
            "svd needs N >= 2 and M >= 1, got {n}x{m}"
        )));
    }
    let r = rank.min(n).min(m);
    if r < rank {
        log::warn!("svd rank {rank} exceeds min(N, M) = {}; clamping", n.min(m));
    }
    let k = (r + opts.oversample).min(n).min(m);

    let mut rng = stream_rng(opts.seed, 0x5bd1);
    let mut omega = Mat::zeros(m, k);
    for x in omega.data.iter_mut() {
        *x = StandardNormal.sample(&mut rng);
    }
    let mut q = orthonormalize(&omega);
    let mut prev_energy = f64::NAN;
    let mut iters = 0;
    loop {
        let y = a.mul_dense(&q);
        let z = a.tmul_dense(&y);
        // Ritz matrix Qᵀ AᵀA Q
        let g = q.to_dmatrix().transpose() * z.to_dmatrix();
        let g = (&g + g.transpose()) * 0.5;
        let (vals, _) = sorted_eigen(g);
        let energy: f64 = vals.iter().take(r).map(|v| v.max(0.0)).sum();
        q = orthonormalize(&z);
        iters += 1;
        let converged = prev_energy.is_finite()
            && (energy - prev_energy).abs() <= opts.energy_tol * energy.max(f64::MIN_POSITIVE);
        prev_energy = energy;
        if iters >= opts.power_iterations && (converged || iters >= opts.max_iterations) {
            break;
        }
    }

    let b = a.mul_dense(&q);
    let bd = b.to_dmatrix();
    let g = bd.transpose() * &bd;
    let g = (&g + g.transpose()) * 0.5;
    let (vals, w) = sorted_eigen(g);
    let v = q.to_dmatrix() * w.columns(0, r);
    let projection = Mat::from_dmatrix(&v).data;
    let singular_values = vals.iter().take(r).map(|l| l.max(0.0).sqrt()).collect();
    Ok(SvdProjector {
        version: 1,
        n_features: m,
        rank: r,
        projection,
        singular_values,
        power_iterations: iters,
    })
}

impl SvdProjector {
    pub fn project(&self, x: &SparseVec) -> Vec<f64> {
        let mut z = vec![0.0; self.rank];
        for &(j, v) in x {
            let row = &self.projection[j as usize * self.rank..(j as usize + 1) * self.rank];
            for (o, p) in z.iter_mut().zip(row) {
                *o += v * p;
            }
        }
        z
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n_features)
            .map(|j| self.projection[j * self.rank + c])
            .collect()
    }

    /// Squared Frobenius residual `‖A − A V Vᵀ‖²` of a matrix against this
    /// projector.
    pub fn residual_sq(&self, a: &Csr) -> f64 {
        let captured: f64 = a
            .rows
            .iter()
            .map(|r| self.project(r).iter().map(|z| z * z).sum::<f64>())
            .sum();
        (a.frobenius_sq() - captured).max(0.0)
    }
}
