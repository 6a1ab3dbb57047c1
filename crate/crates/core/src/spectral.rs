//! Structural encodings from a truncated SVD of the interaction matrix.
//!
//! The SVD is computed with a seeded randomized range finder (Gaussian
//! sketch, optional power iterations, QR re-orthonormalization) followed by
//! a small dense SVD of the projected matrix.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph_data::{InteractionGraph, Split};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; repeated coordinates are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, _) in &entries {
            if r >= rows || c >= cols {
                return Err(Error::invalid(format!(
                    "entry ({r}, {c}) outside {rows}x{cols} matrix"
                )));
            }
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Binary matrix of the graph's training interactions.
    pub fn from_graph(graph: &InteractionGraph, split: Split) -> Result<Self> {
        Self::from_triplets(
            graph.num_users,
            graph.num_items,
            graph.edges_in(split).map(|(u, i)| (u, i, 1.0)),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// `self * dense` for a `cols x k` dense matrix.
    pub fn mul_dense(&self, dense: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(dense.nrows(), self.cols);
        let k = dense.ncols();
        let mut out = DMatrix::zeros(self.rows, k);
        for r in 0..self.rows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                let (c, v) = (self.indices[p], self.values[p]);
                for j in 0..k {
                    out[(r, j)] += v * dense[(c, j)];
                }
            }
        }
        out
    }

    /// `self^T * dense` for a `rows x k` dense matrix.
    pub fn t_mul_dense(&self, dense: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(dense.nrows(), self.rows);
        let k = dense.ncols();
        let mut out = DMatrix::zeros(self.cols, k);
        for r in 0..self.rows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                let (c, v) = (self.indices[p], self.values[p]);
                for j in 0..k {
                    out[(c, j)] += v * dense[(r, j)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                out[[r, self.indices[p]]] += self.values[p];
            }
        }
        out
    }
}

/// Frozen per-node positional inputs `U sqrt(S)` and `V sqrt(S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralEncodings {
    pub user_enc: Array2<f64>,
    pub item_enc: Array2<f64>,
    pub singular_values: Array1<f64>,
}

impl StructuralEncodings {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// Zero encodings of the given rank, for runs that disable them.
    pub fn zeros(num_users: usize, num_items: usize, rank: usize) -> Self {
        Self {
            user_enc: Array2::zeros((num_users, rank)),
            item_enc: Array2::zeros((num_items, rank)),
            singular_values: Array1::zeros(rank),
        }
    }

    /// User rows followed by item rows, matching token order.
    pub fn token_matrix(&self) -> Array2<f64> {
        ndarray::concatenate(
            ndarray::Axis(0),
            &[self.user_enc.view(), self.item_enc.view()],
        )
        .expect("user and item encodings share a rank")
    }
}

/// Parameters of the randomized range finder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvdOptions {
    pub rank: usize,
    pub seed: u64,
    pub oversample: usize,
    pub power_iters: usize,
}

impl SvdOptions {
    pub fn new(rank: usize, seed: u64) -> Self {
        Self {
            rank,
            seed,
            oversample: 8,
            power_iters: 2,
        }
    }
}

fn orthonormal_basis(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Rank-`d` truncated SVD returned as structural encodings.
pub fn truncated_svd(r: &SparseMatrix, opts: SvdOptions) -> Result<StructuralEncodings> {
    let (rows, cols) = (r.rows(), r.cols());
    let d = opts.rank;
    if d == 0 {
        return Err(Error::invalid("SVD rank must be positive"));
    }
    if d > rows.min(cols) {
        return Err(Error::invalid(format!(
            "SVD rank {d} exceeds min({rows}, {cols})"
        )));
    }
    if r.values.iter().all(|v| *v == 0.0) {
        return Err(Error::invalid("interaction matrix has no nonzero entries"));
    }

    let width = (d + opts.oversample).min(rows.min(cols));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sketch = DMatrix::from_fn(cols, width, |_, _| StandardNormal.sample(&mut rng));

    let mut q = orthonormal_basis(r.mul_dense(&sketch));
    for _ in 0..opts.power_iters {
        let z = orthonormal_basis(r.t_mul_dense(&q));
        q = orthonormal_basis(r.mul_dense(&z));
    }

    // B = Q^T R, formed as (R^T Q)^T
    let b = r.t_mul_dense(&q).transpose();
    let svd = b.svd(true, true);
    let ub = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    order.truncate(d);

    let u_full = &q * &ub;
    let mut user_enc = Array2::zeros((rows, d));
    let mut item_enc = Array2::zeros((cols, d));
    let mut singular_values = Array1::zeros(d);
    for (k, &src) in order.iter().enumerate() {
        let sigma = sv[src].max(0.0);
        singular_values[k] = sigma;
        // flip so the largest-magnitude user entry is positive
        let mut pivot = 0;
        for i in 0..rows {
            if u_full[(i, src)].abs() > u_full[(pivot, src)].abs() {
                pivot = i;
            }
        }
        let sign = if u_full[(pivot, src)] < 0.0 {
            -1.0
        } else {
            1.0
        };
        let scale = sign * sigma.sqrt();
        for i in 0..rows {
            user_enc[[i, k]] = u_full[(i, src)] * scale;
        }
        for j in 0..cols {
            item_enc[[j, k]] = vt[(src, j)] * scale;
        }
    }

    Ok(StructuralEncodings {
        user_enc,
        item_enc,
        singular_values,
    })
}
