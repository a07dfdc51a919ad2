use nalgebra::DMatrix;

use crate::ensemble::{Ensemble, TransformMatrix};
use crate::error::{Error, Result};
use crate::scalar::{LpValue, Real};

/// Costs of moving mass from row `i` to column `j`.
pub trait TransportCost<V> {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn cost(&self, i: usize, j: usize) -> V;

    /// Optional row and column orderings under which a north-west corner
    /// start is close to optimal.
    fn ordering_hint(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        None
    }
}

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<V> {
    rows: usize,
    cols: usize,
    data: Vec<V>,
}

impl<V: Clone> CostMatrix<V> {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> V) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<V>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> &V {
        &self.data[i * self.cols + j]
    }

    /// Same costs under a simultaneous row and column relabelling.
    pub fn permuted(&self, row_perm: &[usize], col_perm: &[usize]) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| {
            self.get(row_perm[i], col_perm[j]).clone()
        })
    }
}

impl<T: Real> CostMatrix<T> {
    /// `c_ij = ‖x_i − y_j‖²` for columns of `sources` and `targets`.
    pub fn squared_euclidean(sources: &DMatrix<T>, targets: &DMatrix<T>) -> Self {
        let cost = SquaredEuclidean::new(sources, targets);
        Self::from_fn(sources.ncols(), targets.ncols(), |i, j| cost.cost(i, j))
    }

    /// `c_ij = ‖z_i − z_j‖²` between all members of one ensemble.
    pub fn from_ensemble(ens: &Ensemble<T>) -> Self {
        Self::squared_euclidean(ens.as_matrix(), ens.as_matrix())
    }
}

impl<V: Clone> TransportCost<V> for CostMatrix<V> {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn cost(&self, i: usize, j: usize) -> V {
        self.get(i, j).clone()
    }
}

/// Squared Euclidean costs evaluated on demand, for point clouds too large
/// for a dense cost matrix.
#[derive(Debug, Clone, Copy)]
pub struct SquaredEuclidean<'a, T: Real> {
    sources: &'a DMatrix<T>,
    targets: &'a DMatrix<T>,
}

impl<'a, T: Real> SquaredEuclidean<'a, T> {
    /// Points are the columns of `sources` and `targets`.
    pub fn new(sources: &'a DMatrix<T>, targets: &'a DMatrix<T>) -> Self {
        assert_eq!(sources.nrows(), targets.nrows(), "point dimensions differ");
        Self { sources, targets }
    }
}

impl<T: Real> TransportCost<T> for SquaredEuclidean<'_, T> {
    fn rows(&self) -> usize {
        self.sources.ncols()
    }

    fn cols(&self) -> usize {
        self.targets.ncols()
    }

    #[inline]
    fn cost(&self, i: usize, j: usize) -> T {
        let d = self.sources.nrows();
        let x = &self.sources.as_slice()[i * d..(i + 1) * d];
        let y = &self.targets.as_slice()[j * d..(j + 1) * d];
        let mut c = T::zero();
        for k in 0..d {
            let e = x[k] - y[k];
            c += e * e;
        }
        c
    }

    fn ordering_hint(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        let d = self.sources.nrows();
        if d == 0 {
            return None;
        }
        // Joint bounding box so both clouds share one curve.
        let mut lo = vec![T::lit(f64::INFINITY); d];
        let mut hi = vec![T::lit(f64::NEG_INFINITY); d];
        for pts in [self.sources, self.targets] {
            for col in pts.column_iter() {
                for k in 0..d {
                    lo[k] = lo[k].min(col[k]);
                    hi[k] = hi[k].max(col[k]);
                }
            }
        }
        let order = |pts: &DMatrix<T>| {
            let keys: Vec<u64> = pts
                .column_iter()
                .map(|col| {
                    curve_key(
                        &(0..d)
                            .map(|k| unit(col[k], lo[k], hi[k]))
                            .collect::<Vec<_>>(),
                    )
                })
                .collect();
            let mut idx: Vec<usize> = (0..pts.ncols()).collect();
            idx.sort_by_key(|&i| keys[i]);
            idx
        };
        Some((order(self.sources), order(self.targets)))
    }
}

fn unit<T: Real>(x: T, lo: T, hi: T) -> f64 {
    let span = (hi - lo).as_f64();
    if span > 0.0 {
        ((x - lo).as_f64() / span).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Position along a space-filling curve for a point of `[0, 1]^d`: the
/// Hilbert curve in the plane, a Morton curve in higher dimensions. A single
/// coordinate is its own key.
fn curve_key(x: &[f64]) -> u64 {
    match x.len() {
        1 => (x[0] * u32::MAX as f64) as u64,
        2 => {
            let n: u64 = 1 << 31;
            let q = |v: f64| ((v * (n - 1) as f64) as u64).min(n - 1);
            hilbert_index(n, q(x[0]), q(x[1]))
        }
        d => {
            let bits = (63 / d).min(21) as u32;
            let n = (1u64 << bits) - 1;
            let q: Vec<u64> = x.iter().map(|&v| ((v * n as f64) as u64).min(n)).collect();
            let mut key = 0u64;
            for b in (0..bits).rev() {
                for v in &q {
                    key = (key << 1) | ((v >> b) & 1);
                }
            }
            key
        }
    }
}

fn hilbert_index(n: u64, mut x: u64, mut y: u64) -> u64 {
    let mut d = 0u64;
    let mut s = n / 2;
    while s > 0 {
        let rx = u64::from(x & s > 0);
        let ry = u64::from(y & s > 0);
        d += s * s * ((3 * rx) ^ ry);
        if ry == 0 {
            if rx == 1 {
                x = n - 1 - x;
                y = n - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        s /= 2;
    }
    d
}

/// A nonnegative transference plan with prescribed row and column sums,
/// stored sparsely by column.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix<V> {
    rows: usize,
    cols: usize,
    col_start: Vec<usize>,
    row_index: Vec<usize>,
    values: Vec<V>,
    row_marginal: Vec<V>,
    col_marginal: Vec<V>,
}

impl<V: LpValue> CouplingMatrix<V> {
    /// Builds a coupling from `(row, col, mass)` triplets; duplicate cells are
    /// summed, zero cells dropped.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut entries: Vec<(usize, usize, V)>,
        row_marginal: Vec<V>,
        col_marginal: Vec<V>,
    ) -> Result<Self> {
        if row_marginal.len() != rows || col_marginal.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: rows,
                found: row_marginal.len(),
            });
        }
        entries.sort_by_key(|e| (e.1, e.0));
        let mut col_start = vec![0usize; cols + 1];
        let mut row_index = Vec::with_capacity(entries.len());
        let mut values: Vec<V> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in entries {
            if i >= rows || j >= cols {
                return Err(Error::InvalidArgument(format!(
                    "coupling entry ({i}, {j}) outside {rows}x{cols}"
                )));
            }
            if v < V::zero() {
                return Err(Error::InvalidArgument(
                    "coupling entries must be nonnegative".into(),
                ));
            }
            if last == Some((i, j)) {
                let tail = values.last_mut().expect("previous entry exists");
                *tail = tail.clone() + v;
                continue;
            }
            if v.is_zero() {
                continue;
            }
            row_index.push(i);
            values.push(v);
            col_start[j + 1] += 1;
            last = Some((i, j));
        }
        for j in 0..cols {
            col_start[j + 1] += col_start[j];
        }
        Ok(Self {
            rows,
            cols,
            col_start,
            row_index,
            values,
            row_marginal,
            col_marginal,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_marginal(&self) -> &[V] {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &[V] {
        &self.col_marginal
    }

    /// Number of stored (strictly positive) cells.
    pub fn support_size(&self) -> usize {
        self.values.len()
    }

    /// Positive cells of column `j` as `(row, mass)`.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, &V)> + '_ {
        let range = self.col_start[j]..self.col_start[j + 1];
        self.row_index[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter())
    }

    /// All positive cells as `(row, col, mass)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, &V)> + '_ {
        (0..self.cols).flat_map(move |j| self.column(j).map(move |(i, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> V {
        let range = self.col_start[j]..self.col_start[j + 1];
        match self.row_index[range.clone()].binary_search(&i) {
            Ok(k) => self.values[range.start + k].clone(),
            Err(_) => V::zero(),
        }
    }

    pub fn row_sums(&self) -> Vec<V> {
        let mut sums = vec![V::zero(); self.rows];
        for (i, _, v) in self.entries() {
            sums[i] = sums[i].clone() + v.clone();
        }
        sums
    }

    pub fn col_sums(&self) -> Vec<V> {
        (0..self.cols)
            .map(|j| {
                self.column(j)
                    .fold(V::zero(), |acc, (_, v)| acc + v.clone())
            })
            .collect()
    }

    /// Largest deviation of row and column sums from the prescribed marginals.
    pub fn marginal_defect(&self) -> V {
        let mut worst = V::zero();
        let rows = self.row_sums();
        let cols = self.col_sums();
        for (s, m) in rows
            .iter()
            .zip(&self.row_marginal)
            .chain(cols.iter().zip(&self.col_marginal))
        {
            let d = (s.clone() - m.clone()).abs();
            if d > worst {
                worst = d;
            }
        }
        worst
    }

    /// `Σ_ij t_ij c_ij`.
    pub fn objective<C: TransportCost<V>>(&self, cost: &C) -> V {
        self.entries().fold(V::zero(), |acc, (i, j, v)| {
            acc + v.clone() * cost.cost(i, j)
        })
    }
}

impl<T: Real> CouplingMatrix<T> {
    pub fn from_dense(t: &DMatrix<T>, row_marginal: Vec<T>, col_marginal: Vec<T>) -> Result<Self> {
        let entries = (0..t.ncols())
            .flat_map(|j| (0..t.nrows()).map(move |i| (i, j)))
            .map(|(i, j)| (i, j, t[(i, j)]))
            .collect();
        Self::from_triplets(t.nrows(), t.ncols(), entries, row_marginal, col_marginal)
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut t = DMatrix::zeros(self.rows, self.cols);
        for (i, j, v) in self.entries() {
            t[(i, j)] = *v;
        }
        t
    }

    /// Sparse `z_j^a = M Σ_i z_i t_ij` without forming the dense transform.
    pub fn transform_columns(&self, points: &DMatrix<T>) -> Result<DMatrix<T>> {
        if points.ncols() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                found: points.ncols(),
            });
        }
        let scale = T::lit(self.cols as f64);
        let mut out = DMatrix::zeros(points.nrows(), self.cols);
        for j in 0..self.cols {
            let mut col = out.column_mut(j);
            for (i, v) in self.column(j) {
                col.axpy(*v * scale, &points.column(i), T::one());
            }
        }
        Ok(out)
    }
}

/// `S = M T` for a coupling whose column marginal is uniform `1/M`.
pub fn coupling_to_transform<T: Real>(t: &CouplingMatrix<T>) -> Result<TransformMatrix<T>> {
    let m = t.cols();
    if t.rows() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: t.rows(),
        });
    }
    let uniform = T::one() / T::lit(m as f64);
    let tol = T::lit(1e-9);
    if t.col_marginal().iter().any(|&c| (c - uniform).abs() > tol) {
        return Err(Error::InvalidMarginal(
            "column marginal must be uniform 1/M".into(),
        ));
    }
    let s = t.to_dense() * T::lit(m as f64);
    Ok(TransformMatrix::from_matrix_unchecked(s))
}
