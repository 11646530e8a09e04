//! Sparse rows and centered factor matrices.
//!
//! Design rows in worker-firm models have two or three nonzeros, so the whole
//! crate runs on a minimal sorted-coordinate row type plus a "centered factor"
//! that represents matrices of the form scale * (S - d c') without ever
//! materializing the dense subtraction.

use nalgebra::DVector;

/// One sparse row: column indices (strictly increasing) and values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    idx: Vec<u32>,
    val: Vec<f64>,
}

impl SparseRow {
    pub fn new(mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.sort_by_key(|p| p.0);
        let mut idx = Vec::with_capacity(pairs.len());
        let mut val: Vec<f64> = Vec::with_capacity(pairs.len());
        for (j, v) in pairs {
            if v == 0.0 {
                continue;
            }
            if let Some(last) = idx.last() {
                if *last == j {
                    *val.last_mut().unwrap() += v;
                    continue;
                }
            }
            idx.push(j);
            val.push(v);
        }
        SparseRow { idx, val }
    }

    pub fn empty() -> Self {
        SparseRow { idx: Vec::new(), val: Vec::new() }
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.idx.iter().copied().zip(self.val.iter().copied())
    }

    pub fn indices(&self) -> &[u32] {
        &self.idx
    }

    pub fn values(&self) -> &[f64] {
        &self.val
    }

    /// Inner product with a dense vector.
    #[inline]
    pub fn dot(&self, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (j, x) in self.iter() {
            acc += x * v[j as usize];
        }
        acc
    }

    /// out += scale * row
    #[inline]
    pub fn add_scaled_into(&self, scale: f64, out: &mut [f64]) {
        for (j, x) in self.iter() {
            out[j as usize] += scale * x;
        }
    }

    /// Dense copy of the row in dimension k.
    pub fn to_dense(&self, k: usize) -> DVector<f64> {
        let mut v = DVector::zeros(k);
        for (j, x) in self.iter() {
            v[j as usize] = x;
        }
        v
    }
}

/// Matrix of the form  scale * (S - d c')  where S is sparse (one `SparseRow`
/// per row), c is a dense k-vector and d is a per-row multiplier. Rows read
///   row_m = scale * (s_m - d_m * c).
/// With d = 0 this is a plain sparse matrix; with d = 1 and c the column mean
/// it is the centered version used by variance-component quadratic forms.
#[derive(Debug, Clone)]
pub struct CenteredFactor {
    pub rows: Vec<SparseRow>,
    pub center: DVector<f64>,
    pub center_mult: Vec<f64>,
    pub scale: f64,
}

impl CenteredFactor {
    pub fn plain(rows: Vec<SparseRow>, k: usize, scale: f64) -> Self {
        let m = rows.len();
        CenteredFactor { rows, center: DVector::zeros(k), center_mult: vec![0.0; m], scale }
    }

    /// Center every row by the (multiplier-weighted) column mean of S.
    pub fn centered(rows: Vec<SparseRow>, k: usize, scale: f64) -> Self {
        let m = rows.len();
        let mut c = DVector::zeros(k);
        for r in &rows {
            for (j, x) in r.iter() {
                c[j as usize] += x;
            }
        }
        c /= m as f64;
        CenteredFactor { rows, center: c, center_mult: vec![1.0; m], scale }
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn k(&self) -> usize {
        self.center.len()
    }

    /// F v  (length m).
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let cv = self.center.dot(v);
        let vs = v.as_slice();
        let mut out = DVector::zeros(self.m());
        for (m, r) in self.rows.iter().enumerate() {
            out[m] = self.scale * (r.dot(vs) - self.center_mult[m] * cv);
        }
        out
    }

    /// F' u  (length k).
    pub fn apply_t(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = vec![0.0; self.k()];
        let mut du = 0.0;
        for (m, r) in self.rows.iter().enumerate() {
            r.add_scaled_into(self.scale * u[m], &mut out);
            du += self.center_mult[m] * u[m];
        }
        let mut out = DVector::from_vec(out);
        out.axpy(-self.scale * du, &self.center, 1.0);
        out
    }

    /// Row m as a dense vector.
    pub fn row_dense(&self, m: usize) -> DVector<f64> {
        let mut v = self.rows[m].to_dense(self.k());
        v.axpy(-self.center_mult[m], &self.center, 1.0);
        v * self.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_sparse_row_sorts_merges_and_drops_zeros() {
        let r = SparseRow::new(vec![(3, 1.0), (1, 2.0), (3, 0.5), (2, 0.0)]);
        assert_eq!(r.indices(), &[1, 3]);
        assert_eq!(r.values(), &[2.0, 1.5]);
    }

    #[test]
    fn test_sparse_row_dot_and_scatter() {
        let r = SparseRow::new(vec![(0, 1.0), (2, -1.0)]);
        let v = [3.0, 9.0, 5.0];
        assert_eq!(r.dot(&v), -2.0);
        let mut out = [0.0; 3];
        r.add_scaled_into(2.0, &mut out);
        assert_eq!(out, [2.0, 0.0, -2.0]);
    }

    #[test]
    fn test_centered_factor_apply_matches_dense() {
        // rows of S: e0, e1, e0+e2 ; centered, scale 1/sqrt(3)
        let rows = vec![
            SparseRow::new(vec![(0, 1.0)]),
            SparseRow::new(vec![(1, 1.0)]),
            SparseRow::new(vec![(0, 1.0), (2, 1.0)]),
        ];
        let f = CenteredFactor::centered(rows, 3, 1.0 / 3f64.sqrt());
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let fv = f.apply(&v);
        // dense reconstruction row by row
        for m in 0..3 {
            let rd = f.row_dense(m);
            assert!((fv[m] - rd.dot(&v)).abs() < 1e-14);
        }
        // transpose consistency: <F v, u> = <v, F' u>
        let u = DVector::from_vec(vec![0.3, 0.7, -1.1]);
        let lhs = f.apply(&v).dot(&u);
        let rhs = v.dot(&f.apply_t(&u));
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn test_centered_factor_rows_sum_to_zero() {
        let rows = vec![
            SparseRow::new(vec![(0, 1.0)]),
            SparseRow::new(vec![(1, 1.0)]),
            SparseRow::new(vec![(1, 1.0)]),
        ];
        let f = CenteredFactor::centered(rows, 2, 1.0);
        let mut colsum = DVector::zeros(2);
        for m in 0..3 {
            colsum += f.row_dense(m);
        }
        assert!(colsum.amax() < 1e-14);
    }
}
