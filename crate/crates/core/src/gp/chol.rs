//! Dense lower-triangular Cholesky in `f64`, stored packed row-major
//! (row i holds entries 0..=i). Sized for the small kernel matrices used by
//! the sequential conditionals, so no external linear algebra is pulled in.

/// Packed lower-triangular factor L with K = L L^T.
#[derive(Debug, Clone)]
pub struct LowerTri {
    n: usize,
    data: Vec<f64>,
}

impl LowerTri {
    pub fn empty() -> Self {
        LowerTri { n: 0, data: Vec::new() }
    }

    /// Factor a dense symmetric matrix given row-major. Returns the 0-based
    /// pivot index on breakdown.
    pub fn factor(a: &[f64], n: usize) -> Result<Self, usize> {
        assert_eq!(a.len(), n * n, "matrix size mismatch");
        let mut l = LowerTri { n: 0, data: Vec::with_capacity(n * (n + 1) / 2) };
        for i in 0..n {
            let row: Vec<f64> = (0..=i).map(|j| a[i * n + j]).collect();
            l.append_row(&row).map_err(|_| i)?;
        }
        Ok(l)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.data[start..start + i + 1]
    }

    /// Grow the factor by one row given the new row of K
    /// `[K[n][0], .., K[n][n]]`: solve L w = k for the off-diagonal part and
    /// set the new pivot to sqrt(k_nn - w.w). Errors when the pivot is not
    /// strictly positive.
    pub fn append_row(&mut self, krow: &[f64]) -> Result<(), ()> {
        let n = self.n;
        assert_eq!(krow.len(), n + 1, "kernel row length mismatch");
        let mut w = vec![0.0f64; n];
        for i in 0..n {
            let li = self.row(i);
            let mut acc = krow[i];
            for j in 0..i {
                acc -= li[j] * w[j];
            }
            w[i] = acc / li[i];
        }
        let d2 = krow[n] - w.iter().map(|x| x * x).sum::<f64>();
        if !(d2 > 0.0) || !d2.is_finite() {
            return Err(());
        }
        self.data.extend_from_slice(&w);
        self.data.push(d2.sqrt());
        self.n += 1;
        Ok(())
    }

    /// Solve L y = b in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n, "rhs length mismatch");
        for i in 0..self.n {
            let li = self.row(i);
            let mut acc = b[i];
            for j in 0..i {
                acc -= li[j] * b[j];
            }
            b[i] = acc / li[i];
        }
    }

    /// Solve L^T y = b in place.
    pub fn solve_lower_transpose(&self, b: &mut [f64]) {
        for i in (0..self.n).rev() {
            let mut acc = b[i];
            for j in i + 1..self.n {
                acc -= self.row(j)[i] * b[j];
            }
            b[i] = acc / self.row(i)[i];
        }
    }

    /// Solve K y = b with K = L L^T.
    pub fn solve(&self, b: &mut [f64]) {
        self.solve_lower(b);
        self.solve_lower_transpose(b);
    }

    /// log det K = 2 sum_i log L_ii.
    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| self.row(i)[i].ln()).sum::<f64>() * 2.0
    }

    /// Diagonal of K^{-1}, via one solve per basis vector.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0f64; n];
        let mut e = vec![0.0f64; n];
        for i in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[i] = 1.0;
            self.solve(&mut e);
            out[i] = e[i];
        }
        out
    }

    /// Reconstruct K = L L^T, for diagnostics and tests.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.n;
        let mut k = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut acc = 0.0;
                for l in 0..=j {
                    acc += self.row(i)[l] * self.row(j)[l];
                }
                k[i * n + j] = acc;
                k[j * n + i] = acc;
            }
        }
        k
    }
}
