use nalgebra::DMatrix;

/// Compressed sparse rows, enough for the products the interior point
/// iteration needs.
#[derive(Debug, Clone, Default)]
pub(crate) struct Csr {
    pub nrows: usize,
    #[allow(dead_code)]
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl Csr {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let (nrows, ncols) = m.shape();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col = Vec::new();
        let mut val = Vec::new();
        row_ptr.push(0);
        for i in 0..nrows {
            for j in 0..ncols {
                let v = m[(i, j)];
                if v != 0.0 {
                    col.push(j);
                    val.push(v);
                }
            }
            row_ptr.push(col.len());
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col,
            val,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col[a..b].iter().copied().zip(self.val[a..b].iter().copied())
    }

    pub fn row_mut(&mut self, i: usize) -> (&[usize], &mut [f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col[a..b], &mut self.val[a..b])
    }

    /// `out = self · x`
    pub fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.nrows) {
            *o = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// `out += selfᵀ · y`
    pub fn mul_t_add(&self, y: &[f64], out: &mut [f64]) {
        for (i, &yi) in y.iter().enumerate().take(self.nrows) {
            if yi != 0.0 {
                for (j, v) in self.row(i) {
                    out[j] += v * yi;
                }
            }
        }
    }
}
