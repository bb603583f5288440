//! Dense row-major matrices of `f64`.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape mismatch");
        Mat { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// `out += a · b` for `a: n×k`, `b: k×m`.
pub fn matmul_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    debug_assert_eq!(a.cols, b.rows);
    let m = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (p, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    matmul_acc(a, b, &mut out);
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a · bᵀ` for `a: n×k`, `b: m×k`.
pub fn matmul_t_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    debug_assert_eq!(a.cols, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] += dot(arow, b.row(j));
        }
    }
}

/// `out += aᵀ · b` for `a: n×k`, `b: n×m`.
pub fn t_matmul_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    debug_assert_eq!(a.rows, b.rows);
    let m = b.cols;
    for r in 0..a.rows {
        let brow = b.row(r);
        for (p, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += v · M` for a row vector `v` of length `M.rows`.
pub fn vecmat_acc(v: &[f64], m: &Mat, out: &mut [f64]) {
    for (p, &x) in v.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(m.row(p)) {
            *o += x * w;
        }
    }
}

/// Numerically stable log-sum-exp over the entries where `allowed` is set.
pub fn masked_log_sum_exp(logits: &[f64], allowed: &[bool]) -> f64 {
    let max = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&x, _)| (x - max).exp())
        .sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree() {
        let a = Mat::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Mat::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        assert_eq!(matmul(&a, &b).data, vec![58., 64., 139., 154.]);
        let bt = Mat::from_vec(2, 3, vec![7., 9., 11., 8., 10., 12.]);
        let mut out = Mat::zeros(2, 2);
        matmul_t_acc(&a, &bt, &mut out);
        assert_eq!(out.data, vec![58., 64., 139., 154.]);
        let mut out = Mat::zeros(3, 3);
        t_matmul_acc(&a, &a, &mut out);
        assert_eq!(out.data[0], 17.0);
        let mut v = vec![0.0; 2];
        vecmat_acc(&[1., 2., 3.], &b, &mut v);
        assert_eq!(v, vec![58., 64.]);
    }

    #[test]
    fn lse_ignores_masked() {
        let l = [0.0, 1000.0, 0.0];
        let lse = masked_log_sum_exp(&l, &[true, false, true]);
        assert!((lse - 2f64.ln()).abs() < 1e-12);
    }
}
