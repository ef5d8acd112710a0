//! Dense row-major `f64` matrices and the handful of GEMM shapes the model
//! needs. Products go through `matrixmultiply`, single-threaded, so results
//! are bitwise reproducible.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Copies rows `start..start + n`.
    pub fn slice_rows(&self, start: usize, n: usize) -> Tensor {
        Tensor::from_vec(
            n,
            self.cols,
            self.data[start * self.cols..(start + n) * self.cols].to_vec(),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        }
        return;
    }
    // SAFETY: the caller guarantees `a` holds an m x k view and `b` a k x n
    // view under the given strides, and `c` holds m * n contiguous entries.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a · b`
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(
        a.rows, a.cols, b.cols, &a.data, a.cols, 1, &b.data, b.cols, 1, 0.0, &mut out.data,
    );
    out
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.rows);
    gemm(
        a.rows, a.cols, b.rows, &a.data, a.cols, 1, &b.data, 1, b.cols, 0.0, &mut out.data,
    );
    out
}

/// `out += aᵀ · b`
pub fn matmul_tn_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    assert_eq!(a.rows, b.rows, "matmul_tn shape mismatch");
    assert_eq!(out.shape(), (a.cols, b.cols), "matmul_tn output shape mismatch");
    gemm(
        a.cols, a.rows, b.cols, &a.data, 1, a.cols, &b.data, b.cols, 1, 1.0, &mut out.data,
    );
}

/// Adds the column sums of `x` into `out` (a `1 × cols` tensor).
pub fn col_sum_acc(x: &Tensor, out: &mut Tensor) {
    debug_assert_eq!(out.len(), x.cols);
    for r in 0..x.rows {
        for (o, v) in out.data.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        xs.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(xs)`
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.row(i)[k] * b.row(k)[j];
                }
                out.row_mut(i)[j] = s;
            }
        }
        out
    }

    fn transpose(t: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(t.cols(), t.rows());
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                out.row_mut(j)[i] = t.row(i)[j];
            }
        }
        out
    }

    fn sample(rows: usize, cols: usize, seed: f64) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i as f64 + seed) * 0.37).sin())
                .collect(),
        )
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let a = sample(5, 7, 0.3);
        let b = sample(7, 3, 1.1);
        let close = |x: &Tensor, y: &Tensor| {
            x.data()
                .iter()
                .zip(y.data())
                .all(|(p, q)| (p - q).abs() < 1e-12)
        };
        assert!(close(&matmul(&a, &b), &naive(&a, &b)));
        assert!(close(&matmul_nt(&a, &transpose(&b)), &naive(&a, &b)));
        let mut acc = Tensor::zeros(5, 3);
        matmul_tn_acc(&transpose(&a), &b, &mut acc);
        matmul_tn_acc(&transpose(&a), &b, &mut acc);
        let mut twice = naive(&a, &b);
        twice.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        assert!(close(&acc, &twice));
    }

    #[test]
    fn softmax_and_logsumexp() {
        let mut xs = [1000.0, 1000.0];
        softmax_in_place(&mut xs);
        assert_eq!(xs, [0.5, 0.5]);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
