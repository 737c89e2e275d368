//! Dense 2-D f64 tensor.
//!
//! Everything the differentiable graph touches is a `rows x cols` matrix in
//! row-major order; scalars are 1x1. Keeping a single concrete layout makes
//! gradients and serialization trivially bit-reproducible.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// rows*cols must equal data.len() and both dims must be nonzero.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized tensor");
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized tensor");
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value] }
    }

    /// 1 x n row vector.
    pub fn row(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::from_vec(1, n, values)
    }

    /// n x 1 column vector.
    pub fn col(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::from_vec(n, 1, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction forbids zero-sized tensors
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// The single element of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.rows == 1 && self.cols == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape { op: "item", lhs: vec![self.rows, self.cols], rhs: vec![1, 1] })
        }
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// out += a * b, shapes (m x k)(k x n) -> (m x n). The inner loop is ordered
/// i-k-j so both `b` and `out` stream row-major.
pub fn matmul_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out += a^T * b, shapes (k x m)^T (k x n) -> (m x n), without materializing
/// the transpose.
pub fn matmul_at_b_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.rows, a.cols);
    debug_assert_eq!(out.cols, b.cols);
    let (k, m, n) = (a.rows, a.cols, b.cols);
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

/// out += a * b^T, shapes (m x k)(n x k)^T -> (m x n).
pub fn matmul_a_bt_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.rows);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out.data[i * n + j] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_len() {
        assert!(Tensor::from_vec(2, 3, vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(0, 3, vec![]).is_err());
    }

    #[test]
    fn matmul_matches_hand_product() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut out = Tensor::zeros(2, 2);
        matmul_acc(&mut out, &a, &b);
        assert_eq!(out.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::from_vec(3, 2, vec![1.0, -2.0, 0.5, 4.0, -1.0, 2.5]).unwrap();
        let b = Tensor::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let mut viat = Tensor::zeros(2, 4);
        matmul_at_b_acc(&mut viat, &a, &b);
        let mut explicit = Tensor::zeros(2, 4);
        matmul_acc(&mut explicit, &a.transpose(), &b);
        assert_eq!(viat, explicit);

        let c = Tensor::from_vec(4, 2, (0..8).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut viabt = Tensor::zeros(3, 4);
        matmul_a_bt_acc(&mut viabt, &a, &c);
        let mut explicit2 = Tensor::zeros(3, 4);
        matmul_acc(&mut explicit2, &a, &c.transpose());
        assert_eq!(viabt, explicit2);
    }

    #[test]
    fn item_requires_scalar() {
        assert_eq!(Tensor::scalar(3.5).item().unwrap(), 3.5);
        assert!(Tensor::zeros(2, 1).item().is_err());
    }
}
