//! Dense row-major tensor. The only numeric currency in the crate.
//!
//! Shape mismatches panic with a description of both operands; they are
//! bugs in the caller, not recoverable conditions.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(
            len,
            data.len(),
            "shape {shape:?} implies {len} elements, got {}",
            data.len()
        );
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Matrix from row slices; all rows must share a length.
    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        assert!(!rows.is_empty(), "from_rows: no rows");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::from_vec(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows: tensor is rank {}", self.shape.len());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols: tensor is rank {}", self.shape.len());
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let cols = self.cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let cols = self.cols();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![S::zero(); self.data.len()],
        }
    }

    pub fn fill(&mut self, v: S) {
        for x in &mut self.data {
            *x = v;
        }
    }

    /// `W · x` for a rank-2 `W` of shape `(rows, cols)` and `x` of length `cols`.
    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(c, x.len(), "matvec: ({r}x{c}) . ({},)", x.len());
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            out.push(dot(&self.data[i * c..(i + 1) * c], x));
        }
        out
    }

    /// `Wᵀ · y` for a rank-2 `W` of shape `(rows, cols)` and `y` of length `rows`.
    pub fn matvec_t(&self, y: &[S]) -> Vec<S> {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(r, y.len(), "matvec_t: ({r}x{c})^T . ({},)", y.len());
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            axpy(&mut out, y[i], &self.data[i * c..(i + 1) * c]);
        }
        out
    }

    /// `(a x b) . (b x c) -> (a x c)`.
    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        let (a, b) = (self.rows(), self.cols());
        let (b2, c) = (other.rows(), other.cols());
        assert_eq!(b, b2, "matmul: ({a}x{b}) . ({b2}x{c})");
        let mut out = Tensor::zeros(&[a, c]);
        for i in 0..a {
            for k in 0..b {
                let lhs = self.data[i * b + k];
                if lhs != S::zero() {
                    axpy(&mut out.data[i * c..(i + 1) * c], lhs, &other.data[k * c..(k + 1) * c]);
                }
            }
        }
        out
    }

    /// `self += alpha * u vᵀ`; the core gradient-accumulation primitive.
    pub fn add_outer(&mut self, alpha: S, u: &[S], v: &[S]) {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!((r, c), (u.len(), v.len()), "add_outer: ({r}x{c}) += ({},)x({},)", u.len(), v.len());
        for i in 0..r {
            axpy(&mut self.data[i * c..(i + 1) * c], alpha * u[i], v);
        }
    }

    /// `self += alpha * other`, elementwise.
    pub fn add_scaled(&mut self, alpha: S, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "add_scaled: {:?} += {:?}", self.shape, other.shape);
        axpy(&mut self.data, alpha, &other.data);
    }

    pub fn scale(&mut self, alpha: S) {
        for x in &mut self.data {
            *x *= alpha;
        }
    }

    pub fn sum_sq(&self) -> S {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len(), "dot: {} vs {}", a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<S: Scalar>(y: &mut [S], alpha: S, x: &[S]) {
    assert_eq!(y.len(), x.len(), "axpy: {} vs {}", y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Concatenate two slices into one owned vector.
pub fn concat<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape_algebra() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn matmul_mismatch_panics() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let _ = a.matmul(&b);
    }

    #[test]
    #[should_panic(expected = "extents must be positive")]
    fn zero_extent_panics() {
        let _ = Tensor::<f64>::zeros(&[3, 0]);
    }

    #[test]
    fn matvec_and_transpose() {
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.0]);
        assert_eq!(w.matvec(&[1.0, 2.0, 3.0]), vec![-2.0, 4.0]);
        assert_eq!(w.matvec_t(&[1.0, 1.0]), vec![3.0, 1.0, -1.0]);
    }

    #[test]
    fn outer_accumulation() {
        let mut g = Tensor::<f64>::zeros(&[2, 2]);
        g.add_outer(1.0, &[1.0, 2.0], &[3.0, 4.0]);
        g.add_outer(0.5, &[2.0, 0.0], &[1.0, 1.0]);
        assert_eq!(g.data(), &[4.0, 5.0, 6.0, 8.0]);
    }
}
