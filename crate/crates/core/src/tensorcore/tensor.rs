use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::TensorError;

/// Floating point element type of a [`Tensor`].
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    /// Lossless for every value the crate produces internally (counts, small constants).
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("scalar literal out of range")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::shape("new", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::shape("new", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, S::one())
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::shape(op, format!("expected a matrix, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        let (n, k) = self.require_matrix("matmul")?;
        let (k2, m) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(TensorError::shape("matmul", format!("{:?} x {:?}", self.shape, other.shape)));
        }
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == S::zero() {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Self { shape: vec![n, m], data: out })
    }

    pub fn transpose(&self) -> Result<Self, TensorError> {
        let (n, m) = self.require_matrix("transpose")?;
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(Self { shape: vec![m, n], data: out })
    }

    /// Adds a `[1, m]` (or `[m]`) row to every row of an `[n, m]` matrix.
    pub fn add_row(&self, bias: &Self) -> Result<Self, TensorError> {
        let (n, m) = self.require_matrix("add_row")?;
        if bias.len() != m || !(bias.shape == [m] || bias.shape == [1, m]) {
            return Err(TensorError::shape("add_row", format!("{:?} + {:?}", self.shape, bias.shape)));
        }
        let mut out = self.data.clone();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = out[i * m + j] + bias.data[j];
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    /// Column sums of an `[n, m]` matrix as a `[1, m]` row.
    pub fn col_sum(&self) -> Result<Self, TensorError> {
        let (n, m) = self.require_matrix("col_sum")?;
        let mut out = vec![S::zero(); m];
        for i in 0..n {
            for j in 0..m {
                out[j] = out[j] + self.data[i * m + j];
            }
        }
        Ok(Self { shape: vec![1, m], data: out })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::shape("concat", "no operands"))?;
        let (n, _) = first.require_matrix("concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (rows, cols) = p.require_matrix("concat")?;
            if rows != n {
                let shapes: Vec<_> = parts.iter().map(|p| p.shape.clone()).collect();
                return Err(TensorError::shape("concat", format!("row mismatch in {shapes:?}")));
            }
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Self { shape: vec![n, total], data: out })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self, TensorError> {
        let (n, m) = self.require_matrix("slice_cols")?;
        if len == 0 || start + len > m {
            return Err(TensorError::shape("slice_cols", format!("columns {start}..{} of {:?}", start + len, self.shape)));
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&self.data[i * m + start..i * m + start + len]);
        }
        Ok(Self { shape: vec![n, len], data: out })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self, TensorError> {
        let (n, c) = self.require_matrix("softmax")?;
        let mut out = self.data.clone();
        for i in 0..n {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    /// Per-row `logsumexp(row) - row[label]`.
    pub fn cross_entropy_rows(&self, labels: &[usize]) -> Result<Vec<S>, TensorError> {
        let (n, c) = self.require_matrix("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(TensorError::shape("softmax_cross_entropy", format!("{n} rows but {} labels", labels.len())));
        }
        let mut out = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(TensorError::Label { label: y, classes: c });
            }
            let row = &self.data[i * c..(i + 1) * c];
            let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().fold(S::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
            out.push(lse - row[y]);
        }
        Ok(out)
    }

    /// Index of the largest entry per row; the lowest index wins ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let c = self.cols();
        (0..self.rows())
            .map(|i| {
                let row = &self.data[i * c..(i + 1) * c];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[7., 8., 9., 10., 11., 12.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[58., 64., 139., 154.]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = t(&[2, 1], &[1., 2.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        assert_eq!(c.slice_cols(1, 2).unwrap(), b);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let a = t(&[2, 3], &[1., 1., 0., 0., 2., 2.]);
        assert_eq!(a.argmax_rows(), vec![0, 1]);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let a = t(&[1, 2], &[0., 0.]);
        assert!(matches!(a.cross_entropy_rows(&[2]), Err(TensorError::Label { .. })));
    }
}
