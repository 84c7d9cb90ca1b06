//! Dense row-major tensors over `f32` (default) or `f64`.
//!
//! Tensors are immutable values: every operation returns a new tensor. The
//! autodiff tape in [`crate::tape`] records these operations for `f32`; the
//! attention decomposition verifier runs them at `f64`.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type usable in a [`Tensor`].
pub trait Element: Float + Default + Debug + Send + Sync + 'static {
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` over strided views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn check_span(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative strides unsupported");
    let last = (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize;
    assert!(last < len, "gemm view out of bounds: {last} >= {len}");
}

macro_rules! impl_element {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Element for $t {
            const NAME: &'static str = $name;

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_span(a.len(), m, k, a_strides);
                check_span(b.len(), k, n, b_strides);
                check_span(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, "f32", matrixmultiply::sgemm);
impl_element!(f64, "f64", matrixmultiply::dgemm);

/// Dense n-dimensional array with row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!("shape {shape:?} needs {expected} elements, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a matrix from row slices; all rows must share a length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row count when viewed as a matrix: leading dims are flattened.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Dimension(format!("item() on shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!("{what}: expected a matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self · other` for `[m×k]·[k×n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul lhs")?;
        let (k2, n) = other.as_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = Self::zeros(&[m, n]);
        T::gemm(m, k, n, T::one(), &self.data, (k as isize, 1), &other.data, (n as isize, 1), T::zero(), &mut out.data, (n as isize, 1));
        Ok(out)
    }

    /// `self · otherᵀ` for `[m×k]·[n×k]ᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul_nt lhs")?;
        let (n, k2) = other.as_matrix("matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_nt inner dims {k} vs {k2}")));
        }
        let mut out = Self::zeros(&[m, n]);
        T::gemm(m, k, n, T::one(), &self.data, (k as isize, 1), &other.data, (1, k as isize), T::zero(), &mut out.data, (n as isize, 1));
        Ok(out)
    }

    /// `selfᵀ · other` for `[k×m]ᵀ·[k×n]`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.as_matrix("matmul_tn lhs")?;
        let (k2, n) = other.as_matrix("matmul_tn rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_tn inner dims {k} vs {k2}")));
        }
        let mut out = Self::zeros(&[m, n]);
        T::gemm(m, k, n, T::one(), &self.data, (1, m as isize), &other.data, (n as isize, 1), T::zero(), &mut out.data, (n as isize, 1));
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = Self::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Self, what: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!("{what}: shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        Ok(Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let c = self.cols();
        if row.len() != c {
            return Err(Error::Dimension(format!("add_row: row of {} for {c} columns", row.len())));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(&row.data) {
                *o = *o + b;
            }
        }
        Ok(out)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Self> {
        self.check_finite("softmax_rows input")?;
        let c = self.cols();
        let mut out = self.clone();
        if c == 0 {
            return Ok(out);
        }
        for row in out.data.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(out)
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm_rows(&self, eps: T) -> Self {
        let c = self.cols();
        let mut out = self.clone();
        let n = T::from_f64(c as f64);
        for row in out.data.chunks_mut(c) {
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
            let rstd = (var + eps).sqrt().recip();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
        out
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &v| s + v)
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    /// Column means of a matrix, as a `[1×cols]` tensor.
    pub fn mean_rows(&self) -> Self {
        let c = self.cols();
        let r = self.rows();
        let mut out = vec![T::zero(); c];
        for row in self.data.chunks(c.max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv = T::from_f64(1.0 / r.max(1) as f64);
        Self { shape: vec![1, c], data: out.into_iter().map(|v| v * inv).collect() }
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let c = self.cols();
        let r = self.rows();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Dimension(format!("row {i} out of {r}")));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(vec![idx.len(), c], data)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let c = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::Dimension("vstack column mismatch".into()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, c], data)
    }

    /// Contiguous column block `[start, start+width)` of a matrix.
    pub fn columns(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.as_matrix("columns")?;
        if start + width > c {
            return Err(Error::Dimension(format!("columns {start}+{width} > {c}")));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Self::new(vec![r, width], data)
    }

    /// Concatenates matrices with equal row counts horizontally.
    pub fn hstack(parts: &[&Self]) -> Result<Self> {
        let r = parts.first().map_or(0, |p| p.rows());
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                if p.rows() != r {
                    return Err(Error::Dimension("hstack row mismatch".into()));
                }
                data.extend_from_slice(p.row(i));
            }
        }
        Self::new(vec![r, total], data)
    }

    pub fn norm(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &v| s + v * v).sqrt()
    }

    /// Scales each row to unit L2 norm. All-zero rows stay zero and are
    /// reported with a warning.
    pub fn l2_normalize_rows(&self) -> Self {
        let c = self.cols();
        let mut out = self.clone();
        let mut zero_rows = 0;
        for row in out.data.chunks_mut(c.max(1)) {
            let n = row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
            if n > T::zero() {
                for v in row.iter_mut() {
                    *v = *v / n;
                }
            } else {
                zero_rows += 1;
            }
        }
        if zero_rows > 0 {
            log::warn!("l2 normalisation of {zero_rows} zero row(s); left as zero");
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!("max_abs_diff: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn identity_and_zero_products() {
        let b = Tensor::<f32>::new(vec![3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&b).unwrap(), b);
        let a = Tensor::<f32>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let z = Tensor::<f32>::zeros(&[2, 2]);
        assert_eq!(a.matmul(&z).unwrap(), z);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut s = 42;
        let a = Tensor::<f64>::from_fn(&[4, 5], |_| lcg(&mut s));
        let b = Tensor::<f64>::from_fn(&[5, 3], |_| lcg(&mut s));
        let got = a.cast::<f32>().matmul(&b.cast::<f32>()).unwrap();
        let want = naive_matmul(&a, &b).cast::<f32>();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-6);
        let nt = a.matmul_nt(&b.transpose().unwrap()).unwrap();
        assert!(nt.max_abs_diff(&naive_matmul(&a, &b)).unwrap() <= 1e-12);
        let tn = a.transpose().unwrap().matmul_tn(&b).unwrap();
        assert!(tn.max_abs_diff(&naive_matmul(&a, &b)).unwrap() <= 1e-12);
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let t = Tensor::<f64>::from_rows(&[vec![1.0, 1.0]]).unwrap().softmax_rows().unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);
        let t = Tensor::<f64>::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap().softmax_rows().unwrap();
        assert!((t.data()[0] - 0.25).abs() < 1e-12 && (t.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = 3;
        let x = Tensor::<f32>::from_fn(&[3, 7], |_| 5.0 * lcg(&mut s) as f32);
        let y = x.softmax_rows().unwrap();
        for i in 0..3 {
            let total: f64 = y.row(i).iter().map(|&v| v as f64).sum();
            assert!((total - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::<f32>::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(x.softmax_rows(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_row_normalises_to_zero() {
        let x = Tensor::<f32>::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let y = x.l2_normalize_rows();
        assert_eq!(y.row(0), &[0.0, 0.0]);
        assert!((y.row(1)[0] - 0.6).abs() < 1e-7);
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
