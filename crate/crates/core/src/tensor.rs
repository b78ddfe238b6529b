//! Dense row-major tensors and the numeric kernels shared by the autodiff
//! tape and the inference path.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Storage tag written into checkpoint archives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    I8 = 2,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F64),
            1 => Some(DType::F32),
            2 => Some(DType::I8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::I8 => 1,
        }
    }
}

/// Floating point element type. `f64` is used for training and gradient
/// checks; `f32` backs the latency benchmark.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;

    /// `c = alpha * a @ b + beta * c` over strided views.
    ///
    /// # Safety
    /// Every element addressed through the pointers and strides must be in
    /// bounds and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn le_bytes(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

/// Dense row-major array. Gradients live on the tape, not here.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Domain(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> F) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { F::one() } else { F::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of trailing-axis slices.
    pub fn rows(&self) -> usize {
        self.len() / self.last_dim()
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

/// A strided 2-D window into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatLayout {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatLayout {
    pub fn dense(rows: usize, cols: usize) -> Self {
        MatLayout {
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    pub fn t(self) -> Self {
        MatLayout {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn last_index(&self) -> usize {
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c = alpha * a @ b + beta * c` on strided windows, bounds-checked.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    alpha: F,
    a: &[F],
    la: MatLayout,
    b: &[F],
    lb: MatLayout,
    beta: F,
    c: &mut [F],
    lc: MatLayout,
) {
    assert_eq!(la.cols, lb.rows, "gemm inner extent");
    assert_eq!((la.rows, lb.cols), (lc.rows, lc.cols), "gemm output extent");
    if la.rows == 0 || lb.cols == 0 {
        return;
    }
    if la.cols == 0 {
        for i in 0..lc.rows {
            for j in 0..lc.cols {
                let idx = lc.offset + i * lc.row_stride + j * lc.col_stride;
                c[idx] = beta * c[idx];
            }
        }
        return;
    }
    assert!(la.last_index() < a.len(), "gemm lhs out of bounds");
    assert!(lb.last_index() < b.len(), "gemm rhs out of bounds");
    assert!(lc.last_index() < c.len(), "gemm out out of bounds");
    // SAFETY: all three windows were bounds-checked above, and `c` is a
    // distinct mutable borrow so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr().add(la.offset),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr().add(lb.offset),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.row_stride as isize,
            lc.col_stride as isize,
        )
    }
}

/// `[m,k] @ [k,n]`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![F::zero(); m * n];
    gemm(
        F::one(),
        &a.data,
        MatLayout::dense(m, k),
        &b.data,
        MatLayout::dense(k, n),
        F::zero(),
        &mut out,
        MatLayout::dense(m, n),
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// In-place max-subtracted softmax over consecutive slices of `width`.
pub(crate) fn softmax_rows<F: Scalar>(data: &mut [F], width: usize) {
    for row in data.chunks_mut(width) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Softmax along `axis`, stabilized by max subtraction.
pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank().max(1) {
        return Err(Error::Index {
            what: "softmax axis",
            index: axis,
            len: x.rank(),
        });
    }
    if !x.is_finite() {
        return Err(Error::Domain("softmax input contains non-finite values".into()));
    }
    let width = x.shape.get(axis).copied().unwrap_or(1);
    let inner: usize = x.shape[axis + 1..].iter().product();
    if inner == 1 {
        let mut out = x.clone();
        softmax_rows(&mut out.data, width);
        return Ok(out);
    }
    // Gather strided slices, normalize, scatter back.
    let outer = x.len() / (width * inner);
    let mut out = x.clone();
    let mut buf = vec![F::zero(); width];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * width * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x.data[base + j * inner];
            }
            softmax_rows(&mut buf, width);
            for (j, b) in buf.iter().enumerate() {
                out.data[base + j * inner] = *b;
            }
        }
    }
    Ok(out)
}

pub(crate) fn gelu_scalar<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * x * (F::one() + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let cdf = F::from_f64(0.5)
        * (F::one() + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * F::from_f64(0.5)).exp() * F::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Exact `x * Phi(x)`.
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.max(F::zero()))
}

/// Width-3 convolution over `[batch * len, c_in]` rows, zero padded by one
/// position at each end of every sequence, accumulated into `out`
/// (`[batch * len, c_out]`, pre-filled with the bias by the caller).
pub(crate) fn conv3_accumulate<F: Scalar>(
    x: &[F],
    kernel: &[F],
    out: &mut [F],
    batch: usize,
    len: usize,
    c_in: usize,
    c_out: usize,
) {
    for b in 0..batch {
        let base = b * len;
        for tap in 0..3 {
            // tap 0 reads t-1, tap 1 reads t, tap 2 reads t+1
            let (dst0, src0, n) = match tap {
                0 => (1, 0, len - 1),
                1 => (0, 0, len),
                _ => (0, 1, len - 1),
            };
            if n == 0 {
                continue;
            }
            gemm(
                F::one(),
                x,
                MatLayout::dense(n, c_in).at((base + src0) * c_in),
                kernel,
                MatLayout::dense(c_in, c_out).at(tap * c_in * c_out),
                F::one(),
                out,
                MatLayout::dense(n, c_out).at((base + dst0) * c_out),
            );
        }
    }
}

/// Same-length kernel-3 convolution of one sequence `[T, c_in]`.
pub fn conv1d_same<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    if kernel.rank() != 3 || kernel.shape[0] != 3 {
        return Err(Error::Config(format!(
            "conv kernel must have shape [3, c_in, c_out], got {:?}",
            kernel.shape
        )));
    }
    let (c_in, c_out) = (kernel.shape[1], kernel.shape[2]);
    if x.rank() != 2 || x.shape[1] != c_in {
        return Err(Error::shape("conv1d_same", &x.shape, &kernel.shape));
    }
    if bias.shape != [c_out] {
        return Err(Error::shape("conv1d_same bias", &bias.shape, &[c_out]));
    }
    let len = x.shape[0];
    let mut out: Vec<F> = bias.data.iter().copied().cycle().take(len * c_out).collect();
    conv3_accumulate(&x.data, &kernel.data, &mut out, 1, len, c_in, c_out);
    Ok(Tensor::from_parts(vec![len, c_out], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        t(&[m, n], &out)
    }

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::<f64>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new([2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f64>::scalar(2.0).len(), 1);
    }

    #[test]
    fn matmul_cases() {
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
        let z = matmul(&Tensor::zeros([2, 3]), &Tensor::full([3, 4], 7.0)).unwrap();
        assert_eq!(z, Tensor::zeros([2, 4]));
        let v = matmul(&m, &t(&[2, 1], &[5., 6.])).unwrap();
        assert_eq!(v.data(), &[17., 39.]);
        let a = t(&[2, 3], &[1., -2., 0.5, 3., 1., -1.]);
        let b = t(&[3, 2], &[0.1, 0.2, -0.3, 0.4, 2., 1.]);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-14);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::<f64>::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[0.0, 3f64.ln()]), 0).unwrap();
        // exp(0) / (1 + 3) and 3 / 4
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        let s = softmax(&t(&[2], &[1000.0, 1000.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        assert!(softmax(&t(&[2], &[f64::NAN, 0.0]), 0).is_err());
    }

    #[test]
    fn softmax_inner_axis() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let s = softmax(&x, 0).unwrap();
        for j in 0..3 {
            assert!((s.data()[j] + s.data()[3 + j] - 1.0).abs() < 1e-12);
            assert!(s.data()[3 + j] > s.data()[j]);
        }
    }

    #[test]
    fn activations() {
        let z = Tensor::<f64>::zeros([1]);
        assert_eq!(gelu(&z).item(), 0.0);
        assert_eq!(relu(&z).item(), 0.0);
        assert_eq!(relu(&t(&[2], &[-2., 3.])).data(), &[0., 3.]);
        // Phi(1) through the Maclaurin series of erf at 1/sqrt(2)
        let x = std::f64::consts::FRAC_1_SQRT_2;
        let (mut term, mut series) = (x, 0.0);
        for n in 0..30 {
            series += term / (2 * n + 1) as f64;
            term *= -x * x / (n + 1) as f64;
        }
        let phi1 = 0.5 * (1.0 + 2.0 / std::f64::consts::PI.sqrt() * series);
        assert!((gelu(&t(&[1], &[1.0])).item() - phi1).abs() < 1e-12);
        assert!((gelu(&t(&[1], &[1.0])).item() - 0.841345).abs() < 1e-6);
        assert!((gelu(&t(&[1], &[10.0])).item() - 10.0).abs() < 1e-6);
    }

    #[test]
    fn conv_identity_kernel() {
        let c = 3;
        let mut k = Tensor::<f64>::zeros([3, c, c]);
        for i in 0..c {
            k.data_mut()[c * c + i * c + i] = 1.0;
        }
        let x = Tensor::from_fn([4, c], |i| i as f64 * 0.5 - 1.0);
        let y = conv1d_same(&x, &k, &Tensor::zeros([c])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_input_broadcasts_bias() {
        let k = Tensor::from_fn([3, 2, 2], |i| i as f64);
        let bias = t(&[2], &[0.5, -1.5]);
        let y = conv1d_same(&Tensor::zeros([5, 2]), &k, &bias).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn conv_sliding_window() {
        let k = t(&[3, 1, 1], &[1., 1., 1.]);
        let y = conv1d_same(&t(&[3, 1], &[1., 2., 3.]), &k, &t(&[1], &[0.])).unwrap();
        assert_eq!(y.data(), &[3., 6., 5.]);
        let y = conv1d_same(&t(&[1, 1], &[4.]), &k, &t(&[1], &[1.])).unwrap();
        assert_eq!(y.data(), &[5.]);
    }

    #[test]
    fn conv_rejects_wrong_width() {
        let k = Tensor::<f64>::zeros([5, 1, 1]);
        let err = conv1d_same(&Tensor::zeros([3, 1]), &k, &Tensor::zeros([1])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
