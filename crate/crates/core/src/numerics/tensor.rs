use std::fmt::Debug;

use num_traits::Float;

use super::NumericsError;

/// Element type of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Scalar types a tensor can hold. Implemented for `f32` and `f64` only.
pub trait Scalar: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = op(a) * op(b)` where `op` optionally transposes a row-major operand.
    ///
    /// `a` is `m x k` after `op`, `b` is `k x n` after `op`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert_eq!(a.len(), m * k);
                assert_eq!(b.len(), k * n);
                assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c.iter_mut().for_each(|x| *x = 0.0);
                    }
                    return;
                }
                // a is stored (k x m) when transposed, b is stored (n x k)
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: slice lengths are asserted above and the strides describe
                // exactly those row-major buffers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, NumericsError> {
        if shape.contains(&0) {
            return Err(NumericsError::Dimension(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::Dimension(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    /// Row-major `rows x cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::Dimension("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn dtype(&self) -> DType {
        S::DTYPE
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), NumericsError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(NumericsError::Dimension(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    /// Number of rows when viewed as `[.., d]` with `d` the last dimension.
    pub fn rows_of_last(&self) -> (usize, usize) {
        let d = *self.shape.last().unwrap_or(&1);
        (self.data.len() / d.max(1), d)
    }

    pub fn at2(&self, r: usize, c: usize) -> S {
        self.data[r * self.shape[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self, NumericsError> {
        same_shape(self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a = *a + b);
    }

    pub fn transpose(&self) -> Result<Self, NumericsError> {
        let (r, c) = self.dims2()?;
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self { shape: vec![c, r], data: out })
    }

    /// Converts to another scalar type, rounding where needed.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::of(v.as_f64())).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<(), NumericsError> {
    if a.shape != b.shape {
        return Err(NumericsError::Dimension(format!("shape mismatch {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// Matrix product of `m x k` and `k x n` matrices.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NumericsError> {
    matmul_t(a, false, b, false)
}

/// Matrix product with optional transposition of either operand.
pub fn matmul_t<S: Scalar>(
    a: &Tensor<S>,
    trans_a: bool,
    b: &Tensor<S>,
    trans_b: bool,
) -> Result<Tensor<S>, NumericsError> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(NumericsError::Dimension(format!(
            "matmul inner dimensions disagree: {:?}{} x {:?}{}",
            a.shape,
            if trans_a { "ᵀ" } else { "" },
            b.shape,
            if trans_b { "ᵀ" } else { "" }
        )));
    }
    let mut out = vec![S::zero(); m * n];
    S::gemm(m, k, n, &a.data, trans_a, &b.data, trans_b, &mut out, false);
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// Row-wise softmax of `x + mask`, with `-inf` mask entries excluded.
///
/// Rows whose entries are all blocked come out as zeros.
pub fn softmax_masked<S: Scalar>(x: &Tensor<S>, mask: Option<&Tensor<S>>) -> Result<Tensor<S>, NumericsError> {
    let (rows, cols) = x.dims2()?;
    if let Some(m) = mask {
        same_shape(x, m)?;
    }
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let xr = &x.data[r * cols..(r + 1) * cols];
        let logit = |j: usize| -> S {
            match mask {
                Some(m) => xr[j] + m.data[r * cols + j],
                None => xr[j],
            }
        };
        let mut max = S::neg_infinity();
        for j in 0..cols {
            let z = logit(j);
            if z > max {
                max = z;
            }
        }
        if max == S::neg_infinity() {
            continue;
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut total = S::zero();
        for (j, o) in orow.iter_mut().enumerate() {
            let z = logit(j);
            if z != S::neg_infinity() {
                *o = (z - max).exp();
                total = total + *o;
            }
        }
        let inv = S::one() / total;
        orow.iter_mut().for_each(|o| *o = *o * inv);
    }
    Ok(Tensor { shape: x.shape.clone(), data: out })
}

/// Per-row normalization over the last dimension (population variance), then `gain * x + bias`.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>, NumericsError> {
    let (rows, d) = x.rows_of_last();
    if gain.numel() != d || bias.numel() != d {
        return Err(NumericsError::Dimension(format!(
            "layer_norm affine params must have {d} entries, got {} and {}",
            gain.numel(),
            bias.numel()
        )));
    }
    let mut out = vec![S::zero(); x.numel()];
    for r in 0..rows {
        let (xhat, _) = normalize_row(&x.data[r * d..(r + 1) * d], eps);
        for j in 0..d {
            out[r * d + j] = xhat[j] * gain.data[j] + bias.data[j];
        }
    }
    Ok(Tensor { shape: x.shape.clone(), data: out })
}

/// Returns the standardized row and `1 / sqrt(var + eps)`.
pub(crate) fn normalize_row<S: Scalar>(row: &[S], eps: S) -> (Vec<S>, S) {
    let n = S::of(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let inv_std = S::one() / (var + eps).sqrt();
    (row.iter().map(|&v| (v - mean) * inv_std).collect(), inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<S: Scalar>(v: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    half * v * (S::one() + (c * (v + a * v * v * v)).tanh())
}

pub(crate) fn gelu_grad<S: Scalar>(v: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let inner = c * (v + a * v * v * v);
    let t = inner.tanh();
    let dinner = c * (S::one() + S::of(3.0) * a * v * v);
    half * (S::one() + t) + half * v * (S::one() - t * t) * dinner
}
