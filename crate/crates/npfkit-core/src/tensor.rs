//! Dense tensor values and the multilinear primitives used by the
//! participation-factor pipeline: axis contraction, permutation,
//! elementwise products, row products and resonance division.
//!
//! Layout is row-major with the last index varying fastest. Every flat
//! encoding in the crate (shard payloads, mode-tuple indices) uses this
//! single convention.

use crate::error::{Error, Result};
use num_complex::Complex64;
use std::ops::Range;

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Real64,
    Complex128,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

/// Dense row-major tensor holding `f64` or `Complex64` values.
///
/// Values are immutable after construction; all operations return new
/// tensors and are safe to call from concurrent workers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: TensorData,
}

/// Half-open index range `[start, end)` into one tensor dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IndexRange {
    pub start: usize,
    pub end: usize,
}

impl IndexRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::Argument(format!(
                "index range [{start}, {end}) is empty"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn full(extent: usize) -> Self {
        Self { start: 0, end: extent }
    }

    pub fn validate(&self, extent: usize) -> Result<()> {
        if self.start >= self.end || self.end > extent {
            return Err(Error::Argument(format!(
                "range [{}, {}) invalid for extent {extent}",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Argument("tensor rank must be >= 1".into()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::Argument("tensor extents must be >= 1".into()));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Argument("tensor size overflows usize".into()))?;
    }
    Ok(n)
}

impl DenseTensor {
    pub fn real(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape product {n}",
                data.len()
            )));
        }
        Ok(Self { shape, data: TensorData::Real(data) })
    }

    pub fn complex(shape: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape product {n}",
                data.len()
            )));
        }
        Ok(Self { shape, data: TensorData::Complex(data) })
    }

    pub fn zeros_real(shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        Ok(Self { shape, data: TensorData::Real(vec![0.0; n]) })
    }

    pub fn zeros_complex(shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: TensorData::Complex(vec![Complex64::new(0.0, 0.0); n]),
        })
    }

    /// Build a complex tensor by evaluating `f` at every index tuple.
    pub fn from_fn_complex(
        shape: Vec<usize>,
        mut f: impl FnMut(&[usize]) -> Complex64,
    ) -> Result<Self> {
        let n = check_shape(&shape)?;
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            bump_odometer(&mut idx, &shape);
        }
        Self::complex(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::Real(v) => v.len(),
            TensorData::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match &self.data {
            TensorData::Real(_) => Dtype::Real64,
            TensorData::Complex(_) => Dtype::Complex128,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_real(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::Real(v) => Some(v),
            TensorData::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&[Complex64]> {
        match &self.data {
            TensorData::Complex(v) => Some(v),
            TensorData::Real(_) => None,
        }
    }

    /// Flat offset of an index tuple (row-major, last index fastest).
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut f = 0usize;
        for (i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            f = f * d + i;
        }
        f
    }

    /// Value at an index tuple, promoted to complex.
    pub fn value_at(&self, idx: &[usize]) -> Complex64 {
        let f = self.flat_index(idx);
        match &self.data {
            TensorData::Real(v) => Complex64::new(v[f], 0.0),
            TensorData::Complex(v) => v[f],
        }
    }

    /// Copy of the values promoted to complex.
    pub fn to_complex_vec(&self) -> Vec<Complex64> {
        match &self.data {
            TensorData::Real(v) => v.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
            TensorData::Complex(v) => v.clone(),
        }
    }

    /// Consume the tensor, yielding its shape and complex data.
    pub fn into_complex_parts(self) -> (Vec<usize>, Vec<Complex64>) {
        match self.data {
            TensorData::Real(v) => (
                self.shape,
                v.into_iter().map(|x| Complex64::new(x, 0.0)).collect(),
            ),
            TensorData::Complex(v) => (self.shape, v),
        }
    }

    /// Reinterpret under a new shape with the same element count.
    /// Row-major data is untouched.
    pub fn into_reshaped(self, shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != self.len() {
            return Err(Error::Dimension(format!(
                "reshape to {shape:?} changes element count {} -> {n}",
                self.len()
            )));
        }
        Ok(Self { shape, data: self.data })
    }

    /// Contract `axis` of this tensor against the rows of a rank-2 matrix.
    ///
    /// `result[..., c, ...] = sum_a self[..., a, ...] * m[a, c]`.
    pub fn contract_axis(&self, m: &DenseTensor, axis: usize) -> Result<DenseTensor> {
        let cols = matrix_cols(m)?;
        self.contract_axis_cols(m, axis, 0..cols)
    }

    /// Same as [`contract_axis`](Self::contract_axis) restricted to an
    /// output-column chunk of `m`, so callers can bound temporaries.
    pub fn contract_axis_cols(
        &self,
        m: &DenseTensor,
        axis: usize,
        cols: Range<usize>,
    ) -> Result<DenseTensor> {
        if axis >= self.rank() {
            return Err(Error::Argument(format!(
                "axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let (m_rows, m_cols) = matrix_dims(m)?;
        if m_rows != self.shape[axis] {
            return Err(Error::Dimension(format!(
                "matrix has {m_rows} rows but axis {axis} has extent {}",
                self.shape[axis]
            )));
        }
        if cols.start >= cols.end || cols.end > m_cols {
            return Err(Error::Argument(format!(
                "column chunk {cols:?} invalid for {m_cols} columns"
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let c_out = cols.len();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = c_out;

        macro_rules! kernel {
            ($t:expr, $m:expr, $zero:expr, $mul:expr) => {{
                let t = $t;
                let mm = $m;
                let mut out = vec![$zero; outer * c_out * inner];
                for o in 0..outer {
                    for a in 0..mid {
                        let t_off = (o * mid + a) * inner;
                        let m_off = a * m_cols + cols.start;
                        for c in 0..c_out {
                            let w = mm[m_off + c];
                            let o_off = (o * c_out + c) * inner;
                            for i in 0..inner {
                                out[o_off + i] += $mul(w, t[t_off + i]);
                            }
                        }
                    }
                }
                out
            }};
        }

        let data = match (&self.data, &m.data) {
            (TensorData::Real(t), TensorData::Real(mm)) => TensorData::Real(kernel!(
                t.as_slice(),
                mm.as_slice(),
                0.0f64,
                |w: f64, x: f64| w * x
            )),
            (TensorData::Real(t), TensorData::Complex(mm)) => TensorData::Complex(kernel!(
                t.as_slice(),
                mm.as_slice(),
                Complex64::new(0.0, 0.0),
                |w: Complex64, x: f64| w * x
            )),
            (TensorData::Complex(t), TensorData::Complex(mm)) => TensorData::Complex(kernel!(
                t.as_slice(),
                mm.as_slice(),
                Complex64::new(0.0, 0.0),
                |w: Complex64, x: Complex64| w * x
            )),
            (TensorData::Complex(t), TensorData::Real(mm)) => {
                let promoted: Vec<Complex64> =
                    mm.iter().map(|&x| Complex64::new(x, 0.0)).collect();
                TensorData::Complex(kernel!(
                    t.as_slice(),
                    promoted.as_slice(),
                    Complex64::new(0.0, 0.0),
                    |w: Complex64, x: Complex64| w * x
                ))
            }
        };
        Ok(DenseTensor { shape: out_shape, data })
    }

    /// Reorder dimensions: `result[i_perm(0), ...] = self[i_0, ...]`.
    pub fn permute(&self, perm: &[usize]) -> Result<DenseTensor> {
        let r = self.rank();
        if perm.len() != r {
            return Err(Error::Argument(format!(
                "permutation length {} does not match rank {r}",
                perm.len()
            )));
        }
        let mut seen = vec![false; r];
        for &p in perm {
            if p >= r || seen[p] {
                return Err(Error::Argument(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        let mut out_shape = vec![0usize; r];
        for (d, &p) in perm.iter().enumerate() {
            out_shape[p] = self.shape[d];
        }
        // strides of the output, indexed by source dimension
        let mut out_strides_by_src = vec![0usize; r];
        {
            let mut strides = vec![0usize; r];
            let mut s = 1usize;
            for d in (0..r).rev() {
                strides[d] = s;
                s *= out_shape[d];
            }
            for (d, &p) in perm.iter().enumerate() {
                out_strides_by_src[d] = strides[p];
            }
        }
        let n = self.len();
        macro_rules! scatter {
            ($src:expr, $zero:expr) => {{
                let src = $src;
                let mut out = vec![$zero; n];
                let mut idx = vec![0usize; r];
                for f in 0..n {
                    let mut g = 0usize;
                    for d in 0..r {
                        g += idx[d] * out_strides_by_src[d];
                    }
                    out[g] = src[f];
                    bump_odometer(&mut idx, &self.shape);
                }
                out
            }};
        }
        let data = match &self.data {
            TensorData::Real(v) => TensorData::Real(scatter!(v.as_slice(), 0.0f64)),
            TensorData::Complex(v) => {
                TensorData::Complex(scatter!(v.as_slice(), Complex64::new(0.0, 0.0)))
            }
        };
        Ok(DenseTensor { shape: out_shape, data })
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn hadamard(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "hadamard shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = match (&self.data, &other.data) {
            (TensorData::Real(a), TensorData::Real(b)) => {
                TensorData::Real(a.iter().zip(b).map(|(x, y)| x * y).collect())
            }
            _ => {
                let a = self.to_complex_vec();
                let b = other.to_complex_vec();
                TensorData::Complex(a.iter().zip(&b).map(|(x, y)| x * y).collect())
            }
        };
        Ok(DenseTensor { shape: self.shape.clone(), data })
    }

    /// Elementwise sum into `self`; both tensors must be complex with
    /// identical shape.
    pub fn add_assign(&mut self, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        match (&mut self.data, &other.data) {
            (TensorData::Complex(a), TensorData::Complex(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                Ok(())
            }
            (TensorData::Real(a), TensorData::Real(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                Ok(())
            }
            _ => Err(Error::Argument("add_assign requires matching dtypes".into())),
        }
    }

    /// Drop axes of extent 1; pure metadata change on row-major data.
    pub fn into_squeezed(self, axes: &[usize]) -> Result<Self> {
        let mut keep = vec![true; self.rank()];
        for &a in axes {
            if a >= self.rank() || self.shape[a] != 1 {
                return Err(Error::Argument(format!(
                    "cannot squeeze axis {a} of shape {:?}",
                    self.shape
                )));
            }
            keep[a] = false;
        }
        let shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&d, _)| d)
            .collect();
        if shape.is_empty() {
            return Err(Error::Argument("cannot squeeze all axes".into()));
        }
        Ok(Self { shape, data: self.data })
    }
}

/// Advance a row-major index tuple by one (last index fastest).
pub(crate) fn bump_odometer(idx: &mut [usize], shape: &[usize]) {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return;
        }
        idx[d] = 0;
    }
}

fn matrix_dims(m: &DenseTensor) -> Result<(usize, usize)> {
    if m.rank() != 2 {
        return Err(Error::Argument(format!(
            "expected rank-2 matrix, got rank {}",
            m.rank()
        )));
    }
    Ok((m.shape[0], m.shape[1]))
}

fn matrix_cols(m: &DenseTensor) -> Result<usize> {
    Ok(matrix_dims(m)?.1)
}

/// All order-fold elementwise row products of an `n x n` matrix.
///
/// The output is `n^order x n`; the row with flat index encoding the tuple
/// `(p_1, ..., p_order)` (row-major, `p_order` fastest) is the elementwise
/// product of rows `p_1 ... p_order` of `m`.
pub fn row_product(m: &DenseTensor, order: usize) -> Result<DenseTensor> {
    if order == 0 {
        return Err(Error::Argument("row_product order must be >= 1".into()));
    }
    let (rows, cols) = matrix_dims(m)?;
    let src = m.to_complex_vec();
    let mut cur: Vec<Complex64> = src.clone();
    let mut cur_rows = rows;
    for _ in 1..order {
        let mut next = vec![Complex64::new(0.0, 0.0); cur_rows * rows * cols];
        for t in 0..cur_rows {
            for p in 0..rows {
                let o = (t * rows + p) * cols;
                for c in 0..cols {
                    next[o + c] = cur[t * cols + c] * src[p * cols + c];
                }
            }
        }
        cur = next;
        cur_rows *= rows;
    }
    DenseTensor::complex(vec![cur_rows, cols], cur)
}

/// Divide each entry of `c` by its resonance denominator.
///
/// For an entry `(i, a, ..., g)` the denominator is
/// `lambda[a] + ... + lambda[g] - lambda[i]`, replaced by `eps` whenever its
/// modulus falls below `eps`. Denominators are generated on the fly from
/// `lambda`; nothing of the denominator tensor is materialized.
pub fn resonance_divide(
    c: &DenseTensor,
    lambda: &[Complex64],
    eps: f64,
) -> Result<DenseTensor> {
    resonance_divide_rows(c, lambda, eps, 0..c.shape()[0])
}

/// [`resonance_divide`] restricted to a chunk of leading (mode) indices,
/// producing the corresponding sub-block.
pub fn resonance_divide_rows(
    c: &DenseTensor,
    lambda: &[Complex64],
    eps: f64,
    rows: Range<usize>,
) -> Result<DenseTensor> {
    if eps <= 0.0 {
        return Err(Error::Argument(format!("eps must be > 0, got {eps}")));
    }
    let n = lambda.len();
    if c.rank() < 2 {
        return Err(Error::Argument("resonance_divide needs rank >= 2".into()));
    }
    for &d in c.shape() {
        if d != n {
            return Err(Error::Dimension(format!(
                "every extent must equal len(lambda) = {n}, got {:?}",
                c.shape()
            )));
        }
    }
    if rows.start >= rows.end || rows.end > n {
        return Err(Error::Argument(format!("row chunk {rows:?} invalid")));
    }
    let trailing = c.rank() - 1;
    let inner: usize = c.shape()[1..].iter().product();
    let src = c.to_complex_vec();
    let mut out =
        vec![Complex64::new(0.0, 0.0); rows.len() * inner];
    let t_shape = &c.shape()[1..];
    for (ro, i) in rows.clone().enumerate() {
        let li = lambda[i];
        let mut idx = vec![0usize; trailing];
        let mut lam_sum = lambda[0] * trailing as f64;
        for f in 0..inner {
            let mut d = lam_sum - li;
            if d.norm() < eps {
                d = Complex64::new(eps, 0.0);
            }
            out[ro * inner + f] = src[i * inner + f] / d;
            // incremental odometer update of the lambda sum
            for dpos in (0..trailing).rev() {
                lam_sum -= lambda[idx[dpos]];
                idx[dpos] += 1;
                if idx[dpos] < t_shape[dpos] {
                    lam_sum += lambda[idx[dpos]];
                    break;
                }
                idx[dpos] = 0;
                lam_sum += lambda[0];
            }
        }
    }
    let mut shape = c.shape().to_vec();
    shape[0] = rows.len();
    DenseTensor::complex(shape, out)
}
