//! Dense row-major `f64` tensors and the numeric kernels behind graph ops.
//!
//! Every op in the graph works on rank-2 views. A rank-1 tensor of length `n`
//! is treated as an `n x 1` column, and the scalar shape `[1]` as `1 x 1`.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

/// Rank 1 or 2, stored inline; unused trailing dims stay zero.
#[derive(Clone, Copy, PartialEq)]
struct Shape {
    dims: [usize; 2],
    rank: usize,
}

impl Shape {
    fn of(shape: &[usize]) -> Self {
        let mut dims = [0; 2];
        dims[..shape.len()].copy_from_slice(shape);
        Self { dims, rank: shape.len() }
    }

    fn as_slice(&self) -> &[usize] {
        &self.dims[..self.rank]
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape.as_slice())?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    /// Panics if the shape does not describe `data.len()` elements; use
    /// [`Tensor::try_new`] for untrusted input.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::try_new(shape, data).expect("tensor shape does not match data length")
    }

    pub fn try_new(shape: Vec<usize>, data: Vec<f64>) -> Option<Self> {
        Self::try_from_slice(&shape, data)
    }

    fn try_from_slice(shape: &[usize], data: Vec<f64>) -> Option<Self> {
        if shape.is_empty() || shape.len() > 2 || shape.iter().product::<usize>() != data.len() {
            return None;
        }
        Some(Self { shape: Shape::of(shape), data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Shape::of(&[1]), data: vec![value] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::try_from_slice(shape, vec![value; n]).expect("tensor shape does not match data length")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data length");
        Self { shape: Shape { dims: [rows, cols], rank: 2 }, data }
    }

    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n, 1], data)
    }

    pub fn shape(&self) -> &[usize] {
        self.shape.as_slice()
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of the rank-2 view.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            _ => unreachable!("tensor rank is validated on construction"),
        }
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.dims() == other.dims()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.len(), other.len());
        Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self += alpha * other`, elementwise.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let (_, c) = self.dims();
        &mut self.data[r * c..(r + 1) * c]
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, index: &[usize]) -> Tensor {
        gather_rows(self, index)
    }
}

// ---------------------------------------------------------------------------
// Kernels. Shapes are checked by the graph before these run.

/// Below this many multiply-adds, packing operands for `dgemm` costs more
/// than the product itself.
const SMALL_GEMM: usize = 1 << 15;

pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (m, k) = if ta { (a.dims().1, a.dims().0) } else { a.dims() };
    let n = if tb { b.dims().0 } else { b.dims().1 };
    if m * n * k <= SMALL_GEMM {
        gemm_small(a, b, ta, tb)
    } else {
        gemm_packed(a, b, ta, tb)
    }
}

fn gemm_small(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let mut out = vec![0.0; m * n];
    if n == 0 || k == 0 {
        return Tensor::matrix(m, n, out);
    }
    if tb && !ta {
        // rows of A against rows of B
        for (row, a_row) in out.chunks_exact_mut(n).zip(a.data.chunks_exact(ac)) {
            for (o, b_row) in row.iter_mut().zip(b.data.chunks_exact(bc)) {
                *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            }
        }
        return Tensor::matrix(m, n, out);
    }
    // op(B) laid out row-major as [k, n]
    let transposed;
    let opb: &[f64] = if tb {
        let mut t = vec![0.0; k * n];
        for (j, row) in b.data.chunks_exact(bc).enumerate() {
            for (p, &v) in row.iter().enumerate() {
                t[p * n + j] = v;
            }
        }
        transposed = t;
        &transposed
    } else {
        &b.data
    };
    for (i, row) in out.chunks_exact_mut(n).enumerate() {
        for (p, b_row) in opb.chunks_exact(n).enumerate() {
            let x = if ta { a.data[p * ac + i] } else { a.data[i * ac + p] };
            for (o, &y) in row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

fn gemm_packed(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    // Row-major strides of op(A) and op(B).
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the pointers cover `a`, `b` and `out` exactly as described
        // by the dimensions and strides computed above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::matrix(m, n, out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over each segment of a column vector.
pub(crate) fn segment_softmax(x: &Tensor, segments: &[usize], n_segments: usize) -> Tensor {
    let mut max = vec![f64::NEG_INFINITY; n_segments];
    for (&v, &s) in x.data.iter().zip(segments) {
        if v > max[s] {
            max[s] = v;
        }
    }
    let exp: Vec<f64> = x.data.iter().zip(segments).map(|(&v, &s)| (v - max[s]).exp()).collect();
    let mut total = vec![0.0; n_segments];
    for (&e, &s) in exp.iter().zip(segments) {
        total[s] += e;
    }
    let data = exp.iter().zip(segments).map(|(&e, &s)| e / total[s]).collect();
    Tensor { shape: x.shape, data }
}

pub(crate) fn sum_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(&x.data[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    Tensor::matrix(1, c, out)
}

pub(crate) fn broadcast_rows(x: &Tensor, rows: usize) -> Tensor {
    let mut out = Vec::with_capacity(rows * x.len());
    for _ in 0..rows {
        out.extend_from_slice(&x.data);
    }
    Tensor::matrix(rows, x.len(), out)
}

pub(crate) fn sum_cols(x: &Tensor) -> Tensor {
    let (r, c) = x.dims();
    let out = (0..r).map(|i| x.data[i * c..(i + 1) * c].iter().sum()).collect();
    Tensor::matrix(r, 1, out)
}

pub(crate) fn broadcast_cols(x: &Tensor, cols: usize) -> Tensor {
    let mut out = Vec::with_capacity(cols * x.len());
    for &v in &x.data {
        out.extend(std::iter::repeat_n(v, cols));
    }
    Tensor::matrix(x.len(), cols, out)
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].dims().0;
    let total: usize = parts.iter().map(|p| p.dims().1).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::matrix(rows, total, out)
}

pub(crate) fn slice_cols(x: &Tensor, start: usize, width: usize) -> Tensor {
    let (r, _) = x.dims();
    let mut out = Vec::with_capacity(r * width);
    for i in 0..r {
        out.extend_from_slice(&x.row(i)[start..start + width]);
    }
    Tensor::matrix(r, width, out)
}

pub(crate) fn pad_cols(x: &Tensor, start: usize, total: usize) -> Tensor {
    let (r, c) = x.dims();
    let mut out = vec![0.0; r * total];
    for i in 0..r {
        out[i * total + start..i * total + start + c].copy_from_slice(x.row(i));
    }
    Tensor::matrix(r, total, out)
}

pub(crate) fn gather_rows(x: &Tensor, index: &[usize]) -> Tensor {
    let (_, c) = x.dims();
    let mut out = Vec::with_capacity(index.len() * c);
    for &i in index {
        out.extend_from_slice(x.row(i));
    }
    Tensor::matrix(index.len(), c, out)
}

pub(crate) fn scatter_add_rows(x: &Tensor, index: &[usize], rows: usize) -> Tensor {
    let (_, c) = x.dims();
    let mut out = Tensor::zeros(&[rows, c]);
    for (src, &dst) in index.iter().enumerate() {
        for (o, v) in out.row_mut(dst).iter_mut().zip(x.row(src)) {
            *o += v;
        }
    }
    out
}
