//! Dense row-major `f64` tensors and the handful of kernels the attention
//! stack needs.
//!
//! Every constructor and public operation guarantees that the returned data is
//! finite. Summation order is fixed (left to right along the reduced axis) so
//! results are bit-reproducible from run to run.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(Tensor { shape, data })
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        checked("Tensor::new", shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds an `m×n` matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![m, n],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![m, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the leading (token) axis.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of elements per leading-axis slice.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// The `i`-th slice along the leading axis, flattened.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    /// Matrix product. The inner sum runs over `k` in increasing order.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        checked("matmul", vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("softmax_rows")?;
        if n == 0 {
            return Err(Error::Domain("softmax over an empty row".into()));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(n).take(m) {
            softmax_in_place(row);
        }
        checked("softmax_rows", self.shape.clone(), out)
    }

    /// Arithmetic mean along the leading axis; `[s, ..rest]` becomes `[1, ..rest]`.
    pub fn mean_over_tokens(&self) -> Result<Tensor> {
        let s = self.rows();
        if self.rank() == 0 || s == 0 {
            return Err(Error::Domain("mean over zero tokens".into()));
        }
        let w = self.row_len();
        let mut acc = vec![0.0; w];
        for t in 0..s {
            for (a, &x) in acc.iter_mut().zip(self.row(t)) {
                *a += x;
            }
        }
        let inv = s as f64;
        acc.iter_mut().for_each(|a| *a /= inv);
        let mut shape = self.shape.clone();
        shape[0] = 1;
        checked("mean_over_tokens", shape, acc)
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&self) -> f64 {
        l2(&self.data)
    }

    /// Per-token Euclidean norms, shape `[s, 1]`.
    pub fn rowwise_l2(&self) -> Result<Tensor> {
        let s = self.rows();
        let data = (0..s).map(|t| l2(self.row(t))).collect();
        checked("rowwise_l2", vec![s, 1], data)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        checked(op, self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&x| c * x).collect();
        checked("scale", self.shape.clone(), data)
    }

    /// Adds a single leading-axis slice (shape `[1, ..rest]`) to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        if row.rows() != 1 || row.shape[1..] != self.shape[1..] {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape.clone(),
                right: row.shape.clone(),
            });
        }
        let w = self.row_len();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + row.data[i % w])
            .collect();
        checked("add_row", self.shape.clone(), data)
    }

    /// Copy of rows `range` along the leading axis.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Tensor> {
        if range.start > range.end || range.end > self.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                left: self.shape.clone(),
                right: vec![range.start, range.end],
            });
        }
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Ok(Tensor {
            shape,
            data: self.data[range.start * w..range.end * w].to_vec(),
        })
    }

    /// Stacks two tensors along the leading axis.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() == 0 || self.shape[1..] != other.shape[1..] {
            return Err(Error::Shape {
                op: "concat_rows",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut shape = self.shape.clone();
        shape[0] += other.rows();
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor { shape, data })
    }

    /// Returns a copy with rows `range` replaced by `block`.
    pub fn with_rows_replaced(&self, range: Range<usize>, block: &Tensor) -> Result<Tensor> {
        let mut expected = self.shape.clone();
        if range.end > self.rows() || range.start > range.end {
            return Err(Error::Shape {
                op: "with_rows_replaced",
                left: self.shape.clone(),
                right: vec![range.start, range.end],
            });
        }
        expected[0] = range.len();
        if block.shape != expected {
            return Err(Error::Shape {
                op: "with_rows_replaced",
                left: expected,
                right: block.shape.clone(),
            });
        }
        let w = self.row_len();
        let mut data = self.data.clone();
        data[range.start * w..range.end * w].copy_from_slice(&block.data);
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }
}

pub(crate) fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
