//! Dense row-major `f64` tensors and the raw numeric kernels shared by the
//! recorded operations and the incremental-inference engine.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new([rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Dimension(format!(
                "expected a 2-D tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[a, b, c, d] => Ok((a, b, c, d)),
            other => Err(Error::Dimension(format!(
                "expected a 4-D tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2()?;
        let (k2, m) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let data = matmul_raw(&self.data, &other.data, n, k, m);
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        Ok(Tensor {
            shape: vec![c, r],
            data: transpose_raw(&self.data, r, c),
        })
    }

    /// Restricts one axis to `range`, copying.
    pub fn narrow(&self, axis: usize, range: Range<usize>) -> Result<Tensor> {
        if axis >= self.shape.len() || range.end > self.shape[axis] || range.start > range.end {
            return Err(Error::Dimension(format!(
                "cannot narrow axis {axis} of {:?} to {range:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let width = range.len();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(
                &self.data[base + range.start * inner..base + range.end * inner],
            );
        }
        let mut shape = self.shape.clone();
        shape[axis] = width;
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::Dimension(format!("concat axis {axis} out of range")));
        }
        for p in parts {
            let same = p.shape.len() == rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::Dimension(format!(
                    "concat shapes disagree: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-wise argmax of a 2-D tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (rows, cols) = self.dims2()?;
        Ok((0..rows)
            .map(|r| {
                let row = &self.data[r * cols..(r + 1) * cols];
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Geometry of a 2-D cross-correlation over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[batch, in_channels, height, width], &[out_channels, kc, kh, kw]) = (input, kernels)
        else {
            return Err(Error::Dimension(format!(
                "conv2d expects [B,C,H,W] input and [N,C,k,k] kernels, got {input:?} and {kernels:?}"
            )));
        };
        if kc != in_channels {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input has {in_channels}, kernels expect {kc}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernels must be square with odd extent, got {kh}x{kw}"
            )));
        }
        out_extent(height, kh, stride, padding)
            .and_then(|oh| out_extent(width, kw, stride, padding).map(|ow| (oh, ow)))
            .map(|(out_height, out_width)| ConvGeometry {
                batch,
                in_channels,
                out_channels,
                height,
                width,
                kernel: kh,
                stride,
                padding,
                out_height,
                out_width,
            })
    }
}

/// Output extent of a strided, padded window; must be integral.
pub fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let padded = size + 2 * padding;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return Err(Error::Config(format!(
            "non-integral conv output extent: ({size} + 2*{padding} - {kernel}) / {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) fn conv2d_raw(x: &[f64], k: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (hw_out, ks) = (g.out_height * g.out_width, g.kernel);
    let mut out = vec![0.0; g.batch * g.out_channels * hw_out];
    for b in 0..g.batch {
        for n in 0..g.out_channels {
            let dst = &mut out[(b * g.out_channels + n) * hw_out..][..hw_out];
            if let Some(bias) = bias {
                dst.fill(bias[n]);
            }
            for c in 0..g.in_channels {
                let src = &x[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                let ker = &k[(n * g.in_channels + c) * ks * ks..][..ks * ks];
                for oy in 0..g.out_height {
                    for ox in 0..g.out_width {
                        let mut acc = 0.0;
                        for ky in 0..ks {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.height as isize {
                                continue;
                            }
                            for kx in 0..ks {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.width as isize {
                                    continue;
                                }
                                acc += ker[ky * ks + kx] * src[iy as usize * g.width + ix as usize];
                            }
                        }
                        dst[oy * g.out_width + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Adjoints of a cross-correlation with respect to input and kernels.
pub(crate) fn conv2d_backward_raw(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>) {
    let (hw_out, ks) = (g.out_height * g.out_width, g.kernel);
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for b in 0..g.batch {
        for n in 0..g.out_channels {
            let grad = &dy[(b * g.out_channels + n) * hw_out..][..hw_out];
            for c in 0..g.in_channels {
                let xoff = (b * g.in_channels + c) * g.height * g.width;
                let koff = (n * g.in_channels + c) * ks * ks;
                for oy in 0..g.out_height {
                    for ox in 0..g.out_width {
                        let gv = grad[oy * g.out_width + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..ks {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.height as isize {
                                continue;
                            }
                            for kx in 0..ks {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.width as isize {
                                    continue;
                                }
                                let xi = xoff + iy as usize * g.width + ix as usize;
                                dk[koff + ky * ks + kx] += gv * x[xi];
                                dx[xi] += gv * k[koff + ky * ks + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Flat indices selected by a per-axis list of ranges (row-major order).
pub(crate) fn block_indices(
    shape: &[usize],
    selection: &[Vec<Range<usize>>],
) -> Result<Vec<usize>> {
    if shape.len() != selection.len() {
        return Err(Error::Dimension(format!(
            "selection rank {} does not match shape {shape:?}",
            selection.len()
        )));
    }
    for (axis, ranges) in selection.iter().enumerate() {
        if ranges
            .iter()
            .any(|r| r.end > shape[axis] || r.start > r.end)
        {
            return Err(Error::Dimension(format!(
                "selection {ranges:?} exceeds axis {axis} of {shape:?}"
            )));
        }
    }
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0usize];
    for (axis, ranges) in selection.iter().enumerate() {
        let mut next = Vec::new();
        for base in &out {
            for r in ranges {
                for i in r.clone() {
                    next.push(base + i * strides[axis]);
                }
            }
        }
        out = next;
    }
    Ok(out)
}
