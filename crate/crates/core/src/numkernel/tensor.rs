use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {pos}")));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// length contract.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return shape_err("transpose needs a matrix");
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_raw(vec![c, r], out))
    }
}

fn check_finite(t: Tensor, what: &str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `M · v` for an `r×c` matrix and length-`c` vector.
pub fn matvec(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    if m.shape.len() != 2 || v.shape.len() != 1 || m.shape[1] != v.shape[0] {
        return shape_err(format!("matvec {:?} · {:?}", m.shape, v.shape));
    }
    check_finite(Tensor::vector(matvec_raw(&m.data, m.shape[0], m.shape[1], &v.data)), "matvec")
}

/// `Mᵀ · v` for an `r×c` matrix and length-`r` vector.
pub fn matvec_t(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    if m.shape.len() != 2 || v.shape.len() != 1 || m.shape[0] != v.shape[0] {
        return shape_err(format!("matvec_t {:?}ᵀ · {:?}", m.shape, v.shape));
    }
    check_finite(
        Tensor::vector(matvec_t_raw(&m.data, m.shape[0], m.shape[1], &v.data)),
        "matvec_t",
    )
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return shape_err(format!("matmul {:?} · {:?}", a.shape, b.shape));
    }
    let (r, k, c) = (a.shape[0], a.shape[1], b.shape[1]);
    check_finite(
        Tensor::from_raw(vec![r, c], matmul_raw(&a.data, &b.data, r, k, c)),
        "matmul",
    )
}

/// Cross-correlation of a `channels×length` signal with `out×in×k` kernels.
///
/// With `same_padding` the signal is zero-padded by `k/2` on both sides and
/// the output length equals the input length; otherwise the output has
/// length `length - k + 1`.
pub fn conv1d(signal: &Tensor, kernels: &Tensor, same_padding: bool) -> Result<Tensor> {
    let (geom, out) = conv_geometry(signal, kernels, same_padding)?;
    let data = conv1d_raw(&signal.data, &kernels.data, &geom);
    check_finite(Tensor::from_raw(vec![out, geom.out_len], data), "conv1d")
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub k: usize,
    pub pad: usize,
    pub out_len: usize,
}

pub(crate) fn conv_geometry(
    signal: &Tensor,
    kernels: &Tensor,
    same_padding: bool,
) -> Result<(ConvGeom, usize)> {
    if signal.shape.len() != 2 || kernels.shape.len() != 3 {
        return shape_err(format!(
            "conv1d expects signal [c, len] and kernels [out, in, k], got {:?} and {:?}",
            signal.shape, kernels.shape
        ));
    }
    let (c_in, len) = (signal.shape[0], signal.shape[1]);
    let (c_out, k_in, k) = (kernels.shape[0], kernels.shape[1], kernels.shape[2]);
    if k_in != c_in {
        return shape_err(format!("conv1d channel mismatch: signal {c_in}, kernels {k_in}"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("conv1d kernel width 0".into()));
    }
    let (pad, out_len) = if same_padding {
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(
                "same padding needs an odd kernel width".into(),
            ));
        }
        (k / 2, len)
    } else {
        if k > len {
            return shape_err("conv1d kernel wider than signal");
        }
        (0, len - k + 1)
    };
    Ok((
        ConvGeom {
            c_in,
            c_out,
            len,
            k,
            pad,
            out_len,
        },
        c_out,
    ))
}

pub(crate) fn matvec_raw(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            let row = &m[i * cols..(i + 1) * cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v) {
                acc += a * b;
            }
            acc
        })
        .collect()
}

pub(crate) fn matvec_t_raw(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let vi = v[i];
        let row = &m[i * cols..(i + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vi;
        }
    }
    out
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * c..(p + 1) * c];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn conv1d_raw(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.c_out * g.out_len];
    for o in 0..g.c_out {
        let orow = &mut out[o * g.out_len..(o + 1) * g.out_len];
        for c in 0..g.c_in {
            let xrow = &x[c * g.len..(c + 1) * g.len];
            let base = (o * g.c_in + c) * g.k;
            for j in 0..g.k {
                let (lo, hi) = tap_range(g, j);
                if lo >= hi {
                    continue;
                }
                let wv = w[base + j];
                let src = &xrow[lo + j - g.pad..hi + j - g.pad];
                for (ov, xv) in orow[lo..hi].iter_mut().zip(src) {
                    *ov += wv * xv;
                }
            }
        }
    }
    out
}

/// Output positions `t` for which tap `j` reads inside the signal.
fn tap_range(g: &ConvGeom, j: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(j);
    let hi = (g.len + g.pad).saturating_sub(j).min(g.out_len);
    (lo, hi)
}

/// Gradients of a conv1d w.r.t. input and kernels given the output gradient.
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; g.c_in * g.len];
    let mut gw = vec![0.0; g.c_out * g.c_in * g.k];
    for o in 0..g.c_out {
        let grow = &gout[o * g.out_len..(o + 1) * g.out_len];
        for c in 0..g.c_in {
            let xrow = &x[c * g.len..(c + 1) * g.len];
            let gxrow = &mut gx[c * g.len..(c + 1) * g.len];
            let base = (o * g.c_in + c) * g.k;
            for j in 0..g.k {
                let (lo, hi) = tap_range(g, j);
                if lo >= hi {
                    continue;
                }
                let wv = w[base + j];
                let (a, b) = (lo + j - g.pad, hi + j - g.pad);
                let mut acc = 0.0;
                for ((gv, xv), gxv) in grow[lo..hi].iter().zip(&xrow[a..b]).zip(&mut gxrow[a..b]) {
                    acc += gv * xv;
                    *gxv += gv * wv;
                }
                gw[base + j] += acc;
            }
        }
    }
    (gx, gw)
}
