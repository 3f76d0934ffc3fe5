//! Forward and reverse kernels. All tensors are NCHW or (N, F).

use super::gemm::{gemm, Mat};
use super::{Result, Tensor, TensorError};
use serde::{Deserialize, Serialize};

/// `floor((n - k + 2p) / s) + 1`, or `None` when the window does not fit.
pub fn conv_output_size(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weights: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weights.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("expected 4-D input and filters, got {:?} and {:?}", input, weights),
            ));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, wcin, kh, kw) = (weights[0], weights[1], weights[2], weights[3]);
        if wcin != cin {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "input {:?} has {} channels but filters {:?} expect {}",
                    input, cin, weights, wcin
                ),
            ));
        }
        if kh != kw {
            return Err(TensorError::shape("conv2d", format!("non-square filter {:?}", weights)));
        }
        let ho = conv_output_size(h, kh, stride, pad);
        let wo = conv_output_size(w, kw, stride, pad);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok(ConvGeom {
                n,
                cin,
                h,
                w,
                cout,
                k: kh,
                stride,
                pad,
                ho,
                wo,
            }),
            _ => Err(TensorError::shape(
                "conv2d",
                format!(
                    "filter {}x{} with stride {} and padding {} does not fit input {:?}",
                    kh, kw, stride, pad, input
                ),
            )),
        }
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `lo..hi` whose input column `oj * stride + kj - pad`
    /// falls inside the plane.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.w + p > kj {
            ((self.w + p - kj - 1) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ohw = self.out_hw();
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    let (lo, hi) = self.valid_cols(kj);
                    for oi in 0..self.ho {
                        let ii = (oi * s + ki) as isize - p;
                        let line = &mut dst[oi * self.wo..(oi + 1) * self.wo];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[ii as usize * self.w..(ii as usize + 1) * self.w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if lo < hi {
                            let j0 = lo * s + kj - self.pad;
                            if s == 1 {
                                line[lo..hi].copy_from_slice(&src[j0..j0 + hi - lo]);
                            } else {
                                for (v, &x) in line[lo..hi].iter_mut().zip(src[j0..].iter().step_by(s)) {
                                    *v = x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let ohw = self.out_hw();
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    let j0 = lo * s + kj - self.pad;
                    for oi in 0..self.ho {
                        let ii = (oi * s + ki) as isize - p;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ii as usize * self.w..(ii as usize + 1) * self.w];
                        let line = &src[oi * self.wo + lo..oi * self.wo + hi];
                        if s == 1 {
                            dst[j0..j0 + hi - lo]
                                .iter_mut()
                                .zip(line)
                                .for_each(|(d, v)| *d += v);
                        } else {
                            for (d, v) in dst[j0..].iter_mut().step_by(s).zip(line) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<[Vec<f64>; 2]> = const { std::cell::RefCell::new([Vec::new(), Vec::new()]) };
}

/// Per-thread buffer of at least `len` values with unspecified contents,
/// returned to its slot on drop. Callers overwrite it before reading.
struct Scratch {
    slot: usize,
    len: usize,
    buf: Vec<f64>,
}

fn take_scratch(slot: usize, len: usize) -> Scratch {
    let mut buf = SCRATCH.with(|s| std::mem::take(&mut s.borrow_mut()[slot]));
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    Scratch { slot, len, buf }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let buf = std::mem::take(&mut self.buf);
        let _ = SCRATCH.try_with(|s| s.borrow_mut()[self.slot] = buf);
    }
}

impl std::ops::Deref for Scratch {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.buf[..self.len]
    }
}

impl std::ops::DerefMut for Scratch {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.buf[..self.len]
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.shape() != [g.cout] {
            return Err(TensorError::shape(
                "conv2d",
                format!("bias {:?} does not match {} filters", b.shape(), g.cout),
            ));
        }
    }
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.out_hw();
    let mut out = vec![0.0; g.n * out_len];
    let mut cols = take_scratch(0, if g.is_pointwise() { 0 } else { g.patch_len() * g.out_hw() });
    let wm = Mat::new(w.data(), g.cout, g.patch_len());
    for i in 0..g.n {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        let yi = &mut out[i * out_len..(i + 1) * out_len];
        if let Some(b) = b {
            for (co, chunk) in yi.chunks_mut(g.out_hw()).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[co]);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(wm, Mat::new(xi, g.patch_len(), g.out_hw()), beta, yi);
        } else {
            g.im2col(xi, &mut cols);
            gemm(wm, Mat::new(&cols, g.patch_len(), g.out_hw()), beta, yi);
        }
    }
    Ok((Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)?, g))
}

/// Accumulates filter, bias and (optionally) input gradients.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let in_len = g.cin * g.h * g.w;
    let ohw = g.out_hw();
    let out_len = g.cout * ohw;
    let k = g.patch_len();
    let mut cols = take_scratch(0, if g.is_pointwise() { 0 } else { k * ohw });
    let mut dcols = take_scratch(1, if g.is_pointwise() { 0 } else { k * ohw });
    let wm = Mat::new(w, g.cout, k);

    if let Some(db) = db {
        for i in 0..g.n {
            let dyi = &dy[i * out_len..(i + 1) * out_len];
            for (co, chunk) in dyi.chunks(ohw).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
    }

    for i in 0..g.n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let dyi = Mat::new(&dy[i * out_len..(i + 1) * out_len], g.cout, ohw);
        let colsm = if g.is_pointwise() {
            Mat::new(xi, k, ohw)
        } else {
            g.im2col(xi, &mut cols);
            Mat::new(&cols, k, ohw)
        };
        // dW += dY * cols^T
        gemm(dyi, colsm.t(), 1.0, dw);
        if let Some(dx) = dx.as_deref_mut() {
            let dxi = &mut dx[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                gemm(wm.t(), dyi, 1.0, dxi);
            } else {
                gemm(wm.t(), dyi, 0.0, &mut dcols);
                g.col2im_add(&dcols, dxi);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(TensorError::shape("pool2d", format!("expected 4-D input, got {:?}", input)));
        }
        let (h, w) = (input[2], input[3]);
        match (
            conv_output_size(h, window, stride, 0),
            conv_output_size(w, window, stride, 0),
        ) {
            (Some(ho), Some(wo)) => Ok(PoolGeom {
                planes: input[0] * input[1],
                h,
                w,
                window,
                stride,
                ho,
                wo,
            }),
            _ => Err(TensorError::shape(
                "pool2d",
                format!(
                    "window {}x{} with stride {} larger than input {:?}",
                    window, window, stride, input
                ),
            )),
        }
    }
}

/// Returns the pooled values and, for max pooling, the flat input index of
/// each window's first maximal element.
pub(crate) fn pool2d_forward(x: &Tensor, kind: PoolKind, g: &PoolGeom) -> (Vec<f64>, Vec<u32>) {
    let (p, s) = (g.window, g.stride);
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    let mut argmax = Vec::new();
    if kind == PoolKind::Max {
        argmax.reserve(g.planes * g.ho * g.wo);
    }
    let inv = 1.0 / (p * p) as f64;
    let data = x.data();
    for plane in 0..g.planes {
        let base = plane * g.h * g.w;
        for oi in 0..g.ho {
            for oj in 0..g.wo {
                match kind {
                    PoolKind::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = base + oi * s * g.w + oj * s;
                        for ki in 0..p {
                            let row = base + (oi * s + ki) * g.w + oj * s;
                            for kj in 0..p {
                                let v = data[row + kj];
                                // strict comparison keeps the first row-major maximum
                                if v > best {
                                    best = v;
                                    best_idx = row + kj;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx as u32);
                    }
                    PoolKind::Avg => {
                        let mut sum = 0.0;
                        for ki in 0..p {
                            let row = base + (oi * s + ki) * g.w + oj * s;
                            sum += data[row..row + p].iter().sum::<f64>();
                        }
                        out.push(sum * inv);
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn pool2d_backward(
    kind: PoolKind,
    g: &PoolGeom,
    argmax: &[u32],
    dy: &[f64],
    dx: &mut [f64],
) {
    match kind {
        PoolKind::Max => {
            for (&idx, &d) in argmax.iter().zip(dy) {
                dx[idx as usize] += d;
            }
        }
        PoolKind::Avg => {
            let (p, s) = (g.window, g.stride);
            let inv = 1.0 / (p * p) as f64;
            for plane in 0..g.planes {
                let base = plane * g.h * g.w;
                let obase = plane * g.ho * g.wo;
                for oi in 0..g.ho {
                    for oj in 0..g.wo {
                        let d = dy[obase + oi * g.wo + oj] * inv;
                        for ki in 0..p {
                            let row = base + (oi * s + ki) * g.w + oj * s;
                            dx[row..row + p].iter_mut().for_each(|v| *v += d);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_rule() {
        assert_eq!(conv_output_size(5, 2, 1, 0), Some(4));
        assert_eq!(conv_output_size(4, 2, 1, 0), Some(3));
        assert_eq!(conv_output_size(32, 3, 1, 0), Some(30));
        assert_eq!(conv_output_size(30, 1, 2, 0), Some(15));
        assert_eq!(conv_output_size(2, 3, 1, 0), None);
        assert_eq!(conv_output_size(2, 3, 1, 1), Some(2));
        assert_eq!(conv_output_size(5, 2, 0, 0), None);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros(vec![1, 2, 5, 5]);
        let w = Tensor::zeros(vec![1, 3, 2, 2]);
        let err = conv2d_forward(&x, &w, None, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 5, 5]") && msg.contains("[1, 3, 2, 2]"), "{msg}");
    }

    #[test]
    fn padded_conv_matches_direct_sum() {
        let x: Vec<f64> = (0..2 * 4 * 4).map(|v| (v as f64 * 0.37).cos()).collect();
        let w: Vec<f64> = (0..3 * 2 * 3 * 3).map(|v| (v as f64 * 0.11).sin()).collect();
        let xt = Tensor::new(vec![1, 2, 4, 4], x.clone()).unwrap();
        let wt = Tensor::new(vec![3, 2, 3, 3], w.clone()).unwrap();
        let (y, g) = conv2d_forward(&xt, &wt, None, 2, 1).unwrap();
        assert_eq!((g.ho, g.wo), (2, 2));
        for co in 0..3 {
            for oi in 0..2 {
                for oj in 0..2 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ii = (oi * 2 + ki) as isize - 1;
                                let jj = (oj * 2 + kj) as isize - 1;
                                if (0..4).contains(&ii) && (0..4).contains(&jj) {
                                    s += x[ci * 16 + ii as usize * 4 + jj as usize]
                                        * w[((co * 2 + ci) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    let got = y.data()[co * 4 + oi * 2 + oj];
                    assert!((got - s).abs() < 1e-14);
                }
            }
        }
    }
}
