//! 2-D convolution (NCHW, im2col + GEMM).

use std::sync::Arc;

use super::{expect_rank, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride - pad + kx` lies in `[0, w)`.
fn valid_cols(g: &Geometry, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx { (g.w + g.pad - kx - 1) / g.stride + 1 } else { 0 };
    (lo.min(g.ow), hi.min(g.ow).max(lo.min(g.ow)))
}

fn im2col<E: Element>(g: &Geometry, x: &[E], cols: &mut [E]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_cols(g, kx);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for (oy, out_row) in dst.chunks_mut(g.ow).enumerate() {
                    let iy = (oy * g.stride + ky).wrapping_sub(g.pad);
                    if iy >= g.h {
                        out_row.fill(E::zero());
                        continue;
                    }
                    out_row[..lo].fill(E::zero());
                    out_row[hi..].fill(E::zero());
                    if lo == hi {
                        continue;
                    }
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, v) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<E: Element>(g: &Geometry, cols: &[E], dx: &mut [E]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_cols(g, kx);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for (oy, in_row) in src.chunks(g.ow).enumerate() {
                    let iy = (oy * g.stride + ky).wrapping_sub(g.pad);
                    if iy >= g.h || lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kx - g.pad;
                    let dst = &mut plane[iy * g.w + first..(iy + 1) * g.w];
                    for (d, v) in dst.iter_mut().step_by(g.stride).zip(&in_row[lo..hi]) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    /// `self[N, Cin, H, W] * weight[Cout, Cin, kh, kw] (+ bias[Cout])`.
    pub fn conv2d(
        &self,
        weight: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<E>> {
        expect_rank("conv2d", &self.shape, 4, "input")?;
        expect_rank("conv2d", &weight.shape, 4, "weight")?;
        let [n, c_in, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        let [c_out, wc, kh, kw] = [weight.shape[0], weight.shape[1], weight.shape[2], weight.shape[3]];
        if wc != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("input channels (axis 1) = {c_in} but weight expects {wc} (weight axis 1)"),
            ));
        }
        if let Some(b) = bias {
            if b.shape != [c_out] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias shape {:?} must be [{c_out}] (weight axis 0)", b.shape),
                ));
            }
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim(
                "conv2d",
                format!("padded spatial dims ({}, {}) smaller than kernel ({kh}, {kw}) on axes 2/3", h + 2 * padding, w + 2 * padding),
            ));
        }
        let g = Geometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let (k, ohw) = (g.k(), g.oh * g.ow);
        let in_plane = c_in * h * w;
        let mut out = vec![E::zero(); n * c_out * ohw];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![E::zero(); k * ohw] };
        for (i, dst) in out.chunks_mut(c_out * ohw).enumerate() {
            let xi = &self.data[i * in_plane..(i + 1) * in_plane];
            let b_mat: &[E] = if g.is_pointwise() {
                xi
            } else {
                im2col(&g, xi, &mut cols);
                &cols
            };
            if let Some(b) = bias {
                for (row, bv) in dst.chunks_mut(ohw).zip(b.data.iter()) {
                    row.fill(*bv);
                }
            }
            let beta = if bias.is_some() { E::one() } else { E::zero() };
            E::gemm(false, false, c_out, ohw, k, E::one(), &weight.data, b_mat, beta, dst);
        }

        let x = Arc::clone(&self.data);
        let wt = Arc::clone(&weight.data);
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(Tensor::from_op(vec![n, c_out, g.oh, g.ow], out, &parents, move |grad, needs| {
            let mut dx = needs[0].then(|| vec![E::zero(); n * in_plane]);
            let mut dw = needs[1].then(|| vec![E::zero(); c_out * k]);
            let db = (has_bias && needs[2]).then(|| {
                let mut db = vec![E::zero(); c_out];
                for gi in grad.chunks(c_out * ohw) {
                    for (d, row) in db.iter_mut().zip(gi.chunks(ohw)) {
                        *d += row.iter().copied().sum();
                    }
                }
                db
            });
            let mut cols = vec![E::zero(); if g.is_pointwise() { 0 } else { k * ohw }];
            let mut dcols = vec![E::zero(); if dx.is_some() { k * ohw } else { 0 }];
            for i in 0..n {
                let gi = &grad[i * c_out * ohw..(i + 1) * c_out * ohw];
                if let Some(dw) = dw.as_mut() {
                    let xi = &x[i * in_plane..(i + 1) * in_plane];
                    let b_mat: &[E] = if g.is_pointwise() {
                        xi
                    } else {
                        im2col(&g, xi, &mut cols);
                        &cols
                    };
                    E::gemm(false, true, c_out, k, ohw, E::one(), gi, b_mat, E::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxi = &mut dx[i * in_plane..(i + 1) * in_plane];
                    if g.is_pointwise() {
                        E::gemm(true, false, k, ohw, c_out, E::one(), &wt, gi, E::one(), dxi);
                    } else {
                        E::gemm(true, false, k, ohw, c_out, E::one(), &wt, gi, E::zero(), &mut dcols);
                        col2im(&g, &dcols, dxi);
                    }
                }
            }
            let mut res = vec![dx, dw];
            if has_bias {
                res.push(db);
            }
            res
        }))
    }
}
