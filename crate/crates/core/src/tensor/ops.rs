//! Elementwise maps, reductions, reshapes and the few broadcast patterns the
//! networks need.

use std::sync::Arc;

use super::{expect_rank, same_shape, Element, Tensor};
use crate::error::{Error, Result};

#[inline]
fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("add", &self.shape, &other.shape)?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| *a + *b).collect();
        Ok(Tensor::from_op(self.shape.clone(), data, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("sub", &self.shape, &other.shape)?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| *a - *b).collect();
        Ok(Tensor::from_op(self.shape.clone(), data, &[self, other], |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -*v).collect()),
            ]
        }))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("mul", &self.shape, &other.shape)?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| *a * *b).collect();
        let (a, b) = (Arc::clone(&self.data), Arc::clone(&other.data));
        Ok(Tensor::from_op(self.shape.clone(), data, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(b.iter()).map(|(g, b)| *g * *b).collect()),
                needs[1].then(|| g.iter().zip(a.iter()).map(|(g, a)| *g * *a).collect()),
            ]
        }))
    }

    /// Elementwise maximum. Ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("maximum", &self.shape, &other.shape)?;
        let pick_self: Vec<bool> = self.data.iter().zip(other.data.iter()).map(|(a, b)| a >= b).collect();
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| if a >= b { *a } else { *b })
            .collect();
        Ok(Tensor::from_op(self.shape.clone(), data, &[self, other], move |g, needs| {
            let route = |want: bool| -> Vec<E> {
                g.iter()
                    .zip(&pick_self)
                    .map(|(g, s)| if *s == want { *g } else { E::zero() })
                    .collect()
            };
            vec![needs[0].then(|| route(true)), needs[1].then(|| route(false))]
        }))
    }

    pub fn scale(&self, s: f64) -> Tensor<E> {
        let s = E::from_f64(s);
        let data = self.data.iter().map(|v| *v * s).collect();
        Tensor::from_op(self.shape.clone(), data, &[self], move |g, _| {
            vec![Some(g.iter().map(|v| *v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<E> {
        let s = E::from_f64(s);
        let data = self.data.iter().map(|v| *v + s).collect();
        Tensor::from_op(self.shape.clone(), data, &[self], |g, _| vec![Some(g.to_vec())])
    }

    /// Untracked elementwise map; for inference-only transforms.
    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| f(*v)).collect()),
            node: None,
        }
    }

    pub fn silu(&self) -> Tensor<E> {
        let x = Arc::clone(&self.data);
        let data = self.data.iter().map(|v| *v * sigmoid(*v)).collect();
        Tensor::from_op(self.shape.clone(), data, &[self], move |g, _| {
            let dx = g
                .iter()
                .zip(x.iter())
                .map(|(g, x)| {
                    let s = sigmoid(*x);
                    *g * s * (E::one() + *x * (E::one() - s))
                })
                .collect();
            vec![Some(dx)]
        })
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let data: Vec<E> = self.data.iter().map(|v| sigmoid(*v)).collect();
        let y = Arc::new(data.clone());
        Tensor::from_op(self.shape.clone(), data, &[self], move |g, _| {
            vec![Some(g.iter().zip(y.iter()).map(|(g, y)| *g * *y * (E::one() - *y)).collect())]
        })
    }

    pub fn relu(&self) -> Tensor<E> {
        let x = Arc::clone(&self.data);
        let data = self.data.iter().map(|v| v.max(E::zero())).collect();
        Tensor::from_op(self.shape.clone(), data, &[self], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(x.iter())
                    .map(|(g, x)| if *x > E::zero() { *g } else { E::zero() })
                    .collect(),
            )]
        })
    }

    pub fn sum(&self) -> Tensor<E> {
        let total: E = self.data.iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![total], &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Same buffer, new shape. Shares storage; the gradient passes through.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<E>> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        if self.node.is_none() {
            return Ok(Tensor {
                shape,
                data: Arc::clone(&self.data),
                node: None,
            });
        }
        Ok(Tensor::from_op_shared(shape, Arc::clone(&self.data), &[self], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Concatenates along `axis`. All other axes must agree.
    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dim("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape.iter().enumerate().all(|(i, d)| i == axis || *d == first.shape[i]);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("shape {:?} incompatible with {:?} off axis {axis}", p.shape, first.shape),
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape[axis] * inner).collect();
        let total_width: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total_width);
        for o in 0..outer {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        Ok(Tensor::from_op(shape, data, parts, move |g, needs| {
            let mut offset = 0;
            let mut out = Vec::with_capacity(widths.len());
            for (i, w) in widths.iter().enumerate() {
                if needs[i] {
                    let mut gi = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        let start = o * total_width + offset;
                        gi.extend_from_slice(&g[start..start + w]);
                    }
                    out.push(Some(gi));
                } else {
                    out.push(None);
                }
                offset += w;
            }
            out
        }))
    }

    /// Adds `b[N, C]` to every spatial position of `self[N, C, H, W]`.
    pub fn add_channel_bias(&self, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, c, hw) = nchw_dims("add_channel_bias", &self.shape)?;
        check_nc("add_channel_bias", b, n, c)?;
        let mut data = self.to_vec();
        for (plane, bias) in data.chunks_mut(hw).zip(b.data.iter()) {
            plane.iter_mut().for_each(|v| *v += *bias);
        }
        Ok(Tensor::from_op(self.shape.clone(), data, &[self, b], move |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.chunks(hw).map(|p| p.iter().copied().sum()).collect()),
            ]
        }))
    }

    /// Scales every channel plane of `self[N, C, H, W]` by `gate[N, C]`.
    pub fn mul_channel(&self, gate: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, c, hw) = nchw_dims("mul_channel", &self.shape)?;
        check_nc("mul_channel", gate, n, c)?;
        let mut data = self.to_vec();
        for (plane, s) in data.chunks_mut(hw).zip(gate.data.iter()) {
            plane.iter_mut().for_each(|v| *v *= *s);
        }
        let (x, s) = (Arc::clone(&self.data), Arc::clone(&gate.data));
        Ok(Tensor::from_op(self.shape.clone(), data, &[self, gate], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = g.to_vec();
                for (plane, s) in dx.chunks_mut(hw).zip(s.iter()) {
                    plane.iter_mut().for_each(|v| *v *= *s);
                }
                dx
            });
            let ds = needs[1].then(|| {
                g.chunks(hw)
                    .zip(x.chunks(hw))
                    .map(|(g, x)| g.iter().zip(x).map(|(a, b)| *a * *b).sum())
                    .collect()
            });
            vec![dx, ds]
        }))
    }

    /// Scales every channel of `self[N, C, H, W]` by the map `gate[N, 1, H, W]`.
    pub fn mul_spatial(&self, gate: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, c, hw) = nchw_dims("mul_spatial", &self.shape)?;
        if gate.shape != [n, 1, self.shape[2], self.shape[3]] {
            return Err(Error::dim(
                "mul_spatial",
                format!("gate shape {:?} must be [{n}, 1, H, W] for input {:?}", gate.shape, self.shape),
            ));
        }
        let mut data = self.to_vec();
        for (i, plane) in data.chunks_mut(hw).enumerate() {
            let s = &gate.data[(i / c) * hw..(i / c + 1) * hw];
            plane.iter_mut().zip(s).for_each(|(v, s)| *v *= *s);
        }
        let (x, s) = (Arc::clone(&self.data), Arc::clone(&gate.data));
        Ok(Tensor::from_op(self.shape.clone(), data, &[self, gate], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = g.to_vec();
                for (i, plane) in dx.chunks_mut(hw).enumerate() {
                    let s = &s[(i / c) * hw..(i / c + 1) * hw];
                    plane.iter_mut().zip(s).for_each(|(v, s)| *v *= *s);
                }
                dx
            });
            let ds = needs[1].then(|| {
                let mut ds = vec![E::zero(); n * hw];
                for (i, (gp, xp)) in g.chunks(hw).zip(x.chunks(hw)).enumerate() {
                    let dst = &mut ds[(i / c) * hw..(i / c + 1) * hw];
                    for ((d, g), x) in dst.iter_mut().zip(gp).zip(xp) {
                        *d += *g * *x;
                    }
                }
                ds
            });
            vec![dx, ds]
        }))
    }

    /// Spatial mean: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<E>> {
        let (n, c, hw) = nchw_dims("global_avg_pool", &self.shape)?;
        let inv = E::from_f64(1.0 / hw as f64);
        let data = self
            .data
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<E>() * inv)
            .collect();
        Ok(Tensor::from_op(vec![n, c], data, &[self], move |g, _| {
            let mut dx = Vec::with_capacity(n * c * hw);
            for gv in g {
                dx.extend(std::iter::repeat_n(*gv * inv, hw));
            }
            vec![Some(dx)]
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor on both spatial axes.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor<E>> {
        expect_rank("upsample_nearest", &self.shape, 4, "input")?;
        if factor == 0 {
            return Err(Error::Contract("upsample factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let [n, c, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in self.data.chunks(h * w) {
            for y in 0..oh {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for v in row {
                    data.extend(std::iter::repeat_n(*v, factor));
                }
            }
        }
        Ok(Tensor::from_op(vec![n, c, oh, ow], data, &[self], move |g, _| {
            let mut dx = vec![E::zero(); n * c * h * w];
            for (gp, dp) in g.chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
                for y in 0..oh {
                    for x in 0..ow {
                        dp[(y / factor) * w + x / factor] += gp[y * ow + x];
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<E> {
        let d = *self.shape.last().expect("tensor has rank >= 1");
        let mut data = self.to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut z = E::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let y = Arc::new(data.clone());
        Tensor::from_op(self.shape.clone(), data, &[self], move |g, _| {
            let mut dx = vec![E::zero(); g.len()];
            for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                let dot: E = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                for ((o, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = *y * (*g - dot);
                }
            }
            vec![Some(dx)]
        })
    }
}

pub(crate) fn nchw_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    expect_rank(op, shape, 4, "input")?;
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

fn check_nc<E: Element>(op: &'static str, t: &Tensor<E>, n: usize, c: usize) -> Result<()> {
    if t.shape != [n, c] {
        return Err(Error::dim(
            op,
            format!("per-channel operand has shape {:?}, expected [{n}, {c}]", t.shape),
        ));
    }
    Ok(())
}
