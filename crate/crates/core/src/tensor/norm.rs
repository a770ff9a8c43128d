use std::sync::Arc;

use super::{expect_rank, Element, Tensor};
use crate::error::{Error, Result};

impl<E: Element> Tensor<E> {
    /// Group normalization over `[N, C, H, W]` with per-channel affine.
    pub fn group_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, groups: usize, eps: f64) -> Result<Tensor<E>> {
        expect_rank("group_norm", &self.shape, 4, "input")?;
        let [n, c, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(Error::dim(
                "group_norm",
                format!("affine shapes {:?}/{:?} must be [{c}] (input axis 1)", gamma.shape, beta.shape),
            ));
        }
        let hw = h * w;
        let cg = c / groups;
        let m = cg * hw;
        let inv_m = E::from_f64(1.0 / m as f64);
        let eps = E::from_f64(eps);
        let mut xhat = vec![E::zero(); self.numel()];
        let mut rstd = vec![E::zero(); n * groups];
        for (gi, (src, dst)) in self.data.chunks(m).zip(xhat.chunks_mut(m)).enumerate() {
            let mean = src.iter().copied().sum::<E>() * inv_m;
            let var = src.iter().map(|v| (*v - mean) * (*v - mean)).sum::<E>() * inv_m;
            let r = E::one() / (var + eps).sqrt();
            rstd[gi] = r;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (*s - mean) * r;
            }
        }
        let mut out = xhat.clone();
        for (ci, plane) in out.chunks_mut(hw).enumerate() {
            let ch = ci % c;
            let (gm, bt) = (gamma.data[ch], beta.data[ch]);
            plane.iter_mut().for_each(|v| *v = *v * gm + bt);
        }
        let xhat = Arc::new(xhat);
        let gm = Arc::clone(&gamma.data);
        Ok(Tensor::from_op(self.shape.clone(), out, &[self, gamma, beta], move |g, needs| {
            let mut dgamma = vec![E::zero(); c];
            let mut dbeta = vec![E::zero(); c];
            if needs[1] || needs[2] {
                for (ci, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = ci % c;
                    dbeta[ch] += gp.iter().copied().sum();
                    dgamma[ch] += gp.iter().zip(xp).map(|(a, b)| *a * *b).sum();
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![E::zero(); g.len()];
                for gi in 0..n * groups {
                    let range = gi * m..(gi + 1) * m;
                    let (gs, xs) = (&g[range.clone()], &xhat[range.clone()]);
                    let mut sum_dxhat = E::zero();
                    let mut sum_dxhat_x = E::zero();
                    for (j, (gv, xv)) in gs.iter().zip(xs).enumerate() {
                        let ch = (gi % groups) * cg + j / hw;
                        let d = *gv * gm[ch];
                        sum_dxhat += d;
                        sum_dxhat_x += d * *xv;
                    }
                    let (mean_d, mean_dx) = (sum_dxhat * inv_m, sum_dxhat_x * inv_m);
                    let r = rstd[gi];
                    for (j, (o, (gv, xv))) in dx[range].iter_mut().zip(gs.iter().zip(xs)).enumerate() {
                        let ch = (gi % groups) * cg + j / hw;
                        *o = r * (*gv * gm[ch] - mean_d - *xv * mean_dx);
                    }
                }
                dx
            });
            vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_groups_have_zero_mean_unit_variance() {
        let data: Vec<f64> = (0..2 * 4 * 3 * 3).map(|i| (i as f64 * 0.7).sin() * 3.0 + 1.0).collect();
        let x = Tensor::<f64>::new(vec![2, 4, 3, 3], data).unwrap();
        let y = x
            .group_norm(&Tensor::ones(vec![4]), &Tensor::zeros(vec![4]), 2, 1e-12)
            .unwrap();
        for group in y.data().chunks(18) {
            let mean: f64 = group.iter().sum::<f64>() / 18.0;
            let var: f64 = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn indivisible_groups_rejected() {
        let x = Tensor::<f32>::ones(vec![1, 6, 2, 2]);
        assert!(x.group_norm(&Tensor::ones(vec![6]), &Tensor::zeros(vec![6]), 4, 1e-5).is_err());
    }
}
