use std::sync::Arc;

use super::{same_shape, Element, Tensor};
use crate::error::{Error, Result};

impl<E: Element> Tensor<E> {
    /// Mean squared error, mean-reduced over every element.
    pub fn mse_loss(&self, target: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("mse_loss", &self.shape, &target.shape)?;
        let diff = self.sub(target)?;
        Ok(diff.mul(&diff)?.mean())
    }

    /// Pixel-wise cross entropy for `self[N, C, H, W]` logits against integer
    /// labels laid out as `[N, H, W]`, mean-reduced over pixels.
    ///
    /// Only binary labels are accepted for two-class logits.
    pub fn cross_entropy(&self, labels: &[u8]) -> Result<Tensor<E>> {
        super::expect_rank("cross_entropy", &self.shape, 4, "logits")?;
        let [n, c, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for logits {:?}; expected N*H*W = {}", labels.len(), self.shape, n * hw),
            ));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l as usize >= c) {
            return Err(Error::Data(format!(
                "label {l} at pixel {i} outside {{0..{}}}",
                c - 1
            )));
        }
        let mut probs = vec![E::zero(); self.numel()];
        let mut total = E::zero();
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut m = E::neg_infinity();
                for k in 0..c {
                    m = m.max(self.data[base + k * hw + p]);
                }
                let mut z = E::zero();
                for k in 0..c {
                    let e = (self.data[base + k * hw + p] - m).exp();
                    probs[base + k * hw + p] = e;
                    z += e;
                }
                for k in 0..c {
                    probs[base + k * hw + p] = probs[base + k * hw + p] / z;
                }
                let y = labels[b * hw + p] as usize;
                total += m + z.ln() - self.data[base + y * hw + p];
            }
        }
        let inv = E::from_f64(1.0 / (n * hw) as f64);
        let labels: Arc<Vec<u8>> = Arc::new(labels.to_vec());
        Ok(Tensor::from_op(vec![1], vec![total * inv], &[self], move |g, _| {
            let scale = g[0] * inv;
            let mut dx: Vec<E> = probs.iter().map(|p| *p * scale).collect();
            for b in 0..n {
                for p in 0..hw {
                    let y = labels[b * hw + p] as usize;
                    dx[b * c * hw + y * hw + p] -= scale;
                }
            }
            vec![Some(dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_identical_is_zero() {
        let a = Tensor::<f32>::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(a.mse_loss(&a).unwrap().item(), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Tensor::<f64>::zeros(vec![2, 2, 3, 3]);
        let labels: Vec<u8> = (0..18).map(|i| (i % 2) as u8).collect();
        let ce = logits.cross_entropy(&labels).unwrap().item();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_give_vanishing_loss() {
        // channel 1 large where label is 1, channel 0 large where label is 0
        let labels = [0u8, 1, 1, 0];
        let mut data = vec![0.0; 8];
        for (p, l) in labels.iter().enumerate() {
            data[*l as usize * 4 + p] = 200.0;
        }
        let logits = Tensor::<f64>::from_f64(vec![1, 2, 2, 2], &data).unwrap();
        assert!(logits.cross_entropy(&labels).unwrap().item() < 1e-80);
    }

    #[test]
    fn non_binary_label_is_data_error() {
        let logits = Tensor::<f32>::zeros(vec![1, 2, 1, 2]);
        assert!(matches!(logits.cross_entropy(&[0, 2]), Err(Error::Data(_))));
    }
}
