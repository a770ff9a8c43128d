use std::sync::Arc;

use super::{expect_rank, Element, Tensor};
use crate::error::{Error, Result};

impl<E: Element> Tensor<E> {
    /// `self[N, D] · weight[O, D]ᵀ + bias[O]`.
    pub fn linear(&self, weight: &Tensor<E>, bias: Option<&Tensor<E>>) -> Result<Tensor<E>> {
        expect_rank("linear", &self.shape, 2, "input")?;
        expect_rank("linear", &weight.shape, 2, "weight")?;
        let (n, d) = (self.shape[0], self.shape[1]);
        let o = weight.shape[0];
        if weight.shape[1] != d {
            return Err(Error::dim(
                "linear",
                format!("input features (axis 1) = {d} but weight axis 1 = {}", weight.shape[1]),
            ));
        }
        if let Some(b) = bias {
            if b.shape != [o] {
                return Err(Error::dim("linear", format!("bias shape {:?} must be [{o}]", b.shape)));
            }
        }
        let mut out = vec![E::zero(); n * o];
        if let Some(b) = bias {
            for row in out.chunks_mut(o) {
                row.copy_from_slice(&b.data);
            }
        }
        let beta = if bias.is_some() { E::one() } else { E::zero() };
        E::gemm(false, true, n, o, d, E::one(), &self.data, &weight.data, beta, &mut out);
        let (x, w) = (Arc::clone(&self.data), Arc::clone(&weight.data));
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(Tensor::from_op(vec![n, o], out, &parents, move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![E::zero(); n * d];
                E::gemm(false, false, n, d, o, E::one(), g, &w, E::zero(), &mut dx);
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![E::zero(); o * d];
                E::gemm(true, false, o, d, n, E::one(), g, &x, E::zero(), &mut dw);
                dw
            });
            let mut res = vec![dx, dw];
            if has_bias {
                res.push(needs[2].then(|| {
                    let mut db = vec![E::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                    db
                }));
            }
            res
        }))
    }

    /// Batched matrix product over rank-3 tensors. `trans_a` reads `self` as
    /// `[B, K, M]`, `trans_b` reads `other` as `[B, N, K]`; output is `[B, M, N]`.
    pub fn bmm(&self, other: &Tensor<E>, trans_a: bool, trans_b: bool) -> Result<Tensor<E>> {
        expect_rank("bmm", &self.shape, 3, "lhs")?;
        expect_rank("bmm", &other.shape, 3, "rhs")?;
        let batch = self.shape[0];
        let (m, k) = if trans_a {
            (self.shape[2], self.shape[1])
        } else {
            (self.shape[1], self.shape[2])
        };
        let (k2, n) = if trans_b {
            (other.shape[2], other.shape[1])
        } else {
            (other.shape[1], other.shape[2])
        };
        if other.shape[0] != batch || k != k2 {
            return Err(Error::dim(
                "bmm",
                format!("lhs {:?} (trans {trans_a}) incompatible with rhs {:?} (trans {trans_b})", self.shape, other.shape),
            ));
        }
        let (sa, sb, sc) = (m * k, k * n, m * n);
        let mut out = vec![E::zero(); batch * sc];
        for i in 0..batch {
            E::gemm(
                trans_a,
                trans_b,
                m,
                n,
                k,
                E::one(),
                &self.data[i * sa..(i + 1) * sa],
                &other.data[i * sb..(i + 1) * sb],
                E::zero(),
                &mut out[i * sc..(i + 1) * sc],
            );
        }
        let (a, b) = (Arc::clone(&self.data), Arc::clone(&other.data));
        Ok(Tensor::from_op(vec![batch, m, n], out, &[self, other], move |g, needs| {
            let da = needs[0].then(|| {
                let mut da = vec![E::zero(); batch * sa];
                for i in 0..batch {
                    let gi = &g[i * sc..(i + 1) * sc];
                    let bi = &b[i * sb..(i + 1) * sb];
                    let dst = &mut da[i * sa..(i + 1) * sa];
                    if trans_a {
                        E::gemm(trans_b, true, k, m, n, E::one(), bi, gi, E::zero(), dst);
                    } else {
                        E::gemm(false, !trans_b, m, k, n, E::one(), gi, bi, E::zero(), dst);
                    }
                }
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![E::zero(); batch * sb];
                for i in 0..batch {
                    let gi = &g[i * sc..(i + 1) * sc];
                    let ai = &a[i * sa..(i + 1) * sa];
                    let dst = &mut db[i * sb..(i + 1) * sb];
                    if trans_b {
                        E::gemm(true, trans_a, n, k, m, E::one(), gi, ai, E::zero(), dst);
                    } else {
                        E::gemm(!trans_a, false, k, n, m, E::one(), ai, gi, E::zero(), dst);
                    }
                }
                db
            });
            vec![da, db]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_small_example() {
        let x = Tensor::<f64>::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap();
        let w = Tensor::<f64>::from_f64(vec![3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![3], &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(x.linear(&w, Some(&b)).unwrap().data(), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn bmm_transposed_views_agree() {
        // A = [[1,2],[3,4]], Aᵀ stored explicitly
        let a = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let at = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        let plain = a.bmm(&a, false, false).unwrap();
        let via_t = at.bmm(&at, true, true).unwrap();
        assert_eq!(plain.data(), via_t.data());
        assert_eq!(plain.data(), &[7.0, 10.0, 15.0, 22.0]);
    }
}
