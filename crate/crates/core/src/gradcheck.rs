//! Central finite-difference checks of reverse-mode gradients in `f64`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Init, Module};
use crate::seed::rng_for;
use crate::tensor::{Element, Tensor};

/// Gradients smaller than this are compared absolutely rather than
/// relatively.
pub const REL_FLOOR: f64 = 1e-3;
pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Location of the worst entry: input or parameter name and flat index.
    pub worst: (String, usize),
}

impl GradReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            worst: (String::new(), 0),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: (String, usize)) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || !err.is_finite() {
            self.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
            self.worst = at;
        }
    }
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn scalar(t: &Tensor<f64>, what: &str) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::Contract(format!("{what} must return a scalar, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Checks every element of every input of `f`, a scalar function of tensors.
pub fn check_fn(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>) -> Result<GradReport> {
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().requires_grad()).collect();
    let out = f(&leaves)?;
    scalar(&out, name)?;
    out.backward()?;
    let mut report = GradReport::new(name);
    let plain: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().map_or_else(|| vec![0.0; leaf.numel()], |g| g.to_vec());
        for (j, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let mut args = plain.clone();
                let mut data = args[i].to_vec();
                data[j] += delta;
                args[i] = Tensor::new(args[i].shape().to_vec(), data)?;
                scalar(&f(&args)?, name)
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            report.record(a, numeric, (format!("input{i}"), j));
        }
    }
    Ok(report)
}

/// Checks `per_param` seeded-random entries of every parameter of `model`
/// (all entries when the parameter is smaller).
pub fn check_module<M: Module<f64>>(
    name: &str,
    model: &mut M,
    per_param: usize,
    seed: u64,
    loss: impl Fn(&M) -> Result<Tensor<f64>>,
) -> Result<GradReport> {
    model.set_trainable(true);
    model.zero_grad();
    let out = loss(model)?;
    scalar(&out, name)?;
    out.backward()?;
    let mut probes: Vec<(usize, String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut rng = rng_for(&[seed]);
    for (k, p) in model.parameters().iter().enumerate() {
        let n = p.value().numel();
        let grad = p.grad().map_or_else(|| vec![0.0; n], |g| g.to_vec());
        let idx: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        let picked = idx.iter().map(|&j| grad[j]).collect();
        probes.push((k, p.name().to_string(), idx, picked));
    }
    model.set_trainable(false);
    let mut report = GradReport::new(name);
    for (k, pname, idx, analytic) in probes {
        for (&j, &a) in idx.iter().zip(&analytic) {
            let base = model.parameters()[k].value().to_vec();
            let mut eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[j] += delta;
                set_param(model, k, &v)?;
                scalar(&loss(model)?, name)
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            set_param(model, k, &base)?;
            report.record(a, numeric, (pname.clone(), j));
        }
    }
    model.set_trainable(true);
    model.zero_grad();
    Ok(report)
}

/// Adds `U(−bound, bound)` noise to every parameter so that layers which
/// start at zero carry gradient signal through the whole model.
pub fn jitter_parameters<E: Element, M: Module<E>>(model: &mut M, seed: u64, bound: f64) {
    let mut init = Init::new(seed);
    model.visit_mut(&mut |p| {
        let noise: Tensor<E> = init.uniform(p.value().shape().to_vec(), bound);
        let v: Vec<E> = p.value().data().iter().zip(noise.data()).map(|(&a, &b)| a + b).collect();
        p.assign(&v).expect("same length");
    });
}

fn set_param<M: Module<f64>>(model: &mut M, k: usize, values: &[f64]) -> Result<()> {
    let mut i = 0;
    let mut out = Ok(());
    model.visit_mut(&mut |p| {
        if i == k {
            out = p.assign(values);
        }
        i += 1;
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn detects_a_correct_and_a_wrong_gradient() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let ok = check_fn("square", &[x.clone()], |a| Ok(a[0].mul(&a[0])?.sum())).unwrap();
        assert!(ok.max_rel_err < 1e-7, "{ok:?}");
        assert_eq!(ok.checked, 3);
        // map() is untracked, so the analytic gradient is zero and must fail
        let bad = check_fn("untracked", &[x], |a| Ok(a[0].map(|v| v * v).sum().add(&a[0].sum())?)).unwrap();
        assert!(bad.max_rel_err > 0.1);
    }

    #[test]
    fn linear_layer_passes() {
        let mut lin = Linear::<f64>::new("lin", 4, 3, &mut Init::new(1));
        let x = Tensor::new(vec![2, 4], (0..8).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap();
        let r = check_module("linear", &mut lin, 100, 0, |m| Ok(m.forward(&x)?.silu().sum())).unwrap();
        assert_eq!(r.checked, 15);
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
