//! Closed-form Gaussian diffusion: schedule, forward noising, the one-step
//! posterior, the noise-prediction training target and ancestral sampling.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `γ_0 ≡ 1` so the `t = 1`
//! posterior collapses onto `x_0`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Serializable description of a schedule; stored in checkpoints so feature
/// extraction reproduces the exact `γ_t` used in pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    /// Linear β over `T = 1000` in `[1e-4, 0.02]`.
    pub fn standard() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    /// The standard β range stretched by `1000 / steps`, so a shorter chain
    /// still ends near pure noise.
    pub fn rescaled(steps: usize) -> Self {
        let s = 1000.0 / steps as f64;
        Self {
            kind: ScheduleKind::Linear,
            steps,
            beta_start: 1e-4 * s,
            beta_end: (0.02 * s).min(0.999),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end),
        }
    }
}

/// Per-step retention `α_t` and cumulative product `γ_t = ∏_{i≤t} α_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let alpha: Vec<f64> = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                1.0 - (beta_start + (beta_end - beta_start) * frac)
            })
            .collect();
        let mut gamma = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            gamma.push(acc);
        }
        Ok(Self {
            spec: ScheduleSpec {
                kind: ScheduleKind::Linear,
                steps,
                beta_start,
                beta_end,
            },
            alpha,
            gamma,
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// `α_t` for `t ∈ 1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha(t)
    }

    /// `γ_t` for `t ∈ 0..=T`; `γ_0 = 1`.
    pub fn gamma(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.gamma[t - 1]
        }
    }

    /// Stable identity of the schedule parameters.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.spec).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Maps a timestep quoted against a 1000-step chain onto this schedule.
    pub fn scale_timestep(&self, t_of_1000: usize) -> usize {
        let t = (t_of_1000 as f64 * self.steps() as f64 / 1000.0).round() as usize;
        t.clamp(1, self.steps())
    }

    /// Coefficients `(c_x0, c_xt, σ²)` of the posterior
    /// `q(x_{t−1} | x_t, x_0) = N(c_x0·x_0 + c_xt·x_t, σ² I)`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t)?;
        let a = self.alpha(t);
        let g = self.gamma(t);
        let g_prev = self.gamma(t - 1);
        let c_x0 = g_prev.sqrt() * (1.0 - a) / (1.0 - g);
        let c_xt = a.sqrt() * (1.0 - g_prev) / (1.0 - g);
        let var = ((1.0 - g_prev) * (1.0 - a) / (1.0 - g)).max(0.0);
        Ok((c_x0, c_xt, var))
    }
}

/// Mean and variance of the one-step posterior.
#[derive(Debug, Clone)]
pub struct PosteriorParams<E: Element = f32> {
    pub mean: Tensor<E>,
    pub variance: f64,
}

/// `√γ_t · x0 + √(1 − γ_t) · eps`.
pub fn q_sample<E: Element>(x0: &Tensor<E>, t: usize, eps: &Tensor<E>, sched: &NoiseSchedule) -> Result<Tensor<E>> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::dim(
            "q_sample",
            format!("x0 shape {:?} vs eps shape {:?}", x0.shape(), eps.shape()),
        ));
    }
    let g = sched.gamma(t);
    x0.scale(g.sqrt()).add(&eps.scale((1.0 - g).sqrt()))
}

/// [`q_sample`] with one timestep per leading-axis item.
pub fn q_sample_batch<E: Element>(
    x0: &Tensor<E>,
    ts: &[usize],
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    if x0.shape() != eps.shape() {
        return Err(Error::dim(
            "q_sample_batch",
            format!("x0 shape {:?} vs eps shape {:?}", x0.shape(), eps.shape()),
        ));
    }
    if ts.len() != x0.dim(0) {
        return Err(Error::dim(
            "q_sample_batch",
            format!("{} timesteps for batch axis 0 of size {}", ts.len(), x0.dim(0)),
        ));
    }
    let per = x0.numel() / ts.len();
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let (a, b) = (E::from_f64(sched.gamma(t).sqrt()), E::from_f64((1.0 - sched.gamma(t)).sqrt()));
        let range = i * per..(i + 1) * per;
        out.extend(x0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(x, e)| a * *x + b * *e));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

pub fn posterior_params<E: Element>(
    x0: &Tensor<E>,
    xt: &Tensor<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<PosteriorParams<E>> {
    let (c_x0, c_xt, variance) = sched.posterior_coefficients(t)?;
    let mean = x0.scale(c_x0).add(&xt.scale(c_xt))?;
    Ok(PosteriorParams { mean, variance })
}

/// Standard-normal tensor.
pub fn randn<E: Element, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<E> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| E::from_f64(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// One training example for the noise-prediction objective.
#[derive(Debug, Clone)]
pub struct NoisyBatch<E: Element = f32> {
    pub xt: Tensor<E>,
    pub t: Vec<usize>,
    pub eps: Tensor<E>,
}

/// Draws `t ~ U{1..T}` per item and `eps ~ N(0, I)`, and noises `x0`.
/// The caller regresses `f(xt, t)` onto `eps` with an MSE loss.
pub fn training_step_target<E: Element, R: Rng + ?Sized>(
    x0: &Tensor<E>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<NoisyBatch<E>> {
    let n = x0.dim(0);
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = randn(x0.shape(), rng);
    let xt = q_sample_batch(x0, &t, &eps, sched)?;
    Ok(NoisyBatch { xt, t, eps })
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor<E: Element> {
    fn predict_noise(&self, xt: &Tensor<E>, t: &[usize]) -> Result<Tensor<E>>;
}

impl<E: Element, F> NoisePredictor<E> for F
where
    F: Fn(&Tensor<E>, &[usize]) -> Result<Tensor<E>>,
{
    fn predict_noise(&self, xt: &Tensor<E>, t: &[usize]) -> Result<Tensor<E>> {
        self(xt, t)
    }
}

/// One reverse step:
/// `x_{t−1} = (x_t − (1−α_t)/√(1−γ_t) · ε̂) / √α_t + σ_t · z`
/// where `σ_t` is the posterior standard deviation. `z` is ignored at `t = 1`.
pub fn p_sample_step<E: Element>(
    xt: &Tensor<E>,
    t: usize,
    model: &dyn NoisePredictor<E>,
    z: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    sched.check_t(t)?;
    let ts = vec![t; xt.dim(0)];
    let eps_hat = model.predict_noise(xt, &ts)?;
    step_from_prediction(xt, t, &eps_hat, z, sched)
}

/// Reverse step given an already computed noise prediction.
pub fn step_from_prediction<E: Element>(
    xt: &Tensor<E>,
    t: usize,
    eps_hat: &Tensor<E>,
    z: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    sched.check_t(t)?;
    if eps_hat.shape() != xt.shape() || z.shape() != xt.shape() {
        return Err(Error::dim(
            "p_sample_step",
            format!("x_t {:?}, prediction {:?}, z {:?}", xt.shape(), eps_hat.shape(), z.shape()),
        ));
    }
    let a = sched.alpha(t);
    let g = sched.gamma(t);
    let mean = xt.sub(&eps_hat.scale((1.0 - a) / (1.0 - g).sqrt()))?.scale(1.0 / a.sqrt());
    if t == 1 {
        return Ok(mean.detach());
    }
    let (_, _, var) = sched.posterior_coefficients(t)?;
    Ok(mean.add(&z.scale(var.sqrt()))?.detach())
}

/// Reverse step through the `x_0` estimate `(x_t − √(1−γ_t) ε̂) / √γ_t`
/// clamped to `[−1, 1]`, then the posterior mean and `σ_t · z`. Equal to
/// [`p_sample_step`] whenever the estimate is already in range.
pub fn p_sample_step_clipped<E: Element>(
    xt: &Tensor<E>,
    t: usize,
    model: &dyn NoisePredictor<E>,
    z: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    sched.check_t(t)?;
    let eps_hat = model.predict_noise(xt, &vec![t; xt.dim(0)])?;
    if eps_hat.shape() != xt.shape() || z.shape() != xt.shape() {
        return Err(Error::dim(
            "p_sample_step",
            format!("x_t {:?}, prediction {:?}, z {:?}", xt.shape(), eps_hat.shape(), z.shape()),
        ));
    }
    let g = sched.gamma(t);
    let (c_x0, c_xt, var) = sched.posterior_coefficients(t)?;
    let (lo, hi) = (E::from_f64(-1.0), E::one());
    let x0 = xt
        .sub(&eps_hat.scale((1.0 - g).sqrt()))?
        .scale(1.0 / g.sqrt())
        .map(|v| v.max(lo).min(hi));
    let mean = x0.scale(c_x0).add(&xt.scale(c_xt))?;
    if t == 1 {
        return Ok(mean.detach());
    }
    Ok(mean.add(&z.scale(var.sqrt()))?.detach())
}

/// Reverse-step rule used by [`sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// [`p_sample_step`].
    Exact,
    /// [`p_sample_step_clipped`].
    ClipDenoised,
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `t = 1`; the result is
/// clamped to the normalized image range `[−1, 1]`.
pub fn sample<E: Element, R: Rng + ?Sized>(
    model: &dyn NoisePredictor<E>,
    shape: &[usize],
    sched: &NoiseSchedule,
    sampler: Sampler,
    rng: &mut R,
) -> Result<Tensor<E>> {
    let mut x = randn::<E, _>(shape, rng);
    for t in (1..=sched.steps()).rev() {
        let z = if t > 1 { randn(shape, rng) } else { Tensor::zeros(shape.to_vec()) };
        x = match sampler {
            Sampler::Exact => p_sample_step(&x, t, model, &z, sched)?,
            Sampler::ClipDenoised => p_sample_step_clipped(&x, t, model, &z, sched)?,
        };
        x.check_finite(&format!("sample step t={t}"))?;
    }
    let (lo, hi) = (E::from_f64(-1.0), E::one());
    Ok(x.map(|v| v.max(lo).min(hi)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_schedule_by_hand() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!((s.alpha(1), s.alpha(2)), (0.5, 0.5));
        assert_eq!((s.gamma(1), s.gamma(2)), (0.5, 0.25));
        assert_eq!(s.gamma(0), 1.0);
    }

    #[test]
    fn invalid_ranges_are_config_errors() {
        for (t, a, b) in [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)] {
            assert!(matches!(NoiseSchedule::linear(t, a, b), Err(Error::Config(_))));
        }
    }

    #[test]
    fn first_posterior_collapses_onto_x0() {
        let s = ScheduleSpec::standard().build().unwrap();
        let (c0, ct, var) = s.posterior_coefficients(1).unwrap();
        assert!((c0 - 1.0).abs() < 1e-12);
        assert_eq!(ct, 0.0);
        assert_eq!(var, 0.0);
    }

    #[test]
    fn zero_image_noises_to_scaled_eps() {
        let s = ScheduleSpec::rescaled(200).build().unwrap();
        let eps = Tensor::<f64>::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap();
        let out = q_sample(&Tensor::zeros(vec![3]), 57, &eps, &s).unwrap();
        let k = (1.0 - s.gamma(57)).sqrt();
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert!((o - k * e).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_prediction_zero_noise_rescales() {
        let s = ScheduleSpec::rescaled(50).build().unwrap();
        let xt = Tensor::<f64>::from_f64(vec![1, 2], &[0.3, -0.7]).unwrap();
        let zero = Tensor::zeros(vec![1, 2]);
        let model = |x: &Tensor<f64>, _: &[usize]| Ok(Tensor::zeros(x.shape().to_vec()));
        let out = p_sample_step(&xt, 20, &model, &zero, &s).unwrap();
        let k = 1.0 / s.alpha(20).sqrt();
        assert!((out.data()[0] - 0.3 * k).abs() < 1e-15);
        assert!((out.data()[1] + 0.7 * k).abs() < 1e-15);
    }

    #[test]
    fn last_step_ignores_z() {
        let s = ScheduleSpec::rescaled(50).build().unwrap();
        let xt = Tensor::<f64>::from_f64(vec![1, 2], &[0.3, -0.7]).unwrap();
        let model = |x: &Tensor<f64>, _: &[usize]| Ok(x.scale(0.1));
        let a = p_sample_step(&xt, 1, &model, &Tensor::zeros(vec![1, 2]), &s).unwrap();
        let b = p_sample_step(&xt, 1, &model, &Tensor::full(vec![1, 2], 5.0), &s).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn sampling_noise_uses_posterior_std() {
        // z = 1, prediction 0: x_{t−1} − x_t/√α_t must equal σ_t, not γ_t
        let s = ScheduleSpec::rescaled(100).build().unwrap();
        let t = 60;
        let xt = Tensor::<f64>::zeros(vec![1, 1]);
        let model = |x: &Tensor<f64>, _: &[usize]| Ok(Tensor::zeros(x.shape().to_vec()));
        let out = p_sample_step(&xt, t, &model, &Tensor::ones(vec![1, 1]), &s).unwrap();
        let (_, _, var) = s.posterior_coefficients(t).unwrap();
        assert!((out.item() - var.sqrt()).abs() < 1e-15);
        assert!((out.item() - s.gamma(t)).abs() > 1e-3);
    }

    #[test]
    fn clipped_step_matches_exact_step_in_range() {
        let s = ScheduleSpec::rescaled(50).build().unwrap();
        let x0 = Tensor::<f64>::from_f64(vec![1, 3], &[0.2, -0.5, 0.9]).unwrap();
        let eps = Tensor::<f64>::from_f64(vec![1, 3], &[0.3, 1.1, -0.7]).unwrap();
        let z = Tensor::<f64>::from_f64(vec![1, 3], &[0.4, -0.2, 0.1]).unwrap();
        let t = 30;
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let model = move |_: &Tensor<f64>, _: &[usize]| Ok(eps.clone());
        let a = p_sample_step(&xt, t, &model, &z, &s).unwrap();
        let b = p_sample_step_clipped(&xt, t, &model, &z, &s).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        // a prediction implying x0 far outside the image range is pulled back
        let wild = |x: &Tensor<f64>, _: &[usize]| Ok(x.scale(-20.0));
        let c = p_sample_step_clipped(&xt, t, &wild, &Tensor::zeros(vec![1, 3]), &s).unwrap();
        let (c0, ct, _) = s.posterior_coefficients(t).unwrap();
        for (&x, &v) in xt.data().iter().zip(c.data()) {
            let want = c0 * x.signum() + ct * x;
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_out_of_range() {
        let s = ScheduleSpec::rescaled(10).build().unwrap();
        let x = Tensor::<f32>::zeros(vec![1, 1]);
        assert!(matches!(q_sample(&x, 0, &x, &s), Err(Error::Contract(_))));
        assert!(matches!(q_sample(&x, 11, &x, &s), Err(Error::Contract(_))));
        assert!(s.posterior_coefficients(0).is_err());
    }

    #[test]
    fn timestep_scaling() {
        let s = ScheduleSpec::rescaled(200).build().unwrap();
        assert_eq!(s.scale_timestep(50), 10);
        assert_eq!(s.scale_timestep(400), 80);
        assert_eq!(s.scale_timestep(1), 1);
        assert_eq!(s.scale_timestep(5000), 200);
    }
}
