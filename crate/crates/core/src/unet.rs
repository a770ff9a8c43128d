//! Time-conditioned U-Net noise predictor with five resolution levels and
//! named decoder feature taps.

use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Init, Linear, Module, Param};
use crate::tensor::{Element, Tensor};

pub const LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// One multiplier per resolution level, finest first.
    pub channel_mult: Vec<usize>,
    /// Self-attention in the bottleneck (the `h/16` level).
    pub bottleneck_attention: bool,
    pub time_embed_dim: usize,
}

impl DenoiserConfig {
    pub fn with_width(base_width: usize) -> Self {
        Self {
            in_channels: 3,
            base_width,
            channel_mult: vec![1, 2, 2, 4, 4],
            bottleneck_attention: true,
            time_embed_dim: 4 * base_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.len() != LEVELS {
            return Err(Error::Config(format!(
                "denoiser needs exactly {LEVELS} channel multipliers, got {}",
                self.channel_mult.len()
            )));
        }
        if self.in_channels == 0 || self.base_width == 0 || self.channel_mult.contains(&0) {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time embedding dimension must be positive and even, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    /// Channel count at each level, finest first. Decoder taps have these widths.
    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_width).collect()
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::with_width(32)
    }
}

/// Sinusoidal embedding with interleaved `(sin, cos)` pairs at geometrically
/// spaced frequencies `10000^(−k/(dim/2))`.
pub fn timestep_embedding<E: Element>(t: f64, dim: usize) -> Result<Tensor<E>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("timestep embedding dimension must be even, got {dim}")));
    }
    Tensor::new(vec![dim], embedding_values(t, dim))
}

fn embedding_values<E: Element>(t: f64, dim: usize) -> Vec<E> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out.push(E::from_f64((t * freq).sin()));
        out.push(E::from_f64((t * freq).cos()));
    }
    out
}

fn timestep_embeddings<E: Element>(ts: &[usize], dim: usize) -> Result<Tensor<E>> {
    let data = ts.iter().flat_map(|&t| embedding_values::<E>(t as f64, dim)).collect();
    Tensor::new(vec![ts.len(), dim], data)
}

#[derive(Clone, Debug)]
struct ResBlock<E: Element> {
    norm1: GroupNorm<E>,
    conv1: Conv2d<E>,
    time: Linear<E>,
    norm2: GroupNorm<E>,
    conv2: Conv2d<E>,
    skip: Option<Conv2d<E>>,
}

impl<E: Element> ResBlock<E> {
    fn new(name: &str, c_in: usize, c_out: usize, temb: usize, init: &mut Init) -> Self {
        Self {
            norm1: GroupNorm::new(&format!("{name}.norm1"), c_in),
            conv1: Conv2d::same3(&format!("{name}.conv1"), c_in, c_out, init),
            time: Linear::new(&format!("{name}.time"), temb, c_out, init),
            norm2: GroupNorm::new(&format!("{name}.norm2"), c_out),
            conv2: Conv2d::zeroed(&format!("{name}.conv2"), c_out, c_out, 3),
            skip: (c_in != c_out).then(|| Conv2d::pointwise(&format!("{name}.skip"), c_in, c_out, init)),
        }
    }

    fn forward(&self, x: &Tensor<E>, temb: &Tensor<E>) -> Result<Tensor<E>> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu())?;
        let h = h.add_channel_bias(&self.time.forward(temb)?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu())?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        h.add(&skip)
    }
}

impl<E: Element> Module<E> for ResBlock<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.norm1.visit(f);
        self.conv1.visit(f);
        self.time.visit(f);
        self.norm2.visit(f);
        self.conv2.visit(f);
        if let Some(s) = &self.skip {
            s.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.norm1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.time.visit_mut(f);
        self.norm2.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }
}

/// Single-head self-attention over spatial positions.
#[derive(Clone, Debug)]
struct Attention<E: Element> {
    norm: GroupNorm<E>,
    q: Conv2d<E>,
    k: Conv2d<E>,
    v: Conv2d<E>,
    out: Conv2d<E>,
}

impl<E: Element> Attention<E> {
    fn new(name: &str, c: usize, init: &mut Init) -> Self {
        Self {
            norm: GroupNorm::new(&format!("{name}.norm"), c),
            q: Conv2d::pointwise(&format!("{name}.q"), c, c, init),
            k: Conv2d::pointwise(&format!("{name}.k"), c, c, init),
            v: Conv2d::pointwise(&format!("{name}.v"), c, c, init),
            out: Conv2d::zeroed(&format!("{name}.out"), c, c, 1),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let hn = self.norm.forward(x)?;
        let flat = |t: Tensor<E>| t.reshape(vec![n, c, h * w]);
        let q = flat(self.q.forward(&hn)?)?;
        let k = flat(self.k.forward(&hn)?)?;
        let v = flat(self.v.forward(&hn)?)?;
        // scores[i, j] = q_i · k_j / √c over positions i, j
        let attn = q.bmm(&k, true, false)?.scale(1.0 / (c as f64).sqrt()).softmax_last();
        let mixed = v.bmm(&attn, false, true)?.reshape(vec![n, c, h, w])?;
        x.add(&self.out.forward(&mixed)?)
    }
}

impl<E: Element> Module<E> for Attention<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        for m in [&self.norm as &dyn Module<E>, &self.q, &self.k, &self.v, &self.out] {
            m.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.norm.visit_mut(f);
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Noise predictor `f(x_t, t)`.
#[derive(Clone, Debug)]
pub struct Denoiser<E: Element = f32> {
    config: DenoiserConfig,
    time1: Linear<E>,
    time2: Linear<E>,
    stem: Conv2d<E>,
    down: Vec<ResBlock<E>>,
    downsample: Vec<Conv2d<E>>,
    mid1: ResBlock<E>,
    mid_attn: Option<Attention<E>>,
    mid2: ResBlock<E>,
    up: Vec<ResBlock<E>>,
    upsample: Vec<Conv2d<E>>,
    out_norm: GroupNorm<E>,
    out_conv: Conv2d<E>,
}

/// Noise prediction plus the five decoder taps, finest first.
#[derive(Debug, Clone)]
pub struct DenoiserOutput<E: Element> {
    pub eps: Tensor<E>,
    pub features: Vec<Tensor<E>>,
}

impl<E: Element> Denoiser<E> {
    /// Deterministic in `(config, seed)`.
    pub fn build(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let ch = config.level_channels();
        let temb = config.time_embed_dim;
        let time1 = Linear::new("unet.time.fc1", temb, temb, &mut init);
        let time2 = Linear::new("unet.time.fc2", temb, temb, &mut init);
        let stem = Conv2d::same3("unet.stem", config.in_channels, ch[0], &mut init);
        let mut down = Vec::with_capacity(LEVELS);
        let mut downsample = Vec::with_capacity(LEVELS - 1);
        let mut prev = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            down.push(ResBlock::new(&format!("unet.down.{i}.res"), prev, c, temb, &mut init));
            if i + 1 < LEVELS {
                downsample.push(Conv2d::new(&format!("unet.down.{i}.downsample"), c, c, 3, 2, 1, &mut init));
            }
            prev = c;
        }
        let bottom = ch[LEVELS - 1];
        let mid1 = ResBlock::new("unet.mid.res1", bottom, bottom, temb, &mut init);
        let mid_attn = config
            .bottleneck_attention
            .then(|| Attention::new("unet.mid.attn", bottom, &mut init));
        let mid2 = ResBlock::new("unet.mid.res2", bottom, bottom, temb, &mut init);
        // decoder blocks are stored finest first, built coarsest first
        let mut up = Vec::with_capacity(LEVELS);
        let mut upsample = Vec::with_capacity(LEVELS - 1);
        let mut prev = bottom;
        for i in (0..LEVELS).rev() {
            up.push(ResBlock::new(&format!("unet.up.{i}.res"), prev + ch[i], ch[i], temb, &mut init));
            if i > 0 {
                upsample.push(Conv2d::same3(&format!("unet.up.{i}.upsample"), ch[i], ch[i], &mut init));
            }
            prev = ch[i];
        }
        up.reverse();
        upsample.reverse();
        let out_norm = GroupNorm::new("unet.out.norm", ch[0]);
        // residual branches and the output layer start at zero
        let out_conv = Conv2d::zeroed("unet.out.conv", ch[0], config.in_channels, 3);
        Ok(Self {
            config: config.clone(),
            time1,
            time2,
            stem,
            down,
            downsample,
            mid1,
            mid_attn,
            mid2,
            up,
            upsample,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn forward(&self, xt: &Tensor<E>, t: &[usize]) -> Result<Tensor<E>> {
        Ok(self.forward_with_features(xt, t)?.eps)
    }

    pub fn forward_with_features(&self, xt: &Tensor<E>, t: &[usize]) -> Result<DenoiserOutput<E>> {
        self.check_input(xt, t)?;
        let temb = timestep_embeddings::<E>(t, self.config.time_embed_dim)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu())?.silu();

        let mut h = self.stem.forward(xt)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            h = self.down[i].forward(&h, &temb)?;
            h.check_finite(&format!("unet.down.{i}"))?;
            skips.push(h.clone());
            if i + 1 < LEVELS {
                h = self.downsample[i].forward(&h)?;
            }
        }
        h = self.mid1.forward(&h, &temb)?;
        if let Some(attn) = &self.mid_attn {
            h = attn.forward(&h)?;
        }
        h = self.mid2.forward(&h, &temb)?;
        h.check_finite("unet.mid")?;

        let mut features = vec![None; LEVELS];
        for i in (0..LEVELS).rev() {
            h = self.up[i].forward(&Tensor::concat(&[&h, &skips[i]], 1)?, &temb)?;
            h.check_finite(&format!("unet.up.{i}"))?;
            features[i] = Some(h.clone());
            if i > 0 {
                h = self.upsample[i - 1].forward(&h.upsample_nearest(2)?)?;
            }
        }
        let eps = self.out_conv.forward(&self.out_norm.forward(&h)?.silu())?;
        eps.check_finite("unet.out")?;
        Ok(DenoiserOutput {
            eps,
            features: features.into_iter().map(|f| f.expect("every level visited")).collect(),
        })
    }

    fn check_input(&self, xt: &Tensor<E>, t: &[usize]) -> Result<()> {
        let s = xt.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::dim(
                "denoiser",
                format!("input {s:?} must be [N, {}, H, W]", self.config.in_channels),
            ));
        }
        let m = 1 << (LEVELS - 1);
        if s[2] % m != 0 || s[3] % m != 0 {
            return Err(Error::dim(
                "denoiser",
                format!("spatial axes 2 and 3 ({}×{}) must be divisible by {m}", s[2], s[3]),
            ));
        }
        if t.len() != s[0] {
            return Err(Error::dim(
                "denoiser",
                format!("{} timesteps for batch axis 0 of size {}", t.len(), s[0]),
            ));
        }
        if t.contains(&0) {
            return Err(Error::Contract("timesteps are 1-based".into()));
        }
        Ok(())
    }
}

impl<E: Element> Module<E> for Denoiser<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.time1.visit(f);
        self.time2.visit(f);
        self.stem.visit(f);
        for i in 0..LEVELS {
            self.down[i].visit(f);
            if let Some(d) = self.downsample.get(i) {
                d.visit(f);
            }
        }
        self.mid1.visit(f);
        if let Some(a) = &self.mid_attn {
            a.visit(f);
        }
        self.mid2.visit(f);
        for i in (0..LEVELS).rev() {
            self.up[i].visit(f);
            if i > 0 {
                self.upsample[i - 1].visit(f);
            }
        }
        self.out_norm.visit(f);
        self.out_conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.time1.visit_mut(f);
        self.time2.visit_mut(f);
        self.stem.visit_mut(f);
        for i in 0..LEVELS {
            self.down[i].visit_mut(f);
            if let Some(d) = self.downsample.get_mut(i) {
                d.visit_mut(f);
            }
        }
        self.mid1.visit_mut(f);
        if let Some(a) = &mut self.mid_attn {
            a.visit_mut(f);
        }
        self.mid2.visit_mut(f);
        for i in (0..LEVELS).rev() {
            self.up[i].visit_mut(f);
            if i > 0 {
                self.upsample[i - 1].visit_mut(f);
            }
        }
        self.out_norm.visit_mut(f);
        self.out_conv.visit_mut(f);
    }
}

impl<E: Element> NoisePredictor<E> for Denoiser<E> {
    fn predict_noise(&self, xt: &Tensor<E>, t: &[usize]) -> Result<Tensor<E>> {
        self.forward(xt, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig::with_width(8)
    }

    fn input(n: usize, hw: usize, seed: u64) -> Tensor<f32> {
        randn(&[n, 3, hw, hw], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn residual_branches_start_at_zero() {
        let m = Denoiser::<f32>::build(&tiny(), 0).unwrap();
        let eps = m.forward(&input(1, 16, 3), &[5]).unwrap();
        assert!(eps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        let m = Denoiser::<f32>::build(&tiny(), 0).unwrap();
        let x = input(2, 32, 1);
        assert_eq!(m.forward(&x, &[3, 70]).unwrap().shape(), x.shape());
    }

    #[test]
    fn feature_pyramid_halves() {
        let cfg = tiny();
        let m = Denoiser::<f32>::build(&cfg, 0).unwrap();
        let out = m.forward_with_features(&input(1, 32, 1), &[10]).unwrap();
        assert_eq!(out.features.len(), LEVELS);
        for (i, (f, c)) in out.features.iter().zip(cfg.level_channels()).enumerate() {
            assert_eq!(f.shape(), &[1, c, 32 >> i, 32 >> i]);
            assert!(f.data().iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn forward_and_feature_path_agree_bitwise() {
        let m = Denoiser::<f32>::build(&tiny(), 4).unwrap();
        let x = input(1, 16, 2);
        let a = m.forward(&x, &[7]).unwrap();
        let b = m.forward_with_features(&x, &[7]).unwrap().eps;
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn build_is_seeded() {
        let a = Denoiser::<f32>::build(&tiny(), 11).unwrap();
        let b = Denoiser::<f32>::build(&tiny(), 11).unwrap();
        let c = Denoiser::<f32>::build(&tiny(), 12).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn parameter_names_unique() {
        let m = Denoiser::<f32>::build(&tiny(), 0).unwrap();
        let mut names: Vec<_> = m.parameters().iter().map(|p| p.name().to_string()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn time_conditioning_is_live() {
        let mut m = Denoiser::<f32>::build(&tiny(), 0).unwrap();
        crate::gradcheck::jitter_parameters(&mut m, 1, 0.1);
        let x = input(1, 16, 3);
        let a = m.forward(&x, &[1]).unwrap();
        let b = m.forward(&x, &[150]).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn indivisible_input_is_dimension_error() {
        let m = Denoiser::<f32>::build(&tiny(), 0).unwrap();
        let err = m.forward(&input(1, 24, 0), &[1]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }), "{err}");
    }

    #[test]
    fn frozen_forward_builds_no_graph() {
        let mut m = Denoiser::<f32>::build(&tiny(), 0).unwrap();
        m.set_trainable(false);
        let x = input(1, 16, 5);
        let a = m.forward_with_features(&x, &[20]).unwrap();
        let b = m.forward_with_features(&x, &[20]).unwrap();
        assert!(!a.eps.is_tracked());
        assert!(a.features.iter().all(|f| !f.is_tracked()));
        assert_eq!(a.eps.data(), b.eps.data());
        assert!(m.parameters().iter().all(|p| p.grad().is_none()));
    }

    #[test]
    fn embedding_at_zero_alternates() {
        let e = timestep_embedding::<f64>(0.0, 8).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(matches!(timestep_embedding::<f64>(1.0, 7), Err(Error::Config(_))));
    }

    #[test]
    fn embeddings_distinguish_timesteps() {
        let a = timestep_embedding::<f32>(50.0, 32).unwrap();
        let b = timestep_embedding::<f32>(100.0, 32).unwrap();
        let d: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(d > 0.0);
    }
}
