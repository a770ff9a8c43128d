//! Lightweight change head on multi-scale feature differences.
//!
//! Per scale: channel-spatial attention, a 1×1 projection to the fusion
//! width, SiLU and nearest-neighbour upsampling to full resolution. The
//! scales are concatenated, fused by a 3×3 conv and mapped to two logits
//! (unchanged, changed) by a 1×1 conv.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::nn::{Conv2d, Init, Linear, Module, Param};
use crate::tensor::{Element, Tensor};
use crate::unet::LEVELS;

/// Per-scale `|a − b|` of timestep-concatenated features.
pub fn feature_difference(a: &FeatureStack, b: &FeatureStack) -> Result<Vec<Tensor<f32>>> {
    if a.timesteps != b.timesteps {
        return Err(Error::Data(format!(
            "stacks hold different timesteps: {:?} vs {:?}",
            a.timesteps, b.timesteps
        )));
    }
    let (fa, fb) = (a.concat_timesteps()?, b.concat_timesteps()?);
    fa.iter().zip(&fb).map(|(x, y)| abs_difference(x, y)).collect()
}

pub fn abs_difference<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!("feature shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (*x - *y).abs()).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Concurrent channel and spatial squeeze-excitation, merged by
/// element-wise maximum.
#[derive(Clone, Debug)]
pub struct Csa<E: Element = f32> {
    pub squeeze: Linear<E>,
    pub excite: Linear<E>,
    pub spatial: Conv2d<E>,
}

impl<E: Element> Csa<E> {
    pub fn new(name: &str, channels: usize, reduction: usize, init: &mut Init) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "{name}: {channels} channels not divisible by reduction ratio {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            squeeze: Linear::new(&format!("{name}.squeeze"), channels, hidden, init),
            excite: Linear::new(&format!("{name}.excite"), hidden, channels, init),
            spatial: Conv2d::pointwise(&format!("{name}.spatial"), channels, 1, init),
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let channel_gate = self
            .excite
            .forward(&self.squeeze.forward(&x.global_avg_pool()?)?.silu())?
            .sigmoid();
        let spatial_gate = self.spatial.forward(x)?.sigmoid();
        x.mul_channel(&channel_gate)?.maximum(&x.mul_spatial(&spatial_gate)?)
    }
}

impl<E: Element> Module<E> for Csa<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.squeeze.visit(f);
        self.excite.visit(f);
        self.spatial.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.squeeze.visit_mut(f);
        self.excite.visit_mut(f);
        self.spatial.visit_mut(f);
    }
}

/// Convenience wrapper matching the attention block's functional form.
pub fn csa_forward<E: Element>(x: &Tensor<E>, params: &Csa<E>) -> Result<Tensor<E>> {
    params.forward(x)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CdHeadConfig {
    /// Difference channels per scale, finest first.
    pub in_channels: Vec<usize>,
    pub reduction: usize,
    pub fusion_width: usize,
}

impl CdHeadConfig {
    /// Sized for `timesteps` concatenated copies of the given level widths.
    pub fn for_features(level_channels: &[usize], timesteps: usize, reduction: usize, fusion_width: usize) -> Self {
        Self {
            in_channels: level_channels.iter().map(|c| c * timesteps).collect(),
            reduction,
            fusion_width,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CdHead<E: Element = f32> {
    config: CdHeadConfig,
    attention: Vec<Csa<E>>,
    project: Vec<Conv2d<E>>,
    fuse: Conv2d<E>,
    classify: Conv2d<E>,
}

impl<E: Element> CdHead<E> {
    pub fn build(config: &CdHeadConfig, seed: u64) -> Result<Self> {
        if config.in_channels.len() != LEVELS {
            return Err(Error::Config(format!(
                "change head needs {LEVELS} input scales, got {}",
                config.in_channels.len()
            )));
        }
        if config.fusion_width == 0 {
            return Err(Error::Config("fusion width must be positive".into()));
        }
        let mut init = Init::new(seed);
        let f = config.fusion_width;
        let mut attention = Vec::with_capacity(LEVELS);
        let mut project = Vec::with_capacity(LEVELS);
        for (i, &c) in config.in_channels.iter().enumerate() {
            attention.push(Csa::new(&format!("head.scale{i}.csa"), c, config.reduction, &mut init)?);
            project.push(Conv2d::pointwise(&format!("head.scale{i}.proj"), c, f, &mut init));
        }
        Ok(Self {
            config: config.clone(),
            attention,
            project,
            fuse: Conv2d::same3("head.fuse", LEVELS * f, f, &mut init),
            classify: Conv2d::pointwise("head.classify", f, 2, &mut init),
        })
    }

    pub fn config(&self) -> &CdHeadConfig {
        &self.config
    }

    /// `diffs[i]` is `[N, C_i, H/2^i, W/2^i]`; returns logits `[N, 2, H, W]`.
    pub fn forward(&self, diffs: &[Tensor<E>]) -> Result<Tensor<E>> {
        if diffs.len() != LEVELS {
            return Err(Error::dim("cd_head", format!("expected {LEVELS} scales, got {}", diffs.len())));
        }
        let (n, h, w) = (diffs[0].dim(0), diffs[0].dim(2), diffs[0].dim(3));
        let mut branches = Vec::with_capacity(LEVELS);
        for (i, d) in diffs.iter().enumerate() {
            let want = [n, self.config.in_channels[i], h >> i, w >> i];
            if d.shape() != want {
                return Err(Error::dim(
                    "cd_head",
                    format!("scale {i} has shape {:?}, expected {want:?}", d.shape()),
                ));
            }
            let b = self.project[i].forward(&self.attention[i].forward(d)?)?.silu();
            branches.push(if i == 0 { b } else { b.upsample_nearest(1 << i)? });
        }
        let refs: Vec<&Tensor<E>> = branches.iter().collect();
        let fused = self.fuse.forward(&Tensor::concat(&refs, 1)?)?.silu();
        let logits = self.classify.forward(&fused)?;
        logits.check_finite("head.classify")?;
        Ok(logits)
    }
}

impl<E: Element> Module<E> for CdHead<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        for i in 0..LEVELS {
            self.attention[i].visit(f);
            self.project[i].visit(f);
        }
        self.fuse.visit(f);
        self.classify.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        for i in 0..LEVELS {
            self.attention[i].visit_mut(f);
            self.project[i].visit_mut(f);
        }
        self.fuse.visit_mut(f);
        self.classify.visit_mut(f);
    }
}

/// Per-pixel class probabilities and thresholded labels for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMap {
    /// `[2, H, W]`: channel 0 unchanged, channel 1 changed.
    pub probabilities: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl ChangeMap {
    /// Softmax over the two logits per pixel; a pixel is labelled changed
    /// only when `p(changed) > threshold`, so exact ties go to unchanged.
    pub fn from_logits(logits: &[f32], height: usize, width: usize, threshold: f32) -> Result<Self> {
        let hw = height * width;
        if logits.len() != 2 * hw {
            return Err(Error::dim("change_map", format!("{} logits for 2×{height}×{width}", logits.len())));
        }
        let mut probs = vec![0.0f32; 2 * hw];
        let mut labels = vec![0u8; hw];
        for p in 0..hw {
            let (l0, l1) = (logits[p], logits[hw + p]);
            // p1 = σ(l1 − l0), computed stably
            let d = l1 - l0;
            let p1 = if d >= 0.0 {
                1.0 / (1.0 + (-d).exp())
            } else {
                let e = d.exp();
                e / (1.0 + e)
            };
            probs[p] = 1.0 - p1;
            probs[hw + p] = p1;
            labels[p] = u8::from(p1 > threshold);
        }
        Ok(Self {
            probabilities: Tensor::new(vec![2, height, width], probs)?,
            labels,
        })
    }

    pub fn from_batch_logits(logits: &Tensor<f32>, threshold: f32) -> Result<Vec<Self>> {
        let s = logits.shape();
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::dim("change_map", format!("logits {s:?} must be [N, 2, H, W]")));
        }
        let per = 2 * s[2] * s[3];
        logits
            .data()
            .chunks(per)
            .map(|chunk| Self::from_logits(chunk, s[2], s[3], threshold))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(fusion: usize) -> CdHead<f32> {
        CdHead::build(&CdHeadConfig::for_features(&[8, 16, 16, 32, 32], 1, 4, fusion), 0).unwrap()
    }

    fn zeros(n: usize, cfg: &CdHeadConfig, hw: usize) -> Vec<Tensor<f32>> {
        cfg.in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Tensor::zeros(vec![n, c, hw >> i, hw >> i]))
            .collect()
    }

    #[test]
    fn output_is_full_resolution() {
        let h = head(8);
        let logits = h.forward(&zeros(2, h.config(), 32)).unwrap();
        assert_eq!(logits.shape(), &[2, 2, 32, 32]);
    }

    #[test]
    fn zero_differences_give_constant_logits() {
        let h = head(8);
        let logits = h.forward(&zeros(1, h.config(), 16)).unwrap();
        for plane in logits.data().chunks(256) {
            assert!(plane.iter().all(|v| *v == plane[0]));
        }
    }

    #[test]
    fn csa_zero_in_zero_out() {
        let csa = Csa::<f32>::new("c", 8, 4, &mut Init::new(0)).unwrap();
        let y = csa.forward(&Tensor::zeros(vec![1, 8, 4, 4])).unwrap();
        assert_eq!(y.shape(), &[1, 8, 4, 4]);
        assert!(y.data().iter().all(|v| *v == 0.0));
        assert!(matches!(Csa::<f32>::new("c", 10, 4, &mut Init::new(0)), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_scale_shape_is_rejected() {
        let h = head(8);
        let mut d = zeros(1, h.config(), 16);
        d[2] = Tensor::zeros(vec![1, 16, 3, 3]);
        assert!(matches!(h.forward(&d), Err(Error::Dimension { .. })));
    }

    #[test]
    fn tie_goes_to_unchanged() {
        let m = ChangeMap::from_logits(&[0.0, 1.0, 0.0, 3.0], 1, 2, 0.5).unwrap();
        assert_eq!(m.labels, [0, 1]);
        assert_eq!(m.probabilities.data()[2], 0.5);
        for p in 0..2 {
            let s = m.probabilities.data()[p] + m.probabilities.data()[2 + p];
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn absolute_difference_is_symmetric() {
        let a = Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap();
        let b = Tensor::new(vec![3], vec![0.0f32, 1.0, 0.5]).unwrap();
        assert_eq!(abs_difference(&a, &b).unwrap(), abs_difference(&b, &a).unwrap());
        assert_eq!(abs_difference(&a, &b).unwrap().data(), &[1.0, 3.0, 0.0]);
    }
}
