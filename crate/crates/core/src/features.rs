//! Multi-scale, multi-timestep decoder features from a frozen denoiser.
//!
//! For each timestep `t` an image is noised with `q_sample` and pushed
//! through the denoiser; the five decoder taps are kept. The noise for `t` is
//! a pure function of `(noise_seed, t)`, so the two images of a pair share it
//! and identical inputs give identical features.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::diffusion::{q_sample, randn, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::seed::{derive_seed, rng_for, stream};
use crate::tensor::Tensor;
use crate::unet::{Denoiser, LEVELS};

/// Strictly increasing, nonempty list of timesteps in `1..=T`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TimestepSet(Vec<usize>);

impl TimestepSet {
    pub fn new(ts: Vec<usize>, sched: &NoiseSchedule) -> Result<Self> {
        if ts.is_empty() {
            return Err(Error::Config("timestep set is empty".into()));
        }
        if ts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("timestep set {ts:?} is not strictly increasing")));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > sched.steps()) {
            return Err(Error::Config(format!(
                "timestep {t} outside the schedule's range 1..={}",
                sched.steps()
            )));
        }
        Ok(Self(ts))
    }

    /// Maps timesteps quoted for a 1000-step chain onto `sched`; duplicates
    /// produced by rounding are merged.
    pub fn from_thousand_scale(ts: &[usize], sched: &NoiseSchedule) -> Result<Self> {
        let mut scaled: Vec<usize> = ts.iter().map(|&t| sched.scale_timestep(t)).collect();
        scaled.sort_unstable();
        scaled.dedup();
        Self::new(scaled, sched)
    }

    /// Sorted union of several sets.
    pub fn union<'a>(sets: impl IntoIterator<Item = &'a TimestepSet>) -> Result<Self> {
        let mut all: Vec<usize> = sets.into_iter().flat_map(|s| s.0.iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        if all.is_empty() {
            return Err(Error::Config("union of zero timestep sets".into()));
        }
        Ok(Self(all))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for TimestepSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Per-timestep decoder taps of one image. `levels[k][i]` is scale `i`
/// (finest first, `[1, C_i, H/2^i, W/2^i]`) at timestep `timesteps[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub timesteps: Vec<usize>,
    pub levels: Vec<Vec<Tensor<f32>>>,
    pub noise_seed: u64,
    pub schedule_hash: String,
}

impl FeatureStack {
    pub fn num_tensors(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Per scale, channel-axis concatenation in timestep order.
    pub fn concat_timesteps(&self) -> Result<Vec<Tensor<f32>>> {
        (0..LEVELS)
            .map(|i| {
                let parts: Vec<&Tensor<f32>> = self.levels.iter().map(|l| &l[i]).collect();
                if parts.len() == 1 {
                    Ok(parts[0].clone())
                } else {
                    Tensor::concat(&parts, 1)
                }
            })
            .collect()
    }

    /// The sub-stack for `tset`, which must be contained in this stack.
    pub fn select(&self, tset: &TimestepSet) -> Result<FeatureStack> {
        let levels = tset
            .as_slice()
            .iter()
            .map(|t| {
                self.timesteps
                    .iter()
                    .position(|x| x == t)
                    .map(|k| self.levels[k].clone())
                    .ok_or_else(|| Error::Contract(format!("timestep {t} was not extracted")))
            })
            .collect::<Result<_>>()?;
        Ok(FeatureStack {
            timesteps: tset.as_slice().to_vec(),
            levels,
            noise_seed: self.noise_seed,
            schedule_hash: self.schedule_hash.clone(),
        })
    }
}

/// The noise drawn for timestep `t` under `noise_seed`.
pub fn feature_noise(noise_seed: u64, t: usize, shape: &[usize]) -> Tensor<f32> {
    randn(shape, &mut rng_for(&[noise_seed, stream::FEATURE_NOISE, t as u64]))
}

/// Seed for pair `index` of a split at a given noise draw.
pub fn pair_noise_seed(run_seed: u64, split_tag: u64, index: u64, draw: u64) -> u64 {
    derive_seed(&[run_seed, stream::FEATURE_NOISE, split_tag, index, draw])
}

fn ensure_frozen(model: &Denoiser<f32>) -> Result<()> {
    if model.parameters().iter().any(|p| p.is_trainable()) {
        return Err(Error::Contract("feature extraction requires a frozen model".into()));
    }
    Ok(())
}

fn check_image(img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Data(format!("image shape {s:?} is not [3, H, W]")));
    }
    Ok(())
}

fn item(t: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let per = t.numel() / t.dim(0);
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, t.data()[i * per..(i + 1) * per].to_vec()).expect("slice of a valid batch")
}

/// Features of a batch of already-normalized images `[N, 3, H, W]`, all noised
/// with the same per-timestep noise. Returns one stack per batch item.
fn extract_batch(
    model: &Denoiser<f32>,
    batch: &Tensor<f32>,
    tset: &TimestepSet,
    sched: &NoiseSchedule,
    noise_seed: u64,
) -> Result<Vec<FeatureStack>> {
    ensure_frozen(model)?;
    for &t in tset.as_slice() {
        if t > sched.steps() {
            return Err(Error::Config(format!(
                "timestep {t} exceeds the schedule's {} steps",
                sched.steps()
            )));
        }
    }
    let n = batch.dim(0);
    let single = &batch.shape()[1..];
    let mut stacks: Vec<FeatureStack> = (0..n)
        .map(|_| FeatureStack {
            timesteps: tset.as_slice().to_vec(),
            levels: Vec::with_capacity(tset.len()),
            noise_seed,
            schedule_hash: sched.hash(),
        })
        .collect();
    for &t in tset.as_slice() {
        let eps1 = feature_noise(noise_seed, t, single);
        let eps = Tensor::new(batch.shape().to_vec(), eps1.data().repeat(n))?;
        let xt = q_sample(batch, t, &eps, sched)?;
        let out = model.forward_with_features(&xt, &vec![t; n])?;
        for (i, stack) in stacks.iter_mut().enumerate() {
            stack.levels.push(out.features.iter().map(|f| item(f, i)).collect());
        }
    }
    Ok(stacks)
}

/// Features of one normalized `[3, H, W]` image.
pub fn extract(
    model: &Denoiser<f32>,
    image: &Tensor<f32>,
    tset: &TimestepSet,
    sched: &NoiseSchedule,
    noise_seed: u64,
) -> Result<FeatureStack> {
    check_image(image)?;
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.reshape(shape)?;
    Ok(extract_batch(model, &batch, tset, sched, noise_seed)?.remove(0))
}

/// Features of a normalized pair with the same noise per timestep.
pub fn extract_pair(
    model: &Denoiser<f32>,
    img_a: &Tensor<f32>,
    img_b: &Tensor<f32>,
    tset: &TimestepSet,
    sched: &NoiseSchedule,
    noise_seed: u64,
) -> Result<(FeatureStack, FeatureStack)> {
    check_image(img_a)?;
    if img_a.shape() != img_b.shape() {
        return Err(Error::Data(format!(
            "pair images differ in shape: {:?} vs {:?}",
            img_a.shape(),
            img_b.shape()
        )));
    }
    let mut shape = vec![2];
    shape.extend_from_slice(img_a.shape());
    let batch = Tensor::new(shape, [img_a.data(), img_b.data()].concat())?;
    let mut stacks = extract_batch(model, &batch, tset, sched, noise_seed)?;
    let b = stacks.pop().expect("two stacks");
    let a = stacks.pop().expect("two stacks");
    Ok((a, b))
}

/// On-disk cache of pair features in the checkpoint container. Entries are
/// keyed by pair id, timesteps and noise seed; the schedule and model hashes
/// stored in the header must match or the entry is treated as stale.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
    schedule_hash: String,
    model_hash: String,
}

impl FeatureCache {
    pub fn new(dir: impl AsRef<Path>, sched: &NoiseSchedule, model: &Denoiser<f32>) -> Self {
        Self {
            dir: dir.as_ref().to_path_buf(),
            schedule_hash: sched.hash(),
            model_hash: model.param_hash(),
        }
    }

    pub fn path(&self, pair_id: &str, tset: &TimestepSet, noise_seed: u64) -> PathBuf {
        let mut h = Sha256::new();
        h.update(format!("{tset}|{noise_seed}").as_bytes());
        let key = hex::encode(&h.finalize()[..6]);
        self.dir.join(format!("{pair_id}_{key}.feat"))
    }

    pub fn store(&self, pair_id: &str, tset: &TimestepSet, a: &FeatureStack, b: &FeatureStack) -> Result<PathBuf> {
        let mut ck = Checkpoint::new();
        for (tag, stack) in [("a", a), ("b", b)] {
            for (k, levels) in stack.levels.iter().enumerate() {
                for (i, f) in levels.iter().enumerate() {
                    ck.push(&format!("{tag}.t{}.level{i}", stack.timesteps[k]), f);
                }
            }
        }
        let meta = &mut ck.header.meta;
        meta.insert("schedule_hash".into(), self.schedule_hash.clone());
        meta.insert("model_hash".into(), self.model_hash.clone());
        meta.insert("timesteps".into(), tset.to_string());
        meta.insert("noise_seed".into(), a.noise_seed.to_string());
        let path = self.path(pair_id, tset, a.noise_seed);
        ck.save(&path)?;
        Ok(path)
    }

    /// `Ok(None)` when the entry is missing or stale.
    pub fn load(&self, pair_id: &str, tset: &TimestepSet, noise_seed: u64) -> Result<Option<(FeatureStack, FeatureStack)>> {
        let path = self.path(pair_id, tset, noise_seed);
        if !path.is_file() {
            return Ok(None);
        }
        let ck = Checkpoint::load(&path)?;
        let meta = &ck.header.meta;
        let fresh = meta.get("schedule_hash") == Some(&self.schedule_hash)
            && meta.get("model_hash") == Some(&self.model_hash)
            && meta.get("timesteps") == Some(&tset.to_string());
        if !fresh {
            tracing::warn!(path = %path.display(), "stale feature cache entry ignored");
            return Ok(None);
        }
        let mut stacks = ["a", "b"].map(|tag| {
            let levels: Option<Vec<Vec<Tensor<f32>>>> = tset
                .as_slice()
                .iter()
                .map(|t| (0..LEVELS).map(|i| ck.tensor(&format!("{tag}.t{t}.level{i}"))).collect())
                .collect();
            levels.map(|levels| FeatureStack {
                timesteps: tset.as_slice().to_vec(),
                levels,
                noise_seed,
                schedule_hash: self.schedule_hash.clone(),
            })
        });
        match (stacks[0].take(), stacks[1].take()) {
            (Some(a), Some(b)) => Ok(Some((a, b))),
            _ => Err(Error::Data(format!("{}: incomplete feature cache entry", path.display()))),
        }
    }

    pub fn clear(&self) -> Result<()> {
        if self.dir.is_dir() {
            fs::remove_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleSpec;
    use crate::unet::DenoiserConfig;

    fn setup() -> (Denoiser<f32>, NoiseSchedule) {
        let mut m = Denoiser::build(&DenoiserConfig::with_width(8), 1).unwrap();
        m.set_trainable(false);
        (m, ScheduleSpec::rescaled(200).build().unwrap())
    }

    fn image(seed: u64) -> Tensor<f32> {
        feature_noise(seed, 1, &[3, 16, 16]).map(|v| v.clamp(-1.0, 1.0))
    }

    #[test]
    fn timestep_set_validation() {
        let s = ScheduleSpec::rescaled(200).build().unwrap();
        assert!(TimestepSet::new(vec![10, 20, 80], &s).is_ok());
        for bad in [vec![], vec![20, 10], vec![5, 5], vec![0], vec![201]] {
            assert!(matches!(TimestepSet::new(bad, &s), Err(Error::Config(_))));
        }
        let scaled = TimestepSet::from_thousand_scale(&[50, 100, 400], &s).unwrap();
        assert_eq!(scaled.as_slice(), &[10, 20, 80]);
        assert_eq!(scaled.to_string(), "{10,20,80}");
    }

    #[test]
    fn stack_counts_and_channels() {
        let (m, s) = setup();
        let tset = TimestepSet::new(vec![5, 10, 40], &s).unwrap();
        let st = extract(&m, &image(0), &tset, &s, 9).unwrap();
        assert_eq!(st.num_tensors(), 15);
        let cat = st.concat_timesteps().unwrap();
        for (f, c) in cat.iter().zip(m.config().level_channels()) {
            assert_eq!(f.dim(1), 3 * c);
        }
        assert!(st.levels.iter().flatten().all(|f| !f.is_tracked()));
    }

    #[test]
    fn extraction_is_deterministic() {
        let (m, s) = setup();
        let tset = TimestepSet::new(vec![7], &s).unwrap();
        let a = extract(&m, &image(1), &tset, &s, 3).unwrap();
        assert_eq!(a, extract(&m, &image(1), &tset, &s, 3).unwrap());
        assert_ne!(a, extract(&m, &image(1), &tset, &s, 4).unwrap());
    }

    #[test]
    fn identical_pair_gives_identical_stacks() {
        let (m, s) = setup();
        let tset = TimestepSet::new(vec![3, 30], &s).unwrap();
        let img = image(2);
        let (a, b) = extract_pair(&m, &img, &img, &tset, &s, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn swapping_pair_swaps_stacks() {
        let (m, s) = setup();
        let tset = TimestepSet::new(vec![12], &s).unwrap();
        let (x, y) = (image(3), image(4));
        let (a, b) = extract_pair(&m, &x, &y, &tset, &s, 5).unwrap();
        let (b2, a2) = extract_pair(&m, &y, &x, &tset, &s, 5).unwrap();
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn mismatched_pair_is_data_error() {
        let (m, s) = setup();
        let tset = TimestepSet::new(vec![1], &s).unwrap();
        let other = feature_noise(0, 1, &[3, 32, 32]);
        assert!(matches!(extract_pair(&m, &image(0), &other, &tset, &s, 0), Err(Error::Data(_))));
    }

    #[test]
    fn trainable_model_is_rejected() {
        let (mut m, s) = setup();
        m.set_trainable(true);
        let tset = TimestepSet::new(vec![1], &s).unwrap();
        assert!(matches!(extract(&m, &image(0), &tset, &s, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let (m, s) = setup();
        let dir = tempfile::tempdir().unwrap();
        let tset = TimestepSet::new(vec![4, 8], &s).unwrap();
        let (a, b) = extract_pair(&m, &image(5), &image(6), &tset, &s, 2).unwrap();
        let cache = FeatureCache::new(dir.path(), &s, &m);
        cache.store("p0", &tset, &a, &b).unwrap();
        assert_eq!(cache.load("p0", &tset, 2).unwrap(), Some((a, b)));
        assert_eq!(cache.load("p0", &tset, 3).unwrap(), None);
        let other = Denoiser::<f32>::build(m.config(), 99).unwrap();
        let stale = FeatureCache::new(dir.path(), &s, &other);
        assert_eq!(stale.load("p0", &tset, 2).unwrap(), None);
    }
}
