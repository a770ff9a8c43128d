//! End-to-end training and evaluation: denoiser pretraining, change-head
//! training over cached feature differences, evaluation and the timestep
//! ablation.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use tracing::info;

use crate::cd_head::{abs_difference, CdHead, CdHeadConfig, ChangeMap};
use crate::config::{DataConfig, RunConfig};
use crate::data::{load_manifest, normalize, patchify, reassemble, stack, synth_cd_range, CdSample, PatchGrid, Split};
use crate::diffusion::{sample, training_step_target, NoiseSchedule, Sampler};
use crate::error::{Error, Result};
use crate::features::{extract_pair, pair_noise_seed, TimestepSet};
use crate::metrics::{ConfusionCounts, Scores};
use crate::nn::Module;
use crate::optim::{lr_linear_decay, lr_warmup_then_constant, Adam, AdamConfig, Gradients};
use crate::seed::{derive_seed, rng_for, stream};
use crate::tensor::Tensor;
use crate::unet::Denoiser;

/// Split tags mixed into per-pair noise seeds.
pub fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    /// Mean loss over the last `loss_window` steps.
    pub running_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Denoiser<f32>,
    pub losses: Vec<f64>,
}

impl PretrainOutcome {
    /// Mean of the first and last `window` losses.
    pub fn loss_ends(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..w.min(self.losses.len())]), mean(&self.losses[self.losses.len().saturating_sub(w)..]))
    }
}

/// The unlabeled pretraining corpus, normalized to `[−1, 1]`.
pub fn pretrain_corpus(cfg: &RunConfig) -> Vec<Tensor<f32>> {
    crate::data::synth_pretrain_corpus(cfg.pretrain.corpus_size, cfg.image_size, cfg.seed)
        .map(|img| normalize(&img))
        .collect()
}

/// Noise-prediction training of a fresh denoiser on `corpus`. `on_step` sees
/// every step and the model so far; returning an error aborts the run.
pub fn pretrain(
    cfg: &RunConfig,
    corpus: &[Tensor<f32>],
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(&StepLog, &Denoiser<f32>) -> Result<()>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    let p = &cfg.pretrain;
    let mut model = Denoiser::<f32>::build(&cfg.denoiser, derive_seed(&[cfg.seed, stream::TRAIN_BATCH]))?;
    let mut adam = Adam::new(AdamConfig::adam());
    let mut losses = Vec::with_capacity(p.steps as usize);
    for step in 1..=p.steps {
        let mut rng = rng_for(&[cfg.seed, stream::TRAIN_BATCH, step]);
        let picks: Vec<&Tensor<f32>> = (0..p.batch_size).map(|_| &corpus[rng.random_range(0..corpus.len())]).collect();
        let x0 = stack(&picks)?;
        let target = training_step_target(&x0, sched, &mut rng)?;
        let loss = model.forward(&target.xt, &target.t)?.mse_loss(&target.eps)?;
        let l = loss.item() as f64;
        if !l.is_finite() {
            return Err(Error::Numeric {
                layer: "pretrain.loss".into(),
                detail: format!("loss {l} at step {step}"),
            });
        }
        loss.backward()?;
        let mut grads = Gradients::collect(&model)?;
        let grad_norm = grads.clip_global_norm(p.grad_clip);
        let lr = lr_warmup_then_constant(step, p.warmup_steps, p.lr);
        adam.apply(&mut model, &grads, lr)?;
        losses.push(l);
        let lo = losses.len().saturating_sub(p.loss_window);
        let running_loss = losses[lo..].iter().sum::<f64>() / (losses.len() - lo) as f64;
        on_step(&StepLog { step, loss: l, running_loss, lr, grad_norm }, &model)?;
    }
    Ok(PretrainOutcome { model, losses })
}

/// `n` ancestral samples with clipped `x_0` estimates, mapped back to
/// `[0, 1]`, as `[n, 3, H, W]`.
pub fn generate_samples(model: &Denoiser<f32>, n: usize, size: usize, sched: &NoiseSchedule, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = rng_for(&[seed, stream::SAMPLE]);
    let x = sample(model, &[n, 3, size, size], sched, Sampler::ClipDenoised, &mut rng)?;
    Ok(x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
}

/// Per-channel `(mean, std)` over a batch `[N, 3, H, W]` or a list of images.
pub fn channel_stats<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> [(f64, f64); 3] {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0usize;
    for img in images {
        let s = img.shape();
        let (c, hw) = (s[s.len() - 3], s[s.len() - 2] * s[s.len() - 1]);
        for (k, chunk) in img.data().chunks(hw).enumerate() {
            let ch = k % c;
            for &v in chunk {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        count += img.numel() / c;
    }
    let n = count.max(1) as f64;
    std::array::from_fn(|ch| {
        let m = sum[ch] / n;
        (m, (sq[ch] / n - m * m).max(0.0).sqrt())
    })
}

/// A split kept both as original samples and as model-sized patches.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub split: Split,
    pub originals: Vec<CdSample>,
    pub patches: Vec<CdSample>,
    /// Grid and patch range of each original.
    pub layout: Vec<(PatchGrid, Range<usize>)>,
}

impl SplitData {
    pub fn new(split: Split, originals: Vec<CdSample>, patch: usize) -> Result<Self> {
        let mut patches = Vec::new();
        let mut layout = Vec::with_capacity(originals.len());
        for s in &originals {
            let (p, grid) = patchify(s, patch)?;
            let start = patches.len();
            patches.extend(p);
            layout.push((grid, start..patches.len()));
        }
        Ok(Self { split, originals, patches, layout })
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct CdData {
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

/// Synthetic splits use disjoint index ranges of one generator; manifest
/// splits come from the list files.
pub fn load_cd_data(cfg: &RunConfig) -> Result<CdData> {
    let (train, val, test) = match &cfg.data {
        DataConfig::Synthetic { train, val, test, change_rate, seed } => {
            let size = cfg.image_size;
            (
                synth_cd_range(*train, 0, size, *change_rate, *seed),
                synth_cd_range(*val, *train as u64, size, *change_rate, *seed),
                synth_cd_range(*test, (*train + *val) as u64, size, *change_rate, *seed),
            )
        }
        DataConfig::Manifest { root } => {
            let m = load_manifest(root)?;
            (m.load_split(Split::Train)?, m.load_split(Split::Val)?, m.load_split(Split::Test)?)
        }
    };
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok(CdData {
        train: SplitData::new(Split::Train, train, cfg.patch_size)?,
        val: SplitData::new(Split::Val, val, cfg.patch_size)?,
        test: SplitData::new(Split::Test, test, cfg.patch_size)?,
    })
}

/// Absolute feature differences of one pair at every timestep of a union
/// set: `per_t[k][i]` is scale `i` at `union[k]`, `[1, C_i, h_i, w_i]`.
#[derive(Debug, Clone)]
pub struct PairDiffs {
    pub per_t: Vec<Vec<Tensor<f32>>>,
}

/// Cached differences for a list of patches under one noise draw.
#[derive(Debug, Clone)]
pub struct DiffBank {
    pub union: TimestepSet,
    pub pairs: Vec<PairDiffs>,
    pub masks: Vec<Vec<u8>>,
}

impl DiffBank {
    pub fn build(
        model: &Denoiser<f32>,
        samples: &[CdSample],
        union: &TimestepSet,
        sched: &NoiseSchedule,
        noise_seed: impl Fn(usize) -> u64,
    ) -> Result<Self> {
        let mut pairs = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let (fa, fb) = extract_pair(model, &normalize(&s.img_a), &normalize(&s.img_b), union, sched, noise_seed(i))?;
            let per_t = fa
                .levels
                .iter()
                .zip(&fb.levels)
                .map(|(la, lb)| la.iter().zip(lb).map(|(a, b)| abs_difference(a, b)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            pairs.push(PairDiffs { per_t });
        }
        Ok(Self {
            union: union.clone(),
            pairs,
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Head input for the pairs `idx` restricted to `tset`: per scale,
    /// timesteps concatenated along channels and pairs along the batch.
    pub fn batch(&self, idx: &[usize], tset: &TimestepSet) -> Result<(Vec<Tensor<f32>>, Vec<u8>)> {
        let pos: Vec<usize> = tset
            .as_slice()
            .iter()
            .map(|t| {
                self.union
                    .as_slice()
                    .iter()
                    .position(|u| u == t)
                    .ok_or_else(|| Error::Contract(format!("timestep {t} is not in the cached set {}", self.union)))
            })
            .collect::<Result<_>>()?;
        let levels = self.pairs.first().map_or(0, |p| p.per_t[0].len());
        let mut inputs = Vec::with_capacity(levels);
        for scale in 0..levels {
            let items = idx
                .iter()
                .map(|&i| {
                    let parts: Vec<&Tensor<f32>> = pos.iter().map(|&k| &self.pairs[i].per_t[k][scale]).collect();
                    if parts.len() == 1 {
                        Ok(parts[0].clone())
                    } else {
                        Tensor::concat(&parts, 1)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor<f32>> = items.iter().collect();
            inputs.push(if refs.len() == 1 { items[0].clone() } else { Tensor::concat(&refs, 0)? });
        }
        let labels = idx.iter().flat_map(|&i| self.masks[i].iter().copied()).collect();
        Ok((inputs, labels))
    }
}

/// The union of all timestep sets a run will need, on the schedule's scale.
pub fn resolve_tsets(sets: &[Vec<usize>], sched: &NoiseSchedule) -> Result<Vec<TimestepSet>> {
    sets.iter().map(|s| TimestepSet::from_thousand_scale(s, sched)).collect()
}

pub fn head_config(model: &Denoiser<f32>, tset: &TimestepSet, cfg: &RunConfig) -> CdHeadConfig {
    CdHeadConfig::for_features(&model.config().level_channels(), tset.len(), cfg.head.reduction, cfg.head.fusion_width)
}

/// Thresholded predictions of `head` over every pair of `bank`.
pub fn predict_bank(head: &CdHead<f32>, tset: &TimestepSet, bank: &DiffBank, threshold: f32) -> Result<Vec<ChangeMap>> {
    let mut maps = Vec::with_capacity(bank.len());
    let idx: Vec<usize> = (0..bank.len()).collect();
    for chunk in idx.chunks(8) {
        let (x, _) = bank.batch(chunk, tset)?;
        maps.extend(ChangeMap::from_batch_logits(&head.forward(&x)?, threshold)?);
    }
    Ok(maps)
}

/// Micro-averaged confusion counts of `head` on a bank.
pub fn score_bank(head: &CdHead<f32>, tset: &TimestepSet, bank: &DiffBank, threshold: f32) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for (m, gt) in predict_bank(head, tset, bank, threshold)?.iter().zip(&bank.masks) {
        counts.accumulate(&m.labels, gt)?;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub train_loss: f64,
    pub lr: f64,
    pub val: Option<Scores>,
}

/// A trained head with its selection record.
#[derive(Debug, Clone)]
pub struct HeadRun {
    pub tset: TimestepSet,
    pub head: CdHead<f32>,
    /// Epoch of the kept weights (best validation F1, or the last epoch).
    pub best_epoch: u64,
    pub best_val_f1: Option<f64>,
    pub history: Vec<EpochLog>,
}

/// Depends on the timestep set only, so a head trains identically alone or
/// in lockstep with others.
pub fn head_seed(run_seed: u64, tset: &TimestepSet) -> u64 {
    let mut parts = vec![run_seed, stream::CD_PAIR];
    parts.extend(tset.as_slice().iter().map(|&t| t as u64));
    derive_seed(&parts)
}

fn noise_seed_for(cfg: &RunConfig, split: Split, draw: u64) -> impl Fn(usize) -> u64 + '_ {
    let seed = cfg.seed;
    move |i| pair_noise_seed(seed, split_tag(split), i as u64, draw)
}

/// Trains one head per timestep set in lockstep over the same batches.
/// The backbone must be frozen and is checked unchanged afterwards.
pub fn train_cd_heads(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    data: &CdData,
    tsets: &[TimestepSet],
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(usize, &EpochLog),
) -> Result<Vec<HeadRun>> {
    cfg.validate()?;
    if tsets.is_empty() {
        return Err(Error::Config("no timestep sets to train".into()));
    }
    let backbone = model.param_hash();
    let union = TimestepSet::union(tsets)?;
    let h = &cfg.head;
    let mut heads: Vec<CdHead<f32>> = tsets
        .iter()
        .map(|t| CdHead::build(&head_config(model, t, cfg), head_seed(cfg.seed, t)))
        .collect::<Result<_>>()?;
    let mut optims: Vec<Adam<f32>> = tsets.iter().map(|_| Adam::new(AdamConfig::adamw(h.weight_decay))).collect();
    let mut runs: Vec<HeadRun> = tsets
        .iter()
        .zip(&heads)
        .map(|(t, head)| HeadRun {
            tset: t.clone(),
            head: head.clone(),
            best_epoch: 0,
            best_val_f1: None,
            history: Vec::new(),
        })
        .collect();

    info!(pairs = data.val.patches.len(), timesteps = %union, "caching validation differences");
    let val_bank = if data.val.patches.is_empty() {
        None
    } else {
        Some(DiffBank::build(model, &data.val.patches, &union, sched, noise_seed_for(cfg, Split::Val, 0))?)
    };
    let mut train_banks: Vec<Option<DiffBank>> = vec![None; h.noise_draws.min(h.epochs) as usize];
    let n = data.train.patches.len();
    let per_epoch = n.div_ceil(h.batch_size) as u64;
    let total_steps = per_epoch * h.epochs;
    let mut global = 0u64;
    for epoch in 0..h.epochs {
        let draw = (epoch % h.noise_draws) as usize;
        if train_banks[draw].is_none() {
            info!(pairs = n, draw, timesteps = %union, "caching training differences");
            train_banks[draw] = Some(DiffBank::build(
                model,
                &data.train.patches,
                &union,
                sched,
                noise_seed_for(cfg, Split::Train, draw as u64),
            )?);
        }
        let bank = train_banks[draw].as_ref().expect("bank was just built");
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(&[cfg.seed, stream::SHUFFLE, epoch]));
        let mut loss_sum = vec![0.0f64; heads.len()];
        let mut lr = h.lr;
        for chunk in order.chunks(h.batch_size) {
            lr = lr_linear_decay(global, total_steps, h.lr);
            for (k, head) in heads.iter_mut().enumerate() {
                let (x, y) = bank.batch(chunk, &tsets[k])?;
                let loss = head.forward(&x)?.cross_entropy(&y)?;
                let l = loss.item() as f64;
                if !l.is_finite() {
                    return Err(Error::Numeric {
                        layer: "head.loss".into(),
                        detail: format!("loss {l} in epoch {epoch}"),
                    });
                }
                loss.backward()?;
                let grads = Gradients::collect(&*head)?;
                optims[k].apply(head, &grads, lr)?;
                loss_sum[k] += l * chunk.len() as f64;
            }
            global += 1;
        }
        for (k, head) in heads.iter().enumerate() {
            let val = match &val_bank {
                Some(vb) => Some(score_bank(head, &tsets[k], vb, h.threshold)?.scores()?),
                None => None,
            };
            let val_f1 = val.map(|s| s.f1);
            let log = EpochLog {
                epoch,
                train_loss: loss_sum[k] / n as f64,
                lr,
                val,
            };
            let run = &mut runs[k];
            let better = match (val_f1, run.best_val_f1) {
                (Some(v), Some(best)) => v > best,
                (Some(_), None) => true,
                (None, _) => true,
            };
            if better {
                run.head = head.clone();
                run.best_epoch = epoch;
                run.best_val_f1 = val_f1;
            }
            run.history.push(log);
            on_epoch(k, &log);
        }
    }
    if model.param_hash() != backbone {
        return Err(Error::Contract("denoiser parameters changed during head training".into()));
    }
    Ok(runs)
}

/// Single-head convenience wrapper around [`train_cd_heads`].
pub fn train_cd(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    data: &CdData,
    tset: &TimestepSet,
    cfg: &RunConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<HeadRun> {
    let mut on_epoch = on_epoch;
    let mut runs = train_cd_heads(model, sched, data, std::slice::from_ref(tset), cfg, |_, log| on_epoch(log))?;
    Ok(runs.remove(0))
}

/// Predicted change maps per original sample, stitched from patches.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub counts: ConfusionCounts,
    /// `(id, labels, height, width)` per original sample.
    pub predictions: Vec<(String, Vec<u8>, usize, usize)>,
}

/// Stitches patch maps back to each original and scores them against the
/// original masks, so padded pixels never count.
pub fn evaluate_split(split: &SplitData, maps: &[ChangeMap]) -> Result<Evaluation> {
    if maps.len() != split.patches.len() {
        return Err(Error::Contract(format!("{} maps for {} patches", maps.len(), split.patches.len())));
    }
    let mut counts = ConfusionCounts::default();
    let mut predictions = Vec::with_capacity(split.originals.len());
    for (orig, (grid, range)) in split.originals.iter().zip(&split.layout) {
        let patches: Vec<CdSample> = split.patches[range.clone()]
            .iter()
            .zip(&maps[range.clone()])
            .map(|(p, m)| CdSample::new(p.id.clone(), p.img_a.clone(), p.img_b.clone(), m.labels.clone()))
            .collect::<Result<_>>()?;
        let stitched = reassemble(&patches, *grid, &orig.id)?;
        counts.accumulate(&stitched.mask, &orig.mask)?;
        predictions.push((orig.id.clone(), stitched.mask, orig.height(), orig.width()));
    }
    Ok(Evaluation { counts, predictions })
}

/// Noise-seeded test-time bank for a split.
pub fn split_bank(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    split: &SplitData,
    union: &TimestepSet,
    cfg: &RunConfig,
) -> Result<DiffBank> {
    DiffBank::build(model, &split.patches, union, sched, noise_seed_for(cfg, split.split, 0))
}

/// Scores a trained head on a split with the split's fixed test-time noise.
pub fn evaluate(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    head: &CdHead<f32>,
    tset: &TimestepSet,
    split: &SplitData,
    cfg: &RunConfig,
) -> Result<Evaluation> {
    let bank = split_bank(model, sched, split, tset, cfg)?;
    evaluate_split(split, &predict_bank(head, tset, &bank, cfg.head.threshold)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub timesteps: String,
    pub scaled: Vec<usize>,
    pub best_epoch: u64,
    pub val_f1: Option<f64>,
    pub counts: ConfusionCounts,
}

/// Lockstep training of one head per set, each scored on the test split.
pub fn ablate(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    data: &CdData,
    tsets: &[TimestepSet],
    cfg: &RunConfig,
    on_epoch: impl FnMut(usize, &EpochLog),
) -> Result<(Vec<HeadRun>, Vec<AblationRow>)> {
    let runs = train_cd_heads(model, sched, data, tsets, cfg, on_epoch)?;
    let union = TimestepSet::union(tsets)?;
    let bank = split_bank(model, sched, &data.test, &union, cfg)?;
    let rows = runs
        .iter()
        .map(|r| {
            let ev = evaluate_split(&data.test, &predict_bank(&r.head, &r.tset, &bank, cfg.head.threshold)?)?;
            Ok(AblationRow {
                timesteps: r.tset.to_string(),
                scaled: r.tset.as_slice().to_vec(),
                best_epoch: r.best_epoch,
                val_f1: r.best_val_f1,
                counts: ev.counts,
            })
        })
        .collect::<Result<_>>()?;
    Ok((runs, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig::desk();
        c.image_size = 16;
        c.patch_size = 16;
        c.schedule = crate::diffusion::ScheduleSpec::rescaled(20);
        c.denoiser = crate::unet::DenoiserConfig::with_width(8);
        c.pretrain.steps = 3;
        c.pretrain.corpus_size = 4;
        c.pretrain.warmup_steps = 1;
        c.data = DataConfig::Synthetic {
            train: 3,
            val: 2,
            test: 2,
            change_rate: 0.2,
            seed: 3,
        };
        c.head.epochs = 2;
        c.head.batch_size = 2;
        c.head.reduction = 4;
        c.head.fusion_width = 4;
        c
    }

    #[test]
    fn pretrain_runs_and_logs_every_step() {
        let cfg = tiny_cfg();
        let sched = cfg.schedule.build().unwrap();
        let corpus = pretrain_corpus(&cfg);
        let mut steps = Vec::new();
        let out = pretrain(&cfg, &corpus, &sched, |s, _| {
            steps.push(s.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(steps, [1, 2, 3]);
        assert_eq!(out.losses.len(), 3);
        assert!(out.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn lockstep_training_keeps_backbone_and_reports_epochs() {
        let cfg = tiny_cfg();
        let sched = cfg.schedule.build().unwrap();
        let mut model = Denoiser::<f32>::build(&cfg.denoiser, 0).unwrap();
        model.set_trainable(false);
        let before = model.param_hash();
        let data = load_cd_data(&cfg).unwrap();
        let tsets = resolve_tsets(&[vec![50], vec![50, 400]], &sched).unwrap();
        let mut seen = Vec::new();
        let (runs, rows) = ablate(&model, &sched, &data, &tsets, &cfg, |k, l| seen.push((k, l.epoch))).unwrap();
        assert_eq!(seen, [(0, 0), (1, 0), (0, 1), (1, 1)]);
        assert_eq!(runs.len(), 2);
        assert_eq!(rows[1].counts.total(), 2 * 16 * 16);
        assert_eq!(model.param_hash(), before);
    }

    #[test]
    fn bank_batch_orders_timesteps_then_pairs() {
        let cfg = tiny_cfg();
        let sched = cfg.schedule.build().unwrap();
        let mut model = Denoiser::<f32>::build(&cfg.denoiser, 0).unwrap();
        model.set_trainable(false);
        let data = load_cd_data(&cfg).unwrap();
        let union = TimestepSet::new(vec![1, 8], &sched).unwrap();
        let bank = DiffBank::build(&model, &data.train.patches, &union, &sched, |i| i as u64).unwrap();
        let only8 = TimestepSet::new(vec![8], &sched).unwrap();
        let (x, y) = bank.batch(&[2, 0], &union).unwrap();
        let (x8, _) = bank.batch(&[2], &only8).unwrap();
        let c0 = bank.pairs[0].per_t[0][0].dim(1);
        assert_eq!(x[0].dim(0), 2);
        assert_eq!(x[0].dim(1), 2 * c0);
        let per = c0 * 16 * 16;
        assert_eq!(&x[0].data()[per..2 * per], x8[0].data());
        assert_eq!(&y[..256], &bank.masks[2][..]);
        assert!(bank.batch(&[0], &TimestepSet::new(vec![5], &sched).unwrap()).is_err());
    }

    #[test]
    fn channel_stats_of_constant_images() {
        let img = Tensor::full(vec![3, 2, 2], 0.25f32);
        let s = channel_stats([&img, &img]);
        assert!(s.iter().all(|&(m, sd)| (m - 0.25).abs() < 1e-12 && sd < 1e-6));
    }
}
