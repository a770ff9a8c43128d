use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use ddpmcd::baseline::raw_difference_baseline;
use ddpmcd::cd_head::{CdHead, CdHeadConfig};
use ddpmcd::checkpoint::Checkpoint;
use ddpmcd::config::{DataConfig, RunConfig};
use ddpmcd::data::{load_manifest, load_mask, save_mask, save_rgb, write_dataset, CdSample, Split};
use ddpmcd::diffusion::NoiseSchedule;
use ddpmcd::features::{extract_pair, pair_noise_seed, FeatureCache, TimestepSet};
use ddpmcd::metrics::{ConfusionCounts, MetricsReport};
use ddpmcd::nn::Module;
use ddpmcd::pipeline::{
    self, ablate, channel_stats, evaluate, generate_samples, load_cd_data, pretrain, pretrain_corpus, resolve_tsets,
    split_tag, train_cd, EpochLog, SplitData,
};
use ddpmcd::unet::{Denoiser, DenoiserConfig};
use ddpmcd::{Error, Tensor};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::args::Command;
use crate::rundir::RunDir;
use crate::settings::{parse_timesteps, parse_tsets};

pub fn run(cmd: &Command, cfg: &mut RunConfig, dir: &RunDir) -> Result<()> {
    match cmd {
        Command::Pretrain { steps } => {
            if let Some(s) = steps {
                cfg.pretrain.steps = *s;
            }
            cmd_pretrain(cfg, dir)
        }
        Command::Sample { checkpoint, n } => cmd_sample(cfg, dir, checkpoint, n.unwrap_or(cfg.samples)),
        Command::ExtractFeatures { checkpoint, split, pair } => {
            cmd_extract(cfg, dir, checkpoint, Split::parse(split)?, pair)
        }
        Command::TrainCd { checkpoint, epochs, timesteps } => {
            if let Some(e) = epochs {
                cfg.head.epochs = *e;
            }
            if let Some(t) = timesteps {
                cfg.timesteps = parse_timesteps(t)?;
            }
            cmd_train_cd(cfg, dir, checkpoint)
        }
        Command::Eval { checkpoint, head, predictions, split } => {
            let split = Split::parse(split)?;
            match (checkpoint, head, predictions) {
                (Some(c), Some(h), None) => cmd_eval_model(cfg, dir, c, h, split),
                (None, None, Some(p)) => cmd_eval_predictions(cfg, dir, p, split),
                _ => Err(Error::Config("eval needs either --checkpoint with --head, or --predictions".into()).into()),
            }
        }
        Command::AblateTimesteps { checkpoint, tsets, epochs } => {
            if let Some(e) = epochs {
                cfg.head.epochs = *e;
            }
            if let Some(t) = tsets {
                cfg.ablation = parse_tsets(t)?;
            }
            cmd_ablate(cfg, dir, checkpoint)
        }
        Command::MakeDataset => cmd_make_dataset(cfg, dir),
    }
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    Ok(cfg.schedule.build()?)
}

fn save_denoiser(model: &Denoiser<f32>, cfg: &RunConfig, step: u64, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::from_module(model);
    ck.header.schedule = Some(cfg.schedule.clone());
    ck.header.config = Some(serde_json::to_value(model.config())?);
    ck.header.step = step;
    ck.header.meta.insert("kind".into(), "denoiser".into());
    ck.header.meta.insert("param_hash".into(), model.param_hash());
    ck.save(path)?;
    Ok(())
}

/// A frozen denoiser; its schedule must match the resolved config.
fn load_denoiser(path: &Path, cfg: &RunConfig) -> Result<Denoiser<f32>> {
    let ck = Checkpoint::load(path)?;
    let config: DenoiserConfig = serde_json::from_value(
        ck.header
            .config
            .clone()
            .ok_or_else(|| Error::Data(format!("{}: no denoiser config in header", path.display())))?,
    )
    .map_err(|e| Error::Data(format!("{}: bad denoiser config: {e}", path.display())))?;
    if ck.header.schedule.as_ref() != Some(&cfg.schedule) {
        return Err(Error::Config(format!(
            "{} was trained with schedule {:?}, config has {:?}",
            path.display(),
            ck.header.schedule,
            cfg.schedule
        ))
        .into());
    }
    let mut model = Denoiser::<f32>::build(&config, 0)?;
    ck.load_into(&mut model)?;
    model.set_trainable(false);
    info!(path = %path.display(), params = model.num_parameters(), hash = %model.param_hash(), "loaded denoiser");
    Ok(model)
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadMeta {
    head: CdHeadConfig,
    /// Timesteps on the schedule's own scale.
    timesteps: Vec<usize>,
    threshold: f32,
    backbone_hash: String,
    best_epoch: u64,
}

fn save_head(head: &CdHead<f32>, meta: &HeadMeta, cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::from_module(head);
    ck.header.schedule = Some(cfg.schedule.clone());
    ck.header.config = Some(serde_json::to_value(meta)?);
    ck.header.step = meta.best_epoch;
    ck.header.meta.insert("kind".into(), "cd_head".into());
    ck.save(path)?;
    Ok(())
}

fn load_head(path: &Path, model: &Denoiser<f32>) -> Result<(CdHead<f32>, HeadMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta: HeadMeta = serde_json::from_value(
        ck.header
            .config
            .clone()
            .ok_or_else(|| Error::Data(format!("{}: no head config in header", path.display())))?,
    )
    .map_err(|e| Error::Data(format!("{}: bad head config: {e}", path.display())))?;
    if meta.backbone_hash != model.param_hash() {
        return Err(Error::Config(format!("{} was trained on a different denoiser", path.display())).into());
    }
    let mut head = CdHead::<f32>::build(&meta.head, 0)?;
    ck.load_into(&mut head)?;
    Ok((head, meta))
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn cmd_pretrain(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let sched = schedule(cfg)?;
    info!(images = cfg.pretrain.corpus_size, size = cfg.image_size, "generating pretraining corpus");
    let corpus = pretrain_corpus(cfg);
    let start = Instant::now();
    let mut csv = String::from("step,loss,running_loss,lr,grad_norm\n");
    let p = cfg.pretrain.clone();
    let out = pretrain(cfg, &corpus, &sched, |s, model| {
        let _ = writeln!(csv, "{},{},{},{},{}", s.step, s.loss, s.running_loss, s.lr, s.grad_norm);
        if s.step % 50 == 0 || s.step == 1 {
            info!(
                step = s.step,
                running_loss = format!("{:.4}", s.running_loss),
                lr = format!("{:.2e}", s.lr),
                elapsed_s = start.elapsed().as_secs(),
                "pretrain"
            );
        }
        if p.checkpoint_every > 0 && s.step % p.checkpoint_every == 0 && s.step < p.steps {
            save_denoiser(model, cfg, s.step, &dir.join(format!("denoiser_step{}.ckpt", s.step)))
                .map_err(|e| Error::Data(format!("{e:#}")))?;
        }
        Ok(())
    })?;
    dir.write("loss.csv", csv)?;
    save_denoiser(&out.model, cfg, p.steps, &dir.join("denoiser.ckpt"))?;
    let (first, last) = out.loss_ends(p.loss_window);
    let summary = serde_json::json!({
        "steps": p.steps,
        "initial_running_loss": first,
        "final_running_loss": last,
        "seconds": start.elapsed().as_secs_f64(),
        "param_hash": out.model.param_hash(),
    });
    dir.write("summary.json", serde_json::to_string_pretty(&summary)?)?;
    info!(initial = first, last, "pretraining done");
    println!("running loss {first:.4} -> {last:.4}; checkpoint {}", dir.join("denoiser.ckpt").display());
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, dir: &RunDir, checkpoint: &Path, n: usize) -> Result<()> {
    let sched = schedule(cfg)?;
    let model = load_denoiser(checkpoint, cfg)?;
    info!(n, steps = sched.steps(), "sampling");
    let batch = generate_samples(&model, n, cfg.image_size, &sched, cfg.seed)?;
    let per = batch.numel() / n.max(1);
    let shape = vec![3, cfg.image_size, cfg.image_size];
    for i in 0..n {
        let img = Tensor::new(shape.clone(), batch.data()[i * per..(i + 1) * per].to_vec())?;
        save_rgb(dir.join(format!("sample_{i:03}.png")), &img)?;
    }
    let corpus: Vec<Tensor<f32>> = ddpmcd::data::synth_pretrain_corpus(cfg.pretrain.corpus_size, cfg.image_size, cfg.seed).collect();
    let ss = channel_stats([&batch]);
    let cs = channel_stats(&corpus);
    let gap = ss
        .iter()
        .zip(&cs)
        .map(|(a, b)| (a.0 - b.0).abs().max((a.1 - b.1).abs()))
        .fold(0.0, f64::max);
    let stats = serde_json::json!({ "samples": ss, "corpus": cs, "max_gap": gap });
    dir.write("stats.json", serde_json::to_string_pretty(&stats)?)?;
    println!("channel\tsample mean/std\tcorpus mean/std");
    for (c, (s, k)) in ss.iter().zip(&cs).enumerate() {
        println!("{c}\t{:.3}/{:.3}\t{:.3}/{:.3}", s.0, s.1, k.0, k.1);
    }
    println!("max gap {gap:.3}");
    Ok(())
}

/// Channel mean of a `[1, C, h, w]` map, min-max scaled to a gray PNG.
fn save_channel_mean(path: &Path, f: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = (f.dim(1), f.dim(2), f.dim(3));
    let hw = h * w;
    let mut mean = vec![0.0f32; hw];
    for plane in f.data().chunks(hw) {
        for (m, v) in mean.iter_mut().zip(plane) {
            *m += v / c as f32;
        }
    }
    let (lo, hi) = mean.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray: Vec<f32> = mean.iter().map(|v| (v - lo) / span).collect();
    save_rgb(path, &Tensor::new(vec![3, h, w], gray.repeat(3))?)?;
    Ok(())
}

fn find_pair(split: &SplitData, pair: &str) -> Result<(usize, CdSample)> {
    let idx = split
        .patches
        .iter()
        .position(|p| p.id == pair)
        .or_else(|| pair.parse::<usize>().ok().filter(|&i| i < split.patches.len()))
        .ok_or_else(|| Error::Data(format!("no pair {pair:?} in the {} split", split.split.name())))?;
    Ok((idx, split.patches[idx].clone()))
}

fn split_of(data: &pipeline::CdData, split: Split) -> &SplitData {
    match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
        Split::Test => &data.test,
    }
}

fn cmd_extract(cfg: &RunConfig, dir: &RunDir, checkpoint: &Path, split: Split, pair: &str) -> Result<()> {
    let sched = schedule(cfg)?;
    let model = load_denoiser(checkpoint, cfg)?;
    let data = load_cd_data(cfg)?;
    let (idx, sample) = find_pair(split_of(&data, split), pair)?;
    let tset = TimestepSet::from_thousand_scale(&cfg.timesteps, &sched)?;
    let seed = pair_noise_seed(cfg.seed, split_tag(split), idx as u64, 0);
    let norm = ddpmcd::data::normalize;
    let (fa, fb) = extract_pair(&model, &norm(&sample.img_a), &norm(&sample.img_b), &tset, &sched, seed)?;
    let cache = FeatureCache::new(dir.join("cache"), &sched, &model);
    let path = cache.store(&sample.id, &tset, &fa, &fb)?;
    info!(pair = %sample.id, timesteps = %tset, cache = %path.display(), "features cached");
    let vis = dir.join("features");
    save_rgb(vis.join("img_a.png"), &sample.img_a)?;
    save_rgb(vis.join("img_b.png"), &sample.img_b)?;
    save_mask(vis.join("label.png"), &sample.mask, sample.height(), sample.width())?;
    for (k, &t) in tset.as_slice().iter().enumerate() {
        for i in 0..fa.levels[k].len() {
            let (a, b) = (&fa.levels[k][i], &fb.levels[k][i]);
            save_channel_mean(&vis.join(format!("a_t{t}_s{i}.png")), a)?;
            save_channel_mean(&vis.join(format!("b_t{t}_s{i}.png")), b)?;
            save_channel_mean(&vis.join(format!("diff_t{t}_s{i}.png")), &ddpmcd::cd_head::abs_difference(a, b)?)?;
        }
    }
    println!("pair {} at timesteps {tset}: {}", sample.id, path.display());
    Ok(())
}

fn epoch_line(log: &EpochLog) -> String {
    match log.val {
        Some(s) => format!(
            "{},{},{},{},{},{}",
            log.epoch, log.train_loss, log.lr, s.f1, s.iou, s.oa
        ),
        None => format!("{},{},{},,,", log.epoch, log.train_loss, log.lr),
    }
}

fn log_epoch(label: &str, log: &EpochLog) {
    match log.val {
        Some(s) => info!(
            head = label,
            epoch = log.epoch,
            loss = format!("{:.4}", log.train_loss),
            val_f1 = pct(s.f1),
            val_iou = pct(s.iou),
            val_oa = pct(s.oa),
            "epoch"
        ),
        None => info!(head = label, epoch = log.epoch, loss = format!("{:.4}", log.train_loss), "epoch"),
    }
}

fn cmd_train_cd(cfg: &RunConfig, dir: &RunDir, checkpoint: &Path) -> Result<()> {
    let sched = schedule(cfg)?;
    let model = load_denoiser(checkpoint, cfg)?;
    let data = load_cd_data(cfg)?;
    let tset = TimestepSet::from_thousand_scale(&cfg.timesteps, &sched)?;
    info!(train = data.train.patches.len(), val = data.val.patches.len(), timesteps = %tset, "training change head");
    let label = tset.to_string();
    let run = train_cd(&model, &sched, &data, &tset, cfg, |log| log_epoch(&label, log))?;
    let mut csv = String::from("epoch,train_loss,lr,val_f1,val_iou,val_oa\n");
    for log in &run.history {
        csv.push_str(&epoch_line(log));
        csv.push('\n');
    }
    dir.write("epochs.csv", csv)?;
    let meta = HeadMeta {
        head: run.head.config().clone(),
        timesteps: tset.as_slice().to_vec(),
        threshold: cfg.head.threshold,
        backbone_hash: model.param_hash(),
        best_epoch: run.best_epoch,
    };
    save_head(&run.head, &meta, cfg, &dir.join("head.ckpt"))?;
    println!(
        "best epoch {} (val F1 {}); head {}",
        run.best_epoch,
        run.best_val_f1.map_or("n/a".into(), pct),
        dir.join("head.ckpt").display()
    );
    Ok(())
}

fn write_report(dir: &RunDir, counts: ConfusionCounts, extra: &str) -> Result<MetricsReport> {
    let report = MetricsReport::new(counts)?;
    dir.write("metrics.json", report.to_json())?;
    let text = format!("{report}{extra}");
    dir.write("metrics.txt", &text)?;
    print!("{text}");
    Ok(report)
}

fn cmd_eval_model(cfg: &RunConfig, dir: &RunDir, checkpoint: &Path, head_path: &Path, split: Split) -> Result<()> {
    let sched = schedule(cfg)?;
    let model = load_denoiser(checkpoint, cfg)?;
    let (head, meta) = load_head(head_path, &model)?;
    let mut cfg = cfg.clone();
    cfg.head.threshold = meta.threshold;
    let data = load_cd_data(&cfg)?;
    let part = split_of(&data, split);
    if part.is_empty() {
        return Err(Error::Data(format!("the {} split is empty", split.name())).into());
    }
    let tset = TimestepSet::new(meta.timesteps.clone(), &sched)?;
    let ev = evaluate(&model, &sched, &head, &tset, part, &cfg)?;
    for (id, labels, h, w) in &ev.predictions {
        save_mask(dir.join("pred").join(format!("{id}.png")), labels, *h, *w)?;
    }
    let base = raw_difference_baseline(&part.originals)?;
    let extra = format!("raw-difference baseline F1 {} (threshold {:.4})\n", pct(base.f1), base.threshold);
    write_report(dir, ev.counts, &extra)?;
    Ok(())
}

fn cmd_eval_predictions(cfg: &RunConfig, dir: &RunDir, preds: &Path, split: Split) -> Result<()> {
    let DataConfig::Manifest { root } = &cfg.data else {
        return Err(Error::Config("--predictions needs a manifest dataset (--data-root)".into()).into());
    };
    let manifest = load_manifest(root)?;
    let mut counts = ConfusionCounts::default();
    for id in manifest.ids(split) {
        let gt = manifest.load_sample(id)?;
        let path = [preds.join(id), preds.join(format!("{id}.png"))]
            .into_iter()
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Data(format!("no prediction for {id} in {}", preds.display())))?;
        let (pred, h, w) = load_mask(&path)?;
        if (h, w) != (gt.height(), gt.width()) {
            return Err(Error::Data(format!("{}: {h}×{w} prediction for a {}×{} label", path.display(), gt.height(), gt.width())).into());
        }
        counts.accumulate(&pred, &gt.mask)?;
    }
    write_report(dir, counts, "")?;
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, dir: &RunDir, checkpoint: &Path) -> Result<()> {
    let sched = schedule(cfg)?;
    let model = load_denoiser(checkpoint, cfg)?;
    let data = load_cd_data(cfg)?;
    if data.test.is_empty() {
        return Err(Error::Data("the test split is empty".into()).into());
    }
    let tsets = resolve_tsets(&cfg.ablation, &sched)?;
    let labels: Vec<String> = tsets.iter().map(ToString::to_string).collect();
    let (runs, rows) = ablate(&model, &sched, &data, &tsets, cfg, |k, log| log_epoch(&labels[k], log))?;
    let mut table = String::from("| Timesteps (1000-step) | Timesteps | F1 | IoU | OA | best epoch |\n|---|---|---|---|---|---|\n");
    let mut json = Vec::new();
    for ((row, quoted), run) in rows.iter().zip(&cfg.ablation).zip(&runs) {
        let s = row.counts.scores()?;
        let quoted = quoted.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(
            table,
            "| {{{quoted}}} | {} | {} | {} | {} | {} |",
            row.timesteps,
            pct(s.f1),
            pct(s.iou),
            pct(s.oa),
            row.best_epoch
        );
        json.push(serde_json::json!({
            "timesteps": row.scaled,
            "f1": s.f1,
            "iou": s.iou,
            "oa": s.oa,
            "best_epoch": row.best_epoch,
            "val_f1": row.val_f1,
            "counts": row.counts,
        }));
        let meta = HeadMeta {
            head: run.head.config().clone(),
            timesteps: run.tset.as_slice().to_vec(),
            threshold: cfg.head.threshold,
            backbone_hash: model.param_hash(),
            best_epoch: run.best_epoch,
        };
        let name = format!("head_{}.ckpt", run.tset.as_slice().iter().map(ToString::to_string).collect::<Vec<_>>().join("-"));
        save_head(&run.head, &meta, cfg, &dir.join(name))?;
    }
    let base = raw_difference_baseline(&data.test.originals)?;
    let _ = writeln!(table, "\nraw-difference baseline F1 {}", pct(base.f1));
    dir.write("ablation.md", &table)?;
    dir.write("ablation.json", serde_json::to_string_pretty(&json)?)?;
    print!("{table}");
    Ok(())
}

fn cmd_make_dataset(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    if !matches!(cfg.data, DataConfig::Synthetic { .. }) {
        return Err(Error::Config("make-dataset needs a synthetic data config".into()).into());
    }
    let data = load_cd_data(cfg)?;
    let root = dir.join("dataset");
    write_dataset(
        &root,
        &[
            (Split::Train, &data.train.originals),
            (Split::Val, &data.val.originals),
            (Split::Test, &data.test.originals),
        ],
    )
    .with_context(|| format!("writing {}", root.display()))?;
    let n = data.train.originals.len() + data.val.originals.len() + data.test.originals.len();
    fs::metadata(&root)?;
    println!("{n} pairs written to {}", root.display());
    Ok(())
}
