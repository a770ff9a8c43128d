use ddpmcd::cd_head::{feature_difference, CdHead, CdHeadConfig, ChangeMap};
use ddpmcd::config::RunConfig;
use ddpmcd::data::{normalize, synth_cd_dataset};
use ddpmcd::diffusion::ScheduleSpec;
use ddpmcd::features::{extract_pair, FeatureStack, TimestepSet};
use ddpmcd::nn::Module;
use ddpmcd::optim::{Adam, AdamConfig, Gradients};
use ddpmcd::pipeline::{head_config, pretrain, pretrain_corpus, score_bank, DiffBank};
use ddpmcd::unet::{Denoiser, DenoiserConfig};
use ddpmcd::Tensor;

fn frozen(width: usize) -> Denoiser<f32> {
    let mut m = Denoiser::<f32>::build(&DenoiserConfig::with_width(width), 0).unwrap();
    m.set_trainable(false);
    m
}

#[test]
fn concatenation_follows_timestep_order() {
    let shapes = [(4, 8), (8, 4), (8, 2), (16, 1), (16, 1)];
    let levels: Vec<Vec<Tensor<f32>>> = (0..3)
        .map(|k| {
            shapes
                .iter()
                .map(|&(c, s)| Tensor::full(vec![1, c, s, s], 10.0 * (k + 1) as f32))
                .collect()
        })
        .collect();
    let stack = FeatureStack {
        timesteps: vec![3, 7, 9],
        levels,
        noise_seed: 0,
        schedule_hash: String::new(),
    };
    let cat = stack.concat_timesteps().unwrap();
    for (scale, &(c, s)) in shapes.iter().enumerate() {
        assert_eq!(cat[scale].shape(), [1, 3 * c, s, s]);
        let block = c * s * s;
        for k in 0..3 {
            let part = &cat[scale].data()[k * block..(k + 1) * block];
            assert!(part.iter().all(|&v| v == 10.0 * (k + 1) as f32), "scale {scale} block {k}");
        }
    }
    let sched = ScheduleSpec::rescaled(20).build().unwrap();
    let sub = stack.select(&TimestepSet::new(vec![3, 9], &sched).unwrap()).unwrap().concat_timesteps().unwrap();
    let block = 4 * 8 * 8;
    assert_eq!(sub[0].data()[0], 10.0);
    assert_eq!(sub[0].data()[block], 30.0);
    let single = stack.select(&TimestepSet::new(vec![7], &sched).unwrap()).unwrap();
    assert_eq!(single.concat_timesteps().unwrap()[2], single.levels[0][2]);
}

/// Briefly pretrained so the features reflect image content rather than
/// the chaotic response of a random network.
fn pretrained_tiny(size: usize, steps: u64) -> Denoiser<f32> {
    let mut cfg = RunConfig::desk();
    cfg.image_size = size;
    cfg.patch_size = size;
    cfg.denoiser = DenoiserConfig::with_width(8);
    cfg.pretrain.corpus_size = 16;
    cfg.pretrain.steps = steps;
    cfg.pretrain.batch_size = 2;
    cfg.pretrain.lr = 1e-3;
    cfg.pretrain.warmup_steps = 20;
    let sched = cfg.schedule.build().unwrap();
    let corpus = pretrain_corpus(&cfg);
    let mut model = pretrain(&cfg, &corpus, &sched, |_, _| Ok(())).unwrap().model;
    model.set_trainable(false);
    model
}

#[test]
fn single_pixel_change_stays_local_at_finest_scale() {
    let model = pretrained_tiny(32, 400);
    let sched = RunConfig::desk().schedule.build().unwrap();
    let size = 32;
    let a = normalize(&synth_cd_dataset(1, size, 0.0, 6)[0].img_a);
    let mut bd = a.to_vec();
    let (py, px) = (13, 18);
    for c in 0..3 {
        bd[c * size * size + py * size + px] += 1.0;
    }
    let b = Tensor::new(vec![3, size, size], bd).unwrap();
    for t in [10, 20, 80] {
        let tset = TimestepSet::new(vec![t], &sched).unwrap();
        let (fa, fb) = extract_pair(&model, &a, &b, &tset, &sched, 5).unwrap();
        let d = &feature_difference(&fa, &fb).unwrap()[0];
        let (ch, hw) = (d.dim(1), size * size);
        let energy: Vec<f64> = (0..hw).map(|p| (0..ch).map(|c| d.data()[c * hw + p] as f64).sum()).collect();
        let at = energy[py * size + px];
        assert!(at > 0.0);
        let peak = (0..hw).max_by(|&i, &j| energy[i].total_cmp(&energy[j])).unwrap();
        let (ry, rx) = (peak / size, peak % size);
        assert!(ry.abs_diff(py) <= 1 && rx.abs_diff(px) <= 1, "t {t}: peak at ({ry}, {rx})");
        // mean response at Chebyshev distance ≥ 8 from the perturbed pixel
        let far: Vec<f64> = (0..hw)
            .filter(|&p| (p / size).abs_diff(py).max((p % size).abs_diff(px)) >= 8)
            .map(|p| energy[p])
            .collect();
        let far = far.iter().sum::<f64>() / far.len() as f64;
        assert!(far < 0.05 * at, "t {t}: far {far} vs {at} at the pixel");
    }
}

#[test]
fn prediction_is_symmetric_in_the_pair() {
    let model = frozen(8);
    let sched = ScheduleSpec::rescaled(200).build().unwrap();
    let tset = TimestepSet::new(vec![10, 20], &sched).unwrap();
    let s = &synth_cd_dataset(1, 32, 0.1, 4)[0];
    let (a, b) = (normalize(&s.img_a), normalize(&s.img_b));
    let head = CdHead::<f32>::build(&CdHeadConfig::for_features(&model.config().level_channels(), 2, 4, 4), 1).unwrap();
    let run = |x: &Tensor<f32>, y: &Tensor<f32>| {
        let (fx, fy) = extract_pair(&model, x, y, &tset, &sched, 9).unwrap();
        let logits = head.forward(&feature_difference(&fx, &fy).unwrap()).unwrap();
        ChangeMap::from_batch_logits(&logits, 0.5).unwrap().remove(0)
    };
    let (ab, ba) = (run(&a, &b), run(&b, &a));
    assert_eq!(ab, ba);
    let p = ab.probabilities.data();
    let hw = p.len() / 2;
    assert!((0..hw).all(|i| (p[i] + p[hw + i] - 1.0).abs() < 1e-5));
}

#[test]
fn head_is_lightweight_at_default_sizes() {
    let cfg = RunConfig::desk();
    let model = Denoiser::<f32>::build(&cfg.denoiser, 0).unwrap();
    let tset = TimestepSet::new(vec![10, 20, 80], &cfg.schedule.build().unwrap()).unwrap();
    let head = CdHead::<f32>::build(&head_config(&model, &tset, &cfg), 0).unwrap();
    assert!(
        (head.num_parameters() as f64) < 0.05 * model.num_parameters() as f64,
        "{} vs {}",
        head.num_parameters(),
        model.num_parameters()
    );
}

/// Trains a head on four pairs and scores it on the same pairs.
fn overfit(steps: u64, lr: f64) -> (Vec<f64>, f64) {
    let model = pretrained_tiny(32, 400);
    let sched = RunConfig::desk().schedule.build().unwrap();
    let tset = TimestepSet::new(vec![10], &sched).unwrap();
    let pairs = synth_cd_dataset(4, 32, 0.15, 2);
    let bank = DiffBank::build(&model, &pairs, &tset, &sched, |i| i as u64).unwrap();
    let cfg = CdHeadConfig::for_features(&model.config().level_channels(), 1, 4, 16);
    let mut head = CdHead::<f32>::build(&cfg, 3).unwrap();
    let mut adam = Adam::new(AdamConfig::adamw(0.0));
    let (x, y) = bank.batch(&[0, 1, 2, 3], &tset).unwrap();
    let mut losses = Vec::new();
    for _ in 0..steps {
        let loss = head.forward(&x).unwrap().cross_entropy(&y).unwrap();
        losses.push(loss.item() as f64);
        loss.backward().unwrap();
        let g = Gradients::collect(&head).unwrap();
        adam.apply(&mut head, &g, lr).unwrap();
    }
    let f1 = score_bank(&head, &tset, &bank, 0.5).unwrap().scores().unwrap().f1;
    (losses, f1)
}

#[test]
fn head_can_overfit_four_pairs() {
    let (losses, f1) = overfit(200, 1e-2);
    assert!(losses.last() < losses.first());
    assert!(f1 >= 0.99, "train F1 {f1}, loss {:?}", &losses[..][losses.len().saturating_sub(3)..]);
}

#[test]
fn small_lr_loss_decreases() {
    let (losses, _) = overfit(5, 1e-4);
    assert!(losses[4] < losses[0], "{losses:?}");
}
