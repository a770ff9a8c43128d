use ddpmcd::diffusion::{p_sample_step, q_sample, sample, training_step_target, Sampler, ScheduleSpec};
use ddpmcd::pipeline::{generate_samples, pretrain};
use ddpmcd::seed::rng_for;
use ddpmcd::unet::{timestep_embedding, DenoiserConfig};
use ddpmcd::config::RunConfig;
use ddpmcd::data::normalize;
use ddpmcd::Tensor;

/// Upper `p` quantile of χ² with `k` degrees of freedom (Wilson–Hilferty).
fn chi2_quantile(k: f64, z: f64) -> f64 {
    let c = 2.0 / (9.0 * k);
    k * (1.0 - c + z * c.sqrt()).powi(3)
}

#[test]
fn standard_schedule_endpoints_and_ratios() {
    let s = ScheduleSpec::standard().build().unwrap();
    assert_eq!(s.steps(), 1000);
    assert!(s.gamma(1000) < 5e-5, "γ_T = {}", s.gamma(1000));
    for t in 1..=1000 {
        assert!(s.gamma(t) < s.gamma(t - 1));
        assert!((s.gamma(t) / s.gamma(t - 1) - s.alpha(t)).abs() < 1e-12);
    }
}

#[test]
fn sampled_timesteps_are_uniform() {
    let s = ScheduleSpec::rescaled(200).build().unwrap();
    let x0 = Tensor::<f32>::zeros(vec![1000, 1]);
    let mut rng = rng_for(&[11]);
    let mut counts = vec![0u64; 200];
    for _ in 0..100 {
        for t in training_step_target(&x0, &s, &mut rng).unwrap().t {
            counts[t - 1] += 1;
        }
    }
    let expected = 100_000.0 / 200.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // p = 0.01 upper tail
    let crit = chi2_quantile(199.0, 2.326);
    assert!(chi2 < crit, "χ² {chi2:.1} ≥ {crit:.1}");
}

#[test]
fn training_target_is_q_sample_and_reproducible() {
    let s = ScheduleSpec::rescaled(200).build().unwrap();
    let x0 = Tensor::<f64>::from_f64(vec![3, 4], &(0..12).map(|i| i as f64 / 12.0 - 0.4).collect::<Vec<_>>()).unwrap();
    let a = training_step_target(&x0, &s, &mut rng_for(&[5])).unwrap();
    let b = training_step_target(&x0, &s, &mut rng_for(&[5])).unwrap();
    assert_eq!((a.t.clone(), a.xt.to_vec(), a.eps.to_vec()), (b.t, b.xt.to_vec(), b.eps.to_vec()));
    for (i, &t) in a.t.iter().enumerate() {
        let row = |x: &Tensor<f64>| Tensor::<f64>::new(vec![4], x.data()[i * 4..i * 4 + 4].to_vec()).unwrap();
        let want = q_sample(&row(&x0), t, &row(&a.eps), &s).unwrap();
        assert_eq!(want.data(), &a.xt.data()[i * 4..i * 4 + 4]);
    }
}

#[test]
fn posterior_coefficients_match_scalar_formula() {
    let s = ScheduleSpec::standard().build().unwrap();
    for t in [2, 17, 500, 1000] {
        let (c0, ct, var) = s.posterior_coefficients(t).unwrap();
        let (a, g, gp) = (s.alpha(t), s.gamma(t), s.gamma(t - 1));
        assert!((c0 - gp.sqrt() * (1.0 - a) / (1.0 - g)).abs() < 1e-15);
        assert!((ct - a.sqrt() * (1.0 - gp) / (1.0 - g)).abs() < 1e-15);
        assert!((var - (1.0 - gp) / (1.0 - g) * (1.0 - a)).abs() < 1e-15);
    }
}

#[test]
fn embeddings_are_pairwise_distinct_in_direction() {
    let dim = 64;
    let e: Vec<Vec<f64>> = (1..=200)
        .map(|t| timestep_embedding::<f32>(t as f64, dim).unwrap().to_f64_vec())
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut worst = f64::NEG_INFINITY;
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            let dot: f64 = e[i].iter().zip(&e[j]).map(|(a, b)| a * b).sum();
            worst = worst.max(dot / (norm(&e[i]) * norm(&e[j])));
        }
    }
    assert!(worst < 1.0 - 1e-6, "max cosine {worst}");
    assert!(timestep_embedding::<f32>(1.0, 7).is_err());
}

#[test]
fn samples_have_requested_shape_and_differ_by_seed() {
    let s = ScheduleSpec::rescaled(20).build().unwrap();
    let zero = |x: &Tensor<f32>, _: &[usize]| Ok(Tensor::zeros(x.shape().to_vec()));
    let a = sample(&zero, &[2, 3, 4, 4], &s, Sampler::Exact, &mut rng_for(&[1])).unwrap();
    let b = sample(&zero, &[2, 3, 4, 4], &s, Sampler::ClipDenoised, &mut rng_for(&[2])).unwrap();
    assert_eq!(a.shape(), [2, 3, 4, 4]);
    assert_ne!(a.data(), b.data());
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn final_step_is_deterministic() {
    let s = ScheduleSpec::rescaled(20).build().unwrap();
    let xt = Tensor::<f64>::from_f64(vec![2], &[0.3, -0.2]).unwrap();
    let eps = Tensor::<f64>::from_f64(vec![2], &[0.1, 0.4]).unwrap();
    let pred = move |_: &Tensor<f64>, _: &[usize]| Ok(eps.clone());
    let z1 = Tensor::<f64>::from_f64(vec![2], &[5.0, -5.0]).unwrap();
    let a = p_sample_step(&xt, 1, &pred, &z1, &s).unwrap();
    let b = p_sample_step(&xt, 1, &pred, &Tensor::zeros(vec![2]), &s).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(p_sample_step(&xt, 0, &pred, &z1, &s).is_err());
}

/// A small denoiser fitted to a corpus of constant 0.7 images must sample
/// images whose mean sits near 0.7.
#[test]
fn constant_corpus_is_reproduced_by_sampling() {
    let mut cfg = RunConfig::desk();
    cfg.image_size = 16;
    cfg.patch_size = 16;
    cfg.schedule = ScheduleSpec::rescaled(100);
    cfg.denoiser = DenoiserConfig::with_width(8);
    cfg.pretrain.steps = 1500;
    cfg.pretrain.batch_size = 4;
    cfg.pretrain.lr = 2e-3;
    cfg.pretrain.warmup_steps = 20;
    let sched = cfg.schedule.build().unwrap();
    let corpus: Vec<Tensor<f32>> = (0..8).map(|_| normalize(&Tensor::full(vec![3, 16, 16], 0.7f32))).collect();
    let out = pretrain(&cfg, &corpus, &sched, |_, _| Ok(())).unwrap();
    let (first, last) = out.loss_ends(50);
    assert!(last < first, "loss {first} → {last}");
    let mut model = out.model;
    ddpmcd::nn::Module::set_trainable(&mut model, false);
    let x = generate_samples(&model, 4, 16, &sched, 3).unwrap();
    let n = x.numel() as f64;
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((mean - 0.7).abs() < 0.1 && sd < 0.1, "sample mean {mean} sd {sd}, loss {first} → {last}");
}
