use ddpmcd::data::synth::{pretrain_image, Scene};
use ddpmcd::data::{denormalize, normalize, patchify, reassemble, synth_cd_pair, CdSample};
use ddpmcd::Tensor;
use proptest::prelude::*;

/// Ids of every object covering `(x, y)`, found by testing each footprint.
fn covering(scene: &Scene, x: i32, y: i32) -> Vec<u32> {
    let mut ids: Vec<u32> = scene.objects.iter().filter(|o| o.footprint.contains(x, y)).map(|o| o.id).collect();
    ids.sort_unstable();
    ids
}

#[test]
fn mask_equals_membership_set_difference() {
    for i in 0..20 {
        let p = synth_cd_pair(9, i, 64, 0.1);
        let mut expected = 0;
        for y in 0..64 {
            for x in 0..64 {
                let (a, b) = (covering(&p.scene_a, x, y), covering(&p.scene_b, x, y));
                assert!(a.len() <= 1 && b.len() <= 1, "overlapping objects at ({x}, {y})");
                let changed = a != b;
                expected += usize::from(changed);
                assert_eq!(p.sample.mask[y as usize * 64 + x as usize], u8::from(changed), "pair {i} ({x}, {y})");
            }
        }
        assert_eq!(p.sample.mask.iter().map(|&m| m as usize).sum::<usize>(), expected);
    }
}

#[test]
fn mean_coverage_tracks_change_rate() {
    let rate = 0.1;
    let cov: f64 = (0..200)
        .map(|i| {
            let m = synth_cd_pair(1, i, 64, rate).sample.mask;
            m.iter().map(|&v| v as f64).sum::<f64>() / m.len() as f64
        })
        .sum::<f64>()
        / 200.0;
    assert!((cov - rate).abs() <= 0.3 * rate, "mean coverage {cov}");
}

#[test]
fn pretraining_corpus_is_not_degenerate() {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0.0;
    for i in 0..1000 {
        for &v in pretrain_image(1, i, 64).data() {
            assert!((0.0..=1.0).contains(&v));
            sum += v as f64;
            sq += (v as f64).powi(2);
            n += 1.0;
        }
    }
    let mean = sum / n;
    assert!((sq / n - mean * mean).sqrt() > 0.05);
}

fn arbitrary_sample(h: usize, w: usize, seed: u64) -> CdSample {
    let v = |k: u64| (0..3 * h * w).map(|i| ((i as u64 * 2654435761 + k) % 1000) as f32 / 999.0).collect();
    let m = (0..h * w).map(|i| ((i as u64 + seed) % 5 == 0) as u8).collect();
    CdSample::new("p", Tensor::new(vec![3, h, w], v(seed)).unwrap(), Tensor::new(vec![3, h, w], v(seed + 7)).unwrap(), m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patches_reassemble_exactly(h in 1usize..40, w in 1usize..40, patch in 1usize..20, seed in 0u64..1000) {
        let s = arbitrary_sample(h, w, seed);
        let (patches, grid) = patchify(&s, patch).unwrap();
        prop_assert_eq!(patches.len(), h.div_ceil(patch) * w.div_ceil(patch));
        prop_assert!(patches.iter().all(|p| p.img_a.shape() == [3, patch, patch]));
        prop_assert_eq!(reassemble(&patches, grid, "p").unwrap(), s);
    }

    #[test]
    fn normalization_round_trips(values in prop::collection::vec(0.0f32..=1.0, 1..200)) {
        let n = values.len();
        let x = Tensor::new(vec![n], values).unwrap();
        let back = denormalize(&normalize(&x));
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn generators_are_deterministic(seed in 0u64..1_000_000, index in 0u64..1000, rate in 0.0f64..0.3) {
        let a = synth_cd_pair(seed, index, 32, rate).sample;
        let b = synth_cd_pair(seed, index, 32, rate).sample;
        prop_assert_eq!(a, b);
        prop_assert_eq!(pretrain_image(seed, index, 16).to_vec(), pretrain_image(seed, index, 16).to_vec());
    }
}
