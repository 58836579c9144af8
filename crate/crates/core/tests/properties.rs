use comface_core::augment::{augment, AugmentPolicy};
use comface_core::config::{GenerationConfig, PretrainConfig};
use comface_core::curriculum::{build_batch, current_range, CurriculumSchedule, PairSampler, PairSampling};
use comface_core::image::Image;
use comface_core::losses::{info_nce, info_nce_raw, intra_mse, task_mse};
use comface_core::model::ChangeHead;
use comface_core::rng::stream;
use comface_core::saliency::eigen_cam;
use comface_core::synth::{edit, sample_identity, AttributeCatalog, DatasetManifest, PARAM_DIM};
use comface_core::tensor::Tensor;
use comface_core::transfer::make_folds;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn unit_rows(n: usize, p: usize, seed: u64) -> Tensor<f64> {
    let mut r = stream(seed);
    let mut data: Vec<f64> = (0..n * p).map(|_| r.gen_range(-1.0..1.0)).collect();
    for row in data.chunks_mut(p) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::from_vec(&[n, p], data)
}

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = stream(seed);
    Image::from_planar(h, w, (0..3 * h * w).map(|_| r.gen_range(0.0f32..=1.0)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edits_move_each_component_monotonically(seed in any::<u64>(), a in -5.0f64..5.0, b in -5.0f64..5.0, which in 0usize..8) {
        prop_assume!((a - b).abs() > 1e-6);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let catalog = AttributeCatalog::builtin();
        let attr = catalog.iter().nth(which).unwrap();
        let id = sample_identity(seed, PARAM_DIM);
        let p_lo = edit(&id, attr, lo).unwrap();
        let p_hi = edit(&id, attr, hi).unwrap();
        for (i, &d) in attr.direction.iter().enumerate() {
            if d > 0.0 {
                prop_assert!(p_hi[i] > p_lo[i]);
            } else if d < 0.0 {
                prop_assert!(p_hi[i] < p_lo[i]);
            } else {
                prop_assert_eq!(p_hi[i], p_lo[i]);
            }
        }
    }

    #[test]
    fn augmentation_stays_in_unit_range_and_replays(seed in any::<u64>(), img_seed in any::<u64>()) {
        let img = random_image(24, 20, img_seed);
        let policy = AugmentPolicy { output_size: [16, 16], ..AugmentPolicy::default() };
        let a = augment(&img, &policy, &mut stream(seed)).unwrap();
        let b = augment(&img, &policy, &mut stream(seed)).unwrap();
        prop_assert!(a.in_unit_range());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn change_head_depends_only_on_differences(seed in any::<u64>(), shift in -3.0f64..3.0) {
        let mut r = stream(seed);
        let e = 6;
        let head = ChangeHead::<f64>::new(e, &mut r);
        let hx: Vec<f64> = (0..2 * e).map(|_| r.gen_range(-1.0..1.0)).collect();
        let hy: Vec<f64> = (0..2 * e).map(|_| r.gen_range(-1.0..1.0)).collect();
        let t = |v: &[f64]| Tensor::from_vec(&[2, e], v.to_vec());
        let d = head.forward(&t(&hx), &t(&hy));
        let c: Vec<f64> = (0..e).map(|i| shift * (i as f64 - 2.0)).collect();
        let sx: Vec<f64> = hx.iter().enumerate().map(|(i, v)| v + c[i % e]).collect();
        let sy: Vec<f64> = hy.iter().enumerate().map(|(i, v)| v + c[i % e]).collect();
        let d2 = head.forward(&t(&sx), &t(&sy));
        for (a, b) in d.iter().zip(&d2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn info_nce_is_nonnegative(seed in any::<u64>(), n in 1usize..6, p in 2usize..9) {
        let z = unit_rows(2 * n, p, seed);
        let l = info_nce(&z, 0.1).unwrap();
        prop_assert!(l >= 0.0);
        if n == 1 {
            prop_assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn raising_a_negative_similarity_never_lowers_info_nce(seed in any::<u64>(), n in 2usize..5, p in 2usize..6, t in 0.0f64..1.5) {
        let z = unit_rows(2 * n, p, seed);
        let mut r = stream(seed ^ 1);
        let j = r.gen_range(0..2 * n);
        let pos = (j + n) % (2 * n);
        let k = loop {
            let k = r.gen_range(0..2 * n);
            if k != j && k != pos {
                break k;
            }
        };
        // A private extra coordinate on rows j and k raises s_jk alone.
        let widen = |extra: f64| {
            let mut data = Vec::with_capacity(2 * n * (p + 1));
            for i in 0..2 * n {
                data.extend_from_slice(z.item(i));
                data.push(if i == j || i == k { extra } else { 0.0 });
            }
            Tensor::from_vec(&[2 * n, p + 1], data)
        };
        let base = info_nce_raw(&widen(0.0), 0.1).unwrap().0;
        let raised = info_nce_raw(&widen(t), 0.1).unwrap().0;
        prop_assert!(raised >= base - 1e-12);
    }

    #[test]
    fn losses_ignore_batch_order(seed in any::<u64>(), n in 1usize..6, p in 2usize..8) {
        let z = unit_rows(2 * n, p, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut stream(seed ^ 7));
        let mut data = Vec::new();
        for half in 0..2 {
            for &i in &perm {
                data.extend_from_slice(z.item(half * n + i));
            }
        }
        let zp = Tensor::from_vec(&[2 * n, p], data);
        prop_assert!((info_nce(&z, 0.1).unwrap() - info_nce(&zp, 0.1).unwrap()).abs() < 1e-12);

        let mut r = stream(seed ^ 3);
        let pred: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let gt: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..5.0)).collect();
        let pp: Vec<f64> = perm.iter().map(|&i| pred[i]).collect();
        let gp: Vec<f64> = perm.iter().map(|&i| gt[i]).collect();
        prop_assert!((intra_mse(&pred, &gt).unwrap() - intra_mse(&pp, &gp).unwrap()).abs() < 1e-12);
        prop_assert!((task_mse(&pred, &gt).unwrap() - task_mse(&pp, &gp).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn curriculum_range_never_grows(s_max in 0.5f64..10.0, widths in prop::collection::vec(1u32..5, 1..6)) {
        let mut boundaries = Vec::new();
        let mut acc = 0;
        for w in widths {
            acc += w;
            boundaries.push(acc);
        }
        let schedule = CurriculumSchedule { s_max, boundaries: boundaries.clone() };
        let mut prev = f64::INFINITY;
        for epoch in 1..=acc {
            let s = current_range(&schedule, epoch).unwrap();
            prop_assert!(s <= prev);
            let at_boundary = epoch > 1 && boundaries.contains(&(epoch - 1));
            prop_assert_eq!(s < prev && prev.is_finite(), at_boundary);
            prev = s;
        }
    }

    #[test]
    fn sampled_pairs_are_admissible(seed in any::<u64>(), range in 0.1f64..10.0, uniform_pair in any::<bool>()) {
        let cfg = GenerationConfig { identities: 12, task: None, ..GenerationConfig::default() };
        let manifest = DatasetManifest::from_config(&cfg, 3).unwrap();
        let mode = if uniform_pair { PairSampling::UniformPair } else { PairSampling::UniformDistance };
        let sampler = PairSampler::new(&manifest.alpha_grid, mode).unwrap();
        let schedule = CurriculumSchedule::constant(range, 1);
        let batch = build_batch(&manifest, &schedule, 1, 16, &sampler, &mut stream(seed)).unwrap();
        for pair in batch {
            let d = (pair.alpha_y - pair.alpha_x).abs();
            prop_assert!(d > 0.0 && d <= range + 1e-9);
            prop_assert!(manifest.contains(&pair.spec_x()) && manifest.contains(&pair.spec_y()));
            prop_assert_eq!(pair.spec_x().identity_seed, pair.spec_y().identity_seed);
            prop_assert_eq!(pair.spec_x().attribute, pair.spec_y().attribute);
        }
    }

    #[test]
    fn folds_partition_subjects(seed in any::<u64>(), n in 8usize..60, k in 2usize..6) {
        let subjects: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let folds = make_folds(&subjects, k, 0.1, seed).unwrap();
        let mut tested = Vec::new();
        for f in &folds {
            f.check_disjoint().unwrap();
            prop_assert_eq!(f.train_subjects.len() + f.val_subjects.len() + f.test_subjects.len(), n);
            tested.extend(f.test_subjects.iter().cloned());
        }
        tested.sort();
        let mut all = subjects.clone();
        all.sort();
        prop_assert_eq!(tested, all);
    }

    #[test]
    fn saliency_is_normalized_and_scale_invariant(seed in any::<u64>(), c in 1usize..6, h in 1usize..5, w in 1usize..5, scale in 0.01f64..100.0) {
        let mut r = stream(seed);
        let acts: Vec<f64> = (0..c * h * w).map(|_| r.gen_range(0.0..1.0)).collect();
        let map = eigen_cam(&acts, c, h, w).unwrap();
        prop_assert_eq!((map.height, map.width, map.values.len()), (h, w, h * w));
        prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let scaled: Vec<f64> = acts.iter().map(|v| v * scale).collect();
        let map2 = eigen_cam(&scaled, c, h, w).unwrap();
        let argmax = |m: &[f64]| m.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
        prop_assert_eq!(argmax(&map.values), argmax(&map2.values));
        for (a, b) in map.values.iter().zip(&map2.values) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn learning_rate_halves_exactly_once(lr in 1e-5f64..1e-2, halving in 1u32..12) {
        let cfg = PretrainConfig { learning_rate: lr, lr_halving_epoch: halving, ..PretrainConfig::default() };
        let rates: Vec<f64> = (1..=cfg.epochs).map(|e| cfg.learning_rate_at(e)).collect();
        let changes = rates.windows(2).filter(|w| w[0] != w[1]).count();
        prop_assert_eq!(changes, 1);
        prop_assert_eq!(rates[0], lr);
        prop_assert_eq!(*rates.last().unwrap(), lr / 2.0);
    }
}

#[test]
fn identities_do_not_collide() {
    let mut seen = std::collections::HashSet::new();
    for seed in 0..2000u64 {
        let id = sample_identity(seed, PARAM_DIM);
        let key: Vec<u64> = id.params.iter().map(|v| v.to_bits()).collect();
        assert!(seen.insert(key), "seed {seed} repeats an earlier identity");
    }
}

#[test]
fn two_views_of_one_image_differ() {
    let img = random_image(32, 32, 5);
    let policy = AugmentPolicy { output_size: [32, 32], ..AugmentPolicy::default() };
    let mut r = stream(11);
    let distinct = (0..100)
        .filter(|_| augment(&img, &policy, &mut r).unwrap() != augment(&img, &policy, &mut r).unwrap())
        .count();
    assert!(distinct >= 99, "only {distinct} of 100 view pairs differ");
}

#[test]
fn change_head_is_not_antisymmetric() {
    let mut r = stream(9);
    let e = 8;
    let head = ChangeHead::<f64>::new(e, &mut r);
    for _ in 0..20 {
        let hx = Tensor::from_vec(&[1, e], (0..e).map(|_| r.gen_range(-1.0..1.0)).collect());
        let hy = Tensor::from_vec(&[1, e], (0..e).map(|_| r.gen_range(-1.0..1.0)).collect());
        let a = head.forward(&hx, &hy)[0];
        let b = head.forward(&hy, &hx)[0];
        assert_ne!(a, b);
    }
}
