use mmad_core::gacm::{gacm_forward, gacm_fuse, GacmParams};
use mmad_core::metrics::{auroc, pixel_auroc};
use mmad_core::model::Model;
use mmad_core::numerics::ops::{euclidean_distance, gelu_scalar, softmax_row};
use mmad_core::numerics::{ParameterStore, Tensor};
use mmad_core::octa::{build_prompts, octa_forward, prototype_attention, HashEmbedder, Mode, MoeParams, PromptCatalog, PrototypeParams};
use mmad_core::scoring::{fuse, image_score, AnomalyMap, FusionWeights};
use mmad_core::trainer::{batch_loss, GradCheckConfig};
use mmad_core::loss::LossWeights;
use mmad_core::{PixelMask, ValidityMask};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(64)
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0_f64, n)
}

fn map(h: usize, w: usize, data: Vec<f64>) -> AnomalyMap<f64> {
    AnomalyMap::new(h, w, data).unwrap()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rand::Rng::random_range(&mut rng, -30.0..30.0)).collect();
        let y = softmax_row(&tensor(vec![rows, cols], data));
        for r in 0..rows {
            prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gacm_fuse_is_convex(sem in vals(12), geo in vals(12), gate in prop::collection::vec(0.0..=1.0_f64, 12)) {
        let out = gacm_fuse(&tensor(vec![2, 2, 3], sem.clone()), &tensor(vec![2, 2, 3], geo.clone()), &tensor(vec![2, 2, 3], gate)).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            prop_assert!(v >= sem[i].min(geo[i]) && v <= sem[i].max(geo[i]));
        }
    }

    #[test]
    fn pass_through_gacm_is_identity(x in vals(2 * 3 * 4)) {
        let mut store = ParameterStore::<f64>::new();
        let params = GacmParams::pass_through(&mut store, "g", 4).unwrap();
        let f = tensor(vec![2, 3, 4], x);
        prop_assert_eq!(gacm_forward(&store, &params, &f).unwrap(), f);
    }

    #[test]
    fn attention_weights_sum_to_one(n in 1usize..7, seed in any::<u64>()) {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proto = PrototypeParams::init(&mut store, &mut rng, "p", 6, 0.0).unwrap();
        let t: Vec<f64> = (0..n * 6).map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0)).collect();
        let (_, a) = prototype_attention(&store, &proto, &tensor(vec![n, 6], t)).unwrap();
        prop_assert!((a.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn unselected_experts_do_not_matter(n in 1usize..5, seed in any::<u64>()) {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let moe = MoeParams::init(&mut store, &mut rng, "moe", 4, 5, 2).unwrap();
        let t = tensor(vec![n, 4], (0..n * 4).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect());
        let (before, selection) = {
            let g = mmad_core::numerics::Graph::new();
            let p = store.bind(&g);
            let (v, sel) = moe.forward_with_selection(&p, g.leaf(t.clone())).unwrap();
            (g.value(v), sel)
        };
        let used: Vec<usize> = selection.iter().flatten().copied().collect();
        for (e, expert) in moe.experts.iter().enumerate().filter(|(e, _)| !used.contains(e)) {
            for id in expert.ids() {
                for v in store.get_mut(id).data_mut() {
                    *v += 1.0 + e as f64;
                }
            }
        }
        let after = mmad_core::octa::moe_forward(&store, &moe, &t).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn losses_ignore_invalid_patches(seed in 0u64..1000, bump in 0.5..50.0_f64) {
        let cfg = GradCheckConfig { seed, ..GradCheckConfig::default() };
        let model = Model::<f64>::init(cfg.arch(), seed).unwrap();
        let mut batch = cfg.batch().unwrap();
        let base = batch_loss(&model, &batch.iter().collect::<Vec<_>>(), &LossWeights::default(), &mut Mode::Eval).unwrap();
        // Sample 1 has pixel (0, 0) invalid.
        let s = &mut batch[1];
        prop_assert!(!s.mask.get(0, 0));
        for v in s.f_rgb.data_mut()[..cfg.d_rgb].iter_mut().chain(s.f_3d.data_mut()[..cfg.d_3d].iter_mut()) {
            *v += bump;
        }
        let moved = batch_loss(&model, &batch.iter().collect::<Vec<_>>(), &LossWeights::default(), &mut Mode::Eval).unwrap();
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn fuse_is_monotone(
        r in prop::collection::vec(0.0..5.0_f64, 6),
        g in prop::collection::vec(0.0..5.0_f64, 6),
        t in prop::collection::vec(0.0..5.0_f64, 6),
        which in 0usize..3,
        delta in prop::collection::vec(0.0..2.0_f64, 6),
        alpha in 0.0..2.0_f64,
        beta in 0.0..2.0_f64,
    ) {
        let w = FusionWeights { alpha, beta };
        let base = fuse(&map(2, 3, r.clone()), &map(2, 3, g.clone()), &map(2, 3, t.clone()), &w).unwrap();
        let mut inputs = [r, g, t];
        for (v, d) in inputs[which].iter_mut().zip(&delta) {
            *v += d;
        }
        let [r2, g2, t2] = inputs;
        let bumped = fuse(&map(2, 3, r2), &map(2, 3, g2), &map(2, 3, t2), &w).unwrap();
        for (a, b) in base.data().iter().zip(bumped.data()) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn fuse_matches_closed_form_on_constant_maps(r in 0.0..10.0_f64, g in 0.0..10.0_f64, t in 0.0..10.0_f64) {
        let w = FusionWeights::default();
        let out = fuse(&map(3, 2, vec![r; 6]), &map(3, 2, vec![g; 6]), &map(3, 2, vec![t; 6]), &w).unwrap();
        for &v in out.data() {
            prop_assert!((v - (0.5 * r * g + 0.5 * t)).abs() <= 1e-12);
        }
    }

    #[test]
    fn image_score_ignores_invalid_pixels(data in prop::collection::vec(0.0..5.0_f64, 9), valid in prop::collection::vec(any::<bool>(), 9), noise in prop::collection::vec(0.0..100.0_f64, 9)) {
        let mask = ValidityMask::from_vec(3, 3, valid.clone()).unwrap();
        let moved: Vec<f64> = data.iter().zip(&valid).zip(&noise).map(|((&d, &ok), &n)| if ok { d } else { n }).collect();
        prop_assert_eq!(image_score(&map(3, 3, data), &mask).unwrap(), image_score(&map(3, 3, moved), &mask).unwrap());
    }

    #[test]
    fn auroc_is_invariant_to_increasing_transforms(
        scores in prop::collection::vec(-3.0..3.0_f64, 2..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| rand::Rng::random_bool(&mut rng, 0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let moved: Vec<f64> = scores.iter().map(|&s| s.powi(3) + 2.0 * s + 7.0).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&moved, &labels).unwrap());
    }

    #[test]
    fn pixel_auroc_ignores_sample_order(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut maps = Vec::new();
        let mut gts = Vec::new();
        let mut valid = Vec::new();
        for i in 0..n {
            let data: Vec<f64> = (0..16).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
            let mut gt: Vec<bool> = (0..16).map(|_| rand::Rng::random_bool(&mut rng, 0.3)).collect();
            gt[0] = i == 0;
            gt[1] = true;
            maps.push(map(4, 4, data));
            gts.push(PixelMask::from_vec(4, 4, gt).unwrap());
            valid.push(ValidityMask::filled(4, 4, true));
        }
        let a = pixel_auroc(&maps, &gts, &valid).unwrap();
        maps.reverse();
        gts.reverse();
        valid.reverse();
        prop_assert!((a - pixel_auroc(&maps, &gts, &valid).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn every_class_gets_fourteen_prompts(class in "[a-z]{1,8}( [a-z]{1,8})?") {
        let prompts = build_prompts(&class, &PromptCatalog::default()).unwrap();
        prop_assert_eq!(prompts.len(), 14);
        let flawless = format!("a photo of a flawless {class}.");
        prop_assert!(prompts.contains(&flawless));
    }
}

#[test]
fn gelu_is_monotone_on_a_grid() {
    let mut prev = gelu_scalar(-0.75_f64);
    let mut x = -0.75 + 1e-3;
    while x <= 6.0 {
        let y = gelu_scalar(x);
        assert!(y >= prev, "gelu decreases at {x}");
        prev = y;
        x += 1e-3;
    }
}

#[test]
fn pythagorean_distance_is_exact() {
    assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
}

#[test]
fn both_text_anchors_are_the_same_tensor() {
    let cfg = GradCheckConfig::default();
    let model = Model::<f64>::init(cfg.arch(), 1).unwrap();
    let embedder = HashEmbedder::new(cfg.d_text, 0);
    let a = octa_forward(&model.store, "bagel", &GradCheckConfig::catalog(), &embedder, &model.octa, &mut Mode::Eval).unwrap();
    assert_eq!(a.to_rgb, a.to_3d);
}
