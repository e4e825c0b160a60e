use proptest::prelude::*;

use tleg_core::descendant::{depth_sweep, materialize_descendant, DescendantSpec};
use tleg_core::harness::eval::topk_hits;
use tleg_core::learngene::{ExpansionScope, Learngene};
use tleg_core::tensor::{softmax, KlDirection, Tensor};
use tleg_core::training::{cross_entropy, soft_distill_loss, total_loss, AuxNet};
use tleg_core::vit::{encoder_layer, LayerParams, ModelConfig, Vit};

/// `mlp_extra` is added to the width, which the MLP must exceed.
fn cfg(dim_per_head: usize, heads: usize, mlp_extra: usize, depth: usize) -> ModelConfig {
    let dim = dim_per_head * heads;
    ModelConfig::new(dim, depth, heads, dim + mlp_extra).with_image(8, 4, 3).with_classes(4)
}

fn tensor(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| vals[i % vals.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..40, scale in 0.1f32..1000.0, seed in 0u64..1000) {
        let x = Tensor::<f32>::from_fn(&[rows, cols], |i| {
            let h = (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15 ^ seed);
            ((h >> 11) as f32 / (1u64 << 53) as f32 - 0.5) * scale
        });
        let p = softmax(&x, 1).unwrap();
        for r in 0..rows {
            let s: f32 = p.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row {} sums to {}", r, s);
        }
    }

    #[test]
    fn encoder_layer_preserves_shape(d in 1usize..4, heads in 1usize..3, mlp in 1usize..12, n in 1usize..7, seed in 0u64..500) {
        let c = cfg(d, heads, mlp, 1);
        let lp = Vit::<f64>::init(c, seed).unwrap().layers.remove(0);
        let z = Tensor::<f64>::from_fn(&[n, c.dim], |i| ((i as f64) * 0.7 + seed as f64).sin());
        let out = encoder_layer(&z, &lp).unwrap();
        prop_assert_eq!(out.shape(), z.shape());
        prop_assert!(out.all_finite());
    }

    #[test]
    fn zeroed_layer_is_identity(d in 1usize..4, heads in 1usize..3, mlp in 1usize..12, n in 1usize..7, vals in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let c = cfg(d, heads, mlp, 1);
        let z = tensor(&[n, c.dim], &vals);
        let out = encoder_layer(&z, &LayerParams::zeros(&c)).unwrap();
        prop_assert_eq!(out, z);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, depth in 1usize..4) {
        let c = cfg(4, 2, 8, depth);
        let x = Tensor::<f32>::from_fn(&[2, 3, 8, 8], |i| (i as f32 * 0.13).cos());
        let a = Vit::<f32>::init(c, seed).unwrap();
        let b = Vit::<f32>::init(c, seed).unwrap();
        let la = a.logits(&x).unwrap();
        prop_assert_eq!(la.checksum(), b.logits(&x).unwrap().checksum());
        prop_assert_eq!(la.checksum(), a.logits(&x).unwrap().checksum());
    }

    #[test]
    fn loss_endpoints_ignore_the_other_term(
        zs in prop::collection::vec(-6.0f64..6.0, 12),
        zt1 in prop::collection::vec(-6.0f64..6.0, 12),
        zt2 in prop::collection::vec(-6.0f64..6.0, 12),
        y1 in prop::collection::vec(0usize..4, 3),
        y2 in prop::collection::vec(0usize..4, 3),
        tau in 0.25f64..8.0,
    ) {
        let (zs, zt1, zt2) = (tensor(&[3, 4], &zs), tensor(&[3, 4], &zt1), tensor(&[3, 4], &zt2));
        for dir in [KlDirection::TeacherTarget, KlDirection::StudentTarget] {
            let ce_only = |t: &Tensor<f64>| total_loss(&zs, t, &y1, 0.0, tau, dir).unwrap();
            prop_assert_eq!(ce_only(&zt1), ce_only(&zt2));
            prop_assert_eq!(ce_only(&zt1), cross_entropy(&zs, &y1).unwrap());
            let kd_only = |y: &[usize]| total_loss(&zs, &zt1, y, 1.0, tau, dir).unwrap();
            prop_assert_eq!(kd_only(&y1), kd_only(&y2));
            let kd = soft_distill_loss(&zs, &zt1, tau, dir).unwrap();
            prop_assert!(kd >= -1e-12, "negative divergence {}", kd);
        }
    }

    #[test]
    fn first_descendant_layer_is_theta_b(seed in 0u64..500, depth in 1usize..9) {
        let c = cfg(4, 2, 8, 4);
        let mut aux = AuxNet::<f32>::init(c, ExpansionScope::default(), seed).unwrap();
        for t in aux.learngene.theta_a.refs_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 * 0.31).sin());
        }
        let des = materialize_descendant(&aux.learngene, &DescendantSpec::full(depth, 4, seed), &aux.nlp).unwrap();
        prop_assert_eq!(&des.layers[0], &aux.learngene.theta_b);
        prop_assert_eq!(des.layers.len(), depth);
    }

    #[test]
    fn stored_initializer_ignores_depth_set(depths in prop::collection::vec(1usize..9, 1..5), seed in 0u64..100) {
        let c = cfg(4, 2, 8, 4);
        let aux = AuxNet::<f32>::init(c, ExpansionScope::default(), seed).unwrap();
        let lg: &Learngene<f32> = &aux.learngene;
        let base = DescendantSpec::full(depths[0], 4, seed);
        let (_, one) = depth_sweep(lg, &depths[..1], &base, &aux.nlp).unwrap();
        let (nets, all) = depth_sweep(lg, &depths, &base, &aux.nlp).unwrap();
        prop_assert_eq!(one.stored_initializer_params, all.stored_initializer_params);
        prop_assert_eq!(all.learngene_params, lg.param_count());
        prop_assert_eq!(all.baseline_total, nets.iter().map(|n| n.param_count()).sum::<usize>());
    }

    #[test]
    fn top1_hits_never_exceed_top5(vals in prop::collection::vec(-3.0f64..3.0, 1..40), classes in 1usize..9, n in 1usize..10) {
        let logits = tensor(&[n, classes], &vals);
        let labels: Vec<usize> = (0..n).map(|i| (i * 7) % classes).collect();
        let (h1, h5) = topk_hits(&logits, &labels).unwrap();
        prop_assert!(h1 <= h5 && h5 <= n);
        if classes <= 5 {
            prop_assert_eq!(h5, n);
        }
    }
}
