mod common;

use proptest::prelude::*;
use wfss_core::episodic::{miou, total_loss};
use wfss_core::kernels::{self, ConvGeometry};
use wfss_core::pseudo_mask::cam;
use wfss_core::{Graph, Tensor};

use common::{bce_ref, rand_tensor, rng};

#[test]
fn bce_closed_forms() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[1, 3, 3], 0.5));
    let t = g.constant(Tensor::ones(&[1, 3, 3]));
    let l = g.bce(p, t).unwrap();
    assert!((g.value(l).data()[0] - std::f32::consts::LN_2).abs() < 1e-6);
    let near = Tensor::full(&[1, 2, 2], 1.0 - 1e-7);
    let p = g.constant(near.clone());
    let t = g.constant(near);
    let l = g.bce(p, t).unwrap();
    assert!(g.value(l).data()[0] < 1e-5);
}

#[test]
fn total_loss_reductions() {
    let mut r = rng(4);
    let mut g = Graph::new();
    let s = g.constant(rand_tensor(&[1, 4, 4], 0.05, 0.95, &mut r));
    let q = g.constant(rand_tensor(&[1, 4, 4], 0.05, 0.95, &mut r));
    let ts = g.constant(rand_tensor(&[1, 4, 4], 0.0, 1.0, &mut r));
    let tq = g.constant(rand_tensor(&[1, 4, 4], 0.0, 1.0, &mut r));
    let zero = total_loss(&mut g, &[vec![s]], &[q], &[ts], tq, 0.0, 0.0).unwrap();
    assert_eq!(g.value(zero).data()[0], 0.0);
    let support_only = total_loss(&mut g, &[vec![s]], &[q], &[ts], tq, 1.0, 0.0).unwrap();
    let bce = g.bce(s, ts).unwrap();
    assert_eq!(g.value(support_only).data()[0], g.value(bce).data()[0]);
    assert!(total_loss(&mut g, &[vec![s, s]], &[q], &[ts], tq, 1.0, 1.0).is_err());
    assert!(total_loss(&mut g, &[vec![s]], &[q], &[], tq, 1.0, 1.0).is_err());
}

#[test]
fn total_loss_matches_six_term_sum() {
    let mut r = rng(12);
    for _ in 0..50 {
        let mut g = Graph::new();
        let masks: Vec<Tensor> = (0..6).map(|_| rand_tensor(&[1, 5, 5], 0.01, 0.99, &mut r)).collect();
        let ts = rand_tensor(&[1, 5, 5], 0.0, 1.0, &mut r);
        let tq = rand_tensor(&[1, 5, 5], 0.0, 1.0, &mut r);
        let want: f64 = (0..3)
            .map(|t| bce_ref(&masks[2 * t], &ts) + bce_ref(&masks[2 * t + 1], &tq))
            .sum();
        let vars: Vec<_> = masks.iter().map(|m| g.constant(m.clone())).collect();
        let support = vec![vec![vars[0], vars[2], vars[4]]];
        let query = [vars[1], vars[3], vars[5]];
        let (ts, tq) = (g.constant(ts), g.constant(tq));
        let l = total_loss(&mut g, &support, &query, &[ts], tq, 1.0, 1.0).unwrap();
        let got = g.value(l).data()[0] as f64;
        assert!((got - want).abs() <= 1e-5 * want.max(1.0), "{got} vs {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn total_loss_is_nonnegative_and_flat_at_its_targets(seed in any::<u64>(), alpha in 0.0f32..3.0, beta in 0.0f32..3.0) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let logits: Vec<_> = (0..4).map(|_| g.param(rand_tensor(&[1, 6, 6], -3.0, 3.0, &mut r))).collect();
        let preds: Vec<_> = logits.iter().map(|&z| g.sigmoid(z)).collect();
        let ts = g.constant(g.value(preds[0]).clone());
        let tq = g.constant(g.value(preds[1]).clone());
        let l = total_loss(&mut g, &[vec![preds[0], preds[2]]], &[preds[1], preds[3]], &[ts], tq, alpha, beta).unwrap();
        prop_assert!(g.value(l).data()[0] >= 0.0);

        let mut g = Graph::new();
        let z: Vec<_> = (0..2).map(|_| g.param(rand_tensor(&[1, 6, 6], -3.0, 3.0, &mut r))).collect();
        let p: Vec<_> = z.iter().map(|&v| g.sigmoid(v)).collect();
        let ts = g.constant(g.value(p[0]).clone());
        let tq = g.constant(g.value(p[1]).clone());
        let l = total_loss(&mut g, &[vec![p[0]]], &[p[1]], &[ts], tq, alpha, beta).unwrap();
        let grads = g.backward(l).unwrap();
        for v in z {
            let worst = grads.get(v).data().iter().fold(0f32, |m, x| m.max(x.abs()));
            prop_assert!(worst < 1e-4, "gradient {worst}");
        }
    }

    #[test]
    fn loss_is_linear_in_the_weights(seed in any::<u64>(), alpha in 0.0f32..4.0, beta in 0.0f32..4.0) {
        let mut r = rng(seed);
        let masks: Vec<Tensor> = (0..4).map(|_| rand_tensor(&[1, 4, 4], 0.01, 0.99, &mut r)).collect();
        let eval = |a: f32, b: f32| {
            let mut g = Graph::new();
            let v: Vec<_> = masks.iter().map(|m| g.constant(m.clone())).collect();
            let l = total_loss(&mut g, &[vec![v[0]]], &[v[1]], &[v[2]], v[3], a, b).unwrap();
            g.value(l).data()[0] as f64
        };
        let doubled = eval(2.0 * alpha, beta);
        let residual = (doubled - eval(alpha, beta) - eval(alpha, 0.0)).abs();
        prop_assert!(residual <= 1e-6 * doubled.abs().max(1.0));
    }

    #[test]
    fn cam_is_a_scale_invariant_unit_map(seed in any::<u64>(), c in 1usize..6, h in 1usize..6, w in 1usize..6, log_scale in -2.0f32..2.0) {
        let mut r = rng(seed);
        let features = rand_tensor(&[c, h, w], -2.0, 2.0, &mut r);
        let t = rand_tensor(&[c], -1.0, 1.0, &mut r);
        let mask = cam(&features, &t).unwrap();
        let v = mask.values();
        prop_assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!(v.max() == 0.0 || (v.max() - 1.0).abs() < 1e-6);
        let scaled = cam(&features, &t.map(|x| x * 10f32.powf(log_scale))).unwrap();
        prop_assert!(scaled.values().max_abs_diff(v) < 1e-6);
    }

    #[test]
    fn concat_then_slice_is_identity(seed in any::<u64>(), a in 1usize..4, b in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let mut r = rng(seed);
        let x = rand_tensor(&[a, h, w], -1.0, 1.0, &mut r);
        let y = rand_tensor(&[b, h, w], -1.0, 1.0, &mut r);
        let cat = kernels::concat_channels(&[&x, &y]).unwrap();
        prop_assert_eq!(cat.slice_channels(0, a).unwrap(), x);
        prop_assert_eq!(cat.slice_channels(a, b).unwrap(), y);
    }

    #[test]
    fn conv_is_deterministic_and_linear_in_the_input(seed in any::<u64>(), cin in 1usize..3, cout in 1usize..3, half in 1usize..4, stride in 1usize..3) {
        let size = 2 * half + 1;
        let mut r = rng(seed);
        let x = rand_tensor(&[cin, size, size], -1.0, 1.0, &mut r);
        let w = rand_tensor(&[cout, cin, 3, 3], -1.0, 1.0, &mut r);
        let zero = Tensor::zeros(&[cout]);
        let geom = ConvGeometry { stride, padding: 1 };
        let once = kernels::conv2d(&x, &w, &zero, geom).unwrap();
        prop_assert_eq!(&once, &kernels::conv2d(&x, &w, &zero, geom).unwrap());
        let doubled = kernels::conv2d(&x.map(|v| 2.0 * v), &w, &zero, geom).unwrap();
        prop_assert!(doubled.max_abs_diff(&once.map(|v| 2.0 * v)) < 1e-5);
    }

    #[test]
    fn miou_is_bounded_and_matches_the_confusion_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (preds, gts, ids) = common::random_miou_case(&mut r);
        let report = miou(&preds, &gts, &ids).unwrap();
        let (per_class, mean) = common::miou_ref(&preds, &gts, &ids);
        prop_assert!((0.0..=1.0).contains(&report.mean));
        prop_assert!((report.mean - mean).abs() < 1e-12);
        for (c, v) in per_class {
            prop_assert!((report.per_class[&c] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn miou_half_planes() {
    let left = common::tensor(&[1, 4, 4], (0..16).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect());
    let top = common::tensor(&[1, 4, 4], (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect());
    let r = miou(&[left], &[top], &[2]).unwrap();
    assert!((r.mean - 1.0 / 3.0).abs() < 1e-12);
    assert!(miou(&[], &[], &[]).is_err());
}
