use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data_model::{HoiInstance, HoiClassRegistry};
use crate::numerics::{grad_check, GradCheckConfig};

/// Exhaustive minimum over all injections of rows into columns.
fn brute_force_min(cost: &Matrix) -> f64 {
    fn go(cost: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.nrows() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.ncols() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[[row, c]], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
    if cost.nrows() == 0 {
        0.0
    } else {
        best
    }
}

fn assert_injective(pairs: &[(usize, usize)], rows: usize) {
    let mut preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    preds.sort_unstable();
    preds.dedup();
    assert_eq!(preds.len(), rows);
    let gts: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    assert_eq!(gts, (0..rows).collect::<Vec<_>>());
}

#[test]
fn giou_examples() {
    let a = BBox::new(0.1, 0.2, 0.5, 0.7);
    assert_eq!(giou(&a, &a), 1.0);
    let u = BBox::new(0.0, 0.0, 1.0, 1.0);
    let v = BBox::new(2.0, 0.0, 3.0, 1.0);
    assert!((giou(&u, &v) + 1.0 / 3.0).abs() < 1e-15);
    let point = BBox::new(0.5, 0.5, 0.5, 0.5);
    let g = giou(&point, &u);
    assert!(g.is_finite() && g <= 0.0, "{g}");
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..0.8f64, 0.0..0.8f64, 0.01..0.5f64, 0.01..0.5f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

proptest! {
    #[test]
    fn giou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (x, y) = (giou(&a, &b), giou(&b, &a));
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!(x > -1.0 && x <= 1.0);
    }

    #[test]
    fn giou_gradient_matches_finite_differences(a in arb_box(), b in arb_box()) {
        let coords = [a.x1, a.y1, a.x2, a.y2];
        let other = [b.x1, b.y1, b.x2, b.y2];
        // Kinks where an edge of `a` coincides with one of `b` have no derivative.
        prop_assume!(coords.iter().all(|c| other.iter().all(|o| (c - o).abs() > 1e-4)));
        let (_, g) = giou_with_grad(&a, &b);
        let point = [Array2::from_shape_vec((1, 4), coords.to_vec()).unwrap()];
        let analytic = [Array2::from_shape_vec((1, 4), g.to_vec()).unwrap()];
        let report = grad_check(
            |p| giou(&BBox::new(p[0][[0, 0]], p[0][[0, 1]], p[0][[0, 2]], p[0][[0, 3]]), &b),
            &point,
            &analytic,
            &GradCheckConfig { step: 1e-7, ..Default::default() },
        ).unwrap();
        prop_assert!(report.max_rel_error < 1e-5, "{:?}", report);
    }
}

#[test]
fn hungarian_small_cases() {
    assert_eq!(hungarian_match(&array![[3.0]]).unwrap(), vec![(0, 0)]);
    let c = array![[1.0, 10.0], [10.0, 1.0]];
    let m = hungarian_match(&c).unwrap();
    assert_eq!(m, vec![(0, 0), (1, 1)]);
    assert_eq!(assignment_cost(&c, &m), 2.0);
    assert!(hungarian_match(&Array2::zeros((0, 4))).unwrap().is_empty());
    assert_eq!(hungarian_match(&Array2::zeros((3, 5))).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
    assert!(matches!(hungarian_match(&Array2::zeros((3, 2))), Err(MatchError::TooManyTargets { .. })));
    let mut bad = Array2::zeros((2, 2));
    bad[[1, 0]] = f64::NAN;
    assert!(matches!(hungarian_match(&bad), Err(MatchError::NonFinite { row: 1, col: 0, .. })));
}

#[test]
fn hungarian_equals_brute_force_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..1000 {
        let rows = rng.gen_range(1..=6);
        let cols = rng.gen_range(rows..=8);
        let c = Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-5.0..5.0));
        let m = hungarian_match(&c).unwrap();
        assert_injective(&m, rows);
        let (got, want) = (assignment_cost(&c, &m), brute_force_min(&c));
        assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
    }
}

fn fixture_preds(n: usize, seed: u64) -> Predictions {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes = || {
        Array2::from_shape_fn((n, 4), |(_, k)| if k < 2 { rng.gen_range(0.2..0.8) } else { rng.gen_range(0.05..0.4) })
    };
    let (h_boxes, o_boxes) = (boxes(), boxes());
    Predictions {
        h_boxes,
        o_boxes,
        obj_logits: Array2::from_shape_simple_fn((n, 7), || rng.gen_range(-2.0..2.0)),
        inter_logits: Array2::from_shape_simple_fn((n, 12), || rng.gen_range(-2.0..2.0)),
    }
}

fn fixture_targets() -> (HoiClassRegistry, Vec<Target>) {
    let reg = HoiClassRegistry::fixture();
    let h = BBox::new(0.1, 0.1, 0.4, 0.6);
    let o = BBox::new(0.35, 0.3, 0.7, 0.8);
    let ann = HoiAnnotation {
        id: "t".into(),
        gts: vec![
            HoiInstance { hbox: h, obox: o, obj: 0, verb: 1 },
            HoiInstance { hbox: h, obox: o, obj: 0, verb: 0 },
            HoiInstance { hbox: BBox::new(0.5, 0.1, 0.9, 0.5), obox: BBox::new(0.6, 0.6, 0.8, 0.9), obj: 3, verb: 3 },
        ],
        source: Default::default(),
    };
    let t = build_targets(&ann, &reg);
    (reg, t)
}

#[test]
fn targets_merge_shared_pairs() {
    let (reg, t) = fixture_targets();
    assert_eq!(t.len(), 2);
    assert_eq!(t[0].classes, vec![reg.class_id(0, 0).unwrap(), reg.class_id(1, 0).unwrap()]);
    assert_eq!(t[1].classes, vec![reg.class_id(3, 3).unwrap()]);
}

#[test]
fn perfect_prediction_has_minimal_cost_and_zero_loss() {
    let (_, targets) = fixture_targets();
    let mut p = fixture_preds(4, 1);
    p.obj_logits.fill(-40.0);
    p.inter_logits.fill(-40.0);
    for q in 0..4 {
        p.obj_logits[[q, 6]] = 40.0;
    }
    for (q, t) in targets.iter().enumerate() {
        for (k, v) in t.hbox.to_cxcywh().into_iter().enumerate() {
            p.h_boxes[[q, k]] = v;
        }
        for (k, v) in t.obox.to_cxcywh().into_iter().enumerate() {
            p.o_boxes[[q, k]] = v;
        }
        p.obj_logits[[q, 6]] = -40.0;
        p.obj_logits[[q, t.obj]] = 40.0;
        for &c in &t.classes {
            p.inter_logits[[q, c]] = 40.0;
        }
    }
    let w = LossWeights::default();
    let cost = build_cost_matrix(&p, &targets, &w).unwrap();
    for g in 0..targets.len() {
        assert!((cost[[g, g]] - (-w.object - w.interaction)).abs() < 1e-12, "{}", cost[[g, g]]);
    }
    let m = hungarian_match(&cost).unwrap();
    assert_eq!(m, vec![(0, 0), (1, 1)]);
    let out = total_loss(&p, &targets, &m, &w).unwrap();
    let b = out.breakdown;
    assert!(b.l_b.abs() < 1e-12 && b.l_u.abs() < 1e-12, "{b:?}");
    assert!(b.l_o < 1e-15 && b.l_c < 1e-15, "{b:?}");
}

#[test]
fn zero_weights_give_zero_costs() {
    let (_, targets) = fixture_targets();
    let p = fixture_preds(5, 2);
    let w = LossWeights { box_l1: 0.0, giou: 0.0, object: 0.0, interaction: 0.0 };
    let cost = build_cost_matrix(&p, &targets, &w).unwrap();
    assert!(cost.iter().all(|&v| v == 0.0));
    assert_injective(&hungarian_match(&cost).unwrap(), 2);
    assert!(build_cost_matrix(&p, &targets, &LossWeights { giou: -1.0, ..w }).is_err());
    assert!(build_cost_matrix(&p, &[], &LossWeights::default()).unwrap().is_empty());
}

#[test]
fn scaling_weights_scales_loss_and_keeps_assignment() {
    let (_, targets) = fixture_targets();
    for seed in 0..20 {
        let p = fixture_preds(6, seed);
        let w = LossWeights::default();
        let m1 = match_predictions(&p, &targets, &w).unwrap();
        let m2 = match_predictions(&p, &targets, &w.scaled(2.0)).unwrap();
        assert_eq!(m1, m2);
        let a = total_loss(&p, &targets, &m1, &w).unwrap().breakdown;
        let b = total_loss(&p, &targets, &m1, &w.scaled(2.0)).unwrap().breakdown;
        assert!((b.total - 2.0 * a.total).abs() < 1e-12);
    }
}

#[test]
fn breakdown_recomputes_from_definitions() {
    let (_, targets) = fixture_targets();
    let p = fixture_preds(5, 9);
    let w = LossWeights { box_l1: 2.0, giou: 0.5, object: 1.5, interaction: 0.7 };
    let m = match_predictions(&p, &targets, &w).unwrap();
    let b = total_loss(&p, &targets, &m, &w).unwrap().breakdown;
    assert!((b.total - (2.0 * b.l_b + 0.5 * b.l_u + 1.5 * b.l_o + 0.7 * b.l_c)).abs() < 1e-12);

    let g = targets.len() as f64;
    let mut l_b = 0.0;
    let mut l_u = 0.0;
    let mut l_c = 0.0;
    let positives: usize = targets.iter().map(|t| t.classes.len()).sum();
    for &(q, gi) in &m {
        let t = &targets[gi];
        for (pb, tb) in [(p.h_box(q), t.hbox), (p.o_box(q), t.obox)] {
            let (x, y) = (pb.to_cxcywh(), tb.to_cxcywh());
            l_b += (0..4).map(|k| (x[k] - y[k]).abs()).sum::<f64>() / g;
            l_u += (1.0 - giou(&pb, &tb)) / g;
        }
        for c in 0..12 {
            let s = 1.0 / (1.0 + (-p.inter_logits[[q, c]]).exp());
            let y = t.classes.contains(&c);
            l_c -= if y { s.ln() } else { (1.0 - s).ln() } / positives as f64;
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for q in 0..p.len() {
        let matched = m.iter().find(|x| x.0 == q).map(|x| targets[x.1].obj);
        let target = matched.unwrap_or(6);
        let wq = if matched.is_some() { 1.0 } else { BACKGROUND_WEIGHT };
        let z: f64 = p.obj_logits.row(q).iter().map(|v| v.exp()).sum();
        num -= wq * (p.obj_logits[[q, target]].exp() / z).ln();
        den += wq;
    }
    for (got, want) in [(b.l_b, l_b), (b.l_u, l_u), (b.l_c, l_c), (b.l_o, num / den)] {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let (_, targets) = fixture_targets();
    let p = fixture_preds(5, 3);
    let w = LossWeights::default();
    let m = match_predictions(&p, &targets, &w).unwrap();
    let out = total_loss(&p, &targets, &m, &w).unwrap();
    let point = [p.h_boxes.clone(), p.o_boxes.clone(), p.obj_logits.clone(), p.inter_logits.clone()];
    let analytic = [out.grads.h_boxes, out.grads.o_boxes, out.grads.obj_logits, out.grads.inter_logits];
    let report = grad_check(
        |v| {
            let q = Predictions {
                h_boxes: v[0].clone(),
                o_boxes: v[1].clone(),
                obj_logits: v[2].clone(),
                inter_logits: v[3].clone(),
            };
            total_loss(&q, &targets, &m, &w).unwrap().breakdown.total
        },
        &point,
        &analytic,
        &GradCheckConfig { step: 1e-7, ..Default::default() },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn no_targets_means_background_only() {
    let p = fixture_preds(3, 4);
    let m = match_predictions(&p, &[], &LossWeights::default()).unwrap();
    assert!(m.is_empty());
    let b = total_loss(&p, &[], &m, &LossWeights::default()).unwrap().breakdown;
    assert_eq!((b.l_b, b.l_u, b.l_c), (0.0, 0.0, 0.0));
    assert!(b.l_o > 0.0);
}
