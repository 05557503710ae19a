use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxodet::geometry::{box_cost, giou, iou, Bbox, Corners};
use taxodet::matching::MatchWeights;

fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Corners {
    Corners { x1, y1, x2, y2 }
}

fn random_box(rng: &mut ChaCha8Rng) -> Corners {
    let (x1, y1) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
    corners(x1, y1, x1 + rng.random_range(0.02..0.6), y1 + rng.random_range(0.02..0.6))
}

fn inside(c: &Corners, x: f64, y: f64) -> bool {
    x >= c.x1 && x < c.x2 && y >= c.y1 && y < c.y2
}

/// Area-sampling estimate of IoU and GIoU over the pair's enclosure: one
/// uniform point in each cell of an `side × side` stratification.
fn monte_carlo(a: &Corners, b: &Corners, side: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let hull = corners(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2));
    let (cw, ch) = ((hull.x2 - hull.x1) / side as f64, (hull.y2 - hull.y1) / side as f64);
    let (mut both, mut either) = (0usize, 0usize);
    for i in 0..side {
        for j in 0..side {
            let x = hull.x1 + (i as f64 + rng.random::<f64>()) * cw;
            let y = hull.y1 + (j as f64 + rng.random::<f64>()) * ch;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            both += (ia && ib) as usize;
            either += (ia || ib) as usize;
        }
    }
    let n = side * side;
    let iou = both as f64 / either as f64;
    let empty = (n - either) as f64 / n as f64;
    (iou, iou - empty)
}

#[test]
fn monte_carlo_agrees_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let (mi, mg) = monte_carlo(&a, &b, 200, &mut rng);
        worst = worst.max((mi - iou(&a, &b)).abs()).max((mg - giou(&a, &b)).abs());
    }
    assert!(worst < 1e-2, "largest Monte-Carlo deviation {worst}");
}

#[test]
fn documented_pairs_against_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let overlap = (corners(0.0, 0.0, 2.0, 2.0), corners(1.0, 0.0, 3.0, 2.0));
    let disjoint = (corners(0.0, 0.0, 1.0, 1.0), corners(2.0, 0.0, 3.0, 1.0));
    let (mi, mg) = monte_carlo(&overlap.0, &overlap.1, 1000, &mut rng);
    assert!((mi - 1.0 / 3.0).abs() < 1e-2 && (mg - 1.0 / 3.0).abs() < 1e-2);
    assert!((iou(&overlap.0, &overlap.1) - 1.0 / 3.0).abs() < 1e-12);
    assert!((giou(&overlap.0, &overlap.1) - 1.0 / 3.0).abs() < 1e-12);
    let (mi, mg) = monte_carlo(&disjoint.0, &disjoint.1, 1000, &mut rng);
    assert!(mi.abs() < 1e-2 && (mg + 1.0 / 3.0).abs() < 1e-2);
    assert!((giou(&disjoint.0, &disjoint.1) + 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn box_cost_documented_values() {
    let pred = Bbox::new(0.5, 0.5, 0.4, 0.4).unwrap();
    let gt = Bbox::new(0.5, 0.5, 0.2, 0.2).unwrap();
    let l1_only = MatchWeights { mu_cls: 2.0, lambda_l1: 1.0, lambda_giou: 0.0 };
    assert!((box_cost(&pred, &gt, &l1_only) - 0.4).abs() < 1e-12);

    let a = corners(0.0, 0.0, 1.0, 1.0).to_center();
    let b = corners(2.0, 0.0, 3.0, 1.0).to_center();
    let giou_only = MatchWeights { mu_cls: 2.0, lambda_l1: 0.0, lambda_giou: 1.0 };
    assert!((box_cost(&a, &b, &giou_only) - 4.0 / 3.0).abs() < 1e-12);
}

fn arb_corners() -> impl Strategy<Value = Corners> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..0.6f64, 0.01..0.6f64).prop_map(|(x, y, w, h)| corners(x, y, x + w, y + h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn giou_bounds(a in arb_corners(), b in arb_corners()) {
        let (i, g) = (iou(&a, &b), giou(&a, &b));
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert!(g <= i + 1e-15);
        prop_assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlaps_are_symmetric(a in arb_corners(), b in arb_corners()) {
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        prop_assert!((giou(&a, &b) - giou(&b, &a)).abs() < 1e-15);
    }

    #[test]
    fn center_corner_round_trip(a in arb_corners()) {
        let back = a.to_center().to_corners();
        for (u, v) in [(a.x1, back.x1), (a.y1, back.y1), (a.x2, back.x2), (a.y2, back.y2)] {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn box_cost_is_nonnegative_and_zero_on_identity(a in arb_corners(), b in arb_corners()) {
        let w = MatchWeights::default();
        prop_assert!(box_cost(&a.to_center(), &b.to_center(), &w) >= -1e-12);
        prop_assert!(box_cost(&a.to_center(), &a.to_center(), &w).abs() < 1e-12);
    }
}
