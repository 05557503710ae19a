use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxodet::geometry::{box_cost, Bbox};
use taxodet::losses::{multiclass_focal_cost, FocalConfig};
use taxodet::matching::{
    build_cost_standard, hungarian, match_group, match_standard, partition_by_class, CostMatrix, GroundTruth,
    MatchWeights, ScoredQuery, StandardPrediction,
};

/// Minimum over all injective row → column maps, by enumeration.
fn brute_force(cost: &CostMatrix) -> f64 {
    fn go(cost: &CostMatrix, row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.rows() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cost.cols() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost.get(row, c) + go(cost, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.cols()])
}

fn random_cost(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CostMatrix {
    CostMatrix::from_fn(rows, cols, |_, _| rng.random_range(-5.0..10.0))
}

fn random_box(rng: &mut ChaCha8Rng) -> Bbox {
    Bbox::new(
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.05..0.4),
        rng.random_range(0.05..0.4),
    )
    .unwrap()
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let cols = rng.random_range(1..=7);
        let rows = rng.random_range(1..=cols);
        let cost = random_cost(&mut rng, rows, cols);
        let a = hungarian(&cost).unwrap();
        assert!((a.total_cost - brute_force(&cost)).abs() < 1e-9);
        assert_eq!(a.pairs.len(), rows);
    }
}

#[test]
fn documented_cost_matrices() {
    let a = hungarian(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap()).unwrap();
    assert_eq!((a.pairs, a.total_cost), (vec![(0, 0), (1, 1)], 2.0));
    let m = CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]]).unwrap();
    assert_eq!(hungarian(&m).unwrap().total_cost, brute_force(&m));
    assert_eq!(brute_force(&m), 3.0);
}

#[test]
fn crossed_nearest_boxes_are_uncrossed() {
    let w = MatchWeights::default();
    let cfg = FocalConfig::default();
    let left = Bbox::new(0.25, 0.5, 0.2, 0.2).unwrap();
    let right = Bbox::new(0.75, 0.5, 0.2, 0.2).unwrap();
    let gts = [GroundTruth { class_id: 0, bbox: left }, GroundTruth { class_id: 0, bbox: right }];
    let preds =
        [StandardPrediction { probs: vec![0.5], bbox: right }, StandardPrediction { probs: vec![0.5], bbox: left }];
    let a = match_standard(&preds, &gts, &w, &cfg).unwrap();
    assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    assert!((a.total_cost - brute_force(&build_cost_standard(&preds, &gts, &w, &cfg).unwrap())).abs() < 1e-12);
}

#[test]
fn standard_cost_entries_by_scalar_evaluation() {
    let (w, cfg) = (MatchWeights::default(), FocalConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let preds: Vec<StandardPrediction> =
        (0..2).map(|_| StandardPrediction { probs: vec![0.3, 0.8, 0.55], bbox: random_box(&mut rng) }).collect();
    let gts = [
        GroundTruth { class_id: 2, bbox: random_box(&mut rng) },
        GroundTruth { class_id: 0, bbox: random_box(&mut rng) },
    ];
    let m = build_cost_standard(&preds, &gts, &w, &cfg).unwrap();
    for (i, gt) in gts.iter().enumerate() {
        for (j, p) in preds.iter().enumerate() {
            let q = p.probs[gt.class_id];
            let focal = 0.25 * (1.0 - q) * (1.0 - q) * -q.ln();
            let expected = 2.0 * focal + box_cost(&p.bbox, &gt.bbox, &w);
            assert!((m.get(i, j) - expected).abs() < 1e-12);
            assert!((multiclass_focal_cost(&p.probs, gt.class_id, &cfg).unwrap() - focal).abs() < 1e-15);
        }
    }
}

#[test]
fn single_class_group_equals_standard() {
    let (w, cfg) = (MatchWeights::default(), FocalConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(0..=n);
        let queries: Vec<ScoredQuery> = (0..n)
            .map(|_| ScoredQuery { class_id: 0, score: rng.random_range(0.01..0.99), bbox: random_box(&mut rng) })
            .collect();
        let gts: Vec<GroundTruth> = (0..m).map(|_| GroundTruth { class_id: 0, bbox: random_box(&mut rng) }).collect();
        let preds: Vec<StandardPrediction> =
            queries.iter().map(|q| StandardPrediction { probs: vec![q.score], bbox: q.bbox }).collect();
        let mut group: Vec<(usize, usize)> = match_group(&queries, &gts, &w, &cfg).unwrap().pairs().collect();
        group.sort_unstable();
        assert_eq!(group, match_standard(&preds, &gts, &w, &cfg).unwrap().pairs);
    }
}

#[test]
fn groups_match_brute_force_within_each_class() {
    let (w, cfg) = (MatchWeights::default(), FocalConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let queries: Vec<ScoredQuery> = (0..12)
            .map(|j| ScoredQuery { class_id: j / 4, score: rng.random_range(0.05..0.95), bbox: random_box(&mut rng) })
            .collect();
        let gts: Vec<GroundTruth> =
            (0..6).map(|i| GroundTruth { class_id: i / 2, bbox: random_box(&mut rng) }).collect();
        let gm = match_group(&queries, &gts, &w, &cfg).unwrap();
        assert_eq!(gm.groups.len(), 3);
        for g in &gm.groups {
            let local = CostMatrix::from_fn(g.gt_indices.len(), g.query_indices.len(), |r, c| {
                let q = &queries[g.query_indices[c]];
                let p = q.score;
                2.0 * 0.25 * (1.0 - p) * (1.0 - p) * -p.ln() + box_cost(&q.bbox, &gts[g.gt_indices[r]].bbox, &w)
            });
            assert!((g.assignment.total_cost - brute_force(&local)).abs() < 1e-9);
            for &(gi, qi) in &g.assignment.pairs {
                assert_eq!(gts[gi].class_id, queries[qi].class_id);
            }
        }
    }
}

#[test]
fn partition_covers_every_ground_truth_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let query_classes: Vec<usize> = (0..rng.random_range(0..10)).map(|_| rng.random_range(0..3)).collect();
        let gts: Vec<GroundTruth> = (0..rng.random_range(0..8))
            .map(|_| GroundTruth { class_id: rng.random_range(0..4), bbox: random_box(&mut rng) })
            .collect();
        let p = partition_by_class(&query_classes, &gts);
        let mut seen: Vec<usize> =
            p.groups.iter().flat_map(|g| g.gt_indices.iter().copied()).chain(p.orphaned.iter().copied()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..gts.len()).collect::<Vec<_>>());
        for g in &p.groups {
            assert!(g.gt_indices.iter().all(|&i| gts[i].class_id == g.class_id));
            assert!(g.query_indices.iter().all(|&j| query_classes[j] == g.class_id));
        }
    }
}

fn arb_cost() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=6).prop_flat_map(|cols| {
        (1..=cols).prop_flat_map(move |rows| (Just(rows), Just(cols), prop::collection::vec(-3.0..3.0f64, rows * cols)))
    })
}

proptest! {
    #[test]
    fn assignment_is_injective_and_covers_rows((rows, cols, data) in arb_cost()) {
        let a = hungarian(&CostMatrix::new(rows, cols, data).unwrap()).unwrap();
        let mut gts: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let mut qs: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        gts.dedup();
        qs.sort_unstable();
        qs.dedup();
        prop_assert_eq!(gts, (0..rows).collect::<Vec<_>>());
        prop_assert_eq!(qs.len(), rows);
    }

    #[test]
    fn row_offsets_shift_the_optimum((rows, cols, data) in arb_cost(), shift in -2.0..2.0f64) {
        let base = CostMatrix::new(rows, cols, data.clone()).unwrap();
        let shifted = CostMatrix::from_fn(rows, cols, |r, c| base.get(r, c) + if r == 0 { shift } else { 0.0 });
        let (a, b) = (hungarian(&base).unwrap(), hungarian(&shifted).unwrap());
        prop_assert!((a.total_cost + shift - b.total_cost).abs() < 1e-9);
    }
}
