//! Central finite-difference checks of every hand-written reverse pass.
//! Each check returns the worst relative error over its seeded instances.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taxodet::cem::{cem_backward, cem_forward_cached, CemParams, Features};
use taxodet::geometry::{box_cost, box_cost_with_grad, Bbox};
use taxodet::head::Classification;
use taxodet::labelspace::EmbeddingTable;
use taxodet::losses::{asymmetric_loss, binary_focal, AslConfig, FocalConfig};
use taxodet::matching::{GroundTruth, MatchWeights};
use taxodet::model::{Detector, ModelConfig, Objective, TrainSample};
use taxodet::nn::{init_matrix, Parameters};

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over the whole gradient.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

fn random_box(rng: &mut ChaCha8Rng) -> Bbox {
    Bbox::new(
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.1..0.5),
        rng.random_range(0.1..0.5),
    )
    .unwrap()
}

pub fn binary_focal_error() -> f64 {
    let cfg = FocalConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.random_range(0.05..0.95);
        for target in [true, false] {
            let a = binary_focal(p, target, &cfg).unwrap().grad[0];
            let n = central(|x| binary_focal(x, target, &cfg).unwrap().value, p);
            worst = worst.max(rel_err(&[a], &[n]));
        }
    }
    worst
}

pub fn asymmetric_loss_error() -> f64 {
    let cfg = AslConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 8;
        // Keep negatives away from the clip kink at `clip_m`.
        let scores: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..0.95)).collect();
        let targets: Vec<bool> = (0..k).map(|_| rng.random_bool(0.4)).collect();
        let mu = rng.random_range(0.5..2.0);
        let a = asymmetric_loss(&scores, &targets, &cfg, mu).unwrap().grad;
        let n: Vec<f64> = (0..k)
            .map(|i| {
                central(
                    |x| {
                        let mut s = scores.clone();
                        s[i] = x;
                        asymmetric_loss(&s, &targets, &cfg, mu).unwrap().value
                    },
                    scores[i],
                )
            })
            .collect();
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

pub fn box_cost_error() -> f64 {
    let w = MatchWeights::default();
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, gt) = (random_box(&mut rng), random_box(&mut rng));
        let (_, a) = box_cost_with_grad(&pred, &gt, &w);
        let base = pred.to_array();
        let n: Vec<f64> = (0..4)
            .map(|i| {
                central(
                    |x| {
                        let mut p = base;
                        p[i] = x;
                        box_cost(&Bbox::from_array(p), &gt, &w)
                    },
                    base[i],
                )
            })
            .collect();
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

/// Numeric gradient of `loss` with respect to every scalar of `P`.
fn numeric_grad<P: Parameters + Clone>(p: &P, loss: impl Fn(&P) -> f64) -> Vec<f64> {
    let total = p.num_scalars();
    let mut out = Vec::with_capacity(total);
    let mut work = p.clone();
    let sizes: Vec<usize> = p.tensors().iter().map(|t| t.data.len()).collect();
    for (ti, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = work.tensors()[ti].data[i];
            work.tensors_mut()[ti].data[i] = orig + H;
            let up = loss(&work);
            work.tensors_mut()[ti].data[i] = orig - H;
            let down = loss(&work);
            work.tensors_mut()[ti].data[i] = orig;
            out.push((up - down) / (2.0 * H));
        }
    }
    out
}

fn flat<P: Parameters>(p: &P) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
}

#[derive(Clone)]
struct CemAndTable {
    params: CemParams,
    table: Array2<f64>,
}

impl Parameters for CemAndTable {
    fn tensors(&self) -> Vec<taxodet::nn::TensorRef<'_>> {
        let mut t = self.params.tensors();
        t.push(taxodet::nn::TensorRef {
            name: "table".into(),
            shape: self.table.shape().to_vec(),
            data: self.table.as_slice().unwrap(),
        });
        t
    }

    fn tensors_mut(&mut self) -> Vec<taxodet::nn::TensorMut<'_>> {
        let mut t = self.params.tensors_mut();
        t.push(taxodet::nn::TensorMut { name: "table".into(), data: self.table.as_slice_mut().unwrap() });
        t
    }
}

pub fn category_extractor_error() -> f64 {
    let (k, d, d_ff) = (4, 6, 12);
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params = CemParams::init(&mut rng, k, d, d_ff);
        let table = init_matrix(&mut rng, k, d) * 2.0;
        let f = Features::new(2, 3, init_matrix(&mut rng, 6, d) * 2.0).unwrap();
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &CemAndTable| -> f64 {
            let t = EmbeddingTable::new(p.table.clone()).unwrap();
            let c = cem_forward_cached(&t, &f, &p.params).unwrap();
            c.scores.0.iter().zip(&weights).map(|(s, w)| s * w).sum()
        };
        let both = CemAndTable { params, table };
        let t = EmbeddingTable::new(both.table.clone()).unwrap();
        let cache = cem_forward_cached(&t, &f, &both.params).unwrap();
        let g = cem_backward(&weights, &cache, &both.params).unwrap();
        let analytic = CemAndTable { params: g.params, table: g.embeddings.unwrap() };
        worst = worst.max(rel_err(&flat(&analytic), &numeric_grad(&both, loss)));
    }
    worst
}

fn tiny_detector(seed: u64, classification: Classification) -> (Detector, Features, Vec<GroundTruth>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d) = (5, 8);
    let table = EmbeddingTable::new(init_matrix(&mut rng, k, d) * 2.0).unwrap();
    let cfg = ModelConfig { d, d_ff: 16, top_k: 3, n_per_class: 2, classification };
    let mut m = Detector::init(&mut rng, cfg, table).unwrap();
    m.head.base_content = init_matrix(&mut rng, 1, d).row(0).to_owned();
    // Nonzero biases keep every ReLU away from its kink at exactly zero.
    m.head.box_b1 = init_matrix(&mut rng, 1, d).row(0).to_owned();
    m.head.box_b2 = init_matrix(&mut rng, 1, d).row(0).to_owned();
    m.head.cls_b = init_matrix(&mut rng, 1, d).row(0).to_owned();
    let f = Features::new(2, 2, init_matrix(&mut rng, 4, d) * 2.0).unwrap();
    let scope = vec![true, false, true, true, false];
    let gts = vec![
        GroundTruth { class_id: 0, bbox: random_box(&mut rng) },
        GroundTruth { class_id: 3, bbox: random_box(&mut rng) },
        GroundTruth { class_id: 3, bbox: random_box(&mut rng) },
    ];
    (m, f, gts, scope)
}

pub fn full_pipeline_error(classification: Classification) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let (m, f, gts, scope) = tiny_detector(200 + seed, classification);
        let sample = TrainSample { features: &f, gts: &gts, scope: &scope };
        let obj = Objective::default();
        let (_, grad) = m.loss_and_grad(&sample, &obj).unwrap();
        let numeric = numeric_grad(&m, |p| p.loss_and_grad(&sample, &obj).unwrap().0.total());
        worst = worst.max(rel_err(&flat(&grad), &numeric));
    }
    worst
}
