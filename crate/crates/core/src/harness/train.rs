//! Joint training of extractor, decoder and head, and run reports.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{BenchConfig, MatchingMode};
use super::data::{derive_seed, synthesize_features, BenchData, World};
use super::eval::{evaluate, mean, CategorySource, EvalSummary};
use crate::cem::{accumulate, scale_params, Features};
use crate::error::{Error, Result};
use crate::matching::GroundTruth;
use crate::model::{Detector, ModelConfig, Objective, TrainSample};
use crate::nn::{Parameters, Sgd};

pub const MOMENTUM: f64 = 0.9;
pub const FINAL_LR_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub category: usize,
    pub name: String,
    pub dataset: usize,
    pub aliased: bool,
    pub ap: f64,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: BenchConfig,
    pub steps: usize,
    /// Mean training loss of the initial model, then the running mean of
    /// each epoch.
    pub loss_curve: Vec<f64>,
    pub multilabel_precision: f64,
    pub multilabel_recall: f64,
    pub per_dataset_ap: Vec<f64>,
    pub mean_ap: f64,
    pub aliased_mean_ap: f64,
    pub per_class: Vec<ClassReport>,
    /// Not serialized, so reports from identical seeds are byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn from_summary(config: &BenchConfig, world: &World, summary: &EvalSummary) -> Self {
        let per_class: Vec<ClassReport> = summary
            .detection
            .per_class
            .iter()
            .map(|c| ClassReport {
                category: c.category,
                name: world.label_space.name(c.category).to_string(),
                dataset: world.dataset_of(c.category),
                aliased: world.is_aliased(c.category),
                ap: c.ap,
                n_gt: c.n_gt,
            })
            .collect();
        let aliased_mean_ap = mean(per_class.iter().filter(|c| c.aliased && c.n_gt > 0).map(|c| c.ap));
        RunReport {
            config: config.clone(),
            steps: 0,
            loss_curve: Vec::new(),
            multilabel_precision: summary.multilabel.precision,
            multilabel_recall: summary.multilabel.recall,
            per_dataset_ap: summary.per_dataset_ap.clone(),
            mean_ap: summary.detection.mean_ap,
            aliased_mean_ap,
            per_class,
            wall_clock_secs: 0.0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("category,name,dataset,aliased,ap,n_gt\n");
        for c in &self.per_class {
            writeln!(out, "{},{},{},{},{},{}", c.category, c.name, c.dataset, c.aliased, c.ap, c.n_gt).unwrap();
        }
        out
    }

    /// Writes `report.json` and `per_class.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        std::fs::write(dir.join("per_class.csv"), self.per_class_csv())?;
        Ok(())
    }
}

pub fn model_config(cfg: &BenchConfig) -> ModelConfig {
    ModelConfig {
        d: cfg.d,
        d_ff: 2 * cfg.d,
        top_k: cfg.top_k,
        n_per_class: cfg.n_per_class,
        classification: cfg.matching_mode.classification(),
    }
}

pub fn objective(cfg: &BenchConfig) -> Objective {
    Objective {
        mu_asl: cfg.mu_asl,
        supervise_negatives: cfg.supervise_negatives,
        teacher_forcing: cfg.teacher_forcing,
        ..Objective::default()
    }
}

pub fn init_model(cfg: &BenchConfig, world: &World) -> Result<Detector> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init", 0));
    Detector::init(&mut rng, model_config(cfg), world.appearance.clone())
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Detector,
    pub report: RunReport,
    /// Set when training stopped on a non-finite loss; `model` then holds
    /// the state at the start of the failing epoch.
    pub diverged: Option<String>,
}

struct Prepared {
    features: Vec<Features>,
    gts: Vec<Vec<GroundTruth>>,
    scopes: Vec<Vec<bool>>,
}

fn prepare(cfg: &BenchConfig, data: &BenchData) -> Prepared {
    let k = data.world.k();
    let features = data.train.par_iter().map(|s| synthesize_features(s, &data.world.appearance)).collect();
    let gts = data.train.iter().map(|s| s.ground_truths()).collect();
    let scopes = data
        .train
        .iter()
        .map(|s| match cfg.matching_mode {
            MatchingMode::Group => data.world.scope(s.dataset),
            MatchingMode::StandardMerged => vec![true; k],
        })
        .collect();
    Prepared { features, gts, scopes }
}

impl Prepared {
    fn sample(&self, i: usize) -> TrainSample<'_> {
        TrainSample { features: &self.features[i], gts: &self.gts[i], scope: &self.scopes[i] }
    }

    /// Mean loss and mean gradient over `idx`, summed in index order.
    fn batch(&self, model: &Detector, obj: &Objective, idx: &[usize]) -> Result<(f64, Detector)> {
        let parts: Vec<(f64, Detector)> = idx
            .par_iter()
            .map(|&i| model.loss_and_grad(&self.sample(i), obj).map(|(l, g)| (l.total(), g)))
            .collect::<Result<_>>()?;
        let mut total = model.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            accumulate(&mut total, g, 1.0);
        }
        let n = idx.len() as f64;
        scale_params(&mut total, 1.0 / n);
        Ok((loss / n, total))
    }

    fn mean_loss(&self, model: &Detector, obj: &Objective) -> Result<f64> {
        let losses: Vec<f64> = (0..self.features.len())
            .into_par_iter()
            .map(|i| model.loss_and_grad(&self.sample(i), obj).map(|(l, _)| l.total()))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }
}

/// Rescales `g` so its global L2 norm is at most `max_norm` (0 disables).
pub fn clip_norm(g: &mut Detector, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = g.tensors().iter().flat_map(|t| t.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        scale_params(g, max_norm / norm);
    }
}

/// Cosine decay from `lr` at step 0 to `FINAL_LR_FRACTION · lr` at `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    lr * (FINAL_LR_FRACTION + (1.0 - FINAL_LR_FRACTION) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

fn all_finite(p: &Detector) -> bool {
    p.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
}

/// Trains from the seeded initialization on `data.train` and evaluates on
/// `data.eval` with the extractor's top-k category sets.
pub fn run_train(cfg: &BenchConfig, data: &BenchData) -> Result<TrainRun> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = init_model(cfg, &data.world)?;
    let obj = objective(cfg);
    let prep = prepare(cfg, data);
    let mut sgd = Sgd::new(MOMENTUM);
    let mut loss_curve = vec![prep.mean_loss(&model, &obj)?];
    let mut steps = 0;
    let mut diverged = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let total_steps = cfg.epochs * data.train.len().div_ceil(cfg.batch_size);

    'epochs: for epoch in 0..cfg.epochs {
        let snapshot = model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let step = prep.batch(&model, &obj, idx).and_then(|(loss, grad)| {
                if loss.is_finite() && all_finite(&grad) {
                    Ok((loss, grad))
                } else {
                    Err(Error::Training(format!("non-finite loss {loss} at epoch {epoch}, step {steps}")))
                }
            });
            let (loss, grad) = match step {
                Ok(v) => v,
                Err(e @ (Error::Training(_) | Error::Numeric { .. } | Error::Domain(_))) => {
                    model = snapshot;
                    diverged = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let mut grad = grad;
            clip_norm(&mut grad, cfg.grad_clip);
            sgd.step(&mut model.tensors_mut(), &grad.tensors(), cosine_lr(cfg.lr, steps, total_steps));
            epoch_loss += loss;
            batches += 1;
            steps += 1;
        }
        loss_curve.push(epoch_loss / batches as f64);
    }

    let summary = evaluate(&model, data, CategorySource::Extractor { top_k: cfg.top_k })?;
    let mut report = RunReport::from_summary(cfg, &data.world, &summary);
    report.steps = steps;
    report.loss_curve = loss_curve;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(TrainRun { model, report, diverged })
}
