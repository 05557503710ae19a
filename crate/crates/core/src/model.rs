//! The full detector: category extractor, class-seeded queries, decoder and
//! head over one shared embedding table, with a joint training objective.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cem::{cem_backward, cem_forward_cached, topk_select, training_category_set_within, CemParams, Features};
use crate::error::{Error, Result};
use crate::geometry::Bbox;
use crate::head::{
    assign_generic_queries, assign_queries, head_backward, head_forward, inference_references, Classification,
    HeadForward, HeadParams, QuerySet,
};
use crate::labelspace::EmbeddingTable;
use crate::losses::{asymmetric_loss, clamp_prob, AslConfig, FocalConfig};
use crate::matching::{
    match_group, match_standard, training_loss, training_loss_standard, GroundTruth, MatchWeights, ScoredQuery,
    StandardPrediction,
};
use crate::nn::{Parameters, TensorMut, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_ff: usize,
    pub top_k: usize,
    pub n_per_class: usize,
    pub classification: Classification,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_ff == 0 || self.top_k == 0 || self.n_per_class == 0 {
            return Err(Error::Config(format!("all model sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// One detection: a category, its score and a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category_id: usize,
    pub score: f64,
    pub bbox: Bbox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub cem: CemParams,
    pub head: HeadParams,
    pub embeddings: EmbeddingTable,
}

impl Parameters for Detector {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = self.cem.tensors();
        out.extend(self.head.tensors());
        out.push(TensorRef {
            name: "embeddings".into(),
            shape: self.embeddings.rows.shape().to_vec(),
            data: self.embeddings.rows.as_slice().expect("standard layout"),
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = self.cem.tensors_mut();
        out.extend(self.head.tensors_mut());
        out.push(TensorMut {
            name: "embeddings".into(),
            data: self.embeddings.rows.as_slice_mut().expect("standard layout"),
        });
        out
    }
}

/// Weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub weights: MatchWeights,
    pub focal: FocalConfig,
    pub asl: AslConfig,
    pub mu_asl: f64,
    /// Unmatched queries of active classes are pushed towards score 0.
    pub supervise_negatives: bool,
    /// Seed the training category set with the ground-truth classes.
    pub teacher_forcing: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            weights: MatchWeights::default(),
            focal: FocalConfig::default(),
            asl: AslConfig::default(),
            mu_asl: 1.0,
            supervise_negatives: true,
            teacher_forcing: true,
        }
    }
}

/// One annotated training image.
#[derive(Debug, Clone)]
pub struct TrainSample<'a> {
    pub features: &'a Features,
    pub gts: &'a [GroundTruth],
    /// Categories of the image's own dataset. Nothing outside it is supervised.
    pub scope: &'a [bool],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub set: f64,
    pub asl: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.set + self.asl
    }
}

impl Detector {
    pub fn init(rng: &mut ChaCha8Rng, config: ModelConfig, embeddings: EmbeddingTable) -> Result<Self> {
        config.validate()?;
        if embeddings.d() != config.d {
            return Err(Error::Config(format!(
                "embedding width {} differs from model width {}",
                embeddings.d(),
                config.d
            )));
        }
        let cem = CemParams::init(rng, embeddings.k(), config.d, config.d_ff);
        let head = HeadParams::init(rng, config.d, config.d_ff);
        Ok(Detector { config, cem, head, embeddings })
    }

    /// Same shapes, every value zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    pub fn k(&self) -> usize {
        self.embeddings.k()
    }

    pub fn category_scores(&self, f: &Features) -> Result<Vec<f64>> {
        Ok(cem_forward_cached(&self.embeddings, f, &self.cem)?.scores.0)
    }

    /// Extractor → top-k → queries → decoder → head → threshold.
    pub fn detect(&self, f: &Features, score_threshold: f64) -> Result<Vec<Detection>> {
        let scores = self.category_scores(f)?;
        let ids = topk_select(&scores, self.config.top_k);
        self.run_head(f, &ids, score_threshold)
    }

    /// The same pipeline with the category set given by the caller.
    pub fn detect_with_categories(&self, f: &Features, ids: &[usize], score_threshold: f64) -> Result<Vec<Detection>> {
        if let Some(&bad) = ids.iter().find(|&&c| c >= self.k()) {
            return Err(Error::Index { index: bad, len: self.k() });
        }
        if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
            return Err(Error::Config("duplicate category in the requested set".into()));
        }
        self.run_head(f, ids, score_threshold)
    }

    /// Language-seeded queries for matchability heads, generic queries for
    /// multi-class heads.
    pub fn queries(&self, ids: &[usize]) -> Result<QuerySet> {
        let n = self.config.n_per_class;
        match self.config.classification {
            Classification::Matchability => {
                assign_queries(ids, &self.embeddings, &self.head.base_content, &inference_references(ids.len(), n), n)
            }
            Classification::AllClasses => Ok(assign_generic_queries(ids, &self.head.base_content, n)),
        }
    }

    fn run_head(&self, f: &Features, ids: &[usize], score_threshold: f64) -> Result<Vec<Detection>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let qs = self.queries(ids)?;
        let fwd = head_forward(&qs, f, &self.embeddings, &self.cem.bias, &self.head, self.config.classification)?;
        let boxes = fwd.boxes();
        let mut out = Vec::with_capacity(qs.len());
        for (j, bbox) in boxes.into_iter().enumerate() {
            let (category_id, score) = match self.config.classification {
                Classification::Matchability => (fwd.classes[j], fwd.scores[[j, 0]]),
                Classification::AllClasses => {
                    let row = fwd.scores.row(j);
                    // Highest score among the active categories, lowest id on ties.
                    let mut best = ids[0];
                    for &c in ids {
                        if row[c] > row[best] || (row[c] == row[best] && c < best) {
                            best = c;
                        }
                    }
                    (best, row[best])
                }
            };
            if score > score_threshold {
                out.push(Detection { category_id, score, bbox });
            }
        }
        Ok(out)
    }

    /// Joint loss on one image and its gradient with respect to every
    /// parameter. The gradient has the layout of `self`.
    pub fn loss_and_grad(&self, sample: &TrainSample<'_>, obj: &Objective) -> Result<(LossParts, Detector)> {
        let k = self.k();
        if sample.scope.len() != k {
            return Err(Error::Shape(format!("scope of {} for {k} categories", sample.scope.len())));
        }
        for gt in sample.gts {
            if gt.class_id >= k || !sample.scope[gt.class_id] {
                return Err(Error::Training(format!(
                    "ground truth of class {} lies outside its dataset taxonomy",
                    gt.class_id
                )));
            }
        }

        let cache = cem_forward_cached(&self.embeddings, sample.features, &self.cem)?;
        let in_scope: Vec<usize> = (0..k).filter(|&c| sample.scope[c]).collect();
        let gt_classes: BTreeSet<usize> = sample.gts.iter().map(|g| g.class_id).collect();
        let scoped_scores: Vec<f64> = in_scope.iter().map(|&c| clamp_prob(cache.scores.0[c])).collect();
        let targets: Vec<bool> = in_scope.iter().map(|c| gt_classes.contains(c)).collect();
        let asl = asymmetric_loss(&scoped_scores, &targets, &obj.asl, obj.mu_asl)?;
        let mut d_cem_scores = vec![0.0; k];
        for (&c, g) in in_scope.iter().zip(&asl.grad) {
            d_cem_scores[c] = *g;
        }

        let top_k = self.config.top_k;
        let ids = if obj.teacher_forcing {
            training_category_set_within(&gt_classes, &cache.scores.0, top_k, Some(sample.scope))?
        } else {
            let masked: Vec<f64> =
                (0..k).map(|c| if sample.scope[c] { cache.scores.0[c] } else { f64::NEG_INFINITY }).collect();
            let mut ids = topk_select(&masked, top_k);
            ids.retain(|&c| sample.scope[c]);
            ids
        };

        let qs = self.queries(&ids)?;
        let fwd = head_forward(
            &qs,
            sample.features,
            &self.embeddings,
            &self.cem.bias,
            &self.head,
            self.config.classification,
        )?;
        let (set_value, d_scores, d_boxes) = self.set_loss(&fwd, sample, obj)?;

        let hg = head_backward(&fwd, &d_scores, &d_boxes, &self.embeddings, &self.head)?;
        let cg = cem_backward(&d_cem_scores, &cache, &self.cem)?;

        let mut grad = self.zeros_like();
        grad.cem = cg.params;
        grad.cem.bias += &hg.bias;
        grad.head = hg.head;
        if self.embeddings.learnable {
            grad.embeddings.rows = hg.embeddings + cg.embeddings.expect("learnable table yields gradients");
        }
        Ok((LossParts { set: set_value, asl: asl.value }, grad))
    }

    fn set_loss(
        &self,
        fwd: &HeadForward,
        sample: &TrainSample<'_>,
        obj: &Objective,
    ) -> Result<(f64, Array2<f64>, Vec<[f64; 4]>)> {
        let boxes = fwd.boxes();
        let crossing =
            |gt: usize| Error::Training(format!("positive supervision for ground truth {gt} crossed taxonomies"));
        match fwd.mode {
            Classification::Matchability => {
                let queries: Vec<ScoredQuery> = fwd
                    .classes
                    .iter()
                    .zip(&boxes)
                    .enumerate()
                    .map(|(j, (&class_id, &bbox))| ScoredQuery { class_id, score: fwd.scores[[j, 0]], bbox })
                    .collect();
                let m = match_group(&queries, sample.gts, &obj.weights, &obj.focal)?;
                for (g, q) in m.pairs() {
                    let c = sample.gts[g].class_id;
                    if queries[q].class_id != c || !sample.scope[c] {
                        return Err(crossing(g));
                    }
                }
                let loss = training_loss(&m, &queries, sample.gts, &obj.weights, &obj.focal, obj.supervise_negatives)?;
                let d = Array2::from_shape_vec((queries.len(), 1), loss.grad_scores).expect("one score per query");
                Ok((loss.value, d, loss.grad_boxes))
            }
            Classification::AllClasses => {
                let preds: Vec<StandardPrediction> = fwd
                    .scores
                    .rows()
                    .into_iter()
                    .zip(&boxes)
                    .map(|(row, &bbox)| StandardPrediction { probs: row.to_vec(), bbox })
                    .collect();
                let a = match_standard(&preds, sample.gts, &obj.weights, &obj.focal)?;
                for &(g, _) in &a.pairs {
                    if !sample.scope[sample.gts[g].class_id] {
                        return Err(crossing(g));
                    }
                }
                let loss = training_loss_standard(
                    &a,
                    &preds,
                    sample.gts,
                    sample.scope,
                    &obj.weights,
                    &obj.focal,
                    obj.supervise_negatives,
                )?;
                let k = self.k();
                let flat: Vec<f64> = loss.grad_probs.into_iter().flatten().collect();
                let d = Array2::from_shape_vec((preds.len(), k), flat).expect("k scores per query");
                Ok((loss.value, d, loss.grad_boxes))
            }
        }
    }
}

/// Detection with explicit parameters, matchability scoring.
pub fn detect(
    f: &Features,
    table: &EmbeddingTable,
    cem: &CemParams,
    head: &HeadParams,
    top_k: usize,
    n_per_class: usize,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let config = ModelConfig {
        d: table.d(),
        d_ff: head.decoder.d_ff(),
        top_k,
        n_per_class,
        classification: Classification::Matchability,
    };
    config.validate()?;
    let model = Detector { config, cem: cem.clone(), head: head.clone(), embeddings: table.clone() };
    model.detect(f, score_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_matrix;
    use rand::SeedableRng;

    fn model(seed: u64, classification: Classification) -> (Detector, Features) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = EmbeddingTable::new(init_matrix(&mut rng, 5, 8)).unwrap();
        let cfg = ModelConfig { d: 8, d_ff: 16, top_k: 3, n_per_class: 2, classification };
        let m = Detector::init(&mut rng, cfg, table).unwrap();
        let f = Features::new(2, 2, init_matrix(&mut rng, 4, 8)).unwrap();
        (m, f)
    }

    #[test]
    fn thresholds_bound_output() {
        let (m, f) = model(1, Classification::Matchability);
        assert!(m.detect(&f, 1.0).unwrap().is_empty());
        assert_eq!(m.detect(&f, 0.0).unwrap().len(), 6);
    }

    #[test]
    fn explicit_categories_only() {
        let (m, f) = model(2, Classification::Matchability);
        let out = m.detect_with_categories(&f, &[4], 0.0).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|d| d.category_id == 4));
        assert!(m.detect_with_categories(&f, &[], 0.0).unwrap().is_empty());
        assert!(m.detect_with_categories(&f, &[9], 0.0).is_err());
        let (m, f) = model(2, Classification::AllClasses);
        assert!(m.detect_with_categories(&f, &[1, 3], 0.0).unwrap().iter().all(|d| [1, 3].contains(&d.category_id)));
    }

    #[test]
    fn detect_equals_forced_categories() {
        let (m, f) = model(3, Classification::Matchability);
        let ids = topk_select(&m.category_scores(&f).unwrap(), 3);
        assert_eq!(m.detect(&f, 0.0).unwrap(), m.detect_with_categories(&f, &ids, 0.0).unwrap());
    }

    #[test]
    fn out_of_scope_ground_truth_is_rejected() {
        let (m, f) = model(4, Classification::Matchability);
        let gts = [GroundTruth { class_id: 1, bbox: Bbox::new(0.5, 0.5, 0.3, 0.3).unwrap() }];
        let scope = [true, false, true, false, false];
        let s = TrainSample { features: &f, gts: &gts, scope: &scope };
        assert!(matches!(m.loss_and_grad(&s, &Objective::default()), Err(Error::Training(_))));
    }
}
