use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::Classification;

/// How ground truths are assigned to queries during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    /// Matching within class groups; each image is supervised only on its
    /// own dataset's taxonomy.
    Group,
    /// One Hungarian matching over every query with K-way scores, negatives
    /// drawn from the naive union of all taxonomies.
    StandardMerged,
}

impl MatchingMode {
    pub fn classification(self) -> Classification {
        match self {
            MatchingMode::Group => Classification::Matchability,
            MatchingMode::StandardMerged => Classification::AllClasses,
        }
    }
}

impl std::str::FromStr for MatchingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group" => Ok(MatchingMode::Group),
            "standard_merged" | "standard-merged" => Ok(MatchingMode::StandardMerged),
            other => Err(Error::Config(format!("unknown matching mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seed: u64,
    pub n_datasets: usize,
    pub classes_per_dataset: usize,
    pub alias_fraction: f64,
    pub images_per_dataset: usize,
    pub eval_images_per_dataset: usize,
    pub grid: usize,
    pub d: usize,
    pub top_k: usize,
    pub n_per_class: usize,
    /// Upper bound on labeled objects per scene.
    pub max_objects: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient norm cap applied before each step; 0 disables it.
    pub grad_clip: f64,
    pub mu_asl: f64,
    pub matching_mode: MatchingMode,
    pub supervise_negatives: bool,
    /// Seed each training category set with the ground-truth classes.
    pub teacher_forcing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 7,
            n_datasets: 2,
            classes_per_dataset: 8,
            alias_fraction: 0.25,
            images_per_dataset: 300,
            eval_images_per_dataset: 100,
            grid: 8,
            d: 16,
            top_k: 6,
            n_per_class: 4,
            max_objects: 4,
            epochs: 105,
            batch_size: 32,
            lr: 0.02,
            grad_clip: 0.0,
            mu_asl: 2.0,
            matching_mode: MatchingMode::Group,
            supervise_negatives: true,
            teacher_forcing: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_datasets", self.n_datasets),
            ("classes_per_dataset", self.classes_per_dataset),
            ("images_per_dataset", self.images_per_dataset),
            ("eval_images_per_dataset", self.eval_images_per_dataset),
            ("grid", self.grid),
            ("d", self.d),
            ("top_k", self.top_k),
            ("n_per_class", self.n_per_class),
            ("max_objects", self.max_objects),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.alias_fraction) {
            return Err(Error::Config(format!("alias_fraction {} outside [0, 1]", self.alias_fraction)));
        }
        if self.alias_fraction > 0.0 && self.n_datasets < 2 {
            return Err(Error::Config("aliases need at least two datasets".into()));
        }
        if self.max_objects > self.top_k {
            return Err(Error::Config(format!(
                "max_objects {} exceeds top_k {}; raise top_k",
                self.max_objects, self.top_k
            )));
        }
        if self.d < 4 || !self.d.is_multiple_of(4) {
            return Err(Error::Config(format!("d = {} must be a positive multiple of 4", self.d)));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be finite and non-negative".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.mu_asl.is_finite() && self.mu_asl >= 0.0) {
            return Err(Error::Config("lr and mu_asl must be finite and non-negative".into()));
        }
        if self.alias_pairs() * 2 > self.n_datasets * self.classes_per_dataset {
            return Err(Error::Config("more aliased classes than classes".into()));
        }
        Ok(())
    }

    /// Number of cross-dataset alias pairs.
    pub fn alias_pairs(&self) -> usize {
        (self.alias_fraction * (self.n_datasets * self.classes_per_dataset) as f64 / 2.0).round() as usize
    }

    pub fn total_classes(&self) -> usize {
        self.n_datasets * self.classes_per_dataset
    }
}
