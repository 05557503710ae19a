use serde::{Deserialize, Serialize};

use super::config::{BenchConfig, MatchingMode};
use super::data::generate_datasets;
use super::train::{run_train, RunReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub category: usize,
    pub name: String,
    pub aliased: bool,
    pub group_ap: f64,
    pub standard_ap: f64,
    /// `group_ap - standard_ap`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub group: RunReport,
    pub standard_merged: RunReport,
    pub mean_ap_delta: f64,
    pub aliased_mean_ap_delta: f64,
    pub per_class: Vec<ClassDelta>,
}

impl Comparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes") + "\n"
    }

    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("category,name,aliased,group_ap,standard_merged_ap,delta\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.category, c.name, c.aliased, c.group_ap, c.standard_ap, c.delta
            ));
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        std::fs::write(dir.join("per_class.csv"), self.per_class_csv())?;
        Ok(())
    }
}

/// Trains the same seed and data twice, once per matching mode, and
/// reports per-class AP differences.
pub fn compare_modes(cfg: &BenchConfig) -> Result<Comparison> {
    let data = generate_datasets(cfg)?;
    let run = |mode| {
        let c = BenchConfig { matching_mode: mode, ..cfg.clone() };
        let r = run_train(&c, &data)?;
        match r.diverged {
            Some(msg) => Err(Error::Training(format!("{mode:?} run diverged: {msg}"))),
            None => Ok(r.report),
        }
    };
    let group = run(MatchingMode::Group)?;
    let standard_merged = run(MatchingMode::StandardMerged)?;
    let per_class = group
        .per_class
        .iter()
        .zip(&standard_merged.per_class)
        .map(|(g, s)| ClassDelta {
            category: g.category,
            name: g.name.clone(),
            aliased: g.aliased,
            group_ap: g.ap,
            standard_ap: s.ap,
            delta: g.ap - s.ap,
        })
        .collect();
    Ok(Comparison {
        mean_ap_delta: group.mean_ap - standard_merged.mean_ap,
        aliased_mean_ap_delta: group.aliased_mean_ap - standard_merged.aliased_mean_ap,
        group,
        standard_merged,
        per_class,
    })
}
