//! Synthetic multi-dataset scenes with conflicting taxonomies.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::BenchConfig;
use crate::cem::Features;
use crate::error::{Error, Result};
use crate::geometry::Bbox;
use crate::labelspace::{cosine, synth_alias, synth_embedding, EmbeddingTable, LabelSpace};
use crate::matching::GroundTruth;
use crate::nn::position_encoding;

/// Cosine between the two embeddings of an alias pair.
pub const ALIAS_COSINE: f64 = 0.97;
/// Largest |cosine| allowed between embeddings of unrelated categories.
pub const MAX_UNRELATED_COSINE: f64 = 0.5;
/// Standard deviation of the additive feature noise.
pub const FEATURE_NOISE: f64 = 0.05;
pub const MIN_BOX_SIDE: f64 = 0.15;
pub const MAX_BOX_SIDE: f64 = 0.45;

/// A seed for one purpose and index, derived from the run seed.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: Bbox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image: usize,
    pub dataset: usize,
    pub grid: (usize, usize),
    /// Annotated objects, all from the scene's own dataset.
    pub objects: Vec<SceneObject>,
    /// Objects present in the image but outside its dataset's taxonomy.
    pub background: Vec<SceneObject>,
    pub noise_seed: u64,
}

impl Scene {
    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.objects.iter().map(|o| GroundTruth { class_id: o.category, bbox: o.bbox }).collect()
    }
}

/// Label space, the fixed appearance of every category, and which
/// categories are two names for one concept.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub label_space: LabelSpace,
    pub appearance: EmbeddingTable,
    pub alias_pairs: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    label_space: LabelSpace,
    appearance: Vec<Vec<f64>>,
    alias_pairs: Vec<(usize, usize)>,
}

impl World {
    pub fn is_aliased(&self, category: usize) -> bool {
        self.alias_pairs.iter().any(|&(a, b)| a == category || b == category)
    }

    pub fn k(&self) -> usize {
        self.label_space.len()
    }

    pub fn scope(&self, dataset: usize) -> Vec<bool> {
        self.label_space.datasets()[dataset].scope_mask(self.k())
    }

    pub fn dataset_of(&self, category: usize) -> usize {
        *self.label_space.categories()[category].source_datasets.iter().next().expect("registered category")
    }

    pub fn to_json(&self) -> serde_json::Value {
        let file = WorldFile {
            label_space: self.label_space.clone(),
            appearance: self.appearance.rows.rows().into_iter().map(|r| r.to_vec()).collect(),
            alias_pairs: self.alias_pairs.clone(),
        };
        serde_json::to_value(file).expect("world serializes")
    }

    pub fn from_json(v: serde_json::Value) -> Result<Self> {
        let mut file: WorldFile = serde_json::from_value(v)?;
        file.label_space.reindex();
        let d = file.appearance.first().map_or(0, Vec::len);
        let flat: Vec<f64> = file.appearance.into_iter().flatten().collect();
        let rows = Array2::from_shape_vec((flat.len() / d.max(1), d), flat)
            .map_err(|e| Error::Load(format!("appearance table: {e}")))?;
        Ok(World {
            label_space: file.label_space,
            appearance: EmbeddingTable::new(rows)?,
            alias_pairs: file.alias_pairs,
        })
    }
}

/// Everything a run trains and evaluates on.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchData {
    pub world: World,
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

fn class_name(dataset: usize, slot: usize) -> String {
    format!("d{dataset} class {slot}")
}

/// Builds the taxonomies. Alias pair `p` joins the next free slot of
/// dataset `p mod n` with the next free slot of dataset `(p + 1) mod n`.
pub fn build_world(cfg: &BenchConfig) -> Result<World> {
    cfg.validate()?;
    let (n, c) = (cfg.n_datasets, cfg.classes_per_dataset);
    let mut used = vec![0usize; n];
    let mut slot_pairs = Vec::new();
    for p in 0..cfg.alias_pairs() {
        let (a, b) = (p % n, (p + 1) % n);
        if used[a] >= c || used[b] >= c {
            return Err(Error::Config(format!("cannot place {} alias pairs", cfg.alias_pairs())));
        }
        slot_pairs.push(((a, used[a]), (b, used[b])));
        used[a] += 1;
        used[b] += 1;
    }

    let mut space = LabelSpace::new();
    for ds in 0..n {
        let names: Vec<String> = (0..c).map(|s| class_name(ds, s)).collect();
        space.register_dataset(&format!("dataset {ds}"), &names)?;
    }
    let gid = |ds: usize, slot: usize| space.datasets()[ds].local_to_global[slot];
    let alias_pairs: Vec<(usize, usize)> =
        slot_pairs.iter().map(|&((a, sa), (b, sb))| (gid(a, sa), gid(b, sb))).collect();
    let partner = |g: usize| {
        alias_pairs.iter().find_map(|&(a, b)| {
            if a == g {
                Some(b)
            } else if b == g {
                Some(a)
            } else {
                None
            }
        })
    };

    let k = space.len();
    let mut rows: Vec<Option<ndarray::Array1<f64>>> = vec![None; k];
    for g in 0..k {
        if rows[g].is_some() {
            continue;
        }
        let name = space.name(g).to_string();
        let twin = partner(g);
        let mut accepted = false;
        for attempt in 0..10_000u64 {
            let s = derive_seed(cfg.seed, "embedding attempt", attempt);
            let base = synth_embedding(&name, cfg.d, s);
            let alias = twin.map(|t| synth_alias(&base, space.name(t), s, ALIAS_COSINE));
            let clear =
                |v: &ndarray::Array1<f64>| rows.iter().flatten().all(|r| cosine(v, r).abs() < MAX_UNRELATED_COSINE);
            if clear(&base) && alias.as_ref().is_none_or(clear) {
                rows[g] = Some(base);
                if let (Some(t), Some(a)) = (twin, alias) {
                    rows[t] = Some(a);
                }
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Config(format!(
                "cannot place {k} embeddings of width {} with pairwise |cosine| below {MAX_UNRELATED_COSINE}",
                cfg.d
            )));
        }
    }
    let mut table = Array2::zeros((k, cfg.d));
    for (g, r) in rows.into_iter().enumerate() {
        table.row_mut(g).assign(&r.expect("every row placed"));
    }
    Ok(World { label_space: space, appearance: EmbeddingTable::new(table)?, alias_pairs })
}

fn random_box(rng: &mut ChaCha8Rng) -> Bbox {
    let w = rng.random_range(MIN_BOX_SIDE..=MAX_BOX_SIDE);
    let h = rng.random_range(MIN_BOX_SIDE..=MAX_BOX_SIDE);
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    Bbox { cx, cy, w, h }
}

fn sample_scene(cfg: &BenchConfig, world: &World, image: usize, dataset: usize, split: &str) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, split, image as u64));
    let classes = &world.label_space.datasets()[dataset].local_to_global;
    let count = rng.random_range(1..=cfg.max_objects);
    let objects = (0..count)
        .map(|_| SceneObject { category: classes[rng.random_range(0..classes.len())], bbox: random_box(&mut rng) })
        .collect();
    let foreign: Vec<usize> = (0..world.k()).filter(|&g| !classes.contains(&g) && !world.is_aliased(g)).collect();
    let mut background = Vec::new();
    if !foreign.is_empty() && rng.random_bool(cfg.alias_fraction) {
        background
            .push(SceneObject { category: foreign[rng.random_range(0..foreign.len())], bbox: random_box(&mut rng) });
    }
    Scene {
        image,
        dataset,
        grid: (cfg.grid, cfg.grid),
        objects,
        background,
        noise_seed: derive_seed(cfg.seed, "noise", image as u64),
    }
}

fn sample_split(cfg: &BenchConfig, world: &World, per_dataset: usize, first_image: usize, split: &str) -> Vec<Scene> {
    (0..cfg.n_datasets * per_dataset)
        .into_par_iter()
        .map(|i| sample_scene(cfg, world, first_image + i, i / per_dataset, split))
        .collect()
}

/// Taxonomies, appearance table, and seeded training and evaluation scenes.
pub fn generate_datasets(cfg: &BenchConfig) -> Result<BenchData> {
    let world = build_world(cfg)?;
    let n_train = cfg.n_datasets * cfg.images_per_dataset;
    let train = sample_split(cfg, &world, cfg.images_per_dataset, 0, "train scene");
    let eval = sample_split(cfg, &world, cfg.eval_images_per_dataset, n_train, "eval scene");
    Ok(BenchData { world, train, eval })
}

fn contains(b: &Bbox, x: f64, y: f64) -> bool {
    (x - b.cx).abs() <= b.w / 2.0 && (y - b.cy).abs() <= b.h / 2.0
}

/// `F(cell) = Σ appearance of objects covering the cell center
///            + position encoding of the cell center + noise`.
pub fn synthesize_features(scene: &Scene, appearance: &EmbeddingTable) -> Features {
    let (h, w) = scene.grid;
    let d = appearance.d();
    let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    let mut data = Array2::zeros((h * w, d));
    for r in 0..h {
        for c in 0..w {
            let (x, y) = ((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
            let mut row = data.row_mut(r * w + c);
            row += &position_encoding(x, y, d);
            for o in scene.objects.iter().chain(&scene.background) {
                if contains(&o.bbox, x, y) {
                    row += &appearance.rows.row(o.category);
                }
            }
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += FEATURE_NOISE * z;
            }
        }
    }
    Features::new(h, w, data).expect("grid and rows agree")
}

pub fn write_scenes(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut scenes = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            scenes.push(serde_json::from_str(&line)?);
        }
    }
    Ok(scenes)
}
