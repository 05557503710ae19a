//! Unified label space over several datasets' taxonomies.
//!
//! Category identity is the normalized class name: the same string in two
//! datasets is one category, two different strings are two categories even
//! when they mean the same thing. Each category owns one row of the
//! [`EmbeddingTable`].

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lowercase, trim and collapse internal whitespace to single spaces.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub global_id: usize,
    pub name: String,
    pub source_datasets: BTreeSet<usize>,
    pub embedding_row: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: usize,
    pub name: String,
    pub local_classes: Vec<String>,
    pub local_to_global: Vec<usize>,
}

impl DatasetDescriptor {
    pub fn contains(&self, global_id: usize) -> bool {
        self.local_to_global.contains(&global_id)
    }

    /// Membership mask over `k` global categories.
    pub fn scope_mask(&self, k: usize) -> Vec<bool> {
        let mut mask = vec![false; k];
        for &g in &self.local_to_global {
            mask[g] = true;
        }
        mask
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    categories: Vec<CategoryEntry>,
    datasets: Vec<DatasetDescriptor>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LabelSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_dataset(&mut self, name: &str, class_names: &[impl AsRef<str>]) -> Result<DatasetDescriptor> {
        if class_names.is_empty() {
            return Err(Error::Registration(format!("dataset {name:?} has no classes")));
        }
        let mut local = Vec::with_capacity(class_names.len());
        let mut seen = BTreeSet::new();
        for raw in class_names {
            let n = normalize_name(raw.as_ref());
            if n.is_empty() {
                return Err(Error::Registration(format!("dataset {name:?} has an empty class name")));
            }
            if !seen.insert(n.clone()) {
                return Err(Error::Registration(format!("dataset {name:?} lists {n:?} twice")));
            }
            local.push(n);
        }

        let dataset_id = self.datasets.len();
        let mut local_to_global = Vec::with_capacity(local.len());
        for n in &local {
            let gid = match self.index.get(n) {
                Some(&g) => g,
                None => {
                    let g = self.categories.len();
                    self.categories.push(CategoryEntry {
                        global_id: g,
                        name: n.clone(),
                        source_datasets: BTreeSet::new(),
                        embedding_row: g,
                    });
                    self.index.insert(n.clone(), g);
                    g
                }
            };
            self.categories[gid].source_datasets.insert(dataset_id);
            local_to_global.push(gid);
        }
        let desc = DatasetDescriptor { dataset_id, name: name.to_string(), local_classes: local, local_to_global };
        self.datasets.push(desc.clone());
        Ok(desc)
    }

    /// Number of distinct categories, `K`.
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[CategoryEntry] {
        &self.categories
    }

    pub fn datasets(&self) -> &[DatasetDescriptor] {
        &self.datasets
    }

    pub fn dataset(&self, id: usize) -> Option<&DatasetDescriptor> {
        self.datasets.get(id)
    }

    pub fn name(&self, global_id: usize) -> &str {
        &self.categories[global_id].name
    }

    pub fn lookup(&self, name: &str) -> Result<usize> {
        self.index.get(&normalize_name(name)).copied().ok_or_else(|| Error::Lookup(name.to_string()))
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.categories.iter().map(|c| (c.name.clone(), c.global_id)).collect();
    }
}

/// Category embeddings, one row per global category id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Array2<f64>,
    pub learnable: bool,
}

impl EmbeddingTable {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite embedding entry".into()));
        }
        Ok(EmbeddingTable { rows, learnable: true })
    }

    pub fn k(&self) -> usize {
        self.rows.nrows()
    }

    pub fn d(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, id: usize) -> Array1<f64> {
        self.rows.row(id).to_owned()
    }

    /// Writes the `K d` header followed by one `name v_1 ... v_d` line per category.
    pub fn save(&self, path: impl AsRef<Path>, space: &LabelSpace) -> Result<()> {
        std::fs::write(path, self.to_text(space)?)?;
        Ok(())
    }

    pub fn to_text(&self, space: &LabelSpace) -> Result<String> {
        if space.len() != self.k() {
            return Err(Error::Shape(format!("{} categories, {} embedding rows", space.len(), self.k())));
        }
        let mut out = String::new();
        writeln!(out, "{} {}", self.k(), self.d()).unwrap();
        for cat in space.categories() {
            out.push_str(&cat.name);
            for v in self.rows.row(cat.embedding_row) {
                // `Display` for f64 prints the shortest string that round-trips.
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn load_embeddings(path: impl AsRef<Path>, space: &LabelSpace) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path)?;
    parse_embeddings(&text, space)
}

pub fn parse_embeddings(text: &str, space: &LabelSpace) -> Result<EmbeddingTable> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Load("empty embedding file".into()))?;
    let mut parts = header.split_whitespace();
    let (k, d) = match (parts.next(), parts.next(), parts.next()) {
        (Some(k), Some(d), None) => (
            k.parse::<usize>().map_err(|e| Error::Load(format!("bad header: {e}")))?,
            d.parse::<usize>().map_err(|e| Error::Load(format!("bad header: {e}")))?,
        ),
        _ => return Err(Error::Load(format!("bad header line {header:?}"))),
    };

    let mut by_name: HashMap<String, Vec<f64>> = HashMap::new();
    let mut count = 0;
    for line in lines {
        count += 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < d + 1 {
            return Err(Error::Shape(format!("line {line:?} has fewer than {d} values")));
        }
        let split = tokens.len() - d;
        let name = normalize_name(&tokens[..split].join(" "));
        let values = tokens[split..]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Load(format!("bad value for {name:?}: {e}")))?;
        if tokens[..split].iter().any(|t| t.parse::<f64>().is_ok()) {
            return Err(Error::Shape(format!("entry {name:?} has more than {d} values")));
        }
        by_name.insert(name, values);
    }
    if count != k {
        return Err(Error::Load(format!("header declares {k} rows, found {count}")));
    }

    let mut rows = Array2::zeros((space.len(), d));
    for cat in space.categories() {
        let v = by_name
            .get(&cat.name)
            .ok_or_else(|| Error::Load(format!("embedding missing for category: {}", cat.name)))?;
        for (j, x) in v.iter().enumerate() {
            rows[[cat.embedding_row, j]] = *x;
        }
    }
    EmbeddingTable::new(rows)
}

fn hashed_rng(tag: &str, name: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn unit(mut v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / n);
    v
}

/// Deterministic unit vector standing in for a text encoder's output.
pub fn synth_embedding(name: &str, d: usize, seed: u64) -> Array1<f64> {
    assert!(d >= 2, "embedding dimension must be at least 2");
    let mut rng = hashed_rng("embedding", &normalize_name(name), seed);
    unit(Array1::from_shape_fn(d, |_| StandardNormal.sample(&mut rng)))
}

/// Unit vector at exactly `cosine` to `base`, rotated towards a direction
/// derived from `name`. Used to make two different names near-synonyms.
pub fn synth_alias(base: &Array1<f64>, name: &str, seed: u64, cosine: f64) -> Array1<f64> {
    let d = base.len();
    let base = unit(base.clone());
    let mut rng = hashed_rng("alias", &normalize_name(name), seed);
    let mut dir: Array1<f64> = Array1::from_shape_fn(d, |_| StandardNormal.sample(&mut rng));
    let proj = dir.dot(&base);
    dir.scaled_add(-proj, &base);
    let dir = unit(dir);
    let sine = (1.0 - cosine * cosine).max(0.0).sqrt();
    unit(&base * cosine + &dir * sine)
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}
