//! Class-seeded queries, a one-layer decoder stand-in, and the prediction
//! head that turns each decoded query into a matchability score for its own
//! category and a box refined from its reference.
//!
//! For query `j` of class `c` with decoded vector `q_j` and reference `r_j`:
//!
//! ```text
//! score_j = σ(⟨MLP_cls(q_j), E_c⟩ / √d + b_c)
//! box_j   = σ(MLP_box(q_j) + σ⁻¹(r_j))        coordinate-wise on (cx, cy, w, h)
//! ```

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cem::{layer_backward, layer_forward, ClassDecoderLayerParams, Features, LayerCache};
use crate::error::{Error, Result};
use crate::geometry::Bbox;
use crate::labelspace::EmbeddingTable;
use crate::nn::{
    add_row, init_matrix, inverse_sigmoid, mat_mut, mat_ref, position_encoding, relu, relu_backward, sigmoid, sum_rows,
    vec_mut, vec_ref, Parameters, TensorMut, TensorRef,
};

/// Side length of reference boxes laid out on the per-class lattice.
pub const GRID_REFERENCE_SIZE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub class_id: usize,
    pub content: Array1<f64>,
    pub reference: Bbox,
}

/// `top_k · n_per_class` queries, grouped contiguously by category.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<Query>,
    pub category_ids: Vec<usize>,
    pub n_per_class: usize,
    /// Whether each query's content carries its category embedding.
    pub seeded: bool,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn top_k(&self) -> usize {
        self.category_ids.len()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.queries.iter().map(|q| q.class_id).collect()
    }

    pub fn references(&self) -> Vec<Bbox> {
        self.queries.iter().map(|q| q.reference).collect()
    }

    pub fn contents(&self) -> Array2<f64> {
        let d = self.queries.first().map_or(0, |q| q.content.len());
        let mut m = Array2::zeros((self.len(), d));
        for (mut row, q) in m.rows_mut().into_iter().zip(&self.queries) {
            row.assign(&q.content);
        }
        m
    }
}

/// Query `j` gets class `category_ids[j / n]`, content
/// `base_content + E[class]` and reference `refs[j]`.
pub fn assign_queries(
    category_ids: &[usize],
    table: &EmbeddingTable,
    base_content: &Array1<f64>,
    refs: &[Bbox],
    n_per_class: usize,
) -> Result<QuerySet> {
    if refs.len() != category_ids.len() * n_per_class {
        return Err(Error::Shape(format!(
            "{} references for {} categories x {n_per_class} queries",
            refs.len(),
            category_ids.len()
        )));
    }
    if base_content.len() != table.d() {
        return Err(Error::Shape("base content width differs from embedding width".into()));
    }
    if let Some(&bad) = category_ids.iter().find(|&&c| c >= table.k()) {
        return Err(Error::Index { index: bad, len: table.k() });
    }
    let queries = refs
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let class_id = category_ids[j / n_per_class];
            Query { class_id, content: base_content + &table.rows.row(class_id), reference: *r }
        })
        .collect();
    Ok(QuerySet { queries, category_ids: category_ids.to_vec(), n_per_class, seeded: true })
}

/// Category-agnostic queries for multi-class heads: content is
/// `base_content` alone and the references come from one shared lattice
/// of `category_ids.len() · n_per_class` cells. Query `j` is still tagged
/// with `category_ids[j / n]`.
pub fn assign_generic_queries(category_ids: &[usize], base_content: &Array1<f64>, n_per_class: usize) -> QuerySet {
    let refs = grid_references(category_ids.len() * n_per_class);
    let queries = refs
        .into_iter()
        .enumerate()
        .map(|(j, reference)| Query {
            class_id: category_ids[j / n_per_class],
            content: base_content.clone(),
            reference,
        })
        .collect();
    QuerySet { queries, category_ids: category_ids.to_vec(), n_per_class, seeded: false }
}

/// Fixed references for one class group: centers on a `⌈√n⌉ × ⌈√n⌉`
/// lattice, side [`GRID_REFERENCE_SIZE`].
pub fn grid_references(n_per_class: usize) -> Vec<Bbox> {
    let side = (n_per_class as f64).sqrt().ceil().max(1.0) as usize;
    (0..n_per_class)
        .map(|i| {
            let (row, col) = (i / side, i % side);
            Bbox {
                cx: (col as f64 + 0.5) / side as f64,
                cy: (row as f64 + 0.5) / side as f64,
                w: GRID_REFERENCE_SIZE,
                h: GRID_REFERENCE_SIZE,
            }
        })
        .collect()
}

/// Grid references repeated for each of `top_k` groups.
pub fn inference_references(top_k: usize, n_per_class: usize) -> Vec<Bbox> {
    let one = grid_references(n_per_class);
    (0..top_k).flat_map(|_| one.iter().copied()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
    pub box_w1: Array2<f64>,
    pub box_b1: Array1<f64>,
    pub box_w2: Array2<f64>,
    pub box_b2: Array1<f64>,
    pub box_w3: Array2<f64>,
    pub box_b3: Array1<f64>,
    pub decoder: ClassDecoderLayerParams,
    /// Content shared by every query before its category embedding is added.
    pub base_content: Array1<f64>,
}

impl HeadParams {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, d_ff: usize) -> Self {
        HeadParams {
            cls_w: init_matrix(rng, d, d),
            cls_b: Array1::zeros(d),
            box_w1: init_matrix(rng, d, d),
            box_b1: Array1::zeros(d),
            box_w2: init_matrix(rng, d, d),
            box_b2: Array1::zeros(d),
            box_w3: init_matrix(rng, d, 4),
            box_b3: Array1::zeros(4),
            decoder: ClassDecoderLayerParams::init_matching(rng, d, d_ff, crate::cem::ATTENTION_GAIN),
            base_content: Array1::zeros(d),
        }
    }

    pub fn zeros(d: usize, d_ff: usize) -> Self {
        HeadParams {
            cls_w: Array2::zeros((d, d)),
            cls_b: Array1::zeros(d),
            box_w1: Array2::zeros((d, d)),
            box_b1: Array1::zeros(d),
            box_w2: Array2::zeros((d, d)),
            box_b2: Array1::zeros(d),
            box_w3: Array2::zeros((d, 4)),
            box_b3: Array1::zeros(4),
            decoder: ClassDecoderLayerParams::zeros(d, d_ff),
            base_content: Array1::zeros(d),
        }
    }

    pub fn d(&self) -> usize {
        self.cls_w.nrows()
    }
}

impl Parameters for HeadParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            mat_ref("head.cls.w", &self.cls_w),
            vec_ref("head.cls.b", &self.cls_b),
            mat_ref("head.box.w1", &self.box_w1),
            vec_ref("head.box.b1", &self.box_b1),
            mat_ref("head.box.w2", &self.box_w2),
            vec_ref("head.box.b2", &self.box_b2),
            mat_ref("head.box.w3", &self.box_w3),
            vec_ref("head.box.b3", &self.box_b3),
        ];
        out.extend(self.decoder.named("head.decoder"));
        out.push(vec_ref("head.base_content", &self.base_content));
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![
            mat_mut("head.cls.w", &mut self.cls_w),
            vec_mut("head.cls.b", &mut self.cls_b),
            mat_mut("head.box.w1", &mut self.box_w1),
            vec_mut("head.box.b1", &mut self.box_b1),
            mat_mut("head.box.w2", &mut self.box_w2),
            vec_mut("head.box.b2", &mut self.box_b2),
            mat_mut("head.box.w3", &mut self.box_w3),
            vec_mut("head.box.b3", &mut self.box_b3),
        ];
        out.extend(self.decoder.named_mut("head.decoder"));
        out.push(vec_mut("head.base_content", &mut self.base_content));
        out
    }
}

/// Decoder input: query content plus the positional encoding of the
/// reference center.
pub fn decoder_input(qs: &QuerySet) -> Array2<f64> {
    let mut x = qs.contents();
    let d = x.ncols();
    for (mut row, q) in x.rows_mut().into_iter().zip(&qs.queries) {
        row += &position_encoding(q.reference.cx, q.reference.cy, d);
    }
    x
}

/// One class-decoder layer over the queries, features as keys and values.
pub fn toy_decoder(qs: &QuerySet, f: &Features, p: &HeadParams) -> Result<Array2<f64>> {
    Ok(layer_forward(&decoder_input(qs), f, &p.decoder)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub score: f64,
    pub bbox: Bbox,
}

#[derive(Debug, Clone)]
struct BoxMlpCache {
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    boxes: Array2<f64>,
}

fn box_mlp(q_d: &Array2<f64>, refs: &[Bbox], p: &HeadParams) -> BoxMlpCache {
    let z1 = add_row(&q_d.dot(&p.box_w1), &p.box_b1);
    let h1 = relu(&z1);
    let z2 = add_row(&h1.dot(&p.box_w2), &p.box_b2);
    let h2 = relu(&z2);
    let mut boxes = add_row(&h2.dot(&p.box_w3), &p.box_b3);
    for (mut row, r) in boxes.rows_mut().into_iter().zip(refs) {
        for (v, rv) in row.iter_mut().zip(r.to_array()) {
            *v = sigmoid(*v + inverse_sigmoid(rv));
        }
    }
    BoxMlpCache { z1, h1, z2, h2, boxes }
}

fn check_rows(q_d: &Array2<f64>, embeddings: &Array2<f64>, refs: &[Bbox], p: &HeadParams) -> Result<()> {
    let n = q_d.nrows();
    if embeddings.nrows() != n || refs.len() != n {
        return Err(Error::Shape(format!(
            "{n} decoded queries, {} embeddings, {} references",
            embeddings.nrows(),
            refs.len()
        )));
    }
    if q_d.ncols() != p.d() || embeddings.ncols() != p.d() {
        return Err(Error::Shape("head width differs from query width".into()));
    }
    Ok(())
}

fn check_finite(scores: &[f64], boxes: &Array2<f64>) -> Result<()> {
    for (j, (s, b)) in scores.iter().zip(boxes.rows()).enumerate() {
        if !s.is_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { query: j, message: "non-finite head output".into() });
        }
    }
    Ok(())
}

/// Scores and boxes for decoded queries. `embeddings[j]` and `bias[j]` are
/// the embedding row and category bias of query `j`'s assigned class.
pub fn head_predict(
    q_d: &Array2<f64>,
    embeddings: &Array2<f64>,
    refs: &[Bbox],
    p: &HeadParams,
    bias: &[f64],
) -> Result<Vec<HeadOutput>> {
    check_rows(q_d, embeddings, refs, p)?;
    if bias.len() != q_d.nrows() {
        return Err(Error::Shape(format!("{} biases for {} queries", bias.len(), q_d.nrows())));
    }
    let scale = 1.0 / (p.d() as f64).sqrt();
    let p_cls = add_row(&q_d.dot(&p.cls_w), &p.cls_b);
    let logits = (&p_cls * embeddings).sum_axis(Axis(1)) * scale;
    let scores: Vec<f64> = logits.iter().zip(bias).map(|(z, b)| sigmoid(z + b)).collect();
    let cache = box_mlp(q_d, refs, p);
    check_finite(&scores, &cache.boxes)?;
    Ok(scores
        .into_iter()
        .zip(cache.boxes.rows())
        .map(|(score, b)| HeadOutput { score, bbox: Bbox::from_array([b[0], b[1], b[2], b[3]]) })
        .collect())
}

/// How queries are classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    /// One matchability score per query, for its assigned class.
    Matchability,
    /// Independent sigmoid scores over every category, DETR style.
    AllClasses,
}

/// Intermediate values of a full head pass, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub classes: Vec<usize>,
    pub mode: Classification,
    layer: LayerCache,
    q_d: Array2<f64>,
    p_cls: Array2<f64>,
    box_cache: BoxMlpCache,
    /// `Matchability`: one score per query. `AllClasses`: `n × K`.
    pub scores: Array2<f64>,
    seeded: bool,
    features: Features,
}

impl HeadForward {
    pub fn boxes(&self) -> Vec<Bbox> {
        self.box_cache.boxes.rows().into_iter().map(|b| Bbox::from_array([b[0], b[1], b[2], b[3]])).collect()
    }

    pub fn decoded(&self) -> &Array2<f64> {
        &self.q_d
    }
}

/// Queries → decoder → head, with everything cached.
pub fn head_forward(
    qs: &QuerySet,
    f: &Features,
    table: &EmbeddingTable,
    bias: &Array1<f64>,
    p: &HeadParams,
    mode: Classification,
) -> Result<HeadForward> {
    let refs = qs.references();
    let (q_d, layer) = layer_forward(&decoder_input(qs), f, &p.decoder)?;
    let classes = qs.classes();
    let scale = 1.0 / (p.d() as f64).sqrt();
    let p_cls = add_row(&q_d.dot(&p.cls_w), &p.cls_b);
    let scores = match mode {
        Classification::Matchability => {
            let emb = table.rows.select(Axis(0), &classes);
            check_rows(&q_d, &emb, &refs, p)?;
            let logits = (&p_cls * &emb).sum_axis(Axis(1)) * scale;
            Array2::from_shape_fn((qs.len(), 1), |(j, _)| sigmoid(logits[j] + bias[classes[j]]))
        }
        Classification::AllClasses => {
            let logits = p_cls.dot(&table.rows.t()) * scale;
            Array2::from_shape_fn(logits.raw_dim(), |(j, k)| sigmoid(logits[[j, k]] + bias[k]))
        }
    };
    let box_cache = box_mlp(&q_d, &refs, p);
    let flat: Vec<f64> = scores.rows().into_iter().map(|r| r.sum()).collect();
    check_finite(&flat, &box_cache.boxes)?;
    Ok(HeadForward { classes, mode, layer, q_d, p_cls, box_cache, scores, seeded: qs.seeded, features: f.clone() })
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub head: HeadParams,
    pub embeddings: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Reverse pass. `d_scores` has the shape of [`HeadForward::scores`];
/// `d_boxes` holds one `(cx, cy, w, h)` gradient per query.
pub fn head_backward(
    fwd: &HeadForward,
    d_scores: &Array2<f64>,
    d_boxes: &[[f64; 4]],
    table: &EmbeddingTable,
    p: &HeadParams,
) -> Result<HeadGrads> {
    let n = fwd.q_d.nrows();
    if d_scores.shape() != fwd.scores.shape() || d_boxes.len() != n {
        return Err(Error::Shape("upstream gradients do not match the head output".into()));
    }
    let (d, k) = (p.d(), table.k());
    let scale = 1.0 / (d as f64).sqrt();
    let mut g = HeadParams::zeros(d, p.decoder.d_ff());
    let mut g_emb = Array2::<f64>::zeros((k, d));
    let mut g_bias = Array1::<f64>::zeros(k);

    let d_logits = d_scores * &fwd.scores.mapv(|s| s * (1.0 - s));
    let d_p_cls = match fwd.mode {
        Classification::Matchability => {
            let mut d_p_cls = Array2::zeros((n, d));
            for j in 0..n {
                let c = fwd.classes[j];
                let dl = d_logits[[j, 0]];
                g_bias[c] += dl;
                d_p_cls.row_mut(j).scaled_add(dl * scale, &table.rows.row(c));
                g_emb.row_mut(c).scaled_add(dl * scale, &fwd.p_cls.row(j));
            }
            d_p_cls
        }
        Classification::AllClasses => {
            g_bias += &sum_rows(&d_logits);
            g_emb += &(d_logits.t().dot(&fwd.p_cls) * scale);
            d_logits.dot(&table.rows) * scale
        }
    };
    g.cls_w = fwd.q_d.t().dot(&d_p_cls);
    g.cls_b = sum_rows(&d_p_cls);
    let mut d_q = d_p_cls.dot(&p.cls_w.t());

    let bc = &fwd.box_cache;
    let d_pre = Array2::from_shape_fn((n, 4), |(j, c)| {
        let b = bc.boxes[[j, c]];
        d_boxes[j][c] * b * (1.0 - b)
    });
    g.box_w3 = bc.h2.t().dot(&d_pre);
    g.box_b3 = sum_rows(&d_pre);
    let d_z2 = relu_backward(&d_pre.dot(&p.box_w3.t()), &bc.z2);
    g.box_w2 = bc.h1.t().dot(&d_z2);
    g.box_b2 = sum_rows(&d_z2);
    let d_z1 = relu_backward(&d_z2.dot(&p.box_w2.t()), &bc.z1);
    g.box_w1 = fwd.q_d.t().dot(&d_z1);
    g.box_b1 = sum_rows(&d_z1);
    d_q += &d_z1.dot(&p.box_w1.t());

    let d_x = layer_backward(&d_q, &fwd.layer, &fwd.features, &p.decoder, &mut g.decoder);
    g.base_content = sum_rows(&d_x);
    if fwd.seeded {
        for (j, row) in d_x.rows().into_iter().enumerate() {
            g_emb.row_mut(fwd.classes[j]).scaled_add(1.0, &row);
        }
    }
    Ok(HeadGrads { head: g, embeddings: g_emb, bias: g_bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn table(rng: &mut ChaCha8Rng, k: usize, d: usize) -> EmbeddingTable {
        EmbeddingTable::new(init_matrix(rng, k, d)).unwrap()
    }

    #[test]
    fn query_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = table(&mut rng, 5, 4);
        let refs = inference_references(3, 2);
        let qs = assign_queries(&[4, 0, 2], &t, &Array1::zeros(4), &refs, 2).unwrap();
        assert_eq!(qs.classes(), vec![4, 4, 0, 0, 2, 2]);
        for q in &qs.queries {
            assert_eq!(q.content, t.rows.row(q.class_id));
        }
        assert!(assign_queries(&[4, 0], &t, &Array1::zeros(4), &refs, 2).is_err());
    }

    #[test]
    fn grid_is_a_lattice() {
        let g = grid_references(4);
        let centers: Vec<(f64, f64)> = g.iter().map(|b| (b.cx, b.cy)).collect();
        assert_eq!(centers, vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]);
        assert!(g.iter().all(|b| b.validate().is_ok()));
        assert_eq!(grid_references(1)[0].cx, 0.5);
    }

    #[test]
    fn identity_decoder_adds_position_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = table(&mut rng, 3, 8);
        let mut p = HeadParams::init(&mut rng, 8, 16);
        p.decoder = ClassDecoderLayerParams::identity(8, 16);
        let qs = assign_queries(&[0, 2], &t, &Array1::zeros(8), &inference_references(2, 2), 2).unwrap();
        let f = Features::new(2, 2, init_matrix(&mut rng, 4, 8)).unwrap();
        let q_d = toy_decoder(&qs, &f, &p).unwrap();
        assert_eq!(q_d.shape(), &[4, 8]);
        assert_eq!(q_d, decoder_input(&qs));
    }

    #[test]
    fn zero_box_mlp_returns_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = HeadParams::init(&mut rng, 8, 16);
        p.box_w3.fill(0.0);
        let refs = vec![Bbox::new(0.3, 0.6, 0.2, 0.45).unwrap(), Bbox::new(0.9, 0.1, 0.05, 0.3).unwrap()];
        let q_d = init_matrix(&mut rng, 2, 8);
        let emb = init_matrix(&mut rng, 2, 8);
        let out = head_predict(&q_d, &emb, &refs, &p, &[0.0, 0.0]).unwrap();
        for (o, r) in out.iter().zip(&refs) {
            for (a, b) in o.bbox.to_array().iter().zip(r.to_array()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_class_mlp_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = HeadParams::init(&mut rng, 8, 16);
        p.cls_w.fill(0.0);
        let refs = inference_references(1, 3);
        let out =
            head_predict(&init_matrix(&mut rng, 3, 8), &init_matrix(&mut rng, 3, 8), &refs, &p, &[0.0; 3]).unwrap();
        assert!(out.iter().all(|o| o.score == 0.5));
    }

    #[test]
    fn non_finite_output_names_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = HeadParams::init(&mut rng, 4, 8);
        let mut q_d = init_matrix(&mut rng, 3, 4);
        q_d[[1, 2]] = f64::NAN;
        let err =
            head_predict(&q_d, &init_matrix(&mut rng, 3, 4), &inference_references(1, 3), &p, &[0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Numeric { query: 1, .. }));
    }
}
