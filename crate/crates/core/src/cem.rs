//! Category extraction: class-decoder layers that let every category
//! embedding attend over the image features, a dot-product scoring layer,
//! TopK category selection, and training under the asymmetric loss.
//!
//! A class-decoder layer is a transformer decoder block without
//! self-attention:
//!
//! ```text
//! a   = norm1(x + CrossAttn(x, F))
//! out = norm2(a + FFN(a)),    FFN(a) = ReLU(a W1 + b1) W2 + b2
//! ```
//!
//! with single-head attention `softmax((x Wq)(F Wk)ᵀ / √d)(F Wv) Wo` and
//! elementwise affine norms. Category scores are
//! `σ(⟨E2_i P, E_i⟩ / √d + b_i)` where `E2` is the output of the second
//! layer and `E_i` the original embedding row.
//!
//! Every forward has a cached variant whose cache feeds a hand-written
//! reverse pass.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labelspace::EmbeddingTable;
use crate::losses::{asymmetric_loss, clamp_prob, AslConfig};
use crate::nn::{
    add_row, init_matrix, mat_mut, mat_ref, relu, relu_backward, scale_rows, sigmoid, softmax_rows, sum_rows, vec_mut,
    vec_ref, Parameters, Sgd, TensorMut, TensorRef,
};

/// Number of class-decoder layers in the category extractor.
pub const NUM_CLASS_DECODER_LAYERS: usize = 2;
/// Diagonal added to attention query and key projections at init.
pub const ATTENTION_GAIN: f64 = 6.0;

/// Image features on an `h × w` grid, one `d`-vector per cell (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub h: usize,
    pub w: usize,
    pub data: Array2<f64>,
}

impl Features {
    pub fn new(h: usize, w: usize, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != h * w {
            return Err(Error::Shape(format!("{} feature rows for a {h}x{w} grid", data.nrows())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite feature entry".into()));
        }
        Ok(Features { h, w, data })
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDecoderLayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub norm1_scale: Array1<f64>,
    pub norm1_shift: Array1<f64>,
    pub norm2_scale: Array1<f64>,
    pub norm2_shift: Array1<f64>,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array1<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array1<f64>,
}

impl ClassDecoderLayerParams {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, d_ff: usize) -> Self {
        ClassDecoderLayerParams {
            wq: init_matrix(rng, d, d),
            wk: init_matrix(rng, d, d),
            wv: init_matrix(rng, d, d),
            wo: init_matrix(rng, d, d),
            norm1_scale: Array1::ones(d),
            norm1_shift: Array1::zeros(d),
            norm2_scale: Array1::ones(d),
            norm2_shift: Array1::zeros(d),
            ffn_w1: init_matrix(rng, d, d_ff),
            ffn_b1: Array1::zeros(d_ff),
            ffn_w2: init_matrix(rng, d_ff, d),
            ffn_b2: Array1::zeros(d),
        }
    }

    /// As [`init`](Self::init), with `gain · I` added to the query and key
    /// projections and `I` to the value and output projections, so that
    /// attention starts out as a dot-product match between rows and cells.
    pub fn init_matching(rng: &mut ChaCha8Rng, d: usize, d_ff: usize, gain: f64) -> Self {
        let mut p = Self::init(rng, d, d_ff);
        for i in 0..d {
            p.wq[[i, i]] += gain;
            p.wk[[i, i]] += gain;
            p.wv[[i, i]] += 1.0;
            p.wo[[i, i]] += 1.0;
        }
        p
    }

    /// All weights zero, identity norms: the layer passes its input through.
    pub fn identity(d: usize, d_ff: usize) -> Self {
        let mut p = Self::zeros(d, d_ff);
        p.norm1_scale.fill(1.0);
        p.norm2_scale.fill(1.0);
        p
    }

    pub fn zeros(d: usize, d_ff: usize) -> Self {
        ClassDecoderLayerParams {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            norm1_scale: Array1::zeros(d),
            norm1_shift: Array1::zeros(d),
            norm2_scale: Array1::zeros(d),
            norm2_shift: Array1::zeros(d),
            ffn_w1: Array2::zeros((d, d_ff)),
            ffn_b1: Array1::zeros(d_ff),
            ffn_w2: Array2::zeros((d_ff, d)),
            ffn_b2: Array1::zeros(d),
        }
    }

    pub fn d(&self) -> usize {
        self.wq.nrows()
    }

    pub fn d_ff(&self) -> usize {
        self.ffn_w1.ncols()
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str) -> Vec<TensorRef<'a>> {
        vec![
            mat_ref(format!("{prefix}.wq"), &self.wq),
            mat_ref(format!("{prefix}.wk"), &self.wk),
            mat_ref(format!("{prefix}.wv"), &self.wv),
            mat_ref(format!("{prefix}.wo"), &self.wo),
            vec_ref(format!("{prefix}.norm1.scale"), &self.norm1_scale),
            vec_ref(format!("{prefix}.norm1.shift"), &self.norm1_shift),
            vec_ref(format!("{prefix}.norm2.scale"), &self.norm2_scale),
            vec_ref(format!("{prefix}.norm2.shift"), &self.norm2_shift),
            mat_ref(format!("{prefix}.ffn.w1"), &self.ffn_w1),
            vec_ref(format!("{prefix}.ffn.b1"), &self.ffn_b1),
            mat_ref(format!("{prefix}.ffn.w2"), &self.ffn_w2),
            vec_ref(format!("{prefix}.ffn.b2"), &self.ffn_b2),
        ]
    }

    pub(crate) fn named_mut<'a>(&'a mut self, prefix: &str) -> Vec<TensorMut<'a>> {
        vec![
            mat_mut(format!("{prefix}.wq"), &mut self.wq),
            mat_mut(format!("{prefix}.wk"), &mut self.wk),
            mat_mut(format!("{prefix}.wv"), &mut self.wv),
            mat_mut(format!("{prefix}.wo"), &mut self.wo),
            vec_mut(format!("{prefix}.norm1.scale"), &mut self.norm1_scale),
            vec_mut(format!("{prefix}.norm1.shift"), &mut self.norm1_shift),
            vec_mut(format!("{prefix}.norm2.scale"), &mut self.norm2_scale),
            vec_mut(format!("{prefix}.norm2.shift"), &mut self.norm2_shift),
            mat_mut(format!("{prefix}.ffn.w1"), &mut self.ffn_w1),
            vec_mut(format!("{prefix}.ffn.b1"), &mut self.ffn_b1),
            mat_mut(format!("{prefix}.ffn.w2"), &mut self.ffn_w2),
            vec_mut(format!("{prefix}.ffn.b2"), &mut self.ffn_b2),
        ]
    }
}

impl Parameters for ClassDecoderLayerParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.named("layer")
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.named_mut("layer")
    }
}

fn check_layer_shapes(x: &Array2<f64>, f: &Features, p: &ClassDecoderLayerParams) -> Result<()> {
    let d = p.d();
    if x.ncols() != d || f.d() != d {
        return Err(Error::Shape(format!(
            "layer width {d}, attending rows have {}, features have {}",
            x.ncols(),
            f.d()
        )));
    }
    if p.wk.shape() != [d, d] || p.wv.shape() != [d, d] || p.wo.shape() != [d, d] {
        return Err(Error::Shape("attention projections must be d x d".into()));
    }
    if p.ffn_w1.nrows() != d || p.ffn_w2.shape() != [p.d_ff(), d] {
        return Err(Error::Shape("feed-forward shapes disagree".into()));
    }
    Ok(())
}

/// Single-head cross-attention of the rows of `x` over the feature cells.
/// Returns the projected output and the attention weights (`rows × HW`).
pub fn cross_attention(
    x: &Array2<f64>,
    f: &Features,
    p: &ClassDecoderLayerParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_layer_shapes(x, f, p)?;
    let (out, cache) = attention_forward(x, f, p);
    Ok((out, cache.attn))
}

#[derive(Debug, Clone)]
struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    heads: Array2<f64>,
}

fn attention_forward(x: &Array2<f64>, f: &Features, p: &ClassDecoderLayerParams) -> (Array2<f64>, AttentionCache) {
    let scale = 1.0 / (p.d() as f64).sqrt();
    let q = x.dot(&p.wq);
    let k = f.data.dot(&p.wk);
    let v = f.data.dot(&p.wv);
    let attn = softmax_rows(&(q.dot(&k.t()) * scale));
    let heads = attn.dot(&v);
    let out = heads.dot(&p.wo);
    (out, AttentionCache { q, k, v, attn, heads })
}

/// Intermediate values of one class-decoder layer forward.
#[derive(Debug, Clone)]
pub struct LayerCache {
    x: Array2<f64>,
    att: AttentionCache,
    r1: Array2<f64>,
    a: Array2<f64>,
    z: Array2<f64>,
    hidden: Array2<f64>,
    r2: Array2<f64>,
}

impl LayerCache {
    pub fn attention_weights(&self) -> &Array2<f64> {
        &self.att.attn
    }
}

pub fn class_decoder_layer(x: &Array2<f64>, f: &Features, p: &ClassDecoderLayerParams) -> Result<Array2<f64>> {
    Ok(layer_forward(x, f, p)?.0)
}

pub fn layer_forward(x: &Array2<f64>, f: &Features, p: &ClassDecoderLayerParams) -> Result<(Array2<f64>, LayerCache)> {
    check_layer_shapes(x, f, p)?;
    let (o, att) = attention_forward(x, f, p);
    let r1 = x + &o;
    let a = add_row(&scale_rows(&r1, &p.norm1_scale), &p.norm1_shift);
    let z = add_row(&a.dot(&p.ffn_w1), &p.ffn_b1);
    let hidden = relu(&z);
    let ffn = add_row(&hidden.dot(&p.ffn_w2), &p.ffn_b2);
    let r2 = &a + &ffn;
    let out = add_row(&scale_rows(&r2, &p.norm2_scale), &p.norm2_shift);
    Ok((out, LayerCache { x: x.clone(), att, r1, a, z, hidden, r2 }))
}

/// Reverse pass of one layer: accumulates parameter gradients into `grads`
/// and returns the gradient with respect to the attending rows `x`.
pub fn layer_backward(
    d_out: &Array2<f64>,
    cache: &LayerCache,
    f: &Features,
    p: &ClassDecoderLayerParams,
    grads: &mut ClassDecoderLayerParams,
) -> Array2<f64> {
    let scale = 1.0 / (p.d() as f64).sqrt();

    grads.norm2_scale += &sum_rows(&(d_out * &cache.r2));
    grads.norm2_shift += &sum_rows(d_out);
    let d_r2 = scale_rows(d_out, &p.norm2_scale);

    grads.ffn_w2 += &cache.hidden.t().dot(&d_r2);
    grads.ffn_b2 += &sum_rows(&d_r2);
    let d_z = relu_backward(&d_r2.dot(&p.ffn_w2.t()), &cache.z);
    grads.ffn_w1 += &cache.a.t().dot(&d_z);
    grads.ffn_b1 += &sum_rows(&d_z);
    let d_a = &d_r2 + &d_z.dot(&p.ffn_w1.t());

    grads.norm1_scale += &sum_rows(&(&d_a * &cache.r1));
    grads.norm1_shift += &sum_rows(&d_a);
    let d_r1 = scale_rows(&d_a, &p.norm1_scale);

    let att = &cache.att;
    grads.wo += &att.heads.t().dot(&d_r1);
    let d_heads = d_r1.dot(&p.wo.t());
    let d_attn = d_heads.dot(&att.v.t());
    let d_v = att.attn.t().dot(&d_heads);
    let row_dot = (&d_attn * &att.attn).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_logits = &att.attn * &(&d_attn - &row_dot) * scale;
    let d_q = d_logits.dot(&att.k);
    let d_k = d_logits.t().dot(&att.q);

    grads.wq += &cache.x.t().dot(&d_q);
    grads.wk += &f.data.t().dot(&d_k);
    grads.wv += &f.data.t().dot(&d_v);

    d_r1 + d_q.dot(&p.wq.t())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemParams {
    pub layers: Vec<ClassDecoderLayerParams>,
    pub score_proj: Array2<f64>,
    pub bias: Array1<f64>,
}

impl CemParams {
    pub fn init(rng: &mut ChaCha8Rng, k: usize, d: usize, d_ff: usize) -> Self {
        let layers = (0..NUM_CLASS_DECODER_LAYERS)
            .map(|_| ClassDecoderLayerParams::init_matching(rng, d, d_ff, ATTENTION_GAIN))
            .collect();
        CemParams { layers, score_proj: init_matrix(rng, d, d), bias: Array1::zeros(k) }
    }

    pub fn zeros(k: usize, d: usize, d_ff: usize) -> Self {
        CemParams {
            layers: (0..NUM_CLASS_DECODER_LAYERS).map(|_| ClassDecoderLayerParams::zeros(d, d_ff)).collect(),
            score_proj: Array2::zeros((d, d)),
            bias: Array1::zeros(k),
        }
    }

    pub fn k(&self) -> usize {
        self.bias.len()
    }

    pub fn d(&self) -> usize {
        self.score_proj.nrows()
    }

    pub fn d_ff(&self) -> usize {
        self.layers[0].d_ff()
    }

    fn check(&self, table: &EmbeddingTable, f: &Features) -> Result<()> {
        if self.layers.len() != NUM_CLASS_DECODER_LAYERS {
            return Err(Error::Shape(format!(
                "expected {NUM_CLASS_DECODER_LAYERS} class-decoder layers, found {}",
                self.layers.len()
            )));
        }
        if table.k() != self.k() || table.d() != self.d() || f.d() != self.d() {
            return Err(Error::Shape(format!(
                "embeddings {}x{}, features width {}, extractor expects {}x{}",
                table.k(),
                table.d(),
                f.d(),
                self.k(),
                self.d()
            )));
        }
        Ok(())
    }
}

impl Parameters for CemParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named(&format!("cem.layer{i}")));
        }
        out.push(mat_ref("cem.score_proj", &self.score_proj));
        out.push(vec_ref("cem.bias", &self.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut(&format!("cem.layer{i}")));
        }
        out.push(mat_mut("cem.score_proj", &mut self.score_proj));
        out.push(vec_mut("cem.bias", &mut self.bias));
        out
    }
}

/// Per-category presence probabilities, each in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryScores(pub Vec<f64>);

impl CategoryScores {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Everything the reverse pass needs from one forward.
#[derive(Debug, Clone)]
pub struct CemCache {
    embeddings: Array2<f64>,
    features: Features,
    layer1: LayerCache,
    layer2: LayerCache,
    e2: Array2<f64>,
    projected: Array2<f64>,
    pub scores: CategoryScores,
    learnable: bool,
    params_fingerprint: [u8; 32],
}

impl CemCache {
    pub fn refined_embeddings(&self) -> &Array2<f64> {
        &self.e2
    }

    pub fn attention_weights(&self) -> [&Array2<f64>; 2] {
        [self.layer1.attention_weights(), self.layer2.attention_weights()]
    }
}

pub fn cem_forward(table: &EmbeddingTable, f: &Features, params: &CemParams) -> Result<(CategoryScores, Array2<f64>)> {
    let cache = cem_forward_cached(table, f, params)?;
    Ok((cache.scores, cache.e2))
}

pub fn cem_forward_cached(table: &EmbeddingTable, f: &Features, params: &CemParams) -> Result<CemCache> {
    params.check(table, f)?;
    let e = &table.rows;
    let (e1, layer1) = layer_forward(e, f, &params.layers[0])?;
    let (e2, layer2) = layer_forward(&e1, f, &params.layers[1])?;
    let projected = e2.dot(&params.score_proj);
    let scale = 1.0 / (params.d() as f64).sqrt();
    let logits = (&projected * e).sum_axis(Axis(1)) * scale + &params.bias;
    let scores = CategoryScores(logits.iter().map(|&z| sigmoid(z)).collect());
    Ok(CemCache {
        embeddings: e.clone(),
        features: f.clone(),
        layer1,
        layer2,
        e2,
        projected,
        scores,
        learnable: table.learnable,
        params_fingerprint: params.fingerprint(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemGrads {
    pub params: CemParams,
    /// Present only when the embedding table is learnable.
    pub embeddings: Option<Array2<f64>>,
}

/// Reverse pass from `d loss / d scores` to every parameter.
pub fn cem_backward(d_scores: &[f64], cache: &CemCache, params: &CemParams) -> Result<CemGrads> {
    if params.fingerprint() != cache.params_fingerprint {
        return Err(Error::StaleCache("extractor parameters changed since the forward pass".into()));
    }
    let (k, d) = (params.k(), params.d());
    if d_scores.len() != k {
        return Err(Error::Shape(format!("{} score gradients for {k} categories", d_scores.len())));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut grads = CemParams::zeros(k, d, params.d_ff());

    let d_logits = Array1::from_shape_fn(k, |i| {
        let s = cache.scores.0[i];
        d_scores[i] * s * (1.0 - s)
    });
    grads.bias.assign(&d_logits);
    let d_logit_col = d_logits.view().insert_axis(Axis(1));
    let d_projected = &cache.embeddings * &d_logit_col * scale;
    let d_e_direct = &cache.projected * &d_logit_col * scale;
    grads.score_proj = cache.e2.t().dot(&d_projected);
    let d_e2 = d_projected.dot(&params.score_proj.t());

    let f = &cache.features;
    let d_e1 = layer_backward(&d_e2, &cache.layer2, f, &params.layers[1], &mut grads.layers[1]);
    let d_e = layer_backward(&d_e1, &cache.layer1, f, &params.layers[0], &mut grads.layers[0]);

    let embeddings = cache.learnable.then(|| d_e + d_e_direct);
    Ok(CemGrads { params: grads, embeddings })
}

/// The `min(top_k, K)` highest-scoring ids, by descending score then ascending id.
pub fn topk_select(scores: &[f64], top_k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(top_k);
    ids
}

/// Category set for a training image: every ground-truth class first
/// (ascending id), then the best-scoring other categories up to `top_k`.
pub fn training_category_set(gt_classes: &BTreeSet<usize>, scores: &[f64], top_k: usize) -> Result<Vec<usize>> {
    training_category_set_within(gt_classes, scores, top_k, None)
}

/// As [`training_category_set`], filling only from categories where
/// `allowed` is true.
pub fn training_category_set_within(
    gt_classes: &BTreeSet<usize>,
    scores: &[f64],
    top_k: usize,
    allowed: Option<&[bool]>,
) -> Result<Vec<usize>> {
    if gt_classes.len() > top_k {
        return Err(Error::Config(format!(
            "{} ground-truth classes exceed top_k = {top_k}; increase top_k",
            gt_classes.len()
        )));
    }
    if let Some(&bad) = gt_classes.iter().find(|&&c| c >= scores.len()) {
        return Err(Error::Index { index: bad, len: scores.len() });
    }
    let mut out: Vec<usize> = gt_classes.iter().copied().collect();
    let mut rest: Vec<usize> =
        (0..scores.len()).filter(|c| !gt_classes.contains(c) && allowed.is_none_or(|m| m[*c])).collect();
    rest.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    out.extend(rest.into_iter().take(top_k - gt_classes.len()));
    Ok(out)
}

/// Momentum state for extractor-only training.
#[derive(Debug, Clone)]
pub struct CemTrainer {
    pub params_opt: Sgd,
    pub embeddings_opt: Sgd,
}

impl Default for CemTrainer {
    fn default() -> Self {
        CemTrainer { params_opt: Sgd::new(0.9), embeddings_opt: Sgd::new(0.9) }
    }
}

/// One SGD-with-momentum step on the batch-mean asymmetric loss.
/// Returns the mean loss before the update.
pub fn cem_train_step(
    batch: &[(Features, Vec<bool>)],
    params: &mut CemParams,
    table: &mut EmbeddingTable,
    trainer: &mut CemTrainer,
    cfg: &AslConfig,
    mu_asl: f64,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let (k, d) = (params.k(), params.d());
    let mut total = CemParams::zeros(k, d, params.d_ff());
    let mut total_e = Array2::<f64>::zeros((k, d));
    let mut loss = 0.0;
    for (f, targets) in batch {
        if targets.len() != k {
            return Err(Error::Shape(format!("{} targets for {k} categories", targets.len())));
        }
        let cache = cem_forward_cached(table, f, params)?;
        let scores: Vec<f64> = cache.scores.0.iter().map(|&s| clamp_prob(s)).collect();
        let asl = asymmetric_loss(&scores, targets, cfg, mu_asl)?;
        loss += asl.value;
        let g = cem_backward(&asl.grad, &cache, params)?;
        accumulate(&mut total, &g.params, 1.0);
        if let Some(ge) = g.embeddings {
            total_e += &ge;
        }
    }
    let n = batch.len() as f64;
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite asymmetric loss {loss}")));
    }
    scale_params(&mut total, 1.0 / n);
    trainer.params_opt.step(&mut params.tensors_mut(), &total.tensors(), lr);
    if table.learnable {
        total_e /= n;
        let slice = total_e.as_slice().expect("standard layout");
        let grad = [TensorRef { name: "embeddings".into(), shape: vec![k, d], data: slice }];
        let rows = table.rows.as_slice_mut().expect("standard layout");
        trainer.embeddings_opt.step(&mut [TensorMut { name: "embeddings".into(), data: rows }], &grad, lr);
    }
    Ok(loss)
}

/// `acc += factor · g`, tensor by tensor.
pub fn accumulate<P: Parameters>(acc: &mut P, g: &P, factor: f64) {
    let src = g.tensors();
    for (dst, s) in acc.tensors_mut().into_iter().zip(src) {
        for (a, b) in dst.data.iter_mut().zip(s.data) {
            *a += factor * b;
        }
    }
}

pub fn scale_params<P: Parameters>(p: &mut P, factor: f64) {
    for t in p.tensors_mut() {
        for v in t.data.iter_mut() {
            *v *= factor;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_features(rng: &mut ChaCha8Rng, hw: usize, d: usize) -> Features {
        Features::new(1, hw, init_matrix(rng, hw, d) * 3.0).unwrap()
    }

    #[test]
    fn single_cell_attention_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ClassDecoderLayerParams::init(&mut rng, 6, 12);
        let f = random_features(&mut rng, 1, 6);
        let x = init_matrix(&mut rng, 4, 6);
        let (out, w) = cross_attention(&x, &f, &p).unwrap();
        let expect = f.data.dot(&p.wv).dot(&p.wo);
        for row in out.rows() {
            for (a, b) in row.iter().zip(expect.row(0)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn uniform_features_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ClassDecoderLayerParams::init(&mut rng, 6, 12);
        let row = init_matrix(&mut rng, 1, 6);
        let f = Features::new(3, 3, Array2::from_shape_fn((9, 6), |(_, j)| row[[0, j]])).unwrap();
        let x = init_matrix(&mut rng, 5, 6);
        let (_, w) = cross_attention(&x, &f, &p).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ClassDecoderLayerParams::identity(6, 12);
        let f = random_features(&mut rng, 4, 6);
        let x = init_matrix(&mut rng, 3, 6);
        assert_eq!(class_decoder_layer(&x, &f, &p).unwrap(), x);
    }

    #[test]
    fn layer_rejects_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ClassDecoderLayerParams::init(&mut rng, 6, 12);
        let f = random_features(&mut rng, 4, 5);
        let x = init_matrix(&mut rng, 3, 6);
        assert!(matches!(class_decoder_layer(&x, &f, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_scoring_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = CemParams::init(&mut rng, 5, 8, 16);
        params.score_proj.fill(0.0);
        let table = EmbeddingTable::new(init_matrix(&mut rng, 5, 8)).unwrap();
        let f = random_features(&mut rng, 9, 8);
        let (s, e2) = cem_forward(&table, &f, &params).unwrap();
        assert!(s.0.iter().all(|&v| v == 0.5));
        assert_eq!(e2.shape(), &[5, 8]);
    }

    #[test]
    fn bias_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = CemParams::init(&mut rng, 4, 8, 16);
        let table = EmbeddingTable::new(init_matrix(&mut rng, 4, 8)).unwrap();
        let f = random_features(&mut rng, 9, 8);
        let (before, _) = cem_forward(&table, &f, &params).unwrap();
        params.bias[2] += 0.3;
        let (after, _) = cem_forward(&table, &f, &params).unwrap();
        assert!(after.0[2] > before.0[2]);
        for i in [0, 1, 3] {
            assert_eq!(after.0[i], before.0[i]);
        }
    }

    #[test]
    fn topk_fixtures() {
        assert_eq!(topk_select(&[0.9, 0.1, 0.8], 2), vec![0, 2]);
        assert_eq!(topk_select(&[0.9, 0.1, 0.8], 5), vec![0, 2, 1]);
        assert_eq!(topk_select(&[0.5, 0.5, 0.5, 0.7], 3), vec![3, 0, 1]);
    }

    #[test]
    fn training_set_puts_ground_truth_first() {
        let s = [0.1, 0.9, 0.3, 0.05, 0.8];
        let gt: BTreeSet<usize> = [3].into();
        assert_eq!(training_category_set(&gt, &s, 3).unwrap(), vec![3, 1, 4]);
        let gt: BTreeSet<usize> = [0, 2, 3].into();
        assert_eq!(training_category_set(&gt, &s, 3).unwrap(), vec![0, 2, 3]);
        let gt: BTreeSet<usize> = [0, 1, 2, 3].into();
        assert!(matches!(training_category_set(&gt, &s, 3), Err(Error::Config(_))));
        let allowed = [true, false, true, true, true];
        let gt: BTreeSet<usize> = [3].into();
        assert_eq!(training_category_set_within(&gt, &s, 3, Some(&allowed)).unwrap(), vec![3, 4, 2]);
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = CemParams::init(&mut rng, 3, 6, 12);
        let table = EmbeddingTable::new(init_matrix(&mut rng, 3, 6)).unwrap();
        let f = random_features(&mut rng, 4, 6);
        let cache = cem_forward_cached(&table, &f, &params).unwrap();
        let g = cem_backward(&[0.0; 3], &cache, &params).unwrap();
        assert!(g.params.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        assert!(g.embeddings.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_logit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = CemParams::init(&mut rng, 3, 6, 12);
        let table = EmbeddingTable::new(init_matrix(&mut rng, 3, 6)).unwrap();
        let f = random_features(&mut rng, 4, 6);
        let cache = cem_forward_cached(&table, &f, &params).unwrap();
        let up = [0.3, -1.2, 0.7];
        let g = cem_backward(&up, &cache, &params).unwrap();
        for (i, (&s, u)) in cache.scores.0.iter().zip(up).enumerate() {
            assert_eq!(g.params.bias[i], u * s * (1.0 - s));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = CemParams::init(&mut rng, 3, 6, 12);
        let table = EmbeddingTable::new(init_matrix(&mut rng, 3, 6)).unwrap();
        let f = random_features(&mut rng, 4, 6);
        let cache = cem_forward_cached(&table, &f, &params).unwrap();
        params.bias[0] = 1.0;
        assert!(matches!(cem_backward(&[1.0; 3], &cache, &params), Err(Error::StaleCache(_))));
    }

    #[test]
    fn frozen_embeddings_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = CemParams::init(&mut rng, 3, 6, 12);
        let mut table = EmbeddingTable::new(init_matrix(&mut rng, 3, 6)).unwrap();
        table.learnable = false;
        let f = random_features(&mut rng, 4, 6);
        let cache = cem_forward_cached(&table, &f, &params).unwrap();
        assert!(cem_backward(&[1.0; 3], &cache, &params).unwrap().embeddings.is_none());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = CemParams::init(&mut rng, 3, 6, 12);
        let mut table = EmbeddingTable::new(init_matrix(&mut rng, 3, 6)).unwrap();
        let before = (params.clone(), table.clone());
        let batch = vec![(random_features(&mut rng, 4, 6), vec![true, false, false])];
        let mut trainer = CemTrainer::default();
        cem_train_step(&batch, &mut params, &mut table, &mut trainer, &AslConfig::default(), 1.0, 0.0).unwrap();
        assert_eq!(params, before.0);
        assert_eq!(table, before.1);
    }
}
