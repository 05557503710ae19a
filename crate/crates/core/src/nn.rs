//! Small dense-network helpers shared by the category extractor and the head.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Named flat view of one parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

/// A bag of named tensors with a fixed, documented visiting order.
pub trait Parameters {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Digest over the exact bit patterns of every tensor.
    fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for t in self.tensors() {
            hasher.update(t.name.as_bytes());
            for v in t.data {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

pub(crate) fn mat_ref<'a>(name: impl Into<String>, m: &'a Array2<f64>) -> TensorRef<'a> {
    TensorRef {
        name: name.into(),
        shape: m.shape().to_vec(),
        data: m.as_slice().expect("parameters are stored in standard layout"),
    }
}

pub(crate) fn vec_ref<'a>(name: impl Into<String>, v: &'a Array1<f64>) -> TensorRef<'a> {
    TensorRef {
        name: name.into(),
        shape: vec![v.len()],
        data: v.as_slice().expect("parameters are stored in standard layout"),
    }
}

pub(crate) fn mat_mut<'a>(name: impl Into<String>, m: &'a mut Array2<f64>) -> TensorMut<'a> {
    TensorMut { name: name.into(), data: m.as_slice_mut().expect("parameters are stored in standard layout") }
}

pub(crate) fn vec_mut<'a>(name: impl Into<String>, v: &'a mut Array1<f64>) -> TensorMut<'a> {
    TensorMut { name: name.into(), data: v.as_slice_mut().expect("parameters are stored in standard layout") }
}

/// Uniform `(-1/√fan_in, 1/√fan_in)` initialization.
pub fn init_matrix(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid with its argument clamped to `[1e-5, 1 - 1e-5]`.
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-5, 1.0 - 1e-5);
    (p / (1.0 - p)).ln()
}

pub fn relu(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|v| v.max(0.0))
}

/// Zeroes `grad` wherever the pre-activation was not positive.
pub fn relu_backward(grad: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    out.zip_mut_with(pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Adds a bias vector to every row.
pub fn add_row(m: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    m + &b.view().insert_axis(Axis(0))
}

pub fn sum_rows(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}

pub fn scale_rows(m: &Array2<f64>, s: &Array1<f64>) -> Array2<f64> {
    m * &s.view().insert_axis(Axis(0))
}

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

/// Fixed sinusoidal encoding of a point in the unit square.
///
/// Dimension `k` encodes axis `(k / 2) % 2` at frequency `π (k / 4 + 1)`,
/// sine on even `k`, cosine on odd `k`; the vector is scaled to unit norm
/// when `d` is a multiple of 4.
pub fn position_encoding(x: f64, y: f64, d: usize) -> Array1<f64> {
    let scale = (2.0 / d as f64).sqrt();
    Array1::from_shape_fn(d, |k| {
        let coord = if (k / 2) % 2 == 0 { x } else { y };
        let freq = std::f64::consts::PI * ((k / 4) as f64 + 1.0);
        let arg = freq * coord;
        scale * if k % 2 == 0 { arg.sin() } else { arg.cos() }
    })
}

/// Stochastic gradient descent with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, velocity: Vec::new() }
    }

    /// `v ← μ v + g`, `θ ← θ − lr · v`, tensor by tensor in visiting order.
    pub fn step(&mut self, params: &mut [TensorMut<'_>], grads: &[TensorRef<'_>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter / gradient tensor count");
        if self.velocity.len() != params.len() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.data.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.data.len(), g.data.len(), "tensor {} size", p.name);
            for ((pi, gi), vi) in p.data.iter_mut().zip(g.data).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}
