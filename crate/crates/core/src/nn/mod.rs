//! Minimal dense layers with hand-written backward passes.
//!
//! Every layer keeps its parameters in ndarray arrays and implements
//! [`Parameters`], so the same struct doubles as its own gradient buffer:
//! `layer.zeros_like()` yields an accumulator with identical names and shapes.

mod adam;
mod attention;
mod linear;
mod lstm;
mod norm;

pub use adam::Adam;
pub use attention::{EncoderLayer, EncoderLayerCache, MultiHeadAttention};
pub use linear::Linear;
pub use lstm::{Lstm, LstmCache};
pub use norm::{LayerNorm, LayerNormCache};

use ndarray::{Array, Array1, Array2, ArrayViewD, ArrayViewMutD, Dimension, Zip};
use rand::distr::{Distribution, Uniform};
use rand::Rng;

pub type NamedView<'a> = (String, ArrayViewD<'a, f32>);
pub type NamedViewMut<'a> = (String, ArrayViewMutD<'a, f32>);

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named access to a module's trainable tensors, in a fixed order.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>);

    fn named_params(&self) -> Vec<NamedView<'_>> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<NamedViewMut<'_>> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn fill(&mut self, value: f32) {
        for (_, mut p) in self.named_params_mut() {
            p.fill(value);
        }
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self) {
        let src = other.named_params();
        for ((_, mut dst), (_, s)) in self.named_params_mut().into_iter().zip(src) {
            dst += &s;
        }
    }

    fn scale(&mut self, factor: f32) {
        for (_, mut p) in self.named_params_mut() {
            p.mapv_inplace(|v| v * factor);
        }
    }

    fn squared_norm(&self) -> f64 {
        self.named_params()
            .iter()
            .map(|(_, p)| p.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.named_params()
            .iter()
            .all(|(_, p)| p.iter().all(|v| v.is_finite()))
    }

    fn num_scalars(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub fn uniform<R, D, Sh>(rng: &mut R, shape: Sh, bound: f32) -> Array<f32, D>
where
    R: Rng + ?Sized,
    D: Dimension,
    Sh: ndarray::ShapeBuilder<Dim = D>,
{
    if bound == 0.0 {
        return Array::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array::from_shape_simple_fn(shape, || dist.sample(rng))
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f32>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Inverted dropout mask: entries are 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), p: f32) -> Array2<f32> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f32>() < p { 0.0 } else { keep })
}

/// Mean over rows of each contiguous segment `offsets[i]..offsets[i+1]`.
pub fn segment_mean(x: &Array2<f32>, offsets: &[usize]) -> Array2<f32> {
    let mut out = Array2::zeros((offsets.len() - 1, x.ncols()));
    for (i, w) in offsets.windows(2).enumerate() {
        let seg = x.slice(ndarray::s![w[0]..w[1], ..]);
        out.row_mut(i).assign(&seg.mean_axis(ndarray::Axis(0)).expect("non-empty segment"));
    }
    out
}

pub fn segment_mean_backward(d_out: &Array2<f32>, offsets: &[usize]) -> Array2<f32> {
    let n = *offsets.last().unwrap_or(&0);
    let mut dx = Array2::zeros((n, d_out.ncols()));
    for (i, w) in offsets.windows(2).enumerate() {
        let inv = 1.0 / (w[1] - w[0]) as f32;
        let g = d_out.row(i).mapv(|v| v * inv);
        for r in w[0]..w[1] {
            dx.row_mut(r).assign(&g);
        }
    }
    dx
}

/// Convex blend `w·a + (1-w)·b` with `w = sigmoid(raw)`, and its backward.
pub struct Blend;

impl Blend {
    pub fn forward(raw: f32, a: &Array2<f32>, b: &Array2<f32>) -> Array2<f32> {
        let w = sigmoid(raw);
        let mut out = a * w;
        out.scaled_add(1.0 - w, b);
        out
    }

    /// Returns `(d_a, d_b, d_raw)`.
    pub fn backward(
        raw: f32,
        a: &Array2<f32>,
        b: &Array2<f32>,
        d_out: &Array2<f32>,
    ) -> (Array2<f32>, Array2<f32>, f32) {
        let w = sigmoid(raw);
        let mut d_w = 0.0f64;
        Zip::from(d_out).and(a).and(b).for_each(|&g, &x, &y| {
            d_w += (g * (x - y)) as f64;
        });
        (d_out * w, d_out * (1.0 - w), (d_w as f32) * w * (1.0 - w))
    }
}

/// Two-layer perceptron head: `tanh(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub hidden: Linear,
    pub output: Linear,
}

pub struct MlpCache {
    input: Array2<f32>,
    hidden: Array2<f32>,
}

impl MlpHead {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Linear::new(rng, input, hidden),
            output: Linear::new(rng, hidden, output),
        }
    }

    pub fn infer(&self, x: &Array2<f32>) -> Array2<f32> {
        let h = self.hidden.forward(x).mapv(f32::tanh);
        self.output.forward(&h)
    }

    pub fn forward(&self, x: Array2<f32>) -> (Array2<f32>, MlpCache) {
        let h = self.hidden.forward(&x).mapv(f32::tanh);
        let y = self.output.forward(&h);
        (y, MlpCache { input: x, hidden: h })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f32>, grad: &mut MlpHead) -> Array2<f32> {
        let mut dh = self.output.backward(&cache.hidden, dy, &mut grad.output);
        Zip::from(&mut dh)
            .and(&cache.hidden)
            .for_each(|g, &h| *g *= 1.0 - h * h);
        self.hidden.backward(&cache.input, &dh, &mut grad.hidden)
    }
}

impl Parameters for MlpHead {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.hidden.visit(&join(prefix, "hidden"), out);
        self.output.visit(&join(prefix, "output"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.hidden.visit_mut(&join(prefix, "hidden"), out);
        self.output.visit_mut(&join(prefix, "output"), out);
    }
}

/// A single trainable scalar, stored as a length-1 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalar(pub Array1<f32>);

impl Scalar {
    pub fn new(v: f32) -> Self {
        Scalar(Array1::from_elem(1, v))
    }

    pub fn get(&self) -> f32 {
        self.0[0]
    }

    pub fn add(&mut self, v: f32) {
        self.0[0] += v;
    }
}

impl Parameters for Scalar {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        out.push((prefix.to_string(), self.0.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        out.push((prefix.to_string(), self.0.view_mut().into_dyn()));
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences over a scalar objective, used by layer tests.
    use super::Parameters;

    /// Compares analytic gradients against central differences on up to
    /// `per_tensor` coordinates of every parameter tensor.
    pub fn check_params<M, F>(model: &M, analytic: &M, per_tensor: usize, eps: f32, tol: f64, loss: F)
    where
        M: Parameters + Clone,
        F: Fn(&M) -> f64,
    {
        let names: Vec<(String, usize)> = model
            .named_params()
            .iter()
            .map(|(n, p)| (n.clone(), p.len()))
            .collect();
        let grads: Vec<Vec<f32>> = analytic
            .named_params()
            .iter()
            .map(|(_, p)| p.iter().copied().collect())
            .collect();
        for (t, (name, len)) in names.iter().enumerate() {
            let stride = (len / per_tensor).max(1);
            for idx in (0..*len).step_by(stride).take(per_tensor) {
                let bumped = |delta: f32| {
                    let mut m = model.clone();
                    {
                        let mut ps = m.named_params_mut();
                        let p = &mut ps[t].1;
                        let slot = p.iter_mut().nth(idx).unwrap();
                        *slot += delta;
                    }
                    loss(&m)
                };
                let numeric = (bumped(eps) - bumped(-eps)) / (2.0 * eps as f64);
                let exact = grads[t][idx] as f64;
                let err = (numeric - exact).abs();
                let scale = numeric.abs().max(exact.abs()).max(1e-2);
                assert!(
                    err / scale < tol,
                    "{name}[{idx}]: analytic {exact:.6e} vs numeric {numeric:.6e}"
                );
            }
        }
    }
}
