//! Temporal-aware self-attention encoder.
//!
//! Visit times enter through a sinusoidal encoding with learnable frequencies
//! `w_q`: coordinate `2q` holds `sin(w_q t)` and `2q+1` holds `cos(w_q t)`, so
//! `PE(t)·PE(t+Δ) = Σ_q cos(w_q Δ)` depends only on the time difference. The
//! encoding is added to the token embeddings, a stack of post-norm encoder
//! layers runs over each sequence, and the final tokens are mean-pooled.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddedTrajectory;
use crate::error::{Result, TulError};
use crate::nn::{
    join, segment_mean, segment_mean_backward, sigmoid, Blend, EncoderLayer, EncoderLayerCache,
    MlpCache, MlpHead, NamedView, NamedViewMut, Parameters, Scalar,
};
use crate::recurrent::UserLogits;

/// Position signal fed to the attention encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionKind {
    /// Learnable frequencies over visit times.
    Temporal,
    /// Fixed sinusoids over token indices.
    Sinusoidal,
}

impl fmt::Display for PositionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionKind::Temporal => "temporal",
            PositionKind::Sinusoidal => "sinusoidal",
        })
    }
}

impl FromStr for PositionKind {
    type Err = TulError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(PositionKind::Temporal),
            "sinusoidal" => Ok(PositionKind::Sinusoidal),
            other => Err(TulError::Config(format!(
                "unknown position encoding {other:?} (expected temporal or sinusoidal)"
            ))),
        }
    }
}

/// Classic spacing `1 / 10000^(2q/d)` for `q < d/2`.
pub fn default_frequencies(dim: usize) -> Vec<f64> {
    (0..dim / 2)
        .map(|q| 1.0 / 10000f64.powf(2.0 * q as f64 / dim as f64))
        .collect()
}

/// `(m × 2·freqs.len())` encoding of `times`.
pub fn temporal_pe(times: &[f64], freqs: &[f64]) -> Array2<f64> {
    let mut pe = Array2::zeros((times.len(), 2 * freqs.len()));
    for (j, &t) in times.iter().enumerate() {
        for (q, &w) in freqs.iter().enumerate() {
            let (sin, cos) = (w * t).sin_cos();
            pe[[j, 2 * q]] = sin;
            pe[[j, 2 * q + 1]] = cos;
        }
    }
    pe
}

/// Learnable frequency vector of the temporal encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalPe {
    pub freqs: Array1<f32>,
}

impl TemporalPe {
    pub fn new(dim: usize) -> Self {
        Self {
            freqs: default_frequencies(dim).into_iter().map(|w| w as f32).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn encode(&self, times: &[f32]) -> Array2<f32> {
        let t: Vec<f64> = times.iter().map(|&v| v as f64).collect();
        let w: Vec<f64> = self.freqs.iter().map(|&v| v as f64).collect();
        temporal_pe(&t, &w).mapv(|v| v as f32)
    }

    /// Accumulates `dL/dw` given `dL/dPE`.
    pub fn backward(&self, times: &[f32], d_pe: &Array2<f32>, grad: &mut TemporalPe) {
        for (q, (&w, g)) in self.freqs.iter().zip(grad.freqs.iter_mut()).enumerate() {
            let mut acc = 0.0f64;
            for (j, &t) in times.iter().enumerate() {
                let (t, w) = (t as f64, w as f64);
                let (sin, cos) = (w * t).sin_cos();
                acc += d_pe[[j, 2 * q]] as f64 * t * cos - d_pe[[j, 2 * q + 1]] as f64 * t * sin;
            }
            *g += acc as f32;
        }
    }
}

impl Parameters for TemporalPe {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        out.push((join(prefix, "freqs"), self.freqs.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        out.push((join(prefix, "freqs"), self.freqs.view_mut().into_dyn()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionEncoder {
    pub pe: TemporalPe,
    pub layers: Vec<EncoderLayer>,
    pub beta: Scalar,
    pub head: MlpHead,
    pub position: PositionKind,
    pub dropout: f32,
}

pub struct AttentionCache {
    layers: Vec<EncoderLayerCache>,
    stacked_offsets: Vec<usize>,
    poi_pooled: Array2<f32>,
    category_pooled: Array2<f32>,
    head: MlpCache,
    tokens: usize,
}

/// Shape of the attention stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionShape {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f32,
    pub position: PositionKind,
}

impl AttentionEncoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, shape: AttentionShape, num_users: usize) -> Self {
        Self {
            pe: TemporalPe::new(shape.dim),
            layers: (0..shape.layers)
                .map(|_| EncoderLayer::new(rng, shape.dim, shape.heads, shape.ff_dim))
                .collect(),
            beta: Scalar::new(0.0),
            head: MlpHead::new(rng, shape.dim, shape.dim, num_users),
            position: shape.position,
            dropout: shape.dropout,
        }
    }

    pub fn beta(&self) -> f32 {
        sigmoid(self.beta.get())
    }

    fn position_signal(&self, times: &[f32], offsets: &[usize]) -> Array2<f32> {
        match self.position {
            PositionKind::Temporal => self.pe.encode(times),
            PositionKind::Sinusoidal => {
                let idx: Vec<f64> = offsets
                    .windows(2)
                    .flat_map(|w| (0..w[1] - w[0]).map(|i| i as f64))
                    .collect();
                temporal_pe(&idx, &default_frequencies(self.pe.dim())).mapv(|v| v as f32)
            }
        }
    }

    fn stacked_input(
        &self,
        xp: &Array2<f32>,
        xc: &Array2<f32>,
        times: &[f32],
        offsets: &[usize],
    ) -> (Array2<f32>, Vec<usize>) {
        let pe = self.position_signal(times, offsets);
        let x = concatenate(Axis(0), &[(xp + &pe).view(), (xc + &pe).view()]).expect("equal widths");
        let n = xp.nrows();
        let mut offs = offsets.to_vec();
        offs.extend(offsets.iter().skip(1).map(|o| o + n));
        (x, offs)
    }

    pub fn infer(&self, xp: &Array2<f32>, xc: &Array2<f32>, times: &[f32], offsets: &[usize]) -> Array2<f32> {
        let (mut x, offs) = self.stacked_input(xp, xc, times, offsets);
        for layer in &self.layers {
            x = layer.forward::<rand_chacha::ChaCha8Rng>(&x, &offs, None).0;
        }
        let pooled = segment_mean(&x, &offs);
        let b = offsets.len() - 1;
        let rep = Blend::forward(
            self.beta.get(),
            &pooled.slice(s![..b, ..]).to_owned(),
            &pooled.slice(s![b.., ..]).to_owned(),
        );
        self.head.infer(&rep)
    }

    /// Training-mode forward; dropout is active when `rng` is given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        xp: &Array2<f32>,
        xc: &Array2<f32>,
        times: &[f32],
        offsets: &[usize],
        mut rng: Option<&mut R>,
    ) -> (Array2<f32>, AttentionCache) {
        let (mut x, offs) = self.stacked_input(xp, xc, times, offsets);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let dropout = rng.as_deref_mut().map(|r| (r, self.dropout));
            let (y, cache) = layer.forward(&x, &offs, dropout);
            caches.push(cache);
            x = y;
        }
        let pooled = segment_mean(&x, &offs);
        let b = offsets.len() - 1;
        let poi_pooled = pooled.slice(s![..b, ..]).to_owned();
        let category_pooled = pooled.slice(s![b.., ..]).to_owned();
        let rep = Blend::forward(self.beta.get(), &poi_pooled, &category_pooled);
        let (logits, head) = self.head.forward(rep);
        (
            logits,
            AttentionCache {
                layers: caches,
                stacked_offsets: offs,
                poi_pooled,
                category_pooled,
                head,
                tokens: xp.nrows(),
            },
        )
    }

    /// Returns gradients w.r.t. `(X_p, X_c)`; frequency gradients go into `grad.pe`.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        times: &[f32],
        d_logits: &Array2<f32>,
        grad: &mut AttentionEncoder,
    ) -> (Array2<f32>, Array2<f32>) {
        let d_rep = self.head.backward(&cache.head, d_logits, &mut grad.head);
        let (dp, dc, d_beta) = Blend::backward(
            self.beta.get(),
            &cache.poi_pooled,
            &cache.category_pooled,
            &d_rep,
        );
        grad.beta.add(d_beta);
        let d_pooled = concatenate(Axis(0), &[dp.view(), dc.view()]).expect("equal widths");
        let mut dx = segment_mean_backward(&d_pooled, &cache.stacked_offsets);
        for ((layer, lc), lg) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            dx = layer.backward(lc, &cache.stacked_offsets, &dx, lg);
        }
        let n = cache.tokens;
        let dxp = dx.slice(s![..n, ..]).to_owned();
        let dxc = dx.slice(s![n.., ..]).to_owned();
        if self.position == PositionKind::Temporal {
            self.pe.backward(times, &(&dxp + &dxc), &mut grad.pe);
        }
        (dxp, dxc)
    }
}

impl Parameters for AttentionEncoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.pe.visit(&join(prefix, "pe"), out);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), out);
        }
        self.beta.visit(&join(prefix, "beta_raw"), out);
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.pe.visit_mut(&join(prefix, "pe"), out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), out);
        }
        self.beta.visit_mut(&join(prefix, "beta_raw"), out);
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}

/// Scores one embedded trajectory in inference mode. Times are measured in
/// `time_unit` seconds from the earliest check-in; sequences longer than
/// `max_len` keep their most recent `max_len` check-ins.
pub fn encode_attention(
    emb: &EmbeddedTrajectory,
    params: &AttentionEncoder,
    time_unit: f64,
    max_len: usize,
) -> Result<UserLogits> {
    if emb.is_empty() {
        return Err(TulError::Data("cannot encode an empty trajectory".into()));
    }
    let start = if emb.len() > max_len {
        log::warn!("truncating a {}-token sequence to its last {max_len}", emb.len());
        emb.len() - max_len
    } else {
        0
    };
    let xp = emb.poi.slice(s![start.., ..]).to_owned();
    let xc = emb.category.slice(s![start.., ..]).to_owned();
    let stamps = &emb.timestamps[start..];
    let origin = stamps.iter().copied().min().unwrap_or(0);
    let times: Vec<f32> = stamps
        .iter()
        .map(|&t| ((t - origin) as f64 / time_unit) as f32)
        .collect();
    let logits = params.infer(&xp, &xc, &times, &[0, xp.nrows()]);
    Ok(UserLogits(logits.row(0).to_vec()))
}

/// Inner product of two encoding rows.
pub fn pe_inner(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck::check_params, uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(dim: usize) -> AttentionShape {
        AttentionShape {
            dim,
            layers: 2,
            heads: 2,
            ff_dim: 2 * dim,
            dropout: 0.1,
            position: PositionKind::Temporal,
        }
    }

    #[test]
    fn relative_time_identity_small_case() {
        let pe = temporal_pe(&[2.0, 5.0], &[0.5]);
        let dot = pe_inner(pe.row(0), pe.row(1));
        assert!((dot - (1.5f64).cos()).abs() < 1e-12);
        assert!((dot - 0.070737).abs() < 1e-6);
    }

    #[test]
    fn zero_offset_gives_half_dim() {
        let w = default_frequencies(8);
        let pe = temporal_pe(&[3.7], &w);
        assert!((pe_inner(pe.row(0), pe.row(0)) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_frequencies_are_constant() {
        let pe = temporal_pe(&[0.0, 10.0, 99.0], &[0.0, 0.0]);
        for row in pe.rows() {
            assert_eq!(row.to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        }
    }

    fn emb(rng: &mut ChaCha8Rng, m: usize, d: usize) -> EmbeddedTrajectory {
        EmbeddedTrajectory {
            poi: uniform(rng, (m, d), 0.9),
            category: uniform(rng, (m, d), 0.9),
            timestamps: (0..m as i64).map(|i| i * 5400 + (i * i) * 60).collect(),
        }
    }

    #[test]
    fn single_token_pools_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = AttentionEncoder::new(&mut rng, shape(8), 3);
        let e = emb(&mut rng, 1, 8);
        let z = encode_attention(&e, &enc, 3600.0, 16).unwrap();
        let (mut x, offs) = enc.stacked_input(&e.poi, &e.category, &[0.0], &[0, 1]);
        for l in &enc.layers {
            x = l.forward::<ChaCha8Rng>(&x, &offs, None).0;
        }
        let rep = Blend::forward(enc.beta.get(), &x.slice(s![0..1, ..]).to_owned(), &x.slice(s![1..2, ..]).to_owned());
        let expect = enc.head.infer(&rep);
        for (a, b) in z.0.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn permuting_tokens_with_their_times_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = AttentionEncoder::new(&mut rng, shape(8), 4);
        let e = emb(&mut rng, 5, 8);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = EmbeddedTrajectory {
            poi: e.poi.select(Axis(0), &perm),
            category: e.category.select(Axis(0), &perm),
            timestamps: perm.iter().map(|&i| e.timestamps[i]).collect(),
        };
        let a = encode_attention(&e, &enc, 3600.0, 64).unwrap();
        let b = encode_attention(&permuted, &enc, 3600.0, 64).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn very_negative_beta_ignores_pois() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = AttentionEncoder::new(&mut rng, shape(8), 3);
        enc.beta = Scalar::new(-60.0);
        let a = emb(&mut rng, 4, 8);
        let mut b = a.clone();
        b.poi = uniform(&mut rng, (4, 8), 0.9);
        let za = encode_attention(&a, &enc, 3600.0, 64).unwrap();
        let zb = encode_attention(&b, &enc, 3600.0, 64).unwrap();
        for (x, y) in za.0.iter().zip(&zb.0) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn logits_length_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = AttentionEncoder::new(&mut rng, shape(8), 6);
        for m in [1, 3, 12] {
            let e = emb(&mut rng, m, 8);
            assert_eq!(encode_attention(&e, &enc, 3600.0, 8).unwrap().len(), 6);
        }
        let long = emb(&mut rng, 12, 8);
        let tail = EmbeddedTrajectory {
            poi: long.poi.slice(s![4.., ..]).to_owned(),
            category: long.category.slice(s![4.., ..]).to_owned(),
            timestamps: long.timestamps[4..].to_vec(),
        };
        assert_eq!(
            encode_attention(&long, &enc, 3600.0, 8).unwrap(),
            encode_attention(&tail, &enc, 3600.0, 8).unwrap()
        );
    }

    #[test]
    fn sinusoidal_variant_ignores_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut enc = AttentionEncoder::new(&mut rng, shape(8), 3);
        enc.position = PositionKind::Sinusoidal;
        let a = emb(&mut rng, 4, 8);
        let mut b = a.clone();
        b.timestamps = vec![0, 1, 2, 99_999];
        assert_eq!(encode_attention(&a, &enc, 3600.0, 64).unwrap(), encode_attention(&b, &enc, 3600.0, 64).unwrap());
    }

    #[test]
    fn gradients_including_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut enc = AttentionEncoder::new(&mut rng, shape(8), 3);
        enc.beta = Scalar::new(0.3);
        let xp = uniform(&mut rng, (5, 8), 0.9);
        let xc = uniform(&mut rng, (5, 8), 0.9);
        let times = [0.0f32, 1.5, 2.25, 0.0, 3.0];
        let offsets = [0, 3, 5];
        let w = uniform(&mut rng, (2, 3), 1.0);
        let objective = |m: &AttentionEncoder, xp: &Array2<f32>| {
            (&m.infer(xp, &xc, &times, &offsets) * &w).iter().map(|&v| v as f64).sum::<f64>()
        };
        let (_, cache) = enc.forward::<ChaCha8Rng>(&xp, &xc, &times, &offsets, None);
        let mut g = enc.zeros_like();
        let (dxp, _) = enc.backward(&cache, &times, &w, &mut g);
        check_params(&enc, &g, 4, 5e-3, 2e-2, |m| objective(m, &xp));
        let eps = 5e-3;
        for (i, j) in [(0, 0), (4, 7)] {
            let mut p = xp.clone();
            p[[i, j]] += eps;
            let mut m = xp.clone();
            m[[i, j]] -= eps;
            let num = (objective(&enc, &p) - objective(&enc, &m)) / (2.0 * eps as f64);
            assert!((num - dxp[[i, j]] as f64).abs() < 5e-3);
        }
    }
}
