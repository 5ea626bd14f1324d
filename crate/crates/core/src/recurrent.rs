//! Recurrent trajectory encoder: one shared LSTM reads the POI and the
//! category sequence, the two final hidden states are blended by
//! `α = sigmoid(α_raw)` and an MLP maps the blend to per-user scores.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddedTrajectory;
use crate::error::{Result, TulError};
use crate::nn::{
    join, sigmoid, Blend, Lstm, LstmCache, MlpCache, MlpHead, NamedView, NamedViewMut,
    Parameters, Scalar,
};

/// Unnormalized score per user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserLogits(pub Vec<f32>);

impl UserLogits {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentEncoder {
    pub lstm: Lstm,
    pub alpha: Scalar,
    pub head: MlpHead,
}

pub struct RecurrentCache {
    lstm: LstmCache,
    poi_state: Array2<f32>,
    category_state: Array2<f32>,
    head: MlpCache,
    tokens: usize,
}

/// Stacks the POI rows over the category rows so one LSTM pass covers both.
fn stack(xp: &Array2<f32>, xc: &Array2<f32>, offsets: &[usize]) -> (Array2<f32>, Vec<usize>) {
    let n = xp.nrows();
    let x = concatenate(Axis(0), &[xp.view(), xc.view()]).expect("equal widths");
    let mut offs = offsets.to_vec();
    offs.extend(offsets.iter().skip(1).map(|o| o + n));
    (x, offs)
}

impl RecurrentEncoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, num_users: usize) -> Self {
        Self {
            lstm: Lstm::new(rng, input, hidden),
            alpha: Scalar::new(0.0),
            head: MlpHead::new(rng, hidden, hidden, num_users),
        }
    }

    pub fn alpha(&self) -> f32 {
        sigmoid(self.alpha.get())
    }

    /// Pre-MLP blend `α·h_p + (1-α)·h_c` for each sequence.
    pub fn represent(&self, xp: &Array2<f32>, xc: &Array2<f32>, offsets: &[usize]) -> Array2<f32> {
        let (x, offs) = stack(xp, xc, offsets);
        let h = self.lstm.infer(&x, &offs);
        let b = offsets.len() - 1;
        Blend::forward(
            self.alpha.get(),
            &h.slice(s![..b, ..]).to_owned(),
            &h.slice(s![b.., ..]).to_owned(),
        )
    }

    pub fn infer(&self, xp: &Array2<f32>, xc: &Array2<f32>, offsets: &[usize]) -> Array2<f32> {
        self.head.infer(&self.represent(xp, xc, offsets))
    }

    pub fn forward(&self, xp: &Array2<f32>, xc: &Array2<f32>, offsets: &[usize]) -> (Array2<f32>, RecurrentCache) {
        let (x, offs) = stack(xp, xc, offsets);
        let (h, lstm) = self.lstm.forward(&x, &offs);
        let b = offsets.len() - 1;
        let poi_state = h.slice(s![..b, ..]).to_owned();
        let category_state = h.slice(s![b.., ..]).to_owned();
        let rep = Blend::forward(self.alpha.get(), &poi_state, &category_state);
        let (logits, head) = self.head.forward(rep);
        (
            logits,
            RecurrentCache {
                lstm,
                poi_state,
                category_state,
                head,
                tokens: xp.nrows(),
            },
        )
    }

    /// Returns gradients w.r.t. `(X_p, X_c)`.
    pub fn backward(
        &self,
        cache: &RecurrentCache,
        d_logits: &Array2<f32>,
        grad: &mut RecurrentEncoder,
    ) -> (Array2<f32>, Array2<f32>) {
        let d_rep = self.head.backward(&cache.head, d_logits, &mut grad.head);
        let (dp, dc, d_alpha) = Blend::backward(
            self.alpha.get(),
            &cache.poi_state,
            &cache.category_state,
            &d_rep,
        );
        grad.alpha.add(d_alpha);
        let dh = concatenate(Axis(0), &[dp.view(), dc.view()]).expect("equal widths");
        let dx = self.lstm.backward(&cache.lstm, &dh, &mut grad.lstm);
        let n = cache.tokens;
        (dx.slice(s![..n, ..]).to_owned(), dx.slice(s![n.., ..]).to_owned())
    }
}

impl Parameters for RecurrentEncoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.lstm.visit(&join(prefix, "lstm"), out);
        self.alpha.visit(&join(prefix, "alpha_raw"), out);
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.lstm.visit_mut(&join(prefix, "lstm"), out);
        self.alpha.visit_mut(&join(prefix, "alpha_raw"), out);
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}

/// Scores one embedded trajectory.
pub fn encode_recurrent(emb: &EmbeddedTrajectory, params: &RecurrentEncoder) -> Result<UserLogits> {
    if emb.is_empty() {
        return Err(TulError::Data("cannot encode an empty trajectory".into()));
    }
    let offsets = [0, emb.len()];
    let logits = params.infer(&emb.poi, &emb.category, &offsets);
    Ok(UserLogits(logits.row(0).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck::check_params, uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(rng: &mut ChaCha8Rng, m: usize, d: usize) -> EmbeddedTrajectory {
        EmbeddedTrajectory {
            poi: uniform(rng, (m, d), 0.9),
            category: uniform(rng, (m, d), 0.9),
            timestamps: (0..m as i64).collect(),
        }
    }

    #[test]
    fn output_has_one_score_per_user() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = RecurrentEncoder::new(&mut rng, 6, 5, 7);
        for m in [1, 2, 9] {
            let e = emb(&mut rng, m, 6);
            assert_eq!(encode_recurrent(&e, &enc).unwrap().len(), 7);
        }
    }

    #[test]
    fn large_alpha_ignores_categories() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut enc = RecurrentEncoder::new(&mut rng, 6, 5, 3);
        enc.alpha = Scalar::new(60.0);
        let a = emb(&mut rng, 4, 6);
        let mut b = a.clone();
        b.category = uniform(&mut rng, (4, 6), 0.9);
        let za = encode_recurrent(&a, &enc).unwrap();
        let zb = encode_recurrent(&b, &enc).unwrap();
        for (x, y) in za.0.iter().zip(&zb.0) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = RecurrentEncoder::new(&mut rng, 6, 5, 3);
        let a = emb(&mut rng, 3, 6);
        let mut b = a.clone();
        for x in [&mut b.poi, &mut b.category] {
            let r0 = x.row(0).to_owned();
            let r2 = x.row(2).to_owned();
            x.row_mut(0).assign(&r2);
            x.row_mut(2).assign(&r0);
        }
        assert_ne!(encode_recurrent(&a, &enc).unwrap(), encode_recurrent(&b, &enc).unwrap());
    }

    #[test]
    fn blend_is_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut enc = RecurrentEncoder::new(&mut rng, 4, 3, 2);
        let e = emb(&mut rng, 3, 4);
        let hp = enc.lstm.infer(&e.poi, &[0, 3]);
        let hc = enc.lstm.infer(&e.category, &[0, 3]);
        for raw in [-3.0f32, 0.0, 0.7, 5.0] {
            enc.alpha = Scalar::new(raw);
            let rep = enc.represent(&e.poi, &e.category, &[0, 3]);
            let a = sigmoid(raw);
            for j in 0..3 {
                let expect = a * hp[[0, j]] + (1.0 - a) * hc[[0, j]];
                assert!((rep[[0, j]] - expect).abs() < 1e-6);
                let (lo, hi) = (hp[[0, j]].min(hc[[0, j]]), hp[[0, j]].max(hc[[0, j]]));
                assert!(rep[[0, j]] >= lo - 1e-6 && rep[[0, j]] <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn one_lstm_serves_both_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = RecurrentEncoder::new(&mut rng, 4, 3, 2);
        let e = emb(&mut rng, 3, 4);
        let (_, cache) = enc.forward(&e.poi, &e.category, &[0, 3]);
        let mut g = enc.zeros_like();
        // gradient only through the category branch still lands in the single LSTM
        enc.backward(&cache, &ndarray::array![[1.0, -1.0]], &mut g);
        let names: Vec<String> = enc.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("lstm.")).count(), 3);
        assert!(g.lstm.w_input.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn deterministic_and_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut enc = RecurrentEncoder::new(&mut rng, 4, 3, 3);
        enc.alpha = Scalar::new(0.4);
        let xp = uniform(&mut rng, (5, 4), 0.9);
        let xc = uniform(&mut rng, (5, 4), 0.9);
        let offsets = [0, 2, 5];
        let w = uniform(&mut rng, (2, 3), 1.0);
        assert_eq!(enc.infer(&xp, &xc, &offsets), enc.infer(&xp, &xc, &offsets));
        let objective = |m: &RecurrentEncoder, xp: &Array2<f32>, xc: &Array2<f32>| {
            (&m.infer(xp, xc, &offsets) * &w).iter().map(|&v| v as f64).sum::<f64>()
        };
        let (_, cache) = enc.forward(&xp, &xc, &offsets);
        let mut g = enc.zeros_like();
        let (dxp, dxc) = enc.backward(&cache, &w, &mut g);
        check_params(&enc, &g, 6, 1e-2, 5e-3, |m| objective(m, &xp, &xc));
        let eps = 1e-2;
        for (i, j) in [(0, 0), (4, 3)] {
            let mut p = xp.clone();
            p[[i, j]] += eps;
            let mut m = xp.clone();
            m[[i, j]] -= eps;
            let num = (objective(&enc, &p, &xc) - objective(&enc, &m, &xc)) / (2.0 * eps as f64);
            assert!((num - dxp[[i, j]] as f64).abs() < 2e-3);
            let mut p = xc.clone();
            p[[i, j]] += eps;
            let mut m = xc.clone();
            m[[i, j]] -= eps;
            let num = (objective(&enc, &xp, &p) - objective(&enc, &xp, &m)) / (2.0 * eps as f64);
            assert!((num - dxc[[i, j]] as f64).abs() < 2e-3);
        }
    }
}
