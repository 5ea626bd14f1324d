use ndarray::{s, Array2, Zip};
use rand::Rng;

use super::{dropout_mask, join, softmax_rows, LayerNorm, LayerNormCache, Linear, NamedView, NamedViewMut, Parameters};

/// Multi-head self-attention restricted to each packed segment, so tokens of
/// different sequences never attend to each other (no padding involved).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    /// Fused query/key/value projection, `d × 3d`.
    pub qkv: Linear,
    pub output: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    input: Array2<f32>,
    qkv: Array2<f32>,
    probs: Vec<Array2<f32>>,
    context: Array2<f32>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "model dim must be divisible by heads");
        Self {
            qkv: Linear::new(rng, dim, 3 * dim),
            output: Linear::new(rng, dim, dim),
            heads,
        }
    }

    fn dims(&self) -> (usize, usize) {
        let d = self.output.input_dim();
        (d, d / self.heads)
    }

    pub fn forward(&self, x: &Array2<f32>, offsets: &[usize]) -> (Array2<f32>, AttentionCache) {
        let (d, dh) = self.dims();
        let scale = 1.0 / (dh as f32).sqrt();
        let qkv = self.qkv.forward(x);
        let mut context = Array2::<f32>::zeros((x.nrows(), d));
        let mut probs = Vec::with_capacity((offsets.len() - 1) * self.heads);
        for w in offsets.windows(2) {
            let (a, b) = (w[0], w[1]);
            for h in 0..self.heads {
                let q = qkv.slice(s![a..b, h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![a..b, d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![a..b, 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t()) * scale;
                softmax_rows(&mut p);
                context
                    .slice_mut(s![a..b, h * dh..(h + 1) * dh])
                    .assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let y = self.output.forward(&context);
        (
            y,
            AttentionCache {
                input: x.clone(),
                qkv,
                probs,
                context,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        offsets: &[usize],
        dy: &Array2<f32>,
        grad: &mut MultiHeadAttention,
    ) -> Array2<f32> {
        let (d, dh) = self.dims();
        let scale = 1.0 / (dh as f32).sqrt();
        let d_context = self.output.backward(&cache.context, dy, &mut grad.output);
        let mut d_qkv = Array2::<f32>::zeros(cache.qkv.raw_dim());
        let mut probs = cache.probs.iter();
        for w in offsets.windows(2) {
            let (a, b) = (w[0], w[1]);
            for h in 0..self.heads {
                let p = probs.next().expect("one probability matrix per segment and head");
                let (qc, kc, vc) = (h * dh, d + h * dh, 2 * d + h * dh);
                let q = cache.qkv.slice(s![a..b, qc..qc + dh]);
                let k = cache.qkv.slice(s![a..b, kc..kc + dh]);
                let v = cache.qkv.slice(s![a..b, vc..vc + dh]);
                let dc = d_context.slice(s![a..b, qc..qc + dh]);
                let dp = dc.dot(&v.t());
                d_qkv.slice_mut(s![a..b, vc..vc + dh]).assign(&p.t().dot(&dc));
                let mut ds = &dp * p;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let total = row.sum();
                    Zip::from(&mut row).and(&prow).for_each(|g, &pi| *g -= pi * total);
                }
                ds *= scale;
                d_qkv.slice_mut(s![a..b, qc..qc + dh]).assign(&ds.dot(&k));
                d_qkv.slice_mut(s![a..b, kc..kc + dh]).assign(&ds.t().dot(&q));
            }
        }
        self.qkv.backward(&cache.input, &d_qkv, &mut grad.qkv)
    }
}

impl Parameters for MultiHeadAttention {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.qkv.visit(&join(prefix, "qkv"), out);
        self.output.visit(&join(prefix, "output"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.qkv.visit_mut(&join(prefix, "qkv"), out);
        self.output.visit_mut(&join(prefix, "output"), out);
    }
}

/// Post-norm transformer encoder layer:
/// `x1 = LN(x + drop(attn(x)))`, `y = LN(x1 + drop(W2 relu(W1 x1)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

pub struct EncoderLayerCache {
    attention: AttentionCache,
    mask1: Option<Array2<f32>>,
    norm1: LayerNormCache,
    x1: Array2<f32>,
    ff_hidden: Array2<f32>,
    mask2: Option<Array2<f32>>,
    norm2: LayerNormCache,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize, ff_dim: usize) -> Self {
        Self {
            attention: MultiHeadAttention::new(rng, dim, heads),
            norm1: LayerNorm::new(dim),
            ff_in: Linear::new(rng, dim, ff_dim),
            ff_out: Linear::new(rng, ff_dim, dim),
            norm2: LayerNorm::new(dim),
        }
    }

    /// `dropout` carries the generator and drop probability in training mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Array2<f32>,
        offsets: &[usize],
        dropout: Option<(&mut R, f32)>,
    ) -> (Array2<f32>, EncoderLayerCache) {
        let (mut rng, p) = match dropout {
            Some((r, p)) if p > 0.0 => (Some(r), p),
            _ => (None, 0.0),
        };
        let mut mask = |shape| rng.as_mut().map(|r| dropout_mask(&mut **r, shape, p));

        let (mut a, attention) = self.attention.forward(x, offsets);
        let mask1 = mask(a.dim());
        if let Some(m) = &mask1 {
            a *= m;
        }
        a += x;
        let (x1, norm1) = self.norm1.forward(&a);

        let ff_hidden = self.ff_in.forward(&x1).mapv(|v| v.max(0.0));
        let mut f = self.ff_out.forward(&ff_hidden);
        let mask2 = mask(f.dim());
        if let Some(m) = &mask2 {
            f *= m;
        }
        f += &x1;
        let (y, norm2) = self.norm2.forward(&f);
        (
            y,
            EncoderLayerCache {
                attention,
                mask1,
                norm1,
                x1,
                ff_hidden,
                mask2,
                norm2,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &EncoderLayerCache,
        offsets: &[usize],
        dy: &Array2<f32>,
        grad: &mut EncoderLayer,
    ) -> Array2<f32> {
        let dr2 = self.norm2.backward(&cache.norm2, dy, &mut grad.norm2);
        let mut df = dr2.clone();
        if let Some(m) = &cache.mask2 {
            df *= m;
        }
        let mut dh = self.ff_out.backward(&cache.ff_hidden, &df, &mut grad.ff_out);
        Zip::from(&mut dh)
            .and(&cache.ff_hidden)
            .for_each(|g, &h| if h <= 0.0 { *g = 0.0 });
        let mut dx1 = self.ff_in.backward(&cache.x1, &dh, &mut grad.ff_in);
        dx1 += &dr2;

        let dr1 = self.norm1.backward(&cache.norm1, &dx1, &mut grad.norm1);
        let mut da = dr1.clone();
        if let Some(m) = &cache.mask1 {
            da *= m;
        }
        let mut dx = self
            .attention
            .backward(&cache.attention, offsets, &da, &mut grad.attention);
        dx += &dr1;
        dx
    }
}

impl Parameters for EncoderLayer {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.attention.visit(&join(prefix, "attention"), out);
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.ff_in.visit(&join(prefix, "ff_in"), out);
        self.ff_out.visit(&join(prefix, "ff_out"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.attention.visit_mut(&join(prefix, "attention"), out);
        self.norm1.visit_mut(&join(prefix, "norm1"), out);
        self.ff_in.visit_mut(&join(prefix, "ff_in"), out);
        self.ff_out.visit_mut(&join(prefix, "ff_out"), out);
        self.norm2.visit_mut(&join(prefix, "norm2"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck::check_params, uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    #[test]
    fn segments_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = EncoderLayer::new(&mut rng, 8, 2, 16);
        let x = uniform(&mut rng, (5, 8), 1.0);
        let (joint, _) = layer.forward::<NoRng>(&x, &[0, 2, 5], None);
        let tail = x.slice(s![2..5, ..]).to_owned();
        let (alone, _) = layer.forward::<NoRng>(&tail, &[0, 3], None);
        for (a, b) in joint.slice(s![2..5, ..]).iter().zip(alone.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = EncoderLayer::new(&mut rng, 8, 2, 12);
        let x = uniform(&mut rng, (6, 8), 1.0);
        let w = uniform(&mut rng, (6, 8), 1.0);
        let offsets = [0, 4, 6];
        let objective = |m: &EncoderLayer, x: &Array2<f32>| {
            let (y, _) = m.forward::<NoRng>(x, &offsets, None);
            (&y * &w).iter().map(|&v| v as f64).sum::<f64>()
        };
        let (_, cache) = layer.forward::<NoRng>(&x, &offsets, None);
        let mut g = layer.zeros_like();
        let dx = layer.backward(&cache, &offsets, &w, &mut g);
        check_params(&layer, &g, 6, 5e-3, 2e-2, |m| objective(m, &x));
        for (i, j) in [(0, 0), (3, 5), (5, 7)] {
            let eps = 5e-3;
            let mut xp = x.clone();
            xp[[i, j]] += eps;
            let mut xm = x.clone();
            xm[[i, j]] -= eps;
            let num = (objective(&layer, &xp) - objective(&layer, &xm)) / (2.0 * eps as f64);
            assert!((num - dx[[i, j]] as f64).abs() < 1e-2, "{num} vs {}", dx[[i, j]]);
        }
    }

    #[test]
    fn dropout_mask_is_applied_consistently_in_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = EncoderLayer::new(&mut rng, 8, 2, 12);
        let x = uniform(&mut rng, (4, 8), 1.0);
        let w = uniform(&mut rng, (4, 8), 1.0);
        let offsets = [0, 4];
        let objective = |m: &EncoderLayer| {
            let mut r = ChaCha8Rng::seed_from_u64(77);
            let (y, _) = m.forward(&x, &offsets, Some((&mut r, 0.3)));
            (&y * &w).iter().map(|&v| v as f64).sum::<f64>()
        };
        let mut r = ChaCha8Rng::seed_from_u64(77);
        let (_, cache) = layer.forward(&x, &offsets, Some((&mut r, 0.3)));
        let mut g = layer.zeros_like();
        layer.backward(&cache, &offsets, &w, &mut g);
        check_params(&layer, &g, 4, 5e-3, 2e-2, objective);
    }
}
