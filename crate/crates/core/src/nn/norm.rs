use ndarray::{Array1, Array2, Axis, Zip};

use super::{join, NamedView, NamedViewMut, Parameters};

const EPS: f32 = 1e-5;

/// Layer normalization over the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
}

pub struct LayerNormCache {
    normalized: Array2<f32>,
    inv_std: Array1<f32>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LayerNormCache) {
        let d = x.ncols() as f32;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f32>() / d;
            *s = 1.0 / (var + EPS).sqrt();
            let k = *s;
            row.mapv_inplace(|v| v * k);
        }
        let mut y = &normalized * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f32>, grad: &mut LayerNorm) -> Array2<f32> {
        grad.gamma += &(dy * &cache.normalized).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f32;
        let mut dx = dy * &self.gamma;
        Zip::from(dx.rows_mut())
            .and(cache.normalized.rows())
            .and(&cache.inv_std)
            .for_each(|mut g, xhat, &s| {
                let mean_g = g.sum() / d;
                let mean_gx = g.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f32>() / d;
                Zip::from(&mut g)
                    .and(&xhat)
                    .for_each(|gi, &xi| *gi = s * (*gi - mean_g - xi * mean_gx));
            });
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        out.push((join(prefix, "gamma"), self.gamma.view().into_dyn()));
        out.push((join(prefix, "beta"), self.beta.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        out.push((join(prefix, "gamma"), self.gamma.view_mut().into_dyn()));
        out.push((join(prefix, "beta"), self.beta.view_mut().into_dyn()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck::check_params, uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalizes_rows() {
        let ln = LayerNorm::new(4);
        let x = ndarray::array![[1.0f32, 2.0, 3.0, 4.0]];
        let (y, _) = ln.forward(&x);
        assert!(y.sum().abs() < 1e-5);
        assert!((y.mapv(|v| v * v).sum() / 4.0 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn input_and_param_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ln = LayerNorm::new(6);
        ln.gamma = uniform(&mut rng, 6, 1.0) + 1.0;
        ln.beta = uniform(&mut rng, 6, 1.0);
        let x = uniform(&mut rng, (3, 6), 2.0);
        let w = uniform(&mut rng, (3, 6), 1.0);
        let objective = |m: &LayerNorm, x: &Array2<f32>| {
            let (y, _) = m.forward(x);
            (&y * &w).iter().map(|&v| v as f64).sum::<f64>()
        };
        let (_, cache) = ln.forward(&x);
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &w, &mut g);
        check_params(&ln, &g, 6, 1e-2, 2e-3, |m| objective(m, &x));
        for (i, j) in [(0, 0), (1, 3), (2, 5)] {
            let eps = 1e-2;
            let mut xp = x.clone();
            xp[[i, j]] += eps;
            let mut xm = x.clone();
            xm[[i, j]] -= eps;
            let num = (objective(&ln, &xp) - objective(&ln, &xm)) / (2.0 * eps as f64);
            assert!((num - dx[[i, j]] as f64).abs() < 2e-3, "{num} vs {}", dx[[i, j]]);
        }
    }
}
