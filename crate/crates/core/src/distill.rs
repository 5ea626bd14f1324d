//! Mutual distillation objective.
//!
//! For a pair of logit batches `(z_in, z_au)` the directional loss is
//! `H(y, z_in) + H(y, z_au) + λ T² KL(softmax(z_in/T) ‖ softmax(z_au/T))`.
//! The first direction pairs the recurrent encoder on the input trajectory
//! with the attention encoder on the augmented one; the second swaps the
//! inputs between encoders. The training objective is their sum. Every term
//! passes gradient to both of its arguments.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TulError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationConfig {
    pub temperature: f64,
    pub lambda: f64,
    /// Drop the swapped direction entirely.
    pub disable_l2: bool,
    /// Drop the cross-entropy terms on the input-trajectory logits.
    pub disable_input_ce: bool,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            lambda: 10.0,
            disable_l2: false,
            disable_input_ce: false,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TulError::Config(format!(
                "distill.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TulError::Config(format!(
                "distill.lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_in: f64,
    pub ce_au: f64,
    /// Already scaled by `λ T²`.
    pub kd: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.ce_in += o.ce_in;
        self.ce_au += o.ce_au;
        self.kd += o.kd;
        self.total += o.total;
    }
}

fn log_softmax(z: ArrayView1<f64>, t: f64) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
    let lse = z.iter().map(|&v| (v / t - max).exp()).sum::<f64>().ln() + max;
    z.mapv(|v| v / t - lse)
}

/// `KL(softmax(a/T) ‖ softmax(b/T))`, summed over classes.
pub fn kd_term(first: &[f64], second: &[f64], temperature: f64) -> Result<f64> {
    if first.len() != second.len() {
        return Err(TulError::Shape(format!(
            "logit lengths differ: {} vs {}",
            first.len(),
            second.len()
        )));
    }
    let lp = log_softmax(ArrayView1::from(first), temperature);
    let lq = log_softmax(ArrayView1::from(second), temperature);
    Ok(kl_from_logs(&lp, &lq))
}

fn kl_from_logs(lp: &Array1<f64>, lq: &Array1<f64>) -> f64 {
    lp.iter()
        .zip(lq.iter())
        .map(|(&a, &b)| if a == b { 0.0 } else { a.exp() * (a - b) })
        .sum::<f64>()
        .max(0.0)
}

/// Loss of one direction and its gradients w.r.t. both logit batches.
#[derive(Debug, Clone)]
pub struct DirectionalGrad {
    pub loss: LossBreakdown,
    pub d_in: Array2<f64>,
    pub d_au: Array2<f64>,
}

/// Batch-mean directional loss. `denominator` is the batch size used for the
/// mean, so that loss and gradients of sub-batches add up to the full batch.
pub fn directional_loss_grad(
    z_in: ArrayView2<f64>,
    z_au: ArrayView2<f64>,
    labels: &[usize],
    cfg: &DistillationConfig,
    denominator: usize,
) -> Result<DirectionalGrad> {
    let (b, u) = z_in.dim();
    if z_au.dim() != (b, u) || labels.len() != b {
        return Err(TulError::Shape(format!(
            "logits {:?} / {:?} with {} labels",
            z_in.dim(),
            z_au.dim(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= u) {
        return Err(TulError::Data(format!("label {bad} outside [0, {u})")));
    }
    let scale = 1.0 / denominator.max(1) as f64;
    let t = cfg.temperature;
    let kd_weight = cfg.lambda * t * t;
    let mut loss = LossBreakdown::default();
    let mut d_in = Array2::zeros((b, u));
    let mut d_au = Array2::zeros((b, u));
    for i in 0..b {
        let y = labels[i];
        let (zi, za) = (z_in.row(i), z_au.row(i));

        let ls_in = log_softmax(zi, 1.0);
        let ls_au = log_softmax(za, 1.0);
        if !cfg.disable_input_ce {
            loss.ce_in -= ls_in[y] * scale;
            for j in 0..u {
                d_in[[i, j]] += scale * (ls_in[j].exp() - f64::from(u8::from(j == y)));
            }
        }
        loss.ce_au -= ls_au[y] * scale;
        for j in 0..u {
            d_au[[i, j]] += scale * (ls_au[j].exp() - f64::from(u8::from(j == y)));
        }

        if kd_weight > 0.0 {
            let lp = log_softmax(zi, t);
            let lq = log_softmax(za, t);
            let kl = kl_from_logs(&lp, &lq);
            loss.kd += kd_weight * kl * scale;
            let c = kd_weight * scale / t;
            for j in 0..u {
                let (p, q) = (lp[j].exp(), lq[j].exp());
                d_in[[i, j]] += c * p * ((lp[j] - lq[j]) - kl);
                d_au[[i, j]] += c * (q - p);
            }
        }
    }
    loss.total = loss.ce_in + loss.ce_au + loss.kd;
    Ok(DirectionalGrad { loss, d_in, d_au })
}

pub fn directional_loss(
    z_in: ArrayView2<f64>,
    z_au: ArrayView2<f64>,
    labels: &[usize],
    cfg: &DistillationConfig,
) -> Result<LossBreakdown> {
    directional_loss_grad(z_in, z_au, labels, cfg, labels.len()).map(|g| g.loss)
}

pub fn total_loss(l1: &LossBreakdown, l2: &LossBreakdown) -> f64 {
    l1.total + l2.total
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_logits_have_zero_kd() {
        for t in [0.5, 1.0, 4.0, 100.0] {
            assert_eq!(kd_term(&[1.0, -2.0, 0.3], &[1.0, -2.0, 0.3], t).unwrap(), 0.0);
        }
    }

    #[test]
    fn kd_length_mismatch_is_an_error() {
        assert!(kd_term(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn kd_first_argument_is_the_reference_distribution() {
        let a = [2.0, 0.0, -1.0];
        let b = [0.0, 1.0, 0.0];
        assert!(kd_term(&a, &b, 1.0).unwrap() != kd_term(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn lambda_zero_leaves_cross_entropies() {
        let cfg = DistillationConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let zi = array![[1.0, 0.0, -1.0]];
        let za = array![[0.0, 3.0, 0.0]];
        let l = directional_loss(zi.view(), za.view(), &[0], &cfg).unwrap();
        assert_eq!(l.kd, 0.0);
        assert_eq!(l.total, l.ce_in + l.ce_au);
    }

    #[test]
    fn confident_agreeing_logits_vanish() {
        let z = array![[60.0, 0.0], [0.0, 60.0]];
        let l = directional_loss(z.view(), z.view(), &[0, 1], &DistillationConfig::default()).unwrap();
        assert!(l.total < 1e-20);
    }

    #[test]
    fn bad_label_rejected() {
        let z = array![[0.0, 0.0]];
        assert!(directional_loss(z.view(), z.view(), &[2], &DistillationConfig::default()).is_err());
    }

    #[test]
    fn disable_input_ce_removes_that_term() {
        let cfg = DistillationConfig {
            disable_input_ce: true,
            ..Default::default()
        };
        let zi = array![[1.0, 0.0]];
        let za = array![[0.0, 1.0]];
        let l = directional_loss(zi.view(), za.view(), &[0], &cfg).unwrap();
        assert_eq!(l.ce_in, 0.0);
        assert!(l.ce_au > 0.0 && l.kd > 0.0);
    }

    #[test]
    fn total_adds_directions() {
        let l1 = LossBreakdown {
            total: 1.0,
            ..Default::default()
        };
        let l2 = LossBreakdown {
            total: 0.5,
            ..Default::default()
        };
        assert_eq!(total_loss(&l1, &l2), 1.5);
    }
    #[test]
    fn two_class_kl_matches_closed_form() {
        // KL between softmax([1,0]) and softmax([0,1]) is tanh(1/2)
        let v = kd_term(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert!((v - 0.5f64.tanh()).abs() < 1e-12);
        assert!((v - 0.46212).abs() < 1e-5);
    }

    #[test]
    fn uniform_logits_cost_two_log_classes() {
        let z = array![[0.0, 0.0]];
        let l = directional_loss(z.view(), z.view(), &[0], &DistillationConfig::default()).unwrap();
        assert!((l.total - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l.total - 1.3863).abs() < 1e-4);
        assert_eq!(l.kd, 0.0);
    }

    #[test]
    fn scaled_kd_plateaus_with_temperature() {
        let a = [1.5, -0.3, 0.2, 0.9];
        let b = [0.1, 0.4, -1.0, 0.0];
        let scaled = |t: f64| t * t * kd_term(&a, &b, t).unwrap();
        // large-T limit: half the variance of the centred logit difference
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let limit = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (2.0 * d.len() as f64);
        assert!((scaled(1000.0) - limit).abs() / limit < 1e-3);
        assert!((scaled(100.0) - scaled(200.0)).abs() / limit < 5e-3);
        assert!((scaled(1.0) - limit).abs() / limit > 1e-2);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = DistillationConfig {
            temperature: 2.5,
            lambda: 3.0,
            ..Default::default()
        };
        let zi = array![[0.3, -1.2, 0.8, 0.0, 2.0], [1.0, 0.5, -0.5, 0.1, -2.0], [0.0, 0.2, 0.1, 0.9, 0.4]];
        let za = array![[-0.4, 0.6, 0.1, 1.1, 0.0], [0.2, -0.3, 1.5, 0.0, 0.7], [1.3, -0.8, 0.0, 0.2, 0.5]];
        let labels = [4, 0, 3];
        let g = directional_loss_grad(zi.view(), za.view(), &labels, &cfg, 3).unwrap();
        let f = |a: &Array2<f64>, b: &Array2<f64>| directional_loss(a.view(), b.view(), &labels, &cfg).unwrap().total;
        let h = 1e-6;
        for which in 0..2 {
            for idx in ndarray::indices(zi.raw_dim()) {
                let (mut ap, mut bp, mut am, mut bm) = (zi.clone(), za.clone(), zi.clone(), za.clone());
                if which == 0 {
                    ap[idx] += h;
                    am[idx] -= h;
                } else {
                    bp[idx] += h;
                    bm[idx] -= h;
                }
                let num = (f(&ap, &bp) - f(&am, &bm)) / (2.0 * h);
                let ana = if which == 0 { g.d_in[idx] } else { g.d_au[idx] };
                assert!((num - ana).abs() <= 1e-4 * num.abs().max(1e-3), "{which} {idx:?}: {num} vs {ana}");
            }
        }
    }
}
