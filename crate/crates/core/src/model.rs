//! The full network: one check-in embedding feeding the recurrent encoder and
//! the temporal attention encoder.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::distill::{directional_loss_grad, DistillationConfig, LossBreakdown};
use crate::embedding::{CheckinEmbedding, TokenBatch};
use crate::error::{Result, TulError};
use crate::nn::{join, NamedView, NamedViewMut, Parameters};
use crate::recurrent::RecurrentEncoder;
use crate::transformer::{AttentionEncoder, AttentionShape, PositionKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Check-in embedding width (location half + time half).
    pub dim: usize,
    /// LSTM hidden size.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f32,
    /// Longest sequence fed to the encoders; longer ones keep the most recent check-ins.
    pub max_len: usize,
    pub position: PositionKind,
    /// Seconds per unit of the relative times fed to the temporal encoding.
    pub time_unit: f64,
    /// When false, category and time lookups are zeroed and frozen.
    pub use_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            hidden: 512,
            layers: 2,
            heads: 8,
            ff_dim: 2048,
            dropout: 0.1,
            max_len: 512,
            position: PositionKind::Temporal,
            time_unit: 3600.0,
            use_context: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TulError::Config(m));
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return bad(format!("model.dim must be even and >= 2, got {}", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model.dim ({}) must be divisible by transformer.heads ({})",
                self.dim, self.heads
            ));
        }
        if self.hidden == 0 || self.ff_dim == 0 || self.layers == 0 || self.max_len == 0 {
            return bad("hidden size, ff_dim, layers and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("transformer.dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.time_unit.is_nan() || self.time_unit <= 0.0 {
            return bad(format!("pe.time_unit must be positive, got {}", self.time_unit));
        }
        Ok(())
    }

    fn attention_shape(&self) -> AttentionShape {
        AttentionShape {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
            position: self.position,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TulModel {
    pub embedding: CheckinEmbedding,
    pub recurrent: RecurrentEncoder,
    pub attention: AttentionEncoder,
    pub use_context: bool,
}

/// Loss of both directions for one (sub-)batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLoss {
    pub forward: LossBreakdown,
    pub swapped: LossBreakdown,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.forward.total + self.swapped.total
    }
}

impl std::ops::AddAssign for StepLoss {
    fn add_assign(&mut self, o: Self) {
        self.forward += o.forward;
        self.swapped += o.swapped;
    }
}

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

fn to_f32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

/// Rows `range` of a packed token matrix and the matching rebased offsets.
fn sub_batch(
    xp: &Array2<f32>,
    xc: &Array2<f32>,
    batch: &TokenBatch,
    seqs: std::ops::Range<usize>,
) -> (Array2<f32>, Array2<f32>, Vec<f32>, Vec<usize>) {
    let (a, b) = (batch.offsets[seqs.start], batch.offsets[seqs.end]);
    let offs = batch.offsets[seqs.start..=seqs.end].iter().map(|o| o - a).collect();
    (
        xp.slice(s![a..b, ..]).to_owned(),
        xc.slice(s![a..b, ..]).to_owned(),
        batch.times[a..b].to_vec(),
        offs,
    )
}

impl TulModel {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig, vocab: &Vocabulary) -> Self {
        let users = vocab.num_users();
        let mut model = Self {
            embedding: CheckinEmbedding::new(rng, vocab, cfg.dim),
            recurrent: RecurrentEncoder::new(rng, cfg.dim, cfg.hidden, users),
            attention: AttentionEncoder::new(rng, cfg.attention_shape(), users),
            use_context: cfg.use_context,
        };
        model.zero_frozen();
        model
    }

    pub fn num_users(&self) -> usize {
        self.recurrent.head.output.output_dim()
    }

    /// Parameter names held at zero when context features are disabled.
    pub fn frozen_names(&self) -> Vec<String> {
        if self.use_context {
            Vec::new()
        } else {
            CheckinEmbedding::CONTEXT_PARAMS
                .iter()
                .map(|n| join("embedding", n))
                .collect()
        }
    }

    pub fn zero_frozen(&mut self) {
        let frozen = self.frozen_names();
        if frozen.is_empty() {
            return;
        }
        for (name, mut p) in self.named_params_mut() {
            if frozen.contains(&name) {
                p.fill(0.0);
            }
        }
    }

    /// User scores from the recurrent encoder alone; this is the linking path.
    pub fn score(&self, batch: &TokenBatch) -> Array2<f32> {
        let (xp, xc) = self.embedding.forward(batch);
        self.recurrent.infer(&xp, &xc, &batch.offsets)
    }

    /// User scores from the attention encoder (diagnostics only).
    pub fn score_attention(&self, batch: &TokenBatch) -> Array2<f32> {
        let (xp, xc) = self.embedding.forward(batch);
        self.attention.infer(&xp, &xc, &batch.times, &batch.offsets)
    }

    /// Forward and backward pass of the mutual distillation objective over one
    /// sub-batch. `input` and `augmented` hold matching sequences. Losses and
    /// gradients are averaged with `denominator` so sub-batches add up.
    pub fn distillation_gradients<R: Rng + ?Sized>(
        &self,
        input: &TokenBatch,
        augmented: &TokenBatch,
        labels: &[usize],
        cfg: &DistillationConfig,
        denominator: usize,
        dropout_rng: Option<&mut R>,
    ) -> Result<(TulModel, StepLoss)> {
        let b = input.num_sequences();
        if augmented.num_sequences() != b || labels.len() != b {
            return Err(TulError::Shape(format!(
                "{b} inputs, {} augmented, {} labels",
                augmented.num_sequences(),
                labels.len()
            )));
        }
        let swapped = !cfg.disable_l2;
        let both = input.concat(augmented);
        let (xp, xc) = self.embedding.forward(&both);

        // recurrent encoder: inputs, plus augmented when the swapped direction is on
        let rec_seqs = if swapped { 0..2 * b } else { 0..b };
        let (rp, rc, _, roffs) = sub_batch(&xp, &xc, &both, rec_seqs.clone());
        let (rec_logits, rec_cache) = self.recurrent.forward(&rp, &rc, &roffs);

        // attention encoder: augmented, plus inputs when the swapped direction is on
        let att_seqs = if swapped { 0..2 * b } else { b..2 * b };
        let (ap, ac, at, aoffs) = sub_batch(&xp, &xc, &both, att_seqs.clone());
        let (att_logits, att_cache) = self.attention.forward(&ap, &ac, &at, &aoffs, dropout_rng);

        let rec = to_f64(&rec_logits);
        let att = to_f64(&att_logits);
        let au_rows = if swapped { b..2 * b } else { 0..b };
        let fwd = directional_loss_grad(
            rec.slice(s![..b, ..]),
            att.slice(s![au_rows.clone(), ..]),
            labels,
            cfg,
            denominator,
        )?;
        let mut d_rec = Array2::<f64>::zeros(rec.raw_dim());
        let mut d_att = Array2::<f64>::zeros(att.raw_dim());
        d_rec.slice_mut(s![..b, ..]).assign(&fwd.d_in);
        d_att.slice_mut(s![au_rows, ..]).assign(&fwd.d_au);
        let mut loss = StepLoss {
            forward: fwd.loss,
            ..Default::default()
        };
        if swapped {
            let sw = directional_loss_grad(
                att.slice(s![..b, ..]),
                rec.slice(s![b.., ..]),
                labels,
                cfg,
                denominator,
            )?;
            d_att.slice_mut(s![..b, ..]).scaled_add(1.0, &sw.d_in);
            d_rec.slice_mut(s![b.., ..]).scaled_add(1.0, &sw.d_au);
            loss.swapped = sw.loss;
        }

        let mut grad = self.zeros_like();
        let (drp, drc) = self
            .recurrent
            .backward(&rec_cache, &to_f32(&d_rec), &mut grad.recurrent);
        let (dap, dac) = self
            .attention
            .backward(&att_cache, &at, &to_f32(&d_att), &mut grad.attention);
        let mut dxp = Array2::<f32>::zeros(xp.raw_dim());
        let mut dxc = Array2::<f32>::zeros(xc.raw_dim());
        let rows = |seqs: &std::ops::Range<usize>| both.offsets[seqs.start]..both.offsets[seqs.end];
        let rr = rows(&rec_seqs);
        dxp.slice_mut(s![rr.clone(), ..]).scaled_add(1.0, &drp);
        dxc.slice_mut(s![rr, ..]).scaled_add(1.0, &drc);
        let ar = rows(&att_seqs);
        dxp.slice_mut(s![ar.clone(), ..]).scaled_add(1.0, &dap);
        dxc.slice_mut(s![ar, ..]).scaled_add(1.0, &dac);
        self.embedding
            .backward(&both, (&xp, &xc), (&dxp, &dxc), &mut grad.embedding);
        grad.zero_frozen();
        Ok((grad, loss))
    }
}

impl Parameters for TulModel {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.embedding.visit(&join(prefix, "embedding"), out);
        self.recurrent.visit(&join(prefix, "recurrent"), out);
        self.attention.visit(&join(prefix, "attention"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.embedding.visit_mut(&join(prefix, "embedding"), out);
        self.recurrent.visit_mut(&join(prefix, "recurrent"), out);
        self.attention.visit_mut(&join(prefix, "attention"), out);
    }
}
