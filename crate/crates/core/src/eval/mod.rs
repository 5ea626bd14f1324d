//! Linking trajectories to users and scoring the result.
//!
//! Linking runs the shared embedding and the recurrent encoder only. The
//! attention encoder and trajectory augmentation are training-time machinery.

mod lcss;
mod metrics;

pub use lcss::{lcss_length, lcss_link, LcssIndex};
pub use metrics::{
    acc_at_k, accuracy_curve_csv, macro_prf, macro_prf_from_predictions, LinkResult, MacroScores,
    MetricReport, Ranking, DEFAULT_KS,
};

use crate::data::{SubTrajectory, Vocabulary};
use crate::embedding::TokenBatch;
use crate::error::{Result, TulError};
use crate::model::TulModel;
use crate::par::Execution;
use crate::train::TrainedModel;

/// Trajectories scored per forward pass.
pub const LINK_CHUNK: usize = 64;

pub fn link(model: &TrainedModel, trajs: &[SubTrajectory]) -> LinkResult {
    link_with(model, trajs, Execution::default())
}

pub fn link_with(model: &TrainedModel, trajs: &[SubTrajectory], exec: Execution) -> LinkResult {
    let cfg = &model.config.model;
    score_trajectories(&model.model, &model.vocab, trajs, cfg.time_unit, cfg.max_len, exec)
}

pub fn score_trajectories(
    model: &TulModel,
    vocab: &Vocabulary,
    trajs: &[SubTrajectory],
    time_unit: f64,
    max_len: usize,
    exec: Execution,
) -> LinkResult {
    let chunks = exec.map_chunks(trajs, LINK_CHUNK, |_, chunk| {
        let batch = TokenBatch::from_trajectories(chunk, vocab, time_unit, Some(max_len));
        let scores = model.score(&batch);
        scores
            .rows()
            .into_iter()
            .map(|row| Ranking::from_scores(row.as_slice().expect("standard layout")))
            .collect::<Vec<_>>()
    });
    LinkResult {
        num_users: model.num_users(),
        rankings: chunks.into_iter().flatten().collect(),
    }
}

/// User indices of labelled trajectories; unknown users are a data error.
pub fn labels_for(vocab: &Vocabulary, trajs: &[SubTrajectory]) -> Result<Vec<usize>> {
    trajs
        .iter()
        .map(|t| {
            vocab
                .user(&t.user_id)
                .ok_or_else(|| TulError::Data(format!("user {:?} is not in the model vocabulary", t.user_id)))
        })
        .collect()
}

pub fn evaluate(model: &TrainedModel, trajs: &[SubTrajectory], ks: &[usize]) -> Result<(LinkResult, MetricReport)> {
    let labels = labels_for(&model.vocab, trajs)?;
    let result = link(model, trajs);
    let report = MetricReport::compute(&result, &labels, ks)?;
    Ok((result, report))
}
