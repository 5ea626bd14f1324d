//! Long-term augmented trajectories built from a user's own history.
//!
//! Augmentation only ever feeds training batches; the linking path works on
//! the raw input trajectory.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SubTrajectory;
use crate::error::{Result, TulError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Merge the sub-trajectories of the `k/2` days on either side.
    Neighbor,
    /// Merge `k` randomly drawn sub-trajectories of the same user.
    Random,
    None,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Neighbor => "neighbor",
            Strategy::Random => "random",
            Strategy::None => "none",
        })
    }
}

impl FromStr for Strategy {
    type Err = TulError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neighbor" => Ok(Strategy::Neighbor),
            "random" => Ok(Strategy::Random),
            "none" => Ok(Strategy::None),
            other => Err(TulError::Config(format!(
                "unknown augmentation strategy {other:?} (expected neighbor, random or none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Random,
            k: 8,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategy == Strategy::Neighbor && !self.k.is_multiple_of(2) {
            return Err(TulError::Config(format!(
                "neighbor augmentation needs an even k, got {}",
                self.k
            )));
        }
        Ok(())
    }

    /// Augmented counterpart of `history[index]`.
    pub fn augment<R: Rng + ?Sized>(
        &self,
        history: &[SubTrajectory],
        index: usize,
        rng: &mut R,
    ) -> SubTrajectory {
        match self.strategy {
            Strategy::None => history[index].clone(),
            Strategy::Neighbor => neighbor_augment(history, index, self.k),
            Strategy::Random => random_augment(history, &history[index], self.k, rng),
        }
    }
}

fn merge(input: &SubTrajectory, parts: impl IntoIterator<Item = SubTrajectory>) -> SubTrajectory {
    let mut records: Vec<_> = parts.into_iter().flat_map(|t| t.records).collect();
    records.sort_by_key(|r| r.timestamp);
    SubTrajectory {
        user_id: input.user_id.clone(),
        interval_index: input.interval_index,
        records,
    }
}

/// Concatenates every sub-trajectory of `history` whose day index lies within
/// `k/2` days of `history[input_index]`. Missing days are skipped and the
/// window is truncated at the ends of the history.
pub fn neighbor_augment(history: &[SubTrajectory], input_index: usize, k: usize) -> SubTrajectory {
    let input = &history[input_index];
    let half = (k / 2) as i64;
    let window = history
        .iter()
        .filter(|t| (t.interval_index - input.interval_index).abs() <= half)
        .cloned();
    merge(input, window)
}

/// Merges `input` with `k` sub-trajectories drawn uniformly without
/// replacement from the rest of `history` (all of them if fewer remain).
pub fn random_augment<R: Rng + ?Sized>(
    history: &[SubTrajectory],
    input: &SubTrajectory,
    k: usize,
    rng: &mut R,
) -> SubTrajectory {
    if k == 0 {
        return input.clone();
    }
    let others: Vec<&SubTrajectory> = history
        .iter()
        .filter(|t| t.interval_index != input.interval_index)
        .collect();
    let take = k.min(others.len());
    let mut picked: Vec<usize> = sample(rng, others.len(), take).into_vec();
    picked.sort_unstable();
    merge(
        input,
        std::iter::once(input.clone()).chain(picked.into_iter().map(|i| others[i].clone())),
    )
}
