//! Check-in records, daily segmentation, vocabularies and the chronological split.

mod parse;
mod segment;
mod split;
mod vocab;

pub use parse::{
    parse_checkins, read_checkins, write_checkins, FormatSpec, ParseOutcome, TimeFormat,
};
pub use segment::{group_by_user, segment_trajectories, time_slice, SECONDS_PER_DAY};
pub use split::{
    compute_stats, filter_top_users, split_dataset, DatasetSplit, DatasetStats, SplitRule,
    UserTrajectories,
};
pub use vocab::{build_vocab, Vocabulary, OOV_INDEX};

use crate::error::Result;

use serde::{Deserialize, Serialize};

/// One visit event: user `user_id` checked in at `poi_id` at `timestamp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckinRecord {
    pub user_id: String,
    /// Epoch seconds, UTC.
    pub timestamp: i64,
    pub poi_id: String,
    pub category_id: String,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
}

impl CheckinRecord {
    pub fn new(
        user_id: impl Into<String>,
        timestamp: i64,
        poi_id: impl Into<String>,
        category_id: impl Into<String>,
    ) -> Self {
        Self {
            user_id: user_id.into(),
            timestamp,
            poi_id: poi_id.into(),
            category_id: category_id.into(),
            lat: None,
            lon: None,
        }
    }
}

/// A user's check-ins within one 24-hour interval, in chronological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTrajectory {
    pub user_id: String,
    /// Day index `floor(timestamp / 86400)`.
    pub interval_index: i64,
    pub records: Vec<CheckinRecord>,
}

impl SubTrajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first_timestamp(&self) -> Option<i64> {
        self.records.first().map(|r| r.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.records.last().map(|r| r.timestamp)
    }

    pub fn poi_ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.poi_id.as_str())
    }
}

/// Segments, optionally keeps the `top_users` most active users (0 keeps all)
/// and splits chronologically.
pub fn prepare_split(records: &[CheckinRecord], rule: &SplitRule, top_users: usize) -> Result<DatasetSplit> {
    let mut per_user = group_by_user(segment_trajectories(records));
    if top_users > 0 {
        per_user = filter_top_users(per_user, top_users);
    }
    split_dataset(per_user, rule)
}
