use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{SubTrajectory, SECONDS_PER_DAY};
use crate::error::{Result, TulError};

/// One user's sub-trajectories in chronological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTrajectories {
    pub user_id: String,
    pub trajectories: Vec<SubTrajectory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRule {
    /// Users with fewer sub-trajectories are dropped.
    pub min_trajectories: usize,
}

impl Default for SplitRule {
    fn default() -> Self {
        Self { min_trajectories: 5 }
    }
}

impl SplitRule {
    /// `(train, validation, test)` sizes for a user with `n` sub-trajectories:
    /// the first `floor(0.8 n)` form the training pool, whose most recent
    /// `ceil(0.2 pool)` become validation.
    pub fn sizes(n: usize) -> (usize, usize, usize) {
        let pool = 4 * n / 5;
        let val = pool.div_ceil(5);
        (pool - val, val, n - pool)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<UserTrajectories>,
    pub validation: Vec<UserTrajectories>,
    pub test: Vec<UserTrajectories>,
    pub dropped: Vec<String>,
}

fn flatten(parts: &[UserTrajectories]) -> Vec<SubTrajectory> {
    parts
        .iter()
        .flat_map(|u| u.trajectories.iter().cloned())
        .collect()
}

impl DatasetSplit {
    pub fn train_trajectories(&self) -> Vec<SubTrajectory> {
        flatten(&self.train)
    }

    pub fn validation_trajectories(&self) -> Vec<SubTrajectory> {
        flatten(&self.validation)
    }

    pub fn test_trajectories(&self) -> Vec<SubTrajectory> {
        flatten(&self.test)
    }

    pub fn all_parts(&self) -> impl Iterator<Item = &UserTrajectories> {
        self.train
            .iter()
            .chain(self.validation.iter())
            .chain(self.test.iter())
    }
}

/// Chronological per-user split. Users below the rule's threshold are dropped
/// with a warning; dropping every user is fatal.
pub fn split_dataset(per_user: Vec<UserTrajectories>, rule: &SplitRule) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    let min = rule.min_trajectories.max(1);
    for mut user in per_user {
        let n = user.trajectories.len();
        if n < min {
            log::warn!(
                "dropping user {} with {n} sub-trajectories (< {min})",
                user.user_id
            );
            split.dropped.push(user.user_id);
            continue;
        }
        user.trajectories.sort_by_key(|t| t.interval_index);
        let (n_train, n_val, _) = SplitRule::sizes(n);
        let test = user.trajectories.split_off(n_train + n_val);
        let val = user.trajectories.split_off(n_train);
        split.validation.push(UserTrajectories {
            user_id: user.user_id.clone(),
            trajectories: val,
        });
        split.test.push(UserTrajectories {
            user_id: user.user_id.clone(),
            trajectories: test,
        });
        split.train.push(user);
    }
    if split.train.is_empty() {
        return Err(TulError::Data(format!(
            "every user has fewer than {min} sub-trajectories; nothing left to split"
        )));
    }
    Ok(split)
}

/// Keeps the `n` users with the most check-ins (ties broken by first occurrence).
pub fn filter_top_users(per_user: Vec<UserTrajectories>, n: usize) -> Vec<UserTrajectories> {
    let mut ranked: Vec<(usize, usize)> = per_user
        .iter()
        .enumerate()
        .map(|(i, u)| (i, u.trajectories.iter().map(SubTrajectory::len).sum()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep: HashSet<usize> = ranked.into_iter().take(n).map(|(i, _)| i).collect();
    per_user
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, u)| u)
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_trajectories: usize,
    pub num_checkins: usize,
    pub num_pois: usize,
    pub num_categories: usize,
    /// Span from the first to the last check-in, in days.
    pub duration_days: f64,
}

pub fn compute_stats(split: &DatasetSplit) -> DatasetStats {
    let mut users = HashSet::new();
    let mut pois = HashSet::new();
    let mut cats = HashSet::new();
    let mut stats = DatasetStats::default();
    let mut span: Option<(i64, i64)> = None;
    for part in split.all_parts() {
        for t in &part.trajectories {
            users.insert(t.user_id.as_str());
            stats.num_trajectories += 1;
            for r in &t.records {
                stats.num_checkins += 1;
                pois.insert(r.poi_id.as_str());
                cats.insert(r.category_id.as_str());
                span = Some(match span {
                    None => (r.timestamp, r.timestamp),
                    Some((lo, hi)) => (lo.min(r.timestamp), hi.max(r.timestamp)),
                });
            }
        }
    }
    stats.num_users = users.len();
    stats.num_pois = pois.len();
    stats.num_categories = cats.len();
    stats.duration_days = span.map_or(0.0, |(lo, hi)| (hi - lo) as f64 / SECONDS_PER_DAY as f64);
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{group_by_user, segment_trajectories, CheckinRecord};

    fn user_with_days(user: &str, days: i64) -> UserTrajectories {
        let recs: Vec<CheckinRecord> = (0..days)
            .map(|d| CheckinRecord::new(user, d * SECONDS_PER_DAY + 3600, format!("p{d}"), "c"))
            .collect();
        group_by_user(segment_trajectories(&recs)).remove(0)
    }

    #[test]
    fn split_sizes() {
        assert_eq!(SplitRule::sizes(10), (6, 2, 2));
        assert_eq!(SplitRule::sizes(5), (3, 1, 1));
        assert_eq!(SplitRule::sizes(60), (38, 10, 12));
    }

    #[test]
    fn ten_and_five_and_four() {
        let split = split_dataset(
            vec![user_with_days("a", 10), user_with_days("b", 5), user_with_days("c", 4)],
            &SplitRule::default(),
        )
        .unwrap();
        let count = |p: &[UserTrajectories], u: &str| {
            p.iter().find(|x| x.user_id == u).map(|x| x.trajectories.len())
        };
        assert_eq!(count(&split.train, "a"), Some(6));
        assert_eq!(count(&split.validation, "a"), Some(2));
        assert_eq!(count(&split.test, "a"), Some(2));
        assert_eq!(count(&split.train, "b"), Some(3));
        assert_eq!(count(&split.validation, "b"), Some(1));
        assert_eq!(count(&split.test, "b"), Some(1));
        assert_eq!(split.dropped, vec!["c".to_string()]);
        // chronology: validation is the tail of the pool, test follows it
        let last_train = split.train[0].trajectories.last().unwrap().interval_index;
        let first_val = split.validation[0].trajectories[0].interval_index;
        let first_test = split.test[0].trajectories[0].interval_index;
        assert!(last_train < first_val && first_val < first_test);
    }

    #[test]
    fn all_dropped_is_fatal() {
        assert!(split_dataset(vec![user_with_days("a", 2)], &SplitRule::default()).is_err());
    }

    #[test]
    fn stats_on_small_and_empty() {
        let split = DatasetSplit {
            train: vec![user_with_days("a", 3), user_with_days("b", 3)],
            ..Default::default()
        };
        let s = compute_stats(&split);
        assert_eq!(s.num_trajectories, 6);
        assert_eq!(s.num_users, 2);
        assert_eq!(compute_stats(&DatasetSplit::default()), DatasetStats::default());
    }

    #[test]
    fn top_users_filter() {
        let users = vec![user_with_days("a", 3), user_with_days("b", 7), user_with_days("c", 5)];
        let kept = filter_top_users(users, 2);
        let ids: Vec<&str> = kept.iter().map(|u| u.user_id.as_str()).collect();
        assert_eq!(ids, vec!["b", "c"]);
    }
}
