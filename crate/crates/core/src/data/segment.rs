use std::collections::HashMap;

use super::{CheckinRecord, SubTrajectory, UserTrajectories};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Hour-of-day bucket of a timestamp: `floor((t mod 86400) / (86400 / slices))`.
pub fn time_slice(timestamp: i64, num_time_slices: usize) -> usize {
    debug_assert!(num_time_slices > 0 && SECONDS_PER_DAY % num_time_slices as i64 == 0);
    let width = SECONDS_PER_DAY / num_time_slices as i64;
    (timestamp.rem_euclid(SECONDS_PER_DAY) / width) as usize
}

/// Cuts records into per-user, per-UTC-day sub-trajectories.
///
/// Users appear in order of first occurrence in the input, days ascending
/// within a user. Records with equal timestamps keep their input order.
pub fn segment_trajectories(records: &[CheckinRecord]) -> Vec<SubTrajectory> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_user: HashMap<&str, Vec<&CheckinRecord>> = HashMap::new();
    for r in records {
        by_user
            .entry(r.user_id.as_str())
            .or_insert_with(|| {
                order.push(r.user_id.as_str());
                Vec::new()
            })
            .push(r);
    }

    let mut out = Vec::new();
    for user in order {
        let mut recs = by_user.remove(user).unwrap_or_default();
        recs.sort_by_key(|r| r.timestamp);
        let mut current: Option<SubTrajectory> = None;
        for r in recs {
            let day = r.timestamp.div_euclid(SECONDS_PER_DAY);
            match current.as_mut() {
                Some(t) if t.interval_index == day => t.records.push(r.clone()),
                _ => {
                    out.extend(current.take());
                    current = Some(SubTrajectory {
                        user_id: user.to_string(),
                        interval_index: day,
                        records: vec![r.clone()],
                    });
                }
            }
        }
        out.extend(current);
    }
    out
}

/// Groups sub-trajectories by user, preserving first-occurrence order and
/// sorting each user's list chronologically.
pub fn group_by_user(trajectories: Vec<SubTrajectory>) -> Vec<UserTrajectories> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<UserTrajectories> = Vec::new();
    for t in trajectories {
        let slot = *index.entry(t.user_id.clone()).or_insert_with(|| {
            groups.push(UserTrajectories {
                user_id: t.user_id.clone(),
                trajectories: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].trajectories.push(t);
    }
    for g in &mut groups {
        g.trajectories.sort_by_key(|t| t.interval_index);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: &str, t: i64) -> CheckinRecord {
        CheckinRecord::new(u, t, "p", "c")
    }

    #[test]
    fn same_day_records_form_one_trajectory() {
        let out = segment_trajectories(&[rec("u1", 100), rec("u1", 200)]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 2);
    }

    #[test]
    fn day_boundary_splits() {
        let out = segment_trajectories(&[rec("u1", 100), rec("u1", 90_000)]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].interval_index, 0);
        assert_eq!(out[1].interval_index, 1);
    }

    #[test]
    fn users_are_separate() {
        let out = segment_trajectories(&[rec("u1", 100), rec("u2", 100)]);
        assert_eq!(out.len(), 2);
        assert_ne!(out[0].user_id, out[1].user_id);
    }

    #[test]
    fn unsorted_input_is_sorted() {
        let out = segment_trajectories(&[rec("u1", 500), rec("u1", 100), rec("u1", 300)]);
        let ts: Vec<i64> = out[0].records.iter().map(|r| r.timestamp).collect();
        assert_eq!(ts, vec![100, 300, 500]);
    }

    #[test]
    fn empty_input() {
        assert!(segment_trajectories(&[]).is_empty());
    }

    #[test]
    fn time_slices() {
        // 2010-01-01 13:45 UTC
        assert_eq!(time_slice(1_262_353_500, 24), 13);
        assert_eq!(time_slice(1_262_304_000, 24), 0);
        assert_eq!(time_slice(1_262_304_000 + 86_399, 24), 23);
        assert_eq!(time_slice(1_262_304_000 + 86_399, 4), 3);
    }
}
