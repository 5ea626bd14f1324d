//! Deterministic synthetic check-ins with separable per-user habits.
//!
//! Every user owns a private set of POIs and a handful of preferred hours.
//! A fraction of each user's POI set is a pool shared by all users; that pool
//! and the time jitter are the difficulty knobs.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CheckinRecord, SECONDS_PER_DAY};
use crate::error::{Result, TulError};

/// 2012-04-01T00:00:00Z.
pub const BASE_EPOCH: i64 = 1_333_238_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_days: usize,
    /// Inclusive bounds on check-ins per user per day.
    pub checkins_min: usize,
    pub checkins_max: usize,
    pub pois_per_user: usize,
    /// Fraction of each user's POI set taken from the pool shared by everyone.
    pub overlap: f64,
    pub category_count: usize,
    /// Uniform jitter around the preferred hour, in minutes.
    pub time_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 10,
            num_days: 60,
            checkins_min: 2,
            checkins_max: 4,
            pois_per_user: 12,
            overlap: 0.2,
            category_count: 8,
            time_jitter: 90.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TulError::Config(m.to_string()));
        if self.num_users < 2 {
            return bad("synth.num_users must be at least 2");
        }
        if self.num_days == 0 || self.pois_per_user == 0 || self.category_count == 0 {
            return bad("synth.num_days, synth.pois_per_user and synth.category_count must be positive");
        }
        if self.checkins_min == 0 || self.checkins_min > self.checkins_max {
            return bad("synth check-ins per day need 1 <= min <= max");
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad("synth.overlap must be in [0, 1)");
        }
        if !(self.time_jitter >= 0.0 && self.time_jitter.is_finite()) {
            return bad("synth.time_jitter must be non-negative");
        }
        Ok(())
    }

    pub fn shared_pool_size(&self) -> usize {
        let shared = (self.overlap * self.pois_per_user as f64).round() as usize;
        shared.min(self.pois_per_user - 1)
    }
}

struct Profile {
    pois: Vec<usize>,
    hours: Vec<u32>,
}

/// Records ordered by timestamp, then user.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<CheckinRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shared = cfg.shared_pool_size();
    let private = cfg.pois_per_user - shared;
    let total_pois = shared + private * cfg.num_users;
    let poi_category: Vec<usize> = (0..total_pois)
        .map(|_| rng.random_range(0..cfg.category_count))
        .collect();

    // hours between 06:00 and 22:00 so jitter rarely hits the clamp
    let all_hours: Vec<u32> = (6..=22).collect();
    let profiles: Vec<Profile> = (0..cfg.num_users)
        .map(|u| {
            let mut pois: Vec<usize> = (0..shared).collect();
            pois.extend(shared + u * private..shared + (u + 1) * private);
            let mut hours: Vec<u32> = all_hours
                .choose_multiple(&mut rng, cfg.checkins_max.min(all_hours.len()))
                .copied()
                .collect();
            hours.sort_unstable();
            Profile { pois, hours }
        })
        .collect();

    let jitter = (cfg.time_jitter * 60.0).round() as i64;
    let mut records = Vec::new();
    for day in 0..cfg.num_days as i64 {
        let day_start = BASE_EPOCH + day * SECONDS_PER_DAY;
        for (u, profile) in profiles.iter().enumerate() {
            let n = rng.random_range(cfg.checkins_min..=cfg.checkins_max);
            let mut slots: Vec<i64> = (0..n)
                .map(|i| {
                    let hour = profile.hours[i % profile.hours.len()] as i64;
                    let offset = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
                    (hour * 3600 + offset).clamp(0, SECONDS_PER_DAY - 1)
                })
                .collect();
            slots.sort_unstable();
            for t in slots {
                let poi = *profile.pois.choose(&mut rng).expect("non-empty POI set");
                records.push(CheckinRecord::new(
                    format!("user_{u:03}"),
                    day_start + t,
                    format!("poi_{poi:05}"),
                    format!("cat_{:02}", poi_category[poi]),
                ));
            }
        }
    }
    records.sort_by_key(|r| r.timestamp);
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_checkins, segment_trajectories, write_checkins, FormatSpec};
    use std::collections::{HashMap, HashSet};

    fn fixed(n: usize) -> SynthConfig {
        SynthConfig {
            checkins_min: n,
            checkins_max: n,
            ..Default::default()
        }
    }

    #[test]
    fn record_and_trajectory_counts() {
        let recs = generate(&fixed(3)).unwrap();
        assert_eq!(recs.len(), 1800);
        assert_eq!(segment_trajectories(&recs).len(), 600);
    }

    #[test]
    fn same_seed_same_stream() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig {
            seed: 8,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_overlap_is_user_disjoint() {
        let recs = generate(&SynthConfig {
            overlap: 0.0,
            ..Default::default()
        })
        .unwrap();
        let mut owners: HashMap<&str, HashSet<&str>> = HashMap::new();
        for r in &recs {
            owners.entry(&r.poi_id).or_default().insert(&r.user_id);
        }
        assert!(owners.values().all(|u| u.len() == 1));
    }

    #[test]
    fn shared_pool_reaches_several_users() {
        let cfg = SynthConfig {
            overlap: 0.5,
            ..Default::default()
        };
        let recs = generate(&cfg).unwrap();
        let mut owners: HashMap<&str, HashSet<&str>> = HashMap::new();
        for r in &recs {
            owners.entry(&r.poi_id).or_default().insert(&r.user_id);
        }
        assert_eq!(owners.values().filter(|u| u.len() > 1).count(), cfg.shared_pool_size());
    }

    #[test]
    fn one_trajectory_per_user_day_within_the_day() {
        let cfg = SynthConfig {
            time_jitter: 600.0,
            num_days: 5,
            ..Default::default()
        };
        let trajs = segment_trajectories(&generate(&cfg).unwrap());
        assert_eq!(trajs.len(), 50);
        let per_day: HashSet<(String, i64)> = trajs.iter().map(|t| (t.user_id.clone(), t.interval_index)).collect();
        assert_eq!(per_day.len(), 50);
        assert!(trajs
            .iter()
            .all(|t| (cfg.checkins_min..=cfg.checkins_max).contains(&t.len())));
    }

    #[test]
    fn tsv_round_trip() {
        let recs = generate(&SynthConfig {
            num_days: 4,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_checkins(&mut buf, &recs).unwrap();
        let back = parse_checkins(buf.as_slice(), &FormatSpec::default()).unwrap();
        assert_eq!(back.malformed, 0);
        assert_eq!(back.records, recs);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig { num_users: 1, ..Default::default() },
            SynthConfig { overlap: 1.0, ..Default::default() },
            SynthConfig { checkins_min: 3, checkins_max: 2, ..Default::default() },
        ] {
            assert!(matches!(generate(&cfg), Err(TulError::Config(_))));
        }
    }
}
