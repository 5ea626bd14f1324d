//! Longest-common-subsequence nearest-neighbour baseline over POI sequences.

use std::collections::HashMap;

use crate::data::SubTrajectory;
use crate::par::Execution;

pub fn lcss_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Labelled training trajectories with POIs interned to integers.
#[derive(Debug, Clone)]
pub struct LcssIndex {
    pois: HashMap<String, u32>,
    train: Vec<(usize, Vec<u32>)>,
}

impl LcssIndex {
    pub fn new<'a, I>(train: I) -> Self
    where
        I: IntoIterator<Item = (usize, &'a SubTrajectory)>,
    {
        let mut pois = HashMap::new();
        let train = train
            .into_iter()
            .map(|(user, t)| {
                let seq = t
                    .records
                    .iter()
                    .map(|r| {
                        let next = pois.len() as u32;
                        *pois.entry(r.poi_id.clone()).or_insert(next)
                    })
                    .collect();
                (user, seq)
            })
            .collect();
        Self { pois, train }
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    /// User of the most similar training trajectory; the earliest wins ties.
    pub fn link(&self, test: &SubTrajectory) -> Option<usize> {
        // unseen POIs cannot match anything
        let seq: Vec<u32> = test
            .records
            .iter()
            .map(|r| self.pois.get(&r.poi_id).copied().unwrap_or(u32::MAX))
            .collect();
        let mut best: Option<(usize, usize)> = None;
        for (user, t) in &self.train {
            let len = lcss_length(&seq, t);
            if best.is_none_or(|(b, _)| len > b) {
                best = Some((len, *user));
            }
        }
        best.map(|(_, u)| u)
    }

    pub fn link_all(&self, tests: &[SubTrajectory], exec: Execution) -> Vec<Option<usize>> {
        exec.map(tests, |t| self.link(t))
    }
}

pub fn lcss_link<'a, I>(train: I, test: &SubTrajectory) -> Option<usize>
where
    I: IntoIterator<Item = (usize, &'a SubTrajectory)>,
{
    LcssIndex::new(train).link(test)
}
