//! Ranking and macro-averaged classification metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TulError};

/// Users of one trajectory ordered by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub users: Vec<usize>,
    pub scores: Vec<f32>,
}

impl Ranking {
    /// Sorts by descending score; equal scores keep the lower user index first.
    pub fn from_scores(scores: &[f32]) -> Self {
        let mut users: Vec<usize> = (0..scores.len()).collect();
        users.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let sorted = users.iter().map(|&u| scores[u]).collect();
        Self { users, scores: sorted }
    }

    pub fn top(&self) -> usize {
        self.users[0]
    }

    /// 0-based position of `user` in the ranking.
    pub fn rank_of(&self, user: usize) -> Option<usize> {
        self.users.iter().position(|&u| u == user)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub num_users: usize,
    pub rankings: Vec<Ranking>,
}

impl LinkResult {
    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.rankings.iter().map(Ranking::top).collect()
    }
}

fn check_labels(result: &LinkResult, labels: &[usize]) -> Result<()> {
    if labels.len() != result.len() {
        return Err(TulError::Shape(format!(
            "{} rankings but {} labels",
            result.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= result.num_users) {
        return Err(TulError::Data(format!("label {l} outside [0, {})", result.num_users)));
    }
    Ok(())
}

pub fn acc_at_k(result: &LinkResult, labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > result.num_users {
        return Err(TulError::Config(format!(
            "k must be in [1, {}], got {k}",
            result.num_users
        )));
    }
    check_labels(result, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = result
        .rankings
        .iter()
        .zip(labels)
        .filter(|(r, &l)| r.users[..k].contains(&l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-user precision, recall and F1 averaged over all `num_users` users.
/// Any zero denominator yields 0 for that user.
pub fn macro_prf_from_predictions(predictions: &[usize], labels: &[usize], num_users: usize) -> MacroScores {
    if num_users == 0 {
        return MacroScores::default();
    }
    let mut tp = vec![0usize; num_users];
    let mut predicted = vec![0usize; num_users];
    let mut actual = vec![0usize; num_users];
    for (&p, &l) in predictions.iter().zip(labels) {
        predicted[p] += 1;
        actual[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut s = MacroScores::default();
    for u in 0..num_users {
        let p = ratio(tp[u], predicted[u]);
        let r = ratio(tp[u], actual[u]);
        s.precision += p;
        s.recall += r;
        s.f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let n = num_users as f64;
    MacroScores {
        precision: s.precision / n,
        recall: s.recall / n,
        f1: s.f1 / n,
    }
}

pub fn macro_prf(result: &LinkResult, labels: &[usize]) -> Result<MacroScores> {
    check_labels(result, labels)?;
    Ok(macro_prf_from_predictions(&result.predictions(), labels, result.num_users))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_trajectories: usize,
    pub num_users: usize,
    pub acc_at: BTreeMap<usize, f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Default cut-offs, restricted to those not exceeding the user count.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

impl MetricReport {
    pub fn compute(result: &LinkResult, labels: &[usize], ks: &[usize]) -> Result<Self> {
        let mut acc_at = BTreeMap::new();
        for &k in ks.iter().filter(|&&k| k <= result.num_users) {
            acc_at.insert(k, acc_at_k(result, labels, k)?);
        }
        let m = macro_prf(result, labels)?;
        Ok(Self {
            num_trajectories: labels.len(),
            num_users: result.num_users,
            acc_at,
            macro_precision: m.precision,
            macro_recall: m.recall,
            macro_f1: m.f1,
        })
    }

    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, f64)> = self
            .acc_at
            .iter()
            .map(|(k, v)| (format!("Acc@{k}"), *v))
            .collect();
        rows.push(("Macro-P".into(), self.macro_precision));
        rows.push(("Macro-R".into(), self.macro_recall));
        rows.push(("Macro-F1".into(), self.macro_f1));
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let mut out = format!(
            "{} trajectories, {} users\n",
            self.num_trajectories, self.num_users
        );
        for (name, v) in rows {
            let _ = writeln!(out, "{name:<width$}  {:>7.2}%", 100.0 * v);
        }
        out
    }
}

/// `k,accuracy` rows for every k in `1..=num_users`.
pub fn accuracy_curve_csv(result: &LinkResult, labels: &[usize]) -> Result<String> {
    let mut out = String::from("k,accuracy\n");
    for k in 1..=result.num_users {
        let _ = writeln!(out, "{k},{:.6}", acc_at_k(result, labels, k)?);
    }
    Ok(out)
}
