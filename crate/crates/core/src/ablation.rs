//! Model variants that each flip one switch of the full configuration, and
//! the augmentation k sweep.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::Strategy;
use crate::config::RunConfig;
use crate::data::DatasetSplit;
use crate::error::{Result, TulError};
use crate::eval::{labels_for, score_trajectories, MetricReport, DEFAULT_KS};
use crate::par::Execution;
use crate::train::train_with;
use crate::transformer::PositionKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// No category or time features in the check-in embedding.
    TulCa,
    /// Index-based fixed sinusoids instead of the temporal encoding.
    TulTa,
    /// Swapped-input direction removed.
    NoMutual,
    /// Distillation weight set to zero.
    NoKl,
    /// Cross-entropy on the input-trajectory logits removed.
    NoInputCe,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::TulCa,
        Variant::TulTa,
        Variant::NoMutual,
        Variant::NoKl,
        Variant::NoInputCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TulCa => "tul-ca",
            Variant::TulTa => "tul-ta",
            Variant::NoMutual => "no-mutual",
            Variant::NoKl => "no-kl",
            Variant::NoInputCe => "no-input-ce",
        }
    }

    /// The single key this variant overrides, if any.
    pub fn switch(self) -> Option<(&'static str, &'static str)> {
        match self {
            Variant::Full => None,
            Variant::TulCa => Some(("model.use_context", "false")),
            Variant::TulTa => Some(("pe.kind", "sinusoidal")),
            Variant::NoMutual => Some(("distill.disable_l2", "true")),
            Variant::NoKl => Some(("distill.lambda", "0")),
            Variant::NoInputCe => Some(("distill.disable_input_ce", "true")),
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::TulCa => cfg.train.model.use_context = false,
            Variant::TulTa => cfg.train.model.position = PositionKind::Sinusoidal,
            Variant::NoMutual => cfg.train.distill.disable_l2 = true,
            Variant::NoKl => cfg.train.distill.lambda = 0.0,
            Variant::NoInputCe => cfg.train.distill.disable_input_ce = true,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = TulError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                TulError::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Test-split scores of one trained configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub label: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_val_acc1: f64,
    pub report: MetricReport,
}

/// Trains `cfg` with seed `seed` and scores the test split.
pub fn run_once(split: &DatasetSplit, cfg: &RunConfig, seed: u64, label: &str, exec: Execution) -> Result<RunScores> {
    let mut cfg = cfg.clone();
    cfg.apply_seed(&seed.to_string())?;
    cfg.validate()?;
    let trained = train_with(split, &cfg.train, exec)?;
    let test = split.test_trajectories();
    let labels = labels_for(&trained.vocab, &test)?;
    let m = &trained.config.model;
    let result = score_trajectories(&trained.model, &trained.vocab, &test, m.time_unit, m.max_len, exec);
    let report = MetricReport::compute(&result, &labels, &DEFAULT_KS)?;
    log::info!(
        "{label} seed {seed}: Acc@1 {:.4} Macro-F1 {:.4}",
        report.acc_at[&1],
        report.macro_f1
    );
    Ok(RunScores {
        label: label.to_string(),
        seed,
        epochs: trained.epochs_run(),
        best_val_acc1: trained.best_val_acc1,
        report,
    })
}

/// Seed-averaged scores per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub acc1: f64,
    pub acc5: Option<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub runs: Vec<RunScores>,
}

impl ComparisonRow {
    fn from_runs(label: String, runs: Vec<RunScores>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = |f: &dyn Fn(&RunScores) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let acc5 = runs
            .iter()
            .map(|r| r.report.acc_at.get(&5).copied())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        Self {
            acc1: mean(&|r| r.report.acc_at[&1]),
            acc5,
            macro_precision: mean(&|r| r.report.macro_precision),
            macro_recall: mean(&|r| r.report.macro_recall),
            macro_f1: mean(&|r| r.report.macro_f1),
            label,
            runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        let mut out = format!(
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            "variant", "Acc@1", "Acc@5", "Macro-P", "Macro-R", "Macro-F1"
        );
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
                r.label,
                pct(r.acc1),
                r.acc5.map_or_else(|| "-".into(), pct),
                pct(r.macro_precision),
                pct(r.macro_recall),
                pct(r.macro_f1)
            );
        }
        out
    }
}

pub fn run_ablation(
    split: &DatasetSplit,
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    exec: Execution,
) -> Result<Comparison> {
    let mut rows = Vec::new();
    for &v in variants {
        let cfg = v.apply(base);
        let runs = seeds
            .iter()
            .map(|&s| run_once(split, &cfg, s, v.name(), exec))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ComparisonRow::from_runs(v.name().to_string(), runs));
    }
    Ok(Comparison { rows })
}

/// One row per `k` with the given augmentation strategy.
pub fn augmentation_sweep(
    split: &DatasetSplit,
    base: &RunConfig,
    strategy: Strategy,
    ks: &[usize],
    seeds: &[u64],
    exec: Execution,
) -> Result<Comparison> {
    let mut rows = Vec::new();
    for &k in ks {
        let mut cfg = base.clone();
        cfg.train.augment.strategy = strategy;
        cfg.train.augment.k = k;
        let label = format!("{strategy} k={k}");
        let runs = seeds
            .iter()
            .map(|&s| run_once(split, &cfg, s, &label, exec))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ComparisonRow::from_runs(label, runs));
    }
    Ok(Comparison { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_variant_flips_exactly_its_switch() {
        let base = RunConfig::default();
        for v in Variant::ALL {
            let cfg = v.apply(&base);
            let diff = cfg.diff(&base);
            match v.switch() {
                None => assert!(diff.is_empty()),
                Some((key, value)) => {
                    assert_eq!(diff, vec![key], "{v}");
                    assert_eq!(cfg.get(key).unwrap(), value);
                }
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("tul-mut".parse::<Variant>().is_err());
    }
}
