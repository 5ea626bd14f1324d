//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 training divergence.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{augmentation_sweep, run_ablation, Variant};
use crate::augment::Strategy;
use crate::config::RunConfig;
use crate::data::{compute_stats, prepare_split, read_checkins, segment_trajectories, write_checkins, DatasetSplit};
use crate::error::{Result, TulError};
use crate::eval::{accuracy_curve_csv, evaluate, lcss_link, link_with, DEFAULT_KS};
use crate::par::Execution;
use crate::synth::generate;
use crate::train::{load_checkpoint, save_checkpoint, train_with};

#[derive(Debug, Parser)]
#[command(name = "tul", version, about = "Trajectory-user linking with mutual distillation")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Configuration override, repeatable: --set train.lr=0.0005
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log level (error, warn, info, debug).
    #[arg(long, default_value = "info", global = true)]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic check-in file.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Parse, segment and split a check-in file and print statistics.
    Prepare {
        #[arg(long, short)]
        data: PathBuf,
        /// Also write the statistics as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a checkpoint on the test split of a check-in file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        /// Score the validation split instead.
        #[arg(long)]
        validation: bool,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write accuracy against k as CSV.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Also report the LCSS nearest-neighbour baseline.
        #[arg(long)]
        lcss: bool,
    },
    /// Rank users for each daily trajectory of a check-in file.
    Link {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        /// Users listed per trajectory.
        #[arg(long, default_value_t = 5)]
        top: usize,
        /// Output TSV; standard output when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train model variants over several seeds and compare them.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Check-in file; the synthetic generator is used when omitted.
    #[arg(long, short)]
    data: Option<PathBuf>,
    /// Variants to run (full, tul-ca, tul-ta, no-mutual, no-kl, no-input-ce); all when omitted.
    #[arg(long = "variant")]
    variants: Vec<String>,
    /// Sweep the augmentation k instead of comparing variants.
    #[arg(long, value_delimiter = ',')]
    sweep_k: Vec<usize>,
    /// Strategy used by the k sweep.
    #[arg(long, default_value = "random")]
    strategy: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .format_timestamp(None)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&cli.overrides)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| TulError::io(path, e))
}

fn load_split(path: &Path, cfg: &RunConfig) -> Result<DatasetSplit> {
    let parsed = read_checkins(path, &cfg.data.format)?;
    if parsed.malformed > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), parsed.malformed);
    }
    prepare_split(&parsed.records, &cfg.data.split, cfg.data.top_users)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::Synth { out } => {
            let records = generate(&cfg.synth)?;
            let file = fs::File::create(&out).map_err(|e| TulError::io(&out, e))?;
            write_checkins(std::io::BufWriter::new(file), &records).map_err(|e| TulError::io(&out, e))?;
            println!("wrote {} check-ins to {}", records.len(), out.display());
        }
        Command::Prepare { data, json } => {
            let split = load_split(&data, &cfg)?;
            let stats = compute_stats(&split);
            println!("users          {}", stats.num_users);
            println!("trajectories   {}", stats.num_trajectories);
            println!("check-ins      {}", stats.num_checkins);
            println!("POIs           {}", stats.num_pois);
            println!("categories     {}", stats.num_categories);
            println!("duration days  {:.1}", stats.duration_days);
            let count = |parts: &[crate::data::UserTrajectories]| -> usize { parts.iter().map(|u| u.trajectories.len()).sum() };
            println!(
                "split          {} train / {} validation / {} test, {} users dropped",
                count(&split.train),
                count(&split.validation),
                count(&split.test),
                split.dropped.len()
            );
            if let Some(path) = json {
                write_file(&path, &serde_json::to_string_pretty(&stats)?)?;
            }
        }
        Command::Train { data, checkpoint } => {
            let split = load_split(&data, &cfg)?;
            let trained = train_with(&split, &cfg.train, exec)?;
            save_checkpoint(&checkpoint, &trained, &cfg)?;
            println!(
                "best validation Acc@1 {:.4} at epoch {} of {}; checkpoint in {}",
                trained.best_val_acc1,
                trained.best_epoch + 1,
                trained.epochs_run(),
                checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            validation,
            json,
            plot,
            lcss,
        } => {
            let (trained, run) = load_checkpoint(&checkpoint)?;
            let split = load_split(&data, &run)?;
            let trajs = if validation {
                split.validation_trajectories()
            } else {
                split.test_trajectories()
            };
            let (result, report) = evaluate(&trained, &trajs, &DEFAULT_KS)?;
            print!("{}", report.to_table());
            if lcss {
                let users: Vec<Option<usize>> = split.train.iter().map(|u| trained.vocab.user(&u.user_id)).collect();
                let train: Vec<_> = split
                    .train
                    .iter()
                    .zip(&users)
                    .filter_map(|(u, idx)| idx.map(|i| (i, u)))
                    .flat_map(|(i, u)| u.trajectories.iter().map(move |t| (i, t)))
                    .collect();
                let labels = crate::eval::labels_for(&trained.vocab, &trajs)?;
                let hits = trajs
                    .iter()
                    .zip(&labels)
                    .filter(|(t, &l)| lcss_link(train.iter().copied(), t) == Some(l))
                    .count();
                println!("LCSS Acc@1     {:.2}%", 100.0 * hits as f64 / trajs.len().max(1) as f64);
            }
            if let Some(path) = json {
                write_file(&path, &serde_json::to_string_pretty(&report)?)?;
            }
            if let Some(path) = plot {
                let labels = crate::eval::labels_for(&trained.vocab, &trajs)?;
                write_file(&path, &accuracy_curve_csv(&result, &labels)?)?;
            }
        }
        Command::Link {
            checkpoint,
            data,
            top,
            out,
        } => {
            let (trained, run) = load_checkpoint(&checkpoint)?;
            let parsed = read_checkins(&data, &run.data.format)?;
            let trajs = segment_trajectories(&parsed.records);
            let result = link_with(&trained, &trajs, exec);
            let mut text = String::from("trajectory\tday\trank\tuser\tscore\n");
            for (t, r) in trajs.iter().zip(&result.rankings) {
                for (rank, (&u, s)) in r.users.iter().zip(&r.scores).take(top).enumerate() {
                    let user = trained.vocab.user_id(u).unwrap_or("?");
                    text.push_str(&format!("{}\t{}\t{}\t{user}\t{s:.6}\n", t.user_id, t.interval_index, rank + 1));
                }
            }
            match out {
                Some(path) => write_file(&path, &text)?,
                None => std::io::stdout()
                    .write_all(text.as_bytes())
                    .map_err(|e| TulError::io(Path::new("<stdout>"), e))?,
            }
        }
        Command::Ablate(args) => {
            let split = match &args.data {
                Some(path) => load_split(path, &cfg)?,
                None => prepare_split(&generate(&cfg.synth)?, &cfg.data.split, cfg.data.top_users)?,
            };
            let table = if args.sweep_k.is_empty() {
                let variants = if args.variants.is_empty() {
                    Variant::ALL.to_vec()
                } else {
                    args.variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?
                };
                for v in &variants {
                    if let Some((key, value)) = v.switch() {
                        println!("{v}: {key}={value}");
                    }
                }
                run_ablation(&split, &cfg, &variants, &args.seeds, exec)?
            } else {
                let strategy: Strategy = args.strategy.parse()?;
                augmentation_sweep(&split, &cfg, strategy, &args.sweep_k, &args.seeds, exec)?
            };
            print!("{}", table.to_table());
            if let Some(path) = args.json {
                write_file(&path, &serde_json::to_string_pretty(&table)?)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["tul", "frobnicate"]), 1);
        assert_eq!(run(["tul", "train"]), 1);
        assert_eq!(run(["tul", "--help"]), 0);
    }

    #[test]
    fn bad_config_exits_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.tsv");
        let out = out.to_str().unwrap();
        assert_eq!(run(["tul", "synth", "--out", out, "--set", "synth.nonsense=1"]), 1);
        assert_eq!(run(["tul", "synth", "--out", out, "--set", "synth.num_users=1"]), 1);
    }

    #[test]
    fn missing_data_exits_with_two() {
        assert_eq!(run(["tul", "prepare", "--data", "/nonexistent/checkins.tsv"]), 2);
    }
}
