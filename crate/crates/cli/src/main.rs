use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tscmamba::config::{keys_help, TrainConfig};
use tscmamba::copying::{train_selective_copy, CopyModelConfig, CopyTrainConfig};
use tscmamba::dataio::{align, Dataset, DatasetMeta, SelectiveCopySpec};
use tscmamba::scanning::{materialize_attention, ScanScheme, ATTENTION_TOL};
use tscmamba::ssm::{SelectiveScanParams, SsmConfig};
use tscmamba::trainer::{cache_stem, cached_features, evaluate, load_data, run, Checkpoint};
use tscmamba::{Error, ParamStore, Result};

#[derive(Parser, Debug)]
#[command(name = "tscmamba", version, about = "Multivariate time-series classification with tango-scanned state-space blocks")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed and seeds the synthetic commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute and cache scalograms and random-kernel features.
    Featurize {
        /// `key=value` config overrides.
        overrides: Vec<String>,
    },
    /// Train and write metrics.csv and model.ckpt to output.dir.
    Train { overrides: Vec<String> },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        overrides: Vec<String>,
    },
    /// Materialize the influence matrix of a single-channel scan.
    ScanAnalyze {
        /// Sequence length.
        #[arg(long = "M", visible_alias = "len", default_value_t = 8)]
        m: usize,
        /// forward, flipped, tango or all.
        #[arg(long, default_value = "all")]
        scheme: String,
        #[arg(long, default_value_t = 4)]
        d_state: usize,
        #[arg(long, default_value = "scan_report")]
        out: PathBuf,
    },
    /// Train a stack of blocks on the selective copying task.
    SelectiveCopy {
        #[arg(long, default_value_t = 256)]
        length: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        vocab: usize,
        #[arg(long, default_value_t = 16)]
        memorize: usize,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Wall-clock limit in seconds.
        #[arg(long)]
        budget: Option<u64>,
        /// Stop once held-out accuracy reaches this.
        #[arg(long)]
        target: Option<f64>,
    },
    /// Dataset statistics table.
    Info {
        /// Dataset names under data.dir; defaults to data.name.
        #[arg(long = "name")]
        names: Vec<String>,
        overrides: Vec<String>,
    },
}

fn load_config(cli: &Cli, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Featurize { overrides } => {
            let cfg = load_config(cli, overrides)?;
            let data = load_data(&cfg)?;
            let (model, _) = tscmamba::model::TscMamba::init(
                cfg.model.clone(),
                data.train.channels(),
                data.train.length(),
                data.dataset.meta.classes,
                cfg.seed,
            )?;
            let dir = cfg.out_dir.join("cache");
            for (split, series) in [("train", &data.train), ("test", &data.test)] {
                let stem = cache_stem(&cfg, split);
                let f = cached_features(&model, series, Some(&dir), &stem)?;
                println!(
                    "{split}: scalograms {:?}, kernel features {:?} -> {}",
                    f.maps.shape(),
                    f.rocket.shape(),
                    dir.join(&stem).display()
                );
            }
        }
        Command::Train { overrides } => {
            let cfg = load_config(cli, overrides)?;
            println!("{}", tscmamba::trainer::EpochMetrics::CSV_HEADER);
            let out = run(&cfg, |m| println!("{}", m.csv_row()))?;
            let best = &out.record.epochs[out.record.best_epoch];
            println!(
                "selected epoch {} ({}): test accuracy {:.4}",
                best.epoch, out.record.selection, out.record.test_accuracy
            );
            println!("metrics: {}", out.metrics_path.display());
            println!("checkpoint: {}", out.checkpoint_path.display());
        }
        Command::Eval {
            checkpoint,
            split,
            overrides,
        } => {
            let (ckpt, model, store) = Checkpoint::load(checkpoint)?;
            let mut cfg = ckpt.config.clone();
            cfg.apply_overrides(overrides)?;
            let ds = Dataset::load(&cfg.data_dir.join(&cfg.dataset), &cfg.dataset)?;
            if ds.class_names != ckpt.class_names || ds.meta.channels != ckpt.channels {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained on {} channels and classes {:?}",
                    ckpt.channels, ckpt.class_names
                )));
            }
            let records = match split.as_str() {
                "test" => &ds.test,
                "train" => &ds.train,
                other => return Err(Error::Config(format!("unknown split `{other}` (train, test)"))),
            };
            let series = align(records, ckpt.length, ckpt.stats.as_ref(), ckpt.class_names.len())?;
            let feats = model.features(&series)?;
            let ev = evaluate(&model, &store, &feats)?;
            println!("{} {split}: accuracy {:.4} ({} samples)", cfg.dataset, ev.accuracy, series.len());
            println!("confusion (rows true, columns predicted): {}", ckpt.class_names.join(" "));
            for (name, row) in ckpt.class_names.iter().zip(&ev.confusion) {
                let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
                println!("{name:>12} {}", cells.join(""));
            }
        }
        Command::ScanAnalyze { m, scheme, d_state, out } => {
            let schemes: Vec<ScanScheme> = if scheme == "all" {
                ScanScheme::ALL.to_vec()
            } else {
                vec![scheme.parse()?]
            };
            let seed = cli.seed.unwrap_or(0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let cfg = SsmConfig {
                d_state: *d_state,
                ..SsmConfig::new(1)
            };
            cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
            let params = SelectiveScanParams::init(&mut store, "analysis.", 1, &cfg, &mut rng);
            let u: Vec<f64> = (0..*m).map(|_| rng.random_range(-1.0..1.0)).collect();
            for s in schemes {
                let r = materialize_attention(&u, &params, &store, s)?;
                r.write_artifacts(out, &s.to_string())?;
                let covered = r.coverage.iter().filter(|&&c| c).count();
                println!(
                    "{s}: M={m} max |scan - alpha u| = {:.3e} ({}), coverage {covered}/{} pairs{}",
                    r.max_abs_error,
                    if r.passes(ATTENTION_TOL) { "ok" } else { "MISMATCH" },
                    m * m,
                    if r.full_coverage() { " (all-true)" } else { "" }
                );
                if !r.passes(ATTENTION_TOL) {
                    return Err(Error::Contract(format!(
                        "{s}: materialized matrix disagrees with the recurrence at token {}",
                        r.worst_index
                    )));
                }
            }
            println!("artifacts: {}", out.display());
        }
        Command::SelectiveCopy {
            length,
            layers,
            vocab,
            memorize,
            d_model,
            steps,
            batch_size,
            lr,
            budget,
            target,
        } => {
            let spec = SelectiveCopySpec::new(*length, *vocab, *memorize);
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            let model_cfg = CopyModelConfig {
                d_model: *d_model,
                layers: *layers,
                ..CopyModelConfig::default()
            };
            let d = CopyTrainConfig::default();
            let cfg = CopyTrainConfig {
                steps: steps.unwrap_or(d.steps),
                batch_size: batch_size.unwrap_or(d.batch_size),
                lr: lr.unwrap_or(d.lr),
                time_budget: budget.map(Duration::from_secs).or(d.time_budget),
                target_accuracy: *target,
                seed: cli.seed.unwrap_or(d.seed),
                ..d
            };
            println!("step,train_loss,heldout_accuracy,seconds");
            let (_, _, report) = train_selective_copy(&spec, model_cfg, &cfg, |e| {
                println!("{},{:.6},{:.4},{:.1}", e.step, e.train_loss, e.test_accuracy, e.elapsed.as_secs_f64())
            })?;
            println!(
                "held-out token accuracy {:.4} after {} steps ({} parameters, {:.0} s)",
                report.final_accuracy,
                report.steps_run,
                report.param_count,
                report.elapsed.as_secs_f64()
            );
        }
        Command::Info { names, overrides } => {
            let cfg = load_config(cli, overrides)?;
            let names = if names.is_empty() { vec![cfg.dataset.clone()] } else { names.clone() };
            println!("{}", DatasetMeta::table_header());
            for n in names {
                let ds = Dataset::load(&cfg.data_dir.join(&n), &n)?;
                println!("{}", ds.meta.table_row());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let help = format!("Config keys (file lines or KEY=VALUE overrides):\n{}", keys_help());
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
