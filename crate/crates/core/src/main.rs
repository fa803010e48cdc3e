use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use augmult::analysis::{self, VarianceSpec};
use augmult::batching::Scheme;
use augmult::data::{self, CifarFormat};
use augmult::harness::ledger::{self, LedgerWriter};
use augmult::harness::report::{self, View};
use augmult::harness::{self, Aggregation, Shard, SweepSpec};
use augmult::models::SmallResNet;
use augmult::training::TrainConfig;
use augmult::{Error, Exec, RunStatus};

const OUT_DIR_VAR: &str = "AUGMULT_OUT_DIR";

#[derive(Parser)]
#[command(name = "augmult", version, about = "Augmentation multiplicity experiments")]
struct Cli {
    /// Run every computation on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its ledger.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Ledger path; defaults to `<out dir>/train-<fingerprint>.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the final parameters here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run (or resume) a grid sweep.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only worker `i` of `k`, e.g. `0/4`.
        #[arg(long)]
        shard: Option<String>,
    },
    /// Minibatch gradient variance at initialization.
    Variance(VarianceArgs),
    /// Gradient variance against the number of averaged dropout masks.
    DropoutVar(DropoutArgs),
    /// Plot data from one or more ledgers.
    Report {
        #[arg(long)]
        view: String,
        #[arg(long, required = true)]
        ledger: Vec<PathBuf>,
        #[arg(long, default_value_t = 5)]
        keep: usize,
        #[arg(long, default_value_t = 7)]
        of: usize,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a configuration's dataset in the one-label-byte CIFAR layout.
    ExportData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

#[derive(Args)]
struct VarianceArgs {
    #[arg(long)]
    scheme: Scheme,
    /// Multiplicities, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    /// `U` for the growing scheme, `B` for fixed ones.
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 256)]
    batches: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training config supplying data, model and augmentation.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DropoutArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    masks: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    #[arg(long, default_value_t = 64)]
    repeats: usize,
    /// Training images in the fixed batch.
    #[arg(long, default_value_t = 8)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: PathBuf,
}

fn out_dir() -> PathBuf {
    env::var_os(OUT_DIR_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn read_config(path: &Path) -> augmult::Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    TrainConfig::from_toml(&text)
}

enum Outcome {
    Done,
    Diverged,
}

fn run(cli: Cli) -> augmult::Result<Outcome> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::Train {
            config,
            out,
            checkpoint,
        } => {
            let cfg = read_config(&config)?;
            let out = out.unwrap_or_else(|| out_dir().join(format!("train-{}.jsonl", cfg.fingerprint())));
            let (train_set, test_set) = cfg.data.load()?;
            let mut writer = LedgerWriter::create(&out)?;
            let mut net = SmallResNet::init(cfg.resnet_config(&train_set), cfg.run_seed)?;
            let summary = augmult::training::train(&cfg, &mut net, &train_set, &test_set, exec, &mut |r| {
                writer.write(r)
            })?;
            if let Some(path) = checkpoint {
                use augmult::models::Network;
                net.params().write_checkpoint(fs::File::create(path)?)?;
            }
            eprintln!(
                "{} after {} steps: train loss {:?}, test acc {:?} -> {}",
                if summary.status == RunStatus::Diverged {
                    "diverged"
                } else {
                    "finished"
                },
                summary.steps,
                summary.last.train_loss_raw,
                summary.last.test_acc,
                out.display()
            );
            Ok(if summary.status == RunStatus::Diverged {
                Outcome::Diverged
            } else {
                Outcome::Done
            })
        }
        Command::Sweep { spec, out, shard } => {
            let text = fs::read_to_string(&spec)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", spec.display())))?;
            let spec = SweepSpec::from_toml(&text)?;
            let shard = shard
                .as_deref()
                .map(Shard::parse)
                .transpose()?
                .unwrap_or(Shard::ALL);
            let out = out.unwrap_or_else(|| out_dir().join("sweep.jsonl"));
            let outcome = harness::run_sweep(&spec, &out, shard, exec)?;
            eprintln!(
                "ran {}, skipped {} already finished, {} diverged -> {}",
                outcome.ran,
                outcome.skipped,
                outcome.diverged,
                out.display()
            );
            Ok(if outcome.ran > 0 && outcome.diverged == outcome.ran {
                Outcome::Diverged
            } else {
                Outcome::Done
            })
        }
        Command::Variance(args) => {
            let cfg = read_config(&args.config)?;
            let (train_set, _) = cfg.data.load()?;
            let net = SmallResNet::init(cfg.resnet_config(&train_set), cfg.run_seed)?;
            let out = args.out.unwrap_or_else(|| out_dir().join("variance.jsonl"));
            let mut writer = LedgerWriter::append_to(&out)?;
            for &n in &args.n {
                for r in 0..args.repeats as u64 {
                    let spec = VarianceSpec {
                        scheme: args.scheme,
                        n,
                        size: args.size,
                        num_batches: args.batches,
                        seed: args.seed.wrapping_add(r),
                    };
                    let rep = analysis::grad_variance(&net, &train_set, &cfg.augment, &spec, exec)?;
                    println!("{} n={n} repeat={r}: {:.6e}", args.scheme, rep.overall);
                    writer.write(&rep)?;
                }
            }
            Ok(Outcome::Done)
        }
        Command::DropoutVar(args) => {
            let cfg = read_config(&args.config)?;
            let (train_set, _) = cfg.data.load()?;
            let net = SmallResNet::init(cfg.resnet_config(&train_set), cfg.run_seed)?;
            let rows = args.rows.min(train_set.len());
            let ids: Vec<usize> = (0..rows).collect();
            let images = train_set.batch(&ids)?;
            let labels: Vec<usize> = ids.iter().map(|&i| train_set.label(i)).collect();
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            println!("n_masks,variance");
            for &m in &args.masks {
                let v = analysis::dropout_gradient_variance(
                    &net,
                    &images,
                    &labels,
                    m,
                    args.p,
                    args.repeats,
                    args.seed,
                    exec,
                )?;
                println!("{m},{v}");
                xs.push(m as f64);
                ys.push(v);
            }
            if xs.len() >= 2 {
                eprintln!("log-log slope {:.3}", analysis::loglog_slope(&xs, &ys));
            }
            Ok(Outcome::Done)
        }
        Command::Report {
            view,
            ledger: paths,
            keep,
            of,
            out,
        } => {
            let view: View = view.parse()?;
            let agg = Aggregation { keep, of };
            agg.validate()?;
            let points = if view == View::VarianceVsN {
                let mut reports = Vec::new();
                for p in &paths {
                    reports.extend(ledger::read(p)?);
                }
                report::variance_view(&reports)
            } else {
                let mut records = Vec::new();
                for p in &paths {
                    records.extend(ledger::read_runs(p)?);
                }
                ledger::audit_temperatures(&records)?;
                report::run_view(view, &records, agg)?
            };
            let csv = report::to_csv(&points);
            match out {
                Some(path) => fs::write(path, &csv)?,
                None => print!("{csv}"),
            }
            if points.is_empty() {
                return Err(Error::Empty(format!("view {view} selected no points")));
            }
            Ok(Outcome::Done)
        }
        Command::ExportData { config, train, test } => {
            let cfg = read_config(&config)?;
            let (tr, te) = cfg.data.load()?;
            if tr.classes() > 256 {
                return Err(Error::Config("one label byte holds at most 256 classes".into()));
            }
            let format = CifarFormat {
                label_bytes: 1,
                classes: tr.classes(),
                dims: tr.dims(),
            };
            data::export_cifar(&tr, &train, format)?;
            data::export_cifar(&te, &test, format)?;
            Ok(Outcome::Done)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
