use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vltb::augment::{corrupt, CorruptionSpec};
use vltb::config::ExperimentConfig;
use vltb::datagen::{read_ppm, write_ppm, Split};
use vltb::experiment::{self as exp, Datasets, RunKey};
use vltb::lemma1;
use vltb::metrics::report_csv;
use vltb::nets::{Checkpoint, FreezeDirection};
use vltb::{Error, Result};

/// Synthetic domain-generalization experiments with vision-language pre-trained encoders.
#[derive(Parser)]
#[command(name = "vltb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Config file; defaults to the one stored in the run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory holding data, checkpoints and metrics.
    #[arg(long)]
    run: PathBuf,
}

#[derive(clap::Args)]
struct SuiteArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the pre-training, training and validation splits.
    GenData(RunArgs),
    /// Pre-train an encoder on the run's pre-training split.
    Pretrain(RunArgs),
    /// Fine-tune the run's encoder on the source training split.
    Finetune(RunArgs),
    /// Evaluate the fine-tuned model on every validation domain.
    Eval(RunArgs),
    /// Evaluate the fine-tuned model under every corruption and severity.
    CorruptEval(RunArgs),
    /// Fine-tune once per frozen-block count.
    FreezeSweep {
        #[command(flatten)]
        args: SuiteArgs,
        /// `early` (early-to-deep) or `deep` (deep-to-early).
        #[arg(long, default_value = "early")]
        direction: String,
    },
    /// Compare initializations across seeds.
    PretrainCompare(SuiteArgs),
    /// Agreement-rate sweep over the idealized world.
    Lemma1(SuiteArgs),
    /// Aggregate metrics of several run directories.
    Report {
        /// Output directory for report.csv and summary.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Apply one corruption to a PPM image.
    Corrupt {
        #[arg(long = "type")]
        kind: String,
        #[arg(long)]
        severity: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    match &args.config {
        Some(p) => ExperimentConfig::load(p),
        None => ExperimentConfig::load(&args.run.join(exp::CONFIG_FILE)),
    }
}

fn run_key(cfg: &ExperimentConfig) -> RunKey {
    RunKey {
        run_id: format!("run-{}", cfg.pretrain.mode.name()),
        seed: cfg.data.seed,
        init_mode: cfg.pretrain.mode.name().into(),
        task: cfg.finetune.task,
    }
}

fn load_model(run: &Path) -> Result<Checkpoint> {
    Checkpoint::load(&run.join(exp::MODEL_FILE))
}

fn seeded(cfg: ExperimentConfig) -> ExperimentConfig {
    let seed = cfg.data.seed;
    exp::seeded(&cfg, seed)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => {
            let cfg = seeded(load_config(&a)?);
            exp::write_run_metadata(&a.run, &cfg)?;
            Datasets::generate(&cfg.data)?.export(&a.run)
        }
        Command::Pretrain(a) => {
            let cfg = seeded(load_config(&a)?);
            let data = Datasets {
                pretrain: exp::load_split(&a.run, Split::Pretrain)?,
                train: Vec::new(),
                val: Vec::new(),
            };
            exp::pretrain_encoder(&cfg, cfg.data.seed, cfg.pretrain.mode, &data, Some(&a.run))?;
            Ok(())
        }
        Command::Finetune(a) => {
            let cfg = seeded(load_config(&a)?);
            let init = Checkpoint::load(&a.run.join(exp::ENCODER_FILE))?;
            let train = exp::load_split(&a.run, Split::Train)?;
            let tc = cfg.finetune_for(cfg.data.seed, cfg.finetune.freeze);
            let (model, history) = vltb::finetune::finetune_run(&tc, &init, &train)?;
            exp::write_run_metadata(&a.run, &cfg)?;
            model.save(&a.run.join(exp::MODEL_FILE))?;
            vltb::finetune::write_history(&a.run.join(exp::HISTORY_FILE), &history)
        }
        Command::Eval(a) => {
            let cfg = seeded(load_config(&a)?);
            let model = load_model(&a.run)?;
            let val = exp::load_split(&a.run, Split::Val)?;
            let rows = exp::metric_rows(&run_key(&cfg), &exp::evaluate_model(&cfg, &model, &val)?)?;
            exp::write_text(&a.run.join(exp::METRICS_FILE), &report_csv(&rows))
        }
        Command::CorruptEval(a) => {
            let cfg = seeded(load_config(&a)?);
            let model = load_model(&a.run)?;
            let val = exp::load_split(&a.run, Split::Val)?;
            let mut key = run_key(&cfg);
            key.run_id = "corrupt".into();
            let rows = exp::corrupt_rows(&cfg, &key, &model, &val)?;
            exp::write_text(&a.run.join(exp::CORRUPT_FILE), &report_csv(&rows))
        }
        Command::FreezeSweep { args, direction } => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let direction = FreezeDirection::parse(&direction).map_err(|e| Error::Config(e.to_string()))?;
            exp::freeze_sweep(&cfg, direction, Some(&args.out))?;
            Ok(())
        }
        Command::PretrainCompare(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            exp::pretrain_compare(&cfg, Some(&args.out))?;
            Ok(())
        }
        Command::Lemma1(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let s = &cfg.sweep;
            let rows = lemma1::sweep(&s.lemma_p, &s.lemma_noise, s.lemma_n, cfg.data.seed)?;
            exp::write_run_metadata(&args.out, &cfg)?;
            exp::write_text(&args.out.join(exp::LEMMA_FILE), &lemma1::sweep_csv(&rows))
        }
        Command::Report { out, runs } => {
            exp::write_report(&runs, &out)
        }
        Command::Corrupt {
            kind,
            severity,
            seed,
            input,
            out,
        } => {
            let spec = CorruptionSpec::parse(&kind, severity).map_err(|e| Error::Config(e.to_string()))?;
            let image = read_ppm(&input)?;
            let shifted = corrupt(&image.to_f64(), spec, seed)?;
            write_ppm(&out, &shifted.to_u8())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Invariant(_) | Error::NonFinite(_) => 3,
        Error::MissingArtifact(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
