//! `essa` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use essa_core::checkpoint::{Checkpoint, StageTag};
use essa_core::config::RunConfig;
use essa_core::data::{write_all, Dataset, SynthSpec};
use essa_core::eval::{evaluate_head, evaluate_knn_protocol, EvalReport};
use essa_core::model::Model;
use essa_core::pipeline::{adapter_label, RunState, Stage};
use essa_core::report::{append_jsonl, build_report, write_csv, EvalRecord};
use essa_core::{Error, Result};

#[derive(Parser)]
#[command(name = "essa", version, about = "Self-supervised domain adaptation of a small vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the six synthetic dataset files (3 splits x 2 domains).
    Synth {
        /// JSON generator spec; omitted fields take their defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised adaptation.
    Adapt(StageArgs),
    /// Supervised adaptation with a prediction head.
    Finetune(StageArgs),
    /// Test-time training with the prediction head frozen.
    Ttt(StageArgs),
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "knn")]
        protocol: Protocol,
        /// JSON-lines log to append the result to.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Aggregate metric logs into a CSV with one row per (adapter, stage).
    Report {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue an interrupted run from its checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON-lines log; defaults to `<out>.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Stop after this many epochs and write a resumable checkpoint.
    #[arg(long)]
    until_epoch: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Knn,
    Head,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Adapt(a) => run_stage(Stage::Essa, &a),
        Command::Finetune(a) => run_stage(Stage::Sa, &a),
        Command::Ttt(a) => run_stage(Stage::Ttt, &a),
        Command::Eval { ckpt, config, protocol, log } => eval(&ckpt, &config, protocol, log.as_deref()),
        Command::Report { logs, out } => {
            let rows = build_report(&logs)?;
            write_csv(&rows, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

fn synth(spec_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", spec_path.display())))?;
    let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    if spec.shift_strength == 0.0 {
        eprintln!("warning: shift_strength is 0, target-domain files are identical in content to the source files");
    }
    std::fs::create_dir_all(out)?;
    for (path, count) in write_all(&spec, out)? {
        println!("{count:>6}  {}", path.display());
    }
    Ok(())
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.vit != cfg.vit {
        return Err(Error::Config(format!(
            "checkpoint {} was built for a different model than preset `{}`",
            path.display(),
            cfg.preset
        )));
    }
    ck.model()
}

fn stage_dataset(cfg: &RunConfig, stage: Stage) -> Result<Dataset> {
    let path = cfg
        .stage_data(stage)
        .ok_or_else(|| Error::Config(format!("[data] has no `{}` dataset", stage.as_str())))?;
    Dataset::load(path)
}

fn run_stage(stage: Stage, args: &StageArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let stage_cfg = cfg.stage(stage).clone();
    let data = stage_dataset(&cfg, stage)?;
    let mut state = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.meta.vit != cfg.vit {
                return Err(Error::Config(format!(
                    "cannot resume {}: it was built for a different model than preset `{}`",
                    path.display(),
                    cfg.preset
                )));
            }
            let state = ck.run_state()?;
            if state.config != stage_cfg {
                return Err(Error::Config(format!(
                    "cannot resume {}: its run settings differ from the [{}] section",
                    path.display(),
                    stage.as_str()
                )));
            }
            state
        }
        None => {
            let model = match cfg.stage_from(stage) {
                Some(p) => load_model(p, &cfg)?,
                None => Model::new(cfg.vit, cfg.seed)?,
            };
            match stage {
                Stage::Essa => RunState::new_essa(model, stage_cfg)?,
                Stage::Sa => {
                    let classes = data.num_classes().ok_or_else(|| Error::Data("labels required".into()))?;
                    RunState::new_sa(model, stage_cfg, classes)?
                }
                Stage::Ttt => RunState::new_ttt(model, stage_cfg)?,
            }
        }
    };
    let log = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".jsonl");
        PathBuf::from(p)
    });
    let labels: Option<Vec<usize>> = match stage {
        Stage::Sa => Some(data.require_labels()?.iter().map(|&l| l as usize).collect()),
        _ => None,
    };
    state.run(&data.images(), labels.as_deref(), args.until_epoch, |r| {
        println!("{} epoch {:>3}  loss {:.6}  lr {:.3e}  {:.1} steps/s", r.stage.as_str(), r.epoch, r.loss, r.lr, r.steps_per_sec);
        append_jsonl(&log, r)
    })?;
    if state.is_finished() {
        let tag = StageTag { stage, adapter: adapter_label(&state.config) };
        Checkpoint::from_model(&state.into_model()).with_stage(tag).save(&args.out)?;
    } else {
        Checkpoint::from_run(&state)?.save(&args.out)?;
        println!("stopped at epoch {} of {}; resume with --resume {}", state.epoch, state.config.epochs, args.out.display());
    }
    Ok(())
}

fn eval(ckpt: &Path, config: &Path, protocol: Protocol, log: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ck = Checkpoint::load(ckpt)?;
    if ck.meta.vit != cfg.vit {
        return Err(Error::Config(format!("checkpoint {} does not match preset `{}`", ckpt.display(), cfg.preset)));
    }
    let model = ck.model()?;
    let test_path = cfg.data.test.as_deref().ok_or_else(|| Error::Config("[data] has no `test` dataset".into()))?;
    let test = Dataset::load(test_path)?;
    let (name, report): (&str, EvalReport) = match protocol {
        Protocol::Knn => {
            let train_path = cfg.data.train.as_deref().ok_or_else(|| Error::Config("[data] has no `train` dataset".into()))?;
            let train = Dataset::load(train_path)?;
            ("knn", evaluate_knn_protocol(&model, &train, &test, cfg.eval.k, cfg.eval.tau, cfg.eval.metric)?)
        }
        Protocol::Head => ("head", evaluate_head(&model, &test, cfg.eval.metric)?),
    };
    match &report.note {
        Some(note) => println!("{}: undefined ({note})", report.metric.as_str()),
        None => println!("{}: {:.6}", report.metric.as_str(), report.value),
    }
    if let Some(log) = log {
        let (stage, adapter) = match &ck.meta.trained {
            Some(t) => (t.stage.as_str().to_string(), t.adapter.clone()),
            None => ("none".to_string(), "none".to_string()),
        };
        let record = EvalRecord {
            kind: "eval".into(),
            stage,
            adapter,
            protocol: name.into(),
            metric: report.metric.as_str().into(),
            value: report.value.is_finite().then_some(report.value),
            note: report.note.clone(),
        };
        append_jsonl(log, &record)?;
    }
    Ok(())
}
