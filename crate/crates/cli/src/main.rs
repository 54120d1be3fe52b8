use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mhrnnt_core::decoder::read_hypotheses;
use mhrnnt_core::experiments::workflow::{self, decode_and_score, ensure_base};
use mhrnnt_core::experiments::{run_report, LabConfig, Mode, RunDir};
use mhrnnt_core::model::checkpoint::Checkpoint;
use mhrnnt_core::model::gradcheck;
use mhrnnt_core::scoring::score_set;
use mhrnnt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mhrnnt", version, about = "Transducer pseudo-labeling lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// `sh` or `mh`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic datasets into the run directory.
    GenData(Common),
    /// Train base models (all configured ones unless --model is given).
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Vec<String>,
    },
    /// Decode a stored dataset with a checkpoint from the run.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: String,
        #[arg(long)]
        dataset: String,
    },
    /// Pseudo-label fine-tuning on the mismatched test audio.
    Finetune(Common),
    /// Self-training with the extra mismatched audio.
    Selftrain {
        #[command(flatten)]
        common: Common,
        /// Use the withheld true labels instead of pseudo-labels.
        #[arg(long)]
        supervised: bool,
    },
    /// Score a hypothesis file against a stored labeled dataset.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        hyps: PathBuf,
    },
    /// Finite-difference check of the model gradient on seeded cases.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        cases: u64,
    },
    /// Render the comparison tables recorded in a run directory.
    Report(Common),
}

fn load_config(c: &Common) -> Result<LabConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            LabConfig::from_toml(&text)?
        }
        None => LabConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = &c.mode {
        cfg.pipeline.mode = Mode::parse(m)?;
    }
    if let Some(i) = c.iterations {
        cfg.pipeline.iterations = i;
    }
    if let Some(b) = c.beam {
        cfg.pipeline.beam_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open(c: &Common) -> Result<(LabConfig, RunDir)> {
    let cfg = load_config(c)?;
    let run = RunDir::open(&c.out_dir, &cfg)?;
    Ok((cfg, run))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, mut run) = open(&c)?;
            workflow::gen_data(&cfg, &mut run)?;
            println!("datasets written to {}", run.path("data").display());
        }
        Command::TrainBase { common, model } => {
            let (cfg, mut run) = open(&common)?;
            let names: Vec<String> = if model.is_empty() {
                cfg.bases.iter().map(|b| b.name.clone()).collect()
            } else {
                model
            };
            for n in names {
                cfg.base(&n)?;
                ensure_base(&cfg, &mut run, &n)?;
                println!("{n}: {}", run.path(&RunDir::checkpoint_path(&n)).display());
            }
        }
        Command::Decode {
            common,
            model,
            dataset,
        } => {
            let (cfg, mut run) = open(&common)?;
            let ckpt = Checkpoint::load(&run.path(&RunDir::checkpoint_path(&model)))?;
            match decode_and_score(&cfg, &mut run, &ckpt.model, &model, &dataset, "decode", None)? {
                Some(w) => println!("{model} on {dataset}: WER {w:.2}%"),
                None => println!("{model} on {dataset}: hypotheses written"),
            }
        }
        Command::Finetune(c) => {
            let (cfg, mut run) = open(&c)?;
            let w = workflow::finetune_workflow(&cfg, &mut run)?;
            println!("fine-tuned WER on {}: {w:.2}%", workflow::TEST_NOISY);
        }
        Command::Selftrain { common, supervised } => {
            let (cfg, mut run) = open(&common)?;
            let w = workflow::selftrain_workflow(&cfg, &mut run, supervised)?;
            println!("self-trained WER on {}: {w:.2}%", workflow::TEST_NOISY);
        }
        Command::Score {
            common,
            dataset,
            hyps,
        } => {
            let (_, mut run) = open(&common)?;
            let ds = run.load_dataset(&dataset)?;
            let records = read_hypotheses(&hyps)?;
            let producer = records
                .first()
                .map(|r| r.hypothesis.producer_id.clone())
                .unwrap_or_else(|| "unknown".into());
            let hyp_map: BTreeMap<_, _> = records
                .into_iter()
                .map(|r| (r.utterance_id, r.hypothesis.transcript))
                .collect();
            let condition = ds.utterances.first().map(|u| u.condition.clone()).unwrap_or_default();
            let report = score_set(&ds.references(), &hyp_map, &condition, &producer, "score")?;
            let rel = run.save_report(&report, None, "", &dataset, &hyps.display().to_string())?;
            println!("WER {:.2}% ({})", report.wer(), run.path(&rel).display());
        }
        Command::Gradcheck { common, cases } => {
            let cfg = load_config(&common)?;
            let mut worst: f64 = 0.0;
            for k in 0..cases {
                let c = gradcheck::check_case(cfg.seed.wrapping_add(k), 1e-5)?;
                println!("seed {} params {} max_rel_error {:.3e}", c.seed, c.params, c.max_rel_error);
                worst = worst.max(c.max_rel_error);
            }
            println!("worst {worst:.3e}");
            if worst >= 1e-3 {
                return Err(Error::Validation(format!(
                    "gradient check failed: max relative error {worst:.3e}"
                )));
            }
        }
        Command::Report(c) => {
            let run = RunDir::load(&c.out_dir)?;
            run.verify()?;
            print!("{}", run_report(&run.record)?);
            for (r, stored, again) in run.rescore()? {
                if stored != again {
                    return Err(Error::Corrupt {
                        path: run.path(&r.report),
                        detail: format!("stored WER {stored} but hypotheses re-score to {again}"),
                    });
                }
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Contract(_) | Error::Pairing(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Io { .. }
        | Error::Corrupt { .. }
        | Error::Truncated { .. }
        | Error::VersionMismatch { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
