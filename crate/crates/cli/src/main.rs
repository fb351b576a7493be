use std::path::PathBuf;
use std::process::ExitCode;

use bofi::boxes::{BoundingSequence, Level};
use bofi::decode::Manner;
use bofi::{Error, ErrorKind, Result};
use bofi_cli::{Config, GenerateRequest, MODEL_FILE};
use clap::{Args, Parser, Subcommand};

/// Bounding-and-filling image captioning on synthetic scenes.
///
/// Exit codes: 0 success, 2 configuration or usage error, 3 data error
/// (unreadable or invalid dataset, tree or box string), 4 runtime error
/// (model, checkpoint or file-system failure). Log verbosity comes from
/// BOFI_LOG (error, warn, info, debug).
#[derive(Parser)]
#[command(name = "bofi", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. --set train.epochs=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random choice; overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all artifacts.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
    /// Dataset path; shorthand for --set data.path=PATH.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus to OUT/data.jsonl.
    GenData,
    /// Print the boxes of a bracketed tree, or box statistics of a dataset.
    InspectBoxes {
        #[arg(long, conflicts_with = "dataset")]
        tree: Option<String>,
        /// Dataset whose box histograms are printed as JSON.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Split depth (-1 = finest); overrides data.level_k.
        #[arg(long, allow_hyphen_values = true)]
        level: Option<i64>,
    },
    /// Train a model; writes train_log.jsonl and model.json.
    Train,
    /// Caption records of the evaluation set.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        beam: Option<usize>,
        /// Boxes to fill, e.g. "NP:3,VP:2,NP:2"; skips bounding.
        #[arg(long, conflicts_with = "oracle_boxes")]
        boxes: Option<String>,
        /// Fill each record's gold boxes.
        #[arg(long)]
        oracle_boxes: bool,
        /// Split depth for gold boxes; overrides data.level_k.
        #[arg(long, allow_hyphen_values = true)]
        level: Option<i64>,
        /// Number of records (0 = all).
        #[arg(long, default_value_t = 1)]
        limit: usize,
        /// Caption only the record with this id.
        #[arg(long)]
        id: Option<String>,
    },
    /// Score captions of the evaluation set; writes eval-MANNER.json.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        oracle_boxes: bool,
    },
    /// Latency and call-count benchmark; writes bench.json and bench.txt.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated manners, e.g. ar,na,sa.
        #[arg(long, value_delimiter = ',')]
        manners: Option<Vec<Manner>>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint to load (default OUT/model.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manner: Option<Manner>,
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut overrides = Vec::new();
    if let Some(p) = &c.data {
        overrides.push(format!("data.path={:?}", p.display().to_string()));
    }
    if let Some(s) = c.seed {
        overrides.push(format!("train.seed={s}"));
    }
    let level = match &cli.command {
        Command::InspectBoxes { level, .. } | Command::Generate { level, .. } => *level,
        _ => None,
    };
    if let Some(k) = level {
        overrides.push(format!("data.level_k={k}"));
    }
    if let Command::Bench {
        manners: Some(list), ..
    } = &cli.command
    {
        let quoted: Vec<String> = list.iter().map(|m| format!("\"{m}\"")).collect();
        overrides.push(format!("bench.manners=[{}]", quoted.join(",")));
    }
    overrides.extend(c.overrides.iter().cloned());
    let cfg = Config::load(c.config.as_deref(), &overrides)?;
    let out = &c.out;
    let default_ckpt = || out.join(MODEL_FILE);

    match cli.command {
        Command::GenData => {
            let path = bofi_cli::gen_data(&cfg, cfg.train.seed, out)?;
            println!("{}", path.display());
        }
        Command::InspectBoxes { tree, dataset, .. } => match (tree, dataset) {
            (Some(t), _) => {
                for line in bofi_cli::inspect_tree(&t, Level::from_k(cfg.data.level_k)?)? {
                    println!("{line}");
                }
            }
            (None, Some(p)) => print!("{}", bofi_cli::inspect_dataset(&p, &cfg)?),
            (None, None) => return Err(Error::Config("inspect-boxes needs --tree or --dataset".into())),
        },
        Command::Train => {
            let path = bofi_cli::train(&cfg, out)?;
            println!("{}", path.display());
        }
        Command::Generate {
            model,
            beam,
            boxes,
            oracle_boxes,
            limit,
            id,
            ..
        } => {
            let boxes = boxes.map(|s| s.parse::<BoundingSequence>()).transpose()?;
            let ckpt = model.checkpoint.unwrap_or_else(default_ckpt);
            let req = GenerateRequest {
                checkpoint: &ckpt,
                manner: model.manner.unwrap_or(cfg.decode.manner),
                beam: beam.unwrap_or(cfg.decode.beam),
                boxes,
                oracle_boxes,
                limit,
                id: id.as_deref(),
            };
            for g in bofi_cli::generate_captions(&cfg, &req, out)? {
                println!("{}", g.summary());
            }
        }
        Command::Evaluate {
            model,
            beam,
            oracle_boxes,
        } => {
            let mut cfg = cfg;
            if let Some(b) = beam {
                cfg.decode.beam = b;
            }
            let manner = model.manner.unwrap_or(cfg.decode.manner);
            let ckpt = model.checkpoint.unwrap_or_else(default_ckpt);
            let r = bofi_cli::evaluate_checkpoint(&cfg, &ckpt, manner, oracle_boxes, out)?;
            println!("{manner}\tbleu1 {:.4}\tbleu4 {:.4}\tcider {:.4}", r.bleu1, r.bleu4, r.cider);
        }
        Command::Bench { checkpoint, .. } => {
            let ckpt = checkpoint.unwrap_or_else(default_ckpt);
            print!("{}", bofi_cli::bench(&cfg, &ckpt, out)?);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}

fn main() -> ExitCode {
    let level = std::env::var("BOFI_LOG").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
