//! Command implementations behind the `bofi` binary.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bofi::boxes::{box_statistics, extract_segments, parse_bracketed, BoundingSequence, Level};
use bofi::corpus::{build_vocab, generate_synthetic_corpus, prepare_examples, read_dataset, write_dataset, CaptionRecord, Example, Vocab};
use bofi::decode::{generate, GenerateOptions, Manner};
use bofi::eval::{benchmark, emit_report, evaluate, render_text, CiderD, EvalOptions, MetricReport, ReportFormat};
use bofi::model::{checkpoint, Model};
use bofi::train::{fit, scst_step, Adam, AdamConfig, StepLog};
use bofi::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::Config;

pub const DATA_FILE: &str = "data.jsonl";
pub const MODEL_FILE: &str = "model.json";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

struct JsonLines {
    path: PathBuf,
    w: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(JsonLines {
            path,
            w: BufWriter::new(f),
        })
    }

    fn push<T: Serialize>(&mut self, v: &T) -> Result<()> {
        let line = serde_json::to_string(v)?;
        writeln!(self.w, "{line}").map_err(|e| io_err(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| io_err(&self.path, e))
    }
}

fn train_path(cfg: &Config) -> Result<&Path> {
    cfg.data
        .path
        .as_deref()
        .ok_or_else(|| Error::Config("data.path is not set (use --data or --set data.path=...)".into()))
}

fn eval_records(cfg: &Config) -> Result<Vec<CaptionRecord>> {
    let path = match &cfg.data.eval_path {
        Some(p) => p.as_path(),
        None => train_path(cfg)?,
    };
    read_dataset(path, cfg.data.max_len)
}

fn check_regions(model: &Model, records: &[CaptionRecord]) -> Result<()> {
    let want = model.config().d_r;
    match records.iter().find(|r| r.region_dim() != want) {
        Some(r) => Err(Error::Record {
            id: r.id.clone(),
            message: format!("region dimension {} does not match model.d_r = {want}", r.region_dim()),
        }),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// gen-data

/// Write the synthetic corpus to `out/data.jsonl` and return its path.
pub fn gen_data(cfg: &Config, seed: u64, out: &Path) -> Result<PathBuf> {
    let records = generate_synthetic_corpus(&cfg.gen, seed)?;
    ensure_dir(out)?;
    let path = out.join(DATA_FILE);
    write_dataset(&path, &records)?;
    log::info!("wrote {} records to {}", records.len(), path.display());
    Ok(path)
}

// ---------------------------------------------------------------------------
// inspect-boxes

/// One `TYPE:len:tokens` line per box.
pub fn inspect_tree(tree: &str, level: Level) -> Result<Vec<String>> {
    let t = parse_bracketed(tree)?;
    Ok(extract_segments(&t, level)?
        .iter()
        .map(|s| format!("{}:{}:{}", s.ty, s.tokens.len(), s.tokens.join(" ")))
        .collect())
}

/// Box statistics of every usable tree in a dataset, as pretty JSON.
pub fn inspect_dataset(path: &Path, cfg: &Config) -> Result<String> {
    let records = read_dataset(path, cfg.data.max_len)?;
    let vocab = Vocab::reserved_only();
    let ex = prepare_examples(&records, &vocab, cfg.data.level()?);
    let stats = box_statistics(ex.iter().filter_map(|e| e.boxes.as_ref()));
    let mut s = serde_json::to_string_pretty(&stats)?;
    s.push('\n');
    Ok(s)
}

// ---------------------------------------------------------------------------
// train

#[derive(Serialize)]
struct RlLog {
    rl_step: usize,
    pseudo_loss: f64,
    mean_reward: f64,
}

/// Train from `data.path`, writing `train_log.jsonl`, optional periodic
/// checkpoints and the final `model.json` to `out`.
pub fn train(cfg: &Config, out: &Path) -> Result<PathBuf> {
    let records = read_dataset(train_path(cfg)?, cfg.data.max_len)?;
    let vocab = build_vocab(records.iter().map(|r| r.tokens.as_slice()), cfg.data.min_count);
    let examples = prepare_examples(&records, &vocab, cfg.data.level()?);
    let mut model = Model::new(cfg.model.clone(), vocab.size(), cfg.train.seed)?;
    check_regions(&model, &records)?;
    ensure_dir(out)?;
    write_file(&out.join("config.toml"), &cfg.to_toml()?)?;
    log::info!(
        "training {} on {} records, vocab {}, {} parameters",
        cfg.train.mode,
        examples.len(),
        vocab.size(),
        model.params().num_values()
    );

    let mut log_file = JsonLines::create(out.join("train_log.jsonl"))?;
    let every = cfg.train.checkpoint_every;
    fit(&mut model, &examples, &cfg.train, &mut |s: &StepLog, m: &Model| {
        log_file.push(s)?;
        if every > 0 && s.step % every as u64 == 0 {
            checkpoint::save(out.join(format!("checkpoint-{}.json", s.step)), m, &vocab)?;
        }
        Ok(())
    })?;
    log_file.finish()?;

    if cfg.train.rl.enabled {
        rl_stage(cfg, &mut model, &vocab, &examples, out)?;
    }
    let path = out.join(MODEL_FILE);
    checkpoint::save(&path, &model, &vocab)?;
    Ok(path)
}

fn rl_stage(cfg: &Config, model: &mut Model, vocab: &Vocab, examples: &[Example], out: &Path) -> Result<()> {
    let rl = &cfg.train.rl;
    let refs: Vec<Vec<Vec<String>>> = examples.iter().map(|e| e.refs.clone()).collect();
    let scorer = CiderD::new(&refs)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: rl.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    let pool: Vec<&Example> = examples.iter().filter(|e| !e.refs.is_empty()).collect();
    let mut log_file = JsonLines::create(out.join("rl_log.jsonl"))?;
    for step in 1..=rl.steps {
        let batch: Vec<&Example> = pool.choose_multiple(&mut rng, rl.batch).copied().collect();
        let mut reward = |ex: &Example, tokens: &[usize]| scorer.score(&vocab.decode(tokens), &ex.refs);
        let stats = scst_step(model, &mut opt, &batch, rl, &mut reward, &mut rng)?;
        log_file.push(&RlLog {
            rl_step: step,
            pseudo_loss: stats.pseudo_loss,
            mean_reward: stats.mean_reward,
        })?;
    }
    log_file.finish()
}

// ---------------------------------------------------------------------------
// generate

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generated {
    pub id: String,
    pub manner: Manner,
    pub caption: String,
    pub tokens: usize,
    pub boxes: Option<String>,
    pub bounding_calls: usize,
    pub filling_calls: usize,
    pub beam_evals: usize,
}

impl Generated {
    pub fn summary(&self) -> String {
        format!(
            "{}\t{}\t[manner={} tokens={} boxes={} calls={}+{}]",
            self.id,
            self.caption,
            self.manner,
            self.tokens,
            self.boxes.as_deref().unwrap_or("-"),
            self.bounding_calls,
            self.filling_calls
        )
    }
}

pub struct GenerateRequest<'a> {
    pub checkpoint: &'a Path,
    pub manner: Manner,
    pub beam: usize,
    pub boxes: Option<BoundingSequence>,
    /// Fill each record's gold boxes.
    pub oracle_boxes: bool,
    /// Records to caption (0 = all).
    pub limit: usize,
    pub id: Option<&'a str>,
}

/// Caption records from the evaluation set and write `captions.jsonl`.
pub fn generate_captions(cfg: &Config, req: &GenerateRequest<'_>, out: &Path) -> Result<Vec<Generated>> {
    let (model, vocab) = checkpoint::load(req.checkpoint)?;
    let mut records = eval_records(cfg)?;
    if let Some(id) = req.id {
        records.retain(|r| r.id == id);
        if records.is_empty() {
            return Err(Error::Data(format!("no record with id {id:?}")));
        }
    }
    if req.limit > 0 {
        records.truncate(req.limit);
    }
    check_regions(&model, &records)?;
    let level = cfg.data.level()?;
    let mut results = Vec::with_capacity(records.len());
    for rec in &records {
        let boxes = if req.boxes.is_some() {
            req.boxes.clone()
        } else if req.oracle_boxes {
            let ex = Example::from_record(rec, &vocab, level);
            Some(ex.boxes.ok_or_else(|| Error::Record {
                id: rec.id.clone(),
                message: "no usable tree for oracle boxes".into(),
            })?)
        } else {
            None
        };
        let opts = GenerateOptions {
            beam: req.beam,
            boxes,
            ..GenerateOptions::default()
        };
        let t = generate(&model, &rec.regions, req.manner, &opts)?;
        results.push(Generated {
            id: rec.id.clone(),
            manner: req.manner,
            caption: vocab.decode(&t.tokens).join(" "),
            tokens: t.tokens.len(),
            boxes: t.boxes_used.as_ref().map(|b| b.to_string()),
            bounding_calls: t.calls.bounding,
            filling_calls: t.calls.filling,
            beam_evals: t.beam_evals,
        });
    }
    ensure_dir(out)?;
    let mut f = JsonLines::create(out.join("captions.jsonl"))?;
    for g in &results {
        f.push(g)?;
    }
    f.finish()?;
    Ok(results)
}

// ---------------------------------------------------------------------------
// evaluate

pub fn evaluate_checkpoint(
    cfg: &Config,
    checkpoint_path: &Path,
    manner: Manner,
    oracle_boxes: bool,
    out: &Path,
) -> Result<MetricReport> {
    let (model, vocab) = checkpoint::load(checkpoint_path)?;
    let records = eval_records(cfg)?;
    check_regions(&model, &records)?;
    let examples = prepare_examples(&records, &vocab, cfg.data.level()?);
    let opts = EvalOptions {
        beam: cfg.decode.beam,
        tags: cfg.train.tags,
        oracle_boxes,
    };
    let (report, _) = evaluate(&model, &vocab, &examples, manner, &opts)?;
    ensure_dir(out)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_file(&out.join(format!("eval-{manner}.json")), &text)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// bench

/// Run the benchmark and write `bench.json` and `bench.txt`. Returns the
/// text table.
pub fn bench(cfg: &Config, checkpoint_path: &Path, out: &Path) -> Result<String> {
    let (model, vocab) = checkpoint::load(checkpoint_path)?;
    let records = eval_records(cfg)?;
    check_regions(&model, &records)?;
    let examples = prepare_examples(&records, &vocab, cfg.data.level()?);
    let reports = benchmark(&model, &vocab, &examples, &cfg.bench)?;
    ensure_dir(out)?;
    emit_report(&reports, &out.join("bench.json"), ReportFormat::Json)?;
    emit_report(&reports, &out.join("bench.txt"), ReportFormat::Text)?;
    Ok(render_text(&reports))
}
