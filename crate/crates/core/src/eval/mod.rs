//! Caption metrics, latency benchmarking and report files.

mod metrics;

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Vocab};
use crate::decode::{generate, Captioner, DecodeTrace, GenerateOptions, Manner, TagMode};
use crate::error::{Error, Result};

pub use metrics::{bleu, cider_d, cider_d_scores, CiderD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub cider: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_record: Option<Vec<f64>>,
}

/// BLEU-1, BLEU-4 and CIDEr-D of word captions against references.
pub fn score_captions(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], per_record: bool) -> Result<MetricReport> {
    let (cider, per) = cider_d_scores(candidates, references)?;
    Ok(MetricReport {
        bleu1: bleu(candidates, references, 1)?,
        bleu4: bleu(candidates, references, 4)?,
        cider,
        per_record: per_record.then_some(per),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub beam: usize,
    pub tags: TagMode,
    /// Fill gold boxes instead of predicted ones.
    pub oracle_boxes: bool,
}

/// Generate a caption for every example and score the results.
pub fn evaluate<C: Captioner + ?Sized>(
    model: &C,
    vocab: &Vocab,
    examples: &[Example],
    manner: Manner,
    opts: &EvalOptions,
) -> Result<(MetricReport, Vec<DecodeTrace>)> {
    if examples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut traces = Vec::with_capacity(examples.len());
    let mut cands = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    for ex in examples {
        let boxes = if opts.oracle_boxes && manner != Manner::Ar {
            Some(ex.boxes.clone().ok_or_else(|| Error::Record {
                id: ex.id.clone(),
                message: "oracle boxes requested but the record has none".into(),
            })?)
        } else {
            None
        };
        let gen = GenerateOptions {
            beam: opts.beam.max(1),
            boxes,
            tags: opts.tags,
        };
        let t = generate(model, &ex.regions, manner, &gen)?;
        cands.push(vocab.decode(&t.tokens));
        refs.push(ex.refs.clone());
        traces.push(t);
    }
    Ok((score_captions(&cands, &refs, true)?, traces))
}

// ---------------------------------------------------------------------------
// Benchmark

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Untimed generations before measuring each manner.
    pub warmup: usize,
    /// Timed passes over the dataset.
    pub iters: usize,
    pub manners: Vec<Manner>,
    /// Beam of the AR baseline every speedup is relative to.
    pub baseline_beam: usize,
    /// Record wall-clock times. When off, latency and wall speedup are
    /// reported as 0 so reports are byte-reproducible.
    pub timing: bool,
    /// Benchmark only the first `limit` records (0 = all).
    pub limit: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 1,
            iters: 1,
            manners: vec![Manner::Ar, Manner::Na, Manner::Sa],
            baseline_beam: 3,
            timing: true,
            limit: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean: u64,
    pub median: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCalls {
    pub bounding: f64,
    pub filling: f64,
}

impl MeanCalls {
    pub fn total(&self) -> f64 {
        self.bounding + self.filling
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub manner: String,
    pub metrics: MetricReport,
    pub latency_ns: Latency,
    pub model_calls: MeanCalls,
    pub speedup_wall: f64,
    pub speedup_calls: f64,
    pub hardware: String,
}

pub fn hardware_note() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "cpu, {} hardware thread(s), {}-{}, single-threaded timing",
        threads,
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

struct Measured {
    manner: Manner,
    metrics: MetricReport,
    latencies: Vec<u64>,
    calls: MeanCalls,
}

fn measure<C: Captioner + ?Sized>(
    model: &C,
    vocab: &Vocab,
    examples: &[Example],
    manner: Manner,
    beam: usize,
    cfg: &BenchConfig,
) -> Result<Measured> {
    let opts = GenerateOptions {
        beam,
        ..GenerateOptions::default()
    };
    for i in 0..cfg.warmup {
        generate(model, &examples[i % examples.len()].regions, manner, &opts)?;
    }
    let mut latencies = Vec::with_capacity(examples.len() * cfg.iters.max(1));
    let mut cands = Vec::with_capacity(examples.len());
    let (mut bounding, mut filling) = (0usize, 0usize);
    for it in 0..cfg.iters.max(1) {
        for ex in examples {
            let t = generate(model, &ex.regions, manner, &opts)?;
            latencies.push(if cfg.timing { t.wall_time_ns } else { 0 });
            if it == 0 {
                bounding += t.calls.bounding;
                filling += t.calls.filling;
                cands.push(vocab.decode(&t.tokens));
            }
        }
    }
    let refs: Vec<Vec<Vec<String>>> = examples.iter().map(|e| e.refs.clone()).collect();
    let n = examples.len() as f64;
    Ok(Measured {
        manner,
        metrics: score_captions(&cands, &refs, false)?,
        latencies,
        calls: MeanCalls {
            bounding: bounding as f64 / n,
            filling: filling as f64 / n,
        },
    })
}

fn latency(v: &[u64]) -> Latency {
    let mut s = v.to_vec();
    s.sort_unstable();
    let mean = (s.iter().map(|&x| x as u128).sum::<u128>() / s.len().max(1) as u128) as u64;
    let median = if s.is_empty() {
        0
    } else if s.len() % 2 == 1 {
        s[s.len() / 2]
    } else {
        (s[s.len() / 2 - 1] + s[s.len() / 2]) / 2
    };
    Latency { mean, median }
}

fn ratio(base: f64, x: f64) -> f64 {
    if x > 0.0 {
        base / x
    } else {
        0.0
    }
}

/// Time `generate` per manner over the dataset. Speedups are relative to AR
/// with `cfg.baseline_beam`, which is always measured; the `ar` entry of
/// `cfg.manners` is that baseline.
pub fn benchmark<C: Captioner + ?Sized>(
    model: &C,
    vocab: &Vocab,
    examples: &[Example],
    cfg: &BenchConfig,
) -> Result<Vec<BenchReport>> {
    if examples.is_empty() {
        return Err(Error::Data("empty benchmark set".into()));
    }
    if cfg.warmup == 0 {
        return Err(Error::Config("bench.warmup must be at least 1".into()));
    }
    let examples = if cfg.limit > 0 && cfg.limit < examples.len() {
        &examples[..cfg.limit]
    } else {
        examples
    };
    let base = measure(model, vocab, examples, Manner::Ar, cfg.baseline_beam, cfg)?;
    let base_lat = latency(&base.latencies);
    let mut out = Vec::with_capacity(cfg.manners.len());
    for &m in &cfg.manners {
        let meas = if m == Manner::Ar {
            None
        } else {
            Some(measure(model, vocab, examples, m, 1, cfg)?)
        };
        let meas = meas.as_ref().unwrap_or(&base);
        let lat = latency(&meas.latencies);
        let label = match meas.manner {
            Manner::Ar => format!("ar-beam{}", cfg.baseline_beam),
            other => other.to_string(),
        };
        out.push(BenchReport {
            manner: label,
            metrics: meas.metrics.clone(),
            latency_ns: lat,
            model_calls: meas.calls,
            speedup_wall: if cfg.timing { ratio(base_lat.mean as f64, lat.mean as f64) } else { 0.0 },
            speedup_calls: ratio(base.calls.total(), meas.calls.total()),
            hardware: hardware_note(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "text" | "txt" => Ok(ReportFormat::Text),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

pub fn render_json(reports: &[BenchReport]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(reports)?;
    s.push('\n');
    Ok(s)
}

pub fn render_text(reports: &[BenchReport]) -> String {
    let header = [
        "manner", "bleu1", "bleu4", "cider", "lat_mean_ns", "lat_median_ns", "calls_bound", "calls_fill",
        "speedup_wall", "speedup_calls",
    ];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.manner.clone(),
                format!("{:.4}", r.metrics.bleu1),
                format!("{:.4}", r.metrics.bleu4),
                format!("{:.4}", r.metrics.cider),
                r.latency_ns.mean.to_string(),
                r.latency_ns.median.to_string(),
                format!("{:.2}", r.model_calls.bounding),
                format!("{:.2}", r.model_calls.filling),
                format!("{:.2}", r.speedup_wall),
                format!("{:.2}", r.speedup_calls),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let mut l = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(l, "{c:<w$}");
            } else {
                let _ = write!(l, "  {c:>w$}");
            }
        }
        out.push_str(l.trim_end());
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    if let Some(r) = reports.first() {
        let _ = writeln!(out, "hardware: {}", r.hardware);
    }
    out
}

pub fn emit_report(reports: &[BenchReport], path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => render_json(reports)?,
        ReportFormat::Text => render_text(reports),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
