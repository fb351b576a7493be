use bofi::boxes::{BoxSpec, BoxType};
use bofi::corpus::{Example, Vocab, EOS};
use bofi::decode::{Captioner, Limits, Manner};
use bofi::eval::{
    benchmark, emit_report, evaluate, render_json, render_text, BenchConfig, BenchReport, EvalOptions, Latency,
    MeanCalls, MetricReport, ReportFormat,
};
use bofi::model::{BoundingDist, Canvas, Tensor, Visibility, VisualContext};

const V: usize = 12;

/// Emits five boxes (16 tokens), fills position `r` with word `r % 8`, and
/// in AR mode runs to the length limit.
struct Fixed;

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.01 / (n - 1) as f64; n];
    v[k] = 0.99;
    v
}

const BOXES: [(BoxType, usize); 5] = [
    (BoxType::Np, 3),
    (BoxType::Vp, 3),
    (BoxType::Np, 3),
    (BoxType::Cp, 3),
    (BoxType::Np, 4),
];

impl Captioner for Fixed {
    fn limits(&self) -> Limits {
        Limits {
            max_len: 16,
            max_box_len: 16,
            max_boxes: 16,
        }
    }

    fn encode_regions(&self, regions: &[Vec<f64>]) -> bofi::Result<VisualContext> {
        Ok(VisualContext {
            memory: Tensor::from_rows(regions),
        })
    }

    fn bounding_step(&self, _ctx: &VisualContext, history: &[BoxSpec]) -> bofi::Result<BoundingDist> {
        let (ty, len) = BOXES.get(history.len()).copied().unwrap_or((BoxType::Eob, 1));
        Ok(BoundingDist {
            types: one_hot(BoxType::ALL.len(), ty.index()),
            lengths: one_hot(16, len - 1),
        })
    }

    fn fill(&self, _ctx: &VisualContext, canvas: &Canvas, rows: Option<Vec<usize>>) -> bofi::Result<Vec<Vec<f64>>> {
        let rows = rows.unwrap_or_else(|| (0..canvas.len()).collect());
        Ok(rows
            .into_iter()
            .map(|r| {
                if canvas.visibility == Visibility::Causal && r >= 16 {
                    one_hot(V, EOS)
                } else {
                    one_hot(V, 4 + r % 8)
                }
            })
            .collect())
    }
}

fn vocab() -> Vocab {
    Vocab::from_words((0..8).map(|i| format!("w{i}")).collect()).unwrap()
}

fn caption() -> Vec<String> {
    (0..16).map(|r| format!("w{}", r % 8)).collect()
}

fn examples(n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| Example {
            id: format!("e{i}"),
            tokens: vec![],
            boxes: None,
            regions: vec![vec![i as f64, 1.0]],
            refs: vec![caption(), caption()[..8].to_vec()],
        })
        .collect()
}

fn bench_cfg(baseline_beam: usize) -> BenchConfig {
    BenchConfig {
        baseline_beam,
        timing: false,
        ..BenchConfig::default()
    }
}

#[test]
fn exact_captions_score_perfect_bleu() {
    for m in [Manner::Ar, Manner::Na, Manner::Sa] {
        let (r, traces) = evaluate(&Fixed, &vocab(), &examples(3), m, &EvalOptions::default()).unwrap();
        assert_eq!(r.bleu1, 1.0, "{m}");
        assert!((r.bleu4 - 1.0).abs() < 1e-12, "{m}");
        assert_eq!(r.per_record.as_ref().unwrap().len(), 3);
        assert!(traces.iter().all(|t| t.tokens.len() == 16));
    }
}

#[test]
fn oracle_boxes_need_trees() {
    let opts = EvalOptions {
        oracle_boxes: true,
        ..EvalOptions::default()
    };
    assert!(evaluate(&Fixed, &vocab(), &examples(1), Manner::Na, &opts).is_err());
    // AR ignores boxes entirely.
    assert!(evaluate(&Fixed, &vocab(), &examples(1), Manner::Ar, &opts).is_ok());
}

#[test]
fn call_count_speedups_follow_the_traces() {
    let reports = benchmark(&Fixed, &vocab(), &examples(4), &bench_cfg(1)).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.manner.as_str()).collect();
    assert_eq!(names, ["ar-beam1", "na", "sa"]);
    let calls: Vec<(f64, f64)> = reports.iter().map(|r| (r.model_calls.bounding, r.model_calls.filling)).collect();
    assert_eq!(calls, [(0.0, 16.0), (6.0, 1.0), (6.0, 5.0)]);
    assert_eq!(reports[0].speedup_calls, 1.0);
    assert_eq!(reports[1].speedup_calls, 16.0 / 7.0);
    assert_eq!(reports[2].speedup_calls, 16.0 / 11.0);
    for r in &reports {
        assert_eq!(r.latency_ns, Latency { mean: 0, median: 0 });
        assert_eq!(r.speedup_wall, 0.0);
    }
}

#[test]
fn ar_baseline_against_itself_is_one() {
    let reports = benchmark(&Fixed, &vocab(), &examples(2), &bench_cfg(3)).unwrap();
    assert_eq!(reports[0].manner, "ar-beam3");
    assert_eq!(reports[0].speedup_calls, 1.0);
    let timed = BenchConfig {
        iters: 2,
        ..BenchConfig::default()
    };
    let reports = benchmark(&Fixed, &vocab(), &examples(2), &timed).unwrap();
    assert_eq!(reports[0].speedup_wall, 1.0);
    assert!(reports[0].latency_ns.mean > 0);
}

#[test]
fn benchmark_rejects_bad_input() {
    assert!(benchmark(&Fixed, &vocab(), &[], &bench_cfg(3)).is_err());
    let cfg = BenchConfig {
        warmup: 0,
        ..bench_cfg(3)
    };
    assert!(benchmark(&Fixed, &vocab(), &examples(1), &cfg).is_err());
}

fn fixture_reports() -> Vec<BenchReport> {
    let row = |manner: &str, b1: f64, cider: f64, mean: u64, calls: (f64, f64), wall: f64, c: f64| BenchReport {
        manner: manner.into(),
        metrics: MetricReport {
            bleu1: b1,
            bleu4: b1 / 3.0,
            cider,
            per_record: None,
        },
        latency_ns: Latency {
            mean,
            median: mean - 250,
        },
        model_calls: MeanCalls {
            bounding: calls.0,
            filling: calls.1,
        },
        speedup_wall: wall,
        speedup_calls: c,
        hardware: "cpu, 4 hardware thread(s), x86_64-linux, single-threaded timing".into(),
    };
    vec![
        row("ar-beam3", 0.75, 1.2345, 4_200_000, (0.0, 15.5), 1.0, 1.0),
        row("na", 0.7, 1.125, 1_050_000, (6.25, 1.0), 4.0, 15.5 / 7.25),
        row("sa", 0.72, 1.2, 2_100_000, (6.25, 5.25), 2.0, 15.5 / 11.5),
    ]
}

#[test]
fn report_rendering_matches_golden_files() {
    let r = fixture_reports();
    assert_eq!(render_json(&r).unwrap(), include_str!("golden/bench.json"));
    assert_eq!(render_text(&r), include_str!("golden/bench.txt"));
    let back: Vec<BenchReport> = serde_json::from_str(include_str!("golden/bench.json")).unwrap();
    assert_eq!(back, r);
}

#[test]
fn emit_report_writes_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let r = fixture_reports();
    for (name, fmt) in [("b.json", "json"), ("b.txt", "text")] {
        let p = dir.path().join(name);
        emit_report(&r, &p, fmt.parse::<ReportFormat>().unwrap()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("ar-beam3"));
    }
    assert!("xml".parse::<ReportFormat>().is_err());
}
