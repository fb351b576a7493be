//! Generation schedulers.
//!
//! * **AR**: one token per decoder pass, strict causal mask, a single neutral
//!   OTHER box covering the whole prefix.
//! * **NA**: bound first, then fill every box in one pass over a canvas of
//!   MASK tokens with all positions mutually visible.
//! * **SA**: bound first, then fill one box per pass. The input for box `t`
//!   is the previous box's output spread over `l_t` positions by
//!   [`position_wise_copy`]; earlier boxes keep their generated words and a
//!   position sees its own box and every earlier one.
//!
//! Every scheduler reports a [`DecodeTrace`] counting decoder passes. The
//! region encoder runs once per generation and is not counted. Beam search
//! counts one filling call per step (the beams of a step form one batched
//! pass) and reports the individual hypothesis passes in `beam_evals`.
//!
//! Filling never emits PAD, BOS or EOS; AR may emit EOS, which stops it.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::boxes::{expand_bounding, BoundingSequence, BoxSpec, BoxType};
use crate::corpus::{BOS, EOS, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::{BoundingDist, Canvas, Model, Slot, Visibility, VisualContext};

/// Size limits a captioner works within.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_len: usize,
    pub max_box_len: usize,
    pub max_boxes: usize,
}

/// What the schedulers need from a model. Implemented by [`Model`]; tests
/// substitute scripted models.
pub trait Captioner {
    fn limits(&self) -> Limits;
    fn encode_regions(&self, regions: &[Vec<f64>]) -> Result<VisualContext>;
    fn bounding_step(&self, ctx: &VisualContext, history: &[BoxSpec]) -> Result<BoundingDist>;
    /// Distributions for `rows` of the canvas (all rows when `None`).
    fn fill(&self, ctx: &VisualContext, canvas: &Canvas, rows: Option<Vec<usize>>) -> Result<Vec<Vec<f64>>>;
}

impl Captioner for Model {
    fn limits(&self) -> Limits {
        let c = self.config();
        Limits {
            max_len: c.max_len,
            max_box_len: c.max_box_len,
            max_boxes: c.max_boxes,
        }
    }

    fn encode_regions(&self, regions: &[Vec<f64>]) -> Result<VisualContext> {
        Model::encode_regions(self, regions)
    }

    fn bounding_step(&self, ctx: &VisualContext, history: &[BoxSpec]) -> Result<BoundingDist> {
        Model::bounding_step(self, ctx, history)
    }

    fn fill(&self, ctx: &VisualContext, canvas: &Canvas, rows: Option<Vec<usize>>) -> Result<Vec<Vec<f64>>> {
        self.fill_forward_rows(ctx, canvas, rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Manner {
    Ar,
    Na,
    Sa,
}

impl fmt::Display for Manner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Manner::Ar => "ar",
            Manner::Na => "na",
            Manner::Sa => "sa",
        })
    }
}

impl FromStr for Manner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ar" => Ok(Manner::Ar),
            "na" => Ok(Manner::Na),
            "sa" => Ok(Manner::Sa),
            _ => Err(Error::Config(format!("unknown manner {s:?} (expected ar, na or sa)"))),
        }
    }
}

/// How box structure is shown to the filling decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagMode {
    /// Box type, box index and in-box position of each slot.
    #[default]
    Boxes,
    /// Ablation: one OTHER box spanning the caption.
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelCalls {
    pub bounding: usize,
    pub filling: usize,
}

impl ModelCalls {
    pub fn total(&self) -> usize {
        self.bounding + self.filling
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub manner: Manner,
    pub calls: ModelCalls,
    /// Individual hypothesis passes during beam search (equals
    /// `calls.filling` for every other scheduler).
    pub beam_evals: usize,
    pub wall_time_ns: u64,
    pub tokens: Vec<usize>,
    pub boxes_used: Option<BoundingSequence>,
}

// ---------------------------------------------------------------------------
// Position-wise copy

/// Copy counts `n_i`: with `q = l_next / l_prev` and `r = l_next % l_prev`,
/// the first `l_prev - r` words are copied `q` times and the rest `q + 1`.
pub fn copy_counts(l_prev: usize, l_next: usize) -> Vec<usize> {
    assert!(l_prev >= 1, "position-wise copy needs a non-empty source");
    let q = l_next / l_prev;
    let r = l_next % l_prev;
    (1..=l_prev)
        .map(|i| if i <= l_prev - r { q } else { q + 1 })
        .collect()
}

/// Spread `prev` over `l_next` positions, repeating word `i` `n_i` times.
pub fn position_wise_copy<T: Clone>(prev: &[T], l_next: usize) -> Vec<T> {
    copy_counts(prev.len(), l_next)
        .into_iter()
        .zip(prev)
        .flat_map(|(n, w)| std::iter::repeat(w.clone()).take(n))
        .collect()
}

// ---------------------------------------------------------------------------
// Canvas construction

fn tag_slots(b: &BoundingSequence, tags: TagMode) -> Vec<Slot> {
    expand_bounding(b)
        .into_iter()
        .enumerate()
        .map(|(p, t)| match tags {
            TagMode::Boxes => Slot {
                ty: t.ty,
                box_index: t.box_index,
                within: t.within,
                global: p,
            },
            TagMode::Flat => Slot {
                ty: BoxType::Other,
                box_index: 0,
                within: p,
                global: p,
            },
        })
        .collect()
}

/// All-MASK canvas over the boxes, everything visible.
pub fn na_canvas(b: &BoundingSequence, tags: TagMode) -> Canvas {
    let slots = tag_slots(b, tags);
    Canvas {
        inputs: vec![MASK; slots.len()],
        slots,
        visibility: Visibility::All,
    }
}

fn box_offsets(b: &BoundingSequence) -> Vec<usize> {
    let mut offs = Vec::with_capacity(b.len() + 1);
    let mut acc = 0;
    offs.push(0);
    for bx in b.boxes() {
        acc += bx.len;
        offs.push(acc);
    }
    offs
}

/// Canvas for SA step `t` (0-based): boxes before `t` hold `filled`, box `t`
/// holds the position-wise copy of box `t - 1` (BOS for the first box).
/// Returns the canvas and the rows of box `t`.
pub fn sa_step_canvas(b: &BoundingSequence, filled: &[usize], t: usize) -> (Canvas, Vec<usize>) {
    let offs = box_offsets(b);
    assert_eq!(filled.len(), offs[t], "filled tokens must cover boxes before t");
    let slots: Vec<Slot> = tag_slots(b, TagMode::Boxes)[..offs[t + 1]].to_vec();
    let l_t = b.boxes()[t].len;
    let mut inputs = filled.to_vec();
    if t == 0 {
        inputs.extend(std::iter::repeat(BOS).take(l_t));
    } else {
        inputs.extend(position_wise_copy(&filled[offs[t - 1]..offs[t]], l_t));
    }
    let canvas = Canvas {
        inputs,
        slots,
        visibility: Visibility::BoxCausal,
    };
    (canvas, (offs[t]..offs[t + 1]).collect())
}

/// Teacher-forced SA canvas that scores every box in one pass.
///
/// The canvas holds two copies of the caption positions. The first copy
/// carries the gold words; a position there sees gold positions in its own
/// and earlier boxes. The second copy carries each box's decoder input (BOS
/// or the position-wise copy of the previous gold box); a position there sees
/// gold positions of earlier boxes and the second-copy positions of its own
/// box. Each second-copy row therefore reproduces exactly what
/// [`sa_step_canvas`] computes at inference for that box. Returns the
/// canvas and the second-copy rows in caption order.
pub fn sa_teacher_canvas(b: &BoundingSequence, gold: &[usize]) -> (Canvas, Vec<usize>) {
    let t_len = gold.len();
    let offs = box_offsets(b);
    assert_eq!(t_len, offs[b.len()], "gold length must equal the box total");
    let slots = tag_slots(b, TagMode::Boxes);
    let mut inputs = gold.to_vec();
    for (t, bx) in b.boxes().iter().enumerate() {
        if t == 0 {
            inputs.extend(std::iter::repeat(BOS).take(bx.len));
        } else {
            inputs.extend(position_wise_copy(&gold[offs[t - 1]..offs[t]], bx.len));
        }
    }
    let n = 2 * t_len;
    let mut mask = vec![false; n * n];
    for p in 0..n {
        let bp = slots[p % t_len].box_index;
        for q in 0..n {
            let bq = slots[q % t_len].box_index;
            mask[p * n + q] = match (p < t_len, q < t_len) {
                (true, true) => bq <= bp,
                (true, false) => false,
                (false, true) => bq < bp,
                (false, false) => bq == bp,
            };
        }
    }
    let mut all_slots = slots.clone();
    all_slots.extend(slots);
    let canvas = Canvas {
        inputs,
        slots: all_slots,
        visibility: Visibility::Custom(mask),
    };
    (canvas, (t_len..n).collect())
}

/// AR canvas: BOS followed by `prefix`, causal.
pub fn ar_canvas(prefix: &[usize]) -> Canvas {
    let mut inputs = Vec::with_capacity(prefix.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(prefix);
    let slots = (0..inputs.len())
        .map(|p| Slot {
            ty: BoxType::Other,
            box_index: 0,
            within: p,
            global: p,
        })
        .collect();
    Canvas {
        inputs,
        slots,
        visibility: Visibility::Causal,
    }
}

// ---------------------------------------------------------------------------
// Bounding

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingOptions {
    pub max_boxes: usize,
    pub max_len: usize,
    /// Forbid EOB at the first step instead of failing with
    /// [`Error::EmptyBounding`].
    pub mask_eob_first: bool,
}

impl BoundingOptions {
    pub fn from_limits(l: Limits) -> Self {
        BoundingOptions {
            max_boxes: l.max_boxes,
            max_len: l.max_len,
            mask_eob_first: true,
        }
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn argmax_excluding(values: &[f64], excluded: &[usize]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if excluded.contains(&i) {
            continue;
        }
        if best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(0)
}

/// Token ids the filling decoder may never emit.
pub const FILL_EXCLUDED: [usize; 3] = [PAD, BOS, EOS];
const AR_EXCLUDED: [usize; 2] = [PAD, BOS];

/// Greedy bounding loop. Returns the boxes (EOB excluded) and the number of
/// bounding steps run, the EOB step included. The total length is clamped to
/// `max_len` by shortening the box that crosses it and dropping the rest.
pub fn decode_bounding<C: Captioner + ?Sized>(
    model: &C,
    ctx: &VisualContext,
    opts: BoundingOptions,
) -> Result<(BoundingSequence, usize)> {
    if opts.max_boxes == 0 {
        return Err(Error::Config("max_boxes must be at least 1".into()));
    }
    let max_box_len = model.limits().max_box_len;
    let mut history: Vec<BoxSpec> = Vec::new();
    let mut calls = 0;
    while history.len() < opts.max_boxes {
        let dist = model.bounding_step(ctx, &history)?;
        calls += 1;
        let mut types = dist.types.clone();
        if history.is_empty() && opts.mask_eob_first {
            types[BoxType::Eob.index()] = f64::NEG_INFINITY;
        }
        let ty = BoxType::from_index(argmax(&types)).expect("type index");
        if ty == BoxType::Eob {
            if history.is_empty() {
                return Err(Error::EmptyBounding);
            }
            break;
        }
        let len = (argmax(&dist.lengths) + 1).min(max_box_len);
        history.push(BoxSpec::new(ty, len));
    }
    let mut clamped = Vec::with_capacity(history.len());
    let mut used = 0;
    for b in history {
        let room = opts.max_len.saturating_sub(used);
        let len = b.len.min(room);
        if len == 0 {
            break;
        }
        used += len;
        clamped.push(BoxSpec::new(b.ty, len));
    }
    Ok((BoundingSequence::new(clamped)?, calls))
}

fn check_boxes(b: &BoundingSequence, l: Limits) -> Result<()> {
    if b.total_len() > l.max_len {
        return Err(Error::LengthMismatch {
            expected: l.max_len,
            actual: b.total_len(),
        });
    }
    b.check_limits(l.max_len, l.max_box_len, l.max_boxes)
}

// ---------------------------------------------------------------------------
// Filling

/// Fill every box in a single pass. Returns the tokens and the number of
/// filling calls (always 1).
pub fn decode_na<C: Captioner + ?Sized>(
    model: &C,
    ctx: &VisualContext,
    b: &BoundingSequence,
    tags: TagMode,
) -> Result<(Vec<usize>, usize)> {
    check_boxes(b, model.limits())?;
    let probs = model.fill(ctx, &na_canvas(b, tags), None)?;
    let tokens = probs.iter().map(|p| argmax_excluding(p, &FILL_EXCLUDED)).collect();
    Ok((tokens, 1))
}

/// Fill one box per pass. Returns the tokens and the number of filling calls
/// (one per box).
pub fn decode_sa<C: Captioner + ?Sized>(
    model: &C,
    ctx: &VisualContext,
    b: &BoundingSequence,
) -> Result<(Vec<usize>, usize)> {
    check_boxes(b, model.limits())?;
    let mut filled: Vec<usize> = Vec::with_capacity(b.total_len());
    for t in 0..b.len() {
        let (canvas, rows) = sa_step_canvas(b, &filled, t);
        let probs = model.fill(ctx, &canvas, Some(rows))?;
        filled.extend(probs.iter().map(|p| argmax_excluding(p, &FILL_EXCLUDED)));
    }
    Ok((filled, b.len()))
}

/// Result of left-to-right decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ArOutput {
    pub tokens: Vec<usize>,
    /// Decoder steps (filling calls).
    pub steps: usize,
    pub beam_evals: usize,
    /// Sorted hypothesis scores kept after each step.
    pub score_log: Vec<Vec<f64>>,
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    done: bool,
}

/// Left-to-right decoding from BOS until EOS or `max_len` tokens. `beam = 1`
/// is greedy search. Scores are summed log-probabilities.
pub fn decode_ar<C: Captioner + ?Sized>(model: &C, ctx: &VisualContext, beam: usize) -> Result<ArOutput> {
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let max_len = model.limits().max_len;
    let mut hyps = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        done: false,
    }];
    let mut steps = 0;
    let mut evals = 0;
    let mut score_log = Vec::new();
    while hyps.iter().any(|h| !h.done) {
        steps += 1;
        let mut pool: Vec<Hyp> = Vec::new();
        for h in &hyps {
            if h.done {
                pool.push(h.clone());
                continue;
            }
            let canvas = ar_canvas(&h.tokens);
            let last = canvas.len() - 1;
            let probs = model.fill(ctx, &canvas, Some(vec![last]))?;
            evals += 1;
            let p = &probs[0];
            if beam == 1 {
                let v = argmax_excluding(p, &AR_EXCLUDED);
                pool.push(extend(h, v, p[v].ln(), max_len));
            } else {
                for (v, &pv) in p.iter().enumerate() {
                    if !AR_EXCLUDED.contains(&v) {
                        pool.push(extend(h, v, pv.ln(), max_len));
                    }
                }
            }
        }
        // Stable sort keeps earlier hypotheses and lower token ids first on ties.
        pool.sort_by(|a, b| b.score.total_cmp(&a.score));
        pool.truncate(beam);
        score_log.push(pool.iter().map(|h| h.score).collect());
        hyps = pool;
    }
    let best = hyps
        .into_iter()
        .next()
        .expect("beam keeps at least one hypothesis");
    Ok(ArOutput {
        tokens: best.tokens,
        steps,
        beam_evals: evals,
        score_log,
    })
}

fn extend(h: &Hyp, v: usize, lp: f64, max_len: usize) -> Hyp {
    let mut tokens = h.tokens.clone();
    let done = if v == EOS {
        true
    } else {
        tokens.push(v);
        tokens.len() >= max_len
    };
    Hyp {
        tokens,
        score: h.score + lp,
        done,
    }
}

// ---------------------------------------------------------------------------
// Orchestration

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub beam: usize,
    /// User-supplied boxes; skips bounding.
    pub boxes: Option<BoundingSequence>,
    pub tags: TagMode,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            beam: 1,
            boxes: None,
            tags: TagMode::Boxes,
        }
    }
}

/// Encode, bound (unless boxes are given), fill. Wall time covers the whole
/// call, encoder included.
pub fn generate<C: Captioner + ?Sized>(
    model: &C,
    regions: &[Vec<f64>],
    manner: Manner,
    opts: &GenerateOptions,
) -> Result<DecodeTrace> {
    let start = Instant::now();
    let ctx = model.encode_regions(regions)?;
    let mut calls = ModelCalls::default();
    let (tokens, boxes_used, beam_evals) = match manner {
        Manner::Ar => {
            let out = decode_ar(model, &ctx, opts.beam)?;
            calls.filling = out.steps;
            (out.tokens, None, out.beam_evals)
        }
        Manner::Na | Manner::Sa => {
            let b = match &opts.boxes {
                Some(b) => b.clone(),
                None => {
                    let (b, n) = decode_bounding(model, &ctx, BoundingOptions::from_limits(model.limits()))?;
                    calls.bounding = n;
                    b
                }
            };
            let (tokens, fills) = if manner == Manner::Na {
                decode_na(model, &ctx, &b, opts.tags)?
            } else {
                decode_sa(model, &ctx, &b)?
            };
            calls.filling = fills;
            (tokens, Some(b), fills)
        }
    };
    Ok(DecodeTrace {
        manner,
        calls,
        beam_evals,
        wall_time_ns: start.elapsed().as_nanos() as u64,
        tokens,
        boxes_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn copy_examples() {
        assert_eq!(position_wise_copy(&["w1", "w2"], 5), ["w1", "w1", "w2", "w2", "w2"]);
        assert_eq!(copy_counts(2, 5), [2, 3]);
        assert_eq!(position_wise_copy(&[1, 2, 3], 3), [1, 2, 3]);
        assert_eq!(position_wise_copy(&["w1", "w2", "w3", "w4"], 2), ["w3", "w4"]);
        assert_eq!(copy_counts(4, 2), [0, 0, 1, 1]);
        assert!(position_wise_copy(&[7], 0).is_empty());
    }

    #[test]
    fn manner_parsing() {
        assert_eq!("SA".parse::<Manner>().unwrap(), Manner::Sa);
        assert!("xx".parse::<Manner>().is_err());
        assert_eq!(Manner::Na.to_string(), "na");
    }

    #[test]
    fn sa_teacher_mask_shape() {
        let b: BoundingSequence = "NP:2,VP:1".parse().unwrap();
        let (c, rows) = sa_teacher_canvas(&b, &[10, 11, 12]);
        assert_eq!(c.inputs, vec![10, 11, 12, BOS, BOS, 11]);
        assert_eq!(rows, vec![3, 4, 5]);
        let m = c.mask().unwrap();
        let vis = |p: usize, q: usize| m[p * 6 + q];
        // Query row of box 1 sees gold box 0 and its own query slot only.
        assert!(vis(5, 0) && vis(5, 1) && !vis(5, 2) && vis(5, 5) && !vis(5, 3));
        // Query rows of box 0 see no gold word.
        assert!(!vis(3, 0) && vis(3, 4));
    }

    #[test]
    fn ar_canvas_layout() {
        let c = ar_canvas(&[7, 8]);
        assert_eq!(c.inputs, vec![BOS, 7, 8]);
        assert_eq!(c.mask().unwrap(), vec![true, false, false, true, true, false, true, true, true]);
    }

    #[test]
    fn untrained_model_bounds_deterministically() {
        let m = Model::new(ModelConfig { d: 16, heads: 2, d_ff: 32, d_r: 4, ..Default::default() }, 12, 5).unwrap();
        let regions = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-0.3, 0.0, 0.5, 1.0]];
        let a = generate(&m, &regions, Manner::Na, &GenerateOptions::default()).unwrap();
        let b = generate(&m, &regions, Manner::Na, &GenerateOptions::default()).unwrap();
        assert_eq!(a.boxes_used, b.boxes_used);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.tokens.len(), a.boxes_used.as_ref().unwrap().total_len());
    }
}
