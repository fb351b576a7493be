use serde::{Deserialize, Serialize};

use crate::boxes::{BoundingSequence, BoxType};
use crate::corpus::{Example, EOS};
use crate::decode::{ar_canvas, na_canvas, sa_teacher_canvas, TagMode};
use crate::error::{Error, Result};
use crate::model::{floored_probs, Graph, Model, NodeId, Tensor, VisualContext, PROB_FLOOR};

use super::{ImitMode, Objective};

/// Per-record (or batch-mean) loss components. Absent components are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bound: f64,
    pub na: f64,
    pub sa: f64,
    pub imit: f64,
    pub ar: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.bound + self.na + self.sa + self.imit + self.ar
    }

    pub(crate) fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.bound += o.bound * s;
        self.na += o.na * s;
        self.sa += o.sa * s;
        self.imit += o.imit * s;
        self.ar += o.ar * s;
        self.total += o.total * s;
    }
}

fn check_len(tokens: &[usize], b: &BoundingSequence) -> Result<()> {
    if tokens.len() != b.total_len() {
        return Err(Error::LengthMismatch {
            expected: b.total_len(),
            actual: tokens.len(),
        });
    }
    Ok(())
}

/// Teacher-forced bounding NLL: every gold box scores its type and length,
/// the final EOB step scores the type only.
pub fn bound_loss_node(g: &mut Graph<'_>, model: &Model, ctx: NodeId, b: &BoundingSequence) -> Result<NodeId> {
    let (types, lens) = model.bounding_logits(g, ctx, b.boxes())?;
    let mut type_targets: Vec<usize> = b.boxes().iter().map(|x| x.ty.index()).collect();
    type_targets.push(BoxType::Eob.index());
    let t = g.nll(types, type_targets);
    let lens = g.select_rows(lens, (0..b.len()).collect());
    let l = g.nll(lens, b.boxes().iter().map(|x| x.len - 1).collect());
    Ok(g.weighted_sum(vec![(t, 1.0), (l, 1.0)]))
}

/// NA filling logits over the all-MASK canvas.
pub fn na_logits(g: &mut Graph<'_>, model: &Model, ctx: NodeId, b: &BoundingSequence, tags: TagMode) -> Result<NodeId> {
    model.fill_logits(g, ctx, &na_canvas(b, tags), None)
}

/// SA filling logits for every caption position under teacher forcing.
pub fn sa_logits(g: &mut Graph<'_>, model: &Model, ctx: NodeId, tokens: &[usize], b: &BoundingSequence) -> Result<NodeId> {
    check_len(tokens, b)?;
    let (canvas, rows) = sa_teacher_canvas(b, tokens);
    model.fill_logits(g, ctx, &canvas, Some(rows))
}

/// AR inputs and targets: BOS + caption predicting caption + EOS. A caption
/// already at the length cap gets no EOS target, since decoding stops there.
pub fn ar_teacher(tokens: &[usize], max_len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut targets = tokens.to_vec();
    if tokens.len() < max_len {
        targets.push(EOS);
    }
    let inputs = tokens[..targets.len() - 1].to_vec();
    (inputs, targets)
}

pub fn ar_loss_node(g: &mut Graph<'_>, model: &Model, ctx: NodeId, tokens: &[usize]) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(Error::Model("empty caption".into()));
    }
    let (inputs, targets) = ar_teacher(tokens, model.config().max_len);
    let logits = model.fill_logits(g, ctx, &ar_canvas(&inputs), None)?;
    Ok(g.nll(logits, targets))
}

/// Imitation term on NA logits towards constant SA distributions, averaged
/// over positions.
pub fn imit_loss_node(g: &mut Graph<'_>, na_logits: NodeId, sa_probs: &Tensor, tokens: &[usize], mode: ImitMode) -> Result<Option<NodeId>> {
    let t = tokens.len();
    if sa_probs.rows() != t || g.value(na_logits).rows() != t {
        return Err(Error::LengthMismatch {
            expected: t,
            actual: sa_probs.rows(),
        });
    }
    let raw = match mode {
        ImitMode::Off => return Ok(None),
        ImitMode::Full => g.kl_to(na_logits, sa_probs),
        ImitMode::Scalar => {
            let q: Vec<f64> = tokens.iter().enumerate().map(|(i, &y)| sa_probs.get(i, y)).collect();
            g.target_kl(na_logits, tokens.to_vec(), &q)
        }
    };
    Ok(Some(g.scale(raw, 1.0 / t as f64)))
}

/// Loss nodes for one record. `None` components are not part of the
/// objective.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub bound: Option<NodeId>,
    pub na: Option<NodeId>,
    pub sa: Option<NodeId>,
    pub imit: Option<NodeId>,
    pub ar: Option<NodeId>,
    pub total: NodeId,
    /// SA logits, kept so callers can read the imitation target.
    pub sa_logits: Option<NodeId>,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph<'_>) -> LossBreakdown {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| g.value(n).item());
        LossBreakdown {
            bound: v(self.bound),
            na: v(self.na),
            sa: v(self.sa),
            imit: v(self.imit),
            ar: v(self.ar),
            total: g.value(self.total).item(),
        }
    }
}

/// Build the objective for one example. `frozen_sa` replaces the imitation
/// target (normally read off the SA logits of this same graph).
pub fn build_losses(
    g: &mut Graph<'_>,
    model: &Model,
    ex: &Example,
    obj: &Objective,
    frozen_sa: Option<&Tensor>,
) -> Result<LossNodes> {
    let ctx = model.encode(g, &ex.regions)?;
    let boxes = || {
        ex.boxes.as_ref().ok_or_else(|| Error::Record {
            id: ex.id.clone(),
            message: "no box supervision (missing or unusable tree)".into(),
        })
    };
    let mut nodes = LossNodes {
        bound: None,
        na: None,
        sa: None,
        imit: None,
        ar: None,
        total: ctx,
        sa_logits: None,
    };
    let mut na_l = None;
    if obj.uses_bound() {
        nodes.bound = Some(bound_loss_node(g, model, ctx, boxes()?)?);
    }
    if obj.uses_na() {
        let b = boxes()?;
        check_len(&ex.tokens, b)?;
        let l = na_logits(g, model, ctx, b, obj.tags)?;
        na_l = Some(l);
        nodes.na = Some(g.nll(l, ex.tokens.clone()));
    }
    if obj.uses_sa() {
        let l = sa_logits(g, model, ctx, &ex.tokens, boxes()?)?;
        nodes.sa_logits = Some(l);
        nodes.sa = Some(g.nll(l, ex.tokens.clone()));
    }
    if obj.uses_imit() {
        let na = na_l.expect("imitation implies the NA path");
        let target = match frozen_sa {
            Some(t) => t.clone(),
            None => floored_probs(g.value(nodes.sa_logits.expect("imitation implies the SA path"))),
        };
        nodes.imit = imit_loss_node(g, na, &target, &ex.tokens, obj.imit)?;
    }
    if obj.uses_ar() {
        nodes.ar = Some(ar_loss_node(g, model, ctx, &ex.tokens)?);
    }
    let terms: Vec<(NodeId, f64)> = [nodes.bound, nodes.na, nodes.sa, nodes.imit, nodes.ar]
        .into_iter()
        .flatten()
        .map(|n| (n, 1.0))
        .collect();
    if terms.is_empty() {
        return Err(Error::Config("objective has no loss terms".into()));
    }
    nodes.total = g.weighted_sum(terms);
    Ok(nodes)
}

// ---- value-only forms ----

fn with_ctx<T>(model: &Model, ctx: &VisualContext, f: impl FnOnce(&mut Graph<'_>, NodeId) -> Result<T>) -> Result<T> {
    let mut g = Graph::new(model.params());
    let c = g.input(ctx.memory.clone());
    f(&mut g, c)
}

pub fn loss_bound(model: &Model, ctx: &VisualContext, b: &BoundingSequence) -> Result<f64> {
    with_ctx(model, ctx, |g, c| {
        let n = bound_loss_node(g, model, c, b)?;
        Ok(g.value(n).item())
    })
}

pub fn loss_na(model: &Model, ctx: &VisualContext, tokens: &[usize], b: &BoundingSequence) -> Result<f64> {
    check_len(tokens, b)?;
    with_ctx(model, ctx, |g, c| {
        let l = na_logits(g, model, c, b, TagMode::Boxes)?;
        let n = g.nll(l, tokens.to_vec());
        Ok(g.value(n).item())
    })
}

pub fn loss_sa(model: &Model, ctx: &VisualContext, tokens: &[usize], b: &BoundingSequence) -> Result<f64> {
    with_ctx(model, ctx, |g, c| {
        let l = sa_logits(g, model, c, tokens, b)?;
        let n = g.nll(l, tokens.to_vec());
        Ok(g.value(n).item())
    })
}

pub fn loss_ar(model: &Model, ctx: &VisualContext, tokens: &[usize]) -> Result<f64> {
    with_ctx(model, ctx, |g, c| {
        let n = ar_loss_node(g, model, c, tokens)?;
        Ok(g.value(n).item())
    })
}

/// Per-position SA negative log-likelihoods under teacher forcing.
pub fn sa_position_losses(model: &Model, ctx: &VisualContext, tokens: &[usize], b: &BoundingSequence) -> Result<Vec<f64>> {
    with_ctx(model, ctx, |g, c| {
        let l = sa_logits(g, model, c, tokens, b)?;
        let p = floored_probs(g.value(l));
        Ok(tokens.iter().enumerate().map(|(i, &y)| -p.get(i, y).ln()).collect())
    })
}

/// Per-position NA negative log-likelihoods.
pub fn na_position_losses(model: &Model, ctx: &VisualContext, tokens: &[usize], b: &BoundingSequence) -> Result<Vec<f64>> {
    check_len(tokens, b)?;
    with_ctx(model, ctx, |g, c| {
        let l = na_logits(g, model, c, b, TagMode::Boxes)?;
        let p = floored_probs(g.value(l));
        Ok(tokens.iter().enumerate().map(|(i, &y)| -p.get(i, y).ln()).collect())
    })
}

/// Imitation loss between explicit distributions. `targets` is needed only
/// by the scalar form.
pub fn loss_imit(na: &[Vec<f64>], sa: &[Vec<f64>], targets: &[usize], mode: ImitMode) -> Result<f64> {
    if na.len() != sa.len() {
        return Err(Error::LengthMismatch {
            expected: na.len(),
            actual: sa.len(),
        });
    }
    if na.is_empty() {
        return Ok(0.0);
    }
    let ln = |p: f64| p.max(PROB_FLOOR).ln();
    let t = na.len() as f64;
    let sum: f64 = match mode {
        ImitMode::Off => 0.0,
        ImitMode::Full => na
            .iter()
            .zip(sa)
            .map(|(p, q)| p.iter().zip(q).map(|(&pi, &qi)| pi * (ln(pi) - ln(qi))).sum::<f64>())
            .sum(),
        ImitMode::Scalar => {
            if targets.len() != na.len() {
                return Err(Error::LengthMismatch {
                    expected: na.len(),
                    actual: targets.len(),
                });
            }
            na.iter()
                .zip(sa)
                .zip(targets)
                .map(|((p, q), &y)| p[y] * (ln(p[y]) - ln(q[y])))
                .sum()
        }
    };
    Ok(sum / t)
}
