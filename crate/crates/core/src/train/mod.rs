//! Training objectives, the optimizer, reinforcement fine-tuning and
//! sequence-level distillation.

mod distill;
mod loss;
mod optim;
mod scst;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::decode::TagMode;
use crate::error::{Error, Result};
use crate::model::{
    check_gradients, floored_probs, GradCheckOptions, GradCheckReport, Gradients, Graph, Model, NodeId, Tensor,
};

pub use distill::{distill_corpus, ArTeacher, Teacher};
pub use loss::{
    ar_loss_node, ar_teacher, bound_loss_node, build_losses, imit_loss_node, loss_ar, loss_bound, loss_imit, loss_na,
    loss_sa, na_logits, na_position_losses, sa_logits, sa_position_losses, LossBreakdown, LossNodes,
};
pub use optim::{Adam, AdamConfig};
pub use scst::{sample_caption, scst_advantages, scst_step, Baseline, RLConfig, Reward, ScstStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Bounding + NA + SA + imitation.
    #[default]
    Joint,
    /// Bounding + SA.
    SaOnly,
    /// Bounding + NA.
    NaOnly,
    /// Left-to-right baseline only.
    Ar,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Joint => "joint",
            TrainMode::SaOnly => "sa-only",
            TrainMode::NaOnly => "na-only",
            TrainMode::Ar => "ar",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "sa-only" => Ok(TrainMode::SaOnly),
            "na-only" => Ok(TrainMode::NaOnly),
            "ar" => Ok(TrainMode::Ar),
            _ => Err(Error::Config(format!("unknown training mode {s:?}"))),
        }
    }
}

/// Form of the imitation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImitMode {
    /// Mean over positions of KL(p_na ‖ p_sa) over the whole vocabulary.
    #[default]
    Full,
    /// Mean over positions of p_na(y) · ln(p_na(y) / p_sa(y)) at the gold word.
    Scalar,
    Off,
}

/// Which loss terms are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objective {
    pub mode: TrainMode,
    pub imit: ImitMode,
    /// Add the AR teacher-forced loss to the box-supervised modes.
    pub ar_aux: bool,
    pub tags: TagMode,
}

impl Objective {
    pub fn new(mode: TrainMode) -> Self {
        Objective {
            mode,
            imit: ImitMode::Full,
            ar_aux: false,
            tags: TagMode::Boxes,
        }
    }

    pub fn uses_bound(&self) -> bool {
        self.mode != TrainMode::Ar
    }

    pub fn uses_na(&self) -> bool {
        matches!(self.mode, TrainMode::Joint | TrainMode::NaOnly)
    }

    pub fn uses_sa(&self) -> bool {
        matches!(self.mode, TrainMode::Joint | TrainMode::SaOnly)
    }

    pub fn uses_imit(&self) -> bool {
        self.mode == TrainMode::Joint && self.imit != ImitMode::Off
    }

    pub fn uses_ar(&self) -> bool {
        self.mode == TrainMode::Ar || self.ar_aux
    }

    pub fn needs_boxes(&self) -> bool {
        self.uses_bound()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub imit_mode: ImitMode,
    pub ar_aux: bool,
    pub tags: TagMode,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub rl: RLConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Joint,
            lr: 3e-4,
            batch: 32,
            epochs: 10,
            seed: 0,
            imit_mode: ImitMode::Full,
            ar_aux: false,
            tags: TagMode::Boxes,
            checkpoint_every: 0,
            rl: RLConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> Objective {
        Objective {
            mode: self.mode,
            imit: self.imit_mode,
            ar_aux: self.ar_aux,
            tags: self.tags,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        self.rl.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub bound: f64,
    pub na: f64,
    pub sa: f64,
    pub imit: f64,
    pub ar: f64,
    pub total: f64,
    pub lr: f64,
}

/// Batch-mean losses and gradients. `frozen_sa[i]` fixes the imitation
/// target of `batch[i]`.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Example],
    obj: &Objective,
    frozen_sa: Option<&[Tensor]>,
) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut grads = Gradients::zeros_like(model.params());
    for (i, ex) in batch.iter().enumerate() {
        let mut g = Graph::new(model.params());
        let nodes = loss::build_losses(&mut g, model, ex, obj, frozen_sa.map(|f| &f[i]))?;
        g.backward_into(nodes.total, &mut grads, scale)?;
        mean.add_scaled(&nodes.breakdown(&g), scale);
    }
    Ok((mean, grads))
}

/// Batch-mean losses only.
pub fn batch_losses(model: &Model, batch: &[&Example], obj: &Objective, frozen_sa: Option<&[Tensor]>) -> Result<LossBreakdown> {
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut mean = LossBreakdown::default();
    for (i, ex) in batch.iter().enumerate() {
        let mut g = Graph::new(model.params());
        let nodes = loss::build_losses(&mut g, model, ex, obj, frozen_sa.map(|f| &f[i]))?;
        mean.add_scaled(&nodes.breakdown(&g), scale);
    }
    Ok(mean)
}

/// Teacher-forced SA distributions for each example, used to freeze the
/// imitation target.
pub fn sa_targets(model: &Model, batch: &[&Example]) -> Result<Vec<Tensor>> {
    batch
        .iter()
        .map(|ex| {
            let b = ex.boxes.as_ref().ok_or_else(|| Error::Record {
                id: ex.id.clone(),
                message: "no box supervision".into(),
            })?;
            let mut g = Graph::new(model.params());
            let ctx = model.encode(&mut g, &ex.regions)?;
            let l = loss::sa_logits(&mut g, model, ctx, &ex.tokens, b)?;
            Ok(floored_probs(g.value(l)))
        })
        .collect()
}

/// Examples the objective can train on; errors when none remain.
pub fn eligible<'a>(examples: &'a [Example], obj: &Objective) -> Result<Vec<&'a Example>> {
    let out: Vec<&Example> = examples
        .iter()
        .filter(|e| !obj.needs_boxes() || e.boxes.is_some())
        .collect();
    if out.is_empty() {
        return Err(Error::Data(if obj.needs_boxes() {
            "no record carries a usable tree; box-supervised training needs trees".into()
        } else {
            "empty training set".into()
        }));
    }
    if out.len() < examples.len() {
        log::warn!("{} of {} records lack box supervision and are skipped", examples.len() - out.len(), examples.len());
    }
    Ok(out)
}

/// One pass over `examples` in a shuffled order drawn from `rng`.
pub fn train_epoch(
    model: &mut Model,
    examples: &[Example],
    obj: &Objective,
    opt: &mut Adam,
    batch: usize,
    rng: &mut ChaCha8Rng,
    on_step: &mut dyn FnMut(&StepLog, &Model) -> Result<()>,
) -> Result<Vec<LossBreakdown>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order = eligible(examples, obj)?;
    order.shuffle(rng);
    let mut history = Vec::with_capacity(order.len().div_ceil(batch));
    for chunk in order.chunks(batch) {
        let (losses, grads) = batch_gradients(model, chunk, obj, None)?;
        opt.step(model.params_mut(), &grads)?;
        let entry = StepLog {
            step: opt.steps(),
            bound: losses.bound,
            na: losses.na,
            sa: losses.sa,
            imit: losses.imit,
            ar: losses.ar,
            total: losses.total,
            lr: opt.config.lr,
        };
        on_step(&entry, model)?;
        history.push(losses);
    }
    Ok(history)
}

/// Run `cfg.epochs` epochs from a fresh optimizer. Deterministic given the
/// model, data and `cfg.seed`.
pub fn fit(
    model: &mut Model,
    examples: &[Example],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog, &Model) -> Result<()>,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    let obj = cfg.objective();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let h = train_epoch(model, examples, &obj, &mut opt, cfg.batch, &mut rng, on_step)?;
        if let Some(last) = h.last() {
            log::info!("epoch {} done, last batch total {:.4}", epoch + 1, last.total);
        }
        history.extend(h);
    }
    Ok(history)
}

/// Finite-difference check of the objective's batch-mean gradient. The
/// imitation target is frozen at the current parameters on both sides.
pub fn grad_check(model: &mut Model, batch: &[Example], obj: &Objective, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let refs: Vec<&Example> = batch.iter().collect();
    let frozen = if obj.uses_imit() {
        Some(sa_targets(model, &refs)?)
    } else {
        None
    };
    let (_, analytic) = batch_gradients(model, &refs, obj, frozen.as_deref())?;
    check_gradients(
        model,
        |m| Ok(batch_losses(m, &refs, obj, frozen.as_deref())?.total),
        &analytic,
        opts,
    )
}

/// Loss terms that can be checked on their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTerm {
    Bound,
    Na,
    Sa,
    /// Full-vocabulary imitation against a frozen SA target.
    Imit,
    Ar,
    /// Joint objective with full imitation.
    Joint,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Bound,
        LossTerm::Na,
        LossTerm::Sa,
        LossTerm::Imit,
        LossTerm::Ar,
        LossTerm::Joint,
    ];
}

fn term_node(g: &mut Graph<'_>, model: &Model, ex: &Example, term: LossTerm, frozen_sa: &Tensor) -> Result<NodeId> {
    let b = ex.boxes.as_ref().ok_or_else(|| Error::Record {
        id: ex.id.clone(),
        message: "no box supervision".into(),
    })?;
    let c = model.encode(g, &ex.regions)?;
    match term {
        LossTerm::Bound => loss::bound_loss_node(g, model, c, b),
        LossTerm::Na => {
            let l = na_logits(g, model, c, b, TagMode::Boxes)?;
            Ok(g.nll(l, ex.tokens.clone()))
        }
        LossTerm::Sa => {
            let l = sa_logits(g, model, c, &ex.tokens, b)?;
            Ok(g.nll(l, ex.tokens.clone()))
        }
        LossTerm::Imit => {
            let l = na_logits(g, model, c, b, TagMode::Boxes)?;
            Ok(imit_loss_node(g, l, frozen_sa, &ex.tokens, ImitMode::Full)?.expect("full imitation"))
        }
        LossTerm::Ar => ar_loss_node(g, model, c, &ex.tokens),
        LossTerm::Joint => {
            let obj = Objective::new(TrainMode::Joint);
            Ok(loss::build_losses(g, model, ex, &obj, Some(frozen_sa))?.total)
        }
    }
}

/// Finite-difference check of a single loss term on one example.
pub fn grad_check_term(model: &mut Model, ex: &Example, term: LossTerm, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let frozen = sa_targets(model, &[ex])?.remove(0);
    let analytic = {
        let mut g = Graph::new(model.params());
        let n = term_node(&mut g, model, ex, term, &frozen)?;
        g.backward(n)?
    };
    check_gradients(
        model,
        |m| {
            let mut g = Graph::new(m.params());
            let n = term_node(&mut g, m, ex, term, &frozen)?;
            Ok(g.value(n).item())
        },
        &analytic,
        opts,
    )
}
