use rand::distributions::{Distribution, WeightedIndex};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoundingSequence;
use crate::corpus::Example;
use crate::decode::{decode_bounding, na_canvas, sa_step_canvas, BoundingOptions, Captioner, Manner, TagMode};
use crate::error::{Error, Result};
use crate::model::{Gradients, Graph, Model, NodeId, VisualContext};

use super::loss::{na_logits, sa_logits};
use super::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reward {
    #[default]
    CiderD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Mean reward of the other samples drawn for the same image.
    #[default]
    MeanOfOthers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RLConfig {
    pub enabled: bool,
    /// Samples per image.
    #[serde(rename = "M", alias = "m")]
    pub m: usize,
    pub reward: Reward,
    pub baseline: Baseline,
    /// Filling manner whose distributions are sampled (na or sa).
    pub manner: Manner,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            enabled: false,
            m: 5,
            reward: Reward::CiderD,
            baseline: Baseline::MeanOfOthers,
            manner: Manner::Na,
            steps: 50,
            batch: 16,
            lr: 1e-5,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config("train.rl.M must be at least 2".into()));
        }
        if self.manner == Manner::Ar {
            return Err(Error::Config("train.rl.manner must be na or sa".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.rl.batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// `r_m - mean(r_j, j != m)` for each sample.
pub fn scst_advantages(rewards: &[f64]) -> Vec<f64> {
    let m = rewards.len();
    if m < 2 {
        return vec![0.0; m];
    }
    let sum: f64 = rewards.iter().sum();
    rewards
        .iter()
        .map(|&r| r - (sum - r) / (m - 1) as f64)
        .collect()
}

fn draw(row: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
    let d = WeightedIndex::new(row).map_err(|e| Error::Model(format!("cannot sample: {e}")))?;
    Ok(d.sample(rng))
}

/// Sample a caption for `b` from the NA or SA per-position distributions.
pub fn sample_caption<C: Captioner + ?Sized>(
    model: &C,
    ctx: &VisualContext,
    b: &BoundingSequence,
    manner: Manner,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    match manner {
        Manner::Na => model
            .fill(ctx, &na_canvas(b, TagMode::Boxes), None)?
            .iter()
            .map(|p| draw(p, rng))
            .collect(),
        Manner::Sa => {
            let mut filled = Vec::with_capacity(b.total_len());
            for t in 0..b.len() {
                let (canvas, rows) = sa_step_canvas(b, &filled, t);
                for p in model.fill(ctx, &canvas, Some(rows))? {
                    filled.push(draw(&p, rng)?);
                }
            }
            Ok(filled)
        }
        Manner::Ar => Err(Error::Config("sampling is defined for na and sa only".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScstStats {
    pub pseudo_loss: f64,
    pub mean_reward: f64,
}

/// One self-critical update. For every image the boxes are predicted
/// greedily, `rl.m` captions are sampled, each is rewarded by `reward`, and
/// the pseudo-loss `(1/M) Σ_m (b_m - r_m) log p(S_m)` is minimised.
pub fn scst_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[&Example],
    rl: &RLConfig,
    reward: &mut dyn FnMut(&Example, &[usize]) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<ScstStats> {
    rl.validate()?;
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros_like(model.params());
    let mut pseudo = 0.0;
    let mut reward_sum = 0.0;
    for ex in batch {
        if ex.refs.is_empty() {
            return Err(Error::Record {
                id: ex.id.clone(),
                message: "no references to reward against".into(),
            });
        }
        let ctx = model.encode_regions(&ex.regions)?;
        let (b, _) = decode_bounding(&*model, &ctx, BoundingOptions::from_limits(model.limits()))?;
        let samples = (0..rl.m)
            .map(|_| sample_caption(&*model, &ctx, &b, rl.manner, rng))
            .collect::<Result<Vec<_>>>()?;
        let rewards: Vec<f64> = samples.iter().map(|s| reward(ex, s)).collect();
        reward_sum += rewards.iter().sum::<f64>() / rl.m as f64;
        let adv = scst_advantages(&rewards);

        let mut g = Graph::new(model.params());
        let c = model.encode(&mut g, &ex.regions)?;
        let mut terms: Vec<(NodeId, f64)> = Vec::with_capacity(rl.m);
        let shared = if rl.manner == Manner::Na {
            Some(na_logits(&mut g, model, c, &b, TagMode::Boxes)?)
        } else {
            None
        };
        for (s, a) in samples.iter().zip(&adv) {
            let logits = match shared {
                Some(l) => l,
                None => sa_logits(&mut g, model, c, s, &b)?,
            };
            let nll = g.nll(logits, s.clone());
            terms.push((nll, a / rl.m as f64));
        }
        let loss = g.weighted_sum(terms);
        pseudo += g.value(loss).item() * scale;
        g.backward_into(loss, &mut grads, scale)?;
    }
    opt.step(model.params_mut(), &grads)?;
    Ok(ScstStats {
        pseudo_loss: pseudo,
        mean_reward: reward_sum * scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_two_samples() {
        assert_eq!(scst_advantages(&[1.0, 0.0]), vec![1.0, -1.0]);
        assert_eq!(scst_advantages(&[0.3; 5]), vec![0.0; 5]);
        let a = scst_advantages(&[1.0, 2.0, 3.0]);
        assert_eq!(a, vec![-1.5, 0.0, 1.5]);
    }
}
