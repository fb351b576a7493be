use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::net::Model;
use super::params::Gradients;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    pub tolerance: f64,
    /// Entries probed per parameter block; smaller blocks are probed fully.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tolerance: 1e-4,
            max_entries: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockCheck> {
        self.blocks.iter().filter(|b| !b.passed)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compare `analytic` against central differences of `loss` for every
/// parameter block. The model is restored exactly after each probe.
pub fn check_gradients<F>(
    model: &mut Model,
    loss: F,
    analytic: &Gradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Model) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = model.params().ids().collect();
    let mut blocks = Vec::with_capacity(ids.len());
    for id in ids {
        let n = model.params().get(id).len();
        let entries: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: f64 = 0.0;
        for &i in &entries {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + opts.eps;
            let up = loss(model);
            model.params_mut().get_mut(id).data_mut()[i] = orig - opts.eps;
            let down = loss(model);
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * opts.eps);
            let err = relative_error(analytic.get(id).data()[i], numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        blocks.push(BlockCheck {
            name: model.params().name(id).to_string(),
            checked: entries.len(),
            max_rel_err: worst,
            passed: worst < opts.tolerance,
        });
    }
    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        max_rel_err,
        blocks,
    })
}
