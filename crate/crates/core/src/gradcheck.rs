//! Finite-difference verification of the hand-derived gradients.
//!
//! Configurations are drawn at random and rejected until they are tie-free:
//! no rectifier pre-activation near zero, no near-ties among the scores the
//! hinge terms select, and no hinge argument near its kink. Away from those
//! points the objective is smooth and central differences are exact to
//! `O(h^2)`.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::dataset::{Bag, Polarity};
use crate::ranking_loss::{order_desc, LossConfig};
use crate::scorer::{init_params, score_instance, DropoutPlan, ScorerParams};
use crate::seeding;
use crate::trainer::{batch_objective, ObjectiveSettings};
use crate::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_ERROR_FLOOR: f64 = 1e-8;
pub const TOLERANCE: f64 = 1e-4;

const MIN_PREACTIVATION: f64 = 1e-3;
const MIN_SCORE_GAP: f64 = 1e-4;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub configs: usize,
    pub layer_dims: [usize; 4],
    /// Instances per bag.
    pub bag_len: usize,
    pub pairs: usize,
    pub step: f64,
    pub loss: LossConfig,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 7,
            configs: 20,
            layer_dims: [8, 6, 4, 1],
            bag_len: 4,
            pairs: 2,
            step: DEFAULT_STEP,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub configs: usize,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central difference of `f` with respect to parameter `index`.
pub fn central_difference(
    params: &ScorerParams<f64>,
    index: usize,
    step: f64,
    mut f: impl FnMut(&ScorerParams<f64>) -> Result<f64>,
) -> Result<f64> {
    let mut p = params.clone();
    let base = *p.stack.get_mut(index).ok_or_else(|| Error::invalid("index", "out of range"))?;
    *p.stack.get_mut(index).unwrap() = base + step;
    let plus = f(&p)?;
    *p.stack.get_mut(index).unwrap() = base - step;
    let minus = f(&p)?;
    Ok((plus - minus) / (2.0 * step))
}

fn random_params(rng: &mut impl Rng, dims: &[usize; 4]) -> Result<ScorerParams<f64>> {
    let mut p = init_params::<f64>(rng.random(), dims)?;
    for layer in p.stack.layers_mut() {
        for b in layer.biases.iter_mut() {
            *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(p)
}

fn random_bag(rng: &mut impl Rng, polarity: Polarity, n: usize, d: usize) -> Bag<f64> {
    Bag {
        polarity,
        instances: (0..n)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect(),
        video_id: String::new(),
    }
}

fn pre_activations_clear(params: &ScorerParams<f64>, bag: &Bag<f64>) -> Result<bool> {
    for x in &bag.instances {
        let c = params.forward(x, None, 0.0)?;
        let near = |z: &f64| z.abs() < MIN_PREACTIVATION;
        if c.pre1.iter().any(near) || c.pre2.iter().any(near) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn min_gap(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

fn scores_clear(params: &ScorerParams<f64>, pos: &Bag<f64>, neg: &Bag<f64>) -> Result<bool> {
    let score = |b: &Bag<f64>| -> Result<Vec<f64>> {
        b.instances
            .iter()
            .map(|x| Ok(score_instance(params, x, &DropoutPlan::eval(), 0)?.0))
            .collect()
    };
    let (p, n) = (score(pos)?, score(neg)?);
    if min_gap(&p) < MIN_SCORE_GAP || min_gap(&n) < MIN_SCORE_GAP {
        return Ok(false);
    }
    let sorted = order_desc(&p)?.values;
    let max_neg = n.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_pos = *sorted.last().unwrap();
    let mut args = vec![1.0 - sorted[0] + max_neg, 1.0 - sorted[0] + min_pos];
    args.extend(sorted.iter().skip(1).take(2).map(|m| 1.0 - m + max_neg));
    Ok(args.iter().all(|a| a.abs() >= MIN_SCORE_GAP))
}

/// Positive bag first.
pub type BagPair = (Bag<f64>, Bag<f64>);

/// Draws one tie-free configuration of parameters and bag pairs.
pub fn tie_free_config(opts: &GradcheckOptions, config_index: usize) -> Result<(ScorerParams<f64>, Vec<BagPair>)> {
    let d = opts.layer_dims[0];
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = seeding::stream(&[opts.seed, config_index as u64, attempt as u64]);
        let params = random_params(&mut rng, &opts.layer_dims)?;
        let pairs: Vec<_> = (0..opts.pairs)
            .map(|_| {
                (
                    random_bag(&mut rng, Polarity::Positive, opts.bag_len, d),
                    random_bag(&mut rng, Polarity::Negative, opts.bag_len, d),
                )
            })
            .collect();
        let mut clear = true;
        for (p, n) in &pairs {
            clear = clear
                && pre_activations_clear(&params, p)?
                && pre_activations_clear(&params, n)?
                && scores_clear(&params, p, n)?;
        }
        if clear {
            return Ok((params, pairs));
        }
    }
    Err(Error::invalid("gradcheck", "could not draw a tie-free configuration"))
}

/// Checks the full training objective (mean pair loss plus weight penalty,
/// dropout off) against central differences over every parameter.
pub fn check_objective(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let clock = Instant::now();
    let settings = ObjectiveSettings {
        loss: opts.loss,
        dropout: 0.0,
        mask_seed: 0,
    };
    let mut max_rel_error = 0.0f64;
    let mut entries_checked = 0;
    for c in 0..opts.configs {
        let (params, pairs) = tie_free_config(opts, c)?;
        let refs: Vec<_> = pairs.iter().map(|(p, n)| (p, n)).collect();
        let analytic = batch_objective(&params, &refs, &settings)?.gradient;
        let value = |p: &ScorerParams<f64>| Ok(batch_objective(p, &refs, &settings)?.value());
        for (i, a) in analytic.iter().enumerate() {
            let numeric = central_difference(&params, i, opts.step, value)?;
            max_rel_error = max_rel_error.max(relative_error(*a, numeric));
            entries_checked += 1;
        }
    }
    Ok(GradcheckReport {
        configs: opts.configs,
        entries_checked,
        max_rel_error,
        seconds: clock.elapsed().as_secs_f64(),
    })
}
