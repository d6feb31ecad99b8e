//! Mini-batch MIL training with Adagrad.
//!
//! Each iteration samples `batch_pos` positive and `batch_neg` negative bags
//! without replacement, pairs the k-th positive with the k-th negative, and
//! minimizes the mean pair loss plus `mu3 * ||W||^2`. Batch sampling and
//! dropout masks come from streams keyed by `(seed, iteration, ...)`, so a
//! run is bit-reproducible and can resume from any checkpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Bag, BagSet};
use crate::ranking_loss::{pair_loss_and_subgradient, regularizer_into, LossBreakdown, LossConfig};
use crate::scalar::Scalar;
use crate::scorer::{
    init_params, read_model, score_bag, write_model, Activation, DropoutPlan, Gradient, LayerStack, ScorerParams,
    DEFAULT_DROPOUT,
};
use crate::seeding::{self, TAG_BATCH};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Sampled-batch iterations.
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_pos: usize,
    pub batch_neg: usize,
    pub adagrad_epsilon: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub dropout: f64,
    /// Widths of the two hidden layers.
    pub hidden: [usize; 2],
    pub hidden_activation: Activation,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 25_000,
            learning_rate: 0.001,
            batch_pos: 30,
            batch_neg: 30,
            adagrad_epsilon: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            dropout: DEFAULT_DROPOUT,
            hidden: [128, 32],
            hidden_activation: Activation::Relu,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be >= 1"));
        }
        // lr = 0 is accepted: it leaves the initial parameters untouched.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate", format!("{} must be >= 0", self.learning_rate)));
        }
        if self.batch_pos == 0 || self.batch_neg == 0 {
            return Err(Error::invalid("batch", "batch sizes must be >= 1"));
        }
        if self.batch_pos != self.batch_neg {
            return Err(Error::invalid(
                "batch",
                format!(
                    "pairing needs equal positive and negative counts, got {}+{}",
                    self.batch_pos, self.batch_neg
                ),
            ));
        }
        if !(self.adagrad_epsilon.is_finite() && self.adagrad_epsilon > 0.0) {
            return Err(Error::invalid("adagrad_epsilon", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout", format!("{} is outside [0, 1)", self.dropout)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden", "hidden widths must be >= 1"));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::invalid("checkpoint_dir", "required when checkpoint_every > 0"));
        }
        self.loss.validate()
    }

    pub fn layer_dims(&self, input_dim: usize) -> [usize; 4] {
        [input_dim, self.hidden[0], self.hidden[1], 1]
    }
}

/// Per-parameter sums of squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState<T> {
    pub accumulators: LayerStack<T>,
}

impl<T: Scalar> AdagradState<T> {
    pub fn new(params: &ScorerParams<T>) -> Self {
        AdagradState {
            accumulators: params.stack.zeros_like(),
        }
    }
}

/// `G += g^2; theta -= lr * g / (sqrt(G) + eps)` for every parameter.
/// Nothing is modified when the gradient is rejected.
pub fn adagrad_step<T: Scalar>(
    params: &mut ScorerParams<T>,
    state: &mut AdagradState<T>,
    grad: &Gradient<T>,
    lr: f64,
    eps: f64,
) -> Result<()> {
    params.stack.check_same_shape(grad, "gradient")?;
    params.stack.check_same_shape(&state.accumulators, "adagrad state")?;
    if !grad.all_finite() {
        return Err(Error::invalid("gradient", "non-finite entry"));
    }
    let lr = T::lit(lr);
    let eps = T::lit(eps);
    for ((theta, acc), g) in params
        .stack
        .iter_mut()
        .zip(state.accumulators.iter_mut())
        .zip(grad.iter())
    {
        *acc += *g * *g;
        *theta -= lr * *g / (acc.sqrt() + eps);
    }
    Ok(())
}

/// Indices into a [`BagSet`]: pair `k` is `(positives[k], negatives[k])`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl Batch {
    pub fn pairs<'a, T>(&'a self, set: &'a BagSet<T>) -> Vec<(&'a Bag<T>, &'a Bag<T>)> {
        self.positives
            .iter()
            .zip(&self.negatives)
            .map(|(&p, &n)| (&set.positives[p], &set.negatives[n]))
            .collect()
    }
}

/// Uniform sampling without replacement within each polarity.
pub fn sample_batch<T, R: Rng + ?Sized>(set: &BagSet<T>, rng: &mut R, batch_pos: usize, batch_neg: usize) -> Result<Batch> {
    if set.positives.len() < batch_pos {
        return Err(Error::invalid(
            "train set",
            format!("{} positive bags, batch needs {batch_pos}", set.positives.len()),
        ));
    }
    if set.negatives.len() < batch_neg {
        return Err(Error::invalid(
            "train set",
            format!("{} negative bags, batch needs {batch_neg}", set.negatives.len()),
        ));
    }
    let positives = index::sample(rng, set.positives.len(), batch_pos).into_vec();
    let negatives = index::sample(rng, set.negatives.len(), batch_neg).into_vec();
    Ok(Batch { positives, negatives })
}

/// Settings of one evaluation of the batch objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSettings {
    pub loss: LossConfig,
    /// 0 disables dropout.
    pub dropout: f64,
    /// Dropout masks for bag slot `s` come from the stream `(mask_seed, s)`.
    /// Positive bag of pair k is slot 2k, its negative 2k+1.
    pub mask_seed: u64,
}

#[derive(Clone, Debug)]
pub struct Objective<T> {
    /// Pair terms averaged over pairs; `regularizer` added once.
    pub loss: LossBreakdown<T>,
    pub gradient: Gradient<T>,
}

impl<T: Scalar> Objective<T> {
    pub fn value(&self) -> T {
        self.loss.total
    }
}

fn pair_gradient<T: Scalar>(
    params: &ScorerParams<T>,
    pos: &[Vec<T>],
    neg: &[Vec<T>],
    settings: &ObjectiveSettings,
    k: usize,
) -> Result<(LossBreakdown<T>, Gradient<T>)> {
    let plan_for = |slot: usize| -> Result<DropoutPlan> {
        if settings.dropout == 0.0 {
            Ok(DropoutPlan::eval())
        } else {
            DropoutPlan::train(settings.dropout, seeding::derive_seed(&[settings.mask_seed, slot as u64]))
        }
    };
    let (pos_scores, pos_caches) = score_bag(params, pos, &plan_for(2 * k)?)?;
    let (neg_scores, neg_caches) = score_bag(params, neg, &plan_for(2 * k + 1)?)?;
    let (loss, d_pos, d_neg) = pair_loss_and_subgradient(&pos_scores, &neg_scores, &settings.loss)?;
    let mut grad = params.stack.zeros_like();
    for (cache, d) in pos_caches.iter().zip(&d_pos).chain(neg_caches.iter().zip(&d_neg)) {
        params.backprop_into(cache, *d, &mut grad)?;
    }
    Ok((loss, grad))
}

/// Mean pair loss over `pairs` plus the weight penalty, and its gradient.
/// Pairs are processed in parallel and reduced in pair order, so the result
/// does not depend on the thread count.
pub fn batch_objective<T: Scalar>(
    params: &ScorerParams<T>,
    pairs: &[(&Bag<T>, &Bag<T>)],
    settings: &ObjectiveSettings,
) -> Result<Objective<T>> {
    if pairs.is_empty() {
        return Err(Error::invalid("batch", "no bag pairs"));
    }
    let per_pair = pairs
        .par_iter()
        .enumerate()
        .map(|(k, (p, n))| pair_gradient(params, &p.instances, &n.instances, settings, k))
        .collect::<Result<Vec<_>>>()?;

    let inv = T::one() / T::lit(pairs.len() as f64);
    let mut loss = LossBreakdown::zero();
    let mut gradient = params.stack.zeros_like();
    for (l, g) in &per_pair {
        loss.accumulate(l);
        gradient.add_assign(g);
    }
    let mut loss = loss.scaled(inv);
    gradient.scale(inv);
    let reg = regularizer_into(params, settings.loss.mu3, &mut gradient);
    loss.regularizer = reg;
    loss.total += reg;
    Ok(Objective { loss, gradient })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: LossBreakdown<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    /// CSV without wall times, so identical runs give identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,l1,l2,l3,l4,temporal,sparsity,regularizer,total\n");
        for r in &self.records {
            let f = r.loss.fields();
            out.push_str(&r.iteration.to_string());
            for v in f {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::binio::write_file(path.as_ref(), self.to_csv().as_bytes())
    }
}

/// Where a run starts: fresh parameters at iteration 0 or a checkpoint.
#[derive(Clone, Debug)]
pub struct TrainStart<T> {
    pub params: ScorerParams<T>,
    pub state: AdagradState<T>,
    /// Iterations already completed.
    pub iteration: usize,
}

impl<T: Scalar> TrainStart<T> {
    pub fn fresh(cfg: &TrainConfig, input_dim: usize) -> Result<Self> {
        let mut params = init_params(cfg.seed, &cfg.layer_dims(input_dim))?;
        params.hidden_activation = cfg.hidden_activation;
        let state = AdagradState::new(&params);
        Ok(TrainStart {
            params,
            state,
            iteration: 0,
        })
    }

    /// Resumes from the latest checkpoint in `dir`, if any.
    pub fn from_latest_checkpoint(dir: &Path, cfg: &TrainConfig) -> Result<Option<Self>> {
        let Some((iteration, path)) = latest_checkpoint(dir)? else {
            return Ok(None);
        };
        let file = read_model::<T>(&path)?;
        let mut params = file.params;
        params.hidden_activation = cfg.hidden_activation;
        let accumulators = file
            .accumulators
            .ok_or_else(|| Error::invalid("checkpoint", format!("{} has no accumulators", path.display())))?;
        Ok(Some(TrainStart {
            params,
            state: AdagradState { accumulators },
            iteration,
        }))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ScorerParams<T>,
    pub state: AdagradState<T>,
    pub log: TrainLog,
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint-{iteration:08}.milm"))
}

/// The checkpoint with the highest iteration number in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(iter) = name
            .to_str()
            .and_then(|n| n.strip_prefix("checkpoint-"))
            .and_then(|n| n.strip_suffix(".milm"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| iter > *b) {
            best = Some((iter, entry.path()));
        }
    }
    Ok(best)
}

/// Runs `cfg.iterations - start.iteration` iterations from `start`.
pub fn train_from<T: Scalar>(
    set: &BagSet<T>,
    cfg: &TrainConfig,
    start: TrainStart<T>,
    mut progress: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let TrainStart {
        mut params,
        mut state,
        iteration: first,
    } = start;
    if let Some(d) = set.dim() {
        if d != params.input_dim() {
            return Err(Error::dims("train set features", params.input_dim(), d));
        }
    }
    let clock = Instant::now();
    let mut log = TrainLog::default();
    for iteration in first..cfg.iterations {
        let mut rng = seeding::stream(&[TAG_BATCH, cfg.seed, iteration as u64]);
        let batch = sample_batch(set, &mut rng, cfg.batch_pos, cfg.batch_neg)?;
        let settings = ObjectiveSettings {
            loss: cfg.loss,
            dropout: cfg.dropout,
            mask_seed: seeding::derive_seed(&[cfg.seed, iteration as u64]),
        };
        let objective = batch_objective(&params, &batch.pairs(set), &settings)?;
        adagrad_step(
            &mut params,
            &mut state,
            &objective.gradient,
            cfg.learning_rate,
            cfg.adagrad_epsilon,
        )?;
        let l = &objective.loss;
        let record = TrainRecord {
            iteration: iteration + 1,
            loss: LossBreakdown {
                l1: l.l1.to_f64_lossy(),
                l2: l.l2.to_f64_lossy(),
                l3: l.l3.to_f64_lossy(),
                l4: l.l4.to_f64_lossy(),
                temporal: l.temporal.to_f64_lossy(),
                sparsity: l.sparsity.to_f64_lossy(),
                regularizer: l.regularizer.to_f64_lossy(),
                total: l.total.to_f64_lossy(),
            },
            wall_seconds: clock.elapsed().as_secs_f64(),
        };
        progress(&record);
        log.records.push(record);

        let done = iteration + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = checkpoint_path(dir, done);
                write_model(&path, &params, Some(&state.accumulators))?;
                log.checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome { params, state, log })
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train<T: Scalar>(set: &BagSet<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let dim = set
        .dim()
        .ok_or_else(|| Error::invalid("train set", "no bags"))?;
    train_from(set, cfg, TrainStart::fresh(cfg, dim)?, |_| {})
}
