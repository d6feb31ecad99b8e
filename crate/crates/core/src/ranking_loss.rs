//! Score-level MIL ranking losses.
//!
//! For a positive bag with scores `p` and a negative bag with scores `q`,
//! with `M1 >= M2 >= M3` the top order statistics of `p`:
//!
//! - `l1 = max(0, 1 - max p + max q)`
//! - `l2 = max(0, 1 - max p + min p)`
//! - `l3 = max(0, 1 - M2 + max q)`
//! - `l4 = max(0, 1 - M3 + max q)`
//! - temporal = `mu1 * sum (p[i] - p[i+1])^2`
//! - sparsity = `mu2 * sum s` over the configured bag
//!
//! The baseline variant keeps only `l1` plus the two constraints. Every
//! max/min/order selection breaks ties towards the lowest index, and the
//! subgradients follow the same selections.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::scorer::{Gradient, ScorerParams};
use crate::{Error, Result};

pub const DEFAULT_MU1: f64 = 8e-5;
pub const DEFAULT_MU2: f64 = 8e-5;
pub const DEFAULT_MU3: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Four hinge terms plus constraints.
    #[default]
    Proposed,
    /// `l1` plus constraints.
    Baseline,
}

/// Which bag the sparsity penalty sums over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityTarget {
    #[default]
    Negative,
    Positive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub variant: LossVariant,
    pub sparsity_target: SparsityTarget,
    /// Permit positive and negative bags of different lengths.
    pub allow_unequal_lengths: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mu1: DEFAULT_MU1,
            mu2: DEFAULT_MU2,
            mu3: DEFAULT_MU3,
            variant: LossVariant::Proposed,
            sparsity_target: SparsityTarget::Negative,
            allow_unequal_lengths: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu1", self.mu1), ("mu2", self.mu2), ("mu3", self.mu3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("{v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Scores in descending order with the index each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SortedScores<T> {
    pub values: Vec<T>,
    pub source_indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct HingeTerms<T> {
    pub l1: T,
    pub l2: T,
    pub l3: T,
    pub l4: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown<T> {
    pub l1: T,
    pub l2: T,
    pub l3: T,
    pub l4: T,
    pub temporal: T,
    pub sparsity: T,
    pub regularizer: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn zero() -> Self {
        Self {
            l1: T::zero(),
            l2: T::zero(),
            l3: T::zero(),
            l4: T::zero(),
            temporal: T::zero(),
            sparsity: T::zero(),
            regularizer: T::zero(),
            total: T::zero(),
        }
    }

    pub fn fields(&self) -> [T; 8] {
        [
            self.l1,
            self.l2,
            self.l3,
            self.l4,
            self.temporal,
            self.sparsity,
            self.regularizer,
            self.total,
        ]
    }

    pub(crate) fn accumulate(&mut self, other: &Self) {
        self.l1 += other.l1;
        self.l2 += other.l2;
        self.l3 += other.l3;
        self.l4 += other.l4;
        self.temporal += other.temporal;
        self.sparsity += other.sparsity;
        self.regularizer += other.regularizer;
        self.total += other.total;
    }

    pub(crate) fn scaled(&self, f: T) -> Self {
        Self {
            l1: self.l1 * f,
            l2: self.l2 * f,
            l3: self.l3 * f,
            l4: self.l4 * f,
            temporal: self.temporal * f,
            sparsity: self.sparsity * f,
            regularizer: self.regularizer * f,
            total: self.total * f,
        }
    }
}

fn check_finite<T: Scalar>(name: &str, scores: &[T]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid(name, "no scores"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(name, format!("score {i} is not finite")));
    }
    Ok(())
}

fn check_unit_range<T: Scalar>(name: &str, scores: &[T]) -> Result<()> {
    check_finite(name, scores)?;
    if let Some(i) = scores.iter().position(|s| *s < T::zero() || *s > T::one()) {
        return Err(Error::invalid(name, format!("score {i} = {} is outside [0, 1]", scores[i])));
    }
    Ok(())
}

/// Stable descending sort; tied scores keep their original order.
pub fn order_desc<T: Scalar>(scores: &[T]) -> Result<SortedScores<T>> {
    check_finite("scores", scores)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    Ok(SortedScores {
        values: idx.iter().map(|&i| scores[i]).collect(),
        source_indices: idx,
    })
}

/// First index of the maximum.
fn argmax<T: Scalar>(s: &[T]) -> usize {
    let mut best = 0;
    for i in 1..s.len() {
        if s[i] > s[best] {
            best = i;
        }
    }
    best
}

/// First index of the minimum.
fn argmin<T: Scalar>(s: &[T]) -> usize {
    let mut best = 0;
    for i in 1..s.len() {
        if s[i] < s[best] {
            best = i;
        }
    }
    best
}

/// Indices the hinge terms read from.
struct Selection {
    pos_max: usize,
    pos_min: usize,
    /// Sources of M2 and M3; absent in the baseline variant.
    pos_m2: Option<usize>,
    pos_m3: Option<usize>,
    neg_max: usize,
}

fn validate_pair<T: Scalar>(pos: &[T], neg: &[T], need_top3: bool, allow_unequal: bool) -> Result<()> {
    check_unit_range("positive scores", pos)?;
    check_unit_range("negative scores", neg)?;
    if need_top3 && pos.len() < 3 {
        return Err(Error::invalid(
            "positive bag",
            format!("needs at least 3 instances for M2/M3, got {}", pos.len()),
        ));
    }
    if !allow_unequal && pos.len() != neg.len() {
        return Err(Error::dims("bag pair", pos.len(), neg.len()));
    }
    Ok(())
}

fn select<T: Scalar>(pos: &[T], neg: &[T], need_top3: bool) -> Selection {
    let (pos_m2, pos_m3) = if need_top3 {
        let order = order_desc(pos).expect("validated");
        (Some(order.source_indices[1]), Some(order.source_indices[2]))
    } else {
        (None, None)
    };
    Selection {
        pos_max: argmax(pos),
        pos_min: argmin(pos),
        pos_m2,
        pos_m3,
        neg_max: argmax(neg),
    }
}

#[inline]
fn hinge<T: Scalar>(arg: T) -> T {
    arg.max(T::zero())
}

fn hinges_from<T: Scalar>(pos: &[T], neg: &[T], sel: &Selection) -> HingeTerms<T> {
    let one = T::one();
    let max_neg = neg[sel.neg_max];
    let max_pos = pos[sel.pos_max];
    HingeTerms {
        l1: hinge(one - max_pos + max_neg),
        l2: hinge(one - max_pos + pos[sel.pos_min]),
        l3: sel.pos_m2.map_or(T::zero(), |i| hinge(one - pos[i] + max_neg)),
        l4: sel.pos_m3.map_or(T::zero(), |i| hinge(one - pos[i] + max_neg)),
    }
}

/// The four hinge terms for equal-length bags with at least 3 instances.
pub fn hinge_components<T: Scalar>(pos: &[T], neg: &[T]) -> Result<HingeTerms<T>> {
    validate_pair(pos, neg, true, false)?;
    Ok(hinges_from(pos, neg, &select(pos, neg, true)))
}

pub fn temporal_smoothness<T: Scalar>(scores: &[T], mu1: f64) -> T {
    let sum: T = scores.windows(2).map(|w| (w[0] - w[1]) * (w[0] - w[1])).sum();
    T::lit(mu1) * sum
}

pub fn sparsity<T: Scalar>(scores: &[T], mu2: f64) -> T {
    T::lit(mu2) * scores.iter().copied().sum::<T>()
}

fn sparsity_bag<'a, T>(pos: &'a [T], neg: &'a [T], cfg: &LossConfig) -> &'a [T] {
    match cfg.sparsity_target {
        SparsityTarget::Negative => neg,
        SparsityTarget::Positive => pos,
    }
}

fn breakdown_from<T: Scalar>(pos: &[T], neg: &[T], cfg: &LossConfig, h: HingeTerms<T>) -> LossBreakdown<T> {
    let temporal = temporal_smoothness(pos, cfg.mu1);
    let sparsity = sparsity(sparsity_bag(pos, neg, cfg), cfg.mu2);
    let h = match cfg.variant {
        LossVariant::Proposed => h,
        LossVariant::Baseline => HingeTerms {
            l1: h.l1,
            ..HingeTerms::default()
        },
    };
    let hinge_sum = h.l1 + h.l2 + h.l3 + h.l4;
    LossBreakdown {
        l1: h.l1,
        l2: h.l2,
        l3: h.l3,
        l4: h.l4,
        temporal,
        sparsity,
        regularizer: T::zero(),
        total: hinge_sum + temporal + sparsity,
    }
}

/// Loss of one positive/negative bag pair. The regularizer field is zero;
/// the weight penalty is added once per batch by the objective.
pub fn bag_pair_loss<T: Scalar>(pos: &[T], neg: &[T], cfg: &LossConfig) -> Result<LossBreakdown<T>> {
    Ok(pair_loss_and_subgradient(pos, neg, cfg)?.0)
}

/// Subgradient of [`bag_pair_loss`]'s total with respect to every score.
pub fn loss_subgradient<T: Scalar>(pos: &[T], neg: &[T], cfg: &LossConfig) -> Result<(Vec<T>, Vec<T>)> {
    let (_, d_pos, d_neg) = pair_loss_and_subgradient(pos, neg, cfg)?;
    Ok((d_pos, d_neg))
}

/// Loss breakdown and score subgradients in one pass.
pub fn pair_loss_and_subgradient<T: Scalar>(
    pos: &[T],
    neg: &[T],
    cfg: &LossConfig,
) -> Result<(LossBreakdown<T>, Vec<T>, Vec<T>)> {
    cfg.validate()?;
    let proposed = cfg.variant == LossVariant::Proposed;
    validate_pair(pos, neg, proposed, cfg.allow_unequal_lengths)?;
    let sel = select(pos, neg, proposed);
    let mut h = hinges_from(pos, neg, &sel);
    if !proposed {
        h.l2 = T::zero();
    }
    let loss = breakdown_from(pos, neg, cfg, h);

    let one = T::one();
    let mut d_pos = vec![T::zero(); pos.len()];
    let mut d_neg = vec![T::zero(); neg.len()];
    let max_neg = neg[sel.neg_max];
    let max_pos = pos[sel.pos_max];
    let zero = T::zero();

    if one - max_pos + max_neg > zero {
        d_pos[sel.pos_max] -= one;
        d_neg[sel.neg_max] += one;
    }
    if proposed {
        if one - max_pos + pos[sel.pos_min] > zero {
            d_pos[sel.pos_max] -= one;
            d_pos[sel.pos_min] += one;
        }
        for i in [sel.pos_m2, sel.pos_m3].into_iter().flatten() {
            if one - pos[i] + max_neg > zero {
                d_pos[i] -= one;
                d_neg[sel.neg_max] += one;
            }
        }
    }

    let two_mu1 = T::lit(2.0 * cfg.mu1);
    for i in 0..pos.len().saturating_sub(1) {
        let d = two_mu1 * (pos[i] - pos[i + 1]);
        d_pos[i] += d;
        d_pos[i + 1] -= d;
    }
    let mu2 = T::lit(cfg.mu2);
    let sparse = match cfg.sparsity_target {
        SparsityTarget::Negative => &mut d_neg,
        SparsityTarget::Positive => &mut d_pos,
    };
    sparse.iter_mut().for_each(|d| *d += mu2);

    Ok((loss, d_pos, d_neg))
}

/// `mu3 * ||W||^2` over weight matrices (biases excluded) and its gradient.
pub fn regularizer<T: Scalar>(params: &ScorerParams<T>, mu3: f64) -> (T, Gradient<T>) {
    let mut grad = params.stack.zeros_like();
    let value = regularizer_into(params, mu3, &mut grad);
    (value, grad)
}

/// Adds the regularizer gradient into `grad` and returns its value.
pub fn regularizer_into<T: Scalar>(params: &ScorerParams<T>, mu3: f64, grad: &mut Gradient<T>) -> T {
    let two_mu3 = T::lit(2.0 * mu3);
    for (g, p) in grad.layers_mut().iter_mut().zip(params.stack.layers()) {
        for (gw, w) in g.weights.iter_mut().zip(&p.weights) {
            *gw += two_mu3 * *w;
        }
    }
    T::lit(mu3) * params.stack.weight_sq_norm()
}
