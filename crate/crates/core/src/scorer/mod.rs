//! The segment scorer: a three-layer fully connected network mapping one
//! segment feature to an abnormality score in (0, 1).
//!
//! Layer 1 is rectified, layer 2 uses [`ScorerParams::hidden_activation`]
//! (rectifier by default) and layer 3 is a single logistic unit. Inverted
//! dropout may follow layers 1 and 2. Gradients are hand-derived for this
//! fixed topology.

mod model_file;

pub use model_file::{read_model, write_model, ModelFile};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{axpy, dot, sigmoid, Scalar};
use crate::seeding::{self, TAG_DROPOUT};
use crate::{Error, Result};

/// Input, hidden, hidden, output widths.
pub const DEFAULT_LAYER_DIMS: [usize; 4] = [512, 128, 32, 1];
pub const DEFAULT_DROPOUT: f64 = 0.6;
pub const NUM_LAYERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative at `z`. The rectifier uses 0 at exactly 0.
    #[inline]
    fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (T::one() - s)
            }
            Activation::Identity => T::one(),
        }
    }
}

/// One affine layer. Weights are row-major `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    out_dim: usize,
    in_dim: usize,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense {
            out_dim,
            in_dim,
            weights: vec![T::zero(); out_dim * in_dim],
            biases: vec![T::zero(); out_dim],
        }
    }

    pub fn from_parts(out_dim: usize, in_dim: usize, weights: Vec<T>, biases: Vec<T>) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::invalid("layer dims", "layer dims must be > 0"));
        }
        if weights.len() != out_dim * in_dim {
            return Err(Error::dims("layer weights", out_dim * in_dim, weights.len()));
        }
        if biases.len() != out_dim {
            return Err(Error::dims("layer biases", out_dim, biases.len()));
        }
        Ok(Dense {
            out_dim,
            in_dim,
            weights,
            biases,
        })
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.weights[r * self.in_dim..(r + 1) * self.in_dim]
    }

    #[inline]
    fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.weights[r * self.in_dim..(r + 1) * self.in_dim]
    }
}

/// Storage with the shape of the network's parameters: three layers of
/// weights and biases. Used for the parameters themselves, for gradients
/// and for optimizer accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack<T> {
    layers: [Dense<T>; NUM_LAYERS],
}

/// Gradient of a scalar with respect to every network parameter.
pub type Gradient<T> = LayerStack<T>;

pub fn validate_dims(dims: &[usize]) -> Result<[usize; 4]> {
    if dims.len() != NUM_LAYERS + 1 {
        return Err(Error::invalid(
            "layer_dims",
            format!("expected {} entries, got {}", NUM_LAYERS + 1, dims.len()),
        ));
    }
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(Error::invalid("layer_dims", format!("entry {i} is zero")));
    }
    if dims[NUM_LAYERS] != 1 {
        return Err(Error::invalid(
            "layer_dims",
            format!("last dim must be 1, got {}", dims[NUM_LAYERS]),
        ));
    }
    Ok([dims[0], dims[1], dims[2], dims[3]])
}

impl<T: Scalar> LayerStack<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let d = validate_dims(dims)?;
        Ok(LayerStack {
            layers: [
                Dense::zeros(d[1], d[0]),
                Dense::zeros(d[2], d[1]),
                Dense::zeros(d[3], d[2]),
            ],
        })
    }

    pub fn from_layers(layers: [Dense<T>; NUM_LAYERS]) -> Result<Self> {
        for k in 1..NUM_LAYERS {
            if layers[k].in_dim != layers[k - 1].out_dim {
                return Err(Error::invalid(
                    "layer_dims",
                    format!(
                        "layer {} has in_dim {} but layer {} has out_dim {}",
                        k + 1,
                        layers[k].in_dim,
                        k,
                        layers[k - 1].out_dim
                    ),
                ));
            }
        }
        if layers[NUM_LAYERS - 1].out_dim != 1 {
            return Err(Error::invalid("layer_dims", "last dim must be 1"));
        }
        Ok(LayerStack { layers })
    }

    pub fn zeros_like(&self) -> Self {
        LayerStack {
            layers: [0, 1, 2].map(|k| Dense::zeros(self.layers[k].out_dim, self.layers[k].in_dim)),
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [
            self.layers[0].in_dim,
            self.layers[0].out_dim,
            self.layers[1].out_dim,
            self.layers[2].out_dim,
        ]
    }

    pub fn layers(&self) -> &[Dense<T>; NUM_LAYERS] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>; NUM_LAYERS] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// All values in canonical order: W1, b1, W2, b2, W3, b3.
    pub fn iter(&self) -> impl Iterator<Item = &T> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    /// Mutable access to the value at a canonical flat index.
    pub fn get_mut(&mut self, mut index: usize) -> Option<&mut T> {
        for l in self.layers.iter_mut() {
            if index < l.weights.len() {
                return Some(&mut l.weights[index]);
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return Some(&mut l.biases[index]);
            }
            index -= l.biases.len();
        }
        None
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers
            .iter()
            .zip(&other.layers)
            .all(|(a, b)| a.out_dim == b.out_dim && a.in_dim == b.in_dim)
    }

    pub fn check_same_shape(&self, other: &Self, context: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(
                context,
                format!("shape {:?} does not match {:?}", other.dims(), self.dims()),
            ))
        }
    }

    pub fn fill_zero(&mut self) {
        self.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// Sum of squared weight-matrix entries; biases excluded.
    pub fn weight_sq_norm(&self) -> T {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|w| *w * *w).sum::<T>())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> LayerStack<U> {
        LayerStack {
            layers: [0, 1, 2].map(|k| {
                let l = &self.layers[k];
                Dense {
                    out_dim: l.out_dim,
                    in_dim: l.in_dim,
                    weights: l.weights.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
                    biases: l.biases.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
                }
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams<T> {
    pub stack: LayerStack<T>,
    /// Activation after layer 2. Layer 1 is always rectified and layer 3
    /// always logistic.
    pub hidden_activation: Activation,
}

impl<T: Scalar> ScorerParams<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Ok(ScorerParams {
            stack: LayerStack::zeros(dims)?,
            hidden_activation: Activation::Relu,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.stack.dims()
    }

    pub fn input_dim(&self) -> usize {
        self.stack.layers[0].in_dim
    }

    pub fn num_params(&self) -> usize {
        self.stack.num_params()
    }

    fn validate_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("segment feature", self.input_dim(), x.len()));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid("segment feature", format!("entry {i} is not finite")));
        }
        Ok(())
    }

    /// Runs the network on one instance. `masks`, when present, zero the
    /// dropped hidden units and scale the kept ones by `1 / (1 - rate)`.
    /// Pre-activations of dropped units are not evaluated and stay zero in
    /// the cache.
    pub fn forward(&self, x: &[T], masks: Option<DropoutMasks>, rate: f64) -> Result<ForwardCache<T>> {
        self.validate_input(x)?;
        let [_, h1, h2, _] = self.dims();
        if let Some(m) = &masks {
            if m.hidden1.len() != h1 || m.hidden2.len() != h2 {
                return Err(Error::invalid("dropout masks", "mask widths do not match hidden layers"));
            }
        }
        let keep_scale = if masks.is_some() {
            T::lit(1.0 / (1.0 - rate))
        } else {
            T::one()
        };
        let [l1, l2, l3] = &self.stack.layers;

        let mut pre1 = vec![T::zero(); h1];
        let mut post1 = vec![T::zero(); h1];
        for j in 0..h1 {
            if masks.as_ref().is_some_and(|m| !m.hidden1[j]) {
                continue;
            }
            let z = dot(l1.row(j), x) + l1.biases[j];
            pre1[j] = z;
            post1[j] = z.max(T::zero()) * keep_scale;
        }

        let mut pre2 = vec![T::zero(); h2];
        let mut post2 = vec![T::zero(); h2];
        for k in 0..h2 {
            if masks.as_ref().is_some_and(|m| !m.hidden2[k]) {
                continue;
            }
            let z = dot(l2.row(k), &post1) + l2.biases[k];
            pre2[k] = z;
            post2[k] = self.hidden_activation.apply(z) * keep_scale;
        }

        let pre3 = dot(l3.row(0), &post2) + l3.biases[0];
        let score = sigmoid(pre3);
        Ok(ForwardCache {
            input: x.to_vec(),
            pre1,
            post1,
            pre2,
            post2,
            pre3,
            score,
            masks,
            rate,
            keep_scale,
        })
    }

    /// Recomputes the score of a cached pass from its input and masks.
    pub fn replay(&self, cache: &ForwardCache<T>) -> Result<T> {
        Ok(self.forward(&cache.input, cache.masks.clone(), cache.rate)?.score)
    }

    fn check_cache(&self, cache: &ForwardCache<T>) -> Result<()> {
        let [d0, h1, h2, _] = self.dims();
        if cache.input.len() != d0 || cache.pre1.len() != h1 || cache.pre2.len() != h2 {
            return Err(Error::invalid(
                "forward cache",
                format!(
                    "cache shape [{}, {}, {}] does not match params [{d0}, {h1}, {h2}]",
                    cache.input.len(),
                    cache.pre1.len(),
                    cache.pre2.len()
                ),
            ));
        }
        Ok(())
    }

    /// Adds `d_score * d(score)/d(theta)` into `grad`, optionally writing the
    /// input gradient.
    fn backprop_impl(
        &self,
        cache: &ForwardCache<T>,
        d_score: T,
        grad: &mut Gradient<T>,
        mut d_input: Option<&mut [T]>,
    ) -> Result<()> {
        self.check_cache(cache)?;
        self.stack.check_same_shape(grad, "gradient buffer")?;
        if d_score == T::zero() {
            return Ok(());
        }
        let [_, h1, h2, _] = self.dims();
        let [l1, l2, l3] = &self.stack.layers;
        let [g1, g2, g3] = &mut grad.layers;
        let kept1 = |j: usize| cache.masks.as_ref().is_none_or(|m| m.hidden1[j]);
        let kept2 = |k: usize| cache.masks.as_ref().is_none_or(|m| m.hidden2[k]);

        let s = cache.score;
        let dz3 = d_score * s * (T::one() - s);
        axpy(dz3, &cache.post2, g3.row_mut(0));
        g3.biases[0] += dz3;

        let mut dz2 = vec![T::zero(); h2];
        for k in 0..h2 {
            if !kept2(k) {
                continue;
            }
            let da2 = dz3 * l3.weights[k];
            dz2[k] = da2 * cache.keep_scale * self.hidden_activation.derivative(cache.pre2[k]);
        }

        let mut da1 = vec![T::zero(); h1];
        for k in 0..h2 {
            let d = dz2[k];
            if d == T::zero() {
                continue;
            }
            axpy(d, &cache.post1, g2.row_mut(k));
            g2.biases[k] += d;
            axpy(d, l2.row(k), &mut da1);
        }

        for j in 0..h1 {
            if !kept1(j) || cache.pre1[j] <= T::zero() {
                continue;
            }
            let dz1 = da1[j] * cache.keep_scale;
            if dz1 == T::zero() {
                continue;
            }
            axpy(dz1, &cache.input, g1.row_mut(j));
            g1.biases[j] += dz1;
            if let Some(dx) = d_input.as_deref_mut() {
                axpy(dz1, l1.row(j), dx);
            }
        }
        Ok(())
    }

    /// Accumulates `d_score * d(score)/d(theta)` into `grad`.
    pub fn backprop_into(&self, cache: &ForwardCache<T>, d_score: T, grad: &mut Gradient<T>) -> Result<()> {
        self.backprop_impl(cache, d_score, grad, None)
    }
}

/// Deterministic uniform fan-in/fan-out initialization with zero biases.
pub fn init_params<T: Scalar>(seed: u64, layer_dims: &[usize]) -> Result<ScorerParams<T>> {
    let mut params = ScorerParams::<T>::zeros(layer_dims)?;
    let mut rng = seeding::stream(&[seed]);
    for layer in params.stack.layers.iter_mut() {
        let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
        let bound = T::lit(limit);
        for w in layer.weights.iter_mut() {
            let u: f64 = rng.random();
            let v = T::lit((2.0 * u - 1.0) * limit);
            *w = v.max(-bound).min(bound);
        }
    }
    Ok(params)
}

/// Which hidden units survive dropout for one instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropoutMasks {
    pub hidden1: Vec<bool>,
    pub hidden2: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Eval,
    /// Masks for instance `i` come from the stream keyed by `(stream, i)`.
    Train { stream: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutPlan {
    pub rate: f64,
    pub mode: DropoutMode,
}

impl DropoutPlan {
    pub fn eval() -> Self {
        DropoutPlan {
            rate: DEFAULT_DROPOUT,
            mode: DropoutMode::Eval,
        }
    }

    pub fn train(rate: f64, stream: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout rate", format!("{rate} is outside [0, 1)")));
        }
        Ok(DropoutPlan {
            rate,
            mode: DropoutMode::Train { stream },
        })
    }

    /// Masks for the given instance, or `None` when dropout is inactive.
    pub fn masks(&self, dims: [usize; 4], instance: usize) -> Option<DropoutMasks> {
        match self.mode {
            DropoutMode::Eval => None,
            DropoutMode::Train { .. } if self.rate == 0.0 => None,
            DropoutMode::Train { stream } => {
                let mut rng = seeding::stream(&[TAG_DROPOUT, stream, instance as u64]);
                let mut draw = |n: usize| (0..n).map(|_| rng.random::<f64>() >= self.rate).collect();
                let hidden1 = draw(dims[1]);
                let hidden2 = draw(dims[2]);
                Some(DropoutMasks { hidden1, hidden2 })
            }
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache<T> {
    pub input: Vec<T>,
    pub pre1: Vec<T>,
    /// Rectified, masked and rescaled layer-1 output.
    pub post1: Vec<T>,
    pub pre2: Vec<T>,
    pub post2: Vec<T>,
    pub pre3: T,
    pub score: T,
    pub masks: Option<DropoutMasks>,
    pub rate: f64,
    pub keep_scale: T,
}

pub fn score_instance<T: Scalar>(
    params: &ScorerParams<T>,
    x: &[T],
    plan: &DropoutPlan,
    instance: usize,
) -> Result<(T, ForwardCache<T>)> {
    let cache = params.forward(x, plan.masks(params.dims(), instance), plan.rate)?;
    Ok((cache.score, cache))
}

/// Scores every instance of a bag in order. In train mode each instance
/// gets its own mask.
pub fn score_bag<T: Scalar, X: AsRef<[T]>>(
    params: &ScorerParams<T>,
    instances: &[X],
    plan: &DropoutPlan,
) -> Result<(Vec<T>, Vec<ForwardCache<T>>)> {
    if instances.is_empty() {
        return Err(Error::invalid("bag", "bag has no instances"));
    }
    let mut scores = Vec::with_capacity(instances.len());
    let mut caches = Vec::with_capacity(instances.len());
    for (i, x) in instances.iter().enumerate() {
        let (s, c) = score_instance(params, x.as_ref(), plan, i)?;
        scores.push(s);
        caches.push(c);
    }
    Ok((scores, caches))
}

/// Eval-mode scores without keeping caches.
pub fn score_segments<T: Scalar, X: AsRef<[T]>>(params: &ScorerParams<T>, instances: &[X]) -> Result<Vec<T>> {
    instances
        .iter()
        .map(|x| params.forward(x.as_ref(), None, 0.0).map(|c| c.score))
        .collect()
}

/// Gradient of `d_score * score` with respect to every parameter, plus the
/// gradient with respect to the input.
pub fn backprop_instance<T: Scalar>(
    params: &ScorerParams<T>,
    cache: &ForwardCache<T>,
    d_score: T,
) -> Result<(Gradient<T>, Vec<T>)> {
    let mut grad = params.stack.zeros_like();
    let mut d_input = vec![T::zero(); params.input_dim()];
    params.backprop_impl(cache, d_score, &mut grad, Some(&mut d_input))?;
    Ok((grad, d_input))
}
