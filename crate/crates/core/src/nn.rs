//! Dense feed-forward networks with exact backprop, and the flat parameter
//! vector every other module works on.
//!
//! Parameters are laid out layer by layer: the weight matrix of a layer in
//! row-major order with shape `(n_out, n_in)`, immediately followed by its
//! `n_out` biases. Hidden layers use ReLU, the output layer a softmax with
//! cross-entropy loss.

use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("feature dimension mismatch: model expects {expected}, batch has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("parameter length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value produced")]
    NonFinite,
}

/// Flat model parameters in `R^d`.
#[derive(Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Panics if the lengths differ.
    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot product of unequal lengths");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "distance of unequal lengths");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn neg(&self) -> ParamVector {
        Self(self.0.iter().map(|v| -v).collect())
    }

    /// `self - other`; panics if the lengths differ.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "subtraction of unequal lengths");
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self += factor * other`; panics if the lengths differ.
    pub fn axpy(&mut self, factor: f64, other: &ParamVector) {
        assert_eq!(self.len(), other.len(), "axpy of unequal lengths");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.len() <= 8 {
            f.debug_tuple("ParamVector").field(&self.0).finish()
        } else {
            write!(f, "ParamVector(len={}, norm={:.6e})", self.0.len(), self.norm())
        }
    }
}

/// Borrowed view of labelled examples stored row-major.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
    pub dim: usize,
}

impl<'a> BatchView<'a> {
    pub fn new(features: &'a [f64], labels: &'a [usize], dim: usize) -> Self {
        debug_assert_eq!(features.len(), labels.len() * dim);
        Self { features, labels, dim }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub gradient: ParamVector,
    pub loss: f64,
}

/// A differentiable objective over flat parameters.
///
/// Implemented by [`ModelSpec`] for classification and by the quadratic
/// harness in `theory` for convex sanity runs.
pub trait Model: Send + Sync + fmt::Debug {
    fn param_count(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// Mean loss over the batch plus `(l2 / 2) * ||weights||^2`, and its exact gradient.
    fn loss_and_grad(&self, theta: &ParamVector, batch: BatchView<'_>, l2: f64) -> Result<GradientResult, NnError>;

    /// Score in `[0, 1]`; top-1 accuracy for classifiers.
    fn evaluate(&self, theta: &ParamVector, batch: BatchView<'_>) -> Result<f64, NnError>;
}

/// Layer sizes (input, hidden..., classes) plus the initialization seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, init_seed: u64) -> Result<Self, NnError> {
        let spec = Self { layer_sizes, init_seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_sizes.len() < 2 {
            return Err(NnError::InvalidSpec(
                "need at least an input and an output layer".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(NnError::InvalidSpec("layer sizes must be positive".into()));
        }
        if self.num_classes() < 2 {
            return Err(NnError::InvalidSpec("output layer needs >= 2 classes".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }

    /// `sum (n_in + 1) * n_out` over consecutive layer pairs.
    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    n_in: w[0],
                    n_out: w[1],
                    w_off: offset,
                    b_off: offset + w[0] * w[1],
                };
                offset += (w[0] + 1) * w[1];
                shape
            })
            .collect()
    }

    /// True at indices holding weights, false at biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.param_count()];
        for layer in self.layers() {
            mask[layer.w_off..layer.b_off].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    fn check_params(&self, theta: &ParamVector) -> Result<(), NnError> {
        if theta.len() != self.param_count() {
            return Err(NnError::LengthMismatch {
                expected: self.param_count(),
                found: theta.len(),
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &BatchView<'_>) -> Result<(), NnError> {
        if batch.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        if batch.dim != self.layer_sizes[0] {
            return Err(NnError::DimensionMismatch {
                expected: self.layer_sizes[0],
                found: batch.dim,
            });
        }
        let classes = self.num_classes();
        if let Some(&label) = batch.labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        Ok(())
    }

    /// Activations of every layer; entry 0 is a copy of the input, the last
    /// entry holds raw logits.
    fn forward(&self, theta: &[f64], batch: &BatchView<'_>) -> Vec<Vec<f64>> {
        let layers = self.layers();
        let m = batch.len();
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(batch.features.to_vec());
        for (li, layer) in layers.iter().enumerate() {
            let input = &acts[li];
            let weights = &theta[layer.w_off..layer.b_off];
            let biases = &theta[layer.b_off..layer.b_off + layer.n_out];
            let mut out = vec![0.0; m * layer.n_out];
            for r in 0..m {
                let a = &input[r * layer.n_in..(r + 1) * layer.n_in];
                let z = &mut out[r * layer.n_out..(r + 1) * layer.n_out];
                for (o, zo) in z.iter_mut().enumerate() {
                    let w = &weights[o * layer.n_in..(o + 1) * layer.n_in];
                    *zo = biases[o] + dot(w, a);
                }
            }
            if li + 1 < layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    n_in: usize,
    n_out: usize,
    w_off: usize,
    b_off: usize,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Model for ModelSpec {
    fn param_count(&self) -> usize {
        ModelSpec::param_count(self)
    }

    fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    fn loss_and_grad(&self, theta: &ParamVector, batch: BatchView<'_>, l2: f64) -> Result<GradientResult, NnError> {
        self.check_params(theta)?;
        self.check_batch(&batch)?;
        let layers = self.layers();
        let m = batch.len();
        let classes = self.num_classes();
        let acts = self.forward(theta, &batch);

        // Softmax cross-entropy and its gradient w.r.t. the logits.
        let logits = acts.last().expect("at least one layer");
        let mut delta = vec![0.0; m * classes];
        let mut loss = 0.0;
        let inv_m = 1.0 / m as f64;
        for r in 0..m {
            let z = &logits[r * classes..(r + 1) * classes];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            let y = batch.labels[r];
            loss += lse - z[y];
            let d = &mut delta[r * classes..(r + 1) * classes];
            for (k, dk) in d.iter_mut().enumerate() {
                let p = (z[k] - lse).exp();
                *dk = (p - if k == y { 1.0 } else { 0.0 }) * inv_m;
            }
        }
        loss *= inv_m;

        let mut grad = vec![0.0; theta.len()];
        for li in (0..layers.len()).rev() {
            let layer = layers[li];
            let input = &acts[li];
            let weights = &theta[layer.w_off..layer.b_off];
            {
                let (gw, gb) = grad[layer.w_off..layer.b_off + layer.n_out].split_at_mut(layer.b_off - layer.w_off);
                for r in 0..m {
                    let a = &input[r * layer.n_in..(r + 1) * layer.n_in];
                    let d = &delta[r * layer.n_out..(r + 1) * layer.n_out];
                    for (o, &dro) in d.iter().enumerate() {
                        if dro != 0.0 {
                            axpy(&mut gw[o * layer.n_in..(o + 1) * layer.n_in], dro, a);
                            gb[o] += dro;
                        }
                    }
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; m * layer.n_in];
                for r in 0..m {
                    let d = &delta[r * layer.n_out..(r + 1) * layer.n_out];
                    let p = &mut prev[r * layer.n_in..(r + 1) * layer.n_in];
                    for (o, &dro) in d.iter().enumerate() {
                        if dro != 0.0 {
                            axpy(p, dro, &weights[o * layer.n_in..(o + 1) * layer.n_in]);
                        }
                    }
                    // ReLU derivative: the stored activation is positive iff the pre-activation was.
                    let a = &input[r * layer.n_in..(r + 1) * layer.n_in];
                    for (pi, ai) in p.iter_mut().zip(a) {
                        if *ai <= 0.0 {
                            *pi = 0.0;
                        }
                    }
                }
                delta = prev;
            }
        }

        if l2 > 0.0 {
            let mut sq = 0.0;
            for layer in &layers {
                for k in layer.w_off..layer.b_off {
                    sq += theta[k] * theta[k];
                    grad[k] += l2 * theta[k];
                }
            }
            loss += 0.5 * l2 * sq;
        }

        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(GradientResult {
            gradient: ParamVector(grad),
            loss,
        })
    }

    fn evaluate(&self, theta: &ParamVector, batch: BatchView<'_>) -> Result<f64, NnError> {
        self.check_params(theta)?;
        self.check_batch(&batch)?;
        let classes = self.num_classes();
        let acts = self.forward(theta, &batch);
        let logits = acts.last().expect("at least one layer");
        let correct = (0..batch.len())
            .filter(|&r| argmax(&logits[r * classes..(r + 1) * classes]) == batch.labels[r])
            .count();
        Ok(correct as f64 / batch.len() as f64)
    }
}

/// First index of the maximum; NaN entries never win.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Glorot-uniform weights, zero biases, drawn from `spec.init_seed`.
pub fn init_model(spec: &ModelSpec) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut theta = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let limit = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
        for w in &mut theta[layer.w_off..layer.b_off] {
            *w = dist.sample(&mut rng);
        }
    }
    ParamVector(theta)
}

/// `theta - alpha * grad`.
pub fn sgd_step(theta: &ParamVector, grad: &ParamVector, alpha: f64) -> Result<ParamVector, NnError> {
    if theta.len() != grad.len() {
        return Err(NnError::LengthMismatch {
            expected: theta.len(),
            found: grad.len(),
        });
    }
    Ok(ParamVector(
        theta.iter().zip(grad.iter()).map(|(t, g)| t - alpha * g).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(rng: &mut ChaCha8Rng, m: usize, dim: usize, classes: usize) -> (Vec<f64>, Vec<usize>) {
        let features = (0..m * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..m).map(|_| rng.random_range(0..classes)).collect();
        (features, labels)
    }

    #[test]
    fn param_count_matches_layer_formula() {
        let spec = ModelSpec::new(vec![784, 200, 200, 10], 0).unwrap();
        assert_eq!(spec.param_count(), 784 * 200 + 200 + 200 * 200 + 200 + 200 * 10 + 10);
        assert_eq!(spec.param_count(), 199_210);
        assert_eq!(init_model(&spec).len(), 199_210);
    }

    #[test]
    fn glorot_bound_and_zero_biases() {
        let spec = ModelSpec::new(vec![2, 2], 17).unwrap();
        let theta = init_model(&spec);
        let limit = (6.0f64 / 4.0).sqrt();
        assert!(theta[..4].iter().all(|w| w.abs() <= limit));
        assert_eq!(&theta[4..], &[0.0, 0.0]);
        assert_eq!(theta, init_model(&spec));
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(ModelSpec::new(vec![3], 0).is_err());
        assert!(ModelSpec::new(vec![3, 0, 2], 0).is_err());
        assert!(ModelSpec::new(vec![3, 1], 0).is_err());
    }

    #[test]
    fn uniform_softmax_gives_log_classes() {
        let spec = ModelSpec::new(vec![3, 4, 5], 0).unwrap();
        let theta = ParamVector::zeros(spec.param_count());
        let features = [0.3, -0.2, 0.9];
        let labels = [2];
        let res = spec
            .loss_and_grad(&theta, BatchView::new(&features, &labels, 3), 0.0)
            .unwrap();
        assert!((res.loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let spec = ModelSpec::new(vec![4, 6, 3], 5).unwrap();
        let theta = init_model(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f, l) = random_batch(&mut rng, 5, 4, 3);
        let f2: Vec<f64> = f.iter().chain(f.iter()).cloned().collect();
        let l2: Vec<usize> = l.iter().chain(l.iter()).cloned().collect();
        let a = spec.loss_and_grad(&theta, BatchView::new(&f, &l, 4), 0.01).unwrap();
        let b = spec.loss_and_grad(&theta, BatchView::new(&f2, &l2, 4), 0.01).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for (x, y) in a.gradient.iter().zip(b.gradient.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_and_label_errors() {
        let spec = ModelSpec::new(vec![2, 3], 0).unwrap();
        let theta = init_model(&spec);
        let f = [1.0, 2.0, 3.0];
        let l = [0];
        assert_eq!(
            spec.loss_and_grad(&theta, BatchView::new(&f, &l, 3), 0.0),
            Err(NnError::DimensionMismatch { expected: 2, found: 3 })
        );
        let f = [1.0, 2.0];
        let l = [3];
        assert_eq!(
            spec.loss_and_grad(&theta, BatchView::new(&f, &l, 2), 0.0),
            Err(NnError::LabelOutOfRange { label: 3, classes: 3 })
        );
        assert_eq!(
            spec.loss_and_grad(&theta, BatchView::new(&[], &[], 2), 0.0),
            Err(NnError::EmptyBatch)
        );
        let short = ParamVector::zeros(3);
        assert!(matches!(
            spec.evaluate(&short, BatchView::new(&f, &[0], 2)),
            Err(NnError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let theta = ParamVector::new(vec![1.0, 1.0]);
        let g = ParamVector::new(vec![2.0, -2.0]);
        assert_eq!(sgd_step(&theta, &g, 0.5).unwrap().as_slice(), &[0.0, 2.0]);
        assert_eq!(sgd_step(&theta, &ParamVector::zeros(2), 0.7).unwrap(), theta);
        assert_eq!(sgd_step(&theta, &g, 0.0).unwrap(), theta);
        assert!(sgd_step(&theta, &ParamVector::zeros(3), 0.1).is_err());
        assert_eq!(theta.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn evaluate_perfect_and_wrong_predictions() {
        // Identity-like 2-class linear model: logit_k = x_k.
        let spec = ModelSpec::new(vec![2, 2], 0).unwrap();
        let theta = ParamVector::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let f = [1.0, 0.0, 0.0, 1.0, 2.0, 1.0];
        let good = [0, 1, 0];
        let bad = [1, 0, 1];
        assert_eq!(spec.evaluate(&theta, BatchView::new(&f, &good, 2)).unwrap(), 1.0);
        assert_eq!(spec.evaluate(&theta, BatchView::new(&f, &bad, 2)).unwrap(), 0.0);
    }

    #[test]
    fn small_step_does_not_increase_batch_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..50 {
            let spec = ModelSpec::new(vec![5, 7, 4], case).unwrap();
            let theta = init_model(&spec);
            let (f, l) = random_batch(&mut rng, 8, 5, 4);
            let batch = BatchView::new(&f, &l, 5);
            let before = spec.loss_and_grad(&theta, batch, 0.001).unwrap();
            let next = sgd_step(&theta, &before.gradient, 1e-3).unwrap();
            let after = spec.loss_and_grad(&next, batch, 0.001).unwrap();
            assert!(
                after.loss <= before.loss,
                "case {case}: {} > {}",
                after.loss,
                before.loss
            );
            assert!(before.loss >= 0.0);
        }
    }

    #[test]
    fn weight_mask_excludes_biases() {
        let spec = ModelSpec::new(vec![2, 3, 2], 0).unwrap();
        let mask = spec.weight_mask();
        assert_eq!(mask.iter().filter(|m| **m).count(), 2 * 3 + 3 * 2);
        assert!(!mask[6] && !mask[7] && !mask[8]);
        assert!(mask[9]);
    }
}
