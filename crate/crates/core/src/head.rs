//! The prediction head: `softmax(τ · W · Qh / ‖Qh‖)`.
//!
//! `W` (K×d) is the shared classifier, `Q` (d×d) the client's local feature map.
//! Gradients are analytic for both parameter groups; the feature-side chain runs
//! through the normalisation, the product `Qh` and, for the orthogonal variant,
//! the Cayley map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::orthomap::{self, BlockSpec, LocalTransform, OrthoError};

/// Features (raw or transformed) with a norm at or below this are rejected.
pub const MIN_FEATURE_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("transformed feature norm {norm:e} is too small to normalise")]
    DegenerateFeature { norm: f64 },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("feature has length {got}, expected {expected}")]
    FeatureLength { got: usize, expected: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("classifier has {got} columns but the local map is {expected}-dimensional")]
    ClassifierShape { got: usize, expected: usize },
    #[error(transparent)]
    Ortho(#[from] OrthoError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// One labelled embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub feature: Vec<f64>,
    pub label: u32,
}

impl Example {
    pub fn new(feature: Vec<f64>, label: u32) -> Result<Self, HeadError> {
        let n = linalg::norm(&feature);
        if n.is_nan() || n <= MIN_FEATURE_NORM {
            return Err(HeadError::DegenerateFeature { norm: n });
        }
        Ok(Self { feature, label })
    }
}

/// How a client's local parameter turns into the feature map `Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LocalMap {
    /// `Q = cayley(X)`.
    Orthogonal(LocalTransform),
    /// `Q = X`, no constraint (restricted to the block pattern).
    Linear { spec: BlockSpec, x: Matrix },
    /// `Q = I`, never trained.
    Identity { eye: Matrix },
}

impl LocalMap {
    pub fn orthogonal(spec: BlockSpec) -> Self {
        LocalMap::Orthogonal(LocalTransform::identity(spec))
    }

    pub fn linear(spec: BlockSpec) -> Self {
        LocalMap::Linear {
            spec,
            x: Matrix::identity(spec.dim()),
        }
    }

    pub fn identity(dim: usize) -> Self {
        LocalMap::Identity {
            eye: Matrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix().rows()
    }

    /// The feature map `Q`.
    pub fn matrix(&self) -> &Matrix {
        match self {
            LocalMap::Orthogonal(t) => t.q(),
            LocalMap::Linear { x, .. } => x,
            LocalMap::Identity { eye } => eye,
        }
    }

    /// The trainable parameter `X`, if any.
    pub fn parameter(&self) -> Option<&Matrix> {
        match self {
            LocalMap::Orthogonal(t) => Some(t.x()),
            LocalMap::Linear { x, .. } => Some(x),
            LocalMap::Identity { .. } => None,
        }
    }

    pub fn block_spec(&self) -> Option<BlockSpec> {
        match self {
            LocalMap::Orthogonal(t) => Some(t.spec()),
            LocalMap::Linear { spec, .. } => Some(*spec),
            LocalMap::Identity { .. } => None,
        }
    }

    /// Replaces `X` (and recomputes `Q`). A no-op for the identity map.
    pub fn set_parameter(&mut self, new_x: Matrix) -> Result<(), HeadError> {
        match self {
            LocalMap::Orthogonal(t) => t.set_x(new_x)?,
            LocalMap::Linear { spec, x } => {
                if new_x.shape() != (spec.dim(), spec.dim()) {
                    return Err(OrthoError::Shape {
                        expected: spec.dim(),
                        rows: new_x.rows(),
                        cols: new_x.cols(),
                    }
                    .into());
                }
                *x = spec.mask(&new_x);
            }
            LocalMap::Identity { .. } => {}
        }
        Ok(())
    }

    /// Maps `∂ℓ/∂Q` to `∂ℓ/∂X`.
    pub fn pullback(&self, grad_q: &Matrix) -> Result<Matrix, HeadError> {
        Ok(match self {
            LocalMap::Orthogonal(t) => orthomap::cayley_pullback(t, grad_q)?,
            LocalMap::Linear { spec, .. } => spec.mask(grad_q),
            LocalMap::Identity { eye } => Matrix::zeros(eye.rows(), eye.cols()),
        })
    }
}

/// Parameters of one client's head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_g: Matrix,
    pub local: LocalMap,
    pub tau: f64,
}

impl HeadParams {
    pub fn new(w_g: Matrix, local: LocalMap, tau: f64) -> Result<Self, HeadError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(HeadError::InvalidTemperature(tau));
        }
        if w_g.cols() != local.dim() {
            return Err(HeadError::ClassifierShape {
                got: w_g.cols(),
                expected: local.dim(),
            });
        }
        Ok(Self { w_g, local, tau })
    }

    pub fn classes(&self) -> usize {
        self.w_g.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_g.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub grad_wg: Matrix,
    pub grad_x: Matrix,
}

struct Pass {
    /// `Qh / ‖Qh‖`
    unit: Vec<f64>,
    /// `‖Qh‖`
    norm: f64,
    logits: Vec<f64>,
}

fn pass(p: &HeadParams, h: &[f64]) -> Result<Pass, HeadError> {
    if h.len() != p.dim() {
        return Err(HeadError::FeatureLength {
            got: h.len(),
            expected: p.dim(),
        });
    }
    let v = p.local.matrix().mul_vec(h)?;
    let norm = linalg::norm(&v);
    if !norm.is_finite() || norm <= MIN_FEATURE_NORM {
        return Err(HeadError::DegenerateFeature { norm });
    }
    let unit: Vec<f64> = v.iter().map(|x| x / norm).collect();
    let logits = p.w_g.mul_vec(&unit)?.into_iter().map(|z| p.tau * z).collect();
    Ok(Pass { unit, norm, logits })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[index] - max - lse
}

fn check_label(p: &HeadParams, label: u32) -> Result<usize, HeadError> {
    let k = p.classes();
    if label as usize >= k {
        return Err(HeadError::LabelOutOfRange { label, classes: k });
    }
    Ok(label as usize)
}

/// Class probabilities for one feature vector.
pub fn forward(p: &HeadParams, h: &[f64]) -> Result<Vec<f64>, HeadError> {
    Ok(softmax(&pass(p, h)?.logits))
}

/// Mean cross-entropy over the batch.
pub fn loss(p: &HeadParams, batch: &[Example]) -> Result<f64, HeadError> {
    if batch.is_empty() {
        return Err(HeadError::EmptyBatch);
    }
    let mut total = 0.0;
    for ex in batch {
        let y = check_label(p, ex.label)?;
        total -= log_softmax_at(&pass(p, &ex.feature)?.logits, y);
    }
    Ok(total / batch.len() as f64)
}

/// Analytic batch-mean gradients of [`loss`] w.r.t. `W` and `X`.
pub fn gradients(p: &HeadParams, batch: &[Example]) -> Result<HeadGradients, HeadError> {
    if batch.is_empty() {
        return Err(HeadError::EmptyBatch);
    }
    let (k, d) = (p.classes(), p.dim());
    let trains_local = p.local.parameter().is_some();
    let mut grad_wg = Matrix::zeros(k, d);
    let mut grad_q = Matrix::zeros(d, d);
    let scale = 1.0 / batch.len() as f64;

    for ex in batch {
        let y = check_label(p, ex.label)?;
        let fwd = pass(p, &ex.feature)?;
        // δ = r − onehot(y), scaled by τ: the gradient w.r.t. the pre-temperature logits.
        let mut delta = softmax(&fwd.logits);
        delta[y] -= 1.0;
        for v in delta.iter_mut() {
            *v *= p.tau;
        }
        grad_wg.add_outer(scale, &delta, &fwd.unit)?;

        if trains_local {
            let g_unit = p.w_g.tr_mul_vec(&delta)?;
            let radial = linalg::dot(&fwd.unit, &g_unit);
            let g_v: Vec<f64> = g_unit
                .iter()
                .zip(&fwd.unit)
                .map(|(g, u)| (g - radial * u) / fwd.norm)
                .collect();
            grad_q.add_outer(scale, &g_v, &ex.feature)?;
        }
    }

    let grad_x = p.local.pullback(&grad_q)?;
    Ok(HeadGradients { grad_wg, grad_x })
}

/// Arg-max class; ties go to the lowest index.
pub fn predict(p: &HeadParams, h: &[f64]) -> Result<usize, HeadError> {
    let logits = pass(p, h)?.logits;
    let mut best = 0;
    for (i, z) in logits.iter().enumerate().skip(1) {
        if *z > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_head(tau: f64) -> HeadParams {
        HeadParams::new(Matrix::identity(2), LocalMap::orthogonal(BlockSpec::full(2)), tau).unwrap()
    }

    fn e() -> f64 {
        std::f64::consts::E
    }

    #[test]
    fn forward_example() {
        let p = simple_head(1.0);
        let probs = forward(&p, &[1.0, 0.0]).unwrap();
        assert!((probs[0] - e() / (e() + 1.0)).abs() < 1e-15);
        assert!((probs[1] - 1.0 / (e() + 1.0)).abs() < 1e-15);
        assert!((probs[0] - 0.7311).abs() < 1e-4);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_is_scale_invariant() {
        let p = simple_head(3.0);
        let a = forward(&p, &[0.3, -0.7]).unwrap();
        let b = forward(&p, &[30.0, -70.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_rows_give_uniform() {
        let w = Matrix::from_rows(&[vec![0.2, 0.5], vec![0.2, 0.5], vec![0.2, 0.5]]).unwrap();
        let p = HeadParams::new(w, LocalMap::identity(2), 100.0).unwrap();
        for prob in forward(&p, &[0.9, -0.1]).unwrap() {
            assert!((prob - 1.0 / 3.0).abs() < 1e-15);
        }
        let batch = vec![Example::new(vec![1.0, 2.0], 2).unwrap()];
        assert!((loss(&p, &batch).unwrap() - 3f64.ln()).abs() < 1e-14);
        assert_eq!(predict(&p, &[0.9, -0.1]).unwrap(), 0);
    }

    #[test]
    fn loss_example() {
        let p = simple_head(1.0);
        let batch = vec![Example::new(vec![1.0, 0.0], 0).unwrap()];
        let expected = -(e() / (e() + 1.0)).ln();
        assert!((loss(&p, &batch).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn gradient_example() {
        let p = simple_head(1.0);
        let batch = vec![Example::new(vec![1.0, 0.0], 0).unwrap()];
        let g = gradients(&p, &batch).unwrap();
        let r0 = e() / (e() + 1.0);
        assert!((g.grad_wg[(0, 0)] - (r0 - 1.0)).abs() < 1e-15);
        assert!((g.grad_wg[(1, 0)] - (1.0 - r0)).abs() < 1e-15);
        assert_eq!(g.grad_wg[(0, 1)], 0.0);
        assert_eq!(g.grad_wg[(1, 1)], 0.0);
    }

    #[test]
    fn saturated_correct_prediction_has_zero_gradient() {
        // τ large enough that the softmax is exactly one-hot in f64.
        let p = simple_head(1e4);
        let batch = vec![
            Example::new(vec![1.0, 0.0], 0).unwrap(),
            Example::new(vec![0.0, 2.0], 1).unwrap(),
        ];
        let g = gradients(&p, &batch).unwrap();
        assert_eq!(g.grad_wg.max_abs(), 0.0);
        assert_eq!(g.grad_x.max_abs(), 0.0);
        assert_eq!(loss(&p, &batch).unwrap(), 0.0);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&simple_head(1.0), &[1.0, 0.0]).unwrap(), 0);
        let w = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let p = HeadParams::new(w, LocalMap::identity(3), 10.0).unwrap();
        assert_eq!(predict(&p, &[0.0, 0.0, 4.0]).unwrap(), 1);
    }

    #[test]
    fn degenerate_features_are_rejected() {
        assert!(matches!(Example::new(vec![0.0, 0.0], 0), Err(HeadError::DegenerateFeature { .. })));
        let mut local = LocalMap::linear(BlockSpec::full(2));
        local.set_parameter(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()).unwrap();
        let p = HeadParams::new(Matrix::identity(2), local, 1.0).unwrap();
        assert!(matches!(forward(&p, &[0.0, 1.0]), Err(HeadError::DegenerateFeature { .. })));
    }

    #[test]
    fn parameter_validation() {
        assert!(matches!(
            HeadParams::new(Matrix::identity(2), LocalMap::identity(2), 0.0),
            Err(HeadError::InvalidTemperature(_))
        ));
        assert!(matches!(
            HeadParams::new(Matrix::zeros(2, 3), LocalMap::identity(2), 1.0),
            Err(HeadError::ClassifierShape { .. })
        ));
        let p = simple_head(1.0);
        let bad = vec![Example::new(vec![1.0, 0.0], 2).unwrap()];
        assert!(matches!(loss(&p, &bad), Err(HeadError::LabelOutOfRange { .. })));
        assert_eq!(loss(&p, &[]), Err(HeadError::EmptyBatch));
    }
}
