//! Scalar training objectives and their weighted compositions.
//!
//! Two layers live here. The tape builders (`*_t`) are what the trainer
//! wires into its computation graphs. The plain-array functions validate
//! their inputs, run the same builders on a throwaway tape and return the
//! scalar; they are the public contract and what the oracle tests exercise.
//!
//! Conventions, fixed so that the closed-form oracles are exact:
//! * least-squares targets are `real_target` (label-smoothed for the
//!   discriminators) and 0 for fakes; the generator always aims at 1;
//! * the discriminator loss carries a ½ factor;
//! * cycle and identity losses are mean absolute differences;
//! * smoothness is anisotropic total variation, sparsity is the mask mean.

use ndarray::{ArrayD, IxDyn, NdFloat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty score map")]
    Empty,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("label {0} out of range (classes: {1})")]
    LabelOutOfRange(usize, usize),
    #[error("real target must lie in (0,1], got {0}")]
    InvalidTarget(f64),
    #[error("mask must be at least 2×2, got {0}×{1}")]
    DegenerateMask(usize, usize),
    #[error("mask values must lie in [0,1]")]
    MaskOutOfRange,
    #[error("missing loss component `{0}`")]
    MissingComponent(&'static str),
}

/// The λ coefficients of the composed objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_aba: f64,
    pub lambda_bab: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_cls: f64,
    pub lambda_smooth: f64,
    pub lambda_sparse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_aba: 5.0,
            lambda_bab: 5.0,
            lambda_a: 5.0,
            lambda_b: 5.0,
            lambda_cls: 1.0,
            lambda_smooth: 1.0,
            lambda_sparse: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.lambda_aba,
            self.lambda_bab,
            self.lambda_a,
            self.lambda_b,
            self.lambda_cls,
            self.lambda_smooth,
            self.lambda_sparse,
        ];
        if all.iter().any(|&l| l < 0.0 || !l.is_finite()) {
            return Err("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Named scalar components of one training step. `None` marks a component
/// that the active variant does not produce.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub g_adv_ab: Option<f64>,
    pub g_adv_ba: Option<f64>,
    pub cyc_aba: Option<f64>,
    pub cyc_bab: Option<f64>,
    pub id_a: Option<f64>,
    pub id_b: Option<f64>,
    pub d_a: Option<f64>,
    pub d_b: Option<f64>,
    pub cls: Option<f64>,
    pub smooth: Option<f64>,
    pub sparse: Option<f64>,
    pub total_g: Option<f64>,
    pub total_d: Option<f64>,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 13] = [
        "g_adv_ab", "g_adv_ba", "cyc_aba", "cyc_bab", "id_a", "id_b", "d_a", "d_b", "cls",
        "smooth", "sparse", "total_g", "total_d",
    ];

    /// Values in column order, `None` rendered as 0.
    pub fn values(&self) -> [f64; 13] {
        let v = |o: Option<f64>| o.unwrap_or(0.0);
        [
            v(self.g_adv_ab),
            v(self.g_adv_ba),
            v(self.cyc_aba),
            v(self.cyc_bab),
            v(self.id_a),
            v(self.id_b),
            v(self.d_a),
            v(self.d_b),
            v(self.cls),
            v(self.smooth),
            v(self.sparse),
            v(self.total_g),
            v(self.total_d),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::COLUMNS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

// ---------------------------------------------------------------------------
// Tape builders.
// ---------------------------------------------------------------------------

/// `mean((scores − target)²)`.
pub fn lsgan_target_loss_t<T: NdFloat>(tape: &mut Tape<T>, scores: Var, target: T) -> Var {
    let shifted = tape.add_scalar(scores, -target);
    let sq = tape.square(shifted);
    tape.mean_all(sq)
}

/// `½·mean((real − real_target)²) + ½·mean(fake²)`.
pub fn lsgan_discriminator_loss_t<T: NdFloat>(
    tape: &mut Tape<T>,
    real_scores: Var,
    fake_scores: Var,
    real_target: T,
) -> Var {
    let real = lsgan_target_loss_t(tape, real_scores, real_target);
    let fake = lsgan_target_loss_t(tape, fake_scores, T::zero());
    let sum = tape.add(real, fake);
    tape.mul_scalar(sum, T::from(0.5).unwrap())
}

/// `mean((fake − 1)²)`; the generator target is always 1.
pub fn lsgan_generator_loss_t<T: NdFloat>(tape: &mut Tape<T>, fake_scores: Var) -> Var {
    lsgan_target_loss_t(tape, fake_scores, T::one())
}

/// Mean absolute difference; cycle and identity losses share this form.
pub fn l1_mean_t<T: NdFloat>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let diff = tape.sub(a, b);
    let abs = tape.abs(diff);
    tape.mean_all(abs)
}

// ---------------------------------------------------------------------------
// Array-level operations.
// ---------------------------------------------------------------------------

fn check_same_shape<T: NdFloat>(a: &ArrayD<T>, b: &ArrayD<T>) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(
            a.shape().to_vec(),
            b.shape().to_vec(),
        ));
    }
    Ok(())
}

pub fn lsgan_discriminator_loss<T: NdFloat>(
    real_scores: &ArrayD<T>,
    fake_scores: &ArrayD<T>,
    real_target: T,
) -> Result<T, LossError> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(LossError::Empty);
    }
    let t = real_target.to_f64().unwrap();
    if !(t > 0.0 && t <= 1.0) {
        return Err(LossError::InvalidTarget(t));
    }
    let mut tape = Tape::new();
    let r = tape.constant(real_scores.clone());
    let f = tape.constant(fake_scores.clone());
    let loss = lsgan_discriminator_loss_t(&mut tape, r, f, real_target);
    Ok(tape.scalar(loss))
}

pub fn lsgan_generator_loss<T: NdFloat>(fake_scores: &ArrayD<T>) -> Result<T, LossError> {
    if fake_scores.is_empty() {
        return Err(LossError::Empty);
    }
    let mut tape = Tape::new();
    let f = tape.constant(fake_scores.clone());
    let loss = lsgan_generator_loss_t(&mut tape, f);
    Ok(tape.scalar(loss))
}

pub fn cycle_loss<T: NdFloat>(
    reconstructed: &ArrayD<T>,
    original: &ArrayD<T>,
) -> Result<T, LossError> {
    check_same_shape(reconstructed, original)?;
    if reconstructed.is_empty() {
        return Err(LossError::Empty);
    }
    let mut tape = Tape::new();
    let a = tape.constant(reconstructed.clone());
    let b = tape.constant(original.clone());
    let loss = l1_mean_t(&mut tape, a, b);
    Ok(tape.scalar(loss))
}

/// Identity loss: the same mean absolute difference as [`cycle_loss`],
/// applied to a generator's output on its *target* domain.
pub fn identity_loss<T: NdFloat>(mapped: &ArrayD<T>, original: &ArrayD<T>) -> Result<T, LossError> {
    cycle_loss(mapped, original)
}

/// Mean softmax cross-entropy of `(N,K)` logits against integer labels.
pub fn classification_loss<T: NdFloat>(
    logits: &ArrayD<T>,
    labels: &[usize],
) -> Result<T, LossError> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(LossError::ShapeMismatch(
            logits.shape().to_vec(),
            vec![labels.len()],
        ));
    }
    let k = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(LossError::LabelOutOfRange(bad, k));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy_mean(l, labels);
    Ok(tape.scalar(loss))
}

fn mask_as_nchw<T: NdFloat>(mask: &ArrayD<T>) -> Result<ArrayD<T>, LossError> {
    let (h, w) = match mask.shape() {
        [h, w] => (*h, *w),
        [h, w, 1] => (*h, *w),
        [1, 1, h, w] => (*h, *w),
        other => {
            return Err(LossError::ShapeMismatch(other.to_vec(), vec![0, 0, 1]));
        }
    };
    if h < 2 || w < 2 {
        return Err(LossError::DegenerateMask(h, w));
    }
    Ok(mask
        .clone()
        .into_shape_with_order(IxDyn(&[1, 1, h, w]))
        .expect("mask reshape"))
}

/// Anisotropic total variation of a mask:
/// `mean|m[i+1,j]−m[i,j]| + mean|m[i,j+1]−m[i,j]|`.
pub fn smoothness_loss<T: NdFloat>(mask: &ArrayD<T>) -> Result<T, LossError> {
    let m = mask_as_nchw(mask)?;
    let mut tape = Tape::new();
    let mv = tape.constant(m);
    let loss = tape.tv_mean(mv);
    Ok(tape.scalar(loss))
}

/// Mean of the mask; its values must already lie in `[0,1]`.
pub fn sparsity_loss<T: NdFloat>(mask: &ArrayD<T>) -> Result<T, LossError> {
    if mask.is_empty() {
        return Err(LossError::Empty);
    }
    if mask
        .iter()
        .any(|&v| v < T::zero() || v > T::one() || !v.is_finite())
    {
        return Err(LossError::MaskOutOfRange);
    }
    let mut tape = Tape::new();
    let mv = tape.constant(mask.clone());
    let loss = tape.mean_all(mv);
    Ok(tape.scalar(loss))
}

// ---------------------------------------------------------------------------
// Compositions.
// ---------------------------------------------------------------------------

fn require(v: Option<f64>, name: &'static str) -> Result<f64, LossError> {
    v.ok_or(LossError::MissingComponent(name))
}

/// Base objective: generator total is the weighted sum of both adversarial,
/// cycle and identity terms; the discriminator total is optimised separately
/// (the minmax split).
pub fn compose_base(components: &LossReport, w: &LossWeights) -> Result<(f64, f64), LossError> {
    let g_adv_ab = require(components.g_adv_ab, "g_adv_ab")?;
    let g_adv_ba = require(components.g_adv_ba, "g_adv_ba")?;
    let cyc_aba = require(components.cyc_aba, "cyc_aba")?;
    let cyc_bab = require(components.cyc_bab, "cyc_bab")?;
    let id_a = require(components.id_a, "id_a")?;
    let id_b = require(components.id_b, "id_b")?;
    let d_a = require(components.d_a, "d_a")?;
    let d_b = require(components.d_b, "d_b")?;
    let total_g = g_adv_ab
        + w.lambda_aba * cyc_aba
        + w.lambda_a * id_a
        + g_adv_ba
        + w.lambda_bab * cyc_bab
        + w.lambda_b * id_b;
    let total_d = d_a + d_b;
    Ok((total_g, total_d))
}

/// Weakly-supervised objective: the base total plus weighted classification,
/// smoothness and sparsity terms. The discriminator total is unchanged.
pub fn compose_ws(components: &LossReport, w: &LossWeights) -> Result<(f64, f64), LossError> {
    let (base_g, total_d) = compose_base(components, w)?;
    let cls = require(components.cls, "cls")?;
    let smooth = require(components.smooth, "smooth")?;
    let sparse = require(components.sparse, "sparse")?;
    let total_g =
        base_g + w.lambda_cls * cls + w.lambda_smooth * smooth + w.lambda_sparse * sparse;
    Ok((total_g, total_d))
}
