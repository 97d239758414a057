//! Training objectives: foreground-weighted soft dice for segmentation and
//! two-class softmax cross-entropy for the domain discriminator.
//!
//! Every loss comes in a value-only form and a `_grad` form returning the
//! exact analytic gradients used by the optimizer. Masks are probability-map
//! shaped (1, H, W) with values exactly 0 or 1.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax::cross_entropy_logits;
use crate::scalar::Scalar;

/// Loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the segmentation term against the adversarial term.
    pub lambda_seg: f64,
    /// Smoothing added to the soft-dice numerator and denominator.
    pub dice_epsilon: f64,
    /// Upper bound on the foreground weighting ratio; also the value used
    /// for an all-background mask.
    pub foreground_ratio_cap: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_seg: 1.0, dice_epsilon: 1.0, foreground_ratio_cap: 4096.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_seg > 0.0) {
            return Err(Error::Config("lambda_seg must be positive".into()));
        }
        if !(self.dice_epsilon > 0.0) {
            return Err(Error::Config("dice_epsilon must be positive".into()));
        }
        if !(self.foreground_ratio_cap >= 1.0) {
            return Err(Error::Config("foreground_ratio_cap must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_pair<S: Scalar>(y: &Array3<S>, m: &Array3<S>) {
    assert_eq!(y.dim(), m.dim(), "prediction and mask shapes differ");
    debug_assert!(
        m.iter().all(|&v| v == S::zero() || v == S::one()),
        "mask must be exactly binary"
    );
}

/// Smoothed soft dice: (2*sum(y*m) + eps) / (sum(y) + sum(m) + eps).
///
/// Equals exactly 1 when `y == m` (including the all-background pair, where
/// the smoothing decides) and tends to 0 for disjoint prediction and mask.
pub fn soft_dice<S: Scalar>(y: &Array3<S>, m: &Array3<S>, eps: S) -> S {
    soft_dice_grad(y, m, eps).0
}

/// Soft dice plus its gradient w.r.t. every prediction pixel.
pub fn soft_dice_grad<S: Scalar>(y: &Array3<S>, m: &Array3<S>, eps: S) -> (S, Array3<S>) {
    check_pair(y, m);
    let two = S::from_f(2.0);
    let inter: S = y.iter().zip(m.iter()).map(|(&a, &b)| a * b).sum();
    let denom = y.sum() + m.sum() + eps;
    let dice = (two * inter + eps) / denom;
    // d dice / d y_i = (2 m_i - dice) / denom.
    let grad = m.mapv(|mi| (two * mi - dice) / denom);
    (dice, grad)
}

/// Foreground weighting ratio r = min(H*W / N_mask, cap); an empty mask
/// takes the cap so the weighted loss stays finite.
pub fn foreground_ratio<S: Scalar>(m: &Array3<S>, cap: S) -> S {
    let n_input = S::from_f((m.dim().1 * m.dim().2) as f64);
    let n_mask = m.sum();
    if n_mask > S::zero() {
        (n_input / n_mask).min(cap)
    } else {
        cap
    }
}

/// Discriminator objective: classify source features as class 0 and target
/// features as class 1.
pub fn discriminator_loss<S: Scalar>(logits_src: &Array1<S>, logits_tgt: &Array1<S>) -> S {
    discriminator_loss_grad(logits_src, logits_tgt).0
}

/// Discriminator objective plus gradients w.r.t. both logit pairs.
pub fn discriminator_loss_grad<S: Scalar>(
    logits_src: &Array1<S>,
    logits_tgt: &Array1<S>,
) -> (S, Array1<S>, Array1<S>) {
    let (l_src, d_src) = cross_entropy_logits(logits_src, 0);
    let (l_tgt, d_tgt) = cross_entropy_logits(logits_tgt, 1);
    (l_src + l_tgt, d_src, d_tgt)
}

/// Adaptation objective for the target segmenter: fool the discriminator
/// (target features classified as source, class 0) while segmenting the
/// few labeled target samples, with the dice term weighted by the inverse
/// foreground fraction.
pub fn segmentation_da_loss<S: Scalar>(
    logits_tgt: &Array1<S>,
    y: &Array3<S>,
    m_tgt: &Array3<S>,
    cfg: &LossConfig,
) -> S {
    segmentation_da_loss_grad(logits_tgt, y, m_tgt, cfg).0
}

/// Adaptation objective plus gradients w.r.t. the target logits and the
/// prediction map.
pub fn segmentation_da_loss_grad<S: Scalar>(
    logits_tgt: &Array1<S>,
    y: &Array3<S>,
    m_tgt: &Array3<S>,
    cfg: &LossConfig,
) -> (S, Array1<S>, Array3<S>) {
    let (ce, dlogits) = cross_entropy_logits(logits_tgt, 0);
    let (seg, dy_seg) = pretrain_loss_grad(y, m_tgt, cfg);
    let lam = S::from_f(cfg.lambda_seg);
    (ce + lam * seg, dlogits, dy_seg.mapv(|v| lam * v))
}

/// Supervised objective: r * (1 - soft_dice), the segmentation term of the
/// adaptation loss without the adversarial part.
pub fn pretrain_loss<S: Scalar>(y: &Array3<S>, m: &Array3<S>, cfg: &LossConfig) -> S {
    pretrain_loss_grad(y, m, cfg).0
}

/// Supervised objective plus its gradient w.r.t. the prediction map.
pub fn pretrain_loss_grad<S: Scalar>(
    y: &Array3<S>,
    m: &Array3<S>,
    cfg: &LossConfig,
) -> (S, Array3<S>) {
    let r = foreground_ratio(m, S::from_f(cfg.foreground_ratio_cap));
    let (dice, ddice) = soft_dice_grad(y, m, S::from_f(cfg.dice_epsilon));
    (r * (S::one() - dice), ddice.mapv(|v| -r * v))
}
