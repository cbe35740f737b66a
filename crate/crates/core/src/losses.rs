//! Contrastive, regression and evaluation objectives.
//!
//! The pretraining objective is
//!
//! ```text
//! L = NT-Xent(p1, p2; tau) + gamma * sum_{i != j} C_ij^2
//! ```
//!
//! where `C` is the cross-correlation of the batch-standardized projections
//! of the two augmented views. NT-Xent is averaged over all `2B` anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Guard against division by zero in every normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Combined,
    NtxentOnly,
    RedundancyOnly,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [
        LossVariant::NtxentOnly,
        LossVariant::RedundancyOnly,
        LossVariant::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Combined => "combined",
            LossVariant::NtxentOnly => "ntxent_only",
            LossVariant::RedundancyOnly => "redundancy_only",
        }
    }

    fn uses_ntxent(self) -> bool {
        self != LossVariant::RedundancyOnly
    }
}

/// Free constants of the objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    /// NT-Xent temperature.
    pub tau: f64,
    /// Weight of the redundancy term.
    pub gamma: f64,
    /// Huber threshold, in radians of gaze-angle deviation.
    pub delta: f64,
    pub batch_size: usize,
    pub loss_variant: LossVariant,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            tau: 0.5,
            gamma: 0.1,
            delta: 1.0,
            batch_size: 64,
            loss_variant: LossVariant::Combined,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.batch_size < 2 {
            // both terms need at least two rows: NT-Xent for negatives, the
            // redundancy term for batch statistics
            return Err(Error::InvalidConfig(format!(
                "batch_size must be >= 2 for contrastive training, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// `a·b / (max(‖a‖, eps) max(‖b‖, eps))`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    dot / (na * nb)
}

fn check_views<T: Element>(g: &Graph<T>, op: &'static str, p1: Var, p2: Var) -> Result<(usize, usize)> {
    match (g.shape(p1), g.shape(p2)) {
        (&[b1, d1], &[b2, d2]) if (b1, d1) == (b2, d2) => Ok((b1, d1)),
        (s1, s2) => Err(Error::Shape {
            op,
            detail: format!("views {s1:?} and {s2:?} must be equal B x D matrices"),
        }),
    }
}

/// Normalized temperature-scaled cross-entropy over the `2B` stacked views.
///
/// Row `i` of view one is the positive of row `i` of view two and vice
/// versa; every other row of the stacked batch is a negative. Returns the
/// mean of the `2B` anchor terms.
pub fn ntxent_loss<T: Element>(g: &mut Graph<T>, p1: Var, p2: Var, tau: f64) -> Result<Var> {
    let (b, _) = check_views(g, "ntxent_loss", p1, p2)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let z = g.concat_rows(&[p1, p2])?;
    let z = g.l2_normalize(z, T::from_f64(NORM_EPS))?;
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let logits = g.scale(sim, T::from_f64(1.0 / tau))?;
    let targets = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
    g.self_excluded_cross_entropy(logits, targets)
}

/// `C = ẑ1ᵀ ẑ2 / B` for batch-standardized views.
pub fn cross_correlation<T: Element>(g: &mut Graph<T>, p1: Var, p2: Var) -> Result<Var> {
    let (b, _) = check_views(g, "cross_correlation", p1, p2)?;
    let eps = T::from_f64(NORM_EPS);
    let z1 = g.batch_standardize(p1, eps)?;
    let z2 = g.batch_standardize(p2, eps)?;
    let z1t = g.transpose(z1)?;
    let c = g.matmul(z1t, z2)?;
    g.scale(c, T::from_f64(1.0 / b as f64))
}

/// Sum of squared off-diagonal entries of `C`.
pub fn redundancy_term<T: Element>(g: &mut Graph<T>, c: Var) -> Result<Var> {
    g.off_diagonal_square_sum(c)
}

/// The pretraining objective selected by `hp.loss_variant`.
pub fn contrastive_loss<T: Element>(g: &mut Graph<T>, p1: Var, p2: Var, hp: &HyperParams) -> Result<Var> {
    let invariance = if hp.loss_variant.uses_ntxent() {
        Some(ntxent_loss(g, p1, p2, hp.tau)?)
    } else {
        None
    };
    let redundancy = match hp.loss_variant {
        LossVariant::NtxentOnly => None,
        LossVariant::Combined if hp.gamma == 0.0 => None,
        LossVariant::Combined | LossVariant::RedundancyOnly => {
            let c = cross_correlation(g, p1, p2)?;
            Some(redundancy_term(g, c)?)
        }
    };
    match (invariance, redundancy) {
        (Some(l), None) => Ok(l),
        (None, Some(r)) => Ok(r),
        (Some(l), Some(r)) => {
            let r = g.scale(r, T::from_f64(hp.gamma))?;
            g.add(l, r)
        }
        (None, None) => unreachable!("every variant has at least one term"),
    }
}

/// Mean elementwise Huber penalty of `pred - target`.
pub fn huber_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: Var, delta: f64) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(
            "huber_loss",
            format!("{:?} vs {:?}", g.shape(pred), g.shape(target)),
        ));
    }
    let d = g.sub(pred, target)?;
    let h = g.huber(d, T::from_f64(delta))?;
    g.mean(h)
}

/// D x D cross-correlation matrix between two views.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCorrMatrix {
    values: Tensor<f64>,
}

impl CrossCorrMatrix {
    pub fn between<T: Element>(p1: &Tensor<T>, p2: &Tensor<T>) -> Result<Self> {
        let mut g = Graph::<f64>::new();
        let a = g.constant(p1.cast());
        let b = g.constant(p2.cast());
        let c = cross_correlation(&mut g, a, b)?;
        Ok(CrossCorrMatrix {
            values: g.value(c).clone(),
        })
    }

    pub fn from_tensor(values: Tensor<f64>) -> Result<Self> {
        match *values.shape() {
            [r, c] if r == c => Ok(CrossCorrMatrix { values }),
            ref s => Err(Error::shape("cross_correlation", format!("{s:?} is not square"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.data()[i * self.dim() + j]
    }

    pub fn values(&self) -> &Tensor<f64> {
        &self.values
    }

    pub fn redundancy(&self) -> f64 {
        let mut g = Graph::<f64>::new();
        let c = g.constant(self.values.clone());
        let r = redundancy_term(&mut g, c).expect("square by construction");
        g.value(r).data()[0]
    }
}

/// Unit gaze vector for `(pitch, yaw)` in radians:
/// `(-cos p sin y, -sin p, -cos p cos y)`.
pub fn pitchyaw_to_vector(pitch: f64, yaw: f64) -> [f64; 3] {
    [
        -pitch.cos() * yaw.sin(),
        -pitch.sin(),
        -pitch.cos() * yaw.cos(),
    ]
}

/// Angle between two gaze directions, in degrees.
pub fn angular_error(pred: (f64, f64), truth: (f64, f64)) -> f64 {
    let a = pitchyaw_to_vector(pred.0, pred.1);
    let b = pitchyaw_to_vector(truth.0, truth.1);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let sin = cross.iter().map(|c| c * c).sum::<f64>().sqrt();
    sin.atan2(dot).to_degrees()
}

/// Mean angular error in degrees between `N x 2` (pitch, yaw) tensors.
pub fn mean_angular_error<T: Element>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if pred.shape() != truth.shape() || pred.rank() != 2 || pred.shape()[1] != 2 {
        return Err(Error::shape(
            "mean_angular_error",
            format!("{:?} vs {:?}, expected N x 2", pred.shape(), truth.shape()),
        ));
    }
    let n = pred.shape()[0];
    if n == 0 {
        return Err(Error::InvalidArgument("mean angular error of an empty set".into()));
    }
    let total: f64 = pred
        .data()
        .chunks(2)
        .zip(truth.data().chunks(2))
        .map(|(p, t)| angular_error((p[0].as_f64(), p[1].as_f64()), (t[0].as_f64(), t[1].as_f64())))
        .sum();
    Ok(total / n as f64)
}
