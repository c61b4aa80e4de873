//! Sliding-margin loss over capsule lengths and threshold decoding.
//!
//! For relation `j` with score `s_j = |r_j|`:
//!
//! ```text
//! L_j = Y_j max(0, (B + gamma) - s_j)^2 + lambda (1 - Y_j) max(0, s_j - (B - gamma))^2
//! ```
//!
//! `B` is learned; a sentence decodes to `{ j : s_j > B }` and to NA when
//! that set is empty.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Boundary used by the fixed-margin variant and as the initial learned value.
pub const DEFAULT_BOUNDARY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    /// Half-width of the margin.
    pub gamma: f64,
    /// Weight of absent-relation terms.
    pub lambda: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            gamma: 0.4,
            lambda: 0.5,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 0.49) {
            return Err(Error::Config(format!("margin gamma {} must lie in (0, 0.49)", self.gamma)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be nonnegative", self.lambda)));
        }
        Ok(())
    }

    /// Interval that keeps both hinge points inside `[0, 1)`.
    pub fn boundary_range(&self) -> (f64, f64) {
        (self.gamma + 0.01, 1.0 - self.gamma - 0.01)
    }

    pub fn clamp_boundary(&self, b: f64) -> f64 {
        let (lo, hi) = self.boundary_range();
        b.clamp(lo, hi)
    }
}

fn indicator<T: Scalar>(relations: usize, gold: &[usize]) -> Result<Vec<T>> {
    let mut y = vec![T::zero(); relations];
    for &j in gold {
        *y.get_mut(j)
            .ok_or_else(|| Error::Schema(format!("label {j} outside {relations} relations")))? = T::one();
    }
    Ok(y)
}

/// Sentence loss, summed over relations.
pub fn margin_loss<T: Scalar>(scores: &[T], gold: &[usize], boundary: T, cfg: &MarginConfig) -> Result<T> {
    let y = indicator::<T>(scores.len(), gold)?;
    let (gamma, lambda) = (T::lit(cfg.gamma), T::lit(cfg.lambda));
    let zero = T::zero();
    Ok(scores
        .iter()
        .zip(&y)
        .map(|(&s, &yj)| {
            let hinge = |x: T| if x < zero { zero } else { x };
            let present = hinge(boundary + gamma - s);
            let absent = hinge(s - (boundary - gamma));
            yj * present * present + lambda * (T::one() - yj) * absent * absent
        })
        .sum())
}

/// Margin loss with `B` frozen at 0.5.
pub fn fixed_margin_loss<T: Scalar>(scores: &[T], gold: &[usize], cfg: &MarginConfig) -> Result<T> {
    margin_loss(scores, gold, T::lit(DEFAULT_BOUNDARY), cfg)
}

/// Margin loss on the tape. `scores` is `J x 1`, `boundary` is `1 x 1` (a
/// parameter for the sliding variant, a constant for the fixed one).
pub fn margin_loss_on<T: Scalar>(
    tape: &mut Tape<'_, T>,
    scores: Var,
    gold: &[usize],
    boundary: Var,
    cfg: &MarginConfig,
) -> Result<Var> {
    let relations = tape.value(scores).rows();
    let y = indicator::<T>(relations, gold)?;
    let absent_w: Vec<T> = y.iter().map(|&v| T::lit(cfg.lambda) * (T::one() - v)).collect();
    let present_w = tape.constant(Matrix::column_vector(y));
    let absent_w = tape.constant(Matrix::column_vector(absent_w));
    let gamma = T::lit(cfg.gamma);

    let upper = tape.add_const(boundary, gamma);
    let short = tape.sub(upper, scores)?;
    let short = tape.relu(short);
    let short = tape.square(short);
    let present = tape.mul(present_w, short)?;

    let lower = tape.add_const(boundary, -gamma);
    let over = tape.sub(scores, lower)?;
    let over = tape.relu(over);
    let over = tape.square(over);
    let absent = tape.mul(absent_w, over)?;

    let total = tape.add(present, absent)?;
    Ok(tape.sum(total))
}

/// Per-relation scores and the decoded label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub na: bool,
}

/// `{ j : s_j > threshold }`; ties at the threshold are excluded.
pub fn decode<T: Scalar>(scores: &[T], threshold: T) -> PredictionResult {
    let labels: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(j, _)| j)
        .collect();
    PredictionResult {
        scores: scores.iter().map(|s| s.to_f64_lossy()).collect(),
        na: labels.is_empty(),
        labels,
    }
}
