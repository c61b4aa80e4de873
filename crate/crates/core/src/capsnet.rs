//! Low-level capsules, attention weights and the routing procedure that
//! clusters them into one high-level capsule per relation.
//!
//! Transforms are stored in row-vector form: a prediction is `u_i W_j`
//! with `W_j` of shape `d_u x d_r`.

use rand::Rng;

use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{self, Tape, Var};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// `g(v) = |v|^2 / (1 + |v|^2) * v / |v|`, with `g(0) = 0`.
pub fn squash<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut out = v.to_vec();
    tape::squash_in_place(&mut out);
    out
}

/// Capsules per token, `hidden / capsule_dim`.
pub fn capsules_per_token(hidden: usize, capsule_dim: usize) -> Result<usize> {
    if capsule_dim == 0 || !hidden.is_multiple_of(capsule_dim) {
        return Err(Error::Config(format!(
            "hidden size {hidden} is not a multiple of capsule dimension {capsule_dim}"
        )));
    }
    Ok(hidden / capsule_dim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowCapsuleSet<T> {
    /// `(n * k) x d_u`, squashed.
    pub capsules: Matrix<T>,
    /// Token that produced each capsule.
    pub source: Vec<usize>,
}

/// Splits every hidden state into contiguous `capsule_dim` blocks and
/// squashes each block.
pub fn split_capsules<T: Scalar>(hidden: &Matrix<T>, capsule_dim: usize) -> Result<LowCapsuleSet<T>> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let caps = split_capsules_on(&mut tape, h, capsule_dim)?;
    let k = hidden.cols() / capsule_dim;
    Ok(LowCapsuleSet {
        capsules: tape.value(caps).clone(),
        source: (0..hidden.rows() * k).map(|i| i / k).collect(),
    })
}

pub fn split_capsules_on<T: Scalar>(tape: &mut Tape<'_, T>, states: Var, capsule_dim: usize) -> Result<Var> {
    let (n, hidden) = tape.value(states).shape();
    let k = capsules_per_token(hidden, capsule_dim)?;
    let blocks = tape.reshape(states, n * k, capsule_dim)?;
    Ok(tape.squash_rows(blocks))
}

/// `alpha_t = sigmoid(h_e . h_t)` per token.
pub fn attention_weights<T: Scalar>(states: &Matrix<T>, entity: &[T]) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let h = tape.constant(states.clone());
    let e = tape.constant(Matrix::row_vector(entity.to_vec()));
    let a = attention_on(&mut tape, h, e, 1)?;
    Ok(tape.value(a).data().to_vec())
}

/// Attention per low-level capsule (`(n * k) x 1`): each token's weight is
/// repeated for its `k` capsules.
pub fn attention_on<T: Scalar>(tape: &mut Tape<'_, T>, states: Var, entity: Var, k: usize) -> Result<Var> {
    let scores = tape.matmul_nt(states, entity)?;
    let alpha = tape.sigmoid(scores);
    Ok(if k == 1 { alpha } else { tape.repeat_rows(alpha, k) })
}

/// One transform per relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapsuleLayerParams {
    pub transforms: Vec<ParamId>,
}

impl CapsuleLayerParams {
    /// `W_j` uniform in `[-1/sqrt(d_u), 1/sqrt(d_u)]`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        relations: usize,
        capsule_dim: usize,
        relation_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (capsule_dim as f64).sqrt();
        let transforms = (0..relations)
            .map(|j| set.add(format!("caps.W_{j}"), Matrix::uniform(capsule_dim, relation_dim, bound, rng), true))
            .collect();
        Self { transforms }
    }
}

/// Tape handles produced by [`route_on`].
#[derive(Debug, Clone)]
pub struct RoutingVars {
    /// Final logits `b`, `(n * k) x J`.
    pub logits: Var,
    /// Couplings `w` used in each iteration.
    pub couplings: Vec<Var>,
    /// High-level capsules, `J x d_r`.
    pub capsules: Var,
    /// Capsule lengths, `J x 1`.
    pub lengths: Var,
}

/// Routing from `caps` (`m x d_u`) to one capsule per transform.
///
/// Each iteration computes `w_i = softmax(b_i)`,
/// `r_j = g(sum_i w_ij alpha_i u_i W_j)` and `b_ij += (u_i W_j) . r_j`.
/// Without `alpha` every weight is one (plain dynamic routing). All
/// iterations stay on the tape.
pub fn route_on<T: Scalar>(
    tape: &mut Tape<'_, T>,
    caps: Var,
    transforms: &[Var],
    alpha: Option<Var>,
    iterations: usize,
) -> Result<RoutingVars> {
    if iterations == 0 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    if transforms.is_empty() {
        return Err(Error::Config("routing needs at least one relation".into()));
    }
    let m = tape.value(caps).rows();
    let predictions = transforms
        .iter()
        .map(|&w| tape.matmul(caps, w))
        .collect::<Result<Vec<_>>>()?;
    let mut logits = tape.constant(Matrix::zeros(m, transforms.len()));
    let mut couplings = Vec::with_capacity(iterations);
    let mut capsules = logits;
    for _ in 0..iterations {
        let w = tape.softmax_rows(logits)?;
        couplings.push(w);
        let mut outputs = Vec::with_capacity(transforms.len());
        for (j, &pred) in predictions.iter().enumerate() {
            let mut coeff = tape.col(w, j)?;
            if let Some(a) = alpha {
                coeff = tape.mul(coeff, a)?;
            }
            let s = tape.matmul_tn(coeff, pred)?;
            outputs.push(tape.squash_rows(s));
        }
        capsules = tape.stack_rows(&outputs)?;
        let agreement = predictions
            .iter()
            .zip(&outputs)
            .map(|(&pred, &r)| tape.matmul_nt(pred, r))
            .collect::<Result<Vec<_>>>()?;
        let delta = tape.concat_cols(&agreement)?;
        logits = tape.add(logits, delta)?;
    }
    let lengths = tape.row_norms(capsules);
    Ok(RoutingVars {
        logits,
        couplings,
        capsules,
        lengths,
    })
}

/// Evaluated routing state.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState<T> {
    pub logits: Matrix<T>,
    /// Couplings of the last iteration.
    pub couplings: Matrix<T>,
    pub coupling_history: Vec<Matrix<T>>,
    pub alpha: Vec<T>,
    pub iterations: usize,
    /// `J x d_r`
    pub capsules: Matrix<T>,
}

impl<T: Scalar> RoutingState<T> {
    pub fn lengths(&self) -> Vec<T> {
        (0..self.capsules.rows())
            .map(|j| self.capsules.row(j).iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect()
    }

    pub fn from_tape(tape: &Tape<'_, T>, vars: &RoutingVars, alpha: Vec<T>) -> Self {
        let history: Vec<Matrix<T>> = vars.couplings.iter().map(|&w| tape.value(w).clone()).collect();
        Self {
            logits: tape.value(vars.logits).clone(),
            couplings: history.last().cloned().expect("at least one iteration"),
            iterations: history.len(),
            coupling_history: history,
            alpha,
            capsules: tape.value(vars.capsules).clone(),
        }
    }
}

/// Attention-weighted routing over evaluated capsules.
pub fn route<T: Scalar>(caps: &Matrix<T>, transforms: &[Matrix<T>], alpha: &[T], iterations: usize) -> Result<RoutingState<T>> {
    if alpha.len() != caps.rows() {
        return Err(Error::Shape(format!(
            "{} attention weights for {} capsules",
            alpha.len(),
            caps.rows()
        )));
    }
    run_plain(caps, transforms, Some(alpha), iterations)
}

/// Routing with every attention weight fixed at one.
pub fn dynamic_route<T: Scalar>(caps: &Matrix<T>, transforms: &[Matrix<T>], iterations: usize) -> Result<RoutingState<T>> {
    run_plain(caps, transforms, None, iterations)
}

fn run_plain<T: Scalar>(caps: &Matrix<T>, transforms: &[Matrix<T>], alpha: Option<&[T]>, iterations: usize) -> Result<RoutingState<T>> {
    let mut tape = Tape::new();
    let u = tape.constant(caps.clone());
    let ws: Vec<Var> = transforms.iter().map(|w| tape.constant(w.clone())).collect();
    let a = alpha.map(|a| tape.constant(Matrix::column_vector(a.to_vec())));
    let vars = route_on(&mut tape, u, &ws, a, iterations)?;
    let alpha = alpha.map_or_else(|| vec![T::one(); caps.rows()], <[T]>::to_vec);
    Ok(RoutingState::from_tape(&tape, &vars, alpha))
}
