//! Word + position embeddings and the peephole Bi-LSTM.
//!
//! Gate equations (row-vector convention, `*` is elementwise):
//!
//! ```text
//! i_t = sigmoid(x_t W_i + h_{t-1} U_i + c_{t-1} V_i + b_i)
//! f_t = sigmoid(x_t W_f + h_{t-1} U_f + c_{t-1} V_f + b_f)
//! c_t = i_t * tanh(x_t W_c + h_{t-1} U_c + c_{t-1} V_c + b_c) + f_t * c_{t-1}
//! o_t = sigmoid(x_t W_o + h_{t-1} U_o + c_t V_o + b_o)
//! h_t = o_t * tanh(c_t)
//! ```
//!
//! The cell candidate sees the previous cell state through `V_c`, which
//! differs from the textbook LSTM. Forward and backward states are summed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SentenceExample, Vocab};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Word embedding size `p`.
    pub word_dim: usize,
    /// Size `q` of each of the two position embeddings.
    pub pos_dim: usize,
    /// Hidden size `s_h`.
    pub hidden: usize,
    /// Relative distances are clipped to `[-max_dist, max_dist]`.
    pub max_dist: usize,
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.word_dim + 2 * self.pos_dim
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            word_dim: 50,
            pos_dim: 5,
            hidden: 256,
            max_dist: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Relative distance of every token to the head and tail entity,
/// `t - entity_index`, clipped to `[-max_dist, max_dist]`.
pub fn position_ids(example: &SentenceExample, max_dist: usize) -> Vec<(i64, i64)> {
    let clip = |d: i64| d.clamp(-(max_dist as i64), max_dist as i64);
    (0..example.len() as i64)
        .map(|t| (clip(t - example.head as i64), clip(t - example.tail as i64)))
        .collect()
}

/// Parameters of one LSTM direction. Gate order is `i, f, c, o`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub input: [ParamId; 4],
    pub recurrent: [ParamId; 4],
    pub peephole: [ParamId; 4],
    pub bias: [ParamId; 4],
}

const GATES: [&str; 4] = ["i", "f", "c", "o"];
const I: usize = 0;
const F: usize = 1;
const C: usize = 2;
const O: usize = 3;

impl LstmParams {
    /// Weights uniform in `[-1/sqrt(hidden), 1/sqrt(hidden)]`, biases zero
    /// except the forget gate at +1.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let input = GATES.map(|g| set.add(format!("{prefix}.W_{g}"), Matrix::uniform(input_dim, hidden, bound, rng), true));
        let recurrent = GATES.map(|g| set.add(format!("{prefix}.U_{g}"), Matrix::uniform(hidden, hidden, bound, rng), true));
        let peephole = GATES.map(|g| set.add(format!("{prefix}.V_{g}"), Matrix::uniform(hidden, hidden, bound, rng), true));
        let bias = GATES.map(|g| {
            let init = if g == "f" { T::one() } else { T::zero() };
            set.add(format!("{prefix}.b_{g}"), Matrix::filled(1, hidden, init), false)
        });
        Self {
            input,
            recurrent,
            peephole,
            bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderParams {
    pub words: ParamId,
    pub pos_head: ParamId,
    pub pos_tail: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl EncoderParams {
    /// Registers the encoder parameters. `words` replaces the random word
    /// table when given (its row count must match the vocabulary).
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        cfg: &EncoderConfig,
        vocab_len: usize,
        words: Option<Matrix<T>>,
        rng: &mut R,
    ) -> Self {
        let words = words.unwrap_or_else(|| Matrix::uniform(vocab_len, cfg.word_dim, 0.25, rng));
        let words = set.add("embed.words", words, false);
        let span = 2 * cfg.max_dist + 1;
        let pos_head = set.add("embed.pos_head", Matrix::uniform(span, cfg.pos_dim, 0.25, rng), false);
        let pos_tail = set.add("embed.pos_tail", Matrix::uniform(span, cfg.pos_dim, 0.25, rng), false);
        let forward = LstmParams::init(set, "lstm.fw", cfg.input_dim(), cfg.hidden, rng);
        let backward = LstmParams::init(set, "lstm.bw", cfg.input_dim(), cfg.hidden, rng);
        Self {
            words,
            pos_head,
            pos_tail,
            forward,
            backward,
        }
    }
}

/// Input sequence `x_t = word ++ pos_head ++ pos_tail`, one row per token.
pub fn embed<T: Scalar>(
    tape: &mut Tape<'_, T>,
    example: &SentenceExample,
    vocab: &Vocab,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let word_rows: Vec<usize> = example.tokens.iter().map(|w| vocab.lookup(w)).collect();
    let positions = position_ids(example, cfg.max_dist);
    let offset = cfg.max_dist as i64;
    let head_rows: Vec<usize> = positions.iter().map(|&(h, _)| (h + offset) as usize).collect();
    let tail_rows: Vec<usize> = positions.iter().map(|&(_, t)| (t + offset) as usize).collect();

    let words = tape.param(params.words);
    let pos_head = tape.param(params.pos_head);
    let pos_tail = tape.param(params.pos_tail);
    let w = tape.gather_rows(words, &word_rows)?;
    let ph = tape.gather_rows(pos_head, &head_rows)?;
    let pt = tape.gather_rows(pos_tail, &tail_rows)?;
    tape.concat_cols(&[w, ph, pt])
}

/// One LSTM direction over `inputs` (`n x input_dim`). States are returned
/// in token order for both directions.
pub fn lstm_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    inputs: Var,
    params: &LstmParams,
    direction: Direction,
) -> Result<Vec<Var>> {
    let n = tape.value(inputs).rows();
    let mut projected = [inputs; 4];
    for g in 0..4 {
        let w = tape.param(params.input[g]);
        projected[g] = tape.matmul(inputs, w)?;
    }
    let recurrent = params.recurrent.map(|id| tape.param(id));
    let peephole = params.peephole.map(|id| tape.param(id));
    let bias = params.bias.map(|id| tape.param(id));

    let order: Vec<usize> = match direction {
        Direction::Forward => (0..n).collect(),
        Direction::Backward => (0..n).rev().collect(),
    };
    let mut states = vec![None; n];
    let mut prev: Option<(Var, Var)> = None;
    for t in order {
        // x W + h U + c V + b, where the h/c terms vanish at the first step
        let pre = |tape: &mut Tape<'_, T>, g: usize, cell: Option<Var>| -> Result<Var> {
            let mut acc = tape.row(projected[g], t)?;
            if let Some((h, _)) = prev {
                let hu = tape.matmul(h, recurrent[g])?;
                acc = tape.add(acc, hu)?;
            }
            if let Some(c) = cell {
                let cv = tape.matmul(c, peephole[g])?;
                acc = tape.add(acc, cv)?;
            }
            tape.add(acc, bias[g])
        };
        let c_prev = prev.map(|(_, c)| c);
        let i_pre = pre(tape, I, c_prev)?;
        let i = tape.sigmoid(i_pre);
        let f_pre = pre(tape, F, c_prev)?;
        let f = tape.sigmoid(f_pre);
        let c_pre = pre(tape, C, c_prev)?;
        let cand = tape.tanh(c_pre);
        let mut c = tape.mul(i, cand)?;
        if let Some(cp) = c_prev {
            let keep = tape.mul(f, cp)?;
            c = tape.add(c, keep)?;
        }
        let o_pre = pre(tape, O, Some(c))?;
        let o = tape.sigmoid(o_pre);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        states[t] = Some(h);
        prev = Some((h, c));
    }
    Ok(states.into_iter().map(|s| s.expect("every step visited")).collect())
}

/// Tape handles of an encoded sentence.
#[derive(Debug, Clone, Copy)]
pub struct HiddenVars {
    /// `n x hidden`, one row per token.
    pub states: Var,
    /// `1 x hidden`, sum of the head and tail rows.
    pub entity: Var,
}

/// Bi-LSTM encoding. `dropout_mask` (`n x hidden`, already scaled) is
/// applied to the summed states.
pub fn bilstm<T: Scalar>(
    tape: &mut Tape<'_, T>,
    example: &SentenceExample,
    vocab: &Vocab,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    dropout_mask: Option<Matrix<T>>,
) -> Result<HiddenVars> {
    let inputs = embed(tape, example, vocab, params, cfg)?;
    let fw = lstm_forward(tape, inputs, &params.forward, Direction::Forward)?;
    let bw = lstm_forward(tape, inputs, &params.backward, Direction::Backward)?;
    let fw = tape.stack_rows(&fw)?;
    let bw = tape.stack_rows(&bw)?;
    let mut states = tape.add(fw, bw)?;
    if let Some(mask) = dropout_mask {
        let mask = tape.constant(mask);
        states = tape.mul(states, mask)?;
    }
    let head = tape.row(states, example.head)?;
    let tail = tape.row(states, example.tail)?;
    let entity = tape.add(head, tail)?;
    Ok(HiddenVars { states, entity })
}

/// Evaluated hidden sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence<T> {
    pub states: Matrix<T>,
    pub entity: Vec<T>,
}

impl<T: Scalar> HiddenSequence<T> {
    pub fn from_tape(tape: &Tape<'_, T>, vars: HiddenVars) -> Self {
        Self {
            states: tape.value(vars.states).clone(),
            entity: tape.value(vars.entity).data().to_vec(),
        }
    }
}
