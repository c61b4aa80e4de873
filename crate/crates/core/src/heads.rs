//! Baseline aggregation heads: max pooling, averaging and word-level
//! attention over the Bi-LSTM states, each followed by a softmax classifier
//! over the relations plus NA (NA is the last class).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
    Att,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineHeadParams {
    pub kind: PoolKind,
    /// `hidden x 1`, only for [`PoolKind::Att`].
    pub attention: Option<ParamId>,
    /// `hidden x classes`
    pub classifier: ParamId,
    /// `1 x classes`
    pub bias: ParamId,
}

impl BaselineHeadParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        kind: PoolKind,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let attention = (kind == PoolKind::Att).then(|| set.add("head.attention", Matrix::uniform(hidden, 1, bound, rng), true));
        let classifier = set.add("head.classifier", Matrix::uniform(hidden, classes, bound, rng), true);
        let bias = set.add("head.bias", Matrix::zeros(1, classes), false);
        Self {
            kind,
            attention,
            classifier,
            bias,
        }
    }
}

/// Sentence vector (`1 x hidden`) from `states` (`n x hidden`).
///
/// Attention weights are `softmax_t(tanh(h_t) . a)`.
pub fn aggregate_on<T: Scalar>(tape: &mut Tape<'_, T>, states: Var, kind: PoolKind, attention: Option<Var>) -> Result<Var> {
    match kind {
        PoolKind::Max => tape.max_rows(states),
        PoolKind::Avg => tape.mean_rows(states),
        PoolKind::Att => {
            let a = attention.ok_or_else(|| crate::Error::Contract("attention head without attention vector".into()))?;
            let squashed = tape.tanh(states);
            let scores = tape.matmul(squashed, a)?;
            let weights = tape.softmax(scores)?;
            tape.matmul_tn(weights, states)
        }
    }
}

/// Classifier logits, `1 x classes`.
pub fn logits_on<T: Scalar>(tape: &mut Tape<'_, T>, sentence: Var, classifier: Var, bias: Var) -> Result<Var> {
    let z = tape.matmul(sentence, classifier)?;
    tape.add(z, bias)
}

pub fn aggregate<T: Scalar>(states: &Matrix<T>, kind: PoolKind, attention: Option<&[T]>) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let h = tape.constant(states.clone());
    let a = attention.map(|a| tape.constant(Matrix::column_vector(a.to_vec())));
    let v = aggregate_on(&mut tape, h, kind, a)?;
    Ok(tape.value(v).data().to_vec())
}

/// `softmax(v C + bias)`
pub fn classify<T: Scalar>(sentence: &[T], classifier: &Matrix<T>, bias: &[T]) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(Matrix::row_vector(sentence.to_vec()));
    let c = tape.constant(classifier.clone());
    let b = tape.constant(Matrix::row_vector(bias.to_vec()));
    let z = logits_on(&mut tape, v, c, b)?;
    let p = tape.softmax(z)?;
    Ok(tape.value(p).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const KINDS: [PoolKind; 3] = [PoolKind::Max, PoolKind::Avg, PoolKind::Att];

    #[test]
    fn single_token_passes_through() {
        let h = Matrix::from_vec(1, 3, vec![0.2f64, -0.4, 0.9]).unwrap();
        for kind in KINDS {
            let v = aggregate(&h, kind, Some(&[0.3, -1.0, 2.0])).unwrap();
            for (a, b) in v.iter().zip(h.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn equal_states_avg_equals_max() {
        let h = Matrix::from_vec(2, 2, vec![0.5f64, -0.5, 0.5, -0.5]).unwrap();
        assert_eq!(aggregate(&h, PoolKind::Avg, None).unwrap(), vec![0.5, -0.5]);
        assert_eq!(aggregate(&h, PoolKind::Max, None).unwrap(), vec![0.5, -0.5]);
    }

    #[test]
    fn zero_attention_vector_is_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Matrix::<f64>::uniform(5, 4, 1.0, &mut rng);
        let att = aggregate(&h, PoolKind::Att, Some(&[0.0; 4])).unwrap();
        let avg = aggregate(&h, PoolKind::Avg, None).unwrap();
        for (a, b) in att.iter().zip(&avg) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let p = classify(&[1.0f64, 2.0], &Matrix::zeros(2, 19), &[0.0; 19]).unwrap();
        assert_eq!(p.len(), 19);
        assert!(p.iter().all(|&x| (x - 1.0 / 19.0).abs() < 1e-15));
    }

    fn permute(h: &Matrix<f64>, perm: &[usize]) -> Matrix<f64> {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| h.row(i).to_vec()).collect();
        Matrix::from_rows(&rows).unwrap()
    }

    proptest! {
        #[test]
        fn classify_sums_to_one(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let c = Matrix::uniform(6, 5, 2.0, &mut rng);
            let p = classify(&v, &c, &[0.1, 0.0, -0.2, 0.3, 0.0]).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pooling_is_permutation_invariant(seed in any::<u64>(), n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = Matrix::<f64>::uniform(n, 4, 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left(n / 2);
            let hp = permute(&h, &perm);
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for kind in KINDS {
                let x = aggregate(&h, kind, Some(&a)).unwrap();
                let y = aggregate(&hp, kind, Some(&a)).unwrap();
                for (p, q) in x.iter().zip(&y) {
                    prop_assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }
}
