//! The full relation extractor: encoder plus either the capsule head or one
//! of the baseline heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsnet::{self, CapsuleLayerParams, RoutingState};
use crate::data::{RelationSchema, SentenceExample, Vocab};
use crate::encoder::{self, EncoderConfig, EncoderParams, HiddenSequence};
use crate::heads::{self, BaselineHeadParams, PoolKind};
use crate::objective::{self, MarginConfig, PredictionResult, DEFAULT_BOUNDARY};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{ParamGrad, Tape, Var};
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Capsule,
    Max,
    Avg,
    Att,
}

impl HeadKind {
    pub fn pool(self) -> Option<PoolKind> {
        match self {
            HeadKind::Capsule => None,
            HeadKind::Max => Some(PoolKind::Max),
            HeadKind::Avg => Some(PoolKind::Avg),
            HeadKind::Att => Some(PoolKind::Att),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingKind {
    Attentive,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sliding,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Low-level capsule size `d_u`.
    pub capsule_dim: usize,
    /// High-level capsule size `d_r`.
    pub relation_dim: usize,
    /// Routing iterations `z`.
    pub iterations: usize,
    pub margin: MarginConfig,
    pub head: HeadKind,
    pub routing: RoutingKind,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            capsule_dim: 16,
            relation_dim: 16,
            iterations: 3,
            margin: MarginConfig::default(),
            head: HeadKind::Capsule,
            routing: RoutingKind::Attentive,
            loss: LossKind::Sliding,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.word_dim == 0 || e.hidden == 0 {
            return Err(Error::Config("word and hidden dimensions must be positive".into()));
        }
        if self.head == HeadKind::Capsule {
            capsnet::capsules_per_token(e.hidden, self.capsule_dim)?;
            if self.relation_dim == 0 {
                return Err(Error::Config("relation capsule dimension must be positive".into()));
            }
            if self.iterations == 0 {
                return Err(Error::Config("routing needs at least one iteration".into()));
            }
            self.margin.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapsuleHeadParams {
    pub layer: CapsuleLayerParams,
    /// `1 x 1` NA boundary `B`.
    pub boundary: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadParams {
    Capsule(CapsuleHeadParams),
    Baseline(BaselineHeadParams),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelIds {
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

/// Trainable state plus everything needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub schema: RelationSchema,
    pub vocab: Vocab,
    pub params: ParamSet<T>,
    pub ids: ModelIds,
}

/// Tape handles for one forward pass.
pub struct Forward {
    pub hidden: encoder::HiddenVars,
    pub output: HeadOutput,
}

pub enum HeadOutput {
    Capsule {
        alpha: Option<Var>,
        routing: capsnet::RoutingVars,
        boundary: Var,
    },
    Baseline {
        logits: Var,
    },
}

/// Routing diagnostics for one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDump {
    pub tokens: Vec<String>,
    pub head: usize,
    pub tail: usize,
    /// Attention per token.
    pub alpha: Vec<f64>,
    /// Final couplings, one row per low-level capsule.
    pub couplings: Vec<Vec<f64>>,
    /// Token of each low-level capsule.
    pub capsule_token: Vec<usize>,
    /// Capsule length per relation.
    pub scores: Vec<f64>,
    pub boundary: f64,
    pub labels: Vec<String>,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model. `word_vectors` must have one row per
    /// vocabulary entry and `word_dim` columns when given.
    pub fn new(
        config: ModelConfig,
        schema: RelationSchema,
        vocab: Vocab,
        word_vectors: Option<Matrix<T>>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(w) = &word_vectors {
            if w.shape() != (vocab.len(), config.encoder.word_dim) {
                return Err(Error::Shape(format!(
                    "word vectors are {}x{}, expected {}x{}",
                    w.rows(),
                    w.cols(),
                    vocab.len(),
                    config.encoder.word_dim
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let ids = register(&mut params, &config, schema.len(), vocab.len(), word_vectors, &mut rng);
        Ok(Self {
            config,
            schema,
            vocab,
            params,
            ids,
        })
    }

    /// Rebuilds the model layout and fills it from named matrices.
    pub fn from_parts(
        config: ModelConfig,
        schema: RelationSchema,
        vocab: Vocab,
        named: Vec<(String, Matrix<T>)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, schema, vocab, None, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Incompatible(format!(
                "{} parameter blocks, model layout has {}",
                named.len(),
                model.params.len()
            )));
        }
        for (name, value) in named {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Incompatible(format!("unexpected parameter block {name:?}")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name:?} is {}x{}, layout expects {}x{}",
                    value.rows(),
                    value.cols(),
                    slot.rows(),
                    slot.cols()
                )));
            }
            *slot = value;
        }
        Ok(model)
    }

    pub fn relations(&self) -> usize {
        self.schema.len()
    }

    pub fn is_capsule(&self) -> bool {
        matches!(self.ids.head, HeadParams::Capsule(_))
    }

    /// Current NA boundary `B` (capsule head only).
    pub fn boundary(&self) -> Option<f64> {
        match &self.ids.head {
            HeadParams::Capsule(c) => Some(self.params.get(c.boundary).data()[0].to_f64_lossy()),
            HeadParams::Baseline(_) => None,
        }
    }

    /// Parameters exempt from L2 decay: embeddings, biases and `B`.
    pub fn decays(&self, id: ParamId) -> bool {
        self.params.entry(id).decay
    }

    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        example: &SentenceExample,
        dropout_mask: Option<Matrix<T>>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let hidden = encoder::bilstm(tape, example, &self.vocab, &self.ids.encoder, &cfg.encoder, dropout_mask)?;
        let output = match &self.ids.head {
            HeadParams::Capsule(head) => {
                let k = cfg.encoder.hidden / cfg.capsule_dim;
                let caps = capsnet::split_capsules_on(tape, hidden.states, cfg.capsule_dim)?;
                let alpha = match cfg.routing {
                    RoutingKind::Attentive => Some(capsnet::attention_on(tape, hidden.states, hidden.entity, k)?),
                    RoutingKind::Dynamic => None,
                };
                let transforms: Vec<Var> = head.layer.transforms.iter().map(|&id| tape.param(id)).collect();
                let routing = capsnet::route_on(tape, caps, &transforms, alpha, cfg.iterations)?;
                let boundary = match cfg.loss {
                    LossKind::Sliding => tape.param(head.boundary),
                    LossKind::Fixed => tape.constant(Matrix::scalar(T::lit(DEFAULT_BOUNDARY))),
                };
                HeadOutput::Capsule {
                    alpha,
                    routing,
                    boundary,
                }
            }
            HeadParams::Baseline(head) => {
                let attention = head.attention.map(|id| tape.param(id));
                let sentence = heads::aggregate_on(tape, hidden.states, head.kind, attention)?;
                let classifier = tape.param(head.classifier);
                let bias = tape.param(head.bias);
                let logits = heads::logits_on(tape, sentence, classifier, bias)?;
                HeadOutput::Baseline { logits }
            }
        };
        Ok(Forward { hidden, output })
    }

    /// Training loss of one sentence: the margin loss for the capsule head;
    /// for baselines, cross-entropy summed over the gold labels (NA class
    /// when unlabeled).
    pub fn loss_on(&self, tape: &mut Tape<'_, T>, fwd: &Forward, example: &SentenceExample) -> Result<Var> {
        match &fwd.output {
            HeadOutput::Capsule { routing, boundary, .. } => {
                objective::margin_loss_on(tape, routing.lengths, &example.labels, *boundary, &self.config.margin)
            }
            HeadOutput::Baseline { logits } => {
                let classes = self.relations() + 1;
                let mut target = vec![T::zero(); classes];
                if example.labels.is_empty() {
                    target[classes - 1] = T::one();
                }
                for &j in &example.labels {
                    *target
                        .get_mut(j)
                        .ok_or_else(|| Error::Schema(format!("label {j} outside the model schema")))? = T::one();
                }
                tape.softmax_cross_entropy(*logits, &target)
            }
        }
    }

    /// Loss and per-parameter gradients of one sentence.
    pub fn loss_and_grads(
        &self,
        example: &SentenceExample,
        dropout_mask: Option<Matrix<T>>,
    ) -> Result<(T, Vec<ParamGrad<T>>)> {
        let mut tape = Tape::with_params(&self.params);
        let fwd = self.forward(&mut tape, example, dropout_mask)?;
        let loss = self.loss_on(&mut tape, &fwd, example)?;
        let grads = tape.backward(loss)?;
        Ok((tape.scalar_value(loss), grads.for_params(&self.params)))
    }

    /// Inverted-dropout mask for the hidden states of `example`.
    pub fn dropout_mask<R: Rng + ?Sized>(&self, example: &SentenceExample, rate: f64, rng: &mut R) -> Option<Matrix<T>> {
        if rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let n = example.len() * self.config.encoder.hidden;
        let data = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
            .collect();
        Some(Matrix::from_vec(example.len(), self.config.encoder.hidden, data).expect("mask shape"))
    }

    /// Per-relation scores: capsule lengths, or classifier probabilities of
    /// the non-NA classes for baselines.
    pub fn scores(&self, example: &SentenceExample) -> Result<Vec<T>> {
        let mut tape = Tape::with_params(&self.params);
        let fwd = self.forward(&mut tape, example, None)?;
        Ok(match fwd.output {
            HeadOutput::Capsule { routing, .. } => tape.value(routing.lengths).data().to_vec(),
            HeadOutput::Baseline { logits } => {
                let p = tape.softmax(logits)?;
                tape.value(p).data()[..self.relations()].to_vec()
            }
        })
    }

    /// Decoded prediction: by `B` for the capsule head, by argmax over
    /// relations + NA for baselines.
    pub fn predict(&self, example: &SentenceExample) -> Result<PredictionResult> {
        let mut tape = Tape::with_params(&self.params);
        let fwd = self.forward(&mut tape, example, None)?;
        match fwd.output {
            HeadOutput::Capsule { routing, boundary, .. } => {
                let b = tape.scalar_value(boundary);
                Ok(objective::decode(tape.value(routing.lengths).data(), b))
            }
            HeadOutput::Baseline { logits } => {
                let p = tape.softmax(logits)?;
                let probs = tape.value(p).data();
                let best = probs
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &x)| if x > probs[best] { i } else { best });
                let scores: Vec<f64> = probs[..self.relations()].iter().map(|x| x.to_f64_lossy()).collect();
                let labels = if best == self.relations() { vec![] } else { vec![best] };
                Ok(PredictionResult {
                    scores,
                    na: labels.is_empty(),
                    labels,
                })
            }
        }
    }

    pub fn hidden(&self, example: &SentenceExample) -> Result<HiddenSequence<T>> {
        let mut tape = Tape::with_params(&self.params);
        let h = encoder::bilstm(&mut tape, example, &self.vocab, &self.ids.encoder, &self.config.encoder, None)?;
        Ok(HiddenSequence::from_tape(&tape, h))
    }

    /// Full routing state; `None` for baseline heads.
    pub fn routing_state(&self, example: &SentenceExample) -> Result<Option<RoutingState<T>>> {
        let mut tape = Tape::with_params(&self.params);
        let fwd = self.forward(&mut tape, example, None)?;
        Ok(match fwd.output {
            HeadOutput::Capsule { alpha, routing, .. } => {
                let alpha = match alpha {
                    Some(a) => tape.value(a).data().to_vec(),
                    None => vec![T::one(); tape.value(routing.logits).rows()],
                };
                Some(RoutingState::from_tape(&tape, &routing, alpha))
            }
            HeadOutput::Baseline { .. } => None,
        })
    }

    pub fn inspect(&self, example: &SentenceExample) -> Result<Option<RoutingDump>> {
        let Some(state) = self.routing_state(example)? else {
            return Ok(None);
        };
        let k = self.config.encoder.hidden / self.config.capsule_dim;
        let boundary = self.boundary().unwrap_or(DEFAULT_BOUNDARY);
        let effective_b = match self.config.loss {
            LossKind::Sliding => boundary,
            LossKind::Fixed => DEFAULT_BOUNDARY,
        };
        let scores: Vec<f64> = state.lengths().iter().map(|x| x.to_f64_lossy()).collect();
        let labels = objective::decode(&scores, effective_b)
            .labels
            .iter()
            .map(|&j| self.schema.name(j).to_string())
            .collect();
        Ok(Some(RoutingDump {
            tokens: example.tokens.clone(),
            head: example.head,
            tail: example.tail,
            alpha: state.alpha.iter().step_by(k).map(|x| x.to_f64_lossy()).collect(),
            couplings: (0..state.couplings.rows())
                .map(|i| state.couplings.row(i).iter().map(|x| x.to_f64_lossy()).collect())
                .collect(),
            capsule_token: (0..state.couplings.rows()).map(|i| i / k).collect(),
            scores,
            boundary: effective_b,
            labels,
        }))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            schema: self.schema.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }
}

fn register<T: Scalar, R: Rng + ?Sized>(
    set: &mut ParamSet<T>,
    config: &ModelConfig,
    relations: usize,
    vocab_len: usize,
    word_vectors: Option<Matrix<T>>,
    rng: &mut R,
) -> ModelIds {
    let encoder = EncoderParams::init(set, &config.encoder, vocab_len, word_vectors, rng);
    let head = match config.head.pool() {
        None => {
            let layer = CapsuleLayerParams::init(set, relations, config.capsule_dim, config.relation_dim, rng);
            let boundary = set.add("caps.B", Matrix::scalar(T::lit(DEFAULT_BOUNDARY)), false);
            HeadParams::Capsule(CapsuleHeadParams { layer, boundary })
        }
        Some(kind) => HeadParams::Baseline(BaselineHeadParams::init(set, kind, config.encoder.hidden, relations + 1, rng)),
    };
    ModelIds { encoder, head }
}
