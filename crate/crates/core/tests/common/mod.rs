//! Helpers shared by the integration suites: a toy model, a finite
//! difference checker, plain-loop oracles and the synthetic protocol.

#![allow(dead_code)]

use std::collections::BTreeMap;

use capsrel::capsnet::{dynamic_route, route};
use capsrel::data::{RelationSchema, SentenceExample, Vocab};
use capsrel::encoder::EncoderConfig;
use capsrel::synthetic::{generate, SyntheticConfig, SyntheticCorpus};
use capsrel::tape::Tape;
use capsrel::train::TrainConfig;
use capsrel::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

/// 3-word vocabulary, 2 relations, hidden 4 split into two capsules.
pub fn toy_model(head: HeadKind, routing: RoutingKind, loss: LossKind, seed: u64) -> Model64 {
    let schema = RelationSchema::new(vec!["r0".into(), "r1".into()], Some("NA".into())).unwrap();
    let vocab = Vocab::from_words(["a", "b", "c"]);
    let config = ModelConfig {
        encoder: EncoderConfig {
            word_dim: 3,
            pos_dim: 2,
            hidden: 4,
            max_dist: 2,
        },
        capsule_dim: 2,
        relation_dim: 3,
        iterations: 3,
        head,
        routing,
        loss,
        ..ModelConfig::default()
    };
    let mut model = Model64::new(config, schema, vocab, None, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (_, p) in model.params.iter_mut() {
        if p.name != "caps.B" {
            p.value.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.8..0.8));
        }
    }
    if let Some(id) = model.params.find("caps.B") {
        model.params.get_mut(id).data_mut()[0] = 0.47;
    }
    model
}

pub fn toy_sentence(labels: Vec<usize>) -> SentenceExample {
    SentenceExample::new(vec!["a".into(), "b".into(), "c".into()], 0, 2, labels).unwrap()
}

pub fn loss_value(model: &Model64, ex: &SentenceExample) -> f64 {
    let mut tape = Tape::with_params(&model.params);
    let fwd = model.forward(&mut tape, ex, None).unwrap();
    let l = model.loss_on(&mut tape, &fwd, ex).unwrap();
    tape.scalar_value(l)
}

pub fn param_group(name: &str) -> &'static str {
    match name {
        n if n.starts_with("embed.words") => "word embeddings",
        n if n.starts_with("embed.pos") => "position embeddings",
        n if n.starts_with("lstm") => "lstm gates",
        "caps.B" => "boundary",
        n if n.starts_with("caps.W") => "capsule transforms",
        n if n.starts_with("head.attention") => "attention",
        _ => "classifier",
    }
}

/// Per-group `(relative error, gradient scale)`, the error being
/// `|a - n| / max(|a|, |n|)` over the flattened group.
pub fn fd_check(model: &Model64, ex: &SentenceExample) -> BTreeMap<&'static str, (f64, f64)> {
    let (_, grads) = model.loss_and_grads(ex, None).unwrap();
    let mut sums: BTreeMap<&'static str, (f64, f64, f64)> = BTreeMap::new();
    for (id, p) in model.params.iter() {
        let analytic = grads[id.index()].to_dense(p.value.shape());
        for k in 0..p.value.len() {
            let mut plus = model.clone();
            plus.params.get_mut(id).data_mut()[k] += FD_STEP;
            let mut minus = model.clone();
            minus.params.get_mut(id).data_mut()[k] -= FD_STEP;
            let numeric = (loss_value(&plus, ex) - loss_value(&minus, ex)) / (2.0 * FD_STEP);
            let a = analytic.data()[k];
            let e = sums.entry(param_group(&p.name)).or_default();
            e.0 += (a - numeric).powi(2);
            e.1 += a * a;
            e.2 += numeric * numeric;
        }
    }
    sums.into_iter()
        .map(|(g, (d, a, n))| {
            let scale = a.sqrt().max(n.sqrt());
            (g, (if scale == 0.0 { 0.0 } else { d.sqrt() / scale }, scale))
        })
        .collect()
}

/// Checks the listed groups; returns the worst error or the first failure.
/// Groups with an exactly zero gradient (both sides) pass here; the suite
/// separately requires each group to be exercised somewhere.
pub fn fd_assert(report: &BTreeMap<&'static str, (f64, f64)>, groups: &[&str]) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for g in groups {
        let (err, _) = *report.get(g).ok_or_else(|| format!("{g}: missing"))?;
        if err.is_nan() || err >= FD_TOL {
            return Err(format!("{g}: relative error {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient suite over every head and routing/loss variant; returns the
/// worst relative error seen.
pub fn gradient_suite() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    let mut exercised: BTreeMap<&'static str, bool> = BTreeMap::new();
    let mut run = |m: &Model64, labels: &[usize], groups: &[&str]| -> Result<(), String> {
        let r = fd_check(m, &toy_sentence(labels.to_vec()));
        worst = worst.max(fd_assert(&r, groups)?);
        for (g, (_, scale)) in &r {
            *exercised.entry(g).or_default() |= *scale > 0.0;
        }
        Ok(())
    };
    let encoder = ["word embeddings", "position embeddings", "lstm gates"];
    for labels in [vec![1], vec![0, 1], vec![]] {
        for seed in 0..3 {
            let m = toy_model(HeadKind::Capsule, RoutingKind::Attentive, LossKind::Sliding, seed);
            run(&m, &labels, &[&encoder[..], &["capsule transforms", "boundary"]].concat())?;
        }
        let m = toy_model(HeadKind::Capsule, RoutingKind::Dynamic, LossKind::Sliding, 4);
        run(&m, &labels, &[&encoder[..], &["capsule transforms", "boundary"]].concat())?;
        let m = toy_model(HeadKind::Capsule, RoutingKind::Attentive, LossKind::Fixed, 5);
        let r = fd_check(&m, &toy_sentence(labels.clone()));
        if r["boundary"].1 != 0.0 {
            return Err("fixed margin leaks gradient into B".into());
        }
        run(&m, &labels, &[&encoder[..], &["capsule transforms"]].concat())?;
        for head in [HeadKind::Max, HeadKind::Avg, HeadKind::Att] {
            let m = toy_model(head, RoutingKind::Attentive, LossKind::Sliding, 6);
            let mut groups = [&encoder[..], &["classifier"]].concat();
            if head == HeadKind::Att {
                groups.push("attention");
            }
            run(&m, &labels, &groups)?;
        }
    }
    if let Some((g, _)) = exercised.iter().find(|(_, &hit)| !hit) {
        return Err(format!("{g}: gradient never exercised"));
    }
    Ok(worst)
}

// ---- plain-loop oracles ----

pub type Mat = Vec<Vec<f64>>;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `v M` for a row vector.
fn vecmat(v: &[f64], m: &Mat) -> Vec<f64> {
    let cols = m[0].len();
    let mut out = vec![0.0; cols];
    for (i, row) in m.iter().enumerate() {
        for c in 0..cols {
            out[c] += v[i] * row[c];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squash_oracle(v: &[f64]) -> Vec<f64> {
    let sq = dot(v, v);
    if sq == 0.0 {
        return vec![0.0; v.len()];
    }
    let k = sq / (1.0 + sq) / sq.sqrt();
    v.iter().map(|x| x * k).collect()
}

pub struct RoutingOracle {
    pub logits: Mat,
    pub couplings: Vec<Mat>,
    pub capsules: Mat,
}

/// Routing written out step by step: softmax over relations, weighted
/// sum of predictions, squash, agreement update.
pub fn routing_oracle(caps: &Mat, transforms: &[Mat], alpha: &[f64], z: usize) -> RoutingOracle {
    let m = caps.len();
    let nj = transforms.len();
    let mut uhat = vec![vec![Vec::new(); nj]; m];
    for i in 0..m {
        for j in 0..nj {
            uhat[i][j] = vecmat(&caps[i], &transforms[j]);
        }
    }
    let dr = transforms[0][0].len();
    let mut b = vec![vec![0.0; nj]; m];
    let mut history = Vec::new();
    let mut r = vec![vec![0.0; dr]; nj];
    for _ in 0..z {
        let mut w = vec![vec![0.0; nj]; m];
        for i in 0..m {
            let mx = b[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = b[i].iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..nj {
                w[i][j] = e[j] / s;
            }
        }
        for j in 0..nj {
            let mut s = vec![0.0; dr];
            for i in 0..m {
                for d in 0..dr {
                    s[d] += w[i][j] * alpha[i] * uhat[i][j][d];
                }
            }
            r[j] = squash_oracle(&s);
        }
        for i in 0..m {
            for j in 0..nj {
                b[i][j] += dot(&uhat[i][j], &r[j]);
            }
        }
        history.push(w);
    }
    RoutingOracle {
        logits: b,
        couplings: history,
        capsules: r,
    }
}

pub fn to_rows(m: &Matrix64) -> Mat {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn from_rows(rows: &Mat) -> Matrix64 {
    Matrix::from_rows(rows).unwrap()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub struct LstmWeights {
    /// Gate order i, f, c, o.
    pub w: [Mat; 4],
    pub u: [Mat; 4],
    pub v: [Mat; 4],
    pub b: [Vec<f64>; 4],
}

pub fn lstm_weights(model: &Model64, prefix: &str) -> LstmWeights {
    let get = |kind: &str, g: &str| to_rows(model.params.get(model.params.find(&format!("{prefix}.{kind}_{g}")).unwrap()));
    let gates = ["i", "f", "c", "o"];
    LstmWeights {
        w: gates.map(|g| get("W", g)),
        u: gates.map(|g| get("U", g)),
        v: gates.map(|g| get("V", g)),
        b: gates.map(|g| get("b", g)[0].clone()),
    }
}

/// One direction, one step at a time, with the peephole term on the
/// previous cell for i, f, c and on the current cell for o.
pub fn lstm_oracle(xs: &Mat, p: &LstmWeights) -> Mat {
    let hdim = p.b[0].len();
    let mut h = vec![0.0; hdim];
    let mut c = vec![0.0; hdim];
    let mut out = Vec::new();
    for x in xs {
        let gate = |g: usize, cell: &[f64]| -> Vec<f64> {
            let a = vecmat(x, &p.w[g]);
            let b = vecmat(&h, &p.u[g]);
            let d = vecmat(cell, &p.v[g]);
            (0..hdim).map(|k| a[k] + b[k] + d[k] + p.b[g][k]).collect()
        };
        let i: Vec<f64> = gate(0, &c).into_iter().map(sig).collect();
        let f: Vec<f64> = gate(1, &c).into_iter().map(sig).collect();
        let cand: Vec<f64> = gate(2, &c).into_iter().map(f64::tanh).collect();
        let c_new: Vec<f64> = (0..hdim).map(|k| i[k] * cand[k] + f[k] * c[k]).collect();
        let o: Vec<f64> = gate(3, &c_new).into_iter().map(sig).collect();
        h = (0..hdim).map(|k| o[k] * c_new[k].tanh()).collect();
        c = c_new;
        out.push(h.clone());
    }
    out
}

/// Summed Bi-LSTM states straight from the parameter tables.
pub fn bilstm_oracle(model: &Model64, ex: &SentenceExample) -> Mat {
    let cfg = model.config.encoder;
    let words = to_rows(model.params.get(model.params.find("embed.words").unwrap()));
    let ph = to_rows(model.params.get(model.params.find("embed.pos_head").unwrap()));
    let pt = to_rows(model.params.get(model.params.find("embed.pos_tail").unwrap()));
    let md = cfg.max_dist as i64;
    let xs: Mat = (0..ex.len())
        .map(|t| {
            let w = model.vocab.lookup(&ex.tokens[t]);
            let dh = (t as i64 - ex.head as i64).clamp(-md, md) + md;
            let dt = (t as i64 - ex.tail as i64).clamp(-md, md) + md;
            [words[w].clone(), ph[dh as usize].clone(), pt[dt as usize].clone()].concat()
        })
        .collect();
    let fw = lstm_oracle(&xs, &lstm_weights(model, "lstm.fw"));
    let rev: Mat = xs.iter().rev().cloned().collect();
    let mut bw = lstm_oracle(&rev, &lstm_weights(model, "lstm.bw"));
    bw.reverse();
    fw.iter()
        .zip(&bw)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-bound..bound)).collect()).collect()
}

/// Worst deviation over `instances` random routing problems.
pub fn routing_equivalence(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let m = rng.gen_range(1..=8);
        let nj = rng.gen_range(1..=4);
        let z = rng.gen_range(1..=4);
        let du = rng.gen_range(1..=5);
        let dr = rng.gen_range(1..=5);
        let caps: Mat = random_matrix(&mut rng, m, du, 1.0).iter().map(|u| squash_oracle(u)).collect();
        let ws: Vec<Mat> = (0..nj).map(|_| random_matrix(&mut rng, du, dr, 1.5)).collect();
        let alpha: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let wm: Vec<Matrix64> = ws.iter().map(from_rows).collect();

        let want = routing_oracle(&caps, &ws, &alpha, z);
        let got = route(&from_rows(&caps), &wm, &alpha, z).unwrap();
        worst = worst.max(max_diff(&to_rows(&got.capsules), &want.capsules));
        worst = worst.max(max_diff(&to_rows(&got.logits), &want.logits));
        for (a, b) in got.coupling_history.iter().zip(&want.couplings) {
            worst = worst.max(max_diff(&to_rows(a), b));
        }

        let want = routing_oracle(&caps, &ws, &vec![1.0; m], z);
        let got = dynamic_route(&from_rows(&caps), &wm, z).unwrap();
        worst = worst.max(max_diff(&to_rows(&got.capsules), &want.capsules));
        worst = worst.max(max_diff(&to_rows(&got.logits), &want.logits));
    }
    worst
}

/// Ten differences `m + e_i` with `e = +-1` alternating: sample sd is
/// `sqrt(10/9)`, so `m = t sqrt(10/9) / sqrt(10)` gives statistic `t`.
pub fn boundary_folds(t: f64) -> (Vec<f64>, Vec<f64>) {
    let sd = (10.0f64 / 9.0).sqrt();
    let m = t * sd / 10f64.sqrt();
    let a: Vec<f64> = (0..10).map(|i| 0.5 + m + if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    (a, vec![0.5; 10])
}

// ---- synthetic protocol ----

pub fn synthetic(seed: u64) -> SyntheticCorpus {
    generate(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

pub const TRAIN_SEED: u64 = 7;
pub const TEST_SEED: u64 = 8;

pub fn synthetic_config(head: HeadKind, routing: RoutingKind, loss: LossKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            word_dim: 16,
            pos_dim: 4,
            hidden: 32,
            max_dist: 12,
        },
        capsule_dim: 8,
        relation_dim: 8,
        iterations: 3,
        head,
        routing,
        loss,
        ..ModelConfig::default()
    }
}

/// Shared budget: up to 300 epochs, early stopping on dev macro F1.
pub fn synthetic_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 20,
        epochs: 300,
        dropout: 0.0,
        l2: 0.0,
        seed,
        patience: 10,
        target_f1: None,
    }
}
