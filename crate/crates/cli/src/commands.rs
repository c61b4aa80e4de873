use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use capsrel::checkpoint::{read_model, save_model};
use capsrel::data::{load_corpus, load_embeddings, SentenceExample, Vocab};
use capsrel::metrics::{EvalReport, SweepResult};
use capsrel::stats::paired_ttest;
use capsrel::train::{self, EpochRecord};
use capsrel::{Error, Matrix, Model, Model32, Model64, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{self, Overrides, Precision, RunConfig};

/// Raised by `inspect` for models without a capsule head.
#[derive(Debug)]
pub struct NoRoutingState(String);

impl std::fmt::Display for NoRoutingState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} model has no routing state", self.0)
    }
}

impl std::error::Error for NoRoutingState {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<NoRoutingState>().is_some() {
        return 5;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parse { .. } | Error::Format { .. } | Error::Io { .. }) => 2,
        Some(Error::NonFiniteLoss { .. }) => 3,
        Some(Error::Schema(_) | Error::Incompatible(_)) => 4,
        _ => 1,
    }
}

/// Applies `CAPSREL_THREADS` to the global pool.
pub fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("CAPSREL_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CAPSREL_THREADS={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            serde_json::to_writer_pretty(&mut w, value)?;
            writeln!(w).map_err(|e| Error::io(p, e))?;
            w.flush().map_err(|e| Error::io(p, e))?;
        }
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    /// Split the report was computed on: `test`, or `dev` without a test file.
    split: &'a str,
    best_epoch: usize,
    epochs_run: usize,
    report: &'a EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<&'a SweepResult>,
}

pub fn train(config_path: &Path, overrides: &Overrides) -> Result<()> {
    let cfg = config::load(config_path, overrides)?;
    for input in cfg.inputs() {
        if !input.is_file() {
            return Err(Error::Config(format!("{}: no such file", input.display())).into());
        }
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    fs::write(cfg.output_dir.join("effective_config.toml"), cfg.to_toml()?)
        .map_err(|e| Error::io(cfg.output_dir.join("effective_config.toml"), e))?;
    match cfg.precision {
        Precision::F32 => run_training::<f32>(&cfg),
        Precision::F64 => run_training::<f64>(&cfg),
    }
}

fn run_training<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.data;
    let schema = capsrel::data::RelationSchema::load(&d.schema)?;
    let train_set = load_corpus(&d.train, &schema)?;
    let (train_set, dev_set) = match &d.dev {
        Some(p) => (train_set, load_corpus(p, &schema)?),
        None => train::split_dev(train_set, cfg.dev_fraction, cfg.train.seed)?,
    };
    let test_set = d.test.as_ref().map(|p| load_corpus(p, &schema)).transpose()?;
    let vocab = Vocab::from_corpus(&train_set);
    let vectors: Option<Matrix<T>> = match &d.embeddings {
        Some(p) => {
            let table = load_embeddings::<T>(p, cfg.model.encoder.word_dim, cfg.train.seed)?;
            Some(table.for_vocab(&vocab, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed)))
        }
        None => None,
    };
    log::info!(
        "{} train / {} dev sentences, {} words, {} relations",
        train_set.len(),
        dev_set.len(),
        vocab.len(),
        schema.len()
    );
    let model = Model::<T>::new(cfg.model, schema, vocab, vectors, cfg.train.seed)?;
    let progress = |r: &EpochRecord| {
        log::info!(
            "epoch {:>3}  loss {:.5}  dev F1 {}{}",
            r.epoch + 1,
            r.loss,
            r.dev_f1.map_or("-".into(), |f| format!("{f:.4}")),
            r.boundary.map_or(String::new(), |b| format!("  B {b:.4}"))
        )
    };
    let out = match train::train_with(model, &train_set, &dev_set, &cfg.train, progress) {
        Ok(out) => out,
        Err(Error::NonFiniteLoss { epoch, batch, dump }) => {
            let path = cfg.output_dir.join("abort_dump.json");
            write_json(Some(&path), &dump)?;
            log::error!("diagnostics written to {}", path.display());
            return Err(Error::NonFiniteLoss { epoch, batch, dump }.into());
        }
        Err(e) => return Err(e.into()),
    };

    let dir = &cfg.output_dir;
    save_model(&out.model, dir.join("model.bin"))?;
    let trace_path = dir.join("loss_trace.csv");
    let mut w = csv::Writer::from_path(&trace_path).with_context(|| format!("writing {}", trace_path.display()))?;
    for r in &out.trace {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&trace_path, e))?;

    let (split, eval_set) = match &test_set {
        Some(t) => ("test", t.as_slice()),
        None => ("dev", dev_set.as_slice()),
    };
    if eval_set.is_empty() {
        log::warn!("no {split} sentences; skipping the final report");
        return Ok(());
    }
    let report = train::evaluate(&out.model, eval_set)?;
    let swept = if out.model.is_capsule() {
        None
    } else {
        Some(train::sweep(&out.model, eval_set)?)
    };
    let summary = TrainReport {
        split,
        best_epoch: out.best_epoch + 1,
        epochs_run: out.trace.len(),
        report: &report,
        sweep: swept.as_ref(),
    };
    write_json(Some(&dir.join("report.json")), &summary)?;
    let pr_path = dir.join("pr_curve.csv");
    let mut pr = create(&pr_path)?;
    report.write_pr_csv(&mut pr).map_err(|e| Error::io(&pr_path, e))?;
    pr.flush().map_err(|e| Error::io(&pr_path, e))?;
    log::info!(
        "{split} macro P {:.4} R {:.4} F1 {:.4}, PR area {:.4}; outputs in {}",
        report.precision,
        report.recall,
        report.f1,
        report.pr_area,
        dir.display()
    );
    Ok(())
}

/// A model in the precision it was trained in.
enum Loaded {
    F32(Model32),
    F64(Model64),
}

fn load(path: &Path) -> Result<Loaded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (model, precision) = read_model::<f64>(std::io::BufReader::new(file))?;
    Ok(match precision.as_str() {
        "f32" => Loaded::F32(model.cast()),
        _ => Loaded::F64(model),
    })
}

macro_rules! with_model {
    ($loaded:expr, $m:ident => $body:expr) => {
        match $loaded {
            Loaded::F32($m) => $body,
            Loaded::F64($m) => $body,
        }
    };
}

fn corpus_for<T: Scalar>(model: &Model<T>, input: &Path) -> Result<Vec<SentenceExample>> {
    Ok(load_corpus(input, &model.schema)?)
}

pub fn eval(model: &Path, input: &Path, output: Option<&Path>) -> Result<()> {
    with_model!(load(model)?, m => {
        let corpus = corpus_for(&m, input)?;
        let report = train::evaluate(&m, &corpus)?;
        if let Some(dir) = output {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_json(Some(&dir.join("report.json")), &report)?;
            let pr_path = dir.join("pr_curve.csv");
            let mut pr = create(&pr_path)?;
            report.write_pr_csv(&mut pr).map_err(|e| Error::io(&pr_path, e))?;
            pr.flush().map_err(|e| Error::io(&pr_path, e))?;
        }
        write_json(None, &report)
    })
}

#[derive(Serialize)]
struct PredictionLine {
    scores: serde_json::Map<String, serde_json::Value>,
    labels: Vec<String>,
    na: bool,
}

pub fn predict(model: &Path, input: &Path, output: Option<&Path>) -> Result<()> {
    with_model!(load(model)?, m => {
        let corpus = corpus_for(&m, input)?;
        let preds = train::predict_all(&m, &corpus)?;
        let mut out: Box<dyn Write> = match output {
            Some(p) => Box::new(create(p)?),
            None => Box::new(std::io::stdout().lock()),
        };
        for p in preds {
            let line = PredictionLine {
                scores: p
                    .scores
                    .iter()
                    .enumerate()
                    .map(|(j, &s)| (m.schema.name(j).to_string(), s.into()))
                    .collect(),
                labels: p.labels.iter().map(|&j| m.schema.name(j).to_string()).collect(),
                na: p.na,
            };
            serde_json::to_writer(&mut out, &line)?;
            writeln!(out).context("writing predictions")?;
        }
        out.flush().context("writing predictions")?;
        Ok(())
    })
}

pub fn inspect(model: &Path, input: &Path, output: Option<&Path>) -> Result<()> {
    with_model!(load(model)?, m => {
        if !m.is_capsule() {
            let head = serde_json::to_value(m.config.head)?;
            return Err(NoRoutingState(head.as_str().unwrap_or("baseline").to_string()).into());
        }
        let corpus = corpus_for(&m, input)?;
        let dumps = corpus
            .iter()
            .map(|ex| m.inspect(ex).map(|d| d.expect("capsule head")))
            .collect::<Result<Vec<_>, _>>()?;
        write_json(output, &dumps)
    })
}

pub fn sweep(model: &Path, input: &Path, output: Option<&Path>) -> Result<()> {
    with_model!(load(model)?, m => {
        let corpus = corpus_for(&m, input)?;
        let result = train::sweep(&m, &corpus)?;
        write_json(output, &result)
    })
}

#[derive(Serialize)]
struct TTestReport {
    a: String,
    b: String,
    #[serde(flatten)]
    result: capsrel::stats::TTestResult,
}

pub fn ttest(input: &Path, output: Option<&Path>) -> Result<()> {
    let mut reader = csv::Reader::from_path(input).map_err(|e| csv_error(input, e))?;
    let headers = reader.headers().map_err(|e| csv_error(input, e))?.clone();
    if headers.len() != 2 {
        return Err(Error::Format {
            path: input.to_path_buf(),
            line: 1,
            message: format!("expected two score columns, found {}", headers.len()),
        }
        .into());
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, record) in reader.deserialize::<(f64, f64)>().enumerate() {
        let (x, y) = record.map_err(|e| Error::Format {
            path: input.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?;
        a.push(x);
        b.push(y);
    }
    let result = paired_ttest(&a, &b).map_err(|e| Error::Format {
        path: input.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let report = TTestReport {
        a: headers[0].to_string(),
        b: headers[1].to_string(),
        result,
    };
    write_json(output, &report)
}

fn csv_error(path: &Path, e: csv::Error) -> anyhow::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io).into(),
        kind => Error::Format {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{kind:?}"),
        }
        .into(),
    }
}
