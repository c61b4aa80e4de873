//! Run configuration: a TOML file layered over per-corpus profile defaults.
//!
//! ```toml
//! profile = "semeval"          # or "nyt"
//! output_dir = "runs/sem"
//!
//! [data]
//! schema = "schema.json"
//! train = "train.jsonl"
//! test = "test.jsonl"          # optional; also dev, embeddings
//!
//! [model]
//! head = "capsule"
//! [model.encoder]
//! hidden = 128
//!
//! [train]
//! epochs = 40
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use capsrel::encoder::EncoderConfig;
use capsrel::objective::MarginConfig;
use capsrel::train::TrainConfig;
use capsrel::{Error, HeadKind, LossKind, ModelConfig, RoutingKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Nyt,
    Semeval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub schema: PathBuf,
    pub train: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Text vectors with `model.encoder.word_dim` columns; random when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

/// Fully resolved configuration, as dumped next to the run outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub output_dir: PathBuf,
    pub precision: Precision,
    /// Share of the training corpus held out when no dev file is given.
    pub dev_fraction: f64,
    pub data: DataPaths,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Defaults per corpus profile. Both share the network sizes; they differ
/// in the absent-relation weight, dropout and L2.
pub fn profile_defaults(profile: Profile) -> (ModelConfig, TrainConfig) {
    let (lambda, dropout, l2) = match profile {
        Profile::Nyt => (1.0, 0.0, 1e-4),
        Profile::Semeval => (0.5, 0.7, 0.0),
    };
    let model = ModelConfig {
        encoder: EncoderConfig {
            word_dim: 50,
            pos_dim: 5,
            hidden: 256,
            max_dist: 60,
        },
        capsule_dim: 16,
        relation_dim: 16,
        iterations: 3,
        margin: MarginConfig { gamma: 0.4, lambda },
        head: HeadKind::Capsule,
        routing: RoutingKind::Attentive,
        loss: LossKind::Sliding,
    };
    let train = TrainConfig {
        learning_rate: 0.001,
        batch_size: 50,
        epochs: 100,
        dropout,
        l2,
        seed: 1,
        patience: 10,
        target_f1: None,
    };
    (model, train)
}

/// Command-line overrides applied after the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub head: Option<HeadKind>,
    pub routing: Option<RoutingKind>,
    pub loss: Option<LossKind>,
    pub output_dir: Option<PathBuf>,
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn config_error(path: &Path, msg: impl std::fmt::Display) -> anyhow::Error {
    Error::Config(format!("{}: {msg}", path.display())).into()
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let user: toml::Table = toml::from_str(&text).map_err(|e| config_error(path, e))?;
    let base_dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let base_dir = std::fs::canonicalize(base_dir).map_err(|e| Error::io(base_dir, e))?;
    from_table(user, &base_dir, overrides).map_err(|e| match e.downcast::<Error>() {
        Ok(Error::Config(msg)) => config_error(path, msg),
        Ok(other) => other.into(),
        Err(e) => e,
    })
}

pub fn from_table(user: toml::Table, base_dir: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let profile = match user.get("profile") {
        None => Profile::Nyt,
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|_| Error::Config(format!("unknown profile {v}; expected \"nyt\" or \"semeval\"")))?,
    };
    let explicit_capsule_option = user
        .get("model")
        .and_then(toml::Value::as_table)
        .is_some_and(|m| m.contains_key("routing") || m.contains_key("loss"));

    let (model, train) = profile_defaults(profile);
    let mut table = toml::Table::new();
    table.insert("profile".into(), toml::Value::try_from(profile)?);
    table.insert("output_dir".into(), "capsrel-out".into());
    table.insert("precision".into(), toml::Value::try_from(Precision::F64)?);
    table.insert("dev_fraction".into(), 0.1.into());
    table.insert("model".into(), toml::Value::try_from(model)?);
    table.insert("train".into(), toml::Value::try_from(train)?);
    merge(&mut table, user);

    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;

    if let Some(seed) = overrides.seed {
        cfg.train.seed = seed;
    }
    if let Some(head) = overrides.head {
        cfg.model.head = head;
    }
    if let Some(routing) = overrides.routing {
        cfg.model.routing = routing;
    }
    if let Some(loss) = overrides.loss {
        cfg.model.loss = loss;
    }
    let capsule_option = explicit_capsule_option || overrides.routing.is_some() || overrides.loss.is_some();
    if cfg.model.head != HeadKind::Capsule && capsule_option {
        return Err(Error::Config("routing and loss options apply only to the capsule head".into()).into());
    }
    if let Some(dir) = &overrides.output_dir {
        cfg.output_dir = dir.clone();
    }

    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base_dir.join(&*p);
        }
    };
    resolve(&mut cfg.output_dir);
    resolve(&mut cfg.data.schema);
    resolve(&mut cfg.data.train);
    for p in [&mut cfg.data.dev, &mut cfg.data.test, &mut cfg.data.embeddings].into_iter().flatten() {
        resolve(p);
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config(format!("dev_fraction {} must lie in [0, 1)", self.dev_fraction)).into());
        }
        Ok(())
    }

    /// Every input file, for the launch-time existence check.
    pub fn inputs(&self) -> Vec<&Path> {
        let d = &self.data;
        [Some(&d.schema), Some(&d.train), d.dev.as_ref(), d.test.as_ref(), d.embeddings.as_ref()]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the effective config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> toml::Table {
        toml::from_str(text).unwrap()
    }

    const MINIMAL: &str = "[data]\nschema = \"s.json\"\ntrain = \"t.jsonl\"\n";

    #[test]
    fn omitted_fields_take_profile_values() {
        let nyt = from_table(table(MINIMAL), Path::new("/base"), &Overrides::default()).unwrap();
        assert_eq!(nyt.train.batch_size, 50);
        assert_eq!(nyt.train.learning_rate, 0.001);
        assert_eq!(nyt.model.encoder.word_dim, 50);
        assert_eq!(nyt.model.encoder.pos_dim, 5);
        assert_eq!(nyt.model.encoder.hidden, 256);
        assert_eq!((nyt.model.capsule_dim, nyt.model.relation_dim), (16, 16));
        assert_eq!(nyt.model.iterations, 3);
        assert_eq!(nyt.model.margin.gamma, 0.4);
        assert_eq!(nyt.model.margin.lambda, 1.0);
        assert_eq!(nyt.train.dropout, 0.0);
        assert_eq!(nyt.train.l2, 1e-4);

        let sem = from_table(table(&format!("profile = \"semeval\"\n{MINIMAL}")), Path::new("/base"), &Overrides::default()).unwrap();
        assert_eq!(sem.model.margin.lambda, 0.5);
        assert_eq!(sem.train.dropout, 0.7);
        assert_eq!(sem.train.l2, 0.0);
        assert_eq!(sem.train.batch_size, 50);
    }

    #[test]
    fn nested_fields_override_single_values() {
        let text = format!("{MINIMAL}[model.encoder]\nhidden = 64\n[train]\nepochs = 7\n");
        let cfg = from_table(table(&text), Path::new("/base"), &Overrides::default()).unwrap();
        assert_eq!(cfg.model.encoder.hidden, 64);
        assert_eq!(cfg.model.encoder.word_dim, 50);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.data.train, Path::new("/base/t.jsonl"));
        assert_eq!(cfg.output_dir, Path::new("/base/capsrel-out"));
    }

    #[test]
    fn effective_dump_round_trips() {
        let overrides = Overrides {
            seed: Some(9),
            head: Some(HeadKind::Capsule),
            loss: Some(LossKind::Fixed),
            ..Overrides::default()
        };
        let cfg = from_table(table(MINIMAL), Path::new("/base"), &overrides).unwrap();
        let again = from_table(toml::from_str(&cfg.to_toml().unwrap()).unwrap(), Path::new("/elsewhere"), &Overrides::default()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.train.seed, 9);
    }

    #[test]
    fn rejects_bad_input() {
        let none = Overrides::default();
        assert!(from_table(table("[data]\nschema = \"s\"\n"), Path::new("/"), &none).is_err());
        assert!(from_table(table(&format!("{MINIMAL}[train]\nlearning_rate = -1.0\n")), Path::new("/"), &none).is_err());
        assert!(from_table(table(&format!("{MINIMAL}[train]\nbogus = 1\n")), Path::new("/"), &none).is_err());
        assert!(from_table(table(&format!("profile = \"x\"\n{MINIMAL}")), Path::new("/"), &none).is_err());
        let baseline_with_routing = format!("{MINIMAL}[model]\nhead = \"max\"\nrouting = \"dynamic\"\n");
        assert!(from_table(table(&baseline_with_routing), Path::new("/"), &none).is_err());
        let flag = Overrides {
            head: Some(HeadKind::Avg),
            loss: Some(LossKind::Fixed),
            ..Overrides::default()
        };
        assert!(from_table(table(MINIMAL), Path::new("/"), &flag).is_err());
    }
}
