use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ordered non-NA relation names plus the corpus label (if any) that means NA.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct RelationSchema {
    relations: Vec<String>,
    na_label: Option<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct RawSchema {
    relations: Vec<String>,
    #[serde(default)]
    na_label: Option<String>,
}

impl TryFrom<RawSchema> for RelationSchema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        Self::new(raw.relations, raw.na_label)
    }
}

impl RelationSchema {
    pub fn new(relations: Vec<String>, na_label: Option<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(relations.len());
        for (i, name) in relations.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate relation {name:?}")));
            }
        }
        if let Some(na) = &na_label {
            if index.contains_key(na) {
                return Err(Error::Schema(format!("NA label {na:?} listed as a relation")));
            }
        }
        if relations.is_empty() {
            return Err(Error::Schema("schema has no relations".into()));
        }
        Ok(Self {
            relations,
            na_label,
            index,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawSchema = serde_json::from_str(text)?;
        raw.try_into()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schema serializes")
    }

    /// Number of non-NA relations.
    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn na_label(&self) -> Option<&str> {
        self.na_label.as_deref()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.relations[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Resolve a corpus label: `Ok(None)` for the NA label.
    pub fn resolve(&self, label: &str) -> Result<Option<usize>> {
        if self.na_label.as_deref() == Some(label) {
            return Ok(None);
        }
        self.id(label)
            .map(Some)
            .ok_or_else(|| Error::Schema(format!("unknown relation label {label:?}")))
    }
}

/// One sentence with its entity pair. An empty label set is NA.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceExample {
    pub tokens: Vec<String>,
    pub head: usize,
    pub tail: usize,
    /// Sorted, deduplicated relation ids.
    pub labels: Vec<usize>,
}

impl SentenceExample {
    pub fn new(tokens: Vec<String>, head: usize, tail: usize, mut labels: Vec<usize>) -> Result<Self> {
        if head >= tokens.len() || tail >= tokens.len() {
            return Err(Error::Contract(format!(
                "entity index out of range (head {head}, tail {tail}, {} tokens)",
                tokens.len()
            )));
        }
        if head == tail {
            return Err(Error::Contract(format!("head and tail share token {head}")));
        }
        labels.sort_unstable();
        labels.dedup();
        Ok(Self {
            tokens,
            head,
            tail,
            labels,
        })
    }

    pub fn is_na(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_label(&self, relation: usize) -> bool {
        self.labels.binary_search(&relation).is_ok()
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    tokens: Vec<String>,
    head: usize,
    tail: usize,
    #[serde(default)]
    labels: Vec<String>,
}

pub fn load_corpus(path: impl AsRef<Path>, schema: &RelationSchema) -> Result<Vec<SentenceExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), path, schema)
}

/// Parse JSONL; `origin` only labels error messages.
pub fn parse_corpus(reader: impl BufRead, origin: &Path, schema: &RelationSchema) -> Result<Vec<SentenceExample>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            message,
        };
        let raw: CorpusLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let mut labels = Vec::with_capacity(raw.labels.len());
        for label in &raw.labels {
            match schema.resolve(label) {
                Ok(Some(id)) => labels.push(id),
                Ok(None) => {}
                Err(Error::Schema(msg)) => {
                    return Err(Error::Schema(format!("{}:{line_no}: {msg}", origin.display())))
                }
                Err(e) => return Err(e),
            }
        }
        let example = SentenceExample::new(raw.tokens, raw.head, raw.tail, labels)
            .map_err(|e| parse_err(e.to_string()))?;
        out.push(example);
    }
    Ok(out)
}

pub fn write_corpus(mut writer: impl Write, examples: &[SentenceExample], schema: &RelationSchema) -> Result<()> {
    for ex in examples {
        let line = CorpusLine {
            tokens: ex.tokens.clone(),
            head: ex.head,
            tail: ex.tail,
            labels: ex.labels.iter().map(|&j| schema.name(j).to_string()).collect(),
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}
