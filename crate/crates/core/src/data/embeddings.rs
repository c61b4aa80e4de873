use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::{Error, Result};

use super::SentenceExample;

/// Reserved vocabulary entry for unknown words; always row 0.
pub const UNK: &str = "<unk>";

/// Half-width of the uniform distribution for rows without a pretrained vector.
const RANDOM_ROW_BOUND: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Vocab::from_words(words.into_iter().filter(|w| w != UNK))
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Builds a vocabulary with [`UNK`] at row 0 followed by `words` in
    /// first-seen order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab {
            words: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for w in words {
            vocab.insert(w.into());
        }
        vocab
    }

    /// Vocabulary of a training corpus.
    pub fn from_corpus(examples: &[SentenceExample]) -> Self {
        Self::from_words(examples.iter().flat_map(|e| e.tokens.iter().cloned()))
    }

    fn insert(&mut self, word: String) -> usize {
        if let Some(&i) = self.index.get(&word) {
            return i;
        }
        let i = self.words.len();
        self.index.insert(word.clone(), i);
        self.words.push(word);
        i
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Row for `word`, falling back to [`UNK`].
    pub fn lookup(&self, word: &str) -> usize {
        self.get(word).unwrap_or(0)
    }
}

/// Word vectors, one row per vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    pub vocab: Vocab,
    pub vectors: Matrix<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, word: &str) -> &[T] {
        self.vectors.row(self.vocab.lookup(word))
    }

    /// Random table for `vocab`, uniform in `[-0.25, 0.25]`.
    pub fn random<R: Rng + ?Sized>(vocab: Vocab, dim: usize, rng: &mut R) -> Self {
        let vectors = Matrix::uniform(vocab.len(), dim, RANDOM_ROW_BOUND, rng);
        Self { vocab, vectors }
    }

    /// Keep only `words` that have a row here; other words fall back to UNK.
    pub fn restrict<'a>(&self, words: impl IntoIterator<Item = &'a str>) -> Self {
        let kept: Vec<&str> = words
            .into_iter()
            .filter(|w| *w != UNK && self.vocab.get(w).is_some())
            .collect();
        let vocab = Vocab::from_words(kept.iter().copied());
        let mut vectors = Matrix::zeros(vocab.len(), self.dim());
        for (row, word) in vocab.words().iter().enumerate() {
            vectors.row_mut(row).copy_from_slice(self.vector(word));
        }
        Self { vocab, vectors }
    }
}

impl<T: Scalar> EmbeddingTable<T> {
    /// Rows for every entry of `vocab`: the stored vector when the word is
    /// known, otherwise uniform in `[-0.25, 0.25]`. Row 0 (UNK) is copied
    /// from this table.
    pub fn for_vocab<R: Rng + ?Sized>(&self, vocab: &Vocab, rng: &mut R) -> Matrix<T> {
        let mut out = Matrix::uniform(vocab.len(), self.dim(), RANDOM_ROW_BOUND, rng);
        for (row, word) in vocab.words().iter().enumerate() {
            if row == 0 || self.vocab.get(word).is_some() {
                out.row_mut(row).copy_from_slice(self.vector(word));
            }
        }
        out
    }
}

pub fn load_embeddings<T: Scalar>(path: impl AsRef<Path>, dim: usize, seed: u64) -> Result<EmbeddingTable<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(BufReader::new(file), path, dim, seed)
}

/// Parse `word v1 ... v_dim` lines. An optional word2vec `count dim` header
/// line is skipped. Repeated words keep their first vector.
pub fn parse_embeddings<T: Scalar>(
    reader: impl BufRead,
    origin: &Path,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable<T>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let unk: Vec<T> = (0..dim)
        .map(|_| T::lit(rng.gen_range(-RANDOM_ROW_BOUND..=RANDOM_ROW_BOUND)))
        .collect();

    let mut vocab = Vocab::from_words(std::iter::empty::<String>());
    let mut data = unk;
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if line_no == 1 && values.len() == 1 && word.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        let format_err = |message: String| Error::Format {
            path: origin.to_path_buf(),
            line: line_no,
            message,
        };
        if values.len() != dim {
            return Err(format_err(format!("expected {dim} values, found {}", values.len())));
        }
        let parsed = values
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .map(T::lit)
                    .ok_or_else(|| format_err(format!("bad value {v:?}")))
            })
            .collect::<Result<Vec<T>>>()?;
        if word == UNK {
            data[..dim].copy_from_slice(&parsed);
            continue;
        }
        if vocab.get(word).is_some() {
            continue;
        }
        vocab.insert(word.to_string());
        data.extend(parsed);
    }
    let vectors = Matrix::from_vec(vocab.len(), dim, data)?;
    Ok(EmbeddingTable { vocab, vectors })
}
