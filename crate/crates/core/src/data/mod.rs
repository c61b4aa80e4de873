//! Corpus, schema and embedding ingestion plus deterministic batching.

mod batch;
mod corpus;
mod embeddings;

pub use batch::{batch_iter, epoch_batches};
pub use corpus::{load_corpus, parse_corpus, write_corpus, RelationSchema, SentenceExample};
pub use embeddings::{load_embeddings, parse_embeddings, EmbeddingTable, Vocab, UNK};
