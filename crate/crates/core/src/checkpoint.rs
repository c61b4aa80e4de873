//! Versioned binary model files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "CAPSREL\0"
//! version  u32
//! schema   u64      first 8 bytes of SHA-256 over the schema JSON
//! meta     u64 length + JSON {precision, config, schema, vocab}
//! count    u32
//! blocks   count x { u32 name length, name, u64 rows, u64 cols, rows*cols f64 }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{RelationSchema, Vocab};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CAPSREL\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    precision: String,
    config: ModelConfig,
    schema: RelationSchema,
    vocab: Vocab,
}

pub fn schema_hash(schema: &RelationSchema) -> u64 {
    let digest = Sha256::digest(schema.to_json().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn write_model<T: Scalar>(model: &Model<T>, mut w: impl Write) -> Result<()> {
    let io = |e| Error::io("<model writer>", e);
    let meta = Meta {
        precision: T::NAME.to_string(),
        config: model.config,
        schema: model.schema.clone(),
        vocab: model.vocab.clone(),
    };
    let meta = serde_json::to_vec(&meta)?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&schema_hash(&model.schema).to_le_bytes()).map_err(io)?;
    w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&meta).map_err(io)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes()).map_err(io)?;
    for (_, p) in model.params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(p.name.as_bytes()).map_err(io)?;
        w.write_all(&(p.value.rows() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(p.value.cols() as u64).to_le_bytes()).map_err(io)?;
        for &x in p.value.data() {
            w.write_all(&x.to_f64_lossy().to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Incompatible(format!("truncated model file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

/// Reads a model and reports the precision it was saved from.
pub fn read_model<T: Scalar>(r: impl Read) -> Result<(Model<T>, String)> {
    let mut r = Reader { inner: r };
    let magic = r.bytes(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Incompatible("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let hash = r.u64()?;
    let meta_len = r.u64()? as usize;
    let meta: Meta = serde_json::from_slice(&r.bytes(meta_len)?)
        .map_err(|e| Error::Incompatible(format!("unreadable metadata: {e}")))?;
    if schema_hash(&meta.schema) != hash {
        return Err(Error::Incompatible("schema hash does not match metadata".into()));
    }
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?).map_err(|_| Error::Incompatible("parameter name is not UTF-8".into()))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let data = (0..rows * cols).map(|_| r.f64().map(T::lit)).collect::<Result<Vec<T>>>()?;
        named.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    let model = Model::from_parts(meta.config, meta.schema, meta.vocab, named)?;
    Ok((model, meta.precision))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_model(BufReader::new(file))?.0)
}

/// Precision string stored in a model file header.
pub fn stored_precision(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_model::<f64>(BufReader::new(file))?.1)
}
