use std::collections::HashMap;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::model::{dyn_array, MlmModel};
use crate::corpus::Mode;
use crate::error::{Error, Result};
use crate::tokenizer::{NewToken, Vocab};

pub const MAGIC: &[u8; 4] = b"CSCP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_completed: usize,
    /// Mean masked-token loss per epoch, across every training run so far.
    pub loss_trace: Vec<f64>,
    pub final_loss: Option<f64>,
    /// Corpus rendering the model was trained on, if any.
    pub mode: Option<Mode>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: TrainMeta,
    vocab: String,
}

/// A model together with the vocabulary it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub meta: TrainMeta,
    pub model: MlmModel<f32>,
}

impl Checkpoint {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model.vocab_size: {} does not match the vocabulary size {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let model = MlmModel::init(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Checkpoint {
            vocab,
            meta: TrainMeta {
                seed,
                ..TrainMeta::default()
            },
            model,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Appends embedding rows for tokens added to the vocabulary. `vocab` is
    /// the extended vocabulary; `new_tokens` must cover exactly the ids past
    /// the current table, in order. Decoder bias entries start at zero.
    pub fn extend_embeddings(&self, vocab: &Vocab, new_tokens: &[NewToken]) -> Result<Checkpoint> {
        let old = self.config().vocab_size;
        let h = self.config().hidden;
        if vocab.len() != old + new_tokens.len() {
            return Err(Error::Model(format!(
                "extended vocabulary has {} tokens, expected {} + {}",
                vocab.len(),
                old,
                new_tokens.len()
            )));
        }
        let mut out = self.clone();
        out.vocab = vocab.clone();
        if new_tokens.is_empty() {
            return Ok(out);
        }
        let mut rows = Vec::with_capacity(new_tokens.len() * h);
        for (i, t) in new_tokens.iter().enumerate() {
            if t.id as usize != old + i {
                return Err(Error::Model(format!(
                    "token `{}` has id {}, expected {}",
                    t.token,
                    t.id,
                    old + i
                )));
            }
            if vocab.token(t.id) != Some(t.token.as_str()) {
                return Err(Error::Model(format!(
                    "token `{}` is not id {} in the vocabulary",
                    t.token, t.id
                )));
            }
            if t.init.len() != h {
                return Err(Error::Model(format!(
                    "init vector for `{}` has length {}, expected {h}",
                    t.token,
                    t.init.len()
                )));
            }
            rows.extend_from_slice(&t.init);
        }
        let p = &mut out.model.params;
        let added = ndarray::Array2::from_shape_vec((new_tokens.len(), h), rows).expect("row-major rows");
        p.word_embeddings = ndarray::concatenate![ndarray::Axis(0), p.word_embeddings, added];
        p.decoder_bias = ndarray::concatenate![
            ndarray::Axis(0),
            p.decoder_bias,
            ndarray::Array1::zeros(new_tokens.len())
        ];
        out.model.config.vocab_size = vocab.len();
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.config().clone(),
            meta: self.meta.clone(),
            vocab: self.vocab.to_file_string(),
        })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_u32(&mut buf, len_u32(header.len())?);
        buf.extend_from_slice(&header);
        let tensors = self.model.params.tensors();
        put_u32(&mut buf, len_u32(tensors.len())?);
        for (name, t) in tensors {
            put_u32(&mut buf, len_u32(name.len())?);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, len_u32(t.ndim())?);
            for &d in t.shape() {
                put_u32(&mut buf, len_u32(d)?);
            }
            for &v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Cursor::new(&body[4..]);
        let version = get_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = get_u32(&mut r)? as usize;
        let header: Header = serde_json::from_slice(&take(&mut r, header_len)?)?;
        header.model.validate()?;
        let vocab = Vocab::from_file_string(&header.vocab)?;
        if vocab.len() != header.model.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                header.model.vocab_size
            )));
        }
        let count = get_u32(&mut r)? as usize;
        let mut named = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = get_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = get_u32(&mut r)? as usize;
            let dims = (0..rank)
                .map(|_| get_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = take(
                &mut r,
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor `{name}` contains non-finite values")));
            }
            if named.insert(name.clone(), dyn_array(&dims, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if (r.position() as usize) != body.len() - 4 {
            return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
        }
        let params = super::model::Params::from_tensors(&header.model, named)?;
        Ok(Checkpoint {
            vocab,
            meta: header.meta,
            model: MlmModel::new(header.model, params),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Short content hash identifying this exact checkpoint.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(fingerprint_bytes(&self.to_bytes()?))
    }
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in u32")))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn take(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    let mut out = vec![0u8; n];
    r.read_exact(&mut out)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    Ok(out)
}
