//! Versioned binary checkpoint.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "TSKP" | u32 version
//! u32 len | config (key=value lines)
//! u32 len | vocabulary (u32 n, then n × [u32 len | utf8 | u64 freq])
//! u32 len | optimizer (empty, or u64 step | f64 lr β1 β2 ε)
//! u32 len | expansion (empty, or u32 n, then n × [u32 len | utf8])
//! u32 n_tensors, then n × [u32 len | name | u32 rows | u32 cols | u8 dtype | payload]
//! ```
//!
//! dtype 0 is f64 and 1 is f32 (widened on load).

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::embeddings::{Expansion, PretrainedEmbeddings};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::training::adam::{AdamConfig, AdamState};
use crate::training::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"TSKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub adam: Option<AdamState>,
    pub expansion: Option<Expansion>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("checkpoint field exceeds u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn block(&mut self, f: impl FnOnce(&mut Writer)) {
        let mut inner = Writer(Vec::new());
        f(&mut inner);
        self.bytes(&inner.0);
    }
    fn tensor(&mut self, name: &str, t: &Tensor, dtype: Dtype) {
        self.bytes(name.as_bytes());
        self.u32(t.rows());
        self.u32(t.cols());
        self.u8(dtype.tag());
        for &v in t.data() {
            match dtype {
                Dtype::F64 => self.f64(v),
                Dtype::F32 => self.0.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated(format!(
                "unexpected end of file in {}",
                self.what
            )));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        let what = self.what;
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Truncated(format!("invalid UTF-8 in {what}")))
    }
    fn block(&mut self, what: &'static str) -> Result<Reader<'a>> {
        self.what = what;
        Ok(Reader {
            buf: self.bytes()?,
            what,
        })
    }
    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Truncated(format!(
                "{} trailing bytes after {}",
                self.buf.len(),
                self.what
            )))
        }
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        self.what = "tensor record";
        let name = self.string()?;
        let rows = self.u32()?;
        let cols = self.u32()?;
        let n = rows.checked_mul(cols).ok_or_else(|| {
            Error::Truncated(format!("tensor {name} has absurd shape {rows}x{cols}"))
        })?;
        let data = match self.u8()? {
            0 => self
                .take(n.saturating_mul(8))?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                .collect(),
            1 => self
                .take(n.saturating_mul(4))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                .collect(),
            tag => {
                return Err(Error::Truncated(format!(
                    "tensor {name} has unknown dtype tag {tag}"
                )))
            }
        };
        Ok((name, Tensor::new(rows, cols, data)?))
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig, vocab: Vocabulary, params: ModelParams) -> Self {
        Checkpoint {
            config,
            vocab,
            params,
            adam: None,
            expansion: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_as(Dtype::F64)
    }

    /// Serializes with every tensor payload stored as `dtype`.
    pub fn to_bytes_as(&self, dtype: Dtype) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.block(|b| b.0.extend_from_slice(self.config.to_kv().as_bytes()));
        w.block(|b| {
            let ranked: Vec<(&str, u64)> = self.vocab.ranked().collect();
            b.u32(ranked.len());
            for (t, f) in ranked {
                b.bytes(t.as_bytes());
                b.u64(f);
            }
        });
        w.block(|b| {
            if let Some(a) = &self.adam {
                b.u64(a.step);
                for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                    b.f64(v);
                }
            }
        });
        w.block(|b| {
            if let Some(x) = &self.expansion {
                b.u32(x.pretrained.len());
                for t in x.pretrained.tokens() {
                    b.bytes(t.as_bytes());
                }
            }
        });
        let named = self.params.named_tensors();
        let mut records: Vec<(String, &Tensor)> =
            named.iter().map(|(n, t)| (n.clone(), *t)).collect();
        if let Some(a) = &self.adam {
            for (i, (n, _)) in named.iter().enumerate() {
                records.push((format!("adam.m.{n}"), &a.m[i]));
                records.push((format!("adam.v.{n}"), &a.v[i]));
            }
        }
        if let Some(x) = &self.expansion {
            records.push(("expansion.projection".into(), &x.projection));
            records.push(("expansion.vectors".into(), x.pretrained.vectors()));
        }
        w.u32(records.len());
        for (n, t) in records {
            w.tensor(&n, t, dtype);
        }
        w.0
    }

    /// Parses and validates a checkpoint image. Nothing is returned unless
    /// every block and tensor is consistent.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            what: "header",
        };
        if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }

        let cfg_block = r.block("config block")?;
        let cfg_text = std::str::from_utf8(cfg_block.buf)
            .map_err(|_| Error::Truncated("config block is not UTF-8".into()))?;
        let config = ModelConfig::from_kv(cfg_text)
            .map_err(|e| Error::ShapeInconsistency(format!("config block: {e}")))?;

        let mut vb = r.block("vocabulary block")?;
        let n = vb.u32()?;
        let mut ranked = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let t = vb.string()?;
            ranked.push((t, vb.u64()?));
        }
        vb.finish()?;
        let vocab = Vocabulary::from_ranked(ranked)
            .map_err(|e| Error::ShapeInconsistency(format!("vocabulary: {e}")))?;
        if vocab.len() != config.vocab_size {
            return Err(Error::ShapeInconsistency(format!(
                "vocabulary has {} entries but config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }

        let mut ob = r.block("optimizer block")?;
        let adam_header = if ob.buf.is_empty() {
            None
        } else {
            let step = ob.u64()?;
            let config = AdamConfig {
                lr: ob.f64()?,
                beta1: ob.f64()?,
                beta2: ob.f64()?,
                eps: ob.f64()?,
            };
            ob.finish()?;
            Some((step, config))
        };

        let mut eb = r.block("expansion block")?;
        let exp_tokens = if eb.buf.is_empty() {
            None
        } else {
            let n = eb.u32()?;
            let mut tokens = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                tokens.push(eb.string()?);
            }
            eb.finish()?;
            Some(tokens)
        };

        r.what = "tensor count";
        let count = r.u32()?;
        let mut tensors = HashMap::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::ShapeInconsistency(format!(
                    "duplicate tensor {name}"
                )));
            }
        }
        r.finish()?;

        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::ShapeInconsistency(format!("missing tensor {name}")))
        };
        let expansion = match exp_tokens {
            None => None,
            Some(tokens) => {
                let projection = take("expansion.projection")?;
                let vectors = take("expansion.vectors")?;
                if projection.cols() != config.embed_dim {
                    return Err(Error::ShapeInconsistency(format!(
                        "expansion projection is {:?}, embeddings have width {}",
                        projection.shape(),
                        config.embed_dim
                    )));
                }
                let table = PretrainedEmbeddings::new(tokens, vectors)
                    .map_err(|e| Error::ShapeInconsistency(format!("expansion table: {e}")))?;
                Some(
                    Expansion::new(projection, table)
                        .map_err(|e| Error::ShapeInconsistency(e.to_string()))?,
                )
            }
        };
        let mut moments: [HashMap<String, Tensor>; 2] = Default::default();
        for (slot, prefix) in moments.iter_mut().zip(["adam.m.", "adam.v."]) {
            let keys: Vec<String> = tensors
                .keys()
                .filter(|k| k.starts_with(prefix))
                .cloned()
                .collect();
            for k in keys {
                let t = tensors.remove(&k).expect("listed key");
                slot.insert(k[prefix.len()..].to_string(), t);
            }
        }
        let params = ModelParams::from_named(&config, tensors)?;
        let adam = match adam_header {
            None if moments.iter().all(HashMap::is_empty) => None,
            None => {
                return Err(Error::ShapeInconsistency(
                    "optimizer moments without an optimizer block".into(),
                ))
            }
            Some((step, acfg)) => {
                let [mut ms, mut vs] = moments;
                let mut m = Vec::new();
                let mut v = Vec::new();
                for (name, p) in params.named_tensors() {
                    for (src, dst) in [(&mut ms, &mut m), (&mut vs, &mut v)] {
                        let t = src.remove(&name).ok_or_else(|| {
                            Error::ShapeInconsistency(format!(
                                "missing optimizer moment for {name}"
                            ))
                        })?;
                        if t.shape() != p.shape() {
                            return Err(Error::ShapeInconsistency(format!(
                                "optimizer moment for {name} does not match the parameter shape"
                            )));
                        }
                        dst.push(t);
                    }
                }
                if let Some(extra) = ms.keys().chain(vs.keys()).next() {
                    return Err(Error::ShapeInconsistency(format!(
                        "optimizer moment for unknown tensor {extra}"
                    )));
                }
                Some(AdamState {
                    config: acfg,
                    step,
                    m,
                    v,
                })
            }
        };
        Ok(Checkpoint {
            config,
            vocab,
            params,
            adam,
            expansion,
        })
    }
}

/// Writes to a sibling temp file, then renames, so a failed write never
/// leaves a partial checkpoint at `path`.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = ck.to_bytes();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
