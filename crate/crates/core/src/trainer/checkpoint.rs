//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "XVLCKPT\0"
//! version   u32
//! hlen      u64      length of the JSON header
//! header    hlen bytes of UTF-8 JSON
//! tensors   f64 values of every tensor listed in the header, in order
//! digest    32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xvl_autograd::{ParamStore, Tensor};

use super::config::TrainConfig;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objectives::{FeatureQueue, QueuePair};
use crate::textpipe::{Vocabulary, SPECIALS};

pub const MAGIC: &[u8; 8] = b"XVLCKPT\0";
pub const VERSION: u32 = 1;

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub optimizer: AdamW,
    pub queues: QueuePair,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct QueueState {
    capacity: usize,
    dim: usize,
    len: usize,
    cursor: usize,
    tags: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    config: TrainConfig,
    model: ModelConfig,
    vocab: Vec<String>,
    rng: RngState,
    optimizer: AdamW,
    image_queue: QueueState,
    text_queue: QueueState,
    tensors: Vec<TensorEntry>,
}

const STUDENT: &str = "student/";
const TEACHER: &str = "teacher/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const QUEUE_IMAGE: &str = "queue.image";
const QUEUE_TEXT: &str = "queue.text";

fn queue_state(q: &FeatureQueue) -> QueueState {
    QueueState {
        capacity: q.capacity(),
        dim: q.dim(),
        len: q.len(),
        cursor: q.cursor(),
        tags: q.raw().1.to_vec(),
    }
}

impl Checkpoint {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_words(self.vocab.iter().skip(SPECIALS.len()))
    }

    /// Model bound to the stored parameter layout.
    pub fn bind_model(&self) -> Result<Model> {
        Model::bind(self.model.clone(), &self.student)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (prefix, store) in [(STUDENT, &self.student), (TEACHER, &self.teacher)] {
            for (_, name, t) in store.iter() {
                tensors.push((format!("{prefix}{name}"), t));
            }
        }
        if self.optimizer.m.len() != self.student.len() || self.optimizer.v.len() != self.student.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        for (prefix, moments) in [(ADAM_M, &self.optimizer.m), (ADAM_V, &self.optimizer.v)] {
            for ((_, name, _), t) in self.student.iter().zip(moments) {
                tensors.push((format!("{prefix}{name}"), t));
            }
        }
        let qi = queue_tensor(&self.queues.image);
        let qt = queue_tensor(&self.queues.text);
        tensors.push((QUEUE_IMAGE.into(), &qi));
        tensors.push((QUEUE_TEXT.into(), &qt));

        let header = Header {
            step: self.step,
            config: self.config.clone(),
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            optimizer: self.optimizer.clone(),
            image_queue: queue_state(&self.queues.image),
            text_queue: queue_state(&self.queues.text),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
            return Err(bad("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (truncated or corrupt file)"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&body[20..hend])?;
        let mut cursor = hend;
        let mut read = |rows: usize, cols: usize| -> Result<Tensor> {
            let n = rows * cols;
            let end = cursor
                .checked_add(n * 8)
                .filter(|&e| e <= body.len())
                .ok_or_else(|| bad("tensor data exceeds file"))?;
            let data = body[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            Ok(Tensor::from_vec(rows, cols, data))
        };
        let mut student = ParamStore::new();
        let mut teacher = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut qi = None;
        let mut qt = None;
        for e in &header.tensors {
            let t = read(e.rows, e.cols)?;
            if let Some(n) = e.name.strip_prefix(STUDENT) {
                student.register(n, t);
            } else if let Some(n) = e.name.strip_prefix(TEACHER) {
                teacher.register(n, t);
            } else if e.name.starts_with(ADAM_M) {
                m.push(t);
            } else if e.name.starts_with(ADAM_V) {
                v.push(t);
            } else if e.name == QUEUE_IMAGE {
                qi = Some(t);
            } else if e.name == QUEUE_TEXT {
                qt = Some(t);
            } else {
                return Err(Error::Checkpoint(format!("unknown tensor {}", e.name)));
            }
        }
        if cursor != body.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if !teacher.same_layout(&student) || m.len() != student.len() || v.len() != student.len() {
            return Err(bad("student, teacher and optimizer state disagree"));
        }
        let queue = |s: QueueState, t: Option<Tensor>| -> Result<FeatureQueue> {
            let t = t.ok_or_else(|| bad("missing queue tensor"))?;
            FeatureQueue::from_raw(s.capacity, s.dim, t.into_vec(), s.tags, s.len, s.cursor)
        };
        let queues = QueuePair {
            image: queue(header.image_queue, qi)?,
            text: queue(header.text_queue, qt)?,
        };
        let mut optimizer = header.optimizer;
        optimizer.m = m;
        optimizer.v = v;
        let mut rng = ChaCha8Rng::from_seed(header.rng.seed);
        rng.set_stream(header.rng.stream);
        rng.set_word_pos(
            header
                .rng
                .word_pos
                .parse()
                .map_err(|_| bad("invalid rng position"))?,
        );
        Ok(Self {
            step: header.step,
            config: header.config,
            model: header.model,
            vocab: header.vocab,
            student,
            teacher,
            optimizer,
            queues,
            rng,
        })
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn queue_tensor(q: &FeatureQueue) -> Tensor {
    Tensor::from_vec(q.capacity(), q.dim(), q.raw().0.to_vec())
}
