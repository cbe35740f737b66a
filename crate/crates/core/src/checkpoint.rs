//! Checkpoint type and its packed little-endian file format (`CGZK`).
//!
//! Layout: magic, u32 version, u64-length-prefixed TOML snapshot (stage,
//! epoch, loss history, run config), then three tensor blocks: model
//! parameters, optimizer state, RNG state. A block is a u32 count followed
//! by tensors of the form u16 name length, name, u8 dtype tag, u8 rank,
//! u32 dims, payload.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::with_path;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{DType, Tensor};
use crate::train::AdamState;

const MAGIC: &[u8; 4] = b"CGZK";
pub const CHECKPOINT_VERSION: u32 = 1;
const U64_TAG: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Finetuned,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::Finetuned => "finetuned",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Position of the training randomness. Every random draw is derived from
/// `(seed, epoch, ...)`, so this pair is the whole generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stage: Stage,
    /// Epochs completed in this checkpoint's stage.
    pub epoch: u64,
    /// Mean loss of each completed epoch of this stage.
    pub loss_history: Vec<f64>,
    pub params: ModelParams<f32>,
    pub optimizer: AdamState,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    stage: Stage,
    epoch: u64,
    loss_history: Vec<f64>,
    config: RunConfig,
}

enum Payload {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U64(Vec<usize>, Vec<u64>),
}

impl Payload {
    fn shape(&self) -> &[usize] {
        match self {
            Payload::F32(t) => t.shape(),
            Payload::F64(t) => t.shape(),
            Payload::U64(s, _) => s,
        }
    }
}

impl Checkpoint {
    pub fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage == expected {
            Ok(())
        } else {
            Err(Error::Stage {
                expected: expected.name(),
                found: self.stage.name(),
            })
        }
    }

    pub fn encode<W: Write>(&self, w: &mut W) -> Result<()> {
        let snapshot = Snapshot {
            stage: self.stage,
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&snapshot)
            .map_err(|e| Error::InvalidArgument(format!("checkpoint snapshot: {e}")))?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(text.as_bytes())?;

        let params: Vec<(String, Payload)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), Payload::F32(t.clone())))
            .collect();
        write_block(w, &params)?;

        let opt = &self.optimizer;
        let mut block = vec![
            (
                "adam.hparams".to_string(),
                Payload::F64(Tensor::new([4], vec![opt.lr, opt.beta1, opt.beta2, opt.eps])?),
            ),
            ("adam.step".to_string(), Payload::U64(vec![1], vec![opt.step])),
        ];
        for (prefix, moments) in [("m.", &opt.m), ("v.", &opt.v)] {
            for (n, t) in moments {
                block.push((format!("{prefix}{n}"), Payload::F32(t.clone())));
            }
        }
        write_block(w, &block)?;

        let rng = vec![(
            "rng.state".to_string(),
            Payload::U64(vec![2], vec![self.rng.seed, self.rng.epoch]),
        )];
        write_block(w, &rng)
    }

    pub fn decode<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Corrupt(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = read_u64(r)?;
        let mut text = Vec::new();
        r.by_ref().take(len).read_to_end(&mut text)?;
        if text.len() as u64 != len {
            return Err(truncated());
        }
        let text = String::from_utf8(text).map_err(|_| Error::Corrupt("snapshot is not UTF-8".into()))?;
        let snap: Snapshot =
            toml::from_str(&text).map_err(|e| Error::Corrupt(format!("snapshot: {}", e.message())))?;

        let mut params = BTreeMap::new();
        for (name, payload) in read_block(r)? {
            match payload {
                Payload::F32(t) => {
                    params.insert(name, t);
                }
                _ => return Err(Error::Corrupt(format!("parameter {name} is not f32"))),
            }
        }
        let params = ModelParams::from_tensors(snap.config.encoder_config(), params)
            .map_err(|e| Error::Corrupt(format!("parameters: {e}")))?;

        let mut opt = AdamState::new(0.0, 0.0, 0.0, 0.0);
        let mut seen_hparams = false;
        let mut seen_step = false;
        for (name, payload) in read_block(r)? {
            match (name.as_str(), payload) {
                ("adam.hparams", Payload::F64(t)) if t.shape() == [4] => {
                    let d = t.data();
                    (opt.lr, opt.beta1, opt.beta2, opt.eps) = (d[0], d[1], d[2], d[3]);
                    seen_hparams = true;
                }
                ("adam.step", Payload::U64(s, d)) if s == [1] => {
                    opt.step = d[0];
                    seen_step = true;
                }
                (n, Payload::F32(t)) if n.starts_with("m.") || n.starts_with("v.") => {
                    let (slot, key) = if let Some(k) = n.strip_prefix("m.") {
                        (&mut opt.m, k)
                    } else {
                        (&mut opt.v, &n[2..])
                    };
                    match params.get(key) {
                        Some(p) if p.shape() == t.shape() => {
                            slot.insert(key.to_string(), t);
                        }
                        _ => return Err(Error::Corrupt(format!("optimizer entry {n} matches no parameter"))),
                    }
                }
                (n, p) => {
                    return Err(Error::Corrupt(format!(
                        "unexpected optimizer entry {n} with shape {:?}",
                        p.shape()
                    )))
                }
            }
        }
        if !(seen_hparams && seen_step) {
            return Err(Error::Corrupt("optimizer block is incomplete".into()));
        }

        let rng = match read_block(r)?.as_slice() {
            [(name, Payload::U64(s, d))] if name == "rng.state" && s == &[2] => RngState {
                seed: d[0],
                epoch: d[1],
            },
            _ => return Err(Error::Corrupt("malformed RNG block".into())),
        };

        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Corrupt("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            config: snap.config,
            stage: snap.stage,
            epoch: snap.epoch,
            loss_history: snap.loss_history,
            params,
            optimizer: opt,
            rng,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.encode(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::decode(&mut bytes)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| with_path(e, path))?);
    ckpt.encode(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::decode(&mut BufReader::new(File::open(path).map_err(|e| with_path(e, path))?))
}

fn write_block<W: Write>(w: &mut W, tensors: &[(String, Payload)]) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, payload) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let tag = match payload {
            Payload::F32(_) => DType::F32.tag(),
            Payload::F64(_) => DType::F64.tag(),
            Payload::U64(..) => U64_TAG,
        };
        let shape = payload.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor {name} has too many dimensions")))?;
        w.write_all(&[tag, rank])?;
        for &d in shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::InvalidArgument(format!("tensor {name} extent {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut bytes = Vec::new();
        match payload {
            Payload::F32(t) => t.data().iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(t) => t.data().iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(_, d) => d.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_block<R: Read>(r: &mut R) -> Result<Vec<(String, Payload)>> {
    let count = read_u32(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(r, &mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let mut head = [0u8; 2];
        read_exact(r, &mut head)?;
        let [tag, rank] = head;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = if tag == DType::F32.tag() { 4 } else { 8 };
        if tag > U64_TAG {
            return Err(Error::Corrupt(format!("tensor {name}: unknown dtype tag {tag}")));
        }
        let mut bytes = Vec::new();
        let want = (numel * width) as u64;
        r.by_ref().take(want).read_to_end(&mut bytes)?;
        if bytes.len() as u64 != want {
            return Err(truncated());
        }
        let corrupt = |e: Error| Error::Corrupt(format!("tensor {name}: {e}"));
        let payload = if tag == DType::F32.tag() {
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Payload::F32(Tensor::new(shape, data).map_err(corrupt)?)
        } else if tag == DType::F64.tag() {
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Payload::F64(Tensor::new(shape, data).map_err(corrupt)?)
        } else {
            let data = bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
            Payload::U64(shape, data)
        };
        out.push((name, payload));
    }
    Ok(out)
}

fn truncated() -> Error {
    Error::Corrupt("checkpoint is truncated".into())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => truncated(),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
