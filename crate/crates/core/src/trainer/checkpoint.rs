//! Binary containers for checkpoints and collected datasets.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic                                     |
//! | 4     | format version (`u32`)                    |
//! | 8     | header length `h` (`u64`)                 |
//! | h     | UTF-8 JSON header                         |
//! | 8     | payload value count `p` (`u64`)           |
//! | 8·p   | payload, `f64` little-endian              |
//! | 8     | FNV-1a 64 checksum of the payload bytes   |
//!
//! The header describes how the payload splits into tensors or records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Model, RoundRecord, TrainConfig};
use crate::decoder::DecoderParams;
use crate::error::{Error, Result};
use crate::feelsim::FeelConfig;
use crate::numkernel::Tensor;
use crate::uracode::{CodebookMode, UraCodebook};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AIRSUMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DATASET_MAGIC: &[u8; 8] = b"AIRSUMDS";
pub const DATASET_VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn write_container<W: Write, H: Serialize>(
    out: &mut W,
    magic: &[u8; 8],
    version: u32,
    header: &H,
    payload: &[f64],
) -> Result<()> {
    let header = serde_json::to_vec(header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    out.write_all(magic)?;
    out.write_all(&version.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(payload.len() as u64).to_le_bytes())?;
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    out.write_all(&fnv1a(&bytes).to_le_bytes())?;
    out.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Upper bound on header and payload sizes, to reject garbage lengths
/// before allocating.
const MAX_SECTION: u64 = 1 << 34;

fn read_container<R: Read, H: DeserializeOwned>(
    input: &mut R,
    magic: &[u8; 8],
    version: u32,
) -> Result<(H, Vec<f64>)> {
    let mut m = [0u8; 8];
    read_exact(input, &mut m, "magic")?;
    if &m != magic {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let mut v = [0u8; 4];
    read_exact(input, &mut v, "version")?;
    let found = u32::from_le_bytes(v);
    if found != version {
        return Err(Error::Version {
            found,
            expected: version,
        });
    }
    let hlen = read_u64(input, "header length")?;
    if hlen > MAX_SECTION {
        return Err(Error::Corrupt("header length out of range".into()));
    }
    let mut header = vec![0u8; hlen as usize];
    read_exact(input, &mut header, "header")?;
    let header: H = serde_json::from_slice(&header).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let count = read_u64(input, "payload length")?;
    if count > MAX_SECTION / 8 {
        return Err(Error::Corrupt("payload length out of range".into()));
    }
    let mut bytes = vec![0u8; count as usize * 8];
    read_exact(input, &mut bytes, "payload")?;
    let checksum = read_u64(input, "checksum")?;
    if checksum != fnv1a(&bytes) {
        return Err(Error::Corrupt("payload checksum mismatch".into()));
    }
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(Error::Corrupt("trailing bytes after checksum".into()));
    }
    let payload = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, payload))
}

/// Trained communication layer with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DecoderParams,
    pub codebook: UraCodebook,
    pub config: TrainConfig,
    pub epoch: usize,
    pub val_loss: f64,
    pub version: u32,
}

impl Checkpoint {
    pub fn new(model: &Model, config: &TrainConfig, epoch: usize, val_loss: f64) -> Self {
        Self {
            params: model.params.clone(),
            codebook: model.codebook.clone(),
            config: config.clone(),
            epoch,
            val_loss,
            version: CHECKPOINT_VERSION,
        }
    }

    pub fn model(&self) -> Model {
        Model {
            params: self.params.clone(),
            codebook: self.codebook.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    epoch: usize,
    /// Bit pattern of the validation loss, so it survives exactly.
    val_loss_bits: u64,
    layers: usize,
    codebook_mode: CodebookMode,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(out: &mut W, ck: &Checkpoint) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = ck.params.named_tensors();
    tensors.push(("codebook.d".into(), &ck.codebook.d));
    tensors.push(("codebook.w".into(), &ck.codebook.w));
    let header = CheckpointHeader {
        epoch: ck.epoch,
        val_loss_bits: ck.val_loss.to_bits(),
        layers: ck.params.len(),
        codebook_mode: ck.codebook.mode,
        config: ck.config.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let payload: Vec<f64> = tensors.iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
    write_container(out, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload)
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Checkpoint> {
    let (h, payload): (CheckpointHeader, Vec<f64>) = read_container(input, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(h.tensors.len());
    for e in &h.tensors {
        let len: usize = e.shape.iter().product();
        let data = payload
            .get(offset..offset + len)
            .ok_or_else(|| Error::Corrupt(format!("payload too short for {}", e.name)))?;
        tensors.push(Tensor::new(e.shape.clone(), data.to_vec()).map_err(|err| Error::Corrupt(err.to_string()))?);
        offset += len;
    }
    if offset != payload.len() {
        return Err(Error::Corrupt("payload longer than the tensor table".into()));
    }
    let w = tensors.pop().ok_or_else(|| Error::Corrupt("missing codebook".into()))?;
    let d = tensors.pop().ok_or_else(|| Error::Corrupt("missing codebook".into()))?;
    let params = DecoderParams::from_tensors(h.layers, tensors).map_err(|e| Error::Corrupt(e.to_string()))?;
    if d.shape().len() != 2 || w.shape() != [d.cols(), d.cols()] {
        return Err(Error::Corrupt("codebook shapes are inconsistent".into()));
    }
    Ok(Checkpoint {
        params,
        codebook: UraCodebook {
            d,
            w,
            mode: h.codebook_mode,
        },
        config: h.config,
        epoch: h.epoch,
        val_loss: f64::from_bits(h.val_loss_bits),
        version: CHECKPOINT_VERSION,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut f, ck)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = BufReader::new(File::open(path)?);
    read_checkpoint(&mut f)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordEntry {
    round_index: usize,
    ka: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    record_count: usize,
    /// Update length `W`.
    w: usize,
    records: Vec<RecordEntry>,
    config: FeelConfig,
}

/// Payload per record: the BS update followed by the `ka` device updates.
pub fn write_dataset<W: Write>(out: &mut W, records: &[RoundRecord], cfg: &FeelConfig) -> Result<()> {
    let w = cfg.task.param_count();
    let mut payload = Vec::new();
    for r in records {
        if r.bs_update.len() != w || r.device_updates.iter().any(|u| u.len() != w) {
            return Err(Error::Shape(format!("record {} has updates of the wrong length", r.round_index)));
        }
        payload.extend_from_slice(&r.bs_update);
        for u in &r.device_updates {
            payload.extend_from_slice(u);
        }
    }
    let header = DatasetHeader {
        record_count: records.len(),
        w,
        records: records
            .iter()
            .map(|r| RecordEntry {
                round_index: r.round_index,
                ka: r.ka,
            })
            .collect(),
        config: cfg.clone(),
    };
    write_container(out, DATASET_MAGIC, DATASET_VERSION, &header, &payload)
}

pub fn read_dataset<R: Read>(input: &mut R) -> Result<(Vec<RoundRecord>, FeelConfig)> {
    let (h, payload): (DatasetHeader, Vec<f64>) = read_container(input, DATASET_MAGIC, DATASET_VERSION)?;
    if h.record_count != h.records.len() {
        return Err(Error::Corrupt("record count does not match the record table".into()));
    }
    let mut chunks = payload.chunks_exact(h.w.max(1));
    let mut records = Vec::with_capacity(h.record_count);
    let mut next = |what: &str| {
        chunks
            .next()
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Corrupt(format!("payload too short for {what}")))
    };
    for e in &h.records {
        let bs_update = next("BS update")?;
        let device_updates = (0..e.ka).map(|_| next("device update")).collect::<Result<_>>()?;
        records.push(RoundRecord {
            round_index: e.round_index,
            bs_update,
            device_updates,
            ka: e.ka,
        });
    }
    if chunks.next().is_some() || !chunks.remainder().is_empty() {
        return Err(Error::Corrupt("payload longer than the record table".into()));
    }
    Ok((records, h.config))
}

pub fn save_dataset(path: &Path, records: &[RoundRecord], cfg: &FeelConfig) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_dataset(&mut f, records, cfg)
}

pub fn load_dataset(path: &Path) -> Result<(Vec<RoundRecord>, FeelConfig)> {
    let mut f = BufReader::new(File::open(path)?);
    read_dataset(&mut f)
}
