//! Checkpoint container: training configuration, aggregator and adapter
//! parameters, epoch counter and loss trace in one versioned binary file.
//!
//! Layout: magic `AAPC`, little-endian `u32` version, little-endian `u64`
//! header length, a JSON header (config, traces, section catalog), then one
//! embedding-bank blob per parameter tensor in catalog order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregatorKind;
use crate::config::TrainConfig;
use crate::diffcore::ParamStore;
use crate::embedio::{BankDtype, EmbeddingBank};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AAPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub aggregator_kind: AggregatorKind,
    pub aggregator: Option<ParamStore>,
    pub adapter: Option<ParamStore>,
    /// Completed training epochs; 0 marks an untrained (initialization)
    /// checkpoint.
    pub epoch: usize,
    pub loss_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct SectionMeta {
    store: String,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    aggregator_kind: AggregatorKind,
    epoch: usize,
    loss_trace: Vec<f64>,
    config: TrainConfig,
    sections: Vec<SectionMeta>,
}

fn section_meta(name: &str, store: &ParamStore) -> SectionMeta {
    SectionMeta {
        store: name.to_string(),
        params: store
            .iter()
            .map(|(n, t)| ParamMeta {
                name: n.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    }
}

fn append_store(buf: &mut Vec<u8>, store: &ParamStore) -> Result<()> {
    for (_, tensor) in store.iter() {
        let rows: Vec<Vec<f64>> = (0..tensor.rows())
            .map(|r| tensor.row_slice(r).to_vec())
            .collect();
        let bank = EmbeddingBank::from_rows(&rows, BankDtype::F64)?;
        bank.write_bank(buf)?;
    }
    Ok(())
}

/// Serializes the checkpoint to `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.config.validate()?;
    let mut sections = Vec::new();
    if let Some(store) = &ckpt.aggregator {
        sections.push(section_meta("aggregator", store));
    }
    if let Some(store) = &ckpt.adapter {
        sections.push(section_meta("adapter", store));
    }
    let header = Header {
        aggregator_kind: ckpt.aggregator_kind,
        epoch: ckpt.epoch,
        loss_trace: ckpt.loss_trace.clone(),
        config: ckpt.config.clone(),
        sections,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header serialization failed: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    if let Some(store) = &ckpt.aggregator {
        append_store(&mut buf, store)?;
    }
    if let Some(store) = &ckpt.adapter {
        append_store(&mut buf, store)?;
    }
    std::fs::write(path, buf).map_err(Error::Io)
}

fn read_store(bytes: &[u8], offset: &mut usize, meta: &SectionMeta) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for p in &meta.params {
        let (bank, used) = EmbeddingBank::parse_prefix(&bytes[*offset..])?;
        *offset += used;
        if bank.count() != p.rows || bank.dim() != p.cols {
            return Err(Error::Format(format!(
                "checkpoint tensor '{}' is {}x{}, catalog says {}x{}",
                p.name,
                bank.count(),
                bank.dim(),
                p.rows,
                p.cols
            )));
        }
        store.insert(&p.name, bank.all_rows_tensor()?)?;
    }
    Ok(store)
}

/// Parses a checkpoint file; any inconsistency fails the whole load.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(Error::Io)?;
    if bytes.len() < 16 {
        return Err(Error::Format("checkpoint file is truncated".into()));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .ok_or_else(|| Error::Format("checkpoint header length overflows".into()))?;
    if bytes.len() < body_start {
        return Err(Error::Format("checkpoint header is truncated".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| Error::Format(format!("checkpoint header parse failed: {e}")))?;
    header.config.validate()?;
    let mut offset = body_start;
    let mut aggregator = None;
    let mut adapter = None;
    for section in &header.sections {
        let store = read_store(&bytes, &mut offset, section)?;
        match section.store.as_str() {
            "aggregator" => aggregator = Some(store),
            "adapter" => adapter = Some(store),
            other => {
                return Err(Error::Format(format!(
                    "unknown checkpoint section '{other}'"
                )))
            }
        }
    }
    if offset != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - offset
        )));
    }
    Ok(Checkpoint {
        config: header.config,
        aggregator_kind: header.aggregator_kind,
        aggregator,
        adapter,
        epoch: header.epoch,
        loss_trace: header.loss_trace,
    })
}
