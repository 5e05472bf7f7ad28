//! Binary training checkpoints.
//!
//! Layout: the ASCII line `ariign-ckpt-v1\n`, a little-endian `u64` byte
//! length, a JSON manifest of that length, then every tensor as raw
//! little-endian `f64` values. Manifest offsets count values from the start
//! of the data block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusMeta;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore, Rng};
use crate::tensor::Matrix;
use crate::trainer::{Best, Model, Phase, TrainConfig, Trainer};

pub const CHECKPOINT_FORMAT: &str = "ariign-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Params,
    Best,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: TensorGroup,
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestInfo {
    pub wf1: f64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: TrainConfig,
    pub meta: CorpusMeta,
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub rng: RngState,
    pub adam_steps: Vec<u64>,
    pub best: Option<BestInfo>,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(mut w: impl Write, trainer: &Trainer) -> Result<()> {
    let store = &trainer.model.store;
    let mut tensors = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut push = |group: TensorGroup, name: &str, m: &Matrix| {
        tensors.push(TensorEntry {
            group,
            name: name.to_string(),
            shape: [m.rows(), m.cols()],
            offset: data.len(),
        });
        data.extend_from_slice(m.as_slice());
    };
    for (name, m) in store.iter() {
        push(TensorGroup::Params, name, m);
    }
    if let Some(best) = &trainer.best {
        for (name, m) in best.params.iter() {
            push(TensorGroup::Best, name, m);
        }
    }
    for (k, (name, _)) in store.iter().enumerate() {
        push(TensorGroup::AdamM, name, &trainer.adam.first[k]);
        push(TensorGroup::AdamV, name, &trainer.adam.second[k]);
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        config: trainer.model.config.clone(),
        meta: trainer.model.meta.clone(),
        phase: trainer.phase,
        epoch: trainer.epoch,
        step: trainer.step,
        rng: RngState::capture(&trainer.rng),
        adam_steps: trainer.adam.steps.clone(),
        best: trainer.best.as_ref().map(|b| BestInfo {
            wf1: b.wf1,
            epoch: b.epoch,
        }),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(CHECKPOINT_FORMAT.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).map_err(io)?;
    w.flush().map_err(io)
}

pub fn save_checkpoint(path: impl AsRef<Path>, trainer: &Trainer) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), trainer).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Reads the manifest and data block.
pub fn read_raw(mut r: impl Read) -> Result<(Manifest, Vec<f64>)> {
    let mut header = vec![0u8; CHECKPOINT_FORMAT.len() + 1];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if &header[..CHECKPOINT_FORMAT.len()] != CHECKPOINT_FORMAT.as_bytes() || header.last() != Some(&b'\n') {
        return Err(bad(format!("not an {CHECKPOINT_FORMAT} file")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated manifest length"))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unsupported format {:?}", manifest.format)));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io("<checkpoint>", e))?;
    if rest.len() % 8 != 0 {
        return Err(bad("data block is not a whole number of f64 values"));
    }
    let data = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((manifest, data))
}

fn tensor(entry: &TensorEntry, data: &[f64]) -> Result<Matrix> {
    let [rows, cols] = entry.shape;
    let end = entry.offset + rows * cols;
    let slice = data
        .get(entry.offset..end)
        .ok_or_else(|| bad(format!("tensor {} runs past the data block", entry.name)))?;
    Ok(Matrix::from_vec(rows, cols, slice.to_vec()))
}

fn group_store(manifest: &Manifest, data: &[f64], group: TensorGroup) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in manifest.tensors.iter().filter(|e| e.group == group) {
        if store.find(&e.name).is_some() {
            return Err(bad(format!("tensor {} appears twice", e.name)));
        }
        store.register(e.name.clone(), tensor(e, data)?);
    }
    Ok(store)
}

pub fn read_checkpoint(r: impl Read) -> Result<Trainer> {
    let (manifest, data) = read_raw(r)?;
    let mut scratch = Rng::seed_from_u64(manifest.config.seed);
    let mut model = Model::new(&manifest.config, &manifest.meta, &mut scratch)?;
    model
        .store
        .load_from(&group_store(&manifest, &data, TensorGroup::Params)?)?;

    let mut adam = Adam::new(&model.store, manifest.config.adam_config());
    if manifest.adam_steps.len() != model.store.len() {
        return Err(bad("optimizer step table does not match the parameters"));
    }
    adam.steps = manifest.adam_steps.clone();
    let mut first = model.store.clone();
    first.load_from(&group_store(&manifest, &data, TensorGroup::AdamM)?)?;
    let mut second = model.store.clone();
    second.load_from(&group_store(&manifest, &data, TensorGroup::AdamV)?)?;
    adam.first = first.iter().map(|(_, m)| m.clone()).collect();
    adam.second = second.iter().map(|(_, m)| m.clone()).collect();

    let best = match &manifest.best {
        Some(info) => {
            let mut params = model.store.clone();
            params.load_from(&group_store(&manifest, &data, TensorGroup::Best)?)?;
            Some(Best {
                wf1: info.wf1,
                epoch: info.epoch,
                params,
            })
        }
        None => None,
    };
    Ok(Trainer {
        model,
        adam,
        rng: manifest.rng.restore()?,
        phase: manifest.phase,
        epoch: manifest.epoch,
        step: manifest.step,
        best,
        log: Vec::new(),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
