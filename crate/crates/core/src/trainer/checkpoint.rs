//! Binary checkpoint format.
//!
//! ```text
//! "MMEACKPT"  u32 version  u64 manifest_len  manifest (JSON)
//! repeated:   u32 name_len  name  u64 rows  u64 cols  rows*cols f64
//! ```
//!
//! All integers and floats are little-endian. Array names are prefixed with
//! `online/`, `target/`, `mine/`, `adam.m/` or `adam.v/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{HistoryRecord, Stage, TrainConfig, TrainState};
use crate::encoders::{InitSpec, ModelShape, ParameterStore, StoreRole};
use crate::error::{Error, Result};
use crate::losses::MineEma;
use crate::optim::Adam;
use crate::trainer::pseudo::PseudoLabelStore;

const MAGIC: &[u8; 8] = b"MMEACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    config_hash: String,
    epoch: usize,
    stage: Stage,
    adam_step: u64,
    pseudo: PseudoLabelStore,
    history: Vec<serde_json::Value>,
    mine_ema: Option<[MineEma; 4]>,
    shape: ModelShape,
    inits: BTreeMap<String, InitSpec>,
}

fn put_array(buf: &mut Vec<u8>, name: &str, a: &Array2<f64>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
    for v in a.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_store(buf: &mut Vec<u8>, prefix: &str, s: &ParameterStore, inits: &mut BTreeMap<String, InitSpec>) {
    for (name, a) in s.iter() {
        let full = format!("{prefix}/{name}");
        put_array(buf, &full, a);
        inits.insert(full, s.init_spec(name));
    }
}

/// Serialize `state` to `path`.
pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    let mut inits = BTreeMap::new();
    put_store(&mut arrays, "online", &state.online, &mut inits);
    put_store(&mut arrays, "target", &state.target, &mut inits);
    put_store(&mut arrays, "mine", &state.mine, &mut inits);
    for (name, a) in &state.adam.m {
        put_array(&mut arrays, &format!("adam.m/{name}"), a);
    }
    for (name, a) in &state.adam.v {
        put_array(&mut arrays, &format!("adam.v/{name}"), a);
    }
    let manifest = Manifest {
        config: config.clone(),
        config_hash: config.hash(),
        epoch: state.epoch,
        stage: state.stage,
        adam_step: state.adam.step,
        pseudo: state.pseudo.clone(),
        history: state.history.iter().map(HistoryRecord::to_json).collect(),
        mine_ema: state.mine_ema,
        shape: state.shape,
        inits,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(arrays.len() + json.len() + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&arrays);
    fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows".into()))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// Read a checkpoint, returning the state and the config it was saved with.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let mut data = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut data)).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let n = r.len()?;
    let manifest: Manifest = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.config_hash != manifest.config.hash() {
        return Err(Error::Incompatible("manifest hash does not match its config".into()));
    }
    let mut online = ParameterStore::new(StoreRole::Online);
    let mut target = ParameterStore::new(StoreRole::Target);
    let mut mine = ParameterStore::new(StoreRole::Online);
    let mut adam = Adam::new(manifest.config.adam());
    adam.step = manifest.adam_step;
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let (rows, cols) = (r.len()?, r.len()?);
        let count = rows.checked_mul(cols).ok_or_else(|| Error::Format("array too large".into()))?;
        let bytes = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let a = Array2::from_shape_vec((rows, cols), values).expect("length matches shape");
        let (prefix, key) = name.split_once('/').ok_or_else(|| Error::Format(format!("bad array name {name}")))?;
        let init = || manifest.inits.get(&name).copied().ok_or_else(|| Error::Format(format!("no init for {name}")));
        match prefix {
            "online" => online.insert(key, a, init()?),
            "target" => target.insert(key, a, init()?),
            "mine" => mine.insert(key, a, init()?),
            "adam.m" => {
                adam.m.insert(key.to_string(), a);
            }
            "adam.v" => {
                adam.v.insert(key.to_string(), a);
            }
            _ => return Err(Error::Format(format!("bad array name {name}"))),
        }
    }
    let history = manifest.history.iter().map(HistoryRecord::from_json).collect::<Result<Vec<_>>>()?;
    let state = TrainState {
        epoch: manifest.epoch,
        stage: manifest.stage,
        online,
        target,
        mine,
        adam,
        pseudo: manifest.pseudo,
        history,
        mine_ema: manifest.mine_ema,
        shape: manifest.shape,
    };
    Ok((state, manifest.config))
}
