//! Checkpoints: parameters in the binary tensor container plus optimizer
//! state as JSON.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ParamStore, TensorId};
use crate::qtensor::{read_tensor, write_tensor};
use crate::train::optim::OptState;

const MAGIC: &[u8; 4] = b"TTCK";

pub fn write_params<W: Write>(mut out: W, params: &ParamStore) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (id, tensor) in params {
        out.write_all(&id.0.to_le_bytes())?;
        write_tensor(&mut out, tensor)?;
    }
    Ok(())
}

pub fn read_params<R: Read>(mut input: R) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config("not a checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word);
    let mut params = ParamStore::new();
    for _ in 0..count {
        input.read_exact(&mut word)?;
        let id = TensorId(u32::from_le_bytes(word));
        params.insert(id, read_tensor(&mut input)?);
    }
    Ok(params)
}

#[derive(Serialize, Deserialize)]
pub struct OptimizerCheckpoint {
    pub schema_version: u32,
    pub step: u64,
    pub zero_delta_total: u64,
    pub state: OptState,
}

pub fn save_checkpoint(dir: &Path, state: &crate::train::TrainState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write_params(&mut buf, &state.params)?;
    std::fs::write(dir.join("checkpoint.bin"), buf)?;
    let opt = OptimizerCheckpoint {
        schema_version: 1,
        step: state.step,
        zero_delta_total: state.zero_delta_total,
        state: state.opt_state.clone(),
    };
    std::fs::write(
        dir.join("optimizer.json"),
        serde_json::to_string_pretty(&opt)?,
    )?;
    Ok(())
}

pub fn load_params(dir: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(dir.join("checkpoint.bin"))?;
    read_params(&bytes[..])
}
