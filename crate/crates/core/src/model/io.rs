use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{init_params, ModelConfig, ModelError, ModelParams, Result};
use crate::autodiff::{read_checkpoint, write_checkpoint, AutodiffError};

pub fn write_params<W: Write>(w: W, params: &ModelParams) -> Result<()> {
    let entries: Vec<(String, &_)> = params.named();
    write_checkpoint(w, &entries)?;
    Ok(())
}

/// Reads a checkpoint into a parameter set shaped by `config`. Every expected
/// entry must be present with a matching shape; extra entries are rejected.
pub fn read_params<R: Read>(r: R, config: &ModelConfig) -> Result<ModelParams> {
    let mut params = init_params(config, 0)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut entries = read_checkpoint(r)?;
    if entries.len() != names.len() {
        return Err(checkpoint_error(format!(
            "{} entries, model expects {}",
            entries.len(),
            names.len()
        )));
    }
    for (name, slot) in names.iter().zip(params.leaves_mut()) {
        let pos = entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| checkpoint_error(format!("missing entry `{name}`")))?;
        let (_, tensor) = entries.swap_remove(pos);
        if tensor.shape() != slot.shape() {
            return Err(checkpoint_error(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    Ok(params)
}

fn checkpoint_error(msg: String) -> ModelError {
    ModelError::Autodiff(AutodiffError::Checkpoint(msg))
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(AutodiffError::Io)?);
    write_params(&mut w, params)?;
    w.flush().map_err(AutodiffError::Io)?;
    Ok(())
}

pub fn load_params(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    let r = BufReader::new(File::open(path).map_err(AutodiffError::Io)?);
    read_params(r, config)
}
