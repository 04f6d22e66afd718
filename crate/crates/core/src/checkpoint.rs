//! Model files: a VASP parameter file plus a JSON sidecar describing the
//! architecture it belongs to.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vas_numnet::{load_params, save_params, ParamStore};

use crate::error::{Result, VasError};

#[derive(Serialize, Deserialize)]
struct Sidecar<C> {
    kind: String,
    config: C,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint<C: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    params: &ParamStore,
) -> Result<()> {
    save_params(params, path)?;
    let sidecar = Sidecar {
        kind: kind.to_string(),
        config,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("config serialises");
    let side = sidecar_path(path);
    fs::write(&side, json).map_err(VasError::io(side))
}

/// Reads a checkpoint written by [`save_checkpoint`], checking that it holds a
/// model of the expected `kind`.
pub fn load_checkpoint<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<(C, ParamStore)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(VasError::io(&side))?;
    let sidecar: Sidecar<C> = serde_json::from_str(&text)
        .map_err(|e| VasError::format(&side, 0, format!("bad model sidecar: {e}")))?;
    if sidecar.kind != kind {
        return Err(VasError::format(
            &side,
            0,
            format!("expected a {kind} model, found {}", sidecar.kind),
        ));
    }
    let params = load_params(path)?;
    Ok((sidecar.config, params))
}
