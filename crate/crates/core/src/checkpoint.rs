//! Versioned JSON checkpoints of an initialization.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metalearn::CurvePoint;
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::ulr::UlrState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// SHA-256 of the resolved configuration that produced this file.
    pub config_hash: String,
    /// How the parameters were obtained (`random`, `meta`, ...).
    pub init: String,
    pub seed: u64,
    /// Source task chosen for transfer, if any.
    #[serde(default)]
    pub source: Option<String>,
    pub model: ModelConfig,
    pub ulr: UlrState,
    pub params: ParamSet,
    #[serde(default)]
    pub curve: Vec<CurvePoint>,
}

/// Hex SHA-256 of the JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Checkpoint {
    /// Writes to a sibling temporary file, then renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = path
            .file_name()
            .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            serde_json::to_writer(&mut f, self)?;
            f.flush()?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "{}: checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                path.display(),
                ck.format_version
            )));
        }
        ck.model.validate()?;
        if ck.ulr.dim() != ck.model.d_model {
            return Err(Error::InvalidArgument(format!(
                "{}: ULR width {} does not match d_model {}",
                path.display(),
                ck.ulr.dim(),
                ck.model.d_model
            )));
        }
        Ok(ck)
    }
}
