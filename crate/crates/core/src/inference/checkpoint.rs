//! Versioned on-disk snapshots: a magic header line followed by JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &str = "MGPDTSM1";

pub fn to_string<T: Serialize>(payload: &T) -> Result<String> {
    let body = serde_json::to_string(payload).map_err(|e| Error::Data(format!("checkpoint encoding: {e}")))?;
    Ok(format!("{MAGIC}\n{body}\n"))
}

pub fn from_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let (head, body) = text.split_once('\n').unwrap_or((text, ""));
    if head.trim_end() != MAGIC {
        return Err(Error::Data(format!("not a checkpoint (header {head:?}, expected {MAGIC})")));
    }
    serde_json::from_str(body).map_err(|e| Error::Data(format!("corrupt checkpoint: {e}")))
}

/// Writes atomically through a temporary sibling file.
pub fn write<T: Serialize>(path: &Path, payload: &T) -> Result<()> {
    let text = to_string(payload)?;
    let tmp = path.with_extension("tmp");
    let io = |e: std::io::Error| Error::Data(format!("writing {}: {e}", path.display()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    from_str(&text)
}
