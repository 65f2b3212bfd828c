//! Checkpoint files.
//!
//! Layout (little-endian): magic `b"MHCK"`, u32 version, u32 header length,
//! a JSON header holding the [`HeadConfig`] and motif names, u64 parameter
//! count, then the parameters as f64 in canonical tensor order (per layer:
//! weights row-major, then bias).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadConfig, HeadParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: HeadParams,
    pub motif_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: HeadConfig,
    motif_names: Vec<String>,
}

pub fn write_checkpoint(params: &HeadParams, motif_names: &[String]) -> Result<Vec<u8>> {
    if motif_names.len() != params.config().output_dim {
        return Err(Error::Checkpoint(format!(
            "{} motif names for a head with {} outputs",
            motif_names.len(),
            params.config().output_dim
        )));
    }
    let header = serde_json::to_vec(&Header {
        config: params.config().clone(),
        motif_names: motif_names.to_vec(),
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(24 + header.len() + params.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing MHCK magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rest = &bytes[12..];
    if rest.len() < hlen + 8 {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let count = u64::from_le_bytes(rest[hlen..hlen + 8].try_into().unwrap()) as usize;
    let payload = &rest[hlen + 8..];
    let mut params = HeadParams::zeros(&header.config)?;
    if count != params.len() || payload.len() != count * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, header says {count} and payload holds {} bytes",
            params.len(),
            payload.len()
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter"));
    }
    params.set_flat(&flat)?;
    if header.motif_names.len() != header.config.output_dim {
        return Err(bad("motif names do not match output_dim"));
    }
    Ok(Checkpoint {
        params,
        motif_names: header.motif_names,
    })
}

pub fn save_checkpoint(params: &HeadParams, motif_names: &[String], path: &Path) -> Result<()> {
    let bytes = write_checkpoint(params, motif_names)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::numkernel::GridShape;

    #[test]
    fn round_trip() {
        for cfg in [
            HeadConfig::mlp(6, &[4], 3),
            HeadConfig::conv(GridShape::new(2, 5, 5), 2, [3, 2], &[4], 3),
        ] {
            let p = init_params(&cfg, 1).unwrap();
            let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
            let bytes = write_checkpoint(&p, &names).unwrap();
            let back = read_checkpoint(&bytes).unwrap();
            assert_eq!(back.params, p);
            assert_eq!(back.motif_names, names);
            assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn name_count_must_match() {
        let p = init_params(&HeadConfig::mlp(2, &[], 2), 0).unwrap();
        assert!(write_checkpoint(&p, &["x".into()]).is_err());
    }
}
