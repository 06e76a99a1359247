//! Binary field checkpoints: `CTXF`, u32 header length, JSON header,
//! u64 parameter count, then little-endian f32 parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Aabb, DensityBlob, FieldParams, HashGridConfig};
use crate::error::{Error, Result};
use crate::util::atomic_write;

const MAGIC: &[u8; 4] = b"CTXF";

#[derive(Serialize, Deserialize)]
struct Header {
    config: HashGridConfig,
    bbox: Aabb,
    blob: Option<DensityBlob>,
}

pub fn save_field(path: &Path, field: &FieldParams) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: field.config.clone(),
        bbox: field.bbox,
        blob: field.blob,
    })?;
    let mut bytes = Vec::with_capacity(16 + header.len() + field.params.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&(field.params.len() as u64).to_le_bytes());
    for &p in &field.params {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    atomic_write(path, &bytes)
}

pub fn load_field(path: &Path) -> Result<FieldParams> {
    let bytes = std::fs::read(path)?;
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing CTXF magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let hend = 8 + hlen;
    if bytes.len() < hend + 8 {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[8..hend])?;
    let count = u64::from_le_bytes(bytes[hend..hend + 8].try_into().unwrap()) as usize;
    let body = &bytes[hend + 8..];
    if body.len() != count * 4 {
        return Err(bad("parameter block length mismatch"));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FieldParams::from_params(header.config, header.bbox, header.blob, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldOutput;

    #[test]
    fn round_trip_preserves_f32_parameters() {
        let cfg = HashGridConfig::new(3, 10, 2, 4, 16, 8, FieldOutput::DensityRgb);
        let field = FieldParams::init(cfg, Aabb::cube(1.0), 7)
            .unwrap()
            .with_blob(DensityBlob { magnitude: 5.0, radius: 0.5 });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ctxf");
        save_field(&path, &field).unwrap();
        let back = load_field(&path).unwrap();
        assert_eq!(back.config, field.config);
        assert_eq!(back.blob, field.blob);
        for (a, b) in back.params.iter().zip(&field.params) {
            assert_eq!(*a, *b as f32 as f64);
        }
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_field(&path), Err(Error::Format { .. })));
    }
}
