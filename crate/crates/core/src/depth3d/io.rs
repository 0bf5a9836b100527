use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::AttentionConfig;
use crate::error::{Error, Result};
use crate::volume::archive_paths;

/// Header written next to the stacked maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionFile {
    /// `[D, H_r, W_r]`: one map per original slice.
    pub shape: [usize; 3],
    pub dtype: String,
    pub config: AttentionConfig,
    /// SHA-256 of the 3D bundle that produced the maps.
    #[serde(default)]
    pub bundle_hash: String,
}

/// `<volume>.attn.json` and `<volume>.attn.raw` for a volume archive path.
pub fn attention_paths(volume: &Path) -> (PathBuf, PathBuf) {
    let (json, _) = archive_paths(volume);
    let base = json.with_extension("");
    let mut j = base.clone().into_os_string();
    j.push(".attn.json");
    let mut r = base.into_os_string();
    r.push(".attn.raw");
    (PathBuf::from(j), PathBuf::from(r))
}

pub fn save_attention(volume: &Path, maps: &Array3<f32>, header: &AttentionFile) -> Result<()> {
    let (jp, rp) = attention_paths(volume);
    let s = maps.shape();
    let header = AttentionFile {
        shape: [s[0], s[1], s[2]],
        dtype: "f32le".into(),
        ..header.clone()
    };
    fs::write(&jp, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&jp, e))?;
    let mut raw = Vec::with_capacity(4 * maps.len());
    for v in maps.iter() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&rp, raw).map_err(|e| Error::io(&rp, e))
}

pub fn load_attention(volume: &Path) -> Result<(Array3<f32>, AttentionFile)> {
    let (jp, rp) = attention_paths(volume);
    let text = fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let header: AttentionFile = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: jp.clone(),
        reason: e.to_string(),
    })?;
    let raw = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    let n: usize = header.shape.iter().product();
    if raw.len() != 4 * n {
        return Err(Error::SizeMismatch {
            path: rp,
            expected: 4 * n,
            actual: raw.len(),
        });
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let maps = Array3::from_shape_vec(header.shape, data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((maps, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_follow_volume_base() {
        let (j, r) = attention_paths(Path::new("/d/p1_t1.json"));
        assert_eq!(j, PathBuf::from("/d/p1_t1.attn.json"));
        assert_eq!(r, PathBuf::from("/d/p1_t1.attn.raw"));
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("vol");
        let maps = Array3::from_shape_fn((3, 4, 5), |(d, h, w)| (d + h + w) as f32 / 10.0);
        let header = AttentionFile {
            shape: [0; 3],
            dtype: String::new(),
            config: AttentionConfig::default(),
            bundle_hash: "abc".into(),
        };
        save_attention(&vp, &maps, &header).unwrap();
        let (back, h) = load_attention(&vp).unwrap();
        assert_eq!(back, maps);
        assert_eq!(h.shape, [3, 4, 5]);
    }
}
