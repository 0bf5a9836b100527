//! The volume archive: `<name>.json` header plus `<name>.raw` payload
//! (row-major, width fastest, little-endian).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{MaskVolume, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RawDtype {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "u8")]
    U8,
}

impl RawDtype {
    fn width(self) -> usize {
        match self {
            RawDtype::F32Le => 4,
            RawDtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: RawDtype,
    #[serde(default)]
    pub sequence_tag: String,
    #[serde(default)]
    pub patient_id: String,
    #[serde(default)]
    pub location_tag: String,
}

/// Splits any of `x`, `x.json`, `x.raw` into the two archive paths.
pub(crate) fn archive_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut raw = base.into_os_string();
    raw.push(".raw");
    (PathBuf::from(json), PathBuf::from(raw))
}

fn read_header(path: &Path) -> Result<ArchiveHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: ArchiveHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    check_header(&header, path)?;
    Ok(header)
}

fn check_header(header: &ArchiveHeader, path: &Path) -> Result<()> {
    if header.shape.iter().any(|&d| d == 0) {
        return Err(Error::Header {
            path: path.to_path_buf(),
            reason: format!("zero-sized dimension in shape {:?}", header.shape),
        });
    }
    if header.spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Header {
            path: path.to_path_buf(),
            reason: format!("non-positive spacing {:?}", header.spacing_mm),
        });
    }
    Ok(())
}

fn read_payload(raw_path: &Path, header: &ArchiveHeader) -> Result<Vec<u8>> {
    let bytes = fs::read(raw_path).map_err(|e| Error::io(raw_path, e))?;
    let expected = header.shape.iter().product::<usize>() * header.dtype.width();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            path: raw_path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

/// Decodes an archive already held in memory (used by the upload endpoint).
pub fn volume_from_parts(header: &ArchiveHeader, raw: &[u8], origin: &Path) -> Result<Volume> {
    if header.dtype != RawDtype::F32Le {
        return Err(Error::Header {
            path: origin.to_path_buf(),
            reason: "volume payload must be f32le".into(),
        });
    }
    let expected = header.shape.iter().product::<usize>() * 4;
    if raw.len() != expected {
        return Err(Error::SizeMismatch {
            path: origin.to_path_buf(),
            expected,
            actual: raw.len(),
        });
    }
    let mut values = Vec::with_capacity(expected / 4);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                path: origin.to_path_buf(),
                index: i,
            });
        }
        values.push(v);
    }
    let [d, h, w] = header.shape;
    let data = Array3::from_shape_vec((d, h, w), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(Volume {
        data,
        spacing: header.spacing_mm,
        sequence_tag: header.sequence_tag.clone(),
        patient_id: header.patient_id.clone(),
        location_tag: header.location_tag.clone(),
    })
}

/// Single-body form of an archive for upload: a little-endian `u32` header
/// length, the header JSON, then the raw payload.
pub fn encode_upload(v: &Volume) -> Vec<u8> {
    let header = volume_header(v);
    let text = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(4 + text.len() + v.data.len() * 4);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(&text);
    for x in v.data.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_upload(body: &[u8]) -> Result<Volume> {
    let origin = Path::new("<upload>");
    let bad = |reason: String| Error::Header {
        path: origin.to_path_buf(),
        reason,
    };
    if body.len() < 4 {
        return Err(bad(format!("body of {} bytes has no header length", body.len())));
    }
    let n = u32::from_le_bytes([body[0], body[1], body[2], body[3]]) as usize;
    let rest = &body[4..];
    if n > rest.len() {
        return Err(bad(format!("header length {n} exceeds the {} remaining bytes", rest.len())));
    }
    let header: ArchiveHeader = serde_json::from_slice(&rest[..n]).map_err(|e| bad(e.to_string()))?;
    check_header(&header, origin)?;
    volume_from_parts(&header, &rest[n..], origin)
}

fn volume_header(v: &Volume) -> ArchiveHeader {
    ArchiveHeader {
        shape: v.shape(),
        spacing_mm: v.spacing,
        dtype: RawDtype::F32Le,
        sequence_tag: v.sequence_tag.clone(),
        patient_id: v.patient_id.clone(),
        location_tag: v.location_tag.clone(),
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (json, raw) = archive_paths(path.as_ref());
    let header = read_header(&json)?;
    let bytes = read_payload(&raw, &header)?;
    volume_from_parts(&header, &bytes, &raw)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (json, raw) = archive_paths(path.as_ref());
    let header = volume_header(v);
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in v.data.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_archive(&json, &raw, &header, &bytes)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<(MaskVolume, ArchiveHeader)> {
    let (json, raw) = archive_paths(path.as_ref());
    let header = read_header(&json)?;
    if header.dtype != RawDtype::U8 {
        return Err(Error::Header {
            path: json,
            reason: "mask payload must be u8".into(),
        });
    }
    let bytes = read_payload(&raw, &header)?;
    let [d, h, w] = header.shape;
    let data =
        Array3::from_shape_vec((d, h, w), bytes).map_err(|e| Error::Shape(e.to_string()))?;
    let link = json
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((MaskVolume::new(data, link)?, header))
}

/// Masks are written as u8 payloads; `reference` supplies spacing and tags.
pub fn save_mask(m: &MaskVolume, reference: &Volume, path: impl AsRef<Path>) -> Result<()> {
    m.check_pair(reference)?;
    let (json, raw) = archive_paths(path.as_ref());
    let header = ArchiveHeader {
        shape: m.shape(),
        spacing_mm: reference.spacing,
        dtype: RawDtype::U8,
        sequence_tag: reference.sequence_tag.clone(),
        patient_id: reference.patient_id.clone(),
        location_tag: reference.location_tag.clone(),
    };
    let bytes: Vec<u8> = m.data.iter().copied().collect();
    write_archive(&json, &raw, &header, &bytes)
}

fn write_archive(json: &Path, raw: &Path, header: &ArchiveHeader, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = json.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(header)?;
    fs::write(json, text).map_err(|e| Error::io(json, e))?;
    fs::write(raw, bytes).map_err(|e| Error::io(raw, e))?;
    Ok(())
}
