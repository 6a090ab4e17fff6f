//! Header + raw sidecar format and parameter checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DisplacementField, Dims, LabelMask, Spacing, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// Contents of `<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dims: Dims,
    pub spacing: Spacing,
    pub channels: usize,
    pub dtype: Dtype,
}

impl Header {
    pub fn raw_len(&self) -> u64 {
        (self.dims.iter().product::<usize>() * self.channels * self.dtype.size()) as u64
    }
}

/// `<base>.json` and `<base>.raw` for a path given with or without either extension.
pub fn sidecar_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let path = path.as_ref();
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = base.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("raw"))
}

fn read_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // dtype is checked by hand so an unknown one gets a clear message
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Header {
        path: path.to_path_buf(),
        source,
    })?;
    if let Some(d) = value.get("dtype").and_then(|d| d.as_str()) {
        if d != "f32" && d != "u8" {
            return Err(Error::Format(format!("{}: unknown dtype {d:?}", path.display())));
        }
    }
    serde_json::from_value(value).map_err(|source| Error::Header {
        path: path.to_path_buf(),
        source,
    })
}

fn read_pair(path: &Path, channels: usize, dtype: Dtype) -> Result<(Header, Vec<u8>)> {
    let (json, raw) = sidecar_paths(path);
    let header = read_header(&json)?;
    if header.dtype != dtype {
        return Err(Error::Format(format!(
            "{}: expected dtype {dtype:?}, header says {:?}",
            json.display(),
            header.dtype
        )));
    }
    if header.channels != channels {
        return Err(Error::Format(format!(
            "{}: expected {channels} channel(s), header says {}",
            json.display(),
            header.channels
        )));
    }
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() as u64 != header.raw_len() {
        return Err(Error::RawSize {
            path: raw,
            expected: header.raw_len(),
            actual: bytes.len() as u64,
        });
    }
    Ok((header, bytes))
}

fn write_pair(path: &Path, header: &Header, bytes: &[u8]) -> Result<()> {
    let (json, raw) = sidecar_paths(path);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(header).expect("header serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_values(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (h, bytes) = read_pair(path.as_ref(), 1, Dtype::F32)?;
    Volume::new(h.dims, h.spacing, f32_values(&bytes))
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        dims: v.dims(),
        spacing: v.spacing(),
        channels: 1,
        dtype: Dtype::F32,
    };
    write_pair(path.as_ref(), &header, &f32_bytes(v.data()))
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let (h, bytes) = read_pair(path.as_ref(), 3, Dtype::F32)?;
    DisplacementField::new(h.dims, h.spacing, f32_values(&bytes))
}

pub fn write_field(u: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        dims: u.dims(),
        spacing: u.spacing(),
        channels: 3,
        dtype: Dtype::F32,
    };
    write_pair(path.as_ref(), &header, &f32_bytes(u.data()))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let (h, bytes) = read_pair(path.as_ref(), 1, Dtype::U8)?;
    LabelMask::new(h.dims, h.spacing, bytes)
}

pub fn write_mask(m: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        dims: m.dims(),
        spacing: m.spacing(),
        channels: 1,
        dtype: Dtype::U8,
    };
    write_pair(path.as_ref(), &header, m.data())
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    blob: String,
    #[serde(default)]
    meta: serde_json::Value,
    params: Vec<ManifestEntry>,
}

/// Writes `<base>.json` (manifest with byte offsets and free-form `meta`) and
/// `<base>.raw` (concatenated little-endian f32 arrays).
pub fn write_checkpoint(path: impl AsRef<Path>, entries: &[CheckpointEntry], meta: serde_json::Value) -> Result<()> {
    let (json, raw) = sidecar_paths(path);
    let mut blob = Vec::new();
    let mut params = Vec::with_capacity(entries.len());
    for e in entries {
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(Error::Dims(format!(
                "checkpoint entry {} has shape {:?} but {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        params.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset: blob.len() as u64,
        });
        blob.extend(f32_bytes(&e.data));
    }
    let manifest = Manifest {
        blob: raw
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        meta,
        params,
    };
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    fs::write(&raw, blob).map_err(|e| Error::io(&raw, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(Vec<CheckpointEntry>, serde_json::Value)> {
    let (json, _) = sidecar_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Header {
        path: json.clone(),
        source,
    })?;
    let raw = json.with_file_name(&manifest.blob);
    let blob = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected: u64 = manifest
        .params
        .iter()
        .map(|p| 4 * p.shape.iter().product::<usize>() as u64)
        .sum();
    if blob.len() as u64 != expected {
        return Err(Error::RawSize {
            path: raw,
            expected,
            actual: blob.len() as u64,
        });
    }
    let mut entries = Vec::with_capacity(manifest.params.len());
    for p in manifest.params {
        let len = 4 * p.shape.iter().product::<usize>();
        let start = p.offset as usize;
        let bytes = blob.get(start..start + len).ok_or_else(|| {
            Error::Format(format!("{}: parameter {} overruns the blob", json.display(), p.name))
        })?;
        entries.push(CheckpointEntry {
            name: p.name,
            shape: p.shape,
            data: f32_values(bytes),
        });
    }
    Ok((entries, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn volume_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Volume::from_fn([8, 8, 8], [1.0, 1.5, 2.0], |_, _, _| rng_value(&mut rng)).unwrap();
        let p = dir.path().join("a");
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back, v);
        let q = dir.path().join("b.json");
        write_volume(&back, &q).unwrap();
        let raw_a = fs::read(dir.path().join("a.raw")).unwrap();
        let raw_b = fs::read(dir.path().join("b.raw")).unwrap();
        assert_eq!(raw_a, raw_b);
        assert_eq!(raw_a.len(), 8 * 8 * 8 * 4);
    }

    fn rng_value(rng: &mut ChaCha8Rng) -> f32 {
        rng.random_range(-1.0..1.0)
    }

    #[test]
    fn field_raw_size() {
        let dir = tempfile::tempdir().unwrap();
        let u = DisplacementField::zeros([2, 2, 2], [1.0; 3]).unwrap();
        write_field(&u, dir.path().join("u")).unwrap();
        let len = fs::metadata(dir.path().join("u.raw")).unwrap().len();
        assert_eq!(len, 2 * 2 * 2 * 3 * 4);
    }

    #[test]
    fn truncated_raw_reports_both_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        write_volume(&v, dir.path().join("t")).unwrap();
        let raw = dir.path().join("t.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_volume(dir.path().join("t")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("256") && msg.contains("253"), "{msg}");
    }

    #[test]
    fn unknown_dtype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(
            dir.path().join("x.json"),
            r#"{"dims":[1,1,1],"spacing":[1,1,1],"channels":1,"dtype":"f16"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("x.raw"), [0u8; 2]).unwrap();
        let msg = read_volume(&p).unwrap_err().to_string();
        assert!(msg.contains("unknown dtype"), "{msg}");
    }

    #[test]
    fn mask_read_as_volume_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = LabelMask::new([2, 1, 1], [1.0; 3], vec![0, 3]).unwrap();
        write_mask(&m, dir.path().join("m")).unwrap();
        assert!(read_volume(dir.path().join("m")).is_err());
        assert_eq!(read_mask(dir.path().join("m")).unwrap(), m);
    }

    #[test]
    fn layout_matches_linear_index_exhaustively() {
        // 2x2x2 grid with 2 channels written by hand in file order
        let dir = tempfile::tempdir().unwrap();
        let mut raw = Vec::new();
        for c in 0..2u32 {
            for z in 0..2u32 {
                for y in 0..2u32 {
                    for x in 0..2u32 {
                        let v = (1000 * c + 100 * z + 10 * y + x) as f32;
                        raw.extend(v.to_le_bytes());
                    }
                }
            }
        }
        // pad to three channels so it reads as a field
        for i in 0..8u32 {
            raw.extend((5000.0 + i as f32).to_le_bytes());
        }
        let p = dir.path().join("f");
        let header = Header {
            dims: [2, 2, 2],
            spacing: [1.0; 3],
            channels: 3,
            dtype: Dtype::F32,
        };
        write_pair(&p, &header, &raw).unwrap();
        let u = read_field(&p).unwrap();
        for c in 0..2 {
            for z in 0..2 {
                for y in 0..2 {
                    for x in 0..2 {
                        let expect = (1000 * c + 100 * z + 10 * y + x) as f32;
                        assert_eq!(u.get(c, x, y, z), expect);
                        let linear = ((c * 2 + z) * 2 + y) * 2 + x;
                        assert_eq!(u.data()[linear], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            CheckpointEntry {
                name: "a.weight".into(),
                shape: vec![2, 3],
                data: vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.25],
            },
            CheckpointEntry {
                name: "b".into(),
                shape: vec![1],
                data: vec![42.0],
            },
        ];
        let meta = serde_json::json!({"variant": "base"});
        write_checkpoint(dir.path().join("ck"), &entries, meta.clone()).unwrap();
        let (back, m) = read_checkpoint(dir.path().join("ck.json")).unwrap();
        assert_eq!(back, entries);
        assert_eq!(m, meta);
        let manifest = fs::read_to_string(dir.path().join("ck.json")).unwrap();
        assert!(manifest.contains("\"offset\": 24"), "{manifest}");
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![CheckpointEntry {
            name: "w".into(),
            shape: vec![4],
            data: vec![0.0; 4],
        }];
        write_checkpoint(dir.path().join("ck"), &entries, serde_json::Value::Null).unwrap();
        fs::write(dir.path().join("ck.raw"), [0u8; 15]).unwrap();
        assert!(matches!(
            read_checkpoint(dir.path().join("ck")),
            Err(Error::RawSize { expected: 16, actual: 15, .. })
        ));
    }
}
