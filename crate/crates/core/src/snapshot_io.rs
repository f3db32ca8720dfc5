//! Snapshot files: `DESKSNAP` magic, a version word, a JSON header, then
//! raw little-endian arrays.
//!
//! Layout:
//!
//! ```text
//! bytes 0..8    b"DESKSNAP"
//! bytes 8..12   format version, u32 LE
//! bytes 12..20  header length, u64 LE
//! ...           header JSON (input, graph, meta, array table)
//! ...           arrays in table order: f64 LE data, masks as raw bytes
//! ```
//!
//! Reads are bit-exact: every f64 travels through `to_le_bytes`, so
//! a load returns exactly the values that were saved.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    InputDesc, LayerSpec, ModelSnapshot, ParamKey, ParamRole, PruneMask, SnapshotMeta,
};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DESKSNAP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ArrayKind {
    Param,
    Buffer,
    Mask,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    layer: usize,
    role: String,
    kind: ArrayKind,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    input: InputDesc,
    graph: Vec<LayerSpec>,
    meta: SnapshotMeta,
    arrays: Vec<ArrayEntry>,
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

/// Serializes a snapshot to any writer.
pub fn write_snapshot(model: &ModelSnapshot, w: &mut impl Write) -> Result<()> {
    let mut arrays = Vec::new();
    let entry = |key: &ParamKey, kind: ArrayKind, shape: Vec<usize>| ArrayEntry {
        layer: key.layer,
        role: key.role.as_str().to_string(),
        kind,
        shape,
    };
    for (key, t) in &model.params {
        arrays.push(entry(key, ArrayKind::Param, t.shape.clone()));
    }
    for (key, t) in &model.buffers {
        arrays.push(entry(key, ArrayKind::Buffer, t.shape.clone()));
    }
    for (key, m) in &model.masks {
        arrays.push(entry(key, ArrayKind::Mask, vec![m.len()]));
    }
    let header =
        Header { input: model.input, graph: model.graph.clone(), meta: model.meta.clone(), arrays };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Run(format!("header encoding failed: {e}")))?;

    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for t in model.params.values() {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for t in model.buffers.values() {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for m in model.masks.values() {
        w.write_all(m.as_slice())?;
    }
    Ok(())
}

pub fn save_snapshot(model: &ModelSnapshot, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| at_path(path, e))?);
    write_snapshot(model, &mut w)?;
    w.flush()?;
    Ok(())
}

fn at_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Reader that remembers how far it has come, for error reporting.
struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn new(inner: R) -> Self {
        Counted { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|_| format_err(at, format!("file ends inside {what}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

/// Deserializes a snapshot from any reader, validating structure as it
/// goes. Errors carry the byte offset where reading stopped making sense.
pub fn read_snapshot(r: &mut impl Read) -> Result<ModelSnapshot> {
    let mut r = Counted::new(r);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic, "the magic")?;
    if &magic != MAGIC {
        return Err(format_err(0, "bad magic, not a snapshot file"));
    }
    let version = r.read_u32("the version word")?;
    if version != VERSION {
        return Err(format_err(8, format!("unsupported version {version}")));
    }
    let header_len = r.read_u64("the header length")?;
    let header_start = r.offset;
    let mut header_bytes = vec![0u8; header_len as usize];
    r.read_exact(&mut header_bytes, "the header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| format_err(header_start, format!("header is not valid JSON: {e}")))?;

    let mut params: BTreeMap<ParamKey, Tensor> = BTreeMap::new();
    let mut buffers: BTreeMap<ParamKey, Tensor> = BTreeMap::new();
    let mut masks: BTreeMap<ParamKey, PruneMask> = BTreeMap::new();
    for entry in &header.arrays {
        let at = r.offset;
        let role = ParamRole::parse(&entry.role)
            .ok_or_else(|| format_err(at, format!("unknown role {:?}", entry.role)))?;
        let key = ParamKey::new(entry.layer, role);
        let numel: usize = entry.shape.iter().product();
        match entry.kind {
            ArrayKind::Param | ArrayKind::Buffer => {
                let mut data = vec![0.0f64; numel];
                let mut b = [0u8; 8];
                for v in data.iter_mut() {
                    r.read_exact(&mut b, &format!("array {key}"))?;
                    *v = f64::from_le_bytes(b);
                }
                let tensor = Tensor::new(entry.shape.clone(), data)
                    .map_err(|e| format_err(at, format!("array {key}: {e}")))?;
                let store = match entry.kind {
                    ArrayKind::Param => &mut params,
                    _ => &mut buffers,
                };
                if store.insert(key, tensor).is_some() {
                    return Err(format_err(at, format!("duplicate array {key}")));
                }
            }
            ArrayKind::Mask => {
                let mut bytes = vec![0u8; numel];
                r.read_exact(&mut bytes, &format!("mask {key}"))?;
                let mask = PruneMask::from_raw(bytes)
                    .map_err(|e| format_err(at, format!("mask {key}: {e}")))?;
                if masks.insert(key, mask).is_some() {
                    return Err(format_err(at, format!("duplicate mask {key}")));
                }
            }
        }
    }

    ModelSnapshot::assemble(header.input, header.graph, params, buffers, masks, header.meta)
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<ModelSnapshot> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| at_path(path, e))?);
    read_snapshot(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_desknet, build_mlp, DeskNetSpec};

    fn roundtrip(model: &ModelSnapshot) -> ModelSnapshot {
        let mut bytes = Vec::new();
        write_snapshot(model, &mut bytes).unwrap();
        read_snapshot(&mut bytes.as_slice()).unwrap()
    }

    #[test]
    fn mlp_roundtrip_is_bit_exact() {
        let mut model = build_mlp(&[4, 8, 3], 7).unwrap();
        model.meta.eval_accuracy = Some(0.912);
        model.meta.cycle_index = 3;
        model.meta.schedule_name = "one_cycle".into();
        let back = roundtrip(&model);
        assert_eq!(model, back);
        for (key, t) in &model.params {
            let u = &back.params[key];
            for (a, b) in t.data.iter().zip(&u.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn desknet_roundtrip_with_masks() {
        let mut model = build_desknet(
            &DeskNetSpec {
                in_channels: 1,
                height: 8,
                width: 8,
                widths: [4, 4, 4],
                blocks_per_stage: 1,
                num_classes: 3,
            },
            23,
        )
        .unwrap();
        let key = ParamKey::new(3, ParamRole::Weight);
        model.masks.get_mut(&key).unwrap().kill(0);
        model.masks.get_mut(&key).unwrap().kill(17);
        model.enforce_masks();
        model.recount().unwrap();
        let back = roundtrip(&model);
        assert_eq!(model, back);
        assert_eq!(back.param_count(), model.param_count());
    }

    #[test]
    fn subnormal_and_negative_zero_survive() {
        let mut model = build_mlp(&[2, 2], 1).unwrap();
        let key = ParamKey::new(0, ParamRole::Weight);
        let w = model.params.get_mut(&key).unwrap();
        w.data[0] = -0.0;
        w.data[1] = f64::MIN_POSITIVE / 2.0;
        w.data[2] = f64::MAX;
        let back = roundtrip(&model);
        let u = &back.params[&key];
        for (a, b) in model.params[&key].data.iter().zip(&u.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wrong_magic_is_reported_at_offset_zero() {
        let mut bytes = Vec::new();
        write_snapshot(&build_mlp(&[2, 2], 1).unwrap(), &mut bytes).unwrap();
        bytes[0] = b'X';
        let err = read_snapshot(&mut bytes.as_slice()).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("wanted a format error, got {other}"),
        }
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let mut bytes = Vec::new();
        write_snapshot(&build_mlp(&[2, 2], 1).unwrap(), &mut bytes).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        let err = read_snapshot(&mut bytes.as_slice()).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert_eq!(offset, 8);
                assert!(message.contains("99"));
            }
            other => panic!("wanted a format error, got {other}"),
        }
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let mut bytes = Vec::new();
        write_snapshot(&build_mlp(&[4, 8, 3], 7).unwrap(), &mut bytes).unwrap();
        let cut = bytes.len() - 11;
        bytes.truncate(cut);
        let err = read_snapshot(&mut bytes.as_slice()).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert!(offset <= cut as u64, "offset {offset} past cut {cut}");
                assert!(message.contains("ends inside"), "{message}");
            }
            other => panic!("wanted a format error, got {other}"),
        }
    }

    #[test]
    fn truncated_header_is_a_format_error() {
        let mut bytes = Vec::new();
        write_snapshot(&build_mlp(&[2, 2], 1).unwrap(), &mut bytes).unwrap();
        bytes.truncate(30);
        assert!(matches!(read_snapshot(&mut bytes.as_slice()), Err(Error::Format { .. })));
    }

    #[test]
    fn corrupt_header_json_is_a_format_error() {
        let mut bytes = Vec::new();
        write_snapshot(&build_mlp(&[2, 2], 1).unwrap(), &mut bytes).unwrap();
        bytes[25] = b'!';
        let err = read_snapshot(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 20, .. }), "{err}");
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.snap");
        let model = build_mlp(&[4, 8, 3], 9).unwrap();
        save_snapshot(&model, &path).unwrap();
        let back = load_snapshot(&path).unwrap();
        assert_eq!(model, back);
    }
}
