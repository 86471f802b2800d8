//! Single-file binary checkpoints with lossless `f64` round-trips.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"TLMB"
//! u32    format version (currently 1)
//! u8     payload kind: 0 = model parameters, 1 = weight-importance map
//! u32*5  config: vocab_size, d_model, n_layers, n_heads, max_seq
//! u64    optimizer step count
//! u32    n extra entries, then per entry: u32 len + key, u32 len + value
//! u32    n matrices, then per matrix:
//!          u32 len + name, u32 rows, u32 cols, rows*cols f64 bit patterns
//! u64    FNV-1a of every byte after the version field (integrity check)
//! ```
//!
//! Floats are stored as raw bit patterns, so write-then-read reproduces the
//! parameters exactly. The trailing checksum turns silent file corruption
//! into a loud error; it is an integrity breadcrumb, not a security
//! boundary. The same container carries weight-importance maps (kind 1),
//! whose `extra` entries record what model and data produced them.

use std::collections::BTreeMap;
use std::path::Path;

use crate::fingerprint::{fingerprint, fnv1a64};

use super::model::{param_shapes, Mat, ModelConfig, ModelState};
use super::ModelError;

const MAGIC: &[u8; 4] = b"TLMB";
const VERSION: u32 = 1;
pub(crate) const KIND_MODEL: u8 = 0;
pub(crate) const KIND_IMPORTANCE: u8 = 1;

/// A decoded checkpoint file of either kind.
pub(crate) struct Container {
    pub kind: u8,
    pub config: ModelConfig,
    pub step: u64,
    pub extra: Vec<(String, String)>,
    pub matrices: BTreeMap<String, Mat>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

pub(crate) fn serialize(
    kind: u8,
    config: &ModelConfig,
    step: u64,
    extra: &[(String, String)],
    matrices: &BTreeMap<String, Mat>,
) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    let payload_start = buf.len();
    buf.push(kind);
    for dim in [config.vocab_size, config.d_model, config.n_layers, config.n_heads, config.max_seq]
    {
        push_u32(&mut buf, dim as u32);
    }
    buf.extend_from_slice(&step.to_le_bytes());
    push_u32(&mut buf, extra.len() as u32);
    for (k, v) in extra {
        push_str(&mut buf, k);
        push_str(&mut buf, v);
    }
    push_u32(&mut buf, matrices.len() as u32);
    for (name, mat) in matrices {
        push_str(&mut buf, name);
        push_u32(&mut buf, mat.rows() as u32);
        push_u32(&mut buf, mat.cols() as u32);
        for &v in mat.data() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let checksum = fnv1a64(&buf[payload_start..]);
    buf.extend_from_slice(&checksum.to_le_bytes());
    buf
}

/// Bounds-checked reader over the raw bytes.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::CheckpointFormat(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| ModelError::CheckpointFormat("non-UTF-8 string".into()))
    }
}

pub(crate) fn deserialize(bytes: &[u8]) -> Result<Container, ModelError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(ModelError::CheckpointFormat("bad magic, not a checkpoint file".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(ModelError::CheckpointFormat(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    if bytes.len() < cur.pos + 8 {
        return Err(ModelError::CheckpointFormat("missing checksum".into()));
    }
    let payload = &bytes[cur.pos..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let actual = fnv1a64(payload);
    if stored != actual {
        return Err(ModelError::CheckpointFormat(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    let kind = cur.u8()?;
    if kind != KIND_MODEL && kind != KIND_IMPORTANCE {
        return Err(ModelError::CheckpointFormat(format!("unknown payload kind {kind}")));
    }
    let dims: Vec<usize> = (0..5).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<_, _>>()?;
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        max_seq: dims[4],
    };
    let step = cur.u64()?;
    let n_extra = cur.u32()? as usize;
    let mut extra = Vec::with_capacity(n_extra);
    for _ in 0..n_extra {
        let k = cur.string()?;
        let v = cur.string()?;
        extra.push((k, v));
    }
    let n_mats = cur.u32()? as usize;
    let mut matrices = BTreeMap::new();
    for _ in 0..n_mats {
        let name = cur.string()?;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| {
            ModelError::CheckpointFormat(format!("matrix {name} has absurd shape"))
        })?;
        let raw = cur.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if matrices.insert(name.clone(), Mat::from_raw(rows, cols, data)).is_some() {
            return Err(ModelError::CheckpointFormat(format!("duplicate matrix {name}")));
        }
    }
    if cur.pos != bytes.len() - 8 {
        return Err(ModelError::CheckpointFormat("trailing bytes after matrices".into()));
    }
    Ok(Container { kind, config, step, extra, matrices })
}

impl ModelState {
    /// Stable content fingerprint: the checkpoint bytes this state would
    /// serialize to, hashed. Equal states have equal ids.
    pub fn content_id(&self) -> String {
        fingerprint(&serialize(KIND_MODEL, &self.config, self.step, &[], &self.params))
    }
}

/// Writes a model checkpoint.
pub fn write_checkpoint(path: &Path, model: &ModelState) -> Result<(), ModelError> {
    let bytes = serialize(KIND_MODEL, &model.config, model.step, &[], &model.params);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a model checkpoint, verifying the checksum and that the matrices
/// exactly match the parameter inventory the config dictates.
pub fn read_checkpoint(path: &Path) -> Result<ModelState, ModelError> {
    let bytes = std::fs::read(path)?;
    let container = deserialize(&bytes)?;
    if container.kind != KIND_MODEL {
        return Err(ModelError::CheckpointFormat(
            "file holds an importance map, not model parameters".into(),
        ));
    }
    container.config.validate()?;
    let expected = param_shapes(&container.config);
    if container.matrices.len() != expected.len() {
        return Err(ModelError::CheckpointFormat(format!(
            "expected {} matrices, found {}",
            expected.len(),
            container.matrices.len()
        )));
    }
    for (name, rows, cols) in &expected {
        match container.matrices.get(name) {
            Some(m) if m.rows() == *rows && m.cols() == *cols => {}
            Some(m) => {
                return Err(ModelError::CheckpointFormat(format!(
                    "matrix {name} has shape [{}, {}], config dictates [{rows}, {cols}]",
                    m.rows(),
                    m.cols()
                )))
            }
            None => {
                return Err(ModelError::CheckpointFormat(format!("missing matrix {name}")));
            }
        }
    }
    Ok(ModelState { config: container.config, step: container.step, params: container.matrices })
}

/// Writes an importance map (parameter-shaped magnitudes) with provenance
/// strings in the `extra` section.
pub(crate) fn write_importance(
    path: &Path,
    config: &ModelConfig,
    extra: &[(String, String)],
    matrices: &BTreeMap<String, Mat>,
) -> Result<(), ModelError> {
    let bytes = serialize(KIND_IMPORTANCE, config, 0, extra, matrices);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_importance(
    path: &Path,
) -> Result<(ModelConfig, Vec<(String, String)>, BTreeMap<String, Mat>), ModelError> {
    let bytes = std::fs::read(path)?;
    let container = deserialize(&bytes)?;
    if container.kind != KIND_IMPORTANCE {
        return Err(ModelError::CheckpointFormat(
            "file holds model parameters, not an importance map".into(),
        ));
    }
    Ok((container.config, container.extra, container.matrices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::model::init;

    fn micro() -> ModelState {
        let config = ModelConfig { vocab_size: 11, d_model: 8, n_layers: 2, n_heads: 2, max_seq: 12 };
        init(&config, 3).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut model = micro();
        // Inject awkward values: subnormals, negative zero, extremes.
        let w = model.params.get_mut("wte").unwrap();
        w.data_mut()[0] = f64::MIN_POSITIVE / 2.0;
        w.data_mut()[1] = -0.0;
        w.data_mut()[2] = 1e308;
        model.step = 12345;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tlmb");
        write_checkpoint(&path, &model).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.step, 12345);
        for (name, mat) in &model.params {
            let got = &back.params[name];
            let same = mat
                .data()
                .iter()
                .zip(got.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "matrix {name} must round-trip bit-exactly");
        }
        // Re-serializing produces byte-identical files.
        let bytes_a = std::fs::read(&path).unwrap();
        write_checkpoint(&path, &back).unwrap();
        assert_eq!(bytes_a, std::fs::read(&path).unwrap());
    }

    #[test]
    fn content_id_tracks_content() {
        let a = micro();
        let b = micro();
        assert_eq!(a.content_id(), b.content_id());
        let mut c = micro();
        c.params.get_mut("wte").unwrap().data_mut()[0] += 1e-9;
        assert_ne!(a.content_id(), c.content_id());
    }

    #[test]
    fn corruption_is_detected() {
        let model = micro();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tlmb");
        write_checkpoint(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match read_checkpoint(&path) {
            Err(ModelError::CheckpointFormat(msg)) => {
                assert!(msg.contains("checksum"), "got: {msg}")
            }
            other => panic!("tampering must be detected, got {other:?}"),
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tlmb");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(ModelError::CheckpointFormat(_))));
        std::fs::write(&path, b"TL").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(ModelError::CheckpointFormat(_))));
        let model = micro();
        let good = dir.path().join("good.tlmb");
        write_checkpoint(&good, &model).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(ModelError::CheckpointFormat(_))));
    }

    #[test]
    fn importance_files_are_distinct_from_models() {
        let model = micro();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imp.tlmb");
        let extra = vec![("model_checkpoint_id".to_string(), model.content_id())];
        write_importance(&path, &model.config, &extra, &model.params).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(ModelError::CheckpointFormat(_))));
        let (config, extra_back, mats) = read_importance(&path).unwrap();
        assert_eq!(config, model.config);
        assert_eq!(extra_back, extra);
        assert_eq!(mats.len(), model.params.len());
    }
}
