//! Binary on-disk containers: trajectory blobs and model checkpoints.
//!
//! Both formats share the same skeleton — an 8-byte ASCII magic, a little-
//! endian header, a payload, and a trailing CRC-64 (XZ polynomial) over
//! everything before the checksum — so corruption, truncation and version
//! skew are all detected with distinct errors.
//!
//! Trajectory blob (`magic "HOLSTEIN"`, version 1):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "HOLSTEIN"
//! 8       4     u32 format version
//! 12      4     u32 lattice size L
//! 16      8     u64 snapshot count
//! 24      8     u64 midpoint count
//! 32      ...   states: snapshots, then midpoints; each state is
//!               [Q (L f64), P (L f64), Re rho (L*L f64, row-major),
//!                Im rho (L*L f64, row-major)], little-endian
//! end-8   8     CRC-64/XZ of bytes [0, end-8)
//! ```
//!
//! Checkpoint (`magic "PARCWGTS"`, version 1): after the magic and version
//! comes a length-prefixed JSON header carrying caller metadata plus the
//! named-tensor directory (names and shapes, in payload order), then the
//! concatenated float32 tensor data, then the same trailing CRC-64.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic for trajectory blobs.
pub const TRAJECTORY_MAGIC: &[u8; 8] = b"HOLSTEIN";
/// Magic for model checkpoints.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PARCWGTS";
/// Current version of both container formats.
pub const FORMAT_VERSION: u32 = 1;

const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

/// CRC-64/XZ of a byte slice.
pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// Errors from reading or writing containers.
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic {found:?} (expected {expected:?})")]
    BadMagic {
        path: PathBuf,
        found: [u8; 8],
        expected: &'static [u8; 8],
    },
    #[error("{path}: unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },
    #[error("{path}: truncated or padded: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },
    #[error("{path}: malformed container: {what}")]
    Malformed { path: PathBuf, what: String },
    #[error("{path}: metadata error: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path, source: io::Error) -> ContainerError {
    ContainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One stored state in raw field order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub re_rho: Vec<f64>,
    pub im_rho: Vec<f64>,
}

impl RawState {
    /// Number of f64 values per state at lattice size `l`.
    pub fn values_per_state(l: usize) -> usize {
        2 * l + 2 * l * l
    }
}

/// Contents of one trajectory blob.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBlob {
    pub l: usize,
    pub snapshots: Vec<RawState>,
    pub midpoints: Vec<RawState>,
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8], count: usize, cursor: &mut usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[*cursor..*cursor + 8]);
        out.push(f64::from_le_bytes(raw));
        *cursor += 8;
    }
    out
}

/// Serialize a trajectory blob to `path`.
pub fn write_trajectory_blob(path: &Path, blob: &TrajectoryBlob) -> Result<(), ContainerError> {
    let l = blob.l;
    let per_state = RawState::values_per_state(l) * 8;
    let total = 32 + (blob.snapshots.len() + blob.midpoints.len()) * per_state + 8;
    let mut buf = Vec::with_capacity(total);
    buf.extend_from_slice(TRAJECTORY_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(l as u32).to_le_bytes());
    buf.extend_from_slice(&(blob.snapshots.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(blob.midpoints.len() as u64).to_le_bytes());
    for state in blob.snapshots.iter().chain(&blob.midpoints) {
        debug_assert_eq!(state.q.len(), l);
        debug_assert_eq!(state.re_rho.len(), l * l);
        push_f64s(&mut buf, &state.q);
        push_f64s(&mut buf, &state.p);
        push_f64s(&mut buf, &state.re_rho);
        push_f64s(&mut buf, &state.im_rho);
    }
    let checksum = crc64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, &buf).map_err(|e| io_err(path, e))
}

/// Read and fully verify a trajectory blob.
pub fn read_trajectory_blob(path: &Path) -> Result<TrajectoryBlob, ContainerError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 40 {
        return Err(ContainerError::Truncated {
            path: path.to_path_buf(),
            expected: 40,
            found: bytes.len(),
        });
    }
    let mut magic = [0u8; 8];
    magic.copy_from_slice(&bytes[0..8]);
    if &magic != TRAJECTORY_MAGIC {
        return Err(ContainerError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: TRAJECTORY_MAGIC,
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ContainerError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let l = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let n_snap = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let n_mid = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
    let per_state = RawState::values_per_state(l) * 8;
    let expected = 32 + (n_snap + n_mid) * per_state + 8;
    if bytes.len() != expected {
        return Err(ContainerError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
    let computed = crc64(&bytes[..expected - 8]);
    if stored != computed {
        return Err(ContainerError::ChecksumMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }

    let mut cursor = 32;
    let read_state = |cursor: &mut usize| -> RawState {
        RawState {
            q: read_f64s(&bytes, l, cursor),
            p: read_f64s(&bytes, l, cursor),
            re_rho: read_f64s(&bytes, l * l, cursor),
            im_rho: read_f64s(&bytes, l * l, cursor),
        }
    };
    let snapshots: Vec<RawState> = (0..n_snap).map(|_| read_state(&mut cursor)).collect();
    let midpoints: Vec<RawState> = (0..n_mid).map(|_| read_state(&mut cursor)).collect();
    Ok(TrajectoryBlob {
        l,
        snapshots,
        midpoints,
    })
}

/// One named tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

impl NamedTensor {
    fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    meta: serde_json::Value,
    tensors: Vec<NamedTensor>,
}

/// A checkpoint: caller metadata (model configuration, scaling coefficients,
/// anything JSON) plus named float32 tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

/// Serialize a checkpoint to `path`.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ContainerError> {
    for t in &ckpt.tensors {
        if t.element_count() != t.data.len() {
            return Err(ContainerError::Malformed {
                path: path.to_path_buf(),
                what: format!(
                    "tensor {} declares shape {:?} ({} values) but holds {}",
                    t.name,
                    t.shape,
                    t.element_count(),
                    t.data.len()
                ),
            });
        }
    }
    let header = CheckpointHeader {
        meta: ckpt.meta.clone(),
        tensors: ckpt.tensors.clone(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| ContainerError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;

    let payload_len: usize = ckpt.tensors.iter().map(|t| t.data.len() * 4).sum();
    let mut buf = Vec::with_capacity(16 + header_json.len() + payload_len + 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for t in &ckpt.tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = crc64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, &buf).map_err(|e| io_err(path, e))
}

/// Read and fully verify a checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ContainerError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 24 {
        return Err(ContainerError::Truncated {
            path: path.to_path_buf(),
            expected: 24,
            found: bytes.len(),
        });
    }
    let mut magic = [0u8; 8];
    magic.copy_from_slice(&bytes[0..8]);
    if &magic != CHECKPOINT_MAGIC {
        return Err(ContainerError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: CHECKPOINT_MAGIC,
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ContainerError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len + 8 {
        return Err(ContainerError::Truncated {
            path: path.to_path_buf(),
            expected: 16 + header_len + 8,
            found: bytes.len(),
        });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..16 + header_len]).map_err(|e| ContainerError::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
    let payload_len: usize = header.tensors.iter().map(|t| t.element_count() * 4).sum();
    let expected = 16 + header_len + payload_len + 8;
    if bytes.len() != expected {
        return Err(ContainerError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
    let computed = crc64(&bytes[..expected - 8]);
    if stored != computed {
        return Err(ContainerError::ChecksumMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }

    let mut cursor = 16 + header_len;
    let mut tensors = header.tensors;
    for t in &mut tensors {
        let n = t.element_count();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut raw = [0u8; 4];
            raw.copy_from_slice(&bytes[cursor..cursor + 4]);
            data.push(f32::from_le_bytes(raw));
            cursor += 4;
        }
        t.data = data;
    }
    Ok(Checkpoint {
        meta: header.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use tempfile::tempdir;

    #[test]
    fn crc64_matches_reference_vector() {
        // Standard CRC-64/XZ check value for the ASCII digits "123456789".
        assert_eq!(crc64(b"123456789"), 0x995D_C9BB_DF19_39FA);
    }

    fn sample_blob(l: usize) -> TrajectoryBlob {
        let state = |k: f64| RawState {
            q: (0..l).map(|i| k + i as f64).collect(),
            p: (0..l).map(|i| -k - i as f64 * 0.5).collect(),
            re_rho: (0..l * l).map(|i| k * 0.001 + i as f64 * 1e-6).collect(),
            im_rho: (0..l * l).map(|i| -k * 0.002 - i as f64 * 1e-6).collect(),
        };
        TrajectoryBlob {
            l,
            snapshots: vec![state(1.0), state(2.0), state(3.0)],
            midpoints: vec![state(1.5), state(2.5)],
        }
    }

    #[test]
    fn trajectory_blob_roundtrip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("traj.bin");
        let blob = sample_blob(4);
        write_trajectory_blob(&path, &blob).unwrap();
        let back = read_trajectory_blob(&path).unwrap();
        assert_eq!(blob, back);
    }

    #[test]
    fn trajectory_blob_corruption_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("traj.bin");
        write_trajectory_blob(&path, &sample_blob(4)).unwrap();
        let original = fs::read(&path).unwrap();

        // Payload bit flip -> checksum mismatch.
        let mut bytes = original.clone();
        bytes[100] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_trajectory_blob(&path),
            Err(ContainerError::ChecksumMismatch { .. })
        ));

        // Truncation -> length mismatch.
        fs::write(&path, &original[..original.len() - 9]).unwrap();
        assert!(matches!(
            read_trajectory_blob(&path),
            Err(ContainerError::Truncated { .. })
        ));

        // Wrong magic.
        let mut bytes = original.clone();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_trajectory_blob(&path),
            Err(ContainerError::BadMagic { .. })
        ));

        // Unknown version wins over the (now broken) checksum.
        let mut bytes = original.clone();
        bytes[8] = 99;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_trajectory_blob(&path),
            Err(ContainerError::UnsupportedVersion { found: 99, .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_meta_and_tensors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            meta: json!({
                "schema_version": 1,
                "scaling": {"r": 0.88, "q": 1.62, "p": 0.75},
            }),
            tensors: vec![
                NamedTensor {
                    name: "stem.kernel".into(),
                    shape: vec![12, 4, 3, 3],
                    data: (0..12 * 4 * 9).map(|i| i as f32 * 0.01 - 2.0).collect(),
                },
                NamedTensor {
                    name: "stem.bias".into(),
                    shape: vec![12],
                    data: (0..12).map(|i| -(i as f32)).collect(),
                },
            ],
        };
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(ckpt, back);

        // Writing twice produces identical bytes (format is deterministic).
        let first = fs::read(&path).unwrap();
        write_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn checkpoint_rejects_shape_data_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            meta: json!({}),
            tensors: vec![NamedTensor {
                name: "w".into(),
                shape: vec![3, 3],
                data: vec![0.0; 8],
            }],
        };
        assert!(matches!(
            write_checkpoint(&path, &ckpt),
            Err(ContainerError::Malformed { .. })
        ));
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            meta: json!({"k": 1}),
            tensors: vec![NamedTensor {
                name: "w".into(),
                shape: vec![4],
                data: vec![1.0, 2.0, 3.0, 4.0],
            }],
        };
        write_checkpoint(&path, &ckpt).unwrap();
        let original = fs::read(&path).unwrap();

        let mut bytes = original.clone();
        let n = bytes.len();
        bytes[n - 12] ^= 0x01; // inside the payload
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(ContainerError::ChecksumMismatch { .. })
        ));
    }
}
