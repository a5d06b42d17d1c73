//! The GMIC binary feature-file format.
//!
//! Layout (little-endian, no padding between records):
//!
//! ```text
//! magic "GMIC" (4 bytes)
//! version      u32 = 1
//! n_samples    u32
//! e            u32   number of classes
//! per sample:
//!   label      u32
//!   for each modality in order V, S, T:
//!     t        u32   time steps
//!     d        u32   feature dim
//!     t*d      f32   row-major values
//! ```
//!
//! The same container carries synthetic datasets, externally computed
//! features, and pooled embedding exports.

use crate::synth::{Dataset, FeatMat, Sample};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GMIC";
pub const VERSION: u32 = 1;

/// Caps on declared dimensions; anything larger is treated as a
/// corrupt or hostile file rather than an allocation request.
const MAX_DIM: u32 = 1 << 24;
const MAX_ELEMS: u64 = 1 << 28;

#[derive(Debug)]
pub enum FormatError {
    BadMagic { got: [u8; 4] },
    VersionMismatch { expected: u32, got: u32 },
    Truncated,
    DimOverflow { detail: String },
    /// Internally inconsistent contents (labels out of range, trailing
    /// bytes, mismatched record counts).
    Structure { detail: String },
    Io { message: String },
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::BadMagic { got } => write!(f, "bad magic bytes {got:?}, expected \"GMIC\""),
            FormatError::VersionMismatch { expected, got } => {
                write!(f, "unsupported version {got}, expected {expected}")
            }
            FormatError::Truncated => write!(f, "file truncated mid-record"),
            FormatError::DimOverflow { detail } => write!(f, "dimension overflow: {detail}"),
            FormatError::Structure { detail } => write!(f, "malformed contents: {detail}"),
            FormatError::Io { message } => write!(f, "io error: {message}"),
        }
    }
}

impl std::error::Error for FormatError {}

impl From<std::io::Error> for FormatError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            FormatError::Truncated
        } else {
            FormatError::Io {
                message: e.to_string(),
            }
        }
    }
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<(), FormatError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), FormatError> {
    r.read_exact(buf)?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32, FormatError> {
    let mut buf = [0u8; 4];
    read_exact_or(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_mat<W: Write>(w: &mut W, m: &FeatMat) -> Result<(), FormatError> {
    write_u32(w, m.rows as u32)?;
    write_u32(w, m.cols as u32)?;
    for &v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_mat<R: Read>(r: &mut R) -> Result<FeatMat, FormatError> {
    let t = read_u32(r)?;
    let d = read_u32(r)?;
    if t == 0 || d == 0 || t > MAX_DIM || d > MAX_DIM || (t as u64) * (d as u64) > MAX_ELEMS {
        return Err(FormatError::DimOverflow {
            detail: format!("t={t}, d={d}"),
        });
    }
    let numel = (t * d) as usize;
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        read_exact_or(r, &mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Ok(FeatMat {
        rows: t as usize,
        cols: d as usize,
        data,
    })
}

pub fn write_features(dataset: &Dataset, path: &Path) -> Result<(), FormatError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, dataset.samples.len() as u32)?;
    write_u32(&mut w, dataset.num_classes)?;
    for sample in &dataset.samples {
        write_u32(&mut w, sample.label)?;
        write_mat(&mut w, &sample.v)?;
        write_mat(&mut w, &sample.s)?;
        write_mat(&mut w, &sample.t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Dataset, FormatError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic { got: magic });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            got: version,
        });
    }
    let n_samples = read_u32(&mut r)?;
    if n_samples > MAX_DIM {
        return Err(FormatError::DimOverflow {
            detail: format!("n_samples={n_samples}"),
        });
    }
    let num_classes = read_u32(&mut r)?;
    if num_classes < 2 {
        return Err(FormatError::Structure {
            detail: format!("class count {num_classes} < 2"),
        });
    }
    let mut samples = Vec::with_capacity(n_samples as usize);
    for i in 0..n_samples {
        let label = read_u32(&mut r)?;
        if label >= num_classes {
            return Err(FormatError::Structure {
                detail: format!("sample {i}: label {label} >= {num_classes} classes"),
            });
        }
        let v = read_mat(&mut r)?;
        let s = read_mat(&mut r)?;
        let t = read_mat(&mut r)?;
        samples.push(Sample { label, v, s, t });
    }
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => {
            return Err(FormatError::Structure {
                detail: "trailing bytes after the last record".into(),
            })
        }
        Err(e) => return Err(e.into()),
    }
    Ok(Dataset {
        num_classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("gmic_file_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = SynthSpec {
            n_samples: 12,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let path = temp_path("roundtrip.gmic");
        write_features(&ds, &path).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.num_classes, ds.num_classes);
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.label, b.label);
            for (x, y) in [(&a.v, &b.v), (&a.s, &b.s), (&a.t, &b.t)] {
                assert_eq!(x.rows, y.rows);
                assert_eq!(x.cols, y.cols);
                // bitwise, not approximate
                let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
                assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn corrupted_magic_is_rejected_without_partial_data() {
        let spec = SynthSpec {
            n_samples: 4,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let path = temp_path("badmagic.gmic");
        write_features(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(FormatError::BadMagic { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_its_own_error() {
        let spec = SynthSpec {
            n_samples: 2,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let path = temp_path("badversion.gmic");
        write_features(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(FormatError::VersionMismatch { expected: 1, got: 9 })
        ));
    }

    #[test]
    fn truncated_file_is_detected() {
        let spec = SynthSpec {
            n_samples: 4,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let path = temp_path("truncated.gmic");
        write_features(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_features(&path), Err(FormatError::Truncated)));
    }

    #[test]
    fn absurd_dimensions_are_rejected() {
        let path = temp_path("overflow.gmic");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes()); // one sample
        bytes.extend_from_slice(&4u32.to_le_bytes()); // classes
        bytes.extend_from_slice(&0u32.to_le_bytes()); // label
        bytes.extend_from_slice(&u32::MAX.to_le_bytes()); // t
        bytes.extend_from_slice(&u32::MAX.to_le_bytes()); // d
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(FormatError::DimOverflow { .. })
        ));
    }

    #[test]
    fn empty_dataset_is_a_valid_file() {
        let ds = Dataset {
            num_classes: 4,
            samples: Vec::new(),
        };
        let path = temp_path("empty.gmic");
        write_features(&ds, &path).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.samples.len(), 0);
        assert_eq!(back.num_classes, 4);
    }
}
