//! Flat little-endian tensor container used for backbone checkpoints and
//! distiller snapshots.
//!
//! Layout (all integers are `u64` little-endian, all tensors `f64` little-endian,
//! row-major):
//!
//! ```text
//! magic      8 bytes  b"ESAMPTF\0"
//! version    u64      currently 1
//! kind       u64      1 = tiny transformer, 2 = distiller
//! n_fields   u64
//! fields     n_fields × u64
//! n_tensors  u64
//! repeat n_tensors times:
//!   len      u64
//!   data     len × f64
//! ```
//!
//! The meaning and order of `fields` and tensors is fixed per `kind` and
//! documented next to the type that writes it.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"ESAMPTF\0";
pub const VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum FileKind {
    TinyTransformer = 1,
    Distiller = 2,
}

impl FileKind {
    fn from_u64(v: u64) -> Option<Self> {
        match v {
            1 => Some(Self::TinyTransformer),
            2 => Some(Self::Distiller),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u64),
    #[error("expected file kind {expected:?}, found {found}")]
    Kind { expected: FileKind, found: u64 },
    #[error("malformed tensor file: {0}")]
    Malformed(String),
}

/// Decoded contents of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: FileKind,
    pub fields: Vec<u64>,
    pub tensors: Vec<Vec<f64>>,
}

impl TensorFile {
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.kind as u64).to_le_bytes())?;
        w.write_all(&(self.fields.len() as u64).to_le_bytes())?;
        for f in &self.fields {
            w.write_all(&f.to_le_bytes())?;
        }
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.len() as u64).to_le_bytes())?;
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R, expected: FileKind) -> Result<Self, TensorFileError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(TensorFileError::BadMagic);
        }
        let version = read_u64(r)?;
        if version != VERSION {
            return Err(TensorFileError::Version(version));
        }
        let kind_raw = read_u64(r)?;
        let kind = FileKind::from_u64(kind_raw)
            .filter(|k| *k == expected)
            .ok_or(TensorFileError::Kind {
                expected,
                found: kind_raw,
            })?;
        let n_fields = read_len(r, 1 << 16)?;
        let fields = (0..n_fields)
            .map(|_| read_u64(r))
            .collect::<Result<_, _>>()?;
        let n_tensors = read_len(r, 1 << 16)?;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let len = read_len(r, 1 << 32)?;
            let mut bytes = vec![0u8; len * 8];
            r.read_exact(&mut bytes)?;
            tensors.push(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(TensorFileError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            kind,
            fields,
            tensors,
        })
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TensorFileError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, cap: u64) -> Result<usize, TensorFileError> {
    let v = read_u64(r)?;
    if v > cap {
        return Err(TensorFileError::Malformed(format!(
            "length {v} exceeds {cap}"
        )));
    }
    Ok(v as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let f = TensorFile {
            kind: FileKind::Distiller,
            fields: vec![7],
            tensors: vec![vec![1.5]],
        };
        let b = f.to_bytes();
        assert_eq!(&b[..8], b"ESAMPTF\0");
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[24..32].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[32..40].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(b[40..48].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[48..56].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[56..64].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), 64);
    }

    #[test]
    fn rejects_wrong_kind_and_truncation() {
        let f = TensorFile {
            kind: FileKind::Distiller,
            fields: vec![],
            tensors: vec![vec![1.0, 2.0]],
        };
        let b = f.to_bytes();
        assert!(matches!(
            TensorFile::read_from(&mut &b[..], FileKind::TinyTransformer),
            Err(TensorFileError::Kind { .. })
        ));
        assert!(TensorFile::read_from(&mut &b[..b.len() - 3], FileKind::Distiller).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            TensorFile::read_from(&mut &bad[..], FileKind::Distiller),
            Err(TensorFileError::BadMagic)
        ));
    }

    proptest::proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            fields in proptest::collection::vec(proptest::num::u64::ANY, 0..6),
            tensors in proptest::collection::vec(
                proptest::collection::vec(proptest::num::f64::ANY, 0..20), 0..5),
        ) {
            let f = TensorFile { kind: FileKind::TinyTransformer, fields, tensors };
            let bytes = f.to_bytes();
            let back = TensorFile::read_from(&mut &bytes[..], FileKind::TinyTransformer).unwrap();
            proptest::prop_assert_eq!(back.to_bytes(), bytes);
            for (a, b) in back.tensors.iter().flatten().zip(f.tensors.iter().flatten()) {
                proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
