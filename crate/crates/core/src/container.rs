//! Binary tensor container shared by datasets and checkpoints.
//!
//! Layout: 4-byte magic, `u32` LE version, `u64` LE header length, a UTF-8
//! header of `meta <key> <value>` and `tensor <name> <dtype> <shape>` lines,
//! then the tensor payloads back to back as 32-bit LE values in header order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const VERSION: u32 = 1;
pub const DATASET_MAGIC: [u8; 4] = *b"MMDS";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MMJS";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported container version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("malformed container: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl Payload {
    fn dtype(&self) -> &'static str {
        match self {
            Self::F32(_) => "f32",
            Self::U32(_) => "u32",
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::U32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub meta: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

fn check_token(what: &str, s: &str) -> Result<(), ContainerError> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(ContainerError::Malformed(format!("{what} {s:?} must be a non-empty token without whitespace")));
    }
    Ok(())
}

impl Container {
    pub fn new(magic: [u8; 4]) -> Self {
        Self {
            magic,
            meta: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, payload: Payload) {
        self.entries.push(Entry {
            name: name.to_string(),
            shape,
            payload,
        });
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, ContainerError> {
        self.meta(key)
            .ok_or_else(|| ContainerError::Malformed(format!("missing meta key {key:?}")))
    }

    pub fn entry(&self, name: &str) -> Result<&Entry, ContainerError> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ContainerError::Malformed(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(ContainerError::Malformed(format!("meta value for {k:?} contains a newline")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for e in &self.entries {
            check_token("tensor name", &e.name)?;
            if e.shape.iter().product::<usize>() != e.payload.len() {
                return Err(ContainerError::Malformed(format!(
                    "tensor {} has shape {:?} but {} values",
                    e.name,
                    e.shape,
                    e.payload.len()
                )));
            }
            let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {} {} {}\n", e.name, e.payload.dtype(), shape.join(",")));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for e in &self.entries {
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected: [u8; 4]) -> Result<Self, ContainerError> {
        let mut cur = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8], ContainerError> {
            if cur.len() < n {
                return Err(ContainerError::Truncated(format!("{what}: need {n} bytes, {} left", cur.len())));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        let magic: [u8; 4] = take(4, "magic")?.try_into().expect("4 bytes");
        if magic != expected {
            return Err(ContainerError::BadMagic { found: magic, expected });
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(take(8, "header length")?.try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len)
            .map_err(|_| ContainerError::Malformed(format!("header length {header_len} overflows")))?;
        let header = std::str::from_utf8(take(header_len, "header")?)
            .map_err(|e| ContainerError::Malformed(format!("header is not UTF-8: {e}")))?;

        let mut out = Self::new(magic);
        let mut specs = Vec::new();
        for line in header.lines() {
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), Some(v)) => out.meta.push((k.to_string(), v.to_string())),
                (Some("tensor"), Some(name), Some(rest)) => {
                    let (dtype, shape) = rest
                        .split_once(' ')
                        .ok_or_else(|| ContainerError::Malformed(format!("bad tensor line {line:?}")))?;
                    let shape = if shape.is_empty() {
                        Vec::new()
                    } else {
                        shape
                            .split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|e| ContainerError::Malformed(format!("bad shape in {line:?}: {e}")))?
                    };
                    specs.push((name.to_string(), dtype.to_string(), shape));
                }
                _ => return Err(ContainerError::Malformed(format!("bad header line {line:?}"))),
            }
        }
        for (name, dtype, shape) in specs {
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ContainerError::Malformed(format!("tensor {name} is too large")))?;
            let raw = take(
                n.checked_mul(4)
                    .ok_or_else(|| ContainerError::Malformed(format!("tensor {name} is too large")))?,
                &name,
            )?;
            let words = raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let payload = match dtype.as_str() {
                "f32" => Payload::F32(words.map(f32::from_le_bytes).collect()),
                "u32" => Payload::U32(words.map(u32::from_le_bytes).collect()),
                _ => return Err(ContainerError::Malformed(format!("unknown dtype {dtype:?}"))),
            };
            out.entries.push(Entry { name, shape, payload });
        }
        if !cur.is_empty() {
            return Err(ContainerError::Malformed(format!("{} trailing bytes", cur.len())));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected: [u8; 4]) -> Result<Self, ContainerError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(DATASET_MAGIC);
        c.push_meta("classes", 10);
        c.push_meta("note", "two words");
        c.push("x", vec![2, 3], Payload::F32(vec![0.0, -1.5, f32::MIN_POSITIVE, 3.25, 1e-30, -0.0]));
        c.push("labels", vec![2], Payload::U32(vec![7, u32::MAX]));
        c.push("empty", vec![0, 4], Payload::F32(vec![]));
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MMDS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Container::from_bytes(&bytes, DATASET_MAGIC).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let Payload::F32(v) = &back.entry("x").unwrap().payload else { panic!() };
        assert_eq!(v[5].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.meta("note"), Some("two words"));
    }

    #[test]
    fn corrupt_inputs_are_errors() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Container::from_bytes(&bad, DATASET_MAGIC),
            Err(ContainerError::BadMagic { .. })
        ));
        assert!(matches!(
            Container::from_bytes(&bytes, CHECKPOINT_MAGIC),
            Err(ContainerError::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Container::from_bytes(&bad, DATASET_MAGIC),
            Err(ContainerError::UnsupportedVersion(2))
        ));
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(matches!(
                Container::from_bytes(&bytes[..cut], DATASET_MAGIC),
                Err(ContainerError::Truncated(_))
            ));
        }
        let mut long = bytes;
        long.push(0);
        assert!(matches!(
            Container::from_bytes(&long, DATASET_MAGIC),
            Err(ContainerError::Malformed(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected_on_write() {
        let mut c = Container::new(CHECKPOINT_MAGIC);
        c.push("w", vec![2, 2], Payload::F32(vec![1.0]));
        assert!(c.to_bytes().is_err());
        let mut c = Container::new(CHECKPOINT_MAGIC);
        c.push("bad name", vec![1], Payload::F32(vec![1.0]));
        assert!(c.to_bytes().is_err());
    }
}
