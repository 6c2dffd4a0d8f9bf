//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "OCORCKPT"
//! version      u32
//! config_hash  u64
//! step_count   u64
//! config_len   u32, then config_len bytes of UTF-8 config text
//! n_params     u32
//! per parameter, in name order:
//!   name_len u32, name bytes
//!   rank     u32, then rank x u64 extents
//!   values   f32 x product(extents)
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OCORCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O")]
    Io(#[from] io::Error),
    #[error("checkpoint file {}", path.display())]
    File {
        path: std::path::PathBuf,
        source: io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(
        "config hash mismatch: header says {stored:016x}, config text hashes to {computed:016x}"
    )]
    HashMismatch { stored: u64, computed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub step_count: u64,
    pub params: ParamSet,
}

/// First eight bytes of SHA-256 over the config text.
pub fn config_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

impl Checkpoint {
    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config_text)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash().to_le_bytes())?;
        w.write_all(&self.step_count.to_le_bytes())?;
        write_bytes(&mut w, self.config_text.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let stored = read_u64(&mut r)?;
        let step_count = read_u64(&mut r)?;
        let config_text = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| CheckpointError::Corrupt("config text is not UTF-8".into()))?;
        let computed = config_hash(&config_text);
        if computed != stored {
            return Err(CheckpointError::HashMismatch { stored, computed });
        }
        let n = read_u32(&mut r)?;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(CheckpointError::Corrupt(format!(
                    "rank {rank} for `{name}`"
                )));
            }
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|e| e as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let mut raw = vec![0u8; count * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t =
                Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Corrupt(format!(
                    "duplicate parameter `{name}`"
                )));
            }
        }
        Ok(Self {
            config_text,
            step_count,
            params,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("partial");
        let file_err = |source| CheckpointError::File {
            path: path.to_path_buf(),
            source,
        };
        std::fs::write(&tmp, self.to_bytes()).map_err(file_err)?;
        std::fs::rename(&tmp, path).map_err(file_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_from(bytes.as_slice())
    }
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, CheckpointError> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(CheckpointError::Corrupt(format!(
            "length field {n} too large"
        )));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.insert("b", Tensor::vector(vec![0.5, -1.25]));
        params.insert(
            "a",
            Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        Checkpoint {
            config_text: "d = 8\n".into(),
            step_count: 17,
            params,
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(
            u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
            config_hash("d = 8\n")
        );
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 17);
    }

    #[test]
    fn roundtrip_of_f32_representable_values() {
        let ck = sample();
        let back = Checkpoint::read_from(ck.to_bytes().as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn tampered_config_is_rejected() {
        let mut bytes = sample().to_bytes();
        // config text starts after magic, version, hash, step, length
        bytes[32] = b'x';
        assert!(matches!(
            Checkpoint::read_from(bytes.as_slice()),
            Err(CheckpointError::HashMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            Checkpoint::read_from(&b"NOTACKPT........"[..]),
            Err(CheckpointError::BadMagic)
        ));
    }
}
