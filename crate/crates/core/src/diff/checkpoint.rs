//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RARF" | version u32 | config digest [32] | n_params u32
//! per parameter: name_len u32 | name utf-8 | trainable u8 | rank u8
//!                | dims u64 × rank | values f64 × numel
//! norm mean f64 × 5 | norm std f64 × 5 | coord mean f64 × 3 | coord std f64 × 3
//! ```

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::{numel, Tensor, MAX_RANK};
use crate::data::{CoordStats, NormStats, N_VARS};
use crate::error::{Error, Result};
use crate::rng::sha256_hex;

pub const MAGIC: &[u8; 4] = b"RARF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// SHA-256 of the canonical model configuration.
    pub config_digest: [u8; 32],
    pub params: ParamStore,
    pub norm_stats: NormStats,
    pub coord_stats: CoordStats,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn digest_hex(&self) -> String {
        self.config_digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.n_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.trainable as u8);
            out.push(p.tensor.shape.len() as u8);
            for &d in &p.tensor.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let stats = self
            .norm_stats
            .mean
            .iter()
            .chain(&self.norm_stats.std)
            .chain(&self.coord_stats.mean)
            .chain(&self.coord_stats.std);
        for v in stats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let config_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
                .to_string();
            let trainable = r.u8()? != 0;
            let rank = r.u8()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("{name}: rank {rank} too large")));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = numel(&shape);
            if count.saturating_mul(8) > buf.len() {
                return Err(Error::Checkpoint(format!("{name}: implausible shape {shape:?}")));
            }
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.insert(name.clone(), Tensor::new(shape, data)?)?;
            params.get_mut(&name).expect("just inserted").trainable = trainable;
        }
        let mut read = |k: usize| (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>();
        let (nm, ns) = (read(N_VARS)?, read(N_VARS)?);
        let (cm, cs) = (read(3)?, read(3)?);
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            config_digest,
            params,
            norm_stats: NormStats {
                mean: nm.try_into().unwrap(),
                std: ns.try_into().unwrap(),
            },
            coord_stats: CoordStats {
                mean: cm.try_into().unwrap(),
                std: cs.try_into().unwrap(),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the checkpoint was produced under `digest`.
    pub fn verify_digest(&self, digest: &[u8; 32]) -> Result<()> {
        if &self.config_digest != digest {
            return Err(Error::Checkpoint(
                "checkpoint was trained with a different model configuration".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the serialized bytes.
    pub fn file_digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        let mut rng = rng_for(4, "ckpt");
        p.insert_glorot("a.w", 3, 2, &mut rng).unwrap();
        p.insert("b", Tensor::from_vec(vec![f64::MIN_POSITIVE, -0.0, 1e300]))
            .unwrap();
        p.insert("s", Tensor::scalar(std::f64::consts::PI)).unwrap();
        p.get_mut("b").unwrap().trainable = false;
        Checkpoint {
            config_digest: [7; 32],
            params: p,
            norm_stats: NormStats {
                mean: [1.0, 2.0, 3.0, 4.0, 5.0],
                std: [0.1, 0.2, 0.3, 0.4, 0.5],
            },
            coord_stats: CoordStats {
                mean: [45.0, -122.0, 500.0],
                std: [1.0, 1.1, 300.0],
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let b = &back.params.get("b").unwrap();
        assert!(!b.trainable);
        assert_eq!(b.tensor.data[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(&bytes[..4], b"RARF");
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn digest_mismatch_is_reported() {
        let c = sample();
        assert!(c.verify_digest(&[7; 32]).is_ok());
        assert!(c.verify_digest(&[8; 32]).is_err());
    }
}
