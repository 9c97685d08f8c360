//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! "BCTX"                  magic
//! u32                     format version
//! u64                     spec hash
//! u64 + bytes             spec as TOML text
//! u8                      weight mode (0 real, 1 binary)
//! u32, u64                training step, iterations
//! u64                     tensor count
//!   u32 + bytes           name
//!   u32, u64 * ndim       shape
//!   f64 * len             values
//! u32                     CRC-32 of everything above
//! ```

use std::path::Path;

use super::spec::NetworkSpec;
use super::{Network, TrainMeta};
use crate::blocks::WeightMode;
use crate::error::{Error, Result};
use crate::tensor::RealTensor;

pub const MAGIC: &[u8; 4] = b"BCTX";
pub const VERSION: u32 = 1;

/// Serialized network state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub weight_mode: WeightMode,
    pub meta: TrainMeta,
    pub tensors: Vec<(String, RealTensor)>,
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Self {
        Self {
            spec: net.spec().clone(),
            weight_mode: net.weight_mode,
            meta: net.meta,
            tensors: net.tensors().into_iter().map(|(n, t, _)| (n, t.clone())).collect(),
        }
    }

    /// Rebuilds the network this checkpoint was taken from.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::build(&self.spec, 0)?;
        net.load_state(self, true)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.spec.hash()?.to_le_bytes());
        let text = self.spec.to_toml()?;
        b.extend_from_slice(&(text.len() as u64).to_le_bytes());
        b.extend_from_slice(text.as_bytes());
        b.push(match self.weight_mode {
            WeightMode::Real => 0,
            WeightMode::Binary => 1,
        });
        b.extend_from_slice(&self.meta.step.to_le_bytes());
        b.extend_from_slice(&self.meta.iterations.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 4 {
            return Err(Error::Checksum);
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let hash = r.u64()?;
        let len = r.len_u64()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("spec is not UTF-8".into()))?;
        let spec = NetworkSpec::from_toml(text)?;
        if spec.hash()? != hash {
            return Err(Error::Format("spec hash does not match the embedded spec".into()));
        }
        let weight_mode = match r.take(1)?[0] {
            0 => WeightMode::Real,
            1 => WeightMode::Binary,
            m => return Err(Error::Format(format!("unknown weight mode {m}"))),
        };
        let meta = TrainMeta {
            step: r.u32()?,
            iterations: r.u64()?,
        };
        let count = r.len_u64()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, RealTensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            spec,
            weight_mode,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Network {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::from_network(self).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::load(path)?.to_network()
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}
