//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "S3CE" | u32 version | u32 block count
//! per block: u16 name length | name (UTF-8) | u8 ndim | u32 dims[ndim] | f32 data[prod(dims)]
//! u32 epoch
//! ```
//!
//! Blocks are every parameter and running buffer of the network, in
//! registration order. The run configuration is stored next to the file as
//! `<checkpoint>.cfg` in the `key = value` format.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"S3CE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub blocks: Vec<(String, Tensor<f32>)>,
    pub epoch: u32,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, epoch: u32) -> Self {
        Self {
            blocks: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            epoch,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.blocks.len()).map_err(|_| Error::Format("too many blocks".into()))?.to_le_bytes());
        for (name, t) in &self.blocks {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("block name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Format(format!("{name}: too many dims")))?;
            out.push(ndim);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("{name}: dim {d} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32("block count")?;
        let mut blocks = Vec::new();
        for i in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format(format!("block {i}: name is not UTF-8")))?
                .to_string();
            let ndim = r.u8("ndim")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("{name}: shape {shape:?} overflows")))?;
            let raw = r.take(numel, &format!("data of {name}"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            blocks.push((name, Tensor::new(shape, data)?));
        }
        let epoch = r.u32("epoch")?;
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { blocks, epoch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies every block into `store`, which must hold exactly the same
    /// names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.blocks.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} blocks, model expects {}",
                self.blocks.len(),
                store.len()
            )));
        }
        let mut src = ParamStore::new();
        for (name, t) in &self.blocks {
            src.add_buffer(name.clone(), t.clone());
        }
        store.load_from(&src)
    }
}

pub fn config_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Writes the checkpoint and its configuration sidecar.
pub fn save_model(path: &Path, net: &Network<f32>, epoch: u32) -> Result<()> {
    Checkpoint::from_store(&net.store, epoch).save(path)?;
    fs::write(config_path(path), net.cfg.to_text())?;
    Ok(())
}

/// Rebuilds a network from a checkpoint and its sidecar. The class count is
/// read from the global head's shape. Returns the network and the epoch.
pub fn load_model(path: &Path) -> Result<(Network<f32>, u32)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg_file = config_path(path);
    let cfg = Config::load(&cfg_file).map_err(|e| match e {
        Error::Io(io) => Error::Format(format!("{}: {io}", cfg_file.display())),
        other => other,
    })?;
    let classes = ckpt
        .blocks
        .iter()
        .find(|(n, _)| n == "head.global.weight")
        .and_then(|(_, t)| t.shape().get(1).copied())
        .ok_or_else(|| Error::Format("checkpoint has no head.global.weight".into()))?;
    let mut net = Network::new(&cfg, classes)?;
    ckpt.restore_into(&mut net.store)?;
    Ok((net, ckpt.epoch))
}
