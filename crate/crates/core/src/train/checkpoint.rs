use std::fmt::Write as _;
use std::path::Path;

use super::config::{parse_pairs, RunConfig};
use super::model::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DCLM";
pub const VERSION: u32 = 1;

/// Which loop wrote a checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    #[default]
    Train,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
        }
    }
}

/// Loop position stored next to the config.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainState {
    pub stage: Stage,
    /// Epochs completed.
    pub epoch: usize,
    /// Training-loop generator state.
    pub rng: u64,
    pub adam_step: u64,
}

/// Config snapshot plus named fp32 tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    pub entries: Vec<(String, Tensor<f32>)>,
}

fn truncated(what: &'static str) -> Error {
    Error::Truncated { what }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    /// Snapshot of every network tensor (buffers included) plus any extra
    /// entries such as optimizer moments.
    pub fn capture(
        net: &Network<f32>,
        config: &RunConfig,
        state: TrainState,
        extra: Vec<(String, Tensor<f32>)>,
    ) -> Self {
        let mut entries: Vec<(String, Tensor<f32>)> = net
            .named_tensors()
            .into_iter()
            .map(|(n, t, _)| (n, Tensor::from_vec(t.to_vec(), t.shape()).expect("same shape")))
            .collect();
        entries.extend(extra);
        Self {
            config: RunConfig {
                net: net.cfg.clone(),
                train: config.train.clone(),
            },
            state,
            entries,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn config_blob(&self) -> String {
        let mut s = self.config.to_text();
        let _ = writeln!(s, "state.stage = {}", self.state.stage.name());
        let _ = writeln!(s, "state.epoch = {}", self.state.epoch);
        let _ = writeln!(s, "state.rng = {}", self.state.rng);
        let _ = writeln!(s, "state.adam_step = {}", self.state.adam_step);
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blob = self.config_blob();
        let mut out = Vec::with_capacity(16 + blob.len() + self.entries.iter().map(|(_, t)| 4 * t.numel() + 64).sum::<usize>());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large: {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf };
        let magic: [u8; 4] = match r.take(4, "magic") {
            Ok(m) => m.try_into().expect("4 bytes"),
            Err(_) => {
                let mut found = [0u8; 4];
                found[..buf.len()].copy_from_slice(buf);
                return Err(Error::BadMagic { found });
            }
        };
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let blob_len = r.u32("config length")? as usize;
        let blob = std::str::from_utf8(r.take(blob_len, "config blob")?)
            .map_err(|_| Error::Checkpoint("config blob is not UTF-8".into()))?;
        let mut config = RunConfig::default();
        let mut state = TrainState::default();
        let bad = |k: &str, v: &str| Error::Checkpoint(format!("bad state value `{k} = {v}`"));
        for (k, v) in parse_pairs(blob).map_err(|e| Error::Checkpoint(e.to_string()))? {
            match k.as_str() {
                "state.stage" => {
                    state.stage = match v.as_str() {
                        "pretrain" => Stage::Pretrain,
                        "train" => Stage::Train,
                        _ => return Err(bad(&k, &v)),
                    }
                }
                "state.epoch" => state.epoch = v.parse().map_err(|_| bad(&k, &v))?,
                "state.rng" => state.rng = v.parse().map_err(|_| bad(&k, &v))?,
                "state.adam_step" => state.adam_step = v.parse().map_err(|_| bad(&k, &v))?,
                _ => config.set(&k, &v).map_err(|e| Error::Checkpoint(e.to_string()))?,
            }
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16("entry name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "entry name")?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8("entry rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("entry dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let bytes = r.take(n.checked_mul(4).ok_or_else(|| truncated("entry data"))?, "entry data")?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            entries.push((name, Tensor::from_vec(data, &shape)?));
        }
        if !r.buf.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len())));
        }
        Ok(Self { config, state, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Copies stored values into every network tensor whose name starts
    /// with `prefix` (all of them for `""`). Each such tensor must be
    /// present with the same shape. Returns the number of tensors written.
    pub fn apply(&self, net: &Network<f32>, prefix: &str) -> Result<usize> {
        let mut written = 0;
        for (name, t, _) in net.named_tensors() {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, network expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.set_data(&src.data())?;
            written += 1;
        }
        if written == 0 {
            return Err(Error::Checkpoint(format!("no network tensors match prefix `{prefix}`")));
        }
        Ok(written)
    }

    /// Entries that are not network tensors (optimizer state etc.).
    pub fn extras(&self, net: &Network<f32>) -> Vec<(String, Tensor<f32>)> {
        let names: std::collections::HashSet<String> = net.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        self.entries.iter().filter(|(n, _)| !names.contains(n)).cloned().collect()
    }
}
