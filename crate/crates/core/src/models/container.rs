//! Versioned flat binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"GIAT"
//! u32    version
//! u32    metadata length, then that many bytes of JSON
//! u32    tensor count
//! per tensor: u32 name length, name bytes, u32 rank, rank x u64 dims
//! payloads: every tensor's entries as f64, in manifest order
//! ```

use std::fs;
use std::path::Path;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::classifier::{ClassifierModel, LayerSpec};
use super::generator::{GenBlock, GeneratorModel};
use super::report::{BnStats, GradientReport};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GIAT";
pub const VERSION: u32 = 1;

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let mlen = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(mlen)?).map_err(|e| format!("metadata: {e}"))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| "tensor name is not utf-8")?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            manifest.push((name, dims));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, dims) in manifest {
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dimension overflow")?;
            let raw = r.take(n.checked_mul(8).ok_or("dimension overflow")?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(dims, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }

    fn kind(&self) -> Option<&str> {
        self.meta.get("kind")?.as_str()
    }

    fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::format(path, format!("expected a {kind} container, found {other:?}"))),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn named(prefix: &str, ts: &[Tensor]) -> Vec<(String, Tensor)> {
    ts.iter().enumerate().map(|(i, t)| (format!("{prefix}{i}"), t.clone())).collect()
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, e.to_string())
}

#[derive(Serialize, Deserialize)]
struct ReportMeta {
    model_id: String,
    batch_size: usize,
    labels: Option<Vec<usize>>,
    bn_layers: Option<usize>,
    round: usize,
    node: usize,
    gradients: usize,
}

impl ClassifierModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "classifier", "layers": self.specs() });
        Container { meta, tensors: named("theta", &self.param_tensors()) }.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        c.expect_kind("classifier", path)?;
        let specs: Vec<LayerSpec> =
            serde_json::from_value(c.meta["layers"].clone()).map_err(|e| format_err(path, e))?;
        Self::from_params(specs, c.tensors.into_iter().map(|(_, t)| t).collect())
    }
}

impl GeneratorModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "generator",
            "latent_dim": self.latent_dim(),
            "blocks": self.blocks(),
        });
        Container { meta, tensors: named("w", self.params()) }.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        c.expect_kind("generator", path)?;
        let k = c.meta["latent_dim"].as_u64().ok_or_else(|| format_err(path, "missing latent_dim"))? as usize;
        let blocks: Vec<GenBlock> =
            serde_json::from_value(c.meta["blocks"].clone()).map_err(|e| format_err(path, e))?;
        Self::from_params(k, blocks, c.tensors.into_iter().map(|(_, t)| t).collect())
    }
}

impl GradientReport {
    pub fn to_container(&self) -> Container {
        let meta = ReportMeta {
            model_id: self.model_id.clone(),
            batch_size: self.batch_size,
            labels: self.labels.clone(),
            bn_layers: self.bn_stats.as_ref().map(BnStats::layers),
            round: self.round,
            node: self.node,
            gradients: self.gradients.len(),
        };
        let mut meta = serde_json::to_value(meta).expect("serializable");
        meta["kind"] = "gradient".into();
        let mut tensors = named("g", &self.gradients);
        if let Some(bn) = &self.bn_stats {
            tensors.extend(named("bn_mean", &bn.means));
            tensors.extend(named("bn_var", &bn.variances));
        }
        Container { meta, tensors }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        c.expect_kind("gradient", path)?;
        let m: ReportMeta = serde_json::from_value(c.meta.clone()).map_err(|e| format_err(path, e))?;
        let mut ts = c.tensors.into_iter().map(|(_, t)| t);
        let gradients: Vec<Tensor> = ts.by_ref().take(m.gradients).collect();
        let bn_stats = m.bn_layers.map(|n| BnStats {
            means: ts.by_ref().take(n).collect(),
            variances: ts.by_ref().take(n).collect(),
        });
        if gradients.len() != m.gradients || ts.next().is_some() {
            return Err(format_err(path, "tensor count does not match metadata"));
        }
        if let Some(bn) = &bn_stats {
            bn.validate().map_err(|e| format_err(path, e))?;
        }
        Ok(Self {
            model_id: m.model_id,
            gradients,
            batch_size: m.batch_size,
            labels: m.labels,
            bn_stats,
            round: m.round,
            node: m.node,
        })
    }
}
