//! Binary checkpoints.
//!
//! ```text
//! "PKCAM\0" | u32 version | u32 config length | config text (UTF-8)
//! repeated until EOF:
//!   u32 name length | name | u32 rank | rank × u32 dims | f64 data
//! ```
//!
//! The config text is the run's echoed config followed by
//! `checkpoint.epoch` and `checkpoint.mean` lines. All integers and floats
//! are little-endian.

use std::fs;
use std::path::Path;

use super::config::{parse_pairs, RunConfig};
use super::data::Reader;
use crate::backbone::LayerGraph;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PKCAM\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Per-channel input means subtracted during training.
    pub means: Vec<f64>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(
        config: &RunConfig,
        graph: &LayerGraph,
        params: &ParamStore,
        epoch: usize,
        means: &[f64],
    ) -> Self {
        let named = graph
            .layout()
            .specs()
            .iter()
            .zip(params.tensors())
            .map(|(s, t)| (s.name.clone(), t.clone()))
            .collect();
        Checkpoint {
            config: config.clone(),
            epoch,
            means: means.to_vec(),
            params: named,
        }
    }

    fn config_text(&self) -> String {
        let means: Vec<String> = self.means.iter().map(|m| format!("{m:?}")).collect();
        format!(
            "{}checkpoint.epoch = {}\ncheckpoint.mean = {}\n",
            self.config.to_text(),
            self.epoch,
            means.join(",")
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected PKCAM\\0"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                6,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let len = r.u32()? as usize;
        let text_at = r.pos as u64;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::format(text_at, format!("config text is not UTF-8: {e}")))?;
        let (config, epoch, means) =
            parse_config_text(text).map_err(|e| Error::format(text_at, e.to_string()))?;
        let mut params = Vec::new();
        while r.pos < bytes.len() {
            let at = r.pos as u64;
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t =
                Tensor::new(&dims, data).map_err(|e| Error::format(at, format!("{name}: {e}")))?;
            params.push((name, t));
        }
        Ok(Checkpoint {
            config,
            epoch,
            means,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the network and its parameters; names and shapes must match
    /// the layout the config produces.
    pub fn restore(&self) -> Result<(LayerGraph, ParamStore)> {
        let graph = self.config.build()?;
        let params = ParamStore::from_named(graph.layout(), self.params.clone())?;
        Ok((graph, params))
    }
}

fn parse_config_text(text: &str) -> Result<(RunConfig, usize, Vec<f64>)> {
    let mut run = String::new();
    let mut epoch = None;
    let mut means = None;
    for (k, v, _) in parse_pairs(text)? {
        match k.as_str() {
            "checkpoint.epoch" => {
                epoch = Some(
                    v.parse()
                        .map_err(|_| Error::config(format!("bad epoch '{v}'")))?,
                );
            }
            "checkpoint.mean" => {
                let parsed = v
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::config(format!("bad means '{v}'")))?;
                means = Some(parsed);
            }
            _ => run.push_str(&format!("{k} = {v}\n")),
        }
    }
    let (Some(epoch), Some(means)) = (epoch, means) else {
        return Err(Error::config(
            "checkpoint config lacks checkpoint.epoch or checkpoint.mean",
        ));
    };
    Ok((RunConfig::parse(&run)?, epoch, means))
}
