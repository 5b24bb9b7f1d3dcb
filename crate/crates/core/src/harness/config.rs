//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors. [`RunConfig::to_text`] writes every resolved key back out
//! in a fixed order, and parsing that text yields the same config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::attention::AttentionKind;
use crate::backbone::{
    build_backbone, AttentionConfig, BackboneSpec, Integration, LayerGraph, Stem,
};
use crate::error::{Error, Result};
use crate::pkcam::{Fusion, Interaction, Paths, PkcamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    Tiny,
    ResNet(usize),
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tiny" => Ok(Depth::Tiny),
            "18" => Ok(Depth::ResNet(18)),
            "34" => Ok(Depth::ResNet(34)),
            "50" => Ok(Depth::ResNet(50)),
            other => Err(Error::config(format!(
                "unknown depth '{other}' (tiny, 18, 34, 50)"
            ))),
        }
    }
}

impl std::fmt::Display for Depth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Depth::Tiny => f.write_str("tiny"),
            Depth::ResNet(d) => write!(f, "{d}"),
        }
    }
}

/// Attention selection as written in config files and on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionChoice {
    None,
    Local(AttentionKind),
    Pkcam,
}

impl FromStr for AttentionChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(AttentionChoice::None),
            "pkcam" => Ok(AttentionChoice::Pkcam),
            other => Ok(AttentionChoice::Local(other.parse()?)),
        }
    }
}

impl std::fmt::Display for AttentionChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttentionChoice::None => f.write_str("none"),
            AttentionChoice::Pkcam => f.write_str("pkcam"),
            AttentionChoice::Local(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Bundle,
    Images,
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "synthetic" => Ok(DataSource::Synthetic),
            "bundle" => Ok(DataSource::Bundle),
            "images" => Ok(DataSource::Images),
            other => Err(Error::config(format!("unknown data.source '{other}'"))),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Bundle => "bundle",
            DataSource::Images => "images",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: Depth,
    pub blocks: Vec<usize>,
    pub widths: Vec<usize>,
    /// `None` picks compact for tiny networks and the ImageNet stem otherwise.
    pub stem: Option<Stem>,
    /// `None` takes the class count from the data section.
    pub classes: Option<usize>,
    pub attention: AttentionChoice,
    pub policy: Integration,
    pub pkcam: PkcamConfig,
    pub stem_predecessor: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub log_wall_time: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            model: ModelConfig {
                depth: Depth::Tiny,
                blocks: vec![1, 1],
                widths: vec![8, 16],
                stem: None,
                classes: None,
                attention: AttentionChoice::Pkcam,
                policy: Integration::AllBlocks,
                pkcam: PkcamConfig::default(),
                stem_predecessor: true,
            },
            train: TrainConfig {
                epochs: 30,
                batch_size: 16,
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
                lr_step: 30,
                lr_gamma: 0.1,
                checkpoint_every: 0,
                log_wall_time: false,
            },
            data: DataConfig {
                source: DataSource::Synthetic,
                path: None,
                classes: 8,
                per_class: 32,
                height: 16,
                width: 16,
                seed: 1,
            },
        }
    }
}

/// Splits config text into `(key, value, line number)` triples.
pub(crate) fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {}: expected 'key = value'",
                i + 1
            )));
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        if let Some(prev) = seen.insert(k.clone(), i + 1) {
            return Err(Error::config(format!(
                "line {}: key '{k}' repeats line {prev}",
                i + 1
            )));
        }
        out.push((k, v, i + 1));
    }
    Ok(out)
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{v}'")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| value(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: expected true or false, got '{v}'"
        ))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v, line) in parse_pairs(text)? {
            cfg.set(&k, &v)
                .map_err(|e| Error::config(format!("line {line}: {}", strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Applies one key; the same keys accepted by [`RunConfig::parse`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = value(key, v)?,
            "model.depth" => m.depth = v.parse()?,
            "model.blocks" => m.blocks = list(key, v)?,
            "model.widths" => m.widths = list(key, v)?,
            "model.stem" => {
                m.stem = match v {
                    "auto" => None,
                    "compact" => Some(Stem::Compact),
                    "imagenet" => Some(Stem::ImageNet),
                    _ => {
                        return Err(Error::config(format!(
                            "{key}: expected auto, compact or imagenet"
                        )))
                    }
                }
            }
            "model.classes" => {
                m.classes = if v == "auto" {
                    None
                } else {
                    Some(value(key, v)?)
                }
            }
            "attention" => m.attention = v.parse()?,
            "attention.policy" => m.policy = v.parse()?,
            "pkcam.R" => m.pkcam.coverage = value(key, v)?,
            "pkcam.interaction" => m.pkcam.interaction = v.parse::<Interaction>()?,
            "pkcam.fusion" => m.pkcam.fusion = v.parse::<Fusion>()?,
            "pkcam.paths" => m.pkcam.paths = v.parse::<Paths>()?,
            "pkcam.gcci" => m.pkcam.gcci = v.parse()?,
            "pkcam.lcci" => m.pkcam.lcci = v.parse()?,
            "pkcam.stem_predecessor" => m.stem_predecessor = boolean(key, v)?,
            "train.epochs" => t.epochs = value(key, v)?,
            "train.batch_size" => t.batch_size = value(key, v)?,
            "train.lr" => t.lr = value(key, v)?,
            "train.momentum" => t.momentum = value(key, v)?,
            "train.weight_decay" => t.weight_decay = value(key, v)?,
            "train.lr_step" => t.lr_step = value(key, v)?,
            "train.lr_gamma" => t.lr_gamma = value(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = value(key, v)?,
            "train.log_wall_time" => t.log_wall_time = boolean(key, v)?,
            "data.source" => d.source = v.parse()?,
            "data.path" => d.path = Some(PathBuf::from(v)),
            "data.classes" => d.classes = value(key, v)?,
            "data.per_class" => d.per_class = value(key, v)?,
            "data.height" => d.height = value(key, v)?,
            "data.width" => d.width = value(key, v)?,
            "data.seed" => d.seed = value(key, v)?,
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.lr_step == 0 {
            return Err(Error::config(
                "train.epochs, train.batch_size and train.lr_step must be >= 1",
            ));
        }
        if !(t.lr > 0.0 && t.lr.is_finite())
            || !(0.0..1.0).contains(&t.momentum)
            || t.weight_decay < 0.0
        {
            return Err(Error::config(
                "train.lr must be positive, train.momentum in [0,1), weight decay >= 0",
            ));
        }
        let d = &self.data;
        if d.source != DataSource::Synthetic && d.path.is_none() {
            return Err(Error::config(format!(
                "data.source = {} needs data.path",
                d.source
            )));
        }
        if d.source == DataSource::Synthetic
            && (d.classes == 0 || d.per_class == 0 || d.height == 0 || d.width == 0)
        {
            return Err(Error::config(
                "synthetic data needs positive classes, per_class, height, width",
            ));
        }
        if self.model.attention == AttentionChoice::Pkcam {
            self.model.pkcam.validate()?;
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.model.classes.unwrap_or(self.data.classes)
    }

    pub fn backbone_spec(&self) -> Result<BackboneSpec> {
        let m = &self.model;
        let mut spec = match m.depth {
            Depth::Tiny => BackboneSpec::tiny(&m.blocks, &m.widths, self.classes())?,
            Depth::ResNet(d) => BackboneSpec::resnet(d, self.classes())?,
        };
        if let Some(stem) = m.stem {
            spec = spec.with_stem(stem);
        }
        spec.cache_stem = m.stem_predecessor;
        Ok(spec)
    }

    pub fn attention_config(&self) -> AttentionConfig {
        match self.model.attention {
            AttentionChoice::None => AttentionConfig::None,
            AttentionChoice::Local(k) => AttentionConfig::Local(k),
            AttentionChoice::Pkcam => AttentionConfig::Pkcam(self.model.pkcam),
        }
    }

    pub fn build(&self) -> Result<LayerGraph> {
        build_backbone(
            self.backbone_spec()?,
            self.attention_config(),
            self.model.policy,
        )
    }

    /// Every resolved key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let stem = match m.stem {
            None => "auto",
            Some(Stem::Compact) => "compact",
            Some(Stem::ImageNet) => "imagenet",
        };
        let classes = m.classes.map_or("auto".to_string(), |c| c.to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("model.depth", m.depth.to_string());
        kv("model.blocks", join(&m.blocks));
        kv("model.widths", join(&m.widths));
        kv("model.stem", stem.to_string());
        kv("model.classes", classes);
        kv("attention", m.attention.to_string());
        kv("attention.policy", m.policy.to_string());
        kv("pkcam.R", m.pkcam.coverage.to_string());
        kv("pkcam.interaction", m.pkcam.interaction.to_string());
        kv("pkcam.fusion", m.pkcam.fusion.to_string());
        kv("pkcam.paths", m.pkcam.paths.to_string());
        kv("pkcam.gcci", m.pkcam.gcci.to_string());
        kv("pkcam.lcci", m.pkcam.lcci.to_string());
        kv("pkcam.stem_predecessor", m.stem_predecessor.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", format!("{:?}", t.lr));
        kv("train.momentum", format!("{:?}", t.momentum));
        kv("train.weight_decay", format!("{:?}", t.weight_decay));
        kv("train.lr_step", t.lr_step.to_string());
        kv("train.lr_gamma", format!("{:?}", t.lr_gamma));
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("train.log_wall_time", t.log_wall_time.to_string());
        kv("data.source", d.source.to_string());
        if let Some(p) = &d.path {
            kv("data.path", p.display().to_string());
        }
        kv("data.classes", d.classes.to_string());
        kv("data.per_class", d.per_class.to_string());
        kv("data.height", d.height.to_string());
        kv("data.width", d.width.to_string());
        kv("data.seed", d.seed.to_string());
        s
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}
