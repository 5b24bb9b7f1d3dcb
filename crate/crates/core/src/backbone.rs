//! Residual backbones with per-block attention.
//!
//! Attention sits after the last convolution of each residual branch and
//! before the skip addition. PKCAM blocks read a [`FeatureCache`] holding the
//! stem output and the output of the final block of every earlier stage.

use std::fmt;
use std::str::FromStr;

use crate::attention::{Attention, AttentionKind, Linear};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamLayout, ParamStore};
use crate::pkcam::{FeatureCache, Pkcam, PkcamConfig};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stem {
    /// 7×7 stride-2 convolution followed by 3×3 stride-2 max pooling.
    ImageNet,
    /// Single 3×3 stride-1 convolution, no pooling (small inputs).
    Compact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub width: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub block: BlockKind,
    pub stem: Stem,
    pub stem_width: usize,
    pub stages: Vec<StageSpec>,
    pub in_channels: usize,
    pub classes: usize,
    /// Whether the stem output is cached as a predecessor for PKCAM.
    pub cache_stem: bool,
}

impl BackboneSpec {
    /// Standard ImageNet ResNet-18/34/50.
    pub fn resnet(depth: usize, classes: usize) -> Result<Self> {
        let (block, counts) = match depth {
            18 => (BlockKind::Basic, [2, 2, 2, 2]),
            34 => (BlockKind::Basic, [3, 4, 6, 3]),
            50 => (BlockKind::Bottleneck, [3, 4, 6, 3]),
            other => return Err(Error::config(format!("unsupported ResNet depth {other}"))),
        };
        let stages = counts
            .iter()
            .zip([64, 128, 256, 512])
            .enumerate()
            .map(|(i, (&blocks, width))| StageSpec {
                blocks,
                width,
                stride: if i == 0 { 1 } else { 2 },
            })
            .collect();
        let spec = BackboneSpec {
            block,
            stem: Stem::ImageNet,
            stem_width: 64,
            stages,
            in_channels: 3,
            classes,
            cache_stem: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Desk-scale basic-block network with a compact stem.
    pub fn tiny(blocks: &[usize], widths: &[usize], classes: usize) -> Result<Self> {
        if blocks.len() != widths.len() || blocks.is_empty() {
            return Err(Error::config("tiny backbone needs one width per stage"));
        }
        let stages = blocks
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (&blocks, &width))| StageSpec {
                blocks,
                width,
                stride: if i == 0 { 1 } else { 2 },
            })
            .collect();
        let spec = BackboneSpec {
            block: BlockKind::Basic,
            stem: Stem::Compact,
            stem_width: widths[0],
            stages,
            in_channels: 3,
            classes,
            cache_stem: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_stem(mut self, stem: Stem) -> Self {
        self.stem = stem;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.classes == 0 || self.stem_width == 0 {
            return Err(Error::config(
                "backbone needs stages, a stem width and classes",
            ));
        }
        let mut prev = self.stem_width;
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.width == 0 || s.stride == 0 {
                return Err(Error::config(format!("stage {} has a zero field", i + 1)));
            }
            let out = s.width * self.block.expansion();
            if out < prev {
                return Err(Error::config(format!(
                    "stage {} narrows channels from {prev} to {out}; widths must be non-decreasing",
                    i + 1
                )));
            }
            prev = out;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integration {
    AllBlocks,
    LastBlockPerStage,
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Integration::AllBlocks => "all",
            Integration::LastBlockPerStage => "last",
        })
    }
}

impl FromStr for Integration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(Integration::AllBlocks),
            "last" => Ok(Integration::LastBlockPerStage),
            other => Err(Error::config(format!(
                "unknown integration policy '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionConfig {
    None,
    /// The same standalone module on every block.
    Local(AttentionKind),
    /// PKCAM placed per the integration policy; blocks without PKCAM carry
    /// local attention of the LCCI kind.
    Pkcam(PkcamConfig),
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Per-channel learned scale and shift.
#[derive(Clone, Debug)]
pub struct NormLite {
    pub scale: ParamId,
    pub shift: ParamId,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub name: String,
    pub conv: ConvLayer,
    pub norm: NormLite,
}

impl ConvNorm {
    /// `norm_scale` is the initial per-channel scale; the last norm of each
    /// residual branch starts at zero so every block begins as an identity.
    fn new(
        layout: &mut ParamLayout,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        stride: usize,
        norm_scale: f64,
    ) -> Self {
        let weight = layout.add(
            format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            Init::KaimingNormal {
                fan: cin * kernel * kernel,
            },
        );
        let norm_name = name
            .replace("conv", "norm")
            .replace("downsample", "downsample.norm");
        let scale = layout.add(
            format!("{norm_name}.scale"),
            &[cout],
            Init::Const(norm_scale),
        );
        let shift = layout.add(format!("{norm_name}.shift"), &[cout], Init::Const(0.0));
        ConvNorm {
            name: name.to_string(),
            conv: ConvLayer {
                weight,
                cin,
                cout,
                kernel,
                stride,
                pad: kernel / 2,
            },
            norm: NormLite {
                scale,
                shift,
                channels: cout,
            },
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.conv.weight], self.conv.stride, self.conv.pad)?;
        g.channel_affine(y, p[self.norm.scale], p[self.norm.shift])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.conv.weight, self.norm.scale, self.norm.shift]
    }
}

#[derive(Clone, Debug)]
pub enum BlockAttention {
    None,
    Local(Attention),
    Pkcam(Pkcam),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub id: usize,
    pub name: String,
    pub stage: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub convs: Vec<ConvNorm>,
    pub shortcut: Option<ConvNorm>,
    pub attention: BlockAttention,
    pub stage_end: bool,
}

#[derive(Clone, Debug)]
pub struct ModuleInfo {
    pub name: String,
    pub params: Vec<ParamId>,
}

/// A built backbone: topology, attention placement and parameter layout.
#[derive(Clone, Debug)]
pub struct LayerGraph {
    pub spec: BackboneSpec,
    pub attention: AttentionConfig,
    pub policy: Integration,
    pub stem: ConvNorm,
    pub blocks: Vec<Block>,
    pub head: Linear,
    layout: ParamLayout,
    modules: Vec<ModuleInfo>,
}

/// Block id under which the stem output is cached.
pub const STEM_ID: usize = 0;

/// Logits plus the cached stage endpoints, in execution order.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    pub endpoints: Vec<(usize, Var)>,
}

pub fn build_backbone(
    spec: BackboneSpec,
    attention: AttentionConfig,
    policy: Integration,
) -> Result<LayerGraph> {
    spec.validate()?;
    if let AttentionConfig::Pkcam(cfg) = &attention {
        cfg.validate()?;
    }
    let mut layout = ParamLayout::new();
    let mut modules = Vec::new();
    let (stem_kernel, stem_stride) = match spec.stem {
        Stem::ImageNet => (7, 2),
        Stem::Compact => (3, 1),
    };
    let stem = ConvNorm::new(
        &mut layout,
        "stem.conv",
        (spec.in_channels, spec.stem_width),
        stem_kernel,
        stem_stride,
        1.0,
    );
    modules.push(ModuleInfo {
        name: "stem".into(),
        params: stem.param_ids(),
    });

    let mut in_ch = spec.stem_width;
    let mut blocks = Vec::new();
    let expansion = spec.block.expansion();
    for (si, stage) in spec.stages.iter().enumerate() {
        // Cached outputs available to this stage: the stem, then one per earlier stage.
        let endpoints = usize::from(spec.cache_stem) + si;
        let out_ch = stage.width * expansion;
        for bi in 0..stage.blocks {
            let name = format!("layer{}.{}", si + 1, bi);
            let stride = if bi == 0 { stage.stride } else { 1 };
            let convs = match spec.block {
                BlockKind::Basic => vec![
                    ConvNorm::new(
                        &mut layout,
                        &format!("{name}.conv1"),
                        (in_ch, stage.width),
                        3,
                        stride,
                        1.0,
                    ),
                    ConvNorm::new(
                        &mut layout,
                        &format!("{name}.conv2"),
                        (stage.width, out_ch),
                        3,
                        1,
                        0.0,
                    ),
                ],
                BlockKind::Bottleneck => vec![
                    ConvNorm::new(
                        &mut layout,
                        &format!("{name}.conv1"),
                        (in_ch, stage.width),
                        1,
                        1,
                        1.0,
                    ),
                    ConvNorm::new(
                        &mut layout,
                        &format!("{name}.conv2"),
                        (stage.width, stage.width),
                        3,
                        stride,
                        1.0,
                    ),
                    ConvNorm::new(
                        &mut layout,
                        &format!("{name}.conv3"),
                        (stage.width, out_ch),
                        1,
                        1,
                        0.0,
                    ),
                ],
            };
            let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
                ConvNorm::new(
                    &mut layout,
                    &format!("{name}.downsample"),
                    (in_ch, out_ch),
                    1,
                    stride,
                    1.0,
                )
            });
            let mut params: Vec<ParamId> = convs.iter().flat_map(ConvNorm::param_ids).collect();
            params.extend(shortcut.iter().flat_map(ConvNorm::param_ids));
            modules.push(ModuleInfo {
                name: name.clone(),
                params,
            });

            let last = bi + 1 == stage.blocks;
            let attn_name = format!("{name}.attn");
            let block_attention = match attention {
                AttentionConfig::None => BlockAttention::None,
                AttentionConfig::Local(kind) => {
                    BlockAttention::Local(Attention::build(kind, out_ch, &mut layout, &attn_name)?)
                }
                AttentionConfig::Pkcam(cfg) => {
                    if policy == Integration::AllBlocks || last {
                        BlockAttention::Pkcam(Pkcam::build(
                            cfg,
                            out_ch,
                            endpoints,
                            &mut layout,
                            &attn_name,
                        )?)
                    } else {
                        BlockAttention::Local(Attention::build(
                            cfg.lcci,
                            out_ch,
                            &mut layout,
                            &attn_name,
                        )?)
                    }
                }
            };
            match &block_attention {
                BlockAttention::None => {}
                BlockAttention::Local(a) => modules.push(ModuleInfo {
                    name: attn_name.clone(),
                    params: a.param_ids(),
                }),
                BlockAttention::Pkcam(m) => {
                    for (sub, ids) in m.submodules() {
                        modules.push(ModuleInfo {
                            name: format!("{attn_name}.{sub}"),
                            params: ids,
                        });
                    }
                }
            }
            blocks.push(Block {
                id: blocks.len() + 1,
                name,
                stage: si,
                in_channels: in_ch,
                out_channels: out_ch,
                convs,
                shortcut,
                attention: block_attention,
                stage_end: last,
            });
            in_ch = out_ch;
        }
    }
    let head = Linear::new(&mut layout, "head", in_ch, spec.classes, true);
    modules.push(ModuleInfo {
        name: "head".into(),
        params: head.param_ids(),
    });
    Ok(LayerGraph {
        spec,
        attention,
        policy,
        stem,
        blocks,
        head,
        layout,
        modules,
    })
}

impl LayerGraph {
    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Parameter groups used for reporting, including parameter-free
    /// sub-modules.
    pub fn modules(&self) -> &[ModuleInfo] {
        &self.modules
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn coverage(&self) -> usize {
        match self.attention {
            AttentionConfig::Pkcam(cfg) => cfg.coverage,
            _ => 0,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, x)?.logits)
    }

    pub fn forward_traced(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<ForwardTrace> {
        let shape = g.shape(x);
        if shape.len() != 4 {
            return Err(Error::dim(
                "backbone",
                0,
                format!("expected [N,C,H,W], got {shape:?}"),
            ));
        }
        if shape[1] != self.spec.in_channels {
            return Err(Error::dim(
                "backbone",
                1,
                format!(
                    "expected {} input channels, got {}",
                    self.spec.in_channels, shape[1]
                ),
            ));
        }
        let mut cache = FeatureCache::new(self.coverage());
        let mut endpoints = Vec::new();
        let mut h = self.stem.forward(g, p, x)?;
        h = g.relu(h);
        if self.spec.stem == Stem::ImageNet {
            h = g.max_pool2d(h, 3, 2, 1)?;
        }
        if self.spec.cache_stem {
            cache.push(STEM_ID, h);
            endpoints.push((STEM_ID, h));
        }
        for block in &self.blocks {
            let mut branch = h;
            for (i, cn) in block.convs.iter().enumerate() {
                branch = cn.forward(g, p, branch)?;
                if i + 1 < block.convs.len() {
                    branch = g.relu(branch);
                }
            }
            branch = match &block.attention {
                BlockAttention::None => branch,
                BlockAttention::Local(a) => a.forward(g, p, branch)?,
                BlockAttention::Pkcam(m) => m.forward(g, p, branch, &cache)?,
            };
            let skip = match &block.shortcut {
                Some(sc) => sc.forward(g, p, h)?,
                None => h,
            };
            let sum = g.add(branch, skip)?;
            h = g.relu(sum);
            if block.stage_end {
                cache.push(block.id, h);
                endpoints.push((block.id, h));
            }
        }
        let pooled = g.gap2d(h)?;
        let logits = self.head.forward(g, p, pooled)?;
        Ok(ForwardTrace { logits, endpoints })
    }

    /// Convenience inference pass without gradient bookkeeping on inputs.
    pub fn infer(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let logits = self.forward(&mut g, &p, xv)?;
        Ok(g.value(logits).clone())
    }
}
