//! Baseline channel attention: squeeze-and-excitation, efficient channel
//! attention, style-based recalibration and global context blocks.
//!
//! Each block splits into context modelling (pooling), a transform that
//! produces per-channel logits, and a fusion step with the input. The
//! transform half is shared with the PKCAM interaction paths through
//! [`ChannelTransform`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamLayout};
use crate::tensor::{Graph, Var};

/// Variance floor added under the square root of SRM's style std.
pub const STD_EPS: f64 = 1e-8;

/// Reduction ratio used when a kind string omits one.
pub const DEFAULT_REDUCTION: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EcaKernel {
    /// Chosen from the channel count, see [`adaptive_eca_kernel`].
    Adaptive,
    Fixed(usize),
}

impl EcaKernel {
    pub fn resolve(self, channels: usize) -> usize {
        match self {
            EcaKernel::Adaptive => adaptive_eca_kernel(channels),
            EcaKernel::Fixed(k) => k,
        }
    }
}

/// ECA kernel size `|log2(C)/2 + 1/2|` rounded to odd (truncate, bump evens),
/// never below 3.
pub fn adaptive_eca_kernel(channels: usize) -> usize {
    let t = ((channels.max(1) as f64).log2() / 2.0 + 0.5).abs() as usize;
    let k = if t % 2 == 1 { t } else { t + 1 };
    k.max(3)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Se { reduction: usize },
    Eca { kernel: EcaKernel },
    Srm,
    Gc { reduction: usize },
}

impl AttentionKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionKind::Se { .. } => "se",
            AttentionKind::Eca { .. } => "eca",
            AttentionKind::Srm => "srm",
            AttentionKind::Gc { .. } => "gc",
        }
    }

    pub fn eca_adaptive() -> Self {
        AttentionKind::Eca {
            kernel: EcaKernel::Adaptive,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        match *self {
            AttentionKind::Se { reduction } | AttentionKind::Gc { reduction } => {
                if reduction == 0 || !channels.is_multiple_of(reduction) {
                    return Err(Error::config(format!(
                        "{}: reduction {reduction} must divide {channels} channels",
                        self.name()
                    )));
                }
            }
            AttentionKind::Eca { kernel } => {
                let k = kernel.resolve(channels);
                if k % 2 == 0 {
                    return Err(Error::config(format!("eca: kernel size {k} must be odd")));
                }
            }
            AttentionKind::Srm => {}
        }
        Ok(())
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionKind::Se { reduction } => write!(f, "se:{reduction}"),
            AttentionKind::Gc { reduction } => write!(f, "gc:{reduction}"),
            AttentionKind::Eca {
                kernel: EcaKernel::Adaptive,
            } => write!(f, "eca"),
            AttentionKind::Eca {
                kernel: EcaKernel::Fixed(k),
            } => write!(f, "eca:{k}"),
            AttentionKind::Srm => write!(f, "srm"),
        }
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    /// `se[:r]`, `eca[:k]`, `srm`, `gc[:r]`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        let number = |a: Option<&str>, default: usize| -> Result<usize> {
            match a {
                None => Ok(default),
                Some(a) => a
                    .parse()
                    .map_err(|_| Error::config(format!("bad attention argument '{a}' in '{s}'"))),
            }
        };
        let kind = match name {
            "se" => AttentionKind::Se {
                reduction: number(arg, DEFAULT_REDUCTION)?,
            },
            "gc" => AttentionKind::Gc {
                reduction: number(arg, DEFAULT_REDUCTION)?,
            },
            "eca" => AttentionKind::Eca {
                kernel: match arg {
                    None | Some("adaptive") => EcaKernel::Adaptive,
                    a => {
                        let k = number(a, 3)?;
                        if k % 2 == 0 {
                            return Err(Error::config(format!("eca kernel {k} must be odd")));
                        }
                        EcaKernel::Fixed(k)
                    }
                },
            },
            "srm" if arg.is_none() => AttentionKind::Srm,
            _ => return Err(Error::config(format!("unknown attention kind '{s}'"))),
        };
        Ok(kind)
    }
}

/// Dense layer `x·wᵀ (+ b)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(
        layout: &mut ParamLayout,
        prefix: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let init = Init::FanUniform { fan: din };
        Linear {
            weight: layout.add(format!("{prefix}.weight"), &[dout, din], init),
            bias: bias.then(|| layout.add(format!("{prefix}.bias"), &[dout], init)),
            din,
            dout,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.fc(x, p[self.weight], self.bias.map(|b| p[b]))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// The transform stage of a gating mechanism: pooled channel statistics in,
/// raw (pre-sigmoid) channel logits out.
#[derive(Clone, Debug)]
pub enum ChannelTransform {
    /// SE: `FC_C(ReLU(FC_{C/r}(y)))`.
    Bottleneck { reduce: Linear, expand: Linear },
    /// ECA: shared 1-D kernel sliding over the channel axis.
    ChannelConv { kernel: ParamId, size: usize },
    /// SRM: `Σ_d y_d ⊙ W[:, d]` with one weight per (channel, style).
    StyleIntegration { weight: ParamId, styles: usize },
}

impl ChannelTransform {
    /// `styles` is the number of pooled statistics the transform will
    /// receive; only SRM accepts more than one.
    pub fn build(
        kind: AttentionKind,
        channels: usize,
        styles: usize,
        layout: &mut ParamLayout,
        prefix: &str,
    ) -> Result<Self> {
        kind.validate(channels)?;
        match kind {
            AttentionKind::Se { reduction } => {
                let hidden = channels / reduction;
                Ok(ChannelTransform::Bottleneck {
                    reduce: Linear::new(layout, &format!("{prefix}.fc1"), channels, hidden, true),
                    expand: Linear::new(layout, &format!("{prefix}.fc2"), hidden, channels, true),
                })
            }
            AttentionKind::Eca { kernel } => {
                let size = kernel.resolve(channels);
                Ok(ChannelTransform::ChannelConv {
                    kernel: layout.add(
                        format!("{prefix}.kernel"),
                        &[size],
                        Init::FanUniform { fan: size },
                    ),
                    size,
                })
            }
            AttentionKind::Srm => Ok(ChannelTransform::StyleIntegration {
                weight: layout.add(
                    format!("{prefix}.weight"),
                    &[channels, styles],
                    Init::FanUniform { fan: styles },
                ),
                styles,
            }),
            AttentionKind::Gc { .. } => Err(Error::config(
                "gc uses additive fusion and cannot produce channel gates",
            )),
        }
    }

    /// Number of pooled statistics this transform consumes.
    pub fn styles(&self) -> usize {
        match self {
            ChannelTransform::StyleIntegration { styles, .. } => *styles,
            _ => 1,
        }
    }

    /// Pooled statistics of a feature map in the order the transform expects
    /// (mean, then std for two-style SRM).
    pub fn context(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mean = g.gap2d(x)?;
        if self.styles() == 2 {
            let std = g.std2d(x, STD_EPS)?;
            Ok(vec![mean, std])
        } else {
            Ok(vec![mean])
        }
    }

    pub fn logits(&self, g: &mut Graph, p: &Bound, styles: &[Var]) -> Result<Var> {
        if styles.len() != self.styles() {
            return Err(Error::contract(format!(
                "transform expects {} pooled statistics, got {}",
                self.styles(),
                styles.len()
            )));
        }
        match self {
            ChannelTransform::Bottleneck { reduce, expand } => {
                let h = reduce.forward(g, p, styles[0])?;
                let h = g.relu(h);
                expand.forward(g, p, h)
            }
            ChannelTransform::ChannelConv { kernel, size } => {
                g.conv1d(styles[0], p[*kernel], (size - 1) / 2)
            }
            ChannelTransform::StyleIntegration { weight, .. } => {
                let stack = g.stack(styles)?;
                g.depthwise_mix(stack, p[*weight])
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            ChannelTransform::Bottleneck { reduce, expand } => {
                let mut ids = reduce.param_ids();
                ids.extend(expand.param_ids());
                ids
            }
            ChannelTransform::ChannelConv { kernel, .. } => vec![*kernel],
            ChannelTransform::StyleIntegration { weight, .. } => vec![*weight],
        }
    }
}

/// SE, ECA or SRM: `F = σ(transform(pool(x))) ⊙ x`.
#[derive(Clone, Debug)]
pub struct GatedAttention {
    pub kind: AttentionKind,
    pub channels: usize,
    pub transform: ChannelTransform,
}

impl GatedAttention {
    pub fn gates(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let styles = self.transform.context(g, x)?;
        let z = self.transform.logits(g, p, &styles)?;
        Ok(g.sigmoid(z))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = self.gates(g, p, x)?;
        g.scale_channels(x, s)
    }
}

/// GC: softmax attention pooling from a 1×1 context conv, bottleneck
/// transform, additive fusion `F = Z + x`.
#[derive(Clone, Debug)]
pub struct GlobalContext {
    pub channels: usize,
    pub reduction: usize,
    pub context_weight: ParamId,
    pub context_bias: ParamId,
    pub reduce: Linear,
    pub expand: Linear,
}

impl GlobalContext {
    pub fn context(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let &[n, _, h, w] = g.shape(x) else {
            return Err(Error::dim("gc", 0, "expected [N,C,H,W]"));
        };
        let logits = g.conv2d(x, p[self.context_weight], 1, 0)?;
        let logits = g.channel_bias(logits, p[self.context_bias])?;
        let logits = g.reshape(logits, &[n, h * w])?;
        let attn = g.softmax(logits, 1)?;
        g.weighted_spatial_sum(x, attn)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.context(g, p, x)?;
        let h = self.reduce.forward(g, p, y)?;
        let h = g.relu(h);
        let z = self.expand.forward(g, p, h)?;
        g.add_channels(x, z)
    }
}

#[derive(Clone, Debug)]
pub enum Attention {
    Gated(GatedAttention),
    GlobalContext(GlobalContext),
}

impl Attention {
    pub fn build(
        kind: AttentionKind,
        channels: usize,
        layout: &mut ParamLayout,
        prefix: &str,
    ) -> Result<Self> {
        kind.validate(channels)?;
        match kind {
            AttentionKind::Gc { reduction } => {
                let hidden = channels / reduction;
                Ok(Attention::GlobalContext(GlobalContext {
                    channels,
                    reduction,
                    context_weight: layout.add(
                        format!("{prefix}.context.weight"),
                        &[1, channels, 1, 1],
                        Init::FanUniform { fan: channels },
                    ),
                    context_bias: layout.add(
                        format!("{prefix}.context.bias"),
                        &[1],
                        Init::Const(0.0),
                    ),
                    reduce: Linear::new(layout, &format!("{prefix}.fc1"), channels, hidden, true),
                    expand: Linear::new(layout, &format!("{prefix}.fc2"), hidden, channels, true),
                }))
            }
            _ => {
                let styles = if kind == AttentionKind::Srm { 2 } else { 1 };
                Ok(Attention::Gated(GatedAttention {
                    kind,
                    channels,
                    transform: ChannelTransform::build(kind, channels, styles, layout, prefix)?,
                }))
            }
        }
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            Attention::Gated(a) => a.kind,
            Attention::GlobalContext(gc) => AttentionKind::Gc {
                reduction: gc.reduction,
            },
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Attention::Gated(a) => a.channels,
            Attention::GlobalContext(gc) => gc.channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Attention::Gated(a) => a.forward(g, p, x),
            Attention::GlobalContext(gc) => gc.forward(g, p, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Attention::Gated(a) => a.transform.param_ids(),
            Attention::GlobalContext(gc) => {
                let mut ids = vec![gc.context_weight, gc.context_bias];
                ids.extend(gc.reduce.param_ids());
                ids.extend(gc.expand.param_ids());
                ids
            }
        }
    }
}

/// Closed-form parameter count for a standalone module on `channels`.
pub fn attention_param_count(kind: AttentionKind, channels: usize) -> usize {
    match kind {
        AttentionKind::Se { reduction } => bottleneck_params(channels, reduction),
        AttentionKind::Eca { kernel } => kernel.resolve(channels),
        AttentionKind::Srm => 2 * channels,
        AttentionKind::Gc { reduction } => channels + 1 + bottleneck_params(channels, reduction),
    }
}

fn bottleneck_params(c: usize, r: usize) -> usize {
    2 * c * c / r + c / r + c
}
