//! Previous-knowledge channel attention.
//!
//! The current feature map `x₀` is recalibrated by scales fused from two
//! paths:
//!
//! * local (LCCI): pool `x₀` and run a channel transform;
//! * global: align the cached predecessor maps to `C₀` channels by
//!   repetition, squeeze every map (current included) to one row of a
//!   `[N, R+1, C₀]` stack, mix the rows into `Y`, then run the GCCI
//!   transform on `Y`.
//!
//! Both transforms emit logits; one sigmoid is applied after fusion so the
//! final scales stay in `(0, 1)` under every fusion mode.

use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionKind, ChannelTransform, Linear};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamLayout};
use crate::tensor::{Graph, Var};

/// How the squeezed stack rows are combined into `Y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interaction {
    /// Dense `(R+1)·C₀ → C₀` map over the flattened stack.
    FullFc,
    /// Independent weight per (channel, row).
    Depthwise,
    /// Parameter-free row sum.
    Sum,
    /// One kernel of length `R+1` shared by all channels.
    Conv1dOverR,
}

/// How global logits `Z₁` and local logits `Z₂` are merged before the gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Sum,
    /// `W¹·Z₁ + W²·Z₂` with two scalars shared across channels.
    Conv1dK2,
    /// Dense `2C₀ → C₀` map over `concat(Z₁, Z₂)`.
    FullFc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Paths {
    LocalOnly,
    GlobalOnly,
    Both,
}

impl Paths {
    pub fn has_global(self) -> bool {
        self != Paths::LocalOnly
    }

    pub fn has_local(self) -> bool {
        self != Paths::GlobalOnly
    }
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, { $($variant:path => [$canonical:literal $(, $alias:literal)*]),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $canonical),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($canonical $(| $alias)* => Ok($variant),)+
                    other => Err(Error::config(format!(concat!("unknown ", $what, " '{}'"), other))),
                }
            }
        }
    };
}

keyword_enum!(Interaction, "interaction", {
    Interaction::FullFc => ["fullfc", "fc"],
    Interaction::Depthwise => ["depthwise"],
    Interaction::Sum => ["sum"],
    Interaction::Conv1dOverR => ["conv1d", "conv1d-r"],
});

keyword_enum!(Fusion, "fusion", {
    Fusion::Sum => ["sum"],
    Fusion::Conv1dK2 => ["conv1d", "conv1d-k2"],
    Fusion::FullFc => ["fullfc", "fc"],
});

keyword_enum!(Paths, "paths", {
    Paths::LocalOnly => ["local"],
    Paths::GlobalOnly => ["global"],
    Paths::Both => ["both"],
});

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PkcamConfig {
    /// Coverage region `R`: how many predecessors join the current map.
    pub coverage: usize,
    pub interaction: Interaction,
    pub fusion: Fusion,
    pub gcci: AttentionKind,
    pub lcci: AttentionKind,
    pub paths: Paths,
}

impl Default for PkcamConfig {
    fn default() -> Self {
        PkcamConfig {
            coverage: 1,
            interaction: Interaction::Conv1dOverR,
            fusion: Fusion::Conv1dK2,
            gcci: AttentionKind::eca_adaptive(),
            lcci: AttentionKind::eca_adaptive(),
            paths: Paths::Both,
        }
    }
}

impl PkcamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths.has_global() && self.coverage == 0 {
            return Err(Error::config(
                "pkcam: R must be >= 1 when the global path is enabled",
            ));
        }
        for (role, kind) in [("gcci", self.gcci), ("lcci", self.lcci)] {
            if matches!(kind, AttentionKind::Gc { .. }) {
                return Err(Error::config(format!(
                    "pkcam.{role}: gc uses additive fusion and cannot provide channel scales"
                )));
            }
        }
        Ok(())
    }
}

/// Outputs of preceding blocks, oldest first, bounded by the coverage region.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    capacity: usize,
    entries: Vec<(usize, Var)>,
}

impl FeatureCache {
    pub fn new(capacity: usize) -> Self {
        FeatureCache {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, block_id: usize, value: Var) {
        if self.capacity == 0 {
            return;
        }
        self.entries.push((block_id, value));
        if self.entries.len() > self.capacity {
            self.entries.remove(0);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in execution order.
    pub fn entries(&self) -> &[(usize, Var)] {
        &self.entries
    }

    /// Up to `count` cached maps, most recent first.
    pub fn recent(&self, count: usize) -> Vec<Var> {
        self.entries
            .iter()
            .rev()
            .take(count)
            .map(|&(_, v)| v)
            .collect()
    }
}

/// Repeats each predecessor along channels to exactly `channels`.
pub fn align_channels(g: &mut Graph, prev: &[Var], channels: usize) -> Result<Vec<Var>> {
    prev.iter()
        .map(|&x| g.repeat_channels(x, channels))
        .collect()
}

/// Per-map global average pooling stacked into `[N, 1 + aligned.len(), C₀]`,
/// current map first.
pub fn squeeze_stack(g: &mut Graph, current: Var, aligned: &[Var]) -> Result<Var> {
    if aligned.is_empty() {
        return Err(Error::contract(
            "global path needs at least one predecessor",
        ));
    }
    let c0 = g.shape(current)[1];
    let n = g.shape(current)[0];
    let mut rows = vec![g.gap2d(current)?];
    for &x in aligned {
        let shape = g.shape(x);
        if shape[0] != n {
            return Err(Error::dim(
                "squeeze_stack",
                0,
                format!("batch {} vs {n}", shape[0]),
            ));
        }
        if shape[1] != c0 {
            return Err(Error::contract(format!(
                "predecessor has {} channels, expected aligned {c0}",
                shape[1]
            )));
        }
        rows.push(g.gap2d(x)?);
    }
    g.stack(&rows)
}

#[derive(Clone, Debug)]
pub enum InteractionStage {
    FullFc(Linear),
    Depthwise { weight: ParamId },
    Sum,
    Conv1dOverR { kernel: ParamId },
}

#[derive(Clone, Debug)]
pub enum FusionStage {
    Sum,
    Conv1dK2 { weight: ParamId },
    FullFc(Linear),
}

#[derive(Clone, Debug)]
pub struct GlobalPath {
    /// Stack rows: the current map plus the predecessors actually used.
    pub rows: usize,
    pub interaction: InteractionStage,
    pub gcci: ChannelTransform,
}

#[derive(Clone, Debug)]
pub struct Pkcam {
    pub config: PkcamConfig,
    pub channels: usize,
    /// Paths after degradation for missing predecessors.
    pub paths: Paths,
    pub global: Option<GlobalPath>,
    pub lcci: Option<ChannelTransform>,
    pub fusion: Option<FusionStage>,
}

impl Pkcam {
    /// Builds a module for a block with `channels` outputs and `available`
    /// cached predecessors. With no predecessors the global path cannot run
    /// and the module falls back to local-only.
    pub fn build(
        config: PkcamConfig,
        channels: usize,
        available: usize,
        layout: &mut ParamLayout,
        prefix: &str,
    ) -> Result<Self> {
        config.validate()?;
        let predecessors = config.coverage.min(available);
        let mut paths = config.paths;
        if paths.has_global() && predecessors == 0 {
            log::info!("{prefix}: no predecessors available, PKCAM degrades to local-only");
            paths = Paths::LocalOnly;
        }
        let global = if paths.has_global() {
            let rows = predecessors + 1;
            let interaction = match config.interaction {
                Interaction::FullFc => InteractionStage::FullFc(Linear::new(
                    layout,
                    &format!("{prefix}.interaction"),
                    rows * channels,
                    channels,
                    false,
                )),
                Interaction::Depthwise => InteractionStage::Depthwise {
                    weight: layout.add(
                        format!("{prefix}.interaction.weight"),
                        &[channels, rows],
                        Init::FanUniform { fan: rows },
                    ),
                },
                Interaction::Sum => InteractionStage::Sum,
                Interaction::Conv1dOverR => InteractionStage::Conv1dOverR {
                    kernel: layout.add(
                        format!("{prefix}.interaction.kernel"),
                        &[rows],
                        Init::FanUniform { fan: rows },
                    ),
                },
            };
            let gcci = ChannelTransform::build(
                config.gcci,
                channels,
                1,
                layout,
                &format!("{prefix}.gcci"),
            )?;
            Some(GlobalPath {
                rows,
                interaction,
                gcci,
            })
        } else {
            None
        };
        let lcci = if paths.has_local() {
            let styles = if config.lcci == AttentionKind::Srm {
                2
            } else {
                1
            };
            Some(ChannelTransform::build(
                config.lcci,
                channels,
                styles,
                layout,
                &format!("{prefix}.lcci"),
            )?)
        } else {
            None
        };
        let fusion = (paths == Paths::Both).then(|| match config.fusion {
            Fusion::Sum => FusionStage::Sum,
            Fusion::Conv1dK2 => FusionStage::Conv1dK2 {
                weight: layout.add(
                    format!("{prefix}.fusion.weight"),
                    &[2],
                    Init::FanUniform { fan: 2 },
                ),
            },
            Fusion::FullFc => FusionStage::FullFc(Linear::new(
                layout,
                &format!("{prefix}.fusion"),
                2 * channels,
                channels,
                false,
            )),
        });
        Ok(Pkcam {
            config,
            channels,
            paths,
            global,
            lcci,
            fusion,
        })
    }

    /// Predecessors consumed from the cache (0 when local-only).
    pub fn predecessors(&self) -> usize {
        self.global.as_ref().map_or(0, |gp| gp.rows - 1)
    }

    /// Mixes a `[N, rows, C₀]` stack into `Y[N, C₀]`.
    pub fn interact(&self, g: &mut Graph, p: &Bound, stack: Var) -> Result<Var> {
        let gp = self.global_path()?;
        let &[n, rows, c] = g.shape(stack) else {
            return Err(Error::dim("pk_interact", 0, "expected [N,K,C]"));
        };
        if rows != gp.rows {
            return Err(Error::contract(format!(
                "interaction expects {} stacked rows, got {rows}",
                gp.rows
            )));
        }
        match &gp.interaction {
            InteractionStage::FullFc(fc) => {
                let flat = g.reshape(stack, &[n, rows * c])?;
                fc.forward(g, p, flat)
            }
            InteractionStage::Depthwise { weight } => g.depthwise_mix(stack, p[*weight]),
            InteractionStage::Sum => {
                let ones = g.constant(crate::tensor::Tensor::full(&[rows], 1.0));
                g.row_mix(stack, ones)
            }
            InteractionStage::Conv1dOverR { kernel } => g.row_mix(stack, p[*kernel]),
        }
    }

    /// Global logits `Z₁` from the interaction output `Y`.
    pub fn gcci(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        self.global_path()?.gcci.logits(g, p, &[y])
    }

    /// Local logits `Z₂` from the current map.
    pub fn lcci(&self, g: &mut Graph, p: &Bound, x0: Var) -> Result<Var> {
        let lcci = self
            .lcci
            .as_ref()
            .ok_or_else(|| Error::contract("local path disabled for this module"))?;
        let styles = lcci.context(g, x0)?;
        lcci.logits(g, p, &styles)
    }

    /// Final gate `S = σ(φ(Z₁, Z₂))`.
    pub fn fuse(&self, g: &mut Graph, p: &Bound, z1: Var, z2: Var) -> Result<Var> {
        if g.shape(z1) != g.shape(z2) {
            return Err(Error::contract(format!(
                "fusion inputs disagree: {:?} vs {:?}",
                g.shape(z1),
                g.shape(z2)
            )));
        }
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::contract("fusion requires both paths"))?;
        let mixed = match fusion {
            FusionStage::Sum => g.add(z1, z2)?,
            FusionStage::Conv1dK2 { weight } => {
                let stack = g.stack(&[z1, z2])?;
                g.row_mix(stack, p[*weight])?
            }
            FusionStage::FullFc(fc) => {
                let &[n, c] = g.shape(z1) else { unreachable!() };
                let stack = g.stack(&[z1, z2])?;
                let flat = g.reshape(stack, &[n, 2 * c])?;
                fc.forward(g, p, flat)?
            }
        };
        Ok(g.sigmoid(mixed))
    }

    /// Recalibration scales `S[N, C₀]` for `x0` given the cached
    /// predecessors.
    pub fn scales(&self, g: &mut Graph, p: &Bound, x0: Var, cache: &FeatureCache) -> Result<Var> {
        let c0 = g.shape(x0)[1];
        if c0 != self.channels {
            return Err(Error::dim(
                "pkcam",
                1,
                format!("expected {} channels, got {c0}", self.channels),
            ));
        }
        let z1 = match &self.global {
            Some(gp) => {
                let prev = cache.recent(gp.rows - 1);
                if prev.len() + 1 != gp.rows {
                    return Err(Error::contract(format!(
                        "pkcam built for {} predecessors, cache holds {}",
                        gp.rows - 1,
                        prev.len()
                    )));
                }
                let aligned = align_channels(g, &prev, c0)?;
                let stack = squeeze_stack(g, x0, &aligned)?;
                let y = self.interact(g, p, stack)?;
                Some(self.gcci(g, p, y)?)
            }
            None => None,
        };
        let z2 = match self.lcci {
            Some(_) => Some(self.lcci(g, p, x0)?),
            None => None,
        };
        match (z1, z2) {
            (Some(z1), Some(z2)) => self.fuse(g, p, z1, z2),
            (Some(z), None) | (None, Some(z)) => Ok(g.sigmoid(z)),
            (None, None) => unreachable!("at least one path is always enabled"),
        }
    }

    /// `F = S ⊙ x₀`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x0: Var, cache: &FeatureCache) -> Result<Var> {
        let s = self.scales(g, p, x0, cache)?;
        g.scale_channels(x0, s)
    }

    /// Parameter groups by sub-module, including empty ones.
    pub fn submodules(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let mut out = Vec::new();
        if let Some(gp) = &self.global {
            let ids = match &gp.interaction {
                InteractionStage::FullFc(fc) => fc.param_ids(),
                InteractionStage::Depthwise { weight } => vec![*weight],
                InteractionStage::Sum => Vec::new(),
                InteractionStage::Conv1dOverR { kernel } => vec![*kernel],
            };
            out.push(("interaction", ids));
            out.push(("gcci", gp.gcci.param_ids()));
        }
        if let Some(lcci) = &self.lcci {
            out.push(("lcci", lcci.param_ids()));
        }
        if let Some(f) = &self.fusion {
            let ids = match f {
                FusionStage::Sum => Vec::new(),
                FusionStage::Conv1dK2 { weight } => vec![*weight],
                FusionStage::FullFc(fc) => fc.param_ids(),
            };
            out.push(("fusion", ids));
        }
        out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.submodules()
            .into_iter()
            .flat_map(|(_, ids)| ids)
            .collect()
    }

    fn global_path(&self) -> Result<&GlobalPath> {
        self.global
            .as_ref()
            .ok_or_else(|| Error::contract("global path disabled for this module"))
    }
}

/// Closed-form parameter count of a PKCAM module with `predecessors` rows of
/// previous knowledge on `channels` outputs.
pub fn pkcam_param_count(config: &PkcamConfig, channels: usize, predecessors: usize) -> usize {
    use crate::attention::attention_param_count;
    let transform = |kind: AttentionKind, styles: usize| match kind {
        AttentionKind::Srm => channels * styles,
        other => attention_param_count(other, channels),
    };
    let paths = if predecessors == 0 {
        Paths::LocalOnly
    } else {
        config.paths
    };
    let rows = predecessors + 1;
    let mut total = 0;
    if paths.has_global() {
        total += match config.interaction {
            Interaction::FullFc => rows * channels * channels,
            Interaction::Depthwise => rows * channels,
            Interaction::Sum => 0,
            Interaction::Conv1dOverR => rows,
        };
        total += transform(config.gcci, 1);
    }
    if paths.has_local() {
        total += transform(config.lcci, 2);
    }
    if paths == Paths::Both {
        total += match config.fusion {
            Fusion::Sum => 0,
            Fusion::Conv1dK2 => 2,
            Fusion::FullFc => 2 * channels * channels,
        };
    }
    total
}
