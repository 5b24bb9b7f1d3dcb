//! Static parameter and FLOP accounting over a [`LayerGraph`].
//!
//! Parameters come from closed-form per-module formulas, not from the
//! layout, so comparing the two is an audit of the builder. FLOPs follow a
//! multiply-accumulate convention: under `mac1` one MAC is one FLOP, under
//! `mac2` it is two. Elementwise work (activations, gates, additions, the
//! norm scale/shift) is one FLOP per element and pooling is one add per
//! input element, in both conventions.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::attention::{attention_param_count, Attention, AttentionKind, ChannelTransform};
use crate::backbone::{BlockAttention, ConvNorm, LayerGraph, Stem};
use crate::error::{Error, Result};
use crate::pkcam::{pkcam_param_count, FusionStage, InteractionStage, Pkcam};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Convention {
    #[default]
    Mac1,
    Mac2,
}

impl Convention {
    fn mac(self, n: u64) -> u64 {
        match self {
            Convention::Mac1 => n,
            Convention::Mac2 => 2 * n,
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::Mac1 => "mac1",
            Convention::Mac2 => "mac2",
        })
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mac1" => Ok(Convention::Mac1),
            "mac2" => Ok(Convention::Mac2),
            other => Err(Error::config(format!("unknown FLOP convention '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub layer: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub input_shape: Option<[usize; 4]>,
    pub convention: Convention,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    /// Sum over rows whose layer name contains `.attn`.
    pub fn attention_params(&self) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.layer.contains(".attn"))
            .map(|r| r.params)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,flops\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.layer, r.params, r.flops).unwrap();
        }
        out
    }
}

/// Parameter count only; FLOP column is zero and no input shape is recorded.
pub fn count_params(graph: &LayerGraph) -> CostReport {
    let mut w = Walker::new(
        graph,
        [1, graph.spec.in_channels, 1, 1],
        Convention::Mac1,
        false,
    );
    w.walk();
    CostReport {
        rows: w.rows,
        input_shape: None,
        convention: Convention::Mac1,
    }
}

/// Parameters and FLOPs for an `N×C×H×W` input.
pub fn count_flops(
    graph: &LayerGraph,
    input_shape: [usize; 4],
    convention: Convention,
) -> Result<CostReport> {
    let [n, c, h, w] = input_shape;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::config("input shape dimensions must be >= 1"));
    }
    if c != graph.spec.in_channels {
        return Err(Error::config(format!(
            "input has {c} channels, backbone expects {}",
            graph.spec.in_channels
        )));
    }
    let mut walker = Walker::new(graph, input_shape, convention, true);
    walker.walk();
    if let Some(e) = walker.error.take() {
        return Err(e);
    }
    Ok(CostReport {
        rows: walker.rows,
        input_shape: Some(input_shape),
        convention,
    })
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    n: u64,
    c: u64,
    h: u64,
    w: u64,
}

impl Shape {
    fn numel(self) -> u64 {
        self.n * self.c * self.h * self.w
    }

    fn area(self) -> u64 {
        self.h * self.w
    }
}

struct Walker<'a> {
    graph: &'a LayerGraph,
    input: [usize; 4],
    conv: Convention,
    with_flops: bool,
    rows: Vec<CostRow>,
    error: Option<Error>,
}

impl<'a> Walker<'a> {
    fn new(graph: &'a LayerGraph, input: [usize; 4], conv: Convention, with_flops: bool) -> Self {
        Walker {
            graph,
            input,
            conv,
            with_flops,
            rows: Vec::new(),
            error: None,
        }
    }

    fn row(&mut self, layer: String, params: usize, flops: u64) {
        self.rows.push(CostRow {
            layer,
            params: params as u64,
            flops: if self.with_flops { flops } else { 0 },
        });
    }

    fn spatial(&mut self, len: u64, kernel: usize, stride: usize, pad: usize) -> u64 {
        let padded = len + 2 * pad as u64;
        if padded < kernel as u64 {
            if self.with_flops && self.error.is_none() {
                self.error = Some(Error::config(format!(
                    "input too small: kernel {kernel} exceeds padded extent {padded}"
                )));
            }
            return 1;
        }
        (padded - kernel as u64) / stride as u64 + 1
    }

    fn conv_norm(&mut self, cn: &ConvNorm, x: Shape) -> Shape {
        let c = &cn.conv;
        let ho = self.spatial(x.h, c.kernel, c.stride, c.pad);
        let wo = self.spatial(x.w, c.kernel, c.stride, c.pad);
        let out = Shape {
            n: x.n,
            c: c.cout as u64,
            h: ho,
            w: wo,
        };
        let macs = x.n * (c.cout * c.cin * c.kernel * c.kernel) as u64 * ho * wo;
        self.row(
            cn.name.clone(),
            c.cout * c.cin * c.kernel * c.kernel,
            self.conv.mac(macs),
        );
        let norm_name = match cn.name.strip_suffix("downsample") {
            Some(stem) => format!("{stem}downsample.norm"),
            None => cn.name.replace("conv", "norm"),
        };
        self.row(norm_name, 2 * cn.norm.channels, 2 * out.numel());
        out
    }

    fn walk(&mut self) {
        let g = self.graph;
        let [n, c, h, w] = self.input.map(|d| d as u64);
        let mut x = Shape { n, c, h, w };
        x = self.conv_norm(&g.stem, x);
        self.row("stem.relu".into(), 0, x.numel());
        if g.spec.stem == Stem::ImageNet {
            let ho = self.spatial(x.h, 3, 2, 1);
            let wo = self.spatial(x.w, 3, 2, 1);
            x = Shape { h: ho, w: wo, ..x };
            self.row("stem.pool".into(), 0, x.numel() * 9);
        }
        let mut endpoints = Vec::new();
        if g.spec.cache_stem {
            endpoints.push(x);
        }
        for block in &g.blocks {
            let input = x;
            let mut b = x;
            for (i, cn) in block.convs.iter().enumerate() {
                b = self.conv_norm(cn, b);
                if i + 1 < block.convs.len() {
                    self.row(format!("{}.relu{}", block.name, i + 1), 0, b.numel());
                }
            }
            let attn = format!("{}.attn", block.name);
            match &block.attention {
                BlockAttention::None => {}
                BlockAttention::Local(a) => {
                    let (params, flops) = self.attention_cost(a, b);
                    self.row(attn, params, flops);
                }
                BlockAttention::Pkcam(m) => {
                    let recent: Vec<Shape> = endpoints
                        .iter()
                        .rev()
                        .take(m.predecessors())
                        .copied()
                        .collect();
                    let (params, flops) = self.pkcam_cost(m, b, &recent);
                    self.row(attn, params, flops);
                }
            }
            if let Some(sc) = &block.shortcut {
                self.conv_norm(sc, input);
            }
            self.row(format!("{}.add", block.name), 0, b.numel());
            self.row(format!("{}.relu", block.name), 0, b.numel());
            x = b;
            if block.stage_end {
                endpoints.push(x);
            }
        }
        self.row("head.pool".into(), 0, x.numel());
        let head = &g.head;
        let fc_params = head.din * head.dout + head.dout;
        let fc_flops = self.conv.mac(x.n * (head.din * head.dout) as u64) + x.n * head.dout as u64;
        self.row("head.fc".into(), fc_params, fc_flops);
    }

    /// FLOPs of a gate transform on a `C`-vector per sample.
    fn transform_flops(&self, t: &ChannelTransform, n: u64, c: u64) -> u64 {
        match t {
            ChannelTransform::Bottleneck { reduce, .. } => {
                let hidden = reduce.dout as u64;
                self.conv.mac(n * (c * hidden + hidden * c)) + n * (hidden + c) + n * hidden
            }
            ChannelTransform::ChannelConv { size, .. } => self.conv.mac(n * c * *size as u64),
            ChannelTransform::StyleIntegration { styles, .. } => {
                self.conv.mac(n * c * *styles as u64)
            }
        }
    }

    fn pool_flops(&self, t: &ChannelTransform, x: Shape) -> u64 {
        if t.styles() == 2 {
            3 * x.numel()
        } else {
            x.numel()
        }
    }

    fn attention_cost(&self, a: &Attention, x: Shape) -> (usize, u64) {
        let params = attention_param_count(a.kind(), a.channels());
        let nc = x.n * x.c;
        let flops = match a {
            Attention::Gated(gated) => {
                let t = &gated.transform;
                self.pool_flops(t, x) + self.transform_flops(t, x.n, x.c) + nc + x.numel()
            }
            Attention::GlobalContext(gc) => {
                let area = x.n * x.area();
                let context = self.conv.mac(x.numel()) + area + 3 * area + self.conv.mac(x.numel());
                let hidden = gc.reduce.dout as u64;
                let transform =
                    self.conv.mac(x.n * 2 * x.c * hidden) + x.n * (hidden + x.c) + x.n * hidden;
                context + transform + x.numel()
            }
        };
        debug_assert!(
            matches!(a.kind(), AttentionKind::Gc { .. })
                == matches!(a, Attention::GlobalContext(_))
        );
        (params, flops)
    }

    fn pkcam_cost(&self, m: &Pkcam, x: Shape, predecessors: &[Shape]) -> (usize, u64) {
        let params = pkcam_param_count(&m.config, m.channels, m.predecessors());
        let (n, c) = (x.n, x.c);
        let mut flops = 0;
        if let Some(gp) = &m.global {
            let rows = gp.rows as u64;
            flops += x.numel();
            flops += predecessors.iter().map(|p| p.n * c * p.area()).sum::<u64>();
            flops += match &gp.interaction {
                InteractionStage::FullFc(_) => self.conv.mac(n * rows * c * c),
                InteractionStage::Depthwise { .. } | InteractionStage::Conv1dOverR { .. } => {
                    self.conv.mac(n * rows * c)
                }
                InteractionStage::Sum => n * (rows - 1) * c,
            };
            flops += self.transform_flops(&gp.gcci, n, c);
        }
        if let Some(lcci) = &m.lcci {
            flops += self.pool_flops(lcci, x) + self.transform_flops(lcci, n, c);
        }
        if let Some(f) = &m.fusion {
            flops += match f {
                FusionStage::Sum => n * c,
                FusionStage::Conv1dK2 { .. } => self.conv.mac(n * 2 * c),
                FusionStage::FullFc(_) => self.conv.mac(n * 2 * c * c),
            };
        }
        flops += n * c + x.numel();
        (params, flops)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, AttentionConfig, BackboneSpec, Integration};
    use crate::pkcam::PkcamConfig;

    #[test]
    fn audited_params_equal_layout_totals() {
        let attentions = [
            AttentionConfig::None,
            AttentionConfig::Local(AttentionKind::Se { reduction: 4 }),
            AttentionConfig::Local(AttentionKind::eca_adaptive()),
            AttentionConfig::Local(AttentionKind::Srm),
            AttentionConfig::Local(AttentionKind::Gc { reduction: 4 }),
            AttentionConfig::Pkcam(PkcamConfig::default()),
        ];
        for attention in attentions {
            for policy in [Integration::AllBlocks, Integration::LastBlockPerStage] {
                let spec = BackboneSpec::tiny(&[2, 1, 1], &[8, 16, 32], 5).unwrap();
                let g = build_backbone(spec, attention, policy).unwrap();
                assert_eq!(
                    count_params(&g).total_params() as usize,
                    g.layout().total(),
                    "{attention:?}"
                );
            }
        }
    }

    #[test]
    fn flops_are_linear_in_batch() {
        let spec = BackboneSpec::tiny(&[1, 1], &[8, 16], 5).unwrap();
        let g = build_backbone(
            spec,
            AttentionConfig::Pkcam(PkcamConfig::default()),
            Integration::AllBlocks,
        )
        .unwrap();
        let one = count_flops(&g, [1, 3, 16, 16], Convention::Mac1).unwrap();
        let two = count_flops(&g, [2, 3, 16, 16], Convention::Mac1).unwrap();
        assert_eq!(2 * one.total_flops(), two.total_flops());
        assert_eq!(one.total_params(), two.total_params());
    }

    #[test]
    fn mac2_doubles_only_multiply_accumulates() {
        let spec = BackboneSpec::tiny(&[1], &[4], 2).unwrap();
        let g = build_backbone(spec, AttentionConfig::None, Integration::AllBlocks).unwrap();
        let m1 = count_flops(&g, [1, 3, 8, 8], Convention::Mac1).unwrap();
        let m2 = count_flops(&g, [1, 3, 8, 8], Convention::Mac2).unwrap();
        let stem1 = m1
            .rows
            .iter()
            .find(|r| r.layer == "stem.conv")
            .unwrap()
            .flops;
        let stem2 = m2
            .rows
            .iter()
            .find(|r| r.layer == "stem.conv")
            .unwrap()
            .flops;
        assert_eq!(stem1, 4 * 3 * 9 * 64);
        assert_eq!(stem2, 2 * stem1);
        let relu1 = m1
            .rows
            .iter()
            .find(|r| r.layer == "stem.relu")
            .unwrap()
            .flops;
        let relu2 = m2
            .rows
            .iter()
            .find(|r| r.layer == "stem.relu")
            .unwrap()
            .flops;
        assert_eq!(relu1, relu2);
    }

    #[test]
    fn rejects_mismatched_input_channels() {
        let spec = BackboneSpec::tiny(&[1], &[4], 2).unwrap();
        let g = build_backbone(spec, AttentionConfig::None, Integration::AllBlocks).unwrap();
        assert!(count_flops(&g, [1, 1, 8, 8], Convention::Mac1).is_err());
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let spec = BackboneSpec::tiny(&[1], &[4], 2).unwrap();
        let g = build_backbone(spec, AttentionConfig::None, Integration::AllBlocks).unwrap();
        let r = count_params(&g);
        let csv = r.to_csv();
        assert!(csv.starts_with("layer,params,flops\n"));
        assert_eq!(csv.lines().count(), r.rows.len() + 1);
    }
}
