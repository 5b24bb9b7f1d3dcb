//! Browser bindings. Every export takes plain strings and numbers and returns
//! a JSON string; failures come back as `{"error": "..."}`.

use pkcam_core::backbone::{build_backbone, AttentionConfig, BackboneSpec, Integration};
use pkcam_core::complexity::{count_flops, Convention};
use pkcam_core::harness::config::{AttentionChoice, Depth};
use pkcam_core::harness::{train, Bundle, RunConfig, SyntheticSpec};
use pkcam_core::params::{ParamLayout, ParamStore};
use pkcam_core::pkcam::{align_channels, squeeze_stack, Fusion, Interaction, Pkcam, PkcamConfig};
use pkcam_core::{Error, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn respond(result: Result<Value, Error>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn attention_config(attention: &str) -> Result<AttentionConfig, Error> {
    Ok(match attention.parse::<AttentionChoice>()? {
        AttentionChoice::None => AttentionConfig::None,
        AttentionChoice::Local(k) => AttentionConfig::Local(k),
        AttentionChoice::Pkcam => AttentionConfig::Pkcam(PkcamConfig::default()),
    })
}

/// Per-layer cost of a backbone. `depth` is `tiny`, `18`, `34` or `50`;
/// ResNets are costed at 224×224 with 1000 classes, tiny at 16×16.
#[wasm_bindgen]
pub fn cost_table(depth: &str, attention: &str, policy: &str, convention: &str) -> String {
    respond((|| {
        let depth: Depth = depth.parse()?;
        let (spec, shape) = match depth {
            Depth::Tiny => (BackboneSpec::tiny(&[1, 1], &[8, 16], 10)?, [1, 3, 16, 16]),
            Depth::ResNet(d) => (BackboneSpec::resnet(d, 1000)?, [1, 3, 224, 224]),
        };
        let policy: Integration = policy.parse()?;
        let convention: Convention = convention.parse()?;
        let graph = build_backbone(spec, attention_config(attention)?, policy)?;
        let report = count_flops(&graph, shape, convention)?;
        let rows: Vec<Value> = report
            .rows
            .iter()
            .map(|r| json!({ "layer": r.layer, "params": r.params, "flops": r.flops }))
            .collect();
        Ok(json!({
            "rows": rows,
            "params": report.total_params(),
            "attention_params": report.attention_params(),
            "flops": report.total_flops(),
        }))
    })())
}

/// Global logits, local logits and fused scales of one PKCAM module on
/// seeded random feature maps. Predecessors have half the channels and
/// twice the resolution of the `channels × 4 × 4` current map.
#[wasm_bindgen]
pub fn pkcam_scales(
    channels: usize,
    coverage: usize,
    interaction: &str,
    fusion: &str,
    seed: u32,
) -> String {
    respond((|| {
        if channels < 2 || !channels.is_multiple_of(2) || channels > 256 {
            return Err(Error::Usage("channels must be even and in 2..=256".into()));
        }
        if !(1..=4).contains(&coverage) {
            return Err(Error::Usage("R must be in 1..=4".into()));
        }
        let config = PkcamConfig {
            coverage,
            interaction: interaction.parse::<Interaction>()?,
            fusion: fusion.parse::<Fusion>()?,
            ..PkcamConfig::default()
        };
        let mut layout = ParamLayout::new();
        let module = Pkcam::build(config, channels, coverage, &mut layout, "pkcam")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let params = ParamStore::random_uniform(&layout, &mut rng, 1.0);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let mut normal = || {
            let t: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            t
        };
        let x0 = g.constant(Tensor::from_fn(&[1, channels, 4, 4], |_| normal()));
        let prev: Vec<_> = (0..coverage)
            .map(|_| g.constant(Tensor::from_fn(&[1, channels / 2, 8, 8], |_| normal())))
            .collect();
        let aligned = align_channels(&mut g, &prev, channels)?;
        let stack = squeeze_stack(&mut g, x0, &aligned)?;
        let y = module.interact(&mut g, &p, stack)?;
        let z1 = module.gcci(&mut g, &p, y)?;
        let z2 = module.lcci(&mut g, &p, x0)?;
        let s = module.fuse(&mut g, &p, z1, z2)?;
        Ok(json!({
            "z1": g.value(z1).data(),
            "z2": g.value(z2).data(),
            "s": g.value(s).data(),
            "params": layout.total(),
        }))
    })())
}

/// Trains a two-stage tiny network on a 4-class synthetic set of 12×12
/// images and returns the per-epoch train loss and top-1.
#[wasm_bindgen]
pub fn train_curve(attention: &str, epochs: usize, seed: u32) -> String {
    respond((|| {
        if !(1..=40).contains(&epochs) {
            return Err(Error::Usage("epochs must be in 1..=40".into()));
        }
        let mut cfg = RunConfig {
            seed: seed as u64,
            ..RunConfig::default()
        };
        cfg.model.widths = vec![4, 8];
        cfg.model.attention = attention.parse()?;
        cfg.train.epochs = epochs;
        cfg.train.batch_size = 8;
        cfg.data.classes = 4;
        cfg.data.per_class = 8;
        cfg.data.height = 12;
        cfg.data.width = 12;
        let data = Bundle::synthetic(&SyntheticSpec {
            classes: 4,
            per_class: 8,
            height: 12,
            width: 12,
            seed: seed as u64,
        })?;
        let outcome = train(&cfg, &data, None)?;
        let loss: Vec<f64> = outcome.metrics.iter().map(|m| m.loss).collect();
        let top1: Vec<f64> = outcome.metrics.iter().map(|m| m.top1).collect();
        Ok(json!({ "loss": loss, "top1": top1 }))
    })())
}
