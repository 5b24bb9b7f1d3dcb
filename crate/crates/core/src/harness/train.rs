//! SGD training loop, evaluation and metrics persistence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{DataSource, RunConfig, TrainConfig};
use super::data::{Bundle, SyntheticSpec};
use crate::backbone::LayerGraph;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};

pub const METRICS_HEADER: &str = "epoch,split,loss,top1,top5,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.split, self.loss, self.top1, self.top5, self.seconds
        )
    }
}

/// Step decay: `lr · γ^⌊epoch / step⌋` for the zero-based `epoch`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_gamma.powi((epoch / cfg.lr_step) as i32)
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        for ((p, g), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
        {
            for ((w, &dw), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + dw + self.weight_decay * *w;
                *w -= lr * *vel;
            }
        }
    }
}

/// Zero-based rank of `label` among `logits`; ties go to the lower index.
fn rank_of(logits: &[f64], label: usize) -> usize {
    let target = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < label))
        .count()
}

/// Mean loss and top-1/top-5 over the whole bundle, in index order.
pub fn evaluate_params(
    graph: &LayerGraph,
    params: &ParamStore,
    data: &Bundle,
    means: &[f64],
    batch_size: usize,
) -> Result<(f64, f64, f64)> {
    check_compatible(graph, data)?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let (mut loss, mut top1, mut top5) = (0.0, 0usize, 0usize);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk, means)?;
        let mut g = Graph::new().without_finite_checks();
        let p = params.bind(&mut g);
        let xv = g.constant(x);
        let logits = graph.forward(&mut g, &p, xv)?;
        let ce = g.cross_entropy(logits, &labels)?;
        loss += g.value(ce).item() * chunk.len() as f64;
        let out = g.value(logits);
        let k = graph.classes();
        for (row, &label) in out.data().chunks(k).zip(&labels) {
            let r = rank_of(row, label);
            top1 += usize::from(r < 1);
            top5 += usize::from(r < 5);
        }
    }
    let n = n as f64;
    Ok((loss / n, top1 as f64 / n, top5 as f64 / n))
}

fn check_compatible(graph: &LayerGraph, data: &Bundle) -> Result<()> {
    if data.classes != graph.classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, model has {}",
            data.classes,
            graph.classes()
        )));
    }
    if data.channels != graph.spec.in_channels {
        return Err(Error::config(format!(
            "dataset has {} channels, model expects {}",
            data.channels, graph.spec.in_channels
        )));
    }
    Ok(())
}

/// Loads the dataset a config points at.
pub fn load_dataset(cfg: &RunConfig) -> Result<Bundle> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => Bundle::synthetic(&SyntheticSpec {
            classes: d.classes,
            per_class: d.per_class,
            height: d.height,
            width: d.width,
            seed: d.seed,
        }),
        DataSource::Bundle => Bundle::read_raw(d.path.as_deref().expect("validated")),
        DataSource::Images => Bundle::from_image_dir(d.path.as_deref().expect("validated")),
    }
}

/// Reads either a raw bundle file or a directory of class folders.
pub fn load_path(path: &Path) -> Result<Bundle> {
    if path.is_dir() {
        Bundle::from_image_dir(path)
    } else {
        Bundle::read_raw(path)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub csv: String,
    pub checkpoint: Checkpoint,
}

impl TrainOutcome {
    pub fn last(&self) -> &MetricsRecord {
        self.metrics.last().expect("at least one epoch")
    }
}

/// Trains from scratch. With `out`, writes `config.txt`, `metrics.csv`
/// (rewritten each epoch), scheduled `epoch-NNNN.ckpt` files and
/// `final.ckpt`. On divergence the last good parameters go to
/// `last-good.ckpt` and a [`Error::Divergence`] is returned.
pub fn train(cfg: &RunConfig, data: &Bundle, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let graph = cfg.build()?;
    check_compatible(&graph, data)?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::init(graph.layout(), &mut rng);
    let means = data.channel_means();
    let t = &cfg.train;
    let mut sgd = Sgd::new(&params, t.momentum, t.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::new();
    let mut csv = format!("{METRICS_HEADER}\n");
    for epoch in 0..t.epochs {
        let start = Instant::now();
        let lr = learning_rate(t, epoch);
        let good = params.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(t.batch_size) {
            let (x, labels) = data.batch(chunk, &means)?;
            let mut g = Graph::new().without_finite_checks();
            let p = params.bind(&mut g);
            let xv = g.constant(x);
            let logits = graph.forward(&mut g, &p, xv)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(diverged(cfg, &graph, &good, epoch, &means, out, value));
            }
            g.backward(loss)?;
            let grads: Vec<Tensor> = p
                .vars()
                .iter()
                .map(|&v| g.grad(v).cloned().expect("parameters require grad"))
                .collect();
            sgd.step(&mut params, &grads, lr);
        }
        let (loss, top1, top5) = evaluate_params(&graph, &params, data, &means, t.batch_size)?;
        if !loss.is_finite() {
            return Err(diverged(cfg, &graph, &good, epoch, &means, out, loss));
        }
        let record = MetricsRecord {
            epoch: epoch + 1,
            split: "train".into(),
            loss,
            top1,
            top5,
            seconds: if t.log_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!("{}", record.csv_line());
        writeln!(csv, "{}", record.csv_line()).unwrap();
        metrics.push(record);
        if let Some(dir) = out {
            fs::write(dir.join("metrics.csv"), &csv)?;
            if t.checkpoint_every > 0 && (epoch + 1) % t.checkpoint_every == 0 {
                Checkpoint::new(cfg, &graph, &params, epoch + 1, &means)
                    .save(&dir.join(format!("epoch-{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    let checkpoint = Checkpoint::new(cfg, &graph, &params, t.epochs, &means);
    if let Some(dir) = out {
        checkpoint.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        metrics,
        csv,
        checkpoint,
    })
}

fn diverged(
    cfg: &RunConfig,
    graph: &LayerGraph,
    good: &ParamStore,
    epoch: usize,
    means: &[f64],
    out: Option<&Path>,
    value: f64,
) -> Error {
    if let Some(dir) = out {
        let ckpt = Checkpoint::new(cfg, graph, good, epoch, means);
        if let Err(e) = ckpt.save(&dir.join("last-good.ckpt")) {
            return e;
        }
    }
    Error::Divergence(format!("loss became {value} during epoch {}", epoch + 1))
}

/// Evaluates a checkpoint on `data` using the checkpoint's stored means.
pub fn evaluate(checkpoint: &Checkpoint, data: &Bundle) -> Result<MetricsRecord> {
    let (graph, params) = checkpoint.restore()?;
    let (loss, top1, top5) = evaluate_params(
        &graph,
        &params,
        data,
        &checkpoint.means,
        checkpoint.config.train.batch_size,
    )?;
    Ok(MetricsRecord {
        epoch: checkpoint.epoch,
        split: "eval".into(),
        loss,
        top1,
        top5,
        seconds: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_rank_by_index() {
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 0), 0);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 2), 2);
        assert_eq!(rank_of(&[0.0, 3.0, 1.0], 2), 1);
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut layout = crate::params::ParamLayout::new();
        layout.add("w", &[1], crate::params::Init::Const(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::init(&layout, &mut rng);
        let mut sgd = Sgd::new(&p, 0.9, 0.1);
        let g = [Tensor::full(&[1], 2.0)];
        sgd.step(&mut p, &g, 0.5);
        // v = 2 + 0.1·1 = 2.1, w = 1 − 1.05
        assert!((p.tensors()[0].data()[0] + 0.05).abs() < 1e-15);
        sgd.step(&mut p, &g, 0.5);
        // v = 0.9·2.1 + 2 − 0.005 = 3.885
        assert!((p.tensors()[0].data()[0] - (-0.05 - 0.5 * 3.885)).abs() < 1e-12);
    }
}
