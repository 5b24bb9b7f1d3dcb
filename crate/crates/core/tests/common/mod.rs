//! Straight-line reference implementations on plain vectors. Nothing here
//! touches the autodiff graph, so they serve as independent oracles.
#![allow(dead_code, clippy::needless_range_loop)]

use pkcam_core::attention::{AttentionKind, EcaKernel};
use pkcam_core::params::{ParamLayout, ParamStore};
use pkcam_core::pkcam::{Fusion, Interaction, Paths, PkcamConfig};
use pkcam_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense NCHW feature map.
#[derive(Clone, Debug)]
pub struct Map {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Map {
    pub fn from_tensor(t: &Tensor) -> Map {
        let s = t.shape();
        Map {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            d: t.data().to_vec(),
        }
    }

    pub fn random(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Map {
        Map {
            n,
            c,
            h,
            w,
            d: (0..n * c * h * w)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&[self.n, self.c, self.h, self.w], self.d.clone()).unwrap()
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((b * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Map {
        Map {
            n,
            c,
            h,
            w,
            d: vec![0.0; n * c * h * w],
        }
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = ((b * self.c + c) * self.h + y) * self.w + x;
        self.d[i] = v;
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// `[n][c]` spatial means.
pub fn gap(x: &Map) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; x.c]; x.n];
    for b in 0..x.n {
        for c in 0..x.c {
            let mut s = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    s += x.at(b, c, y, xx);
                }
            }
            out[b][c] = s / (x.h * x.w) as f64;
        }
    }
    out
}

/// Two-pass population std with `eps` inside the root.
pub fn std(x: &Map, eps: f64) -> Vec<Vec<f64>> {
    let means = gap(x);
    let mut out = vec![vec![0.0; x.c]; x.n];
    for b in 0..x.n {
        for c in 0..x.c {
            let mut s = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    let d = x.at(b, c, y, xx) - means[b][c];
                    s += d * d;
                }
            }
            out[b][c] = (s / (x.h * x.w) as f64 + eps).sqrt();
        }
    }
    out
}

/// `w` is `[dout, din]` row-major.
pub fn dense(v: &[f64], w: &[f64], b: Option<&[f64]>, dout: usize) -> Vec<f64> {
    let din = v.len();
    assert_eq!(w.len(), din * dout);
    (0..dout)
        .map(|o| {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..din {
                s += w[o * din + i] * v[i];
            }
            s
        })
        .collect()
}

/// Zero-padded cross-correlation with output length equal to input length.
pub fn conv1d_same(v: &[f64], k: &[f64]) -> Vec<f64> {
    let pad = (k.len() - 1) / 2;
    (0..v.len())
        .map(|i| {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let pos = i as isize + j as isize - pad as isize;
                if pos >= 0 && (pos as usize) < v.len() {
                    s += kv * v[pos as usize];
                }
            }
            s
        })
        .collect()
}

/// `w` is `[cout, cin, k, k]`.
pub fn conv2d(x: &Map, w: &[f64], cout: usize, k: usize, stride: usize, pad: usize) -> Map {
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Map::zeros(x.n, cout, ho, wo);
    for b in 0..x.n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w
                                {
                                    s += w[((co * x.c + ci) * k + ky) * k + kx]
                                        * x.at(b, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(b, co, oy, ox, s);
                }
            }
        }
    }
    out
}

/// `x[b,c,..] · s[b][c]`.
pub fn rescale(x: &Map, s: &[Vec<f64>]) -> Map {
    let mut out = x.clone();
    for b in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.set(b, c, y, xx, x.at(b, c, y, xx) * s[b][c]);
                }
            }
        }
    }
    out
}

/// Parameter values by name.
pub struct Weights<'a> {
    pub layout: &'a ParamLayout,
    pub store: &'a ParamStore,
}

impl Weights<'_> {
    pub fn get(&self, name: &str) -> Vec<f64> {
        let id = self
            .layout
            .find(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        self.store.get(id).data().to_vec()
    }

    pub fn has(&self, name: &str) -> bool {
        self.layout.find(name).is_some()
    }
}

/// Pre-sigmoid logits of a gate transform applied to pooled statistics.
pub fn transform_logits(
    kind: AttentionKind,
    w: &Weights,
    prefix: &str,
    styles: &[Vec<f64>],
) -> Vec<f64> {
    let c = styles[0].len();
    match kind {
        AttentionKind::Se { reduction } => {
            let hidden = c / reduction;
            let h = dense(
                &styles[0],
                &w.get(&format!("{prefix}.fc1.weight")),
                Some(&w.get(&format!("{prefix}.fc1.bias"))),
                hidden,
            );
            let h: Vec<f64> = h.into_iter().map(|v| v.max(0.0)).collect();
            dense(
                &h,
                &w.get(&format!("{prefix}.fc2.weight")),
                Some(&w.get(&format!("{prefix}.fc2.bias"))),
                c,
            )
        }
        AttentionKind::Eca { .. } => conv1d_same(&styles[0], &w.get(&format!("{prefix}.kernel"))),
        AttentionKind::Srm => {
            let wt = w.get(&format!("{prefix}.weight"));
            let k = styles.len();
            (0..c)
                .map(|ch| (0..k).map(|s| wt[ch * k + s] * styles[s][ch]).sum())
                .collect()
        }
        AttentionKind::Gc { .. } => panic!("gc has no gate transform"),
    }
}

/// SE, ECA or SRM as a standalone block.
pub fn gated(kind: AttentionKind, w: &Weights, prefix: &str, x: &Map, eps: f64) -> Map {
    let means = gap(x);
    let stds = std(x, eps);
    let s: Vec<Vec<f64>> = (0..x.n)
        .map(|b| {
            let styles = if kind == AttentionKind::Srm {
                vec![means[b].clone(), stds[b].clone()]
            } else {
                vec![means[b].clone()]
            };
            transform_logits(kind, w, prefix, &styles)
                .into_iter()
                .map(sigmoid)
                .collect()
        })
        .collect();
    rescale(x, &s)
}

/// Global context block: softmax attention pooling, bottleneck, add.
pub fn global_context(w: &Weights, prefix: &str, x: &Map) -> Map {
    let cw = w.get(&format!("{prefix}.context.weight"));
    let cb = w.get(&format!("{prefix}.context.bias"))[0];
    let hidden = w.get(&format!("{prefix}.fc1.bias")).len();
    let mut out = x.clone();
    for b in 0..x.n {
        let mut logits = Vec::new();
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut s = cb;
                for c in 0..x.c {
                    s += cw[c] * x.at(b, c, y, xx);
                }
                logits.push(s);
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let mut ctx = vec![0.0; x.c];
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    ctx[c] += x.at(b, c, y, xx) * e[y * x.w + xx] / total;
                }
            }
        }
        let h = dense(
            &ctx,
            &w.get(&format!("{prefix}.fc1.weight")),
            Some(&w.get(&format!("{prefix}.fc1.bias"))),
            hidden,
        );
        let h: Vec<f64> = h.into_iter().map(|v| v.max(0.0)).collect();
        let z = dense(
            &h,
            &w.get(&format!("{prefix}.fc2.weight")),
            Some(&w.get(&format!("{prefix}.fc2.bias"))),
            x.c,
        );
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.set(b, c, y, xx, x.at(b, c, y, xx) + z[c]);
                }
            }
        }
    }
    out
}

/// Full PKCAM forward. `prev` is most recent first; every predecessor is
/// used (the caller passes exactly `R` maps).
pub fn pkcam(
    cfg: &PkcamConfig,
    w: &Weights,
    prefix: &str,
    x0: &Map,
    prev: &[Map],
    eps: f64,
) -> Map {
    let c0 = x0.c;
    let x0_mean = gap(x0);
    let x0_std = std(x0, eps);
    let prev_means: Vec<_> = prev.iter().map(gap).collect();
    let rows_n = prev.len() + 1;
    let mut scales = Vec::new();
    for b in 0..x0.n {
        // Squeezed stack, current first, predecessors channel-tiled to C0.
        let mut rows = vec![x0_mean[b].clone()];
        for (p, m) in prev.iter().zip(&prev_means) {
            rows.push((0..c0).map(|ch| m[b][ch % p.c]).collect());
        }
        let z1 = cfg.paths.has_global().then(|| {
            let y: Vec<f64> = match cfg.interaction {
                Interaction::FullFc => {
                    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                    dense(
                        &flat,
                        &w.get(&format!("{prefix}.interaction.weight")),
                        None,
                        c0,
                    )
                }
                Interaction::Depthwise => {
                    let wt = w.get(&format!("{prefix}.interaction.weight"));
                    (0..c0)
                        .map(|ch| (0..rows_n).map(|k| wt[ch * rows_n + k] * rows[k][ch]).sum())
                        .collect()
                }
                Interaction::Sum => (0..c0).map(|ch| rows.iter().map(|r| r[ch]).sum()).collect(),
                Interaction::Conv1dOverR => {
                    let k = w.get(&format!("{prefix}.interaction.kernel"));
                    (0..c0)
                        .map(|ch| (0..rows_n).map(|r| k[r] * rows[r][ch]).sum())
                        .collect()
                }
            };
            transform_logits(cfg.gcci, w, &format!("{prefix}.gcci"), &[y])
        });
        let z2 = cfg.paths.has_local().then(|| {
            let styles = if cfg.lcci == AttentionKind::Srm {
                vec![x0_mean[b].clone(), x0_std[b].clone()]
            } else {
                vec![x0_mean[b].clone()]
            };
            transform_logits(cfg.lcci, w, &format!("{prefix}.lcci"), &styles)
        });
        let logits = match (z1, z2) {
            (Some(z1), Some(z2)) => match cfg.fusion {
                Fusion::Sum => z1.iter().zip(&z2).map(|(a, b)| a + b).collect(),
                Fusion::Conv1dK2 => {
                    let k = w.get(&format!("{prefix}.fusion.weight"));
                    z1.iter()
                        .zip(&z2)
                        .map(|(a, b)| k[0] * a + k[1] * b)
                        .collect()
                }
                Fusion::FullFc => {
                    let cat: Vec<f64> = z1.iter().chain(&z2).copied().collect();
                    dense(&cat, &w.get(&format!("{prefix}.fusion.weight")), None, c0)
                }
            },
            (Some(z), None) | (None, Some(z)) => z,
            (None, None) => unreachable!(),
        };
        scales.push(logits.into_iter().map(sigmoid).collect());
    }
    rescale(x0, &scales)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const ALL_INTERACTIONS: [Interaction; 4] = [
    Interaction::FullFc,
    Interaction::Depthwise,
    Interaction::Sum,
    Interaction::Conv1dOverR,
];
pub const ALL_FUSIONS: [Fusion; 3] = [Fusion::Sum, Fusion::Conv1dK2, Fusion::FullFc];
pub const ALL_PATHS: [Paths; 3] = [Paths::LocalOnly, Paths::GlobalOnly, Paths::Both];

/// Small gate kinds that fit 8 channels.
pub fn gate_kinds() -> Vec<AttentionKind> {
    vec![
        AttentionKind::Se { reduction: 4 },
        AttentionKind::Eca {
            kernel: EcaKernel::Fixed(3),
        },
        AttentionKind::Srm,
    ]
}
