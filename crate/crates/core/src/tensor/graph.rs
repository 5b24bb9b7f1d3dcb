use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Gap2d(Var),
    Std2d {
        x: Var,
        mean: Vec<f64>,
    },
    Fc {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    AddChannels {
        x: Var,
        z: Var,
    },
    RepeatChannels {
        x: Var,
    },
    Stack(Vec<Var>),
    RowMix {
        stack: Var,
        w: Var,
    },
    DepthwiseMix {
        stack: Var,
        w: Var,
    },
    WeightedSpatialSum {
        x: Var,
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Ops are appended in execution order; [`Graph::backward`]
/// walks them once in reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            check_finite: cfg!(debug_assertions),
        }
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(
            op,
            t.rank().min(rank),
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn expect_dim(op: &'static str, axis: usize, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::dim(op, axis, format!("expected {want}, got {got}")));
    }
    Ok(())
}

/// Output indices `o` in `0..out_len` for which `o * stride + offset - pad`
/// falls inside `0..in_len`.
fn valid_range(
    out_len: usize,
    in_len: usize,
    offset: usize,
    pad: usize,
    stride: usize,
) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + pad > offset {
        ((in_len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Turns the debug-build finiteness assertion off, for callers that
    /// detect divergence themselves.
    pub fn without_finite_checks(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        assert!(
            !self.check_finite || matches!(op, Op::Leaf) || value.all_finite(),
            "non-finite output from {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                "add",
                0,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                "mul",
                0,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i].max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| sigmoid(t.data()[i]));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Softmax along `axis`, numerically stabilised by the per-slice max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::dim("softmax", axis, "axis out of range"));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| src[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Cross-correlation of `x[N,Cin,H,W]` with `w[Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        expect_rank("conv2d", tx, 4)?;
        expect_rank("conv2d", tw, 4)?;
        let &[n, cin, h, wid] = tx.shape() else {
            unreachable!()
        };
        let &[cout, wcin, kh, kw] = tw.shape() else {
            unreachable!()
        };
        expect_dim("conv2d", 1, wcin, cin)?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(
                "conv2d",
                2,
                format!("kernel {kh}x{kw} must be odd"),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        if h + 2 * pad < kh {
            return Err(Error::dim(
                "conv2d",
                2,
                format!("kernel {kh} exceeds padded height {}", h + 2 * pad),
            ));
        }
        if wid + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                3,
                format!("kernel {kw} exceeds padded width {}", wid + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let xd = tx.data();
        let wd = tw.data();
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                let plane = &mut out[(b * cout + co) * ho * wo..][..ho * wo];
                for ci in 0..cin {
                    let src = &xd[(b * cin + ci) * h * wid..][..h * wid];
                    for ki in 0..kh {
                        let (oh_lo, oh_hi) = valid_range(ho, h, ki, pad, stride);
                        for kj in 0..kw {
                            let wv = wd[((co * cin + ci) * kh + ki) * kw + kj];
                            let (ow_lo, ow_hi) = valid_range(wo, wid, kj, pad, stride);
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + ki - pad;
                                let row = &src[ih * wid..][..wid];
                                let dst = &mut plane[oh * wo..][..wo];
                                if stride == 1 {
                                    let row = &row[ow_lo + kj - pad..ow_hi + kj - pad];
                                    for (d, &v) in dst[ow_lo..ow_hi].iter_mut().zip(row) {
                                        *d += wv * v;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        dst[ow] += wv * row[ow * stride + kj - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[n, cout, ho, wo], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad }, rg))
    }

    /// Shared-kernel 1-D convolution along the last axis of `x[N,L]`,
    /// zero padded by `pad` on both sides.
    pub fn conv1d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        expect_rank("conv1d", tx, 2)?;
        expect_rank("conv1d", tw, 1)?;
        let &[n, len] = tx.shape() else {
            unreachable!()
        };
        let k = tw.shape()[0];
        if k > len + 2 * pad {
            return Err(Error::dim(
                "conv1d",
                1,
                format!("kernel {k} longer than padded length {}", len + 2 * pad),
            ));
        }
        let out_len = len + 2 * pad - k + 1;
        let (xd, wd) = (tx.data(), tw.data());
        let mut out = vec![0.0; n * out_len];
        for b in 0..n {
            for o in 0..out_len {
                let mut acc = 0.0;
                for (j, wv) in wd.iter().enumerate() {
                    let pos = o + j;
                    if pos >= pad && pos - pad < len {
                        acc += wv * xd[b * len + pos - pad];
                    }
                }
                out[b * out_len + o] = acc;
            }
        }
        let out = Tensor::new(&[n, out_len], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Conv1d { x, w, pad }, rg))
    }

    /// Max pooling over `k×k` windows; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("max_pool2d", tx, 4)?;
        let &[n, c, h, w] = tx.shape() else {
            unreachable!()
        };
        if pad >= k || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim("max_pool2d", 2, "window does not fit input"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let xd = tx.data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = base;
                    for ki in 0..k {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for kj in 0..k {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw as usize >= w {
                                continue;
                            }
                            let idx = base + ih as usize * w + iw as usize;
                            if xd[idx] > best {
                                best = xd[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (p * ho + oh) * wo + ow;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Per-channel spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn gap2d(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("gap2d", tx, 4)?;
        let &[n, c, h, w] = tx.shape() else {
            unreachable!()
        };
        let area = h * w;
        let out: Vec<f64> = tx
            .data()
            .chunks_exact(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gap2d(x), rg))
    }

    /// Per-channel population standard deviation `sqrt(var + eps)`.
    pub fn std2d(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("std2d", tx, 4)?;
        let &[n, c, h, w] = tx.shape() else {
            unreachable!()
        };
        let area = h * w;
        let mut mean = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for plane in tx.data().chunks_exact(area) {
            let m = plane.iter().sum::<f64>() / area as f64;
            let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / area as f64;
            mean.push(m);
            out.push((var + eps).sqrt());
        }
        let out = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Std2d { x, mean }, rg))
    }

    /// Affine map `x · wᵀ + b` for `x[N,Din]`, `w[Dout,Din]`, `b[Dout]`.
    pub fn fc(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        expect_rank("fc", tx, 2)?;
        expect_rank("fc", tw, 2)?;
        let &[n, din] = tx.shape() else {
            unreachable!()
        };
        let &[dout, wdin] = tw.shape() else {
            unreachable!()
        };
        expect_dim("fc", 1, din, wdin)?;
        let bias = match b {
            Some(b) => {
                let tb = self.value(b);
                expect_rank("fc", tb, 1)?;
                expect_dim("fc", 0, tb.shape()[0], dout)?;
                Some(tb.data())
            }
            None => None,
        };
        let (xd, wd) = (tx.data(), tw.data());
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let row = &xd[r * din..][..din];
            for o in 0..dout {
                let wrow = &wd[o * din..][..din];
                let dot: f64 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
                out[r * dout + o] = dot + bias.map_or(0.0, |b| b[o]);
            }
        }
        let out = Tensor::new(&[n, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(out, Op::Fc { x, w, b }, rg))
    }

    fn channel_param_check(
        &self,
        op: &'static str,
        x: Var,
        p: Var,
    ) -> Result<(usize, usize, usize)> {
        let (tx, tp) = (self.value(x), self.value(p));
        if tx.rank() < 2 {
            return Err(Error::dim(op, 0, "expected [N,C,...]"));
        }
        expect_rank(op, tp, 1)?;
        let c = tx.shape()[1];
        expect_dim(op, 1, tp.shape()[0], c)?;
        let spatial: usize = tx.shape()[2..].iter().product();
        Ok((tx.shape()[0], c, spatial))
    }

    /// Per-channel learned scale and shift (the backbone's normalisation
    /// stand-in): `y[n,c,..] = x[n,c,..]·scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (_, c, spatial) = self.channel_param_check("channel_affine", x, scale)?;
        self.channel_param_check("channel_affine", x, shift)?;
        let (tx, ts, tb) = (self.value(x), self.value(scale), self.value(shift));
        let out = Tensor::from_fn(tx.shape(), |i| {
            let ch = (i / spatial) % c;
            tx.data()[i] * ts.data()[ch] + tb.data()[ch]
        });
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// Adds `b[c]` to every element of channel `c`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c, spatial) = self.channel_param_check("channel_bias", x, b)?;
        let (tx, tb) = (self.value(x), self.value(b));
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + tb.data()[(i / spatial) % c]);
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::ChannelBias { x, b }, rg))
    }

    fn per_sample_channel_check(&self, op: &'static str, x: Var, s: Var) -> Result<usize> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.rank() < 2 {
            return Err(Error::dim(op, 0, "expected [N,C,...]"));
        }
        expect_rank(op, ts, 2)?;
        expect_dim(op, 0, ts.shape()[0], tx.shape()[0])?;
        expect_dim(op, 1, ts.shape()[1], tx.shape()[1])?;
        Ok(tx.shape()[2..].iter().product())
    }

    /// Recalibration `x[n,c,..] · s[n,c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let spatial = self.per_sample_channel_check("scale_channels", x, s)?;
        let (tx, ts) = (self.value(x), self.value(s));
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] * ts.data()[i / spatial]);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleChannels { x, s }, rg))
    }

    /// Additive fusion `x[n,c,..] + z[n,c]`.
    pub fn add_channels(&mut self, x: Var, z: Var) -> Result<Var> {
        let spatial = self.per_sample_channel_check("add_channels", x, z)?;
        let (tx, tz) = (self.value(x), self.value(z));
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + tz.data()[i / spatial]);
        let rg = self.rg(&[x, z]);
        Ok(self.push(out, Op::AddChannels { x, z }, rg))
    }

    /// Tiles the channel axis until it holds `channels` entries, truncating the
    /// final repetition: `[a,b,c] -> [a,b,c,a,b,c,a,b]` for 8 channels.
    pub fn repeat_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(Error::dim("repeat_channels", 0, "expected [N,C,...]"));
        }
        let c = tx.shape()[1];
        if c > channels {
            return Err(Error::contract(format!(
                "cannot align {c} channels down to {channels}"
            )));
        }
        if c == channels {
            return Ok(x);
        }
        let n = tx.shape()[0];
        let spatial: usize = tx.shape()[2..].iter().product();
        let mut shape = tx.shape().to_vec();
        shape[1] = channels;
        let mut out = Vec::with_capacity(n * channels * spatial);
        for b in 0..n {
            for ch in 0..channels {
                let src = (b * c + ch % c) * spatial;
                out.extend_from_slice(&tx.data()[src..src + spatial]);
            }
        }
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::RepeatChannels { x }, rg))
    }

    /// Stacks `K` tensors of shape `[N,C]` into `[N,K,C]`.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let shape = self.value(*first).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("stack", 0, "expected [N,C] rows"));
        }
        for r in rows {
            let s = self.value(*r).shape();
            if s != shape.as_slice() {
                return Err(Error::dim("stack", 1, format!("{s:?} vs {shape:?}")));
            }
        }
        let (n, c, k) = (shape[0], shape[1], rows.len());
        let mut out = vec![0.0; n * k * c];
        for (ki, r) in rows.iter().enumerate() {
            let d = self.value(*r).data();
            for b in 0..n {
                out[(b * k + ki) * c..][..c].copy_from_slice(&d[b * c..][..c]);
            }
        }
        let out = Tensor::new(&[n, k, c], out)?;
        let rg = self.rg(rows);
        Ok(self.push(out, Op::Stack(rows.to_vec()), rg))
    }

    /// `y[n,c] = Σ_k w[k]·stack[n,k,c]` with one kernel shared by all channels.
    pub fn row_mix(&mut self, stack: Var, w: Var) -> Result<Var> {
        let (ts, tw) = (self.value(stack), self.value(w));
        expect_rank("row_mix", ts, 3)?;
        expect_rank("row_mix", tw, 1)?;
        let &[n, k, c] = ts.shape() else {
            unreachable!()
        };
        if tw.shape()[0] != k {
            return Err(Error::contract(format!(
                "kernel length {} does not match {k} stacked rows",
                tw.shape()[0]
            )));
        }
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            for (ki, wv) in tw.data().iter().enumerate() {
                let row = &ts.data()[(b * k + ki) * c..][..c];
                for (o, v) in out[b * c..][..c].iter_mut().zip(row) {
                    *o += wv * v;
                }
            }
        }
        let out = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[stack, w]);
        Ok(self.push(out, Op::RowMix { stack, w }, rg))
    }

    /// `y[n,c] = Σ_k w[c,k]·stack[n,k,c]` with independent weights per channel.
    pub fn depthwise_mix(&mut self, stack: Var, w: Var) -> Result<Var> {
        let (ts, tw) = (self.value(stack), self.value(w));
        expect_rank("depthwise_mix", ts, 3)?;
        expect_rank("depthwise_mix", tw, 2)?;
        let &[n, k, c] = ts.shape() else {
            unreachable!()
        };
        expect_dim("depthwise_mix", 0, tw.shape()[0], c)?;
        if tw.shape()[1] != k {
            return Err(Error::contract(format!(
                "depthwise weights cover {} rows, stack has {k}",
                tw.shape()[1]
            )));
        }
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            for ki in 0..k {
                for ch in 0..c {
                    out[b * c + ch] += tw.data()[ch * k + ki] * ts.data()[(b * k + ki) * c + ch];
                }
            }
        }
        let out = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[stack, w]);
        Ok(self.push(out, Op::DepthwiseMix { stack, w }, rg))
    }

    /// Attention pooling `y[n,c] = Σ_p x[n,c,p]·a[n,p]` over the flattened
    /// spatial positions.
    pub fn weighted_spatial_sum(&mut self, x: Var, a: Var) -> Result<Var> {
        let (tx, ta) = (self.value(x), self.value(a));
        expect_rank("weighted_spatial_sum", tx, 4)?;
        expect_rank("weighted_spatial_sum", ta, 2)?;
        let &[n, c, h, w] = tx.shape() else {
            unreachable!()
        };
        expect_dim("weighted_spatial_sum", 0, ta.shape()[0], n)?;
        expect_dim("weighted_spatial_sum", 1, ta.shape()[1], h * w)?;
        let area = h * w;
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            let weights = &ta.data()[b * area..][..area];
            for ch in 0..c {
                let plane = &tx.data()[(b * c + ch) * area..][..area];
                out[b * c + ch] = plane.iter().zip(weights).map(|(v, p)| v * p).sum();
            }
        }
        let out = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[x, a]);
        Ok(self.push(out, Op::WeightedSpatialSum { x, a }, rg))
    }

    /// Mean softmax cross-entropy of `logits[N,K]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        expect_rank("cross_entropy", tl, 2)?;
        let &[n, k] = tl.shape() else { unreachable!() };
        expect_dim("cross_entropy", 0, labels.len(), n)?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for b in 0..n {
            let row = &tl.data()[b * k..][..k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for j in 0..k {
                probs[b * k + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[labels[b]];
        }
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`. Gradients for every leaf that
    /// requires them are populated (zeros when unreachable). A tape can be
    /// differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; record a new forward pass",
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let g = gout.data();
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * db[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * da[i];
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * f)
            }),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Reshape(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xd[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..len {
                                d[at(k)] += out[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let &[n, cin, h, wid] = tx.shape() else {
                    unreachable!()
                };
                let &[cout, _, kh, kw] = tw.shape() else {
                    unreachable!()
                };
                let &[_, _, ho, wo] = node.value.shape() else {
                    unreachable!()
                };
                let (s, p) = (*stride, *pad);
                let (xd, wd) = (tx.data(), tw.data());
                acc(*x, &mut |dx| {
                    for b in 0..n {
                        for co in 0..cout {
                            let gp = &g[(b * cout + co) * ho * wo..][..ho * wo];
                            for ci in 0..cin {
                                let dplane = &mut dx[(b * cin + ci) * h * wid..][..h * wid];
                                for ki in 0..kh {
                                    let (oh_lo, oh_hi) = valid_range(ho, h, ki, p, s);
                                    for kj in 0..kw {
                                        let wv = wd[((co * cin + ci) * kh + ki) * kw + kj];
                                        let (ow_lo, ow_hi) = valid_range(wo, wid, kj, p, s);
                                        for oh in oh_lo..oh_hi {
                                            let ih = oh * s + ki - p;
                                            if s == 1 {
                                                let base = ih * wid + ow_lo + kj - p;
                                                let dst = &mut dplane[base..base + ow_hi - ow_lo];
                                                for (d, &gv) in dst
                                                    .iter_mut()
                                                    .zip(&gp[oh * wo + ow_lo..oh * wo + ow_hi])
                                                {
                                                    *d += wv * gv;
                                                }
                                            } else {
                                                for ow in ow_lo..ow_hi {
                                                    dplane[ih * wid + ow * s + kj - p] +=
                                                        wv * gp[oh * wo + ow];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for b in 0..n {
                        for co in 0..cout {
                            let gp = &g[(b * cout + co) * ho * wo..][..ho * wo];
                            for ci in 0..cin {
                                let src = &xd[(b * cin + ci) * h * wid..][..h * wid];
                                for ki in 0..kh {
                                    let (oh_lo, oh_hi) = valid_range(ho, h, ki, p, s);
                                    for kj in 0..kw {
                                        let (ow_lo, ow_hi) = valid_range(wo, wid, kj, p, s);
                                        let mut total = 0.0;
                                        for oh in oh_lo..oh_hi {
                                            let ih = oh * s + ki - p;
                                            if s == 1 {
                                                let base = ih * wid + ow_lo + kj - p;
                                                let xs = &src[base..base + ow_hi - ow_lo];
                                                let gs = &gp[oh * wo + ow_lo..oh * wo + ow_hi];
                                                total += xs
                                                    .iter()
                                                    .zip(gs)
                                                    .map(|(a, b)| a * b)
                                                    .sum::<f64>();
                                            } else {
                                                for ow in ow_lo..ow_hi {
                                                    total += src[ih * wid + ow * s + kj - p]
                                                        * gp[oh * wo + ow];
                                                }
                                            }
                                        }
                                        dw[((co * cin + ci) * kh + ki) * kw + kj] += total;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let &[n, len] = tx.shape() else {
                    unreachable!()
                };
                let out_len = node.value.shape()[1];
                let (xd, wd) = (tx.data(), tw.data());
                let p = *pad;
                acc(*x, &mut |dx| {
                    for b in 0..n {
                        for o in 0..out_len {
                            for (j, wv) in wd.iter().enumerate() {
                                let pos = o + j;
                                if pos >= p && pos - p < len {
                                    dx[b * len + pos - p] += wv * g[b * out_len + o];
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for b in 0..n {
                        for o in 0..out_len {
                            for (j, dwj) in dw.iter_mut().enumerate() {
                                let pos = o + j;
                                if pos >= p && pos - p < len {
                                    *dwj += xd[b * len + pos - p] * g[b * out_len + o];
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => acc(*x, &mut |d| {
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
            }),
            Op::Gap2d(x) => {
                let area = self.value(*x).inner() / node.value.shape()[1];
                acc(*x, &mut |d| {
                    for (i, v) in d.iter_mut().enumerate() {
                        *v += g[i / area] / area as f64;
                    }
                });
            }
            Op::Std2d { x, mean } => {
                let tx = self.value(*x);
                let area = tx.inner() / node.value.shape()[1];
                let xd = tx.data();
                acc(*x, &mut |d| {
                    for (i, v) in d.iter_mut().enumerate() {
                        let p = i / area;
                        *v += g[p] * (xd[i] - mean[p]) / (area as f64 * out[p]);
                    }
                });
            }
            Op::Fc { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let &[n, din] = tx.shape() else {
                    unreachable!()
                };
                let dout = tw.shape()[0];
                let (xd, wd) = (tx.data(), tw.data());
                acc(*x, &mut |dx| {
                    for r in 0..n {
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            for i in 0..din {
                                dx[r * din + i] += gv * wd[o * din + i];
                            }
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for r in 0..n {
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            for i in 0..din {
                                dw[o * din + i] += gv * xd[r * din + i];
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for r in 0..n {
                            for o in 0..dout {
                                db[o] += g[r * dout + o];
                            }
                        }
                    });
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let tx = self.value(*x);
                let c = tx.shape()[1];
                let spatial = tx.inner() / c;
                let (xd, sd) = (tx.data(), self.value(*scale).data());
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sd[(i / spatial) % c];
                    }
                });
                acc(*scale, &mut |d| {
                    for i in 0..g.len() {
                        d[(i / spatial) % c] += g[i] * xd[i];
                    }
                });
                acc(*shift, &mut |d| {
                    for i in 0..g.len() {
                        d[(i / spatial) % c] += g[i];
                    }
                });
            }
            Op::ChannelBias { x, b } => {
                let tx = self.value(*x);
                let c = tx.shape()[1];
                let spatial = tx.inner() / c;
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| {
                    for i in 0..g.len() {
                        d[(i / spatial) % c] += g[i];
                    }
                });
            }
            Op::ScaleChannels { x, s } => {
                let tx = self.value(*x);
                let spatial = tx.inner() / tx.shape()[1];
                let (xd, sd) = (tx.data(), self.value(*s).data());
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sd[i / spatial];
                    }
                });
                acc(*s, &mut |d| {
                    for i in 0..g.len() {
                        d[i / spatial] += g[i] * xd[i];
                    }
                });
            }
            Op::AddChannels { x, z } => {
                let tx = self.value(*x);
                let spatial = tx.inner() / tx.shape()[1];
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*z, &mut |d| {
                    for i in 0..g.len() {
                        d[i / spatial] += g[i];
                    }
                });
            }
            Op::RepeatChannels { x } => {
                let tx = self.value(*x);
                let (n, c) = (tx.shape()[0], tx.shape()[1]);
                let channels = node.value.shape()[1];
                let spatial = tx.inner() / c;
                acc(*x, &mut |d| {
                    for b in 0..n {
                        for ch in 0..channels {
                            let dst = (b * c + ch % c) * spatial;
                            let src = (b * channels + ch) * spatial;
                            for s in 0..spatial {
                                d[dst + s] += g[src + s];
                            }
                        }
                    }
                });
            }
            Op::Stack(rows) => {
                let &[n, k, c] = node.value.shape() else {
                    unreachable!()
                };
                for (ki, r) in rows.iter().enumerate() {
                    acc(*r, &mut |d| {
                        for b in 0..n {
                            for ch in 0..c {
                                d[b * c + ch] += g[(b * k + ki) * c + ch];
                            }
                        }
                    });
                }
            }
            Op::RowMix { stack, w } => {
                let ts = self.value(*stack);
                let &[n, k, c] = ts.shape() else {
                    unreachable!()
                };
                let (sd, wd) = (ts.data(), self.value(*w).data());
                acc(*stack, &mut |d| {
                    for b in 0..n {
                        for ki in 0..k {
                            for ch in 0..c {
                                d[(b * k + ki) * c + ch] += wd[ki] * g[b * c + ch];
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for b in 0..n {
                        for (ki, dk) in d.iter_mut().enumerate() {
                            for ch in 0..c {
                                *dk += sd[(b * k + ki) * c + ch] * g[b * c + ch];
                            }
                        }
                    }
                });
            }
            Op::DepthwiseMix { stack, w } => {
                let ts = self.value(*stack);
                let &[n, k, c] = ts.shape() else {
                    unreachable!()
                };
                let (sd, wd) = (ts.data(), self.value(*w).data());
                acc(*stack, &mut |d| {
                    for b in 0..n {
                        for ki in 0..k {
                            for ch in 0..c {
                                d[(b * k + ki) * c + ch] += wd[ch * k + ki] * g[b * c + ch];
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for b in 0..n {
                        for ki in 0..k {
                            for ch in 0..c {
                                d[ch * k + ki] += sd[(b * k + ki) * c + ch] * g[b * c + ch];
                            }
                        }
                    }
                });
            }
            Op::WeightedSpatialSum { x, a } => {
                let tx = self.value(*x);
                let &[n, c, h, w] = tx.shape() else {
                    unreachable!()
                };
                let area = h * w;
                let (xd, ad) = (tx.data(), self.value(*a).data());
                acc(*x, &mut |d| {
                    for b in 0..n {
                        for ch in 0..c {
                            let gv = g[b * c + ch];
                            for p in 0..area {
                                d[(b * c + ch) * area + p] += gv * ad[b * area + p];
                            }
                        }
                    }
                });
                acc(*a, &mut |d| {
                    for b in 0..n {
                        for ch in 0..c {
                            let gv = g[b * c + ch];
                            for p in 0..area {
                                d[b * area + p] += gv * xd[(b * c + ch) * area + p];
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                acc(*logits, &mut |d| {
                    for b in 0..n {
                        for j in 0..k {
                            let target = if j == labels[b] { 1.0 } else { 0.0 };
                            d[b * k + j] += g[0] * (probs[b * k + j] - target) / n as f64;
                        }
                    }
                });
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for in_len in 1..7 {
            for k in [1usize, 3, 5] {
                for pad in 0..3 {
                    for stride in 1..4 {
                        if in_len + 2 * pad < k {
                            continue;
                        }
                        let out_len = (in_len + 2 * pad - k) / stride + 1;
                        for off in 0..k {
                            let expect: Vec<usize> = (0..out_len)
                                .filter(|&o| {
                                    let p = (o * stride + off) as isize - pad as isize;
                                    p >= 0 && (p as usize) < in_len
                                })
                                .collect();
                            let (lo, hi) = valid_range(out_len, in_len, off, pad, stride);
                            assert_eq!(expect, (lo..hi).collect::<Vec<_>>());
                        }
                    }
                }
            }
        }
    }
}
