//! Compiled computation graph over channel-major `[C][B][H][W]` tensors.

use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, Head, Kernel, Layer};
use super::gemm::gemm;
use crate::dataset::INPUT_COLS;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn per_sample(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input,
    /// Weight at `param`, bias at `param + 1`.
    Conv { src: usize, kernel: Kernel, param: usize },
    /// Scale at `param`, shift at `param + 1`.
    BatchNorm { src: usize, param: usize, stat: usize },
    Relu { src: usize },
    MaxPool { src: usize },
    Concat { srcs: Vec<usize> },
    AvgPool { src: usize },
    Dense { src: usize, param: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub op: Op,
    pub dims: Dims,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSpec {
    pub len: usize,
    pub fan_in: usize,
    pub kind: ParamKind,
}

/// Batchnorm running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub params: Vec<ParamSpec>,
    pub stat_channels: Vec<usize>,
}

struct Builder {
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
    stat_channels: Vec<usize>,
}

impl Builder {
    fn push(&mut self, op: Op, dims: Dims) -> usize {
        self.nodes.push(Node { op, dims });
        self.nodes.len() - 1
    }

    fn dims(&self, n: usize) -> Dims {
        self.nodes[n].dims
    }

    fn conv(&mut self, src: usize, out: usize, kernel: Kernel) -> Result<usize> {
        let d = self.dims(src);
        if out == 0 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::Shape(format!("conv with {out} outputs and kernel {kernel:?}")));
        }
        let fan_in = d.c * kernel.0 * kernel.1;
        let param = self.params.len();
        self.params.push(ParamSpec { len: out * fan_in, fan_in, kind: ParamKind::Weight });
        self.params.push(ParamSpec { len: out, fan_in, kind: ParamKind::Bias });
        Ok(self.push(Op::Conv { src, kernel, param }, Dims { c: out, ..d }))
    }

    fn batch_norm(&mut self, src: usize) -> usize {
        let d = self.dims(src);
        let param = self.params.len();
        self.params.push(ParamSpec { len: d.c, fan_in: 0, kind: ParamKind::Scale });
        self.params.push(ParamSpec { len: d.c, fan_in: 0, kind: ParamKind::Shift });
        let stat = self.stat_channels.len();
        self.stat_channels.push(d.c);
        self.push(Op::BatchNorm { src, param, stat }, d)
    }

    fn relu(&mut self, src: usize) -> usize {
        let d = self.dims(src);
        self.push(Op::Relu { src }, d)
    }

    fn concat(&mut self, srcs: Vec<usize>) -> Result<usize> {
        let first = self.dims(srcs[0]);
        let mut c = 0;
        for &s in &srcs {
            let d = self.dims(s);
            if (d.h, d.w) != (first.h, first.w) {
                return Err(Error::Shape(format!("concat of {}x{} with {}x{}", first.h, first.w, d.h, d.w)));
            }
            c += d.c;
        }
        Ok(self.push(Op::Concat { srcs }, Dims { c, ..first }))
    }

    fn inception(&mut self, src: usize, out: usize, k_a: Kernel, k_b: Kernel) -> Result<usize> {
        if out == 0 {
            return Err(Error::Shape("inception block with zero outputs".into()));
        }
        let (base, rem) = (out / 4, out % 4);
        let width = |f: usize| base + usize::from(f < rem);
        let mut flows = Vec::new();
        if width(0) > 0 {
            flows.push(self.conv(src, width(0), (1, 1))?);
        }
        for (f, kern) in [(1, k_a), (2, k_b)] {
            if width(f) > 0 {
                let r = self.conv(src, width(f), (1, 1))?;
                let r = self.relu(r);
                flows.push(self.conv(r, width(f), kern)?);
            }
        }
        if width(3) > 0 {
            let d = self.dims(src);
            let p = self.push(Op::MaxPool { src }, d);
            flows.push(self.conv(p, width(3), (1, 1))?);
        }
        self.concat(flows)
    }
}

impl Graph {
    /// Compile and check that the output matches the head.
    pub fn compile(arch: &ArchSpec) -> Result<Self> {
        let g = Self::compile_layers(arch.input_rows, &arch.layers)?;
        let (classes, cols) = arch.logit_shape();
        let want = match arch.head {
            Head::PerSource => Dims { c: 1, h: classes, w: cols },
            Head::Joint => Dims { c: classes, h: 1, w: 1 },
        };
        let got = g.output_dims();
        if got != want {
            return Err(Error::Shape(format!("network output {got:?}, head needs {want:?}")));
        }
        Ok(g)
    }

    pub fn compile_layers(input_rows: usize, layers: &[Layer]) -> Result<Self> {
        if input_rows == 0 {
            return Err(Error::Shape("input needs at least one row".into()));
        }
        let mut b = Builder { nodes: Vec::new(), params: Vec::new(), stat_channels: Vec::new() };
        let mut cur = b.push(Op::Input, Dims { c: 1, h: input_rows, w: INPUT_COLS });
        let mut outs = Vec::with_capacity(layers.len());
        for (li, layer) in layers.iter().enumerate() {
            cur = match *layer {
                Layer::Conv2d { out, kernel } => b.conv(cur, out, kernel)?,
                Layer::Inception { out, k_a, k_b } => b.inception(cur, out, k_a, k_b)?,
                Layer::Dense { out } => {
                    if out == 0 {
                        return Err(Error::Shape("dense layer with zero outputs".into()));
                    }
                    let fan_in = b.dims(cur).per_sample();
                    let param = b.params.len();
                    b.params.push(ParamSpec { len: out * fan_in, fan_in, kind: ParamKind::Weight });
                    b.params.push(ParamSpec { len: out, fan_in, kind: ParamKind::Bias });
                    b.push(Op::Dense { src: cur, param }, Dims { c: out, h: 1, w: 1 })
                }
                Layer::BatchNorm => b.batch_norm(cur),
                Layer::Relu => b.relu(cur),
                Layer::SkipConcat { from } => {
                    if from >= li {
                        return Err(Error::Shape(format!("layer {li} cannot concatenate later layer {from}")));
                    }
                    b.concat(vec![cur, outs[from]])?
                }
                Layer::AdaptiveAvgPool { h, w } => {
                    if h == 0 || w == 0 {
                        return Err(Error::Shape("empty pooling target".into()));
                    }
                    let c = b.dims(cur).c;
                    b.push(Op::AvgPool { src: cur }, Dims { c, h, w })
                }
            };
            outs.push(cur);
        }
        Ok(Self { nodes: b.nodes, params: b.params, stat_channels: b.stat_channels })
    }

    pub fn input_dims(&self) -> Dims {
        self.nodes[0].dims
    }

    pub fn output_dims(&self) -> Dims {
        self.nodes.last().expect("graph has an input node").dims
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len).sum()
    }
}

pub(crate) enum Aux {
    None,
    Cols(Vec<f64>),
    Bn { xhat: Vec<f64>, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    Arg(Vec<u32>),
}

/// Activations of one forward pass, kept for the backward pass.
pub struct Tape {
    pub batch: usize,
    pub train: bool,
    pub(crate) acts: Vec<Vec<f64>>,
    pub(crate) aux: Vec<Aux>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has an input node")
    }

    /// Batch mean and unbiased variance of each batchnorm, in stat order.
    pub(crate) fn batch_stats(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.aux.iter().filter_map(|a| match a {
            Aux::Bn { mean, var, .. } => Some((mean.as_slice(), var.as_slice())),
            _ => None,
        })
    }
}

fn same_pad(k: usize) -> usize {
    (k - 1) / 2
}

fn offset(pos: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
    let p = (pos + k).checked_sub(pad)?;
    (p < len).then_some(p)
}

fn im2col(x: &[f64], d: Dims, b: usize, (kh, kw): Kernel) -> Vec<f64> {
    let (hw, bhw) = (d.plane(), b * d.plane());
    let (pt, pl) = (same_pad(kh), same_pad(kw));
    let mut col = vec![0.0; d.c * kh * kw * bhw];
    for ci in 0..d.c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * bhw;
                for s in 0..b {
                    let src = &x[ci * bhw + s * hw..ci * bhw + (s + 1) * hw];
                    let dst = &mut col[row + s * hw..row + (s + 1) * hw];
                    for y in 0..d.h {
                        let Some(iy) = offset(y, ky, pt, d.h) else { continue };
                        for xx in 0..d.w {
                            if let Some(ix) = offset(xx, kx, pl, d.w) {
                                dst[y * d.w + xx] = src[iy * d.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add(col: &[f64], d: Dims, b: usize, (kh, kw): Kernel, gx: &mut [f64]) {
    let (hw, bhw) = (d.plane(), b * d.plane());
    let (pt, pl) = (same_pad(kh), same_pad(kw));
    for ci in 0..d.c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * bhw;
                for s in 0..b {
                    let src = &col[row + s * hw..row + (s + 1) * hw];
                    let dst = &mut gx[ci * bhw + s * hw..ci * bhw + (s + 1) * hw];
                    for y in 0..d.h {
                        let Some(iy) = offset(y, ky, pt, d.h) else { continue };
                        for xx in 0..d.w {
                            if let Some(ix) = offset(xx, kx, pl, d.w) {
                                dst[iy * d.w + ix] += src[y * d.w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adaptive pooling bin `[floor(i L / n), ceil((i+1) L / n))`.
fn bin(i: usize, n: usize, len: usize) -> (usize, usize) {
    (i * len / n, ((i + 1) * len).div_ceil(n))
}

/// Channel-major input `[F][B]` for a dense layer.
fn gather_dense(x: &[f64], d: Dims, b: usize) -> Vec<f64> {
    let hw = d.plane();
    let mut out = vec![0.0; d.per_sample() * b];
    for ci in 0..d.c {
        for s in 0..b {
            for p in 0..hw {
                out[(ci * hw + p) * b + s] = x[(ci * b + s) * hw + p];
            }
        }
    }
    out
}

impl Graph {
    /// Run the graph on `b` samples laid out as `[B][rows][4]`. Train mode
    /// normalizes batchnorm with batch statistics and keeps backward caches.
    pub fn forward(&self, params: &[Vec<f64>], stats: &[BnStats], x: &[f64], b: usize, train: bool) -> Result<Tape> {
        let din = self.input_dims();
        if b == 0 || x.len() != b * din.per_sample() {
            return Err(Error::Shape(format!(
                "input has {} values, expected {} samples x {}",
                x.len(),
                b,
                din.per_sample()
            )));
        }
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let d = node.dims;
            let (hw, bhw) = (d.plane(), b * d.plane());
            let (out, a) = match &node.op {
                Op::Input => (x.to_vec(), Aux::None),
                &Op::Conv { src, kernel, param } => {
                    let ds = self.nodes[src].dims;
                    let kk = ds.c * kernel.0 * kernel.1;
                    let mut out = vec![0.0; d.c * bhw];
                    let pointwise = kernel == (1, 1);
                    let cols = if pointwise { Vec::new() } else { im2col(&acts[src], ds, b, kernel) };
                    let input = if pointwise { &acts[src] } else { &cols };
                    gemm(d.c, kk, bhw, &params[param], false, input, false, 0.0, &mut out);
                    for (o, row) in out.chunks_mut(bhw).enumerate() {
                        let bias = params[param + 1][o];
                        row.iter_mut().for_each(|v| *v += bias);
                    }
                    (out, if train && !pointwise { Aux::Cols(cols) } else { Aux::None })
                }
                &Op::BatchNorm { src, param, stat } => {
                    let x = &acts[src];
                    let (gamma, beta) = (&params[param], &params[param + 1]);
                    let mut out = vec![0.0; x.len()];
                    if train {
                        let m = bhw as f64;
                        let mut xhat = vec![0.0; x.len()];
                        let (mut means, mut vars, mut inv) = (vec![0.0; d.c], vec![0.0; d.c], vec![0.0; d.c]);
                        for c in 0..d.c {
                            let xs = &x[c * bhw..(c + 1) * bhw];
                            let mean = xs.iter().sum::<f64>() / m;
                            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
                            let is = 1.0 / (var + BN_EPS).sqrt();
                            for (i, v) in xs.iter().enumerate() {
                                let h = (v - mean) * is;
                                xhat[c * bhw + i] = h;
                                out[c * bhw + i] = gamma[c] * h + beta[c];
                            }
                            let unbiased = if bhw > 1 { var * m / (m - 1.0) } else { var };
                            (means[c], vars[c], inv[c]) = (mean, unbiased, is);
                        }
                        (out, Aux::Bn { xhat, inv_std: inv, mean: means, var: vars })
                    } else {
                        let st = &stats[stat];
                        for c in 0..d.c {
                            let is = 1.0 / (st.var[c] + BN_EPS).sqrt();
                            for i in c * bhw..(c + 1) * bhw {
                                out[i] = gamma[c] * (x[i] - st.mean[c]) * is + beta[c];
                            }
                        }
                        (out, Aux::None)
                    }
                }
                &Op::Relu { src } => (acts[src].iter().map(|v| v.max(0.0)).collect(), Aux::None),
                &Op::MaxPool { src } => {
                    let x = &acts[src];
                    let mut out = vec![0.0; x.len()];
                    let mut arg = vec![0u32; if train { x.len() } else { 0 }];
                    for p in 0..d.c * b {
                        let plane = &x[p * hw..(p + 1) * hw];
                        for y in 0..d.h {
                            for xx in 0..d.w {
                                let mut best = (f64::NEG_INFINITY, 0usize);
                                for iy in y.saturating_sub(1)..(y + 2).min(d.h) {
                                    for ix in xx.saturating_sub(1)..(xx + 2).min(d.w) {
                                        let v = plane[iy * d.w + ix];
                                        if v > best.0 {
                                            best = (v, iy * d.w + ix);
                                        }
                                    }
                                }
                                out[p * hw + y * d.w + xx] = best.0;
                                if train {
                                    arg[p * hw + y * d.w + xx] = best.1 as u32;
                                }
                            }
                        }
                    }
                    (out, if train { Aux::Arg(arg) } else { Aux::None })
                }
                Op::Concat { srcs } => {
                    let mut out = Vec::with_capacity(d.c * bhw);
                    for &s in srcs {
                        out.extend_from_slice(&acts[s]);
                    }
                    (out, Aux::None)
                }
                &Op::AvgPool { src } => {
                    let ds = self.nodes[src].dims;
                    let x = &acts[src];
                    let mut out = vec![0.0; d.c * bhw];
                    for p in 0..d.c * b {
                        let plane = &x[p * ds.plane()..(p + 1) * ds.plane()];
                        for oy in 0..d.h {
                            let (y0, y1) = bin(oy, d.h, ds.h);
                            for ox in 0..d.w {
                                let (x0, x1) = bin(ox, d.w, ds.w);
                                let mut acc = 0.0;
                                for iy in y0..y1 {
                                    acc += plane[iy * ds.w + x0..iy * ds.w + x1].iter().sum::<f64>();
                                }
                                out[p * hw + oy * d.w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                            }
                        }
                    }
                    (out, Aux::None)
                }
                &Op::Dense { src, param } => {
                    let ds = self.nodes[src].dims;
                    let xin = gather_dense(&acts[src], ds, b);
                    let mut out = vec![0.0; d.c * b];
                    gemm(d.c, ds.per_sample(), b, &params[param], false, &xin, false, 0.0, &mut out);
                    for (o, row) in out.chunks_mut(b).enumerate() {
                        let bias = params[param + 1][o];
                        row.iter_mut().for_each(|v| *v += bias);
                    }
                    (out, if train { Aux::Cols(xin) } else { Aux::None })
                }
            };
            acts.push(out);
            aux.push(a);
        }
        Ok(Tape { batch: b, train, acts, aux })
    }

    /// Gradients of the input and of every parameter array, given the
    /// gradient of the output. Requires a train-mode tape.
    pub fn backward(&self, params: &[Vec<f64>], tape: &Tape, d_out: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if !tape.train {
            return Err(Error::InvalidParameter("backward needs a train-mode tape".into()));
        }
        if d_out.len() != tape.output().len() {
            return Err(Error::Shape(format!("output gradient has {} values, expected {}", d_out.len(), tape.output().len())));
        }
        let b = tape.batch;
        let mut pg: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len]).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        *grads.last_mut().expect("nonempty") = Some(d_out.to_vec());

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], i: usize, len: usize) -> &'a mut Vec<f64> {
            grads[i].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (1..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let d = node.dims;
            let (hw, bhw) = (d.plane(), b * d.plane());
            match &node.op {
                Op::Input => {}
                &Op::Conv { src, kernel, param } => {
                    let ds = self.nodes[src].dims;
                    let kk = ds.c * kernel.0 * kernel.1;
                    let pointwise = kernel == (1, 1);
                    let cols: &[f64] = match &tape.aux[idx] {
                        Aux::Cols(c) => c,
                        _ if pointwise => &tape.acts[src],
                        _ => return Err(Error::Shape("missing convolution cache".into())),
                    };
                    gemm(d.c, bhw, kk, &g, false, cols, true, 1.0, &mut pg[param]);
                    for (o, row) in g.chunks(bhw).enumerate() {
                        pg[param + 1][o] += row.iter().sum::<f64>();
                    }
                    let mut dcols = vec![0.0; kk * bhw];
                    gemm(kk, d.c, bhw, &params[param], true, &g, false, 0.0, &mut dcols);
                    let gx = acc(&mut grads, src, ds.c * b * ds.plane());
                    if pointwise {
                        gx.iter_mut().zip(&dcols).for_each(|(a, v)| *a += v);
                    } else {
                        col2im_add(&dcols, ds, b, kernel, gx);
                    }
                }
                &Op::BatchNorm { src, param, .. } => {
                    let Aux::Bn { xhat, inv_std, .. } = &tape.aux[idx] else {
                        return Err(Error::Shape("missing batchnorm cache".into()));
                    };
                    let m = bhw as f64;
                    let gamma = &params[param];
                    let gx = acc(&mut grads, src, g.len());
                    for c in 0..d.c {
                        let r = c * bhw..(c + 1) * bhw;
                        let (gs, hs) = (&g[r.clone()], &xhat[r.clone()]);
                        let dbeta: f64 = gs.iter().sum();
                        let dgamma: f64 = gs.iter().zip(hs).map(|(a, h)| a * h).sum();
                        pg[param][c] += dgamma;
                        pg[param + 1][c] += dbeta;
                        let scale = gamma[c] * inv_std[c] / m;
                        for ((o, a), h) in gx[r].iter_mut().zip(gs).zip(hs) {
                            *o += scale * (m * a - dbeta - h * dgamma);
                        }
                    }
                }
                &Op::Relu { src } => {
                    let y = &tape.acts[idx];
                    let gx = acc(&mut grads, src, g.len());
                    for ((o, a), v) in gx.iter_mut().zip(&g).zip(y) {
                        if *v > 0.0 {
                            *o += a;
                        }
                    }
                }
                &Op::MaxPool { src } => {
                    let Aux::Arg(arg) = &tape.aux[idx] else {
                        return Err(Error::Shape("missing pooling cache".into()));
                    };
                    let gx = acc(&mut grads, src, g.len());
                    for p in 0..d.c * b {
                        for q in 0..hw {
                            gx[p * hw + arg[p * hw + q] as usize] += g[p * hw + q];
                        }
                    }
                }
                Op::Concat { srcs } => {
                    let mut at = 0;
                    for &s in srcs {
                        let len = tape.acts[s].len();
                        let gx = acc(&mut grads, s, len);
                        gx.iter_mut().zip(&g[at..at + len]).for_each(|(o, a)| *o += a);
                        at += len;
                    }
                }
                &Op::AvgPool { src } => {
                    let ds = self.nodes[src].dims;
                    let gx = acc(&mut grads, src, ds.c * b * ds.plane());
                    for p in 0..d.c * b {
                        let plane = &mut gx[p * ds.plane()..(p + 1) * ds.plane()];
                        for oy in 0..d.h {
                            let (y0, y1) = bin(oy, d.h, ds.h);
                            for ox in 0..d.w {
                                let (x0, x1) = bin(ox, d.w, ds.w);
                                let share = g[p * hw + oy * d.w + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                                for iy in y0..y1 {
                                    plane[iy * ds.w + x0..iy * ds.w + x1].iter_mut().for_each(|v| *v += share);
                                }
                            }
                        }
                    }
                }
                &Op::Dense { src, param } => {
                    let ds = self.nodes[src].dims;
                    let Aux::Cols(xin) = &tape.aux[idx] else {
                        return Err(Error::Shape("missing dense cache".into()));
                    };
                    let f = ds.per_sample();
                    gemm(d.c, b, f, &g, false, xin, true, 1.0, &mut pg[param]);
                    for (o, row) in g.chunks(b).enumerate() {
                        pg[param + 1][o] += row.iter().sum::<f64>();
                    }
                    let mut dx = vec![0.0; f * b];
                    gemm(f, d.c, b, &params[param], true, &g, false, 0.0, &mut dx);
                    let shw = ds.plane();
                    let gx = acc(&mut grads, src, f * b);
                    for ci in 0..ds.c {
                        for s in 0..b {
                            for p in 0..shw {
                                gx[(ci * b + s) * shw + p] += dx[(ci * shw + p) * b + s];
                            }
                        }
                    }
                }
            }
        }
        let din = grads[0].take().unwrap_or_else(|| vec![0.0; tape.acts[0].len()]);
        Ok((din, pg))
    }
}
