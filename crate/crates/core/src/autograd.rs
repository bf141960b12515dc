//! Reverse-mode tape over the handful of volumetric ops the networks need.
//!
//! Loss functions are not recorded on the tape. They return their analytic
//! gradients with respect to tape outputs, which are then fed back in as
//! seeds to [`Tape::backward`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{conv3d_backward, conv3d_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Dims3, Tensor};

/// Instance-norm variance floor.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    LeakyRelu { x: NodeId, slope: f64 },
    InstanceNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Upsample { x: NodeId },
    Concat { parts: Vec<NodeId> },
    AttnCombine { scores: Vec<NodeId>, values: Vec<NodeId>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, NodeId)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for every parameter leaf, keyed by the index given to
    /// [`Tape::param`].
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, Option<&Tensor>)> + '_ {
        self.params.iter().map(|&(i, id)| (i, self.grads[id.0].as_ref()))
    }
}

impl Tape {
    /// Tape that records parameter gradients.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), record: true }
    }

    /// Tape whose parameters are plain constants.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), record: false }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// Input that should receive a gradient (used by gradient checks).
    pub fn watched_input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, t: Tensor, index: usize) -> NodeId {
        let rec = self.record;
        self.push(t, Op::Param(index), rec)
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (cin, dims) = match xs[..] {
            [c, h, w, z] => (c, Dims3(h, w, z)),
            _ => return Err(Error::shape(format!("conv input must be [C,H,W,Z], got {xs:?}"))),
        };
        let (cout, k) = match ws[..] {
            [o, i, k, k2, k3] if i == cin && k == k2 && k == k3 => (o, k),
            _ => return Err(Error::shape(format!("conv weight {ws:?} incompatible with {cin} input channels"))),
        };
        if self.value(b).len() != cout {
            return Err(Error::shape(format!("conv bias needs {cout} entries")));
        }
        if dims.0 + 2 * pad < k || dims.1 + 2 * pad < k || dims.2 + 2 * pad < k {
            return Err(Error::shape(format!("conv kernel {k} larger than padded grid {xs:?}")));
        }
        let geom = ConvGeom::new(cin, cout, k, stride, pad, dims);
        let y = conv3d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let o = geom.output;
        let t = Tensor::from_vec(&[cout, o.0, o.1, o.2], y)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(t, Op::Conv { x, w, b, geom }, ng))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        let ng = self.needs(x);
        self.push(t, Op::LeakyRelu { x, slope }, ng)
    }

    /// Per-channel normalization over the spatial axes with affine
    /// `gamma`/`beta`.
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.channels();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(format!("norm affine params must have {c} entries")));
        }
        let n = xv.inner_len();
        let mut out = Tensor::zeros(xv.shape());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let src = xv.channel(ch);
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / libm::sqrt(var + NORM_EPS);
            inv_std[ch] = is;
            let (g, b) = (self.value(gamma).data()[ch], self.value(beta).data()[ch]);
            let dst = out.channel_mut(ch);
            for i in 0..n {
                let xh = (src[i] - mean) * is;
                xhat[ch * n + i] = xh;
                dst[i] = g * xh + b;
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Nearest-neighbour 2× upsampling of every spatial axis.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let Dims3(h, w, z) = xv.dims3()?;
        let c = xv.channels();
        let (oh, ow, oz) = (2 * h, 2 * w, 2 * z);
        let mut out = Tensor::zeros(&[c, oh, ow, oz]);
        for ch in 0..c {
            let src = xv.channel(ch);
            let dst = out.channel_mut(ch);
            for i in 0..oh {
                for j in 0..ow {
                    for k in 0..oz {
                        dst[(i * ow + j) * oz + k] = src[((i / 2) * w + j / 2) * z + k / 2];
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Upsample { x }, ng))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(parts[0]).shape()[1..].to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != first[..] {
                return Err(Error::shape(format!("concat spatial mismatch {:?} vs {:?}", v.shape(), first)));
            }
            channels += v.channels();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(&first);
        let ng = parts.iter().any(|&p| self.needs(p));
        let t = Tensor::from_vec(&shape, data)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }, ng))
    }

    /// `Σ_k softmax_k(scores)·values_k` per voxel, where each score tensor is
    /// `[1, ...]` and each value tensor `[D, ...]`. Only the supplied
    /// entries take part in the softmax.
    pub fn attention_combine(&mut self, scores: &[NodeId], values: &[NodeId]) -> Result<NodeId> {
        let m = scores.len();
        if m == 0 || m != values.len() {
            return Err(Error::shape("attention needs one score per value and at least one entry"));
        }
        let vshape = self.value(values[0]).shape().to_vec();
        let d = vshape[0];
        let s = self.value(values[0]).inner_len();
        for k in 0..m {
            if self.value(values[k]).shape() != &vshape[..] || self.value(scores[k]).len() != s {
                return Err(Error::shape("attention inputs disagree in shape"));
            }
        }
        let mut weights = vec![0.0; m * s];
        let mut buf = vec![0.0; m];
        for v in 0..s {
            for k in 0..m {
                buf[k] = self.value(scores[k]).data()[v];
            }
            crate::tensor::softmax_in_place(&mut buf);
            for k in 0..m {
                weights[k * s + v] = buf[k];
            }
        }
        let mut out = Tensor::zeros(&vshape);
        for k in 0..m {
            let val = self.value(values[k]).data();
            let wk = &weights[k * s..(k + 1) * s];
            let o = out.data_mut();
            for c in 0..d {
                for v in 0..s {
                    o[c * s + v] += wk[v] * val[c * s + v];
                }
            }
        }
        let ng = scores.iter().chain(values).any(|&p| self.needs(p));
        Ok(self.push(out, Op::AttnCombine { scores: scores.to_vec(), values: values.to_vec(), weights }, ng))
    }

    /// Modality weights of an attention node, `[m, voxels]` row-major.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::AttnCombine { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Propagates the seed gradients back through the tape.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.shape() != self.value(id).shape() {
                return Err(Error::shape(format!(
                    "seed gradient {:?} vs node {:?}",
                    g.shape(),
                    self.value(id).shape()
                )));
            }
            accumulate(&mut grads, id, g);
        }
        let mut params = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if let Op::Param(pi) = node.op {
                params.push((pi, NodeId(i)));
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut dw = self.needs(*w).then(|| Tensor::zeros(wv.shape()));
                let mut db = self.needs(*b).then(|| Tensor::zeros(self.value(*b).shape()));
                let mut dx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                conv3d_backward(
                    xv.data(),
                    wv.data(),
                    gy.data(),
                    geom,
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                    dx.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = dw {
                    accumulate(grads, *w, t);
                }
                if let Some(t) = db {
                    accumulate(grads, *b, t);
                }
                if let Some(t) = dx {
                    accumulate(grads, *x, t);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let mut dx = gy.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *v < 0.0 {
                        *d *= slope;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let c = gy.channels();
                let n = gy.inner_len();
                let gv = self.value(*gamma).data();
                let mut dx = Tensor::zeros(gy.shape());
                let mut dg = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let g = gy.channel(ch);
                    let xh = &xhat[ch * n..(ch + 1) * n];
                    let sum_g: f64 = g.iter().sum();
                    let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
                    dg.data_mut()[ch] = sum_gx;
                    dbeta.data_mut()[ch] = sum_g;
                    let scale = gv[ch] * inv_std[ch] / n as f64;
                    let d = dx.channel_mut(ch);
                    for i in 0..n {
                        d[i] = scale * (n as f64 * g[i] - sum_g - xh[i] * sum_gx);
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Upsample { x } => {
                let xv = self.value(*x);
                let Dims3(h, w, z) = xv.dims3().expect("upsample input is 4-d");
                let (ow, oz) = (2 * w, 2 * z);
                let mut dx = Tensor::zeros(xv.shape());
                for ch in 0..xv.channels() {
                    let src = gy.channel(ch);
                    let dst = dx.channel_mut(ch);
                    for i in 0..2 * h {
                        for j in 0..ow {
                            for k in 0..oz {
                                dst[((i / 2) * w + j / 2) * z + k / 2] += src[(i * ow + j) * oz + k];
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        let t = Tensor::from_vec(self.value(p).shape(), gy.data()[offset..offset + len].to_vec())
                            .expect("concat part shape");
                        accumulate(grads, p, t);
                    }
                    offset += len;
                }
            }
            Op::AttnCombine { scores, values, weights } => {
                let m = scores.len();
                let s = gy.inner_len();
                let d = gy.channels();
                // dL/dw_k per voxel
                let mut dw = vec![0.0; m * s];
                for k in 0..m {
                    let val = self.value(values[k]).data();
                    for c in 0..d {
                        for v in 0..s {
                            dw[k * s + v] += gy.data()[c * s + v] * val[c * s + v];
                        }
                    }
                    if self.needs(values[k]) {
                        let mut dv = Tensor::zeros(self.value(values[k]).shape());
                        let wk = &weights[k * s..(k + 1) * s];
                        for c in 0..d {
                            for v in 0..s {
                                dv.data_mut()[c * s + v] = wk[v] * gy.data()[c * s + v];
                            }
                        }
                        accumulate(grads, values[k], dv);
                    }
                }
                for v in 0..s {
                    let dot: f64 = (0..m).map(|k| weights[k * s + v] * dw[k * s + v]).sum();
                    for k in 0..m {
                        dw[k * s + v] = weights[k * s + v] * (dw[k * s + v] - dot);
                    }
                }
                for k in 0..m {
                    if self.needs(scores[k]) {
                        let t = Tensor::from_vec(self.value(scores[k]).shape(), dw[k * s..(k + 1) * s].to_vec())
                            .expect("score shape");
                        accumulate(grads, scores[k], t);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], s: f64, off: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| libm::sin(i as f64 * s + off)).collect()).unwrap()
    }

    /// Builds a small graph using every op and returns `<probe, out>`.
    fn objective(x: &Tensor, probe: &Tensor) -> (f64, Tensor) {
        let mut tape = Tape::new();
        let xi = tape.watched_input(x.clone());
        let w = tape.param(ramp(&[3, 2, 3, 3, 3], 0.7, 0.1), 0);
        let b = tape.param(ramp(&[3], 1.3, 0.2), 1);
        let g = tape.param(ramp(&[3], 0.5, 1.0), 2);
        let be = tape.param(ramp(&[3], 0.9, 0.3), 3);
        let c = tape.conv(xi, w, b, 2, 1).unwrap();
        let n = tape.instance_norm(c, g, be).unwrap();
        let r = tape.leaky_relu(n, 0.1);
        let u = tape.upsample2x(r).unwrap();
        let cat = tape.concat(&[u, xi]).unwrap();
        let ws = tape.param(ramp(&[1, 5, 1, 1, 1], 0.4, 0.0), 4);
        let bs = tape.param(Tensor::zeros(&[1]), 5);
        let s0 = tape.conv(cat, ws, bs, 1, 0).unwrap();
        let s1 = tape.conv(xi, ws, bs, 1, 0);
        assert!(s1.is_err());
        let wv = tape.param(ramp(&[2, 5, 1, 1, 1], 0.8, 0.5), 6);
        let bv = tape.param(Tensor::zeros(&[2]), 7);
        let v0 = tape.conv(cat, wv, bv, 1, 0).unwrap();
        let s2 = tape.conv(cat, ws, bs, 1, 0).unwrap();
        let r2 = tape.leaky_relu(s2, 0.5);
        let a = tape.attention_combine(&[s0, r2], &[v0, xi]).unwrap();
        let out = tape.value(a).clone();
        let val: f64 = out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        let grads = tape.backward(vec![(a, probe.clone())]).unwrap();
        (val, grads.get(xi).unwrap().clone())
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let x = ramp(&[2, 4, 4, 4], 0.37, 0.0);
        let probe = ramp(&[2, 4, 4, 4], 0.53, 0.4);
        let (_, g) = objective(&x, &probe);
        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&xp, &probe).0 - objective(&xm, &probe).0) / (2.0 * h);
            let an = g.data()[i];
            assert!((fd - an).abs() <= 1e-6 + 1e-5 * fd.abs(), "i={i} fd={fd} an={an}");
        }
    }

    #[test]
    fn inference_tape_skips_param_grads() {
        let mut tape = Tape::inference();
        let x = tape.input(Tensor::full(&[1, 2, 2, 2], 1.0));
        let w = tape.param(Tensor::full(&[1, 1, 1, 1, 1], 2.0), 0);
        let b = tape.param(Tensor::zeros(&[1]), 1);
        let y = tape.conv(x, w, b, 1, 0).unwrap();
        let g = tape.backward(vec![(y, Tensor::full(&[1, 2, 2, 2], 1.0))]).unwrap();
        assert!(g.param_grads().all(|(_, t)| t.is_none()));
    }
}
