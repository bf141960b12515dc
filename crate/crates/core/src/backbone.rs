//! Per-branch networks: modality-specific encoders, mask-aware attention
//! fusion, fused decoder and the refinement UNet.
//!
//! Encoders run at three scales (full, 1/2, 1/4). Fusion happens at every
//! scale; the decoder only ever sees fused features, with the 1/4-scale
//! fusion output being the branch's `F_i` used by the relational loss.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::masking::ModalityMask;
use crate::tensor::{Dims3, Tensor};

/// Number of stride-2 reductions in every encoder.
pub const ENCODER_DEPTH: u32 = 2;

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ArchConfig {
    pub modalities: usize,
    pub classes: usize,
    /// Encoder widths at full, 1/2 and 1/4 resolution; the last is `d`.
    pub enc_channels: [usize; 3],
    /// Fused widths per scale; the last is `d_f`.
    pub fused_channels: [usize; 3],
    /// Refinement UNet widths at full and 1/2 resolution.
    pub refine_channels: [usize; 2],
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            modalities: 4,
            classes: 4,
            enc_channels: [4, 8, 8],
            fused_channels: [4, 8, 16],
            refine_channels: [4, 8],
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities < 2 {
            return Err(Error::config("arch.modalities", "need >= 2"));
        }
        if self.classes < 2 {
            return Err(Error::config("arch.classes", "need >= 2"));
        }
        let widths = self.enc_channels.iter().chain(&self.fused_channels).chain(&self.refine_channels);
        if widths.into_iter().any(|&c| c == 0) {
            return Err(Error::config("arch", "channel widths must be positive"));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.enc_channels[2]
    }

    pub fn d_f(&self) -> usize {
        self.fused_channels[2]
    }

    /// Refinement input width: one block of class scores per modality plus
    /// the initial logits.
    pub fn refine_inputs(&self) -> usize {
        (self.modalities + 1) * self.classes
    }
}

/// Named parameter tensors of one branch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.values.push(t);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv: ConvLayer,
    gamma: usize,
    beta: usize,
}

struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> ConvLayer {
        let fan_in = (cin * k * k * k) as f64;
        let normal = Normal::new(0.0, libm::sqrt(gain / fan_in)).expect("positive std");
        let n = cout * cin * k * k * k;
        let w: Vec<f64> = (0..n).map(|_| normal.sample(self.rng)).collect();
        let w = self.store.push(format!("{name}.weight"), Tensor::from_vec(&[cout, cin, k, k, k], w).expect("shape"));
        let b = self.store.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvLayer { w, b, stride, pad: k / 2 }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Block {
        let conv = self.conv(name, cin, cout, 3, stride, 2.0);
        let gamma = self.store.push(format!("{name}.norm.gamma"), Tensor::full(&[cout], 1.0));
        let beta = self.store.push(format!("{name}.norm.beta"), Tensor::zeros(&[cout]));
        Block { conv, gamma, beta }
    }
}

/// Tape ids for every parameter of a branch.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    fn conv(&self, tape: &mut Tape, l: &ConvLayer, x: NodeId) -> Result<NodeId> {
        tape.conv(x, self.ids[l.w], self.ids[l.b], l.stride, l.pad)
    }

    fn block(&self, tape: &mut Tape, b: &Block, x: NodeId) -> Result<NodeId> {
        let c = self.conv(tape, &b.conv, x)?;
        let n = tape.instance_norm(c, self.ids[b.gamma], self.ids[b.beta])?;
        Ok(tape.leaky_relu(n, LEAKY_SLOPE))
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: Block,
    down1: Block,
    conv1: Block,
    down2: Block,
    conv2: Block,
}

#[derive(Debug, Clone)]
struct FusionLevel {
    score: ConvLayer,
    value: ConvLayer,
}

#[derive(Debug, Clone)]
struct Decoder {
    deep: Block,
    mid: Block,
    top: Block,
    head: ConvLayer,
}

#[derive(Debug, Clone)]
struct RefineNet {
    stem: Block,
    down: Block,
    mid: Block,
    up: Block,
    head: ConvLayer,
}

/// Encoder outputs of one modality at the three scales.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub levels: [NodeId; 3],
}

/// Fused features at the three scales; `levels[2]` is the branch's `F_i`.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    pub levels: [NodeId; 3],
}

/// Result of a branch's segmentation forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    pub logits: NodeId,
    pub fused: NodeId,
}

/// All parameters and layer wiring of one branch.
#[derive(Debug, Clone)]
pub struct BranchNet {
    pub arch: ArchConfig,
    pub params: ParamStore,
    encoders: Vec<Encoder>,
    fusion: [FusionLevel; 3],
    decoder: Decoder,
    refine: RefineNet,
}

impl PartialEq for BranchNet {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

impl BranchNet {
    pub fn new<R: Rng>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init { store: &mut store, rng };
        let [c0, c1, d] = arch.enc_channels;
        let [f0, f1, df] = arch.fused_channels;
        let encoders = (0..arch.modalities)
            .map(|k| Encoder {
                stem: init.block(&format!("enc{k}.stem"), 1, c0, 1),
                down1: init.block(&format!("enc{k}.down1"), c0, c1, 2),
                conv1: init.block(&format!("enc{k}.conv1"), c1, c1, 1),
                down2: init.block(&format!("enc{k}.down2"), c1, d, 2),
                conv2: init.block(&format!("enc{k}.conv2"), d, d, 1),
            })
            .collect();
        let mut fusion_level = |lvl: usize, cin: usize, cout: usize| FusionLevel {
            score: init.conv(&format!("fuse{lvl}.score"), cin, 1, 1, 1, 1.0),
            value: init.conv(&format!("fuse{lvl}.value"), cin, cout, 1, 1, 1.0),
        };
        let fusion = [fusion_level(0, c0, f0), fusion_level(1, c1, f1), fusion_level(2, d, df)];
        let decoder = Decoder {
            deep: init.block("dec.deep", df, c1, 1),
            mid: init.block("dec.mid", c1 + f1, c1, 1),
            top: init.block("dec.top", c1 + f0, c0, 1),
            head: init.conv("dec.head", c0, arch.classes, 1, 1, 1.0),
        };
        let [r0, r1] = arch.refine_channels;
        let refine = RefineNet {
            stem: init.block("refine.stem", arch.refine_inputs(), r0, 1),
            down: init.block("refine.down", r0, r1, 2),
            mid: init.block("refine.mid", r1, r1, 1),
            up: init.block("refine.up", r1 + r0, r0, 1),
            head: init.conv("refine.head", r0, arch.classes, 1, 1, 1.0),
        };
        Ok(BranchNet { arch: arch.clone(), params: store, encoders, fusion, decoder, refine })
    }

    /// Same wiring as `self` with replacement parameter values.
    pub fn with_params(&self, params: ParamStore) -> Result<Self> {
        if params.names != self.params.names
            || params.values.iter().zip(&self.params.values).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("parameter set does not match the architecture"));
        }
        Ok(BranchNet { params, ..self.clone() })
    }

    /// Registers every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let ids = self.params.values.iter().enumerate().map(|(i, t)| tape.param(t.clone(), i)).collect();
        Bound { ids }
    }

    fn check_volume(&self, t: &Tensor, channels: usize) -> Result<Dims3> {
        let dims = t.dims3()?;
        if t.channels() != channels {
            return Err(Error::shape(format!("expected {channels} channels, got {:?}", t.shape())));
        }
        dims.reduced(ENCODER_DEPTH)?;
        Ok(dims)
    }

    /// Modality-`k` encoder on a `[1, H, W, Z]` node.
    pub fn encode_node(&self, tape: &mut Tape, p: &Bound, k: usize, volume: NodeId) -> Result<Encoded> {
        self.check_volume(tape.value(volume), 1)?;
        let e = self.encoders.get(k).ok_or_else(|| Error::shape(format!("no encoder for modality {k}")))?;
        let l0 = p.block(tape, &e.stem, volume)?;
        let x = p.block(tape, &e.down1, l0)?;
        let l1 = p.block(tape, &e.conv1, x)?;
        let x = p.block(tape, &e.down2, l1)?;
        let l2 = p.block(tape, &e.conv2, x)?;
        Ok(Encoded { levels: [l0, l1, l2] })
    }

    /// Attention fusion over the present modalities at every scale.
    ///
    /// Absent modalities are excluded from the softmax, which is the same
    /// as giving them a score of −∞.
    pub fn fuse_nodes(&self, tape: &mut Tape, p: &Bound, enc: &[Option<Encoded>], mask: &ModalityMask) -> Result<Fused> {
        mask.ensure_nonempty()?;
        if enc.len() != self.arch.modalities || mask.len() != self.arch.modalities {
            return Err(Error::shape("fusion input does not cover every modality"));
        }
        let mut levels = [None; 3];
        for (lvl, fl) in self.fusion.iter().enumerate() {
            let mut scores = Vec::new();
            let mut values = Vec::new();
            for k in mask.present() {
                let e = enc[k].ok_or_else(|| Error::Validation(format!("present modality {k} was not encoded")))?;
                scores.push(p.conv(tape, &fl.score, e.levels[lvl])?);
                values.push(p.conv(tape, &fl.value, e.levels[lvl])?);
            }
            levels[lvl] = Some(tape.attention_combine(&scores, &values)?);
        }
        Ok(Fused { levels: levels.map(|l| l.expect("all levels fused")) })
    }

    pub fn decode_nodes(&self, tape: &mut Tape, p: &Bound, fused: &Fused) -> Result<NodeId> {
        let d = &self.decoder;
        let x = p.block(tape, &d.deep, fused.levels[2])?;
        let x = tape.upsample2x(x)?;
        let x = tape.concat(&[x, fused.levels[1]])?;
        let x = p.block(tape, &d.mid, x)?;
        let x = tape.upsample2x(x)?;
        let x = tape.concat(&[x, fused.levels[0]])?;
        let x = p.block(tape, &d.top, x)?;
        p.conv(tape, &d.head, x)
    }

    /// Refinement UNet on the `[(K+1)·C, H, W, Z]` prior+logit stack.
    pub fn refine_node(&self, tape: &mut Tape, p: &Bound, combined: NodeId) -> Result<NodeId> {
        self.check_volume(tape.value(combined), self.arch.refine_inputs())?;
        let r = &self.refine;
        let s0 = p.block(tape, &r.stem, combined)?;
        let x = p.block(tape, &r.down, s0)?;
        let x = p.block(tape, &r.mid, x)?;
        let x = tape.upsample2x(x)?;
        let x = tape.concat(&[x, s0])?;
        let x = p.block(tape, &r.up, x)?;
        p.conv(tape, &r.head, x)
    }

    /// Encoders for the present modalities, fusion and decoding.
    /// `volumes` is `[K, H, W, Z]`; absent modalities are never read.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, volumes: &Tensor, mask: &ModalityMask) -> Result<BranchOutput> {
        self.check_volume(volumes, self.arch.modalities)?;
        mask.ensure_nonempty()?;
        if mask.len() != self.arch.modalities {
            return Err(Error::shape("mask length differs from modality count"));
        }
        let dims = volumes.dims3()?;
        let mut enc = vec![None; self.arch.modalities];
        for k in mask.present() {
            let v = Tensor::from_vec(&[1, dims.0, dims.1, dims.2], volumes.channel(k).to_vec())?;
            let node = tape.input(v);
            enc[k] = Some(self.encode_node(tape, p, k, node)?);
        }
        let fused = self.fuse_nodes(tape, p, &enc, mask)?;
        let logits = self.decode_nodes(tape, p, &fused)?;
        Ok(BranchOutput { logits, fused: fused.levels[2] })
    }

    /// Inference-only logits for one sample.
    pub fn predict_logits(&self, volumes: &Tensor, mask: &ModalityMask) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let p = self.bind(&mut tape);
        let out = self.forward(&mut tape, &p, volumes, mask)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Per-modality features `[K, d, Hf, Wf, Zf]` at every scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub levels: [Tensor; 3],
}

/// Fused features at every scale; `levels[2]` is `[d_f, Hf, Wf, Zf]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    pub levels: [Tensor; 3],
}

impl FusedFeatures {
    pub fn deepest(&self) -> &Tensor {
        &self.levels[2]
    }
}

/// Standalone modality encoder: `[1, H, W, Z]` → deepest `[d, Hf, Wf, Zf]`.
pub fn encode(net: &BranchNet, k: usize, volume: &Tensor) -> Result<Tensor> {
    Ok(encode_levels(net, k, volume)?[2].clone())
}

fn encode_levels(net: &BranchNet, k: usize, volume: &Tensor) -> Result<[Tensor; 3]> {
    let mut tape = Tape::inference();
    let p = net.bind(&mut tape);
    let x = tape.input(volume.clone());
    let e = net.encode_node(&mut tape, &p, k, x)?;
    Ok(e.levels.map(|id| tape.value(id).clone()))
}

/// Encodes every modality of `[K, H, W, Z]` into a feature stack.
pub fn encode_all(net: &BranchNet, volumes: &Tensor) -> Result<FeatureStack> {
    let dims = volumes.dims3()?;
    let mut per: Vec<[Tensor; 3]> = Vec::new();
    for k in 0..volumes.channels() {
        let v = Tensor::from_vec(&[1, dims.0, dims.1, dims.2], volumes.channel(k).to_vec())?;
        per.push(encode_levels(net, k, &v)?);
    }
    let stack = |lvl: usize| Tensor::stack(&per.iter().map(|l| l[lvl].clone()).collect::<Vec<_>>());
    Ok(FeatureStack { levels: [stack(0)?, stack(1)?, stack(2)?] })
}

/// Masks every scale of a feature stack.
pub fn mask_features(features: &FeatureStack, mask: &ModalityMask) -> Result<FeatureStack> {
    Ok(FeatureStack {
        levels: [
            crate::masking::apply_mask(&features.levels[0], mask)?,
            crate::masking::apply_mask(&features.levels[1], mask)?,
            crate::masking::apply_mask(&features.levels[2], mask)?,
        ],
    })
}

/// Standalone mask-aware fusion of an (already masked) feature stack.
pub fn fuse(net: &BranchNet, features: &FeatureStack, mask: &ModalityMask) -> Result<FusedFeatures> {
    Ok(fuse_with_weights(net, features, mask)?.0)
}

/// Fusion plus the deepest-scale modality weights `[present, voxels]`.
pub fn fuse_with_weights(net: &BranchNet, features: &FeatureStack, mask: &ModalityMask) -> Result<(FusedFeatures, Vec<f64>)> {
    mask.ensure_nonempty()?;
    if features.levels[0].channels() != mask.len() {
        return Err(Error::shape("feature stack and mask disagree on modality count"));
    }
    let mut tape = Tape::inference();
    let p = net.bind(&mut tape);
    let mut enc = vec![None; mask.len()];
    for k in mask.present() {
        let levels = [0, 1, 2].map(|l| tape.input(features.levels[l].slice0(k)));
        enc[k] = Some(Encoded { levels });
    }
    let fused = net.fuse_nodes(&mut tape, &p, &enc, mask)?;
    let weights = tape.attention_weights(fused.levels[2]).expect("attention node").to_vec();
    Ok((FusedFeatures { levels: fused.levels.map(|id| tape.value(id).clone()) }, weights))
}

/// Standalone decoder: fused features → `[C, H, W, Z]` logits.
pub fn decode(net: &BranchNet, fused: &FusedFeatures) -> Result<Tensor> {
    let expect = [net.arch.fused_channels[0], net.arch.fused_channels[1], net.arch.d_f()];
    for (lvl, t) in fused.levels.iter().enumerate() {
        if t.channels() != expect[lvl] || t.shape().len() != 4 {
            return Err(Error::shape(format!("fused level {lvl} has shape {:?}", t.shape())));
        }
    }
    let mut tape = Tape::inference();
    let p = net.bind(&mut tape);
    let levels = [0, 1, 2].map(|l| tape.input(fused.levels[l].clone()));
    let out = net.decode_nodes(&mut tape, &p, &Fused { levels })?;
    Ok(tape.value(out).clone())
}

/// Standalone refinement pass.
pub fn refine_forward(net: &BranchNet, combined: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let p = net.bind(&mut tape);
    let x = tape.input(combined.clone());
    let out = net.refine_node(&mut tape, &p, x)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn net(seed: u64) -> BranchNet {
        BranchNet::new(&ArchConfig::default(), &mut stream_rng(seed, Stream::InitBranch1, 0)).unwrap()
    }

    fn volume(k: usize, n: usize, s: f64) -> Tensor {
        let len = k * n * n * n;
        Tensor::from_vec(&[k, n, n, n], (0..len).map(|i| libm::sin(i as f64 * s)).collect()).unwrap()
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let n = net(1);
        let v = volume(1, 16, 0.3);
        let a = encode(&n, 0, &v).unwrap();
        assert_eq!(a.shape(), &[8, 4, 4, 4]);
        assert_eq!(a, encode(&n, 0, &v).unwrap());
        assert!(matches!(encode(&n, 0, &volume(1, 10, 0.3)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_params_zero_input_gives_zero() {
        let mut n = net(1);
        for t in &mut n.params.values {
            t.data_mut().fill(0.0);
        }
        let out = encode(&n, 2, &Tensor::zeros(&[1, 16, 16, 16])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_and_refine_shapes() {
        let n = net(2);
        let feats = encode_all(&n, &volume(4, 16, 0.11)).unwrap();
        let fused = fuse(&n, &feats, &ModalityMask::full(4)).unwrap();
        assert_eq!(fused.deepest().shape(), &[16, 4, 4, 4]);
        let logits = decode(&n, &fused).unwrap();
        assert_eq!(logits.shape(), &[4, 16, 16, 16]);
        assert_eq!(logits, decode(&n, &fused).unwrap());
        let combined = volume(20, 16, 0.07);
        let r = refine_forward(&n, &combined).unwrap();
        assert_eq!(r.shape(), &[4, 16, 16, 16]);
        assert!(refine_forward(&n, &volume(16, 16, 0.07)).is_err());
        assert!(refine_forward(&n, &Tensor::zeros(&[20, 16, 16, 16])).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singleton_fusion_is_value_projection() {
        let n = net(3);
        let feats = encode_all(&n, &volume(4, 16, 0.21)).unwrap();
        let mask = ModalityMask::from_code(0b0100, 4);
        let masked = mask_features(&feats, &mask).unwrap();
        let (fused, w) = fuse_with_weights(&n, &masked, &mask).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
        // value projection by hand at the deepest level
        let f = feats.levels[2].slice0(2);
        let wv = n.params.get("fuse2.value.weight").unwrap();
        let (df, d) = (wv.shape()[0], wv.shape()[1]);
        let s = f.inner_len();
        for o in 0..df {
            for v in 0..s {
                let want: f64 = (0..d).map(|i| wv.data()[o * d + i] * f.data()[i * s + v]).sum();
                assert!((fused.deepest().data()[o * s + v] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tied_features_give_uniform_weights() {
        let n = net(4);
        let one = volume(1, 16, 0.17);
        let enc0 = encode_levels(&n, 0, &one).unwrap();
        let stack = |lvl: usize| Tensor::stack(&vec![enc0[lvl].clone(); 4]).unwrap();
        let feats = FeatureStack { levels: [stack(0), stack(1), stack(2)] };
        let (_, w) = fuse_with_weights(&n, &feats, &ModalityMask::full(4)).unwrap();
        assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn branches_same_size_different_values() {
        let a = net(1);
        let b = BranchNet::new(&ArchConfig::default(), &mut stream_rng(1, Stream::InitBranch2, 0)).unwrap();
        assert_eq!(a.params.scalar_count(), b.params.scalar_count());
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn absent_modalities_do_not_matter() {
        let n = net(5);
        let v = volume(4, 16, 0.19);
        let mask = ModalityMask::from_code(0b1010, 4);
        let mut w = v.clone();
        w.channel_mut(0).fill(123.0);
        w.channel_mut(2).iter_mut().for_each(|x| *x = -*x * 7.0);
        let a = n.predict_logits(&v, &mask).unwrap();
        let b = n.predict_logits(&w, &mask).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
