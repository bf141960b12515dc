//! Straight-loop reference implementations of the loss operations, written
//! independently of the library code (no shared helpers, naive formulas).

#![allow(dead_code)]

use smml_core::{LabelVolume, Tensor};

/// `[C, H, W, Z]` element access.
pub fn at(t: &Tensor, c: usize, v: usize) -> f64 {
    t.data()[c * t.inner_len() + v]
}

pub fn softmax_voxel(t: &Tensor, v: usize, tau: f64) -> Vec<f64> {
    let c = t.channels();
    let m = (0..c).map(|k| at(t, k, v) / tau).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..c).map(|k| (at(t, k, v) / tau - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a / b).ln() }).sum()
}

pub fn pixel_ce(logits: &Tensor, labels: &LabelVolume) -> Vec<f64> {
    (0..labels.data.len()).map(|v| -softmax_voxel(logits, v, 1.0)[labels.data[v] as usize].ln()).collect()
}

pub fn transfer(q1: &[f64], q2: &[f64]) -> Vec<bool> {
    let mut out = Vec::new();
    for i in 0..q1.len() {
        out.push(q1[i] > q2[i]);
    }
    out
}

/// `(L1, L2)` with batch-pooled N_21 / N_12.
pub fn pbc(l1: &[Tensor], l2: &[Tensor], masks: &[Vec<bool>], tau: f64, tau_squared: bool) -> (f64, f64) {
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut n21 = 0usize;
    let mut n12 = 0usize;
    for b in 0..l1.len() {
        for v in 0..masks[b].len() {
            let p1 = softmax_voxel(&l1[b], v, tau);
            let p2 = softmax_voxel(&l2[b], v, tau);
            if masks[b][v] {
                n21 += 1;
                s1 += kl(&p1, &p2);
            } else {
                n12 += 1;
                s2 += kl(&p2, &p1);
            }
        }
    }
    let f = if tau_squared { tau * tau } else { 1.0 };
    let a = if n21 == 0 { 0.0 } else { f * s1 / n21 as f64 };
    let b = if n12 == 0 { 0.0 } else { f * s2 / n12 as f64 };
    (a, b)
}

/// `protos[b][c]` and `valid[b][c]`.
pub fn prototypes(fused: &[Tensor], labels: &[LabelVolume], classes: usize) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<bool>>) {
    let mut protos = Vec::new();
    let mut valid = Vec::new();
    for b in 0..fused.len() {
        let d = fused[b].channels();
        let mut pb = Vec::new();
        let mut vb = Vec::new();
        for c in 0..classes {
            let mut sum = vec![0.0; d];
            let mut count = 0;
            for v in 0..labels[b].data.len() {
                if labels[b].data[v] as usize == c {
                    count += 1;
                    for k in 0..d {
                        sum[k] += at(&fused[b], k, v);
                    }
                }
            }
            if count > 0 {
                for x in sum.iter_mut() {
                    *x /= count as f64;
                }
            }
            pb.push(sum);
            vb.push(count > 0);
        }
        protos.push(pb);
        valid.push(vb);
    }
    (protos, valid)
}

pub fn relation(protos: &[Vec<Vec<f64>>], valid: &[Vec<bool>]) -> Vec<Vec<f64>> {
    let flat: Vec<(&Vec<f64>, bool)> =
        protos.iter().zip(valid).flat_map(|(p, v)| p.iter().zip(v.iter().copied())).collect();
    let n = flat.len();
    let mut r = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (a, va) = flat[i];
            let (b, vb) = flat[j];
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if va && vb && na > 0.0 && nb > 0.0 {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                r[i][j] = dot / (na * nb);
            }
        }
    }
    r
}

pub fn distance(r1: &[Vec<f64>], r2: &[Vec<f64>], valid: &[bool]) -> Vec<f64> {
    let n = r1.len();
    let mut d = vec![0.0; n];
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        for j in 0..n {
            if valid[j] {
                d[i] += (r1[i][j] - r2[i][j]).powi(2);
            }
        }
    }
    d
}

/// `W^{b,c}`, flattened `b·C + c`, averaged over both branches.
pub fn weights(l1: &[Tensor], l2: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::new();
    for b in 0..l1.len() {
        let c = l1[b].channels();
        for k in 0..c {
            let mut w = [0.0; 2];
            for (i, t) in [&l1[b], &l2[b]].into_iter().enumerate() {
                for v in 0..t.inner_len() {
                    let y = softmax_voxel(t, v, 1.0)[k];
                    w[i] -= y * (y + 1e-12).ln();
                }
            }
            out.push((w[0] + w[1]) / 2.0);
        }
    }
    out
}

pub fn frc(fused1: &[Tensor], fused2: &[Tensor], labels: &[LabelVolume], w: &[f64], classes: usize) -> f64 {
    let (p1, valid) = prototypes(fused1, labels, classes);
    let (p2, _) = prototypes(fused2, labels, classes);
    let flat_valid: Vec<bool> = valid.iter().flatten().copied().collect();
    let d = distance(&relation(&p1, &valid), &relation(&p2, &valid), &flat_valid);
    d.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Voxel-mean `KL(softmax(initial) ‖ softmax(refined))` over the batch.
pub fn refine_kl(initial: &[Tensor], refined: &[Tensor]) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for (a, b) in initial.iter().zip(refined) {
        for v in 0..a.inner_len() {
            s += kl(&softmax_voxel(a, v, 1.0), &softmax_voxel(b, v, 1.0));
            n += 1;
        }
    }
    s / n as f64
}

pub fn cross_entropy(logits: &[Tensor], labels: &[LabelVolume]) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for (l, y) in logits.iter().zip(labels) {
        for q in pixel_ce(l, y) {
            s += q;
            n += 1;
        }
    }
    s / n as f64
}

pub fn dice(logits: &[Tensor], labels: &[LabelVolume]) -> f64 {
    let c = logits[0].channels();
    let mut total = 0.0;
    for k in 0..c {
        let (mut i, mut p, mut g) = (0.0, 0.0, 0.0);
        for (l, y) in logits.iter().zip(labels) {
            for v in 0..y.data.len() {
                let pk = softmax_voxel(l, v, 1.0)[k];
                let yk = if y.data[v] as usize == k { 1.0 } else { 0.0 };
                i += pk * yk;
                p += pk;
                g += yk;
            }
        }
        total += (2.0 * i + 1e-5) / (p + g + 1e-5);
    }
    1.0 - total / c as f64
}

/// Zeroes the prior channels of absent modalities and appends the logits.
pub fn refine_input(priors: &[Tensor], present: &[bool], logits: &Tensor) -> Vec<f64> {
    let mut out = Vec::new();
    for (p, &on) in priors.iter().zip(present) {
        for &x in p.data() {
            out.push(if on { x } else { 0.0 });
        }
    }
    out.extend_from_slice(logits.data());
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
