//! 3D convolution kernels: direct runs along Z, GEMM for pointwise.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Dims3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: Dims3,
    pub output: Dims3,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, input: Dims3) -> Self {
        let o = |d: usize| (d + 2 * pad - k) / stride + 1;
        ConvGeom { cin, cout, k, stride, pad, input, output: Dims3(o(input.0), o(input.1), o(input.2)) }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: slices cover the strided extents asserted by callers; c is
    // row-major m×n and does not alias a or b.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Visits every contiguous run of (output, input) voxel pairs linked by one
/// kernel tap: `f(weight_index, co, ci, out_start, in_start, len)`, where the
/// run advances by 1 in the output and by `stride` in the input.
#[inline(always)]
fn for_each_run<F: FnMut(usize, usize, usize, usize, usize, usize)>(g: &ConvGeom, mut f: F) {
    let Dims3(ih, iw, iz) = g.input;
    let Dims3(oh, ow, oz) = g.output;
    let (k, s, p) = (g.k, g.stride, g.pad);
    // Output indices o with 0 <= o*s + t - p < extent.
    let range = |t: usize, extent: usize, out: usize| {
        let lo = if t >= p { 0 } else { (p - t).div_ceil(s) };
        let hi = if extent + p > t { ((extent + p - t - 1) / s + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    };
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for a in 0..k {
                let (h0, h1) = range(a, ih, oh);
                for b in 0..k {
                    let (w0, w1) = range(b, iw, ow);
                    for c in 0..k {
                        let (z0, z1) = range(c, iz, oz);
                        if z1 == z0 {
                            continue;
                        }
                        let wi = (((co * g.cin + ci) * k + a) * k + b) * k + c;
                        for h in h0..h1 {
                            let y = h * s + a - p;
                            for w in w0..w1 {
                                let x = w * s + b - p;
                                let out = (h * ow + w) * oz + z0;
                                let inp = (y * iw + x) * iz + z0 * s + c - p;
                                f(wi, co, ci, out, inp, z1 - z0);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolutions work on zero-padded copies: with padded strides
/// every tap reduces to one contiguous run `out[j] += w · in[j + offset]`.
struct Padded {
    hp: usize,
    wp: usize,
    zp: usize,
    /// Length of the run covering every output voxel (plus junk columns).
    run: usize,
}

impl Padded {
    fn new(g: &ConvGeom) -> Self {
        let Dims3(ih, iw, iz) = g.input;
        let Dims3(oh, ow, oz) = g.output;
        let (hp, wp, zp) = (ih + 2 * g.pad, iw + 2 * g.pad, iz + 2 * g.pad);
        let run = ((oh - 1) * wp + ow - 1) * zp + oz;
        Padded { hp, wp, zp, run }
    }

    fn volume(&self) -> usize {
        self.hp * self.wp * self.zp
    }

    fn offsets(&self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k * k * k);
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    out.push((a * self.wp + b) * self.zp + c);
                }
            }
        }
        out
    }

    /// Copies `channels` unpadded volumes of `dims` into padded storage at
    /// origin `shift`, each padded volume `stride` long.
    fn embed(&self, x: &[f64], channels: usize, dims: Dims3, shift: usize, stride: usize) -> Vec<f64> {
        let Dims3(h, w, z) = dims;
        let mut out = vec![0.0; channels * stride];
        for ch in 0..channels {
            for i in 0..h {
                for j in 0..w {
                    let src = ((ch * h + i) * w + j) * z;
                    let dst = ch * stride + ((i + shift) * self.wp + j + shift) * self.zp + shift;
                    out[dst..dst + z].copy_from_slice(&x[src..src + z]);
                }
            }
        }
        out
    }

    /// Adds the `dims` block at origin `shift` of padded channel `src` into `dst`.
    fn extract_add(&self, src: &[f64], dims: Dims3, shift: usize, dst: &mut [f64]) {
        let Dims3(h, w, z) = dims;
        for i in 0..h {
            for j in 0..w {
                let s = ((i + shift) * self.wp + j + shift) * self.zp + shift;
                let d = (i * w + j) * z;
                for (o, v) in dst[d..d + z].iter_mut().zip(&src[s..s + z]) {
                    *o += v;
                }
            }
        }
    }
}

const LANES: usize = 8;
const CO_BLOCK: usize = 4;
/// Tail room so the kernels may read whole lane chunks past a run.
const SLACK: usize = LANES;

fn round_up(n: usize) -> usize {
    n.div_ceil(LANES) * LANES
}

/// `out[co·ld + j] = Σ_ci Σ_t w[(ci·T + t)·cout + co] · src[ci·stride + offs[t] + j]`
/// for `j < ld`, where `ld = out.len() / cout` is a multiple of [`LANES`].
fn gather(src: &[f64], stride: usize, cin: usize, offs: &[usize], w: &[f64], cout: usize, out: &mut [f64]) {
    #[cfg(all(any(feature = "std", test), target_arch = "x86_64"))]
    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were just detected.
        unsafe { gather_fma(src, stride, cin, offs, w, cout, out) };
        return;
    }
    gather_body::<false>(src, stride, cin, offs, w, cout, out);
}

#[cfg(all(any(feature = "std", test), target_arch = "x86_64"))]
#[target_feature(enable = "avx2,fma")]
unsafe fn gather_fma(src: &[f64], stride: usize, cin: usize, offs: &[usize], w: &[f64], cout: usize, out: &mut [f64]) {
    gather_body::<true>(src, stride, cin, offs, w, cout, out);
}

#[inline(always)]
fn mac<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        #[cfg(any(feature = "std", test))]
        return a.mul_add(b, c);
        // Only reachable through the std-gated dispatch above.
        #[cfg(not(any(feature = "std", test)))]
        return libm::fma(a, b, c);
    } else {
        a * b + c
    }
}

#[inline(always)]
fn gather_body<const FMA: bool>(
    src: &[f64],
    stride: usize,
    cin: usize,
    offs: &[usize],
    w: &[f64],
    cout: usize,
    out: &mut [f64],
) {
    let taps = offs.len();
    let ld = out.len() / cout;
    debug_assert_eq!(ld % LANES, 0);
    let mut co0 = 0;
    while co0 + CO_BLOCK <= cout {
        for j0 in (0..ld).step_by(LANES) {
            let mut acc = [[0.0; LANES]; CO_BLOCK];
            for ci in 0..cin {
                let base = ci * stride + j0;
                let wr = &w[ci * taps * cout..(ci + 1) * taps * cout];
                for (t, &off) in offs.iter().enumerate() {
                    let xs: &[f64; LANES] = src[base + off..base + off + LANES].try_into().unwrap();
                    let ws: &[f64; CO_BLOCK] = wr[t * cout + co0..t * cout + co0 + CO_BLOCK].try_into().unwrap();
                    for cb in 0..CO_BLOCK {
                        for l in 0..LANES {
                            acc[cb][l] = mac::<FMA>(ws[cb], xs[l], acc[cb][l]);
                        }
                    }
                }
            }
            for (cb, a) in acc.iter().enumerate() {
                out[(co0 + cb) * ld + j0..(co0 + cb) * ld + j0 + LANES].copy_from_slice(a);
            }
        }
        co0 += CO_BLOCK;
    }
    for co in co0..cout {
        for j0 in (0..ld).step_by(LANES) {
            let mut acc = [0.0; LANES];
            for ci in 0..cin {
                let base = ci * stride + j0;
                for (t, &off) in offs.iter().enumerate() {
                    let xs: &[f64; LANES] = src[base + off..base + off + LANES].try_into().unwrap();
                    let wt = w[(ci * taps + t) * cout + co];
                    for l in 0..LANES {
                        acc[l] = mac::<FMA>(wt, xs[l], acc[l]);
                    }
                }
            }
            out[co * ld + j0..co * ld + j0 + LANES].copy_from_slice(&acc);
        }
    }
}

/// `dw[(co·cin + ci)·T + t] += Σ_{j<len} gy[co·gld + j] · x[ci·stride + offs[t] + j]`.
#[allow(clippy::too_many_arguments)]
fn correlate(
    gy: &[f64],
    gld: usize,
    cout: usize,
    x: &[f64],
    stride: usize,
    cin: usize,
    offs: &[usize],
    dw: &mut [f64],
) {
    #[cfg(all(any(feature = "std", test), target_arch = "x86_64"))]
    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were just detected.
        unsafe { correlate_fma(gy, gld, cout, x, stride, cin, offs, dw) };
        return;
    }
    correlate_body::<false>(gy, gld, cout, x, stride, cin, offs, dw);
}

#[cfg(all(any(feature = "std", test), target_arch = "x86_64"))]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn correlate_fma(
    gy: &[f64],
    gld: usize,
    cout: usize,
    x: &[f64],
    stride: usize,
    cin: usize,
    offs: &[usize],
    dw: &mut [f64],
) {
    correlate_body::<true>(gy, gld, cout, x, stride, cin, offs, dw);
}

/// `gld` is a multiple of [`LANES`] and `gy` is zero past each run.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn correlate_body<const FMA: bool>(
    gy: &[f64],
    gld: usize,
    cout: usize,
    x: &[f64],
    stride: usize,
    cin: usize,
    offs: &[usize],
    dw: &mut [f64],
) {
    let taps = offs.len();
    let mut co0 = 0;
    while co0 < cout {
        let cb_n = CO_BLOCK.min(cout - co0);
        for ci in 0..cin {
            for (t, &off) in offs.iter().enumerate() {
                let xb = ci * stride + off;
                let mut acc = [[0.0; LANES]; CO_BLOCK];
                for j0 in (0..gld).step_by(LANES) {
                    let xs: &[f64; LANES] = x[xb + j0..xb + j0 + LANES].try_into().unwrap();
                    for cb in 0..cb_n {
                        let g: &[f64; LANES] = gy[(co0 + cb) * gld + j0..(co0 + cb) * gld + j0 + LANES].try_into().unwrap();
                        for l in 0..LANES {
                            acc[cb][l] = mac::<FMA>(g[l], xs[l], acc[cb][l]);
                        }
                    }
                }
                for cb in 0..cb_n {
                    dw[((co0 + cb) * cin + ci) * taps + t] += acc[cb].iter().sum::<f64>();
                }
            }
        }
        co0 += cb_n;
    }
}

fn forward_padded(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom, y: &mut [f64]) {
    let pd = Padded::new(g);
    let vol = pd.volume();
    let mut xp = pd.embed(x, g.cin, g.input, g.pad, vol);
    xp.resize(xp.len() + SLACK, 0.0);
    let offs = pd.offsets(g.k);
    let taps = offs.len();
    let mut wt = vec![0.0; w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..taps {
                wt[(ci * taps + t) * g.cout + co] = w[(co * g.cin + ci) * taps + t];
            }
        }
    }
    let ld = round_up(pd.run);
    let mut acc = vec![0.0; g.cout * ld];
    gather(&xp, vol, g.cin, &offs, &wt, g.cout, &mut acc);
    let n = g.output.voxels();
    for co in 0..g.cout {
        let yc = &mut y[co * n..(co + 1) * n];
        yc.fill(bias[co]);
        pd.extract_add(&acc[co * ld..], g.output, 0, yc);
    }
}

fn backward_padded(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom, dw: Option<&mut [f64]>, dx: Option<&mut [f64]>) {
    let pd = Padded::new(g);
    let vol = pd.volume();
    let offs = pd.offsets(g.k);
    let taps = offs.len();
    let margin = offs[taps - 1];
    if let Some(dw) = dw {
        let ld = round_up(pd.run);
        // dy laid out with padded strides; junk columns stay zero.
        let dyp = pd.embed(dy, g.cout, g.output, 0, ld);
        let mut xp = pd.embed(x, g.cin, g.input, g.pad, vol);
        xp.resize(xp.len() + ld, 0.0);
        correlate(&dyp, ld, g.cout, &xp, vol, g.cin, &offs, dw);
    }
    if let Some(dx) = dx {
        // dx_p[i] = Σ w · dy_p[i − off]: a gather over dy shifted by `margin`
        // with mirrored taps.
        let gstride = margin + vol;
        let mut gyp = vec![0.0; g.cout * gstride + SLACK];
        let Dims3(oh, ow, oz) = g.output;
        let n = g.output.voxels();
        for co in 0..g.cout {
            for h in 0..oh {
                for wv in 0..ow {
                    let s = co * n + (h * ow + wv) * oz;
                    let d = co * gstride + margin + (h * pd.wp + wv) * pd.zp;
                    gyp[d..d + oz].copy_from_slice(&dy[s..s + oz]);
                }
            }
        }
        let mirrored: Vec<usize> = offs.iter().map(|o| margin - o).collect();
        let mut wt = vec![0.0; w.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for t in 0..taps {
                    wt[(co * taps + t) * g.cin + ci] = w[(co * g.cin + ci) * taps + t];
                }
            }
        }
        let ld = round_up(vol);
        let mut dxp = vec![0.0; g.cin * ld];
        gather(&gyp, gstride, g.cout, &mirrored, &wt, g.cin, &mut dxp);
        let ni = g.input.voxels();
        for ci in 0..g.cin {
            pd.extract_add(&dxp[ci * ld..], g.input, g.pad, &mut dx[ci * ni..(ci + 1) * ni]);
        }
    }
}

/// `y[cout, out] = conv(W, x) + b`.
pub(crate) fn conv3d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.output.voxels();
    let ni = g.input.voxels();
    let mut y = vec![0.0; g.cout * n];
    for (co, row) in y.chunks_mut(n).enumerate() {
        row.fill(bias[co]);
    }
    let rows = g.rows();
    if g.is_pointwise() {
        gemm(g.cout, rows, n, w, rows as isize, 1, x, n as isize, 1, 1.0, &mut y);
        return y;
    }
    if g.stride == 1 {
        forward_padded(x, w, bias, g, &mut y);
        return y;
    }
    let s = g.stride;
    for_each_run(g, |wi, co, ci, o, i, len| {
        let wt = w[wi];
        let dst = &mut y[co * n + o..co * n + o + len];
        if s == 1 {
            let src = &x[ci * ni + i..ci * ni + i + len];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += wt * v;
            }
        } else {
            let src = &x[ci * ni + i..];
            for (j, d) in dst.iter_mut().enumerate() {
                *d += wt * src[j * s];
            }
        }
    });
    y
}

/// Accumulates weight/bias gradients and, when `dx` is given, the input
/// gradient.
pub(crate) fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let n = g.output.voxels();
    let ni = g.input.voxels();
    let rows = g.rows();
    if let Some(db) = db {
        for (co, row) in dy.chunks(n).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
    }
    let s = g.stride;
    if s == 1 && !g.is_pointwise() {
        backward_padded(x, w, dy, g, dw, dx);
        return;
    }
    if let Some(dw) = dw {
        if g.is_pointwise() {
            // dW += dY · xᵀ
            gemm(g.cout, n, rows, dy, n as isize, 1, x, 1, n as isize, 1.0, dw);
        } else {
            for_each_run(g, |wi, co, ci, o, i, len| {
                let gy = &dy[co * n + o..co * n + o + len];
                let acc: f64 = if s == 1 {
                    gy.iter().zip(&x[ci * ni + i..ci * ni + i + len]).map(|(a, b)| a * b).sum()
                } else {
                    let src = &x[ci * ni + i..];
                    gy.iter().enumerate().map(|(j, a)| a * src[j * s]).sum()
                };
                dw[wi] += acc;
            });
        }
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            gemm(rows, g.cout, n, w, 1, rows as isize, dy, n as isize, 1, 1.0, dx);
        } else {
            for_each_run(g, |wi, co, ci, o, i, len| {
                let wt = w[wi];
                let gy = &dy[co * n + o..co * n + o + len];
                if s == 1 {
                    for (d, v) in dx[ci * ni + i..ci * ni + i + len].iter_mut().zip(gy) {
                        *d += wt * v;
                    }
                } else {
                    let dst = &mut dx[ci * ni + i..];
                    for (j, v) in gy.iter().enumerate() {
                        dst[j * s] += wt * v;
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let Dims3(ih, iw, iz) = g.input;
        let Dims3(oh, ow, oz) = g.output;
        let mut y = vec![0.0; g.cout * g.output.voxels()];
        for co in 0..g.cout {
            for h in 0..oh {
                for ww in 0..ow {
                    for z in 0..oz {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for a in 0..g.k {
                                for bb in 0..g.k {
                                    for c in 0..g.k {
                                        let y0 = (h * g.stride + a) as isize - g.pad as isize;
                                        let x0 = (ww * g.stride + bb) as isize - g.pad as isize;
                                        let z0 = (z * g.stride + c) as isize - g.pad as isize;
                                        if y0 < 0 || x0 < 0 || z0 < 0 {
                                            continue;
                                        }
                                        let (y0, x0, z0) = (y0 as usize, x0 as usize, z0 as usize);
                                        if y0 >= ih || x0 >= iw || z0 >= iz {
                                            continue;
                                        }
                                        let wi = (((co * g.cin + ci) * g.k + a) * g.k + bb) * g.k + c;
                                        acc += w[wi] * x[ci * g.input.voxels() + (y0 * iw + x0) * iz + z0];
                                    }
                                }
                            }
                        }
                        y[co * g.output.voxels() + (h * ow + ww) * oz + z] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|i| libm::sin(i as f64 * s)).collect()
    }

    #[test]
    fn matches_naive_convolution() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0), (1, 2, 0)] {
            let g = ConvGeom::new(2, 3, k, s, p, Dims3(4, 6, 4));
            let x = ramp(2 * 96, 0.37);
            let w = ramp(3 * 2 * k * k * k, 0.91);
            let b = [0.1, -0.2, 0.3];
            let fast = conv3d_forward(&x, &w, &b, &g);
            let slow = naive(&x, &w, &b, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dy, conv(x)> linear in x and w: check both adjoints.
        for &(k, s, p) in &[(3, 2, 1), (3, 1, 1), (3, 1, 0), (1, 1, 0)] {
            let g = ConvGeom::new(2, 3, k, s, p, Dims3(4, 4, 6));
            let x = ramp(2 * 96, 0.13);
            let w = ramp(3 * 2 * k * k * k, 0.71);
            let zero_b = [0.0; 3];
            let dy = ramp(3 * g.output.voxels(), 0.29);
            let y = conv3d_forward(&x, &w, &zero_b, &g);
            let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; 3];
            conv3d_backward(&x, &w, &dy, &g, Some(&mut dw), Some(&mut db), Some(&mut dx));
            let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
            let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
            let sum_dy: f64 = dy[..g.output.voxels()].iter().sum();
            assert!((db[0] - sum_dy).abs() < 1e-12);
        }
    }
}
