//! Measurements shared by the core tests and the acceptance target. Each
//! returns the measured quantity; callers compare it with the tolerance.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use rand::Rng;
use smml_core::backbone::{ArchConfig, BranchNet};
use smml_core::eval::predict;
use smml_core::hcc::{
    class_prototypes, class_uncertainty_weights, frc_forward_backward, pbc_loss, pixel_ce_map, relation_matrix,
    relational_distance, transfer_mask, PbcOptions, PixelLossMap, TransferMask,
};
use smml_core::masking::enumerate_subsets;
use smml_core::objective::{cross_entropy, dice_loss, task_loss};
use smml_core::srn::refine_consistency_loss;
use smml_core::{Dims3, LabelVolume, Tensor};

use super::gen::{self, Instance, CLASSES};
use super::oracles as o;

/// Relative error `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-9;
pub const ORACLE_TOL: f64 = 1e-5;
pub const ORACLE_INSTANCES: usize = 100;
pub const ORACLE_BUDGET: Duration = Duration::from_secs(60);

/// Central-difference step and the denominator floor of the gradient check.
pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-3;
pub const FD_TRIALS: usize = 20;

pub const PARTITION_DRAWS: usize = 1000;

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel(x, y)).fold(0.0, f64::max)
}

fn lib_masks(inst: &Instance) -> Vec<TransferMask> {
    inst.logits1
        .iter()
        .zip(&inst.logits2)
        .zip(&inst.labels)
        .map(|((a, b), y)| transfer_mask(&pixel_ce_map(a, y).unwrap(), &pixel_ce_map(b, y).unwrap()).unwrap())
        .collect()
}

/// Largest relative deviation between library and oracle over every loss
/// quantity of one instance.
pub fn compare_instance(inst: &Instance, tau: f64, tau_squared: bool) -> f64 {
    let mut worst: f64 = 0.0;
    let mut oracle_masks = Vec::new();
    for b in 0..inst.labels.len() {
        let q1 = pixel_ce_map(&inst.logits1[b], &inst.labels[b]).unwrap();
        let q2 = pixel_ce_map(&inst.logits2[b], &inst.labels[b]).unwrap();
        let oq1 = o::pixel_ce(&inst.logits1[b], &inst.labels[b]);
        let oq2 = o::pixel_ce(&inst.logits2[b], &inst.labels[b]);
        worst = worst.max(max_rel(&q1.values, &oq1)).max(max_rel(&q2.values, &oq2));
        let m = o::transfer(&oq1, &oq2);
        if transfer_mask(&q1, &q2).unwrap().bits != m {
            worst = f64::INFINITY;
        }
        oracle_masks.push(m);
    }

    let tmasks = lib_masks(inst);
    let pbc = pbc_loss(&inst.logits1, &inst.logits2, &tmasks, PbcOptions { tau, tau_squared }).unwrap();
    let (l1, l2) = o::pbc(&inst.logits1, &inst.logits2, &oracle_masks, tau, tau_squared);
    worst = worst.max(rel(pbc.l1, l1)).max(rel(pbc.l2, l2));

    let p1 = class_prototypes(&inst.fused1, &inst.labels, CLASSES).unwrap();
    let p2 = class_prototypes(&inst.fused2, &inst.labels, CLASSES).unwrap();
    let (op1, ovalid) = o::prototypes(&inst.fused1, &inst.labels, CLASSES);
    let (op2, _) = o::prototypes(&inst.fused2, &inst.labels, CLASSES);
    let flat = |p: &Vec<Vec<Vec<f64>>>| p.iter().flatten().flatten().copied().collect::<Vec<_>>();
    worst = worst.max(max_rel(&p1.prototypes, &flat(&op1))).max(max_rel(&p2.prototypes, &flat(&op2)));
    let flat_valid: Vec<bool> = ovalid.iter().flatten().copied().collect();
    if p1.valid != flat_valid {
        worst = f64::INFINITY;
    }

    let r1 = relation_matrix(&p1);
    let r2 = relation_matrix(&p2);
    let or1 = o::relation(&op1, &ovalid);
    let or2 = o::relation(&op2, &ovalid);
    worst = worst.max(max_rel(&r1.data, &or1.concat())).max(max_rel(&r2.data, &or2.concat()));
    let d = relational_distance(&r1, &r2, &p1.valid).unwrap();
    worst = worst.max(max_rel(&d, &o::distance(&or1, &or2, &flat_valid)));

    let w = class_uncertainty_weights(&inst.logits1, &inst.logits2).unwrap();
    let ow = o::weights(&inst.logits1, &inst.logits2);
    worst = worst.max(max_rel(&w.data, &ow));
    let frc = frc_forward_backward(&inst.fused1, &inst.fused2, &inst.labels, &w).unwrap();
    worst = worst.max(rel(frc.loss, o::frc(&inst.fused1, &inst.fused2, &inst.labels, &ow, CLASSES)));

    let (kl, _) = refine_consistency_loss(&inst.logits1, &inst.logits2).unwrap();
    worst = worst.max(rel(kl, o::refine_kl(&inst.logits1, &inst.logits2)));
    let (ce, _) = cross_entropy(&inst.logits1, &inst.labels).unwrap();
    worst = worst.max(rel(ce, o::cross_entropy(&inst.logits1, &inst.labels)));
    let (dl, _) = dice_loss(&inst.logits1, &inst.labels).unwrap();
    worst = worst.max(rel(dl, o::dice(&inst.logits1, &inst.labels)));
    let (t, _) = task_loss(&inst.logits2, &inst.labels).unwrap();
    worst.max(rel(t, o::cross_entropy(&inst.logits2, &inst.labels) + o::dice(&inst.logits2, &inst.labels)))
}

/// Worst relative error over `ORACLE_INSTANCES` random instances, and the
/// wall time spent.
pub fn loss_oracle_equivalence(seed: u64) -> (f64, Duration) {
    let start = Instant::now();
    let mut rng = gen::rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..ORACLE_INSTANCES {
        let inst = gen::instance(&mut rng);
        let tau = rng.random_range(0.5..8.0);
        let sq = rng.random_bool(0.5);
        worst = worst.max(compare_instance(&inst, tau, sq));
    }
    (worst, start.elapsed())
}

/// Max entrywise relative error between `analytic` and central differences
/// of `f` over every entry of every tensor in `x`.
pub fn fd_check(x: &[Tensor], analytic: &[Tensor], mut f: impl FnMut(&[Tensor]) -> f64) -> f64 {
    let mut x = x.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..x.len() {
        for i in 0..x[t].len() {
            let orig = x[t].data()[i];
            x[t].data_mut()[i] = orig + FD_STEP;
            let up = f(&x);
            x[t].data_mut()[i] = orig - FD_STEP;
            let down = f(&x);
            x[t].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic[t].data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR));
        }
    }
    worst
}

/// Worst gradient-check error per loss over `FD_TRIALS` instances each.
pub fn gradient_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = gen::rng(seed);
    let mut worst = [0.0f64; 5];
    for _ in 0..FD_TRIALS {
        let inst = gen::instance(&mut rng);
        let tau = rng.random_range(0.5..8.0);
        let opts = PbcOptions { tau, tau_squared: rng.random_bool(0.5) };
        let tm = lib_masks(&inst);
        let out = pbc_loss(&inst.logits1, &inst.logits2, &tm, opts).unwrap();
        let g1 = fd_check(&inst.logits1, &out.grad1, |x| pbc_loss(x, &inst.logits2, &tm, opts).unwrap().l1);
        let g2 = fd_check(&inst.logits2, &out.grad2, |x| pbc_loss(&inst.logits1, x, &tm, opts).unwrap().l2);
        worst[0] = worst[0].max(g1).max(g2);

        let w = class_uncertainty_weights(&inst.logits1, &inst.logits2).unwrap();
        let out = frc_forward_backward(&inst.fused1, &inst.fused2, &inst.labels, &w).unwrap();
        let g1 = fd_check(&inst.fused1, &out.grad1, |x| {
            frc_forward_backward(x, &inst.fused2, &inst.labels, &w).unwrap().loss
        });
        let g2 = fd_check(&inst.fused2, &out.grad2, |x| {
            frc_forward_backward(&inst.fused1, x, &inst.labels, &w).unwrap().loss
        });
        worst[1] = worst[1].max(g1).max(g2);

        let (_, g) = refine_consistency_loss(&inst.logits1, &inst.logits2).unwrap();
        worst[2] = worst[2].max(fd_check(&inst.logits1, &g, |x| refine_consistency_loss(x, &inst.logits2).unwrap().0));

        let (_, g) = dice_loss(&inst.logits1, &inst.labels).unwrap();
        worst[3] = worst[3].max(fd_check(&inst.logits1, &g, |x| dice_loss(x, &inst.labels).unwrap().0));

        let (_, g) = task_loss(&inst.logits2, &inst.labels).unwrap();
        worst[4] = worst[4].max(fd_check(&inst.logits2, &g, |x| task_loss(x, &inst.labels).unwrap().0));
    }
    vec![("pbc", worst[0]), ("frc", worst[1]), ("refine_consistency", worst[2]), ("dice", worst[3]), ("task", worst[4])]
}

#[derive(Debug, Clone, Copy)]
pub struct PartitionResult {
    /// Draws where `N21 + N12 ≠ H·W·Z`.
    pub violations: usize,
    /// `(L1pc, max |∂L1pc|)` when every voxel has `Q1 ≤ Q2`.
    pub empty_n21: (f64, f64),
    /// `(L2pc, max |∂L2pc|)` when every voxel has `Q1 > Q2`.
    pub empty_n12: (f64, f64),
}

fn q_map(rng: &mut impl Rng, d: Dims3) -> PixelLossMap {
    PixelLossMap { dims: d, values: (0..d.voxels()).map(|_| rng.random_range(0.0..3.0)).collect() }
}

fn max_abs(ts: &[Tensor]) -> f64 {
    ts.iter().flat_map(|t| t.data()).fold(0.0, |m, v| m.max(v.abs()))
}

pub fn partition(seed: u64) -> PartitionResult {
    let mut rng = gen::rng(seed);
    let mut violations = 0;
    for i in 0..PARTITION_DRAWS {
        let d = gen::dims(&mut rng, 6);
        let q1 = q_map(&mut rng, d);
        // A share of exact ties exercises the strict comparison.
        let q2 = if i % 4 == 0 { q1.clone() } else { q_map(&mut rng, d) };
        let m = transfer_mask(&q1, &q2).unwrap();
        if m.n21() + m.n12() != d.voxels() {
            violations += 1;
        }
    }
    let inst = gen::instance(&mut rng);
    let opts = PbcOptions::new(2.0);
    let with_bits = |bit: bool| -> Vec<TransferMask> {
        inst.labels.iter().map(|l| TransferMask { dims: l.dims, bits: vec![bit; l.dims.voxels()] }).collect()
    };
    let none = pbc_loss(&inst.logits1, &inst.logits2, &with_bits(false), opts).unwrap();
    let all = pbc_loss(&inst.logits1, &inst.logits2, &with_bits(true), opts).unwrap();
    PartitionResult {
        violations,
        empty_n21: (none.l1, max_abs(&none.grad1)),
        empty_n12: (all.l2, max_abs(&all.grad2)),
    }
}

/// Masks (of the 15) for which prediction is bitwise unchanged when absent
/// modalities are overwritten with unrelated noise.
pub fn missing_modality_invariance(seed: u64) -> (usize, usize) {
    let arch = ArchConfig::default();
    let mut rng = gen::rng(seed);
    let branches = vec![BranchNet::new(&arch, &mut rng).unwrap(), BranchNet::new(&arch, &mut rng).unwrap()];
    let d = Dims3::cube(8);
    let volumes = gen::tensor(&mut rng, arch.modalities, d, 2.0);
    let masks = enumerate_subsets(arch.modalities).unwrap();
    let mut same = 0;
    for m in &masks {
        let mut other = volumes.clone();
        for k in 0..arch.modalities {
            if !m.is_present(k) {
                for x in other.channel_mut(k) {
                    *x = rng.random_range(-100.0..100.0);
                }
            }
        }
        let (pa, la) = predict(&volumes, m, &branches).unwrap();
        let (pb, lb) = predict(&other, m, &branches).unwrap();
        let bitwise = pa.data().iter().zip(pb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if bitwise && la == lb {
            same += 1;
        }
    }
    (same, masks.len())
}

/// Largest `|PBC|` and `|FRC|` seen when both branches are identical.
pub fn identical_branch_losses(seed: u64, trials: usize) -> (f64, f64) {
    let mut rng = gen::rng(seed);
    let (mut pbc, mut frc): (f64, f64) = (0.0, 0.0);
    for _ in 0..trials {
        let inst = gen::instance(&mut rng);
        let masks: Vec<TransferMask> = inst
            .labels
            .iter()
            .map(|l| TransferMask { dims: l.dims, bits: (0..l.dims.voxels()).map(|_| rng.random_bool(0.5)).collect() })
            .collect();
        let out = pbc_loss(&inst.logits1, &inst.logits1, &masks, PbcOptions::new(6.0)).unwrap();
        pbc = pbc.max(out.l1.abs()).max(out.l2.abs());
        let w = class_uncertainty_weights(&inst.logits1, &inst.logits1).unwrap();
        frc = frc.max(frc_forward_backward(&inst.fused1, &inst.fused1, &inst.labels, &w).unwrap().loss.abs());
    }
    (pbc, frc)
}

pub fn labels_of(dims: Dims3, data: Vec<u8>) -> LabelVolume {
    LabelVolume::new(dims, data).unwrap()
}
