mod support;

use proptest::prelude::*;
use smml_core::hcc::*;
use smml_core::{Dims3, LabelVolume, Tensor};
use support::criteria::{self, FD_TOL, ORACLE_BUDGET, ORACLE_TOL};
use support::gen;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn pixel_ce_values() {
    let one = |class| LabelVolume::new(Dims3(1, 1, 1), vec![class]).unwrap();
    let flat = t(&[2, 1, 1, 1], vec![0.0, 0.0]);
    let skew = t(&[2, 1, 1, 1], vec![3f64.ln(), 0.0]);
    assert!((pixel_ce_map(&flat, &one(0)).unwrap().values[0] - 0.693147).abs() < 1e-6);
    assert!((pixel_ce_map(&skew, &one(0)).unwrap().values[0] - 0.287682).abs() < 1e-6);
    assert!((pixel_ce_map(&skew, &one(1)).unwrap().values[0] - 1.386294).abs() < 1e-6);
}

#[test]
fn pbc_single_voxel() {
    let l1 = t(&[2, 1, 1, 1], vec![0.0, 0.0]);
    let l2 = t(&[2, 1, 1, 1], vec![3f64.ln(), 0.0]);
    let m = TransferMask { dims: Dims3(1, 1, 1), bits: vec![true] };
    let out = pbc_loss(&[l1], &[l2], &[m], PbcOptions::new(1.0)).unwrap();
    let expect = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    assert!((out.l1 - expect).abs() < 1e-12);
    assert!((out.l1 - 0.143841).abs() < 1e-6);
    assert_eq!(out.l2, 0.0);
}

#[test]
fn cosine_and_uniform_weights() {
    let f = t(&[2, 1, 1, 2], vec![1.0, 1.0, 1.0, 0.0]);
    let y = LabelVolume::new(Dims3(1, 1, 2), vec![0, 1]).unwrap();
    let r = relation_matrix(&class_prototypes(&[f], &[y], 2).unwrap());
    assert!((r.at(0, 1) - 0.707107).abs() < 1e-6);
    assert_eq!(r.at(0, 0), 1.0);

    let w = class_uncertainty_weights(&[Tensor::zeros(&[4, 2, 2, 2])], &[Tensor::zeros(&[4, 2, 2, 2])]).unwrap();
    for &v in &w.data {
        assert!((v - 8.0 * 0.25 * 4f64.ln()).abs() < 1e-9);
        assert!((v - 2.7726).abs() < 1e-4);
    }
}

#[test]
fn library_matches_oracles() {
    let (worst, elapsed) = criteria::loss_oracle_equivalence(11);
    assert!(worst <= ORACLE_TOL, "relative error {worst:e}");
    assert!(elapsed < ORACLE_BUDGET, "took {elapsed:?}");
}

#[test]
fn gradients_match_finite_differences() {
    for (name, err) in criteria::gradient_checks(12) {
        assert!(err < FD_TOL, "{name}: {err:e}");
    }
}

#[test]
fn transfer_mask_partitions() {
    let r = criteria::partition(13);
    assert_eq!(r.violations, 0);
    assert_eq!(r.empty_n21, (0.0, 0.0));
    assert_eq!(r.empty_n12, (0.0, 0.0));
}

#[test]
fn identical_branches_give_zero() {
    let (pbc, frc) = criteria::identical_branch_losses(14, 20);
    assert!(pbc <= 1e-12, "pbc {pbc:e}");
    assert!(frc <= 1e-12, "frc {frc:e}");
}

#[test]
fn absent_class_is_excluded() {
    let f1 = t(&[2, 1, 1, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let f2 = t(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 1.0]);
    let y = LabelVolume::new(Dims3(1, 1, 2), vec![0, 2]).unwrap();
    let w = class_uncertainty_weights(&[Tensor::zeros(&[3, 1, 1, 2])], &[Tensor::zeros(&[3, 1, 1, 2])]).unwrap();
    let out = frc_forward_backward(&[f1], &[f2], &[y], &w).unwrap();
    assert_eq!(out.distance[1], 0.0);
    assert!(out.distance[0] > 0.0 && out.distance[2] > 0.0);
}

fn batch_inputs() -> impl Strategy<Value = (u64, f64)> {
    (any::<u64>(), 0.1f64..20.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_are_nonnegative(seed in any::<u64>(), tau in 0.5f64..8.0) {
        let inst = gen::instance(&mut gen::rng(seed));
        let masks: Vec<TransferMask> = inst.logits1.iter().zip(&inst.logits2).zip(&inst.labels)
            .map(|((a, b), y)| transfer_mask(&pixel_ce_map(a, y).unwrap(), &pixel_ce_map(b, y).unwrap()).unwrap())
            .collect();
        let pbc = pbc_loss(&inst.logits1, &inst.logits2, &masks, PbcOptions::new(tau)).unwrap();
        prop_assert!(pbc.l1 >= 0.0 && pbc.l2 >= 0.0);
        let w = class_uncertainty_weights(&inst.logits1, &inst.logits2).unwrap();
        prop_assert!(w.data.iter().all(|&x| x >= 0.0));
        let frc = frc_forward_backward(&inst.fused1, &inst.fused2, &inst.labels, &w).unwrap();
        prop_assert!(frc.loss >= 0.0);
        prop_assert!(frc.distance.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn relation_ignores_prototype_scale((seed, s) in batch_inputs()) {
        let inst = gen::instance(&mut gen::rng(seed));
        let scaled: Vec<Tensor> = inst.fused1.iter().map(|f| { let mut f = f.clone(); f.scale(s); f }).collect();
        let r = relation_matrix(&class_prototypes(&inst.fused1, &inst.labels, gen::CLASSES).unwrap());
        let rs = relation_matrix(&class_prototypes(&scaled, &inst.labels, gen::CLASSES).unwrap());
        for (a, b) in r.data.iter().zip(&rs.data) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let w = class_uncertainty_weights(&inst.logits1, &inst.logits2).unwrap();
        let base = frc_forward_backward(&inst.fused1, &inst.fused2, &inst.labels, &w).unwrap();
        let after = frc_forward_backward(&scaled, &inst.fused2, &inst.labels, &w).unwrap();
        for (a, b) in base.distance.iter().zip(&after.distance) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
        prop_assert!((base.loss - after.loss).abs() <= 1e-9 * (1.0 + base.loss.abs()));
    }

    #[test]
    fn batch_permutation_permutes_distance(seed in any::<u64>(), shift in 1usize..3) {
        let inst = gen::instance(&mut gen::rng(seed));
        let b = inst.labels.len();
        let perm: Vec<usize> = (0..b).map(|i| (i + shift) % b).collect();
        let pick = |v: &[Tensor]| perm.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let labels: Vec<LabelVolume> = perm.iter().map(|&i| inst.labels[i].clone()).collect();
        let w = class_uncertainty_weights(&inst.logits1, &inst.logits2).unwrap();
        let wp = class_uncertainty_weights(&pick(&inst.logits1), &pick(&inst.logits2)).unwrap();
        let base = frc_forward_backward(&inst.fused1, &inst.fused2, &inst.labels, &w).unwrap();
        let moved = frc_forward_backward(&pick(&inst.fused1), &pick(&inst.fused2), &labels, &wp).unwrap();
        let c = gen::CLASSES;
        for (new_b, &old_b) in perm.iter().enumerate() {
            for k in 0..c {
                let (x, y) = (moved.distance[new_b * c + k], base.distance[old_b * c + k]);
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
        prop_assert!((base.loss - moved.loss).abs() <= 1e-9 * (1.0 + base.loss.abs()));
    }

    #[test]
    fn counts_partition_grid(seed in any::<u64>()) {
        let mut rng = gen::rng(seed);
        let d = gen::dims(&mut rng, 5);
        let a = gen::tensor(&mut rng, 4, d, 3.0);
        let b = gen::tensor(&mut rng, 4, d, 3.0);
        let y = gen::labels(&mut rng, d, 4);
        let m = transfer_mask(&pixel_ce_map(&a, &y).unwrap(), &pixel_ce_map(&b, &y).unwrap()).unwrap();
        prop_assert_eq!(m.n21() + m.n12(), d.voxels());
    }
}
