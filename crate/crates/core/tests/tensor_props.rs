//! Tensor algebra examples and algebraic properties.

mod common;

use common::*;
use hsmm_spectral::tensor::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

#[test]
fn matricize_round_trip_2x3x4() {
    let mut r = rng(11);
    let t = random_tensor(&mut r, &[("a", 2), ("b", 3), ("c", 4)]);
    let m = matricize(&t, &labels(&["c", "a"]), &labels(&["b"])).unwrap();
    let back = tensorize(&m, &[Mode::new(lbl("c"), 4), Mode::new(lbl("a"), 2)], &[Mode::new(lbl("b"), 3)])
        .unwrap()
        .permuted(&labels(&["a", "b", "c"]))
        .unwrap();
    assert_eq!(back, t);
    // entry check against the row-major index encoding
    for a in 0..2 {
        for b in 0..3 {
            for c in 0..4 {
                assert_eq!(m[(c * 2 + a, b)], t.get(&[a, b, c]));
            }
        }
    }
}

#[test]
fn identity_contraction_relabels() {
    let mut r = rng(12);
    let t = random_tensor(&mut r, &[("p", 3), ("q", 2)]);
    let i = identity_tensor(&[Mode::new(lbl("p"), 3)]).unwrap();
    let out = mode_product(&i, &t, Some(&[lbl("p")])).unwrap();
    assert_eq!(out.labels(), vec![ModeLabel::tagged("p", 1), lbl("q")]);
    assert_eq!(out.data(), t.data());
}

#[test]
fn matrix_chain_order_is_irrelevant() {
    let mut r = rng(13);
    let a = random_tensor(&mut r, &[("s", 3), ("p", 4)]);
    let z = random_tensor(&mut r, &[("r", 5), ("s", 3)]);
    let y = random_tensor(&mut r, &[("t", 2), ("r", 5)]);
    let yz = mode_product(&y, &z, None).unwrap();
    let left = mode_product(&a, &yz, None).unwrap();
    let az = mode_product(&a, &z, None).unwrap();
    let right = mode_product(&az, &y, None).unwrap();
    let right = right.permuted(&left.labels()).unwrap();
    assert!(max_rel_diff(left.data(), right.data(), 1e-12) < 1e-12);
}

#[test]
fn shape_mismatch_on_shared_mode() {
    let mut r = rng(14);
    let a = random_tensor(&mut r, &[("p", 3)]);
    let b = random_tensor(&mut r, &[("p", 4)]);
    assert!(matches!(mode_product(&a, &b, None), Err(TensorError::ShapeMismatch(_))));
}

#[test]
fn duplicate_hypercube() {
    let mut r = rng(15);
    let x = random_tensor(&mut r, &[("p", 3), ("q", 2)]);
    let d = duplicate_mode(&x, &lbl("p"), 3).unwrap();
    assert_eq!(d.shape(), vec![3, 3, 3, 2]);
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for q in 0..2 {
                    let want = if i == j && j == k { x.get(&[i, q]) } else { 0.0 };
                    assert_eq!(d.get(&[i, j, k, q]), want);
                }
            }
        }
    }
    assert!(matches!(
        duplicate_mode(&x, &lbl("zz"), 2),
        Err(TensorError::UnknownMode(_))
    ));
}

#[test]
fn duplicate_then_contract_is_elementwise() {
    let mut r = rng(16);
    let v = random_tensor(&mut r, &[("p", 5)]);
    let w = random_tensor(&mut r, &[("p", 5)]);
    let d = duplicate_mode(&v, &lbl("p"), 2).unwrap();
    let out = mode_product(&d, &w, Some(&[lbl("p")])).unwrap();
    let want: Vec<f64> = v.data().iter().zip(w.data()).map(|(a, b)| a * b).collect();
    assert!(max_abs_diff(out.data(), &want) < 1e-15);
}

#[test]
fn identity_two_modes() {
    let i = identity_tensor(&[Mode::new(lbl("a"), 2), Mode::new(lbl("b"), 3)]).unwrap();
    assert_eq!(i.shape(), vec![2, 3, 2, 3]);
    let m = matricize(&i, &labels(&["a", "b"]), &[ModeLabel::tagged("a", 1), ModeLabel::tagged("b", 1)]).unwrap();
    assert_eq!(m, DMatrix::identity(6, 6));
    let mut r = rng(17);
    let t = random_tensor(&mut r, &[("a", 2), ("b", 3), ("c", 2)]);
    let shared = [ModeLabel::tagged("a", 1), ModeLabel::tagged("b", 1)];
    let t1 = t
        .clone()
        .relabel(&lbl("a"), shared[0].clone())
        .unwrap()
        .relabel(&lbl("b"), shared[1].clone())
        .unwrap();
    let out = mode_product(&i, &t1, Some(&shared)).unwrap();
    assert_eq!(out.data(), t.data());
}

#[test]
fn pinv_examples() {
    let i = NamedTensor::from_matrix(lbl("p"), lbl("q"), &DMatrix::identity(3, 3)).unwrap();
    let inv = pinv_along(&i, &[lbl("q")], None).unwrap();
    assert_eq!(matricize(&inv, &[lbl("p")], &[lbl("q")]).unwrap(), DMatrix::identity(3, 3));
    let d = NamedTensor::from_matrix(lbl("p"), lbl("q"), &DMatrix::from_row_slice(2, 2, &[1., 0., 0., 0.])).unwrap();
    let dinv = pinv_along(&d, &[lbl("q")], None).unwrap();
    assert_eq!(dinv.data(), &[1., 0., 0., 0.]);
    assert_eq!(pinv_along(&d, &[lbl("q")], Some(-1.0)), Err(TensorError::InvalidTolerance(-1.0)));
}

#[test]
fn right_inverse_of_wide_tensor() {
    let mut r = rng(18);
    // 4 x (2*3): matricized with rows over a, columns over (b, c)
    let t = random_tensor(&mut r, &[("a", 4), ("b", 2), ("c", 3)]);
    let inv = pinv_along(&t, &labels(&["b", "c"]), None).unwrap();
    // inverse has modes (a, b, c) -> contract over (b, c)
    let t2 = t.clone().relabel(&lbl("a"), ModeLabel::tagged("a", 1)).unwrap();
    let prod = mode_product(&t2, &inv, Some(&labels(&["b", "c"]))).unwrap();
    let m = matricize(&prod, &[ModeLabel::tagged("a", 1)], &[lbl("a")]).unwrap();
    assert!((m - DMatrix::<f64>::identity(4, 4)).abs().max() < 1e-10);
}

#[test]
fn collapse_column_of_square() {
    let mut r = rng(19);
    let o = random_tensor(&mut r, &[("o", 10), ("p", 10)]);
    let c = collapse_mode(&o, &lbl("p"), 2).unwrap();
    let m = matricize(&o, &[lbl("o")], &[lbl("p")]).unwrap();
    assert_eq!(c.data(), m.column(2).as_slice());
    // collapse then sum equals the slice of the marginal
    let t = random_tensor(&mut r, &[("a", 3), ("b", 4), ("c", 2)]);
    for k in 0..4 {
        let lhs = collapse_mode(&t, &lbl("b"), k).unwrap().sum();
        let marg = t.sum_over(&lbl("a")).unwrap().sum_over(&lbl("c")).unwrap();
        assert!((lhs - marg.data()[k]).abs() < 1e-12);
    }
}

#[test]
fn kron_rank_is_product() {
    let mut r = rng(20);
    let a = random_matrix(&mut r, 3, 2);
    let b = random_matrix(&mut r, 2, 2);
    let k = kron(&a, &b);
    assert_eq!(numerical_rank(&k, 1e-10), numerical_rank(&a, 1e-10) * numerical_rank(&b, 1e-10));
    assert_eq!(numerical_rank(&k, 1e-10), 4);
}

fn moore_penrose_residual(a: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let r1 = (a * p * a - a).abs().max();
    let r2 = (p * a * p - p).abs().max();
    let ap = a * p;
    let pa = p * a;
    let r3 = (&ap - ap.transpose()).abs().max();
    let r4 = (&pa - pa.transpose()).abs().max();
    r1.max(r2).max(r3).max(r4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_any_partition(seed in any::<u64>(), dims in prop::collection::vec(1usize..4, 3), split in 0usize..8) {
        let mut r = rng(seed);
        let t = random_tensor(&mut r, &[("a", dims[0]), ("b", dims[1]), ("c", dims[2])]);
        let names = ["a", "b", "c"];
        let rows: Vec<ModeLabel> = (0..3).filter(|i| split & (1 << i) != 0).map(|i| lbl(names[i])).collect();
        let cols: Vec<ModeLabel> = (0..3).filter(|i| split & (1 << i) == 0).map(|i| lbl(names[i])).collect();
        let m = matricize(&t, &rows, &cols).unwrap();
        let mode = |l: &ModeLabel| Mode::new(l.clone(), t.dim(l).unwrap());
        let rm: Vec<Mode> = rows.iter().map(mode).collect();
        let cm: Vec<Mode> = cols.iter().map(mode).collect();
        let back = tensorize(&m, &rm, &cm).unwrap().permuted(&t.labels()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn contraction_order_agrees(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[("i", 3), ("j", 4), ("k", 2)]);
        let b = random_tensor(&mut r, &[("j", 4), ("l", 3), ("m", 2)]);
        let c = random_tensor(&mut r, &[("k", 2), ("l", 3), ("n", 2)]);
        let ab_c = mode_product(&mode_product(&a, &b, None).unwrap(), &c, None).unwrap();
        let bc = mode_product(&b, &c, None).unwrap();
        let a_bc = mode_product(&a, &bc, None).unwrap().permuted(&ab_c.labels()).unwrap();
        prop_assert!(max_rel_diff(ab_c.data(), a_bc.data(), 1e-12) < 1e-12);
    }

    #[test]
    fn moore_penrose_identities(seed in any::<u64>(), rows in 1usize..7, cols in 1usize..7, deficient in any::<bool>()) {
        let mut r = rng(seed);
        let mut a = random_matrix(&mut r, rows, cols);
        if deficient && rows.min(cols) > 1 {
            let k = rows.min(cols) - 1;
            a = random_matrix(&mut r, rows, k) * random_matrix(&mut r, k, cols);
        }
        let p = pinv(&a, default_rtol(rows, cols)).unwrap();
        prop_assert!(moore_penrose_residual(&a, &p) < 1e-10);
    }
}
