//! Model validation, sampling and the two exact likelihood oracles.

mod common;

use common::*;
use hsmm_spectral::hsmm::*;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

fn constructed() -> HsmmParams {
    let o = DMatrix::from_row_slice(3, 2, &[1., 0., 0., 1., 0., 0.]);
    let x = DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.4, 0.6]);
    let d = DMatrix::from_element(3, 2, 1.0 / 3.0);
    HsmmParams::new(o, x, d, DVector::from_vec(vec![0.5, 0.5])).unwrap()
}

#[test]
fn validate_constructed_model() {
    let r = validate(&constructed(), 1e-10).unwrap();
    assert!(r.all_passed(), "{:?}", r.failures());
}

#[test]
fn validate_zero_duration_entry() {
    let mut p = constructed();
    p.duration = DMatrix::from_row_slice(3, 2, &[0.5, 1. / 3., 0.5, 1. / 3., 0.0, 1. / 3.]);
    let r = validate(&p, 1e-10).unwrap();
    assert!(!r.check("D positive").unwrap().passed);
    assert!(r.check("X full rank").unwrap().passed);
    assert!(matches!(r.into_result(), Err(ModelError::InvalidModel(_))));
}

#[test]
fn validate_more_states_than_symbols() {
    let o = DMatrix::from_row_slice(2, 3, &[0.5, 0.2, 0.7, 0.5, 0.8, 0.3]);
    let x = DMatrix::from_row_slice(3, 3, &[0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.1, 0.1, 0.8]);
    let d = DMatrix::from_element(1, 3, 1.0);
    let p = HsmmParams::new(o, x, d, DVector::from_element(3, 1. / 3.)).unwrap();
    let r = validate(&p, 1e-10).unwrap();
    assert!(!r.check("O full column rank").unwrap().passed);
}

#[test]
fn validate_shape_mismatch() {
    let mut p = constructed();
    p.transition = DMatrix::identity(3, 3);
    assert!(matches!(validate(&p, 1e-10), Err(ModelError::ShapeMismatch(_))));
}

#[test]
fn random_models_validate() {
    for (n_o, n_x, n_d) in [(3, 2, 2), (5, 4, 6)] {
        let p = random_model(n_o, n_x, n_d, 1, 0.05).unwrap();
        assert!(validate(&p, 1e-10).unwrap().all_passed());
        assert_eq!(p, random_model(n_o, n_x, n_d, 1, 0.05).unwrap());
    }
    assert!(random_model(2, 3, 2, 1, 0.05).is_err());
}

#[test]
fn zero_diagonal_option() {
    let opts = RandomModelOptions { zero_diagonal: true, ..Default::default() };
    let p = random_model_with(4, 3, 2, 5, opts).unwrap();
    for i in 0..3 {
        assert_eq!(p.transition[(i, i)], 0.0);
    }
    assert!(validate(&p, 1e-10).unwrap().all_passed());
}

#[test]
fn sample_single_state_single_duration() {
    let p = HsmmParams::new(
        DMatrix::from_row_slice(2, 1, &[0.3, 0.7]),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    let s = sample(&p, 20, &mut rng(1));
    assert!(s.hidden.iter().all(|&h| h == (0, 1)));
}

#[test]
fn sampled_paths_count_down() {
    let p = random_model(5, 4, 6, 3, 0.05).unwrap();
    let mut r = rng(2);
    for _ in 0..200 {
        let s = sample(&p, 50, &mut r);
        assert_eq!(s.observations.len(), 50);
        for w in s.hidden.windows(2) {
            let ((x0, d0), (x1, d1)) = (w[0], w[1]);
            if d0 > 1 {
                assert_eq!((x1, d1), (x0, d0 - 1));
            }
            assert!((1..=6).contains(&d1));
        }
    }
}

#[test]
fn symbol_frequencies_within_three_sigma() {
    let p = random_model(3, 2, 2, 7, 0.05).unwrap();
    let t_len = 4;
    let draws = 250_000;
    let marg = state_marginals(&p, t_len);
    let sampler = Sampler::new(&p);
    let mut r = rng(3);
    let mut counts = vec![vec![0usize; 3]; t_len];
    for _ in 0..draws {
        for (t, &o) in sampler.sample(t_len, &mut r).observations.iter().enumerate() {
            counts[t][o] += 1;
        }
    }
    for t in 0..t_len {
        let px: Vec<f64> = (0..2).map(|x| marg[t].row(x).sum()).collect();
        for o in 0..3 {
            let q: f64 = (0..2).map(|x| p.emission[(o, x)] * px[x]).sum();
            let sd = (q * (1.0 - q) / draws as f64).sqrt();
            let f = counts[t][o] as f64 / draws as f64;
            assert!((f - q).abs() <= 3.0 * sd, "t={t} o={o}: {f} vs {q}");
        }
    }
}

#[test]
fn sequence_frequency_matches_forward() {
    let p = random_model(3, 2, 3, 11, 0.05).unwrap();
    let target = [0usize, 2, 1];
    let q = forward_likelihood(&p, &target).unwrap().prob.unwrap();
    let n = 400_000;
    let seqs = sample_many(&p, n, 3, &mut rng(4));
    let hits = seqs.iter().filter(|s| s.as_slice() == target).count();
    let sd = (q * (1.0 - q) / n as f64).sqrt();
    assert!((hits as f64 / n as f64 - q).abs() <= 3.0 * sd);
}

#[test]
fn enumeration_trivial_cases() {
    let p = HsmmParams::new(
        DMatrix::from_row_slice(2, 1, &[0.7, 0.3]),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_row_slice(2, 1, &[0.4, 0.6]),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    let obs = [0, 1, 1, 0];
    let want = 0.7 * 0.3 * 0.3 * 0.7;
    assert!((exact_likelihood_enum(&p, &obs).unwrap() - want).abs() < 1e-15);
    let f = forward_likelihood(&p, &[0, 0]).unwrap();
    assert!((f.prob.unwrap() - 0.49).abs() < 1e-15);

    let q = random_model(3, 2, 2, 4, 0.05).unwrap();
    for o in 0..3 {
        let want: f64 = (0..2).map(|x| q.initial[x] * q.emission[(o, x)]).sum();
        assert!((exact_likelihood_enum(&q, &[o]).unwrap() - want).abs() < 1e-15);
    }
    assert!(matches!(
        exact_likelihood_enum(&q, &[0; ENUM_MAX_T + 1]),
        Err(ModelError::OracleTooLarge(_))
    ));
    assert!(matches!(forward_likelihood(&q, &[]), Err(ModelError::EmptySequence)));
    assert!(matches!(forward_likelihood(&q, &[3]), Err(ModelError::UnknownSymbol { .. })));
}

#[test]
fn forward_matches_enumeration_on_larger_model() {
    let p = random_model(5, 4, 6, 9, 0.05).unwrap();
    let mut r = rng(5);
    for _ in 0..5 {
        let obs = sample(&p, 8, &mut r).observations;
        let e = exact_likelihood_enum(&p, &obs).unwrap();
        let f = forward_likelihood(&p, &obs).unwrap().prob.unwrap();
        assert!(((e - f) / e).abs() < 1e-12);
    }
}

#[test]
fn explicit_prior_matches_enumeration() {
    let p = random_model(3, 2, 3, 21, 0.05).unwrap();
    let prior = DMatrix::from_row_slice(3, 2, &[0.2, 0.5, 0.3, 0.25, 0.5, 0.25]);
    let p = p.with_duration_prior(DurationPrior::Explicit(prior)).unwrap();
    for obs in all_sequences(3, 4) {
        let e = exact_likelihood_enum(&p, &obs).unwrap();
        let f = forward_likelihood(&p, &obs).unwrap().prob.unwrap();
        assert!(((e - f) / e).abs() < 1e-12);
    }
}

#[test]
fn single_duration_is_an_hmm() {
    for seed in 0..5 {
        let p = random_model(3, 3, 1, seed, 0.05).unwrap();
        let mut r = rng(seed + 100);
        for t_len in [1, 2, 5, 30] {
            let obs = sample(&p, t_len, &mut r).observations;
            let h = hmm_forward(&p.emission, &p.transition, &p.initial, &obs);
            let f = forward_likelihood(&p, &obs).unwrap();
            assert!((f.log_prob - h.ln()).abs() < 1e-12 * h.ln().abs().max(1.0));
        }
    }
}

#[test]
fn probabilities_sum_to_one() {
    for (n_o, n_x, n_d) in [(2, 1, 3), (3, 2, 2), (3, 3, 3)] {
        let p = random_model(n_o, n_x, n_d, 8, 0.05).unwrap();
        for t_len in 1..=6 {
            let total: f64 = all_sequences(n_o, t_len)
                .iter()
                .map(|s| forward_likelihood(&p, s).unwrap().prob.unwrap())
                .sum();
            assert!((total - 1.0).abs() < 1e-10, "{n_o},{n_x},{n_d} T={t_len}: {total}");
        }
    }
}

#[test]
fn relabeling_hidden_states() {
    let p = random_model(5, 4, 3, 13, 0.05).unwrap();
    let mut perm: Vec<usize> = (0..4).collect();
    perm.shuffle(&mut rng(6));
    let q = HsmmParams::new(
        DMatrix::from_fn(5, 4, |o, x| p.emission[(o, perm[x])]),
        DMatrix::from_fn(4, 4, |y, x| p.transition[(perm[y], perm[x])]),
        DMatrix::from_fn(3, 4, |d, x| p.duration[(d, perm[x])]),
        DVector::from_fn(4, |x, _| p.initial[perm[x]]),
    )
    .unwrap();
    let mut r = rng(7);
    for _ in 0..20 {
        let obs = sample(&p, 40, &mut r).observations;
        let a = forward_likelihood(&p, &obs).unwrap().log_prob;
        let b = forward_likelihood(&q, &obs).unwrap().log_prob;
        assert!((a - b).abs() < 1e-10 * a.abs());
    }
}

#[test]
fn long_sequences_stay_finite() {
    let p = random_model(5, 4, 6, 2, 0.05).unwrap();
    let obs = sample(&p, 5000, &mut rng(8)).observations;
    let f = forward_likelihood(&p, &obs).unwrap();
    assert!(f.log_prob.is_finite() && f.log_prob < -1000.0);
    assert!(f.prob.is_none() || f.prob == Some(0.0));
}
