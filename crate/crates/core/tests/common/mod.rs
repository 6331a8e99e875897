#![allow(dead_code)]

use hsmm_spectral::tensor::{lbl, Mode, ModeLabel, NamedTensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_tensor(rng: &mut ChaCha8Rng, modes: &[(&str, usize)]) -> NamedTensor {
    let modes: Vec<Mode> = modes.iter().map(|&(n, d)| Mode::new(lbl(n), d)).collect();
    let len = modes.iter().map(|m| m.dim).product();
    NamedTensor::new(modes, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn labels(names: &[&str]) -> Vec<ModeLabel> {
    names.iter().map(|n| lbl(n)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over entries.
pub fn max_rel_diff(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Rank of `I ⊙ a` and `a ⊙ I` for a random `m x n` matrix with no zero column.
pub fn identity_khatri_rao_rank(seed: u64) -> (usize, usize, usize) {
    use hsmm_spectral::tensor::{khatri_rao_cols, numerical_rank};
    let mut r = rng(seed);
    let m = r.random_range(1..6);
    let n = r.random_range(1..8);
    let mut a = random_matrix(&mut r, m, n);
    // sparsify but keep one nonzero per column
    for j in 0..n {
        let keep = r.random_range(0..m);
        for i in 0..m {
            if i != keep && r.random_bool(0.5) {
                a[(i, j)] = 0.0;
            }
        }
    }
    let eye = DMatrix::identity(n, n);
    let left = numerical_rank(&khatri_rao_cols(&eye, &a).unwrap(), 1e-10);
    let right = numerical_rank(&khatri_rao_cols(&a, &eye).unwrap(), 1e-10);
    (left, right, n)
}

/// Observed and expected rank of `M ⊙ E` for a block row `M = [A_1 .. A_k]`,
/// `E = [I .. I]`, with the rank of each column group drawn at random.
pub fn block_row_rank(seed: u64) -> (usize, usize) {
    use hsmm_spectral::tensor::{khatri_rao_cols, numerical_rank};
    let mut r = rng(seed);
    let m = r.random_range(1..5);
    let n = r.random_range(1..5);
    let k = r.random_range(1..5);
    let mut big = DMatrix::zeros(m, n * k);
    let mut expected = 0;
    for c in 0..n {
        let rc = r.random_range(0..=m.min(k));
        expected += rc;
        let cols = random_matrix(&mut r, m, rc) * random_matrix(&mut r, rc, k);
        for j in 0..k {
            big.set_column(j * n + c, &cols.column(j));
        }
    }
    let e = DMatrix::from_fn(n, n * k, |i, col| if col % n == i { 1.0 } else { 0.0 });
    let observed = numerical_rank(&khatri_rao_cols(&big, &e).unwrap(), 1e-10);
    (observed, expected.min(m * n))
}

/// Count of strict subsets `S` of independent vectors for which `S ∪ {u}`
/// fails to be independent, where `u` is a combination with nonzero weights.
pub fn combination_independence_failures(seed: u64) -> usize {
    use hsmm_spectral::tensor::numerical_rank;
    let mut r = rng(seed);
    let k = r.random_range(1..6);
    let dim = r.random_range(k..8);
    let v = random_matrix(&mut r, dim, k);
    let mut u = nalgebra::DVector::zeros(dim);
    for i in 0..k {
        let mag = r.random_range(0.1..2.0);
        let c = if r.random_bool(0.5) { mag } else { -mag };
        u += v.column(i) * c;
    }
    let mut failures = 0;
    for mask in 0..(1u32 << k) - 1 {
        let idx: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let mut m = DMatrix::zeros(dim, idx.len() + 1);
        for (c, &i) in idx.iter().enumerate() {
            m.set_column(c, &v.column(i));
        }
        m.set_column(idx.len(), &u);
        if numerical_rank(&m, 1e-10) != idx.len() + 1 {
            failures += 1;
        }
    }
    failures
}

/// Plain HMM forward pass, used as an oracle for single-duration models.
pub fn hmm_forward(
    emission: &DMatrix<f64>,
    transition: &DMatrix<f64>,
    initial: &nalgebra::DVector<f64>,
    obs: &[usize],
) -> f64 {
    let n = initial.len();
    let mut alpha: Vec<f64> = (0..n).map(|x| initial[x] * emission[(obs[0], x)]).collect();
    for &o in &obs[1..] {
        alpha = (0..n)
            .map(|j| (0..n).map(|i| alpha[i] * transition[(j, i)]).sum::<f64>() * emission[(o, j)])
            .collect();
    }
    alpha.iter().sum()
}

/// `p(x_t, d_t)` for every step, by direct propagation of the counting process.
pub fn state_marginals(p: &hsmm_spectral::hsmm::HsmmParams, t_len: usize) -> Vec<DMatrix<f64>> {
    let (n_x, n_d) = (p.n_x, p.n_d);
    let mut cur = DMatrix::from_fn(n_x, n_d, |x, d| p.initial[x] * p.duration[(d, x)]);
    let mut out = vec![cur.clone()];
    for _ in 1..t_len {
        let mut next = DMatrix::zeros(n_x, n_d);
        for x in 0..n_x {
            for d in 0..n_d {
                let mass = cur[(x, d)];
                if d > 0 {
                    next[(x, d - 1)] += mass;
                } else {
                    for y in 0..n_x {
                        for e in 0..n_d {
                            next[(y, e)] += mass * p.transition[(y, x)] * p.duration[(e, y)];
                        }
                    }
                }
            }
        }
        cur = next;
        out.push(cur.clone());
    }
    out
}

/// Every sequence over `n_o` symbols of length `t_len`, in lexicographic order.
pub fn all_sequences(n_o: usize, t_len: usize) -> Vec<Vec<usize>> {
    let total = n_o.pow(t_len as u32);
    (0..total)
        .map(|mut k| {
            let mut s = vec![0; t_len];
            for slot in s.iter_mut().rev() {
                *slot = k % n_o;
                k /= n_o;
            }
            s
        })
        .collect()
}

/// Frobenius distance between two tensors with the same modes in possibly different order.
pub fn frobenius_distance(a: &NamedTensor, b: &NamedTensor) -> f64 {
    let b = b.permuted(&a.labels()).unwrap();
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Distances of (D, X, O) operators of `est` to those of `truth`.
pub fn operator_distances(
    est: &hsmm_spectral::spectral::ObservableModel,
    truth: &hsmm_spectral::spectral::ObservableModel,
) -> [f64; 3] {
    [
        frobenius_distance(&est.d_tilde, &truth.d_tilde),
        frobenius_distance(&est.x_tilde, &truth.x_tilde),
        frobenius_distance(&est.o_tilde, &truth.o_tilde),
    ]
}

/// Worst relative deviation of spectral estimates from the forward
/// likelihood over `count` sampled sequences with lengths in `[3, 10]`.
pub fn population_worst_error(p: &hsmm_spectral::hsmm::HsmmParams, count: usize, seed: u64) -> Result<f64, String> {
    use hsmm_spectral::{hsmm, moments, spectral};
    let sched = moments::build_schedule(p.n_x, p.n_d);
    let (m, _) = moments::analytic_moments(p, &sched, sched.min_len()).map_err(|e| e.to_string())?;
    let model = spectral::build_observable(&m, None).map_err(|e| e.to_string())?;
    let ev = model.evaluator().map_err(|e| e.to_string())?;
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let t_len = r.random_range(3..=10);
        let obs = hsmm::sample(p, t_len, &mut r).observations;
        let truth = hsmm::forward_likelihood(p, &obs).unwrap().log_prob;
        let est = ev.infer(&obs).map_err(|e| e.to_string())?;
        let rel = (est.sign as f64 * (est.log_value - truth).exp() - 1.0).abs();
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Condition number of the population window table restricted to its `n_x n_d` leading singular values.
pub fn window_condition(p: &hsmm_spectral::hsmm::HsmmParams) -> f64 {
    use hsmm_spectral::moments::{analytic_moments, build_schedule, left, right};
    use hsmm_spectral::tensor::{matricize, singular_values};
    let sched = build_schedule(p.n_x, p.n_d);
    let (m, _) = analytic_moments(p, &sched, sched.min_len()).unwrap();
    let s = singular_values(&matricize(&m.m_lr, &[left()], &[right()]).unwrap());
    s[0] / s[p.n_x * p.n_d - 1]
}
