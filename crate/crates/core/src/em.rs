//! Expectation-maximization for explicit-duration HSMMs.
//!
//! Forward-backward runs on the lifted `(x, d)` chain but exploits its
//! structure: only states with one step left can switch, so a step costs
//! `O(n_x^2 + n_x n_d)` instead of `O((n_x n_d)^2)`. The first duration is
//! drawn from `D`, so the initial step contributes to the duration counts.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hsmm::{dirichlet_column, dirichlet_matrix, HsmmParams, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmError {
    #[error("log-likelihood decreased from {before} to {after} at iteration {iteration}")]
    MonotonicityViolation {
        iteration: usize,
        before: f64,
        after: f64,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no training sequences")]
    NoData,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once the relative log-likelihood gain falls below this.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 200,
            tol: 1e-6,
            restarts: 3,
            seed: 0,
        }
    }
}

impl EmConfig {
    fn check(&self) -> Result<(), EmError> {
        if self.max_iter == 0 {
            return Err(EmError::InvalidConfig("max_iter must be at least 1".into()));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(EmError::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Allowed relative drop between iterations before EM is declared broken.
const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub params: HsmmParams,
    /// Training log-likelihood before each M-step; the last entry belongs to `params`.
    pub trace: Vec<f64>,
}

impl EmFit {
    pub fn log_likelihood(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

/// Sufficient statistics of one E-step.
struct Counts {
    initial: DVector<f64>,
    emission: DMatrix<f64>,
    transition: DMatrix<f64>,
    duration: DMatrix<f64>,
    log_lik: f64,
}

impl Counts {
    fn zeros(p: &HsmmParams) -> Self {
        Counts {
            initial: DVector::zeros(p.n_x),
            emission: DMatrix::zeros(p.n_o, p.n_x),
            transition: DMatrix::zeros(p.n_x, p.n_x),
            duration: DMatrix::zeros(p.n_d, p.n_x),
            log_lik: 0.0,
        }
    }

    fn merge(mut self, other: Counts) -> Counts {
        self.initial += other.initial;
        self.emission += other.emission;
        self.transition += other.transition;
        self.duration += other.duration;
        self.log_lik += other.log_lik;
        self
    }
}

/// Accumulate expected counts of one sequence; lifted index is `d * n_x + x`.
fn accumulate(p: &HsmmParams, obs: &[usize], acc: &mut Counts) {
    let (n_x, n_d) = (p.n_x, p.n_d);
    let s = n_x * n_d;
    let t_len = obs.len();
    let em = |o: usize, x: usize| p.emission[(o, x)];

    let mut alpha = vec![0.0; t_len * s];
    let mut scale = vec![0.0; t_len];
    for x in 0..n_x {
        for d in 0..n_d {
            alpha[d * n_x + x] = p.initial[x] * p.duration[(d, x)] * em(obs[0], x);
        }
    }
    let mut entry = vec![0.0; n_x];
    for t in 0..t_len {
        if t > 0 {
            let (prev, cur) = alpha.split_at_mut(t * s);
            let prev = &prev[(t - 1) * s..];
            let cur = &mut cur[..s];
            for (xn, e) in entry.iter_mut().enumerate() {
                *e = (0..n_x).map(|x| p.transition[(xn, x)] * prev[x]).sum();
            }
            for d in 0..n_d {
                for x in 0..n_x {
                    let stay = if d + 1 < n_d { prev[(d + 1) * n_x + x] } else { 0.0 };
                    cur[d * n_x + x] = (p.duration[(d, x)] * entry[x] + stay) * em(obs[t], x);
                }
            }
        }
        let a = &mut alpha[t * s..(t + 1) * s];
        let c: f64 = a.iter().sum();
        scale[t] = c;
        if c > 0.0 {
            a.iter_mut().for_each(|v| *v /= c);
        }
    }
    if scale.iter().any(|&c| c.is_nan() || c <= 0.0) {
        acc.log_lik = f64::NEG_INFINITY;
        return;
    }
    acc.log_lik += scale.iter().map(|c| c.ln()).sum::<f64>();

    // beta is scaled by the same constants as alpha
    let mut beta = vec![1.0; s];
    let mut prev_beta = vec![0.0; s];
    // renewal message: sum over (x', d') of X D O beta
    let mut renew = vec![0.0; n_x];
    for t in (0..t_len).rev() {
        let a = &alpha[t * s..(t + 1) * s];
        for x in 0..n_x {
            let mut g = 0.0;
            for d in 0..n_d {
                g += a[d * n_x + x] * beta[d * n_x + x];
            }
            acc.emission[(obs[t], x)] += g;
            if t == 0 {
                acc.initial[x] += g;
                for d in 0..n_d {
                    acc.duration[(d, x)] += a[d * n_x + x] * beta[d * n_x + x];
                }
            }
        }
        if t == 0 {
            break;
        }
        let o = obs[t];
        let c = scale[t];
        let a_prev = &alpha[(t - 1) * s..t * s];
        // w(x', d') = O(o_t | x') beta_t(x', d') / c_t
        for xn in 0..n_x {
            let mut r = 0.0;
            for dn in 0..n_d {
                let w = em(o, xn) * beta[dn * n_x + xn] / c;
                r += p.duration[(dn, xn)] * w;
                for x in 0..n_x {
                    let xi = a_prev[x] * p.transition[(xn, x)] * p.duration[(dn, xn)] * w;
                    acc.transition[(xn, x)] += xi;
                    acc.duration[(dn, xn)] += xi;
                }
            }
            renew[xn] = r;
        }
        for x in 0..n_x {
            prev_beta[x] = (0..n_x).map(|xn| p.transition[(xn, x)] * renew[xn]).sum();
            for d in 1..n_d {
                prev_beta[d * n_x + x] = em(o, x) * beta[(d - 1) * n_x + x] / c;
            }
        }
        std::mem::swap(&mut beta, &mut prev_beta);
    }
}

// fixed chunks merged in order keep the sums independent of thread scheduling
fn e_step(p: &HsmmParams, sequences: &[Vec<usize>]) -> Counts {
    let parts: Vec<Counts> = sequences
        .par_chunks(64)
        .map(|chunk| {
            let mut acc = Counts::zeros(p);
            for obs in chunk.iter().filter(|s| !s.is_empty()) {
                accumulate(p, obs, &mut acc);
            }
            acc
        })
        .collect();
    parts.into_iter().fold(Counts::zeros(p), Counts::merge)
}

/// Normalize columns; a column without mass keeps its previous value.
fn normalized(counts: &DMatrix<f64>, previous: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = counts.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let s = col.sum();
        if s > 0.0 {
            col /= s;
        } else {
            col.copy_from(&previous.column(j));
        }
    }
    out
}

fn m_step(p: &HsmmParams, c: &Counts) -> Result<HsmmParams, ModelError> {
    let pi = DMatrix::from_column_slice(p.n_x, 1, c.initial.as_slice());
    let pi_prev = DMatrix::from_column_slice(p.n_x, 1, p.initial.as_slice());
    HsmmParams::new(
        normalized(&c.emission, &p.emission),
        normalized(&c.transition, &p.transition),
        normalized(&c.duration, &p.duration),
        DVector::from_column_slice(normalized(&pi, &pi_prev).as_slice()),
    )
}

/// Training log-likelihood of `p`.
pub fn log_likelihood(p: &HsmmParams, sequences: &[Vec<usize>]) -> f64 {
    e_step(p, sequences).log_lik
}

/// EM from a given starting point.
pub fn em_fit_from(sequences: &[Vec<usize>], init: HsmmParams, cfg: &EmConfig) -> Result<EmFit, EmError> {
    cfg.check()?;
    if sequences.iter().all(|s| s.is_empty()) {
        return Err(EmError::NoData);
    }
    for s in sequences {
        init.check_symbols(s)?;
    }
    let mut p = init;
    let mut trace = Vec::new();
    let mut counts = e_step(&p, sequences);
    trace.push(counts.log_lik);
    for iteration in 1..=cfg.max_iter {
        let next = m_step(&p, &counts)?;
        let next_counts = e_step(&next, sequences);
        let (before, after) = (counts.log_lik, next_counts.log_lik);
        let scale = before.abs().max(1.0);
        if after < before - MONOTONE_SLACK * scale {
            return Err(EmError::MonotonicityViolation {
                iteration,
                before,
                after,
            });
        }
        p = next;
        counts = next_counts;
        trace.push(after);
        if after - before <= cfg.tol * scale {
            break;
        }
    }
    Ok(EmFit { params: p, trace })
}

/// Random starting point with flat Dirichlet columns.
pub fn random_init<R: Rng>(n_o: usize, n_x: usize, n_d: usize, rng: &mut R) -> Result<HsmmParams, ModelError> {
    HsmmParams::new(
        dirichlet_matrix(rng, n_o, n_x),
        dirichlet_matrix(rng, n_x, n_x),
        dirichlet_matrix(rng, n_d, n_x),
        DVector::from_vec(dirichlet_column(rng, n_x)),
    )
}

/// Best of `cfg.restarts` random initializations.
pub fn em_fit(
    sequences: &[Vec<usize>],
    n_o: usize,
    n_x: usize,
    n_d: usize,
    cfg: &EmConfig,
) -> Result<EmFit, EmError> {
    cfg.check()?;
    if n_x > n_o {
        return Err(ModelError::AssumptionViolated(format!("n_x = {n_x} exceeds n_o = {n_o}")).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<EmFit> = None;
    for _ in 0..cfg.restarts.max(1) {
        let init = random_init(n_o, n_x, n_d, &mut rng)?;
        let fit = em_fit_from(sequences, init, cfg)?;
        if best.as_ref().is_none_or(|b| fit.log_likelihood() > b.log_likelihood()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}
