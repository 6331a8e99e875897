//! Rank structure of the conditional window tables.
//!
//! `T` tables hold `p(future states | x_t, d_t)` with one column per lifted
//! state. They are grown by two moves: *propagate* (`T <- T V`, move the
//! conditioning state one step back) and *expand* (`T <- T ⊙ E`, also record
//! the state at the conditioning step). `F = Q T` with `Q = O ⊗ ... ⊗ O`
//! turns state windows into observation windows.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::hsmm::{random_model, validate, HsmmParams, ModelError};
use crate::tensor::{khatri_rao_cols, kron, numerical_rank};

/// Relative tolerance for every rank reported here.
pub const RANK_RTOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error(transparent)]
    InvalidModel(#[from] ModelError),
    #[error("offsets must be distinct, sorted and within [0, {max}]: {offsets:?}")]
    InvalidOffsets { offsets: Vec<usize>, max: usize },
}

/// Lifted one-step transition and its pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedTransition {
    /// `n_x n_d x n_x n_d`, `V[z', z] = p(z' | z)`.
    pub v: DMatrix<f64>,
    /// `n_x n_d x n_x`, the renewal columns of `V`: block `d` is `diag(D(d, :)) X`.
    pub psi: DMatrix<f64>,
    /// `n_x x n_x n_d`, `[I ... I]`; marginalizes the duration.
    pub e: DMatrix<f64>,
}

pub fn build_lift(p: &HsmmParams) -> Result<LiftedTransition, RankError> {
    validate(p, RANK_RTOL)?.into_result()?;
    let (n_x, n_d) = (p.n_x, p.n_d);
    let v = p.lifted_transition();
    let psi = v.columns(0, n_x).into_owned();
    Ok(LiftedTransition {
        v,
        psi,
        e: duration_marginalizer(n_x, n_d),
    })
}

fn duration_marginalizer(n_x: usize, n_d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_x, n_x * n_d, |x, z| if z % n_x == x { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TAlgorithm {
    Sequential,
    Efficient,
}

impl std::fmt::Display for TAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TAlgorithm::Sequential => "sequential",
            TAlgorithm::Efficient => "efficient",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TReport {
    pub t: DMatrix<f64>,
    pub predicted_rank: usize,
    pub numerical_rank: usize,
    pub algorithm: TAlgorithm,
    pub ell: usize,
    pub expansions: usize,
}

impl TReport {
    pub fn passed(&self) -> bool {
        self.predicted_rank == self.numerical_rank
    }
}

fn expand(t: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
    khatri_rao_cols(t, e).expect("T and E share the lifted column count")
}

/// Alternate expand and propagate, one step apart.
pub fn compute_t_sequential(p: &HsmmParams, ell: usize) -> Result<TReport, RankError> {
    let lift = build_lift(p)?;
    let ell = ell.max(1);
    let mut t = &lift.e * &lift.v;
    for _ in 1..ell {
        t = expand(&t, &lift.e) * &lift.v;
    }
    let s = p.n_lifted();
    Ok(TReport {
        numerical_rank: numerical_rank(&t, RANK_RTOL),
        predicted_rank: (ell * p.n_x).min(s),
        t,
        algorithm: TAlgorithm::Sequential,
        ell,
        expansions: ell - 1,
    })
}

/// Expand after `n_x^c - 1` cumulative propagations, `c = 1, 2, ...`.
///
/// Propagation stops at the window horizon of `n_d - 1` steps; if the next
/// expansion point lies beyond it, the last expansion happens at the horizon
/// and the remaining ones are dropped.
pub fn compute_t_efficient(p: &HsmmParams, ell: usize) -> Result<TReport, RankError> {
    let lift = build_lift(p)?;
    let ell = ell.max(1);
    let horizon = p.n_d - 1;
    let mut t = lift.e.clone();
    let mut count = 0usize;
    let mut expansions = 0;
    for c in 1..ell {
        let target = p.n_x.saturating_pow(c as u32).saturating_sub(1).min(horizon);
        if target == count && expansions > 0 {
            break;
        }
        for _ in count..target {
            t = &t * &lift.v;
        }
        count = target;
        t = expand(&t, &lift.e);
        expansions += 1;
        if target == horizon {
            break;
        }
    }
    t = &t * &lift.v;
    let s = p.n_lifted();
    Ok(TReport {
        numerical_rank: numerical_rank(&t, RANK_RTOL),
        predicted_rank: p.n_x.saturating_pow(expansions as u32 + 1).min(s),
        t,
        algorithm: TAlgorithm::Efficient,
        ell,
        expansions,
    })
}

/// Conditional observation-window table and its rank.
#[derive(Debug, Clone, PartialEq)]
pub struct FReport {
    /// `n_o^ell x n_x n_d`, rows flattened in offset order like the moment windows.
    pub f: DMatrix<f64>,
    pub numerical_rank: usize,
    pub full_rank: bool,
}

/// `p(o at 1 + offsets | z at 0)` assembled as `Q T`.
pub fn build_f(p: &HsmmParams, offsets: &[usize]) -> Result<FReport, RankError> {
    let bad = || RankError::InvalidOffsets {
        offsets: offsets.to_vec(),
        max: p.n_d - 1,
    };
    if offsets.is_empty()
        || offsets.windows(2).any(|w| w[0] >= w[1])
        || offsets[offsets.len() - 1] >= p.n_d
    {
        return Err(bad());
    }
    let lift = build_lift(p)?;
    let mut rev = offsets.iter().rev();
    let mut prev = *rev.next().expect("nonempty");
    let mut t = lift.e.clone();
    for &r in rev {
        for _ in r..prev {
            t = &t * &lift.v;
        }
        t = expand(&t, &lift.e);
        prev = r;
    }
    for _ in 0..=prev {
        t = &t * &lift.v;
    }
    let mut q = p.emission.clone();
    for _ in 1..offsets.len() {
        q = kron(&q, &p.emission);
    }
    let f = reverse_digits(&(q * t), p.n_o, offsets.len());
    let numerical_rank = numerical_rank(&f, RANK_RTOL);
    Ok(FReport {
        numerical_rank,
        full_rank: numerical_rank == p.n_lifted(),
        f,
    })
}

// expansion appends the newest (earliest) position as the least significant digit
fn reverse_digits(m: &DMatrix<f64>, base: usize, digits: usize) -> DMatrix<f64> {
    let rev = |mut i: usize| {
        let mut j = 0;
        for _ in 0..digits {
            j = j * base + i % base;
            i /= base;
        }
        j
    };
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, c| m[(rev(i), c)])
}

/// One line of a rank sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankRow {
    pub n_x: usize,
    pub n_d: usize,
    pub ell: usize,
    pub seed: u64,
    pub algorithm: TAlgorithm,
    pub predicted: usize,
    pub observed: usize,
    /// Set when the first draw missed and a second draw was needed.
    pub retried: bool,
}

impl RankRow {
    pub fn passed(&self) -> bool {
        self.predicted == self.observed
    }
}

/// Random models for rank sweeps; `n_o = n_x + 1` keeps `O` well conditioned.
pub fn grid_model(n_x: usize, n_d: usize, seed: u64) -> Result<HsmmParams, ModelError> {
    random_model(n_x + 1, n_x, n_d, seed, 0.05)
}

/// Sweep `(n_x, n_d, ell)` over `seeds` models each; a miss is redrawn once.
pub fn rank_grid(
    n_xs: &[usize],
    n_ds: &[usize],
    seeds: u64,
    algorithm: TAlgorithm,
) -> Result<Vec<RankRow>, RankError> {
    let mut cells = Vec::new();
    for &n_x in n_xs {
        for &n_d in n_ds {
            for ell in 1..=n_d + 1 {
                for seed in 0..seeds {
                    cells.push((n_x, n_d, ell, seed));
                }
            }
        }
    }
    let run = |n_x: usize, n_d: usize, ell: usize, seed: u64| -> Result<TReport, RankError> {
        let p = grid_model(n_x, n_d, seed)?;
        match algorithm {
            TAlgorithm::Sequential => compute_t_sequential(&p, ell),
            TAlgorithm::Efficient => compute_t_efficient(&p, ell),
        }
    };
    cells
        .par_iter()
        .map(|&(n_x, n_d, ell, seed)| {
            let mut r = run(n_x, n_d, ell, seed)?;
            let retried = !r.passed();
            if retried {
                r = run(n_x, n_d, ell, seed + 1_000_000)?;
            }
            Ok(RankRow {
                n_x,
                n_d,
                ell,
                seed,
                algorithm,
                predicted: r.predicted_rank,
                observed: r.numerical_rank,
                retried,
            })
        })
        .collect()
}
