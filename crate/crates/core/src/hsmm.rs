//! Discrete hidden semi-Markov models: parameters, validation, sampling and
//! exact likelihood oracles.
//!
//! The latent chain runs over pairs `(x, d)` where `d` counts the remaining
//! time in the current state. When `d = 1` the next state is drawn from the
//! transition matrix and a fresh duration from the duration matrix; otherwise
//! the state is kept and `d` decreases by one. All matrices are
//! column-stochastic: column `j` is the distribution conditioned on state `j`.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use thiserror::Error;

use crate::tensor::singular_values;

/// Longest sequence accepted by [`exact_likelihood_enum`].
pub const ENUM_MAX_T: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model violates an assumption: {0}")]
    AssumptionViolated(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("no acceptable model after {0} draws")]
    GenerationFailed(usize),
    #[error("sequence of length {0} is too long for path enumeration (max {ENUM_MAX_T})")]
    OracleTooLarge(usize),
    #[error("symbol {symbol} at position {position} is outside [0, {n_o})")]
    UnknownSymbol {
        symbol: usize,
        position: usize,
        n_o: usize,
    },
    #[error("empty sequence")]
    EmptySequence,
}

/// Distribution of the first duration.
#[derive(Debug, Clone, PartialEq)]
pub enum DurationPrior {
    /// `d_1 ~ D(:, x_1)`, a fresh renewal at the first step.
    FromD,
    /// Explicit `n_d x n_x` table `p(d_1 | x_1)`.
    Explicit(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsmmParams {
    pub n_o: usize,
    pub n_x: usize,
    pub n_d: usize,
    /// `n_o x n_x`, `p(o | x)`.
    pub emission: DMatrix<f64>,
    /// `n_x x n_x`, `p(x_t | x_{t-1})` at a renewal.
    pub transition: DMatrix<f64>,
    /// `n_d x n_x`, `p(d | x)` at a renewal.
    pub duration: DMatrix<f64>,
    pub initial: DVector<f64>,
    pub duration_prior: DurationPrior,
}

impl HsmmParams {
    pub fn new(
        emission: DMatrix<f64>,
        transition: DMatrix<f64>,
        duration: DMatrix<f64>,
        initial: DVector<f64>,
    ) -> Result<Self, ModelError> {
        let p = HsmmParams {
            n_o: emission.nrows(),
            n_x: emission.ncols(),
            n_d: duration.nrows(),
            emission,
            transition,
            duration,
            initial,
            duration_prior: DurationPrior::FromD,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn with_duration_prior(mut self, prior: DurationPrior) -> Result<Self, ModelError> {
        self.duration_prior = prior;
        self.check_shapes()?;
        Ok(self)
    }

    pub fn check_shapes(&self) -> Result<(), ModelError> {
        let (n_o, n_x, n_d) = (self.n_o, self.n_x, self.n_d);
        let bad = |what: &str, got: (usize, usize), want: (usize, usize)| {
            Err(ModelError::ShapeMismatch(format!(
                "{what} is {}x{}, expected {}x{}",
                got.0, got.1, want.0, want.1
            )))
        };
        if n_o == 0 || n_x == 0 || n_d == 0 {
            return Err(ModelError::ShapeMismatch("dimensions must be positive".into()));
        }
        if self.emission.shape() != (n_o, n_x) {
            return bad("O", self.emission.shape(), (n_o, n_x));
        }
        if self.transition.shape() != (n_x, n_x) {
            return bad("X", self.transition.shape(), (n_x, n_x));
        }
        if self.duration.shape() != (n_d, n_x) {
            return bad("D", self.duration.shape(), (n_d, n_x));
        }
        if self.initial.len() != n_x {
            return bad("pi_x", (self.initial.len(), 1), (n_x, 1));
        }
        if let DurationPrior::Explicit(t) = &self.duration_prior {
            if t.shape() != (n_d, n_x) {
                return bad("duration prior", t.shape(), (n_d, n_x));
            }
        }
        Ok(())
    }

    /// Number of lifted states `(x, d)`.
    pub fn n_lifted(&self) -> usize {
        self.n_x * self.n_d
    }

    /// Lifted index of state `x` with remaining duration `d + 1`.
    pub fn lifted(&self, x: usize, d: usize) -> usize {
        d * self.n_x + x
    }

    /// `p(d_1 = d + 1 | x_1 = x)`.
    pub fn first_duration(&self, d: usize, x: usize) -> f64 {
        match &self.duration_prior {
            DurationPrior::FromD => self.duration[(d, x)],
            DurationPrior::Explicit(t) => t[(d, x)],
        }
    }

    /// Distribution of the first lifted state.
    pub fn lifted_initial(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_lifted());
        for x in 0..self.n_x {
            for d in 0..self.n_d {
                v[self.lifted(x, d)] = self.initial[x] * self.first_duration(d, x);
            }
        }
        v
    }

    /// One-step transition on the lifted space, `V[z', z] = p(z' | z)`.
    pub fn lifted_transition(&self) -> DMatrix<f64> {
        let s = self.n_lifted();
        let mut v = DMatrix::zeros(s, s);
        for x in 0..self.n_x {
            for xn in 0..self.n_x {
                for dn in 0..self.n_d {
                    v[(self.lifted(xn, dn), self.lifted(x, 0))] =
                        self.duration[(dn, xn)] * self.transition[(xn, x)];
                }
            }
            for d in 1..self.n_d {
                v[(self.lifted(x, d - 1), self.lifted(x, d))] = 1.0;
            }
        }
        v
    }

    /// Emission on the lifted space, `n_o x n_x n_d`.
    pub fn lifted_emission(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_o, self.n_lifted(), |o, z| {
            self.emission[(o, z % self.n_x)]
        })
    }

    pub fn check_symbols(&self, obs: &[usize]) -> Result<(), ModelError> {
        match obs.iter().position(|&o| o >= self.n_o) {
            Some(i) => Err(ModelError::UnknownSymbol {
                symbol: obs[i],
                position: i,
                n_o: self.n_o,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// `Err(InvalidModel)` listing the failed checks.
    pub fn into_result(self) -> Result<(), ModelError> {
        if self.all_passed() {
            Ok(())
        } else {
            let msg = self
                .failures()
                .iter()
                .map(|c| format!("{}: {}", c.name, c.detail))
                .collect::<Vec<_>>()
                .join("; ");
            Err(ModelError::InvalidModel(msg))
        }
    }
}

const STOCHASTIC_TOL: f64 = 1e-12;

fn column_sum_error(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| (c.sum() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Check stochasticity and the rank/positivity assumptions the spectral
/// learner relies on.
pub fn validate(p: &HsmmParams, rtol: f64) -> Result<ValidationReport, ModelError> {
    p.check_shapes()?;
    let mut checks = Vec::new();
    let mut stoch = |name: &'static str, m: &DMatrix<f64>| {
        let err = column_sum_error(m);
        let min = m.min();
        checks.push(Check {
            name,
            passed: err <= STOCHASTIC_TOL * m.nrows().max(1) as f64 && min >= 0.0,
            detail: format!("max |column sum - 1| = {err:.3e}, min entry = {min:.3e}"),
        });
    };
    stoch("O stochastic", &p.emission);
    stoch("X stochastic", &p.transition);
    stoch("D stochastic", &p.duration);
    if let DurationPrior::Explicit(t) = &p.duration_prior {
        stoch("duration prior stochastic", t);
    }
    let pi = DMatrix::from_column_slice(p.n_x, 1, p.initial.as_slice());
    stoch("pi_x stochastic", &pi);

    let sx = singular_values(&p.transition);
    let rank_x = sx.iter().filter(|&&s| s > rtol * sx[0]).count();
    checks.push(Check {
        name: "X full rank",
        passed: rank_x == p.n_x,
        detail: format!(
            "rank {rank_x} of {}, sigma_min = {:.3e}",
            p.n_x,
            sx.last().copied().unwrap_or(0.0)
        ),
    });
    let dmin = p.duration.min();
    checks.push(Check {
        name: "D positive",
        passed: dmin > 0.0,
        detail: format!("min entry = {dmin:.3e}"),
    });
    let so = singular_values(&p.emission);
    let rank_o = so.iter().filter(|&&s| s > rtol * so[0]).count();
    checks.push(Check {
        name: "O full column rank",
        passed: p.n_x <= p.n_o && rank_o == p.n_x,
        detail: format!(
            "n_x = {}, n_o = {}, rank {rank_o}, sigma_min = {:.3e}",
            p.n_x,
            p.n_o,
            so.last().copied().unwrap_or(0.0)
        ),
    });
    Ok(ValidationReport { checks })
}

/// Options for [`random_model_with`].
#[derive(Debug, Clone, Copy)]
pub struct RandomModelOptions {
    pub min_sigma: f64,
    pub min_duration: f64,
    /// Forbid self-transitions at renewals.
    pub zero_diagonal: bool,
    pub max_draws: usize,
}

impl Default for RandomModelOptions {
    fn default() -> Self {
        RandomModelOptions {
            min_sigma: 0.05,
            min_duration: 1e-3,
            zero_diagonal: false,
            max_draws: 1000,
        }
    }
}

pub(crate) fn dirichlet_column<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

pub(crate) fn dirichlet_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        let c = dirichlet_column(rng, rows);
        m.column_mut(j).copy_from_slice(&c);
    }
    m
}

/// Random model with flat Dirichlet columns, rejection-sampled until the
/// emission and transition matrices are well conditioned.
pub fn random_model(
    n_o: usize,
    n_x: usize,
    n_d: usize,
    seed: u64,
    min_sigma: f64,
) -> Result<HsmmParams, ModelError> {
    random_model_with(
        n_o,
        n_x,
        n_d,
        seed,
        RandomModelOptions {
            min_sigma,
            ..Default::default()
        },
    )
}

pub fn random_model_with(
    n_o: usize,
    n_x: usize,
    n_d: usize,
    seed: u64,
    opts: RandomModelOptions,
) -> Result<HsmmParams, ModelError> {
    if n_o == 0 || n_x == 0 || n_d == 0 {
        return Err(ModelError::ShapeMismatch("dimensions must be positive".into()));
    }
    if n_x > n_o {
        return Err(ModelError::AssumptionViolated(format!(
            "n_x = {n_x} exceeds n_o = {n_o}"
        )));
    }
    if opts.zero_diagonal && n_x == 1 {
        return Err(ModelError::AssumptionViolated(
            "a single state cannot avoid self-transitions".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..opts.max_draws {
        let emission = dirichlet_matrix(&mut rng, n_o, n_x);
        let mut transition = if opts.zero_diagonal {
            let mut t = DMatrix::zeros(n_x, n_x);
            for j in 0..n_x {
                let c = dirichlet_column(&mut rng, n_x - 1);
                let mut k = 0;
                for i in 0..n_x {
                    if i != j {
                        t[(i, j)] = c[k];
                        k += 1;
                    }
                }
            }
            t
        } else {
            dirichlet_matrix(&mut rng, n_x, n_x)
        };
        let duration = dirichlet_matrix(&mut rng, n_d, n_x);
        let initial = DVector::from_vec(dirichlet_column(&mut rng, n_x));
        if n_x == 1 {
            transition = DMatrix::from_element(1, 1, 1.0);
        }
        let so = singular_values(&emission);
        let sx = singular_values(&transition);
        let ok = so[n_x - 1] >= opts.min_sigma
            && sx[n_x - 1] >= opts.min_sigma
            && duration.min() >= opts.min_duration;
        if ok {
            return HsmmParams::new(emission, transition, duration, initial);
        }
    }
    Err(ModelError::GenerationFailed(opts.max_draws))
}

/// Observations plus the latent path that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub observations: Vec<usize>,
    /// `(x, d)` with `d` the remaining duration (1-based).
    pub hidden: Vec<(usize, usize)>,
}

/// Column samplers for repeated draws from one model.
pub struct Sampler {
    emission: Vec<WeightedIndex<f64>>,
    transition: Vec<WeightedIndex<f64>>,
    duration: Vec<WeightedIndex<f64>>,
    first_duration: Vec<WeightedIndex<f64>>,
    initial: WeightedIndex<f64>,
}

fn column_samplers(m: &DMatrix<f64>) -> Vec<WeightedIndex<f64>> {
    m.column_iter()
        .map(|c| WeightedIndex::new(c.iter().copied()).expect("stochastic column"))
        .collect()
}

impl Sampler {
    pub fn new(p: &HsmmParams) -> Self {
        let first = match &p.duration_prior {
            DurationPrior::FromD => column_samplers(&p.duration),
            DurationPrior::Explicit(t) => column_samplers(t),
        };
        Sampler {
            emission: column_samplers(&p.emission),
            transition: column_samplers(&p.transition),
            duration: column_samplers(&p.duration),
            first_duration: first,
            initial: WeightedIndex::new(p.initial.iter().copied()).expect("stochastic prior"),
        }
    }

    pub fn sample<R: Rng>(&self, t_len: usize, rng: &mut R) -> SampledSequence {
        let mut observations = Vec::with_capacity(t_len);
        let mut hidden = Vec::with_capacity(t_len);
        if t_len == 0 {
            return SampledSequence { observations, hidden };
        }
        let mut x = self.initial.sample(rng);
        let mut d = self.first_duration[x].sample(rng) + 1;
        for t in 0..t_len {
            if t > 0 {
                if d == 1 {
                    x = self.transition[x].sample(rng);
                    d = self.duration[x].sample(rng) + 1;
                } else {
                    d -= 1;
                }
            }
            hidden.push((x, d));
            observations.push(self.emission[x].sample(rng));
        }
        SampledSequence { observations, hidden }
    }
}

/// Draw one sequence of length `t_len`.
pub fn sample<R: Rng>(p: &HsmmParams, t_len: usize, rng: &mut R) -> SampledSequence {
    Sampler::new(p).sample(t_len, rng)
}

/// Draw `n` observation sequences of length `t_len`.
pub fn sample_many<R: Rng>(p: &HsmmParams, n: usize, t_len: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let s = Sampler::new(p);
    (0..n).map(|_| s.sample(t_len, rng).observations).collect()
}

/// Sum over every latent path with nonzero prior probability.
///
/// Paths are generated segment by segment; a segment that runs past the end
/// of the sequence contributes once per admissible full duration.
pub fn exact_likelihood_enum(p: &HsmmParams, obs: &[usize]) -> Result<f64, ModelError> {
    if obs.len() > ENUM_MAX_T {
        return Err(ModelError::OracleTooLarge(obs.len()));
    }
    p.check_symbols(obs)?;
    if obs.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for x in 0..p.n_x {
        for d in 0..p.n_d {
            let w = p.initial[x] * p.first_duration(d, x);
            total += enum_segment(p, obs, 0, x, d + 1, w);
        }
    }
    Ok(total)
}

fn enum_segment(p: &HsmmParams, obs: &[usize], start: usize, x: usize, len: usize, w: f64) -> f64 {
    if w == 0.0 {
        return 0.0;
    }
    let end = (start + len).min(obs.len());
    let mut w = w;
    for &o in &obs[start..end] {
        w *= p.emission[(o, x)];
    }
    if start + len >= obs.len() {
        return w;
    }
    let mut total = 0.0;
    for xn in 0..p.n_x {
        for d in 0..p.n_d {
            let wn = w * p.transition[(xn, x)] * p.duration[(d, xn)];
            total += enum_segment(p, obs, start + len, xn, d + 1, wn);
        }
    }
    total
}

/// Log-likelihood plus the plain probability when it is representable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardResult {
    pub log_prob: f64,
    pub prob: Option<f64>,
}

/// Forward recursion over the lifted `(x, d)` lattice with per-step
/// normalization.
pub fn forward_likelihood(p: &HsmmParams, obs: &[usize]) -> Result<ForwardResult, ModelError> {
    if obs.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    p.check_symbols(obs)?;
    let (n_x, n_d) = (p.n_x, p.n_d);
    let mut alpha = vec![0.0; n_x * n_d];
    for x in 0..n_x {
        let e = p.initial[x] * p.emission[(obs[0], x)];
        for d in 0..n_d {
            alpha[d * n_x + x] = e * p.first_duration(d, x);
        }
    }
    let mut log = 0.0;
    let mut next = vec![0.0; n_x * n_d];
    let mut entry = vec![0.0; n_x];
    for t in 0..obs.len() {
        if t > 0 {
            let o = obs[t];
            for (xn, e) in entry.iter_mut().enumerate() {
                *e = (0..n_x).map(|x| p.transition[(xn, x)] * alpha[x]).sum();
            }
            for d in 0..n_d {
                for x in 0..n_x {
                    let stay = if d + 1 < n_d { alpha[(d + 1) * n_x + x] } else { 0.0 };
                    next[d * n_x + x] = (p.duration[(d, x)] * entry[x] + stay) * p.emission[(o, x)];
                }
            }
            std::mem::swap(&mut alpha, &mut next);
        }
        let c: f64 = alpha.iter().sum();
        if c <= 0.0 {
            return Ok(ForwardResult {
                log_prob: f64::NEG_INFINITY,
                prob: Some(0.0),
            });
        }
        log += c.ln();
        alpha.iter_mut().for_each(|a| *a /= c);
    }
    let prob = log.exp();
    Ok(ForwardResult {
        log_prob: log,
        prob: (prob.is_normal()).then_some(prob),
    })
}

/// Stationary-free marginal `p(x_t, d_t)` at each of the first `t_len` steps.
pub fn lifted_marginals(p: &HsmmParams, t_len: usize) -> Vec<DVector<f64>> {
    let v = p.lifted_transition();
    let mut cur = p.lifted_initial();
    let mut out = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        out.push(cur.clone());
        cur = &v * cur;
    }
    out
}
