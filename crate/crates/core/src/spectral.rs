//! Observable representation of an HSMM and sequence-probability inference.
//!
//! The learned operators act on vectors indexed by right-window tuples:
//!
//! * `d_tilde` `(R, R#1)` advances the latent chain one step without emitting,
//! * `x_tilde` `(R, o, R#1)` emits the symbol at the current step,
//! * `o_tilde` `(o, o#1)` maps an observed symbol (`o#1`) onto the emission mode,
//! * `start_factor` `(o, o#1, R)` covers the first two symbols,
//! * `end_factor` `(R, o)` covers the last symbol.
//!
//! A sequence probability is `start[o_1, o_2] · Π_t (D X_{o_t}) · D e_{o_T}`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::moments::{
    estimate_moments_at, left, right, sym, sym_next, MomentError, MomentSet, ObservationSchedule,
};
use crate::tensor::{
    matricize, mode_product, numerical_rank, pinv_along_truncated, ModeLabel, NamedTensor, TensorError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("degenerate moments: {tensor}{}", anchor.map(|a| format!(" at anchor {a}")).unwrap_or_default())]
    DegenerateMoments {
        tensor: &'static str,
        anchor: Option<usize>,
    },
    #[error("sequence of length {0} is too short; at least 3 symbols are needed")]
    SequenceTooShort(usize),
    #[error("symbol {symbol} at position {position} is outside [0, {n_o})")]
    UnknownSymbol {
        symbol: usize,
        position: usize,
        n_o: usize,
    },
    #[error(transparent)]
    Moments(#[from] MomentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn right_out() -> ModeLabel {
    ModeLabel::tagged("R", 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Batched,
    PerT { anchor: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservableModel {
    pub n_o: usize,
    pub schedule: ObservationSchedule,
    pub d_tilde: NamedTensor,
    pub x_tilde: NamedTensor,
    pub o_tilde: NamedTensor,
    pub start_factor: NamedTensor,
    pub end_factor: NamedTensor,
    /// `None` means the size-dependent default.
    pub pinv_rtol: Option<f64>,
    pub rank_cap: bool,
    pub variant: Variant,
}

/// Signed log-magnitude of an estimated probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceResult {
    pub log_value: f64,
    pub sign: i8,
    /// Set when the estimate was not positive, so `log_value` is not a log-probability.
    pub clamped: bool,
}

impl InferenceResult {
    /// The signed estimate itself (may underflow to zero).
    pub fn value(&self) -> f64 {
        self.sign as f64 * self.log_value.exp()
    }
}

fn degenerate(tensor: &'static str, anchor: Option<usize>) -> impl Fn(TensorError) -> SpectralError {
    move |e| match e {
        TensorError::RankZero => SpectralError::DegenerateMoments { tensor, anchor },
        other => SpectralError::Tensor(other),
    }
}

fn require_rank(
    t: &NamedTensor,
    rows: &[ModeLabel],
    cols: &[ModeLabel],
    need: usize,
    rtol: Option<f64>,
    tensor: &'static str,
    anchor: Option<usize>,
) -> Result<(), SpectralError> {
    let m = matricize(t, rows, cols)?;
    let rtol = rtol.unwrap_or_else(|| crate::tensor::default_rtol(m.nrows(), m.ncols()));
    if numerical_rank(&m, rtol) < need {
        return Err(SpectralError::DegenerateMoments { tensor, anchor });
    }
    Ok(())
}

/// Observable operators from pooled (or single-anchor) moments.
///
/// Each operator is the pseudo-inverse of a moment table along its left
/// window contracted with a second table that shares the same left window.
pub fn build_observable(m: &MomentSet, rtol: Option<f64>) -> Result<ObservableModel, SpectralError> {
    build_observable_with(m, BuildOptions { rtol, ..Default::default() })
}

/// Pseudo-inverse policy for [`build_observable_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    /// Relative singular-value cutoff; `None` is the size-dependent default.
    pub rtol: Option<f64>,
    /// Keep at most the population rank (`n_x n_d` for window tables,
    /// `n_x` for symbol pairs) when inverting.
    pub rank_cap: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            rtol: None,
            rank_cap: true,
        }
    }
}

pub fn build_observable_with(m: &MomentSet, opts: BuildOptions) -> Result<ObservableModel, SpectralError> {
    build_observable_inner(m, opts, None)
}

fn build_observable_inner(
    m: &MomentSet,
    opts: BuildOptions,
    anchor: Option<usize>,
) -> Result<ObservableModel, SpectralError> {
    let sched = &m.schedule;
    let rtol = opts.rtol;
    let lifted = sched.n_x * sched.n_d;
    let cap_lr = opts.rank_cap.then_some(lifted);
    let cap_oo = opts.rank_cap.then_some(sched.n_x);
    require_rank(&m.m_lr, &[left()], &[right()], lifted, rtol, "m_lr", anchor)?;
    require_rank(&m.m_oo, &[sym()], &[sym_next()], sched.n_x, rtol, "m_oo", anchor)?;

    let shift = m.m_lr_shift.clone().relabel(&right(), right_out())?;
    let inv = pinv_along_truncated(&m.m_lr, &[left()], rtol, cap_lr).map_err(degenerate("m_lr", anchor))?;
    let d_tilde = mode_product(&inv, &shift, Some(&[left()]))?;

    let lro = m.m_lro.clone().relabel(&right(), right_out())?;
    let inv = pinv_along_truncated(&m.m_lr, &[left()], rtol, cap_lr).map_err(degenerate("m_lr", anchor))?;
    let x_tilde = mode_product(&inv, &lro, Some(&[left()]))?;

    // inverse side contracts with the emission mode, data side is observed
    let tmp = ModeLabel::tagged("o", 2);
    let inv = pinv_along_truncated(&m.m_oo, &[sym_next()], rtol, cap_oo)
        .map_err(degenerate("m_oo", anchor))?
        .relabel(&sym(), tmp.clone())?;
    let o_tilde = mode_product(&inv, &m.m_oo, Some(&[sym_next()]))?
        .relabel(&sym(), sym_next())?
        .relabel(&tmp, sym())?;

    let end_factor = x_tilde.sum_over(&right_out())?;
    Ok(ObservableModel {
        n_o: m.n_o,
        schedule: sched.clone(),
        d_tilde,
        x_tilde,
        o_tilde,
        start_factor: m.m_start.clone(),
        end_factor,
        pinv_rtol: rtol,
        rank_cap: opts.rank_cap,
        variant: match anchor {
            Some(a) => Variant::PerT { anchor: a },
            None => Variant::Batched,
        },
    })
}

/// One observable model per anchor, each from that anchor's own moments.
#[derive(Debug, Clone, PartialEq)]
pub struct PerAnchorModel {
    pub models: Vec<ObservableModel>,
}

impl PerAnchorModel {
    pub fn first_anchor(&self) -> usize {
        match self.models[0].variant {
            Variant::PerT { anchor } => anchor,
            Variant::Batched => 0,
        }
    }
}

/// Per-anchor models over the anchors of the shortest training sequence.
pub fn build_observable_per_t(
    sequences: &[Vec<usize>],
    sched: &ObservationSchedule,
    n_o: usize,
    opts: BuildOptions,
) -> Result<PerAnchorModel, SpectralError> {
    let t_min = sequences.iter().map(|s| s.len()).min().unwrap_or(0);
    let anchors: Vec<usize> = sched.anchors(t_min).collect();
    if anchors.is_empty() {
        return Err(MomentError::InsufficientData {
            min_len: sched.min_len(),
        }
        .into());
    }
    let models = anchors
        .par_iter()
        .map(|&g| {
            let m = estimate_moments_at(sequences, sched, n_o, g)?;
            build_observable_inner(&m, opts, Some(g))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PerAnchorModel { models })
}

/// Per-anchor models from a list of per-anchor moment sets starting at `first_anchor`.
pub fn build_observable_from_anchor_moments(
    moments: &[MomentSet],
    first_anchor: usize,
    opts: BuildOptions,
) -> Result<PerAnchorModel, SpectralError> {
    let models = moments
        .iter()
        .enumerate()
        .map(|(i, m)| build_observable_inner(m, opts, Some(first_anchor + i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PerAnchorModel { models })
}

/// Dense per-symbol operators prepared for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Evaluator {
    n_o: usize,
    /// `start[o1 * n_o + o2]`, row vector over `R`.
    start: Vec<DVector<f64>>,
    /// Per-step operator `D · X_o`, one per symbol.
    step: Vec<DMatrix<f64>>,
    /// Final functional `D · e_o`, one per symbol.
    finish: Vec<DVector<f64>>,
}

impl ObservableModel {
    pub fn window_dim(&self) -> usize {
        self.schedule.window_dim(self.n_o)
    }

    pub fn evaluator(&self) -> Result<Evaluator, SpectralError> {
        let n_o = self.n_o;
        let k = self.window_dim();
        let d = matricize(&self.d_tilde, &[right()], &[right_out()])?;
        // contract the emission mode with o_tilde, leaving the observed symbol
        let xo = mode_product(&self.x_tilde, &self.o_tilde, Some(&[sym()]))?;
        let eo = mode_product(&self.end_factor, &self.o_tilde, Some(&[sym()]))?;
        let xo = xo.permuted(&[sym_next(), right(), right_out()])?;
        let eo = eo.permuted(&[sym_next(), right()])?;
        let step = (0..n_o)
            .map(|o| {
                let block = &xo.data()[o * k * k..(o + 1) * k * k];
                &d * DMatrix::from_row_slice(k, k, block)
            })
            .collect();
        let finish = (0..n_o)
            .map(|o| &d * DVector::from_column_slice(&eo.data()[o * k..(o + 1) * k]))
            .collect();
        let start = (0..n_o * n_o)
            .map(|a| DVector::from_column_slice(&self.start_factor.data()[a * k..(a + 1) * k]))
            .collect();
        Ok(Evaluator {
            n_o,
            start,
            step,
            finish,
        })
    }
}

fn check_sequence(obs: &[usize], n_o: usize) -> Result<(), SpectralError> {
    if let Some(position) = obs.iter().position(|&o| o >= n_o) {
        return Err(SpectralError::UnknownSymbol {
            symbol: obs[position],
            position,
            n_o,
        });
    }
    if obs.len() < 3 {
        return Err(SpectralError::SequenceTooShort(obs.len()));
    }
    Ok(())
}

fn finish_result(s: f64, log_scale: f64) -> InferenceResult {
    if s == 0.0 {
        return InferenceResult {
            log_value: f64::MIN_POSITIVE.ln() + log_scale,
            sign: 0,
            clamped: true,
        };
    }
    InferenceResult {
        log_value: s.abs().ln() + log_scale,
        sign: if s > 0.0 { 1 } else { -1 },
        clamped: s < 0.0,
    }
}

/// Rescale `v` to unit L1 norm, returning the log of the removed factor.
fn renormalize(v: &mut DVector<f64>) -> f64 {
    let n = v.iter().map(|x| x.abs()).sum::<f64>();
    if n > 0.0 && n.is_finite() {
        *v /= n;
        n.ln()
    } else {
        0.0
    }
}

impl Evaluator {
    /// Left-to-right evaluation with per-step renormalization.
    pub fn infer(&self, obs: &[usize]) -> Result<InferenceResult, SpectralError> {
        self.infer_with(obs, true)
    }

    pub fn infer_with(&self, obs: &[usize], normalize: bool) -> Result<InferenceResult, SpectralError> {
        self.infer_steps(obs, normalize, |_| self)
    }

    fn infer_steps<'a>(
        &'a self,
        obs: &[usize],
        normalize: bool,
        at: impl Fn(usize) -> &'a Evaluator,
    ) -> Result<InferenceResult, SpectralError> {
        check_sequence(obs, self.n_o)?;
        let t_len = obs.len();
        let mut v = self.start[obs[0] * self.n_o + obs[1]].clone();
        let mut log_scale = 0.0;
        if normalize {
            log_scale += renormalize(&mut v);
        }
        for (t, &o) in obs.iter().enumerate().take(t_len - 1).skip(2) {
            v = at(t).step[o].tr_mul(&v);
            if normalize {
                log_scale += renormalize(&mut v);
            }
        }
        let s = v.dot(&at(t_len - 1).finish[obs[t_len - 1]]);
        Ok(finish_result(s, log_scale))
    }

    /// Right-to-left accumulation without rescaling, for short sequences.
    pub fn infer_right_to_left(&self, obs: &[usize]) -> Result<InferenceResult, SpectralError> {
        check_sequence(obs, self.n_o)?;
        let t_len = obs.len();
        let mut w = self.finish[obs[t_len - 1]].clone();
        for &o in obs[2..t_len - 1].iter().rev() {
            w = &self.step[o] * w;
        }
        let s = self.start[obs[0] * self.n_o + obs[1]].dot(&w);
        Ok(finish_result(s, 0.0))
    }
}

/// Estimate the probability of `obs`.
pub fn infer(model: &ObservableModel, obs: &[usize]) -> Result<InferenceResult, SpectralError> {
    model.evaluator()?.infer(obs)
}

/// Evaluator for per-anchor models: step `t` uses the anchor nearest to `t`.
pub struct PerAnchorEvaluator {
    first: usize,
    evaluators: Vec<Evaluator>,
}

impl PerAnchorModel {
    pub fn evaluator(&self) -> Result<PerAnchorEvaluator, SpectralError> {
        Ok(PerAnchorEvaluator {
            first: self.first_anchor(),
            evaluators: self
                .models
                .iter()
                .map(|m| m.evaluator())
                .collect::<Result<_, _>>()?,
        })
    }
}

impl PerAnchorEvaluator {
    pub fn infer(&self, obs: &[usize]) -> Result<InferenceResult, SpectralError> {
        let last = self.evaluators.len() - 1;
        self.evaluators[0].infer_steps(obs, true, |t| {
            &self.evaluators[t.saturating_sub(self.first).min(last)]
        })
    }
}
