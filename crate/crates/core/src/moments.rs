//! Observation schedules and moment tensors.
//!
//! A placement is anchored at a gap position `g`. Its left window ends at
//! `g - 1`, its right window starts at `g + 1`, and the shifted right window
//! starts at `g + 2`. Window tuples are flattened row-major in schedule order,
//! so the first scheduled symbol is the most significant digit.
//!
//! Mode labels: `L` and `R` for the left and right windows, `o` and `o#1` for
//! single symbols.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::hsmm::{validate, HsmmParams, ModelError};
use crate::tensor::{lbl, Mode, ModeLabel, NamedTensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentError {
    #[error("no sequence hosts a full placement; minimum length is {min_len}")]
    InsufficientData { min_len: usize },
    #[error("symbol {symbol} outside [0, {n_o})")]
    UnknownSymbol { symbol: usize, n_o: usize },
    #[error("anchor {anchor} outside the valid range for length {t_len}")]
    InvalidAnchor { anchor: usize, t_len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn left() -> ModeLabel {
    lbl("L")
}

pub fn right() -> ModeLabel {
    lbl("R")
}

pub fn sym() -> ModeLabel {
    lbl("o")
}

pub fn sym_next() -> ModeLabel {
    ModeLabel::tagged("o", 1)
}

/// Offsets of the left and right observation windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationSchedule {
    pub n_x: usize,
    pub n_d: usize,
    pub ell: usize,
    pub right_offsets: Vec<usize>,
    pub left_offsets: Vec<usize>,
    pub span: usize,
}

/// Smallest `k` with `n_x^k >= n_d`.
fn log_ceil(n_x: usize, n_d: usize) -> usize {
    let mut k = 0;
    let mut p = 1usize;
    while p < n_d {
        p = p.saturating_mul(n_x);
        k += 1;
    }
    k
}

/// Logarithmically spaced windows spanning `n_d` steps.
///
/// Offset `i` sits `n_x^i - 1` steps before the far end of the window,
/// clamped to the window start, which keeps the conditional window table at
/// full column rank `n_x n_d` with only `1 + ceil(log n_d / log n_x)` symbols.
pub fn build_schedule(n_x: usize, n_d: usize) -> ObservationSchedule {
    assert!(n_x >= 1 && n_d >= 1, "dimensions must be positive");
    let span = n_d;
    let right_offsets: Vec<usize> = if n_x == 1 {
        (0..n_d).collect()
    } else {
        let ell = 1 + log_ceil(n_x, n_d);
        let mut v: Vec<usize> = (0..ell)
            .map(|i| {
                let back = n_x.saturating_pow(i as u32).saturating_sub(1);
                (n_d - 1).saturating_sub(back)
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    ObservationSchedule::from_right_offsets(n_x, n_d, right_offsets, span)
}

impl ObservationSchedule {
    /// Schedule with explicit right offsets; the left window mirrors them.
    pub fn from_right_offsets(n_x: usize, n_d: usize, right_offsets: Vec<usize>, span: usize) -> Self {
        let mut left_offsets: Vec<usize> = right_offsets.iter().map(|r| span - 1 - r).collect();
        left_offsets.sort_unstable();
        ObservationSchedule {
            n_x,
            n_d,
            ell: right_offsets.len(),
            right_offsets,
            left_offsets,
            span,
        }
    }

    /// Number of distinct window tuples, `n_o^ell`.
    pub fn window_dim(&self, n_o: usize) -> usize {
        n_o.pow(self.ell as u32)
    }

    /// Shortest sequence hosting one full placement.
    pub fn min_len(&self) -> usize {
        2 * self.span + 2
    }

    /// Shortest sequence hosting the start-of-sequence window.
    pub fn min_start_len(&self) -> usize {
        self.span + 2
    }

    /// Valid gap positions for a sequence of length `t_len`.
    pub fn anchors(&self, t_len: usize) -> std::ops::Range<usize> {
        if t_len < self.min_len() {
            return 0..0;
        }
        self.span..t_len - self.span - 1
    }

    pub fn left_positions(&self, g: usize) -> impl Iterator<Item = usize> + '_ {
        self.left_offsets.iter().map(move |l| g - self.span + l)
    }

    pub fn right_positions(&self, start: usize) -> impl Iterator<Item = usize> + '_ {
        self.right_offsets.iter().map(move |r| start + r)
    }
}

fn window_index(seq: &[usize], positions: impl Iterator<Item = usize>, n_o: usize) -> usize {
    positions.fold(0, |acc, p| acc * n_o + seq[p])
}

/// Averaged co-occurrence tables pooled over placements.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub n_o: usize,
    pub schedule: ObservationSchedule,
    /// `(L, R)`, right window starting one after the gap.
    pub m_lr: NamedTensor,
    /// `(L, R)`, right window starting two after the gap.
    pub m_lr_shift: NamedTensor,
    /// `(L, o, R)` with `o` the symbol at the gap.
    pub m_lro: NamedTensor,
    /// `(o, o#1)`, adjacent pairs.
    pub m_oo: NamedTensor,
    /// `(o, o#1, R)`: first two symbols and the window starting at position 2.
    pub m_start: NamedTensor,
    pub window_count: usize,
}

struct Counts {
    lr: Vec<u64>,
    shift: Vec<u64>,
    lro: Vec<u64>,
    oo: Vec<u64>,
    start: Vec<u64>,
    windows: u64,
    pairs: u64,
    starts: u64,
}

impl Counts {
    fn new(k: usize, n_o: usize) -> Self {
        Counts {
            lr: vec![0; k * k],
            shift: vec![0; k * k],
            lro: vec![0; k * n_o * k],
            oo: vec![0; n_o * n_o],
            start: vec![0; n_o * n_o * k],
            windows: 0,
            pairs: 0,
            starts: 0,
        }
    }

    fn merge(mut self, other: Counts) -> Counts {
        let add = |a: &mut Vec<u64>, b: &[u64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.lr, &other.lr);
        add(&mut self.shift, &other.shift);
        add(&mut self.lro, &other.lro);
        add(&mut self.oo, &other.oo);
        add(&mut self.start, &other.start);
        self.windows += other.windows;
        self.pairs += other.pairs;
        self.starts += other.starts;
        self
    }

    fn add_placement(&mut self, seq: &[usize], sched: &ObservationSchedule, n_o: usize, g: usize) {
        let k = sched.window_dim(n_o);
        let l = window_index(seq, sched.left_positions(g), n_o);
        let r = window_index(seq, sched.right_positions(g + 1), n_o);
        let rs = window_index(seq, sched.right_positions(g + 2), n_o);
        self.lr[l * k + r] += 1;
        self.shift[l * k + rs] += 1;
        self.lro[(l * n_o + seq[g]) * k + r] += 1;
        self.windows += 1;
    }

    fn add_pair(&mut self, seq: &[usize], n_o: usize, t: usize) {
        self.oo[seq[t] * n_o + seq[t + 1]] += 1;
        self.pairs += 1;
    }

    fn add_start(&mut self, seq: &[usize], sched: &ObservationSchedule, n_o: usize) {
        let k = sched.window_dim(n_o);
        let r = window_index(seq, sched.right_positions(2), n_o);
        self.start[(seq[0] * n_o + seq[1]) * k + r] += 1;
        self.starts += 1;
    }

    fn into_moments(self, sched: &ObservationSchedule, n_o: usize) -> Result<MomentSet, MomentError> {
        if self.windows == 0 || self.starts == 0 {
            return Err(MomentError::InsufficientData {
                min_len: sched.min_len(),
            });
        }
        let k = sched.window_dim(n_o);
        let norm = |c: Vec<u64>, n: u64| c.into_iter().map(|v| v as f64 / n as f64).collect();
        let m = |modes: Vec<Mode>, c: Vec<u64>, n: u64| NamedTensor::new(modes, norm(c, n));
        Ok(MomentSet {
            n_o,
            schedule: sched.clone(),
            m_lr: m(vec![Mode::new(left(), k), Mode::new(right(), k)], self.lr, self.windows)?,
            m_lr_shift: m(
                vec![Mode::new(left(), k), Mode::new(right(), k)],
                self.shift,
                self.windows,
            )?,
            m_lro: m(
                vec![Mode::new(left(), k), Mode::new(sym(), n_o), Mode::new(right(), k)],
                self.lro,
                self.windows,
            )?,
            m_oo: m(
                vec![Mode::new(sym(), n_o), Mode::new(sym_next(), n_o)],
                self.oo,
                self.pairs,
            )?,
            m_start: m(
                vec![
                    Mode::new(sym(), n_o),
                    Mode::new(sym_next(), n_o),
                    Mode::new(right(), k),
                ],
                self.start,
                self.starts,
            )?,
            window_count: self.windows as usize,
        })
    }
}

fn check_symbols(sequences: &[Vec<usize>], n_o: usize) -> Result<(), MomentError> {
    for s in sequences {
        if let Some(&bad) = s.iter().find(|&&o| o >= n_o) {
            return Err(MomentError::UnknownSymbol { symbol: bad, n_o });
        }
    }
    Ok(())
}

/// Count every valid placement in every sequence and average.
pub fn estimate_moments(
    sequences: &[Vec<usize>],
    sched: &ObservationSchedule,
    n_o: usize,
) -> Result<MomentSet, MomentError> {
    check_symbols(sequences, n_o)?;
    let k = sched.window_dim(n_o);
    let counts = sequences
        .par_iter()
        .fold(
            || Counts::new(k, n_o),
            |mut c, seq| {
                for g in sched.anchors(seq.len()) {
                    c.add_placement(seq, sched, n_o, g);
                }
                for t in 0..seq.len().saturating_sub(1) {
                    c.add_pair(seq, n_o, t);
                }
                if seq.len() >= sched.min_start_len() {
                    c.add_start(seq, sched, n_o);
                }
                c
            },
        )
        .reduce(|| Counts::new(k, n_o), Counts::merge);
    counts.into_moments(sched, n_o)
}

/// Moments of a single anchor: placement at gap `g` and the pair `(g, g + 1)`.
pub fn estimate_moments_at(
    sequences: &[Vec<usize>],
    sched: &ObservationSchedule,
    n_o: usize,
    g: usize,
) -> Result<MomentSet, MomentError> {
    check_symbols(sequences, n_o)?;
    let k = sched.window_dim(n_o);
    let mut c = Counts::new(k, n_o);
    for seq in sequences {
        if sched.anchors(seq.len()).contains(&g) {
            c.add_placement(seq, sched, n_o, g);
            c.add_pair(seq, n_o, g);
        }
        if seq.len() >= sched.min_start_len() {
            c.add_start(seq, sched, n_o);
        }
    }
    c.into_moments(sched, n_o)
}

/// Exact conditional and marginal tables behind the population moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticFactorContext {
    /// `(R, z)`: window starting one step after the lifted state `z`.
    pub f_right: NamedTensor,
    /// `(L, z)`: window ending one step before `z`, pooled over anchors.
    pub f_left: NamedTensor,
    /// `p(z)` at each pooled anchor, in anchor order.
    pub k_marginals: Vec<NamedTensor>,
}

pub fn lifted_label() -> ModeLabel {
    lbl("z")
}

/// `p(o at start + offsets | z at time 0)`, rows flattened in offset order.
pub fn window_given_state(p: &HsmmParams, offsets: &[usize], start: usize) -> DMatrix<f64> {
    let s = p.n_lifted();
    let v = p.lifted_transition();
    let ol = p.lifted_emission();
    let last = start + offsets.iter().copied().max().unwrap_or(0);
    // one block per emitted prefix: rows current state, columns initial state
    let mut blocks = vec![DMatrix::<f64>::identity(s, s)];
    for tau in 0..=last {
        if tau > 0 {
            for b in blocks.iter_mut() {
                *b = &v * &*b;
            }
        }
        if tau >= start && offsets.contains(&(tau - start)) {
            blocks = blocks
                .iter()
                .flat_map(|b| {
                    (0..p.n_o).map(|o| {
                        let mut e = b.clone();
                        for (z, mut row) in e.row_iter_mut().enumerate() {
                            row *= ol[(o, z)];
                        }
                        e
                    })
                })
                .collect();
        }
    }
    let mut out = DMatrix::zeros(blocks.len(), s);
    for (i, b) in blocks.iter().enumerate() {
        for z0 in 0..s {
            out[(i, z0)] = b.column(z0).sum();
        }
    }
    out
}

/// `p(o at positions, z at time end)` from the model's initial distribution.
pub fn window_joint_forward(p: &HsmmParams, positions: &[usize], end: usize) -> DMatrix<f64> {
    let v = p.lifted_transition();
    let ol = p.lifted_emission();
    let mut blocks = vec![p.lifted_initial()];
    for tau in 0..=end {
        if tau > 0 {
            for b in blocks.iter_mut() {
                *b = &v * &*b;
            }
        }
        if positions.contains(&tau) {
            blocks = blocks
                .iter()
                .flat_map(|b| {
                    (0..p.n_o).map(|o| {
                        DVector::from_fn(b.len(), |z, _| b[z] * ol[(o, z)])
                    })
                })
                .collect();
        }
    }
    let s = p.n_lifted();
    DMatrix::from_fn(blocks.len(), s, |i, z| blocks[i][z])
}

struct AnchorParts {
    joint_left: DMatrix<f64>,
    marginal: DVector<f64>,
}

fn anchor_parts(p: &HsmmParams, sched: &ObservationSchedule, g: usize) -> AnchorParts {
    let positions: Vec<usize> = sched.left_positions(g).collect();
    let joint_left = window_joint_forward(p, &positions, g);
    let marginal = DVector::from_fn(p.n_lifted(), |z, _| joint_left.column(z).sum());
    AnchorParts {
        joint_left,
        marginal,
    }
}

struct PopulationTables {
    right: DMatrix<f64>,
    right_shift: DMatrix<f64>,
    emission: DMatrix<f64>,
}

impl PopulationTables {
    fn new(p: &HsmmParams, sched: &ObservationSchedule) -> Self {
        let right = window_given_state(p, &sched.right_offsets, 1);
        let right_shift = &right * p.lifted_transition();
        PopulationTables {
            right,
            right_shift,
            emission: p.lifted_emission(),
        }
    }

    /// Unnormalized placement tables for one anchor.
    fn placement(&self, parts: &AnchorParts, n_o: usize) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
        let j = &parts.joint_left;
        let lr = j * self.right.transpose();
        let shift = j * self.right_shift.transpose();
        let k = self.right.nrows();
        let mut lro = vec![0.0; j.nrows() * n_o * k];
        for o in 0..n_o {
            let mut jo = j.clone();
            for (z, mut col) in jo.column_iter_mut().enumerate() {
                col *= self.emission[(o, z)];
            }
            let block = jo * self.right.transpose();
            for l in 0..j.nrows() {
                for r in 0..k {
                    lro[(l * n_o + o) * k + r] = block[(l, r)];
                }
            }
        }
        (lr, shift, lro)
    }
}

fn matrix_tensor(a: ModeLabel, b: ModeLabel, m: &DMatrix<f64>) -> Result<NamedTensor, TensorError> {
    NamedTensor::from_matrix(a, b, m)
}

fn start_and_pairs(
    p: &HsmmParams,
    tables: &PopulationTables,
    t_len: usize,
) -> Result<(NamedTensor, NamedTensor), TensorError> {
    let n_o = p.n_o;
    let k = tables.right.nrows();
    let joint01 = window_joint_forward(p, &[0, 1], 1);
    let start = &joint01 * tables.right.transpose();
    let mut m_start = vec![0.0; n_o * n_o * k];
    for a in 0..n_o * n_o {
        for r in 0..k {
            m_start[a * k + r] = start[(a, r)];
        }
    }
    let v = p.lifted_transition();
    let next = &tables.emission * &v;
    let mut oo = DMatrix::zeros(n_o, n_o);
    let marginals = crate::hsmm::lifted_marginals(p, t_len - 1);
    for mu in &marginals {
        let mut weighted = tables.emission.clone();
        for (z, mut col) in weighted.column_iter_mut().enumerate() {
            col *= mu[z];
        }
        oo += weighted * next.transpose();
    }
    oo /= marginals.len() as f64;
    let m_start = NamedTensor::new(
        vec![
            Mode::new(sym(), n_o),
            Mode::new(sym_next(), n_o),
            Mode::new(right(), k),
        ],
        m_start,
    )?;
    Ok((m_start, matrix_tensor(sym(), sym_next(), &oo)?))
}

/// Population moments pooled over exactly the anchors a length-`t_len`
/// sequence offers, plus the factors they are built from.
pub fn analytic_moments(
    p: &HsmmParams,
    sched: &ObservationSchedule,
    t_len: usize,
) -> Result<(MomentSet, AnalyticFactorContext), MomentError> {
    validate(p, 1e-10)?.into_result()?;
    let anchors: Vec<usize> = sched.anchors(t_len).collect();
    if anchors.is_empty() {
        return Err(MomentError::InsufficientData {
            min_len: sched.min_len(),
        });
    }
    let n_o = p.n_o;
    let k = sched.window_dim(n_o);
    let tables = PopulationTables::new(p, sched);
    let parts: Vec<AnchorParts> = anchors.iter().map(|&g| anchor_parts(p, sched, g)).collect();
    let n = anchors.len() as f64;
    let mut lr = DMatrix::zeros(k, k);
    let mut shift = DMatrix::zeros(k, k);
    let mut lro = vec![0.0; k * n_o * k];
    for part in &parts {
        let (a, b, c) = tables.placement(part, n_o);
        lr += a;
        shift += b;
        lro.iter_mut().zip(c).for_each(|(x, y)| *x += y);
    }
    lr /= n;
    shift /= n;
    lro.iter_mut().for_each(|x| *x /= n);
    let (m_start, m_oo) = start_and_pairs(p, &tables, t_len)?;
    let moments = MomentSet {
        n_o,
        schedule: sched.clone(),
        m_lr: matrix_tensor(left(), right(), &lr)?,
        m_lr_shift: matrix_tensor(left(), right(), &shift)?,
        m_lro: NamedTensor::new(
            vec![Mode::new(left(), k), Mode::new(sym(), n_o), Mode::new(right(), k)],
            lro,
        )?,
        m_oo,
        m_start,
        window_count: anchors.len(),
    };

    let s = p.n_lifted();
    let mut joint = DMatrix::zeros(k, s);
    let mut kbar = DVector::zeros(s);
    for part in &parts {
        joint += &part.joint_left;
        kbar += &part.marginal;
    }
    for z in 0..s {
        if kbar[z] > 0.0 {
            let c = kbar[z];
            joint.column_mut(z).scale_mut(1.0 / c);
        }
    }
    let context = AnalyticFactorContext {
        f_right: matrix_tensor(right(), lifted_label(), &tables.right)?,
        f_left: matrix_tensor(left(), lifted_label(), &joint)?,
        k_marginals: parts
            .iter()
            .map(|part| NamedTensor::from_vector(lifted_label(), part.marginal.as_slice()))
            .collect::<Result<_, _>>()?,
    };
    Ok((moments, context))
}

/// Population moments of each single anchor, in anchor order.
pub fn analytic_moments_per_anchor(
    p: &HsmmParams,
    sched: &ObservationSchedule,
    t_len: usize,
) -> Result<Vec<MomentSet>, MomentError> {
    validate(p, 1e-10)?.into_result()?;
    let anchors: Vec<usize> = sched.anchors(t_len).collect();
    if anchors.is_empty() {
        return Err(MomentError::InsufficientData {
            min_len: sched.min_len(),
        });
    }
    let n_o = p.n_o;
    let k = sched.window_dim(n_o);
    let tables = PopulationTables::new(p, sched);
    let (m_start, _) = start_and_pairs(p, &tables, t_len)?;
    let v = p.lifted_transition();
    let next = &tables.emission * &v;
    anchors
        .iter()
        .map(|&g| {
            let part = anchor_parts(p, sched, g);
            let (lr, shift, lro) = tables.placement(&part, n_o);
            let mut weighted = tables.emission.clone();
            for (z, mut col) in weighted.column_iter_mut().enumerate() {
                col *= part.marginal[z];
            }
            let oo = weighted * next.transpose();
            Ok(MomentSet {
                n_o,
                schedule: sched.clone(),
                m_lr: matrix_tensor(left(), right(), &lr)?,
                m_lr_shift: matrix_tensor(left(), right(), &shift)?,
                m_lro: NamedTensor::new(
                    vec![Mode::new(left(), k), Mode::new(sym(), n_o), Mode::new(right(), k)],
                    lro,
                )?,
                m_oo: matrix_tensor(sym(), sym_next(), &oo)?,
                m_start: m_start.clone(),
                window_count: 1,
            })
        })
        .collect()
}
