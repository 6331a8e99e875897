//! Dense tensors with labeled modes.
//!
//! A [`NamedTensor`] stores its entries row-major with respect to an ordered
//! list of modes. Every mode carries a [`ModeLabel`]; a mode that appears more
//! than once (a duplicated or hyper-diagonal mode) is told apart by its
//! occurrence tag. Contraction only ever matches labels exactly.

use std::cell::Cell;
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("mode partition is invalid: {0}")]
    InvalidModePartition(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no shared modes: outer products are not supported")]
    OuterProductNotSupported,
    #[error("unknown mode {0}")]
    UnknownMode(ModeLabel),
    #[error("duplicate mode label {0}")]
    DuplicateLabel(ModeLabel),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("every singular value was truncated")]
    RankZero,
    #[error("index {index} out of range for mode {mode} of dimension {dim}")]
    IndexOutOfRange {
        mode: ModeLabel,
        index: usize,
        dim: usize,
    },
    #[error("non-finite entry")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Name of a tensor mode plus an occurrence tag for duplicated modes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModeLabel {
    pub name: String,
    pub occurrence: u8,
}

impl ModeLabel {
    pub fn new(name: &str) -> Self {
        Self::tagged(name, 0)
    }

    pub fn tagged(name: &str, occurrence: u8) -> Self {
        ModeLabel {
            name: name.to_string(),
            occurrence,
        }
    }
}

impl fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.occurrence == 0 {
            write!(f, "{}", self.name)
        } else {
            write!(f, "{}#{}", self.name, self.occurrence)
        }
    }
}

/// Shorthand for [`ModeLabel::new`].
pub fn lbl(name: &str) -> ModeLabel {
    ModeLabel::new(name)
}

/// A labeled mode and its dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mode {
    pub label: ModeLabel,
    pub dim: usize,
}

impl Mode {
    pub fn new(label: ModeLabel, dim: usize) -> Self {
        Mode { label, dim }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub pinv: usize,
    pub contractions: usize,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts { pinv: 0, contractions: 0 }) };
}

/// Pseudo-inverses and contractions performed on this thread so far.
pub fn op_counts() -> OpCounts {
    COUNTS.with(|c| c.get())
}

pub fn reset_op_counts() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

fn bump(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

/// Dense real tensor, row-major over its ordered modes.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    modes: Vec<Mode>,
    data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(modes: Vec<Mode>, data: Vec<f64>) -> Result<Self> {
        check_unique(modes.iter().map(|m| &m.label))?;
        if let Some(m) = modes.iter().find(|m| m.dim == 0) {
            return Err(TensorError::ShapeMismatch(format!(
                "mode {} has dimension 0",
                m.label
            )));
        }
        let len: usize = modes.iter().map(|m| m.dim).product();
        if len != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} entries for shape {:?}",
                data.len(),
                modes.iter().map(|m| m.dim).collect::<Vec<_>>()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(NamedTensor { modes, data })
    }

    pub fn zeros(modes: Vec<Mode>) -> Result<Self> {
        let len = modes.iter().map(|m| m.dim).product();
        Self::new(modes, vec![0.0; len])
    }

    /// Wrap a matrix as a two-mode tensor.
    pub fn from_matrix(row: ModeLabel, col: ModeLabel, m: &DMatrix<f64>) -> Result<Self> {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)]);
            }
        }
        Self::new(vec![Mode::new(row, r), Mode::new(col, c)], data)
    }

    pub fn from_vector(label: ModeLabel, v: &[f64]) -> Result<Self> {
        Self::new(vec![Mode::new(label, v.len())], v.to_vec())
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn labels(&self) -> Vec<ModeLabel> {
        self.modes.iter().map(|m| m.label.clone()).collect()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.modes.iter().map(|m| m.dim).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn position(&self, label: &ModeLabel) -> Option<usize> {
        self.modes.iter().position(|m| &m.label == label)
    }

    pub fn dim(&self, label: &ModeLabel) -> Result<usize> {
        self.position(label)
            .map(|p| self.modes[p].dim)
            .ok_or_else(|| TensorError::UnknownMode(label.clone()))
    }

    fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape())
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let s = self.strides();
        self.data[index.iter().zip(&s).map(|(i, s)| i * s).sum::<usize>()]
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rename one mode.
    pub fn relabel(mut self, from: &ModeLabel, to: ModeLabel) -> Result<Self> {
        let p = self
            .position(from)
            .ok_or_else(|| TensorError::UnknownMode(from.clone()))?;
        self.modes[p].label = to;
        check_unique(self.modes.iter().map(|m| &m.label))?;
        Ok(self)
    }

    /// Reorder modes; `order` must be a permutation of the current labels.
    pub fn permuted(&self, order: &[ModeLabel]) -> Result<Self> {
        if order.len() != self.modes.len() {
            return Err(TensorError::InvalidModePartition(format!(
                "expected {} labels, got {}",
                self.modes.len(),
                order.len()
            )));
        }
        check_unique(order.iter())?;
        let perm: Vec<usize> = order
            .iter()
            .map(|l| {
                self.position(l)
                    .ok_or_else(|| TensorError::InvalidModePartition(format!("unknown mode {l}")))
            })
            .collect::<Result<_>>()?;
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let src_strides = self.strides();
        let new_modes: Vec<Mode> = perm.iter().map(|&p| self.modes[p].clone()).collect();
        let new_shape: Vec<usize> = new_modes.iter().map(|m| m.dim).collect();
        let gather: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; new_shape.len()];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[src]);
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                src += gather[k];
                if idx[k] < new_shape[k] {
                    break;
                }
                src -= gather[k] * idx[k];
                idx[k] = 0;
            }
        }
        Ok(NamedTensor {
            modes: new_modes,
            data: out,
        })
    }

    /// Sum out one mode.
    pub fn sum_over(&self, label: &ModeLabel) -> Result<Self> {
        let p = self
            .position(label)
            .ok_or_else(|| TensorError::UnknownMode(label.clone()))?;
        let shape = self.shape();
        let outer: usize = shape[..p].iter().product();
        let dim = shape[p];
        let inner: usize = shape[p + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for a in 0..outer {
            for k in 0..dim {
                let base = (a * dim + k) * inner;
                for b in 0..inner {
                    out[a * inner + b] += self.data[base + b];
                }
            }
        }
        let mut modes = self.modes.clone();
        modes.remove(p);
        if modes.is_empty() {
            return Err(TensorError::InvalidModePartition(
                "cannot sum out the only mode".into(),
            ));
        }
        Ok(NamedTensor { modes, data: out })
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v *= s);
        self
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

fn check_unique<'a>(labels: impl Iterator<Item = &'a ModeLabel>) -> Result<()> {
    let mut seen: Vec<&ModeLabel> = Vec::new();
    for l in labels {
        if seen.contains(&l) {
            return Err(TensorError::DuplicateLabel(l.clone()));
        }
        seen.push(l);
    }
    Ok(())
}

fn split_modes(t: &NamedTensor, first: &[ModeLabel]) -> Result<(Vec<Mode>, Vec<Mode>)> {
    let mut a = Vec::new();
    for l in first {
        let p = t
            .position(l)
            .ok_or_else(|| TensorError::InvalidModePartition(format!("unknown mode {l}")))?;
        a.push(t.modes[p].clone());
    }
    let rest = t
        .modes
        .iter()
        .filter(|m| !first.contains(&m.label))
        .cloned()
        .collect();
    Ok((a, rest))
}

/// Flatten to a matrix: rows enumerate `rows` row-major, columns enumerate `cols`.
pub fn matricize(t: &NamedTensor, rows: &[ModeLabel], cols: &[ModeLabel]) -> Result<DMatrix<f64>> {
    let order: Vec<ModeLabel> = rows.iter().chain(cols).cloned().collect();
    if order.len() != t.modes.len() {
        return Err(TensorError::InvalidModePartition(format!(
            "{} labels given for a {}-mode tensor",
            order.len(),
            t.modes.len()
        )));
    }
    let p = t.permuted(&order)?;
    let r: usize = p.modes[..rows.len()].iter().map(|m| m.dim).product();
    let c: usize = p.modes[rows.len()..].iter().map(|m| m.dim).product();
    Ok(DMatrix::from_row_slice(r, c, &p.data))
}

/// Inverse of [`matricize`]; the result has modes `rows` followed by `cols`.
pub fn tensorize(m: &DMatrix<f64>, rows: &[Mode], cols: &[Mode]) -> Result<NamedTensor> {
    let r: usize = rows.iter().map(|m| m.dim).product();
    let c: usize = cols.iter().map(|m| m.dim).product();
    if m.shape() != (r, c) {
        return Err(TensorError::ShapeMismatch(format!(
            "matrix {:?} vs modes {r}x{c}",
            m.shape()
        )));
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    NamedTensor::new(rows.iter().chain(cols).cloned().collect(), data)
}

/// Contract `a` and `b` over `shared` (all common labels when `None`).
///
/// Result modes are the free modes of `a` followed by the free modes of `b`.
pub fn mode_product(
    a: &NamedTensor,
    b: &NamedTensor,
    shared: Option<&[ModeLabel]>,
) -> Result<NamedTensor> {
    let shared: Vec<ModeLabel> = match shared {
        Some(s) => s.to_vec(),
        None => a
            .labels()
            .into_iter()
            .filter(|l| b.position(l).is_some())
            .collect(),
    };
    if shared.is_empty() {
        return Err(TensorError::OuterProductNotSupported);
    }
    for l in &shared {
        let da = a.dim(l)?;
        let db = b.dim(l)?;
        if da != db {
            return Err(TensorError::ShapeMismatch(format!(
                "mode {l}: {da} vs {db}"
            )));
        }
    }
    let (sa, free_a) = split_modes(a, &shared)?;
    let (sb, free_b) = split_modes(b, &shared)?;
    debug_assert_eq!(sa, sb);
    let fa: Vec<ModeLabel> = free_a.iter().map(|m| m.label.clone()).collect();
    let fb: Vec<ModeLabel> = free_b.iter().map(|m| m.label.clone()).collect();
    check_unique(fa.iter().chain(&fb))?;
    let ma = matricize(a, &fa, &shared)?;
    let mb = matricize(b, &shared, &fb)?;
    bump(|c| c.contractions += 1);
    let prod = ma * mb;
    let mut modes: Vec<Mode> = free_a;
    modes.extend(free_b);
    if modes.is_empty() {
        return NamedTensor::new(vec![Mode::new(ModeLabel::new("scalar"), 1)], vec![prod[(0, 0)]]);
    }
    let rows = prod.nrows();
    let cols = prod.ncols();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(prod[(i, j)]);
        }
    }
    NamedTensor::new(modes, data)
}

fn next_free_occurrence(taken: &[ModeLabel], name: &str, start: u8) -> u8 {
    let mut occ = start;
    while taken.iter().any(|l| l.name == name && l.occurrence == occ) {
        occ += 1;
    }
    occ
}

/// Embed `mode` as `copies` hyper-diagonal modes placed where `mode` was.
pub fn duplicate_mode(t: &NamedTensor, mode: &ModeLabel, copies: usize) -> Result<NamedTensor> {
    let p = t
        .position(mode)
        .ok_or_else(|| TensorError::UnknownMode(mode.clone()))?;
    if copies < 2 {
        return Err(TensorError::InvalidModePartition(
            "need at least two copies".into(),
        ));
    }
    let dim = t.modes[p].dim;
    let mut taken = t.labels();
    let mut new_labels = vec![mode.clone()];
    for _ in 1..copies {
        let occ = next_free_occurrence(&taken, &mode.name, mode.occurrence + 1);
        let l = ModeLabel::tagged(&mode.name, occ);
        taken.push(l.clone());
        new_labels.push(l);
    }
    let shape = t.shape();
    let outer: usize = shape[..p].iter().product();
    let inner: usize = shape[p + 1..].iter().product();
    // offset of the diagonal element k within the block of duplicated modes
    let diag_step: usize = (0..copies).map(|i| dim.pow(i as u32)).sum();
    let block = dim.pow(copies as u32);
    let mut data = vec![0.0; outer * block * inner];
    for a in 0..outer {
        for k in 0..dim {
            let src = (a * dim + k) * inner;
            let dst = (a * block + k * diag_step) * inner;
            data[dst..dst + inner].copy_from_slice(&t.data[src..src + inner]);
        }
    }
    let mut modes = t.modes[..p].to_vec();
    modes.extend(new_labels.into_iter().map(|l| Mode::new(l, dim)));
    modes.extend_from_slice(&t.modes[p + 1..]);
    NamedTensor::new(modes, data)
}

/// Identity tensor over `modes` followed by a second, occurrence-bumped copy.
pub fn identity_tensor(modes: &[Mode]) -> Result<NamedTensor> {
    let mut taken: Vec<ModeLabel> = modes.iter().map(|m| m.label.clone()).collect();
    let mut second = Vec::new();
    for m in modes {
        let occ = next_free_occurrence(&taken, &m.label.name, m.label.occurrence + 1);
        let l = ModeLabel::tagged(&m.label.name, occ);
        taken.push(l.clone());
        second.push(Mode::new(l, m.dim));
    }
    let n: usize = modes.iter().map(|m| m.dim).product();
    tensorize(&DMatrix::identity(n, n), modes, &second)
}

/// Moore-Penrose pseudo-inverse with singular values below `rtol * sigma_max` dropped.
pub fn pinv(m: &DMatrix<f64>, rtol: f64) -> Result<DMatrix<f64>> {
    pinv_truncated(m, rtol, None)
}

/// [`pinv`] that additionally keeps at most `max_rank` singular values.
pub fn pinv_truncated(m: &DMatrix<f64>, rtol: f64, max_rank: Option<usize>) -> Result<DMatrix<f64>> {
    if rtol.is_nan() || rtol <= 0.0 {
        return Err(TensorError::InvalidTolerance(rtol));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cut = rtol * smax;
    if smax <= 0.0 || !svd.singular_values.iter().any(|&s| s > cut) {
        return Err(TensorError::RankZero);
    }
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let keep = order
        .into_iter()
        .filter(|&k| svd.singular_values[k] > cut)
        .take(max_rank.unwrap_or(usize::MAX));
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for k in keep {
        let s = svd.singular_values[k];
        out += (vt.row(k).transpose() / s) * u.column(k).transpose();
    }
    Ok(out)
}

/// Default truncation for an `m x n` pseudo-inverse.
pub fn default_rtol(m: usize, n: usize) -> f64 {
    m.max(n) as f64 * f64::EPSILON
}

/// Pseudo-inverse with respect to `inv_modes`.
///
/// The tensor is flattened with `inv_modes` as rows; the result carries the
/// remaining modes followed by `inv_modes`, so contracting it with `t` over
/// `inv_modes` gives the identity on the remaining modes when the flattened
/// tensor has full column rank. `rtol = None` uses [`default_rtol`].
pub fn pinv_along(t: &NamedTensor, inv_modes: &[ModeLabel], rtol: Option<f64>) -> Result<NamedTensor> {
    pinv_along_truncated(t, inv_modes, rtol, None)
}

/// [`pinv_along`] keeping at most `max_rank` singular values.
pub fn pinv_along_truncated(
    t: &NamedTensor,
    inv_modes: &[ModeLabel],
    rtol: Option<f64>,
    max_rank: Option<usize>,
) -> Result<NamedTensor> {
    if inv_modes.is_empty() || inv_modes.len() >= t.modes.len() {
        return Err(TensorError::InvalidModePartition(
            "inverted modes must be a nonempty proper subset".into(),
        ));
    }
    let (inv, rest) = split_modes(t, inv_modes)?;
    let rest_labels: Vec<ModeLabel> = rest.iter().map(|m| m.label.clone()).collect();
    let m = matricize(t, inv_modes, &rest_labels)?;
    let rtol = rtol.unwrap_or_else(|| default_rtol(m.nrows(), m.ncols()));
    let p = pinv_truncated(&m, rtol, max_rank)?;
    bump(|c| c.pinv += 1);
    tensorize(&p, &rest, &inv)
}

/// Slice at `index` along `mode`, removing the mode.
pub fn collapse_mode(t: &NamedTensor, mode: &ModeLabel, index: usize) -> Result<NamedTensor> {
    let p = t
        .position(mode)
        .ok_or_else(|| TensorError::UnknownMode(mode.clone()))?;
    let shape = t.shape();
    if index >= shape[p] {
        return Err(TensorError::IndexOutOfRange {
            mode: mode.clone(),
            index,
            dim: shape[p],
        });
    }
    let outer: usize = shape[..p].iter().product();
    let inner: usize = shape[p + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * inner);
    for a in 0..outer {
        let s = (a * shape[p] + index) * inner;
        data.extend_from_slice(&t.data[s..s + inner]);
    }
    let mut modes = t.modes.clone();
    modes.remove(p);
    if modes.is_empty() {
        modes.push(Mode::new(ModeLabel::new("scalar"), 1));
    }
    NamedTensor::new(modes, data)
}

/// Column-wise Khatri-Rao product: column j is `a[:, j] (x) b[:, j]`.
pub fn khatri_rao_cols(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(TensorError::ShapeMismatch(format!(
            "{} vs {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    let (m, k) = (a.nrows(), b.nrows());
    Ok(DMatrix::from_fn(m * k, a.ncols(), |r, c| {
        a[(r / k, c)] * b[(r % k, c)]
    }))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Number of singular values above `rtol * sigma_max`.
pub fn numerical_rank(a: &DMatrix<f64>, rtol: f64) -> usize {
    let s = singular_values(a);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&v| v > rtol * smax).count(),
        _ => 0,
    }
}
