//! File formats.
//!
//! * Model files are JSON with column-stochastic matrices stored as nested
//!   row arrays: `{n_o, n_x, n_d, O, X, D, pi_x}` plus an optional
//!   `duration_prior` table.
//! * Sequence files hold one sequence per line as space-separated symbols;
//!   lines starting with `#` are comments.
//! * Moment sets and observable models share a binary container: a text
//!   header terminated by a line `end`, followed by the tensors' entries as
//!   little-endian `f64`, in header order, each row-major over its listed
//!   modes.
//!
//! ```text
//! HSMMSPEC 1
//! kind observable
//! n_o 3
//! ...
//! tensor d_tilde R:9 R#1:9
//! end
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hsmm::{forward_likelihood, DurationPrior, HsmmParams, ModelError};
use crate::moments::{MomentSet, ObservationSchedule};
use crate::spectral::{
    Evaluator, InferenceResult, ObservableModel, PerAnchorEvaluator, PerAnchorModel, SpectralError,
    Variant,
};
use crate::tensor::{Mode, ModeLabel, NamedTensor, TensorError};

pub const MAGIC: &str = "HSMMSPEC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed container: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

fn format_err(msg: impl Into<String>) -> IoError {
    IoError::Format(msg.into())
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    n_o: usize,
    n_x: usize,
    n_d: usize,
    #[serde(rename = "O")]
    emission: Vec<Vec<f64>>,
    #[serde(rename = "X")]
    transition: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    duration: Vec<Vec<f64>>,
    pi_x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    duration_prior: Option<Vec<Vec<f64>>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(name: &str, r: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>, ModelError> {
    if r.len() != nrows || r.iter().any(|row| row.len() != ncols) {
        return Err(ModelError::ShapeMismatch(format!(
            "{name} must be {nrows}x{ncols} as nested rows"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| r[i][j]))
}

pub fn model_to_json(p: &HsmmParams) -> Result<String, IoError> {
    let f = ModelFile {
        n_o: p.n_o,
        n_x: p.n_x,
        n_d: p.n_d,
        emission: rows(&p.emission),
        transition: rows(&p.transition),
        duration: rows(&p.duration),
        pi_x: p.initial.iter().copied().collect(),
        duration_prior: match &p.duration_prior {
            DurationPrior::FromD => None,
            DurationPrior::Explicit(t) => Some(rows(t)),
        },
    };
    Ok(serde_json::to_string_pretty(&f)?)
}

pub fn model_from_json(s: &str) -> Result<HsmmParams, IoError> {
    let f: ModelFile = serde_json::from_str(s)?;
    let p = HsmmParams::new(
        from_rows("O", &f.emission, f.n_o, f.n_x)?,
        from_rows("X", &f.transition, f.n_x, f.n_x)?,
        from_rows("D", &f.duration, f.n_d, f.n_x)?,
        DVector::from_vec(f.pi_x),
    )?;
    Ok(match f.duration_prior {
        Some(t) => p.with_duration_prior(DurationPrior::Explicit(from_rows("duration_prior", &t, f.n_d, f.n_x)?))?,
        None => p,
    })
}

pub fn save_model(p: &HsmmParams, path: &Path) -> Result<(), IoError> {
    Ok(std::fs::write(path, model_to_json(p)?)?)
}

pub fn load_model(path: &Path) -> Result<HsmmParams, IoError> {
    model_from_json(&std::fs::read_to_string(path)?)
}

/// One line of a sequence file.
#[derive(Debug, Clone, PartialEq)]
pub enum SequenceLine {
    /// 1-based line number and symbols.
    Sequence(usize, Vec<usize>),
    Invalid(usize, String),
}

/// Parse every non-comment line; malformed lines are returned, not fatal.
pub fn parse_sequence_lines<R: BufRead>(input: R) -> impl Iterator<Item = Result<SequenceLine, IoError>> {
    input.lines().enumerate().filter_map(|(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(e.into())),
        };
        let text = line.trim();
        if text.starts_with('#') {
            return None;
        }
        let parsed: Result<Vec<usize>, _> = text.split_whitespace().map(str::parse).collect();
        Some(Ok(match parsed {
            Ok(s) => SequenceLine::Sequence(i + 1, s),
            Err(e) => SequenceLine::Invalid(i + 1, e.to_string()),
        }))
    })
}

/// All sequences of a file; blank lines are skipped and any malformed line is an error.
pub fn read_sequences<R: BufRead>(input: R) -> Result<Vec<Vec<usize>>, IoError> {
    let mut out = Vec::new();
    for line in parse_sequence_lines(input) {
        match line? {
            SequenceLine::Sequence(_, s) if s.is_empty() => {}
            SequenceLine::Sequence(_, s) => out.push(s),
            SequenceLine::Invalid(line, message) => return Err(IoError::Parse { line, message }),
        }
    }
    Ok(out)
}

pub fn load_sequences(path: &Path) -> Result<Vec<Vec<usize>>, IoError> {
    read_sequences(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_sequences<W: Write>(mut out: W, seqs: &[Vec<usize>]) -> Result<(), IoError> {
    for s in seqs {
        let line: Vec<String> = s.iter().map(|o| o.to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Everything the binary container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Moments(MomentSet),
    Observable(ObservableModel),
    PerAnchor(PerAnchorModel),
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

fn schedule_header(h: &mut String, n_o: usize, s: &ObservationSchedule) {
    h.push_str(&format!("n_o {n_o}\nn_x {}\nn_d {}\n", s.n_x, s.n_d));
    h.push_str(&format!("right_offsets {}\n", join(&s.right_offsets)));
    h.push_str(&format!("left_offsets {}\n", join(&s.left_offsets)));
    h.push_str(&format!("span {}\n", s.span));
}

fn tensor_line(h: &mut String, role: &str, t: &NamedTensor) {
    let modes: Vec<String> = t.modes().iter().map(|m| format!("{}:{}", m.label, m.dim)).collect();
    h.push_str(&format!("tensor {role} {}\n", modes.join(" ")));
}

fn observable_parts(m: &ObservableModel) -> [(&'static str, &NamedTensor); 5] {
    [
        ("d_tilde", &m.d_tilde),
        ("x_tilde", &m.x_tilde),
        ("o_tilde", &m.o_tilde),
        ("start_factor", &m.start_factor),
        ("end_factor", &m.end_factor),
    ]
}

fn build_options_header(h: &mut String, m: &ObservableModel) {
    let rtol = m.pinv_rtol.map(|r| r.to_string()).unwrap_or_else(|| "default".into());
    h.push_str(&format!("pinv_rtol {rtol}\nrank_cap {}\n", m.rank_cap));
}

pub fn encode(c: &Container) -> Vec<u8> {
    let mut h = format!("{MAGIC} {VERSION}\n");
    let mut tensors: Vec<&NamedTensor> = Vec::new();
    match c {
        Container::Moments(m) => {
            h.push_str("kind moments\n");
            schedule_header(&mut h, m.n_o, &m.schedule);
            h.push_str(&format!("window_count {}\n", m.window_count));
            for (role, t) in [
                ("m_lr", &m.m_lr),
                ("m_lr_shift", &m.m_lr_shift),
                ("m_lro", &m.m_lro),
                ("m_oo", &m.m_oo),
                ("m_start", &m.m_start),
            ] {
                tensor_line(&mut h, role, t);
                tensors.push(t);
            }
        }
        Container::Observable(m) => {
            h.push_str("kind observable\n");
            schedule_header(&mut h, m.n_o, &m.schedule);
            build_options_header(&mut h, m);
            for (role, t) in observable_parts(m) {
                tensor_line(&mut h, role, t);
                tensors.push(t);
            }
        }
        Container::PerAnchor(pm) => {
            let first = &pm.models[0];
            h.push_str("kind observable-per-anchor\n");
            schedule_header(&mut h, first.n_o, &first.schedule);
            build_options_header(&mut h, first);
            h.push_str(&format!("anchors {} {}\n", pm.first_anchor(), pm.models.len()));
            for (i, m) in pm.models.iter().enumerate() {
                for (role, t) in observable_parts(m) {
                    tensor_line(&mut h, &format!("{role}@{i}"), t);
                    tensors.push(t);
                }
            }
        }
    }
    h.push_str("end\n");
    let mut out = h.into_bytes();
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Header {
    fields: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<Mode>)>,
}

impl Header {
    fn get(&self, key: &str) -> Result<&str, IoError> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| format_err(format!("missing field {key}")))
    }

    fn usize(&self, key: &str) -> Result<usize, IoError> {
        self.get(key)?
            .parse()
            .map_err(|e| format_err(format!("field {key}: {e}")))
    }

    fn usizes(&self, key: &str) -> Result<Vec<usize>, IoError> {
        self.get(key)?
            .split_whitespace()
            .map(|v| v.parse().map_err(|e| format_err(format!("field {key}: {e}"))))
            .collect()
    }

    fn schedule(&self) -> Result<(usize, ObservationSchedule), IoError> {
        let sched = ObservationSchedule::from_right_offsets(
            self.usize("n_x")?,
            self.usize("n_d")?,
            self.usizes("right_offsets")?,
            self.usize("span")?,
        );
        if sched.left_offsets != self.usizes("left_offsets")? {
            return Err(format_err("left offsets do not mirror the right offsets"));
        }
        Ok((self.usize("n_o")?, sched))
    }

    fn build_options(&self) -> Result<(Option<f64>, bool), IoError> {
        let rtol = match self.get("pinv_rtol")? {
            "default" => None,
            v => Some(v.parse().map_err(|e| format_err(format!("pinv_rtol: {e}")))?),
        };
        let cap = self
            .get("rank_cap")?
            .parse()
            .map_err(|e| format_err(format!("rank_cap: {e}")))?;
        Ok((rtol, cap))
    }
}

fn parse_label(s: &str) -> Result<ModeLabel, IoError> {
    match s.split_once('#') {
        None => Ok(ModeLabel::new(s)),
        Some((name, occ)) => Ok(ModeLabel::tagged(
            name,
            occ.parse().map_err(|e| format_err(format!("mode {s}: {e}")))?,
        )),
    }
}

fn parse_header(text: &str) -> Result<Header, IoError> {
    let mut lines = text.lines();
    let magic = lines.next().ok_or_else(|| format_err("empty header"))?;
    if magic != format!("{MAGIC} {VERSION}") {
        return Err(format_err(format!("unsupported magic line {magic:?}")));
    }
    let mut fields = BTreeMap::new();
    let mut tensors = Vec::new();
    for line in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if key == "tensor" {
            let mut parts = rest.split_whitespace();
            let role = parts.next().ok_or_else(|| format_err("tensor line without role"))?;
            let modes = parts
                .map(|m| {
                    let (label, dim) = m
                        .rsplit_once(':')
                        .ok_or_else(|| format_err(format!("mode {m} lacks a dimension")))?;
                    let dim = dim.parse().map_err(|e| format_err(format!("mode {m}: {e}")))?;
                    Ok(Mode::new(parse_label(label)?, dim))
                })
                .collect::<Result<Vec<_>, IoError>>()?;
            tensors.push((role.to_string(), modes));
        } else {
            fields.insert(key.to_string(), rest.to_string());
        }
    }
    Ok(Header { fields, tensors })
}

pub fn decode(bytes: &[u8]) -> Result<Container, IoError> {
    let marker = b"\nend\n";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| format_err("header terminator not found"))?;
    let text = std::str::from_utf8(&bytes[..pos + 1]).map_err(|e| format_err(e.to_string()))?;
    let header = parse_header(text)?;
    let mut payload = &bytes[pos + marker.len()..];
    let mut tensors: BTreeMap<String, NamedTensor> = BTreeMap::new();
    for (role, modes) in &header.tensors {
        let len: usize = modes.iter().map(|m| m.dim).product();
        if payload.len() < len * 8 {
            return Err(format_err(format!("payload too short for {role}")));
        }
        let data = payload[..len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        payload = &payload[len * 8..];
        tensors.insert(role.clone(), NamedTensor::new(modes.clone(), data)?);
    }
    if !payload.is_empty() {
        return Err(format_err(format!("{} trailing bytes", payload.len())));
    }
    let mut take = |role: &str| {
        tensors
            .remove(role)
            .ok_or_else(|| format_err(format!("missing tensor {role}")))
    };
    let (n_o, schedule) = header.schedule()?;
    match header.get("kind")? {
        "moments" => Ok(Container::Moments(MomentSet {
            n_o,
            schedule,
            m_lr: take("m_lr")?,
            m_lr_shift: take("m_lr_shift")?,
            m_lro: take("m_lro")?,
            m_oo: take("m_oo")?,
            m_start: take("m_start")?,
            window_count: header.usize("window_count")?,
        })),
        "observable" => {
            let (pinv_rtol, rank_cap) = header.build_options()?;
            Ok(Container::Observable(ObservableModel {
                n_o,
                schedule,
                d_tilde: take("d_tilde")?,
                x_tilde: take("x_tilde")?,
                o_tilde: take("o_tilde")?,
                start_factor: take("start_factor")?,
                end_factor: take("end_factor")?,
                pinv_rtol,
                rank_cap,
                variant: Variant::Batched,
            }))
        }
        "observable-per-anchor" => {
            let (pinv_rtol, rank_cap) = header.build_options()?;
            let anchors = header.usizes("anchors")?;
            let [first, count] = anchors[..] else {
                return Err(format_err("anchors needs a first anchor and a count"));
            };
            if count == 0 {
                return Err(format_err("no per-anchor models"));
            }
            let models = (0..count)
                .map(|i| {
                    Ok(ObservableModel {
                        n_o,
                        schedule: schedule.clone(),
                        d_tilde: take(&format!("d_tilde@{i}"))?,
                        x_tilde: take(&format!("x_tilde@{i}"))?,
                        o_tilde: take(&format!("o_tilde@{i}"))?,
                        start_factor: take(&format!("start_factor@{i}"))?,
                        end_factor: take(&format!("end_factor@{i}"))?,
                        pinv_rtol,
                        rank_cap,
                        variant: Variant::PerT { anchor: first + i },
                    })
                })
                .collect::<Result<_, IoError>>()?;
            Ok(Container::PerAnchor(PerAnchorModel { models }))
        }
        other => Err(format_err(format!("unknown kind {other}"))),
    }
}

pub fn save_container(c: &Container, path: &Path) -> Result<(), IoError> {
    Ok(std::fs::write(path, encode(c))?)
}

pub fn load_container(path: &Path) -> Result<Container, IoError> {
    decode(&std::fs::read(path)?)
}

/// Anything that assigns a (signed, log-scale) probability to a sequence.
pub enum Scorer {
    Observable(Evaluator),
    PerAnchor(PerAnchorEvaluator),
    Exact(HsmmParams),
}

impl Scorer {
    /// Load a model file of either kind: binary container or model JSON.
    pub fn load(path: &Path) -> Result<Scorer, IoError> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(MAGIC.as_bytes()) {
            match decode(&bytes)? {
                Container::Observable(m) => Ok(Scorer::Observable(m.evaluator()?)),
                Container::PerAnchor(m) => Ok(Scorer::PerAnchor(m.evaluator()?)),
                Container::Moments(_) => Err(format_err("a moments file is not a model")),
            }
        } else {
            let text = String::from_utf8(bytes).map_err(|e| format_err(e.to_string()))?;
            Ok(Scorer::Exact(model_from_json(&text)?))
        }
    }

    pub fn score(&self, obs: &[usize]) -> Result<InferenceResult, ScoreError> {
        match self {
            Scorer::Observable(e) => Ok(e.infer(obs)?),
            Scorer::PerAnchor(e) => Ok(e.infer(obs)?),
            Scorer::Exact(p) => {
                let r = forward_likelihood(p, obs)?;
                Ok(InferenceResult {
                    log_value: r.log_prob,
                    sign: 1,
                    clamped: false,
                })
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ScoreError {
    /// Short variant name for CSV error rows.
    pub fn kind(&self) -> &'static str {
        match self {
            ScoreError::Spectral(SpectralError::SequenceTooShort(_)) => "SequenceTooShort",
            ScoreError::Spectral(SpectralError::UnknownSymbol { .. }) => "UnknownSymbol",
            ScoreError::Model(ModelError::UnknownSymbol { .. }) => "UnknownSymbol",
            ScoreError::Model(ModelError::EmptySequence) => "SequenceTooShort",
            ScoreError::Spectral(_) => "SpectralError",
            ScoreError::Model(_) => "ModelError",
        }
    }
}

pub const SCORE_HEADER: [&str; 5] = ["id", "log_value", "sign", "clamped", "norm_loglik"];

/// Counts of a scoring run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreSummary {
    pub rows: usize,
    pub errors: usize,
}

/// Score every line of `input`, one CSV row per non-comment line. A line
/// that cannot be scored gets `error=<Kind>` in the `log_value` column.
pub fn score_file<R: BufRead, W: Write>(scorer: &Scorer, input: R, output: W) -> Result<ScoreSummary, IoError> {
    let mut w = csv::Writer::from_writer(output);
    let csv_err = |e: csv::Error| IoError::Io(std::io::Error::other(e));
    w.write_record(SCORE_HEADER).map_err(csv_err)?;
    let mut summary = ScoreSummary::default();
    for line in parse_sequence_lines(input) {
        summary.rows += 1;
        let (id, result) = match line? {
            SequenceLine::Sequence(id, obs) => (id, scorer.score(&obs).map(|r| (r, obs.len())).map_err(|e| e.kind())),
            SequenceLine::Invalid(id, _) => (id, Err("ParseError")),
        };
        let record = match result {
            Ok((r, t_len)) => [
                id.to_string(),
                r.log_value.to_string(),
                r.sign.to_string(),
                r.clamped.to_string(),
                (r.log_value / t_len as f64).to_string(),
            ],
            Err(kind) => {
                summary.errors += 1;
                [id.to_string(), format!("error={kind}"), String::new(), String::new(), String::new()]
            }
        };
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(summary)
}
