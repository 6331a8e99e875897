//! Synthetic benchmark: likelihood accuracy and wall-clock of the spectral
//! learner against EM as the training set grows.
//!
//! For every model size and seed a ground-truth model and a test set are
//! drawn; for every training size a fresh training set is drawn. Accuracy is
//! the relative deviation `|p_hat - p| / p` of each test-sequence estimate
//! from the true likelihood, computed on the raw signed estimate, and
//! summarized as a root mean square per seed.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::em::{em_fit, EmConfig, EmError};
use crate::hsmm::{forward_likelihood, random_model, sample_many, HsmmParams, ModelError};
use crate::moments::{build_schedule, estimate_moments};
use crate::spectral::{build_observable_with, BuildOptions, InferenceResult, SpectralError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Em(#[from] EmError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Model dimensions `(n_o, n_x, n_d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSize {
    pub n_o: usize,
    pub n_x: usize,
    pub n_d: usize,
}

impl ModelSize {
    pub const fn new(n_o: usize, n_x: usize, n_d: usize) -> Self {
        ModelSize { n_o, n_x, n_d }
    }
}

impl std::fmt::Display for ModelSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}-{}", self.n_o, self.n_x, self.n_d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub sizes: Vec<ModelSize>,
    pub n_list: Vec<usize>,
    pub t_len: usize,
    pub n_test: usize,
    pub seeds: u64,
    pub base_seed: u64,
    pub min_sigma: f64,
    pub build: BenchBuild,
    /// Skip EM entirely.
    pub run_em: bool,
    /// Skip EM for training sets larger than this.
    pub em_max_n: Option<usize>,
    pub em: EmConfig,
}

/// Serializable mirror of [`BuildOptions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchBuild {
    pub rtol: Option<f64>,
    pub rank_cap: bool,
}

impl From<BenchBuild> for BuildOptions {
    fn from(b: BenchBuild) -> Self {
        BuildOptions {
            rtol: b.rtol,
            rank_cap: b.rank_cap,
        }
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![ModelSize::new(3, 2, 2), ModelSize::new(5, 4, 6)],
            n_list: vec![500, 1000, 5000, 10_000, 100_000],
            t_len: 100,
            n_test: 1000,
            seeds: 5,
            base_seed: 0,
            min_sigma: 0.05,
            build: BenchBuild {
                rtol: None,
                rank_cap: true,
            },
            run_em: true,
            em_max_n: None,
            em: EmConfig::default(),
        }
    }
}

impl BenchConfig {
    /// Desk-scale preset: fewer training sizes and a smaller test set.
    pub fn small() -> Self {
        BenchConfig {
            n_list: vec![500, 5000, 50_000],
            n_test: 200,
            ..Default::default()
        }
    }
}

/// Accuracy and timing of one learner in one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnerResult {
    /// `None` when learning failed.
    pub rmse: Option<f64>,
    pub learn_secs: f64,
    pub infer_secs: f64,
    pub error: Option<String>,
}

/// One `(size, seed, N)` run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub size: ModelSize,
    pub seed: u64,
    pub n: usize,
    pub spectral: LearnerResult,
    pub em: Option<LearnerResult>,
}

/// Seed-averaged results for one `(size, N)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub size: ModelSize,
    pub n: usize,
    /// Mean over seeds of the per-seed RMSE; `None` if every seed failed.
    pub rmse_spectral: Option<f64>,
    pub rmse_em: Option<f64>,
    pub learn_time_spectral: f64,
    pub learn_time_em: Option<f64>,
    pub infer_time_spectral: f64,
    pub infer_time_em: Option<f64>,
    pub seeds_used: usize,
    pub spectral_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub cells: Vec<CellResult>,
    pub rows: Vec<BenchRow>,
}

/// `|p_hat / p - 1|` from log magnitudes.
pub fn relative_error(estimate: &InferenceResult, true_log: f64) -> f64 {
    let ratio = estimate.sign as f64 * (estimate.log_value - true_log).exp();
    (ratio - 1.0).abs()
}

pub fn rmse(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

// independent stream per (size, seed, role, N)
fn stream(base: u64, size: usize, seed: u64, role: u64, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(((size as u64) << 48) ^ (role << 40) ^ n as u64);
    rng
}

const ROLE_TEST: u64 = 1;
const ROLE_TRAIN: u64 = 2;

/// Truth model of one `(size, seed)` pair.
pub fn truth_model(cfg: &BenchConfig, size: ModelSize, seed: u64) -> Result<HsmmParams, ModelError> {
    random_model(size.n_o, size.n_x, size.n_d, cfg.base_seed.wrapping_add(seed), cfg.min_sigma)
}

/// Spectral learn + score of one training set against a labelled test set.
pub fn spectral_cell(
    train: &[Vec<usize>],
    test: &[Vec<usize>],
    true_logs: &[f64],
    size: ModelSize,
    opts: BuildOptions,
) -> LearnerResult {
    let start = Instant::now();
    let sched = build_schedule(size.n_x, size.n_d);
    let model = estimate_moments(train, &sched, size.n_o)
        .map_err(SpectralError::from)
        .and_then(|m| build_observable_with(&m, opts));
    let learn_secs = start.elapsed().as_secs_f64();
    let model = match model {
        Ok(m) => m,
        Err(e) => {
            return LearnerResult {
                rmse: None,
                learn_secs,
                infer_secs: 0.0,
                error: Some(e.to_string()),
            }
        }
    };
    let start = Instant::now();
    let errors: Result<Vec<f64>, SpectralError> = model.evaluator().and_then(|ev| {
        test.iter()
            .zip(true_logs)
            .map(|(s, &lp)| ev.infer(s).map(|r| relative_error(&r, lp)))
            .collect()
    });
    let infer_secs = start.elapsed().as_secs_f64();
    match errors {
        Ok(e) => LearnerResult {
            rmse: Some(rmse(&e)),
            learn_secs,
            infer_secs,
            error: None,
        },
        Err(e) => LearnerResult {
            rmse: None,
            learn_secs,
            infer_secs,
            error: Some(e.to_string()),
        },
    }
}

/// EM learn + score of one training set.
pub fn em_cell(
    train: &[Vec<usize>],
    test: &[Vec<usize>],
    true_logs: &[f64],
    size: ModelSize,
    cfg: &EmConfig,
) -> LearnerResult {
    let start = Instant::now();
    let fit = em_fit(train, size.n_o, size.n_x, size.n_d, cfg);
    let learn_secs = start.elapsed().as_secs_f64();
    let fit = match fit {
        Ok(f) => f,
        Err(e) => {
            return LearnerResult {
                rmse: None,
                learn_secs,
                infer_secs: 0.0,
                error: Some(e.to_string()),
            }
        }
    };
    let start = Instant::now();
    let errors: Vec<f64> = test
        .iter()
        .zip(true_logs)
        .map(|(s, &lp)| {
            let l = forward_likelihood(&fit.params, s).map(|r| r.log_prob).unwrap_or(f64::NEG_INFINITY);
            ((l - lp).exp() - 1.0).abs()
        })
        .collect();
    LearnerResult {
        rmse: Some(rmse(&errors)),
        learn_secs,
        infer_secs: start.elapsed().as_secs_f64(),
        error: None,
    }
}

pub fn run_synthetic_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    struct Setup {
        size_index: usize,
        size: ModelSize,
        seed: u64,
        truth: HsmmParams,
        test: Vec<Vec<usize>>,
        true_logs: Vec<f64>,
    }
    let mut setups = Vec::new();
    for (size_index, &size) in cfg.sizes.iter().enumerate() {
        for seed in 0..cfg.seeds {
            let truth = truth_model(cfg, size, seed)?;
            let mut rng = stream(cfg.base_seed, size_index, seed, ROLE_TEST, 0);
            let test = sample_many(&truth, cfg.n_test, cfg.t_len, &mut rng);
            let true_logs = test
                .iter()
                .map(|s| forward_likelihood(&truth, s).map(|r| r.log_prob))
                .collect::<Result<_, _>>()?;
            setups.push(Setup {
                size_index,
                size,
                seed,
                truth,
                test,
                true_logs,
            });
        }
    }
    let jobs: Vec<(&Setup, usize)> = setups
        .iter()
        .flat_map(|s| cfg.n_list.iter().map(move |&n| (s, n)))
        .collect();
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(s, n)| {
            let mut rng = stream(cfg.base_seed, s.size_index, s.seed, ROLE_TRAIN, n);
            let train = sample_many(&s.truth, n, cfg.t_len, &mut rng);
            let spectral = spectral_cell(&train, &s.test, &s.true_logs, s.size, cfg.build.into());
            let em = (cfg.run_em && cfg.em_max_n.is_none_or(|m| n <= m)).then(|| {
                let em_cfg = EmConfig {
                    seed: cfg.em.seed ^ s.seed,
                    ..cfg.em
                };
                em_cell(&train, &s.test, &s.true_logs, s.size, &em_cfg)
            });
            CellResult {
                size: s.size,
                seed: s.seed,
                n,
                spectral,
                em,
            }
        })
        .collect();
    let rows = aggregate(cfg, &cells);
    Ok(BenchReport {
        config: cfg.clone(),
        cells,
        rows,
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn aggregate(cfg: &BenchConfig, cells: &[CellResult]) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        for &n in &cfg.n_list {
            let group: Vec<&CellResult> = cells.iter().filter(|c| c.size == size && c.n == n).collect();
            let spec: Vec<f64> = group.iter().filter_map(|c| c.spectral.rmse).collect();
            let ems: Vec<&LearnerResult> = group.iter().filter_map(|c| c.em.as_ref()).collect();
            let em_rmse: Vec<f64> = ems.iter().filter_map(|e| e.rmse).collect();
            let times = |f: &dyn Fn(&CellResult) -> f64| mean(&group.iter().map(|c| f(c)).collect::<Vec<_>>());
            let em_times = |f: &dyn Fn(&LearnerResult) -> f64| mean(&ems.iter().map(|e| f(e)).collect::<Vec<_>>());
            rows.push(BenchRow {
                size,
                n,
                rmse_spectral: mean(&spec),
                rmse_em: mean(&em_rmse),
                learn_time_spectral: times(&|c| c.spectral.learn_secs).unwrap_or(0.0),
                learn_time_em: em_times(&|e| e.learn_secs),
                infer_time_spectral: times(&|c| c.spectral.infer_secs).unwrap_or(0.0),
                infer_time_em: em_times(&|e| e.infer_secs),
                seeds_used: group.len(),
                spectral_failures: group.len() - spec.len(),
            });
        }
    }
    rows
}

pub const CSV_HEADER: [&str; 10] = [
    "size",
    "n",
    "rmse_spectral",
    "rmse_em",
    "learn_time_spectral",
    "learn_time_em",
    "infer_time_spectral",
    "infer_time_em",
    "seeds_used",
    "spectral_failures",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl BenchReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.size.to_string(),
                r.n.to_string(),
                opt(r.rmse_spectral),
                opt(r.rmse_em),
                format!("{:e}", r.learn_time_spectral),
                opt(r.learn_time_em),
                format!("{:e}", r.infer_time_spectral),
                opt(r.infer_time_em),
                r.seeds_used.to_string(),
                r.spectral_failures.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write the CSV to `path` and the configuration to `path` + `.config.json`.
    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        self.write_csv(std::fs::File::create(path)?)?;
        let mut echo = path.as_os_str().to_owned();
        echo.push(".config.json");
        std::fs::write(echo, serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }
}
