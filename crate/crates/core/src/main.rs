//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or model errors.

use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use hsmm_spectral::bench::{run_synthetic_bench, BenchBuild, BenchConfig, BenchError, ModelSize};
use hsmm_spectral::em::{em_fit, EmConfig, EmError};
use hsmm_spectral::hsmm::{random_model_with, sample_many, validate, ModelError, RandomModelOptions};
use hsmm_spectral::io::{
    load_model, load_sequences, save_container, save_model, score_file, write_sequences, Container, IoError,
    Scorer,
};
use hsmm_spectral::moments::{build_schedule, estimate_moments, MomentError};
use hsmm_spectral::rank::{build_f, grid_model, rank_grid, RankError, TAlgorithm};
use hsmm_spectral::spectral::{build_observable_per_t, build_observable_with, BuildOptions, SpectralError};

#[derive(Debug, Parser)]
#[command(name = "hsmm-spectral", version, about = "Spectral inference for hidden semi-Markov models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random draw made by the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct Dims {
    #[arg(long = "no")]
    n_o: usize,
    #[arg(long = "nx")]
    n_x: usize,
    #[arg(long = "nd")]
    n_d: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a random model and write it as JSON.
    GenModel {
        #[command(flatten)]
        dims: Dims,
        #[arg(long, default_value_t = 0.05)]
        min_sigma: f64,
        /// Forbid self-transitions at renewals.
        #[arg(long)]
        zero_diagonal: bool,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sample observation sequences from a model.
    GenData {
        model: PathBuf,
        #[arg(short = 'n', long)]
        count: usize,
        #[arg(short = 'T', long = "length")]
        length: usize,
        /// Output file; standard output when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Check stochasticity and the rank assumptions of a model.
    Validate {
        model: PathBuf,
        #[arg(long, default_value_t = 1e-10)]
        rtol: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate moments and build the observable representation.
    LearnSpectral {
        data: PathBuf,
        #[command(flatten)]
        dims: Dims,
        /// One model per anchor instead of pooled moments.
        #[arg(long)]
        basic: bool,
        /// Relative singular-value cutoff for pseudo-inverses.
        #[arg(long)]
        rtol: Option<f64>,
        /// Keep every singular value above the cutoff instead of the population rank.
        #[arg(long)]
        no_rank_cap: bool,
        /// Also write the pooled moments.
        #[arg(long)]
        moments_out: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a model with expectation-maximization.
    LearnEm {
        data: PathBuf,
        #[command(flatten)]
        dims: Dims,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Probability of one sequence given as symbols.
    Infer {
        model: PathBuf,
        #[arg(required = true, num_args = 1..)]
        symbols: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Score every sequence of a file into CSV.
    Score {
        model: PathBuf,
        data: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep the rank of the conditional state tables.
    RankCheck {
        #[arg(long = "nx", value_delimiter = ',', default_values_t = [2, 3, 4])]
        n_x: Vec<usize>,
        #[arg(long = "nd", value_delimiter = ',', default_values_t = [2, 3, 4, 5, 6])]
        n_d: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, value_enum, default_value_t = AlgorithmChoice::Both)]
        algorithm: AlgorithmChoice,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Spectral-versus-EM benchmark on synthetic models.
    Bench {
        #[arg(long, value_enum, default_value_t = Preset::Small)]
        preset: Preset,
        #[arg(long)]
        seeds: Option<u64>,
        /// Training sizes, overriding the preset.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        /// Only the smaller model size.
        #[arg(long)]
        small_only: bool,
        #[arg(long)]
        no_em: bool,
        /// Skip EM above this training size.
        #[arg(long)]
        em_max_n: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlgorithmChoice {
    Sequential,
    Efficient,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Small,
    Full,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Moments(#[from] MomentError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Em(#[from] EmError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("i/o: {0}")]
    Std(#[from] std::io::Error),
    #[error("{0}")]
    Failed(String),
}

fn output_writer(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenModel {
            dims,
            min_sigma,
            zero_diagonal,
            output,
            common,
        } => {
            let p = random_model_with(
                dims.n_o,
                dims.n_x,
                dims.n_d,
                common.seed,
                RandomModelOptions {
                    min_sigma,
                    zero_diagonal,
                    ..Default::default()
                },
            )?;
            save_model(&p, &output)?;
        }
        Command::GenData {
            model,
            count,
            length,
            output,
            common,
        } => {
            let p = load_model(&model)?;
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            let seqs = sample_many(&p, count, length, &mut rng);
            let mut w = output_writer(output.as_deref())?;
            write_sequences(&mut w, &seqs)?;
            w.flush()?;
        }
        Command::Validate { model, rtol, .. } => {
            let p = load_model(&model)?;
            let report = validate(&p, rtol)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            report.into_result()?;
        }
        Command::LearnSpectral {
            data,
            dims,
            basic,
            rtol,
            no_rank_cap,
            moments_out,
            output,
            ..
        } => {
            let seqs = load_sequences(&data)?;
            let sched = build_schedule(dims.n_x, dims.n_d);
            let opts = BuildOptions {
                rtol,
                rank_cap: !no_rank_cap,
            };
            if let Some(path) = moments_out {
                let m = estimate_moments(&seqs, &sched, dims.n_o)?;
                save_container(&Container::Moments(m), &path)?;
            }
            let container = if basic {
                Container::PerAnchor(build_observable_per_t(&seqs, &sched, dims.n_o, opts)?)
            } else {
                let m = estimate_moments(&seqs, &sched, dims.n_o)?;
                Container::Observable(build_observable_with(&m, opts)?)
            };
            save_container(&container, &output)?;
        }
        Command::LearnEm {
            data,
            dims,
            max_iter,
            tol,
            restarts,
            output,
            common,
        } => {
            let seqs = load_sequences(&data)?;
            let cfg = EmConfig {
                max_iter,
                tol,
                restarts,
                seed: common.seed,
            };
            let fit = em_fit(&seqs, dims.n_o, dims.n_x, dims.n_d, &cfg)?;
            eprintln!(
                "log-likelihood {} after {} iterations",
                fit.log_likelihood(),
                fit.trace.len() - 1
            );
            save_model(&fit.params, &output)?;
        }
        Command::Infer { model, symbols, .. } => {
            let scorer = Scorer::load(&model)?;
            let r = scorer.score(&symbols).map_err(|e| CliError::Failed(format!("{}: {e}", e.kind())))?;
            println!("log_value {}\nsign {}\nclamped {}", r.log_value, r.sign, r.clamped);
        }
        Command::Score {
            model, data, output, ..
        } => {
            let scorer = Scorer::load(&model)?;
            let input = BufReader::new(std::fs::File::open(&data)?);
            let summary = score_file(&scorer, input, output_writer(output.as_deref())?)?;
            eprintln!("{} rows, {} errors", summary.rows, summary.errors);
        }
        Command::RankCheck {
            n_x,
            n_d,
            seeds,
            algorithm,
            output,
            ..
        } => {
            let algorithms = match algorithm {
                AlgorithmChoice::Sequential => vec![TAlgorithm::Sequential],
                AlgorithmChoice::Efficient => vec![TAlgorithm::Efficient],
                AlgorithmChoice::Both => vec![TAlgorithm::Sequential, TAlgorithm::Efficient],
            };
            let mut w = csv::Writer::from_writer(output_writer(output.as_deref())?);
            let csv_err = |e: csv::Error| CliError::Failed(e.to_string());
            w.write_record(["n_x", "n_d", "ell", "algorithm", "predicted", "observed", "pass"])
                .map_err(csv_err)?;
            let mut failures = 0;
            for alg in algorithms {
                for r in rank_grid(&n_x, &n_d, seeds, alg)? {
                    failures += usize::from(!r.passed());
                    w.write_record([
                        r.n_x.to_string(),
                        r.n_d.to_string(),
                        r.ell.to_string(),
                        alg.to_string(),
                        r.predicted.to_string(),
                        r.observed.to_string(),
                        r.passed().to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
            for &x in n_x.iter().filter(|&&x| x >= 2) {
                for &d in &n_d {
                    for seed in 0..seeds {
                        let f = build_f(&grid_model(x, d, seed)?, &build_schedule(x, d).right_offsets)?;
                        failures += usize::from(!f.full_rank);
                        w.write_record([
                            x.to_string(),
                            d.to_string(),
                            build_schedule(x, d).ell.to_string(),
                            "schedule-f".into(),
                            (x * d).to_string(),
                            f.numerical_rank.to_string(),
                            f.full_rank.to_string(),
                        ])
                        .map_err(csv_err)?;
                    }
                }
            }
            w.flush()?;
            eprintln!("{failures} rank mismatches");
        }
        Command::Bench {
            preset,
            seeds,
            n,
            small_only,
            no_em,
            em_max_n,
            output,
            common,
        } => {
            let mut cfg = match preset {
                Preset::Small => BenchConfig::small(),
                Preset::Full => BenchConfig::default(),
            };
            cfg.base_seed = common.seed;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(n) = n {
                cfg.n_list = n;
            }
            if small_only {
                cfg.sizes = vec![ModelSize::new(3, 2, 2)];
            }
            cfg.run_em = !no_em;
            cfg.em_max_n = em_max_n;
            cfg.build = BenchBuild {
                rtol: None,
                rank_cap: true,
            };
            let report = run_synthetic_bench(&cfg)?;
            report.save(&output)?;
            report.write_csv(std::io::stderr())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
