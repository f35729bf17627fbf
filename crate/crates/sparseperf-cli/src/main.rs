//! Command-line front end: dataset synthesis and ingestion, sparsity
//! profiling, single-method imputation, and full benchmark runs.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 numerical failure.

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparseperf::error::Error;
use sparseperf::eval::{run_benchmark, CvPlan, FitReport};
use sparseperf::ingest::{
    build_tensor, parse_records, synth_generate, write_dataset, write_dense, CsvFormat,
    SynthConfig,
};
use sparseperf::tensor::PerfTensor;

use config::{method_boxes, MethodOverrides, RunConfig};

/// Environment variable naming the default output directory.
const OUTPUT_DIR_ENV: &str = "SPARSEPERF_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "sparseperf", version, about = "Sparse learner-performance imputation")]
struct Cli {
    /// Override every configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the benchmark grid (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (default: $SPARSEPERF_OUTPUT_DIR or `.`).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainFlags {
    /// Cap on training iterations for iterative methods.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Learning rate for gradient-based methods.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sparsity per max-attempts truncation of a dataset.
    Sparsity {
        /// Interaction CSV: learner_id,question_id,attempt,outcome.
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated max-attempts values (default: 1..=M).
        #[arg(long, value_delimiter = ',')]
        attempts: Option<Vec<usize>>,
        /// Also write the table as CSV here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Complete a dataset with one method and write the dense tensor.
    Impute {
        #[arg(long)]
        input: PathBuf,
        /// One of gain, gan, tf, cpd, bptf.
        #[arg(long)]
        method: String,
        /// Output file (default: imputed.csv in the output directory).
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Run the cross-validated benchmark grid from a config file.
    Benchmark {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Generate a synthetic dataset with known ground truth.
    Synth {
        /// Output dataset file.
        #[arg(long)]
        output: PathBuf,
        /// Ground-truth probability sidecar (default: <output>.truth.csv).
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        learners: usize,
        #[arg(long, default_value_t = 10)]
        questions: usize,
        #[arg(long, default_value_t = 5)]
        attempts: usize,
        #[arg(long, default_value_t = 0.2)]
        base_dropout: f64,
        #[arg(long, default_value_t = 0.1)]
        dropout_growth: f64,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) => 1,
        Error::Parse { .. }
        | Error::Io(_)
        | Error::EmptyRecords
        | Error::EmptyCells
        | Error::TooFewObserved { .. }
        | Error::ShapeMismatch { .. }
        | Error::IndexOutOfRange { .. }
        | Error::Checkpoint(_) => 2,
        Error::Divergence { .. }
        | Error::NonFinite { .. }
        | Error::NonFiniteActivation { .. }
        | Error::EmptyBatch { .. }
        | Error::UndefinedCorrelation(_) => 3,
        Error::MethodFailure { source, .. } => exit_code_for(source),
    }
}

fn fail(err: Error) -> ExitCode {
    eprintln!("error: {err}");
    let mut cause = std::error::Error::source(&err);
    while let Some(c) = cause {
        eprintln!("  caused by: {c}");
        cause = c.source();
    }
    ExitCode::from(exit_code_for(&err))
}

fn load_dataset(path: &Path) -> Result<PerfTensor, Error> {
    let file = File::open(path)?;
    let records = parse_records(BufReader::new(file), &CsvFormat::default())?;
    let outcome = build_tensor(&records)?;
    if outcome.conflict_count > 0 {
        eprintln!(
            "warning: {} conflicting duplicate rows ignored (first occurrence kept)",
            outcome.conflict_count
        );
    }
    Ok(outcome.tensor)
}

fn resolve_output_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn cmd_sparsity(
    input: &Path,
    attempts: Option<Vec<usize>>,
    output: Option<PathBuf>,
) -> Result<(), Error> {
    let t = load_dataset(input)?;
    let (_, _, m) = t.dims();
    let range = attempts.unwrap_or_else(|| (1..=m).collect());
    for &a in &range {
        if a == 0 || a > m {
            return Err(Error::InvalidConfig(format!(
                "max_attempts {a} outside 1..={m}"
            )));
        }
    }
    let mut rows = Vec::new();
    for &a in &range {
        rows.push((a, t.truncate_attempts(a)?.sparsity_level()));
    }
    println!("max_attempts,sparsity");
    for &(a, s) in &rows {
        println!("{a},{s}");
    }
    if let Some(path) = output {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "max_attempts,sparsity")?;
        for &(a, s) in &rows {
            writeln!(w, "{a},{s}")?;
        }
    }
    Ok(())
}

fn cmd_impute(
    input: &Path,
    method_name: &str,
    output: &Path,
    overrides: &MethodOverrides,
) -> Result<(), Error> {
    let t = load_dataset(input)?;
    let cfg = RunConfig::default_for(&[method_name.to_string()])?;
    let methods = method_boxes(&cfg, overrides)?;
    let method = methods
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{method_name}`")))?;
    println!("effective config:");
    print!("{}", cfg.echo_toml(overrides));
    let seed = overrides.seed.unwrap_or(cfg.seed);
    let FitReport { prediction, curve } = method.fit_impute(&t, seed)?;
    let mut w = BufWriter::new(File::create(output)?);
    write_dense(&prediction, &mut w, "value")?;
    w.flush()?;
    match curve {
        Some(c) if !c.is_empty() => {
            let (iters, final_rmse) = c.last().copied().expect("non-empty");
            println!("final observed RMSE {final_rmse} after {iters} iterations");
        }
        _ => println!("imputation complete (method reports no training curve)"),
    }
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_benchmark(
    config_path: &Path,
    out_dir: &Path,
    overrides: &MethodOverrides,
) -> Result<(), Error> {
    let text = fs::read_to_string(config_path)?;
    let mut cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("config parse failure: {e}")))?;
    cfg.apply_overrides(overrides);
    cfg.validate()?;

    let mut datasets: Vec<(String, PerfTensor)> = Vec::new();
    for spec in &cfg.datasets {
        let t = match (&spec.path, &spec.synth) {
            (Some(path), None) => load_dataset(path)?,
            (None, Some(s)) => synth_generate(s)?.observed,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "dataset `{}` must set exactly one of path or synth",
                    spec.name
                )))
            }
        };
        datasets.push((spec.name.clone(), t));
    }

    let methods = method_boxes(&cfg, overrides)?;
    let plan = CvPlan {
        base_seed: overrides.seed.unwrap_or(cfg.cv.base_seed),
        ..cfg.cv
    };

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("effective_config.toml"), cfg.echo_toml(overrides))?;

    let report = run_benchmark(&datasets, &methods, &cfg.attempts_range, &plan)?;

    let write_file = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> Result<(), Error>| {
        let mut w = BufWriter::new(File::create(out_dir.join(name))?);
        f(&mut w)?;
        w.flush()?;
        Ok::<(), Error>(())
    };
    write_file("rmse.csv", &|w| report.write_rmse_csv(w))?;
    write_file("spearman.csv", &|w| report.write_spearman_csv(w))?;
    write_file("sparsity.csv", &|w| report.write_sparsity_csv(w))?;
    write_file("curves.csv", &|w| report.write_curves_csv(w))?;
    write_file("report.txt", &|w| report.write_text(w))?;

    for (name, _) in &datasets {
        println!("dataset {name} — methods ranked by mean RMSE:");
        let mut per: Vec<(String, f64)> = Vec::new();
        for row in report.rmse_rows.iter().filter(|r| &r.dataset == name) {
            match per.iter_mut().find(|(m, _)| m == &row.method) {
                Some((_, acc)) => *acc += row.rmse_mean,
                None => per.push((row.method.clone(), row.rmse_mean)),
            }
        }
        let settings = cfg.attempts_range.len() as f64;
        for p in &mut per {
            p.1 /= settings;
        }
        per.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite means"));
        for (rank, (m, v)) in per.iter().enumerate() {
            println!("  {}. {m}: {v:.4}", rank + 1);
        }
    }
    println!("wrote report files to {}", out_dir.display());
    Ok(())
}

fn cmd_synth(
    output: &Path,
    truth: Option<PathBuf>,
    cfg: SynthConfig,
) -> Result<(), Error> {
    let ds = synth_generate(&cfg)?;
    let mut w = BufWriter::new(File::create(output)?);
    write_dataset(&ds.observed, &mut w, &CsvFormat::default())?;
    w.flush()?;
    let truth_path = truth.unwrap_or_else(|| {
        let mut p = output.as_os_str().to_owned();
        p.push(".truth.csv");
        PathBuf::from(p)
    });
    let mut tw = BufWriter::new(File::create(&truth_path)?);
    write_dense(&ds.truth_prob, &mut tw, "probability")?;
    tw.flush()?;
    println!("effective config:");
    print!(
        "{}",
        toml::to_string(&cfg).map_err(|e| Error::InvalidConfig(e.to_string()))?
    );
    println!("sparsity {}", ds.observed.sparsity_level());
    println!("wrote {} and {}", output.display(), truth_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::InvalidConfig("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    }
    let out_dir = resolve_output_dir(&cli.output_dir);
    match cli.command {
        Command::Sparsity {
            input,
            attempts,
            output,
        } => cmd_sparsity(&input, attempts, output),
        Command::Impute {
            input,
            method,
            output,
            train,
        } => {
            let overrides = MethodOverrides {
                seed: cli.seed,
                max_iters: train.max_iters,
                lr: train.lr,
            };
            let output = output.unwrap_or_else(|| out_dir.join("imputed.csv"));
            cmd_impute(&input, &method, &output, &overrides)
        }
        Command::Benchmark { config, train } => {
            let overrides = MethodOverrides {
                seed: cli.seed,
                max_iters: train.max_iters,
                lr: train.lr,
            };
            cmd_benchmark(&config, &out_dir, &overrides)
        }
        Command::Synth {
            output,
            truth,
            learners,
            questions,
            attempts,
            base_dropout,
            dropout_growth,
        } => {
            let cfg = SynthConfig {
                u_count: learners,
                n_count: questions,
                m_count: attempts,
                base_dropout,
                dropout_growth,
                seed: cli.seed.unwrap_or(0),
                ..SynthConfig::default()
            };
            cmd_synth(&output, truth, cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not failures; everything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
