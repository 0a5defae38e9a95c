//! `gcta`: synthesize drifting graph sequences, pretrain a classifier, run
//! continual adaptation with memory replay and report the results.

mod heatmap;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gcta_core::io::{load_dataset, read_run_matrix, save_dataset, write_run, Report, RunConfig};
use gcta_core::{pretrain, run_continual, synth_drift_sequence, DriftSpec, Error, ModelParams};
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "gcta", version, about = "Continual test-time adaptation of graph classifiers")]
struct Cli {
    /// Log progress to stderr (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic drifting SBM sequence as a dataset directory.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of leading domains marked as labelled sources.
        #[arg(long, default_value_t = 1)]
        sources: usize,
    },
    /// Supervised training on the dataset's source domains.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continual adaptation over the target domains.
    Run {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Adapt on the current domain only.
        #[arg(long)]
        no_replay: bool,
        /// Score the pretrained model without adapting.
        #[arg(long, conflicts_with = "no_replay")]
        test_only: bool,
    },
    /// Print the performance matrix or summary of one or more runs.
    Report {
        /// Run directory; repeat to aggregate several seeds.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Failures with their exit status: 1 for contract, load and I/O
/// problems, 2 for numeric breakdowns during optimisation.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numeric() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn failure(op: &str, msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: format!("{op}: {msg}"),
    }
}

fn read(op: &str, path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| failure(op, format!("cannot read {}: {e}", path.display())))
}

fn write(op: &str, path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| failure(op, format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| failure(op, format!("cannot write {}: {e}", path.display())))
}

/// Loads the run config (defaults when no file is given) and logs its seed
/// and a hash of its canonical JSON form.
fn load_config(op: &str, path: Option<&Path>) -> Result<RunConfig, Failure> {
    let cfg = match path {
        Some(p) => RunConfig::from_json(&read(op, p)?)?,
        None => RunConfig::default(),
    };
    let canonical = serde_json::to_string(&cfg).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    log::info!("{op}: seed {} config sha256 {hex}", cfg.seed);
    Ok(cfg)
}

fn synth(spec: Option<&Path>, out: &Path, sources: usize) -> Result<(), Failure> {
    let op = "synth";
    let spec: DriftSpec = match spec {
        Some(p) => serde_json::from_str(&read(op, p)?).map_err(|e| failure(op, format!("{}: {e}", p.display())))?,
        None => DriftSpec::default(),
    };
    log::info!("{op}: seed {}", spec.seed);
    let seq = synth_drift_sequence(&spec)?;
    if sources >= seq.len() {
        return Err(failure(op, format!("{sources} source domains leave no targets out of {}", seq.len())));
    }
    let source_ids: Vec<String> = seq.domains[..sources].iter().map(|g| g.domain_id.clone()).collect();
    save_dataset(out, &seq, &source_ids)?;
    println!("wrote {} domains ({} source) to {}", seq.len(), sources, out.display());
    Ok(())
}

fn pretrain_cmd(data: &Path, config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let cfg = load_config("pretrain", config)?;
    let (source, _) = load_dataset(data)?;
    let theta = pretrain(&source, cfg.hidden_dim, cfg.pretrain_epochs, cfg.lr_pretrain, cfg.wd, cfg.seed)?;
    write("pretrain", out, &theta.to_checkpoint_json())?;
    println!("wrote checkpoint to {}", out.display());
    Ok(())
}

fn run_cmd(
    data: &Path,
    config: Option<&Path>,
    ckpt: &Path,
    out: &Path,
    no_replay: bool,
    test_only: bool,
) -> Result<(), Failure> {
    let cfg = load_config("run", config)?;
    let theta = ModelParams::from_checkpoint_json(&read("run", ckpt)?)?;
    let (_, targets) = load_dataset(data)?;
    let continual = cfg.continual(test_only, no_replay);
    let state = run_continual(&theta, &targets, &continual, cfg.seed)?;
    let report = write_run(out, &state)?;
    if cfg.plot {
        heatmap::write_png(&out.join("matrix.png"), &state.matrix).map_err(|e| failure("run", e))?;
    }
    match report.af {
        Some(af) => println!("{}: AP {:.4} AF {:.4} over {} domains", report.metric, report.ap, af, state.step),
        None => println!("{}: AP {:.4} over {} domain", report.metric, report.ap, state.step),
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn report_cmd(runs: &[PathBuf], format: Format) -> Result<(), Failure> {
    let mut reports = Vec::with_capacity(runs.len());
    let mut matrices = Vec::with_capacity(runs.len());
    for run in runs {
        let m = read_run_matrix(run)?;
        reports.push(Report::from_matrix(&m)?);
        matrices.push(m);
    }
    match (format, runs.len()) {
        (Format::Csv, 1) => print!("{}", matrices[0].to_csv()),
        (Format::Json, 1) => println!("{}", serde_json::to_string_pretty(&reports[0]).expect("report serializes")),
        (Format::Csv, _) => {
            println!("run,ap,af");
            for (run, r) in runs.iter().zip(&reports) {
                let af = r.af.map(|x| x.to_string()).unwrap_or_default();
                println!("{},{},{af}", run.display(), r.ap);
            }
        }
        (Format::Json, _) => {
            let aps: Vec<f64> = reports.iter().map(|r| r.ap).collect();
            let afs: Vec<f64> = reports.iter().filter_map(|r| r.af).collect();
            let (ap_mean, ap_std) = mean_std(&aps);
            let mut summary = serde_json::json!({
                "metric": reports[0].metric,
                "runs": reports.len(),
                "ap_mean": ap_mean,
                "ap_std": ap_std,
            });
            if afs.len() == reports.len() {
                let (af_mean, af_std) = mean_std(&afs);
                summary["af_mean"] = af_mean.into();
                summary["af_std"] = af_std.into();
            }
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
    }
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    // Built without reading the environment; no timestamps so that output
    // for a fixed seed is reproducible.
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Synth { spec, out, sources } => synth(spec.as_deref(), out, *sources),
        Command::Pretrain { data, config, out } => pretrain_cmd(data, config.as_deref(), out),
        Command::Run { data, config, ckpt, out, no_replay, test_only } => {
            run_cmd(data, config.as_deref(), ckpt, out, *no_replay, *test_only)
        }
        Command::Report { runs, format } => report_cmd(runs, *format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
