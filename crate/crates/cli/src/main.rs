use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use wproj_core::experiments::{
    emit_report, run_jump_sweep, run_opnorm_sweep, run_projection_error, write_csv, ExperimentSetup,
};
use wproj_core::trace::{edge_lemma_ratios, face_lemma_ratio, linear_fit, slicing_inequality_check, LemmaTable};
use wproj_core::{
    analyze, assign_subdomains, CoefficientField, DecompositionSpec, Error, ExperimentConfig, MeshHierarchy,
    PowerOptions, ReportFormat, Result,
};

#[derive(Parser)]
#[command(name = "wproj", version, about = "Weighted L2 projection experiments on 3-D tetrahedral meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify a coefficient distribution: thorny edges and vertices, layers, star sets.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the projection-error study and print the full JSON report.
    Project {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Run the jump sweep and write one report row per (level, eps).
    Convergence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the file extension, CSV otherwise.
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Operator norm of the projection error on the fine space.
    Opnorm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trace-norm lemma tables on the unit cube.
    Lemma {
        #[arg(long, value_enum)]
        kind: LemmaKind,
        /// Number of refinement levels, starting from 2 cells per axis.
        #[arg(long, default_value_t = 3)]
        levels: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random traces per level for the slicing check.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LemmaKind {
    Edge,
    Face,
    Slicing,
}

#[derive(Serialize)]
struct LemmaCsvRow {
    h: f64,
    #[serde(rename = "log_H_over_h")]
    log_h_over_h: f64,
    ratio: f64,
    fit_slope: f64,
}

enum Config {
    Experiment(ExperimentConfig),
    Decomposition(DecompositionSpec),
}

fn read_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("distribution").is_some() {
        let cfg = ExperimentConfig::from_json(&text)?;
        cfg.validate()?;
        Ok(Config::Experiment(cfg))
    } else {
        Ok(Config::Decomposition(serde_json::from_value(value)?))
    }
}

fn experiment_config(path: &Path) -> Result<ExperimentConfig> {
    match read_config(path)? {
        Config::Experiment(cfg) => Ok(cfg),
        Config::Decomposition(_) => Err(Error::Config(format!(
            "{} is a decomposition; this command needs an experiment config",
            path.display()
        ))),
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Smallest hierarchy on which `spec` resolves, perturbation included.
fn hierarchy_for(spec: &DecompositionSpec) -> Result<MeshHierarchy> {
    if spec.grid.contains(&0) {
        return Err(Error::Config("grid entries must be positive".into()));
    }
    let mut n = spec.grid.iter().fold(1, |l, &g| l / gcd(l, g) * g);
    let mut levels = 0;
    if let Some(p) = &spec.perturb {
        levels = p.level.unwrap_or(0);
        let need = 2 * p.amplitude + 3;
        while spec.grid.iter().any(|&g| g > 1 && (n << levels) / g < need) {
            n *= 2;
        }
    }
    MeshHierarchy::build(n, levels)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))
}

fn format_for(path: &Path, explicit: Option<Format>) -> Format {
    explicit.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
        _ => Format::Csv,
    })
}

fn cmd_analyze(config: &Path, out: Option<&Path>) -> Result<()> {
    let reports = match read_config(config)? {
        Config::Decomposition(spec) => {
            let h = hierarchy_for(&spec)?;
            let dec = assign_subdomains(&h, &spec)?;
            vec![analyze(&dec, &CoefficientField::from_decomposition(&dec))]
        }
        Config::Experiment(cfg) => {
            let setup = ExperimentSetup::new(&cfg)?;
            let mut v = Vec::new();
            for &e in &cfg.eps {
                let (dec, alpha) = setup.at(e)?;
                v.push(analyze(&dec, &alpha));
            }
            v
        }
    };
    let json = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0])?
    } else {
        serde_json::to_string_pretty(&reports)?
    };
    let summaries: String = reports.iter().map(|r| r.summary()).collect();
    match out {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{json}")?;
            w.flush()?;
            print!("{summaries}");
        }
        None => {
            println!("{json}");
            eprint!("{summaries}");
        }
    }
    Ok(())
}

fn cmd_project(config: &Path, out: Option<&Path>, format: Format) -> Result<()> {
    let records = run_projection_error(&experiment_config(config)?)?;
    match out {
        Some(p) => {
            let mut w = create(p)?;
            emit_report(&records, format.into(), &mut w)?;
            w.flush()?;
        }
        None => emit_report(&records, format.into(), io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_convergence(config: &Path, out: &Path, format: Option<Format>) -> Result<()> {
    let report = run_jump_sweep(&experiment_config(config)?)?;
    let mut w = create(out)?;
    emit_report(&report.records, format_for(out, format).into(), &mut w)?;
    w.flush()?;
    for v in &report.verdicts {
        println!("{v}");
    }
    Ok(())
}

fn cmd_opnorm(config: &Path, out: &Path) -> Result<()> {
    let rows = run_opnorm_sweep(&experiment_config(config)?)?;
    let mut w = create(out)?;
    write_csv(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn table_rows(t: &LemmaTable) -> Vec<LemmaCsvRow> {
    t.rows
        .iter()
        .map(|r| LemmaCsvRow {
            h: r.h,
            log_h_over_h: r.log_h_ratio,
            ratio: r.ratio,
            fit_slope: t.fit.slope,
        })
        .collect()
}

fn cmd_lemma(kind: LemmaKind, levels: u32, seed: u64, samples: usize, out: &Path) -> Result<()> {
    if levels == 0 || levels > 4 {
        return Err(Error::Config("--levels must lie in 1..=4".into()));
    }
    let cells: Vec<usize> = (1..=levels).map(|k| 1usize << k).collect();
    let opts = PowerOptions {
        tol: 1e-6,
        max_iter: 2000,
        seed,
    };
    let rows = match kind {
        LemmaKind::Edge => table_rows(&edge_lemma_ratios(&cells, opts)?.trace_sq),
        LemmaKind::Face => table_rows(&face_lemma_ratio(&cells, opts)?),
        LemmaKind::Slicing => {
            let s = slicing_inequality_check(&cells, samples.max(1), seed)?;
            let x: Vec<f64> = s.iter().map(|r| r.log_h_ratio).collect();
            let y: Vec<f64> = s.iter().map(|r| r.node_ratio).collect();
            let slope = if s.len() > 1 { linear_fit(&x, &y).slope } else { f64::NAN };
            s.iter()
                .map(|r| LemmaCsvRow {
                    h: r.h,
                    log_h_over_h: r.log_h_ratio,
                    ratio: r.node_ratio,
                    fit_slope: slope,
                })
                .collect()
        }
    };
    let mut w = create(out)?;
    write_csv(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("WPROJ_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("WPROJ_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Analyze { config, out } => cmd_analyze(&config, out.as_deref()),
        Command::Project { config, out, format } => cmd_project(&config, out.as_deref(), format),
        Command::Convergence { config, out, format } => cmd_convergence(&config, &out, format),
        Command::Opnorm { config, out } => cmd_opnorm(&config, &out),
        Command::Lemma {
            kind,
            levels,
            seed,
            samples,
            out,
        } => cmd_lemma(kind, levels, seed, samples, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wproj: {e}");
            match e {
                Error::Solver { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
