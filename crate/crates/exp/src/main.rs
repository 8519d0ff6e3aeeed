use clap::{Parser, Subcommand, ValueEnum};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use pinnx_core::metrics::EvalRegion;
use pinnx_core::pde::Equation;
use pinnx_core::refsolver::GridSpec;
use pinnx_core::trainer::TlMethod;
use pinnx_exp::config::ExperimentConfig;
use pinnx_exp::error::{ExpError, IoContext, Result};
use pinnx_exp::runner::{self, RunSummary};
use pinnx_exp::{figures, table, timing};

/// Hard-constraint PINN experiments with final-layer transfer learning.
#[derive(Parser)]
#[command(name = "pinnx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the reference PDE and write the grid file plus a JSON sidecar.
    Reference {
        /// Take equation, grid and output path from an experiment config.
        #[arg(long, conflicts_with = "equation")]
        config: Option<PathBuf>,
        /// Override the config's output directory.
        #[arg(long, requires = "config")]
        output: Option<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        equation: Option<String>,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        nt: Option<usize>,
        #[arg(long)]
        nx_internal: Option<usize>,
        #[arg(long)]
        rtol: Option<f64>,
        #[arg(long)]
        atol: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the grid as CSV.
        #[arg(long)]
        csv: bool,
        /// Skip the spatial convergence study.
        #[arg(long)]
        no_convergence: bool,
    },
    /// Initial training for every seed of a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the number of seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// Keep seeds that already finished under the same config.
        #[arg(long)]
        resume: bool,
        /// Override the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Transfer learning on the trained seeds of a run directory.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's run directory.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Methods to run; defaults to the config's method.
        #[arg(long = "method", value_delimiter = ',')]
        methods: Vec<String>,
        /// Keep seeds that already hold results for these methods.
        #[arg(long)]
        resume: bool,
        /// Override the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Result tables from run directories.
    Table {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// SVG figures from a seed directory.
    Plot {
        kind: PlotKind,
        /// Seed directory, e.g. runs/ac-tanh/seed-000.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Slice time.
        #[arg(long, default_value_t = 0.82)]
        t: f64,
        /// Transferred model to overlay on a slice.
        #[arg(long)]
        method: Option<String>,
    },
    /// Training-time report for tanh and lctanh with and without TL.
    Timing {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Slice,
    Scatter,
    Gradnorm,
}

fn parse_equation(s: &str) -> Result<Equation> {
    Equation::from_id(s).ok_or_else(|| ExpError::Config(format!("unknown equation '{s}'")))
}

fn parse_method(s: &str) -> Result<TlMethod> {
    TlMethod::from_name(s).ok_or_else(|| ExpError::Config(format!("unknown transfer method '{s}'")))
}

fn load_config(path: &Path, output: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(o) = output {
        cfg.output = o;
    }
    Ok(cfg)
}

fn print_summary(s: &RunSummary) {
    let region = |r: EvalRegion, stats: Option<&runner::RegionStats>| match stats {
        Some(st) => println!("  {:<14} L2 {:.4} +- {:.4}  MAE {:.4} +- {:.4}", r.name(), st.l2.mean, st.l2.std, st.mae.mean, st.mae.std),
        None => println!("  {:<14} n/a", r.name()),
    };
    println!("{} ({} seeds)", s.run_id, s.seeds.len());
    for r in EvalRegion::REPORTED {
        region(r, s.initial_region(r));
    }
    for m in &s.transfer {
        println!(" after {} (freeze {}):", m.method.name(), if m.freeze_ok { "ok" } else { "VIOLATED" });
        for r in EvalRegion::REPORTED {
            region(r, s.transfer_region(m.method, r));
        }
        let e = m.effect_per_seed;
        println!(
            "  forgetting L2 {:.1}% MAE {:.1}%, extrapolation reduction L2 {:.1}% MAE {:.1}%",
            e.forgetting_l2_pct, e.forgetting_mae_pct, e.reduction_l2_pct, e.reduction_mae_pct
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Reference { config, output, equation, nx, nt, nx_internal, rtol, atol, out, csv, no_convergence } => {
            let (eq, mut spec, default_out) = match config {
                Some(p) => {
                    let c = load_config(&p, output)?;
                    (c.equation, c.grid, c.reference_path())
                }
                None => {
                    let eq = parse_equation(equation.as_deref().unwrap_or_default())?;
                    (eq, GridSpec::standard(eq), PathBuf::from(format!("runs/reference/{}.grid", eq.id())))
                }
            };
            spec.nx = nx.unwrap_or(spec.nx);
            spec.nt = nt.unwrap_or(spec.nt);
            spec.nx_internal = nx_internal.unwrap_or(spec.nx_internal);
            spec.rtol = rtol.unwrap_or(spec.rtol);
            spec.atol = atol.unwrap_or(spec.atol);
            let out = out.unwrap_or(default_out);
            let side = runner::cmd_reference(eq, &spec, &out, csv, !no_convergence)?;
            println!("{}: {} x {} grid in {:.1} s", out.display(), spec.nt, spec.nx, side.seconds);
            if eq == Equation::Kdv {
                println!("  mass drift {:.2e}", side.mass_drift);
            }
            if let Some(c) = side.convergence {
                println!("  convergence nx={}: diff {:.3e} -> {:.3e}, ratio {:.2}", c.nx, c.diff_coarse, c.diff_fine, c.ratio);
            }
        }
        Command::Train { config, seeds, resume, output } => {
            let mut cfg = load_config(&config, output)?;
            if let Some(n) = seeds {
                cfg.seeds = n;
            }
            print_summary(&runner::cmd_train(&cfg, resume)?);
        }
        Command::Transfer { config, run_dir, methods, resume, output } => {
            let cfg = load_config(&config, output)?;
            let methods = if methods.is_empty() {
                vec![cfg.transfer.method]
            } else {
                methods.iter().map(|m| parse_method(m)).collect::<Result<Vec<_>>>()?
            };
            let dir = run_dir.unwrap_or_else(|| cfg.run_dir());
            print_summary(&runner::cmd_transfer(&cfg, &dir, &methods, resume)?);
        }
        Command::Table { out, runs } => {
            let summaries = runs.iter().map(|d| runner::summarize(d)).collect::<Result<Vec<_>>>()?;
            for p in table::cmd_table(&summaries, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Plot { kind, run, out, t, method } => {
            let svg = match kind {
                PlotKind::Slice => {
                    let method = method.as_deref().map(parse_method).transpose()?;
                    let grid = figures::seed_reference(&run)?;
                    figures::slice_figure(&run, &grid, t, method)?
                }
                PlotKind::Scatter => figures::scatter_figure(&run)?,
                PlotKind::Gradnorm => figures::gradnorm_figure(&run)?,
            };
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).at(parent)?;
            }
            fs::write(&out, svg).at(&out)?;
            println!("{}", out.display());
        }
        Command::Timing { config, out, output } => {
            let cfg = load_config(&config, output)?;
            print!("{}", timing::cmd_timing(&cfg, &out)?.markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pinnx: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

