mod launch;

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use distflow::config::parse_scales;
use distflow::experiment::{sweep_rows, sweep_summary};
use distflow::report::{write_results, write_summary};
use distflow::{sweep, verify, Backend, HubOptions, Mode, ResultRow, RunConfig};

#[derive(Parser)]
#[command(name = "distflow-sim", version, about = "Simulated multi-node RL dataflow runs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one configuration and write per-iteration CSV rows.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        backend: Option<Backend>,
        /// Print the worker plan as JSON and exit.
        #[arg(long)]
        dump_plan: bool,
        /// Results CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep every TCP hub inside this process.
        #[arg(long)]
        threads: bool,
    },
    /// Run the configuration at several scales.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma separated NODESxWORKERS list, e.g. "1x4,2x4,4x4".
        #[arg(long)]
        scales: String,
        #[arg(long)]
        out: PathBuf,
        /// Per-run summary CSV; defaults to OUT with a .summary.csv suffix.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Run every scale in both modes and fill the speedup column.
        #[arg(long)]
        paired: bool,
        #[arg(long)]
        backend: Option<Backend>,
        #[arg(long)]
        threads: bool,
    },
    /// Compare distributed mode, central mode and the single-process reference.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Seed for the central run only; a differing seed must yield MISMATCH.
        #[arg(long)]
        central_seed: Option<u64>,
        #[arg(long)]
        backend: Option<Backend>,
        #[arg(long)]
        threads: bool,
    },
    #[command(hide = true)]
    Node,
}

fn load(path: &Path, backend: Option<Backend>) -> Result<RunConfig> {
    let mut c = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(b) = backend {
        c.backend = b;
    }
    Ok(c)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout()),
    })
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "sweep".into());
    out.with_file_name(format!("{stem}.summary.csv"))
}

fn real_main(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::Node => Ok(ExitCode::from(launch::node_main() as u8)),
        Cmd::Run { config, mode, backend, dump_plan, out, threads } => {
            let mut c = load(&config, backend)?;
            if let Some(m) = mode {
                c.mode = m;
            }
            if dump_plan {
                let plan = c.validate()?;
                println!("{}", plan.dump_json());
                return Ok(ExitCode::SUCCESS);
            }
            if let Err(e) = c.validate() {
                eprintln!("error: {e}");
                return Ok(ExitCode::FAILURE);
            }
            let result = launch::launch(&c, HubOptions::default(), !threads);
            write_results(output(out.as_deref())?, &ResultRow::for_result(&c, &result))?;
            match result {
                Ok(o) => {
                    eprintln!(
                        "{} {} {}: {} measured iterations, mean {:.4}s",
                        c.scale(),
                        c.mode,
                        c.backend,
                        o.measured().len(),
                        o.mean_iteration_time_s()
                    );
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Cmd::Sweep { config, scales, out, summary, paired, backend, threads } => {
            let c = load(&config, backend)?;
            let scales = parse_scales(&scales)?;
            let runs = sweep(&c, &scales, paired, &|c: &RunConfig, o| launch::launch(c, o, !threads));
            write_results(output(Some(&out))?, &sweep_rows(&runs))?;
            let summary = summary.unwrap_or_else(|| summary_path(&out));
            write_summary(output(Some(&summary))?, &sweep_summary(&runs))?;
            let failed = runs.iter().filter(|r| r.result.is_err()).count();
            eprintln!("{} sub-runs, {failed} failed", runs.len());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Verify { config, central_seed, backend, threads } => {
            let c = load(&config, backend)?;
            let report = verify(&c, central_seed, &|c: &RunConfig, o| launch::launch(c, o, !threads))?;
            for m in &report.mismatches {
                eprintln!("{m}");
            }
            println!("{} ({} iterations, {} records)", report.verdict(), report.iterations, report.records_checked);
            Ok(if report.equal() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
