use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use swapsim::runner::{self, comparison_table, replay_check, run_to_dir, write_summary_csv};

#[derive(Parser)]
#[command(
    name = "swapsim",
    version,
    about = "Memory-pressure simulator for DRAM + swap backends"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its trace, CSVs and summary.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: out/<scenario>-s<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several scenarios on the same seed and print a comparison table.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        seed: u64,
        /// Also write one summary.csv row per run here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Rebuild the report from a trace.
    Replay {
        trace: PathBuf,
        /// Compare against the summary.json next to the trace.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
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
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(runner::exit_code(&e) as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run { config, seed, out } => {
            let mut cfg = runner::load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out =
                out.unwrap_or_else(|| PathBuf::from(format!("out/{}-s{}", cfg.name, cfg.seed)));
            let run = run_to_dir(&cfg, &out)?;
            let r = &run.report;
            println!(
                "scenario {} seed {} -> {}",
                r.scenario,
                r.seed,
                out.display()
            );
            println!(
                "tabs before first discard: {}",
                r.tabs_before_first_discard
                    .map_or("none".into(), |t| t.to_string())
            );
            if let Some(s) = r.switch_latency {
                println!(
                    "switch latency us: mean {:.0} p50 {} p90 {} p99 {} max {}",
                    s.mean_us, s.p50_us, s.p90_us, s.p99_us, s.max_us
                );
            }
            println!(
                "swap in/out bytes: {} / {}",
                r.swap_in_bytes, r.swap_out_bytes
            );
            println!("energy pJ: {:.4e}", r.energy_total_pj);
        }
        Cmd::Compare { configs, seed, csv } => {
            let mut cfgs = Vec::with_capacity(configs.len());
            for p in &configs {
                let mut c = runner::load_config(p)?;
                c.seed = seed;
                cfgs.push(c);
            }
            let reports = runner::compare(&cfgs)?;
            print!("{}", comparison_table(&reports));
            if let Some(path) = csv {
                write_summary_csv(&path, &reports)?;
            }
        }
        Cmd::Replay {
            trace,
            check,
            summary,
        } => {
            if check {
                let r = replay_check(&trace, summary.as_deref())?;
                println!("replay ok: {} seed {}", r.scenario, r.seed);
            } else {
                let file = std::fs::File::open(&trace)?;
                let (meta, obs) = swapsim::trace::replay(std::io::BufReader::new(file))?;
                let r = swapsim::metrics::RunReport::build(&meta, &obs);
                println!("{}", serde_json::to_string_pretty(&r)?);
            }
        }
    }
    Ok(())
}
