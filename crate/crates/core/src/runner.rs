//! Run artifacts on disk, side-by-side comparison and trace replay checks.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::engine::{RunOutput, Simulator};
use crate::error::SimError;
use crate::metrics::RunReport;
use crate::trace::{replay, TraceWriter};

pub const SCHEMA_VERSION: u32 = 1;
pub const TRACE_FILE: &str = "trace.tsv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| SimError::config("<file>", format!("{}: {e}", path.display())))?;
    Ok(ScenarioConfig::from_json(&text)?)
}

#[derive(Serialize)]
struct SwitchRow {
    switch_id: u64,
    tab_count: u32,
    latency_us: u64,
    faults: u32,
}

#[derive(Serialize)]
struct BlkRow {
    id: u64,
    op: char,
    sector: u64,
    size: u64,
    issuer: u32,
    t_queued_us: u64,
    t_dispatched_us: u64,
    t_completed_us: u64,
    merged_into: Option<u64>,
    q2d_us: u64,
    d2c_us: u64,
    q2c_us: u64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    schema_version: u32,
    scenario: &'a str,
    seed: u64,
    tabs_opened: u32,
    tabs_before_first_discard: Option<u32>,
    discards: u32,
    switches: u64,
    switch_mean_us: Option<f64>,
    switch_p50_us: Option<u64>,
    switch_p90_us: Option<u64>,
    switch_p99_us: Option<u64>,
    switch_max_us: Option<u64>,
    swap_in_bytes: u64,
    swap_out_bytes: u64,
    zswap_hit_rate: Option<f64>,
    energy_total_pj: f64,
    write_rate_bytes_per_s: f64,
    lifetime_realistic_years: Option<f64>,
    elapsed_us: u64,
}

impl<'a> SummaryRow<'a> {
    fn of(r: &'a RunReport) -> Self {
        let s = r.switch_latency;
        SummaryRow {
            schema_version: SCHEMA_VERSION,
            scenario: &r.scenario,
            seed: r.seed,
            tabs_opened: r.tabs_opened,
            tabs_before_first_discard: r.tabs_before_first_discard,
            discards: r.discards,
            switches: s.map_or(0, |s| s.count),
            switch_mean_us: s.map(|s| s.mean_us),
            switch_p50_us: s.map(|s| s.p50_us),
            switch_p90_us: s.map(|s| s.p90_us),
            switch_p99_us: s.map(|s| s.p99_us),
            switch_max_us: s.map(|s| s.max_us),
            swap_in_bytes: r.swap_in_bytes,
            swap_out_bytes: r.swap_out_bytes,
            zswap_hit_rate: r.zswap_hit_rate,
            energy_total_pj: r.energy_total_pj,
            write_rate_bytes_per_s: r.lifetime.write_rate_bytes_per_s,
            lifetime_realistic_years: r.lifetime.realistic.years(),
            elapsed_us: r.elapsed_us,
        }
    }
}

fn summary_json(r: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

/// Runs `cfg` and writes `trace.tsv`, `switches.csv`, `blkio.csv`,
/// `summary.csv`, `summary.json` and the resolved `config.json` into `out`.
pub fn run_to_dir(cfg: &ScenarioConfig, out: &Path) -> Result<RunOutput> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let trace = File::create(out.join(TRACE_FILE)).context("creating trace")?;
    let sim = Simulator::new(cfg, TraceWriter::new(Box::new(BufWriter::new(trace))))?;
    let run = sim.run()?;

    let mut w = csv::Writer::from_path(out.join("switches.csv"))?;
    for s in &run.obs.switches {
        w.serialize(SwitchRow {
            switch_id: s.id,
            tab_count: s.tab_count,
            latency_us: s.latency_us,
            faults: s.faults,
        })?;
    }
    w.flush()?;

    let mut ios = run.obs.ios.clone();
    ios.sort_by_key(|r| r.id);
    let mut w = csv::Writer::from_path(out.join("blkio.csv"))?;
    for r in &ios {
        w.serialize(BlkRow {
            id: r.id,
            op: r.op.code(),
            sector: r.sector,
            size: r.size,
            issuer: r.issuer,
            t_queued_us: r.t_queued.as_us(),
            t_dispatched_us: r.t_dispatched.as_us(),
            t_completed_us: r.t_completed.as_us(),
            merged_into: r.merged_into,
            q2d_us: r.q2d(),
            d2c_us: r.d2c(),
            q2c_us: r.q2c(),
        })?;
    }
    w.flush()?;

    write_summary_csv(&out.join("summary.csv"), [&run.report])?;
    fs::write(out.join(SUMMARY_FILE), summary_json(&run.report))?;
    let mut config = serde_json::to_string_pretty(cfg)?;
    config.push('\n');
    fs::write(out.join("config.json"), config)?;
    Ok(run)
}

pub fn write_summary_csv<'a>(
    path: &Path,
    reports: impl IntoIterator<Item = &'a RunReport>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(SummaryRow::of(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds the report from `trace` and checks it byte for byte against the
/// `summary.json` stored beside it (or `summary` when given).
pub fn replay_check(trace: &Path, summary: Option<&Path>) -> Result<RunReport> {
    let file = File::open(trace).with_context(|| format!("opening {}", trace.display()))?;
    let (meta, obs) = replay(BufReader::new(file))?;
    let report = RunReport::build(&meta, &obs);
    let summary: PathBuf = match summary {
        Some(p) => p.to_path_buf(),
        None => trace.with_file_name(SUMMARY_FILE),
    };
    let stored =
        fs::read_to_string(&summary).with_context(|| format!("reading {}", summary.display()))?;
    let rebuilt = summary_json(&report);
    if stored != rebuilt {
        let a: serde_json::Value =
            serde_json::from_str(&stored).context("parsing stored summary")?;
        let b: serde_json::Value = serde_json::from_str(&rebuilt)?;
        let keys: Vec<String> = match (a.as_object(), b.as_object()) {
            (Some(a), Some(b)) => b
                .keys()
                .filter(|k| a.get(*k) != b.get(*k))
                .cloned()
                .collect(),
            _ => vec!["<document>".into()],
        };
        let keys = if keys.is_empty() {
            "formatting".to_string()
        } else {
            keys.join(", ")
        };
        return Err(SimError::invariant(
            "replay-equality",
            format!("trace disagrees with summary on: {keys}"),
        )
        .into());
    }
    Ok(report)
}

/// Headline metrics shown by [`compare`].
pub fn headline(r: &RunReport) -> Vec<(&'static str, Option<f64>)> {
    let s = r.switch_latency;
    vec![
        (
            "tabs_before_first_discard",
            r.tabs_before_first_discard.map(f64::from),
        ),
        ("tabs_opened", Some(r.tabs_opened as f64)),
        ("switch_mean_us", s.map(|s| s.mean_us)),
        ("switch_p50_us", s.map(|s| s.p50_us as f64)),
        ("switch_p90_us", s.map(|s| s.p90_us as f64)),
        ("switch_p99_us", s.map(|s| s.p99_us as f64)),
        ("swap_in_bytes", Some(r.swap_in_bytes as f64)),
        ("swap_out_bytes", Some(r.swap_out_bytes as f64)),
        ("zswap_hit_rate", r.zswap_hit_rate),
        ("q2c_mean_us", r.blk.q2c.map(|q| q.mean_us)),
        ("q2c_p99_us", r.blk.q2c.map(|q| q.p99_us as f64)),
        ("energy_total_pj", Some(r.energy_total_pj)),
        (
            "write_rate_bytes_per_s",
            Some(r.lifetime.write_rate_bytes_per_s),
        ),
    ]
}

/// Runs every config (in parallel) and returns their reports in order.
/// Configs must share a seed so they see the same workload.
pub fn compare(cfgs: &[ScenarioConfig]) -> Result<Vec<RunReport>> {
    if cfgs.len() < 2 {
        return Err(SimError::config("configs", "compare needs at least two configs").into());
    }
    if let Some(c) = cfgs.iter().find(|c| c.seed != cfgs[0].seed) {
        return Err(SimError::config(
            "seed",
            format!(
                "`{}` uses seed {} but `{}` uses {}",
                c.name, c.seed, cfgs[0].name, cfgs[0].seed
            ),
        )
        .into());
    }
    let results: Vec<Result<RunOutput, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfgs
            .iter()
            .map(|c| s.spawn(move || crate::engine::simulate(c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?.report);
    }
    Ok(out)
}

/// Aligned text table of [`headline`] metrics; every column after the first
/// carries its ratio to the first.
pub fn comparison_table(reports: &[RunReport]) -> String {
    if reports.is_empty() {
        return String::new();
    }
    let rows: Vec<Vec<(&str, Option<f64>)>> = reports.iter().map(headline).collect();
    let mut cells: Vec<Vec<String>> = vec![std::iter::once("metric".to_string())
        .chain(reports.iter().map(|r| r.scenario.clone()))
        .collect()];
    for (i, (name, base)) in rows[0].iter().enumerate() {
        let mut line = vec![name.to_string()];
        for (j, row) in rows.iter().enumerate() {
            let v = row[i].1;
            line.push(match (v, base) {
                (None, _) => "-".into(),
                (Some(v), _) if j == 0 => fmt_num(v),
                (Some(v), Some(b)) if *b != 0.0 => format!("{} ({:.3}x)", fmt_num(v), v / b),
                (Some(v), _) => fmt_num(v),
            });
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for l in &cells {
        let padded: Vec<String> = l
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        s.push_str(padded.join("  ").trim_end());
        s.push('\n');
    }
    s
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else if v.abs() >= 1e6 {
        format!("{v:.4e}")
    } else {
        format!("{v:.3}")
    }
}

/// Exit status for an error surfaced by the CLI.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    e.downcast_ref::<SimError>().map_or(1, SimError::exit_code)
}
