//! Tab-separated event trace and its replay.
//!
//! Block records follow blktrace action points:
//! `ts Q|D|C id R|W sector size issuer`, and `ts M ... host` for a request
//! merged into `host`. Workload and memory records carry what the summary
//! needs beyond block I/O: `O` tab open, `X` discard, `S` switch, `F` fault,
//! `P` compressed pool traffic, `B` final CPU buckets and `E` end of run.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use crate::blkio::IoRecord;
use crate::completion::TimeBuckets;
use crate::device::IoOp;
use crate::error::{SimError, SimResult};
use crate::metrics::{FaultKind, FaultSample, Observations, RunMeta, SwitchSample};
use crate::sim::SimTime;

pub const MAGIC: &str = "#swapsim-trace\tv1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolDir {
    Store,
    Load,
}

pub struct TraceWriter {
    out: Option<Box<dyn Write>>,
}

impl TraceWriter {
    pub fn new(out: Box<dyn Write>) -> Self {
        TraceWriter { out: Some(out) }
    }

    pub fn disabled() -> Self {
        TraceWriter { out: None }
    }

    fn line(&mut self, args: std::fmt::Arguments) -> io::Result<()> {
        if let Some(o) = self.out.as_mut() {
            o.write_fmt(args)?;
            o.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn header(&mut self, meta: &RunMeta) -> io::Result<()> {
        let json = serde_json::to_string(meta).expect("meta serializes");
        self.line(format_args!("{MAGIC}"))?;
        self.line(format_args!("H\t{json}"))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn block(
        &mut self,
        ts: SimTime,
        action: char,
        id: u64,
        op: IoOp,
        sector: u64,
        size: u64,
        issuer: u32,
        host: Option<u64>,
    ) -> io::Result<()> {
        let ts = ts.as_us();
        let op = op.code();
        match host {
            Some(h) => self.line(format_args!(
                "{ts}\t{action}\t{id}\t{op}\t{sector}\t{size}\t{issuer}\t{h}"
            )),
            None => self.line(format_args!(
                "{ts}\t{action}\t{id}\t{op}\t{sector}\t{size}\t{issuer}"
            )),
        }
    }

    pub fn open(&mut self, ts: SimTime, tab: u32, footprint: u64) -> io::Result<()> {
        let ts = ts.as_us();
        self.line(format_args!("{ts}\tO\t{tab}\t{footprint}"))
    }

    pub fn discard(&mut self, ts: SimTime, tab: u32) -> io::Result<()> {
        let ts = ts.as_us();
        self.line(format_args!("{ts}\tX\t{tab}"))
    }

    pub fn switch(&mut self, ts: SimTime, s: &SwitchSample) -> io::Result<()> {
        let ts = ts.as_us();
        self.line(format_args!(
            "{ts}\tS\t{}\t{}\t{}\t{}\t{}",
            s.id, s.tab_count, s.latency_us, s.faults, s.phase
        ))
    }

    pub fn fault(&mut self, ts: SimTime, f: &FaultSample) -> io::Result<()> {
        let ts = ts.as_us();
        self.line(format_args!(
            "{ts}\tF\t{}\t{}\t{}",
            f.kind.code(),
            f.latency_us,
            u8::from(f.zswap_miss)
        ))
    }

    pub fn pool(&mut self, ts: SimTime, dir: PoolDir, bytes: u64) -> io::Result<()> {
        let ts = ts.as_us();
        let d = match dir {
            PoolDir::Store => 'S',
            PoolDir::Load => 'L',
        };
        self.line(format_args!("{ts}\tP\t{d}\t{bytes}"))
    }

    pub fn finish(&mut self, ts: SimTime, b: &TimeBuckets) -> io::Result<()> {
        let ts = ts.as_us();
        self.line(format_args!(
            "{ts}\tB\t{}\t{}\t{}\t{}",
            b.user_us, b.kernel_us, b.iowait_us, b.idle_us
        ))?;
        self.line(format_args!("{ts}\tE"))?;
        if let Some(o) = self.out.as_mut() {
            o.flush()?;
        }
        Ok(())
    }
}

struct Pending {
    op: IoOp,
    sector: u64,
    size: u64,
    issuer: u32,
    t_queued: SimTime,
    host: Option<u64>,
}

fn bad(line: usize, what: impl Into<String>) -> SimError {
    SimError::invariant("trace-format", format!("line {line}: {}", what.into()))
}

fn num<T: std::str::FromStr>(f: &[&str], i: usize, line: usize) -> SimResult<T> {
    f.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(line, format!("field {i} missing or malformed")))
}

/// Re-derives the observation log of a run from its trace.
pub fn replay<R: BufRead>(input: R) -> SimResult<(RunMeta, Observations)> {
    let mut lines = input.lines().enumerate();
    let io_err = |e: io::Error| SimError::invariant("trace-io", e.to_string());
    match lines.next() {
        Some((_, Ok(l))) if l == MAGIC => {}
        _ => return Err(bad(1, "missing trace header")),
    }
    let meta: RunMeta = match lines.next() {
        Some((_, Ok(l))) if l.starts_with("H\t") => {
            serde_json::from_str(&l[2..]).map_err(|e| bad(2, e.to_string()))?
        }
        _ => return Err(bad(2, "missing run metadata")),
    };
    let mut obs = Observations::default();
    let mut pending: HashMap<u64, Pending> = HashMap::new();
    let mut dispatched: HashMap<u64, SimTime> = HashMap::new();
    let mut ended = false;
    for (i, l) in lines {
        let l = l.map_err(io_err)?;
        let n = i + 1;
        if ended {
            return Err(bad(n, "record after end of run"));
        }
        let f: Vec<&str> = l.split('\t').collect();
        let ts = SimTime(num(&f, 0, n)?);
        let kind = *f.get(1).ok_or_else(|| bad(n, "no record type"))?;
        match kind {
            "Q" | "M" | "D" | "C" => {
                let id: u64 = num(&f, 2, n)?;
                let op = f
                    .get(3)
                    .and_then(|s| IoOp::from_code(s))
                    .ok_or_else(|| bad(n, "bad op"))?;
                let sector = num(&f, 4, n)?;
                let size = num(&f, 5, n)?;
                let issuer = num(&f, 6, n)?;
                match kind {
                    "Q" => {
                        match op {
                            IoOp::Read => {
                                obs.queued_reads += 1;
                                obs.swap_in_bytes += size;
                            }
                            IoOp::Write => {
                                obs.queued_writes += 1;
                                obs.swap_out_bytes += size;
                            }
                        }
                        let p = Pending {
                            op,
                            sector,
                            size,
                            issuer,
                            t_queued: ts,
                            host: None,
                        };
                        if pending.insert(id, p).is_some() {
                            return Err(bad(n, format!("request {id} queued twice")));
                        }
                    }
                    "M" => {
                        let host: u64 = num(&f, 7, n)?;
                        let p = pending
                            .get_mut(&id)
                            .ok_or_else(|| bad(n, "merge of unknown request"))?;
                        p.host = Some(host);
                        obs.merges += 1;
                    }
                    "D" => {
                        dispatched.insert(id, ts);
                    }
                    _ => {
                        let p = pending
                            .remove(&id)
                            .ok_or_else(|| bad(n, "completion of unknown request"))?;
                        let via = p.host.unwrap_or(id);
                        let td = *dispatched
                            .get(&via)
                            .ok_or_else(|| bad(n, "completion before dispatch"))?;
                        obs.ios.push(IoRecord {
                            id,
                            op: p.op,
                            sector: p.sector,
                            size: p.size,
                            issuer: p.issuer,
                            t_queued: p.t_queued,
                            t_dispatched: td,
                            t_completed: ts,
                            merged_into: p.host,
                        });
                    }
                }
            }
            "O" => obs.opens += 1,
            "X" => {
                obs.discards += 1;
                obs.opened_at_first_discard.get_or_insert(obs.opens);
            }
            "S" => obs.switches.push(SwitchSample {
                id: num(&f, 2, n)?,
                tab_count: num(&f, 3, n)?,
                latency_us: num(&f, 4, n)?,
                faults: num(&f, 5, n)?,
                phase: num(&f, 6, n)?,
            }),
            "F" => {
                let kind = f
                    .get(2)
                    .and_then(|s| FaultKind::from_code(s))
                    .ok_or_else(|| bad(n, "bad fault kind"))?;
                let miss: u8 = num(&f, 4, n)?;
                obs.faults.push(FaultSample {
                    kind,
                    latency_us: num(&f, 3, n)?,
                    zswap_miss: miss == 1,
                });
            }
            "P" => {
                let bytes: u64 = num(&f, 3, n)?;
                match f.get(2).copied() {
                    Some("S") => obs.pool_store_bytes += bytes,
                    Some("L") => obs.pool_load_bytes += bytes,
                    _ => return Err(bad(n, "bad pool direction")),
                }
            }
            "B" => {
                obs.buckets = TimeBuckets {
                    user_us: num(&f, 2, n)?,
                    kernel_us: num(&f, 3, n)?,
                    iowait_us: num(&f, 4, n)?,
                    idle_us: num(&f, 5, n)?,
                };
            }
            "E" => {
                obs.elapsed = ts;
                ended = true;
            }
            other => return Err(bad(n, format!("unknown record `{other}`"))),
        }
    }
    if !ended {
        return Err(bad(0, "trace ends without an end record"));
    }
    if !pending.is_empty() {
        return Err(bad(
            0,
            format!("{} requests never completed", pending.len()),
        ));
    }
    Ok((meta, obs))
}
