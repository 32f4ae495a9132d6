//! I/O completion mechanisms and the CPU occupancy model.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::device::IoOp;
use crate::error::{SimError, SimResult};
use crate::sim::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompletionMode {
    Irq,
    Polling,
    Hybrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionConfig {
    pub mode: CompletionMode,
    /// Fixed sleep for hybrid mode; 0 selects the adaptive estimate.
    pub hybrid_sleep_us: u64,
    pub context_switch_us: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            mode: CompletionMode::Irq,
            hybrid_sleep_us: 0,
            context_switch_us: 5,
        }
    }
}

impl CompletionConfig {
    pub fn of(mode: CompletionMode, hybrid_sleep_us: u64) -> Self {
        CompletionConfig {
            mode,
            hybrid_sleep_us,
            ..Default::default()
        }
    }

    pub fn adaptive(&self) -> bool {
        self.mode == CompletionMode::Hybrid && self.hybrid_sleep_us == 0
    }

    pub fn label(&self) -> String {
        match self.mode {
            CompletionMode::Irq => "irq".into(),
            CompletionMode::Polling => "polling".into(),
            CompletionMode::Hybrid => format!("hybrid(t={})", self.hybrid_sleep_us),
        }
    }
}

/// Observed latency of an interrupt-driven wait for device time `d`.
pub fn irq_latency(d: SimTime, ctx: SimTime) -> SimTime {
    d + ctx
}

pub fn polling_latency(d: SimTime) -> SimTime {
    d
}

/// Sleep `t`, then poll. A completion that lands during the sleep pays the
/// wake-up context switch.
pub fn hybrid_latency(d: SimTime, t: SimTime, ctx: SimTime) -> SimTime {
    if d <= t {
        d + ctx
    } else {
        d
    }
}

/// Core time spent busy-polling under hybrid mode.
pub fn hybrid_poll_time(d: SimTime, t: SimTime) -> SimTime {
    d.saturating_sub(t)
}

/// Exact running mean of completion times per operation type.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CompletionEstimator {
    sum: [u128; 2],
    count: [u64; 2],
}

fn idx(op: IoOp) -> usize {
    match op {
        IoOp::Read => 0,
        IoOp::Write => 1,
    }
}

impl CompletionEstimator {
    pub fn record(&mut self, op: IoOp, completion: SimTime) {
        self.sum[idx(op)] += completion.as_us() as u128;
        self.count[idx(op)] += 1;
    }

    pub fn samples(&self, op: IoOp) -> u64 {
        self.count[idx(op)]
    }

    pub fn mean(&self, op: IoOp) -> Option<f64> {
        let n = self.count[idx(op)];
        (n > 0).then(|| self.sum[idx(op)] as f64 / n as f64)
    }

    /// Half the mean completion time, rounded down to whole microseconds;
    /// zero without samples.
    pub fn adaptive_sleep_estimate(&self, op: IoOp) -> SimTime {
        let n = self.count[idx(op)] as u128;
        if n == 0 {
            return SimTime::ZERO;
        }
        SimTime((self.sum[idx(op)] / (2 * n)) as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activity {
    User,
    Kernel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeBuckets {
    pub user_us: u64,
    pub kernel_us: u64,
    pub iowait_us: u64,
    pub idle_us: u64,
}

impl TimeBuckets {
    pub fn total(&self) -> u64 {
        self.user_us + self.kernel_us + self.iowait_us + self.idle_us
    }
}

pub type Pid = u32;

/// Cores with user/kernel/iowait/idle accounting. A core with nothing to run
/// accrues iowait while any process sleeps on I/O, idle otherwise.
#[derive(Debug)]
pub struct CpuModel {
    running: Vec<Option<(Pid, Activity)>>,
    ready: VecDeque<(Pid, Activity)>,
    io_sleepers: u32,
    last: SimTime,
    pub buckets: TimeBuckets,
    pub per_core: Vec<TimeBuckets>,
}

impl CpuModel {
    pub fn new(cores: u32) -> Self {
        CpuModel {
            running: vec![None; cores as usize],
            ready: VecDeque::new(),
            io_sleepers: 0,
            last: SimTime::ZERO,
            buckets: TimeBuckets::default(),
            per_core: vec![TimeBuckets::default(); cores as usize],
        }
    }

    pub fn cores(&self) -> u32 {
        self.running.len() as u32
    }

    /// Integrates bucket time up to `now`.
    pub fn advance(&mut self, now: SimTime) {
        if now <= self.last {
            return;
        }
        let dt = (now - self.last).as_us();
        for (core, slot) in self.running.iter().enumerate() {
            let b = &mut self.per_core[core];
            let which = match slot {
                Some((_, Activity::User)) => &mut b.user_us,
                Some((_, Activity::Kernel)) => &mut b.kernel_us,
                None if self.io_sleepers > 0 => &mut b.iowait_us,
                None => &mut b.idle_us,
            };
            *which += dt;
        }
        self.buckets = self
            .per_core
            .iter()
            .fold(TimeBuckets::default(), |a, b| TimeBuckets {
                user_us: a.user_us + b.user_us,
                kernel_us: a.kernel_us + b.kernel_us,
                iowait_us: a.iowait_us + b.iowait_us,
                idle_us: a.idle_us + b.idle_us,
            });
        self.last = now;
    }

    pub fn core_of(&self, pid: Pid) -> Option<u32> {
        self.running
            .iter()
            .position(|s| s.is_some_and(|(p, _)| p == pid))
            .map(|c| c as u32)
    }

    pub fn is_running(&self, pid: Pid) -> bool {
        self.core_of(pid).is_some()
    }

    /// Puts `pid` on a free core, or queues it. Returns the core when it runs
    /// immediately.
    pub fn acquire(&mut self, now: SimTime, pid: Pid, act: Activity) -> Option<u32> {
        self.advance(now);
        if let Some(c) = self.core_of(pid) {
            self.running[c as usize] = Some((pid, act));
            return Some(c);
        }
        match self.running.iter().position(|s| s.is_none()) {
            Some(c) => {
                self.running[c] = Some((pid, act));
                Some(c as u32)
            }
            None => {
                if !self.ready.iter().any(|&(p, _)| p == pid) {
                    self.ready.push_back((pid, act));
                }
                None
            }
        }
    }

    pub fn set_activity(&mut self, now: SimTime, pid: Pid, act: Activity) -> SimResult<()> {
        self.advance(now);
        let c = self.core_of(pid).ok_or_else(|| {
            SimError::invariant("cpu-activity", format!("pid {pid} not on a core"))
        })?;
        self.running[c as usize] = Some((pid, act));
        Ok(())
    }

    /// Frees the core held by `pid`; the next ready process (if any) takes it
    /// and is returned so the caller can resume it.
    pub fn release(&mut self, now: SimTime, pid: Pid) -> Option<(Pid, u32)> {
        self.advance(now);
        let c = self.core_of(pid)?;
        self.running[c as usize] = None;
        let (next, act) = self.ready.pop_front()?;
        self.running[c as usize] = Some((next, act));
        Some((next, c))
    }

    pub fn io_sleep(&mut self, now: SimTime) {
        self.advance(now);
        self.io_sleepers += 1;
    }

    pub fn io_wake(&mut self, now: SimTime) {
        self.advance(now);
        self.io_sleepers = self.io_sleepers.saturating_sub(1);
    }

    pub fn check_conservation(&self, elapsed: SimTime) -> SimResult<()> {
        let expected = self.cores() as u64 * elapsed.as_us();
        if self.buckets.total() != expected {
            return Err(SimError::invariant(
                "time-bucket-conservation",
                format!(
                    "buckets {} != cores x elapsed {}",
                    self.buckets.total(),
                    expected
                ),
            ));
        }
        Ok(())
    }
}
