//! Multi-queue block layer: per-CPU submission with back-merging, pluggable
//! schedulers, a tag-limited hardware dispatch path and Q2D/D2C/Q2C records.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::device::IoOp;
use crate::error::{SimError, SimResult};
use crate::sim::SimTime;

pub const SECTOR_SIZE: u64 = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    None,
    Kyber,
    MqDeadline,
    Bfq,
}

impl SchedulerKind {
    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::None => "none",
            SchedulerKind::Kyber => "kyber",
            SchedulerKind::MqDeadline => "mq-deadline",
            SchedulerKind::Bfq => "bfq",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    pub kyber_write_target_us: u64,
    pub read_deadline_us: u64,
    pub write_deadline_us: u64,
    pub bfq_base_budget: u64,
    pub bfq_min_budget: u64,
    pub bfq_max_budget: u64,
    pub bfq_overhead_us: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            kind: SchedulerKind::Bfq,
            kyber_write_target_us: 10_000,
            read_deadline_us: 500_000,
            write_deadline_us: 5_000_000,
            bfq_base_budget: 1024,
            bfq_min_budget: 64,
            bfq_max_budget: 16384,
            bfq_overhead_us: 20,
        }
    }
}

impl SchedulerConfig {
    pub fn of(kind: SchedulerKind) -> Self {
        SchedulerConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> SimResult<()> {
        let positive = [
            (
                "scheduler.kyber_write_target_us",
                self.kyber_write_target_us,
            ),
            ("scheduler.read_deadline_us", self.read_deadline_us),
            ("scheduler.write_deadline_us", self.write_deadline_us),
            ("scheduler.bfq_base_budget", self.bfq_base_budget),
            ("scheduler.bfq_min_budget", self.bfq_min_budget),
        ];
        for (f, v) in positive {
            if v == 0 {
                return Err(SimError::config(f, "must be positive"));
            }
        }
        if self.bfq_max_budget < self.bfq_min_budget {
            return Err(SimError::config(
                "scheduler.bfq_max_budget",
                "below bfq_min_budget",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockRequest {
    pub id: u64,
    pub op: IoOp,
    pub sector: u64,
    pub size: u64,
    pub issuer: u32,
    pub cpu: u32,
    pub t_queued: SimTime,
    pub t_dispatched: Option<SimTime>,
    pub t_completed: Option<SimTime>,
    /// Requests absorbed into this one by back-merging.
    pub merged: Vec<u64>,
}

impl BlockRequest {
    pub fn sectors(&self) -> u64 {
        self.size.div_ceil(SECTOR_SIZE)
    }

    pub fn end_sector(&self) -> u64 {
        self.sector + self.sectors()
    }
}

/// Final timing of one submitted request (merged ones inherit their host's
/// dispatch and completion stamps).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoRecord {
    pub id: u64,
    pub op: IoOp,
    pub sector: u64,
    pub size: u64,
    pub issuer: u32,
    pub t_queued: SimTime,
    pub t_dispatched: SimTime,
    pub t_completed: SimTime,
    pub merged_into: Option<u64>,
}

impl IoRecord {
    pub fn q2d(&self) -> u64 {
        self.t_dispatched.as_us() - self.t_queued.as_us()
    }

    pub fn d2c(&self) -> u64 {
        self.t_completed.as_us() - self.t_dispatched.as_us()
    }

    pub fn q2c(&self) -> u64 {
        self.t_completed.as_us() - self.t_queued.as_us()
    }
}

/// Chosen request and whether choosing it required a new queue selection.
pub type Pick = (u64, bool);

#[derive(Debug, Default)]
pub struct FifoSched {
    q: VecDeque<u64>,
}

impl FifoSched {
    fn insert(&mut self, id: u64) {
        self.q.push_back(id);
    }

    fn dispatch(&mut self) -> Option<Pick> {
        self.q.pop_front().map(|id| (id, false))
    }
}

/// Reads first; the oldest write goes ahead once it has waited the target.
#[derive(Debug)]
pub struct KyberSched {
    reads: VecDeque<(u64, SimTime)>,
    writes: VecDeque<(u64, SimTime)>,
    write_target: SimTime,
}

impl KyberSched {
    pub fn new(write_target_us: u64) -> Self {
        KyberSched {
            reads: VecDeque::new(),
            writes: VecDeque::new(),
            write_target: SimTime(write_target_us),
        }
    }

    fn insert(&mut self, id: u64, op: IoOp, t_queued: SimTime) {
        match op {
            IoOp::Read => self.reads.push_back((id, t_queued)),
            IoOp::Write => self.writes.push_back((id, t_queued)),
        }
    }

    fn dispatch(&mut self, now: SimTime) -> Option<Pick> {
        let write_expired = self
            .writes
            .front()
            .is_some_and(|&(_, tq)| now.saturating_sub(tq) >= self.write_target);
        let pick = if write_expired || self.reads.is_empty() {
            self.writes.pop_front()
        } else {
            self.reads.pop_front()
        };
        pick.map(|(id, _)| (id, false))
    }
}

/// Lowest sector first unless a request has outlived its deadline, in which
/// case the most overdue one goes first.
#[derive(Debug)]
pub struct DeadlineSched {
    by_sector: BTreeSet<(u64, u64)>,
    fifo: [BTreeSet<(SimTime, u64)>; 2],
    sector_of: HashMap<u64, (u64, SimTime, IoOp)>,
    deadlines: [SimTime; 2],
}

fn op_index(op: IoOp) -> usize {
    match op {
        IoOp::Read => 0,
        IoOp::Write => 1,
    }
}

impl DeadlineSched {
    pub fn new(read_deadline_us: u64, write_deadline_us: u64) -> Self {
        DeadlineSched {
            by_sector: BTreeSet::new(),
            fifo: [BTreeSet::new(), BTreeSet::new()],
            sector_of: HashMap::new(),
            deadlines: [SimTime(read_deadline_us), SimTime(write_deadline_us)],
        }
    }

    fn insert(&mut self, id: u64, op: IoOp, sector: u64, t_queued: SimTime) {
        self.by_sector.insert((sector, id));
        self.fifo[op_index(op)].insert((t_queued, id));
        self.sector_of.insert(id, (sector, t_queued, op));
    }

    fn remove(&mut self, id: u64) {
        let (sector, tq, op) = self.sector_of.remove(&id).expect("queued request");
        self.by_sector.remove(&(sector, id));
        self.fifo[op_index(op)].remove(&(tq, id));
    }

    fn dispatch(&mut self, now: SimTime) -> Option<Pick> {
        let mut best: Option<(u64, u64)> = None; // (overdue_us, id)
        for i in 0..2 {
            if let Some(&(tq, id)) = self.fifo[i].first() {
                let age = now.saturating_sub(tq);
                if age > self.deadlines[i] {
                    let overdue = (age - self.deadlines[i]).as_us();
                    if best.is_none_or(|(o, bid)| overdue > o || (overdue == o && id < bid)) {
                        best = Some((overdue, id));
                    }
                }
            }
        }
        let id = match best {
            Some((_, id)) => id,
            None => self.by_sector.first()?.1,
        };
        self.remove(id);
        Some((id, false))
    }
}

#[derive(Debug, Default, Clone)]
struct BfqStats {
    total: u64,
    adjacent: u64,
    busy_arrivals: u64,
    last_end: Option<u64>,
}

#[derive(Debug)]
struct BfqQueue {
    fifo: VecDeque<u64>,
    budget: u64,
    served: u64,
    start: f64,
    finish: f64,
    stats: BfqStats,
}

/// Budget-based proportional share in the style of WF2Q+: each process has
/// its own queue, the in-service queue keeps the device until its budget is
/// spent or it runs dry, and the next queue is the eligible one with the
/// smallest virtual finish time.
#[derive(Debug)]
pub struct BfqSched {
    queues: HashMap<u32, BfqQueue>,
    in_service: Option<u32>,
    vtime: f64,
    base: u64,
    min: u64,
    max: u64,
    pub selections: u64,
}

/// `4^(2f - 1)`: 1/4 at f = 0, 1 at f = 0.5, 4 at f = 1.
fn budget_score(f: f64) -> f64 {
    4f64.powf(2.0 * f - 1.0)
}

pub fn bfq_assign_budget(
    base: u64,
    min: u64,
    max: u64,
    sequential_fraction: f64,
    activity_fraction: f64,
) -> u64 {
    let b = base as f64 * budget_score(sequential_fraction) * budget_score(activity_fraction);
    (b.round() as u64).clamp(min, max)
}

impl BfqStats {
    fn fractions(&self) -> (f64, f64) {
        if self.total < 2 {
            return (0.5, 0.5);
        }
        let pairs = (self.total - 1) as f64;
        (
            self.adjacent as f64 / pairs,
            self.busy_arrivals as f64 / pairs,
        )
    }
}

impl BfqSched {
    pub fn new(base: u64, min: u64, max: u64) -> Self {
        BfqSched {
            queues: HashMap::new(),
            in_service: None,
            vtime: 0.0,
            base,
            min,
            max,
            selections: 0,
        }
    }

    pub fn budget_for(&self, pid: u32) -> u64 {
        let (s, a) = self
            .queues
            .get(&pid)
            .map(|q| q.stats.fractions())
            .unwrap_or((0.5, 0.5));
        bfq_assign_budget(self.base, self.min, self.max, s, a)
    }

    fn queue(&mut self, pid: u32) -> &mut BfqQueue {
        self.queues.entry(pid).or_insert_with(|| BfqQueue {
            fifo: VecDeque::new(),
            budget: 0,
            served: 0,
            start: 0.0,
            finish: 0.0,
            stats: BfqStats::default(),
        })
    }

    fn note_arrival(&mut self, pid: u32, sector: u64, sectors: u64, busy: bool) {
        let st = &mut self.queue(pid).stats;
        if st.total > 0 {
            if st.last_end == Some(sector) {
                st.adjacent += 1;
            }
            if busy {
                st.busy_arrivals += 1;
            }
        }
        st.total += 1;
        st.last_end = Some(sector + sectors);
    }

    fn insert(&mut self, id: u64, pid: u32, sector: u64, sectors: u64) {
        let busy = self.queues.get(&pid).is_some_and(|q| !q.fifo.is_empty());
        self.note_arrival(pid, sector, sectors, busy);
        let in_service = self.in_service == Some(pid);
        let budget = self.budget_for(pid);
        let vtime = self.vtime;
        let q = self.queue(pid);
        if q.fifo.is_empty() && !in_service {
            q.start = vtime.max(q.finish);
            q.budget = budget;
            q.finish = q.start + budget as f64;
        }
        q.fifo.push_back(id);
    }

    fn backlogged(&self) -> usize {
        self.queues.values().filter(|q| !q.fifo.is_empty()).count()
    }

    fn expire(&mut self, pid: u32) {
        let budget = self.budget_for(pid);
        let q = self.queues.get_mut(&pid).expect("in-service queue");
        q.finish = q.start + q.served as f64;
        if !q.fifo.is_empty() {
            q.start = q.finish;
            q.budget = budget;
            q.finish = q.start + budget as f64;
        }
        q.served = 0;
        self.in_service = None;
    }

    fn dispatch(&mut self, live: &HashMap<u64, BlockRequest>) -> Option<Pick> {
        if let Some(pid) = self.in_service {
            let q = &self.queues[&pid];
            if !q.fifo.is_empty() && q.served < q.budget {
                let n = self.backlogged().max(1) as f64;
                let q = self.queues.get_mut(&pid).unwrap();
                let id = q.fifo.pop_front().unwrap();
                let s = live[&id].sectors();
                q.served += s;
                self.vtime += s as f64 / n;
                return Some((id, false));
            }
            self.expire(pid);
        }
        let mut eligible: Option<(f64, u32)> = None;
        let mut earliest: Option<(f64, u32)> = None;
        for (&pid, q) in &self.queues {
            if q.fifo.is_empty() {
                continue;
            }
            if q.start <= self.vtime + 1e-9
                && eligible.is_none_or(|(f, p)| q.finish < f || (q.finish == f && pid < p))
            {
                eligible = Some((q.finish, pid));
            }
            if earliest.is_none_or(|(s, p)| q.start < s || (q.start == s && pid < p)) {
                earliest = Some((q.start, pid));
            }
        }
        let pid = match (eligible, earliest) {
            (Some((_, pid)), _) => pid,
            (None, Some((s, pid))) => {
                self.vtime = s;
                pid
            }
            (None, None) => return None,
        };
        let n = self.backlogged().max(1) as f64;
        self.in_service = Some(pid);
        self.selections += 1;
        let q = self.queues.get_mut(&pid).unwrap();
        let id = q.fifo.pop_front().unwrap();
        let s = live[&id].sectors();
        q.served = s;
        self.vtime += s as f64 / n;
        Some((id, true))
    }
}

#[derive(Debug)]
pub enum Scheduler {
    None(FifoSched),
    Kyber(KyberSched),
    MqDeadline(DeadlineSched),
    Bfq(BfqSched),
}

impl Scheduler {
    pub fn new(cfg: &SchedulerConfig) -> Self {
        match cfg.kind {
            SchedulerKind::None => Scheduler::None(FifoSched::default()),
            SchedulerKind::Kyber => Scheduler::Kyber(KyberSched::new(cfg.kyber_write_target_us)),
            SchedulerKind::MqDeadline => Scheduler::MqDeadline(DeadlineSched::new(
                cfg.read_deadline_us,
                cfg.write_deadline_us,
            )),
            SchedulerKind::Bfq => Scheduler::Bfq(BfqSched::new(
                cfg.bfq_base_budget,
                cfg.bfq_min_budget,
                cfg.bfq_max_budget,
            )),
        }
    }

    fn insert(&mut self, r: &BlockRequest) {
        match self {
            Scheduler::None(s) => s.insert(r.id),
            Scheduler::Kyber(s) => s.insert(r.id, r.op, r.t_queued),
            Scheduler::MqDeadline(s) => s.insert(r.id, r.op, r.sector, r.t_queued),
            Scheduler::Bfq(s) => s.insert(r.id, r.issuer, r.sector, r.sectors()),
        }
    }

    fn note_merged(&mut self, r: &BlockRequest) {
        if let Scheduler::Bfq(s) = self {
            s.note_arrival(r.issuer, r.sector, r.sectors(), true);
        }
    }

    fn dispatch(&mut self, now: SimTime, live: &HashMap<u64, BlockRequest>) -> Option<Pick> {
        match self {
            Scheduler::None(s) => s.dispatch(),
            Scheduler::Kyber(s) => s.dispatch(now),
            Scheduler::MqDeadline(s) => s.dispatch(now),
            Scheduler::Bfq(s) => s.dispatch(live),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlkConfig {
    pub cpus: u32,
    /// Requests that may be dispatched to the device and not yet completed.
    pub hw_tags: u32,
    pub max_merge_bytes: u64,
}

impl Default for BlkConfig {
    fn default() -> Self {
        BlkConfig {
            cpus: 2,
            hw_tags: 32,
            max_merge_bytes: 128 * 1024,
        }
    }
}

impl BlkConfig {
    pub fn validate(&self) -> SimResult<()> {
        if self.cpus == 0 {
            return Err(SimError::config("blkio.cpus", "must be positive"));
        }
        if self.hw_tags == 0 {
            return Err(SimError::config("blkio.hw_tags", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Submitted {
    Queued,
    Merged { host: u64 },
}

#[derive(Debug)]
pub struct BlockLayer {
    sched: Scheduler,
    cfg: BlkConfig,
    overhead: SimTime,
    live: HashMap<u64, BlockRequest>,
    last_queued: Vec<Option<u64>>,
    next_id: u64,
    queued: usize,
    in_flight: u32,
    busy_until: SimTime,
    pub completed: Vec<IoRecord>,
    pub merges: u64,
    pub dispatches: u64,
    pub max_queued: usize,
}

impl BlockLayer {
    pub fn new(cfg: &BlkConfig, sched: &SchedulerConfig) -> SimResult<Self> {
        cfg.validate()?;
        sched.validate()?;
        let overhead = if sched.kind == SchedulerKind::Bfq {
            SimTime(sched.bfq_overhead_us)
        } else {
            SimTime::ZERO
        };
        Ok(BlockLayer {
            sched: Scheduler::new(sched),
            cfg: cfg.clone(),
            overhead,
            live: HashMap::new(),
            last_queued: vec![None; cfg.cpus as usize],
            next_id: 0,
            queued: 0,
            in_flight: 0,
            busy_until: SimTime::ZERO,
            completed: Vec::new(),
            merges: 0,
            dispatches: 0,
            max_queued: 0,
        })
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.sched
    }

    pub fn queued(&self) -> usize {
        self.queued
    }

    pub fn in_flight(&self) -> u32 {
        self.in_flight
    }

    pub fn outstanding(&self) -> usize {
        self.live.len()
    }

    pub fn request(&self, id: u64) -> Option<&BlockRequest> {
        self.live.get(&id)
    }

    /// Queues a request, back-merging it into the most recent still-queued
    /// request of the same CPU when possible.
    pub fn submit(
        &mut self,
        now: SimTime,
        op: IoOp,
        sector: u64,
        size: u64,
        issuer: u32,
        cpu: u32,
    ) -> (u64, Submitted) {
        let id = self.next_id;
        self.next_id += 1;
        let cpu = cpu % self.cfg.cpus;
        let req = BlockRequest {
            id,
            op,
            sector,
            size,
            issuer,
            cpu,
            t_queued: now,
            t_dispatched: None,
            t_completed: None,
            merged: Vec::new(),
        };
        if let Some(host_id) = self.last_queued[cpu as usize] {
            if let Some(host) = self.live.get_mut(&host_id) {
                if host.t_dispatched.is_none()
                    && host.op == op
                    && host.end_sector() == sector
                    && host.size + size <= self.cfg.max_merge_bytes
                {
                    host.size += size;
                    host.merged.push(id);
                    self.sched.note_merged(&req);
                    self.live.insert(id, req);
                    self.merges += 1;
                    return (id, Submitted::Merged { host: host_id });
                }
            }
        }
        self.sched.insert(&req);
        self.live.insert(id, req);
        self.last_queued[cpu as usize] = Some(id);
        self.queued += 1;
        self.max_queued = self.max_queued.max(self.queued);
        (id, Submitted::Queued)
    }

    /// Moves requests from the scheduler to the hardware queue while tags are
    /// free. Each entry is `(id, time it reaches the device)`; a time after
    /// `now` carries a queue-selection overhead, and no further dispatch
    /// happens until then.
    pub fn dispatch(&mut self, now: SimTime) -> Vec<(u64, SimTime)> {
        let mut out = Vec::new();
        while self.in_flight < self.cfg.hw_tags && now >= self.busy_until {
            let Some((id, new_sel)) = self.sched.dispatch(now, &self.live) else {
                break;
            };
            let at = if new_sel { now + self.overhead } else { now };
            let req = self.live.get_mut(&id).expect("scheduled request is live");
            req.t_dispatched = Some(at);
            let merged = req.merged.clone();
            for m in merged {
                self.live.get_mut(&m).expect("merged request").t_dispatched = Some(at);
            }
            self.queued -= 1;
            self.in_flight += 1;
            self.dispatches += 1;
            out.push((id, at));
            if at > now {
                self.busy_until = at;
                break;
            }
        }
        out
    }

    /// Earliest time a blocked dispatcher may run again.
    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    /// Completes a dispatched request; returns the ids of every submitted
    /// request it carried (host first).
    pub fn complete(&mut self, now: SimTime, id: u64) -> SimResult<Vec<u64>> {
        let host = self.live.remove(&id).ok_or_else(|| {
            SimError::invariant("double-completion", format!("request {id} not live"))
        })?;
        let td = host
            .t_dispatched
            .ok_or_else(|| SimError::invariant("complete-undispatched", format!("request {id}")))?;
        if host.t_completed.is_some() || now < td {
            return Err(SimError::invariant(
                "completion-order",
                format!("request {id}"),
            ));
        }
        self.in_flight -= 1;
        let mut ids = vec![id];
        let merged_total: u64 = host.merged.iter().map(|m| self.live[m].size).sum();
        self.completed.push(IoRecord {
            id,
            op: host.op,
            sector: host.sector,
            size: host.size - merged_total,
            issuer: host.issuer,
            t_queued: host.t_queued,
            t_dispatched: td,
            t_completed: now,
            merged_into: None,
        });
        for m in host.merged {
            let r = self.live.remove(&m).expect("merged request");
            self.completed.push(IoRecord {
                id: m,
                op: r.op,
                sector: r.sector,
                size: r.size,
                issuer: r.issuer,
                t_queued: r.t_queued,
                t_dispatched: td,
                t_completed: now,
                merged_into: Some(id),
            });
            ids.push(m);
        }
        Ok(ids)
    }
}
