//! The simulated machine: the browser workload, the memory manager with
//! kswapd, and the swap stack (ZRAM, or Zswap + block layer + device), all
//! driven from one event queue.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::blkio::{BlockLayer, IoRecord, Submitted};
use crate::completion::{Activity, CompletionEstimator, CompletionMode, CpuModel, Pid};
use crate::config::{ScenarioConfig, SwapBackend};
use crate::device::{DeviceModel, EnergyMeter, IoOp, MemTarget};
use crate::error::{SimError, SimResult};
use crate::metrics::{FaultKind, FaultSample, Observations, RunMeta, RunReport, SwitchSample};
use crate::sim::{rng_for, EventQueue, SimTime, Stream};
use crate::swapcache::{CompressionModel, StoreOutcome, ZramDevice, ZswapPool};
use crate::trace::{PoolDir, TraceWriter};
use crate::vmm::{sector_of, MemoryLedger, PageState, PageTable, SwapSlots, Watermarks, NO_SLOT};
use crate::workload::{available_mem, sample_footprint, Action, PressureTest, TabTable, PAGE_SIZE};

pub const FG: Pid = 1;
pub const KSWAPD: Pid = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Ev {
    Step,
    Kick,
    Dispatched(u64),
    DeviceDone(u64),
    HybridTimer(u64),
    Kswapd,
}

#[derive(Clone, Copy, Debug)]
enum ReqKind {
    Fault,
    Writeback { vpn: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kswapd {
    Sleeping,
    Running,
    Throttled,
}

#[derive(Clone, Copy, Debug)]
struct IoWait {
    req: u64,
    vpn: u64,
    write: bool,
    start: SimTime,
    sleeping: bool,
    token: u64,
}

#[derive(Clone, Copy, Debug)]
enum Fg {
    Runnable,
    WaitIo(IoWait),
    WaitFrame,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Evicted {
    Freed,
    Writeback,
    Failed,
}

struct Current {
    open: bool,
    tab: u32,
    start: SimTime,
    faults: u32,
    pages: Vec<u64>,
    idx: usize,
    rendered: bool,
    phase: u8,
}

/// Counters that are not part of the trace-derived report.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct EngineStats {
    pub events: u64,
    pub kswapd_wakeups: u64,
    pub kswapd_evictions: u64,
    pub direct_evictions: u64,
    pub clean_drops: u64,
    pub zswap_stores: u64,
    pub zswap_evictions: u64,
    pub zswap_bypasses: u64,
    pub zram_stores: u64,
    pub max_queued: usize,
    pub max_device_busy: u32,
}

pub struct RunOutput {
    pub meta: RunMeta,
    pub obs: Observations,
    pub report: RunReport,
    pub stats: EngineStats,
}

pub struct Simulator {
    cfg: ScenarioConfig,
    q: EventQueue<Ev>,
    rng_wl: ChaCha8Rng,
    rng_dev: ChaCha8Rng,
    rng_comp: ChaCha8Rng,
    trace: TraceWriter,
    meta: RunMeta,

    tabs: TabTable,
    test: PressureTest,
    pt: PageTable,
    dram_pages: u64,
    wm: Watermarks,
    discard_threshold: u64,
    allocated: u64,
    cached_slots: u64,
    read_frames: u64,
    writeback_of: HashMap<u64, u64>,

    comp: CompressionModel,
    zram: Option<ZramDevice>,
    zswap: Option<ZswapPool>,
    slots: Option<SwapSlots>,
    blk: Option<BlockLayer>,
    dev: Option<DeviceModel>,
    reqs: HashMap<u64, ReqKind>,
    writes_in_flight: u32,
    kick_pending: bool,

    cpu: CpuModel,
    est: CompletionEstimator,
    energy: EnergyMeter,

    fg: Fg,
    cur: Option<Current>,
    acc: f64,
    token: u64,
    kswapd: Kswapd,
    switch_seq: u64,

    obs: Observations,
    stats: EngineStats,
}

fn io_err(e: std::io::Error) -> SimError {
    SimError::invariant("trace-io", e.to_string())
}

impl Simulator {
    pub fn new(cfg: &ScenarioConfig, trace: TraceWriter) -> SimResult<Self> {
        cfg.validate()?;
        let dram_pages = cfg.dram_pages();
        let scale = cfg.scale_divisor;
        let (zram, slots, blk, dev, capacity) = match &cfg.swap {
            SwapBackend::Zram {
                physical_bytes,
                logical_bytes,
            } => {
                let z = ZramDevice::new(physical_bytes / scale, logical_bytes / scale, 3);
                (Some(z), None, None, None, 0)
            }
            SwapBackend::Device(d) => {
                let mut d = d.clone();
                d.capacity_bytes /= scale;
                let n = cfg.swap_pages();
                let blk = BlockLayer::new(&cfg.blkio, &cfg.scheduler)?;
                (
                    None,
                    Some(SwapSlots::new(n)),
                    Some(blk),
                    Some(DeviceModel::new(&d)?),
                    n * PAGE_SIZE,
                )
            }
        };
        let zswap = cfg.zswap.enabled.then(|| {
            let max = (dram_pages * PAGE_SIZE) as f64 * cfg.zswap.max_pool_percent / 100.0;
            ZswapPool::new(max as u64)
        });
        let meta = RunMeta {
            scenario: cfg.name.clone(),
            seed: cfg.seed,
            swap_capacity_bytes: capacity,
            endurance: cfg.engine.endurance_cycles,
            nvm_set_fraction: cfg.engine.nvm_set_fraction,
            bucket_width: cfg.workload.bucket_width,
            high_latency_us: cfg.scaled_us(cfg.workload.tolerable_latency_us),
            cores: cfg.blkio.cpus,
        };
        Ok(Simulator {
            cfg: cfg.clone(),
            q: EventQueue::new(),
            rng_wl: rng_for(cfg.seed, Stream::Workload),
            rng_dev: rng_for(cfg.seed, Stream::Device),
            rng_comp: rng_for(cfg.seed, Stream::Compression),
            trace,
            meta,
            tabs: TabTable::new(),
            test: PressureTest::new(),
            pt: PageTable::new(),
            dram_pages,
            wm: Watermarks::for_dram(dram_pages),
            discard_threshold: cfg.discard_threshold_pages(),
            allocated: 0,
            cached_slots: 0,
            read_frames: 0,
            writeback_of: HashMap::new(),
            comp: CompressionModel::new(&cfg.compression)?,
            zram,
            zswap,
            slots,
            blk,
            dev,
            reqs: HashMap::new(),
            writes_in_flight: 0,
            kick_pending: false,
            cpu: CpuModel::new(cfg.blkio.cpus),
            est: CompletionEstimator::default(),
            energy: EnergyMeter::new(cfg.engine.nvm_set_fraction),
            fg: Fg::Runnable,
            cur: None,
            acc: 0.0,
            token: 0,
            kswapd: Kswapd::Sleeping,
            switch_seq: 0,
            obs: Observations::default(),
            stats: EngineStats::default(),
        })
    }

    pub fn run(mut self) -> SimResult<RunOutput> {
        self.trace.header(&self.meta).map_err(io_err)?;
        self.cpu.acquire(SimTime::ZERO, FG, Activity::User);
        self.q.schedule(SimTime::ZERO, Ev::Step)?;
        let audit = self.cfg.engine.audit_interval;
        while let Some((t, _, ev)) = self.q.pop() {
            self.stats.events += 1;
            if self.stats.events > self.cfg.engine.max_events {
                return Err(SimError::invariant(
                    "event-budget",
                    format!("more than {} events", self.cfg.engine.max_events),
                ));
            }
            self.cpu.advance(t);
            match ev {
                Ev::Step => self.fg_step()?,
                Ev::Kick => {
                    self.kick_pending = false;
                    self.pump()?;
                }
                Ev::Dispatched(id) => self.device_start(id)?,
                Ev::DeviceDone(id) => self.device_done(id)?,
                Ev::HybridTimer(tok) => self.hybrid_timer(tok),
                Ev::Kswapd => self.kswapd_run()?,
            }
            self.check_event()?;
            if audit > 0 && self.stats.events.is_multiple_of(audit) {
                self.audit()?;
            }
        }
        self.finish()
    }

    fn now(&self) -> SimTime {
        self.q.now()
    }

    // ---- memory accounting ----

    fn ledger(&self) -> MemoryLedger {
        MemoryLedger {
            dram_total: self.dram_pages,
            dram_working_used: self.pt.resident + self.writeback_of.len() as u64 + self.read_frames,
            zswap_pool_used: self.zswap.as_ref().map_or(0, |z| z.used_bytes),
            zram_pool_used: self.zram.as_ref().map_or(0, |z| z.used_physical),
        }
    }

    fn free_frames(&self) -> u64 {
        self.ledger().free()
    }

    fn free_swap_slots(&self) -> u64 {
        match (&self.zram, &self.slots) {
            (Some(z), _) => z.free_slots(),
            (_, Some(s)) => s.free(),
            _ => 0,
        }
    }

    pub fn available_mem(&self) -> u64 {
        available_mem(
            self.free_frames(),
            self.free_swap_slots(),
            self.cfg.workload.ram_vs_swap_weight,
        )
    }

    fn tab_range(tabs: &TabTable, id: u32) -> std::ops::Range<u64> {
        let t = tabs.get(id);
        t.first_vpn..t.first_vpn + t.footprint
    }

    fn release_slot(&mut self, slot: u64) -> SimResult<()> {
        self.slots
            .as_mut()
            .ok_or_else(|| SimError::invariant("swap-slot", "no device backend"))?
            .release(slot)
    }

    fn drop_cached(&mut self, vpn: u64) -> SimResult<()> {
        let c = self.pt.pte(vpn).cached_slot;
        if c != NO_SLOT {
            self.pt.pte_mut(vpn).cached_slot = NO_SLOT;
            self.cached_slots -= 1;
            self.release_slot(c as u64)?;
        }
        Ok(())
    }

    // ---- foreground process ----

    fn fg_step(&mut self) -> SimResult<()> {
        if !matches!(self.fg, Fg::Runnable) {
            return Err(SimError::invariant("fg-state", "step while blocked"));
        }
        let quantum = self.cfg.engine.cpu_quantum_us as f64;
        loop {
            let now = self.now();
            if self.cur.is_none() {
                match self
                    .test
                    .next(&self.cfg.workload, &self.tabs, &mut self.rng_wl)
                {
                    Action::Done => {
                        self.fg = Fg::Done;
                        self.cpu.release(now, FG);
                        return Ok(());
                    }
                    Action::Open => self.begin_open()?,
                    Action::Switch(id) => self.begin_switch(id)?,
                }
            }
            if self.acc >= quantum {
                return self.flush_burst();
            }
            let cur = self.cur.as_ref().expect("current action");
            if cur.idx == cur.pages.len() {
                if self.acc >= 1.0 {
                    return self.flush_burst();
                }
                if !cur.rendered {
                    let open = cur.open;
                    let cost = if open {
                        self.cfg.workload.open_render_cost_us
                    } else {
                        self.cfg.workload.switch_render_cost_us
                    };
                    self.cur.as_mut().expect("current action").rendered = true;
                    self.cpu.set_activity(now, FG, Activity::User)?;
                    self.q
                        .schedule(now + SimTime(self.cfg.scaled_us(cost)), Ev::Step)?;
                    return Ok(());
                }
                self.finish_action()?;
                continue;
            }
            let vpn = cur.pages[cur.idx];
            if !self.touch(vpn)? {
                return Ok(());
            }
            self.cur.as_mut().expect("current action").idx += 1;
        }
    }

    /// Charges accumulated kernel CPU time before continuing.
    fn flush_burst(&mut self) -> SimResult<()> {
        let now = self.now();
        let whole = self.acc.floor();
        self.acc -= whole;
        self.cpu.set_activity(now, FG, Activity::Kernel)?;
        self.q.schedule(now + SimTime(whole as u64), Ev::Step)?;
        Ok(())
    }

    fn activate(&mut self, id: u32) -> SimResult<()> {
        let now = self.now();
        self.tabs.activate(id, now)?;
        let tabs = &self.tabs;
        self.pt.pin_owner(Some(id), |o| Self::tab_range(tabs, o));
        Ok(())
    }

    fn begin_open(&mut self) -> SimResult<()> {
        let now = self.now();
        let (mean, spread) = self.cfg.workload.footprint_pages(self.cfg.scale_divisor);
        let fp = sample_footprint(&mut self.rng_wl, mean, spread);
        let hot = self.rng_wl.random_range(0..fp);
        let id = self.tabs.add(fp, hot, now);
        let first = self.pt.add_pages(id, fp);
        if first != self.tabs.get(id).first_vpn {
            return Err(SimError::invariant("vpn-layout", format!("tab {id}")));
        }
        self.trace.open(now, id, fp).map_err(io_err)?;
        self.obs.opens += 1;
        self.activate(id)?;
        self.cur = Some(Current {
            open: true,
            tab: id,
            start: now,
            faults: 0,
            pages: (first..first + fp).collect(),
            idx: 0,
            rendered: false,
            phase: self.test.phase as u8,
        });
        Ok(())
    }

    fn begin_switch(&mut self, id: u32) -> SimResult<()> {
        let now = self.now();
        self.activate(id)?;
        let tab = self.tabs.get(id);
        let n = tab.hot_pages(self.cfg.workload.locality_fraction);
        self.cur = Some(Current {
            open: false,
            tab: id,
            start: now,
            faults: 0,
            pages: (0..n).map(|i| tab.hot_vpn(i)).collect(),
            idx: 0,
            rendered: false,
            phase: self.test.phase as u8,
        });
        Ok(())
    }

    fn finish_action(&mut self) -> SimResult<()> {
        let now = self.now();
        let cur = self.cur.take().expect("current action");
        if !cur.open {
            let s = SwitchSample {
                id: self.switch_seq,
                tab_count: self.tabs.live_count() as u32,
                latency_us: (now - cur.start).as_us(),
                faults: cur.faults,
                phase: cur.phase,
            };
            self.switch_seq += 1;
            self.trace.switch(now, &s).map_err(io_err)?;
            self.obs.switches.push(s);
        }
        self.check_tab(cur.tab)?;
        while self.available_mem() < self.discard_threshold {
            let Some(victim) = self.tabs.lru_inactive() else {
                break;
            };
            self.discard(victim)?;
        }
        Ok(())
    }

    fn record_fault(
        &mut self,
        kind: FaultKind,
        latency_us: u64,
        zswap_miss: bool,
    ) -> SimResult<()> {
        let f = FaultSample {
            kind,
            latency_us,
            zswap_miss,
        };
        self.trace.fault(self.now(), &f).map_err(io_err)?;
        self.obs.faults.push(f);
        if let Some(c) = self.cur.as_mut() {
            c.faults += 1;
        }
        Ok(())
    }

    fn pool_traffic(&mut self, dir: PoolDir, bytes: u64) -> SimResult<()> {
        self.trace.pool(self.now(), dir, bytes).map_err(io_err)?;
        match dir {
            PoolDir::Store => {
                self.obs.pool_store_bytes += bytes;
                self.energy
                    .account_energy(MemTarget::Dram, IoOp::Write, bytes * 8);
            }
            PoolDir::Load => {
                self.obs.pool_load_bytes += bytes;
                self.energy
                    .account_energy(MemTarget::Dram, IoOp::Read, bytes * 8);
            }
        }
        Ok(())
    }

    /// Installs `vpn` as a resident page.
    fn install(&mut self, vpn: u64, dirty: bool) {
        let now = self.now();
        self.pt.set_state(vpn, PageState::Resident);
        let p = self.pt.pte_mut(vpn);
        p.dirty = dirty;
        p.last_access = now;
    }

    /// Touches one page of the current action. Returns false when the
    /// foreground process blocked.
    fn touch(&mut self, vpn: u64) -> SimResult<bool> {
        let now = self.now();
        let open = self.cur.as_ref().is_some_and(|c| c.open);
        let write = open || self.rng_wl.random::<f64>() < self.cfg.workload.write_fraction;
        let copy = self.cfg.engine.copy_cost_us;
        let p = *self.pt.pte(vpn);
        match p.state {
            PageState::Resident => {
                self.pt.touch(vpn, now, write);
                if write {
                    self.drop_cached(vpn)?;
                }
            }
            PageState::Gone => {
                if !self.ensure_frame()? {
                    return Ok(false);
                }
                self.install(vpn, true);
                self.allocated += 1;
                self.acc += copy;
                self.after_alloc()?;
            }
            PageState::InZram => {
                if !self.ensure_frame()? {
                    return Ok(false);
                }
                let size = self.zram.as_mut().expect("zram backend").read(vpn)?;
                let d = self.comp.decompress_page(&mut self.rng_comp);
                self.pool_traffic(PoolDir::Load, size)?;
                self.install(vpn, true);
                self.acc += d + copy;
                self.record_fault(FaultKind::Zram, (d + copy).round() as u64, false)?;
                self.after_alloc()?;
            }
            PageState::InZswap => {
                if !self.ensure_frame()? {
                    return Ok(false);
                }
                let e = self
                    .zswap
                    .as_mut()
                    .and_then(|z| z.load(vpn))
                    .ok_or_else(|| {
                        SimError::invariant("zswap-entry", format!("vpn {vpn} not in pool"))
                    })?;
                self.release_slot(e.slot)?;
                let d = self.comp.decompress_page(&mut self.rng_comp);
                self.pool_traffic(PoolDir::Load, e.size)?;
                self.install(vpn, true);
                self.acc += d + copy;
                self.record_fault(FaultKind::ZswapHit, (d + copy).round() as u64, false)?;
                self.after_alloc()?;
            }
            PageState::InSwapDevice if self.writeback_of.contains_key(&vpn) => {
                // Still in memory: take the frame back from writeback.
                self.writeback_of.remove(&vpn);
                let slot = p.swap_slot;
                self.pt.set_state(vpn, PageState::Resident);
                let e = self.pt.pte_mut(vpn);
                e.swap_slot = NO_SLOT;
                e.frame_held = false;
                e.cached_slot = slot;
                e.dirty = false;
                e.last_access = now;
                self.cached_slots += 1;
                if write {
                    self.pt.pte_mut(vpn).dirty = true;
                    self.drop_cached(vpn)?;
                }
                self.acc += copy;
                self.record_fault(FaultKind::SwapCache, copy.round() as u64, false)?;
            }
            PageState::InSwapDevice => {
                if self.acc >= 1.0 {
                    self.flush_burst()?;
                    return Ok(false);
                }
                if !self.ensure_frame()? {
                    return Ok(false);
                }
                self.major_fault(vpn, write)?;
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn major_fault(&mut self, vpn: u64, write: bool) -> SimResult<()> {
        let now = self.now();
        if let Some(z) = self.zswap.as_mut() {
            if z.load(vpn).is_some() {
                return Err(SimError::invariant(
                    "zswap-entry",
                    format!("device page {vpn} also in pool"),
                ));
            }
        }
        self.read_frames += 1;
        let slot = self.pt.pte(vpn).swap_slot as u64;
        let req = self.submit_io(IoOp::Read, slot, FG, ReqKind::Fault)?;
        let c = &self.cfg.completion;
        let sleep = match c.mode {
            CompletionMode::Irq => Some(None),
            CompletionMode::Polling => None,
            CompletionMode::Hybrid => {
                let t = if c.adaptive() {
                    self.est.adaptive_sleep_estimate(IoOp::Read)
                } else {
                    SimTime(c.hybrid_sleep_us)
                };
                (t > SimTime::ZERO).then_some(Some(t))
            }
        };
        self.token += 1;
        let mut w = IoWait {
            req,
            vpn,
            write,
            start: now,
            sleeping: false,
            token: self.token,
        };
        match sleep {
            Some(timer) => {
                w.sleeping = true;
                self.cpu.release(now, FG);
                self.cpu.io_sleep(now);
                if let Some(t) = timer {
                    self.q.schedule(now + t, Ev::HybridTimer(self.token))?;
                }
            }
            None => self.cpu.set_activity(now, FG, Activity::Kernel)?,
        }
        self.fg = Fg::WaitIo(w);
        Ok(())
    }

    fn hybrid_timer(&mut self, token: u64) {
        let now = self.now();
        if let Fg::WaitIo(w) = &mut self.fg {
            if w.token == token && w.sleeping {
                w.sleeping = false;
                self.cpu.io_wake(now);
                self.cpu.acquire(now, FG, Activity::Kernel);
            }
        }
    }

    fn fault_done(&mut self, w: IoWait) -> SimResult<()> {
        let now = self.now();
        self.read_frames -= 1;
        let slot = self.pt.pte(w.vpn).swap_slot as u64;
        self.install(w.vpn, true);
        self.pt.pte_mut(w.vpn).swap_slot = NO_SLOT;
        let keep = !self.slots.as_ref().expect("device backend").half_full();
        if keep && !w.write {
            let e = self.pt.pte_mut(w.vpn);
            e.cached_slot = slot as u32;
            e.dirty = false;
            self.cached_slots += 1;
        } else {
            self.release_slot(slot)?;
        }
        let extra = if w.sleeping {
            self.cpu.io_wake(now);
            self.cpu.acquire(now, FG, Activity::Kernel);
            SimTime(self.cfg.completion.context_switch_us)
        } else {
            SimTime::ZERO
        };
        let zswap_miss = self.zswap.is_some();
        self.record_fault(
            FaultKind::Major,
            (now + extra - w.start).as_us(),
            zswap_miss,
        )?;
        if let Some(c) = self.cur.as_mut() {
            c.idx += 1;
        }
        self.fg = Fg::Runnable;
        self.q.schedule(now + extra, Ev::Step)?;
        self.after_alloc()
    }

    /// Makes sure a frame is free, reclaiming directly if needed. Returns
    /// false when the foreground must wait for writeback.
    fn ensure_frame(&mut self) -> SimResult<bool> {
        loop {
            if self.free_frames() > 0 {
                return Ok(true);
            }
            let n = self.cfg.engine.kswapd_batch as usize;
            let (evicted, cost) = self.reclaim(FG, n)?;
            self.stats.direct_evictions += evicted;
            self.acc += cost;
            if self.free_frames() > 0 {
                return Ok(true);
            }
            if !self.writeback_of.is_empty() {
                let now = self.now();
                self.cpu.release(now, FG);
                self.cpu.io_sleep(now);
                self.fg = Fg::WaitFrame;
                return Ok(false);
            }
            if evicted > 0 {
                continue;
            }
            match self.tabs.lru_inactive() {
                Some(victim) => self.discard(victim)?,
                None => {
                    return Err(SimError::invariant(
                        "out-of-memory",
                        "no frame, nothing evictable and no tab to discard",
                    ))
                }
            }
        }
    }

    fn wake_fg_for_frame(&mut self) -> SimResult<()> {
        if matches!(self.fg, Fg::WaitFrame) {
            let now = self.now();
            self.cpu.io_wake(now);
            self.cpu.acquire(now, FG, Activity::Kernel);
            self.fg = Fg::Runnable;
            self.q.schedule(now, Ev::Step)?;
        }
        Ok(())
    }

    fn after_alloc(&mut self) -> SimResult<()> {
        if self.kswapd == Kswapd::Sleeping && self.wm.check(self.free_frames()).is_some() {
            let now = self.now();
            self.kswapd = Kswapd::Running;
            self.stats.kswapd_wakeups += 1;
            self.cpu.acquire(now, KSWAPD, Activity::Kernel);
            self.q.schedule(now, Ev::Kswapd)?;
        }
        Ok(())
    }

    // ---- reclaim ----

    fn kswapd_run(&mut self) -> SimResult<()> {
        let now = self.now();
        if self.kswapd != Kswapd::Running {
            return Ok(());
        }
        let have = self.free_frames() + self.writeback_of.len() as u64;
        if have >= self.wm.high {
            self.kswapd = Kswapd::Sleeping;
            self.cpu.release(now, KSWAPD);
            return Ok(());
        }
        if self.writes_in_flight >= self.cfg.engine.writeback_limit {
            self.kswapd = Kswapd::Throttled;
            self.cpu.release(now, KSWAPD);
            self.cpu.io_sleep(now);
            return Ok(());
        }
        let n = (self.wm.high - have).min(self.cfg.engine.kswapd_batch as u64) as usize;
        let (evicted, cost) = self.reclaim(KSWAPD, n)?;
        self.stats.kswapd_evictions += evicted;
        if evicted == 0 {
            self.kswapd = Kswapd::Sleeping;
            self.cpu.release(now, KSWAPD);
            return Ok(());
        }
        self.q
            .schedule(now + SimTime(cost.round().max(1.0) as u64), Ev::Kswapd)?;
        Ok(())
    }

    fn wake_throttled_kswapd(&mut self) -> SimResult<()> {
        if self.kswapd == Kswapd::Throttled
            && self.writes_in_flight < self.cfg.engine.writeback_limit
        {
            let now = self.now();
            self.cpu.io_wake(now);
            self.cpu.acquire(now, KSWAPD, Activity::Kernel);
            self.kswapd = Kswapd::Running;
            self.q.schedule(now, Ev::Kswapd)?;
        }
        Ok(())
    }

    /// Evicts up to `n` cold pages. Returns the number evicted and the CPU
    /// time it cost.
    fn reclaim(&mut self, pid: Pid, n: usize) -> SimResult<(u64, f64)> {
        let pinned = self.tabs.active.map(|a| Self::tab_range(&self.tabs, a));
        let victims = self.pt.lru_select(n, pinned);
        let mut evicted = 0;
        let mut cost = 0.0;
        for vpn in victims {
            cost += self.cfg.engine.scan_cost_us;
            let (r, c) = self.evict(vpn, pid)?;
            cost += c;
            if r == Evicted::Failed {
                break;
            }
            evicted += 1;
        }
        Ok((evicted, cost))
    }

    fn evict(&mut self, vpn: u64, pid: Pid) -> SimResult<(Evicted, f64)> {
        let p = *self.pt.pte(vpn);
        if !p.dirty && p.cached_slot != NO_SLOT {
            self.pt.set_state(vpn, PageState::InSwapDevice);
            let e = self.pt.pte_mut(vpn);
            e.swap_slot = p.cached_slot;
            e.cached_slot = NO_SLOT;
            self.cached_slots -= 1;
            self.stats.clean_drops += 1;
            return Ok((Evicted::Freed, 0.0));
        }
        self.drop_cached(vpn)?;
        if let Some(z) = self.zram.as_mut() {
            let (size, c) = self.comp.compress_page(&mut self.rng_comp);
            return match z.write(vpn, size) {
                Ok(stored) => {
                    self.pt.set_state(vpn, PageState::InZram);
                    self.stats.zram_stores += 1;
                    self.pool_traffic(PoolDir::Store, stored)?;
                    Ok((Evicted::Freed, c))
                }
                Err(_) => Ok((Evicted::Failed, 0.0)),
            };
        }
        let Some(slot) = self.slots.as_mut().expect("device backend").alloc() else {
            return Ok((Evicted::Failed, 0.0));
        };
        if self.zswap.is_some() {
            let now = self.now();
            let (size, c) = self.comp.compress_page(&mut self.rng_comp);
            let outcome = self
                .zswap
                .as_mut()
                .expect("zswap")
                .store(vpn, slot, size, now)?;
            let mut cost = c;
            let victims = match outcome {
                StoreOutcome::Stored => Vec::new(),
                StoreOutcome::EvictedThenStored(v) => v,
                StoreOutcome::Bypassed => {
                    self.stats.zswap_bypasses += 1;
                    self.start_writeback(vpn, slot, pid)?;
                    return Ok((Evicted::Writeback, cost));
                }
            };
            self.stats.zswap_stores += 1;
            self.pool_traffic(PoolDir::Store, size)?;
            self.pt.set_state(vpn, PageState::InZswap);
            for (v, e) in victims {
                cost += self.comp.decompress_page(&mut self.rng_comp);
                self.pool_traffic(PoolDir::Load, e.size)?;
                self.stats.zswap_evictions += 1;
                if self.free_frames() > 0 {
                    // Decompressed into a swap-cache page for the write.
                    self.pt.set_state(v, PageState::Resident);
                    self.start_writeback(v, e.slot, pid)?;
                } else {
                    self.pt.set_state(v, PageState::InSwapDevice);
                    self.pt.pte_mut(v).swap_slot = e.slot as u32;
                    self.submit_io(IoOp::Write, e.slot, pid, ReqKind::Writeback { vpn: v })?;
                }
            }
            return Ok((Evicted::Freed, cost));
        }
        self.start_writeback(vpn, slot, pid)?;
        Ok((Evicted::Writeback, 0.0))
    }

    /// Writes a dirty page to the device; its frame stays held until the
    /// write completes.
    fn start_writeback(&mut self, vpn: u64, slot: u64, pid: Pid) -> SimResult<()> {
        self.pt.set_state(vpn, PageState::InSwapDevice);
        let e = self.pt.pte_mut(vpn);
        e.swap_slot = slot as u32;
        e.frame_held = true;
        e.dirty = false;
        let id = self.submit_io(IoOp::Write, slot, pid, ReqKind::Writeback { vpn })?;
        self.writeback_of.insert(vpn, id);
        Ok(())
    }

    fn discard(&mut self, id: u32) -> SimResult<()> {
        let now = self.now();
        for vpn in Self::tab_range(&self.tabs, id) {
            let p = *self.pt.pte(vpn);
            match p.state {
                PageState::Resident | PageState::Gone => {}
                PageState::InZswap => {
                    let e = self
                        .zswap
                        .as_mut()
                        .and_then(|z| z.invalidate(vpn))
                        .ok_or_else(|| SimError::invariant("zswap-entry", format!("vpn {vpn}")))?;
                    self.release_slot(e.slot)?;
                }
                PageState::InZram => {
                    self.zram.as_mut().expect("zram backend").free(vpn)?;
                }
                PageState::InSwapDevice => {
                    self.writeback_of.remove(&vpn);
                    self.release_slot(p.swap_slot as u64)?;
                }
            }
            self.drop_cached(vpn)?;
            if p.state != PageState::Gone {
                self.allocated -= 1;
            }
            self.pt.set_state(vpn, PageState::Gone);
            let e = self.pt.pte_mut(vpn);
            e.swap_slot = NO_SLOT;
            e.frame_held = false;
            e.dirty = false;
        }
        self.tabs.discard(id);
        self.trace.discard(now, id).map_err(io_err)?;
        self.obs.discards += 1;
        self.obs
            .opened_at_first_discard
            .get_or_insert(self.obs.opens);
        self.test.on_discard();
        self.wake_fg_for_frame()
    }

    // ---- block I/O ----

    fn submit_io(&mut self, op: IoOp, slot: u64, issuer: Pid, kind: ReqKind) -> SimResult<u64> {
        let now = self.now();
        let sector = sector_of(slot);
        let cpu = issuer - 1;
        let blk = self.blk.as_mut().expect("device backend");
        let (id, s) = blk.submit(now, op, sector, PAGE_SIZE, issuer, cpu);
        self.trace
            .block(now, 'Q', id, op, sector, PAGE_SIZE, issuer, None)
            .map_err(io_err)?;
        if let Submitted::Merged { host } = s {
            self.trace
                .block(now, 'M', id, op, sector, PAGE_SIZE, issuer, Some(host))
                .map_err(io_err)?;
            self.obs.merges += 1;
        }
        match op {
            IoOp::Read => {
                self.obs.queued_reads += 1;
                self.obs.swap_in_bytes += PAGE_SIZE;
                self.energy
                    .account_energy(MemTarget::Nvm, IoOp::Read, PAGE_SIZE * 8);
            }
            IoOp::Write => {
                self.obs.queued_writes += 1;
                self.obs.swap_out_bytes += PAGE_SIZE;
                self.writes_in_flight += 1;
                self.energy
                    .account_energy(MemTarget::Nvm, IoOp::Write, PAGE_SIZE * 8);
            }
        }
        self.reqs.insert(id, kind);
        self.pump()?;
        Ok(id)
    }

    fn pump(&mut self) -> SimResult<()> {
        let now = self.now();
        let blk = self.blk.as_mut().expect("device backend");
        let out = blk.dispatch(now);
        let busy = blk.busy_until();
        let queued = blk.queued();
        self.stats.max_queued = self.stats.max_queued.max(blk.max_queued);
        for (id, at) in out {
            if at > now {
                self.q.schedule(at, Ev::Dispatched(id))?;
            } else {
                self.device_start(id)?;
            }
        }
        if busy > now && queued > 0 && !self.kick_pending {
            self.kick_pending = true;
            self.q.schedule(busy, Ev::Kick)?;
        }
        Ok(())
    }

    fn device_start(&mut self, id: u64) -> SimResult<()> {
        let now = self.now();
        let r = self
            .blk
            .as_ref()
            .and_then(|b| b.request(id))
            .ok_or_else(|| SimError::invariant("dispatch", format!("request {id} not live")))?;
        let (op, sector, size, issuer) = (r.op, r.sector, r.size, r.issuer);
        self.trace
            .block(now, 'D', id, op, sector, size, issuer, None)
            .map_err(io_err)?;
        let dev = self.dev.as_mut().expect("device backend");
        if let Some((sid, done)) = dev.submit(id, op, size, now, &mut self.rng_dev) {
            self.q.schedule(done, Ev::DeviceDone(sid))?;
        }
        self.stats.max_device_busy = self.stats.max_device_busy.max(dev.max_in_service);
        Ok(())
    }

    fn device_done(&mut self, id: u64) -> SimResult<()> {
        let now = self.now();
        let dev = self.dev.as_mut().expect("device backend");
        if let Some((nid, done)) = dev.finish(now, &mut self.rng_dev)? {
            self.q.schedule(done, Ev::DeviceDone(nid))?;
        }
        let blk = self.blk.as_mut().expect("device backend");
        let ids = blk.complete(now, id)?;
        let recs: Vec<IoRecord> = blk.completed[blk.completed.len() - ids.len()..].to_vec();
        for r in recs {
            self.trace
                .block(now, 'C', r.id, r.op, r.sector, r.size, r.issuer, None)
                .map_err(io_err)?;
            self.est.record(r.op, SimTime(r.q2c()));
            let kind = self
                .reqs
                .remove(&r.id)
                .ok_or_else(|| SimError::invariant("request-kind", format!("request {}", r.id)))?;
            if r.op == IoOp::Write {
                self.writes_in_flight -= 1;
            }
            match kind {
                ReqKind::Fault => match self.fg {
                    Fg::WaitIo(w) if w.req == r.id => self.fault_done(w)?,
                    _ => {
                        return Err(SimError::invariant(
                            "fault-wait",
                            format!("read {} has no waiter", r.id),
                        ))
                    }
                },
                ReqKind::Writeback { vpn } => {
                    if self.writeback_of.get(&vpn) == Some(&r.id) {
                        self.writeback_of.remove(&vpn);
                        self.pt.pte_mut(vpn).frame_held = false;
                        self.wake_fg_for_frame()?;
                    }
                }
            }
        }
        self.wake_throttled_kswapd()?;
        self.pump()
    }

    // ---- checks ----

    fn check_event(&self) -> SimResult<()> {
        self.ledger().check()?;
        let t = self.pt.totals();
        let (zs, zr) = (
            self.zswap.as_ref().map_or(0, |z| z.len() as u64),
            self.zram.as_ref().map_or(0, |z| z.used_slots()),
        );
        if t[PageState::InZswap as usize] != zs || t[PageState::InZram as usize] != zr {
            return Err(SimError::invariant(
                "page-conservation",
                "pool entries disagree with page states",
            ));
        }
        if t.iter().sum::<u64>() != self.allocated
            || t[PageState::Resident as usize] != self.pt.resident
        {
            return Err(SimError::invariant(
                "page-conservation",
                format!("states {t:?} vs {} allocated pages", self.allocated),
            ));
        }
        if let Some(s) = &self.slots {
            let expect = t[PageState::InSwapDevice as usize] + zs + self.cached_slots;
            if s.in_use != expect {
                return Err(SimError::invariant(
                    "swap-slot-conservation",
                    format!("{} slots used, {expect} referenced", s.in_use),
                ));
            }
        }
        if let Some(z) = &self.zswap {
            if z.used_bytes > z.max_pool_bytes {
                return Err(SimError::invariant(
                    "zswap-pool-size",
                    "pool above its limit",
                ));
            }
        }
        Ok(())
    }

    /// Every page of a fully opened live tab is in exactly one state.
    fn check_tab(&self, id: u32) -> SimResult<()> {
        let t = self.tabs.get(id);
        let c = self.pt.counts(id);
        if c.iter().sum::<u64>() != t.footprint {
            return Err(SimError::invariant(
                "page-conservation",
                format!("tab {id}: {c:?} vs footprint {}", t.footprint),
            ));
        }
        Ok(())
    }

    fn audit(&self) -> SimResult<()> {
        self.pt.audit()?;
        if let Some(z) = &self.zswap {
            z.audit()?;
        }
        if let Some(z) = &self.zram {
            z.audit()?;
        }
        let opening = self.cur.as_ref().filter(|c| c.open).map(|c| c.tab);
        for t in self.tabs.live() {
            if Some(t.id) != opening {
                self.check_tab(t.id)?;
            }
        }
        Ok(())
    }

    fn finish(mut self) -> SimResult<RunOutput> {
        let end = self.now();
        if !matches!(self.fg, Fg::Done) {
            return Err(SimError::invariant(
                "fg-state",
                "event queue drained before the workload finished",
            ));
        }
        if !self.reqs.is_empty() {
            return Err(SimError::invariant(
                "io-drain",
                format!("{} requests outstanding", self.reqs.len()),
            ));
        }
        self.cpu.advance(end);
        self.cpu.check_conservation(end)?;
        self.audit()?;
        self.check_event()?;
        self.trace.finish(end, &self.cpu.buckets).map_err(io_err)?;
        let mut obs = std::mem::take(&mut self.obs);
        obs.buckets = self.cpu.buckets;
        obs.elapsed = end;
        if let Some(b) = self.blk.as_mut() {
            obs.ios = std::mem::take(&mut b.completed);
        }
        if let Some(d) = &self.dev {
            if d.wear_bytes_written != obs.swap_out_bytes || d.bytes_read != obs.swap_in_bytes {
                return Err(SimError::invariant(
                    "device-traffic",
                    "device byte counters disagree with queued traffic",
                ));
            }
        }
        let report = RunReport::build(&self.meta, &obs);
        if let Some(z) = &self.zswap {
            if (z.hits, z.misses) != (report.faults.zswap_hits, report.faults.zswap_misses) {
                return Err(SimError::invariant(
                    "zswap-counters",
                    "pool hit/miss counters disagree",
                ));
            }
        }
        if self.energy.breakdown() != report.energy {
            return Err(SimError::invariant(
                "energy-ledger",
                "energy meter disagrees with traffic log",
            ));
        }
        Ok(RunOutput {
            meta: self.meta,
            obs,
            report,
            stats: self.stats,
        })
    }
}

/// Runs a scenario without writing a trace.
pub fn simulate(cfg: &ScenarioConfig) -> SimResult<RunOutput> {
    Simulator::new(cfg, TraceWriter::disabled())?.run()
}
