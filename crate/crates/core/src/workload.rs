//! Tab-based workload: memory-pressure formulas, the tab table, and the
//! three-phase pressure-test driver.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
use crate::sim::SimTime;

pub const PAGE_SIZE: u64 = 4096;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

/// `1 - (mem_free + swap_free/w) / (mem_total + swap_total/w)`, evaluated over
/// integers (both sides scaled by `w`) so the only rounding is the final
/// division.
pub fn compute_fill(
    mem_free: u64,
    mem_total: u64,
    swap_free: u64,
    swap_total: u64,
    weight: u64,
) -> SimResult<f64> {
    if mem_total == 0 {
        return Err(SimError::config("mem_total", "must be positive"));
    }
    if weight == 0 {
        return Err(SimError::config("ram_vs_swap_weight", "must be >= 1"));
    }
    if mem_free > mem_total || swap_free > swap_total {
        return Err(SimError::config(
            "mem_free/swap_free",
            "free amount exceeds total",
        ));
    }
    let w = weight as u128;
    let num = mem_free as u128 * w + swap_free as u128;
    let den = mem_total as u128 * w + swap_total as u128;
    let fill = (den - num) as f64 / den as f64;
    Ok(fill.clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PressureLevel {
    None,
    Moderate,
    Critical,
}

pub fn classify_pressure(fill: f64) -> PressureLevel {
    if fill >= 0.95 {
        PressureLevel::Critical
    } else if fill >= 0.60 {
        PressureLevel::Moderate
    } else {
        PressureLevel::None
    }
}

/// Pages the browser believes it can still allocate.
pub fn available_mem(available_ram: u64, free_swap_slots: u64, weight: u64) -> u64 {
    available_ram + free_swap_slots / weight.max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub footprint_mean_mib: f64,
    pub footprint_spread_mib: f64,
    pub locality_fraction: f64,
    pub switch_render_cost_us: u64,
    pub open_render_cost_us: u64,
    pub ram_vs_swap_weight: u64,
    pub tolerable_latency_us: u64,
    /// Discard when available memory drops below this many pages; `None`
    /// means one mean footprint.
    pub discard_threshold_pages: Option<u64>,
    pub max_tabs: u32,
    pub switches_per_open: u32,
    pub open_recent_window: u32,
    pub cold_switches: u32,
    pub heavy_switches: u32,
    pub heavy_window_fraction: f64,
    /// Fraction of switch touches that dirty the page.
    pub write_fraction: f64,
    pub bucket_width: u32,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            footprint_mean_mib: 150.0,
            footprint_spread_mib: 50.0,
            locality_fraction: 0.6,
            switch_render_cost_us: 40_000,
            open_render_cost_us: 40_000,
            ram_vs_swap_weight: 4,
            tolerable_latency_us: 250_000,
            discard_threshold_pages: None,
            max_tabs: 400,
            switches_per_open: 1,
            open_recent_window: 8,
            cold_switches: 10,
            heavy_switches: 3000,
            heavy_window_fraction: 0.4,
            write_fraction: 0.1,
            bucket_width: 20,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> SimResult<()> {
        let bad = |f: &str, r: &str| Err(SimError::config(format!("workload.{f}"), r));
        if !(self.locality_fraction > 0.0 && self.locality_fraction <= 1.0) {
            return bad("locality_fraction", "must be in (0, 1]");
        }
        if self.ram_vs_swap_weight < 1 {
            return bad("ram_vs_swap_weight", "must be >= 1");
        }
        if self.footprint_mean_mib.is_nan()
            || self.footprint_mean_mib <= 0.0
            || self.footprint_spread_mib < 0.0
        {
            return bad(
                "footprint_mean_mib",
                "mean must be positive, spread non-negative",
            );
        }
        if !(self.heavy_window_fraction > 0.0 && self.heavy_window_fraction <= 1.0) {
            return bad("heavy_window_fraction", "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.write_fraction) {
            return bad("write_fraction", "must be in [0, 1]");
        }
        if self.max_tabs == 0 {
            return bad("max_tabs", "must be positive");
        }
        if self.bucket_width == 0 {
            return bad("bucket_width", "must be positive");
        }
        if self.open_recent_window == 0 {
            return bad("open_recent_window", "must be positive");
        }
        Ok(())
    }

    /// Footprint parameters in pages after dividing capacities by `scale`.
    pub fn footprint_pages(&self, scale: u64) -> (f64, f64) {
        let per_page = (PAGE_SIZE * scale) as f64;
        (
            self.footprint_mean_mib * MIB as f64 / per_page,
            self.footprint_spread_mib * MIB as f64 / per_page,
        )
    }
}

/// Truncated normal (two spreads either side of the mean, at least one page).
pub fn sample_footprint<R: Rng + ?Sized>(rng: &mut R, mean: f64, spread: f64) -> u64 {
    let lo = (mean - 2.0 * spread).max(1.0);
    let hi = (mean + 2.0 * spread).max(lo);
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let x = mean + spread * z;
        if x >= lo && x <= hi {
            return (x.round() as u64).max(1);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TabState {
    Active,
    Inactive,
    Discarded,
}

#[derive(Clone, Debug)]
pub struct Tab {
    pub id: u32,
    pub first_vpn: u64,
    pub footprint: u64,
    /// Start of the circular window touched on each switch.
    pub hot_offset: u64,
    pub last_used: SimTime,
    pub state: TabState,
}

impl Tab {
    pub fn hot_pages(&self, locality: f64) -> u64 {
        ((self.footprint as f64 * locality).ceil() as u64).clamp(1, self.footprint)
    }

    /// The i-th page touched by a switch.
    pub fn hot_vpn(&self, i: u64) -> u64 {
        self.first_vpn + (self.hot_offset + i) % self.footprint
    }

    pub fn contains(&self, vpn: u64) -> bool {
        vpn >= self.first_vpn && vpn < self.first_vpn + self.footprint
    }
}

#[derive(Default, Debug)]
pub struct TabTable {
    pub tabs: Vec<Tab>,
    pub active: Option<u32>,
    next_vpn: u64,
}

impl TabTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, footprint: u64, hot_offset: u64, now: SimTime) -> u32 {
        let id = self.tabs.len() as u32;
        self.tabs.push(Tab {
            id,
            first_vpn: self.next_vpn,
            footprint,
            hot_offset: hot_offset % footprint.max(1),
            last_used: now,
            state: TabState::Inactive,
        });
        self.next_vpn += footprint;
        id
    }

    pub fn total_vpns(&self) -> u64 {
        self.next_vpn
    }

    pub fn get(&self, id: u32) -> &Tab {
        &self.tabs[id as usize]
    }

    /// Makes `id` the active tab, demoting the previous one.
    pub fn activate(&mut self, id: u32, now: SimTime) -> SimResult<()> {
        if self.tabs[id as usize].state == TabState::Discarded {
            return Err(SimError::Workload(format!("switch to discarded tab {id}")));
        }
        if let Some(prev) = self.active.take() {
            if self.tabs[prev as usize].state == TabState::Active {
                self.tabs[prev as usize].state = TabState::Inactive;
            }
        }
        let t = &mut self.tabs[id as usize];
        t.state = TabState::Active;
        t.last_used = now;
        self.active = Some(id);
        Ok(())
    }

    pub fn discard(&mut self, id: u32) {
        let t = &mut self.tabs[id as usize];
        t.state = TabState::Discarded;
        if self.active == Some(id) {
            self.active = None;
        }
    }

    pub fn live(&self) -> impl Iterator<Item = &Tab> {
        self.tabs.iter().filter(|t| t.state != TabState::Discarded)
    }

    pub fn live_count(&self) -> usize {
        self.live().count()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for t in &self.tabs {
            match t.state {
                TabState::Active => c.0 += 1,
                TabState::Inactive => c.1 += 1,
                TabState::Discarded => c.2 += 1,
            }
        }
        c
    }

    /// Live, non-active tabs ordered most recently used first (ties by id).
    pub fn by_recency(&self) -> Vec<u32> {
        let mut v: Vec<&Tab> = self
            .live()
            .filter(|t| t.state != TabState::Active)
            .collect();
        v.sort_by(|a, b| b.last_used.cmp(&a.last_used).then(b.id.cmp(&a.id)));
        v.into_iter().map(|t| t.id).collect()
    }

    /// Least recently used live tab that is not active.
    pub fn lru_inactive(&self) -> Option<u32> {
        self.by_recency().last().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Pressure = 1,
    ColdSwitch = 2,
    HeavyLoad = 3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Open,
    Switch(u32),
    Done,
}

/// Decides the next workload step. Phase 1 opens tabs (with a few switches to
/// recently used tabs in between) until the first discard or the tab cap;
/// phase 2 switches to least recently used tabs; phase 3 switches uniformly
/// among the most recently used fraction of live tabs.
#[derive(Debug)]
pub struct PressureTest {
    pub phase: Phase,
    pending_switches: u32,
    cold_done: u32,
    heavy_done: u32,
    pub opened: u32,
    pub first_discard_seen: bool,
}

impl Default for PressureTest {
    fn default() -> Self {
        Self::new()
    }
}

impl PressureTest {
    pub fn new() -> Self {
        PressureTest {
            phase: Phase::Pressure,
            pending_switches: 0,
            cold_done: 0,
            heavy_done: 0,
            opened: 0,
            first_discard_seen: false,
        }
    }

    pub fn on_discard(&mut self) {
        self.first_discard_seen = true;
    }

    pub fn next<R: Rng + ?Sized>(
        &mut self,
        cfg: &WorkloadConfig,
        tabs: &TabTable,
        rng: &mut R,
    ) -> Action {
        loop {
            match self.phase {
                Phase::Pressure => {
                    if self.first_discard_seen || self.opened >= cfg.max_tabs {
                        self.phase = Phase::ColdSwitch;
                        continue;
                    }
                    if self.pending_switches > 0 {
                        self.pending_switches -= 1;
                        let recent = tabs.by_recency();
                        let w = recent.len().min(cfg.open_recent_window as usize);
                        if w > 0 {
                            return Action::Switch(recent[rng.random_range(0..w)]);
                        }
                        continue;
                    }
                    self.opened += 1;
                    self.pending_switches = cfg.switches_per_open;
                    return Action::Open;
                }
                Phase::ColdSwitch => {
                    if self.cold_done >= cfg.cold_switches {
                        self.phase = Phase::HeavyLoad;
                        continue;
                    }
                    self.cold_done += 1;
                    match tabs.lru_inactive() {
                        Some(id) => return Action::Switch(id),
                        None => {
                            self.phase = Phase::HeavyLoad;
                            continue;
                        }
                    }
                }
                Phase::HeavyLoad => {
                    if self.heavy_done >= cfg.heavy_switches {
                        return Action::Done;
                    }
                    self.heavy_done += 1;
                    let recent = tabs.by_recency();
                    let live = tabs.live_count();
                    let k = ((live as f64 * cfg.heavy_window_fraction).ceil() as usize)
                        .saturating_sub(1)
                        .clamp(1, recent.len().max(1));
                    if recent.is_empty() {
                        return Action::Done;
                    }
                    return Action::Switch(recent[rng.random_range(0..k)]);
                }
            }
        }
    }
}

/// Inclusive tab-count bucket `(lo, hi)` a sample tagged with `tab_count`
/// belongs to, e.g. width 20 gives 1-20, 21-40, ...
pub fn tab_bucket(tab_count: u32, width: u32) -> (u32, u32) {
    let idx = tab_count.saturating_sub(1) / width;
    (idx * width + 1, (idx + 1) * width)
}
