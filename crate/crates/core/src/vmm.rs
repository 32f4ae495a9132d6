//! Page residency tracking, exact LRU over inactive tabs, swap-slot
//! allocation and the DRAM ledger.

use std::collections::BTreeMap;

use crate::error::{SimError, SimResult};
use crate::sim::SimTime;
use crate::workload::PAGE_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PageState {
    Resident = 0,
    InZswap = 1,
    InZram = 2,
    InSwapDevice = 3,
    /// Owner tab was discarded; the page no longer exists.
    Gone = 4,
}

pub const NO_SLOT: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
pub struct Pte {
    pub owner: u32,
    pub state: PageState,
    pub dirty: bool,
    /// Resident frame still held by an in-flight writeback.
    pub frame_held: bool,
    pub last_access: SimTime,
    pub stamp: u64,
    /// Device slot holding the page's data; set only for `InSwapDevice`.
    pub swap_slot: u32,
    /// Swap-cache copy kept for a clean resident page.
    pub cached_slot: u32,
}

impl Pte {
    pub fn slot(&self) -> Option<u64> {
        (self.swap_slot != NO_SLOT).then_some(self.swap_slot as u64)
    }

    pub fn cached(&self) -> Option<u64> {
        (self.cached_slot != NO_SLOT).then_some(self.cached_slot as u64)
    }
}

/// Page table plus per-owner state counters and an exact LRU of evictable
/// (resident, unpinned) pages ordered by last access.
#[derive(Debug, Default)]
pub struct PageTable {
    ptes: Vec<Pte>,
    counts: Vec<[u64; 4]>,
    totals: [u64; 4],
    lru: BTreeMap<u64, u64>,
    next_stamp: u64,
    pinned_owner: Option<u32>,
    pub resident: u64,
}

impl PageTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ptes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ptes.is_empty()
    }

    pub fn pte(&self, vpn: u64) -> &Pte {
        &self.ptes[vpn as usize]
    }

    pub fn pte_mut(&mut self, vpn: u64) -> &mut Pte {
        &mut self.ptes[vpn as usize]
    }

    pub fn counts(&self, owner: u32) -> [u64; 4] {
        self.counts.get(owner as usize).copied().unwrap_or_default()
    }

    /// Pages per state across all owners, indexed by `PageState as usize`.
    pub fn totals(&self) -> [u64; 4] {
        self.totals
    }

    pub fn lru_len(&self) -> usize {
        self.lru.len()
    }

    pub fn pinned_owner(&self) -> Option<u32> {
        self.pinned_owner
    }

    fn stamp(&mut self) -> u64 {
        self.next_stamp += 1;
        self.next_stamp
    }

    /// Registers `n` new pages for `owner`. They start out not yet allocated
    /// (`Gone`) and become resident when first touched.
    pub fn add_pages(&mut self, owner: u32, n: u64) -> u64 {
        let first = self.ptes.len() as u64;
        if self.counts.len() <= owner as usize {
            self.counts.resize(owner as usize + 1, [0; 4]);
        }
        self.ptes.extend((0..n).map(|_| Pte {
            owner,
            state: PageState::Gone,
            dirty: false,
            frame_held: false,
            last_access: SimTime::ZERO,
            stamp: 0,
            swap_slot: NO_SLOT,
            cached_slot: NO_SLOT,
        }));
        first
    }

    /// Changes a page's state, keeping owner counters and the LRU in step.
    pub fn set_state(&mut self, vpn: u64, state: PageState) {
        let pte = self.ptes[vpn as usize];
        if pte.state == state {
            return;
        }
        if pte.state != PageState::Gone {
            self.counts[pte.owner as usize][pte.state as usize] -= 1;
            self.totals[pte.state as usize] -= 1;
        }
        if state != PageState::Gone {
            self.counts[pte.owner as usize][state as usize] += 1;
            self.totals[state as usize] += 1;
        }
        if pte.state == PageState::Resident {
            self.resident -= 1;
            self.lru.remove(&pte.stamp);
        }
        if state == PageState::Resident {
            self.resident += 1;
            let s = self.stamp();
            self.ptes[vpn as usize].stamp = s;
            if self.pinned_owner != Some(pte.owner) {
                self.lru.insert(s, vpn);
            }
        }
        self.ptes[vpn as usize].state = state;
    }

    /// Records an access to a resident page.
    pub fn touch(&mut self, vpn: u64, now: SimTime, write: bool) {
        let old = self.ptes[vpn as usize].stamp;
        let owner = self.ptes[vpn as usize].owner;
        let s = self.stamp();
        let pte = &mut self.ptes[vpn as usize];
        debug_assert_eq!(pte.state, PageState::Resident);
        pte.last_access = now;
        pte.stamp = s;
        if write {
            pte.dirty = true;
        }
        if self.pinned_owner != Some(owner) && self.lru.remove(&old).is_some() {
            self.lru.insert(s, vpn);
        }
    }

    /// Shields the resident pages of `owner` (the active tab) from reclaim,
    /// releasing the previously pinned owner. `range` spans each owner's vpns.
    pub fn pin_owner(
        &mut self,
        owner: Option<u32>,
        range_of: impl Fn(u32) -> std::ops::Range<u64>,
    ) {
        if self.pinned_owner == owner {
            return;
        }
        if let Some(prev) = self.pinned_owner.take() {
            for vpn in range_of(prev) {
                let p = self.ptes[vpn as usize];
                if p.state == PageState::Resident {
                    self.lru.insert(p.stamp, vpn);
                }
            }
        }
        if let Some(o) = owner {
            for vpn in range_of(o) {
                let p = self.ptes[vpn as usize];
                if p.state == PageState::Resident {
                    self.lru.remove(&p.stamp);
                }
            }
        }
        self.pinned_owner = owner;
    }

    /// Up to `n` coldest evictable pages, oldest first. Pinned pages are only
    /// offered when nothing else is resident.
    pub fn lru_select(&self, n: usize, pinned_range: Option<std::ops::Range<u64>>) -> Vec<u64> {
        if n == 0 {
            return Vec::new();
        }
        if !self.lru.is_empty() {
            return self.lru.values().take(n).copied().collect();
        }
        let Some(range) = pinned_range else {
            return Vec::new();
        };
        let mut v: Vec<(u64, u64)> = range
            .filter(|&vpn| self.ptes[vpn as usize].state == PageState::Resident)
            .map(|vpn| (self.ptes[vpn as usize].stamp, vpn))
            .collect();
        v.sort_unstable();
        v.into_iter().take(n).map(|(_, vpn)| vpn).collect()
    }

    /// Full recount of owner counters against the page table.
    pub fn audit(&self) -> SimResult<()> {
        let mut counts = vec![[0u64; 4]; self.counts.len()];
        let mut resident = 0;
        let mut in_lru = 0;
        for (vpn, p) in self.ptes.iter().enumerate() {
            if p.state != PageState::Gone {
                counts[p.owner as usize][p.state as usize] += 1;
            }
            if p.state == PageState::Resident {
                resident += 1;
                if self.pinned_owner != Some(p.owner) {
                    in_lru += 1;
                    if self.lru.get(&p.stamp) != Some(&(vpn as u64)) {
                        return Err(SimError::invariant("lru-membership", format!("vpn {vpn}")));
                    }
                }
            }
            if (p.state == PageState::InSwapDevice) != (p.swap_slot != NO_SLOT) {
                return Err(SimError::invariant(
                    "swap-slot-iff-device",
                    format!("vpn {vpn}"),
                ));
            }
        }
        let mut totals = [0u64; 4];
        for c in &counts {
            for (t, v) in totals.iter_mut().zip(c) {
                *t += v;
            }
        }
        if counts != self.counts
            || totals != self.totals
            || resident != self.resident
            || in_lru != self.lru.len()
        {
            return Err(SimError::invariant(
                "page-conservation",
                format!(
                    "resident {resident} vs {}, lru {in_lru} vs {}",
                    self.resident,
                    self.lru.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Next-fit swap slot allocator, so consecutive evictions land on adjacent
/// sectors.
#[derive(Debug)]
pub struct SwapSlots {
    used: Vec<bool>,
    cursor: usize,
    pub in_use: u64,
}

impl SwapSlots {
    pub fn new(total: u64) -> Self {
        SwapSlots {
            used: vec![false; total as usize],
            cursor: 0,
            in_use: 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.used.len() as u64
    }

    pub fn free(&self) -> u64 {
        self.total() - self.in_use
    }

    pub fn alloc(&mut self) -> Option<u64> {
        if self.in_use == self.total() {
            return None;
        }
        let n = self.used.len();
        loop {
            let i = self.cursor;
            self.cursor = (self.cursor + 1) % n;
            if !self.used[i] {
                self.used[i] = true;
                self.in_use += 1;
                return Some(i as u64);
            }
        }
    }

    pub fn release(&mut self, slot: u64) -> SimResult<()> {
        let s = &mut self.used[slot as usize];
        if !*s {
            return Err(SimError::invariant(
                "swap-slot-double-free",
                format!("slot {slot}"),
            ));
        }
        *s = false;
        self.in_use -= 1;
        Ok(())
    }

    /// Swap is considered full (no swap-cache retention) at half usage.
    pub fn half_full(&self) -> bool {
        self.in_use * 2 >= self.total()
    }
}

pub fn sector_of(slot: u64) -> u64 {
    slot * (PAGE_SIZE / crate::blkio::SECTOR_SIZE)
}

/// Snapshot of DRAM usage in pages/bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryLedger {
    pub dram_total: u64,
    pub dram_working_used: u64,
    pub zswap_pool_used: u64,
    pub zram_pool_used: u64,
}

impl MemoryLedger {
    pub fn pool_pages(&self) -> u64 {
        self.zswap_pool_used.div_ceil(PAGE_SIZE) + self.zram_pool_used.div_ceil(PAGE_SIZE)
    }

    pub fn used(&self) -> u64 {
        self.dram_working_used + self.pool_pages()
    }

    pub fn free(&self) -> u64 {
        self.dram_total.saturating_sub(self.used())
    }

    pub fn check(&self) -> SimResult<()> {
        if self.used() > self.dram_total {
            return Err(SimError::invariant(
                "dram-overcommit",
                format!("{} used of {}", self.used(), self.dram_total),
            ));
        }
        Ok(())
    }
}

/// Low/high free-page watermarks as fractions of DRAM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Watermarks {
    pub low: u64,
    pub high: u64,
}

impl Watermarks {
    pub fn for_dram(dram_pages: u64) -> Self {
        Watermarks {
            low: (dram_pages * 2).div_ceil(100),
            high: (dram_pages * 5).div_ceil(100),
        }
    }

    /// Reclaim target when free pages sit below the low watermark.
    pub fn check(&self, free: u64) -> Option<u64> {
        (free < self.low).then(|| self.high - free)
    }
}
