//! In-DRAM compressed stores: the ZRAM swap device and the Zswap pool that
//! fronts a physical swap device.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
use crate::sampling::{ClampedLogNormal, DistSpec};
use crate::sim::SimTime;
use crate::workload::PAGE_SIZE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    pub ratio: DistSpec,
    pub compress_us: DistSpec,
    pub decompress_us: DistSpec,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            ratio: DistSpec::new(1.14, 0.001, 3.0),
            compress_us: DistSpec::new(12.1, 1.5, 138.2),
            decompress_us: DistSpec::new(3.9, 1.5, 42.6),
        }
    }
}

impl CompressionConfig {
    /// Ratio close to the nominal 3:1 that ZRAM capacity planning assumes.
    pub fn nominal_three_to_one() -> Self {
        CompressionConfig {
            ratio: DistSpec::new(2.9, 1.5, 3.0),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> SimResult<()> {
        self.ratio.validate("compression.ratio")?;
        self.compress_us.validate("compression.compress_us")?;
        self.decompress_us.validate("compression.decompress_us")
    }
}

pub fn compressed_size(ratio: f64) -> u64 {
    (PAGE_SIZE as f64 / ratio).ceil() as u64
}

#[derive(Clone, Debug)]
pub struct CompressionModel {
    ratio: ClampedLogNormal,
    compress: ClampedLogNormal,
    decompress: ClampedLogNormal,
}

impl CompressionModel {
    pub fn new(cfg: &CompressionConfig) -> SimResult<Self> {
        cfg.validate()?;
        Ok(CompressionModel {
            ratio: ClampedLogNormal::fit(cfg.ratio)?,
            compress: ClampedLogNormal::fit(cfg.compress_us)?,
            decompress: ClampedLogNormal::fit(cfg.decompress_us)?,
        })
    }

    /// Compressed size in bytes and CPU time in (fractional) microseconds.
    pub fn compress_page<R: Rng + ?Sized>(&self, rng: &mut R) -> (u64, f64) {
        let size = compressed_size(self.ratio.sample(rng));
        (size, self.compress.sample(rng))
    }

    pub fn decompress_page<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.decompress.sample(rng)
    }

    pub fn ratio_sampler(&self) -> &ClampedLogNormal {
        &self.ratio
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ZswapEntry {
    pub size: u64,
    pub stored_at: SimTime,
    /// Swap slot reserved for the page; written back here on eviction.
    pub slot: u64,
    seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StoreOutcome {
    Stored,
    /// Pages pushed out of the pool to make room, oldest first, each needing
    /// a device write to its slot.
    EvictedThenStored(Vec<(u64, ZswapEntry)>),
    Bypassed,
}

#[derive(Debug)]
pub struct ZswapPool {
    pub max_pool_bytes: u64,
    pub used_bytes: u64,
    entries: HashMap<u64, ZswapEntry>,
    order: BTreeMap<u64, u64>,
    next_seq: u64,
    pub bypass_threshold: u64,
    pub hits: u64,
    pub misses: u64,
    pub stores: u64,
    pub evictions: u64,
    pub bypasses: u64,
}

impl ZswapPool {
    pub fn new(max_pool_bytes: u64) -> Self {
        ZswapPool {
            max_pool_bytes,
            used_bytes: 0,
            entries: HashMap::new(),
            order: BTreeMap::new(),
            next_seq: 0,
            bypass_threshold: PAGE_SIZE * 3 / 4,
            hits: 0,
            misses: 0,
            stores: 0,
            evictions: 0,
            bypasses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, vpn: u64) -> bool {
        self.entries.contains_key(&vpn)
    }

    pub fn get(&self, vpn: u64) -> Option<&ZswapEntry> {
        self.entries.get(&vpn)
    }

    fn remove(&mut self, vpn: u64) -> Option<ZswapEntry> {
        let e = self.entries.remove(&vpn)?;
        self.order.remove(&e.seq);
        self.used_bytes -= e.size;
        Some(e)
    }

    pub fn store(
        &mut self,
        vpn: u64,
        slot: u64,
        size: u64,
        now: SimTime,
    ) -> SimResult<StoreOutcome> {
        if self.entries.contains_key(&vpn) {
            return Err(SimError::invariant(
                "zswap-store",
                format!("vpn {vpn} already pooled"),
            ));
        }
        if size > self.bypass_threshold || size > self.max_pool_bytes {
            self.bypasses += 1;
            return Ok(StoreOutcome::Bypassed);
        }
        let mut victims = Vec::new();
        while self.used_bytes + size > self.max_pool_bytes {
            let (_, &victim) = self
                .order
                .iter()
                .next()
                .expect("non-empty pool when over budget");
            let e = self.remove(victim).expect("ordered entry present");
            victims.push((victim, e));
        }
        self.evictions += victims.len() as u64;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.insert(
            vpn,
            ZswapEntry {
                size,
                stored_at: now,
                slot,
                seq,
            },
        );
        self.order.insert(seq, vpn);
        self.used_bytes += size;
        self.stores += 1;
        Ok(if victims.is_empty() {
            StoreOutcome::Stored
        } else {
            StoreOutcome::EvictedThenStored(victims)
        })
    }

    /// Looks the page up on a fault. A hit removes the entry.
    pub fn load(&mut self, vpn: u64) -> Option<ZswapEntry> {
        match self.remove(vpn) {
            Some(e) => {
                self.hits += 1;
                Some(e)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    /// Drops an entry without counting a load (tab discard).
    pub fn invalidate(&mut self, vpn: u64) -> Option<ZswapEntry> {
        self.remove(vpn)
    }

    pub fn hit_rate(&self) -> Option<f64> {
        let total = self.hits + self.misses;
        (total > 0).then(|| self.hits as f64 / total as f64)
    }

    pub fn audit(&self) -> SimResult<()> {
        let sum: u64 = self.entries.values().map(|e| e.size).sum();
        if sum != self.used_bytes
            || self.used_bytes > self.max_pool_bytes
            || self.order.len() != self.entries.len()
        {
            return Err(SimError::invariant(
                "zswap-pool-accounting",
                format!(
                    "used={} sum={} max={}",
                    self.used_bytes, sum, self.max_pool_bytes
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ZramFull;

#[derive(Debug)]
pub struct ZramDevice {
    pub physical_cap: u64,
    pub logical_cap: u64,
    /// Ratio assumed when advertising free slots.
    pub assumed_ratio: u64,
    pub used_physical: u64,
    slots: HashMap<u64, u64>,
    pub writes: u64,
    pub reads: u64,
}

impl ZramDevice {
    pub fn new(physical_cap: u64, logical_cap: u64, assumed_ratio: u64) -> Self {
        ZramDevice {
            physical_cap,
            logical_cap,
            assumed_ratio: assumed_ratio.max(1),
            used_physical: 0,
            slots: HashMap::new(),
            writes: 0,
            reads: 0,
        }
    }

    pub fn used_slots(&self) -> u64 {
        self.slots.len() as u64
    }

    pub fn logical_slots(&self) -> u64 {
        self.logical_cap / PAGE_SIZE
    }

    /// Free slots as seen by user space: the logical headroom, further limited
    /// by the remaining physical budget at the assumed ratio.
    pub fn free_slots(&self) -> u64 {
        let logical = self.logical_slots().saturating_sub(self.used_slots());
        let physical = (self.physical_cap - self.used_physical) * self.assumed_ratio / PAGE_SIZE;
        logical.min(physical)
    }

    /// Stores a page of `compressed` bytes; incompressible pages are kept at
    /// page size. Returns the bytes charged.
    pub fn write(&mut self, vpn: u64, compressed: u64) -> Result<u64, ZramFull> {
        let stored = compressed.min(PAGE_SIZE);
        if self.used_slots() >= self.logical_slots()
            || self.used_physical + stored > self.physical_cap
        {
            return Err(ZramFull);
        }
        let prev = self.slots.insert(vpn, stored);
        debug_assert!(prev.is_none());
        self.used_physical += stored;
        self.writes += 1;
        Ok(stored)
    }

    /// Reads a page back, freeing its slot. Returns the stored size.
    pub fn read(&mut self, vpn: u64) -> SimResult<u64> {
        let size = self.free(vpn)?;
        self.reads += 1;
        Ok(size)
    }

    pub fn free(&mut self, vpn: u64) -> SimResult<u64> {
        let size = self
            .slots
            .remove(&vpn)
            .ok_or_else(|| SimError::invariant("zram-slot", format!("vpn {vpn} not stored")))?;
        self.used_physical -= size;
        Ok(size)
    }

    pub fn audit(&self) -> SimResult<()> {
        let sum: u64 = self.slots.values().sum();
        if sum != self.used_physical || self.used_physical > self.physical_cap {
            return Err(SimError::invariant(
                "zram-accounting",
                format!(
                    "used={} sum={} cap={}",
                    self.used_physical, sum, self.physical_cap
                ),
            ));
        }
        Ok(())
    }
}
