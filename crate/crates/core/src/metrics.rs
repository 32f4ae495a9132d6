//! Run statistics. Everything in a [`RunReport`] is derived from an
//! [`Observations`] log, which both the engine and trace replay produce.

use serde::{Deserialize, Serialize};

use crate::blkio::IoRecord;
use crate::completion::TimeBuckets;
use crate::device::{
    lifetime_report, EnergyBreakdown, EnergyMeter, IoOp, LifetimeReport, MemTarget,
};
use crate::sim::SimTime;
use crate::workload::tab_bucket;

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 * n)` of
/// the sorted samples.
pub fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: u64,
    pub mean_us: f64,
    pub p50_us: u64,
    pub p90_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

impl LatencySummary {
    pub fn of(samples: impl IntoIterator<Item = u64>) -> Option<Self> {
        let mut v: Vec<u64> = samples.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_unstable();
        let sum: u128 = v.iter().map(|&x| x as u128).sum();
        Some(LatencySummary {
            count: v.len() as u64,
            mean_us: sum as f64 / v.len() as f64,
            p50_us: percentile(&v, 50.0)?,
            p90_us: percentile(&v, 90.0)?,
            p99_us: percentile(&v, 99.0)?,
            max_us: *v.last()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketFraction {
    pub lo: u32,
    pub hi: u32,
    pub samples: u64,
    pub high: u64,
}

impl BucketFraction {
    pub fn fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.high as f64 / self.samples as f64
        }
    }
}

/// Per tab-count bucket, how many `(tab_count, latency)` samples reach
/// `threshold_us`. Only buckets holding samples are listed, in order.
pub fn high_latency_fractions(
    samples: impl IntoIterator<Item = (u32, u64)>,
    threshold_us: u64,
    width: u32,
) -> Vec<BucketFraction> {
    let mut out: std::collections::BTreeMap<u32, BucketFraction> = Default::default();
    for (tabs, lat) in samples {
        let (lo, hi) = tab_bucket(tabs, width);
        let b = out.entry(lo).or_insert(BucketFraction {
            lo,
            hi,
            samples: 0,
            high: 0,
        });
        b.samples += 1;
        if lat >= threshold_us {
            b.high += 1;
        }
    }
    out.into_values().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchSample {
    pub id: u64,
    pub tab_count: u32,
    pub latency_us: u64,
    pub faults: u32,
    pub phase: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    ZswapHit,
    Zram,
    /// Page still in memory under writeback.
    SwapCache,
    Major,
}

impl FaultKind {
    pub fn code(self) -> &'static str {
        match self {
            FaultKind::ZswapHit => "Z",
            FaultKind::Zram => "R",
            FaultKind::SwapCache => "W",
            FaultKind::Major => "M",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        Some(match s {
            "Z" => FaultKind::ZswapHit,
            "R" => FaultKind::Zram,
            "W" => FaultKind::SwapCache,
            "M" => FaultKind::Major,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSample {
    pub kind: FaultKind,
    pub latency_us: u64,
    /// Looked up in the Zswap pool first and missed.
    pub zswap_miss: bool,
}

/// Static facts about a run needed to turn observations into a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub scenario: String,
    pub seed: u64,
    pub swap_capacity_bytes: u64,
    pub endurance: f64,
    pub nvm_set_fraction: f64,
    pub bucket_width: u32,
    pub high_latency_us: u64,
    pub cores: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Observations {
    pub opens: u32,
    pub opened_at_first_discard: Option<u32>,
    pub discards: u32,
    pub switches: Vec<SwitchSample>,
    pub faults: Vec<FaultSample>,
    /// Completed requests in completion order.
    pub ios: Vec<IoRecord>,
    pub queued_reads: u64,
    pub queued_writes: u64,
    pub merges: u64,
    pub swap_in_bytes: u64,
    pub swap_out_bytes: u64,
    /// Compressed bytes written into / read out of in-DRAM pools.
    pub pool_store_bytes: u64,
    pub pool_load_bytes: u64,
    pub buckets: TimeBuckets,
    pub elapsed: SimTime,
}

impl Observations {
    pub fn energy(&self, set_fraction: f64) -> EnergyMeter {
        let mut m = EnergyMeter::new(set_fraction);
        m.account_energy(MemTarget::Nvm, IoOp::Read, self.swap_in_bytes * 8);
        m.account_energy(MemTarget::Nvm, IoOp::Write, self.swap_out_bytes * 8);
        m.account_energy(MemTarget::Dram, IoOp::Read, self.pool_load_bytes * 8);
        m.account_energy(MemTarget::Dram, IoOp::Write, self.pool_store_bytes * 8);
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSummary {
    pub zswap_hits: u64,
    pub zswap_misses: u64,
    pub zram: u64,
    pub swap_cache: u64,
    pub major: u64,
    pub minor_latency: Option<LatencySummary>,
    pub major_latency: Option<LatencySummary>,
    /// `(upper bound us, count)` over power-of-two latency bins.
    pub histogram: Vec<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlkSummary {
    pub requests: u64,
    pub reads: u64,
    pub writes: u64,
    pub merges: u64,
    pub write_fraction: Option<f64>,
    pub q2d: Option<LatencySummary>,
    pub d2c: Option<LatencySummary>,
    pub q2c: Option<LatencySummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub tabs_opened: u32,
    pub tabs_before_first_discard: Option<u32>,
    pub discards: u32,
    pub switch_latency: Option<LatencySummary>,
    pub heavy_switch_latency: Option<LatencySummary>,
    pub high_latency: Vec<BucketFraction>,
    pub faults: FaultSummary,
    pub blk: BlkSummary,
    pub swap_in_bytes: u64,
    pub swap_out_bytes: u64,
    pub zswap_hit_rate: Option<f64>,
    pub energy: EnergyBreakdown,
    pub energy_total_pj: f64,
    pub lifetime: LifetimeReport,
    pub time: TimeBuckets,
    pub elapsed_us: u64,
}

fn histogram(lat: impl Iterator<Item = u64>) -> Vec<(u64, u64)> {
    let mut bins: std::collections::BTreeMap<u64, u64> = Default::default();
    for l in lat {
        *bins.entry(l.max(1).next_power_of_two()).or_default() += 1;
    }
    bins.into_iter().collect()
}

impl RunReport {
    pub fn build(meta: &RunMeta, obs: &Observations) -> Self {
        let f = &obs.faults;
        let count = |k: FaultKind| f.iter().filter(|s| s.kind == k).count() as u64;
        let zswap_hits = count(FaultKind::ZswapHit);
        let zswap_misses = f.iter().filter(|s| s.zswap_miss).count() as u64;
        let faults = FaultSummary {
            zswap_hits,
            zswap_misses,
            zram: count(FaultKind::Zram),
            swap_cache: count(FaultKind::SwapCache),
            major: count(FaultKind::Major),
            minor_latency: LatencySummary::of(
                f.iter()
                    .filter(|s| s.kind != FaultKind::Major)
                    .map(|s| s.latency_us),
            ),
            major_latency: LatencySummary::of(
                f.iter()
                    .filter(|s| s.kind == FaultKind::Major)
                    .map(|s| s.latency_us),
            ),
            histogram: histogram(f.iter().map(|s| s.latency_us)),
        };
        let queued = obs.queued_reads + obs.queued_writes;
        let blk = BlkSummary {
            requests: queued,
            reads: obs.queued_reads,
            writes: obs.queued_writes,
            merges: obs.merges,
            write_fraction: (queued > 0).then(|| obs.queued_writes as f64 / queued as f64),
            q2d: LatencySummary::of(obs.ios.iter().map(|r| r.q2d())),
            d2c: LatencySummary::of(obs.ios.iter().map(|r| r.d2c())),
            q2c: LatencySummary::of(obs.ios.iter().map(|r| r.q2c())),
        };
        let energy = obs.energy(meta.nvm_set_fraction).breakdown();
        let lookups = zswap_hits + zswap_misses;
        RunReport {
            scenario: meta.scenario.clone(),
            seed: meta.seed,
            tabs_opened: obs.opens,
            tabs_before_first_discard: obs.opened_at_first_discard,
            discards: obs.discards,
            switch_latency: LatencySummary::of(obs.switches.iter().map(|s| s.latency_us)),
            heavy_switch_latency: LatencySummary::of(
                obs.switches
                    .iter()
                    .filter(|s| s.phase == 3)
                    .map(|s| s.latency_us),
            ),
            high_latency: high_latency_fractions(
                obs.switches.iter().map(|s| (s.tab_count, s.latency_us)),
                meta.high_latency_us,
                meta.bucket_width,
            ),
            faults,
            blk,
            swap_in_bytes: obs.swap_in_bytes,
            swap_out_bytes: obs.swap_out_bytes,
            zswap_hit_rate: (lookups > 0).then(|| zswap_hits as f64 / lookups as f64),
            energy_total_pj: energy.total_pj(),
            energy,
            lifetime: lifetime_report(
                obs.swap_out_bytes,
                obs.elapsed,
                meta.swap_capacity_bytes,
                meta.endurance,
            ),
            time: obs.buckets,
            elapsed_us: obs.elapsed.as_us(),
        }
    }
}
