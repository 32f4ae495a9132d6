//! Swap-backend block devices, energy accounting and the endurance model.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
use crate::sampling::{ClampedLogNormal, DistSpec};
use crate::sim::SimTime;
use crate::workload::PAGE_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IoOp {
    Read,
    Write,
}

impl IoOp {
    pub fn code(self) -> char {
        match self {
            IoOp::Read => 'R',
            IoOp::Write => 'W',
        }
    }

    pub fn from_code(c: &str) -> Option<IoOp> {
        match c {
            "R" => Some(IoOp::Read),
            "W" => Some(IoOp::Write),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Optane,
    NandFlash,
}

pub const OPTANE_READ: DistSpec = DistSpec::new(22.4, 9.0, 5380.0);
pub const NAND_READ_FACTOR: f64 = 6.0;
pub const NAND_WRITE_FACTOR: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub kind: DeviceKind,
    pub capacity_bytes: u64,
    #[serde(default)]
    pub read_latency_us: Option<DistSpec>,
    #[serde(default)]
    pub write_latency_us: Option<DistSpec>,
    #[serde(default = "default_queue_depth")]
    pub queue_depth: u32,
    /// Transfer rate applied to the part of a request beyond one page.
    #[serde(default)]
    pub bandwidth_bytes_per_us: Option<u64>,
}

fn default_queue_depth() -> u32 {
    8
}

impl DeviceConfig {
    pub fn new(kind: DeviceKind, capacity_bytes: u64) -> Self {
        DeviceConfig {
            kind,
            capacity_bytes,
            read_latency_us: None,
            write_latency_us: None,
            queue_depth: default_queue_depth(),
            bandwidth_bytes_per_us: None,
        }
    }

    pub fn read_spec(&self) -> DistSpec {
        self.read_latency_us.unwrap_or(match self.kind {
            DeviceKind::Optane => OPTANE_READ,
            DeviceKind::NandFlash => OPTANE_READ.scaled(NAND_READ_FACTOR),
        })
    }

    pub fn write_spec(&self) -> DistSpec {
        // Optane serves reads and writes alike.
        self.write_latency_us.unwrap_or(match self.kind {
            DeviceKind::Optane => OPTANE_READ,
            DeviceKind::NandFlash => OPTANE_READ.scaled(NAND_WRITE_FACTOR),
        })
    }

    pub fn bandwidth(&self) -> u64 {
        self.bandwidth_bytes_per_us.unwrap_or(match self.kind {
            DeviceKind::Optane => 2048,
            DeviceKind::NandFlash => 1024,
        })
    }

    pub fn validate(&self) -> SimResult<()> {
        self.read_spec().validate("device.read_latency_us")?;
        self.write_spec().validate("device.write_latency_us")?;
        if self.queue_depth == 0 {
            return Err(SimError::config("device.queue_depth", "must be positive"));
        }
        if self.capacity_bytes < PAGE_SIZE {
            return Err(SimError::config(
                "device.capacity_bytes",
                "smaller than one page",
            ));
        }
        if self.bandwidth() == 0 {
            return Err(SimError::config(
                "device.bandwidth_bytes_per_us",
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// A started request: `(request id, completion time)`.
pub type Started = (u64, SimTime);

/// Device with `queue_depth` internal service slots. Requests handed to it
/// start immediately when a slot is free, otherwise wait in an internal FIFO;
/// that wait is part of their device time.
#[derive(Debug)]
pub struct DeviceModel {
    pub kind: DeviceKind,
    read: ClampedLogNormal,
    write: ClampedLogNormal,
    bandwidth: u64,
    pub queue_depth: u32,
    pub capacity_bytes: u64,
    busy: u32,
    waiting: VecDeque<(u64, IoOp, u64)>,
    pub wear_bytes_written: u64,
    pub bytes_read: u64,
    pub max_in_service: u32,
}

impl DeviceModel {
    pub fn new(cfg: &DeviceConfig) -> SimResult<Self> {
        cfg.validate()?;
        Ok(DeviceModel {
            kind: cfg.kind,
            read: ClampedLogNormal::fit(cfg.read_spec())?,
            write: ClampedLogNormal::fit(cfg.write_spec())?,
            bandwidth: cfg.bandwidth(),
            queue_depth: cfg.queue_depth,
            capacity_bytes: cfg.capacity_bytes,
            busy: 0,
            waiting: VecDeque::new(),
            wear_bytes_written: 0,
            bytes_read: 0,
            max_in_service: 0,
        })
    }

    pub fn sampler(&self, op: IoOp) -> &ClampedLogNormal {
        match op {
            IoOp::Read => &self.read,
            IoOp::Write => &self.write,
        }
    }

    /// Latency sample for one request: a per-command sample plus transfer time
    /// for bytes beyond the first page.
    pub fn service_time<R: Rng + ?Sized>(&self, op: IoOp, size: u64, rng: &mut R) -> SimTime {
        let base = self.sampler(op).sample(rng);
        let extra = size.saturating_sub(PAGE_SIZE) as f64 / self.bandwidth as f64;
        SimTime::from_us_f64(base + extra).max(SimTime(1))
    }

    pub fn in_service(&self) -> u32 {
        self.busy
    }

    pub fn waiting(&self) -> usize {
        self.waiting.len()
    }

    fn start<R: Rng + ?Sized>(
        &mut self,
        id: u64,
        op: IoOp,
        size: u64,
        now: SimTime,
        rng: &mut R,
    ) -> Started {
        self.busy += 1;
        self.max_in_service = self.max_in_service.max(self.busy);
        match op {
            IoOp::Write => self.wear_bytes_written += size,
            IoOp::Read => self.bytes_read += size,
        }
        (id, now + self.service_time(op, size, rng))
    }

    pub fn submit<R: Rng + ?Sized>(
        &mut self,
        id: u64,
        op: IoOp,
        size: u64,
        now: SimTime,
        rng: &mut R,
    ) -> Option<Started> {
        if self.busy < self.queue_depth {
            Some(self.start(id, op, size, now, rng))
        } else {
            self.waiting.push_back((id, op, size));
            None
        }
    }

    /// Frees the slot of a finished request and starts the next waiter.
    pub fn finish<R: Rng + ?Sized>(
        &mut self,
        now: SimTime,
        rng: &mut R,
    ) -> SimResult<Option<Started>> {
        if self.busy == 0 {
            return Err(SimError::invariant(
                "device-slots",
                "completion with no request in service",
            ));
        }
        self.busy -= 1;
        Ok(self
            .waiting
            .pop_front()
            .map(|(id, op, size)| self.start(id, op, size, now, rng)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemTarget {
    Dram,
    Nvm,
}

pub const DRAM_READ_PJ: f64 = 4.4;
pub const DRAM_WRITE_PJ: f64 = 5.5;
pub const NVM_READ_PJ: f64 = 2.47;
pub const NVM_SET_PJ: f64 = 14.03;
pub const NVM_RESET_PJ: f64 = 19.73;

/// Per-bit energy model. Bits are accumulated as integers per category and
/// converted at read-out, so totals are exactly linear in traffic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyMeter {
    /// Fraction of written NVM bits that are SET operations; the rest RESET.
    pub set_fraction: f64,
    pub dram_read_bits: u64,
    pub dram_write_bits: u64,
    pub nvm_read_bits: u64,
    pub nvm_write_bits: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub dram_read_pj: f64,
    pub dram_write_pj: f64,
    pub nvm_read_pj: f64,
    pub nvm_write_pj: f64,
}

impl EnergyBreakdown {
    pub fn total_pj(&self) -> f64 {
        self.dram_read_pj + self.dram_write_pj + self.nvm_read_pj + self.nvm_write_pj
    }
}

impl EnergyMeter {
    pub fn new(set_fraction: f64) -> Self {
        EnergyMeter {
            set_fraction,
            ..Default::default()
        }
    }

    pub fn nvm_write_pj_per_bit(&self) -> f64 {
        NVM_SET_PJ * self.set_fraction + NVM_RESET_PJ * (1.0 - self.set_fraction)
    }

    pub fn pj_per_bit(&self, target: MemTarget, op: IoOp) -> f64 {
        match (target, op) {
            (MemTarget::Dram, IoOp::Read) => DRAM_READ_PJ,
            (MemTarget::Dram, IoOp::Write) => DRAM_WRITE_PJ,
            (MemTarget::Nvm, IoOp::Read) => NVM_READ_PJ,
            (MemTarget::Nvm, IoOp::Write) => self.nvm_write_pj_per_bit(),
        }
    }

    /// Records `bits` of traffic and returns the energy they cost.
    pub fn account_energy(&mut self, target: MemTarget, op: IoOp, bits: u64) -> f64 {
        let slot = match (target, op) {
            (MemTarget::Dram, IoOp::Read) => &mut self.dram_read_bits,
            (MemTarget::Dram, IoOp::Write) => &mut self.dram_write_bits,
            (MemTarget::Nvm, IoOp::Read) => &mut self.nvm_read_bits,
            (MemTarget::Nvm, IoOp::Write) => &mut self.nvm_write_bits,
        };
        *slot += bits;
        bits as f64 * self.pj_per_bit(target, op)
    }

    pub fn breakdown(&self) -> EnergyBreakdown {
        EnergyBreakdown {
            dram_read_pj: self.dram_read_bits as f64 * DRAM_READ_PJ,
            dram_write_pj: self.dram_write_bits as f64 * DRAM_WRITE_PJ,
            nvm_read_pj: self.nvm_read_bits as f64 * NVM_READ_PJ,
            nvm_write_pj: self.nvm_write_bits as f64 * self.nvm_write_pj_per_bit(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Lifetime {
    Seconds(f64),
    Unbounded,
}

impl Lifetime {
    pub fn years(self) -> Option<f64> {
        match self {
            Lifetime::Seconds(s) => Some(s / SECONDS_PER_YEAR),
            Lifetime::Unbounded => None,
        }
    }
}

pub const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;
pub const DEFAULT_ENDURANCE: f64 = 1e6;
pub const REALISTIC_WEAR_LEVELING: f64 = 0.53;

pub fn estimate_lifetime(
    capacity_bytes: f64,
    endurance: f64,
    mean_write_rate: f64,
    efficiency: f64,
) -> Lifetime {
    if mean_write_rate <= 0.0 {
        Lifetime::Unbounded
    } else {
        Lifetime::Seconds(efficiency * capacity_bytes * endurance / mean_write_rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifetimeReport {
    pub write_rate_bytes_per_s: f64,
    pub optimistic: Lifetime,
    pub realistic: Lifetime,
}

pub fn lifetime_report(
    bytes_written: u64,
    elapsed: SimTime,
    capacity_bytes: u64,
    endurance: f64,
) -> LifetimeReport {
    let secs = elapsed.as_secs_f64();
    let rate = if secs > 0.0 {
        bytes_written as f64 / secs
    } else {
        0.0
    };
    LifetimeReport {
        write_rate_bytes_per_s: rate,
        optimistic: estimate_lifetime(capacity_bytes as f64, endurance, rate, 1.0),
        realistic: estimate_lifetime(
            capacity_bytes as f64,
            endurance,
            rate,
            REALISTIC_WEAR_LEVELING,
        ),
    }
}
