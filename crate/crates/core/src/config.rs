//! Scenario configuration: named presets plus JSON field overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::blkio::{BlkConfig, SchedulerConfig};
use crate::completion::CompletionConfig;
use crate::device::{DeviceConfig, DeviceKind, DEFAULT_ENDURANCE};
use crate::error::{SimError, SimResult};
use crate::swapcache::CompressionConfig;
use crate::workload::{WorkloadConfig, GIB, PAGE_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Baseline,
    Optane,
    OptaneZswap,
    NandFlash,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Baseline,
        Preset::Optane,
        Preset::OptaneZswap,
        Preset::NandFlash,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Optane => "optane",
            Preset::OptaneZswap => "optane_zswap",
            Preset::NandFlash => "nand_flash",
        }
    }

    pub fn from_name(s: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SwapBackend {
    Zram {
        physical_bytes: u64,
        logical_bytes: u64,
    },
    Device(DeviceConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZswapConfig {
    pub enabled: bool,
    pub max_pool_percent: f64,
}

impl Default for ZswapConfig {
    fn default() -> Self {
        ZswapConfig {
            enabled: false,
            max_pool_percent: 20.0,
        }
    }
}

/// Kernel-side costs and limits of the memory manager.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Copy/install cost of a faulted page.
    pub copy_cost_us: f64,
    /// Per-page cost of scanning and unmapping during reclaim.
    pub scan_cost_us: f64,
    /// CPU work is charged in bursts of about this length.
    pub cpu_quantum_us: u64,
    pub kswapd_batch: u32,
    /// kswapd stops issuing writeback while this many pages are in flight.
    pub writeback_limit: u32,
    /// Full page-table audit every this many events (0 disables).
    pub audit_interval: u64,
    pub endurance_cycles: f64,
    /// Fraction of written NVM bits that are SET transitions.
    pub nvm_set_fraction: f64,
    pub max_events: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            copy_cost_us: 0.5,
            scan_cost_us: 0.2,
            cpu_quantum_us: 100,
            kswapd_batch: 32,
            writeback_limit: 256,
            audit_interval: 50_000,
            endurance_cycles: DEFAULT_ENDURANCE,
            nvm_set_fraction: 0.5,
            max_events: 200_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Divides every capacity, tab footprint and render cost.
    #[serde(default = "one")]
    pub scale_divisor: u64,
    pub dram_bytes: u64,
    pub swap: SwapBackend,
    #[serde(default)]
    pub zswap: ZswapConfig,
    #[serde(default)]
    pub compression: CompressionConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub blkio: BlkConfig,
    #[serde(default)]
    pub completion: CompletionConfig,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub engine: EngineConfig,
}

fn one() -> u64 {
    1
}

impl ScenarioConfig {
    pub fn preset(p: Preset) -> Self {
        let optane = DeviceConfig::new(DeviceKind::Optane, 16 * GIB);
        let (dram, swap, zswap, weight) = match p {
            Preset::Baseline => (
                8 * GIB,
                SwapBackend::Zram {
                    physical_bytes: 4 * GIB,
                    logical_bytes: 12 * GIB,
                },
                false,
                4,
            ),
            Preset::Optane => (4 * GIB, SwapBackend::Device(optane), false, 1),
            Preset::OptaneZswap => (4 * GIB, SwapBackend::Device(optane), true, 1),
            Preset::NandFlash => (
                4 * GIB,
                SwapBackend::Device(DeviceConfig::new(DeviceKind::NandFlash, 16 * GIB)),
                false,
                4,
            ),
        };
        ScenarioConfig {
            name: p.name().to_string(),
            seed: 0,
            scale_divisor: 1,
            dram_bytes: dram,
            swap,
            zswap: ZswapConfig {
                enabled: zswap,
                ..Default::default()
            },
            compression: CompressionConfig::nominal_three_to_one(),
            scheduler: SchedulerConfig::default(),
            blkio: BlkConfig::default(),
            completion: CompletionConfig::default(),
            workload: WorkloadConfig {
                ram_vs_swap_weight: weight,
                ..Default::default()
            },
            engine: EngineConfig::default(),
        }
    }

    /// Optane swap behind 3 GiB of DRAM with tabs capped at 50 and the heavy
    /// phase switching over every live tab. Refaulted pages keep their slots,
    /// so device traffic is mostly reads once the first eviction wave passes.
    pub fn read_heavy() -> Self {
        let mut c = Self::preset(Preset::Optane);
        c.name = "read_heavy".into();
        c.dram_bytes = 3 * GIB;
        c.workload.max_tabs = 50;
        c.workload.heavy_window_fraction = 1.0;
        c
    }

    /// Effective capacity (DRAM outside the ZRAM pool plus swap space), as
    /// used for capacity planning.
    pub fn effective_bytes(&self) -> u64 {
        match &self.swap {
            SwapBackend::Zram {
                physical_bytes,
                logical_bytes,
            } => self.dram_bytes - physical_bytes + logical_bytes,
            SwapBackend::Device(d) => self.dram_bytes + d.capacity_bytes,
        }
    }

    fn scaled_pages(&self, bytes: u64) -> u64 {
        bytes / self.scale_divisor / PAGE_SIZE
    }

    pub fn dram_pages(&self) -> u64 {
        self.scaled_pages(self.dram_bytes)
    }

    pub fn swap_pages(&self) -> u64 {
        match &self.swap {
            SwapBackend::Zram { logical_bytes, .. } => self.scaled_pages(*logical_bytes),
            SwapBackend::Device(d) => self.scaled_pages(d.capacity_bytes),
        }
    }

    pub fn scaled_us(&self, us: u64) -> u64 {
        us / self.scale_divisor
    }

    pub fn discard_threshold_pages(&self) -> u64 {
        self.workload
            .discard_threshold_pages
            .unwrap_or_else(|| self.workload.footprint_pages(self.scale_divisor).0.round() as u64)
    }

    pub fn validate(&self) -> SimResult<()> {
        if self.scale_divisor == 0 {
            return Err(SimError::config("scale_divisor", "must be positive"));
        }
        if self.dram_pages() < 64 {
            return Err(SimError::config(
                "dram_bytes",
                "fewer than 64 pages after scaling",
            ));
        }
        match &self.swap {
            SwapBackend::Zram {
                physical_bytes,
                logical_bytes,
            } => {
                if physical_bytes >= &self.dram_bytes {
                    return Err(SimError::config(
                        "swap.zram.physical_bytes",
                        "must be below dram_bytes",
                    ));
                }
                if logical_bytes < physical_bytes {
                    return Err(SimError::config(
                        "swap.zram.logical_bytes",
                        "below physical_bytes",
                    ));
                }
                if self.zswap.enabled {
                    return Err(SimError::config(
                        "zswap.enabled",
                        "zswap needs a device backend",
                    ));
                }
            }
            SwapBackend::Device(d) => {
                d.validate()?;
                if self.swap_pages() == 0 {
                    return Err(SimError::config(
                        "swap.device.capacity_bytes",
                        "no slots after scaling",
                    ));
                }
            }
        }
        if !(self.zswap.max_pool_percent > 0.0 && self.zswap.max_pool_percent <= 100.0) {
            return Err(SimError::config(
                "zswap.max_pool_percent",
                "must be in (0, 100]",
            ));
        }
        if self.engine.cpu_quantum_us == 0
            || self.engine.kswapd_batch == 0
            || self.engine.writeback_limit == 0
        {
            return Err(SimError::config(
                "engine",
                "quantum, batch and writeback limit must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.engine.nvm_set_fraction) {
            return Err(SimError::config(
                "engine.nvm_set_fraction",
                "must be in [0, 1]",
            ));
        }
        self.compression.validate()?;
        self.scheduler.validate()?;
        self.blkio.validate()?;
        self.workload.validate()
    }

    /// Parses a scenario document. A `preset` key selects the base values and
    /// every other key overrides fields (objects merge recursively); without
    /// it the document must be complete.
    pub fn from_json(text: &str) -> SimResult<Self> {
        let doc: Value = serde_json::from_str(text)
            .map_err(|e| SimError::config("<document>", e.to_string()))?;
        let Value::Object(mut map) = doc else {
            return Err(SimError::config("<document>", "expected a JSON object"));
        };
        let value = match map.remove("preset") {
            Some(Value::String(name)) => {
                let start = match Preset::from_name(&name) {
                    Some(p) => Self::preset(p),
                    None if name == "read_heavy" => Self::read_heavy(),
                    None => {
                        return Err(SimError::config(
                            "preset",
                            format!("unknown preset `{name}`"),
                        ))
                    }
                };
                let mut base = serde_json::to_value(start).expect("config serializes");
                merge(&mut base, Value::Object(map));
                base
            }
            Some(_) => return Err(SimError::config("preset", "must be a string")),
            None => Value::Object(map),
        };
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            SimError::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
