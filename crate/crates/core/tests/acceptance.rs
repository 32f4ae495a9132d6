//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Runs without the libtest harness so the verdict
//! lines are always visible.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;

use swapsim::blkio::{BlkConfig, BlockLayer, SchedulerConfig, SchedulerKind, Submitted};
use swapsim::completion::{
    hybrid_latency, irq_latency, polling_latency, CompletionConfig, CompletionEstimator,
    CompletionMode,
};
use swapsim::config::{Preset, ScenarioConfig};
use swapsim::device::{estimate_lifetime, EnergyMeter, IoOp, Lifetime, MemTarget};
use swapsim::engine::simulate;
use swapsim::metrics::{percentile, RunReport, SwitchSample};
use swapsim::runner::{replay_check, run_to_dir, TRACE_FILE};
use swapsim::sim::{rng_for, SimTime, Stream};
use swapsim::workload::{available_mem, classify_pressure, compute_fill, PressureLevel};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const SCALE: u64 = 32;
const MAX_SCENARIO: Duration = Duration::from_secs(60);

const FORMULA_TOL: f64 = 1e-9;
const MIN_FORMULA_CASES: usize = 20;
const TAB_RATIO: (f64, f64) = (1.15, 1.35);
const ZSWAP_TRAFFIC_CUT: f64 = 1.8;
const ZSWAP_TAB_DROP: (f64, f64) = (0.05, 0.20);
const ZSWAP_HIT_RATE: f64 = 0.90;
const OPTANE_ENERGY_FACTOR: f64 = 10.0;
const ZSWAP_ENERGY_FACTOR: f64 = 0.6;
const KYBER_MARGIN: f64 = 0.10;
const HEAVY_TABS: std::ops::RangeInclusive<u32> = 41..=50;
const STREAMS: u32 = 10_000;
const COMPLETION_TRIPLES: usize = 100_000;
const LIFETIME_TOL: f64 = 0.01;
const REALISTIC_FACTOR: f64 = 0.53;

type Verdict = Result<String, String>;
type Criterion = (&'static str, &'static str, fn(&mut Ctx) -> Verdict);

struct Run {
    report: RunReport,
    switches: Vec<SwitchSample>,
    wall: Duration,
}

#[derive(Default)]
struct Ctx {
    runs: HashMap<(String, u64), Run>,
}

impl Ctx {
    fn get(&mut self, label: &str, seed: u64, make: impl FnOnce() -> ScenarioConfig) -> &Run {
        self.runs
            .entry((label.to_string(), seed))
            .or_insert_with(|| {
                let mut cfg = make();
                cfg.seed = seed;
                cfg.scale_divisor = SCALE;
                let t = Instant::now();
                let out = simulate(&cfg).unwrap_or_else(|e| panic!("{label} seed {seed}: {e}"));
                Run {
                    report: out.report,
                    switches: out.obs.switches,
                    wall: t.elapsed(),
                }
            })
    }

    fn preset(&mut self, p: Preset, seed: u64) -> &Run {
        self.get(p.name(), seed, || ScenarioConfig::preset(p))
    }

    fn read_heavy(&mut self, kind: SchedulerKind, completion: CompletionConfig, seed: u64) -> &Run {
        let label = format!("read_heavy/{}/{}", kind.name(), completion.label());
        self.get(&label, seed, || {
            let mut c = ScenarioConfig::read_heavy();
            c.scheduler = SchedulerConfig::of(kind);
            c.completion = completion;
            c
        })
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    if b == 0.0 {
        a == 0.0
    } else {
        ((a - b) / b).abs() <= tol
    }
}

fn collect(fails: Vec<String>, ok: String) -> Verdict {
    if fails.is_empty() {
        Ok(ok)
    } else {
        Err(fails.join("; "))
    }
}

// Expected values below were computed with exact rational arithmetic.

const FILL_CASES: [(u64, u64, u64, u64, u64, f64); 24] = [
    (0, 4, 0, 16, 4, 1.0),
    (4, 4, 16, 16, 4, 0.0),
    (2147483648, 4294967296, 8589934592, 17179869184, 4, 0.5),
    (1073741824, 4294967296, 17179869184, 17179869184, 1, 0.15),
    (4294967296, 4294967296, 0, 17179869184, 1, 0.8),
    (
        0,
        8589934592,
        12884901888,
        12884901888,
        4,
        0.7272727272727273,
    ),
    (
        8589934592,
        8589934592,
        0,
        12884901888,
        4,
        0.2727272727272727,
    ),
    (3, 10, 7, 20, 2, 0.675),
    (1, 1, 0, 1, 1, 0.5),
    (0, 1, 1, 1, 1, 0.5),
    (
        591937865764,
        868231286072,
        47648925713,
        105874957392,
        2,
        0.3315423273436956,
    ),
    (
        57697068890,
        127057107038,
        30364797839,
        82526500300,
        2,
        0.567019289722041,
    ),
    (
        5244506512,
        130672314919,
        118354974526,
        137214365097,
        7,
        0.8525872346242986,
    ),
    (
        337459504728,
        636227141294,
        101713427092,
        315332801090,
        2,
        0.5108711712473538,
    ),
    (
        225996925361,
        816850686150,
        118247838050,
        140497445922,
        1,
        0.6404184101075677,
    ),
    (
        271870429101,
        690532939545,
        200980329511,
        1000398563207,
        6,
        0.6437895136583451,
    ),
    (
        93953000135,
        177142045692,
        492759215392,
        659597127343,
        8,
        0.4007978295053657,
    ),
    (
        113769230210,
        163123608889,
        41524670928,
        362573076712,
        6,
        0.46012666828525334,
    ),
    (
        74973831018,
        748671844813,
        102391881982,
        771785416847,
        8,
        0.8961446686789155,
    ),
    (
        311151657840,
        596762861271,
        106157108050,
        144586432794,
        1,
        0.4370956184475557,
    ),
    (
        39376467942,
        48735016510,
        541668801912,
        1017652336693,
        6,
        0.4061904315904903,
    ),
    (
        136315232742,
        476994577153,
        431205687120,
        634659728065,
        3,
        0.5932737658707076,
    ),
    (
        75374270481,
        178226139197,
        154117960025,
        984262048538,
        7,
        0.694540684325395,
    ),
    (
        90842513597,
        948411585242,
        163965606640,
        837021234693,
        4,
        0.8861210284668888,
    ),
];
const AVAIL_CASES: [(u64, u64, u64, u64); 24] = [
    (0, 0, 1, 0),
    (100, 0, 1, 100),
    (0, 100, 1, 100),
    (100, 100, 4, 125),
    (100, 3, 4, 100),
    (7, 15, 4, 10),
    (1, 1, 2, 1),
    (0, 4095, 4096, 0),
    (12, 1048576, 8, 131084),
    (5, 9, 3, 8),
    (1002170858, 24005102687, 5, 5803191395),
    (1210883260, 56460250190, 6, 10620924958),
    (3177351297, 53941661384, 7, 10883302923),
    (14598502916, 64869197868, 7, 23865531182),
    (4562319656, 61026173194, 3, 24904377387),
    (9062073081, 6875071241, 2, 12499608701),
    (109525498, 29525032759, 7, 4327387320),
    (14448971944, 13412505259, 8, 16125535101),
    (14886311383, 40732759691, 2, 35252691228),
    (618979930, 46169497941, 5, 9852879518),
    (7267328502, 2217639874, 4, 7821738470),
    (10858782840, 40922918437, 2, 31320242058),
    (9307374662, 33380219158, 6, 14870744521),
    (7028464573, 33515030269, 4, 15407222140),
];
const PRESSURE_CASES: [(f64, PressureLevel); 22] = [
    (0.0, PressureLevel::None),
    (0.1, PressureLevel::None),
    (0.3, PressureLevel::None),
    (0.5, PressureLevel::None),
    (0.59, PressureLevel::None),
    (0.5999999999, PressureLevel::None),
    (0.6, PressureLevel::Moderate),
    (0.6000000001, PressureLevel::Moderate),
    (0.7, PressureLevel::Moderate),
    (0.75, PressureLevel::Moderate),
    (0.8, PressureLevel::Moderate),
    (0.9, PressureLevel::Moderate),
    (0.94, PressureLevel::Moderate),
    (0.9499999999, PressureLevel::Moderate),
    (0.95, PressureLevel::Critical),
    (0.9500000001, PressureLevel::Critical),
    (0.97, PressureLevel::Critical),
    (0.99, PressureLevel::Critical),
    (1.0, PressureLevel::Critical),
    (0.25, PressureLevel::None),
    (0.65, PressureLevel::Moderate),
    (0.96, PressureLevel::Critical),
];
const ENERGY_CASES: [(f64, MemTarget, IoOp, u64, f64); 20] = [
    (0.0, MemTarget::Dram, IoOp::Read, 8, 35.2),
    (0.0, MemTarget::Dram, IoOp::Write, 0, 0.0),
    (0.0, MemTarget::Nvm, IoOp::Read, 32768, 80936.96),
    (
        0.0,
        MemTarget::Nvm,
        IoOp::Write,
        426314907731,
        8411193129532.63,
    ),
    (0.5, MemTarget::Dram, IoOp::Read, 32768, 144179.2),
    (0.5, MemTarget::Dram, IoOp::Write, 0, 0.0),
    (0.5, MemTarget::Nvm, IoOp::Read, 1, 2.47),
    (0.5, MemTarget::Nvm, IoOp::Write, 8, 135.04),
    (
        1.0,
        MemTarget::Dram,
        IoOp::Read,
        1061734699028,
        4671632675723.2,
    ),
    (1.0, MemTarget::Dram, IoOp::Write, 8, 44.0),
    (1.0, MemTarget::Nvm, IoOp::Read, 32768, 80936.96),
    (1.0, MemTarget::Nvm, IoOp::Write, 32768, 459735.04),
    (0.25, MemTarget::Dram, IoOp::Read, 32768, 144179.2),
    (0.25, MemTarget::Dram, IoOp::Write, 32768, 180224.0),
    (0.25, MemTarget::Nvm, IoOp::Read, 0, 0.0),
    (0.25, MemTarget::Nvm, IoOp::Write, 1, 18.305),
    (0.8, MemTarget::Dram, IoOp::Read, 0, 0.0),
    (0.8, MemTarget::Dram, IoOp::Write, 1, 5.5),
    (0.8, MemTarget::Nvm, IoOp::Read, 1, 2.47),
    (0.8, MemTarget::Nvm, IoOp::Write, 0, 0.0),
];
const LIFETIME_CASES: [(f64, f64, f64, f64, f64); 22] = [
    (17179869184.0, 1000000.0, 100000000.0, 1.0, 171798691.84),
    (17179869184.0, 1000000.0, 100000000.0, 0.53, 91053306.6752),
    (1.0, 1.0, 1.0, 1.0, 1.0),
    (2.0, 3.0, 4.0, 0.5, 0.75),
    (17179869184.0, 100000.0, 25000000.0, 0.53, 36421322.67008),
    (47143150428.0, 1000.0, 299038661.0, 0.53, 83553.97808191765),
    (61145514163.0, 30000.0, 453209983.0, 1.0, 4047495.628290253),
    (
        15040265994.0,
        100000.0,
        516554407.0,
        0.53,
        1543175.485253386,
    ),
    (
        36547443505.0,
        1000000.0,
        281478590.0,
        1.0,
        129840935.69958554,
    ),
    (
        52226875581.0,
        100000.0,
        983893223.0,
        0.53,
        2813338.217081103,
    ),
    (
        64755821825.0,
        10000000.0,
        280811967.0,
        1.0,
        2306020733.9739194,
    ),
    (37681923865.0, 1000.0, 945161047.0, 1.0, 39868.25735635718),
    (3687464119.0, 30000.0, 370111760.0, 1.0, 298893.2952846459),
    (41762084150.0, 1000.0, 132618470.0, 0.53, 166899.1099015092),
    (
        38364071088.0,
        10000000.0,
        1036132969.0,
        1.0,
        370262043.924982,
    ),
    (39226914762.0, 1000.0, 533637501.0, 1.0, 73508.54220044779),
    (2263091600.0, 1000.0, 971040407.0, 1.0, 2330.5843749507326),
    (64467429639.0, 1000.0, 951868678.0, 0.53, 35895.43231999278),
    (
        68129038488.0,
        10000000.0,
        428215122.0,
        0.53,
        843230155.6748854,
    ),
    (
        37376290563.0,
        10000000.0,
        1026575170.0,
        1.0,
        364087225.7118785,
    ),
    (
        38436598139.0,
        100000.0,
        435055552.0,
        0.53,
        4682481.793421636,
    ),
    (27432533524.0, 1000.0, 842596083.0, 0.53, 17255.29356361843),
];
const ADAPTIVE_CASES: [(&[u64], u64); 24] = [
    (&[], 0),
    (&[8], 4),
    (&[10, 20, 30], 10),
    (&[1], 0),
    (&[2], 1),
    (&[3, 4], 1),
    (&[0, 0], 0),
    (&[7, 7, 7], 3),
    (&[100, 1], 25),
    (&[22, 23], 11),
    (&[594, 1971, 3508, 599, 1742, 2480], 907),
    (&[1265, 2999], 1066),
    (&[2073, 1124, 3831], 1171),
    (&[771, 3262, 3991, 1333], 1169),
    (
        &[
            1832, 1322, 3535, 4223, 3308, 2778, 3451, 1603, 2921, 2609, 755,
        ],
        1288,
    ),
    (
        &[
            2997, 159, 2768, 4538, 3757, 3608, 148, 3148, 2715, 4238, 2420, 4196,
        ],
        1445,
    ),
    (&[924, 1872], 699),
    (&[688, 2175], 715),
    (&[324, 1487, 2215, 1061, 3459], 854),
    (
        &[
            2118, 3325, 1223, 4395, 4217, 4674, 4051, 2679, 732, 2286, 471,
        ],
        1371,
    ),
    (
        &[
            1501, 3484, 593, 2203, 137, 725, 2134, 686, 4982, 1821, 545, 2166,
        ],
        874,
    ),
    (&[3717, 94], 952),
    (&[4530, 3422, 2194, 1058, 353, 4316], 1322),
    (
        &[
            1953, 896, 1322, 2145, 412, 1483, 1652, 2555, 2498, 4350, 1686, 2375,
        ],
        971,
    ),
];

fn c1_formulas(_: &mut Ctx) -> Verdict {
    let mut fails = Vec::new();
    for &(mf, mt, sf, st, w, want) in &FILL_CASES {
        let got = compute_fill(mf, mt, sf, st, w).map_err(|e| e.to_string())?;
        if (got - want).abs() > FORMULA_TOL {
            fails.push(format!(
                "compute_fill({mf},{mt},{sf},{st},{w}) = {got}, want {want}"
            ));
        }
    }
    if compute_fill(0, 0, 0, 0, 1).is_ok() || compute_fill(0, 1, 0, 1, 0).is_ok() {
        fails.push("compute_fill accepted a zero total or zero weight".into());
    }
    for &(ram, swap, w, want) in &AVAIL_CASES {
        let got = available_mem(ram, swap, w);
        if got != want {
            fails.push(format!(
                "available_mem({ram},{swap},{w}) = {got}, want {want}"
            ));
        }
    }
    for &(fill, want) in &PRESSURE_CASES {
        let got = classify_pressure(fill);
        if got != want {
            fails.push(format!(
                "classify_pressure({fill}) = {got:?}, want {want:?}"
            ));
        }
    }
    for &(set, target, op, bits, want) in &ENERGY_CASES {
        let mut m = EnergyMeter::new(set);
        let got = m.account_energy(target, op, bits);
        let total = m.breakdown().total_pj();
        if !rel_close(got, want, FORMULA_TOL) || !rel_close(total, want, FORMULA_TOL) {
            fails.push(format!(
                "account_energy({set},{target:?},{op:?},{bits}) = {got}, want {want}"
            ));
        }
    }
    for &(cap, endurance, rate, eff, want) in &LIFETIME_CASES {
        match estimate_lifetime(cap, endurance, rate, eff) {
            Lifetime::Seconds(got) if rel_close(got, want, FORMULA_TOL) => {}
            other => fails.push(format!(
                "estimate_lifetime({cap},{endurance},{rate},{eff}) = {other:?}, want {want}"
            )),
        }
    }
    if estimate_lifetime(1e9, 1e6, 0.0, 1.0) != Lifetime::Unbounded {
        fails.push("zero write rate should give an unbounded lifetime".into());
    }
    for &(samples, want) in &ADAPTIVE_CASES {
        let mut est = CompletionEstimator::default();
        for &s in samples {
            est.record(IoOp::Read, SimTime(s));
            // Writes keep their own state and must not leak into reads.
            est.record(IoOp::Write, SimTime(s * 3 + 17));
        }
        let got = est.adaptive_sleep_estimate(IoOp::Read).as_us();
        if got != want {
            fails.push(format!(
                "adaptive_sleep_estimate({samples:?}) = {got}, want {want}"
            ));
        }
    }
    let counts = [
        FILL_CASES.len(),
        AVAIL_CASES.len(),
        PRESSURE_CASES.len(),
        ENERGY_CASES.len(),
        LIFETIME_CASES.len(),
        ADAPTIVE_CASES.len(),
    ];
    if counts.iter().any(|&n| n < MIN_FORMULA_CASES) {
        fails.push(format!("too few cases: {counts:?}"));
    }
    collect(fails, format!("cases per formula {counts:?}"))
}

fn c2_capacity(ctx: &mut Ctx) -> Verdict {
    let mut fails = Vec::new();
    let mut ratios = Vec::new();
    for seed in SEEDS {
        let base = ctx
            .preset(Preset::Baseline, seed)
            .report
            .tabs_before_first_discard;
        let opt = ctx
            .preset(Preset::Optane, seed)
            .report
            .tabs_before_first_discard;
        let (Some(b), Some(o)) = (base, opt) else {
            fails.push(format!(
                "seed {seed}: no discard (baseline {base:?}, optane {opt:?})"
            ));
            continue;
        };
        let r = o as f64 / b as f64;
        ratios.push(format!("{r:.3}"));
        if !(TAB_RATIO.0..=TAB_RATIO.1).contains(&r) {
            fails.push(format!(
                "seed {seed}: optane/baseline tabs {o}/{b} = {r:.3}"
            ));
        }
    }
    collect(
        fails,
        format!("optane/baseline tab ratios [{}]", ratios.join(", ")),
    )
}

fn c3_zswap_traffic(ctx: &mut Ctx) -> Verdict {
    let mut fails = Vec::new();
    let mut notes = Vec::new();
    for seed in SEEDS {
        let o = ctx.preset(Preset::Optane, seed).report.clone();
        let z = &ctx.preset(Preset::OptaneZswap, seed).report;
        let cut = |a: u64, b: u64| {
            if b == 0 {
                f64::INFINITY
            } else {
                a as f64 / b as f64
            }
        };
        let cut_in = cut(o.swap_in_bytes, z.swap_in_bytes);
        let cut_out = cut(o.swap_out_bytes, z.swap_out_bytes);
        let (ot, zt) = (
            o.tabs_before_first_discard.unwrap_or(0) as f64,
            z.tabs_before_first_discard.unwrap_or(0) as f64,
        );
        let drop = 1.0 - zt / ot;
        notes.push(format!(
            "s{seed} in {cut_in:.2}x out {cut_out:.2}x tabs -{:.1}%",
            drop * 100.0
        ));
        if cut_in < ZSWAP_TRAFFIC_CUT {
            fails.push(format!("seed {seed}: swap-in cut {cut_in:.2}x"));
        }
        if cut_out < ZSWAP_TRAFFIC_CUT {
            fails.push(format!("seed {seed}: swap-out cut {cut_out:.2}x"));
        }
        if !(ZSWAP_TAB_DROP.0..=ZSWAP_TAB_DROP.1).contains(&drop) {
            fails.push(format!(
                "seed {seed}: tab reduction {:.1}% ({zt} vs {ot})",
                drop * 100.0
            ));
        }
    }
    collect(fails, notes.join(", "))
}

fn c4_hit_rate(ctx: &mut Ctx) -> Verdict {
    let mut fails = Vec::new();
    let mut rates = Vec::new();
    for seed in SEEDS {
        match ctx.preset(Preset::OptaneZswap, seed).report.zswap_hit_rate {
            Some(h) => {
                rates.push(format!("{h:.3}"));
                if h < ZSWAP_HIT_RATE {
                    fails.push(format!("seed {seed}: hit rate {h:.3}"));
                }
            }
            None => fails.push(format!("seed {seed}: no zswap lookups")),
        }
    }
    collect(fails, format!("hit rates [{}]", rates.join(", ")))
}

fn c5_energy(ctx: &mut Ctx) -> Verdict {
    let mut fails = Vec::new();
    let mut notes = Vec::new();
    for seed in SEEDS {
        let b = ctx.preset(Preset::Baseline, seed).report.energy_total_pj;
        let o = ctx.preset(Preset::Optane, seed).report.energy_total_pj;
        let z = ctx.preset(Preset::OptaneZswap, seed).report.energy_total_pj;
        let (ob, zo) = (o / b, z / o);
        notes.push(format!("s{seed} optane/base {ob:.1}x zswap/optane {zo:.2}"));
        if ob < OPTANE_ENERGY_FACTOR {
            fails.push(format!("seed {seed}: optane/baseline energy {ob:.2}"));
        }
        if zo > ZSWAP_ENERGY_FACTOR {
            fails.push(format!("seed {seed}: zswap/optane energy {zo:.3}"));
        }
    }
    collect(fails, notes.join(", "))
}

fn heavy_p99(run: &Run) -> Option<u64> {
    let mut lat: Vec<u64> = run
        .switches
        .iter()
        .filter(|s| HEAVY_TABS.contains(&s.tab_count))
        .map(|s| s.latency_us)
        .collect();
    lat.sort_unstable();
    percentile(&lat, 99.0)
}

fn c6_scheduler_tail(ctx: &mut Ctx) -> Verdict {
    let mut fails = Vec::new();
    let mut notes = Vec::new();
    let irq = CompletionConfig::default();
    for seed in SEEDS {
        let p = |ctx: &mut Ctx, k| heavy_p99(ctx.read_heavy(k, irq.clone(), seed));
        let (Some(none), Some(kyber), Some(bfq)) = (
            p(ctx, SchedulerKind::None),
            p(ctx, SchedulerKind::Kyber),
            p(ctx, SchedulerKind::Bfq),
        ) else {
            fails.push(format!("seed {seed}: no switches at 41-50 tabs"));
            continue;
        };
        notes.push(format!("s{seed} p99 none {none} kyber {kyber} bfq {bfq}"));
        if kyber as f64 > (1.0 - KYBER_MARGIN) * bfq as f64 {
            fails.push(format!(
                "seed {seed}: kyber p99 {kyber} not 10% under bfq {bfq}"
            ));
        }
        if none >= bfq {
            fails.push(format!("seed {seed}: none p99 {none} >= bfq {bfq}"));
        }
    }
    let stream = open_loop_stream(20_000);
    let q2d = |kind| {
        let b = drive(&SchedulerConfig::of(kind), 8, &stream, |_, _, _| Ok(())).expect("drive");
        b.completed.iter().map(|r| r.q2d()).sum::<u64>() as f64 / b.completed.len() as f64
    };
    let (none, bfq) = (q2d(SchedulerKind::None), q2d(SchedulerKind::Bfq));
    notes.push(format!(
        "identical stream mean Q2D none {none:.1}us bfq {bfq:.1}us"
    ));
    if bfq <= none {
        fails.push(format!("bfq mean Q2D {bfq:.2} <= none {none:.2}"));
    }
    collect(fails, notes.join(", "))
}

/// Fixed open-loop stream: random reads from one issuer, sequential writes
/// from another, exponential-ish gaps.
fn open_loop_stream(n: usize) -> Vec<Req> {
    let mut rng = rng_for(6, Stream::Test);
    let mut wsec = 1 << 24;
    (0..n)
        .map(|_| {
            let read = rng.random_bool(0.7);
            let sector = if read {
                rng.random_range(0..1u64 << 20) * 8
            } else {
                wsec += 8;
                wsec
            };
            Req {
                gap: (-(1.0 - rng.random::<f64>()).ln() * 6.0) as u64,
                op: if read { IoOp::Read } else { IoOp::Write },
                sector,
                pid: if read { 1 } else { 2 },
                service: rng.random_range(10..40),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Req {
    gap: u64,
    op: IoOp,
    sector: u64,
    pid: u32,
    service: u64,
}

#[derive(Clone, Copy, Debug)]
struct Pending {
    op: IoOp,
    sector: u64,
    t_queued: SimTime,
    pid: u32,
}

type Check<'a> = dyn FnMut(&BTreeMap<u64, Pending>, u64, SimTime) -> Result<(), String> + 'a;

/// Feeds `reqs` through a block layer with `tags` device slots. `check` sees
/// the still-queued requests just before each dispatch.
fn drive(
    sched: &SchedulerConfig,
    tags: u32,
    reqs: &[Req],
    mut check: impl FnMut(&BTreeMap<u64, Pending>, u64, SimTime) -> Result<(), String>,
) -> Result<BlockLayer, String> {
    let check: &mut Check = &mut check;
    let blk = BlkConfig {
        cpus: 4,
        hw_tags: tags,
        ..BlkConfig::default()
    };
    let mut b = BlockLayer::new(&blk, sched).map_err(|e| e.to_string())?;
    let mut arrivals = Vec::with_capacity(reqs.len());
    let mut t = 0;
    for r in reqs {
        t += r.gap;
        arrivals.push(SimTime(t));
    }
    let mut done: BinaryHeap<Reverse<(SimTime, u64)>> = BinaryHeap::new();
    let mut pending = BTreeMap::new();
    let mut next = 0;
    loop {
        let mut now = SimTime::MAX;
        if let Some(&a) = arrivals.get(next) {
            now = now.min(a);
        }
        if let Some(&Reverse((c, _))) = done.peek() {
            now = now.min(c);
        }
        if b.queued() > 0 && b.in_flight() < tags {
            now = now.min(b.busy_until());
        }
        if now == SimTime::MAX {
            break;
        }
        while let Some(&Reverse((c, id))) = done.peek() {
            if c > now {
                break;
            }
            done.pop();
            b.complete(now, id).map_err(|e| e.to_string())?;
        }
        while next < reqs.len() && arrivals[next] <= now {
            let r = &reqs[next];
            let (id, sub) = b.submit(now, r.op, r.sector, 4096, r.pid, r.pid);
            if sub == Submitted::Queued {
                pending.insert(
                    id,
                    Pending {
                        op: r.op,
                        sector: r.sector,
                        t_queued: now,
                        pid: r.pid,
                    },
                );
            }
            next += 1;
        }
        for (id, at) in b.dispatch(now) {
            check(&pending, id, now)?;
            pending.remove(&id);
            done.push(Reverse((at + SimTime(reqs[id as usize].service), id)));
        }
    }
    if !pending.is_empty() || b.outstanding() != 0 {
        return Err(format!("{} requests never completed", b.outstanding()));
    }
    Ok(b)
}

fn stream_strategy() -> impl Strategy<Value = (u32, Vec<Req>)> {
    (
        1u32..=4,
        prop::collection::vec(
            (0u64..4_000, any::<bool>(), 0u64..64, 0u32..3, 1u64..12_000),
            1..48,
        ),
    )
        .prop_map(|(tags, v)| {
            let reqs = v
                .into_iter()
                .map(|(gap, read, slot, pid, service)| Req {
                    gap,
                    op: if read { IoOp::Read } else { IoOp::Write },
                    sector: slot * 8,
                    pid,
                    service,
                })
                .collect();
            (tags, reqs)
        })
}

fn runner() -> TestRunner {
    let cfg = PtConfig {
        cases: STREAMS,
        failure_persistence: None,
        ..PtConfig::default()
    };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn prop_check(
    name: &str,
    sched: SchedulerConfig,
    strategy: impl Strategy<Value = (u32, Vec<Req>)>,
    rule: impl Fn(&SchedulerConfig, &BTreeMap<u64, Pending>, u64, SimTime) -> Result<(), String>,
) -> Result<(), String> {
    runner()
        .run(&strategy, |(tags, reqs)| {
            drive(&sched, tags, &reqs, |p, id, now| rule(&sched, p, id, now))
                .map(|_| ())
                .map_err(TestCaseError::fail)
        })
        .map_err(|e| format!("{name}: {e}"))
}

fn fifo_rule(
    _: &SchedulerConfig,
    p: &BTreeMap<u64, Pending>,
    id: u64,
    _: SimTime,
) -> Result<(), String> {
    match p.keys().next() {
        Some(&first) if first == id => Ok(()),
        first => Err(format!("dispatched {id} ahead of {first:?}")),
    }
}

fn kyber_rule(
    s: &SchedulerConfig,
    p: &BTreeMap<u64, Pending>,
    id: u64,
    now: SimTime,
) -> Result<(), String> {
    let r = &p[&id];
    let reads_waiting = p.values().any(|q| q.op == IoOp::Read);
    let age = now.as_us() - r.t_queued.as_us();
    if r.op == IoOp::Write && reads_waiting && age < s.kyber_write_target_us {
        return Err(format!("write {id} aged {age}us passed waiting reads"));
    }
    Ok(())
}

fn deadline_rule(
    s: &SchedulerConfig,
    p: &BTreeMap<u64, Pending>,
    id: u64,
    now: SimTime,
) -> Result<(), String> {
    let deadline = |op| match op {
        IoOp::Read => s.read_deadline_us,
        IoOp::Write => s.write_deadline_us,
    };
    let overdue = |q: &Pending| {
        let age = now.as_us() - q.t_queued.as_us();
        (age > deadline(q.op)).then(|| age - deadline(q.op))
    };
    let most_overdue = p
        .iter()
        .filter_map(|(&i, q)| overdue(q).map(|o| (Reverse(o), i)))
        .min()
        .map(|(_, i)| i);
    let want = match most_overdue {
        Some(i) => i,
        None => {
            p.iter()
                .map(|(&i, q)| (q.sector, i))
                .min()
                .expect("non-empty")
                .1
        }
    };
    if want != id {
        return Err(format!("dispatched {id}, expected {want}"));
    }
    Ok(())
}

/// Two equal-weight issuers with everything queued at time zero; tracks the
/// running difference of sectors served while both stay backlogged.
fn bfq_fairness(sched: &SchedulerConfig) -> Result<(), String> {
    let strategy = (
        1usize..60,
        1usize..60,
        prop::collection::vec(any::<bool>(), 120),
        0u64..1_000,
    )
        .prop_map(|(na, nb, order, salt)| {
            let (mut a, mut b) = (0, 0);
            let mut reqs = Vec::new();
            for first in order {
                let pid = if (first && a < na) || b >= nb { 0 } else { 1 };
                if pid == 0 && a >= na {
                    break;
                }
                let k = if pid == 0 { &mut a } else { &mut b };
                *k += 1;
                // 16-sector stride keeps 8-sector requests from ever merging.
                let sector = (pid as u64 * 1_000_000 + (*k as u64 * 7 + salt) % 4_096) * 16;
                reqs.push(Req {
                    gap: 0,
                    op: IoOp::Read,
                    sector,
                    pid,
                    service: 10,
                });
            }
            reqs
        });
    let bound = sched.bfq_max_budget as i64;
    runner()
        .run(&strategy, |reqs| {
            let (mut diff, mut lo, mut hi) = (0i64, 0i64, 0i64);
            let mut fair = Ok(());
            drive(sched, 1, &reqs, |p, id, _| {
                let both = p.values().any(|q| q.pid == 0) && p.values().any(|q| q.pid == 1);
                if both && fair.is_ok() {
                    diff += if p[&id].pid == 0 { 8 } else { -8 };
                    lo = lo.min(diff);
                    hi = hi.max(diff);
                    if hi - lo > bound {
                        fair = Err(format!("service gap {} sectors over a window", hi - lo));
                    }
                }
                Ok(())
            })
            .map_err(TestCaseError::fail)?;
            fair.map_err(TestCaseError::fail)
        })
        .map_err(|e| format!("bfq fairness: {e}"))
}

fn c7_conformance(_: &mut Ctx) -> Verdict {
    let mut fails = Vec::new();
    let mut run = |r: Result<(), String>| {
        if let Err(e) = r {
            fails.push(e);
        }
    };
    run(prop_check(
        "none",
        SchedulerConfig::of(SchedulerKind::None),
        stream_strategy(),
        fifo_rule,
    ));
    run(prop_check(
        "kyber",
        SchedulerConfig::of(SchedulerKind::Kyber),
        stream_strategy(),
        kyber_rule,
    ));
    let deadline = SchedulerConfig {
        read_deadline_us: 3_000,
        write_deadline_us: 9_000,
        ..SchedulerConfig::of(SchedulerKind::MqDeadline)
    };
    run(prop_check(
        "mq-deadline",
        deadline,
        stream_strategy(),
        deadline_rule,
    ));
    let bfq = SchedulerConfig {
        bfq_base_budget: 64,
        bfq_min_budget: 16,
        bfq_max_budget: 128,
        ..SchedulerConfig::of(SchedulerKind::Bfq)
    };
    run(bfq_fairness(&bfq));
    collect(
        fails,
        format!("{STREAMS} streams each for none, kyber, mq-deadline, bfq"),
    )
}

fn c8_completion(ctx: &mut Ctx) -> Verdict {
    let mut fails = Vec::new();
    let mut rng = rng_for(8, Stream::Test);
    for _ in 0..COMPLETION_TRIPLES {
        let d = SimTime(rng.random_range(0..5_000));
        let t = SimTime(rng.random_range(0..5_000));
        let ctx_us = SimTime(rng.random_range(0..50));
        let (p, h, i) = (
            polling_latency(d),
            hybrid_latency(d, t, ctx_us),
            irq_latency(d, ctx_us),
        );
        if !(p <= h && h <= i) {
            fails.push(format!(
                "d={d} t={t} ctx={ctx_us}: polling {p} hybrid {h} irq {i}"
            ));
            break;
        }
        if hybrid_latency(d, SimTime::MAX, ctx_us) != i {
            fails.push(format!(
                "hybrid with unbounded sleep differs from irq at d={d}"
            ));
            break;
        }
    }
    let mut notes = vec![format!("{COMPLETION_TRIPLES} request triples ordered")];
    let kind = SchedulerConfig::default().kind;
    for seed in SEEDS {
        let irq = ctx
            .read_heavy(kind, CompletionConfig::default(), seed)
            .report
            .switch_latency;
        let hyb = ctx
            .read_heavy(kind, CompletionConfig::of(CompletionMode::Hybrid, 0), seed)
            .report
            .switch_latency;
        let (Some(irq), Some(hyb)) = (irq, hyb) else {
            fails.push(format!("seed {seed}: no switches"));
            continue;
        };
        notes.push(format!(
            "s{seed} p99 irq {} hybrid(0) {}",
            irq.p99_us, hyb.p99_us
        ));
        if hyb.p99_us > irq.p99_us {
            fails.push(format!(
                "seed {seed}: hybrid(0) p99 {} > irq {}",
                hyb.p99_us, irq.p99_us
            ));
        }
    }
    collect(fails, notes.join(", "))
}

fn c9_structural(ctx: &mut Ctx) -> Verdict {
    let mut fails = Vec::new();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ScenarioConfig::preset(Preset::OptaneZswap);
    cfg.seed = 1;
    cfg.scale_divisor = SCALE;
    let run = run_to_dir(&cfg, dir.path()).map_err(|e| format!("{e:#}"))?;
    let bad = run
        .obs
        .ios
        .iter()
        .filter(|r| r.q2c() != r.q2d() + r.d2c())
        .count();
    if bad > 0 {
        fails.push(format!("{bad} requests break Q2C = Q2D + D2C"));
    }
    match replay_check(&dir.path().join(TRACE_FILE), None) {
        Ok(r) if r == run.report => {}
        Ok(_) => fails.push("replayed report differs from the run".into()),
        Err(e) => fails.push(format!("replay: {e:#}")),
    }
    // The engine audits the full page table on every event here; any
    // conservation or overcommit breach aborts the run.
    let mut audited = ScenarioConfig::preset(Preset::OptaneZswap);
    audited.seed = 1;
    audited.scale_divisor = 256;
    audited.workload.heavy_switches = 300;
    audited.engine.audit_interval = 1;
    if let Err(e) = simulate(&audited) {
        fails.push(format!("audited run: {e}"));
    }
    let mut checked = 0;
    for ((label, seed), r) in &ctx.runs {
        let rep = &r.report;
        if rep.time.total() != 2 * rep.elapsed_us {
            fails.push(format!(
                "{label} seed {seed}: time buckets {} != 2 x {}",
                rep.time.total(),
                rep.elapsed_us
            ));
        }
        checked += 1;
    }
    let t = run.report.time;
    if t.total() != 2 * run.report.elapsed_us {
        fails.push("time buckets of the traced run do not cover both cores".into());
    }
    collect(
        fails,
        format!(
            "{} requests, replay bit-exact, time buckets conserved over {} runs",
            run.obs.ios.len(),
            checked + 1
        ),
    )
}

fn c10_determinism(_: &mut Ctx) -> Verdict {
    let mut cfg = ScenarioConfig::preset(Preset::OptaneZswap);
    cfg.seed = 2;
    cfg.scale_divisor = SCALE;
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_to_dir(&cfg, a.path()).map_err(|e| format!("{e:#}"))?;
    run_to_dir(&cfg, b.path()).map_err(|e| format!("{e:#}"))?;
    let mut fails = Vec::new();
    let mut bytes = 0;
    for f in [
        TRACE_FILE,
        "switches.csv",
        "blkio.csv",
        "summary.csv",
        "summary.json",
    ] {
        let x = std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
        bytes += x.len();
        if x != y {
            fails.push(format!("{f} differs"));
        }
    }
    collect(fails, format!("{bytes} bytes identical across two runs"))
}

fn c11_lifetime(ctx: &mut Ctx) -> Verdict {
    let mut fails = Vec::new();
    let secs = |l: Lifetime| match l {
        Lifetime::Seconds(s) => s,
        Lifetime::Unbounded => f64::INFINITY,
    };
    let mut rng = rng_for(11, Stream::Test);
    for _ in 0..1_000 {
        let cap = rng.random_range(1.0..1e12);
        let end = rng.random_range(1.0..1e7);
        let rate = rng.random_range(1.0..1e9);
        let l = secs(estimate_lifetime(cap, end, rate, 1.0));
        for k in [2.0, 4.0, 8.0] {
            if secs(estimate_lifetime(cap * k, end, rate, 1.0)) != l * k
                || secs(estimate_lifetime(cap, end * k, rate, 1.0)) != l * k
                || secs(estimate_lifetime(cap, end, rate * k, 1.0)) != l / k
            {
                fails.push(format!(
                    "proportionality broken at cap={cap} end={end} rate={rate} k={k}"
                ));
            }
        }
        let r = secs(estimate_lifetime(cap, end, rate, REALISTIC_FACTOR));
        if !rel_close(r, l * REALISTIC_FACTOR, 1e-12) {
            fails.push(format!(
                "realistic factor not exact: {r} vs {}",
                l * REALISTIC_FACTOR
            ));
        }
        if !fails.is_empty() {
            break;
        }
    }
    let mut notes = Vec::new();
    for seed in SEEDS {
        let o = ctx.preset(Preset::Optane, seed).report.lifetime;
        let z = ctx.preset(Preset::OptaneZswap, seed).report.lifetime;
        let life = secs(z.realistic) / secs(o.realistic);
        let writes = o.write_rate_bytes_per_s / z.write_rate_bytes_per_s;
        notes.push(format!(
            "s{seed} lifetime x{life:.3} write-rate x{writes:.3}"
        ));
        if !rel_close(life, writes, LIFETIME_TOL) {
            fails.push(format!(
                "seed {seed}: lifetime ratio {life:.4} vs write ratio {writes:.4}"
            ));
        }
        if !rel_close(
            secs(o.realistic),
            REALISTIC_FACTOR * secs(o.optimistic),
            1e-12,
        ) {
            fails.push(format!(
                "seed {seed}: realistic lifetime is not 0.53 x optimistic"
            ));
        }
    }
    collect(fails, notes.join(", "))
}

fn runtime(ctx: &mut Ctx) -> Verdict {
    let slowest = ctx
        .runs
        .iter()
        .max_by_key(|(_, r)| r.wall)
        .map(|((l, s), r)| (format!("{l} seed {s}"), r.wall));
    match slowest {
        Some((name, wall)) if wall > MAX_SCENARIO => {
            Err(format!("{name} took {:.1}s", wall.as_secs_f64()))
        }
        Some((name, wall)) => Ok(format!(
            "{} runs, slowest {name} {:.1}s",
            ctx.runs.len(),
            wall.as_secs_f64()
        )),
        None => Err("no scenarios ran".into()),
    }
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("1", "formula exactness", c1_formulas),
        ("2", "capacity trend", c2_capacity),
        ("3", "zswap traffic and tabs", c3_zswap_traffic),
        ("4", "zswap hit rate", c4_hit_rate),
        ("5", "energy direction", c5_energy),
        ("6", "scheduler tail ordering", c6_scheduler_tail),
        ("7", "scheduler conformance", c7_conformance),
        ("8", "completion ordering", c8_completion),
        ("9", "structural invariants", c9_structural),
        ("10", "determinism", c10_determinism),
        ("11", "lifetime model", c11_lifetime),
        ("-", "scenario runtime < 60s", runtime),
    ];
    let mut ctx = Ctx::default();
    let mut failed = 0;
    for (id, name, f) in criteria {
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(|| f(&mut ctx)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS [{id}] {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id}] {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "non-string panic".into())
}
