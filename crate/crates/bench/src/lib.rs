//! Stress harness for the llxscx structures.
//!
//! A trial prefills the structure to its steady-state size, runs a timed
//! (or op-bounded) uniform workload on `threads` workers, then checks the
//! checksum law and runs the structure's validator at quiescence.
//!
//! The checksum law: every worker sums the keys it successfully inserted
//! minus the keys it successfully deleted. At the end the sum of keys in
//! the structure must equal the total. For k-CAS every successful
//! operation adds one increment to each of `k` words, so the array sum must
//! be `k` increments per success.

pub mod dict;

use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicUsize, Ordering::Relaxed};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use llxscx::abtree::AbTree;
use llxscx::chromatic::Chromatic;
use llxscx::kcas::{KcasArray, KcasEntry, MAX_K};
use llxscx::multiset::Multiset;
use llxscx::ravl::Ravl;
use llxscx::{stw, TreeStats};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use dict::Dict;

/// Value added to a word by one successful k-CAS. The two low bits of every
/// word are reserved for descriptor flags.
pub const KCAS_STEP: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Ds {
    Multiset,
    Chromatic,
    ChromaticK,
    Ravl,
    RavlK,
    Abtree,
    Kcas,
}

impl Ds {
    pub fn name(self) -> &'static str {
        match self {
            Ds::Multiset => "multiset",
            Ds::Chromatic => "chromatic",
            Ds::ChromaticK => "chromatic-k",
            Ds::Ravl => "ravl",
            Ds::RavlK => "ravl-k",
            Ds::Abtree => "abtree",
            Ds::Kcas => "kcas",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Debug)]
pub struct Config {
    pub ds: Ds,
    pub threads: usize,
    pub keyrange: u64,
    /// Percent of operations that insert.
    pub insert: u32,
    pub delete: u32,
    pub successor: u32,
    pub seconds: f64,
    /// Per-thread operation budget. Replaces the time limit when set, which
    /// makes single-thread trials deterministic.
    pub ops: Option<u64>,
    pub seed: u64,
    pub k_threshold: usize,
    pub a: usize,
    pub b: usize,
    pub kcas_k: usize,
    pub array_size: usize,
    pub validate: bool,
    /// Skip prefilling when false; the trial starts from an empty structure.
    pub prefill: bool,
    pub prefill_timeout: f64,
    /// Stop the world repeatedly during the trial and compare the violation
    /// count against the number of updates in flight.
    pub sample: bool,
    /// With sampling on, keep the trial running past `seconds` until this
    /// many samples were taken.
    pub min_samples: usize,
    /// Record the operation stream (single-thread trials only).
    pub log_ops: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            ds: Ds::Chromatic,
            threads: 4,
            keyrange: 10_000,
            insert: 50,
            delete: 50,
            successor: 0,
            seconds: 1.0,
            ops: None,
            seed: 1,
            k_threshold: 4,
            a: llxscx::abtree::DEFAULT_A,
            b: llxscx::abtree::DEFAULT_B,
            kcas_k: 16,
            array_size: 1 << 20,
            validate: true,
            prefill: true,
            prefill_timeout: 30.0,
            sample: false,
            min_samples: 0,
            log_ops: false,
        }
    }
}

impl Config {
    pub fn check(&self) -> Result<(), String> {
        if self.threads == 0 {
            return Err("--threads must be positive".into());
        }
        if self.insert + self.delete + self.successor > 100 {
            return Err("--insert, --delete and --successor add up to more than 100".into());
        }
        if self.keyrange >= u64::MAX - 1 {
            return Err("--keyrange too large".into());
        }
        if self.k_threshold == 0 {
            return Err("--k-threshold must be at least 1".into());
        }
        if self.ds == Ds::Abtree && (self.a < 2 || self.b < 2 * self.a - 1) {
            return Err("(a,b)-tree needs a >= 2 and b >= 2a - 1".into());
        }
        if self.ds == Ds::Kcas {
            if !(1..=MAX_K).contains(&self.kcas_k) {
                return Err(format!("--kcas-k must be in 1..={MAX_K}"));
            }
            if self.kcas_k > self.array_size {
                return Err("--kcas-k exceeds --array-size".into());
            }
        }
        Ok(())
    }

    /// Fraction of inserts among updates; 1/2 when there are none.
    fn insert_share(&self) -> f64 {
        match self.insert + self.delete {
            0 => 0.5,
            u => self.insert as f64 / u as f64,
        }
    }

    /// Steady-state size of a uniform workload with this update mix.
    pub fn expected_size(&self) -> f64 {
        self.keyrange as f64 * self.insert_share()
    }

    fn key(&self, rng: &mut StdRng) -> u64 {
        // 0 is the sentinel key
        1 + rng.gen_range(0..self.keyrange)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Insert(u64, bool),
    Delete(u64, bool),
    Get(u64, bool),
    Successor(u64, Option<u64>),
}

#[derive(Clone, Debug, Default)]
pub struct TrialReport {
    pub per_thread_ops: Vec<u64>,
    /// Successful k-CAS operations.
    pub successes: u64,
    pub elapsed: f64,
    pub prefill_size: usize,
    pub prefill_ops: u64,
    pub checksum_ok: bool,
    /// Validator errors; `None` when validation was off.
    pub errors: Option<Vec<String>>,
    pub stats: TreeStats,
    pub samples: usize,
    pub sample_failures: Vec<String>,
    /// Descriptor slots allocated (k-CAS only).
    pub slots: usize,
    pub log: Vec<Op>,
}

impl TrialReport {
    pub fn ops_total(&self) -> u64 {
        self.per_thread_ops.iter().sum()
    }

    pub fn throughput_per_us(&self) -> f64 {
        if self.elapsed > 0.0 {
            self.ops_total() as f64 / (self.elapsed * 1e6)
        } else {
            0.0
        }
    }

    pub fn valid(&self) -> Option<bool> {
        self.errors.as_ref().map(|e| e.is_empty())
    }

    /// Every enabled check passed.
    pub fn ok(&self) -> bool {
        self.checksum_ok && self.valid() != Some(false) && self.sample_failures.is_empty()
    }

    pub fn row(&self, cfg: &Config) -> Row {
        Row {
            ds: cfg.ds.name().into(),
            threads: cfg.threads,
            keyrange: cfg.keyrange,
            u_ins: cfg.insert,
            u_del: cfg.delete,
            ops_total: self.ops_total(),
            throughput_per_us: self.throughput_per_us(),
            checksum_ok: self.checksum_ok,
            valid: self.valid(),
            size: self.stats.size,
            height: self.stats.height,
            avg_leaf_depth: self.stats.avg_leaf_depth,
            violations: self.stats.violations,
            seconds: self.elapsed,
            seed: cfg.seed,
        }
    }
}

/// One output record. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub ds: String,
    pub threads: usize,
    pub keyrange: u64,
    pub u_ins: u32,
    pub u_del: u32,
    pub ops_total: u64,
    pub throughput_per_us: f64,
    pub checksum_ok: bool,
    pub valid: Option<bool>,
    pub size: usize,
    pub height: usize,
    pub avg_leaf_depth: f64,
    pub violations: usize,
    pub seconds: f64,
    pub seed: u64,
}

pub fn emit_report(rows: &[Row], format: Format, out: impl Write) -> std::io::Result<()> {
    match format {
        Format::Json => {
            let mut out = out;
            for r in rows {
                serde_json::to_writer(&mut out, r)?;
                writeln!(out)?;
            }
            Ok(())
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()
        }
    }
}

pub fn build(cfg: &Config) -> Box<dyn Dict> {
    match cfg.ds {
        Ds::Multiset => Box::new(Multiset::<u64>::new()),
        Ds::Chromatic => Box::new(Chromatic::<u64, u64>::new()),
        Ds::ChromaticK => Box::new(Chromatic::<u64, u64>::with_threshold(cfg.k_threshold)),
        Ds::Ravl => Box::new(Ravl::<u64, u64>::new()),
        Ds::RavlK => Box::new(Ravl::<u64, u64>::with_threshold(cfg.k_threshold)),
        Ds::Abtree => Box::new(AbTree::<u64, u64>::new(cfg.a, cfg.b)),
        Ds::Kcas => panic!("k-CAS is not a dictionary"),
    }
}

pub fn run_trial(cfg: &Config) -> Result<TrialReport, String> {
    cfg.check()?;
    if cfg.ds == Ds::Kcas {
        return Ok(kcas_trial(cfg));
    }
    let d = build(cfg);
    dict_trial(cfg, &*d)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Prefill {
    pub key_sum: i128,
    pub size: i64,
    pub ops: u64,
}

/// Runs the workload's insert/delete mix until the size is within 5% of
/// its steady state.
pub fn prefill(d: &dyn Dict, cfg: &Config) -> Result<Prefill, String> {
    let expected = cfg.expected_size();
    let near = |s: i64| (s as f64 - expected).abs() <= 0.05 * expected;
    if !cfg.prefill || cfg.keyrange == 0 || near(0) {
        return Ok(Prefill::default());
    }
    let p = cfg.insert_share();
    let size = AtomicI64::new(0);
    let done = AtomicBool::new(false);
    let timed_out = AtomicBool::new(false);
    let start = Instant::now();
    let limit = Duration::from_secs_f64(cfg.prefill_timeout);
    let mut rngs: Vec<StdRng> = (0..cfg.threads)
        .map(|tid| StdRng::seed_from_u64(cfg.seed ^ (0x9e37_79b9_7f4a_7c15 + tid as u64)))
        .collect();
    let mut out = Prefill::default();
    // a round ends once some thread sees the size in range; the others may
    // still land one more update each, so rounds repeat until it holds
    while !near(size.load(Relaxed)) {
        if timed_out.load(Relaxed) {
            return Err(format!(
                "prefill did not converge within {} s",
                cfg.prefill_timeout
            ));
        }
        done.store(false, Relaxed);
        let parts: Vec<(i128, u64)> = std::thread::scope(|sc| {
            let hs: Vec<_> = rngs
                .iter_mut()
                .map(|rng| {
                    let (size, done, timed_out) = (&size, &done, &timed_out);
                    sc.spawn(move || {
                        let (mut sum, mut ops) = (0i128, 0u64);
                        while !done.load(Relaxed) {
                            if ops % 256 == 255 && start.elapsed() > limit {
                                timed_out.store(true, Relaxed);
                                done.store(true, Relaxed);
                                break;
                            }
                            ops += 1;
                            let k = cfg.key(rng);
                            let delta = if rng.gen_bool(p) {
                                if d.insert(k) {
                                    sum += k as i128;
                                    1
                                } else {
                                    0
                                }
                            } else if d.delete(k) {
                                sum -= k as i128;
                                -1
                            } else {
                                0
                            };
                            let s = size.fetch_add(delta, Relaxed) + delta;
                            if near(s) {
                                done.store(true, Relaxed);
                            }
                        }
                        (sum, ops)
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        out.key_sum += parts.iter().map(|p| p.0).sum::<i128>();
        out.ops += parts.iter().map(|p| p.1).sum::<u64>();
    }
    out.size = size.load(Relaxed);
    Ok(out)
}

/// Shared stop signal and optional stop-the-world sampler for a trial.
struct Phase {
    stop: AtomicBool,
    running: AtomicUsize,
    stw: Option<Arc<stw::Stw>>,
}

impl Phase {
    fn new(cfg: &Config) -> Phase {
        Phase {
            stop: AtomicBool::new(false),
            running: AtomicUsize::new(cfg.threads),
            stw: cfg.sample.then(stw::Stw::new),
        }
    }

    fn keep_going(&self, cfg: &Config, done: u64) -> bool {
        match cfg.ops {
            Some(n) => done < n,
            None => !self.stop.load(Relaxed),
        }
    }

    /// Main-thread side: waits out the trial, sampling if asked.
    fn supervise(&self, cfg: &Config, violations: impl Fn() -> usize) -> (usize, Vec<String>) {
        let end = Instant::now() + Duration::from_secs_f64(cfg.seconds);
        let (mut samples, mut failures) = (0, vec![]);
        loop {
            let finished = match cfg.ops {
                Some(_) => self.running.load(Relaxed) == 0,
                None => Instant::now() >= end && (self.stw.is_none() || samples >= cfg.min_samples),
            };
            if finished {
                break;
            }
            match &self.stw {
                Some(s) => {
                    if let Some(stopped) = s.stop() {
                        let (v, f) = (violations(), stopped.in_flight());
                        samples += 1;
                        if v > f {
                            failures.push(format!(
                                "sample {samples}: {v} violations, {f} updates in flight"
                            ));
                        }
                    }
                    std::thread::sleep(Duration::from_micros(200));
                }
                None => std::thread::sleep(Duration::from_millis(1)),
            }
        }
        self.stop.store(true, Relaxed);
        (samples, failures)
    }
}

fn dict_trial(cfg: &Config, d: &dyn Dict) -> Result<TrialReport, String> {
    let pre = prefill(d, cfg)?;
    let phase = Phase::new(cfg);
    let start = Barrier::new(cfg.threads + 1);
    let log_ops = cfg.log_ops && cfg.threads == 1;
    let (ins, del, succ) = (
        cfg.insert,
        cfg.insert + cfg.delete,
        cfg.insert + cfg.delete + cfg.successor,
    );
    let mut t0 = Instant::now();
    let (parts, (samples, sample_failures)) = std::thread::scope(|sc| {
        let hs: Vec<_> = (0..cfg.threads)
            .map(|tid| {
                let (phase, start) = (&phase, &start);
                sc.spawn(move || {
                    let _attached = phase.stw.clone().map(stw::attach);
                    let mut rng = StdRng::seed_from_u64(cfg.seed.wrapping_add(tid as u64));
                    let (mut sum, mut ops, mut log) = (0i128, 0u64, vec![]);
                    start.wait();
                    while phase.keep_going(cfg, ops) {
                        ops += 1;
                        let k = cfg.key(&mut rng);
                        let r = rng.gen_range(0..100);
                        let op = if r < ins {
                            let ok = d.insert(k);
                            if ok {
                                sum += k as i128;
                            }
                            Op::Insert(k, ok)
                        } else if r < del {
                            let ok = d.delete(k);
                            if ok {
                                sum -= k as i128;
                            }
                            Op::Delete(k, ok)
                        } else if r < succ {
                            Op::Successor(k, d.successor(k))
                        } else {
                            Op::Get(k, d.get(k))
                        };
                        if log_ops {
                            log.push(op);
                        }
                    }
                    phase.running.fetch_sub(1, Relaxed);
                    (sum, ops, log)
                })
            })
            .collect();
        start.wait();
        t0 = Instant::now();
        let sampled = phase.supervise(cfg, || d.violations());
        let parts: Vec<_> = hs.into_iter().map(|h| h.join().unwrap()).collect();
        (parts, sampled)
    });
    let elapsed = t0.elapsed().as_secs_f64();
    let expected: i128 = pre.key_sum + parts.iter().map(|p| p.0).sum::<i128>();
    let contents = d.contents();
    let actual: i128 = contents.iter().map(|&(k, n)| k as i128 * n as i128).sum();
    let (errors, stats) = if cfg.validate {
        let (e, s) = d.check();
        (Some(e), s)
    } else {
        (None, d.stats())
    };
    Ok(TrialReport {
        per_thread_ops: parts.iter().map(|p| p.1).collect(),
        elapsed,
        prefill_size: pre.size as usize,
        prefill_ops: pre.ops,
        checksum_ok: expected == actual,
        errors,
        stats,
        samples,
        sample_failures,
        log: parts.into_iter().flat_map(|p| p.2).collect(),
        ..TrialReport::default()
    })
}

fn kcas_trial(cfg: &Config) -> TrialReport {
    let arr = KcasArray::new(cfg.array_size);
    let phase = Phase::new(&Config {
        sample: false,
        ..cfg.clone()
    });
    // two barriers keep every worker alive (and its slots allocated) until
    // all of them are done, so the slot count is not blurred by id reuse
    let (start, end) = (Barrier::new(cfg.threads + 1), Barrier::new(cfg.threads + 1));
    let k = cfg.kcas_k;
    let mut t0 = Instant::now();
    let (parts, slots) = std::thread::scope(|sc| {
        let hs: Vec<_> = (0..cfg.threads)
            .map(|tid| {
                let (arr, phase, start, end) = (&arr, &phase, &start, &end);
                sc.spawn(move || {
                    let mut rng = StdRng::seed_from_u64(cfg.seed.wrapping_add(tid as u64));
                    let mut entries = Vec::with_capacity(k);
                    let (mut ops, mut wins) = (0u64, 0u64);
                    start.wait();
                    while phase.keep_going(cfg, ops) {
                        ops += 1;
                        entries.clear();
                        for index in rand::seq::index::sample(&mut rng, arr.len(), k) {
                            let exp = arr.read(index);
                            entries.push(KcasEntry {
                                index,
                                exp,
                                new: exp + KCAS_STEP,
                            });
                        }
                        if arr.kcas(&entries) {
                            wins += 1;
                        }
                    }
                    phase.running.fetch_sub(1, Relaxed);
                    end.wait();
                    end.wait();
                    (ops, wins)
                })
            })
            .collect();
        start.wait();
        t0 = Instant::now();
        phase.supervise(cfg, || 0);
        end.wait();
        let slots = arr.slots();
        end.wait();
        let parts: Vec<_> = hs.into_iter().map(|h| h.join().unwrap()).collect();
        (parts, slots)
    });
    let elapsed = t0.elapsed().as_secs_f64();
    let successes: u64 = parts.iter().map(|p| p.1).sum();
    let checksum_ok = arr.sum() == k * KCAS_STEP * successes as usize;
    let errors = cfg.validate.then(|| {
        let mut e = vec![];
        if slots != 2 * cfg.threads {
            e.push(format!(
                "{slots} descriptor slots for {} threads",
                cfg.threads
            ));
        }
        e
    });
    TrialReport {
        per_thread_ops: parts.iter().map(|p| p.0).collect(),
        successes,
        elapsed,
        checksum_ok,
        errors,
        stats: TreeStats {
            size: arr.len(),
            ..TreeStats::default()
        },
        slots,
        ..TrialReport::default()
    }
}
