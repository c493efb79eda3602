//! The coverage-guided campaign loop: round-robin over the queue, run the
//! deterministic stages once per entry plus seeded havoc/splice every
//! visit, keep inputs that light new bitmap bits, and dedup crashes by
//! classified-bitmap hash (fine) and fault identity (coarse).

pub mod backend;
pub mod mutate;
pub mod proto;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::coverage::{classify_counts, has_new_bits, NewCoverage};
use backend::{Backend, BackendError, RunOutcome, RunStatus};
use mutate::{MutRng, DETERMINISTIC_STAGES};

#[derive(Clone, Debug)]
pub struct FuzzCase {
    pub id: u64,
    pub data: Vec<u8>,
    pub parent: Option<u64>,
    pub stage: String,
    pub exec_time: Duration,
    pub new_coverage: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CrashRecord {
    #[serde(skip)]
    pub input: Vec<u8>,
    pub exception_code: u32,
    pub fault_address: u64,
    /// Hash of the classified bitmap of the crashing run.
    pub path_hash: u64,
    /// Dedup key; equals `path_hash`.
    pub bucket: u64,
}

impl CrashRecord {
    /// Coarser "same vulnerability" key: exception code plus fault page.
    pub fn coarse_bucket(&self) -> (u32, u64) {
        (self.exception_code, self.fault_address & !0xFFF)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Budget {
    Execs(u64),
    Wall(Duration),
}

#[derive(Clone, Debug)]
pub struct CampaignConfig {
    pub rng_seed: u64,
    pub budget: Budget,
    /// Havoc children generated per queue visit.
    pub havoc_iters: usize,
    /// Splice children generated per queue visit.
    pub splice_iters: usize,
    ///

    /// Emit a stats line every this many execs.
    pub stats_every: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            rng_seed: 1,
            budget: Budget::Execs(10_000),
            havoc_iters: 192,
            splice_iters: 64,
            stats_every: 2_000,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct StatLine {
    pub execs: u64,
    pub execs_per_sec: u64,
    pub paths: usize,
    pub unique_crashes: usize,
    pub unique_buckets: usize,
}

#[derive(Debug, Default)]
pub struct CampaignReport {
    pub execs: u64,
    pub hangs: u64,
    pub queue: Vec<FuzzCase>,
    pub crashes: Vec<CrashRecord>,
    pub coarse_buckets: BTreeSet<(u32, u64)>,
    pub stats: Vec<StatLine>,
    /// Set when the backend died mid-campaign (partial results).
    pub backend_error: Option<String>,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

struct Campaign<'a> {
    cfg: &'a CampaignConfig,
    virgin: Vec<u8>,
    seen_inputs: BTreeSet<u64>,
    report: CampaignReport,
    started: Instant,
    virtual_time: Duration,
    next_stats: u64,
    budget_left: Option<u64>,
}

impl Campaign<'_> {
    fn out_of_budget(&self) -> bool {
        match self.cfg.budget {
            Budget::Execs(_) => self.budget_left == Some(0),
            Budget::Wall(limit) => self.started.elapsed() >= limit,
        }
    }

    /// Run one input; returns whether the campaign should keep going.
    fn execute(
        &mut self,
        backend: &mut dyn Backend,
        data: &[u8],
        parent: Option<u64>,
        stage: &str,
    ) -> Result<bool, BackendError> {
        if self.out_of_budget() {
            return Ok(false);
        }
        if let Some(left) = &mut self.budget_left {
            *left -= 1;
        }
        let RunOutcome { status, bitmap, exec_time } = backend.run_case(data)?;
        self.report.execs += 1;
        self.virtual_time += exec_time;
        let classified = classify_counts(&bitmap);

        match status {
            RunStatus::Ok => {}
            RunStatus::Hang => self.report.hangs += 1,
            RunStatus::Crash(info) => {
                let path_hash = fnv1a(&classified);
                let record = CrashRecord {
                    input: data.to_vec(),
                    exception_code: info.exception_code,
                    fault_address: info.fault_address,
                    path_hash,
                    bucket: path_hash,
                };
                self.report.coarse_buckets.insert(record.coarse_bucket());
                if !self.report.crashes.iter().any(|c| c.bucket == record.bucket) {
                    self.write_crash(&record);
                    self.report.crashes.push(record);
                }
            }
        }

        if has_new_bits(&classified, &mut self.virgin) != NewCoverage::None {
            let dedup = fnv1a(data);
            if self.seen_inputs.insert(dedup) {
                let id = self.report.queue.len() as u64;
                let case = FuzzCase {
                    id,
                    data: data.to_vec(),
                    parent,
                    stage: stage.to_string(),
                    exec_time,
                    new_coverage: true,
                };
                self.write_queue_entry(&case);
                self.report.queue.push(case);
            }
        }

        if self.report.execs >= self.next_stats {
            self.emit_stats();
            self.next_stats += self.cfg.stats_every;
        }
        Ok(!self.out_of_budget())
    }

    fn emit_stats(&mut self) {
        let secs = self.virtual_time.as_secs_f64();
        let line = StatLine {
            execs: self.report.execs,
            execs_per_sec: if secs > 0.0 { (self.report.execs as f64 / secs) as u64 } else { 0 },
            paths: self.report.queue.len(),
            unique_crashes: self.report.crashes.len(),
            unique_buckets: self.report.coarse_buckets.len(),
        };
        if let Some(dir) = &self.cfg.out_dir {
            use std::io::Write;
            if let Ok(mut f) =
                std::fs::OpenOptions::new().create(true).append(true).open(dir.join("stats.jsonl"))
            {
                let _ = writeln!(f, "{}", serde_json::to_string(&line).unwrap());
            }
        }
        self.report.stats.push(line);
    }

    fn write_queue_entry(&self, case: &FuzzCase) {
        if let Some(dir) = &self.cfg.out_dir {
            let _ = std::fs::write(dir.join("queue").join(format!("id_{:06}", case.id)), &case.data);
        }
    }

    fn write_crash(&self, record: &CrashRecord) {
        if let Some(dir) = &self.cfg.out_dir {
            let n = self.report.crashes.len();
            let _ = std::fs::write(dir.join("crashes").join(format!("id_{n:06}")), &record.input);
            let _ = std::fs::write(
                dir.join("crashes").join(format!("id_{n:06}.json")),
                serde_json::to_vec_pretty(record).unwrap(),
            );
        }
    }
}

/// Run a campaign until the budget is spent. Deterministic given the seeds,
/// the rng seed and a deterministic backend.
pub fn fuzz_loop(
    seeds: &[Vec<u8>],
    backend: &mut dyn Backend,
    cfg: &CampaignConfig,
) -> CampaignReport {
    assert!(!seeds.is_empty(), "at least one seed required");
    if let Some(dir) = &cfg.out_dir {
        let _ = std::fs::create_dir_all(dir.join("queue"));
        let _ = std::fs::create_dir_all(dir.join("crashes"));
        let _ = std::fs::remove_file(dir.join("stats.jsonl"));
    }
    let mut c = Campaign {
        cfg,
        virgin: vec![0xFF; 1 << backend.map_size_log2()],
        seen_inputs: BTreeSet::new(),
        report: CampaignReport::default(),
        started: Instant::now(),
        virtual_time: Duration::ZERO,
        next_stats: cfg.stats_every,
        budget_left: match cfg.budget {
            Budget::Execs(n) => Some(n),
            Budget::Wall(_) => None,
        },
    };

    let finish = |mut c: Campaign| -> CampaignReport {
        c.emit_stats();
        c.report
    };

    // seed pass: seeds enter the queue unconditionally so the loop always
    // has material to mutate, then run for their baseline coverage
    for (i, seed) in seeds.iter().enumerate() {
        if c.seen_inputs.insert(fnv1a(seed)) {
            let id = c.report.queue.len() as u64;
            let case = FuzzCase {
                id,
                data: seed.clone(),
                parent: None,
                stage: format!("seed{i}"),
                exec_time: Duration::ZERO,
                new_coverage: false,
            };
            c.write_queue_entry(&case);
            c.report.queue.push(case);
        }
        match c.execute(backend, seed, None, "seed") {
            Ok(true) => {}
            Ok(false) => return finish(c),
            Err(e) => {
                c.report.backend_error = Some(e.to_string());
                return finish(c);
            }
        }
    }

    let mut det_done: BTreeSet<u64> = BTreeSet::new();
    let mut qi = 0usize;
    'outer: loop {
        if c.report.queue.is_empty() {
            break;
        }
        let case_id;
        let data;
        {
            let case = &c.report.queue[qi % c.report.queue.len()];
            case_id = case.id;
            data = case.data.clone();
        }
        qi += 1;

        if det_done.insert(case_id) {
            for stage in DETERMINISTIC_STAGES {
                for cand in mutate::enumerate(stage, &data) {
                    match c.execute(backend, &cand, Some(case_id), stage.name()) {
                        Ok(true) => {}
                        Ok(false) => break 'outer,
                        Err(e) => {
                            c.report.backend_error = Some(e.to_string());
                            break 'outer;
                        }
                    }
                }
            }
        }

        // havoc and splice, reseeded per (campaign seed, case, visit) so
        // replays are exact
        let mut rng = MutRng::new(
            cfg.rng_seed ^ crate::select::avalanche64(case_id ^ ((qi as u64) << 32)),
        );
        for _ in 0..cfg.havoc_iters {
            let cand = mutate::havoc(&data, &mut rng);
            match c.execute(backend, &cand, Some(case_id), "havoc") {
                Ok(true) => {}
                Ok(false) => break 'outer,
                Err(e) => {
                    c.report.backend_error = Some(e.to_string());
                    break 'outer;
                }
            }
        }
        for _ in 0..cfg.splice_iters {
            let other = c.report.queue[rng.below(c.report.queue.len())].data.clone();
            let cand = mutate::splice(&data, &other, &mut rng);
            match c.execute(backend, &cand, Some(case_id), "splice") {
                Ok(true) => {}
                Ok(false) => break 'outer,
                Err(e) => {
                    c.report.backend_error = Some(e.to_string());
                    break 'outer;
                }
            }
        }
    }
    finish(c)
}
