//! Discrete-event simulation of the four protocols.
//!
//! Time advances from one task completion to the next. Delays come from one
//! seeded stream, gradient noise from another, so changing the objective never
//! perturbs the timing of a run. Gradients are evaluated lazily at
//! aggregation time from the parameters each contributor read, and are summed
//! in worker-id order: `w ← w − (η/K)·Σ g`.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay::DelayDistribution;
use crate::objective::{GradientOracle, Objective, ObjectiveError};
use crate::rng::{stream, SimRng};
use crate::variant::{ConfigError, Variant, VariantConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// Stop after this many parameter updates.
    Iterations(u64),
    /// Stop at this simulated time.
    SimTime(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub delay: u64,
    pub data: u64,
}

impl Seeds {
    pub fn new(delay: u64, data: u64) -> Self {
        Self { delay, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    /// Record `F(w_{j+1})` and `‖∇F(w_j)‖²` every this many updates; 0 never.
    pub loss_cadence: u64,
    /// Keep every parameter vector `w_0, w_1, …` in the trace.
    pub record_params: bool,
    /// Keep a log of every task (start, end, outcome).
    pub record_tasks: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { loss_cadence: 1, record_params: false, record_tasks: false }
    }
}

/// One parameter update `w_j → w_{j+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub j: u64,
    pub wallclock: f64,
    /// K in force for this update.
    pub k: usize,
    /// Contributing worker ids, ascending; repeats allowed for batch variants.
    pub contributors: Vec<usize>,
    /// `j − τ` for each contributor, aligned with `contributors`.
    pub staleness: Vec<u64>,
    /// `F(w_{j+1})`.
    pub loss: Option<f64>,
    /// `‖∇F(w_j)‖²`.
    pub grad_norm_sq: Option<f64>,
}

impl UpdateRecord {
    pub fn staleness_mean(&self) -> f64 {
        self.staleness.iter().sum::<u64>() as f64 / self.staleness.len() as f64
    }

    pub fn staleness_max(&self) -> u64 {
        self.staleness.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutcome {
    Completed,
    Cancelled,
    /// Still running when the horizon was reached.
    Unfinished,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub worker: usize,
    pub start: f64,
    pub end: f64,
    pub outcome: TaskOutcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkCounters {
    pub started: u64,
    pub completed: u64,
    pub cancelled: u64,
    /// Gradients handed to the server; equals `completed`.
    pub pushes: u64,
    /// Gradients that entered an update.
    pub aggregated: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub config: VariantConfig,
    pub seeds: Seeds,
    pub records: Vec<UpdateRecord>,
    /// Simulated time at which the run stopped.
    pub end_time: f64,
    pub counters: WorkCounters,
    pub params: Option<Vec<Vec<f64>>>,
    pub tasks: Option<Vec<TaskRecord>>,
    /// Final parameters (empty for timing-only runs).
    pub final_params: Vec<f64>,
    pub diverged: bool,
}

impl Trace {
    pub fn wallclocks(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.wallclock).collect()
    }

    /// Per-update durations, the first measured from time zero.
    pub fn iteration_times(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.records
            .iter()
            .map(|r| {
                let d = r.wallclock - prev;
                prev = r.wallclock;
                d
            })
            .collect()
    }

    /// `(wallclock, F(w_{j+1}))` for every update with a recorded loss.
    pub fn loss_curve(&self) -> Vec<(f64, f64)> {
        self.records.iter().filter_map(|r| r.loss.map(|l| (r.wallclock, l))).collect()
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("initial point has dimension {got}, objective has {expected}")]
    InitDimension { expected: usize, got: usize },
    #[error("horizon too small: no update happened")]
    HorizonTooSmall,
    #[error("iterates diverged at update {} (t = {:.6})", .trace.records.len(), .trace.end_time)]
    NonFiniteLoss { trace: Box<Trace> },
    #[error("trace has too few records for this statistic")]
    InsufficientRecords,
    #[error("trace was recorded without parameter history")]
    MissingParams,
}

/// Everything needed for one run.
#[derive(Debug, Clone, Copy)]
pub struct RunSetup<'a> {
    pub config: VariantConfig,
    pub delays: &'a DelayDistribution,
    /// `None` runs the timing model alone.
    pub oracle: Option<&'a GradientOracle>,
    pub w0: &'a [f64],
    pub horizon: Horizon,
    pub seeds: Seeds,
    pub options: SimOptions,
}

impl<'a> RunSetup<'a> {
    pub fn timing(config: VariantConfig, delays: &'a DelayDistribution, horizon: Horizon, seed: u64) -> Self {
        Self {
            config,
            delays,
            oracle: None,
            w0: &[],
            horizon,
            seeds: Seeds::new(seed, 0),
            options: SimOptions { loss_cadence: 0, ..SimOptions::default() },
        }
    }
}

/// Observer called after each update. Returning `Some(k)` changes K from the
/// next aggregation on; the value is clamped to `[1, P]`.
pub trait Controller {
    fn after_update(&mut self, record: &UpdateRecord, w: &[f64]) -> Option<usize>;
}

impl<F: FnMut(&UpdateRecord, &[f64]) -> Option<usize>> Controller for F {
    fn after_update(&mut self, record: &UpdateRecord, w: &[f64]) -> Option<usize> {
        self(record, w)
    }
}

struct NoControl;

impl Controller for NoControl {
    fn after_update(&mut self, _: &UpdateRecord, _: &[f64]) -> Option<usize> {
        None
    }
}

pub fn run(setup: &RunSetup<'_>) -> Result<Trace, SimError> {
    run_with(setup, &mut NoControl)
}

pub fn run_with(setup: &RunSetup<'_>, controller: &mut dyn Controller) -> Result<Trace, SimError> {
    setup.config.validate()?;
    if let Some(oracle) = setup.oracle {
        if setup.w0.len() != oracle.dim() {
            return Err(SimError::InitDimension { expected: oracle.dim(), got: setup.w0.len() });
        }
    }
    let trace = Engine::new(setup).run(controller);
    if trace.diverged {
        return Err(SimError::NonFiniteLoss { trace: Box::new(trace) });
    }
    if trace.records.is_empty() {
        return Err(SimError::HorizonTooSmall);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    worker: usize,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.worker.cmp(&other.worker))
    }
}

#[derive(Debug, Clone)]
struct WorkerState {
    read_version: u64,
    snapshot: Option<Rc<Vec<f64>>>,
    task_start: f64,
    busy: bool,
}

#[derive(Debug, Clone)]
struct Contribution {
    worker: usize,
    read_version: u64,
    snapshot: Option<Rc<Vec<f64>>>,
}

struct Engine<'a> {
    setup: &'a RunSetup<'a>,
    k: usize,
    now: f64,
    version: u64,
    w: Rc<Vec<f64>>,
    workers: Vec<WorkerState>,
    heap: BinaryHeap<Reverse<Event>>,
    pending: Vec<Contribution>,
    delay_rng: SimRng,
    data_rng: SimRng,
    records: Vec<UpdateRecord>,
    counters: WorkCounters,
    params: Option<Vec<Vec<f64>>>,
    tasks: Option<Vec<TaskRecord>>,
    diverged: bool,
    grad_sum: Vec<f64>,
    grad_buf: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(setup: &'a RunSetup<'a>) -> Self {
        let p = setup.config.p;
        let w = if setup.oracle.is_some() { setup.w0.to_vec() } else { Vec::new() };
        let dim = w.len();
        Self {
            setup,
            k: setup.config.k,
            now: 0.0,
            version: 0,
            params: setup.options.record_params.then(|| vec![w.clone()]),
            w: Rc::new(w),
            workers: vec![WorkerState { read_version: 0, snapshot: None, task_start: 0.0, busy: false }; p],
            heap: BinaryHeap::with_capacity(p),
            pending: Vec::with_capacity(p),
            delay_rng: stream(setup.seeds.delay),
            data_rng: stream(setup.seeds.data),
            records: Vec::new(),
            counters: WorkCounters::default(),
            tasks: setup.options.record_tasks.then(Vec::new),
            diverged: false,
            grad_sum: vec![0.0; dim],
            grad_buf: vec![0.0; dim],
        }
    }

    fn learning(&self) -> bool {
        self.setup.oracle.is_some()
    }

    /// Worker reads the current parameters and starts a task.
    fn fetch_and_start(&mut self, id: usize) {
        let snapshot = self.learning().then(|| Rc::clone(&self.w));
        let ws = &mut self.workers[id];
        ws.read_version = self.version;
        ws.snapshot = snapshot;
        self.start(id);
    }

    /// Worker starts a new task on the parameters it already holds.
    fn start(&mut self, id: usize) {
        let delay = self.setup.delays.sample(&mut self.delay_rng);
        let ws = &mut self.workers[id];
        ws.task_start = self.now;
        ws.busy = true;
        self.counters.started += 1;
        self.heap.push(Reverse(Event { time: self.now + delay, worker: id }));
    }

    fn log_task(&mut self, worker: usize, end: f64, outcome: TaskOutcome) {
        if let Some(tasks) = self.tasks.as_mut() {
            tasks.push(TaskRecord { worker, start: self.workers[worker].task_start, end, outcome });
        }
    }

    fn cancel_all(&mut self) {
        let now = self.now;
        while let Some(Reverse(ev)) = self.heap.pop() {
            self.counters.cancelled += 1;
            self.log_task(ev.worker, now, TaskOutcome::Cancelled);
            self.workers[ev.worker].busy = false;
        }
    }

    fn done(&self) -> bool {
        match self.setup.horizon {
            Horizon::Iterations(j) => self.version >= j,
            Horizon::SimTime(_) => false,
        }
    }

    fn run(mut self, controller: &mut dyn Controller) -> Trace {
        let p = self.setup.config.p;
        for id in 0..p {
            self.fetch_and_start(id);
        }
        let variant = self.setup.config.variant;
        while !self.done() && !self.diverged {
            let Some(&Reverse(ev)) = self.heap.peek() else { break };
            if let Horizon::SimTime(budget) = self.setup.horizon {
                if ev.time > budget {
                    self.now = budget;
                    break;
                }
            }
            self.heap.pop();
            self.now = ev.time;
            let id = ev.worker;
            self.counters.completed += 1;
            self.counters.pushes += 1;
            self.log_task(id, ev.time, TaskOutcome::Completed);
            let ws = &mut self.workers[id];
            ws.busy = false;
            self.pending.push(Contribution {
                worker: id,
                read_version: ws.read_version,
                snapshot: ws.snapshot.clone(),
            });

            match variant {
                Variant::KSync => {
                    if self.pending.len() >= self.k {
                        self.aggregate(controller);
                        self.cancel_all();
                        self.pending.clear();
                        for id in 0..p {
                            self.fetch_and_start(id);
                        }
                    }
                }
                Variant::KBatchSync => {
                    if self.pending.len() >= self.k {
                        self.aggregate(controller);
                        self.cancel_all();
                        self.pending.clear();
                        for id in 0..p {
                            self.fetch_and_start(id);
                        }
                    } else {
                        self.start(id);
                    }
                }
                Variant::KAsync => {
                    while self.pending.len() >= self.k && !self.done() && !self.diverged {
                        let contributors = self.aggregate(controller);
                        for id in contributors {
                            self.fetch_and_start(id);
                        }
                    }
                }
                Variant::KBatchAsync => {
                    while self.pending.len() >= self.k && !self.done() && !self.diverged {
                        self.aggregate(controller);
                    }
                    self.fetch_and_start(id);
                }
            }
        }
        self.finish()
    }

    /// Applies the first K pending gradients. Returns the distinct workers
    /// that contributed, ascending.
    fn aggregate(&mut self, controller: &mut dyn Controller) -> Vec<usize> {
        let k = self.k;
        let mut batch: Vec<Contribution> = self.pending.drain(..k).collect();
        batch.sort_by_key(|c| c.worker);
        self.counters.aggregated += k as u64;
        let j = self.version;
        let mut record = UpdateRecord {
            j,
            wallclock: self.now,
            k,
            contributors: batch.iter().map(|c| c.worker).collect(),
            staleness: batch.iter().map(|c| j - c.read_version).collect(),
            loss: None,
            grad_norm_sq: None,
        };

        if let Some(oracle) = self.setup.oracle {
            let cadence = self.setup.options.loss_cadence;
            let observe = cadence > 0 && j.is_multiple_of(cadence);
            let objective = oracle.objective();
            if observe {
                objective.gradient_into(&self.w, &mut self.grad_buf);
                record.grad_norm_sq = Some(crate::objective::dot(&self.grad_buf, &self.grad_buf));
            }
            self.grad_sum.iter_mut().for_each(|g| *g = 0.0);
            for c in &batch {
                let snapshot = c.snapshot.as_deref().expect("learning run keeps snapshots");
                oracle.gradient_sample_into(snapshot, &mut self.data_rng, &mut self.grad_buf);
                for (s, g) in self.grad_sum.iter_mut().zip(&self.grad_buf) {
                    *s += g;
                }
            }
            let step = self.setup.config.eta / k as f64;
            let next: Vec<f64> = self.w.iter().zip(&self.grad_sum).map(|(w, g)| w - step * g).collect();
            if next.iter().any(|x| !x.is_finite()) {
                self.diverged = true;
            }
            if observe {
                let loss = objective.loss_unchecked(&next);
                if !loss.is_finite() {
                    self.diverged = true;
                }
                record.loss = Some(loss);
            }
            if let Some(params) = self.params.as_mut() {
                params.push(next.clone());
            }
            self.w = Rc::new(next);
        }
        self.version += 1;

        let mut distinct = record.contributors.clone();
        distinct.dedup();
        if !self.diverged {
            if let Some(new_k) = controller.after_update(&record, &self.w) {
                self.k = new_k.clamp(1, self.setup.config.p);
            }
        }
        self.records.push(record);
        distinct
    }

    fn finish(mut self) -> Trace {
        let end = self.now;
        if self.tasks.is_some() {
            let running: Vec<usize> = (0..self.workers.len()).filter(|&i| self.workers[i].busy).collect();
            for id in running {
                self.log_task(id, end, TaskOutcome::Unfinished);
            }
        }
        Trace {
            config: self.setup.config,
            seeds: self.setup.seeds,
            records: self.records,
            end_time: end,
            counters: self.counters,
            params: self.params,
            tasks: self.tasks,
            final_params: Rc::try_unwrap(self.w).unwrap_or_else(|rc| (*rc).clone()),
            diverged: self.diverged,
        }
    }
}

/// Fraction of contributions that were fresh (staleness zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct P0Estimate {
    pub value: f64,
    pub std_err: f64,
    pub samples: u64,
}

pub fn empirical_p0(trace: &Trace) -> Result<P0Estimate, SimError> {
    let mut fresh = 0u64;
    let mut total = 0u64;
    for r in &trace.records {
        total += r.staleness.len() as u64;
        fresh += r.staleness.iter().filter(|&&s| s == 0).count() as u64;
    }
    if total == 0 {
        return Err(SimError::InsufficientRecords);
    }
    let value = fresh as f64 / total as f64;
    Ok(P0Estimate { value, std_err: (value * (1.0 - value) / total as f64).sqrt(), samples: total })
}

/// Numerator and denominator of the staleness-severity ratio, kept apart so
/// several runs can be pooled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GammaSums {
    /// `Σ ‖∇F(w_j) − ∇F(w_τ)‖²`.
    pub drift: f64,
    /// `Σ ‖∇F(w_j)‖²`.
    pub norm: f64,
}

impl GammaSums {
    pub fn ratio(&self) -> Result<f64, SimError> {
        if self.norm == 0.0 {
            return Err(SimError::InsufficientRecords);
        }
        Ok(self.drift / self.norm)
    }
}

impl std::ops::Add for GammaSums {
    type Output = GammaSums;

    fn add(self, o: GammaSums) -> GammaSums {
        GammaSums { drift: self.drift + o.drift, norm: self.norm + o.norm }
    }
}

/// Both sums over every contribution of every update. Needs a trace
/// recorded with `record_params`.
pub fn gamma_sums(trace: &Trace, objective: &Objective) -> Result<GammaSums, SimError> {
    let params = trace.params.as_ref().ok_or(SimError::MissingParams)?;
    if trace.records.is_empty() {
        return Err(SimError::InsufficientRecords);
    }
    let dim = objective.dim();
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|w| {
            let mut g = vec![0.0; dim];
            objective.gradient_into(w, &mut g);
            g
        })
        .collect();
    let mut sums = GammaSums::default();
    for r in &trace.records {
        let current = &grads[r.j as usize];
        let norm = crate::objective::dot(current, current);
        for &s in &r.staleness {
            sums.norm += norm;
            if s > 0 {
                let stale = &grads[(r.j - s) as usize];
                sums.drift += current.iter().zip(stale).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
    }
    Ok(sums)
}

/// Measured staleness severity `γ`: the ratio of
/// `Σ ‖∇F(w_j) − ∇F(w_τ)‖²` to `Σ ‖∇F(w_j)‖²` over every contribution of
/// every update.
pub fn empirical_gamma(trace: &Trace, objective: &Objective) -> Result<f64, SimError> {
    gamma_sums(trace, objective)?.ratio()
}

/// Draws one delay per worker and returns the K-th smallest; the engine's
/// K-sync iteration time, exposed for cross-checks.
pub fn sample_kth_of<R: Rng + ?Sized>(delays: &DelayDistribution, k: usize, p: usize, rng: &mut R) -> f64 {
    let mut xs: Vec<f64> = (0..p).map(|_| delays.sample(rng)).collect();
    xs.select_nth_unstable_by(k - 1, f64::total_cmp);
    xs[k - 1]
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::objective::{NoiseModel, Quadratic};

    fn exp1() -> DelayDistribution {
        DelayDistribution::exponential(1.0).unwrap()
    }

    fn quad_oracle(sigma_sq: f64) -> GradientOracle {
        let q = Quadratic::log_spaced(1.0, 4.0, 6).unwrap();
        GradientOracle::new(Arc::new(Objective::Quadratic(q)), NoiseModel::AdditiveGaussian { sigma_sq }, 1).unwrap()
    }

    fn learning_setup<'a>(
        cfg: VariantConfig,
        delays: &'a DelayDistribution,
        oracle: &'a GradientOracle,
        w0: &'a [f64],
        iters: u64,
    ) -> RunSetup<'a> {
        RunSetup {
            config: cfg,
            delays,
            oracle: Some(oracle),
            w0,
            horizon: Horizon::Iterations(iters),
            seeds: Seeds::new(11, 12),
            options: SimOptions { loss_cadence: 1, record_params: true, record_tasks: true },
        }
    }

    #[test]
    fn ksync_is_never_stale() {
        let d = exp1();
        let oracle = quad_oracle(0.5);
        let w0 = vec![1.0; 6];
        for k in 1..=4 {
            let cfg = VariantConfig::new(Variant::KSync, k, 4, 1, 0.05).unwrap();
            let t = run(&learning_setup(cfg, &d, &oracle, &w0, 200)).unwrap();
            assert!(t.records.iter().all(|r| r.staleness.iter().all(|&s| s == 0)));
            assert!(t.records.iter().all(|r| r.contributors.len() == k));
        }
    }

    #[test]
    fn kbatch_sync_counts_minibatches() {
        let cfg = VariantConfig::timing(Variant::KBatchSync, 5, 5).unwrap();
        let d = exp1();
        let mut setup = RunSetup::timing(cfg, &d, Horizon::Iterations(300), 3);
        setup.options.record_tasks = true;
        let t = run(&setup).unwrap();
        assert_eq!(t.counters.aggregated, 5 * 300);
        assert!(t.records.iter().all(|r| r.contributors.len() == 5 && r.staleness.iter().all(|&s| s == 0)));
    }

    #[test]
    fn all_variants_collapse_to_serial_for_one_worker() {
        let d = exp1();
        let oracle = quad_oracle(0.3);
        let w0 = vec![0.5; 6];
        let base = run(&learning_setup(VariantConfig::new(Variant::KSync, 1, 1, 1, 0.1).unwrap(), &d, &oracle, &w0, 150))
            .unwrap();
        for v in Variant::ALL {
            let t =
                run(&learning_setup(VariantConfig::new(v, 1, 1, 1, 0.1).unwrap(), &d, &oracle, &w0, 150)).unwrap();
            assert_eq!(t.records, base.records, "{v}");
            assert_eq!(t.final_params, base.final_params, "{v}");
        }
    }

    #[test]
    fn one_async_equals_one_batch_async() {
        let d = exp1();
        let oracle = quad_oracle(0.3);
        let w0 = vec![0.5; 6];
        let a = run(&learning_setup(VariantConfig::new(Variant::KAsync, 1, 5, 1, 0.05).unwrap(), &d, &oracle, &w0, 400))
            .unwrap();
        let b =
            run(&learning_setup(VariantConfig::new(Variant::KBatchAsync, 1, 5, 1, 0.05).unwrap(), &d, &oracle, &w0, 400))
                .unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn runs_are_deterministic() {
        let d = DelayDistribution::pareto(2.0, 1.0).unwrap();
        let oracle = quad_oracle(0.3);
        let w0 = vec![0.5; 6];
        for v in Variant::ALL {
            let cfg = VariantConfig::new(v, 2, 4, 1, 0.05).unwrap();
            let a = run(&learning_setup(cfg, &d, &oracle, &w0, 300)).unwrap();
            let b = run(&learning_setup(cfg, &d, &oracle, &w0, 300)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn timing_is_independent_of_the_objective() {
        let d = exp1();
        let oracle = quad_oracle(0.3);
        let w0 = vec![0.5; 6];
        for v in Variant::ALL {
            let cfg = VariantConfig::new(v, 2, 4, 1, 0.05).unwrap();
            let learned = run(&learning_setup(cfg, &d, &oracle, &w0, 300)).unwrap();
            let timed = run(&RunSetup::timing(cfg, &d, Horizon::Iterations(300), 11)).unwrap();
            assert_eq!(learned.wallclocks(), timed.wallclocks());
            for (a, b) in learned.records.iter().zip(&timed.records) {
                assert_eq!(a.contributors, b.contributors);
                assert_eq!(a.staleness, b.staleness);
            }
        }
    }

    /// Independent re-implementation of K-sync: per iteration draw P delays,
    /// take the K smallest (ties by id), sum their gradients in id order.
    #[test]
    fn ksync_matches_reference_serial_sgd_bitwise() {
        let d = exp1();
        let oracle = quad_oracle(0.4);
        let w0 = vec![1.5; 6];
        let (k, p, eta, iters) = (3, 5, 0.07, 120);
        let cfg = VariantConfig::new(Variant::KSync, k, p, 1, eta).unwrap();
        let trace = run(&learning_setup(cfg, &d, &oracle, &w0, iters)).unwrap();

        let mut delay_rng = stream(11);
        let mut data_rng = stream(12);
        let mut w = w0.clone();
        let mut clock = 0.0;
        for r in &trace.records {
            let mut draws: Vec<(f64, usize)> = (0..p).map(|i| (d.sample(&mut delay_rng), i)).collect();
            draws.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            clock += draws[k - 1].0;
            let mut ids: Vec<usize> = draws[..k].iter().map(|x| x.1).collect();
            ids.sort();
            let mut sum = vec![0.0; w.len()];
            for _ in &ids {
                let g = oracle.stochastic_gradient(&w, &mut data_rng).unwrap();
                for (s, gi) in sum.iter_mut().zip(&g) {
                    *s += gi;
                }
            }
            w = w.iter().zip(&sum).map(|(wi, s)| wi - eta / k as f64 * s).collect();
            assert_eq!(r.contributors, ids);
            assert_eq!(r.wallclock, clock);
            assert_eq!(r.loss.unwrap(), oracle.objective().full_loss(&w).unwrap());
        }
        assert_eq!(trace.final_params, w);
    }

    #[test]
    fn task_log_conserves_work() {
        let d = DelayDistribution::shifted_exponential(0.5, 1.0).unwrap();
        for v in Variant::ALL {
            let cfg = VariantConfig::timing(v, 3, 6).unwrap();
            let mut setup = RunSetup::timing(cfg, &d, Horizon::SimTime(200.0), 5);
            setup.options.record_tasks = true;
            let t = run(&setup).unwrap();
            let tasks = t.tasks.as_ref().unwrap();
            let c = t.counters;
            let unfinished = tasks.iter().filter(|x| x.outcome == TaskOutcome::Unfinished).count() as u64;
            assert_eq!(c.started, c.completed + c.cancelled + unfinished, "{v}");
            assert_eq!(tasks.len() as u64, c.started, "{v}");
            assert!(c.aggregated <= c.pushes);
            // a worker never runs two tasks at once
            for wid in 0..6 {
                let mut mine: Vec<&TaskRecord> = tasks.iter().filter(|x| x.worker == wid).collect();
                mine.sort_by(|a, b| a.start.total_cmp(&b.start));
                for pair in mine.windows(2) {
                    assert!(pair[0].end <= pair[1].start + 1e-12, "{v}");
                }
                assert!(mine.iter().all(|x| x.end >= x.start && x.end <= 200.0));
            }
        }
    }

    #[test]
    fn batch_async_keeps_every_worker_busy() {
        let d = exp1();
        let cfg = VariantConfig::timing(Variant::KBatchAsync, 4, 4).unwrap();
        let mut setup = RunSetup::timing(cfg, &d, Horizon::SimTime(500.0), 9);
        setup.options.record_tasks = true;
        let t = run(&setup).unwrap();
        let tasks = t.tasks.unwrap();
        for wid in 0..4 {
            let busy: f64 = tasks.iter().filter(|x| x.worker == wid).map(|x| x.end - x.start).sum();
            assert!((busy - 500.0).abs() < 1e-9);
        }
        assert_eq!(t.counters.cancelled, 0);
    }

    #[test]
    fn wallclock_strictly_increases_for_continuous_delays() {
        for v in Variant::ALL {
            let cfg = VariantConfig::timing(v, 2, 5).unwrap();
            let t = run(&RunSetup::timing(cfg, &exp1(), Horizon::Iterations(2000), 1)).unwrap();
            assert!(t.records.windows(2).all(|w| w[1].wallclock > w[0].wallclock), "{v}");
            assert!(t.records.iter().enumerate().all(|(i, r)| r.j == i as u64));
        }
    }

    #[test]
    fn sim_time_horizon_stops_at_budget() {
        let cfg = VariantConfig::timing(Variant::KAsync, 2, 4).unwrap();
        let t = run(&RunSetup::timing(cfg, &exp1(), Horizon::SimTime(50.0), 2)).unwrap();
        assert_eq!(t.end_time, 50.0);
        assert!(t.records.last().unwrap().wallclock <= 50.0);
        let tiny = run(&RunSetup::timing(cfg, &exp1(), Horizon::SimTime(1e-9), 2));
        assert!(matches!(tiny, Err(SimError::HorizonTooSmall)));
        assert!(matches!(run(&RunSetup::timing(cfg, &exp1(), Horizon::Iterations(0), 2)), Err(SimError::HorizonTooSmall)));
    }

    #[test]
    fn divergence_is_reported_with_partial_trace() {
        let d = exp1();
        let oracle = quad_oracle(0.1);
        let w0 = vec![1.0; 6];
        let cfg = VariantConfig::new(Variant::KSync, 1, 2, 1, 5.0).unwrap();
        match run(&learning_setup(cfg, &d, &oracle, &w0, 100_000)) {
            Err(SimError::NonFiniteLoss { trace }) => {
                assert!(trace.diverged);
                assert!(!trace.records.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn controller_changes_k() {
        let cfg = VariantConfig::timing(Variant::KAsync, 1, 6).unwrap();
        let d = exp1();
        let setup = RunSetup::timing(cfg, &d, Horizon::Iterations(100), 4);
        let mut ctl = |r: &UpdateRecord, _: &[f64]| if r.j == 49 { Some(4) } else { None };
        let t = run_with(&setup, &mut ctl).unwrap();
        assert!(t.records[..50].iter().all(|r| r.k == 1 && r.contributors.len() == 1));
        assert!(t.records[50..].iter().all(|r| r.k == 4 && r.contributors.len() == 4));
        let mut huge = |_: &UpdateRecord, _: &[f64]| Some(100);
        let t = run_with(&setup, &mut huge).unwrap();
        assert_eq!(t.records.last().unwrap().k, 6);
    }

    #[test]
    fn p0_and_gamma_statistics() {
        let d = exp1();
        let oracle = quad_oracle(0.2);
        let w0 = vec![1.0; 6];
        let sync = run(&learning_setup(VariantConfig::new(Variant::KSync, 2, 4, 1, 0.05).unwrap(), &d, &oracle, &w0, 300))
            .unwrap();
        assert_eq!(empirical_p0(&sync).unwrap().value, 1.0);
        assert_eq!(empirical_gamma(&sync, oracle.objective()).unwrap(), 0.0);
        let asy =
            run(&learning_setup(VariantConfig::new(Variant::KAsync, 1, 4, 1, 0.05).unwrap(), &d, &oracle, &w0, 3000))
                .unwrap();
        let p0 = empirical_p0(&asy).unwrap();
        // memoryless delays: the freshest contribution probability is 1/P
        assert!((p0.value - 0.25).abs() < 4.0 * p0.std_err + 0.01, "{p0:?}");
        let g = empirical_gamma(&asy, oracle.objective()).unwrap();
        assert!(g > 0.0 && g.is_finite());
        let timed = run(&RunSetup::timing(VariantConfig::timing(Variant::KAsync, 1, 4).unwrap(), &d, Horizon::Iterations(10), 1))
            .unwrap();
        assert!(matches!(empirical_gamma(&timed, oracle.objective()), Err(SimError::MissingParams)));
    }

    #[test]
    fn sample_kth_is_order_statistic() {
        let mut rng = stream(3);
        let d = DelayDistribution::shifted_exponential(2.0, 1.0).unwrap();
        for _ in 0..100 {
            assert!(sample_kth_of(&d, 1, 4, &mut rng) >= 2.0);
        }
    }
}
