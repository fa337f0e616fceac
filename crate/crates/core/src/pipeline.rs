//! Dual-lane overlapped scheduler.
//!
//! Two lanes of `r` cases each advance in lock step through four
//! barrier-separated phases per time step:
//!
//! 1. **P1** — lane 0 predicts on the host pool while lane 1 solves on the
//!    accelerator-role executor;
//! 2. **T1** — each lane copies its outbound data across the
//!    host↔accelerator boundary through a metered staging buffer;
//! 3. **P2** — lane 0 solves on the accelerator while lane 1 updates its
//!    states and predicts the *next* step on the host pool;
//! 4. **T2** — staging copies again.
//!
//! "Accelerator" is a role, not a device: an executor distinguished only by
//! an exclusivity token (at most one lane may hold it at any instant) and by
//! running the fused multi-right-hand-side solver. All data crossing the
//! boundary flows through [`transfer_stage`], which performs a byte-exact
//! copy and meters it in a [`TransferLedger`]; every staged buffer carries a
//! step tag so a stale or early prediction is caught by assertion. Phase
//! splitting changes only *when* work runs, never operand order, so a
//! pipelined run reproduces a sequential [`run_single_lane`] reference
//! bit-for-bit under a fixed history length.
//!
//! [`run_single_lane`]: crate::timeloop::run_single_lane

use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier, Mutex, TryLockError};
use std::time::Instant;

use crate::ebe::MultiVector;
use crate::elasticity::Material;
use crate::mesh::Mesh;
use crate::timeloop::{
    build_system_ops, Impulse, LaneEngine, LaneOutput, RunConfig, SystemOps, TimeloopError,
};

/// Which side of the host↔accelerator boundary an executor plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoleKind {
    /// Runs predictor and state-update work on a sized worker pool.
    HostPool,
    /// Runs solver work; exclusive — guarded by a token.
    Accelerator,
}

/// An executor role. The host pool carries a worker count and a thread pool;
/// the accelerator carries the exclusivity token that enforces "one lane at a
/// time" on solver work.
pub struct ExecutorRole {
    kind: RoleKind,
    workers: usize,
    pool: Option<rayon::ThreadPool>,
    token: Option<AcceleratorToken>,
}

impl ExecutorRole {
    /// A host pool with `workers` threads (at least one).
    pub fn host_pool(workers: usize) -> Self {
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("building the host worker pool");
        ExecutorRole {
            kind: RoleKind::HostPool,
            workers,
            pool: Some(pool),
            token: None,
        }
    }

    /// The accelerator role with a fresh exclusivity token.
    pub fn accelerator() -> Self {
        ExecutorRole {
            kind: RoleKind::Accelerator,
            workers: 1,
            pool: None,
            token: Some(AcceleratorToken::new()),
        }
    }

    pub fn kind(&self) -> RoleKind {
        self.kind
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Run host-side work inside this role's pool.
    fn run_host<T>(&self, work: impl FnOnce() -> T + Send) -> T
    where
        T: Send,
    {
        let pool = self.pool.as_ref().expect("host role carries a pool");
        pool.install(work)
    }

    fn token(&self) -> &AcceleratorToken {
        self.token.as_ref().expect("accelerator role carries token")
    }
}

/// Exclusivity token for the accelerator role. Acquisition is non-blocking:
/// the barrier schedule guarantees the token is free, so contention is a
/// scheduler bug and panics rather than waits.
pub struct AcceleratorToken {
    busy: Mutex<()>,
    holds: Mutex<Vec<TokenHold>>,
}

/// One recorded interval during which a lane held the accelerator token.
#[derive(Debug, Clone, Copy)]
pub struct TokenHold {
    pub lane: usize,
    pub step: usize,
    pub start: Instant,
    pub end: Instant,
}

impl AcceleratorToken {
    fn new() -> Self {
        AcceleratorToken {
            busy: Mutex::new(()),
            holds: Mutex::new(Vec::new()),
        }
    }

    /// Acquire the token for `lane` at `step`; released (and the hold
    /// interval recorded) when the guard drops.
    fn acquire(&self, lane: usize, step: usize) -> TokenGuard<'_> {
        let guard = match self.busy.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => {
                panic!("executor-token violation: lane {lane} found the accelerator busy at step {step}")
            }
            Err(TryLockError::Poisoned(e)) => e.into_inner(),
        };
        TokenGuard {
            token: self,
            lane,
            step,
            start: Instant::now(),
            _guard: guard,
        }
    }

    fn take_holds(&self) -> Vec<TokenHold> {
        std::mem::take(&mut self.holds.lock().unwrap())
    }
}

struct TokenGuard<'a> {
    token: &'a AcceleratorToken,
    lane: usize,
    step: usize,
    start: Instant,
    _guard: std::sync::MutexGuard<'a, ()>,
}

impl Drop for TokenGuard<'_> {
    fn drop(&mut self) {
        self.token.holds.lock().unwrap().push(TokenHold {
            lane: self.lane,
            step: self.step,
            start: self.start,
            end: Instant::now(),
        });
    }
}

/// Direction of a staging copy across the host↔accelerator boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferDirection {
    HostToAccelerator,
    AcceleratorToHost,
}

/// Per-step, per-lane transfer metering.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub step: usize,
    pub lane: usize,
    pub bytes_to_accelerator: u64,
    pub bytes_to_host: u64,
    pub seconds: f64,
}

/// Accumulated transfer records of a run (or of one lane, before merging).
#[derive(Debug, Clone, Default)]
pub struct TransferLedger {
    rows: Vec<LedgerRow>,
}

impl TransferLedger {
    pub fn new() -> Self {
        TransferLedger::default()
    }

    /// Add `bytes` under `(step, lane)`, creating the row if absent.
    pub fn record(
        &mut self,
        step: usize,
        lane: usize,
        direction: TransferDirection,
        bytes: u64,
        seconds: f64,
    ) {
        let row = match self
            .rows
            .iter_mut()
            .find(|r| r.step == step && r.lane == lane)
        {
            Some(r) => r,
            None => {
                self.rows.push(LedgerRow {
                    step,
                    lane,
                    bytes_to_accelerator: 0,
                    bytes_to_host: 0,
                    seconds: 0.0,
                });
                self.rows.last_mut().unwrap()
            }
        };
        match direction {
            TransferDirection::HostToAccelerator => row.bytes_to_accelerator += bytes,
            TransferDirection::AcceleratorToHost => row.bytes_to_host += bytes,
        }
        row.seconds += seconds;
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    /// Total bytes moved in both directions.
    pub fn total_bytes(&self) -> u64 {
        self.rows
            .iter()
            .map(|r| r.bytes_to_accelerator + r.bytes_to_host)
            .sum()
    }

    /// Fold another ledger into this one and keep rows sorted by
    /// `(step, lane)`.
    pub fn merge(&mut self, other: TransferLedger) {
        self.rows.extend(other.rows);
        self.rows.sort_by_key(|r| (r.step, r.lane));
    }
}

/// Copy `src` into `dst` byte-exactly and meter the copy in `ledger` under
/// `(step, lane, direction)`. Returns `(bytes, seconds)` for phase records.
pub fn transfer_stage(
    src: &[f64],
    dst: &mut Vec<f64>,
    direction: TransferDirection,
    step: usize,
    lane: usize,
    ledger: &mut TransferLedger,
) -> (u64, f64) {
    let t0 = Instant::now();
    dst.clear();
    dst.extend_from_slice(src);
    let seconds = t0.elapsed().as_secs_f64();
    let bytes = (src.len() * std::mem::size_of::<f64>()) as u64;
    ledger.record(step, lane, direction, bytes, seconds);
    (bytes, seconds)
}

/// Step bookkeeping attached to a staging buffer: which step the data serves
/// and the last completed step whose history informed it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct StageTag {
    for_step: usize,
    history_through: usize,
}

/// One direction's staging area at the host↔accelerator boundary, sized
/// `r · 3 · n_nodes` values.
struct StagingBuffer {
    mv: MultiVector,
    tag: Option<StageTag>,
}

impl StagingBuffer {
    fn new(n_dofs: usize, r: usize) -> Self {
        StagingBuffer {
            mv: MultiVector::zeros(n_dofs, r),
            tag: None,
        }
    }
}

/// Which kind of work a [`PhaseRecord`] covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Predict,
    Solve,
    Transfer,
    Update,
}

impl PhaseKind {
    pub fn label(self) -> &'static str {
        match self {
            PhaseKind::Predict => "predict",
            PhaseKind::Solve => "solve",
            PhaseKind::Transfer => "transfer",
            PhaseKind::Update => "update",
        }
    }
}

/// One timed phase of one lane: the raw material for the timeline export and
/// the overlap statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseRecord {
    pub step: usize,
    pub lane: usize,
    pub phase: PhaseKind,
    /// Seconds since the run epoch.
    pub start: f64,
    pub end: f64,
    pub bytes: u64,
}

/// Per-step phase totals across both lanes, plus the balance fraction
/// `min(predictor, solver) / max(predictor, solver)` (0 when a phase is
/// missing, 1 when perfectly balanced).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPhaseStats {
    pub step: usize,
    pub predictor_seconds: f64,
    pub solver_seconds: f64,
    pub transfer_seconds: f64,
    pub overlap: f64,
}

/// Reduce raw phase records to per-step totals and overlap fractions.
pub fn phase_timeline(records: &[PhaseRecord]) -> Vec<StepPhaseStats> {
    let mut steps: Vec<usize> = records.iter().map(|r| r.step).collect();
    steps.sort_unstable();
    steps.dedup();
    steps
        .into_iter()
        .map(|step| {
            let mut stats = StepPhaseStats {
                step,
                predictor_seconds: 0.0,
                solver_seconds: 0.0,
                transfer_seconds: 0.0,
                overlap: 0.0,
            };
            for r in records.iter().filter(|r| r.step == step) {
                let dt = r.end - r.start;
                match r.phase {
                    PhaseKind::Predict => stats.predictor_seconds += dt,
                    PhaseKind::Solve => stats.solver_seconds += dt,
                    PhaseKind::Transfer => stats.transfer_seconds += dt,
                    PhaseKind::Update => {}
                }
            }
            let hi = stats.predictor_seconds.max(stats.solver_seconds);
            let lo = stats.predictor_seconds.min(stats.solver_seconds);
            stats.overlap = if hi > 0.0 { lo / hi } else { 0.0 };
            stats
        })
        .collect()
}

/// Write phase records as CSV: `step,lane,phase,start,end,bytes`.
pub fn write_phase_timeline_csv<W: Write>(records: &[PhaseRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "step,lane,phase,start,end,bytes")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{:.9},{:.9},{}",
            r.step,
            r.lane,
            r.phase.label(),
            r.start,
            r.end,
            r.bytes
        )?;
    }
    Ok(())
}

/// Everything a pipelined run hands back: both lanes' outputs plus the
/// scheduler's own records.
#[derive(Debug)]
pub struct PipelineOutput {
    pub lanes: [LaneOutput; 2],
    pub records: Vec<PhaseRecord>,
    pub ledger: TransferLedger,
    pub token_holds: Vec<TokenHold>,
}

/// One lane of the scheduler: an engine plus its staging areas, phase
/// records, and transfer ledger. Lanes own disjoint cases; all cross-boundary
/// data flows through the staging buffers.
struct LaneState {
    id: usize,
    engine: LaneEngine,
    guess_stage: StagingBuffer,
    result_stage: StagingBuffer,
    /// Host-side buffers awaiting a staging copy.
    pending_guess: Option<MultiVector>,
    pending_solution: Option<MultiVector>,
    /// Step tags travelling with the pending buffers.
    pending_guess_tag: Option<StageTag>,
    records: Vec<PhaseRecord>,
    ledger: TransferLedger,
    /// Wall time of the most recent predict / solve phase, consumed by the
    /// update phase of the same step (the controller's inputs).
    predict_seconds: f64,
    solve_seconds: f64,
}

impl LaneState {
    fn new(
        id: usize,
        ops: Arc<SystemOps>,
        cfg: &RunConfig,
        impulses: Vec<Vec<Impulse>>,
    ) -> Result<Self, TimeloopError> {
        let n_dofs = ops.n_dofs;
        let engine = LaneEngine::new(ops, cfg, impulses, id * cfg.r)?;
        Ok(LaneState {
            id,
            engine,
            guess_stage: StagingBuffer::new(n_dofs, cfg.r),
            result_stage: StagingBuffer::new(n_dofs, cfg.r),
            pending_guess: None,
            pending_solution: None,
            pending_guess_tag: None,
            records: Vec::new(),
            ledger: TransferLedger::new(),
            predict_seconds: 0.0,
            solve_seconds: 0.0,
        })
    }

    /// Host work: predict step `it` on the host pool, leaving the guesses in
    /// the host-side pending buffer.
    fn predict(&mut self, it: usize, host: &ExecutorRole, epoch: Instant) {
        let history_through = self.engine.completed_steps();
        let t0 = epoch.elapsed().as_secs_f64();
        let engine = &mut self.engine;
        let guesses = host.run_host(|| engine.predict_phase(it));
        let t1 = epoch.elapsed().as_secs_f64();
        self.pending_guess = Some(guesses);
        self.pending_guess_tag = Some(StageTag {
            for_step: it,
            history_through,
        });
        self.predict_seconds = t1 - t0;
        self.records.push(PhaseRecord {
            step: it,
            lane: self.id,
            phase: PhaseKind::Predict,
            start: t0,
            end: t1,
            bytes: 0,
        });
    }

    /// Transfer work: copy the pending guesses into the accelerator-side
    /// staging buffer. Ledger bytes land on the step the guess serves.
    fn stage_guess(&mut self, epoch: Instant) {
        let guesses = self
            .pending_guess
            .take()
            .expect("stage_guess follows predict");
        let tag = self.pending_guess_tag.take().expect("tag set by predict");
        let t0 = epoch.elapsed().as_secs_f64();
        let (bytes, _) = transfer_stage(
            &guesses.data,
            &mut self.guess_stage.mv.data,
            TransferDirection::HostToAccelerator,
            tag.for_step,
            self.id,
            &mut self.ledger,
        );
        let t1 = epoch.elapsed().as_secs_f64();
        self.guess_stage.tag = Some(tag);
        self.records.push(PhaseRecord {
            step: tag.for_step,
            lane: self.id,
            phase: PhaseKind::Transfer,
            start: t0,
            end: t1,
            bytes,
        });
    }

    /// Accelerator work: solve step `it` from the staged guesses while
    /// holding the exclusivity token.
    fn solve(
        &mut self,
        it: usize,
        accel: &ExecutorRole,
        epoch: Instant,
    ) -> Result<(), TimeloopError> {
        let tag = self
            .guess_stage
            .tag
            .expect("solve consumes a staged prediction");
        assert_eq!(
            tag.for_step, it,
            "lane {} consumed a prediction staged for step {} at step {}",
            self.id, tag.for_step, it
        );
        assert_eq!(
            tag.history_through,
            it - 1,
            "lane {} prediction for step {} used history beyond step {}",
            self.id,
            it,
            it - 1
        );
        let t0 = epoch.elapsed().as_secs_f64();
        let solved = {
            let _hold = accel.token().acquire(self.id, it);
            self.engine.solve_phase(it, &self.guess_stage.mv)?
        };
        let t1 = epoch.elapsed().as_secs_f64();
        self.pending_solution = Some(solved);
        self.solve_seconds = t1 - t0;
        self.records.push(PhaseRecord {
            step: it,
            lane: self.id,
            phase: PhaseKind::Solve,
            start: t0,
            end: t1,
            bytes: 0,
        });
        Ok(())
    }

    /// Transfer work: copy the solved displacements back to the host-side
    /// staging buffer.
    fn stage_solution(&mut self, it: usize, epoch: Instant) {
        let solved = self
            .pending_solution
            .take()
            .expect("stage_solution follows solve");
        let t0 = epoch.elapsed().as_secs_f64();
        let (bytes, _) = transfer_stage(
            &solved.data,
            &mut self.result_stage.mv.data,
            TransferDirection::AcceleratorToHost,
            it,
            self.id,
            &mut self.ledger,
        );
        let t1 = epoch.elapsed().as_secs_f64();
        self.result_stage.tag = Some(StageTag {
            for_step: it,
            history_through: it - 1,
        });
        self.records.push(PhaseRecord {
            step: it,
            lane: self.id,
            phase: PhaseKind::Transfer,
            start: t0,
            end: t1,
            bytes,
        });
    }

    /// Host work: advance states with the staged solutions of step `it`.
    fn update(&mut self, it: usize, host: &ExecutorRole, epoch: Instant) {
        let tag = self
            .result_stage
            .tag
            .take()
            .expect("update consumes staged solutions");
        assert_eq!(
            tag.for_step, it,
            "lane {} consumed solutions staged for step {} at step {}",
            self.id, tag.for_step, it
        );
        let t0 = epoch.elapsed().as_secs_f64();
        let engine = &mut self.engine;
        let (pred, solv) = (self.predict_seconds, self.solve_seconds);
        let stage = &self.result_stage.mv;
        host.run_host(|| engine.update_phase(it, stage, pred, solv));
        let t1 = epoch.elapsed().as_secs_f64();
        self.records.push(PhaseRecord {
            step: it,
            lane: self.id,
            phase: PhaseKind::Update,
            start: t0,
            end: t1,
            bytes: 0,
        });
    }
}

/// Run two lanes of `cfg.r` cases each through the four-phase pipelined
/// schedule. `impulses` holds `2·r` schedules: lane 0 takes the first `r`,
/// lane 1 the rest. Case ids are global (`lane·r + lane-local index`).
pub fn run_pipeline(
    mesh: &Mesh,
    materials: &[Material],
    cfg: &RunConfig,
    impulses: Vec<Vec<Impulse>>,
) -> Result<PipelineOutput, TimeloopError> {
    let ops = Arc::new(build_system_ops(mesh, materials, cfg)?);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let host = ExecutorRole::host_pool(workers);
    let accel = ExecutorRole::accelerator();
    run_pipeline_with_ops(ops, cfg, impulses, &host, &accel)
}

/// [`run_pipeline`] over a prebuilt operator bundle and explicit executor
/// roles.
pub fn run_pipeline_with_ops(
    ops: Arc<SystemOps>,
    cfg: &RunConfig,
    impulses: Vec<Vec<Impulse>>,
    host: &ExecutorRole,
    accel: &ExecutorRole,
) -> Result<PipelineOutput, TimeloopError> {
    assert_eq!(host.kind(), RoleKind::HostPool);
    assert_eq!(accel.kind(), RoleKind::Accelerator);
    if impulses.len() != 2 * cfg.r {
        return Err(TimeloopError::CaseCountMismatch {
            got: impulses.len(),
            expected: 2 * cfg.r,
        });
    }
    let mut schedules = impulses;
    let lane1_schedules = schedules.split_off(cfg.r);
    let mut lane0 = LaneState::new(0, ops.clone(), cfg, schedules)?;
    let mut lane1 = LaneState::new(1, ops, cfg, lane1_schedules)?;

    let nt = cfg.nt;
    let epoch = Instant::now();

    // Warm-up: lane 1 enters the loop one phase ahead of lane 0 — its first
    // solve happens while lane 0 is still predicting — so its first
    // prediction is made and staged before the pipelined schedule starts.
    lane1.predict(1, host, epoch);
    lane1.stage_guess(epoch);

    // A failed solve must not strand the peer at a barrier: the failing lane
    // raises the flag, both lanes keep meeting the barriers doing no work,
    // and both leave the loop at the common end-of-step check.
    let abort = AtomicBool::new(false);
    let barriers: [Barrier; 4] = std::array::from_fn(|_| Barrier::new(2));

    let (res0, res1) = std::thread::scope(|scope| {
        let lane0_thread = scope.spawn(|| {
            let lane = &mut lane0;
            let mut failure = None;
            for it in 1..=nt {
                if failure.is_none() && !abort.load(Ordering::Acquire) {
                    // P1 (host): retire the previous step, predict this one.
                    if it > 1 {
                        lane.update(it - 1, host, epoch);
                    }
                    lane.predict(it, host, epoch);
                }
                barriers[0].wait();
                if failure.is_none() && !abort.load(Ordering::Acquire) {
                    // T1: guesses cross to the accelerator side.
                    lane.stage_guess(epoch);
                }
                barriers[1].wait();
                if failure.is_none() && !abort.load(Ordering::Acquire) {
                    // P2 (accelerator): solve this step.
                    if let Err(e) = lane.solve(it, accel, epoch) {
                        failure = Some(e);
                        abort.store(true, Ordering::Release);
                    }
                }
                barriers[2].wait();
                if failure.is_none() && !abort.load(Ordering::Acquire) {
                    // T2: solutions cross back to the host side.
                    lane.stage_solution(it, epoch);
                }
                barriers[3].wait();
                if abort.load(Ordering::Acquire) {
                    return failure;
                }
            }
            // The last step's solutions are staged but not yet applied.
            lane.update(nt, host, epoch);
            failure
        });
        let lane1_thread = scope.spawn(|| {
            let lane = &mut lane1;
            let mut failure = None;
            for it in 1..=nt {
                if failure.is_none() && !abort.load(Ordering::Acquire) {
                    // P1 (accelerator): solve this step from the staged guess.
                    if let Err(e) = lane.solve(it, accel, epoch) {
                        failure = Some(e);
                        abort.store(true, Ordering::Release);
                    }
                }
                barriers[0].wait();
                if failure.is_none() && !abort.load(Ordering::Acquire) {
                    // T1: solutions cross back to the host side.
                    lane.stage_solution(it, epoch);
                }
                barriers[1].wait();
                if failure.is_none() && !abort.load(Ordering::Acquire) {
                    // P2 (host): retire this step, predict the next one.
                    lane.update(it, host, epoch);
                    if it < nt {
                        lane.predict(it + 1, host, epoch);
                    }
                }
                barriers[2].wait();
                if failure.is_none() && !abort.load(Ordering::Acquire) && lane.pending_guess.is_some()
                {
                    // T2: next step's guesses cross to the accelerator side.
                    lane.stage_guess(epoch);
                }
                barriers[3].wait();
                if abort.load(Ordering::Acquire) {
                    return failure;
                }
            }
            failure
        });
        (lane0_thread.join(), lane1_thread.join())
    });

    // A panic in a lane (assertion failures are scheduler bugs) propagates.
    let err0 = res0.unwrap_or_else(|p| std::panic::resume_unwind(p));
    let err1 = res1.unwrap_or_else(|p| std::panic::resume_unwind(p));
    if let Some(e) = err0.or(err1) {
        return Err(e);
    }

    let mut records = lane0.records;
    records.append(&mut lane1.records);
    records.sort_by(|a, b| {
        (a.step, a.lane)
            .cmp(&(b.step, b.lane))
            .then(a.start.total_cmp(&b.start))
    });
    let mut ledger = lane0.ledger;
    ledger.merge(lane1.ledger);
    let mut token_holds = accel.token().take_holds();
    token_holds.sort_by_key(|h| h.start);
    Ok(PipelineOutput {
        lanes: [lane0.engine.finish(), lane1.engine.finish()],
        records,
        ledger,
        token_holds,
    })
}
