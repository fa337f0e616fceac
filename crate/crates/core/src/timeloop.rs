//! Newmark-β time integration: per-step right-hand sides, state updates, and
//! the lane engine that runs batches of simulation cases.
//!
//! The integrator is the average-acceleration variant (β = 1/4, γ = 1/2),
//! standardized as
//!
//! ```text
//! A        = (4/dt²)·M + (2/dt)·C + K
//! b        = f + M·[(4/dt²)u + (4/dt)v + a] + C·[(2/dt)u + v]
//! v'       = (2/dt)(u' − u) − v
//! a'       = (4/dt²)(u' − u) − (4/dt)v − a
//! ```
//!
//! [`LaneEngine`] owns `r` cases and exposes the step as three phases —
//! predict (host), solve (accelerator role), update (host) — so the same
//! arithmetic serves both the sequential [`run_single_lane`] baseline and the
//! overlapped dual-lane pipeline. Phase splitting changes only *when* work
//! runs, never its operand order, which keeps the two drivers bit-identical
//! under identical configurations.

use std::io::{self, BufRead, Write};
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::cg::{pcg_solve, pcg_solve_multi, CgError, SolveReport};
use crate::ebe::{EbeError, EbeOperator, MultiVector, MAX_LANES};
use crate::elasticity::{build_element_operators, ElasticityError, ElementOperatorSet, Material};
use crate::mesh::{partition_predictor_regions, Mesh};
use crate::predictor::{
    ab4_or_hold, data_driven_initial_guess, update_history, HistoryBuffer, SController,
    DEFAULT_DROP_TOL,
};
use crate::sparse::{
    apply_block_jacobi, apply_block_jacobi_multi, assemble_damping, assemble_mass,
    assemble_system, build_block_jacobi, build_block_jacobi_from_elements, BlockCSR3, BlockJacobi,
    SparseError,
};

/// Errors from configuration validation, system setup, or the solve loop.
#[derive(Debug, Error)]
pub enum TimeloopError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("expected {expected} impulse schedules (one per case), got {got}")]
    CaseCountMismatch { got: usize, expected: usize },
    #[error("material setup failed: {0}")]
    Elasticity(#[from] ElasticityError),
    #[error("backend assembly failed: {0}")]
    Sparse(#[from] SparseError),
    #[error("element backend setup failed: {0}")]
    Ebe(#[from] EbeError),
    #[error("solver breakdown at step {step}, case {case}: {source}")]
    Solver {
        step: usize,
        case: usize,
        #[source]
        source: CgError,
    },
    #[error(
        "solver did not converge at step {step}, case {case}: \
         relative residual {residual:.3e} after {iterations} iterations"
    )]
    NotConverged {
        step: usize,
        case: usize,
        iterations: usize,
        residual: f64,
    },
}

/// Which operator realization drives matvecs and right-hand sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendChoice {
    /// Assembled block-CSR matrices; one single-vector CG solve per case.
    Crs,
    /// Matrix-free element-by-element operator; single-vector CG per case.
    Ebe,
    /// Matrix-free operator with the fused multi-case CG across the lane.
    EbeMulti,
}

/// Initial-guess strategy for the per-step solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorChoice {
    /// No extrapolation: previous displacement (the "none" baseline).
    Hold,
    /// Four-step Adams–Bashforth extrapolation only.
    Ab4,
    /// Adams–Bashforth plus the per-region orthogonal-decomposition
    /// corrector over stored extrapolation-error pairs.
    DataDriven,
}

/// History-length policy for the data-driven corrector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryLengthMode {
    /// Pinned `s`; runs are bit-reproducible (no wall-clock feedback).
    Fixed(usize),
    /// Feedback-controlled `s ∈ [s_min, s_max]` from phase timings.
    Dynamic { s_min: usize, s_max: usize },
}

/// Surface-node displacement channels to record during a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureSpec {
    /// Node indices to record.
    pub nodes: Vec<u32>,
    /// Displacement component (0 = x, 1 = y, 2 = z).
    pub component: usize,
}

/// Complete parameterization of one lane run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Time step (s).
    pub dt: f64,
    /// Number of steps.
    pub nt: usize,
    /// Relative-residual convergence threshold.
    pub epsilon: f64,
    /// Iteration cap per solve.
    pub max_iter: usize,
    pub backend: BackendChoice,
    pub predictor: PredictorChoice,
    /// Cases per lane (fused solver lanes); 1 ≤ r ≤ [`MAX_LANES`].
    pub r: usize,
    pub s_mode: HistoryLengthMode,
    /// Target nodes per predictor region.
    pub region_target_nodes: usize,
    /// Gram–Schmidt rank-drop tolerance.
    pub drop_tol: f64,
    /// Seed recorded with the run (source schedules are derived elsewhere).
    pub seed: u64,
    /// Optional waveform capture.
    pub capture: Option<CaptureSpec>,
    /// Record every case's full displacement vector after each step
    /// (equivalence testing; memory-heavy on large meshes).
    pub record_solutions: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dt: 0.01,
            nt: 200,
            epsilon: 1e-8,
            max_iter: 500,
            backend: BackendChoice::EbeMulti,
            predictor: PredictorChoice::DataDriven,
            r: 4,
            s_mode: HistoryLengthMode::Fixed(8),
            region_target_nodes: 512,
            drop_tol: DEFAULT_DROP_TOL,
            seed: 0,
            capture: None,
            record_solutions: false,
        }
    }
}

impl RunConfig {
    /// Check the invariants that every runner relies on.
    pub fn validate(&self) -> Result<(), TimeloopError> {
        if !(self.dt > 0.0) {
            return Err(TimeloopError::InvalidConfig("dt must be positive"));
        }
        if self.nt == 0 {
            return Err(TimeloopError::InvalidConfig("nt must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(TimeloopError::InvalidConfig("epsilon must lie in (0, 1)"));
        }
        if self.max_iter == 0 {
            return Err(TimeloopError::InvalidConfig("max_iter must be at least 1"));
        }
        if self.r == 0 || self.r > MAX_LANES {
            return Err(TimeloopError::InvalidConfig("r must lie in 1..=MAX_LANES"));
        }
        match self.s_mode {
            HistoryLengthMode::Fixed(s) if s == 0 => {
                return Err(TimeloopError::InvalidConfig("fixed s must be at least 1"))
            }
            HistoryLengthMode::Dynamic { s_min, s_max } if s_min == 0 || s_min > s_max => {
                return Err(TimeloopError::InvalidConfig("need 1 ≤ s_min ≤ s_max"))
            }
            _ => {}
        }
        if self.region_target_nodes == 0 {
            return Err(TimeloopError::InvalidConfig(
                "region_target_nodes must be at least 1",
            ));
        }
        if !(self.drop_tol > 0.0) {
            return Err(TimeloopError::InvalidConfig("drop_tol must be positive"));
        }
        Ok(())
    }

    /// Ring-buffer capacity implied by the history mode.
    pub fn s_capacity(&self) -> usize {
        match self.s_mode {
            HistoryLengthMode::Fixed(s) => s,
            HistoryLengthMode::Dynamic { s_max, .. } => s_max,
        }
    }
}

/// One-step nodal force: at `step`, `amplitude·direction` is applied to
/// `node` for exactly one time step (flat spectrum up to the resolvable
/// band).
#[derive(Debug, Clone, PartialEq)]
pub struct Impulse {
    pub node: u32,
    pub step: usize,
    /// Unit direction of the applied force.
    pub direction: [f64; 3],
    /// Force magnitude (N).
    pub amplitude: f64,
}

/// Mutable per-case integration state.
#[derive(Debug, Clone)]
pub struct CaseState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub f: Vec<f64>,
    /// Last completed step.
    pub it: usize,
    impulses: Vec<Impulse>,
    /// Up to four newest velocity snapshots, oldest first (seeded with v⁰).
    v_hist: Vec<Vec<f64>>,
    /// Extrapolation error of the newest completed step.
    last_delta: Option<Vec<f64>>,
    /// Baseline extrapolation of the step currently in flight.
    pending_ab4: Option<Vec<f64>>,
    history: HistoryBuffer,
}

impl CaseState {
    fn new(n_dofs: usize, impulses: Vec<Impulse>, history: HistoryBuffer) -> Self {
        CaseState {
            u: vec![0.0; n_dofs],
            v: vec![0.0; n_dofs],
            a: vec![0.0; n_dofs],
            f: vec![0.0; n_dofs],
            it: 0,
            impulses,
            v_hist: vec![vec![0.0; n_dofs]],
            last_delta: None,
            pending_ab4: None,
            history,
        }
    }

    fn set_force(&mut self, it: usize) {
        self.f.iter_mut().for_each(|v| *v = 0.0);
        for imp in &self.impulses {
            if imp.step == it {
                let base = 3 * imp.node as usize;
                for c in 0..3 {
                    self.f[base + c] += imp.amplitude * imp.direction[c];
                }
            }
        }
    }
}

/// Newmark right-hand side with backend-supplied mass/damping products:
/// `b = f + M·[(4/dt²)u + (4/dt)v + a] + C·[(2/dt)u + v]`, constrained
/// entries zeroed.
pub fn newmark_rhs(
    u: &[f64],
    v: &[f64],
    a: &[f64],
    f: &[f64],
    dt: f64,
    apply_m: impl FnOnce(&[f64], &mut [f64]),
    apply_c: impl FnOnce(&[f64], &mut [f64]),
    constrained: &[usize],
) -> Vec<f64> {
    let n = u.len();
    debug_assert!(v.len() == n && a.len() == n && f.len() == n);
    let (c0, c1, c2) = (4.0 / (dt * dt), 4.0 / dt, 2.0 / dt);
    let wm: Vec<f64> = (0..n).map(|i| c0 * u[i] + c1 * v[i] + a[i]).collect();
    let wc: Vec<f64> = (0..n).map(|i| c2 * u[i] + v[i]).collect();
    let mut b = f.to_vec();
    let mut tmp = vec![0.0; n];
    apply_m(&wm, &mut tmp);
    for i in 0..n {
        b[i] += tmp[i];
    }
    apply_c(&wc, &mut tmp);
    for i in 0..n {
        b[i] += tmp[i];
    }
    for &d in constrained {
        b[d] = 0.0;
    }
    b
}

/// Average-acceleration state update from the solved displacement:
/// `v' = (2/dt)(u'−u) − v`, `a' = (4/dt²)(u'−u) − (4/dt)v − a`.
pub fn newmark_update(u: &mut [f64], v: &mut [f64], a: &mut [f64], u_new: &[f64], dt: f64) {
    let n = u.len();
    debug_assert!(v.len() == n && a.len() == n && u_new.len() == n);
    let (c2, c1, c0) = (2.0 / dt, 4.0 / dt, 4.0 / (dt * dt));
    for i in 0..n {
        let du = u_new[i] - u[i];
        let v_new = c2 * du - v[i];
        let a_new = c0 * du - c1 * v[i] - a[i];
        u[i] = u_new[i];
        v[i] = v_new;
        a[i] = a_new;
    }
}

/// Immutable per-mesh operator bundle shared by every lane of a run.
pub struct SystemOps {
    pub n_dofs: usize,
    pub dt: f64,
    pub elements: Arc<ElementOperatorSet>,
    pub constrained: Vec<usize>,
    pub ebe: EbeOperator,
    /// Assembled operators, present only for the CRS backend.
    pub crs_system: Option<BlockCSR3>,
    pub crs_mass: Option<BlockCSR3>,
    pub crs_damping: Option<BlockCSR3>,
    pub jacobi: BlockJacobi,
    /// Node regions for the predictor history.
    pub node_regions: Vec<Vec<u32>>,
    backend: BackendChoice,
}

/// Build the operator bundle for `cfg.backend` on `mesh`.
pub fn build_system_ops(
    mesh: &Mesh,
    materials: &[Material],
    cfg: &RunConfig,
) -> Result<SystemOps, TimeloopError> {
    cfg.validate()?;
    let elements = Arc::new(build_element_operators(mesh, materials)?);
    let constrained = mesh.bottom_dofs();
    let ebe = EbeOperator::new(elements.clone(), constrained.clone())?;
    let (crs_system, crs_mass, crs_damping, jacobi) = match cfg.backend {
        BackendChoice::Crs => {
            let a = assemble_system(mesh, &elements, cfg.dt)?;
            let m = assemble_mass(mesh, &elements)?;
            let c = assemble_damping(mesh, &elements)?;
            let jacobi = build_block_jacobi(&a)?;
            (Some(a), Some(m), Some(c), jacobi)
        }
        BackendChoice::Ebe | BackendChoice::EbeMulti => {
            let jacobi = build_block_jacobi_from_elements(&elements, cfg.dt, &constrained)?;
            (None, None, None, jacobi)
        }
    };
    Ok(SystemOps {
        n_dofs: mesh.n_dofs(),
        dt: cfg.dt,
        elements,
        constrained,
        ebe,
        crs_system,
        crs_mass,
        crs_damping,
        jacobi,
        node_regions: partition_predictor_regions(mesh, cfg.region_target_nodes),
        backend: cfg.backend,
    })
}

impl SystemOps {
    /// Right-hand side for one case using the active backend's raw mass and
    /// damping products.
    fn rhs_for(&self, case: &CaseState) -> Vec<f64> {
        match self.backend {
            BackendChoice::Crs => {
                let m = self.crs_mass.as_ref().expect("CRS backend has mass");
                let c = self.crs_damping.as_ref().expect("CRS backend has damping");
                newmark_rhs(
                    &case.u,
                    &case.v,
                    &case.a,
                    &case.f,
                    self.dt,
                    |x, y| m.matvec_into(x, y),
                    |x, y| c.matvec_into(x, y),
                    &self.constrained,
                )
            }
            BackendChoice::Ebe | BackendChoice::EbeMulti => newmark_rhs(
                &case.u,
                &case.v,
                &case.a,
                &case.f,
                self.dt,
                |x, y| self.ebe.apply_mass_into(x, y),
                |x, y| self.ebe.apply_damping_into(x, y),
                &self.constrained,
            ),
        }
    }
}

/// Numeric outcome of one case's step (no wall-clock fields; timings live in
/// [`ControllerTraceRow`] so raw outputs stay reproducible).
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    /// Global case id (lane offset + lane-local index).
    pub case: usize,
    pub iterations: usize,
    pub initial_relative_residual: f64,
    pub final_relative_residual: f64,
    pub converged: bool,
    /// History length active during this step's prediction.
    pub s_used: usize,
    /// Whether the orthogonal-decomposition correction was applied.
    pub corrected: bool,
}

/// Per-step phase timings and the controller's history length.
#[derive(Debug, Clone)]
pub struct ControllerTraceRow {
    pub step: usize,
    pub s: usize,
    pub predictor_seconds: f64,
    pub solver_seconds: f64,
}

/// Captured displacement time series of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseWaveforms {
    pub case: usize,
    pub dt: f64,
    pub component: usize,
    pub node_ids: Vec<u32>,
    /// `series[channel][step-1]`, one sample per completed step.
    pub series: Vec<Vec<f64>>,
}

/// Everything a finished lane hands back.
#[derive(Debug)]
pub struct LaneOutput {
    pub reports: Vec<StepReport>,
    pub trace: Vec<ControllerTraceRow>,
    pub waveforms: Vec<CaseWaveforms>,
    /// Final case states (displacement/velocity/acceleration).
    pub cases: Vec<CaseState>,
    /// `solutions[case][step-1]` when `record_solutions` was set.
    pub solutions: Vec<Vec<Vec<f64>>>,
}

/// One lane of `r` cases stepped as predict → solve → update phases.
pub struct LaneEngine {
    ops: Arc<SystemOps>,
    cfg: RunConfig,
    cases: Vec<CaseState>,
    controller: SController,
    case_id_offset: usize,
    reports: Vec<StepReport>,
    trace: Vec<ControllerTraceRow>,
    waveforms: Vec<CaseWaveforms>,
    solutions: Vec<Vec<Vec<f64>>>,
    /// `s` in force for the step currently in flight.
    step_s: usize,
    /// Per-case correction flags for the step currently in flight.
    step_corrected: Vec<bool>,
    pending_reports: Option<Vec<SolveReport>>,
}

impl LaneEngine {
    /// Build a lane over shared operators; `impulses` holds one schedule per
    /// case (`cfg.r` of them) and `case_id_offset` namespaces report rows.
    pub fn new(
        ops: Arc<SystemOps>,
        cfg: &RunConfig,
        impulses: Vec<Vec<Impulse>>,
        case_id_offset: usize,
    ) -> Result<Self, TimeloopError> {
        cfg.validate()?;
        if impulses.len() != cfg.r {
            return Err(TimeloopError::CaseCountMismatch {
                got: impulses.len(),
                expected: cfg.r,
            });
        }
        let s_cap = cfg.s_capacity();
        let cases: Vec<CaseState> = impulses
            .into_iter()
            .map(|sched| {
                CaseState::new(
                    ops.n_dofs,
                    sched,
                    HistoryBuffer::from_node_regions(&ops.node_regions, s_cap),
                )
            })
            .collect();
        let controller = match cfg.s_mode {
            HistoryLengthMode::Fixed(s) => {
                let mut c = SController::with_params(s.max(1), s.max(1), 0.8, 1.1, 1);
                c.set_s(s);
                c
            }
            HistoryLengthMode::Dynamic { s_min, s_max } => SController::new(s_min, s_max),
        };
        let waveforms = match &cfg.capture {
            Some(spec) => (0..cfg.r)
                .map(|l| CaseWaveforms {
                    case: case_id_offset + l,
                    dt: cfg.dt,
                    component: spec.component,
                    node_ids: spec.nodes.clone(),
                    series: vec![Vec::with_capacity(cfg.nt); spec.nodes.len()],
                })
                .collect(),
            None => Vec::new(),
        };
        let solutions = if cfg.record_solutions {
            vec![Vec::with_capacity(cfg.nt); cfg.r]
        } else {
            Vec::new()
        };
        Ok(LaneEngine {
            ops,
            cfg: cfg.clone(),
            cases,
            controller,
            case_id_offset,
            reports: Vec::new(),
            trace: Vec::new(),
            waveforms,
            solutions,
            step_s: 0,
            step_corrected: Vec::new(),
            pending_reports: None,
        })
    }

    /// Host phase: produce initial guesses for step `it` from the current
    /// states and histories (which cover steps ≤ it−1 only).
    pub fn predict_phase(&mut self, it: usize) -> MultiVector {
        debug_assert_eq!(it, self.cases[0].it + 1, "phases must advance in order");
        let n = self.ops.n_dofs;
        self.step_s = self.controller.s();
        self.step_corrected.clear();
        let mut guesses = MultiVector::zeros(n, self.cfg.r);
        let zero = vec![0.0; n];
        for (l, case) in self.cases.iter_mut().enumerate() {
            let (guess, corrected) = match self.cfg.predictor {
                PredictorChoice::Hold => (case.u.clone(), false),
                PredictorChoice::Ab4 => (ab4_or_hold(&case.u, &case.v_hist, self.cfg.dt), false),
                PredictorChoice::DataDriven => {
                    let query = case.last_delta.as_deref().unwrap_or(&zero);
                    let out = data_driven_initial_guess(
                        &case.u,
                        &case.v_hist,
                        self.cfg.dt,
                        query,
                        &case.history,
                        self.step_s,
                        self.cfg.drop_tol,
                    );
                    case.pending_ab4 = Some(out.ab4);
                    (out.guess, out.corrected)
                }
            };
            guesses.set_lane(l, &guess);
            self.step_corrected.push(corrected);
        }
        guesses
    }

    /// Accelerator phase: build right-hand sides and solve step `it` from the
    /// staged guesses. Returns the solved displacements, one lane per case.
    pub fn solve_phase(
        &mut self,
        it: usize,
        guesses: &MultiVector,
    ) -> Result<MultiVector, TimeloopError> {
        let n = self.ops.n_dofs;
        let mut rhs_lanes: Vec<Vec<f64>> = Vec::with_capacity(self.cfg.r);
        for case in &mut self.cases {
            case.set_force(it);
            rhs_lanes.push(self.ops.rhs_for(case));
        }
        let (solutions, reports) = match self.cfg.backend {
            BackendChoice::EbeMulti => {
                let f = MultiVector::from_lanes(&rhs_lanes);
                let dt = self.ops.dt;
                let (x, reports) = pcg_solve_multi(
                    |x, y| self.ops.ebe.matvec_multi_into(dt, x, y),
                    |r, z| apply_block_jacobi_multi(&self.ops.jacobi, r, z),
                    &f,
                    guesses,
                    self.cfg.epsilon,
                    self.cfg.max_iter,
                )
                .map_err(|source| TimeloopError::Solver {
                    step: it,
                    case: self.case_id_offset,
                    source,
                })?;
                (x, reports)
            }
            BackendChoice::Crs | BackendChoice::Ebe => {
                let mut x = MultiVector::zeros(n, self.cfg.r);
                let mut reports = Vec::with_capacity(self.cfg.r);
                for (l, b) in rhs_lanes.iter().enumerate() {
                    let x0 = guesses.lane(l);
                    let solved = match self.cfg.backend {
                        BackendChoice::Crs => {
                            let a = self.ops.crs_system.as_ref().expect("CRS system present");
                            pcg_solve(
                                |x, y| a.matvec_into(x, y),
                                |r, z| apply_block_jacobi(&self.ops.jacobi, r, z),
                                b,
                                &x0,
                                self.cfg.epsilon,
                                self.cfg.max_iter,
                            )
                        }
                        _ => {
                            let dt = self.ops.dt;
                            pcg_solve(
                                |x, y| self.ops.ebe.matvec_into(dt, x, y),
                                |r, z| apply_block_jacobi(&self.ops.jacobi, r, z),
                                b,
                                &x0,
                                self.cfg.epsilon,
                                self.cfg.max_iter,
                            )
                        }
                    };
                    let (xl, rep) = solved.map_err(|source| TimeloopError::Solver {
                        step: it,
                        case: self.case_id_offset + l,
                        source,
                    })?;
                    x.set_lane(l, &xl);
                    reports.push(rep);
                }
                (x, reports)
            }
        };
        for (l, rep) in reports.iter().enumerate() {
            if !rep.converged {
                return Err(TimeloopError::NotConverged {
                    step: it,
                    case: self.case_id_offset + l,
                    iterations: rep.iterations,
                    residual: rep.final_relative_residual,
                });
            }
        }
        self.pending_reports = Some(reports);
        Ok(solutions)
    }

    /// Host phase: advance every case's state with the staged solutions of
    /// step `it`, push history pairs, record reports/waveforms, and feed the
    /// controller with this step's phase timings.
    pub fn update_phase(
        &mut self,
        it: usize,
        solutions: &MultiVector,
        predictor_seconds: f64,
        solver_seconds: f64,
    ) {
        let reports = self
            .pending_reports
            .take()
            .expect("update_phase follows solve_phase");
        let dt = self.cfg.dt;
        for (l, case) in self.cases.iter_mut().enumerate() {
            let u_new = solutions.lane(l);
            if self.cfg.predictor == PredictorChoice::DataDriven {
                let ab4 = case
                    .pending_ab4
                    .take()
                    .expect("data-driven predict phase stored the baseline");
                let delta: Vec<f64> = u_new.iter().zip(&ab4).map(|(a, b)| a - b).collect();
                if let Some(prev) = case.last_delta.take() {
                    update_history(&mut case.history, &prev, &delta);
                }
                case.last_delta = Some(delta);
            }
            newmark_update(&mut case.u, &mut case.v, &mut case.a, &u_new, dt);
            case.it = it;
            case.v_hist.push(case.v.clone());
            if case.v_hist.len() > 4 {
                case.v_hist.remove(0);
            }
            if let Some(spec) = &self.cfg.capture {
                for (ch, &node) in spec.nodes.iter().enumerate() {
                    self.waveforms[l].series[ch]
                        .push(case.u[3 * node as usize + spec.component]);
                }
            }
            if self.cfg.record_solutions {
                self.solutions[l].push(case.u.clone());
            }
            let rep = &reports[l];
            self.reports.push(StepReport {
                step: it,
                case: self.case_id_offset + l,
                iterations: rep.iterations,
                initial_relative_residual: rep.initial_relative_residual,
                final_relative_residual: rep.final_relative_residual,
                converged: rep.converged,
                s_used: self.step_s,
                corrected: self.step_corrected[l],
            });
        }
        self.trace.push(ControllerTraceRow {
            step: it,
            s: self.step_s,
            predictor_seconds,
            solver_seconds,
        });
        if let HistoryLengthMode::Dynamic { .. } = self.cfg.s_mode {
            self.controller.adjust(predictor_seconds, solver_seconds);
        }
    }

    /// Number of steps completed so far.
    pub fn completed_steps(&self) -> usize {
        self.cases.first().map(|c| c.it).unwrap_or(0)
    }

    /// Consume the engine into its outputs.
    pub fn finish(self) -> LaneOutput {
        LaneOutput {
            reports: self.reports,
            trace: self.trace,
            waveforms: self.waveforms,
            cases: self.cases,
            solutions: self.solutions,
        }
    }
}

/// Sequential lane runner: predict, solve, and update each step in order.
/// This is the reference the pipelined scheduler must reproduce.
pub fn run_single_lane(
    mesh: &Mesh,
    materials: &[Material],
    cfg: &RunConfig,
    impulses: Vec<Vec<Impulse>>,
) -> Result<LaneOutput, TimeloopError> {
    let ops = Arc::new(build_system_ops(mesh, materials, cfg)?);
    run_single_lane_with_ops(ops, cfg, impulses, 0)
}

/// [`run_single_lane`] over a prebuilt operator bundle (shared across runs).
pub fn run_single_lane_with_ops(
    ops: Arc<SystemOps>,
    cfg: &RunConfig,
    impulses: Vec<Vec<Impulse>>,
    case_id_offset: usize,
) -> Result<LaneOutput, TimeloopError> {
    let mut engine = LaneEngine::new(ops, cfg, impulses, case_id_offset)?;
    for it in 1..=cfg.nt {
        let t0 = Instant::now();
        let guesses = engine.predict_phase(it);
        let predictor_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let solutions = engine.solve_phase(it, &guesses)?;
        let solver_seconds = t1.elapsed().as_secs_f64();
        engine.update_phase(it, &solutions, predictor_seconds, solver_seconds);
    }
    Ok(engine.finish())
}

/// Write one case's captured waveforms as columnar numeric text:
/// a metadata line, a channel-header line, then `t  ch0  ch1 …` rows with
/// round-trip-exact floating-point formatting.
pub fn write_waveform_text<W: Write>(wf: &CaseWaveforms, mut out: W) -> io::Result<()> {
    writeln!(
        out,
        "# case {} dt {:.17e} component {} channels {} steps {}",
        wf.case,
        wf.dt,
        wf.component,
        wf.node_ids.len(),
        wf.series.first().map(|s| s.len()).unwrap_or(0)
    )?;
    write!(out, "# t")?;
    for id in &wf.node_ids {
        write!(out, " node{id}")?;
    }
    writeln!(out)?;
    let steps = wf.series.first().map(|s| s.len()).unwrap_or(0);
    for k in 0..steps {
        write!(out, "{:.17e}", (k + 1) as f64 * wf.dt)?;
        for ch in &wf.series {
            write!(out, " {:.17e}", ch[k])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn bad_data(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

/// Parse the format written by [`write_waveform_text`].
pub fn read_waveform_text<R: BufRead>(reader: R) -> io::Result<CaseWaveforms> {
    let mut lines = reader.lines();
    let meta = lines
        .next()
        .ok_or_else(|| bad_data("empty waveform file".into()))??;
    let tok: Vec<&str> = meta.split_whitespace().collect();
    if tok.len() != 11 || tok[0] != "#" || tok[1] != "case" {
        return Err(bad_data(format!("malformed metadata line: {meta}")));
    }
    let parse = |s: &str, what: &str| -> io::Result<f64> {
        s.parse()
            .map_err(|_| bad_data(format!("bad {what}: {s}")))
    };
    let case = parse(tok[2], "case id")? as usize;
    let dt = parse(tok[4], "dt")?;
    let component = parse(tok[6], "component")? as usize;
    let channels = parse(tok[8], "channel count")? as usize;
    let steps = parse(tok[10], "step count")? as usize;
    let header = lines
        .next()
        .ok_or_else(|| bad_data("missing channel header".into()))??;
    let node_ids: Vec<u32> = header
        .split_whitespace()
        .skip(2)
        .map(|t| {
            t.strip_prefix("node")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad_data(format!("bad channel name: {t}")))
        })
        .collect::<io::Result<_>>()?;
    if node_ids.len() != channels {
        return Err(bad_data(format!(
            "channel header lists {} names, metadata says {channels}",
            node_ids.len()
        )));
    }
    let mut series = vec![Vec::with_capacity(steps); channels];
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != channels + 1 {
            return Err(bad_data(format!(
                "row {k}: expected {} columns, got {}",
                channels + 1,
                vals.len()
            )));
        }
        for (ch, t) in vals[1..].iter().enumerate() {
            series[ch].push(parse(t, "sample")?);
        }
    }
    for ch in &series {
        if ch.len() != steps {
            return Err(bad_data(format!(
                "expected {steps} samples per channel, got {}",
                ch.len()
            )));
        }
    }
    Ok(CaseWaveforms {
        case,
        dt,
        component,
        node_ids,
        series,
    })
}
