//! Method comparison and kernel benchmarks over one shared problem — the
//! orchestration layer behind the CLI's `run` and `bench` verbs.
//!
//! # Comparison metrics
//!
//! Every method in a comparison sees the same mesh, materials, and impulse
//! schedules, and all statistics are taken over the same inclusive step
//! window `[lo, hi]`:
//!
//! * **mean iterations/step** — mean of the per-(step, case) CG iteration
//!   counts inside the window.
//! * **mean seconds/step/case** — sum of per-step predictor + solver phase
//!   seconds across lanes inside the window, divided by (window steps ×
//!   cases).
//! * **matvec effective throughput** — analytic bytes moved by the window's
//!   system matvecs divided by the window's solver seconds. Modeled matvecs
//!   per solve are `iterations + 1` (one per iteration plus the initial
//!   residual; convergence rechecks are not counted). The fused multi-case
//!   solver performs `max(iterations over the lane) + 1` fused matvecs.
//! * **speedup vs. baseline** — baseline mean seconds / method mean seconds.
//!
//! # Analytic bytes-moved models
//!
//! One block-CSR matvec reads every stored 3×3 block (9 f64 values plus one
//! u32 column index), sweeps the row-pointer array, reads the input vector,
//! and writes the output:
//! `blocks·76 + (n_nodes + 1)·8 + 2·(3·n_nodes)·8` bytes.
//!
//! One element-by-element matvec over `r` fused lanes reads both 30×30
//! element factors (mass and stiffness), the 10-entry connectivity, and
//! gathers/scatters 30 DOFs per lane:
//! `elements·(2·900·8 + 10·4 + 2·30·8·r)` bytes.
//!
//! # Artifacts
//!
//! [`run_experiment`] writes into the configured output directory:
//!
//! * `comparison.csv` — one row per method (schema in
//!   [`write_comparison_csv`]).
//! * `steps_<method>.csv` — per-(step, case) solver raw data:
//!   `step,case,iterations,initial_relative_residual,final_relative_residual,converged,s_used,corrected`.
//! * `trace_<method>.csv` — controller trace with phase timings:
//!   `step,lane,s,predictor_seconds,solver_seconds`.
//! * `timeline_<method>.csv`, `ledger_<method>.csv` — pipeline phase records
//!   and transfer ledger (pipelined methods only).
//! * `status.txt` — `ok` on success; `partial: …` when a method failed and
//!   artifacts are incomplete.
//!
//! Derived quantities are recomputable from the raw CSVs. Columns whose
//! header names contain `seconds`, `gbps`, or `speedup` — plus the
//! timeline's `start`/`end` — carry wall-clock-derived values; every other
//! column is bit-reproducible for identical configuration and seeds (with a
//! fixed history length; the dynamic controller feeds timings back into the
//! numerics).

use std::fs::{self, File};
use std::hint::black_box;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::ebe::{MultiVector, MAX_LANES};
use crate::elasticity::Material;
use crate::ensemble::make_source_schedule;
use crate::mesh::{generate_box_mesh, Mesh, MeshError};
use crate::pipeline::{run_pipeline_with_ops, write_phase_timeline_csv, ExecutorRole, LedgerRow};
use crate::timeloop::{
    build_system_ops, run_single_lane_with_ops, BackendChoice, Impulse, LaneOutput, RunConfig,
    SystemOps, TimeloopError,
};

pub const BASELINE_LABEL: &str = "CRS-CG-singlelane";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("mesh generation failed: {0}")]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Timeloop(#[from] TimeloopError),
    #[error("report window [{lo}, {hi}] does not intersect steps 1..={nt}")]
    BadWindow { lo: usize, hi: usize, nt: usize },
}

/// One block-CSR matvec's analytic traffic (see module docs).
pub fn crs_matvec_model_bytes(n_nodes: usize, n_blocks: usize) -> u64 {
    n_blocks as u64 * (9 * 8 + 4) + (n_nodes as u64 + 1) * 8 + 2 * 3 * n_nodes as u64 * 8
}

/// One element-by-element matvec's analytic traffic over `r` fused lanes
/// (see module docs).
pub fn ebe_matvec_model_bytes(n_elements: usize, r: usize) -> u64 {
    n_elements as u64 * (2 * 900 * 8 + 10 * 4 + 2 * 30 * 8 * r as u64)
}

/// Window statistics for one executed method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub label: String,
    pub pipelined: bool,
    pub mean_iterations: f64,
    pub mean_seconds_per_step_case: f64,
    pub matvec_gbps: f64,
    /// Baseline mean seconds / this method's mean seconds (1 for the
    /// baseline itself).
    pub speedup_vs_baseline: f64,
}

/// Cross-method comparison over one shared problem and step window.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    /// Inclusive step window the statistics cover (clamped to the run).
    pub window: (usize, usize),
    pub n_cases: usize,
    pub baseline: String,
    pub methods: Vec<MethodResult>,
}

struct MethodSpec {
    label: &'static str,
    backend: BackendChoice,
    pipelined: bool,
}

fn method_set(pipeline: bool) -> Vec<MethodSpec> {
    if pipeline {
        vec![
            MethodSpec {
                label: BASELINE_LABEL,
                backend: BackendChoice::Crs,
                pipelined: false,
            },
            MethodSpec {
                label: "EBE-MCG-pipeline",
                backend: BackendChoice::EbeMulti,
                pipelined: true,
            },
            MethodSpec {
                label: "CRS-CG-pipeline",
                backend: BackendChoice::Crs,
                pipelined: true,
            },
        ]
    } else {
        vec![
            MethodSpec {
                label: BASELINE_LABEL,
                backend: BackendChoice::Crs,
                pipelined: false,
            },
            MethodSpec {
                label: "EBE-MCG-singlelane",
                backend: BackendChoice::EbeMulti,
                pipelined: false,
            },
        ]
    }
}

/// Everything one executed method leaves behind for reporting.
struct MethodRun {
    label: String,
    backend: BackendChoice,
    pipelined: bool,
    lanes: Vec<LaneOutput>,
    timeline: Option<Vec<crate::pipeline::PhaseRecord>>,
    ledger: Option<Vec<LedgerRow>>,
}

fn resolve_window(window: (usize, usize), nt: usize) -> Result<(usize, usize), ExperimentError> {
    let (lo, hi) = window;
    let hi_clamped = hi.min(nt);
    if lo == 0 || lo > hi_clamped {
        return Err(ExperimentError::BadWindow { lo, hi, nt });
    }
    Ok((lo, hi_clamped))
}

fn slug(label: &str) -> String {
    label.to_ascii_lowercase()
}

fn execute_method(
    spec: &MethodSpec,
    ops: Arc<SystemOps>,
    cfg: &RunConfig,
    cases: &[Vec<Impulse>],
    host_workers: usize,
) -> Result<MethodRun, ExperimentError> {
    let r = cfg.r;
    assert_eq!(cases.len(), 2 * r);
    if spec.pipelined {
        let host = ExecutorRole::host_pool(host_workers);
        let accel = ExecutorRole::accelerator();
        let out = run_pipeline_with_ops(ops, cfg, cases.to_vec(), &host, &accel)?;
        let [lane0, lane1] = out.lanes;
        Ok(MethodRun {
            label: spec.label.to_string(),
            backend: spec.backend,
            pipelined: true,
            lanes: vec![lane0, lane1],
            timeline: Some(out.records),
            ledger: Some(out.ledger.rows().to_vec()),
        })
    } else {
        let lane0 = run_single_lane_with_ops(ops.clone(), cfg, cases[..r].to_vec(), 0)?;
        let lane1 = run_single_lane_with_ops(ops, cfg, cases[r..].to_vec(), r)?;
        Ok(MethodRun {
            label: spec.label.to_string(),
            backend: spec.backend,
            pipelined: false,
            lanes: vec![lane0, lane1],
            timeline: None,
            ledger: None,
        })
    }
}

/// Modeled matvec bytes inside the window (see module docs for the per-lane
/// fused-count convention).
fn modeled_window_bytes(run: &MethodRun, window: (usize, usize), ops: &SystemOps, r: usize) -> f64 {
    let (lo, hi) = window;
    let per_case = match run.backend {
        BackendChoice::Crs => {
            let a = ops.crs_system.as_ref().expect("CRS method keeps matrices");
            crs_matvec_model_bytes(a.n_nodes, a.n_blocks()) as f64
        }
        BackendChoice::Ebe => ebe_matvec_model_bytes(ops.elements.n_elements(), 1) as f64,
        BackendChoice::EbeMulti => 0.0, // fused accounting below
    };
    let fused = ebe_matvec_model_bytes(ops.elements.n_elements(), r) as f64;
    let mut total = 0.0;
    for lane in &run.lanes {
        match run.backend {
            BackendChoice::Crs | BackendChoice::Ebe => {
                for rep in &lane.reports {
                    if (lo..=hi).contains(&rep.step) {
                        total += (rep.iterations as f64 + 1.0) * per_case;
                    }
                }
            }
            BackendChoice::EbeMulti => {
                let mut max_iters = vec![0usize; hi - lo + 1];
                for rep in &lane.reports {
                    if (lo..=hi).contains(&rep.step) {
                        let slot = &mut max_iters[rep.step - lo];
                        *slot = (*slot).max(rep.iterations);
                    }
                }
                for m in max_iters {
                    total += (m as f64 + 1.0) * fused;
                }
            }
        }
    }
    total
}

/// Merge per-lane trace rows into `(step, lane, s, pred, solve)` sorted by
/// `(step, lane)` — the order `trace_<method>.csv` uses.
fn merged_trace(run: &MethodRun) -> Vec<(usize, usize, usize, f64, f64)> {
    let mut rows = Vec::new();
    for (lane_id, lane) in run.lanes.iter().enumerate() {
        for t in &lane.trace {
            rows.push((t.step, lane_id, t.s, t.predictor_seconds, t.solver_seconds));
        }
    }
    rows.sort_by_key(|&(step, lane, ..)| (step, lane));
    rows
}

/// Merge per-lane step reports sorted by `(step, case)` — the order
/// `steps_<method>.csv` uses.
fn merged_reports(run: &MethodRun) -> Vec<crate::timeloop::StepReport> {
    let mut rows: Vec<_> = run
        .lanes
        .iter()
        .flat_map(|l| l.reports.iter().cloned())
        .collect();
    rows.sort_by_key(|r| (r.step, r.case));
    rows
}

fn summarize_method(
    run: &MethodRun,
    window: (usize, usize),
    n_cases: usize,
    ops: &SystemOps,
    r: usize,
) -> MethodResult {
    let (lo, hi) = window;
    let steps = (hi - lo + 1) as f64;

    let mut iter_sum = 0.0;
    let mut iter_rows = 0usize;
    for rep in merged_reports(run) {
        if (lo..=hi).contains(&rep.step) {
            iter_sum += rep.iterations as f64;
            iter_rows += 1;
        }
    }

    let mut phase_seconds = 0.0;
    let mut solver_seconds = 0.0;
    for (step, _lane, _s, pred, solve) in merged_trace(run) {
        if (lo..=hi).contains(&step) {
            phase_seconds += pred + solve;
            solver_seconds += solve;
        }
    }

    let bytes = modeled_window_bytes(run, window, ops, r);
    MethodResult {
        label: run.label.clone(),
        pipelined: run.pipelined,
        mean_iterations: iter_sum / iter_rows as f64,
        mean_seconds_per_step_case: phase_seconds / (steps * n_cases as f64),
        matvec_gbps: if solver_seconds > 0.0 {
            bytes / solver_seconds / 1e9
        } else {
            0.0
        },
        speedup_vs_baseline: 1.0, // filled in once the baseline is known
    }
}

/// Schema: `label,pipelined,window_lo,window_hi,n_cases,mean_iterations,mean_seconds_per_step_case,matvec_gbps,speedup_vs_baseline`.
pub fn write_comparison_csv<W: Write>(report: &ComparisonReport, mut out: W) -> io::Result<()> {
    writeln!(
        out,
        "label,pipelined,window_lo,window_hi,n_cases,mean_iterations,\
         mean_seconds_per_step_case,matvec_gbps,speedup_vs_baseline"
    )?;
    for m in &report.methods {
        writeln!(
            out,
            "{},{},{},{},{},{:.17e},{:.17e},{:.17e},{:.17e}",
            m.label,
            m.pipelined as u8,
            report.window.0,
            report.window.1,
            report.n_cases,
            m.mean_iterations,
            m.mean_seconds_per_step_case,
            m.matvec_gbps,
            m.speedup_vs_baseline,
        )?;
    }
    Ok(())
}

fn write_method_artifacts(dir: &Path, run: &MethodRun) -> io::Result<()> {
    let tag = slug(&run.label);

    let mut steps = BufWriter::new(File::create(dir.join(format!("steps_{tag}.csv")))?);
    writeln!(
        steps,
        "step,case,iterations,initial_relative_residual,final_relative_residual,\
         converged,s_used,corrected"
    )?;
    for rep in merged_reports(run) {
        writeln!(
            steps,
            "{},{},{},{:.17e},{:.17e},{},{},{}",
            rep.step,
            rep.case,
            rep.iterations,
            rep.initial_relative_residual,
            rep.final_relative_residual,
            rep.converged as u8,
            rep.s_used,
            rep.corrected as u8,
        )?;
    }
    steps.flush()?;

    let mut trace = BufWriter::new(File::create(dir.join(format!("trace_{tag}.csv")))?);
    writeln!(trace, "step,lane,s,predictor_seconds,solver_seconds")?;
    for (step, lane, s, pred, solve) in merged_trace(run) {
        writeln!(trace, "{step},{lane},{s},{pred:.17e},{solve:.17e}")?;
    }
    trace.flush()?;

    if let Some(records) = &run.timeline {
        let mut f = BufWriter::new(File::create(dir.join(format!("timeline_{tag}.csv")))?);
        write_phase_timeline_csv(records, &mut f)?;
        f.flush()?;
    }
    if let Some(rows) = &run.ledger {
        let mut f = BufWriter::new(File::create(dir.join(format!("ledger_{tag}.csv")))?);
        writeln!(f, "step,lane,bytes_to_accelerator,bytes_to_host,seconds")?;
        for row in rows {
            writeln!(
                f,
                "{},{},{},{},{:.17e}",
                row.step, row.lane, row.bytes_to_accelerator, row.bytes_to_host, row.seconds
            )?;
        }
        f.flush()?;
    }
    Ok(())
}

/// Execute the configured method set over identical case inputs and write
/// all comparison artifacts into `cfg.output_dir`.
///
/// On failure, whatever artifacts completed stay on disk and `status.txt`
/// flags the run as partial.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ComparisonReport, ExperimentError> {
    fs::create_dir_all(&cfg.output_dir)?;
    match run_experiment_inner(cfg) {
        Ok(report) => {
            fs::write(cfg.output_dir.join("status.txt"), "ok\n")?;
            Ok(report)
        }
        Err(err) => {
            let _ = fs::write(
                cfg.output_dir.join("status.txt"),
                format!("partial: {err}\n"),
            );
            Err(err)
        }
    }
}

fn run_experiment_inner(cfg: &ExperimentConfig) -> Result<ComparisonReport, ExperimentError> {
    let mesh = generate_box_mesh(&cfg.mesh)?;
    let window = resolve_window(cfg.report_window, cfg.run.nt)?;
    let n_cases = 2 * cfg.run.r;
    let schedule = make_source_schedule(&mesh, n_cases, cfg.run.seed);

    let mut base_cfg = cfg.run.clone();
    base_cfg.capture = None;
    base_cfg.record_solutions = false;

    let mut ops_cache: Vec<(BackendChoice, Arc<SystemOps>)> = Vec::new();
    let mut methods = Vec::new();
    for spec in method_set(cfg.pipeline) {
        let mut mcfg = base_cfg.clone();
        mcfg.backend = spec.backend;
        let ops = match ops_cache.iter().find(|(b, _)| *b == spec.backend) {
            Some((_, ops)) => ops.clone(),
            None => {
                let ops = Arc::new(build_system_ops(&mesh, &cfg.materials, &mcfg)?);
                ops_cache.push((spec.backend, ops.clone()));
                ops
            }
        };
        let run = execute_method(&spec, ops.clone(), &mcfg, &schedule.cases, cfg.host_workers)?;
        write_method_artifacts(&cfg.output_dir, &run)?;
        methods.push(summarize_method(&run, window, n_cases, &ops, mcfg.r));
    }

    let baseline_seconds = methods[0].mean_seconds_per_step_case;
    for m in &mut methods {
        m.speedup_vs_baseline = baseline_seconds / m.mean_seconds_per_step_case;
    }

    let report = ComparisonReport {
        window,
        n_cases,
        baseline: BASELINE_LABEL.to_string(),
        methods,
    };
    let mut f = BufWriter::new(File::create(cfg.output_dir.join("comparison.csv"))?);
    write_comparison_csv(&report, &mut f)?;
    f.flush()?;
    Ok(report)
}

// --- Kernel benchmarks -------------------------------------------------------

/// One benchmarked kernel configuration.
#[derive(Debug, Clone)]
pub struct KernelBenchRow {
    /// `crs`, `ebe`, or `ebe-multi`.
    pub backend: &'static str,
    /// Fused lane count (1 for the single-vector kernels).
    pub r: usize,
    /// Median over the repeat sets of median seconds per matvec.
    pub seconds_per_matvec: f64,
    /// Analytic bytes moved by one matvec.
    pub model_bytes: u64,
    /// `model_bytes / seconds_per_matvec`, in GB/s.
    pub effective_gbps: f64,
    /// Median seconds per matvec of each interleaved repeat set.
    pub repeat_seconds: Vec<f64>,
    /// `(max − min) / median` over the repeats.
    pub spread: f64,
}

/// Benchmark shape: lane sweep, timed samples per repeat set, repeat sets.
#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub r_sweep: Vec<usize>,
    pub inner: usize,
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            r_sweep: vec![1, 2, 4, 8],
            inner: 50,
            repeats: 3,
        }
    }
}

/// Deterministic non-trivial fill, decorrelated across lanes.
fn bench_input(lane: usize) -> impl Fn(usize) -> f64 {
    move |i: usize| 0.5 + ((i * 31 + lane * 17 + 7) % 101) as f64 / 202.0
}

/// Time `inner · repeats` applications, assigning samples to the `repeats`
/// sets round-robin and reporting each set's median. Interleaving spreads
/// machine-load drift evenly across the sets and the medians shrug off
/// individual descheduled samples, so the sets agree even on a busy host.
fn time_kernel(mut apply: impl FnMut(), inner: usize, repeats: usize) -> Vec<f64> {
    // Warm-up applications are not timed.
    apply();
    apply();
    let mut samples = vec![Vec::with_capacity(inner); repeats];
    for k in 0..inner * repeats {
        let t0 = Instant::now();
        apply();
        samples[k % repeats].push(t0.elapsed().as_secs_f64());
    }
    samples.iter().map(|s| median(s)).collect()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn finish_row(
    backend: &'static str,
    r: usize,
    repeat_seconds: Vec<f64>,
    model_bytes: u64,
) -> KernelBenchRow {
    let med = median(&repeat_seconds);
    let max = repeat_seconds.iter().cloned().fold(f64::MIN, f64::max);
    let min = repeat_seconds.iter().cloned().fold(f64::MAX, f64::min);
    KernelBenchRow {
        backend,
        r,
        seconds_per_matvec: med,
        model_bytes,
        effective_gbps: model_bytes as f64 / med / 1e9,
        spread: (max - min) / med,
        repeat_seconds,
    }
}

/// Time one system matvec per backend — assembled block-CSR, single-vector
/// element-by-element, and the fused multi-lane kernel across `r_sweep` —
/// on deterministic inputs, reporting medians over `settings.repeats`.
pub fn bench_kernels(
    mesh: &Mesh,
    materials: &[Material],
    run: &RunConfig,
    settings: &BenchSettings,
) -> Result<Vec<KernelBenchRow>, ExperimentError> {
    for &r in &settings.r_sweep {
        assert!(
            (1..=MAX_LANES).contains(&r),
            "lane sweep entry {r} outside 1..={MAX_LANES}"
        );
    }
    assert!(settings.inner > 0 && settings.repeats > 0);
    let n_dofs = mesh.n_dofs();
    let mut rows = Vec::new();

    // Assembled baseline.
    let mut cfg = run.clone();
    cfg.backend = BackendChoice::Crs;
    let ops = build_system_ops(mesh, materials, &cfg)?;
    let a = ops.crs_system.as_ref().expect("CRS build keeps matrices");
    let fill = bench_input(0);
    let x: Vec<f64> = (0..n_dofs).map(&fill).collect();
    let mut y = vec![0.0; n_dofs];
    let times = time_kernel(
        || {
            a.matvec_into(&x, &mut y);
            black_box(&y);
        },
        settings.inner,
        settings.repeats,
    );
    rows.push(finish_row(
        "crs",
        1,
        times,
        crs_matvec_model_bytes(a.n_nodes, a.n_blocks()),
    ));

    // Matrix-free kernels share one operator bundle.
    cfg.backend = BackendChoice::EbeMulti;
    let ops = build_system_ops(mesh, materials, &cfg)?;
    let n_elements = ops.elements.n_elements();
    let mut y = vec![0.0; n_dofs];
    let times = time_kernel(
        || {
            ops.ebe.matvec_into(run.dt, &x, &mut y);
            black_box(&y);
        },
        settings.inner,
        settings.repeats,
    );
    rows.push(finish_row("ebe", 1, times, ebe_matvec_model_bytes(n_elements, 1)));

    for &r in &settings.r_sweep {
        let mut xm = MultiVector::zeros(n_dofs, r);
        for lane in 0..r {
            let fill = bench_input(lane);
            for d in 0..n_dofs {
                xm.data[d * r + lane] = fill(d);
            }
        }
        let mut ym = MultiVector::zeros(n_dofs, r);
        let times = time_kernel(
            || {
                ops.ebe.matvec_multi_into(run.dt, &xm, &mut ym);
                black_box(&ym.data);
            },
            settings.inner,
            settings.repeats,
        );
        rows.push(finish_row(
            "ebe-multi",
            r,
            times,
            ebe_matvec_model_bytes(n_elements, r),
        ));
    }
    Ok(rows)
}

/// Schema: `backend,r,seconds_per_matvec,model_bytes,effective_gbps,spread`.
pub fn write_kernel_bench_csv<W: Write>(rows: &[KernelBenchRow], mut out: W) -> io::Result<()> {
    writeln!(
        out,
        "backend,r,seconds_per_matvec,model_bytes,effective_gbps,spread"
    )?;
    for row in rows {
        writeln!(
            out,
            "{},{},{:.17e},{},{:.17e},{:.17e}",
            row.backend, row.r, row.seconds_per_matvec, row.model_bytes, row.effective_gbps, row.spread
        )?;
    }
    Ok(())
}

/// Schema: `backend,r,repeat,seconds_per_matvec` — the raw repeats behind
/// [`write_kernel_bench_csv`]'s medians.
pub fn write_kernel_bench_raw_csv<W: Write>(
    rows: &[KernelBenchRow],
    mut out: W,
) -> io::Result<()> {
    writeln!(out, "backend,r,repeat,seconds_per_matvec")?;
    for row in rows {
        for (k, s) in row.repeat_seconds.iter().enumerate() {
            writeln!(out, "{},{},{},{:.17e}", row.backend, row.r, k, s)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EnsembleSettings;
    use crate::mesh::{BoxMeshSpec, LayerInterface};
    use crate::timeloop::{HistoryLengthMode, PredictorChoice};
    use std::path::PathBuf;

    fn desk_spec() -> BoxMeshSpec {
        BoxMeshSpec {
            extent: [2.0, 2.0, 1.0],
            div: [3, 3, 2],
            layer_interface: LayerInterface::Constant(0.5),
        }
    }

    fn desk_materials() -> Vec<Material> {
        vec![
            Material {
                density: 2000.0,
                young_modulus: 2.0e8,
                poisson: 0.30,
                rayleigh_alpha: 0.2,
                rayleigh_beta: 0.001,
            },
            Material {
                density: 1600.0,
                young_modulus: 5.0e7,
                poisson: 0.35,
                rayleigh_alpha: 0.2,
                rayleigh_beta: 0.002,
            },
        ]
    }

    fn temp_out(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("wavelane-exp-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    fn experiment_config(tag: &str, nt: usize, window: (usize, usize)) -> ExperimentConfig {
        ExperimentConfig {
            mesh: desk_spec(),
            materials: desk_materials(),
            run: RunConfig {
                dt: 0.002,
                nt,
                epsilon: 1e-8,
                max_iter: 2000,
                backend: BackendChoice::EbeMulti,
                predictor: PredictorChoice::DataDriven,
                r: 2,
                s_mode: HistoryLengthMode::Fixed(6),
                region_target_nodes: 64,
                drop_tol: 1e-12,
                seed: 5,
                capture: None,
                record_solutions: false,
            },
            pipeline: true,
            host_workers: 1,
            ensemble: EnsembleSettings::default(),
            report_window: window,
            output_dir: temp_out(tag),
        }
    }

    fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
        let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{path:?}: {e}"));
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .expect("csv has a header")
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect();
        (header, rows)
    }

    fn col(header: &[String], name: &str) -> usize {
        header
            .iter()
            .position(|h| h == name)
            .unwrap_or_else(|| panic!("column {name} in {header:?}"))
    }

    #[test]
    fn experiment_report_is_recomputable_from_raw_csvs() {
        let cfg = experiment_config("recompute", 24, (8, 24));
        let report = run_experiment(&cfg).unwrap();

        assert_eq!(report.window, (8, 24));
        assert_eq!(report.n_cases, 4);
        let labels: Vec<&str> = report.methods.iter().map(|m| m.label.as_str()).collect();
        assert_eq!(
            labels,
            ["CRS-CG-singlelane", "EBE-MCG-pipeline", "CRS-CG-pipeline"]
        );
        assert_eq!(report.methods[0].speedup_vs_baseline, 1.0);
        assert_eq!(
            fs::read_to_string(cfg.output_dir.join("status.txt")).unwrap(),
            "ok\n"
        );

        // The pipelined methods leave timeline and ledger artifacts behind.
        for tag in ["ebe-mcg-pipeline", "crs-cg-pipeline"] {
            assert!(cfg.output_dir.join(format!("timeline_{tag}.csv")).exists());
            assert!(cfg.output_dir.join(format!("ledger_{tag}.csv")).exists());
        }

        // Recompute every reported number from the raw CSVs alone.
        let (lo, hi) = report.window;
        let mut mean_seconds = Vec::new();
        for m in &report.methods {
            let tag = slug(&m.label);
            let (sh, srows) = read_csv(&cfg.output_dir.join(format!("steps_{tag}.csv")));
            let (step_c, iter_c) = (col(&sh, "step"), col(&sh, "iterations"));
            let case_c = col(&sh, "case");
            let mut iter_sum = 0.0;
            let mut iter_n = 0usize;
            let mut fused_max: Vec<usize> = vec![0; hi - lo + 1];
            let mut per_case_iplus1 = 0.0;
            for row in &srows {
                let step: usize = row[step_c].parse().unwrap();
                let _case: usize = row[case_c].parse().unwrap();
                if (lo..=hi).contains(&step) {
                    let it: usize = row[iter_c].parse().unwrap();
                    iter_sum += it as f64;
                    iter_n += 1;
                    per_case_iplus1 += it as f64 + 1.0;
                    let slot = &mut fused_max[step - lo];
                    *slot = (*slot).max(it);
                }
            }
            let mean_iterations = iter_sum / iter_n as f64;
            let rel = (mean_iterations - m.mean_iterations).abs() / m.mean_iterations;
            assert!(rel <= 1e-12, "{}: iteration mean off by {rel:e}", m.label);

            let (th, trows) = read_csv(&cfg.output_dir.join(format!("trace_{tag}.csv")));
            let (tstep, tpred, tsolve) = (
                col(&th, "step"),
                col(&th, "predictor_seconds"),
                col(&th, "solver_seconds"),
            );
            let mut phase = 0.0;
            let mut solver = 0.0;
            for row in &trows {
                let step: usize = row[tstep].parse().unwrap();
                if (lo..=hi).contains(&step) {
                    phase += row[tpred].parse::<f64>().unwrap() + row[tsolve].parse::<f64>().unwrap();
                    solver += row[tsolve].parse::<f64>().unwrap();
                }
            }
            let mean_sec = phase / ((hi - lo + 1) as f64 * report.n_cases as f64);
            let rel = (mean_sec - m.mean_seconds_per_step_case).abs() / m.mean_seconds_per_step_case;
            assert!(rel <= 1e-9, "{}: mean seconds off by {rel:e}", m.label);
            mean_seconds.push(mean_sec);

            // Throughput: bytes model over the same window / solver seconds.
            // The fused backend performs max-over-lane iterations + 1 fused
            // matvecs per (lane, step); lanes hold cases [0,r) and [r,2r).
            let bytes = if m.label.starts_with("EBE-MCG") {
                // Recompute fused counts per lane from the raw rows.
                let mut per_lane_max = vec![vec![0usize; hi - lo + 1]; 2];
                for row in &srows {
                    let step: usize = row[step_c].parse().unwrap();
                    let case: usize = row[case_c].parse().unwrap();
                    if (lo..=hi).contains(&step) {
                        let it: usize = row[iter_c].parse().unwrap();
                        let lane = case / cfg.run.r;
                        let slot = &mut per_lane_max[lane][step - lo];
                        *slot = (*slot).max(it);
                    }
                }
                let fused = ebe_matvec_model_bytes(108, cfg.run.r) as f64;
                per_lane_max
                    .iter()
                    .flatten()
                    .map(|&m| (m as f64 + 1.0) * fused)
                    .sum::<f64>()
            } else {
                // Independent model arithmetic: rebuild the assembled matrix
                // to read its block count, then apply the documented formula.
                let mesh = generate_box_mesh(&cfg.mesh).unwrap();
                let mut crs_cfg = cfg.run.clone();
                crs_cfg.backend = BackendChoice::Crs;
                let ops = build_system_ops(&mesh, &cfg.materials, &crs_cfg).unwrap();
                let a = ops.crs_system.as_ref().unwrap();
                let per = (a.n_blocks() as u64 * 76
                    + (mesh.n_nodes() as u64 + 1) * 8
                    + 48 * mesh.n_nodes() as u64) as f64;
                per_case_iplus1 * per
            };
            let gbps = bytes / solver / 1e9;
            let rel = (gbps - m.matvec_gbps).abs() / m.matvec_gbps;
            assert!(rel <= 1e-9, "{}: throughput off by {rel:e}", m.label);
        }

        // Speedups are exactly the recomputed time ratios.
        let (ch, crows) = read_csv(&cfg.output_dir.join("comparison.csv"));
        let speed_c = col(&ch, "speedup_vs_baseline");
        for (k, row) in crows.iter().enumerate() {
            let reported: f64 = row[speed_c].parse().unwrap();
            let recomputed = mean_seconds[0] / mean_seconds[k];
            assert!(
                (reported - recomputed).abs() / recomputed <= 1e-9,
                "row {k}: {reported} vs {recomputed}"
            );
        }

        let _ = fs::remove_dir_all(&cfg.output_dir);
    }

    /// Extrapolation only pays off when the sampled dynamics are smooth:
    /// soft layers keep the dominant modes well resolved at the step size,
    /// and the window starts after stiffness-proportional damping has
    /// swallowed the impulse's unresolved high-mode content.
    fn predictor_study_config(tag: &str) -> ExperimentConfig {
        let mut cfg = experiment_config(tag, 30, (10, 30));
        cfg.pipeline = false;
        cfg.run.r = 1;
        cfg.run.dt = 0.005;
        cfg.materials[0].young_modulus = 2.0e7;
        cfg.materials[0].rayleigh_beta = 0.003;
        cfg.materials[1].young_modulus = 8.0e6;
        cfg.materials[1].rayleigh_beta = 0.004;
        cfg
    }

    #[test]
    fn ab4_needs_strictly_fewer_mean_iterations_than_hold() {
        let mut hold_cfg = predictor_study_config("hold");
        hold_cfg.run.predictor = PredictorChoice::Hold;
        let hold = run_experiment(&hold_cfg).unwrap();

        let mut ab4_cfg = predictor_study_config("ab4");
        ab4_cfg.run.predictor = PredictorChoice::Ab4;
        let ab4 = run_experiment(&ab4_cfg).unwrap();

        for (h, a) in hold.methods.iter().zip(&ab4.methods) {
            assert_eq!(h.label, a.label);
            assert!(
                a.mean_iterations < h.mean_iterations,
                "{}: ab4 {} !< hold {}",
                h.label,
                a.mean_iterations,
                h.mean_iterations
            );
        }

        let _ = fs::remove_dir_all(&hold_cfg.output_dir);
        let _ = fs::remove_dir_all(&ab4_cfg.output_dir);
    }

    #[test]
    fn assembled_and_matrix_free_solves_report_identical_iterations() {
        let mesh = generate_box_mesh(&desk_spec()).unwrap();
        let materials = desk_materials();
        let base = experiment_config("iters", 12, (1, 12)).run;
        let schedule = make_source_schedule(&mesh, 1, 9);

        let mut iters = Vec::new();
        for backend in [BackendChoice::Crs, BackendChoice::Ebe, BackendChoice::EbeMulti] {
            let mut cfg = base.clone();
            cfg.backend = backend;
            cfg.r = 1;
            let ops = Arc::new(build_system_ops(&mesh, &materials, &cfg).unwrap());
            let out = run_single_lane_with_ops(ops, &cfg, schedule.cases.clone(), 0).unwrap();
            iters.push(
                out.reports
                    .iter()
                    .map(|r| r.iterations)
                    .collect::<Vec<_>>(),
            );
        }
        assert_eq!(iters[0], iters[1], "crs vs ebe");
        assert_eq!(iters[0], iters[2], "crs vs ebe-multi");
    }

    #[test]
    fn failed_method_flags_partial_artifacts() {
        let mut cfg = experiment_config("partial", 12, (1, 12));
        cfg.run.max_iter = 1;
        cfg.run.epsilon = 1e-14;
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, ExperimentError::Timeloop(_)), "{err}");

        let status = fs::read_to_string(cfg.output_dir.join("status.txt")).unwrap();
        assert!(status.starts_with("partial:"), "{status}");
        assert!(!cfg.output_dir.join("comparison.csv").exists());

        let _ = fs::remove_dir_all(&cfg.output_dir);
    }

    #[test]
    fn report_window_is_clamped_and_validated() {
        let mut cfg = experiment_config("clamp", 10, (4, 50));
        cfg.pipeline = false;
        cfg.run.r = 1;
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.window, (4, 10));
        let _ = fs::remove_dir_all(&cfg.output_dir);

        let mut cfg = experiment_config("badwindow", 10, (100, 200));
        cfg.pipeline = false;
        cfg.run.r = 1;
        match run_experiment(&cfg).unwrap_err() {
            ExperimentError::BadWindow { lo, hi, nt } => {
                assert_eq!((lo, hi, nt), (100, 200, 10));
            }
            other => panic!("unexpected: {other}"),
        }
        let _ = fs::remove_dir_all(&cfg.output_dir);
    }

    #[test]
    fn kernel_bench_rows_carry_exact_byte_models() {
        let mesh = generate_box_mesh(&desk_spec()).unwrap();
        let materials = desk_materials();
        let run = experiment_config("benchmodel", 4, (1, 4)).run;
        let settings = BenchSettings {
            r_sweep: vec![1, 2, 4],
            inner: 1,
            repeats: 1,
        };
        let rows = bench_kernels(&mesh, &materials, &run, &settings).unwrap();
        let kinds: Vec<(&str, usize)> = rows.iter().map(|r| (r.backend, r.r)).collect();
        assert_eq!(
            kinds,
            [("crs", 1), ("ebe", 1), ("ebe-multi", 1), ("ebe-multi", 2), ("ebe-multi", 4)]
        );

        // Independent arithmetic for the models: 3·3·2·6 = 108 elements, and
        // the block count from the assembled matrix itself.
        let mut cfg = run.clone();
        cfg.backend = BackendChoice::Crs;
        let ops = build_system_ops(&mesh, &materials, &cfg).unwrap();
        let a = ops.crs_system.as_ref().unwrap();
        let n = mesh.n_nodes();
        assert_eq!(
            rows[0].model_bytes,
            a.n_blocks() as u64 * 76 + (n as u64 + 1) * 8 + 48 * n as u64
        );
        for row in &rows[1..] {
            assert_eq!(
                row.model_bytes,
                108 * (14400 + 40 + 480 * row.r as u64),
                "{} r={}",
                row.backend,
                row.r
            );
        }

        // CSV writers reproduce every row.
        let mut summary = Vec::new();
        write_kernel_bench_csv(&rows, &mut summary).unwrap();
        let text = String::from_utf8(summary).unwrap();
        assert!(text.starts_with("backend,r,seconds_per_matvec,model_bytes,effective_gbps,spread\n"));
        assert_eq!(text.lines().count(), 1 + rows.len());
        let mut raw = Vec::new();
        write_kernel_bench_raw_csv(&rows, &mut raw).unwrap();
        let text = String::from_utf8(raw).unwrap();
        assert_eq!(text.lines().count(), 1 + rows.len() * settings.repeats);
    }

    #[test]
    fn kernel_bench_is_stable_and_fused_r1_matches_single() {
        // A mesh big enough that each repeat is dominated by kernel work.
        let mesh = generate_box_mesh(&BoxMeshSpec {
            extent: [2.0, 2.0, 1.5],
            div: [4, 4, 3],
            layer_interface: LayerInterface::Constant(0.75),
        })
        .unwrap();
        let materials = desk_materials();
        let run = experiment_config("benchtime", 4, (1, 4)).run;
        let settings = BenchSettings {
            r_sweep: vec![1, 2, 4],
            inner: 150,
            repeats: 3,
        };
        let rows = bench_kernels(&mesh, &materials, &run, &settings).unwrap();

        for row in &rows {
            assert!(
                row.spread <= 0.15,
                "{} r={} spread {:.3}: {:?}",
                row.backend,
                row.r,
                row.spread,
                row.repeat_seconds
            );
            assert!(row.effective_gbps > 0.0);
        }

        let single = rows
            .iter()
            .find(|r| r.backend == "ebe")
            .unwrap()
            .seconds_per_matvec;
        let fused1 = rows
            .iter()
            .find(|r| r.backend == "ebe-multi" && r.r == 1)
            .unwrap()
            .seconds_per_matvec;
        let rel = (fused1 - single).abs() / single;
        assert!(
            rel <= 0.20,
            "fused r=1 {fused1:.3e}s vs single {single:.3e}s ({rel:.2}x apart)"
        );
    }
}
