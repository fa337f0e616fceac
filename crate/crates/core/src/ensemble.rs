//! Random-impulse ensemble driver with spectral post-processing.
//!
//! Many independent cases — each a single impulse of random surface location,
//! direction, and amplitude — are dispatched through the dual-lane pipeline
//! in batches. Surface waveforms are captured per case, and each surface
//! point's dominant frequency is extracted by frequency domain decomposition:
//! a Welch-averaged cross-power-spectral-density matrix over the point and
//! its nearest surface neighbors, a symmetric eigendecomposition per
//! frequency line, and the peak of the first singular value across lines.
//!
//! Spectral-estimation defaults are conventional: periodic Hann window, 50%
//! segment overlap, power-of-two segment length of at least 256 samples.

use std::io::{self, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::elasticity::Material;
use crate::mesh::Mesh;
use crate::pipeline::{run_pipeline_with_ops, ExecutorRole};
use crate::timeloop::{
    build_system_ops, CaptureSpec, CaseWaveforms, Impulse, RunConfig, StepReport, TimeloopError,
};

/// Conventional Welch defaults (the segment length must stay a power of two
/// no shorter than this).
pub const MIN_SEGMENT: usize = 256;
pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_NEIGHBORS: usize = 4;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("spectral estimation needs at least one channel")]
    NoChannels,
    #[error("channel {channel} has {got} samples, expected {expected}")]
    ChannelLengthMismatch {
        channel: usize,
        got: usize,
        expected: usize,
    },
    #[error("segment length {segment} must be a power of two of at least {MIN_SEGMENT}")]
    BadSegment { segment: usize },
    #[error("overlap fraction {overlap} must lie in [0, 1)")]
    BadOverlap { overlap: f64 },
    #[error("{steps} samples are too few for segment length {segment}; need at least {}", 2 * segment)]
    TooFewSteps { steps: usize, segment: usize },
    #[error("ensemble of {n_cases} cases needs at least one case")]
    NoCases { n_cases: usize },
    #[error(transparent)]
    Timeloop(#[from] TimeloopError),
}

/// Per-case impulse schedules drawn from a seeded generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSchedule {
    pub seed: u64,
    /// One schedule per case; each drives a single surface node.
    pub cases: Vec<Vec<Impulse>>,
}

/// Spectral summary of one channel group.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResult {
    /// Peak of the first singular value across frequency lines, in Hz.
    /// Lies in (0, Nyquist]; 0.0 only when `no_peak` is set.
    pub dominant_frequency: f64,
    /// Frequency of each line in Hz, DC through Nyquist.
    pub frequencies: Vec<f64>,
    /// First singular value of the cross-PSD matrix per line.
    pub spectrum: Vec<f64>,
    /// Peak prominence: peak value over the median of all non-DC lines.
    pub confidence: f64,
    /// Set when the input carried no signal at all.
    pub no_peak: bool,
}

/// Draw `n_sources` single-impulse cases on the free surface. Deterministic
/// in `seed`; directions are unit vectors drawn uniformly on the sphere.
pub fn make_source_schedule(mesh: &Mesh, n_sources: usize, seed: u64) -> SourceSchedule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = (0..n_sources)
        .map(|_| {
            let node = mesh.surface_nodes[rng.gen_range(0..mesh.surface_nodes.len())];
            // Rejection-sample a direction uniformly on the unit sphere.
            let direction = loop {
                let v: [f64; 3] = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                if n2 > 1e-4 && n2 <= 1.0 {
                    let n = n2.sqrt();
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            };
            let amplitude = rng.gen_range(0.5e4..1.5e4);
            vec![Impulse {
                node,
                step: 1,
                direction,
                amplitude,
            }]
        })
        .collect();
    SourceSchedule { seed, cases }
}

fn validate_spectral_inputs(
    channels: &[Vec<f64>],
    segment: usize,
    overlap: f64,
) -> Result<usize, EnsembleError> {
    if channels.is_empty() {
        return Err(EnsembleError::NoChannels);
    }
    let steps = channels[0].len();
    for (channel, c) in channels.iter().enumerate() {
        if c.len() != steps {
            return Err(EnsembleError::ChannelLengthMismatch {
                channel,
                got: c.len(),
                expected: steps,
            });
        }
    }
    if segment < MIN_SEGMENT || !segment.is_power_of_two() {
        return Err(EnsembleError::BadSegment { segment });
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(EnsembleError::BadOverlap { overlap });
    }
    if steps < 2 * segment {
        return Err(EnsembleError::TooFewSteps { steps, segment });
    }
    Ok(steps)
}

/// Frequency domain decomposition of one channel group.
///
/// Welch estimation with a periodic Hann window and mean removal per
/// segment; the one-sided cross-PSD matrix is scaled so that the sum of a
/// channel's auto-PSD over lines times the bin width recovers its variance.
/// The first singular value per line comes from the symmetric
/// eigendecomposition of the 2k×2k real embedding `[[Re −Im],[Im Re]]` of
/// the Hermitian cross-PSD matrix. The dominant frequency is the argmax over
/// non-DC lines, ties broken toward the lower frequency.
pub fn fdd_dominant_frequency(
    channels: &[Vec<f64>],
    dt: f64,
    segment: usize,
    overlap: f64,
) -> Result<SpectralResult, EnsembleError> {
    let steps = validate_spectral_inputs(channels, segment, overlap)?;
    let k = channels.len();
    let fs = 1.0 / dt;
    let hop = ((segment as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let n_segs = 1 + (steps - segment) / hop;
    let n_lines = segment / 2 + 1;

    // Periodic Hann window and its power (for PSD normalization).
    let window: Vec<f64> = (0..segment)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / segment as f64).cos()))
        .collect();
    let win_power: f64 = window.iter().map(|w| w * w).sum();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(segment);

    // Per-segment spectra of every channel: spectra[channel][segment][line].
    let mut spectra: Vec<Vec<Vec<Complex<f64>>>> = Vec::with_capacity(k);
    for c in channels {
        let mut per_channel = Vec::with_capacity(n_segs);
        for s in 0..n_segs {
            let start = s * hop;
            let slice = &c[start..start + segment];
            let mean = slice.iter().sum::<f64>() / segment as f64;
            let mut buf: Vec<Complex<f64>> = slice
                .iter()
                .zip(&window)
                .map(|(&x, &w)| Complex::new((x - mean) * w, 0.0))
                .collect();
            fft.process(&mut buf);
            buf.truncate(n_lines);
            per_channel.push(buf);
        }
        spectra.push(per_channel);
    }

    // First singular value of the cross-PSD matrix per line.
    let spectrum: Vec<f64> = (0..n_lines)
        .map(|line| {
            // One-sided scaling; DC and Nyquist lines are not doubled.
            let one_sided = if line == 0 || line == n_lines - 1 {
                1.0
            } else {
                2.0
            };
            let scale = one_sided / (fs * win_power * n_segs as f64);
            // Hermitian cross-PSD matrix G[i][j] = scale · Σ_s X_i conj(X_j).
            let mut g = vec![Complex::new(0.0, 0.0); k * k];
            for i in 0..k {
                for j in 0..k {
                    let mut acc = Complex::new(0.0, 0.0);
                    for s in 0..n_segs {
                        acc += spectra[i][s][line] * spectra[j][s][line].conj();
                    }
                    g[i * k + j] = acc * scale;
                }
            }
            if k == 1 {
                return g[0].re;
            }
            // Real symmetric embedding [[Re −Im],[Im Re]]; its eigenvalues
            // are those of G, each doubled, so the maximum is σ₁ directly.
            let m = DMatrix::from_fn(2 * k, 2 * k, |r, c| {
                let (ri, ci) = (r % k, c % k);
                match (r < k, c < k) {
                    (true, true) | (false, false) => g[ri * k + ci].re,
                    (true, false) => -g[ri * k + ci].im,
                    (false, true) => g[ri * k + ci].im,
                }
            });
            m.symmetric_eigen()
                .eigenvalues
                .iter()
                .fold(0.0_f64, |a, &b| a.max(b))
        })
        .collect();

    let frequencies: Vec<f64> = (0..n_lines).map(|l| l as f64 * fs / segment as f64).collect();

    // Peak over non-DC lines; strict comparison keeps ties at the lower line.
    let mut peak_line = 1;
    for line in 2..n_lines {
        if spectrum[line] > spectrum[peak_line] {
            peak_line = line;
        }
    }
    if spectrum[peak_line] <= 0.0 {
        return Ok(SpectralResult {
            dominant_frequency: 0.0,
            frequencies,
            spectrum,
            confidence: 0.0,
            no_peak: true,
        });
    }
    let mut sorted: Vec<f64> = spectrum[1..].to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[sorted.len() / 2];
    let confidence = if median > 0.0 {
        spectrum[peak_line] / median
    } else {
        f64::INFINITY
    };
    Ok(SpectralResult {
        dominant_frequency: frequencies[peak_line],
        frequencies,
        spectrum,
        confidence,
        no_peak: false,
    })
}

/// Ensemble run parameters on top of the per-case [`RunConfig`].
#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub run: RunConfig,
    /// Number of random-impulse cases.
    pub n_cases: usize,
    /// Seed for the source schedule.
    pub seed: u64,
    /// Welch segment length (power of two ≥ 256).
    pub segment: usize,
    /// Welch overlap fraction in [0, 1).
    pub overlap: f64,
    /// Surface neighbors grouped with each point for the cross-PSD matrix.
    pub k_neighbors: usize,
}

/// One surface point's averaged spectral summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePointFrequency {
    pub node: u32,
    pub x: f64,
    pub y: f64,
    /// Dominant frequency averaged over cases with a detected peak.
    pub frequency: f64,
    pub confidence: f64,
    /// Number of cases whose spectrum carried a peak at this point.
    pub cases_with_peak: usize,
}

/// Everything an ensemble run hands back.
#[derive(Debug)]
pub struct EnsembleOutput {
    pub points: Vec<SurfacePointFrequency>,
    /// Per-case waveform captures at every surface node.
    pub waveforms: Vec<CaseWaveforms>,
    /// Solver reports of every real case, renumbered by global case id.
    pub reports: Vec<StepReport>,
    pub mean_iterations: f64,
}

/// Run `cfg.n_cases` random-impulse cases through the dual-lane pipeline in
/// batches of up to `2·cfg.run.r`, capture every surface node, and reduce
/// each surface point's waveform group to a dominant frequency averaged
/// across cases.
pub fn run_ensemble(
    mesh: &Mesh,
    materials: &[Material],
    cfg: &EnsembleConfig,
) -> Result<EnsembleOutput, EnsembleError> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    run_ensemble_with_workers(mesh, materials, cfg, workers)
}

/// [`run_ensemble`] with an explicit host-pool worker count.
pub fn run_ensemble_with_workers(
    mesh: &Mesh,
    materials: &[Material],
    cfg: &EnsembleConfig,
    host_workers: usize,
) -> Result<EnsembleOutput, EnsembleError> {
    if cfg.n_cases == 0 {
        return Err(EnsembleError::NoCases { n_cases: 0 });
    }
    // Fail fast on spectral parameters before paying for the runs.
    let probe = vec![vec![0.0; cfg.run.nt]];
    validate_spectral_inputs(&probe, cfg.segment, cfg.overlap)?;

    let schedule = make_source_schedule(mesh, cfg.n_cases, cfg.seed);
    let mut run_cfg = cfg.run.clone();
    run_cfg.capture = Some(CaptureSpec {
        nodes: mesh.surface_nodes.clone(),
        component: 2,
    });
    run_cfg.record_solutions = false;

    let ops = std::sync::Arc::new(build_system_ops(mesh, materials, &run_cfg)?);
    let host = ExecutorRole::host_pool(host_workers);
    let accel = ExecutorRole::accelerator();

    let mut waveforms: Vec<CaseWaveforms> = Vec::with_capacity(cfg.n_cases);
    let mut reports: Vec<StepReport> = Vec::new();
    let mut next_case = 0;
    while next_case < cfg.n_cases {
        let remaining = cfg.n_cases - next_case;
        // Lane size of this batch; the final batch may shrink, and an odd
        // tail pads lane 1 with an at-rest dummy case that is dropped below.
        let r_b = remaining.div_ceil(2).min(run_cfg.r);
        let real = remaining.min(2 * r_b);
        let mut batch: Vec<Vec<Impulse>> = Vec::with_capacity(2 * r_b);
        for i in 0..2 * r_b {
            if i < real {
                batch.push(schedule.cases[next_case + i].clone());
            } else {
                batch.push(Vec::new());
            }
        }
        let mut batch_cfg = run_cfg.clone();
        batch_cfg.r = r_b;
        let out = run_pipeline_with_ops(ops.clone(), &batch_cfg, batch, &host, &accel)?;
        let [lane0, lane1] = out.lanes;
        for (batch_idx, mut wf) in lane0
            .waveforms
            .into_iter()
            .chain(lane1.waveforms)
            .enumerate()
        {
            if batch_idx < real {
                wf.case = next_case + batch_idx;
                waveforms.push(wf);
            }
        }
        for mut rep in lane0.reports.into_iter().chain(lane1.reports) {
            if rep.case < real {
                rep.case += next_case;
                reports.push(rep);
            }
        }
        next_case += real;
    }
    reports.sort_by_key(|r| (r.case, r.step));
    let mean_iterations =
        reports.iter().map(|r| r.iterations as f64).sum::<f64>() / reports.len().max(1) as f64;

    // Each surface point is grouped with its nearest surface neighbors.
    let surface = &mesh.surface_nodes;
    let coords = &mesh.node_coords;
    let groups: Vec<Vec<usize>> = (0..surface.len())
        .map(|p| {
            let pc = coords[surface[p] as usize];
            let mut by_distance: Vec<(f64, usize)> = (0..surface.len())
                .filter(|&q| q != p)
                .map(|q| {
                    let qc = coords[surface[q] as usize];
                    let d2 = (pc[0] - qc[0]).powi(2) + (pc[1] - qc[1]).powi(2);
                    (d2, q)
                })
                .collect();
            by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut group = vec![p];
            group.extend(by_distance.iter().take(cfg.k_neighbors).map(|&(_, q)| q));
            group
        })
        .collect();

    let points: Result<Vec<SurfacePointFrequency>, EnsembleError> = groups
        .par_iter()
        .enumerate()
        .map(|(p, group)| {
            let node = surface[p];
            let pc = coords[node as usize];
            let mut freq_sum = 0.0;
            let mut conf_sum = 0.0;
            let mut with_peak = 0;
            for wf in &waveforms {
                let channels: Vec<Vec<f64>> =
                    group.iter().map(|&q| wf.series[q].clone()).collect();
                let spectral =
                    fdd_dominant_frequency(&channels, cfg.run.dt, cfg.segment, cfg.overlap)?;
                if !spectral.no_peak {
                    freq_sum += spectral.dominant_frequency;
                    conf_sum += spectral.confidence;
                    with_peak += 1;
                }
            }
            let (frequency, confidence) = if with_peak > 0 {
                (freq_sum / with_peak as f64, conf_sum / with_peak as f64)
            } else {
                (0.0, 0.0)
            };
            Ok(SurfacePointFrequency {
                node,
                x: pc[0],
                y: pc[1],
                frequency,
                confidence,
                cases_with_peak: with_peak,
            })
        })
        .collect();

    Ok(EnsembleOutput {
        points: points?,
        waveforms,
        reports,
        mean_iterations,
    })
}

/// Write the dominant-frequency map as CSV: `x,y,frequency,confidence`.
pub fn write_frequency_map_csv<W: Write>(
    points: &[SurfacePointFrequency],
    mut out: W,
) -> io::Result<()> {
    writeln!(out, "x,y,frequency,confidence")?;
    for p in points {
        writeln!(
            out,
            "{:.6},{:.6},{:.9},{:.9}",
            p.x, p.y, p.frequency, p.confidence
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_box_mesh, BoxMeshSpec, LayerInterface};
    use crate::timeloop::{
        run_single_lane_with_ops, BackendChoice, HistoryLengthMode, PredictorChoice,
    };
    use rand::rngs::StdRng;

    fn small_mesh() -> Mesh {
        generate_box_mesh(&BoxMeshSpec {
            extent: [2.0, 2.0, 2.0],
            div: [2, 2, 2],
            layer_interface: LayerInterface::Constant(2.0),
        })
        .unwrap()
    }

    fn soil() -> Material {
        Material {
            density: 1800.0,
            young_modulus: 2.0e8,
            poisson: 0.30,
            rayleigh_alpha: 0.2,
            rayleigh_beta: 0.001,
        }
    }

    fn sine(hz: f64, dt: f64, steps: usize) -> Vec<f64> {
        (1..=steps)
            .map(|k| (2.0 * std::f64::consts::PI * hz * k as f64 * dt).sin())
            .collect()
    }

    // --- Source schedules ---------------------------------------------------

    #[test]
    fn source_schedule_is_deterministic_and_well_formed() {
        let mesh = small_mesh();
        assert!(make_source_schedule(&mesh, 0, 7).cases.is_empty());

        let a = make_source_schedule(&mesh, 50, 7);
        let b = make_source_schedule(&mesh, 50, 7);
        assert_eq!(a, b);
        let c = make_source_schedule(&mesh, 50, 8);
        assert_ne!(a, c);

        let surface: std::collections::HashSet<u32> =
            mesh.surface_nodes.iter().copied().collect();
        for case in &a.cases {
            assert_eq!(case.len(), 1);
            let imp = &case[0];
            assert!(surface.contains(&imp.node));
            assert_eq!(imp.step, 1);
            let n = (imp.direction[0].powi(2)
                + imp.direction[1].powi(2)
                + imp.direction[2].powi(2))
            .sqrt();
            assert!((n - 1.0).abs() <= 1e-12, "direction norm {n}");
            assert!(imp.amplitude >= 0.5e4 && imp.amplitude < 1.5e4);
        }
    }

    // --- Spectral estimation ------------------------------------------------

    #[test]
    fn pure_sine_peaks_within_one_bin() {
        let dt = 0.005;
        let segment = 1024;
        let channels: Vec<Vec<f64>> = (0..3).map(|_| sine(2.0, dt, 4096)).collect();
        let out = fdd_dominant_frequency(&channels, dt, segment, 0.5).unwrap();
        let bin = 1.0 / (dt * segment as f64);
        assert!(!out.no_peak);
        assert!(
            (out.dominant_frequency - 2.0).abs() <= bin,
            "peak at {} Hz, bin width {bin}",
            out.dominant_frequency
        );
        assert!(out.dominant_frequency > 0.0 && out.dominant_frequency <= 0.5 / dt);
        assert!(out.confidence > 10.0, "confidence {}", out.confidence);
    }

    #[test]
    fn identical_channels_double_the_single_channel_spectrum() {
        let dt = 0.005;
        // A two-tone signal keeps several lines well above rounding noise.
        let one: Vec<f64> = sine(2.0, dt, 2048)
            .iter()
            .zip(&sine(13.0, dt, 2048))
            .map(|(a, b)| a + 0.3 * b)
            .collect();
        let single = fdd_dominant_frequency(&[one.clone()], dt, 256, 0.5).unwrap();
        let double = fdd_dominant_frequency(&[one.clone(), one], dt, 256, 0.5).unwrap();
        for (line, (s, d)) in single.spectrum.iter().zip(&double.spectrum).enumerate() {
            let expect = 2.0 * s;
            assert!(
                (d - expect).abs() <= 1e-10 * expect.abs().max(1e-30),
                "line {line}: doubled {d} vs 2×single {expect}"
            );
        }
        assert_eq!(single.dominant_frequency, double.dominant_frequency);
    }

    #[test]
    fn uniform_channel_scaling_leaves_the_peak_alone() {
        let dt = 0.01;
        let base: Vec<Vec<f64>> = (0..4).map(|_| sine(3.0, dt, 1024)).collect();
        let scaled: Vec<Vec<f64>> = base
            .iter()
            .map(|c| c.iter().map(|x| 3.7e4 * x).collect())
            .collect();
        let a = fdd_dominant_frequency(&base, dt, 256, 0.5).unwrap();
        let b = fdd_dominant_frequency(&scaled, dt, 256, 0.5).unwrap();
        assert_eq!(a.dominant_frequency, b.dominant_frequency);
        // Values scale by the power factor; the argmax does not.
        let factor = 3.7e4_f64 * 3.7e4;
        let peak_line = a
            .frequencies
            .iter()
            .position(|&f| f == a.dominant_frequency)
            .unwrap();
        let ratio = b.spectrum[peak_line] / a.spectrum[peak_line];
        assert!((ratio - factor).abs() <= 1e-6 * factor);
    }

    #[test]
    fn auto_psd_sums_to_the_signal_variance() {
        let dt = 0.005;
        let x = sine(2.0, dt, 4096);
        let out = fdd_dominant_frequency(&[x.clone()], dt, 1024, 0.5).unwrap();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let variance = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        let bin = 1.0 / (dt * 1024.0);
        let psd_total: f64 = out.spectrum.iter().sum::<f64>() * bin;
        assert!(
            (psd_total - variance).abs() <= 0.02 * variance,
            "PSD total {psd_total} vs variance {variance}"
        );
    }

    #[test]
    fn noisy_sine_recovers_on_nearly_all_seeds() {
        use rand::SeedableRng;
        let dt = 0.005;
        let segment = 1024;
        let bin = 1.0 / (dt * segment as f64);
        let clean = sine(2.0, dt, 4096);
        // SNR 10 in power: sine power 1/2, noise variance 1/20. A uniform
        // variable on [-a, a] has variance a²/3.
        let a = (3.0_f64 / 20.0).sqrt();
        let mut hits = 0;
        let n_seeds = 100;
        for seed in 0..n_seeds {
            let mut rng = StdRng::seed_from_u64(seed);
            let noisy: Vec<f64> = clean
                .iter()
                .map(|&x| x + rng.gen_range(-a..a))
                .collect();
            let out = fdd_dominant_frequency(&[noisy], dt, segment, 0.5).unwrap();
            if (out.dominant_frequency - 2.0).abs() <= bin {
                hits += 1;
            }
        }
        assert!(hits >= 95, "recovered {hits}/{n_seeds} seeds");
    }

    #[test]
    fn silent_input_is_flagged_no_peak() {
        let channels = vec![vec![0.0; 1024]; 3];
        let out = fdd_dominant_frequency(&channels, 0.01, 256, 0.5).unwrap();
        assert!(out.no_peak);
        assert_eq!(out.dominant_frequency, 0.0);
        assert_eq!(out.confidence, 0.0);
    }

    #[test]
    fn spectral_input_validation_names_the_problem() {
        let ok = vec![vec![0.0; 1024]];
        match fdd_dominant_frequency(&[], 0.01, 256, 0.5).unwrap_err() {
            EnsembleError::NoChannels => {}
            other => panic!("unexpected: {other}"),
        }
        match fdd_dominant_frequency(&[vec![0.0; 1024], vec![0.0; 512]], 0.01, 256, 0.5)
            .unwrap_err()
        {
            EnsembleError::ChannelLengthMismatch { channel, got, expected } => {
                assert_eq!((channel, got, expected), (1, 512, 1024));
            }
            other => panic!("unexpected: {other}"),
        }
        match fdd_dominant_frequency(&ok, 0.01, 200, 0.5).unwrap_err() {
            EnsembleError::BadSegment { segment } => assert_eq!(segment, 200),
            other => panic!("unexpected: {other}"),
        }
        match fdd_dominant_frequency(&ok, 0.01, 256, 1.0).unwrap_err() {
            EnsembleError::BadOverlap { .. } => {}
            other => panic!("unexpected: {other}"),
        }
        match fdd_dominant_frequency(&[vec![0.0; 300]], 0.01, 256, 0.5).unwrap_err() {
            EnsembleError::TooFewSteps { steps, segment } => {
                assert_eq!((steps, segment), (300, 256));
            }
            other => panic!("unexpected: {other}"),
        }
    }

    // --- Ensemble runs ------------------------------------------------------

    fn ensemble_config(n_cases: usize, nt: usize) -> EnsembleConfig {
        EnsembleConfig {
            run: RunConfig {
                dt: 0.002,
                nt,
                epsilon: 1e-8,
                max_iter: 2000,
                backend: BackendChoice::EbeMulti,
                predictor: PredictorChoice::DataDriven,
                r: 2,
                s_mode: HistoryLengthMode::Fixed(8),
                region_target_nodes: 64,
                drop_tol: 1e-12,
                seed: 0,
                capture: None,
                record_solutions: false,
            },
            n_cases,
            seed: 11,
            segment: 256,
            overlap: 0.5,
            k_neighbors: 4,
        }
    }

    #[test]
    fn one_case_ensemble_composes_single_lane_and_fdd() {
        let mesh = small_mesh();
        let cfg = ensemble_config(1, 512);
        let out = run_ensemble(&mesh, &[soil()], &cfg).unwrap();
        assert_eq!(out.waveforms.len(), 1);
        assert_eq!(out.reports.len(), cfg.run.nt);

        // Reference: the same case stepped sequentially, then FDD per point.
        let schedule = make_source_schedule(&mesh, 1, cfg.seed);
        let mut ref_cfg = cfg.run.clone();
        ref_cfg.r = 1;
        ref_cfg.capture = Some(CaptureSpec {
            nodes: mesh.surface_nodes.clone(),
            component: 2,
        });
        let ops =
            std::sync::Arc::new(build_system_ops(&mesh, &[soil()], &ref_cfg).unwrap());
        let reference = run_single_lane_with_ops(ops, &ref_cfg, schedule.cases, 0).unwrap();
        assert_eq!(out.waveforms[0].series, reference.waveforms[0].series);

        for point in &out.points {
            let p = mesh
                .surface_nodes
                .iter()
                .position(|&n| n == point.node)
                .unwrap();
            let pc = mesh.node_coords[point.node as usize];
            let mut by_distance: Vec<(f64, usize)> = (0..mesh.surface_nodes.len())
                .filter(|&q| q != p)
                .map(|q| {
                    let qc = mesh.node_coords[mesh.surface_nodes[q] as usize];
                    (
                        (pc[0] - qc[0]).powi(2) + (pc[1] - qc[1]).powi(2),
                        q,
                    )
                })
                .collect();
            by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut channels = vec![reference.waveforms[0].series[p].clone()];
            channels.extend(
                by_distance
                    .iter()
                    .take(cfg.k_neighbors)
                    .map(|&(_, q)| reference.waveforms[0].series[q].clone()),
            );
            let spectral =
                fdd_dominant_frequency(&channels, cfg.run.dt, cfg.segment, cfg.overlap)
                    .unwrap();
            assert_eq!(point.frequency, spectral.dominant_frequency);
            assert_eq!(point.confidence, spectral.confidence);
        }
    }

    #[test]
    fn ensemble_runs_are_deterministic() {
        let mesh = small_mesh();
        // Three cases over two batches exercises the odd-tail dummy path.
        let cfg = ensemble_config(3, 512);
        let a = run_ensemble(&mesh, &[soil()], &cfg).unwrap();
        let b = run_ensemble(&mesh, &[soil()], &cfg).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.waveforms, b.waveforms);
        assert_eq!(a.mean_iterations, b.mean_iterations);
        // Global case ids cover 0..n_cases.
        let mut case_ids: Vec<usize> = a.waveforms.iter().map(|w| w.case).collect();
        case_ids.sort_unstable();
        assert_eq!(case_ids, vec![0, 1, 2]);
    }

    #[test]
    fn soft_layer_lowers_the_dominant_frequency() {
        // Same geometry, same sources: a soft column versus a stiff one. The
        // soft site must ring at a lower dominant frequency at every surface
        // point with a peak (shear-wave speed scales with √E).
        let mesh = small_mesh();
        let cfg = ensemble_config(2, 512);
        let stiff = soil();
        let soft = Material {
            young_modulus: 2.0e7,
            ..soil()
        };
        let out_stiff = run_ensemble(&mesh, &[stiff], &cfg).unwrap();
        let out_soft = run_ensemble(&mesh, &[soft], &cfg).unwrap();
        let center = mesh.surface_nodes[mesh.surface_nodes.len() / 2];
        let freq_at = |out: &EnsembleOutput| {
            out.points
                .iter()
                .find(|p| p.node == center)
                .unwrap()
                .frequency
        };
        let (f_soft, f_stiff) = (freq_at(&out_soft), freq_at(&out_stiff));
        assert!(f_soft > 0.0 && f_stiff > 0.0);
        assert!(
            f_soft < f_stiff,
            "soft site at {f_soft} Hz, stiff site at {f_stiff} Hz"
        );
    }

    #[test]
    fn frequency_map_csv_lists_every_point() {
        let points = vec![
            SurfacePointFrequency {
                node: 3,
                x: 0.0,
                y: 1.0,
                frequency: 8.5,
                confidence: 12.0,
                cases_with_peak: 2,
            },
            SurfacePointFrequency {
                node: 4,
                x: 0.5,
                y: 1.0,
                frequency: 9.0,
                confidence: 8.0,
                cases_with_peak: 2,
            },
        ];
        let mut csv = Vec::new();
        write_frequency_map_csv(&points, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,y,frequency,confidence");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.000000,1.000000,8.5"));
    }

    #[test]
    fn ensemble_rejects_empty_and_undersized_runs() {
        let mesh = small_mesh();
        let cfg = ensemble_config(0, 512);
        match run_ensemble(&mesh, &[soil()], &cfg).unwrap_err() {
            EnsembleError::NoCases { .. } => {}
            other => panic!("unexpected: {other}"),
        }
        let mut short = ensemble_config(1, 100);
        short.run.nt = 100;
        match run_ensemble(&mesh, &[soil()], &short).unwrap_err() {
            EnsembleError::TooFewSteps { steps, .. } => assert_eq!(steps, 100),
            other => panic!("unexpected: {other}"),
        }
    }
}
