//! `wavelane` — mesh generation, kernel benchmarks, method-comparison runs,
//! random-impulse ensembles, and plain-text reporting over one config file.
//!
//! Every verb reads the same line-oriented config format (see the library's
//! `config` module for the key table) and honors the same overrides:
//! `--out` for the artifact directory, `--seed` for the active random seed,
//! and `--host-workers` for the host-pool executor role's thread count (the
//! accelerator role is a single exclusive lane by construction). Exit code
//! is 0 on success; any failure exits nonzero, and a solver failure leaves
//! completed artifacts on disk with `status.txt` flagging the run as
//! partial.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wavelane::config::{parse_config, serialize_config, ExperimentConfig};
use wavelane::ensemble::{run_ensemble_with_workers, write_frequency_map_csv, EnsembleConfig};
use wavelane::experiment::{
    bench_kernels, run_experiment, write_kernel_bench_csv, write_kernel_bench_raw_csv,
    BenchSettings, ComparisonReport, KernelBenchRow,
};
use wavelane::mesh::{generate_box_mesh, LayerInterface, Mesh};
use wavelane::timeloop::write_waveform_text;

#[derive(Parser)]
#[command(
    name = "wavelane",
    version,
    about = "Matrix-free finite-element time evolution with data-driven initial guesses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured mesh and write node/element tables.
    Mesh(CommonArgs),
    /// Benchmark the system-matvec kernels and write the kernel table.
    Bench(BenchArgs),
    /// Run the configured method comparison and write all artifacts.
    Run(CommonArgs),
    /// Run a random-impulse ensemble and write the dominant-frequency map.
    Ensemble(EnsembleArgs),
    /// Render a run's CSV artifacts as plain-text tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file.
    #[arg(short, long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the active seed (the run seed; for `ensemble`, the
    /// source-schedule seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the host-pool executor role.
    #[arg(long)]
    host_workers: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Fused lane counts to sweep for the multi-lane kernel.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    r_sweep: Vec<usize>,
    /// Timed samples per repeat set.
    #[arg(long, default_value_t = 50)]
    inner: usize,
    /// Repeat sets (the table reports per-set medians).
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Args)]
struct EnsembleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override the configured number of ensemble cases.
    #[arg(long)]
    cases: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Artifact directory of a previous `run`/`bench`/`ensemble`.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Config file to take the artifact directory from instead.
    #[arg(short, long)]
    config: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        let mut cfg = parse_config(&text)
            .with_context(|| format!("parsing config {}", self.config.display()))?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(workers) = self.host_workers {
            cfg.host_workers = workers.max(1);
        }
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Mesh(args) => cmd_mesh(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Ensemble(args) => cmd_ensemble(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

fn cmd_mesh(args: &CommonArgs) -> Result<()> {
    let cfg = args.load()?;
    let mesh = generate_box_mesh(&cfg.mesh)?;
    fs::create_dir_all(&cfg.output_dir)?;

    let mut nodes = BufWriter::new(File::create(cfg.output_dir.join("nodes.csv"))?);
    writeln!(nodes, "id,x,y,z")?;
    for (id, c) in mesh.node_coords.iter().enumerate() {
        writeln!(nodes, "{id},{:?},{:?},{:?}", c[0], c[1], c[2])?;
    }
    nodes.flush()?;

    let mut elements = BufWriter::new(File::create(cfg.output_dir.join("elements.csv"))?);
    writeln!(elements, "id,material,n0,n1,n2,n3,n4,n5,n6,n7,n8,n9")?;
    for (id, (nodes, mat)) in mesh.elements.iter().zip(&mesh.element_material).enumerate() {
        write!(elements, "{id},{mat}")?;
        for n in nodes {
            write!(elements, ",{n}")?;
        }
        writeln!(elements)?;
    }
    elements.flush()?;

    let summary = mesh_summary(&cfg, &mesh);
    fs::write(cfg.output_dir.join("mesh_summary.txt"), &summary)?;
    print!("{summary}");
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn mesh_summary(cfg: &ExperimentConfig, mesh: &Mesh) -> String {
    let mut s = String::new();
    let interface = match cfg.mesh.layer_interface {
        LayerInterface::Constant(h) => format!("constant {h}"),
        LayerInterface::SineBasin { base, amplitude } => format!("basin {base} ± {amplitude}"),
    };
    let lower = mesh.element_material.iter().filter(|&&m| m == 0).count();
    s.push_str(&format!(
        "mesh: extent {:?} m, cells {:?}, layer interface {interface}\n",
        cfg.mesh.extent, cfg.mesh.div
    ));
    s.push_str(&format!(
        "nodes {} (surface {}, constrained bottom {}), elements {} ({} lower / {} upper), dofs {}\n",
        mesh.n_nodes(),
        mesh.surface_nodes.len(),
        mesh.bottom_nodes.len(),
        mesh.n_elements(),
        lower,
        mesh.n_elements() - lower,
        mesh.n_dofs(),
    ));
    s
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let mesh = generate_box_mesh(&cfg.mesh)?;
    let settings = BenchSettings {
        r_sweep: args.r_sweep.clone(),
        inner: args.inner,
        repeats: args.repeats,
    };
    let rows = bench_kernels(&mesh, &cfg.materials, &cfg.run, &settings)?;

    fs::create_dir_all(&cfg.output_dir)?;
    let mut f = BufWriter::new(File::create(cfg.output_dir.join("kernels.csv"))?);
    write_kernel_bench_csv(&rows, &mut f)?;
    f.flush()?;
    let mut f = BufWriter::new(File::create(cfg.output_dir.join("kernels_raw.csv"))?);
    write_kernel_bench_raw_csv(&rows, &mut f)?;
    f.flush()?;

    print!("{}", kernel_table(&rows));
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn kernel_table(rows: &[KernelBenchRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<10} {:>3} {:>14} {:>14} {:>10} {:>8}\n",
        "backend", "r", "s/matvec", "model bytes", "GB/s", "spread"
    ));
    for row in rows {
        s.push_str(&format!(
            "{:<10} {:>3} {:>14.3e} {:>14} {:>10.2} {:>7.1}%\n",
            row.backend,
            row.r,
            row.seconds_per_matvec,
            row.model_bytes,
            row.effective_gbps,
            row.spread * 100.0
        ));
    }
    s
}

fn cmd_run(args: &CommonArgs) -> Result<()> {
    let cfg = args.load()?;
    // Record the exact configuration the artifacts were produced from.
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.cfg"), serialize_config(&cfg))?;
    let report = run_experiment(&cfg).with_context(|| {
        format!(
            "comparison run failed; partial artifacts flagged in {}",
            cfg.output_dir.join("status.txt").display()
        )
    })?;
    print!("{}", comparison_table(&report));
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn comparison_table(report: &ComparisonReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "window: steps {}..={}, {} cases, baseline {}\n",
        report.window.0, report.window.1, report.n_cases, report.baseline
    ));
    s.push_str(&format!(
        "{:<20} {:>12} {:>16} {:>12} {:>9}\n",
        "method", "iters/step", "s/step/case", "matvec GB/s", "speedup"
    ));
    for m in &report.methods {
        s.push_str(&format!(
            "{:<20} {:>12.2} {:>16.4e} {:>12.2} {:>8.2}x\n",
            m.label,
            m.mean_iterations,
            m.mean_seconds_per_step_case,
            m.matvec_gbps,
            m.speedup_vs_baseline
        ));
    }
    s
}

fn cmd_ensemble(args: &EnsembleArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let mesh = generate_box_mesh(&cfg.mesh)?;
    let ens = EnsembleConfig {
        run: cfg.run.clone(),
        n_cases: args.cases.unwrap_or(cfg.ensemble.n_cases),
        seed: args.common.seed.unwrap_or(cfg.ensemble.seed),
        segment: cfg.ensemble.segment,
        overlap: cfg.ensemble.overlap,
        k_neighbors: cfg.ensemble.k_neighbors,
    };
    let out = run_ensemble_with_workers(&mesh, &cfg.materials, &ens, cfg.host_workers)?;

    fs::create_dir_all(&cfg.output_dir)?;
    let mut f = BufWriter::new(File::create(cfg.output_dir.join("frequency_map.csv"))?);
    write_frequency_map_csv(&out.points, &mut f)?;
    f.flush()?;

    for wf in &out.waveforms {
        let path = cfg.output_dir.join(format!("waveforms_case{}.txt", wf.case));
        let mut f = BufWriter::new(File::create(path)?);
        write_waveform_text(wf, &mut f)?;
        f.flush()?;
    }

    let mut f = BufWriter::new(File::create(cfg.output_dir.join("ensemble_steps.csv"))?);
    writeln!(
        f,
        "step,case,iterations,initial_relative_residual,final_relative_residual,converged,s_used,corrected"
    )?;
    let mut rows = out.reports.clone();
    rows.sort_by_key(|r| (r.step, r.case));
    for rep in &rows {
        writeln!(
            f,
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
    f.flush()?;

    let with_peak = out.points.iter().filter(|p| p.cases_with_peak > 0).count();
    let summary = format!(
        "ensemble: {} cases, {} surface points ({} with a detected peak), \
         mean iterations/step {:.2}\n",
        ens.n_cases,
        out.points.len(),
        with_peak,
        out.mean_iterations
    );
    fs::write(cfg.output_dir.join("ensemble_summary.txt"), &summary)?;
    print!("{summary}");
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let dir = match (&args.dir, &args.config) {
        (Some(dir), _) => dir.clone(),
        (None, Some(config)) => {
            let text = fs::read_to_string(config)
                .with_context(|| format!("reading config {}", config.display()))?;
            parse_config(&text)?.output_dir
        }
        (None, None) => bail!("report needs --dir or --config"),
    };

    let mut printed = false;
    let status = dir.join("status.txt");
    if status.exists() {
        print!("status: {}", fs::read_to_string(&status)?);
        printed = true;
    }
    for (name, title) in [
        ("comparison.csv", "method comparison"),
        ("kernels.csv", "kernel benchmarks"),
        ("frequency_map.csv", "dominant-frequency map"),
    ] {
        let path = dir.join(name);
        if path.exists() {
            println!("\n{title} ({name}):");
            print!("{}", render_csv(&path)?);
            printed = true;
        }
    }
    if !printed {
        bail!("no artifacts found in {}", dir.display());
    }
    Ok(())
}

/// Render a CSV as aligned plain-text columns.
fn render_csv(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    let columns = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut widths = vec![0usize; columns];
    for row in &rows {
        for (k, cell) in row.iter().enumerate() {
            widths[k] = widths[k].max(cell.len());
        }
    }
    let mut s = String::new();
    for row in &rows {
        for (k, cell) in row.iter().enumerate() {
            if k > 0 {
                s.push_str("  ");
            }
            s.push_str(&format!("{:<width$}", cell, width = widths[k]));
        }
        // Trim the padding after the last column.
        while s.ends_with(' ') {
            s.pop();
        }
        s.push('\n');
    }
    Ok(s)
}
