//! Experiment configuration: a line-oriented `key = value` format with
//! `[section]` headers, full-line and trailing `#` comments, and blank lines.
//!
//! Sections and keys:
//!
//! | section      | key                   | value                      | default    |
//! |--------------|-----------------------|----------------------------|------------|
//! | `[mesh]`     | `extent`              | three floats (m)           | required   |
//! |              | `div`                 | three integers             | required   |
//! |              | `layer_interface`     | `constant H` \| `basin B A`| `constant` at full depth |
//! | `[material]` | `density`             | float (kg/m³)              | required   |
//! | (repeatable) | `young_modulus`       | float (Pa)                 | required   |
//! |              | `poisson`             | float in (−1, 0.5)         | required   |
//! |              | `rayleigh_alpha`      | float ≥ 0 (1/s)            | required   |
//! |              | `rayleigh_beta`       | float ≥ 0 (s)              | required   |
//! | `[run]`      | `dt`                  | float > 0 (s)              | required   |
//! |              | `nt`                  | integer ≥ 1                | required   |
//! |              | `epsilon`             | float in (0, 1)            | `1e-8`     |
//! |              | `max_iter`            | integer ≥ 1                | `500`      |
//! |              | `backend`             | `crs` \| `ebe` \| `ebe-multi` | `ebe-multi` |
//! |              | `predictor`           | `none` \| `ab4` \| `data-driven` | `data-driven` |
//! |              | `r`                   | integer in 1..=8           | `4`        |
//! |              | `s`                   | `fixed S` \| `dynamic LO HI` | `dynamic 8 32` |
//! |              | `region_target_nodes` | integer ≥ 1                | `512`      |
//! |              | `drop_tol`            | float > 0                  | `1e-12`    |
//! |              | `seed`                | integer                    | `0`        |
//! | `[pipeline]` | `enabled`             | `true` \| `false`          | `true`     |
//! |              | `host_workers`        | integer ≥ 1                | available parallelism |
//! | `[ensemble]` | `n_cases`             | integer ≥ 1                | `8`        |
//! |              | `seed`                | integer                    | `1`        |
//! |              | `segment`             | power of two ≥ 256         | `256`      |
//! |              | `overlap`             | float in [0, 1)            | `0.5`      |
//! |              | `k_neighbors`         | integer ≥ 1                | `4`        |
//! | `[report]`   | `window`              | two integers `LO HI`, LO < HI | `100 200` |
//! | `[output]`   | `dir`                 | path                       | `out`      |
//!
//! Unknown sections and keys are rejected with their line number, as are
//! type and range violations — each error names the offending key.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::elasticity::Material;
use crate::mesh::{BoxMeshSpec, LayerInterface};
use crate::timeloop::{BackendChoice, HistoryLengthMode, PredictorChoice, RunConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got \"{text}\"")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: key \"{key}\" does not belong in section [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: key \"{key}\" appears before any [section] header")]
    KeyOutsideSection { line: usize, key: String },
    #[error("line {line}: key \"{key}\" set twice in the same section")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: key \"{key}\": {message}")]
    Parse {
        line: usize,
        key: String,
        message: String,
    },
    #[error("line {line}: key \"{key}\": {message}")]
    Range {
        line: usize,
        key: String,
        message: String,
    },
    #[error("missing required keys: {}", keys.join(", "))]
    MissingKeys { keys: Vec<String> },
    #[error("a config may declare at most two materials (one per layer); found {got}")]
    TooManyMaterials { got: usize },
}

/// Ensemble-verb parameters (paired with the shared [`RunConfig`] at run
/// time).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSettings {
    pub n_cases: usize,
    pub seed: u64,
    pub segment: usize,
    pub overlap: f64,
    pub k_neighbors: usize,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        EnsembleSettings {
            n_cases: 8,
            seed: 1,
            segment: 256,
            overlap: 0.5,
            k_neighbors: 4,
        }
    }
}

/// Everything an experiment needs: geometry, materials, solver and predictor
/// settings, scheduling, reporting window, and the output location.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mesh: BoxMeshSpec,
    /// Material 0 lies below the layer interface, material 1 above.
    pub materials: Vec<Material>,
    pub run: RunConfig,
    /// Run comparison methods through the dual-lane pipeline.
    pub pipeline: bool,
    pub host_workers: usize,
    pub ensemble: EnsembleSettings,
    /// Steps included in report statistics (inclusive, 1-based).
    pub report_window: (usize, usize),
    pub output_dir: PathBuf,
}

fn default_host_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// One parsed `key = value` occurrence.
struct Entry {
    line: usize,
    key: String,
    value: String,
}

/// Raw sections in file order; `[material]` may repeat.
struct RawConfig {
    mesh: Vec<Entry>,
    materials: Vec<Vec<Entry>>,
    run: Vec<Entry>,
    pipeline: Vec<Entry>,
    ensemble: Vec<Entry>,
    report: Vec<Entry>,
    output: Vec<Entry>,
}

fn split_sections(text: &str) -> Result<RawConfig, ConfigError> {
    let mut raw = RawConfig {
        mesh: Vec::new(),
        materials: Vec::new(),
        run: Vec::new(),
        pipeline: Vec::new(),
        ensemble: Vec::new(),
        report: Vec::new(),
        output: Vec::new(),
    };
    let mut current: Option<&str> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if stripped.is_empty() {
            continue;
        }
        if let Some(name) = stripped.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Syntax {
                    line,
                    text: stripped.to_string(),
                })?
                .trim();
            match name {
                "mesh" | "run" | "pipeline" | "ensemble" | "report" | "output" => {
                    current = Some(match name {
                        "mesh" => "mesh",
                        "run" => "run",
                        "pipeline" => "pipeline",
                        "ensemble" => "ensemble",
                        "report" => "report",
                        _ => "output",
                    });
                }
                "material" => {
                    raw.materials.push(Vec::new());
                    current = Some("material");
                }
                other => {
                    return Err(ConfigError::UnknownSection {
                        line,
                        name: other.to_string(),
                    })
                }
            }
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: stripped.to_string(),
        })?;
        let entry = Entry {
            line,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        };
        let bucket = match current {
            Some("mesh") => &mut raw.mesh,
            Some("material") => raw.materials.last_mut().unwrap(),
            Some("run") => &mut raw.run,
            Some("pipeline") => &mut raw.pipeline,
            Some("ensemble") => &mut raw.ensemble,
            Some("report") => &mut raw.report,
            Some("output") => &mut raw.output,
            _ => {
                return Err(ConfigError::KeyOutsideSection {
                    line,
                    key: entry.key,
                })
            }
        };
        if bucket.iter().any(|e| e.key == entry.key) {
            return Err(ConfigError::DuplicateKey {
                line,
                key: entry.key,
            });
        }
        bucket.push(entry);
    }
    Ok(raw)
}

/// Typed accessors over one section's entries, tracking which keys are legal.
struct Section<'a> {
    name: &'static str,
    entries: &'a [Entry],
    known: Vec<&'static str>,
}

impl<'a> Section<'a> {
    fn new(name: &'static str, entries: &'a [Entry]) -> Self {
        Section {
            name,
            entries,
            known: Vec::new(),
        }
    }

    fn get(&mut self, key: &'static str) -> Option<&'a Entry> {
        self.known.push(key);
        self.entries.iter().find(|e| e.key == key)
    }

    /// After all keys were looked up, reject anything else.
    fn finish(self) -> Result<(), ConfigError> {
        for e in self.entries {
            if !self.known.contains(&e.key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    line: e.line,
                    section: self.name.to_string(),
                    key: e.key.clone(),
                });
            }
        }
        Ok(())
    }
}

fn parse_f64(e: &Entry) -> Result<f64, ConfigError> {
    e.value.parse().map_err(|_| ConfigError::Parse {
        line: e.line,
        key: e.key.clone(),
        message: format!("\"{}\" is not a number", e.value),
    })
}

fn parse_usize(e: &Entry) -> Result<usize, ConfigError> {
    e.value.parse().map_err(|_| ConfigError::Parse {
        line: e.line,
        key: e.key.clone(),
        message: format!("\"{}\" is not a non-negative integer", e.value),
    })
}

fn parse_u64(e: &Entry) -> Result<u64, ConfigError> {
    e.value.parse().map_err(|_| ConfigError::Parse {
        line: e.line,
        key: e.key.clone(),
        message: format!("\"{}\" is not a non-negative integer", e.value),
    })
}

fn parse_bool(e: &Entry) -> Result<bool, ConfigError> {
    match e.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(ConfigError::Parse {
            line: e.line,
            key: e.key.clone(),
            message: format!("\"{other}\" is not `true` or `false`"),
        }),
    }
}

fn parse_floats<const N: usize>(e: &Entry) -> Result<[f64; N], ConfigError> {
    let parts: Vec<&str> = e.value.split_whitespace().collect();
    if parts.len() != N {
        return Err(ConfigError::Parse {
            line: e.line,
            key: e.key.clone(),
            message: format!("expected {N} values, got {}", parts.len()),
        });
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| ConfigError::Parse {
            line: e.line,
            key: e.key.clone(),
            message: format!("\"{p}\" is not a number"),
        })?;
    }
    Ok(out)
}

fn parse_usizes<const N: usize>(e: &Entry) -> Result<[usize; N], ConfigError> {
    let parts: Vec<&str> = e.value.split_whitespace().collect();
    if parts.len() != N {
        return Err(ConfigError::Parse {
            line: e.line,
            key: e.key.clone(),
            message: format!("expected {N} values, got {}", parts.len()),
        });
    }
    let mut out = [0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| ConfigError::Parse {
            line: e.line,
            key: e.key.clone(),
            message: format!("\"{p}\" is not a non-negative integer"),
        })?;
    }
    Ok(out)
}

fn range_err(e: &Entry, message: impl Into<String>) -> ConfigError {
    ConfigError::Range {
        line: e.line,
        key: e.key.clone(),
        message: message.into(),
    }
}

/// Parse a full experiment configuration, applying documented defaults and
/// validating every value.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let raw = split_sections(text)?;
    let mut missing: Vec<String> = Vec::new();

    // --- [mesh] -------------------------------------------------------------
    let mut mesh_sec = Section::new("mesh", &raw.mesh);
    let mut extent = [0.0; 3];
    match mesh_sec.get("extent") {
        Some(e) => {
            extent = parse_floats::<3>(e)?;
            for (axis, &v) in ["x", "y", "z"].iter().zip(&extent) {
                if !(v > 0.0) {
                    return Err(range_err(e, format!("{axis} extent must be positive")));
                }
            }
        }
        None => missing.push("mesh.extent".into()),
    }
    let mut div = [0; 3];
    match mesh_sec.get("div") {
        Some(e) => {
            div = parse_usizes::<3>(e)?;
            if div.iter().any(|&d| d == 0) {
                return Err(range_err(e, "cell counts must be at least 1"));
            }
        }
        None => missing.push("mesh.div".into()),
    }
    let layer_interface = match mesh_sec.get("layer_interface") {
        Some(e) => {
            let parts: Vec<&str> = e.value.split_whitespace().collect();
            match parts.as_slice() {
                ["constant", h] => {
                    let h: f64 = h.parse().map_err(|_| ConfigError::Parse {
                        line: e.line,
                        key: e.key.clone(),
                        message: format!("\"{h}\" is not a number"),
                    })?;
                    LayerInterface::Constant(h)
                }
                ["basin", b, a] => {
                    let parse = |s: &str| -> Result<f64, ConfigError> {
                        s.parse().map_err(|_| ConfigError::Parse {
                            line: e.line,
                            key: e.key.clone(),
                            message: format!("\"{s}\" is not a number"),
                        })
                    };
                    LayerInterface::SineBasin {
                        base: parse(b)?,
                        amplitude: parse(a)?,
                    }
                }
                _ => {
                    return Err(ConfigError::Parse {
                        line: e.line,
                        key: e.key.clone(),
                        message: "expected `constant H` or `basin BASE AMPLITUDE`".into(),
                    })
                }
            }
        }
        None => LayerInterface::Constant(extent[2]),
    };
    mesh_sec.finish()?;

    // --- [material] (repeatable) ---------------------------------------------
    if raw.materials.is_empty() {
        for key in [
            "material.density",
            "material.young_modulus",
            "material.poisson",
            "material.rayleigh_alpha",
            "material.rayleigh_beta",
        ] {
            missing.push(key.into());
        }
    }
    if raw.materials.len() > 2 {
        return Err(ConfigError::TooManyMaterials {
            got: raw.materials.len(),
        });
    }
    let mut materials = Vec::new();
    for entries in &raw.materials {
        let mut sec = Section::new("material", entries);
        fn require(
            sec: &mut Section,
            key: &'static str,
            missing: &mut Vec<String>,
        ) -> Result<Option<f64>, ConfigError> {
            match sec.get(key) {
                Some(e) => Ok(Some(parse_f64(e)?)),
                None => {
                    missing.push(format!("material.{key}"));
                    Ok(None)
                }
            }
        }
        let density = require(&mut sec, "density", &mut missing)?;
        let young = require(&mut sec, "young_modulus", &mut missing)?;
        let poisson = match sec.get("poisson") {
            Some(e) => {
                let v = parse_f64(e)?;
                if !(-1.0 < v && v < 0.5) {
                    return Err(range_err(
                        e,
                        format!("poisson ratio {v} must lie in (-1, 0.5)"),
                    ));
                }
                Some(v)
            }
            None => {
                missing.push("material.poisson".into());
                None
            }
        };
        let alpha = require(&mut sec, "rayleigh_alpha", &mut missing)?;
        let beta = require(&mut sec, "rayleigh_beta", &mut missing)?;
        sec.finish()?;
        if let (Some(density), Some(young), Some(poisson), Some(alpha), Some(beta)) =
            (density, young, poisson, alpha, beta)
        {
            let check = |key: &str, v: f64, ok: bool, msg: &str| -> Result<(), ConfigError> {
                if ok {
                    Ok(())
                } else {
                    let e = entries.iter().find(|e| e.key == key).unwrap();
                    Err(range_err(e, format!("{msg}, got {v}")))
                }
            };
            check("density", density, density > 0.0, "density must be positive")?;
            check(
                "young_modulus",
                young,
                young > 0.0,
                "young_modulus must be positive",
            )?;
            check(
                "rayleigh_alpha",
                alpha,
                alpha >= 0.0,
                "rayleigh_alpha must be non-negative",
            )?;
            check(
                "rayleigh_beta",
                beta,
                beta >= 0.0,
                "rayleigh_beta must be non-negative",
            )?;
            materials.push(Material {
                density,
                young_modulus: young,
                poisson,
                rayleigh_alpha: alpha,
                rayleigh_beta: beta,
            });
        }
    }

    // --- [run] ----------------------------------------------------------------
    let mut run = RunConfig::default();
    // Config files default to the adaptive history controller.
    run.s_mode = HistoryLengthMode::Dynamic { s_min: 8, s_max: 32 };
    let mut run_sec = Section::new("run", &raw.run);
    match run_sec.get("dt") {
        Some(e) => {
            run.dt = parse_f64(e)?;
            if !(run.dt > 0.0) {
                return Err(range_err(e, "dt must be positive"));
            }
        }
        None => missing.push("run.dt".into()),
    }
    match run_sec.get("nt") {
        Some(e) => {
            run.nt = parse_usize(e)?;
            if run.nt == 0 {
                return Err(range_err(e, "nt must be at least 1"));
            }
        }
        None => missing.push("run.nt".into()),
    }
    if let Some(e) = run_sec.get("epsilon") {
        run.epsilon = parse_f64(e)?;
        if !(run.epsilon > 0.0 && run.epsilon < 1.0) {
            return Err(range_err(e, "epsilon must lie in (0, 1)"));
        }
    }
    if let Some(e) = run_sec.get("max_iter") {
        run.max_iter = parse_usize(e)?;
        if run.max_iter == 0 {
            return Err(range_err(e, "max_iter must be at least 1"));
        }
    }
    if let Some(e) = run_sec.get("backend") {
        run.backend = match e.value.as_str() {
            "crs" => BackendChoice::Crs,
            "ebe" => BackendChoice::Ebe,
            "ebe-multi" => BackendChoice::EbeMulti,
            other => {
                return Err(ConfigError::Parse {
                    line: e.line,
                    key: e.key.clone(),
                    message: format!("\"{other}\" is not one of crs, ebe, ebe-multi"),
                })
            }
        };
    }
    if let Some(e) = run_sec.get("predictor") {
        run.predictor = match e.value.as_str() {
            "none" => PredictorChoice::Hold,
            "ab4" => PredictorChoice::Ab4,
            "data-driven" => PredictorChoice::DataDriven,
            other => {
                return Err(ConfigError::Parse {
                    line: e.line,
                    key: e.key.clone(),
                    message: format!("\"{other}\" is not one of none, ab4, data-driven"),
                })
            }
        };
    }
    if let Some(e) = run_sec.get("r") {
        run.r = parse_usize(e)?;
        if !(1..=crate::ebe::MAX_LANES).contains(&run.r) {
            return Err(range_err(
                e,
                format!("r must lie in 1..={}", crate::ebe::MAX_LANES),
            ));
        }
    }
    if let Some(e) = run_sec.get("s") {
        let parts: Vec<&str> = e.value.split_whitespace().collect();
        run.s_mode = match parts.as_slice() {
            ["fixed", s] => {
                let s: usize = s.parse().map_err(|_| ConfigError::Parse {
                    line: e.line,
                    key: e.key.clone(),
                    message: format!("\"{s}\" is not a non-negative integer"),
                })?;
                if s == 0 {
                    return Err(range_err(e, "fixed history length must be at least 1"));
                }
                HistoryLengthMode::Fixed(s)
            }
            ["dynamic", lo, hi] => {
                let parse = |s: &str| -> Result<usize, ConfigError> {
                    s.parse().map_err(|_| ConfigError::Parse {
                        line: e.line,
                        key: e.key.clone(),
                        message: format!("\"{s}\" is not a non-negative integer"),
                    })
                };
                let (lo, hi) = (parse(lo)?, parse(hi)?);
                if lo == 0 || lo > hi {
                    return Err(range_err(e, format!("need 1 ≤ LO ≤ HI, got {lo} {hi}")));
                }
                HistoryLengthMode::Dynamic {
                    s_min: lo,
                    s_max: hi,
                }
            }
            _ => {
                return Err(ConfigError::Parse {
                    line: e.line,
                    key: e.key.clone(),
                    message: "expected `fixed S` or `dynamic LO HI`".into(),
                })
            }
        };
    }
    if let Some(e) = run_sec.get("region_target_nodes") {
        run.region_target_nodes = parse_usize(e)?;
        if run.region_target_nodes == 0 {
            return Err(range_err(e, "region_target_nodes must be at least 1"));
        }
    }
    if let Some(e) = run_sec.get("drop_tol") {
        run.drop_tol = parse_f64(e)?;
        if !(run.drop_tol > 0.0) {
            return Err(range_err(e, "drop_tol must be positive"));
        }
    }
    if let Some(e) = run_sec.get("seed") {
        run.seed = parse_u64(e)?;
    }
    run_sec.finish()?;

    // --- [pipeline] -----------------------------------------------------------
    let mut pipe_sec = Section::new("pipeline", &raw.pipeline);
    let pipeline = match pipe_sec.get("enabled") {
        Some(e) => parse_bool(e)?,
        None => true,
    };
    let host_workers = match pipe_sec.get("host_workers") {
        Some(e) => {
            let w = parse_usize(e)?;
            if w == 0 {
                return Err(range_err(e, "host_workers must be at least 1"));
            }
            w
        }
        None => default_host_workers(),
    };
    pipe_sec.finish()?;

    // --- [ensemble] -------------------------------------------------------------
    let mut ens = EnsembleSettings::default();
    let mut ens_sec = Section::new("ensemble", &raw.ensemble);
    if let Some(e) = ens_sec.get("n_cases") {
        ens.n_cases = parse_usize(e)?;
        if ens.n_cases == 0 {
            return Err(range_err(e, "n_cases must be at least 1"));
        }
    }
    if let Some(e) = ens_sec.get("seed") {
        ens.seed = parse_u64(e)?;
    }
    if let Some(e) = ens_sec.get("segment") {
        ens.segment = parse_usize(e)?;
        if ens.segment < crate::ensemble::MIN_SEGMENT || !ens.segment.is_power_of_two() {
            return Err(range_err(
                e,
                format!(
                    "segment must be a power of two of at least {}",
                    crate::ensemble::MIN_SEGMENT
                ),
            ));
        }
    }
    if let Some(e) = ens_sec.get("overlap") {
        ens.overlap = parse_f64(e)?;
        if !(0.0..1.0).contains(&ens.overlap) {
            return Err(range_err(e, "overlap must lie in [0, 1)"));
        }
    }
    if let Some(e) = ens_sec.get("k_neighbors") {
        ens.k_neighbors = parse_usize(e)?;
        if ens.k_neighbors == 0 {
            return Err(range_err(e, "k_neighbors must be at least 1"));
        }
    }
    ens_sec.finish()?;

    // --- [report] ----------------------------------------------------------------
    let mut rep_sec = Section::new("report", &raw.report);
    let report_window = match rep_sec.get("window") {
        Some(e) => {
            let [lo, hi] = parse_usizes::<2>(e)?;
            if lo == 0 || lo >= hi {
                return Err(range_err(e, format!("need 1 ≤ LO < HI, got {lo} {hi}")));
            }
            (lo, hi)
        }
        None => (100, 200),
    };
    rep_sec.finish()?;

    // --- [output] -------------------------------------------------------------------
    let mut out_sec = Section::new("output", &raw.output);
    let output_dir = match out_sec.get("dir") {
        Some(e) => PathBuf::from(&e.value),
        None => PathBuf::from("out"),
    };
    out_sec.finish()?;

    if !missing.is_empty() {
        return Err(ConfigError::MissingKeys { keys: missing });
    }

    Ok(ExperimentConfig {
        mesh: BoxMeshSpec {
            extent,
            div,
            layer_interface,
        },
        materials,
        run,
        pipeline,
        host_workers,
        ensemble: ens,
        report_window,
        output_dir,
    })
}

/// Serialize a configuration to the same text format [`parse_config`] reads.
/// Floats use shortest round-trip-exact formatting, so
/// `parse_config(serialize_config(c)) == c`.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[mesh]");
    let _ = writeln!(
        s,
        "extent = {:?} {:?} {:?}",
        cfg.mesh.extent[0], cfg.mesh.extent[1], cfg.mesh.extent[2]
    );
    let _ = writeln!(
        s,
        "div = {} {} {}",
        cfg.mesh.div[0], cfg.mesh.div[1], cfg.mesh.div[2]
    );
    match cfg.mesh.layer_interface {
        LayerInterface::Constant(h) => {
            let _ = writeln!(s, "layer_interface = constant {h:?}");
        }
        LayerInterface::SineBasin { base, amplitude } => {
            let _ = writeln!(s, "layer_interface = basin {base:?} {amplitude:?}");
        }
    }
    for m in &cfg.materials {
        let _ = writeln!(s, "\n[material]");
        let _ = writeln!(s, "density = {:?}", m.density);
        let _ = writeln!(s, "young_modulus = {:?}", m.young_modulus);
        let _ = writeln!(s, "poisson = {:?}", m.poisson);
        let _ = writeln!(s, "rayleigh_alpha = {:?}", m.rayleigh_alpha);
        let _ = writeln!(s, "rayleigh_beta = {:?}", m.rayleigh_beta);
    }
    let _ = writeln!(s, "\n[run]");
    let _ = writeln!(s, "dt = {:?}", cfg.run.dt);
    let _ = writeln!(s, "nt = {}", cfg.run.nt);
    let _ = writeln!(s, "epsilon = {:?}", cfg.run.epsilon);
    let _ = writeln!(s, "max_iter = {}", cfg.run.max_iter);
    let backend = match cfg.run.backend {
        BackendChoice::Crs => "crs",
        BackendChoice::Ebe => "ebe",
        BackendChoice::EbeMulti => "ebe-multi",
    };
    let _ = writeln!(s, "backend = {backend}");
    let predictor = match cfg.run.predictor {
        PredictorChoice::Hold => "none",
        PredictorChoice::Ab4 => "ab4",
        PredictorChoice::DataDriven => "data-driven",
    };
    let _ = writeln!(s, "predictor = {predictor}");
    let _ = writeln!(s, "r = {}", cfg.run.r);
    match cfg.run.s_mode {
        HistoryLengthMode::Fixed(v) => {
            let _ = writeln!(s, "s = fixed {v}");
        }
        HistoryLengthMode::Dynamic { s_min, s_max } => {
            let _ = writeln!(s, "s = dynamic {s_min} {s_max}");
        }
    }
    let _ = writeln!(s, "region_target_nodes = {}", cfg.run.region_target_nodes);
    let _ = writeln!(s, "drop_tol = {:?}", cfg.run.drop_tol);
    let _ = writeln!(s, "seed = {}", cfg.run.seed);
    let _ = writeln!(s, "\n[pipeline]");
    let _ = writeln!(s, "enabled = {}", cfg.pipeline);
    let _ = writeln!(s, "host_workers = {}", cfg.host_workers);
    let _ = writeln!(s, "\n[ensemble]");
    let _ = writeln!(s, "n_cases = {}", cfg.ensemble.n_cases);
    let _ = writeln!(s, "seed = {}", cfg.ensemble.seed);
    let _ = writeln!(s, "segment = {}", cfg.ensemble.segment);
    let _ = writeln!(s, "overlap = {:?}", cfg.ensemble.overlap);
    let _ = writeln!(s, "k_neighbors = {}", cfg.ensemble.k_neighbors);
    let _ = writeln!(s, "\n[report]");
    let _ = writeln!(s, "window = {} {}", cfg.report_window.0, cfg.report_window.1);
    let _ = writeln!(s, "\n[output]");
    let _ = writeln!(s, "dir = {}", cfg.output_dir.display());
    s
}
