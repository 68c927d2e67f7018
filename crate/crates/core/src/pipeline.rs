//! End-to-end run: phantom, simulation, Approximant, baselines, metrics and
//! spectral analysis, with a manifest of everything written.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{wedge_fraction, ProjectionSource};
use crate::approximant::approximant;
use crate::config::{read_json, write_json, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::optics::make_probe;
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::ptychosim::{simulate_stack, DiffractionStack};
use crate::scanplan::ScanPlan;
use crate::tomo::{fbp, ptycho_sinogram, radon, sart, sirt};
use crate::volume::{read_volume, write_volume, Volume};

fn default_n() -> usize {
    15
}
fn default_half_range() -> f64 {
    70.0
}
fn default_overlap() -> f64 {
    0.9
}
fn default_sirt_iters() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub config: RunConfig,
    /// Tomo-scan count.
    #[serde(default = "default_n")]
    pub n_angles: usize,
    /// Half range of the tilt series in degrees.
    #[serde(default = "default_half_range")]
    pub half_range: f64,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    /// Projections fed to the baselines.
    #[serde(default)]
    pub projections: ProjectionSource,
    #[serde(default = "default_sirt_iters")]
    pub sirt_iters: usize,
}

impl PipelineConfig {
    pub fn with_phantom(phantom: PhantomSpec) -> Self {
        PipelineConfig {
            phantom,
            config: RunConfig::default(),
            n_angles: default_n(),
            half_range: default_half_range(),
            overlap: default_overlap(),
            projections: ProjectionSource::default(),
            sirt_iters: default_sirt_iters(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.config.validate()?;
        if self.n_angles == 0 {
            return Err(Error::Config("n_angles must be >= 1".into()));
        }
        if !(0.0..=90.0).contains(&self.half_range) {
            return Err(Error::Config("half_range must be in [0, 90]".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: PipelineConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub path: PathBuf,
    /// Hex SHA-256 of the file contents.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Volume containers, all readable with `read_volume`.
    pub artifacts: Vec<Artifact>,
    /// JSON side outputs: plan, loss log, metrics, analysis.
    pub reports: Vec<Artifact>,
    pub stages: Vec<StageTime>,
}

impl PipelineManifest {
    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";

const VOLUMES: [&str; 7] = ["label", "phase", "stack", "approximant", "fbp", "sirt", "sart"];
const REPORTS: [(&str, &str); 4] = [
    ("plan", "plan.json"),
    ("loss", "loss.jsonl"),
    ("metrics", "metrics.json"),
    ("analysis", "analysis.json"),
];

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn volume_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.xptv"))
}

/// Spectral summary of one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WedgeSummary {
    pub half_range: f64,
    /// Fraction of spectral energy inside the missing wedge, per volume.
    pub fractions: BTreeMap<String, f64>,
}

struct Timer {
    stages: Vec<StageTime>,
}

impl Timer {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| Error::Stage { stage, source: Box::new(e) })?;
        self.stages.push(StageTime { stage: stage.into(), wall_time_s: start.elapsed().as_secs_f64() });
        Ok(out)
    }
}

/// Runs every stage into `out_dir` and writes the manifest last. Existing
/// outputs are an error unless `force` is set.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: impl AsRef<Path>, force: bool) -> Result<PipelineManifest> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut planned: Vec<PathBuf> = VOLUMES.iter().map(|n| volume_path(dir, n)).collect();
    planned.extend(REPORTS.iter().map(|(_, f)| dir.join(f)));
    planned.push(dir.join(MANIFEST_NAME));
    if !force {
        if let Some(p) = planned.iter().find(|p| p.exists()) {
            return Err(Error::Exists(p.clone()));
        }
    }

    let rc = &cfg.config;
    let mut timer = Timer { stages: Vec::new() };
    let mut volumes: Vec<(&str, Volume)> = Vec::new();

    let (label, phase) = timer.run("phantom", || {
        let (label, phase) = generate_phantom(&cfg.phantom)?;
        write_volume(&label, volume_path(dir, "label"))?;
        write_volume(&phase, volume_path(dir, "phase"))?;
        Ok((label, phase))
    })?;
    drop(label);

    let (stack, probe) = timer.run("simulate", || {
        let d = rc.detector_pixels;
        let probe = make_probe(rc.mode_count, rc.probe_waist_nm, (d, d, rc.pixel_pitch_nm), rc.probe_power_decay, rc.seed)?;
        let [_, ny, nx] = phase.dims();
        let plan = ScanPlan::standard(cfg.n_angles, cfg.half_range, [ny, nx], d, cfg.overlap, rc.pixel_pitch_nm)?;
        write_json(&plan, dir.join("plan.json"))?;
        let stack = simulate_stack(&phase, &probe, &plan, rc)?;
        stack.write(volume_path(dir, "stack"))?;
        Ok((stack, probe))
    })?;

    timer.run("approximant", || {
        let result = approximant(&stack, &probe, rc)?;
        write_volume(&result.volume, volume_path(dir, "approximant"))?;
        write_loss_log(&result.loss_log, &dir.join("loss.jsonl"))?;
        volumes.push(("approximant", result.volume));
        Ok(())
    })?;

    timer.run("baselines", || {
        let sino = match cfg.projections {
            ProjectionSource::Radon => radon(&phase, &stack.plan().angles_deg)?,
            ProjectionSource::Ptycho => ptycho_sinogram(&stack, &probe, rc, rc.gold_iters)?,
        };
        let (dims, pitch) = (phase.dims(), phase.pitch());
        for (name, vol) in [
            ("fbp", fbp(&sino, dims, pitch)?),
            ("sirt", sirt(&sino, dims, pitch, cfg.sirt_iters)?),
            ("sart", sart(&sino, dims, pitch, rc.sart_iters)?),
        ] {
            write_volume(&vol, volume_path(dir, name))?;
            volumes.push((name, vol));
        }
        Ok(())
    })?;

    timer.run("metrics", || {
        let reports: BTreeMap<&str, MetricsReport> = volumes
            .iter()
            .map(|(name, v)| Ok((*name, evaluate(&phase, v)?)))
            .collect::<Result<_>>()?;
        write_json(&reports, dir.join("metrics.json"))
    })?;

    timer.run("analysis", || {
        let mut fractions = BTreeMap::new();
        fractions.insert("truth".to_string(), wedge_fraction(&phase, cfg.half_range)?);
        for (name, v) in &volumes {
            fractions.insert(name.to_string(), wedge_fraction(v, cfg.half_range)?);
        }
        write_json(&WedgeSummary { half_range: cfg.half_range, fractions }, dir.join("analysis.json"))
    })?;

    let digest = |name: &str, path: PathBuf| -> Result<Artifact> {
        Ok(Artifact { name: name.into(), sha256: file_digest(&path)?, path })
    };
    let manifest = PipelineManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        seed: rc.seed,
        artifacts: VOLUMES.iter().map(|n| digest(n, volume_path(dir, n))).collect::<Result<_>>()?,
        reports: REPORTS.iter().map(|(n, f)| digest(n, dir.join(f))).collect::<Result<_>>()?,
        stages: timer.stages,
    };
    write_json(&manifest, dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

pub fn write_loss_log(log: &[crate::approximant::LossRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in log {
        let line = serde_json::to_string(rec).map_err(|e| Error::json("loss record", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Re-reads every listed artifact and checks its digest.
pub fn verify_manifest(manifest: &PipelineManifest) -> Result<()> {
    for a in manifest.artifacts.iter().chain(&manifest.reports) {
        if file_digest(&a.path)? != a.sha256 {
            return Err(Error::Degenerate(format!("digest of {} changed", a.path.display())));
        }
    }
    for a in &manifest.artifacts {
        if a.name == "stack" {
            DiffractionStack::read(&a.path)?;
        } else {
            read_volume(&a.path)?;
        }
    }
    Ok(())
}
