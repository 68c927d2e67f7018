//! Missing-wedge spectra and the two-stage (N, theta) operating-point sweep.

use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximant::approximant;
use crate::config::{write_json, RunConfig};
use crate::error::{Error, Result};
use crate::fft::{fft_nd, freq_index};
use crate::metrics::evaluate;
use crate::optics::{make_probe, ProbeSet};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::ptychosim::{simulate_stack, DiffractionStack};
use crate::scanplan::{make_angles, ScanPlan};
use crate::tomo::{fbp, gold_pipeline, ptycho_sinogram, radon, sart, sirt, Sinogram};
use crate::volume::{Volume, VolumeKind};

/// `|F v|^2` under the unitary 3D DFT, zero frequency moved to `n / 2`
/// along every axis.
pub fn psd3d(v: &Volume) -> Result<Volume> {
    let dims = v.dims();
    let mut spec: Vec<Complex64> = v.data().iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_nd(&mut spec, &dims, false);
    let [nz, ny, nx] = dims;
    let mut out = vec![0.0; spec.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let k = ((z + nz / 2) % nz * ny + (y + ny / 2) % ny) * nx + (x + nx / 2) % nx;
                out[k] = spec[(z * ny + y) * nx + x].norm_sqr();
            }
        }
    }
    let pitch = v.pitch();
    let fpitch = [1.0 / (nz as f64 * pitch[0]), 1.0 / (ny as f64 * pitch[1]), 1.0 / (nx as f64 * pitch[2])];
    Volume::new(dims, fpitch, VolumeKind::Psd, out)
}

/// Signed frequency of centered index `i` on an `n`-point axis.
fn centered_freq(i: usize, n: usize) -> isize {
    freq_index((i + n - n / 2) % n, n)
}

/// Whether a `(kz, kx)` direction lies outside the fan sampled by
/// projections over `+-half_range_deg` about y.
pub fn in_missing_wedge(kz: f64, kx: f64, half_range_deg: f64) -> bool {
    if kz == 0.0 {
        return false;
    }
    kz.abs().atan2(kx.abs()).to_degrees() > half_range_deg
}

/// Spectral energy `(in_wedge, total)` of a centered PSD, DC excluded.
/// Frequencies are taken in physical units from the PSD's pitch.
pub fn wedge_energy(psd: &Volume, half_range_deg: f64) -> Result<(f64, f64)> {
    if psd.kind() != VolumeKind::Psd {
        return Err(Error::InvalidArgument("wedge_energy expects a PSD volume".into()));
    }
    if !(0.0..=90.0).contains(&half_range_deg) {
        return Err(Error::InvalidArgument(format!("half range {half_range_deg} outside [0, 90]")));
    }
    let [nz, ny, nx] = psd.dims();
    let [fz, _, fx] = psd.pitch();
    let (mut wedge, mut total) = (0.0, 0.0);
    for z in 0..nz {
        let kz = centered_freq(z, nz) as f64 * fz;
        for y in 0..ny {
            for x in 0..nx {
                if z == nz / 2 && y == ny / 2 && x == nx / 2 {
                    continue;
                }
                let e = psd.get(z, y, x);
                total += e;
                if in_missing_wedge(kz, centered_freq(x, nx) as f64 * fx, half_range_deg) {
                    wedge += e;
                }
            }
        }
    }
    Ok((wedge, total))
}

/// Share of a volume's non-DC spectral energy inside the missing wedge.
pub fn wedge_fraction(v: &Volume, half_range_deg: f64) -> Result<f64> {
    let (w, t) = wedge_energy(&psd3d(v)?, half_range_deg)?;
    Ok(if t > 0.0 { w / t } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fbp,
    Sirt,
    Sart,
    Approximant,
    Gold,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fbp => "fbp",
            Method::Sirt => "sirt",
            Method::Sart => "sart",
            Method::Approximant => "approximant",
            Method::Gold => "gold",
        }
    }

    fn needs_stack(self) -> bool {
        matches!(self, Method::Approximant | Method::Gold)
    }
}

/// Where the baselines' projections come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionSource {
    /// Exact line integrals of the phantom.
    #[default]
    Radon,
    /// Thin-object ptychographic phase projections of a simulated stack.
    Ptycho,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pcc,
    MsSsim,
    Dsc,
    Ber,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Pcc, Metric::MsSsim, Metric::Dsc, Metric::Ber];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Pcc => "pcc",
            Metric::MsSsim => "ms_ssim",
            Metric::Dsc => "dsc",
            Metric::Ber => "ber",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Ber
    }

    pub fn of(self, row: &SweepRow) -> f64 {
        match self {
            Metric::Pcc => row.pcc,
            Metric::MsSsim => row.ms_ssim,
            Metric::Dsc => row.dsc,
            Metric::Ber => row.ber,
        }
    }
}

fn default_n_list() -> Vec<usize> {
    vec![60, 30, 20, 10, 5]
}
fn default_theta_list() -> Vec<f64> {
    vec![70.0, 55.0, 40.0, 30.0, 17.0, 10.0]
}
fn default_methods() -> Vec<Method> {
    vec![Method::Fbp, Method::Sirt, Method::Sart]
}
fn default_overlap() -> f64 {
    0.9
}
fn default_sirt_iters() -> usize {
    50
}
fn default_tolerance() -> f64 {
    0.05
}

/// Everything a sweep needs; the on-disk form of `xpt sweep --spec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub config: RunConfig,
    /// Tomo-scan counts for stage one, any order; swept descending.
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
    /// Half ranges in degrees for stage two; swept descending.
    #[serde(default = "default_theta_list")]
    pub theta_list: Vec<f64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub projections: ProjectionSource,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default = "default_sirt_iters")]
    pub sirt_iters: usize,
    /// Relative drop from the densest point that ends the knee search.
    #[serde(default = "default_tolerance")]
    pub knee_tolerance: f64,
    /// Method whose mean knee picks N for stage two; the first method when absent.
    #[serde(default)]
    pub select_by: Option<Method>,
}

impl SweepSpec {
    pub fn with_phantom(phantom: PhantomSpec) -> Self {
        SweepSpec {
            phantom,
            config: RunConfig::default(),
            n_list: default_n_list(),
            theta_list: default_theta_list(),
            methods: default_methods(),
            projections: ProjectionSource::default(),
            overlap: default_overlap(),
            sirt_iters: default_sirt_iters(),
            knee_tolerance: default_tolerance(),
            select_by: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.phantom.validate()?;
        self.config.validate()?;
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return bad("n_list must hold positive counts");
        }
        if self.theta_list.is_empty() || self.theta_list.iter().any(|t| !(0.0..=90.0).contains(t)) {
            return bad("theta_list must hold half ranges in [0, 90]");
        }
        if self.methods.is_empty() {
            return bad("methods is empty");
        }
        if !(0.0..1.0).contains(&self.knee_tolerance) {
            return bad("knee_tolerance must be in [0, 1)");
        }
        if let Some(m) = self.select_by {
            if !self.methods.contains(&m) {
                return bad("select_by must be one of methods");
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: SweepSpec = crate::config::read_json(path)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One (operating point, method) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub theta: f64,
    pub method: Method,
    pub pcc: f64,
    pub ms_ssim: f64,
    pub dsc: f64,
    pub ber: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knee {
    pub method: Method,
    pub metric: Metric,
    /// N for stage one, theta for stage two.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub n_knees: Vec<Knee>,
    pub theta_knees: Vec<Knee>,
    /// N used for stage two and the theta knee of the selecting method.
    pub chosen_n: usize,
    pub chosen_theta: f64,
}

/// Last budget before a metric falls more than `tolerance` (relative) from
/// its value at the first, densest point. `points` run dense to sparse.
pub fn knee(points: &[(f64, f64)], higher_is_better: bool, tolerance: f64) -> Option<f64> {
    let &(first_budget, dense) = points.first()?;
    let score = |v: f64| if higher_is_better { v } else { 1.0 - v };
    let floor = score(dense) - tolerance * score(dense).abs();
    let mut last = first_budget;
    for &(budget, v) in &points[1..] {
        if !(score(v) >= floor) {
            break;
        }
        last = budget;
    }
    Some(last)
}

/// Mean of per-metric knees for one method.
pub fn mean_knee(knees: &[Knee], method: Method) -> Option<f64> {
    let vals: Vec<f64> = knees.iter().filter(|k| k.method == method).map(|k| k.value).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

impl SweepResult {
    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// Stage-one curve `(N, value)` at the largest theta, dense first.
    pub fn n_curve(&self, method: Method, metric: Metric, theta: f64) -> Vec<(f64, f64)> {
        let mut c: Vec<(f64, f64)> = self
            .rows_for(method)
            .filter(|r| r.theta == theta)
            .map(|r| (r.n as f64, metric.of(r)))
            .collect();
        c.sort_by(|a, b| b.0.total_cmp(&a.0));
        c
    }

    /// Stage-two curve `(theta, value)` at the chosen N, widest first.
    pub fn theta_curve(&self, method: Method, metric: Metric) -> Vec<(f64, f64)> {
        let mut c: Vec<(f64, f64)> = self
            .rows_for(method)
            .filter(|r| r.n == self.chosen_n)
            .map(|r| (r.theta, metric.of(r)))
            .collect();
        c.sort_by(|a, b| b.0.total_cmp(&a.0));
        c
    }
}

/// Shared inputs of every sweep point.
struct SweepContext {
    spec: SweepSpec,
    phase: Volume,
    probe: ProbeSet,
}

impl SweepContext {
    fn new(spec: &SweepSpec) -> Result<Self> {
        spec.validate()?;
        let (_, phase) = generate_phantom(&spec.phantom)?;
        let cfg = &spec.config;
        let d = cfg.detector_pixels;
        let probe = make_probe(cfg.mode_count, cfg.probe_waist_nm, (d, d, cfg.pixel_pitch_nm), cfg.probe_power_decay, cfg.seed)?;
        Ok(SweepContext { spec: spec.clone(), phase, probe })
    }

    fn stack(&self, n: usize, theta: f64) -> Result<DiffractionStack> {
        let [_, ny, nx] = self.phase.dims();
        let cfg = &self.spec.config;
        let plan = ScanPlan::standard(n, theta, [ny, nx], cfg.detector_pixels, self.spec.overlap, cfg.pixel_pitch_nm)?;
        simulate_stack(&self.phase, &self.probe, &plan, cfg)
    }

    fn point(&self, n: usize, theta: f64) -> Result<Vec<SweepRow>> {
        let spec = &self.spec;
        let needs_stack = spec.methods.iter().any(|m| m.needs_stack()) || spec.projections == ProjectionSource::Ptycho;
        let stack = if needs_stack { Some(self.stack(n, theta)?) } else { None };
        let mut sino: Option<Sinogram> = None;
        let (dims, pitch) = (self.phase.dims(), self.phase.pitch());
        let mut rows = Vec::with_capacity(spec.methods.len());
        for &method in &spec.methods {
            let start = Instant::now();
            let volume = if method.needs_stack() {
                let stack = stack.as_ref().expect("stack built for stack methods");
                match method {
                    Method::Approximant => approximant(stack, &self.probe, &spec.config)?.volume,
                    _ => gold_pipeline(stack, &self.probe, &spec.config)?.volume,
                }
            } else {
                if sino.is_none() {
                    sino = Some(match (spec.projections, &stack) {
                        (ProjectionSource::Ptycho, Some(stack)) => ptycho_sinogram(stack, &self.probe, &spec.config, spec.config.gold_iters)?,
                        _ => radon(&self.phase, &make_angles(n, theta)?)?,
                    });
                }
                let s = sino.as_ref().expect("sinogram built above");
                match method {
                    Method::Fbp => fbp(s, dims, pitch)?,
                    Method::Sirt => sirt(s, dims, pitch, spec.sirt_iters)?,
                    _ => sart(s, dims, pitch, spec.config.sart_iters)?,
                }
            };
            let wall_time_s = start.elapsed().as_secs_f64();
            let report = evaluate(&self.phase, &volume)?;
            rows.push(SweepRow {
                n,
                theta,
                method,
                pcc: report.pcc,
                ms_ssim: report.ms_ssim,
                dsc: report.dsc,
                ber: report.ber,
                wall_time_s,
            });
        }
        Ok(rows)
    }

    /// Evaluates points in parallel; row order follows `points`.
    fn run(&self, points: &[(usize, f64)]) -> Result<Vec<SweepRow>> {
        let per: Vec<Vec<SweepRow>> = points.par_iter().map(|&(n, t)| self.point(n, t)).collect::<Result<_>>()?;
        Ok(per.concat())
    }
}

fn knees_for(spec: &SweepSpec, curve: impl Fn(Method, Metric) -> Vec<(f64, f64)>) -> Vec<Knee> {
    let mut out = Vec::new();
    for &method in &spec.methods {
        for metric in Metric::ALL {
            if let Some(value) = knee(&curve(method, metric), metric.higher_is_better(), spec.knee_tolerance) {
                out.push(Knee { method, metric, value });
            }
        }
    }
    out
}

/// Stage one sweeps N at the widest theta; stage two sweeps theta at the N
/// closest to the selecting method's mean knee. Points inside a stage run
/// on the current rayon pool.
pub fn sweep(spec: &SweepSpec) -> Result<SweepResult> {
    let ctx = SweepContext::new(spec)?;
    let mut ns = spec.n_list.clone();
    ns.sort_unstable_by(|a, b| b.cmp(a));
    ns.dedup();
    let mut thetas = spec.theta_list.clone();
    thetas.sort_by(|a, b| b.total_cmp(a));
    thetas.dedup();
    let theta_max = thetas[0];
    let select = spec.select_by.unwrap_or(spec.methods[0]);

    let stage1: Vec<(usize, f64)> = ns.iter().map(|&n| (n, theta_max)).collect();
    let mut result = SweepResult {
        rows: ctx.run(&stage1)?,
        n_knees: Vec::new(),
        theta_knees: Vec::new(),
        chosen_n: ns[0],
        chosen_theta: theta_max,
    };
    result.n_knees = knees_for(spec, |m, k| result.n_curve(m, k, theta_max));
    if let Some(target) = mean_knee(&result.n_knees, select) {
        // Nearest listed N; ties go to the larger count.
        result.chosen_n = *ns
            .iter()
            .min_by(|a, b| ((**a as f64) - target).abs().total_cmp(&((**b as f64) - target).abs()).then(b.cmp(a)))
            .expect("n_list is non-empty");
    }

    let stage2: Vec<(usize, f64)> = thetas[1..].iter().map(|&t| (result.chosen_n, t)).collect();
    let more = ctx.run(&stage2)?;
    result.rows.extend(more);
    result.theta_knees = knees_for(spec, |m, k| result.theta_curve(m, k));
    if let Some(t) = mean_knee(&result.theta_knees, select) {
        result.chosen_theta = t;
    }
    Ok(result)
}

/// Writes the rows as CSV with the exact field header.
pub fn write_sweep_csv(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in &result.rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Debug, Serialize)]
struct CurveSet {
    method: Method,
    points: Vec<(f64, f64)>,
}

/// Plot-ready form of one metric across both stages.
#[derive(Debug, Serialize)]
struct MetricCurves {
    metric: Metric,
    higher_is_better: bool,
    theta_stage1: f64,
    n_stage2: usize,
    by_n: Vec<CurveSet>,
    by_theta: Vec<CurveSet>,
    n_knees: Vec<Knee>,
    theta_knees: Vec<Knee>,
}

/// One JSON file per metric, named `<stem>.<metric>.json` beside `csv_path`,
/// plus `<stem>.knees.json` with the per-metric knees and their means.
pub fn write_sweep_json(result: &SweepResult, csv_path: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let csv_path = csv_path.as_ref();
    let stem = csv_path.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    let dir = csv_path.parent().unwrap_or(Path::new("."));
    let mut methods: Vec<Method> = Vec::new();
    for r in &result.rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let theta_max = result.rows.iter().map(|r| r.theta).fold(f64::NEG_INFINITY, f64::max);
    let mut written = Vec::new();
    for metric in Metric::ALL {
        let curves = MetricCurves {
            metric,
            higher_is_better: metric.higher_is_better(),
            theta_stage1: theta_max,
            n_stage2: result.chosen_n,
            by_n: methods.iter().map(|&m| CurveSet { method: m, points: result.n_curve(m, metric, theta_max) }).collect(),
            by_theta: methods.iter().map(|&m| CurveSet { method: m, points: result.theta_curve(m, metric) }).collect(),
            n_knees: result.n_knees.iter().filter(|k| k.metric == metric).cloned().collect(),
            theta_knees: result.theta_knees.iter().filter(|k| k.metric == metric).cloned().collect(),
        };
        let path = dir.join(format!("{stem}.{}.json", metric.name()));
        write_json(&curves, &path)?;
        written.push(path);
    }
    let means: Vec<serde_json::Value> = methods
        .iter()
        .map(|&m| {
            serde_json::json!({
                "method": m,
                "mean_n_knee": mean_knee(&result.n_knees, m),
                "mean_theta_knee": mean_knee(&result.theta_knees, m),
            })
        })
        .collect();
    let summary = serde_json::json!({
        "chosen_n": result.chosen_n,
        "chosen_theta": result.chosen_theta,
        "n_knees": result.n_knees,
        "theta_knees": result.theta_knees,
        "means": means,
    });
    let path = dir.join(format!("{stem}.knees.json"));
    write_json(&summary, &path)?;
    written.push(path);
    Ok(written)
}
