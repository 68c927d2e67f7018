use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use xpt_core::analysis::{psd3d, read_sweep_csv, sweep, wedge_energy, write_sweep_csv, write_sweep_json, SweepSpec};
use xpt_core::approximant::approximant;
use xpt_core::config::{read_json, write_json, RunConfig};
use xpt_core::metrics::evaluate;
use xpt_core::optics::{make_probe, ProbeSet};
use xpt_core::phantom::{generate_phantom, PhantomSpec};
use xpt_core::pipeline::{run_pipeline, write_loss_log, PipelineConfig};
use xpt_core::ptychosim::{simulate_stack, DiffractionStack};
use xpt_core::scanplan::ScanPlan;
use xpt_core::tomo::{fbp, gold_pipeline, ptycho_sinogram, sart, sirt, Sinogram};
use xpt_core::volume::{read_complex_stack, read_volume, write_complex_stack, write_volume};
use xpt_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

/// Ptycho-tomography simulation and reconstruction toolkit.
#[derive(Parser)]
#[command(name = "xpt", version)]
struct Cli {
    /// Cap on worker threads; all available cores when absent.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Overrides the run-config seed.
    #[arg(long, env = "XPT_SEED", hide_env_values = true, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a layered phantom.
    Phantom {
        /// Phantom spec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_label: PathBuf,
        #[arg(long)]
        out_phase: PathBuf,
    },
    /// Simulate a diffraction stack from a phase volume.
    Simulate {
        #[arg(long)]
        phase: PathBuf,
        /// Scan plan JSON.
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Stack container; its JSON index is written alongside.
        #[arg(long)]
        out: PathBuf,
        /// Also write the probe used, as a complex stack.
        #[arg(long)]
        out_probe: Option<PathBuf>,
    },
    /// Run the Approximant on a diffraction stack.
    Approximant {
        #[arg(long)]
        stack: PathBuf,
        /// Scan plan JSON; must match the stack's own index when given.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        probe: ProbeArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Loss log as JSON lines of (n, iter, loss).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Tomographic reconstruction from a stack or a sinogram.
    Reconstruct {
        #[arg(long, value_enum)]
        method: ReconMethod,
        /// Diffraction stack; projections come from thin-object phase retrieval.
        #[arg(long, conflicts_with = "sino", required_unless_present = "sino")]
        stack: Option<PathBuf>,
        /// Sinogram container with dims (angles, y, x).
        #[arg(long, requires = "angles")]
        sino: Option<PathBuf>,
        /// Scan plan JSON giving the sinogram's angles.
        #[arg(long)]
        angles: Option<PathBuf>,
        /// Output z-count for sinogram input; the x-count when absent.
        #[arg(long)]
        nz: Option<usize>,
        /// Iterations for SIRT / SART; the configured defaults when absent.
        #[arg(long)]
        iters: Option<usize>,
        #[command(flatten)]
        probe: ProbeArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a test volume with a reference.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Power spectral density of a volume.
    Psd {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also report missing-wedge energy for this half range (degrees).
        #[arg(long, requires = "report")]
        half_range: Option<f64>,
        /// Wedge energy JSON.
        #[arg(long, requires = "half_range")]
        report: Option<PathBuf>,
    },
    /// Two-stage operating-point sweep.
    Sweep {
        /// Sweep spec JSON.
        #[arg(long)]
        spec: PathBuf,
        /// CSV of all rows; per-metric and knee JSON files are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// End-to-end run into a directory, finished by a manifest.
    Pipeline {
        /// Pipeline config JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run config JSON; defaults for every field when absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Probe complex stack; regenerated from the run config when absent.
    #[arg(long)]
    probe: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReconMethod {
    Fbp,
    Sirt,
    Sart,
    Gold,
}

fn log(level: &str, event: &str, fields: Value) {
    let mut line = json!({ "level": level, "event": event });
    if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), fields) {
        obj.extend(extra);
    }
    eprintln!("{line}");
}

struct Ctx {
    force: bool,
    seed: Option<u64>,
}

impl Ctx {
    fn check_out(&self, paths: &[&Path]) -> Result<(), Error> {
        if !self.force {
            if let Some(p) = paths.iter().find(|p| p.exists()) {
                return Err(Error::Exists(p.to_path_buf()));
            }
        }
        Ok(())
    }

    fn apply_seed(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
    }

    fn run_config(&self, args: &RunArgs) -> Result<RunConfig, Error> {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply_seed(&mut cfg);
        Ok(cfg)
    }
}

fn config_probe(cfg: &RunConfig) -> Result<ProbeSet, Error> {
    let d = cfg.detector_pixels;
    make_probe(cfg.mode_count, cfg.probe_waist_nm, (d, d, cfg.pixel_pitch_nm), cfg.probe_power_decay, cfg.seed)
}

fn load_probe(args: &ProbeArgs, cfg: &RunConfig) -> Result<ProbeSet, Error> {
    match &args.probe {
        Some(p) => ProbeSet::from_weighted(read_complex_stack(p)?),
        None => config_probe(cfg),
    }
}

fn run(cli: Cli) -> Result<Value, Error> {
    let ctx = Ctx { force: cli.force, seed: cli.seed };
    match cli.command {
        Command::Phantom { spec, out_label, out_phase } => {
            ctx.check_out(&[&out_label, &out_phase])?;
            let spec: PhantomSpec = read_json(&spec)?;
            let (label, phase) = generate_phantom(&spec)?;
            write_volume(&label, &out_label)?;
            write_volume(&phase, &out_phase)?;
            Ok(json!({ "dims": spec.dims, "fill": label.data().iter().sum::<f64>() / label.len() as f64 }))
        }
        Command::Simulate { phase, plan, run, out, out_probe } => {
            let index = DiffractionStack::index_path(&out);
            let mut outs = vec![out.as_path(), index.as_path()];
            outs.extend(out_probe.as_deref());
            ctx.check_out(&outs)?;
            let cfg = ctx.run_config(&run)?;
            let phase = read_volume(&phase)?;
            let plan = ScanPlan::load(&plan)?;
            let probe = config_probe(&cfg)?;
            let stack = simulate_stack(&phase, &probe, &plan, &cfg)?;
            stack.write(&out)?;
            if let Some(p) = out_probe {
                write_complex_stack(&probe.weighted_modes(), p)?;
            }
            Ok(json!({ "exposures": plan.exposure_count(), "angles": plan.len() }))
        }
        Command::Approximant { stack, plan, probe, run, out, log: loss_path } => {
            let mut outs = vec![out.as_path()];
            outs.extend(loss_path.as_deref());
            ctx.check_out(&outs)?;
            let cfg = ctx.run_config(&run)?;
            let stack = DiffractionStack::read(&stack)?;
            if let Some(p) = plan {
                if &ScanPlan::load(&p)? != stack.plan() {
                    return Err(Error::Config(format!("{} disagrees with the stack's scan plan", p.display())));
                }
            }
            let probe = load_probe(&probe, &cfg)?;
            let result = approximant(&stack, &probe, &cfg)?;
            write_volume(&result.volume, &out)?;
            if let Some(p) = loss_path {
                write_loss_log(&result.loss_log, &p)?;
            }
            let records = result.loss_log.len();
            Ok(json!({ "dims": result.volume.dims(), "loss_records": records }))
        }
        Command::Reconstruct { method, stack, sino, angles, nz, iters, probe, run, out } => {
            ctx.check_out(&[&out])?;
            let cfg = ctx.run_config(&run)?;
            let volume = match (stack, sino) {
                (Some(stack), _) => {
                    let stack = DiffractionStack::read(&stack)?;
                    let probe = load_probe(&probe, &cfg)?;
                    let (dims, pitch) = (stack.volume_dims(), stack.volume_pitch());
                    let mut cfg = cfg;
                    if let (ReconMethod::Gold, Some(k)) = (method, iters) {
                        cfg.sart_iters = k;
                    }
                    match method {
                        ReconMethod::Gold => gold_pipeline(&stack, &probe, &cfg)?.volume,
                        m => {
                            let s = ptycho_sinogram(&stack, &probe, &cfg, cfg.gold_iters)?;
                            classical(m, &s, dims, pitch, iters, &cfg)?
                        }
                    }
                }
                (None, Some(sino)) => {
                    let plan = ScanPlan::load(angles.as_ref().expect("clap requires --angles"))?;
                    let s = Sinogram::from_volume(&read_volume(&sino)?, plan.angles_deg)?;
                    let (ny, nx) = s.shape();
                    let [py, px] = s.pitch();
                    let dims = [nz.unwrap_or(nx), ny, nx];
                    classical(method, &s, dims, [px, py, px], iters, &cfg)?
                }
                (None, None) => unreachable!("clap requires --stack or --sino"),
            };
            write_volume(&volume, &out)?;
            Ok(json!({ "dims": volume.dims() }))
        }
        Command::Metrics { reference, test, out } => {
            ctx.check_out(&[&out])?;
            let report = evaluate(&read_volume(&reference)?, &read_volume(&test)?)?;
            write_json(&report, &out)?;
            Ok(json!({ "pcc": report.pcc, "ms_ssim": report.ms_ssim, "dsc": report.dsc, "ber": report.ber }))
        }
        Command::Psd { input, out, half_range, report } => {
            let mut outs = vec![out.as_path()];
            outs.extend(report.as_deref());
            ctx.check_out(&outs)?;
            let psd = psd3d(&read_volume(&input)?)?;
            write_volume(&psd, &out)?;
            match (half_range, report) {
                (Some(theta), Some(path)) => {
                    let (in_wedge, total) = wedge_energy(&psd, theta)?;
                    let fraction = if total > 0.0 { in_wedge / total } else { 0.0 };
                    let summary = json!({ "half_range": theta, "in_wedge": in_wedge, "total": total, "fraction": fraction });
                    write_json(&summary, &path)?;
                    Ok(summary)
                }
                _ => Ok(json!({ "dims": psd.dims() })),
            }
        }
        Command::Sweep { spec, out } => {
            ctx.check_out(&[&out])?;
            let mut spec = SweepSpec::load(&spec)?;
            ctx.apply_seed(&mut spec.config);
            let result = sweep(&spec)?;
            write_sweep_csv(&result, &out)?;
            let written = write_sweep_json(&result, &out)?;
            // Round-trip guards against a CSV the plotting side cannot read.
            read_sweep_csv(&out)?;
            Ok(json!({
                "rows": result.rows.len(),
                "chosen_n": result.chosen_n,
                "chosen_theta": result.chosen_theta,
                "json": written,
            }))
        }
        Command::Pipeline { config, out } => {
            let mut cfg = PipelineConfig::load(&config)?;
            ctx.apply_seed(&mut cfg.config);
            let manifest = run_pipeline(&cfg, &out, ctx.force)?;
            for s in &manifest.stages {
                log("info", "stage", json!({ "stage": s.stage, "wall_time_s": s.wall_time_s }));
            }
            Ok(json!({ "config_hash": manifest.config_hash, "artifacts": manifest.artifacts.len() }))
        }
    }
}

fn classical(
    method: ReconMethod,
    s: &Sinogram,
    dims: [usize; 3],
    pitch: [f64; 3],
    iters: Option<usize>,
    cfg: &RunConfig,
) -> Result<xpt_core::volume::Volume, Error> {
    match method {
        ReconMethod::Fbp => fbp(s, dims, pitch),
        ReconMethod::Sirt => sirt(s, dims, pitch, iters.unwrap_or(50)),
        ReconMethod::Sart => sart(s, dims, pitch, iters.unwrap_or(cfg.sart_iters)),
        ReconMethod::Gold => unreachable!("gold is handled with the stack"),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Phantom { .. } => "phantom",
        Command::Simulate { .. } => "simulate",
        Command::Approximant { .. } => "approximant",
        Command::Reconstruct { .. } => "reconstruct",
        Command::Metrics { .. } => "metrics",
        Command::Psd { .. } => "psd",
        Command::Sweep { .. } => "sweep",
        Command::Pipeline { .. } => "pipeline",
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Exists(_) => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(k) = cli.workers {
        if k == 0 {
            log("error", "usage", json!({ "message": "--workers must be >= 1" }));
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            log("warn", "workers", json!({ "message": e.to_string() }));
        }
    }
    if let Command::Reconstruct { method: ReconMethod::Gold, sino: Some(_), .. } = cli.command {
        log("error", "usage", json!({ "message": "--method gold needs --stack" }));
        return ExitCode::from(EXIT_USAGE);
    }
    let name = command_name(&cli.command);
    log("info", "start", json!({ "command": name }));
    let start = Instant::now();
    match run(cli) {
        Ok(summary) => {
            log("info", "done", json!({ "command": name, "wall_time_s": start.elapsed().as_secs_f64(), "summary": summary }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            log("error", "failed", json!({ "command": name, "message": e.to_string(), "exit_code": code }));
            ExitCode::from(code)
        }
    }
}
