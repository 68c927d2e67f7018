use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use xpt_core::config::{write_json, RunConfig};
use xpt_core::phantom::PhantomSpec;
use xpt_core::pipeline::{PipelineConfig, PipelineManifest};
use xpt_core::scanplan::ScanPlan;
use xpt_core::volume::{read_volume, write_volume, Volume, VolumeKind};

fn xpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xpt"))
        .args(args)
        .env_remove("XPT_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom_spec() -> PhantomSpec {
    let mut spec = PhantomSpec::cube(16, 2);
    spec.layer_count = 3;
    spec.margin = [3, 2, 3];
    spec
}

fn run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.slice_count = 2;
    cfg.mode_count = 2;
    cfg.gold_iters = 5;
    cfg
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_json(&phantom_spec(), dir.path().join("phantom.json")).unwrap();
        write_json(&run_config(), dir.path().join("run.json")).unwrap();
        let cfg = run_config();
        let plan = ScanPlan::standard(4, 60.0, [16, 16], cfg.detector_pixels, 0.75, cfg.pixel_pitch_nm).unwrap();
        write_json(&plan, dir.path().join("plan.json")).unwrap();
        Fixture { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn ps(&self, name: &str) -> String {
        s(&self.p(name)).to_string()
    }

    fn phantom(&self) {
        let out = xpt(&["phantom", "--spec", &self.ps("phantom.json"), "--out-label", &self.ps("label.xptv"), "--out-phase", &self.ps("phase.xptv")]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }

    fn simulate(&self) {
        self.phantom();
        let out = xpt(&[
            "simulate", "--phase", &self.ps("phase.xptv"), "--plan", &self.ps("plan.json"), "--config", &self.ps("run.json"),
            "--out", &self.ps("stack.xptv"), "--out-probe", &self.ps("probe.xptv"),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["phantom", "simulate", "approximant", "reconstruct", "metrics", "psd", "sweep", "pipeline"] {
        let out = xpt(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&xpt(&["phantom"])), 2);
    assert_eq!(code(&xpt(&["nonsense"])), 2);
    assert_eq!(code(&xpt(&["reconstruct", "--method", "radial", "--out", "x.xptv"])), 2);
    assert_eq!(code(&xpt(&["--workers", "0", "psd", "--in", "a", "--out", "b"])), 2);
}

#[test]
fn staged_run_end_to_end() {
    let f = Fixture::new();
    f.simulate();
    assert!(f.p("stack.index.json").exists());

    let out = xpt(&[
        "approximant", "--stack", &f.ps("stack.xptv"), "--plan", &f.ps("plan.json"), "--probe", &f.ps("probe.xptv"),
        "--config", &f.ps("run.json"), "--out", &f.ps("approx.xptv"), "--log", &f.ps("loss.jsonl"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_volume(f.p("approx.xptv")).unwrap().dims(), [16, 16, 16]);
    let log = std::fs::read_to_string(f.p("loss.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["n", "iter", "loss"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    for method in ["fbp", "sart", "gold"] {
        let name = format!("{method}.xptv");
        let out = xpt(&[
            "reconstruct", "--method", method, "--stack", &f.ps("stack.xptv"), "--config", &f.ps("run.json"),
            "--iters", "3", "--out", &f.ps(&name),
        ]);
        assert_eq!(code(&out), 0, "{method}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(read_volume(f.p(&name)).unwrap().dims(), [16, 16, 16]);
    }

    let out = xpt(&["metrics", "--ref", &f.ps("phase.xptv"), "--test", &f.ps("sart.xptv"), "--out", &f.ps("report.json")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(f.p("report.json")).unwrap()).unwrap();
    for key in ["pcc", "ms_ssim", "dsc", "ber", "thresholds", "priors", "confusion"] {
        assert!(report.get(key).is_some(), "{key}");
    }

    let out = xpt(&[
        "psd", "--in", &f.ps("phase.xptv"), "--out", &f.ps("psd.xptv"), "--half-range", "60", "--report", &f.ps("wedge.json"),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(read_volume(f.p("psd.xptv")).unwrap().kind(), VolumeKind::Psd);
    let wedge: Value = serde_json::from_str(&std::fs::read_to_string(f.p("wedge.json")).unwrap()).unwrap();
    assert!(wedge["fraction"].as_f64().unwrap() > 0.0);

    // Every stderr line is a JSON object.
    for line in String::from_utf8_lossy(&out.stderr).lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v.get("level").is_some());
    }
}

#[test]
fn reconstruct_from_sinogram() {
    let f = Fixture::new();
    f.phantom();
    let phase = read_volume(f.p("phase.xptv")).unwrap();
    let plan = ScanPlan::load(f.p("plan.json")).unwrap();
    let sino = xpt_core::tomo::radon(&phase, &plan.angles_deg).unwrap();
    write_volume(&sino.to_volume(), f.p("sino.xptv")).unwrap();
    let out = xpt(&[
        "reconstruct", "--method", "sirt", "--sino", &f.ps("sino.xptv"), "--angles", &f.ps("plan.json"), "--iters", "5",
        "--out", &f.ps("sirt.xptv"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_volume(f.p("sirt.xptv")).unwrap().dims(), [16, 16, 16]);
    // Gold cannot start from a sinogram.
    let out = xpt(&[
        "reconstruct", "--method", "gold", "--sino", &f.ps("sino.xptv"), "--angles", &f.ps("plan.json"), "--out", &f.ps("g.xptv"),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let f = Fixture::new();
    f.phantom();
    let again = ["phantom", "--spec", &f.ps("phantom.json"), "--out-label", &f.ps("label.xptv"), "--out-phase", &f.ps("phase.xptv")];
    assert_eq!(code(&xpt(&again)), 2);
    let mut forced = again.to_vec();
    forced.push("--force");
    assert_eq!(code(&xpt(&forced)), 0);
}

#[test]
fn corrupted_input_is_a_data_error() {
    let f = Fixture::new();
    f.simulate();
    let mut bytes = std::fs::read(f.p("stack.xptv")).unwrap();
    bytes[0] = b'Q';
    std::fs::write(f.p("stack.xptv"), &bytes).unwrap();
    let out = xpt(&["approximant", "--stack", &f.ps("stack.xptv"), "--out", &f.ps("approx.xptv")]);
    assert_eq!(code(&out), 3);
    assert!(!f.p("approx.xptv").exists());

    bytes = std::fs::read(f.p("phase.xptv")).unwrap();
    bytes.truncate(bytes.len() - 9);
    std::fs::write(f.p("phase.xptv"), &bytes).unwrap();
    let out = xpt(&["psd", "--in", &f.ps("phase.xptv"), "--out", &f.ps("psd.xptv")]);
    assert_eq!(code(&out), 3);
}

#[test]
fn degenerate_input_is_a_numerical_error() {
    let f = Fixture::new();
    let flat = Volume::zeros([8, 8, 8], [1.0; 3], VolumeKind::Phase).unwrap();
    write_volume(&flat, f.p("flat.xptv")).unwrap();
    let out = xpt(&["metrics", "--ref", &f.ps("flat.xptv"), "--test", &f.ps("flat.xptv"), "--out", &f.ps("r.json")]);
    assert_eq!(code(&out), 4);
}

fn pipeline_config(dir: &Path) -> PathBuf {
    let mut phantom = PhantomSpec::cube(32, 5);
    phantom.margin = [8, 6, 8];
    let mut cfg = PipelineConfig::with_phantom(phantom);
    cfg.n_angles = 5;
    cfg.overlap = 0.75;
    cfg.sirt_iters = 10;
    let path = dir.join("pipeline.json");
    write_json(&cfg, &path).unwrap();
    path
}

fn pipeline(config: &Path, out: &Path, seed: &str) -> (i32, Option<PipelineManifest>) {
    let o = Command::new(env!("CARGO_BIN_EXE_xpt"))
        .args(["--workers", "2", "pipeline", "--config", s(config), "--out", s(out)])
        .env("XPT_SEED", seed)
        .output()
        .unwrap();
    let manifest = xpt_core::config::read_json(out.join("manifest.json")).ok();
    (code(&o), manifest)
}

#[test]
fn pipeline_is_deterministic_and_seedable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pipeline_config(dir.path());
    let (ca, a) = pipeline(&cfg, &dir.path().join("a"), "11");
    let (cb, b) = pipeline(&cfg, &dir.path().join("b"), "11");
    let (cc, c) = pipeline(&cfg, &dir.path().join("c"), "12");
    assert_eq!((ca, cb, cc), (0, 0, 0));
    let (a, b, c) = (a.unwrap(), b.unwrap(), c.unwrap());
    assert_eq!(a.artifacts.len(), 7);
    assert_eq!(a.seed, 11);
    assert_eq!(a.config_hash, b.config_hash);
    assert_ne!(a.config_hash, c.config_hash);
    for (x, y) in a.artifacts.iter().zip(&b.artifacts) {
        assert_eq!(x.sha256, y.sha256, "{}", x.name);
    }
    let stack = |m: &PipelineManifest| m.artifact("stack").unwrap().sha256.clone();
    assert_ne!(stack(&a), stack(&c));
    // Rerunning into a finished directory needs --force.
    assert_eq!(pipeline(&cfg, &dir.path().join("a"), "11").0, 2);
}

#[test]
fn sweep_writes_csv_and_plot_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = xpt_core::analysis::SweepSpec::with_phantom(PhantomSpec::cube(16, 1));
    spec.n_list = vec![12, 6, 3];
    spec.theta_list = vec![70.0, 30.0];
    spec.sirt_iters = 5;
    write_json(&spec, dir.path().join("sweep.json")).unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = xpt(&["sweep", "--spec", s(&dir.path().join("sweep.json")), "--out", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("N,theta,method,pcc,ms_ssim,dsc,ber,wall_time_s"));
    assert_eq!(text.lines().count(), 1 + 3 * (3 + 1));
    for metric in ["pcc", "ms_ssim", "dsc", "ber", "knees"] {
        assert!(dir.path().join(format!("sweep.{metric}.json")).exists(), "{metric}");
    }
}
