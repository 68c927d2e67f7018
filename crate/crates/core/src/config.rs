//! Run configuration and deterministic seed derivation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the modeled far-field amplitude of a mixed state is compared with
/// the measured amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudeModel {
    /// `sqrt(sum_m |psi_m|^2)` against `sqrt(I)`: the incoherent mode sum.
    #[default]
    ModeSum,
    /// Each mode's amplitude `|psi_m|` against `sqrt(I)` separately.
    PerMode,
}

fn default_wavelength() -> f64 {
    // 8.8 keV
    1.239_841_98 / 8.8
}
fn default_slices() -> usize {
    5
}
fn default_modes() -> usize {
    3
}
fn default_pixels() -> usize {
    16
}
fn default_pitch() -> f64 {
    14.0
}
fn default_waist() -> f64 {
    42.0
}
fn default_decay() -> f64 {
    0.5
}
fn default_iters() -> usize {
    2
}
fn default_gamma() -> f64 {
    1.0
}
fn default_gold_iters() -> usize {
    50
}
fn default_sart_iters() -> usize {
    10
}

/// Physics and solver parameters shared by the simulation and the
/// reconstruction stages. Unknown JSON keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_wavelength")]
    pub wavelength_nm: f64,
    /// Number of multi-slices `L`.
    #[serde(default = "default_slices")]
    pub slice_count: usize,
    /// Number of coherent probe modes `M`.
    #[serde(default = "default_modes")]
    pub mode_count: usize,
    /// Distance between slices; derived from the volume thickness when absent.
    #[serde(default)]
    pub slice_spacing_nm: Option<f64>,
    /// Detector (and probe window) edge length in pixels.
    #[serde(default = "default_pixels")]
    pub detector_pixels: usize,
    /// Object-plane pixel pitch; must equal the lateral voxel pitch.
    #[serde(default = "default_pitch")]
    pub pixel_pitch_nm: f64,
    #[serde(default = "default_waist")]
    pub probe_waist_nm: f64,
    #[serde(default = "default_decay")]
    pub probe_power_decay: f64,
    /// Expected photons per exposure; `None` means noiseless.
    #[serde(default)]
    pub photon_count: Option<f64>,
    #[serde(default)]
    pub amplitude_model: AmplitudeModel,
    /// Gradient iterations per tomo-scan for the Approximant.
    #[serde(default = "default_iters")]
    pub approximant_iters: usize,
    #[serde(default = "default_gamma")]
    pub step_gamma: f64,
    /// Output z-count of the Approximant; the volume z-count when absent.
    #[serde(default)]
    pub target_z: Option<usize>,
    /// Thin-object iterations used to form projections in the gold pipeline.
    #[serde(default = "default_gold_iters")]
    pub gold_iters: usize,
    #[serde(default = "default_sart_iters")]
    pub sart_iters: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.wavelength_nm > 0.0 && self.wavelength_nm.is_finite()) {
            return bad("wavelength_nm must be > 0");
        }
        if self.slice_count == 0 {
            return bad("slice_count must be >= 1");
        }
        if self.mode_count == 0 {
            return bad("mode_count must be >= 1");
        }
        if let Some(dz) = self.slice_spacing_nm {
            if !(dz > 0.0 && dz.is_finite()) {
                return bad("slice_spacing_nm must be > 0");
            }
        }
        if self.detector_pixels == 0 {
            return bad("detector_pixels must be >= 1");
        }
        if !(self.pixel_pitch_nm > 0.0) {
            return bad("pixel_pitch_nm must be > 0");
        }
        if !(self.probe_waist_nm > 0.0) {
            return bad("probe_waist_nm must be > 0");
        }
        if !(self.probe_power_decay > 0.0 && self.probe_power_decay.is_finite()) {
            return bad("probe_power_decay must be > 0");
        }
        if let Some(p) = self.photon_count {
            if !(p > 0.0) {
                return bad("photon_count must be > 0 when given");
            }
        }
        if !(self.step_gamma >= 0.0 && self.step_gamma.is_finite()) {
            return bad("step_gamma must be finite and >= 0");
        }
        if self.target_z == Some(0) {
            return bad("target_z must be >= 1");
        }
        Ok(())
    }

    /// Slice spacing for a rotated volume of the given physical thickness.
    pub fn slice_spacing_for(&self, thickness_nm: f64) -> f64 {
        self.slice_spacing_nm
            .unwrap_or(thickness_nm / self.slice_count as f64)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::json("run config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
            .and_then(|cfg: RunConfig| cfg.validate().map(|_| cfg))
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent stream seed from a master seed and a path of
/// indices, e.g. `(seed, [n, j])`. Independent of evaluation order.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p.wrapping_add(0x51))))
}

pub fn rng_for(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
