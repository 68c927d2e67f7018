//! Measurement simulation: multi-slice mixed-state exit waves and far-field
//! diffraction intensities for every (tomo angle, ptycho position) pair.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{read_json, rng_for, write_json, RunConfig};
use crate::error::{Error, Result};
use crate::fft::fft2;
use crate::optics::{apply_transfer, ProbeSet};
use crate::scanplan::{rotate_and_slice, PlaneGrid, ScanPlan};
use crate::volume::{read_volume, write_volume, ComplexField2D, Volume, VolumeKind};

/// Propagation constants shared by forward and adjoint passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Propagation {
    pub dz: f64,
    pub wavelength: f64,
}

/// Per-slice incident fields `P^[l]` (l = 1..L) and the exit wave.
#[derive(Debug, Clone)]
pub struct Wavefront {
    pub incident: Vec<ComplexField2D>,
    pub exit: ComplexField2D,
}

/// `psi = O[L] P(dz)[O[L-1] ... P(dz)[probe O[1]]]`, keeping every `P^[l]`.
pub fn forward_exit_wave(
    probe_mode: &ComplexField2D,
    slices: &[ComplexField2D],
    prop: Propagation,
) -> Result<Wavefront> {
    if slices.is_empty() {
        return Err(Error::InvalidArgument("need at least one slice".into()));
    }
    if slices.iter().any(|s| !s.same_grid(probe_mode)) {
        return Err(Error::Shape(format!(
            "probe {:?} and slices must share a grid",
            probe_mode.shape()
        )));
    }
    let (ny, nx) = probe_mode.shape();
    let pitch = probe_mode.pitch();
    let mut incident = Vec::with_capacity(slices.len());
    let mut current = probe_mode.data().to_vec();
    for (l, slice) in slices.iter().enumerate() {
        incident.push(ComplexField2D::new(ny, nx, pitch, current.clone())?);
        current.iter_mut().zip(slice.data()).for_each(|(u, o)| *u *= o);
        if l + 1 < slices.len() {
            apply_transfer(&mut current, ny, nx, pitch, prop.dz, prop.wavelength);
        }
    }
    Ok(Wavefront {
        incident,
        exit: ComplexField2D::new(ny, nx, pitch, current)?,
    })
}

/// Far-field intensity `sum_m p_m |F psi_m|^2` of the mixed state.
pub fn forward_intensity(probe: &ProbeSet, slices: &[ComplexField2D], prop: Propagation) -> Result<Vec<f64>> {
    let (ny, nx) = probe.shape();
    let mut intensity = vec![0.0; ny * nx];
    for (mode, &power) in probe.modes().iter().zip(probe.powers()) {
        let wave = forward_exit_wave(mode, slices, prop)?;
        let mut far = wave.exit.into_data();
        fft2(&mut far, ny, nx);
        intensity.iter_mut().zip(&far).for_each(|(i, f)| *i += power * f.norm_sqr());
    }
    Ok(intensity)
}

/// Copies the `h x w` window at `(oy, ox)` out of a full-field slice.
pub fn window(slice: &ComplexField2D, oy: usize, ox: usize, h: usize, w: usize) -> Result<ComplexField2D> {
    if oy + h > slice.ny() || ox + w > slice.nx() {
        return Err(Error::OutOfBounds(format!(
            "window {h}x{w} at ({oy}, {ox}) leaves the {}x{} field",
            slice.ny(),
            slice.nx()
        )));
    }
    let nx = slice.nx();
    let mut data = Vec::with_capacity(h * w);
    for y in oy..oy + h {
        data.extend_from_slice(&slice.data()[y * nx + ox..y * nx + ox + w]);
    }
    ComplexField2D::new(h, w, slice.pitch(), data)
}

/// Simulated or measured intensities indexed by `(n, j, qy, qx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffractionStack {
    intensities: Vec<f64>,
    detector: [usize; 2],
    plan: ScanPlan,
    volume_dims: [usize; 3],
    volume_pitch: [f64; 3],
    photon_count: Option<f64>,
    /// Start of each angle's exposures in the flattened `(n*J + j)` axis.
    starts: Vec<usize>,
}

/// JSON sidecar describing how the flattened stack maps onto the scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackIndex {
    pub exposures_per_angle: Vec<usize>,
    pub detector: [usize; 2],
    pub volume_dims: [usize; 3],
    pub volume_pitch_nm: [f64; 3],
    pub photon_count: Option<f64>,
    pub plan: ScanPlan,
}

impl DiffractionStack {
    pub fn new(
        intensities: Vec<f64>,
        detector: [usize; 2],
        plan: ScanPlan,
        volume_dims: [usize; 3],
        volume_pitch: [f64; 3],
        photon_count: Option<f64>,
    ) -> Result<Self> {
        let per = detector[0] * detector[1];
        let total = plan.exposure_count();
        if per == 0 || intensities.len() != total * per {
            return Err(Error::Shape(format!(
                "{} intensity values for {total} exposures of {detector:?}",
                intensities.len()
            )));
        }
        if intensities.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("diffraction intensities"));
        }
        if intensities.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative measured intensity".into()));
        }
        let mut starts = Vec::with_capacity(plan.len());
        let mut acc = 0;
        for offsets in &plan.offsets_px {
            starts.push(acc);
            acc += offsets.len();
        }
        Ok(DiffractionStack {
            intensities,
            detector,
            plan,
            volume_dims,
            volume_pitch,
            photon_count,
            starts,
        })
    }

    pub fn plan(&self) -> &ScanPlan {
        &self.plan
    }

    pub fn detector(&self) -> [usize; 2] {
        self.detector
    }

    pub fn volume_dims(&self) -> [usize; 3] {
        self.volume_dims
    }

    pub fn volume_pitch(&self) -> [f64; 3] {
        self.volume_pitch
    }

    pub fn photon_count(&self) -> Option<f64> {
        self.photon_count
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn angle_count(&self) -> usize {
        self.plan.len()
    }

    pub fn exposures(&self, n: usize) -> usize {
        self.plan.offsets_px[n].len()
    }

    pub fn pattern(&self, n: usize, j: usize) -> &[f64] {
        let per = self.detector[0] * self.detector[1];
        let k = self.starts[n] + j;
        &self.intensities[k * per..(k + 1) * per]
    }

    pub fn patterns(&self, n: usize) -> Vec<&[f64]> {
        (0..self.exposures(n)).map(|j| self.pattern(n, j)).collect()
    }

    pub fn index(&self) -> StackIndex {
        StackIndex {
            exposures_per_angle: self.plan.offsets_px.iter().map(Vec::len).collect(),
            detector: self.detector,
            volume_dims: self.volume_dims,
            volume_pitch_nm: self.volume_pitch,
            photon_count: self.photon_count,
            plan: self.plan.clone(),
        }
    }

    /// Intensities as a 3D container volume `(n*J + j, qy, qx)`.
    pub fn to_volume(&self) -> Volume {
        let [h, w] = self.detector;
        let p = self.plan.pixel_pitch_nm;
        Volume::new(
            [self.plan.exposure_count(), h, w],
            [1.0, p, p],
            VolumeKind::Intensity,
            self.intensities.clone(),
        )
        .expect("stack shape validated at construction")
    }

    pub fn index_path(stack_path: &Path) -> PathBuf {
        stack_path.with_extension("index.json")
    }

    /// Writes `path` and its `.index.json` sidecar.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_volume(&self.to_volume(), path)?;
        write_json(&self.index(), Self::index_path(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let vol = read_volume(path)?;
        let index: StackIndex = read_json(Self::index_path(path))?;
        index.plan.validate()?;
        let [count, h, w] = vol.dims();
        if [h, w] != index.detector || count != index.plan.exposure_count() {
            return Err(Error::Shape(format!(
                "stack {:?} disagrees with its index ({} exposures of {:?})",
                vol.dims(),
                index.plan.exposure_count(),
                index.detector
            )));
        }
        if index.exposures_per_angle != index.plan.offsets_px.iter().map(Vec::len).collect::<Vec<_>>() {
            return Err(Error::Shape("exposure counts disagree with plan".into()));
        }
        Self::new(
            vol.into_data(),
            index.detector,
            index.plan,
            index.volume_dims,
            index.volume_pitch_nm,
            index.photon_count,
        )
    }
}

/// Draws Poisson counts with `photons` expected in total and rescales them
/// back to the intensity units of `pattern`.
fn add_shot_noise(pattern: &mut [f64], photons: f64, seed: u64, n: usize, j: usize) {
    let total: f64 = pattern.iter().sum();
    if total <= 0.0 {
        return;
    }
    let scale = photons / total;
    let mut rng = rng_for(seed, &[0x5_401, n as u64, j as u64]);
    for v in pattern.iter_mut() {
        let lambda = *v * scale;
        let count = if lambda > 0.0 {
            Poisson::new(lambda).expect("positive finite rate").sample(&mut rng)
        } else {
            0.0
        };
        *v = count / scale;
    }
}

/// Propagation constants at one tomo angle: the configured slice spacing, or
/// the depth of the angle's beam grid split evenly over the slices.
pub fn angle_propagation(config: &RunConfig, grid: PlaneGrid, angle_deg: f64) -> Propagation {
    let beam = grid.beam(angle_deg);
    Propagation {
        dz: config.slice_spacing_for(beam.nz as f64 * beam.pz),
        wavelength: config.wavelength_nm,
    }
}

/// Simulates every exposure of `plan` through `phase`.
pub fn simulate_stack(phase: &Volume, probe: &ProbeSet, plan: &ScanPlan, config: &RunConfig) -> Result<DiffractionStack> {
    config.validate()?;
    let [nz, ny, nx] = phase.dims();
    let pitch = phase.pitch();
    let (h, w) = probe.shape();
    if (probe.pitch() - pitch[2]).abs() > 1e-9 * pitch[2] || (plan.pixel_pitch_nm - pitch[2]).abs() > 1e-9 * pitch[2] {
        return Err(Error::Shape("probe, plan, and volume lateral pitch must agree".into()));
    }
    for offsets in &plan.offsets_px {
        for &[oy, ox] in offsets {
            if oy + h > ny || ox + w > nx {
                return Err(Error::OutOfBounds(format!(
                    "window at ({oy}, {ox}) of {h}x{w} leaves the {ny}x{nx} field"
                )));
            }
        }
    }
    let grid = PlaneGrid::of(phase);
    let per_angle: Vec<Vec<Vec<f64>>> = plan
        .angles_deg
        .par_iter()
        .enumerate()
        .map(|(n, &angle)| {
            let prop = angle_propagation(config, grid, angle);
            let slices = rotate_and_slice(phase, angle, config.slice_count)?;
            plan.offsets_px[n]
                .par_iter()
                .enumerate()
                .map(|(j, &[oy, ox])| {
                    let windows = slices
                        .iter()
                        .map(|s| window(s, oy, ox, h, w))
                        .collect::<Result<Vec<_>>>()?;
                    let mut pattern = forward_intensity(probe, &windows, prop)?;
                    if let Some(photons) = config.photon_count {
                        add_shot_noise(&mut pattern, photons, config.seed, n, j);
                    }
                    Ok(pattern)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let intensities = per_angle.into_iter().flatten().flatten().collect();
    DiffractionStack::new(intensities, [h, w], plan.clone(), [nz, ny, nx], pitch, config.photon_count)
}

/// Unit-transmission slices on the full field, the Approximant's start point.
pub fn unit_slices(count: usize, ny: usize, nx: usize, pitch: f64) -> Result<Vec<ComplexField2D>> {
    (0..count)
        .map(|_| ComplexField2D::filled(ny, nx, pitch, Complex64::new(1.0, 0.0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{make_probe, propagate};
    use crate::phantom::{generate_phantom, PhantomSpec};
    use rand::{Rng, SeedableRng};

    fn random_slices(count: usize, n: usize, seed: u64, strength: f64) -> Vec<ComplexField2D> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                ComplexField2D::from_fn(n, n, 14.0, |_, _| {
                    Complex64::from_polar(1.0 - strength * rng.random::<f64>(), strength * rng.random_range(-1.0..1.0))
                })
                .unwrap()
            })
            .collect()
    }

    const PROP: Propagation = Propagation { dz: 300.0, wavelength: 0.14 };

    #[test]
    fn matches_direct_dft_oracle() {
        let probe = make_probe(2, 14.0, (8, 8, 14.0), 0.5, 9).unwrap();
        let slices = random_slices(3, 8, 11, 0.6);
        let fast = forward_intensity(&probe, &slices, PROP).unwrap();
        let slow = crate::testkit::naive_intensity(&probe, &slices, PROP);
        let scale = slow.iter().cloned().fold(0.0, f64::max);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-10 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_object_is_free_space() {
        let probe = make_probe(1, 42.0, (16, 16, 14.0), 0.5, 0).unwrap();
        let ones = unit_slices(4, 16, 16, 14.0).unwrap();
        let wave = forward_exit_wave(&probe.modes()[0], &ones, PROP).unwrap();
        let free = propagate(&probe.modes()[0], 3.0 * PROP.dz, PROP.wavelength).unwrap();
        for (a, b) in wave.exit.data().iter().zip(free.data()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_eq!(wave.incident.len(), 4);
    }

    #[test]
    fn thin_object_limit() {
        let probe = make_probe(1, 42.0, (16, 16, 14.0), 0.5, 0).unwrap();
        let slices = random_slices(1, 16, 3, 0.5);
        let wave = forward_exit_wave(&probe.modes()[0], &slices, PROP).unwrap();
        for ((e, p), o) in wave.exit.data().iter().zip(probe.modes()[0].data()).zip(slices[0].data()) {
            assert_eq!(*e, p * o);
        }
    }

    #[test]
    fn grid_mismatch() {
        let probe = make_probe(1, 42.0, (16, 16, 14.0), 0.5, 0).unwrap();
        let slices = random_slices(2, 8, 3, 0.5);
        assert!(matches!(forward_exit_wave(&probe.modes()[0], &slices, PROP), Err(Error::Shape(_))));
    }

    #[test]
    fn intensity_is_power_weighted_sum() {
        let probe = make_probe(2, 42.0, (16, 16, 14.0), 0.3 / 0.7, 1).unwrap();
        assert!((probe.powers()[0] - 0.7).abs() < 1e-12);
        let slices = random_slices(3, 16, 4, 0.3);
        let mixed = forward_intensity(&probe, &slices, PROP).unwrap();
        let singles: Vec<Vec<f64>> = probe
            .modes()
            .iter()
            .map(|m| forward_intensity(&ProbeSet::new(vec![m.clone()], vec![1.0]).unwrap(), &slices, PROP).unwrap())
            .collect();
        for q in 0..mixed.len() {
            let expected = 0.7 * singles[0][q] + 0.3 * singles[1][q];
            assert!((mixed[q] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn intensity_parseval() {
        let probe = make_probe(3, 42.0, (16, 16, 14.0), 0.5, 1).unwrap();
        let slices = random_slices(3, 16, 5, 0.4);
        let total: f64 = forward_intensity(&probe, &slices, PROP).unwrap().iter().sum();
        let expected: f64 = probe
            .modes()
            .iter()
            .zip(probe.powers())
            .map(|(m, p)| p * forward_exit_wave(m, &slices, PROP).unwrap().exit.norm_sqr())
            .sum();
        assert!((total / expected - 1.0).abs() < 1e-10);
    }

    #[test]
    fn global_phase_gauge() {
        let probe = make_probe(2, 42.0, (16, 16, 14.0), 0.5, 1).unwrap();
        let slices = random_slices(3, 16, 6, 0.4);
        let mut shifted = slices.clone();
        let rot = Complex64::from_polar(1.0, 0.7);
        shifted[1].data_mut().iter_mut().for_each(|v| *v *= rot);
        let a = forward_intensity(&probe, &slices, PROP).unwrap();
        let b = forward_intensity(&probe, &shifted, PROP).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    fn small_setup(photons: Option<f64>) -> (Volume, ProbeSet, ScanPlan, RunConfig) {
        let (_, phase) = generate_phantom(&PhantomSpec::cube(16, 2)).unwrap();
        let probe = make_probe(2, 28.0, (8, 8, 14.0), 0.5, 0).unwrap();
        let plan = ScanPlan::standard(3, 30.0, [16, 16], 8, 0.5, 14.0).unwrap();
        let cfg = RunConfig {
            slice_count: 4,
            mode_count: 2,
            detector_pixels: 8,
            photon_count: photons,
            seed: 3,
            ..RunConfig::default()
        };
        (phase, probe, plan, cfg)
    }

    #[test]
    fn empty_phantom_gives_probe_far_field() {
        let (phase, probe, plan, cfg) = small_setup(None);
        let empty = phase.map(VolumeKind::Phase, |_| 0.0).unwrap();
        let stack = simulate_stack(&empty, &probe, &plan, &cfg).unwrap();
        let ones = unit_slices(cfg.slice_count, 8, 8, 14.0).unwrap();
        let prop = Propagation {
            dz: cfg.slice_spacing_for(16.0 * 14.0),
            wavelength: cfg.wavelength_nm,
        };
        let reference = forward_intensity(&probe, &ones, prop).unwrap();
        for n in 0..stack.angle_count() {
            for j in 0..stack.exposures(n) {
                for (a, b) in stack.pattern(n, j).iter().zip(&reference) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn deterministic_stacks() {
        for photons in [None, Some(1e4)] {
            let (phase, probe, plan, cfg) = small_setup(photons);
            let a = simulate_stack(&phase, &probe, &plan, &cfg).unwrap();
            let b = simulate_stack(&phase, &probe, &plan, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn poisson_mean_within_bounds() {
        let (phase, probe, plan, cfg) = small_setup(None);
        let clean = simulate_stack(&phase, &probe, &plan, &cfg).unwrap();
        let photons = 1e6;
        let reps = 100;
        let pattern = clean.pattern(1, 2).to_vec();
        let total: f64 = pattern.iter().sum();
        let scale = photons / total;
        let mut mean = vec![0.0; pattern.len()];
        for r in 0..reps {
            let mut p = pattern.clone();
            add_shot_noise(&mut p, photons, 1000 + r, 1, 2);
            mean.iter_mut().zip(&p).for_each(|(m, v)| *m += v / reps as f64);
        }
        for (m, &i) in mean.iter().zip(&pattern) {
            // Mean of `reps` Poisson draws of rate lambda has sd sqrt(lambda / reps).
            let lambda = i * scale;
            let sd = (lambda / reps as f64).sqrt() / scale;
            assert!((m - i).abs() <= 5.0 * sd + 1e-12, "{m} vs {i} (sd {sd})");
        }
    }

    #[test]
    fn out_of_bounds_position() {
        let (phase, probe, _, cfg) = small_setup(None);
        let plan = ScanPlan::uniform(vec![0.0], vec![[0.0, 10.0 * 14.0]], 0.5, 14.0).unwrap();
        assert!(matches!(simulate_stack(&phase, &probe, &plan, &cfg), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn stack_file_round_trip() {
        let (phase, probe, plan, cfg) = small_setup(None);
        let stack = simulate_stack(&phase, &probe, &plan, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stack.xptv");
        stack.write(&path).unwrap();
        assert!(dir.path().join("stack.index.json").exists());
        let back = DiffractionStack::read(&path).unwrap();
        assert_eq!(back.index(), stack.index());
        for (a, b) in back.intensities().iter().zip(stack.intensities()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-30));
        }
    }

    #[test]
    fn z_invariant_phantom_matches_thin_object() {
        // Weak, z-invariant object: the multi-slice result equals the single
        // projected slice up to propagation effects.
        let n = 16;
        let phase = Volume::from_fn([8, n, n], [14.0; 3], VolumeKind::Phase, |_, y, x| {
            0.004 * (((y * 7 + x * 3) % 5) as f64)
        })
        .unwrap();
        let probe = make_probe(1, 42.0, (n, n, 14.0), 0.5, 0).unwrap();
        let plan = ScanPlan::uniform(vec![0.0], vec![[0.0, 0.0]], 0.0, 14.0).unwrap();
        let multi_cfg = RunConfig { slice_count: 8, mode_count: 1, detector_pixels: n, ..RunConfig::default() };
        let thin_cfg = RunConfig { slice_count: 1, ..multi_cfg.clone() };
        let multi = simulate_stack(&phase, &probe, &plan, &multi_cfg).unwrap();
        let thin = simulate_stack(&phase, &probe, &plan, &thin_cfg).unwrap();
        let norm: f64 = thin.intensities().iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = multi
            .intensities()
            .iter()
            .zip(thin.intensities())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff / norm < 1e-3, "relative difference {}", diff / norm);
    }
}
