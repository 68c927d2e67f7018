//! The Approximant: a few illumination-normalized gradient steps on the
//! ptychographic amplitude loss per tomo angle, rotated back and averaged.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AmplitudeModel, RunConfig};
use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2};
use crate::optics::{apply_transfer, ProbeSet};
use crate::ptychosim::{angle_propagation, unit_slices, DiffractionStack, Propagation};
use crate::scanplan::{unband_and_rotate_back, PlaneGrid};
use crate::volume::{ComplexField2D, Volume, VolumeKind};

const AMPLITUDE_FLOOR: f64 = 1e-12;
const STEP_EPS: f64 = 1e-12;
const MIN_STEP_FRACTION: f64 = 1e-6;

/// Loss and its Wirtinger derivatives `dL/dz*` for one tomo angle.
///
/// Real-valued directional derivatives are twice these: perturbing the real
/// part of `z` by `h` changes the loss by `2 Re(g) h`.
#[derive(Debug, Clone)]
pub struct LossState {
    pub loss: f64,
    /// One full-field gradient per slice.
    pub object_grads: Vec<ComplexField2D>,
    /// `[j][m][l]`, window-sized; empty unless requested.
    pub wavefield_grads: Vec<Vec<Vec<ComplexField2D>>>,
    /// `[j][m]`, exit-plane residuals; empty unless requested.
    pub residuals: Vec<Vec<ComplexField2D>>,
    /// Gradient with respect to each illumination mode, summed over positions.
    pub probe_grads: Vec<ComplexField2D>,
    /// `sum_j sum_m |P^[l]|^2` on the full field, per slice.
    pub illumination: Vec<Vec<f64>>,
}

/// Everything needed to evaluate the loss at one tomo angle.
#[derive(Debug, Clone)]
pub struct AngleProblem<'a> {
    pub patterns: Vec<&'a [f64]>,
    pub offsets: &'a [[usize; 2]],
    /// Illumination modes scaled by the square root of their power.
    pub illumination: Vec<ComplexField2D>,
    pub prop: Propagation,
    pub model: AmplitudeModel,
}

struct PositionGrad {
    loss: f64,
    object: Vec<Vec<Complex64>>,
    illum: Vec<Vec<f64>>,
    wavefield: Vec<Vec<ComplexField2D>>,
    residuals: Vec<ComplexField2D>,
}

impl<'a> AngleProblem<'a> {
    pub fn new(
        patterns: Vec<&'a [f64]>,
        offsets: &'a [[usize; 2]],
        illumination: Vec<ComplexField2D>,
        prop: Propagation,
        model: AmplitudeModel,
    ) -> Result<Self> {
        if illumination.is_empty() {
            return Err(Error::InvalidArgument("no illumination modes".into()));
        }
        if patterns.len() != offsets.len() {
            return Err(Error::Shape(format!("{} patterns for {} positions", patterns.len(), offsets.len())));
        }
        let (h, w) = illumination[0].shape();
        if illumination.iter().any(|m| !m.same_grid(&illumination[0])) {
            return Err(Error::Shape("illumination modes differ in grid".into()));
        }
        for p in &patterns {
            if p.len() != h * w {
                return Err(Error::Shape(format!("pattern of {} values for a {h}x{w} window", p.len())));
            }
            if p.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument("negative measured intensity".into()));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("measured intensity"));
            }
        }
        Ok(AngleProblem { patterns, offsets, illumination, prop, model })
    }

    /// Angle `n` of a stack, with the probe's weighted modes as illumination.
    pub fn from_stack(stack: &'a DiffractionStack, n: usize, probe: &ProbeSet, prop: Propagation, model: AmplitudeModel) -> Result<Self> {
        if stack.detector() != [probe.shape().0, probe.shape().1] {
            return Err(Error::Shape(format!(
                "probe {:?} does not match detector {:?}",
                probe.shape(),
                stack.detector()
            )));
        }
        Self::new(stack.patterns(n), &stack.plan().offsets_px[n], probe.weighted_modes(), prop, model)
    }

    fn window_shape(&self) -> (usize, usize) {
        self.illumination[0].shape()
    }

    fn check_objects(&self, objects: &[ComplexField2D]) -> Result<()> {
        if objects.is_empty() {
            return Err(Error::InvalidArgument("need at least one object slice".into()));
        }
        let (ny, nx) = objects[0].shape();
        if objects.iter().any(|o| o.shape() != (ny, nx)) {
            return Err(Error::Shape("object slices differ in shape".into()));
        }
        let (h, w) = self.window_shape();
        for &[oy, ox] in self.offsets {
            if oy + h > ny || ox + w > nx {
                return Err(Error::OutOfBounds(format!("window at ({oy}, {ox}) leaves the {ny}x{nx} object")));
            }
        }
        if objects.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite("object estimate"));
        }
        Ok(())
    }

    fn windows(&self, objects: &[ComplexField2D], j: usize) -> Vec<Vec<Complex64>> {
        let (h, w) = self.window_shape();
        let [oy, ox] = self.offsets[j];
        let nx = objects[0].nx();
        objects
            .iter()
            .map(|o| {
                let mut out = Vec::with_capacity(h * w);
                for y in oy..oy + h {
                    out.extend_from_slice(&o.data()[y * nx + ox..y * nx + ox + w]);
                }
                out
            })
            .collect()
    }

    /// Forward pass for one position: incident fields `[m][l]` and far fields `[m]`.
    fn forward(&self, win: &[Vec<Complex64>]) -> (Vec<Vec<Vec<Complex64>>>, Vec<Vec<Complex64>>) {
        let (h, w) = self.window_shape();
        let pitch = self.illumination[0].pitch();
        let last = win.len() - 1;
        let mut incident = Vec::with_capacity(self.illumination.len());
        let mut far = Vec::with_capacity(self.illumination.len());
        for mode in &self.illumination {
            let mut u = mode.data().to_vec();
            let mut per_slice = Vec::with_capacity(win.len());
            for (l, o) in win.iter().enumerate() {
                per_slice.push(u.clone());
                u.iter_mut().zip(o).for_each(|(a, b)| *a *= b);
                if l < last {
                    apply_transfer(&mut u, h, w, pitch, self.prop.dz, self.prop.wavelength);
                }
            }
            fft2(&mut u, h, w);
            incident.push(per_slice);
            far.push(u);
        }
        (incident, far)
    }

    /// Loss contribution and far-field residual factors `(1 - sqrt(I)/A)` per mode.
    fn residual_factors(&self, far: &[Vec<Complex64>], pattern: &[f64]) -> (f64, Vec<Vec<f64>>) {
        let q = pattern.len();
        match self.model {
            AmplitudeModel::ModeSum => {
                let mut loss = 0.0;
                let mut factor = vec![0.0; q];
                for k in 0..q {
                    let a = far.iter().map(|f| f[k].norm_sqr()).sum::<f64>().sqrt();
                    let s = pattern[k].sqrt();
                    loss += (a - s) * (a - s);
                    factor[k] = 1.0 - s / a.max(AMPLITUDE_FLOOR);
                }
                (loss, vec![factor; far.len()])
            }
            AmplitudeModel::PerMode => {
                let mut loss = 0.0;
                let factors = far
                    .iter()
                    .map(|f| {
                        (0..q)
                            .map(|k| {
                                let a = f[k].norm();
                                let s = pattern[k].sqrt();
                                loss += (a - s) * (a - s);
                                1.0 - s / a.max(AMPLITUDE_FLOOR)
                            })
                            .collect()
                    })
                    .collect();
                (loss, factors)
            }
        }
    }

    /// Modeled far-field amplitudes at position `j`, one per loss term: `Q`
    /// values for the mode-sum model, `M * Q` (mode-major) for the per-mode one.
    pub fn model_amplitudes(&self, objects: &[ComplexField2D], j: usize) -> Result<Vec<f64>> {
        self.check_objects(objects)?;
        if j >= self.offsets.len() {
            return Err(Error::OutOfBounds(format!("position {j} of {}", self.offsets.len())));
        }
        let (_, far) = self.forward(&self.windows(objects, j));
        let q = far[0].len();
        Ok(match self.model {
            AmplitudeModel::ModeSum => (0..q).map(|k| far.iter().map(|f| f[k].norm_sqr()).sum::<f64>().sqrt()).collect(),
            AmplitudeModel::PerMode => far.iter().flat_map(|f| f.iter().map(|v| v.norm())).collect(),
        })
    }

    /// `sum_j sum_m |P|^2` of the incident probe over an `ny x nx` field.
    pub fn probe_coverage(&self, ny: usize, nx: usize) -> Result<Vec<f64>> {
        let (h, w) = self.window_shape();
        let mut cov = vec![0.0; ny * nx];
        for &[oy, ox] in self.offsets {
            if oy + h > ny || ox + w > nx {
                return Err(Error::OutOfBounds(format!("window at ({oy}, {ox}) leaves the {ny}x{nx} field")));
            }
            for mode in &self.illumination {
                for y in 0..h {
                    for x in 0..w {
                        cov[(oy + y) * nx + ox + x] += mode.data()[y * w + x].norm_sqr();
                    }
                }
            }
        }
        Ok(cov)
    }

    /// Measured amplitudes aligned with [`AngleProblem::model_amplitudes`].
    pub fn measured_amplitudes(&self, j: usize) -> Vec<f64> {
        let s: Vec<f64> = self.patterns[j].iter().map(|v| v.sqrt()).collect();
        match self.model {
            AmplitudeModel::ModeSum => s,
            AmplitudeModel::PerMode => s.repeat(self.illumination.len()),
        }
    }

    fn position_loss(&self, objects: &[ComplexField2D], j: usize) -> f64 {
        let win = self.windows(objects, j);
        let (_, far) = self.forward(&win);
        self.residual_factors(&far, self.patterns[j]).0
    }

    /// Backward recursion for one position.
    fn position_grad(&self, objects: &[ComplexField2D], j: usize, keep: bool) -> PositionGrad {
        let (h, w) = self.window_shape();
        let pitch = self.illumination[0].pitch();
        let win = self.windows(objects, j);
        let (incident, far) = self.forward(&win);
        let (loss, factors) = self.residual_factors(&far, self.patterns[j]);
        let slices = win.len();
        let mut object = vec![vec![Complex64::new(0.0, 0.0); h * w]; slices];
        let mut illum = vec![vec![0.0; h * w]; slices];
        let mut wavefield = Vec::new();
        let mut residuals = Vec::new();
        for (fields, (psi, factor)) in incident.iter().zip(far.iter().zip(&factors)) {
            let mut g: Vec<Complex64> = psi.iter().zip(factor).map(|(p, f)| p * f).collect();
            ifft2(&mut g, h, w);
            if keep {
                residuals.push(ComplexField2D::new(h, w, pitch, g.clone()).expect("finite residual"));
            }
            let mut per_slice = vec![None; slices];
            for l in (0..slices).rev() {
                if l < slices - 1 {
                    apply_transfer(&mut g, h, w, pitch, -self.prop.dz, self.prop.wavelength);
                }
                let u = &fields[l];
                for k in 0..h * w {
                    object[l][k] += u[k].conj() * g[k];
                    illum[l][k] += u[k].norm_sqr();
                    g[k] *= win[l][k].conj();
                }
                if keep {
                    per_slice[l] = Some(ComplexField2D::new(h, w, pitch, g.clone()).expect("finite gradient"));
                }
            }
            if keep {
                wavefield.push(per_slice.into_iter().map(Option::unwrap).collect());
            } else {
                // Only the probe-plane gradient is needed for accumulation.
                wavefield.push(vec![ComplexField2D::new(h, w, pitch, g).expect("finite gradient")]);
            }
        }
        PositionGrad { loss, object, illum, wavefield, residuals }
    }

    /// Loss at the given full-field object slices.
    pub fn loss(&self, objects: &[ComplexField2D]) -> Result<f64> {
        self.check_objects(objects)?;
        let parts: Vec<f64> = (0..self.offsets.len())
            .into_par_iter()
            .map(|j| self.position_loss(objects, j))
            .collect();
        Ok(parts.iter().sum())
    }

    /// Loss and gradients. `keep_fields` retains per-position wavefield
    /// gradients and residuals in the result.
    pub fn gradients(&self, objects: &[ComplexField2D], keep_fields: bool) -> Result<LossState> {
        self.check_objects(objects)?;
        let (h, w) = self.window_shape();
        let (ny, nx) = objects[0].shape();
        let pitch = objects[0].pitch();
        let slices = objects.len();
        let parts: Vec<PositionGrad> = (0..self.offsets.len())
            .into_par_iter()
            .map(|j| self.position_grad(objects, j, keep_fields))
            .collect();
        let mut loss = 0.0;
        let mut grads = vec![vec![Complex64::new(0.0, 0.0); ny * nx]; slices];
        let mut illumination = vec![vec![0.0; ny * nx]; slices];
        let mut probe = vec![vec![Complex64::new(0.0, 0.0); h * w]; self.illumination.len()];
        let mut wavefield_grads = Vec::new();
        let mut residuals = Vec::new();
        for (part, &[oy, ox]) in parts.into_iter().zip(self.offsets) {
            loss += part.loss;
            for l in 0..slices {
                for y in 0..h {
                    let row = (oy + y) * nx + ox;
                    for x in 0..w {
                        grads[l][row + x] += part.object[l][y * w + x];
                        illumination[l][row + x] += part.illum[l][y * w + x];
                    }
                }
            }
            for (acc, fields) in probe.iter_mut().zip(&part.wavefield) {
                acc.iter_mut().zip(fields[0].data()).for_each(|(a, g)| *a += g);
            }
            if keep_fields {
                wavefield_grads.push(part.wavefield);
                residuals.push(part.residuals);
            }
        }
        let to_field = |ny, nx, data| ComplexField2D::new(ny, nx, pitch, data);
        Ok(LossState {
            loss,
            object_grads: grads.into_iter().map(|g| to_field(ny, nx, g)).collect::<Result<_>>()?,
            wavefield_grads,
            residuals,
            probe_grads: probe.into_iter().map(|g| to_field(h, w, g)).collect::<Result<_>>()?,
            illumination,
        })
    }

    /// `iters` preconditioned steps from `objects`; returns the loss before
    /// the first step and after each accepted step.
    ///
    /// A step starts at `gamma` and is halved until the loss does not rise;
    /// several slices updated at once can otherwise overshoot.
    pub fn descend(&self, objects: &mut [ComplexField2D], iters: usize, gamma: f64) -> Result<Vec<f64>> {
        let mut current = self.loss(objects)?;
        let mut log = Vec::with_capacity(iters + 1);
        log.push(current);
        for _ in 0..iters {
            let state = self.gradients(objects, false)?;
            let directions: Vec<(f64, &ComplexField2D)> = state
                .object_grads
                .iter()
                .zip(&state.illumination)
                .map(|(g, illum)| (1.0 / (illum.iter().cloned().fold(0.0, f64::max) + STEP_EPS), g))
                .collect();
            let mut t = gamma;
            loop {
                let trial: Vec<ComplexField2D> = objects
                    .iter()
                    .zip(&directions)
                    .map(|(o, &(norm, g))| {
                        let mut next = o.clone();
                        next.data_mut().iter_mut().zip(g.data()).for_each(|(v, d)| *v -= d * (t * norm));
                        next
                    })
                    .collect();
                if trial.iter().any(|o| !o.is_finite()) {
                    return Err(Error::NonFinite("object estimate after gradient step"));
                }
                let trial_loss = self.loss(&trial)?;
                if trial_loss <= current || t < gamma * MIN_STEP_FRACTION {
                    if trial_loss <= current {
                        objects.clone_from_slice(&trial);
                        current = trial_loss;
                    }
                    break;
                }
                t *= 0.5;
            }
            log.push(current);
        }
        Ok(log)
    }
}

/// Propagation constants angle `n` of a stack was simulated with.
pub fn stack_propagation(stack: &DiffractionStack, n: usize, config: &RunConfig) -> Propagation {
    let [nz, _, nx] = stack.volume_dims();
    let [pz, _, px] = stack.volume_pitch();
    angle_propagation(config, PlaneGrid { nz, nx, pz, px }, stack.plan().angles_deg[n])
}

/// Loss of each angle's object estimate against the stack.
pub fn loss(stack: &DiffractionStack, estimates: &[Vec<ComplexField2D>], probe: &ProbeSet, config: &RunConfig) -> Result<Vec<f64>> {
    if estimates.len() != stack.angle_count() {
        return Err(Error::Shape(format!("{} estimates for {} angles", estimates.len(), stack.angle_count())));
    }
    estimates
        .iter()
        .enumerate()
        .map(|(n, objects)| {
            let prop = stack_propagation(stack, n, config);
            AngleProblem::from_stack(stack, n, probe, prop, config.amplitude_model)?.loss(objects)
        })
        .collect()
}

/// Full loss state of angle `n`, including per-position wavefield gradients.
pub fn gradients(stack: &DiffractionStack, n: usize, objects: &[ComplexField2D], probe: &ProbeSet, config: &RunConfig) -> Result<LossState> {
    if n >= stack.angle_count() {
        return Err(Error::OutOfBounds(format!("angle {n} of {}", stack.angle_count())));
    }
    let prop = stack_propagation(stack, n, config);
    AngleProblem::from_stack(stack, n, probe, prop, config.amplitude_model)?.gradients(objects, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub n: usize,
    pub iter: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct ApproximantResult {
    pub volume: Volume,
    /// `[n][l]`, mean-free phase maps on the full lateral field.
    pub per_angle: Vec<Vec<Vec<f64>>>,
    pub loss_log: Vec<LossRecord>,
}

/// Per-angle reconstruction: returns mean-free slice phases and the loss trace.
pub fn reconstruct_angle(
    stack: &DiffractionStack,
    n: usize,
    probe: &ProbeSet,
    config: &RunConfig,
    slices: usize,
    iters: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let [_, ny, nx] = stack.volume_dims();
    let pitch = stack.volume_pitch()[2];
    let prop = stack_propagation(stack, n, config);
    let problem = AngleProblem::from_stack(stack, n, probe, prop, config.amplitude_model)?;
    let mut objects = unit_slices(slices, ny, nx, pitch)?;
    let log = problem.descend(&mut objects, iters, config.step_gamma)?;
    let mut phases: Vec<Vec<f64>> = objects.iter().map(|o| o.data().iter().map(|v| v.arg()).collect()).collect();
    let count = (slices * ny * nx) as f64;
    let mean = phases.iter().flatten().sum::<f64>() / count;
    phases.iter_mut().flatten().for_each(|p| *p -= mean);
    Ok((phases, log))
}

/// Runs the Approximant over every angle of `stack` with the configured
/// slice count and iteration budget.
pub fn approximant(stack: &DiffractionStack, probe: &ProbeSet, config: &RunConfig) -> Result<ApproximantResult> {
    config.validate()?;
    let [nz, ny, nx] = stack.volume_dims();
    let [pz, py, px] = stack.volume_pitch();
    let target_z = config.target_z.unwrap_or(nz);
    if config.slice_count > target_z {
        return Err(Error::InvalidArgument(format!(
            "cannot dilate {} slices onto {target_z} rows",
            config.slice_count
        )));
    }
    let target = PlaneGrid {
        nz: target_z,
        nx,
        pz: nz as f64 * pz / target_z as f64,
        px,
    };
    let angles = &stack.plan().angles_deg;
    let per_angle: Vec<(Vec<Vec<f64>>, Vec<f64>, Volume)> = (0..stack.angle_count())
        .into_par_iter()
        .map(|n| {
            let (phases, log) = reconstruct_angle(stack, n, probe, config, config.slice_count, config.approximant_iters)?;
            let vol = unband_and_rotate_back(&phases, angles[n], ny, target, py)?;
            Ok((phases, log, vol))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = per_angle.len() as f64;
    let mut sum = vec![0.0; target_z * ny * nx];
    let mut loss_log = Vec::new();
    let mut phases = Vec::with_capacity(per_angle.len());
    for (n, (p, log, vol)) in per_angle.into_iter().enumerate() {
        sum.iter_mut().zip(vol.data()).for_each(|(s, v)| *s += v);
        loss_log.extend(log.into_iter().enumerate().map(|(iter, loss)| LossRecord { n, iter, loss }));
        phases.push(p);
    }
    sum.iter_mut().for_each(|s| *s /= count);
    let volume = Volume::new([target_z, ny, nx], [target.pz, py, px], VolumeKind::Phase, sum)?;
    Ok(ApproximantResult { volume, per_angle: phases, loss_log })
}
