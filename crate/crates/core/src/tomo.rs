//! Parallel-beam projection tomography about the `y` axis: Radon transform,
//! its adjoint, FBP, SIRT, SART, and the thin-object reference pipeline.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::approximant::{reconstruct_angle, stack_propagation, AngleProblem};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fft::fft_nd;
use crate::optics::ProbeSet;
use crate::ptychosim::DiffractionStack;
use crate::scanplan::{PlaneGrid, RotationMap};
use crate::volume::{Volume, VolumeKind};

/// Projections `(angle, y, x)` of line integrals along the beam.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    angles_deg: Vec<f64>,
    ny: usize,
    nx: usize,
    pitch: [f64; 2],
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(angles_deg: Vec<f64>, ny: usize, nx: usize, pitch: [f64; 2], data: Vec<f64>) -> Result<Self> {
        if angles_deg.is_empty() {
            return Err(Error::InvalidArgument("sinogram has no angles".into()));
        }
        if ny == 0 || nx == 0 || data.len() != angles_deg.len() * ny * nx {
            return Err(Error::Shape(format!(
                "{} values for {} projections of {ny}x{nx}",
                data.len(),
                angles_deg.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sinogram"));
        }
        Ok(Sinogram { angles_deg, ny, nx, pitch, data })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    pub fn pitch(&self) -> [f64; 2] {
        self.pitch
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles_deg.is_empty()
    }

    pub fn projection(&self, n: usize) -> &[f64] {
        let per = self.ny * self.nx;
        &self.data[n * per..(n + 1) * per]
    }

    /// Container form: dims `(angles, ny, nx)`.
    pub fn to_volume(&self) -> Volume {
        Volume::new(
            [self.len(), self.ny, self.nx],
            [1.0, self.pitch[0], self.pitch[1]],
            VolumeKind::Phase,
            self.data.clone(),
        )
        .expect("sinogram shape validated at construction")
    }

    pub fn from_volume(v: &Volume, angles_deg: Vec<f64>) -> Result<Self> {
        let [n, ny, nx] = v.dims();
        if n != angles_deg.len() {
            return Err(Error::Shape(format!("{n} projections but {} angles", angles_deg.len())));
        }
        let [_, py, px] = v.pitch();
        Self::new(angles_deg, ny, nx, [py, px], v.data().to_vec())
    }
}

/// Rotation-then-sum projector for one volume grid and angle list.
#[derive(Debug, Clone)]
pub struct Projector {
    dims: [usize; 3],
    pitch: [f64; 3],
    angles: Vec<f64>,
    maps: Vec<RotationMap>,
}

impl Projector {
    pub fn new(dims: [usize; 3], pitch: [f64; 3], angles: &[f64]) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::InvalidArgument("empty angle list".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("invalid volume dims {dims:?}")));
        }
        let grid = PlaneGrid { nz: dims[0], nx: dims[2], pz: pitch[0], px: pitch[2] };
        let maps = angles
            .par_iter()
            .map(|&a| RotationMap::new(grid, grid.beam(a), a))
            .collect();
        Ok(Projector { dims, pitch, angles: angles.to_vec(), maps })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn check_volume(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("volume of {} values for dims {:?}", x.len(), self.dims)));
        }
        Ok(())
    }

    /// Line integrals of `x` at angle `n`: beam-frame sum times `pz`.
    pub fn project(&self, n: usize, x: &[f64]) -> Vec<f64> {
        let [_, ny, nx] = self.dims;
        let rotated = self.maps[n].forward(x, ny);
        let mut out = vec![0.0; ny * nx];
        for row in rotated.chunks_exact(ny * nx) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o *= self.pitch[0]);
        out
    }

    /// Exact transpose of [`Projector::project`].
    pub fn backproject(&self, n: usize, p: &[f64]) -> Vec<f64> {
        self.smear(n, p, self.pitch[0])
    }

    /// Replicates `p * scale` along the beam and rotates back.
    fn smear(&self, n: usize, p: &[f64], scale: f64) -> Vec<f64> {
        let [_, ny, _] = self.dims;
        let rows = self.maps[n].dst().nz;
        let scaled: Vec<f64> = p.iter().map(|v| v * scale).collect();
        self.maps[n].adjoint(&scaled.repeat(rows), ny)
    }

    pub fn radon(&self, x: &[f64]) -> Result<Sinogram> {
        self.check_volume(x)?;
        let data: Vec<Vec<f64>> = (0..self.angles.len()).into_par_iter().map(|n| self.project(n, x)).collect();
        Sinogram::new(self.angles.clone(), self.dims[1], self.dims[2], [self.pitch[1], self.pitch[2]], data.concat())
    }

    /// Sum over angles of per-angle back-projections, in ascending angle order.
    fn sum_over_angles(&self, f: impl Fn(usize) -> Vec<f64> + Sync + Send) -> Vec<f64> {
        let parts: Vec<Vec<f64>> = (0..self.angles.len()).into_par_iter().map(f).collect();
        let mut out = vec![0.0; self.dims.iter().product()];
        for part in parts {
            out.iter_mut().zip(&part).for_each(|(o, v)| *o += v);
        }
        out
    }

    fn check_sinogram(&self, s: &Sinogram) -> Result<()> {
        if s.angles() != self.angles.as_slice() || s.shape() != (self.dims[1], self.dims[2]) {
            return Err(Error::Shape(format!(
                "sinogram {:?} x {} angles does not match projector {:?}",
                s.shape(),
                s.len(),
                self.dims
            )));
        }
        Ok(())
    }

    pub fn adjoint(&self, s: &Sinogram) -> Result<Vec<f64>> {
        self.check_sinogram(s)?;
        Ok(self.sum_over_angles(|n| self.backproject(n, s.projection(n))))
    }
}

/// Radon transform of `v` about `y` at the given angles.
pub fn radon(v: &Volume, angles: &[f64]) -> Result<Sinogram> {
    Projector::new(v.dims(), v.pitch(), angles)?.radon(v.data())
}

/// Adjoint of [`radon`] onto a volume of `dims` and `pitch`.
pub fn backproject(s: &Sinogram, dims: [usize; 3], pitch: [f64; 3]) -> Result<Volume> {
    if [dims[1], dims[2]] != [s.shape().0, s.shape().1] {
        return Err(Error::Shape(format!("dims {dims:?} do not match sinogram {:?}", s.shape())));
    }
    let data = Projector::new(dims, pitch, s.angles())?.adjoint(s)?;
    Volume::new(dims, pitch, VolumeKind::Phase, data)
}

/// Ram-Lak filter along `x` of every projection row, via zero-padded FFT
/// convolution with the band-limited spatial kernel.
pub fn ramp_filter(p: &[f64], ny: usize, nx: usize, tau: f64) -> Vec<f64> {
    let size = (2 * nx).next_power_of_two();
    let mut kernel = vec![Complex64::new(0.0, 0.0); size];
    for k in 0..size {
        let d = if k <= size / 2 { k as isize } else { k as isize - size as isize };
        let h = if d == 0 {
            1.0 / (4.0 * tau * tau)
        } else if d % 2 != 0 {
            -1.0 / ((d * d) as f64 * PI * PI * tau * tau)
        } else {
            0.0
        };
        kernel[k] = Complex64::new(h, 0.0);
    }
    fft_nd(&mut kernel, &[size], false);
    // Unitary transforms: conv = sqrt(size) * ifft(fft(h) fft(p)).
    let gain = tau * (size as f64).sqrt();
    let mut out = vec![0.0; ny * nx];
    let mut row = vec![Complex64::new(0.0, 0.0); size];
    for y in 0..ny {
        row.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for x in 0..nx {
            row[x] = Complex64::new(p[y * nx + x], 0.0);
        }
        fft_nd(&mut row, &[size], false);
        row.iter_mut().zip(&kernel).for_each(|(v, k)| *v *= k);
        fft_nd(&mut row, &[size], true);
        for x in 0..nx {
            out[y * nx + x] = gain * row[x].re;
        }
    }
    out
}

/// Filtered back-projection onto a volume of `dims` and `pitch`.
pub fn fbp(s: &Sinogram, dims: [usize; 3], pitch: [f64; 3]) -> Result<Volume> {
    if s.len() < 2 {
        return Err(Error::InvalidArgument("filtered back-projection needs at least two angles".into()));
    }
    let (ny, nx) = s.shape();
    if [dims[1], dims[2]] != [ny, nx] {
        return Err(Error::Shape(format!("dims {dims:?} do not match sinogram {:?}", s.shape())));
    }
    let proj = Projector::new(dims, pitch, s.angles())?;
    let scale = PI / s.len() as f64;
    let data = proj.sum_over_angles(|n| {
        let filtered = ramp_filter(s.projection(n), ny, nx, s.pitch()[1]);
        proj.smear(n, &filtered, scale)
    });
    Volume::new(dims, pitch, VolumeKind::Phase, data)
}

fn reciprocal(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| if x > 1e-12 { 1.0 / x } else { 0.0 }).collect()
}

/// Simultaneous iterative reconstruction with row / column-sum scaling and a
/// non-negativity clamp; `residuals` receives `||b - Ax||` before each update.
pub fn sirt_logged(s: &Sinogram, dims: [usize; 3], pitch: [f64; 3], iters: usize, residuals: &mut Vec<f64>) -> Result<Volume> {
    let proj = Projector::new(dims, pitch, s.angles())?;
    proj.check_sinogram(s)?;
    let len: usize = dims.iter().product();
    let mut x = vec![0.0; len];
    if iters > 0 {
        let ones = vec![1.0; len];
        let row = reciprocal(proj.radon(&ones)?.data().to_vec());
        let per = dims[1] * dims[2];
        let col = reciprocal(proj.sum_over_angles(|n| proj.backproject(n, &vec![1.0; per])));
        for _ in 0..iters {
            let ax = proj.radon(&x)?;
            let weighted: Vec<f64> = s
                .data()
                .iter()
                .zip(ax.data())
                .zip(&row)
                .map(|((b, a), r)| (b - a) * r)
                .collect();
            residuals.push(s.data().iter().zip(ax.data()).map(|(b, a)| (b - a).powi(2)).sum::<f64>().sqrt());
            let update = proj.sum_over_angles(|n| proj.backproject(n, &weighted[n * per..(n + 1) * per]));
            for ((v, u), c) in x.iter_mut().zip(&update).zip(&col) {
                *v = (*v + c * u).max(0.0);
            }
        }
    }
    Volume::new(dims, pitch, VolumeKind::Phase, x)
}

pub fn sirt(s: &Sinogram, dims: [usize; 3], pitch: [f64; 3], iters: usize) -> Result<Volume> {
    sirt_logged(s, dims, pitch, iters, &mut Vec::new())
}

/// Block-sequential SART: one projection at a time in ascending angle order,
/// relaxation `lambda`, non-negativity clamp after each block.
pub fn sart_relaxed(s: &Sinogram, dims: [usize; 3], pitch: [f64; 3], iters: usize, lambda: f64) -> Result<Volume> {
    let proj = Projector::new(dims, pitch, s.angles())?;
    proj.check_sinogram(s)?;
    let len: usize = dims.iter().product();
    let per = dims[1] * dims[2];
    let mut x = vec![0.0; len];
    if iters > 0 && lambda != 0.0 {
        let ones = vec![1.0; len];
        let weights: Vec<(Vec<f64>, Vec<f64>)> = (0..s.len())
            .into_par_iter()
            .map(|n| (reciprocal(proj.project(n, &ones)), reciprocal(proj.backproject(n, &vec![1.0; per]))))
            .collect();
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s.angles()[a].total_cmp(&s.angles()[b]));
        for _ in 0..iters {
            for &n in &order {
                let (row, col) = &weights[n];
                let ax = proj.project(n, &x);
                let weighted: Vec<f64> = s
                    .projection(n)
                    .iter()
                    .zip(&ax)
                    .zip(row)
                    .map(|((b, a), r)| (b - a) * r)
                    .collect();
                let update = proj.backproject(n, &weighted);
                for ((v, u), c) in x.iter_mut().zip(&update).zip(col) {
                    *v = (*v + lambda * c * u).max(0.0);
                }
            }
        }
    }
    Volume::new(dims, pitch, VolumeKind::Phase, x)
}

pub fn sart(s: &Sinogram, dims: [usize; 3], pitch: [f64; 3], iters: usize) -> Result<Volume> {
    sart_relaxed(s, dims, pitch, iters, 1.0)
}

/// Least-squares plane `a + b x + c y` over an `ny x nx` image, pixel units.
pub fn fit_plane(p: &[f64], ny: usize, nx: usize) -> Result<[f64; 3]> {
    if p.len() != ny * nx || p.is_empty() {
        return Err(Error::Shape(format!("{} values for {ny}x{nx}", p.len())));
    }
    // Centered coordinates keep the normal equations diagonal.
    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
    let n = p.len() as f64;
    let (mut sx2, mut sy2, mut sf, mut sfx, mut sfy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..ny {
        for x in 0..nx {
            let (u, v, f) = (x as f64 - cx, y as f64 - cy, p[y * nx + x]);
            sx2 += u * u;
            sy2 += v * v;
            sf += f;
            sfx += f * u;
            sfy += f * v;
        }
    }
    let b = if sx2 > 0.0 { sfx / sx2 } else { 0.0 };
    let c = if sy2 > 0.0 { sfy / sy2 } else { 0.0 };
    let a = sf / n - b * cx - c * cy;
    Ok([a, b, c])
}

/// Subtracts the least-squares plane.
pub fn remove_phase_ramp(p: &[f64], ny: usize, nx: usize) -> Result<Vec<f64>> {
    let [a, b, c] = fit_plane(p, ny, nx)?;
    Ok((0..ny * nx)
        .map(|k| p[k] - (a + b * (k % nx) as f64 + c * (k / nx) as f64))
        .collect())
}

/// Samples at `i` and `i + 1/2` of a row, Keys cubic (a = -1/2), with
/// quadratic extrapolation past both ends.
fn upsample_line(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let at = |i: isize| -> f64 {
        if i >= 0 && (i as usize) < n {
            return f[i as usize];
        }
        let (first, step) = if i < 0 { (0isize, 1isize) } else { (n as isize - 1, -1isize) };
        let d = if i < 0 { -i } else { i - (n as isize - 1) };
        let g = |k: isize| f[(first + step * k) as usize];
        let d = d as f64;
        match n {
            1 => g(0),
            2 => g(0) + d * (g(0) - g(1)),
            _ => {
                // Quadratic through the three end samples, evaluated at -d.
                let (f0, f1, f2) = (g(0), g(1), g(2));
                f0 + (-d) * (-1.5 * f0 + 2.0 * f1 - 0.5 * f2) + d * d * (0.5 * f0 - f1 + 0.5 * f2)
            }
        }
    };
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n as isize {
        out.push(f[i as usize]);
        out.push((-at(i - 1) + 9.0 * at(i) + 9.0 * at(i + 1) - at(i + 2)) / 16.0);
    }
    out
}

/// Doubles both dimensions; output `(2i, 2j)` reproduces input `(i, j)`.
pub fn upsample2x(p: &[f64], ny: usize, nx: usize) -> Result<Vec<f64>> {
    if p.len() != ny * nx || p.is_empty() {
        return Err(Error::Shape(format!("{} values for {ny}x{nx}", p.len())));
    }
    let rows: Vec<Vec<f64>> = p.chunks_exact(nx).map(upsample_line).collect();
    let mut out = vec![0.0; 4 * ny * nx];
    let mut column = vec![0.0; ny];
    for x in 0..2 * nx {
        for y in 0..ny {
            column[y] = rows[y][x];
        }
        for (y, v) in upsample_line(&column).into_iter().enumerate() {
            out[y * 2 * nx + x] = v;
        }
    }
    Ok(out)
}

/// Averages non-overlapping 2x2x2 blocks; odd trailing planes are dropped.
pub fn block_average2(v: &Volume) -> Result<Volume> {
    let [nz, ny, nx] = v.dims();
    let [hz, hy, hx] = [nz / 2, ny / 2, nx / 2];
    if hz == 0 || hy == 0 || hx == 0 {
        return Err(Error::Shape(format!("cannot halve {:?}", v.dims())));
    }
    let mut out = vec![0.0; hz * hy * hx];
    for z in 0..hz {
        for y in 0..hy {
            for x in 0..hx {
                let mut acc = 0.0;
                for (dz, dy, dx) in (0..8).map(|k| (k >> 2, (k >> 1) & 1, k & 1)) {
                    acc += v.get(2 * z + dz, 2 * y + dy, 2 * x + dx);
                }
                out[(z * hy + y) * hx + x] = acc / 8.0;
            }
        }
    }
    let [pz, py, px] = v.pitch();
    Volume::new([hz, hy, hx], [2.0 * pz, 2.0 * py, 2.0 * px], v.kind(), out)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Pixels lit to at least a tenth of the peak probe coverage, and the outer
/// `band`-pixel rim of that region.
fn lit_regions(cov: &[f64], ny: usize, nx: usize, band: usize) -> (Vec<bool>, Vec<bool>) {
    let peak = cov.iter().cloned().fold(0.0, f64::max);
    let lit: Vec<bool> = cov.iter().map(|c| *c >= 0.1 * peak && peak > 0.0).collect();
    let b = band as isize;
    let rim = (0..ny * nx)
        .map(|k| {
            if !lit[k] {
                return false;
            }
            let (y, x) = ((k / nx) as isize, (k % nx) as isize);
            (-b..=b).any(|dy| {
                (-b..=b).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy < 0 || xx < 0 || yy >= ny as isize || xx >= nx as isize || !lit[yy as usize * nx + xx as usize]
                })
            })
        })
        .collect();
    (lit, rim)
}

/// Thin-object phase projections, one per angle, as line integrals (phase
/// times `pz`).
///
/// Each angle runs the gradient engine with one slice. The phase ramp is
/// removed, the air level is taken from the rim of the well-lit region, and
/// pixels outside that region are treated as air.
pub fn ptycho_sinogram(stack: &DiffractionStack, probe: &ProbeSet, config: &RunConfig, iters: usize) -> Result<Sinogram> {
    let [_, ny, nx] = stack.volume_dims();
    let [pz, py, px] = stack.volume_pitch();
    let projections: Vec<Vec<f64>> = (0..stack.angle_count())
        .into_par_iter()
        .map(|n| {
            let (phases, _) = reconstruct_angle(stack, n, probe, config, 1, iters)?;
            let prop = stack_propagation(stack, n, config);
            let cov = AngleProblem::from_stack(stack, n, probe, prop, config.amplitude_model)?.probe_coverage(ny, nx)?;
            let (lit, rim) = lit_regions(&cov, ny, nx, 3);
            let air = median(phases[0].iter().zip(&rim).filter(|(_, r)| **r).map(|(v, _)| *v).collect());
            let filled: Vec<f64> = phases[0].iter().zip(&lit).map(|(v, l)| if *l { *v } else { air }).collect();
            let flat = remove_phase_ramp(&filled, ny, nx)?;
            let air = median(flat.iter().zip(&rim).filter(|(_, r)| **r).map(|(v, _)| *v).collect());
            Ok(flat.iter().zip(&lit).map(|(v, l)| if *l { (v - air) * pz } else { 0.0 }).collect())
        })
        .collect::<Result<_>>()?;
    Sinogram::new(stack.plan().angles_deg.clone(), ny, nx, [py, px], projections.concat())
}

/// Reference reconstruction from a stack: thin-object projections,
/// bicubic x2 upsampling, SART on the doubled grid.
#[derive(Debug, Clone)]
pub struct GoldResult {
    /// On the doubled grid.
    pub fine: Volume,
    /// Block-averaged back to the stack's volume grid.
    pub volume: Volume,
}

pub fn gold_pipeline(stack: &DiffractionStack, probe: &ProbeSet, config: &RunConfig) -> Result<GoldResult> {
    config.validate()?;
    let sino = ptycho_sinogram(stack, probe, config, config.gold_iters)?;
    let (ny, nx) = sino.shape();
    let [nz, _, _] = stack.volume_dims();
    let [pz, py, px] = stack.volume_pitch();
    let fine_data: Vec<Vec<f64>> = (0..sino.len())
        .into_par_iter()
        .map(|n| upsample2x(sino.projection(n), ny, nx))
        .collect::<Result<_>>()?;
    let fine_sino = Sinogram::new(sino.angles().to_vec(), 2 * ny, 2 * nx, [py / 2.0, px / 2.0], fine_data.concat())?;
    let fine = sart(&fine_sino, [2 * nz, 2 * ny, 2 * nx], [pz / 2.0, py / 2.0, px / 2.0], config.sart_iters)?;
    let volume = block_average2(&fine)?;
    Ok(GoldResult { fine, volume })
}
