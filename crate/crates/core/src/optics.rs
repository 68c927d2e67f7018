//! Free-space propagation and synthetic coherent-mode probes.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;

use crate::config::rng_for;
use crate::error::{Error, Result};
use crate::fft::{fft2, fftfreq, ifft2};
use crate::volume::ComplexField2D;

/// Paraxial angular-spectrum propagation by `dz` (nm, either sign).
///
/// The transfer function `exp(-i pi lambda dz |q|^2)` has unit modulus, so
/// the operator is unitary and `propagate(u, -dz)` is its exact inverse.
pub fn propagate(u: &ComplexField2D, dz: f64, wavelength: f64) -> Result<ComplexField2D> {
    if !u.is_finite() {
        return Err(Error::NonFinite("propagate input"));
    }
    if !dz.is_finite() || !(wavelength > 0.0 && wavelength.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "propagation needs finite dz and positive wavelength, got dz={dz}, wavelength={wavelength}"
        )));
    }
    if dz == 0.0 {
        return Ok(u.clone());
    }
    let (ny, nx) = u.shape();
    let mut data = u.data().to_vec();
    apply_transfer(&mut data, ny, nx, u.pitch(), dz, wavelength);
    ComplexField2D::new(ny, nx, u.pitch(), data)
}

pub fn propagate_inverse(u: &ComplexField2D, dz: f64, wavelength: f64) -> Result<ComplexField2D> {
    propagate(u, -dz, wavelength)
}

/// In-place propagation of a raw row-major buffer; used by the hot loops.
pub(crate) fn apply_transfer(
    data: &mut [Complex64],
    ny: usize,
    nx: usize,
    pitch: f64,
    dz: f64,
    wavelength: f64,
) {
    if dz == 0.0 {
        return;
    }
    fft2(data, ny, nx);
    let qy = fftfreq(ny, pitch);
    let qx = fftfreq(nx, pitch);
    let k = -PI * wavelength * dz;
    for (y, &fy) in qy.iter().enumerate() {
        let row = &mut data[y * nx..(y + 1) * nx];
        for (v, &fx) in row.iter_mut().zip(&qx) {
            *v *= Complex64::from_polar(1.0, k * (fx * fx + fy * fy));
        }
    }
    ifft2(data, ny, nx);
}

/// Propagation on a grid enlarged `pad` times (zero-filled, centered), then
/// cropped back. Suppresses wrap-around for validation runs; not unitary.
pub fn propagate_padded(
    u: &ComplexField2D,
    dz: f64,
    wavelength: f64,
    pad: usize,
) -> Result<ComplexField2D> {
    if pad <= 1 {
        return propagate(u, dz, wavelength);
    }
    let (ny, nx) = u.shape();
    let (py, px) = (ny * pad, nx * pad);
    let (oy, ox) = ((py - ny) / 2, (px - nx) / 2);
    let mut big = vec![Complex64::new(0.0, 0.0); py * px];
    for y in 0..ny {
        big[(y + oy) * px + ox..(y + oy) * px + ox + nx].copy_from_slice(&u.data()[y * nx..(y + 1) * nx]);
    }
    let big = propagate(&ComplexField2D::new(py, px, u.pitch(), big)?, dz, wavelength)?;
    ComplexField2D::from_fn(ny, nx, u.pitch(), |y, x| big.get(y + oy, x + ox))
}

/// Mutually incoherent coherent modes of the illumination.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    modes: Vec<ComplexField2D>,
    powers: Vec<f64>,
}

impl ProbeSet {
    /// `modes` must share a grid; each is normalized to unit L2 norm and
    /// `powers` is normalized to sum to one.
    pub fn new(modes: Vec<ComplexField2D>, powers: Vec<f64>) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| Error::InvalidArgument("probe needs at least one mode".into()))?;
        if modes.len() != powers.len() {
            return Err(Error::Shape(format!(
                "{} modes but {} powers",
                modes.len(),
                powers.len()
            )));
        }
        if modes.iter().any(|m| !m.same_grid(first) || m.pitch() != first.pitch()) {
            return Err(Error::Shape("probe modes must share dimensions and pitch".into()));
        }
        if powers.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument("mode powers must be non-negative".into()));
        }
        let total: f64 = powers.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("mode powers sum to zero".into()));
        }
        let modes = modes
            .into_iter()
            .map(|m| {
                let norm = m.norm_sqr().sqrt();
                if norm == 0.0 {
                    return Err(Error::Degenerate("zero probe mode".into()));
                }
                let (ny, nx) = m.shape();
                let pitch = m.pitch();
                ComplexField2D::new(ny, nx, pitch, m.into_data().into_iter().map(|c| c / norm).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProbeSet {
            modes,
            powers: powers.iter().map(|p| p / total).collect(),
        })
    }

    /// Rebuilds a probe from fields that carry their power in their norm
    /// (the on-disk representation).
    pub fn from_weighted(fields: Vec<ComplexField2D>) -> Result<Self> {
        let powers = fields.iter().map(|f| f.norm_sqr()).collect();
        Self::new(fields, powers)
    }

    /// Modes scaled by the square root of their power.
    pub fn weighted_modes(&self) -> Vec<ComplexField2D> {
        self.modes
            .iter()
            .zip(&self.powers)
            .map(|(m, &p)| {
                let s = p.sqrt();
                ComplexField2D::new(m.ny(), m.nx(), m.pitch(), m.data().iter().map(|c| c * s).collect())
                    .expect("scaled finite mode")
            })
            .collect()
    }

    pub fn modes(&self) -> &[ComplexField2D] {
        &self.modes
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.modes[0].shape()
    }

    pub fn pitch(&self) -> f64 {
        self.modes[0].pitch()
    }
}

/// Discrete inner product `<a, b> = sum conj(a) b`.
pub fn inner(a: &ComplexField2D, b: &ComplexField2D) -> Complex64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x.conj() * y).sum()
}

fn hermite(n: usize, x: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, 2.0 * x);
    if n == 0 {
        return h0;
    }
    for k in 1..n {
        let h2 = 2.0 * x * h1 - 2.0 * k as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// Hermite-Gaussian index pairs `(a, b)` ordered by total order `a + b`.
fn mode_indices(count: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    let mut order = 0;
    while out.len() < count {
        for b in 0..=order {
            if out.len() == count {
                break;
            }
            out.push((order - b, b));
        }
        order += 1;
    }
    out
}

/// Synthetic probe: `mode_count` Hermite-Gaussian modes of the given waist
/// under a shared seeded defocus phase, Gram-Schmidt orthonormalized on the
/// discrete grid, with powers proportional to `power_decay^m`.
pub fn make_probe(
    mode_count: usize,
    waist: f64,
    grid: (usize, usize, f64),
    power_decay: f64,
    seed: u64,
) -> Result<ProbeSet> {
    let (ny, nx, pitch) = grid;
    if mode_count == 0 {
        return Err(Error::InvalidArgument("mode count must be >= 1".into()));
    }
    if !(waist > 0.0) || !(power_decay > 0.0) {
        return Err(Error::InvalidArgument("waist and power decay must be positive".into()));
    }
    let extent = ny.min(nx) as f64 * pitch;
    if 4.0 * waist > extent || waist < pitch {
        return Err(Error::InvalidArgument(format!(
            "grid of {ny}x{nx} at {pitch} nm cannot hold a probe of waist {waist} nm"
        )));
    }
    let mut rng = rng_for(seed, &[0x9_0be]);
    let defocus: f64 = rng.random_range(0.5..1.5);
    let (cy, cx) = ((ny as f64 - 1.0) / 2.0, (nx as f64 - 1.0) / 2.0);
    let screen = |y: usize, x: usize| {
        let (dy, dx) = ((y as f64 - cy) * pitch / waist, (x as f64 - cx) * pitch / waist);
        Complex64::from_polar(1.0, defocus * (dx * dx + dy * dy))
    };

    let mut modes: Vec<ComplexField2D> = Vec::with_capacity(mode_count);
    for (a, b) in mode_indices(mode_count) {
        let mut field = ComplexField2D::from_fn(ny, nx, pitch, |y, x| {
            let (dy, dx) = ((y as f64 - cy) * pitch / waist, (x as f64 - cx) * pitch / waist);
            let env = (-(dx * dx + dy * dy)).exp();
            screen(y, x) * hermite(a, 2f64.sqrt() * dx) * hermite(b, 2f64.sqrt() * dy) * env
        })?;
        // Two passes of modified Gram-Schmidt keep the Gram matrix at rounding level.
        for _ in 0..2 {
            for prev in &modes {
                let c = inner(prev, &field);
                field
                    .data_mut()
                    .iter_mut()
                    .zip(prev.data())
                    .for_each(|(v, p)| *v -= c * p);
            }
        }
        let norm = field.norm_sqr().sqrt();
        if norm < 1e-10 {
            return Err(Error::Degenerate(format!("mode ({a},{b}) vanished on the grid")));
        }
        field.data_mut().iter_mut().for_each(|v| *v /= norm);
        modes.push(field);
    }
    let powers = (0..mode_count).map(|m| power_decay.powi(m as i32)).collect();
    ProbeSet::new(modes, powers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_field(ny: usize, nx: usize, seed: u64) -> ComplexField2D {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ComplexField2D::from_fn(ny, nx, 10.0, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
        .unwrap()
    }

    fn max_abs_diff(a: &ComplexField2D, b: &ComplexField2D) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_distance_is_identity() {
        let u = random_field(8, 6, 1);
        assert_eq!(propagate(&u, 0.0, 0.1).unwrap(), u);
        assert_eq!(propagate_inverse(&u, 0.0, 0.1).unwrap(), u);
    }

    #[test]
    fn uniform_field_is_eigenfunction() {
        let u = ComplexField2D::filled(16, 16, 5.0, Complex64::new(0.3, -0.4)).unwrap();
        let v = propagate(&u, 1.0e4, 0.14).unwrap();
        assert!(max_abs_diff(&u, &v) < 1e-14);
    }

    #[test]
    fn gaussian_waist_follows_fresnel_formula() {
        let (n, pitch, w0, lambda) = (256, 1.0, 8.0, 0.5);
        let c = (n as f64 - 1.0) / 2.0;
        let u = ComplexField2D::from_fn(n, n, pitch, |y, x| {
            let r2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            Complex64::new((-r2 / (w0 * w0)).exp(), 0.0)
        })
        .unwrap();
        let zr = PI * w0 * w0 / lambda;
        for dz in [0.5 * zr, zr, 2.0 * zr] {
            let v = propagate(&u, dz, lambda).unwrap();
            let (mut m2, mut tot) = (0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let i = v.get(y, x).norm_sqr();
                    m2 += i * (x as f64 - c).powi(2);
                    tot += i;
                }
            }
            // |u|^2 ~ exp(-2 r^2 / w^2) has <x^2> = w^2 / 4.
            let measured = 2.0 * (m2 / tot).sqrt();
            let expected = w0 * (1.0 + (dz / zr).powi(2)).sqrt();
            assert!((measured / expected - 1.0).abs() < 0.01, "dz={dz}: {measured} vs {expected}");
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let u = random_field(12, 10, 2);
        let v = propagate(&u, 350.0, 0.14).unwrap();
        assert!((v.norm_sqr() / u.norm_sqr() - 1.0).abs() < 1e-10);
        let back = propagate_inverse(&v, 350.0, 0.14).unwrap();
        assert!(max_abs_diff(&back, &u) < 1e-10);
    }

    #[test]
    fn adjoint_identity() {
        let u = random_field(16, 16, 3);
        let w = random_field(16, 16, 4);
        let lhs = inner(&propagate(&u, 800.0, 0.14).unwrap(), &w);
        let rhs = inner(&u, &propagate_inverse(&w, 800.0, 0.14).unwrap());
        assert!((lhs - rhs).norm() < 1e-10 * lhs.norm().max(1.0));
    }

    #[test]
    fn composition() {
        let u = random_field(16, 8, 5);
        let ab = propagate(&propagate(&u, 120.0, 0.2).unwrap(), -45.0, 0.2).unwrap();
        let direct = propagate(&u, 75.0, 0.2).unwrap();
        assert!(max_abs_diff(&ab, &direct) < 1e-10);
    }

    #[test]
    fn non_finite_rejected() {
        let mut u = random_field(2, 2, 0);
        u.data_mut()[0] = Complex64::new(f64::INFINITY, 0.0);
        assert!(matches!(propagate(&u, 1.0, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn padded_matches_unpadded_for_compact_field() {
        let n = 32;
        let c = (n as f64 - 1.0) / 2.0;
        let u = ComplexField2D::from_fn(n, n, 1.0, |y, x| {
            let r2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            Complex64::new((-r2 / 9.0).exp(), 0.0)
        })
        .unwrap();
        let a = propagate(&u, 5.0, 0.5).unwrap();
        let b = propagate_padded(&u, 5.0, 0.5, 2).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-6);
    }

    #[test]
    fn single_mode_probe() {
        let p = make_probe(1, 28.0, (16, 16, 14.0), 0.5, 0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.powers(), &[1.0]);
        assert!((p.modes()[0].norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn geometric_powers() {
        let p = make_probe(3, 28.0, (16, 16, 14.0), 0.5, 0).unwrap();
        let expected = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (a, b) in p.powers().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn twelve_modes_are_orthonormal() {
        let p = make_probe(12, 40.0, (64, 64, 10.0), 0.7, 11).unwrap();
        for a in 0..12 {
            for b in 0..12 {
                // Direct summation, independent of `inner`.
                let g: Complex64 = p.modes()[a]
                    .data()
                    .iter()
                    .zip(p.modes()[b].data())
                    .fold(Complex64::new(0.0, 0.0), |acc, (x, y)| acc + x.conj() * y);
                if a == b {
                    assert!((g.re - 1.0).abs() < 1e-12 && g.im.abs() < 1e-12);
                } else {
                    assert!(g.norm() < 1e-8, "<{a},{b}> = {g}");
                }
            }
        }
    }

    #[test]
    fn probe_grid_too_small() {
        assert!(make_probe(1, 100.0, (8, 8, 10.0), 0.5, 0).is_err());
        assert!(make_probe(0, 10.0, (8, 8, 10.0), 0.5, 0).is_err());
    }

    #[test]
    fn probe_is_seed_deterministic() {
        let a = make_probe(3, 28.0, (16, 16, 14.0), 0.5, 9).unwrap();
        let b = make_probe(3, 28.0, (16, 16, 14.0), 0.5, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weighted_round_trip() {
        let p = make_probe(3, 28.0, (16, 16, 14.0), 0.5, 2).unwrap();
        let back = ProbeSet::from_weighted(p.weighted_modes()).unwrap();
        for (a, b) in back.powers().iter().zip(p.powers()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
