//! Straight-loop reference implementations used only by unit tests.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::optics::ProbeSet;
use crate::ptychosim::Propagation;
use crate::volume::ComplexField2D;

/// Unitary DFT by direct summation; `sign = -1` forward, `+1` inverse.
pub fn naive_dft(a: &[Complex64], n: usize, sign: f64) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for ky in 0..n {
        for kx in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let arg = sign * 2.0 * PI * ((ky * y + kx * x) as f64) / n as f64;
                    acc += a[y * n + x] * Complex64::from_polar(1.0, arg);
                }
            }
            out[ky * n + kx] = acc / n as f64;
        }
    }
    out
}

/// Far field of one illumination through `slices`, all on an `n x n` grid.
pub fn naive_far_field(illum: &[Complex64], slices: &[ComplexField2D], n: usize, pitch: f64, prop: Propagation) -> Vec<Complex64> {
    let freq = |k: usize| {
        let k = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
        k / (n as f64 * pitch)
    };
    let mut u = illum.to_vec();
    for (l, s) in slices.iter().enumerate() {
        for (v, o) in u.iter_mut().zip(s.data()) {
            *v *= o;
        }
        if l + 1 < slices.len() {
            let mut spec = naive_dft(&u, n, -1.0);
            for ky in 0..n {
                for kx in 0..n {
                    let q2 = freq(ky).powi(2) + freq(kx).powi(2);
                    spec[ky * n + kx] *= Complex64::from_polar(1.0, -PI * prop.wavelength * prop.dz * q2);
                }
            }
            u = naive_dft(&spec, n, 1.0);
        }
    }
    naive_dft(&u, n, -1.0)
}

pub fn naive_intensity(probe: &ProbeSet, slices: &[ComplexField2D], prop: Propagation) -> Vec<f64> {
    let n = probe.shape().0;
    let mut out = vec![0.0; n * n];
    for (mode, &p) in probe.modes().iter().zip(probe.powers()) {
        let far = naive_far_field(mode.data(), slices, n, probe.pitch(), prop);
        for (o, f) in out.iter_mut().zip(&far) {
            *o += p * f.norm_sqr();
        }
    }
    out
}
