//! Fidelity metrics: PCC, slice-wise MS-SSIM, and DSC / BER after a
//! two-component EM fit with Bayes-rule binarization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

/// Original five-scale exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const EM_MAX_ITERS: usize = 50;
const EM_TOL: f64 = 1e-9;
const VAR_FLOOR: f64 = 1e-12;

fn same_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Pearson correlation of two equal-length samples.
pub fn pcc_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant input".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn pcc(a: &Volume, b: &Volume) -> Result<f64> {
    same_dims(a, b)?;
    pcc_values(a.data(), b.data())
}

fn gaussian_window() -> [f64; WINDOW] {
    let c = (WINDOW - 1) as f64 / 2.0;
    let mut w = [0.0; WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable 'valid' Gaussian filtering of an `ny x nx` image.
fn filter_valid(img: &[f64], ny: usize, nx: usize, w: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oy, ox) = (ny + 1 - WINDOW, nx + 1 - WINDOW);
    let mut rows = vec![0.0; ny * ox];
    for y in 0..ny {
        for x in 0..ox {
            rows[y * ox + x] = (0..WINDOW).map(|k| w[k] * img[y * nx + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oy * ox];
    for y in 0..oy {
        for x in 0..ox {
            out[y * ox + x] = (0..WINDOW).map(|k| w[k] * rows[(y + k) * ox + x]).sum();
        }
    }
    (out, oy, ox)
}

/// Mean luminance and contrast-structure terms of SSIM at one scale.
fn ssim_terms(a: &[f64], b: &[f64], ny: usize, nx: usize, c1: f64, c2: f64) -> (f64, f64) {
    let w = gaussian_window();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect() };
    let (mu_a, oy, ox) = filter_valid(a, ny, nx, &w);
    let (mu_b, ..) = filter_valid(b, ny, nx, &w);
    let (aa, ..) = filter_valid(&prod(&|x, _| x * x), ny, nx, &w);
    let (bb, ..) = filter_valid(&prod(&|_, y| y * y), ny, nx, &w);
    let (ab, ..) = filter_valid(&prod(&|x, y| x * y), ny, nx, &w);
    let count = (oy * ox) as f64;
    let (mut lum, mut cs) = (0.0, 0.0);
    for k in 0..oy * ox {
        let (ma, mb) = (mu_a[k], mu_b[k]);
        let va = aa[k] - ma * ma;
        let vb = bb[k] - mb * mb;
        let cov = ab[k] - ma * mb;
        lum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += (2.0 * cov + c2) / (va + vb + c2);
    }
    (lum / count, cs / count)
}

fn downsample2(img: &[f64], ny: usize, nx: usize) -> (Vec<f64>, usize, usize) {
    let (hy, hx) = (ny / 2, nx / 2);
    let mut out = vec![0.0; hy * hx];
    for y in 0..hy {
        for x in 0..hx {
            out[y * hx + x] = 0.25
                * (img[2 * y * nx + 2 * x] + img[2 * y * nx + 2 * x + 1] + img[(2 * y + 1) * nx + 2 * x] + img[(2 * y + 1) * nx + 2 * x + 1]);
        }
    }
    (out, hy, hx)
}

/// Largest scale count (at most five) whose coarsest level still holds a window.
pub fn feasible_scales(ny: usize, nx: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len())
        .take_while(|&s| ny.min(nx) >= (1 << (s - 1)) * WINDOW)
        .last()
        .unwrap_or(0)
}

/// MS-SSIM of one 2D slice pair with explicit stabilizers.
pub fn ms_ssim_2d(a: &[f64], b: &[f64], ny: usize, nx: usize, dynamic_range: f64) -> Result<(f64, usize)> {
    if a.len() != ny * nx || b.len() != ny * nx {
        return Err(Error::Shape("slice sizes differ".into()));
    }
    let scales = feasible_scales(ny, nx);
    if scales == 0 {
        return Err(Error::Shape(format!("{ny}x{nx} slice is smaller than the {WINDOW}x{WINDOW} window")));
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let (mut x, mut y, mut h, mut w) = (a.to_vec(), b.to_vec(), ny, nx);
    let mut value = 1.0;
    for (s, weight) in weights.iter().enumerate() {
        let (lum, cs) = ssim_terms(&x, &y, h, w, c1, c2);
        value *= cs.max(0.0).powf(weight / total);
        if s + 1 == scales {
            value *= lum.max(0.0).powf(weight / total);
        } else {
            let (nx_, nh, nw) = downsample2(&x, h, w);
            let (ny_, ..) = downsample2(&y, h, w);
            x = nx_;
            y = ny_;
            h = nh;
            w = nw;
        }
    }
    Ok((value, scales))
}

/// Slice-wise MS-SSIM averaged over `z`, with the scale count used.
pub fn ms_ssim(reference: &Volume, test: &Volume) -> Result<(f64, usize)> {
    same_dims(reference, test)?;
    let [nz, ny, nx] = reference.dims();
    let (lo, hi) = reference
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let per: Vec<(f64, usize)> = (0..nz)
        .into_par_iter()
        .map(|z| ms_ssim_2d(reference.layer(z), test.layer(z), ny, nx, range))
        .collect::<Result<_>>()?;
    let scales = per[0].1;
    Ok((per.iter().map(|p| p.0).sum::<f64>() / nz as f64, scales))
}

/// Two-component 1D Gaussian mixture; component 1 has the larger mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub priors: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    /// Bayes boundary under the fitted priors.
    pub threshold: f64,
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
}

impl GaussianMixture {
    fn log_weighted(&self, x: f64, priors: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|k| priors[k].ln() + log_normal(x, self.means[k], self.variances[k]))
    }

    /// Decision boundary between the fitted components under `priors`: the
    /// root of `p0 N0(x) = p1 N1(x)` between the means if one exists,
    /// otherwise the root (or vertex) closest to their midpoint.
    pub fn boundary(&self, priors: [f64; 2]) -> f64 {
        let ([m0, m1], [v0, v1]) = (self.means, self.variances);
        let mid = 0.5 * (m0 + m1);
        if priors[1] <= 0.0 {
            return f64::MAX;
        }
        if priors[0] <= 0.0 {
            return f64::MIN;
        }
        // Log-density difference as a x^2 + b x + c.
        let a = 0.5 / v1 - 0.5 / v0;
        let b = m0 / v0 - m1 / v1;
        let c = 0.5 * m1 * m1 / v1 - 0.5 * m0 * m0 / v0 + 0.5 * (v1 / v0).ln() + (priors[0] / priors[1]).ln();
        if a.abs() <= 1e-12 * b.abs() {
            return if b != 0.0 { -c / b } else { mid };
        }
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return -b / (2.0 * a);
        }
        // Numerically stable pair of roots.
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        let roots = [q / a, if q != 0.0 { c / q } else { -b / a }];
        let (lo, hi) = (m0.min(m1), m0.max(m1));
        let rank = |r: f64| (!(lo..=hi).contains(&r), (r - mid).abs());
        roots
            .into_iter()
            .filter(|r| r.is_finite())
            .min_by(|x, y| rank(*x).partial_cmp(&rank(*y)).unwrap())
            .unwrap_or(mid)
    }

    /// Class 1 iff `p1 N1(x) > p0 N0(x)`.
    pub fn classify(&self, x: f64, priors: [f64; 2]) -> bool {
        let [l0, l1] = self.log_weighted(x, priors);
        l1 > l0
    }

    pub fn std_devs(&self) -> [f64; 2] {
        self.variances.map(f64::sqrt)
    }
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.max(VAR_FLOOR))
}

/// Fits two Gaussians by EM from a median split.
pub fn em_fit(values: &[f64]) -> Result<GaussianMixture> {
    if values.is_empty() {
        return Err(Error::Degenerate("no values to fit".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixture input"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::Degenerate("all values are equal".into()));
    }
    let median = sorted[sorted.len() / 2];
    let mut split = sorted.partition_point(|&v| v <= median);
    if split == sorted.len() {
        split = sorted.partition_point(|&v| v < median);
    }
    let (low, high) = sorted.split_at(split);
    let (m0, v0) = moments(low);
    let (m1, v1) = moments(high);
    let n = values.len() as f64;
    let mut fit = GaussianMixture {
        priors: [low.len() as f64 / n, high.len() as f64 / n],
        means: [m0, m1],
        variances: [v0, v1],
        threshold: 0.0,
        log_likelihood: Vec::new(),
        converged: false,
    };
    let mut previous = f64::NEG_INFINITY;
    for _ in 0..EM_MAX_ITERS {
        let mut sums = [[0.0f64; 3]; 2];
        let mut loglik = 0.0;
        for &x in values {
            let [l0, l1] = fit.log_weighted(x, fit.priors);
            let top = l0.max(l1);
            let total = top + ((l0 - top).exp() + (l1 - top).exp()).ln();
            loglik += total;
            for (k, l) in [l0, l1].into_iter().enumerate() {
                let r = (l - total).exp();
                sums[k][0] += r;
                sums[k][1] += r * x;
                sums[k][2] += r * x * x;
            }
        }
        fit.log_likelihood.push(loglik);
        debug_assert!(loglik >= previous - 1e-9 * loglik.abs().max(1.0), "EM log-likelihood decreased");
        for k in 0..2 {
            let w = sums[k][0];
            if w <= 0.0 {
                return Err(Error::Degenerate(format!("mixture component {k} is empty")));
            }
            let mean = sums[k][1] / w;
            fit.priors[k] = w / n;
            fit.means[k] = mean;
            fit.variances[k] = (sums[k][2] / w - mean * mean).max(VAR_FLOOR);
        }
        if (loglik - previous).abs() < EM_TOL {
            fit.converged = true;
            break;
        }
        previous = loglik;
    }
    if fit.means[0] > fit.means[1] {
        fit.priors.swap(0, 1);
        fit.means.swap(0, 1);
        fit.variances.swap(0, 1);
    }
    fit.threshold = fit.boundary(fit.priors);
    Ok(fit)
}

pub fn em_threshold(v: &Volume) -> Result<GaussianMixture> {
    em_fit(v.data())
}

/// Labels voxels by `argmax_k p(x|k) p(k)` with `priors` from a reference fit.
pub fn binarize_with_priors(v: &Volume, priors: [f64; 2]) -> Result<(Volume, GaussianMixture)> {
    let fit = em_fit(v.data())?;
    let labels = v.data().iter().map(|&x| if fit.classify(x, priors) { 1.0 } else { 0.0 }).collect();
    Ok((v.with_data(VolumeKind::Label, labels)?, fit))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `2TP / (2TP + FN + FP)`; 1 when both label sets are empty.
    pub fn dsc(&self) -> f64 {
        let den = 2 * self.tp + self.fn_ + self.fp;
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }

    pub fn ber(&self) -> f64 {
        (self.fp + self.fn_) as f64 / self.total() as f64
    }
}

/// Counts over the `z` layers with `mask[z] == true`.
pub fn confusion(reference: &Volume, test: &Volume, mask: &[bool]) -> Result<ConfusionCounts> {
    same_dims(reference, test)?;
    let [nz, ..] = reference.dims();
    if mask.len() != nz {
        return Err(Error::Shape(format!("mask of {} layers for {nz}", mask.len())));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("evaluation mask is empty".into()));
    }
    let mut c = ConfusionCounts::default();
    for z in (0..nz).filter(|&z| mask[z]) {
        for (&r, &t) in reference.layer(z).iter().zip(test.layer(z)) {
            match (r > 0.5, t > 0.5) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
            }
        }
    }
    Ok(c)
}

pub fn dsc(reference: &Volume, test: &Volume, mask: &[bool]) -> Result<f64> {
    Ok(confusion(reference, test, mask)?.dsc())
}

pub fn ber(reference: &Volume, test: &Volume, mask: &[bool]) -> Result<f64> {
    Ok(confusion(reference, test, mask)?.ber())
}

/// Whether a single layer is clearly bimodal: EM means separated by at
/// least `2 (sigma0 + sigma1)`.
pub fn layer_is_unambiguous(values: &[f64]) -> bool {
    match em_fit(values) {
        Ok(fit) => {
            let [s0, s1] = fit.std_devs();
            (fit.means[1] - fit.means[0]).abs() >= 2.0 * (s0 + s1)
        }
        Err(_) => false,
    }
}

/// Per-layer inclusion mask (`true` = evaluated).
pub fn ambiguous_layer_mask(reference: &Volume) -> Vec<bool> {
    let [nz, ..] = reference.dims();
    (0..nz).into_par_iter().map(|z| layer_is_unambiguous(reference.layer(z))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pcc: f64,
    pub ms_ssim: f64,
    pub ms_ssim_scales: usize,
    pub dsc: f64,
    pub ber: f64,
    /// Bayes thresholds of the reference and test fits, in radians.
    pub thresholds: [f64; 2],
    /// Reference class priors `(p0, p1)`.
    pub priors: [f64; 2],
    pub excluded_layers: Vec<usize>,
    pub confusion: ConfusionCounts,
}

/// Full metric suite of `test` against `reference`.
pub fn evaluate(reference: &Volume, test: &Volume) -> Result<MetricsReport> {
    same_dims(reference, test)?;
    let pcc = pcc(reference, test)?;
    let (ms_ssim, ms_ssim_scales) = ms_ssim(reference, test)?;
    let ref_fit = em_fit(reference.data())?;
    let priors = ref_fit.priors;
    let (ref_labels, _) = binarize_with_priors(reference, priors)?;
    let (test_labels, test_fit) = binarize_with_priors(test, priors)?;
    let mask = ambiguous_layer_mask(reference);
    let counts = confusion(&ref_labels, &test_labels, &mask)?;
    Ok(MetricsReport {
        pcc,
        ms_ssim,
        ms_ssim_scales,
        dsc: counts.dsc(),
        ber: counts.ber(),
        thresholds: [ref_fit.threshold, test_fit.boundary(priors)],
        priors,
        excluded_layers: (0..mask.len()).filter(|&z| !mask[z]).collect(),
        confusion: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, [1.0; 3], VolumeKind::Phase, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn pcc_identities() {
        let v = random([4, 5, 6], 1);
        assert!((pcc(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let neg = v.map(VolumeKind::Phase, |x| -x).unwrap();
        assert!((pcc(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        let affine = v.map(VolumeKind::Phase, |x| 3.0 * x + 7.0).unwrap();
        assert!((pcc(&v, &affine).unwrap() - 1.0).abs() < 1e-12);
        let flat = v.map(VolumeKind::Phase, |_| 2.0).unwrap();
        assert!(matches!(pcc(&v, &flat), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pcc_two_pass_oracle() {
        let (a, b) = (random([3, 7, 9], 2), random([3, 7, 9], 3));
        let n = a.len() as f64;
        let ma = a.data().iter().sum::<f64>() / n;
        let mb = b.data().iter().sum::<f64>() / n;
        let sa = (a.data().iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
        let sb = (b.data().iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n).sqrt();
        let r = a.data().iter().zip(b.data()).map(|(x, y)| (x - ma) / sa * (y - mb) / sb).sum::<f64>() / n;
        assert!((pcc(&a, &b).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_self_and_offset() {
        let v = random([2, 180, 180], 4);
        let (s, scales) = ms_ssim(&v, &v).unwrap();
        assert_eq!(scales, 5);
        assert!((s - 1.0).abs() < 1e-9);
        let shifted = v.map(VolumeKind::Phase, |x| x + 5.0).unwrap();
        assert!(ms_ssim(&v, &shifted).unwrap().0 < 1.0);
    }

    #[test]
    fn ms_ssim_too_small() {
        let v = random([1, 8, 40], 5);
        assert!(ms_ssim(&v, &v).is_err());
        assert_eq!(feasible_scales(64, 512), 3);
        assert_eq!(feasible_scales(176, 176), 5);
    }

    /// Direct 2D window sums, no separability, per-scale composition.
    fn oracle_ms_ssim(a: &[f64], b: &[f64], ny: usize, nx: usize, range: f64) -> f64 {
        let mut g = [[0.0; 11]; 11];
        let mut total = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-(((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5))).exp();
                total += *v;
            }
        }
        let c1 = (0.01 * range).powi(2);
        let c2 = (0.03 * range).powi(2);
        let scales = 3;
        let weights = [0.0448, 0.2856, 0.3001];
        let wsum: f64 = weights.iter().sum();
        let (mut x, mut y, mut h, mut w) = (a.to_vec(), b.to_vec(), ny, nx);
        let mut result = 1.0;
        for s in 0..scales {
            let (mut lum, mut cs, mut count) = (0.0, 0.0, 0.0);
            for oy in 0..=h - 11 {
                for ox in 0..=w - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let k = g[i][j] / total;
                            let (p, q) = (x[(oy + i) * w + ox + j], y[(oy + i) * w + ox + j]);
                            ma += k * p;
                            mb += k * q;
                            saa += k * p * p;
                            sbb += k * q * q;
                            sab += k * p * q;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    lum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                    cs += (2.0 * cov + c2) / (va + vb + c2);
                    count += 1.0;
                }
            }
            result *= (cs / count).max(0.0).powf(weights[s] / wsum);
            if s == scales - 1 {
                result *= (lum / count).max(0.0).powf(weights[s] / wsum);
            } else {
                let (nh, nw) = (h / 2, w / 2);
                let pool = |img: &[f64]| -> Vec<f64> {
                    (0..nh * nw)
                        .map(|k| {
                            let (r, c) = (k / nw, k % nw);
                            (img[2 * r * w + 2 * c] + img[2 * r * w + 2 * c + 1] + img[(2 * r + 1) * w + 2 * c] + img[(2 * r + 1) * w + 2 * c + 1]) / 4.0
                        })
                        .collect()
                };
                x = pool(&x);
                y = pool(&y);
                h = nh;
                w = nw;
            }
        }
        result
    }

    #[test]
    fn ms_ssim_checkerboard_oracle() {
        let (ny, nx) = (64, 512);
        let board = |y: usize, x: usize| if ((y / 4) + (x / 4)) % 2 == 0 { 1.0 } else { 0.0 };
        let a = Volume::from_fn([1, ny, nx], [1.0; 3], VolumeKind::Phase, |_, y, x| board(y, x)).unwrap();
        let b = Volume::from_fn([1, ny, nx], [1.0; 3], VolumeKind::Phase, |_, y, x| board(y, x + 1)).unwrap();
        let (got, scales) = ms_ssim(&a, &b).unwrap();
        assert_eq!(scales, 3);
        let expected = oracle_ms_ssim(a.data(), b.data(), ny, nx, 1.0);
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    fn mixture(n: usize, p0: f64, m: [f64; 2], s: [f64; 2], seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = [Normal::new(m[0], s[0]).unwrap(), Normal::new(m[1], s[1]).unwrap()];
        (0..n).map(|_| if rng.random::<f64>() < p0 { d[0].sample(&mut rng) } else { d[1].sample(&mut rng) }).collect()
    }

    #[test]
    fn em_symmetric_midpoint() {
        let values = mixture(20_000, 0.5, [0.0, 1.0], [0.01, 0.01], 1);
        let fit = em_fit(&values).unwrap();
        assert!((fit.threshold - 0.5).abs() < 0.01, "{}", fit.threshold);
        // Grid search for the sign change of ln(p0 N0) - ln(p1 N1).
        let f = |x: f64| {
            fit.priors[0].ln() + log_normal(x, fit.means[0], fit.variances[0])
                - fit.priors[1].ln()
                - log_normal(x, fit.means[1], fit.variances[1])
        };
        let grid: Vec<f64> = (0..=100_000).map(|i| i as f64 / 100_000.0).collect();
        let cross = grid.windows(2).find(|w| f(w[0]) > 0.0 && f(w[1]) <= 0.0).unwrap()[0];
        assert!((cross - fit.threshold).abs() < 2e-5);
        assert!(fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs()));
    }

    #[test]
    fn em_recovers_priors() {
        let values = mixture(50_000, 0.7, [0.0, 0.05], [0.005, 0.008], 2);
        let fit = em_fit(&values).unwrap();
        assert!((fit.priors[0] - 0.7).abs() < 0.02 && (fit.priors[1] - 0.3).abs() < 0.02, "{:?}", fit.priors);
        assert!((fit.priors[0] + fit.priors[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn em_degenerate() {
        assert!(matches!(em_fit(&[0.3; 50]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn binarize_limits_and_boundary() {
        let values = mixture(20_000, 0.8, [0.0, 1.0], [0.2, 0.3], 3);
        let v = Volume::new([1, 100, 200], [1.0; 3], VolumeKind::Phase, values.clone()).unwrap();
        let (labels, fit) = binarize_with_priors(&v, [1.0, 0.0]).unwrap();
        assert!(labels.data().iter().all(|&l| l == 0.0));
        let priors = [0.8, 0.2];
        let (labels, _) = binarize_with_priors(&v, priors).unwrap();
        // Empirical boundary: largest class-0 value below the smallest class-1 value.
        let max0 = values.iter().zip(labels.data()).filter(|(_, &l)| l == 0.0).map(|(x, _)| *x).filter(|x| *x < 1.5).fold(f64::MIN, f64::max);
        let min1 = values.iter().zip(labels.data()).filter(|(_, &l)| l == 1.0).map(|(x, _)| *x).fold(f64::MAX, f64::min);
        let empirical = 0.5 * (max0 + min1);
        // Closed form: roots of the quadratic from equating the weighted log densities.
        let ([m0, m1], [v0, v1]) = (fit.means, fit.variances);
        let a = 1.0 / (2.0 * v1) - 1.0 / (2.0 * v0);
        let b = m0 / v0 - m1 / v1;
        let c = m1 * m1 / (2.0 * v1) - m0 * m0 / (2.0 * v0) + 0.5 * (v1 / v0).ln() + (priors[0] / priors[1]).ln();
        let disc = (b * b - 4.0 * a * c).sqrt();
        let analytic = [(-b + disc) / (2.0 * a), (-b - disc) / (2.0 * a)]
            .into_iter()
            .find(|r| *r > m0 && *r < m1)
            .unwrap();
        assert!((empirical - analytic).abs() < 0.01 * analytic.abs(), "{empirical} vs {analytic}");
        assert!((fit.boundary(priors) - analytic).abs() < 1e-9);
    }

    #[test]
    fn equal_priors_symmetric_is_midpoint() {
        let fit = GaussianMixture {
            priors: [0.5, 0.5],
            means: [0.0, 2.0],
            variances: [0.1, 0.1],
            threshold: 0.0,
            log_likelihood: vec![],
            converged: true,
        };
        assert!((fit.boundary([0.5, 0.5]) - 1.0).abs() < 1e-12);
        assert!(!fit.classify(0.999, [0.5, 0.5]) && fit.classify(1.001, [0.5, 0.5]));
    }

    fn labels(values: &[u8]) -> Volume {
        Volume::new([1, 1, values.len()], [1.0; 3], VolumeKind::Label, values.iter().map(|&v| v as f64).collect()).unwrap()
    }

    #[test]
    fn dsc_ber_hand_counts() {
        let r = labels(&[1, 1, 1, 0, 0, 0, 0, 0]);
        let t = labels(&[1, 1, 0, 1, 0, 0, 0, 0]);
        let c = confusion(&r, &t, &[true]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, tn: 4, fp: 1, fn_: 1 });
        assert!((c.dsc() - 4.0 / 6.0).abs() < 1e-15);
        assert!((c.ber() - 0.25).abs() < 1e-15);
        assert_eq!(dsc(&r, &r, &[true]).unwrap(), 1.0);
        assert_eq!(ber(&r, &r, &[true]).unwrap(), 0.0);
        let inv = labels(&[0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(dsc(&r, &inv, &[true]).unwrap(), 0.0);
        assert_eq!(ber(&r, &inv, &[true]).unwrap(), 1.0);
        assert!(confusion(&r, &t, &[false]).is_err());
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"fn\":1"));
    }

    #[test]
    fn layer_mask_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = Normal::new(0.0, 0.4).unwrap();
        let bimodal: Vec<f64> = (0..400).map(|k| if k % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let noisy: Vec<f64> = (0..400).map(|k| if k % 2 == 0 { 1.0 } else { 0.0 } + n.sample(&mut rng)).collect();
        let data = [bimodal.clone(), vec![0.2; 400], noisy].concat();
        let v = Volume::new([3, 20, 20], [1.0; 3], VolumeKind::Phase, data).unwrap();
        assert_eq!(ambiguous_layer_mask(&v), vec![true, false, false]);
    }

    #[test]
    fn evaluate_self() {
        let v = Volume::from_fn([4, 24, 24], [1.0; 3], VolumeKind::Phase, |z, y, x| if (x + y + z) % 5 < 2 { 0.05 } else { 0.0 }).unwrap();
        let r = evaluate(&v, &v).unwrap();
        assert!((r.pcc - 1.0).abs() < 1e-12 && (r.ms_ssim - 1.0).abs() < 1e-9);
        assert_eq!((r.dsc, r.ber), (1.0, 0.0));
        let low = v.data().iter().filter(|x| **x == 0.0).count() as f64 / v.data().len() as f64;
        assert!((r.priors[0] - low).abs() < 1e-6, "{:?} vs {low}", r.priors);
        assert!(r.excluded_layers.is_empty());
    }
}
