//! Unitary discrete Fourier transforms over row-major buffers.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// In-place transform along one axis of a row-major array with shape `dims`.
/// Unnormalized.
fn transform_axis(data: &mut [Complex64], dims: &[usize], axis: usize, inverse: bool) {
    let len = dims[axis];
    if len == 1 {
        return;
    }
    let fft = plan(len, inverse);
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    if inner == 1 {
        fft.process(data);
        return;
    }
    let mut line = vec![Complex64::new(0.0, 0.0); len];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            for (k, v) in line.iter_mut().enumerate() {
                *v = data[base + k * inner + i];
            }
            fft.process(&mut line);
            for (k, v) in line.iter().enumerate() {
                data[base + k * inner + i] = *v;
            }
        }
    }
}

/// Unitary N-dimensional DFT (`1/sqrt(n)` on both directions).
pub fn fft_nd(data: &mut [Complex64], dims: &[usize], inverse: bool) {
    debug_assert_eq!(data.len(), dims.iter().product::<usize>());
    for axis in 0..dims.len() {
        transform_axis(data, dims, axis, inverse);
    }
    let scale = 1.0 / (data.len() as f64).sqrt();
    data.iter_mut().for_each(|v| *v *= scale);
}

pub fn fft2(data: &mut [Complex64], ny: usize, nx: usize) {
    fft_nd(data, &[ny, nx], false);
}

pub fn ifft2(data: &mut [Complex64], ny: usize, nx: usize) {
    fft_nd(data, &[ny, nx], true);
}

/// Sample frequencies in cycles per unit length, numpy `fftfreq` order.
pub fn fftfreq(n: usize, pitch: f64) -> Vec<f64> {
    let span = n as f64 * pitch;
    (0..n)
        .map(|k| {
            let k = if k < n.div_ceil(2) { k as isize } else { k as isize - n as isize };
            k as f64 / span
        })
        .collect()
}

/// Signed integer frequency index for position `k` on an `n`-point grid.
pub fn freq_index(k: usize, n: usize) -> isize {
    if k < n.div_ceil(2) {
        k as isize
    } else {
        k as isize - n as isize
    }
}
