//! Thin rustfft wrapper: cached plans and n-dimensional transforms over
//! row-major hypercube grids. Transforms are unnormalized (forward matches
//! `sum_g x_g e^{-i k theta_g}`, inverse matches `sum_k X_k e^{+i k theta_g}`);
//! callers apply the `1/N^n` factor where needed.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use once_cell::sync::Lazy;
use rustfft::{Fft, FftDirection, FftPlanner};

static PLANS: Lazy<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    let mut cache = PLANS.lock().unwrap();
    cache
        .entry((len, forward))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            planner.plan_fft(
                len,
                if forward {
                    FftDirection::Forward
                } else {
                    FftDirection::Inverse
                },
            )
        })
        .clone()
}

fn transform_axis(data: &mut [Complex64], dim: usize, size: usize, axis: usize, forward: bool) {
    let fft = plan(size, forward);
    let npts = size.pow(dim as u32);
    // stride of the axis in the row-major layout (axis 0 slowest)
    let stride = size.pow((dim - 1 - axis) as u32);
    let block = stride * size;
    let mut line = vec![Complex64::new(0.0, 0.0); size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for base in (0..npts).step_by(block) {
        for off in 0..stride {
            for j in 0..size {
                line[j] = data[base + off + j * stride];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for j in 0..size {
                data[base + off + j * stride] = line[j];
            }
        }
    }
}

pub fn forward_nd(data: &mut [Complex64], dim: usize, size: usize) {
    for axis in 0..dim {
        transform_axis(data, dim, size, axis, true);
    }
}

pub fn inverse_nd(data: &mut [Complex64], dim: usize, size: usize) {
    for axis in 0..dim {
        transform_axis(data, dim, size, axis, false);
    }
}
