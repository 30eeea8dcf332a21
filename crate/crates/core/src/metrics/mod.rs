//! The nine fusion-quality indicators and the report machinery.
//!
//! Every metric works on the [0, 255] scale internally.

mod basic;
mod fmi;
mod msssim;
mod qabf;
mod qw;
mod report;
mod viff;

pub use basic::{average_gradient, scd, spatial_frequency, standard_deviation};
pub use fmi::fmi_wt;
pub use msssim::{msssim, msssim_pair};
pub use qabf::q_abf;
pub use qw::q_w;
pub use report::{
    evaluate_batch, evaluate_pair, format_csv, format_table, mean_report, EvalItem, MetricReport,
    TableRow, METRIC_NAMES,
};
pub use viff::viff;

use crate::error::{Error, Result};
use crate::imaging::{same_dims, Plane};

/// Row-major plane on the 255 scale.
#[derive(Clone, Debug)]
pub(crate) struct Grid {
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Grid {
    pub fn from_plane(p: &impl Plane) -> Self {
        Self {
            h: p.height(),
            w: p.width(),
            v: p.values().iter().map(|x| x * 255.0).collect(),
        }
    }

    pub fn new(h: usize, w: usize, v: Vec<f64>) -> Self {
        debug_assert_eq!(v.len(), h * w);
        Self { h, w, v }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.w + x]
    }

    pub fn mul(&self, o: &Grid) -> Grid {
        Grid::new(
            self.h,
            self.w,
            self.v.iter().zip(&o.v).map(|(a, b)| a * b).collect(),
        )
    }
}

pub(crate) fn check_triplet(a: &impl Plane, b: &impl Plane, f: &impl Plane) -> Result<()> {
    same_dims(a, f)?;
    same_dims(b, f)
}

pub(crate) fn require_min(p: &impl Plane, min: usize, what: &str) -> Result<()> {
    let (h, w) = p.dims();
    if h.min(w) < min {
        return Err(Error::InvalidArgument(format!(
            "{what} needs images of at least {min}x{min}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Normalised 1-D Gaussian taps.
pub(crate) fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|x| x / s).collect()
}

/// Separable 'valid' correlation.
pub(crate) fn filter_valid(g: &Grid, k: &[f64]) -> Grid {
    let n = k.len();
    let (oh, ow) = (g.h + 1 - n, g.w + 1 - n);
    let mut tmp = vec![0.0; g.h * ow];
    for y in 0..g.h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * g.v[y * g.w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    Grid::new(oh, ow, out)
}

/// Symmetric (edge-inclusive) reflection of an index into `[0, n)`.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable 'same' correlation with symmetric border reflection.
pub(crate) fn filter_same(g: &Grid, k: &[f64]) -> Grid {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; g.h * g.w];
    for y in 0..g.h {
        for x in 0..g.w {
            tmp[y * g.w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * g.v[y * g.w + reflect(x as isize + i as isize - r, g.w)])
                .sum();
        }
    }
    let mut out = vec![0.0; g.h * g.w];
    for y in 0..g.h {
        for x in 0..g.w {
            out[y * g.w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, g.h) * g.w + x])
                .sum();
        }
    }
    Grid::new(g.h, g.w, out)
}
