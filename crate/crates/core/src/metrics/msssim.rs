use super::{filter_valid, gaussian_kernel, Grid};
use crate::error::{Error, Result};
use crate::imaging::{same_dims, Plane};

pub(crate) const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Number of scales usable for a given smaller side (at most five).
pub(crate) fn scale_count(min_dim: usize) -> usize {
    (1..=5).take_while(|s| min_dim >> (s - 1) >= WIN).count()
}

/// Mean luminance and contrast-structure terms at one scale.
fn ssim_terms(x: &Grid, y: &Grid) -> (f64, f64) {
    let k = gaussian_kernel(WIN, SIGMA);
    let mx = filter_valid(x, &k);
    let my = filter_valid(y, &k);
    let sxx = filter_valid(&x.mul(x), &k);
    let syy = filter_valid(&y.mul(y), &k);
    let sxy = filter_valid(&x.mul(y), &k);
    let n = mx.v.len() as f64;
    let (mut l, mut cs) = (0.0, 0.0);
    for i in 0..mx.v.len() {
        let (a, b) = (mx.v[i], my.v[i]);
        let vx = sxx.v[i] - a * a;
        let vy = syy.v[i] - b * b;
        let cxy = sxy.v[i] - a * b;
        l += (2.0 * a * b + C1) / (a * a + b * b + C1);
        cs += (2.0 * cxy + C2) / (vx + vy + C2);
    }
    (l / n, cs / n)
}

/// 2×2 average pooling (odd trailing rows/columns dropped).
fn downsample(g: &Grid) -> Grid {
    let (h, w) = (g.h / 2, g.w / 2);
    let mut v = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            v.push(
                0.25 * (g.at(2 * y, 2 * x)
                    + g.at(2 * y, 2 * x + 1)
                    + g.at(2 * y + 1, 2 * x)
                    + g.at(2 * y + 1, 2 * x + 1)),
            );
        }
    }
    Grid::new(h, w, v)
}

/// Multi-scale SSIM between a source and the fused image.
///
/// Uses as many of the five canonical scales as the image supports (each
/// scale must still fit the 11×11 window). With fewer than five scales the
/// exponents of the used scales are renormalised to sum to one.
pub fn msssim(x: &impl Plane, f: &impl Plane) -> Result<f64> {
    same_dims(x, f)?;
    let (h, w) = f.dims();
    let m = scale_count(h.min(w));
    if m == 0 {
        return Err(Error::InvalidArgument(format!(
            "MS-SSIM needs at least {WIN}x{WIN}, got {h}x{w}"
        )));
    }
    let wsum: f64 = if m == 5 {
        1.0
    } else {
        WEIGHTS[..m].iter().sum()
    };
    let mut gx = Grid::from_plane(x);
    let mut gf = Grid::from_plane(f);
    let mut value = 1.0;
    for s in 0..m {
        let (l, cs) = ssim_terms(&gx, &gf);
        let wt = WEIGHTS[s] / wsum;
        value *= cs.max(0.0).powf(wt);
        if s == m - 1 {
            value *= l.max(0.0).powf(wt);
        } else {
            gx = downsample(&gx);
            gf = downsample(&gf);
        }
    }
    Ok(value.clamp(0.0, 1.0))
}

/// Reported MS-SSIM: mean over both sources.
pub fn msssim_pair(a: &impl Plane, b: &impl Plane, f: &impl Plane) -> Result<f64> {
    Ok(0.5 * (msssim(a, f)? + msssim(b, f)?))
}
