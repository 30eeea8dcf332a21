//! Stage II hybrid objective: intensity, std-selected SSIM and Sobel-gradient
//! terms on the fused luma.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    patch_origins, same_dims, sobel_adjoint, sobel_components, sobel_gradient, Plane,
};

/// SSIM stabilisers for a unit dynamic range.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Term weights: `total = alpha·l_int + beta·l_ssim + grad_weight·l_grad`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "one")]
    pub grad_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            beta: 0.5,
            grad_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("grad_weight", self.grad_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} = {v} must be >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Tiling of the SSIM term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGeometry {
    pub size: usize,
    pub stride: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self {
            size: 16,
            stride: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_int: f64,
    pub l_ssim: f64,
    pub l_grad: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub grad_weight: f64,
}

fn check3(f: &impl Plane, a: &impl Plane, b: &impl Plane) -> Result<()> {
    same_dims(f, a)?;
    same_dims(f, b)
}

/// Mean absolute deviation of the fused luma from the pointwise source max.
pub fn intensity_loss(fused: &impl Plane, a: &impl Plane, b: &impl Plane) -> Result<f64> {
    check3(fused, a, b)?;
    let n = fused.values().len() as f64;
    Ok(fused
        .values()
        .iter()
        .zip(a.values().iter().zip(b.values()))
        .map(|(f, (x, y))| (f - x.max(*y)).abs())
        .sum::<f64>()
        / n)
}

/// Whole-patch SSIM with population statistics.
pub fn ssim_index(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape(format!(
            "patches of {} and {} values",
            x.len(),
            y.len()
        )));
    }
    let s = SsimStats::new(x, y);
    Ok(s.value())
}

struct SsimStats {
    n: f64,
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cxy: f64,
}

impl SsimStats {
    fn new(x: &[f64], y: &[f64]) -> Self {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            vx += (a - mx) * (a - mx);
            vy += (b - my) * (b - my);
            cxy += (a - mx) * (b - my);
        }
        Self {
            n,
            mx,
            my,
            vx: vx / n,
            vy: vy / n,
            cxy: cxy / n,
        }
    }

    fn value(&self) -> f64 {
        ((2.0 * self.mx * self.my + SSIM_C1) * (2.0 * self.cxy + SSIM_C2))
            / ((self.mx * self.mx + self.my * self.my + SSIM_C1) * (self.vx + self.vy + SSIM_C2))
    }

    /// d SSIM / d x_k for every element of `x`.
    fn grad_x(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let a1 = 2.0 * self.mx * self.my + SSIM_C1;
        let a2 = 2.0 * self.cxy + SSIM_C2;
        let b1 = self.mx * self.mx + self.my * self.my + SSIM_C1;
        let b2 = self.vx + self.vy + SSIM_C2;
        let n = self.n;
        x.iter()
            .zip(y)
            .map(|(&xk, &yk)| {
                let da1 = 2.0 * self.my / n;
                let da2 = 2.0 * (yk - self.my) / n;
                let db1 = 2.0 * self.mx / n;
                let db2 = 2.0 * (xk - self.mx) / n;
                ((da1 * a2 + a1 * da2) * b1 * b2 - a1 * a2 * (db1 * b2 + b1 * db2))
                    / (b1 * b2).powi(2)
            })
            .collect()
    }
}

/// Which source supplies the structural reference of a patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    A,
    B,
}

fn population_std(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    let m = p.iter().sum::<f64>() / n;
    (p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

/// The source whose patch has the larger standard deviation; ties pick A.
pub fn std_patch_select(a_patch: &[f64], b_patch: &[f64]) -> Selection {
    if population_std(b_patch) > population_std(a_patch) {
        Selection::B
    } else {
        Selection::A
    }
}

fn extract_patch(p: &impl Plane, y0: usize, x0: usize, size: usize) -> Vec<f64> {
    let w = p.width();
    let v = p.values();
    let mut out = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        out.extend_from_slice(&v[y * w + x0..y * w + x0 + size]);
    }
    out
}

fn patch_grid(p: &impl Plane, geom: PatchGeometry) -> Result<Vec<(usize, usize)>> {
    let (h, w) = p.dims();
    if geom.size == 0 || geom.stride == 0 {
        return Err(Error::InvalidArgument(
            "patch size and stride must be positive".into(),
        ));
    }
    if geom.size > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "patch size {} exceeds image {h}x{w}",
            geom.size
        )));
    }
    let ys = patch_origins(h, geom.size, geom.stride);
    let xs = patch_origins(w, geom.size, geom.stride);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect())
}

fn ssim_std_impl(
    fused: &impl Plane,
    a: &impl Plane,
    b: &impl Plane,
    geom: PatchGeometry,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    check3(fused, a, b)?;
    let origins = patch_grid(fused, geom)?;
    let w = fused.width();
    let n = origins.len() as f64;
    let mut grad = if want_grad {
        vec![0.0; fused.values().len()]
    } else {
        Vec::new()
    };
    let mut sum = 0.0;
    for &(y0, x0) in &origins {
        let fp = extract_patch(fused, y0, x0, geom.size);
        let ap = extract_patch(a, y0, x0, geom.size);
        let bp = extract_patch(b, y0, x0, geom.size);
        let reference = match std_patch_select(&ap, &bp) {
            Selection::A => ap,
            Selection::B => bp,
        };
        let stats = SsimStats::new(&fp, &reference);
        sum += stats.value();
        if want_grad {
            let g = stats.grad_x(&fp, &reference);
            for dy in 0..geom.size {
                for dx in 0..geom.size {
                    grad[(y0 + dy) * w + x0 + dx] -= g[dy * geom.size + dx] / n;
                }
            }
        }
    }
    Ok((1.0 - sum / n, grad))
}

/// `1 − mean SSIM(fused patch, std-selected source patch)`.
pub fn ssim_std_loss(
    fused: &impl Plane,
    a: &impl Plane,
    b: &impl Plane,
    geom: PatchGeometry,
) -> Result<f64> {
    ssim_std_impl(fused, a, b, geom, false).map(|(l, _)| l)
}

/// Mean absolute deviation of `|∇fused|` from `max(|∇a|, |∇b|)`.
pub fn gradient_loss(fused: &impl Plane, a: &impl Plane, b: &impl Plane) -> Result<f64> {
    gradient_impl(fused, a, b, false).map(|(l, _)| l)
}

fn gradient_impl(
    fused: &impl Plane,
    a: &impl Plane,
    b: &impl Plane,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    check3(fused, a, b)?;
    let (h, w) = fused.dims();
    if h < 3 || w < 3 {
        return Err(Error::shape(format!(
            "gradient loss needs >= 3x3, got {h}x{w}"
        )));
    }
    let (gx, gy) = sobel_components(fused);
    let ga = sobel_gradient(a);
    let gb = sobel_gradient(b);
    let n = (h * w) as f64;
    let mut loss = 0.0;
    let mut dgx = vec![0.0; if want_grad { h * w } else { 0 }];
    let mut dgy = dgx.clone();
    for i in 0..h * w {
        let (x, y) = (gx.values()[i], gy.values()[i]);
        let mag = (x * x + y * y).sqrt();
        let r = mag - ga.values()[i].max(gb.values()[i]);
        loss += r.abs();
        if want_grad && mag > 0.0 && r != 0.0 {
            let s = r.signum() / n;
            dgx[i] = s * x / mag;
            dgy[i] = s * y / mag;
        }
    }
    let grad = if want_grad {
        sobel_adjoint(h, w, &dgx, &dgy)
    } else {
        Vec::new()
    };
    Ok((loss / n, grad))
}

/// Weighted sum of the three terms.
pub fn total_loss(
    fused: &impl Plane,
    a: &impl Plane,
    b: &impl Plane,
    weights: LossWeights,
    geom: PatchGeometry,
) -> Result<LossBreakdown> {
    let l_int = intensity_loss(fused, a, b)?;
    let l_ssim = ssim_std_loss(fused, a, b, geom)?;
    let l_grad = gradient_loss(fused, a, b)?;
    Ok(breakdown(l_int, l_ssim, l_grad, weights))
}

fn breakdown(l_int: f64, l_ssim: f64, l_grad: f64, w: LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_int,
        l_ssim,
        l_grad,
        total: w.alpha * l_int + w.beta * l_ssim + w.grad_weight * l_grad,
        alpha: w.alpha,
        beta: w.beta,
        grad_weight: w.grad_weight,
    }
}

/// [`total_loss`] plus its gradient with respect to every fused pixel.
pub fn total_loss_with_grad(
    fused: &impl Plane,
    a: &impl Plane,
    b: &impl Plane,
    weights: LossWeights,
    geom: PatchGeometry,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check3(fused, a, b)?;
    let n = fused.values().len() as f64;
    let mut grad = vec![0.0; fused.values().len()];
    let mut l_int = 0.0;
    for (i, (f, (x, y))) in fused
        .values()
        .iter()
        .zip(a.values().iter().zip(b.values()))
        .enumerate()
    {
        let r = f - x.max(*y);
        l_int += r.abs();
        if r != 0.0 {
            grad[i] += weights.alpha * r.signum() / n;
        }
    }
    l_int /= n;
    let (l_ssim, gs) = ssim_std_impl(fused, a, b, geom, true)?;
    let (l_grad, gg) = gradient_impl(fused, a, b, true)?;
    for i in 0..grad.len() {
        grad[i] += weights.beta * gs[i] + weights.grad_weight * gg[i];
    }
    Ok((breakdown(l_int, l_ssim, l_grad, weights), grad))
}
