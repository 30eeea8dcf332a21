use std::f64::consts::FRAC_PI_2;

use super::{check_triplet, require_min};
use crate::error::Result;
use crate::imaging::{sobel_components, Plane};

const KAPPA_G: f64 = -15.0;
const SIGMA_G: f64 = 0.5;
const KAPPA_A: f64 = -22.0;
const SIGMA_A: f64 = 0.8;

/// Sigmoid preservation curve scaled so a perfect match maps to exactly 1.
fn preservation(x: f64, kappa: f64, sigma: f64) -> f64 {
    let gamma = 1.0 + (kappa * (1.0 - sigma)).exp();
    gamma / (1.0 + (kappa * (x - sigma)).exp())
}

fn orientation(gx: f64, gy: f64) -> f64 {
    if gx == 0.0 {
        FRAC_PI_2
    } else {
        (gy / gx).atan()
    }
}

struct Edges {
    strength: Vec<f64>,
    angle: Vec<f64>,
}

fn edges(p: &impl Plane) -> Edges {
    let (gx, gy) = sobel_components(p);
    let strength = gx
        .values()
        .iter()
        .zip(gy.values())
        .map(|(x, y)| (x * x + y * y).sqrt())
        .collect();
    let angle = gx
        .values()
        .iter()
        .zip(gy.values())
        .map(|(&x, &y)| orientation(x, y))
        .collect();
    Edges { strength, angle }
}

/// Per-pixel edge preservation of `src` in `fused`.
fn preserved(src: &Edges, fused: &Edges, i: usize) -> f64 {
    let (gs, gf) = (src.strength[i], fused.strength[i]);
    let g = if gs.max(gf) == 0.0 {
        0.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    let a = ((src.angle[i] - fused.angle[i]).abs() - FRAC_PI_2).abs() / FRAC_PI_2;
    preservation(g, KAPPA_G, SIGMA_G) * preservation(a, KAPPA_A, SIGMA_A)
}

/// Xydeas–Petrović edge-information preservation, weighted by source edge
/// strength. Returns 0 when no source has any edge.
pub fn q_abf(a: &impl Plane, b: &impl Plane, f: &impl Plane) -> Result<f64> {
    check_triplet(a, b, f)?;
    require_min(f, 3, "Q_AB/F")?;
    let (ea, eb, ef) = (edges(a), edges(b), edges(f));
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..ef.strength.len() {
        let (wa, wb) = (ea.strength[i], eb.strength[i]);
        num += preserved(&ea, &ef, i) * wa + preserved(&eb, &ef, i) * wb;
        den += wa + wb;
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::GrayImage;
    use crate::metrics::testutil::{rand_img, structured};
    use crate::rng::SeededRng;

    pub(crate) fn oracle(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> f64 {
        let (h, w) = (a.height() as isize, a.width() as isize);
        let px = |img: &GrayImage, y: isize, x: isize| {
            img.at(y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize)
        };
        let sob = |img: &GrayImage, y: isize, x: isize| {
            let mut gx = 0.0;
            let mut gy = 0.0;
            let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let v = px(img, y + dy, x + dx);
                    gx += kx[(dy + 1) as usize][(dx + 1) as usize] * v;
                    gy += kx[(dx + 1) as usize][(dy + 1) as usize] * v;
                }
            }
            let g = (gx * gx + gy * gy).sqrt();
            let al = if gx == 0.0 {
                std::f64::consts::FRAC_PI_2
            } else {
                (gy / gx).atan()
            };
            (g, al)
        };
        let q =
            |x: f64, k: f64, s: f64| (1.0 + (k * (1.0 - s)).exp()) / (1.0 + (k * (x - s)).exp());
        let (mut num, mut den) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let (gf, af) = sob(f, y, x);
                for src in [a, b] {
                    let (gs, as_) = sob(src, y, x);
                    let g = if gs == 0.0 && gf == 0.0 {
                        0.0
                    } else if gs > gf {
                        gf / gs
                    } else {
                        gs / gf
                    };
                    let d = (as_ - af).abs();
                    let al = (d - std::f64::consts::FRAC_PI_2).abs() * 2.0 / std::f64::consts::PI;
                    num += q(g, -15.0, 0.5) * q(al, -22.0, 0.8) * gs;
                    den += gs;
                }
            }
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    #[test]
    fn brute_force_agreement() {
        let mut rng = SeededRng::new(1);
        for _ in 0..10 {
            let (a, b, f) = (
                rand_img(&mut rng, 16, 16),
                rand_img(&mut rng, 16, 16),
                rand_img(&mut rng, 16, 16),
            );
            assert!((q_abf(&a, &b, &f).unwrap() - oracle(&a, &b, &f)).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_and_degenerate() {
        let x = structured(3, 32);
        let v = q_abf(&x, &x, &x).unwrap();
        assert!(v >= 0.99, "{v}");
        assert!((v - oracle(&x, &x, &x)).abs() < 1e-12);
        let c = GrayImage::filled(16, 16, 0.2).unwrap();
        assert_eq!(q_abf(&c, &c, &c).unwrap(), 0.0);
    }

    #[test]
    fn swap_symmetric() {
        let mut rng = SeededRng::new(2);
        let (a, b, f) = (
            rand_img(&mut rng, 16, 16),
            rand_img(&mut rng, 16, 16),
            rand_img(&mut rng, 16, 16),
        );
        assert!((q_abf(&a, &b, &f).unwrap() - q_abf(&b, &a, &f).unwrap()).abs() < 1e-12);
    }
}
