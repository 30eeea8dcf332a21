use super::{check_triplet, require_min, Grid};
use crate::error::Result;
use crate::imaging::Plane;

pub(crate) const WINDOW: usize = 8;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

pub(crate) struct WinStats {
    pub mx: f64,
    pub my: f64,
    pub vx: f64,
    pub vy: f64,
    pub cxy: f64,
}

pub(crate) fn window_stats(x: &Grid, y: &Grid, y0: usize, x0: usize, size: usize) -> WinStats {
    let n = (size * size) as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in y0..y0 + size {
        for c in x0..x0 + size {
            sx += x.at(r, c);
            sy += y.at(r, c);
        }
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for r in y0..y0 + size {
        for c in x0..x0 + size {
            let (dx, dy) = (x.at(r, c) - mx, y.at(r, c) - my);
            vx += dx * dx;
            vy += dy * dy;
            cxy += dx * dy;
        }
    }
    WinStats {
        mx,
        my,
        vx: vx / n,
        vy: vy / n,
        cxy: cxy / n,
    }
}

pub(crate) fn stabilised_quality(s: &WinStats) -> f64 {
    ((2.0 * s.mx * s.my + C1) * (2.0 * s.cxy + C2))
        / ((s.mx * s.mx + s.my * s.my + C1) * (s.vx + s.vy + C2))
}

/// Piella's weighted fusion quality over sliding 8×8 windows.
///
/// Saliency is the local variance. Each window mixes the source qualities by
/// relative saliency and is weighted by its larger saliency; with no
/// saliency anywhere the windows count equally.
pub fn q_w(a: &impl Plane, b: &impl Plane, f: &impl Plane) -> Result<f64> {
    check_triplet(a, b, f)?;
    require_min(f, WINDOW, "Q_W")?;
    let (ga, gb, gf) = (
        Grid::from_plane(a),
        Grid::from_plane(b),
        Grid::from_plane(f),
    );
    let mut num = 0.0;
    let mut den = 0.0;
    let mut plain = 0.0;
    let mut count = 0.0;
    for y0 in 0..=gf.h - WINDOW {
        for x0 in 0..=gf.w - WINDOW {
            let sa = window_stats(&ga, &gf, y0, x0, WINDOW);
            let sb = window_stats(&gb, &gf, y0, x0, WINDOW);
            let (va, vb) = (sa.vx, sb.vx);
            let lambda = if va + vb > 0.0 { va / (va + vb) } else { 0.5 };
            let q = lambda * stabilised_quality(&sa) + (1.0 - lambda) * stabilised_quality(&sb);
            let c = va.max(vb);
            num += c * q;
            den += c;
            plain += q;
            count += 1.0;
        }
    }
    let v = if den > 0.0 { num / den } else { plain / count };
    Ok(v.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::GrayImage;
    use crate::metrics::testutil::{rand_img, structured};
    use crate::rng::SeededRng;

    #[test]
    fn identity_and_symmetry() {
        let x = structured(1, 32);
        assert!((q_w(&x, &x, &x).unwrap() - 1.0).abs() < 1e-9);
        let mut rng = SeededRng::new(2);
        let (a, b, f) = (
            rand_img(&mut rng, 16, 16),
            rand_img(&mut rng, 16, 16),
            rand_img(&mut rng, 16, 16),
        );
        let v = q_w(&a, &b, &f).unwrap();
        assert!((v - q_w(&b, &a, &f).unwrap()).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn single_window_direct_formula() {
        let mut rng = SeededRng::new(3);
        let (a, b, f) = (
            rand_img(&mut rng, 8, 8),
            rand_img(&mut rng, 8, 8),
            rand_img(&mut rng, 8, 8),
        );
        // one window: the weights cancel, leaving λ·Q(a,f) + (1−λ)·Q(b,f)
        let s = |p: &GrayImage| p.values().iter().map(|v| v * 255.0).collect::<Vec<_>>();
        let (xa, xb, xf) = (s(&a), s(&b), s(&f));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / 64.0;
        let cov = |u: &[f64], v: &[f64]| {
            let (mu, mv) = (mean(u), mean(v));
            u.iter()
                .zip(v)
                .map(|(p, q)| (p - mu) * (q - mv))
                .sum::<f64>()
                / 64.0
        };
        let ssim = |u: &[f64], v: &[f64]| {
            let (c1, c2) = (6.5025, 58.5225);
            let (mu, mv) = (mean(u), mean(v));
            (2.0 * mu * mv + c1) * (2.0 * cov(u, v) + c2)
                / ((mu * mu + mv * mv + c1) * (cov(u, u) + cov(v, v) + c2))
        };
        let (va, vb) = (cov(&xa, &xa), cov(&xb, &xb));
        let lam = va / (va + vb);
        let want = (lam * ssim(&xa, &xf) + (1.0 - lam) * ssim(&xb, &xf)).clamp(0.0, 1.0);
        assert!((q_w(&a, &b, &f).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn constant_triplet_and_size_check() {
        let c = GrayImage::filled(16, 16, 0.4).unwrap();
        assert!((q_w(&c, &c, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!(q_w(&c, &c, &GrayImage::filled(8, 16, 0.4).unwrap()).is_err());
    }
}
