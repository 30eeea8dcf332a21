use super::{check_triplet, require_min, Grid};
use crate::error::Result;
use crate::imaging::Plane;

/// `sqrt(RF² + CF²)` from mean squared row and column first differences.
pub fn spatial_frequency(f: &impl Plane) -> Result<f64> {
    require_min(f, 2, "SF")?;
    let g = Grid::from_plane(f);
    let (mut rf, mut cf) = (0.0, 0.0);
    for y in 0..g.h {
        for x in 1..g.w {
            rf += (g.at(y, x) - g.at(y, x - 1)).powi(2);
        }
    }
    for y in 1..g.h {
        for x in 0..g.w {
            cf += (g.at(y, x) - g.at(y - 1, x)).powi(2);
        }
    }
    rf /= (g.h * (g.w - 1)) as f64;
    cf /= ((g.h - 1) * g.w) as f64;
    Ok((rf + cf).sqrt())
}

/// Population standard deviation.
pub fn standard_deviation(f: &impl Plane) -> f64 {
    let g = Grid::from_plane(f);
    let n = g.v.len() as f64;
    let m = g.v.iter().sum::<f64>() / n;
    (g.v.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean of `sqrt((dx² + dy²) / 2)` over forward differences.
pub fn average_gradient(f: &impl Plane) -> Result<f64> {
    require_min(f, 2, "AG")?;
    let g = Grid::from_plane(f);
    let mut s = 0.0;
    for y in 0..g.h - 1 {
        for x in 0..g.w - 1 {
            let dx = g.at(y, x + 1) - g.at(y, x);
            let dy = g.at(y + 1, x) - g.at(y, x);
            s += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(s / ((g.h - 1) * (g.w - 1)) as f64)
}

/// Pearson correlation; zero when either operand has no variance.
pub(crate) fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    // relative threshold so rounding residue of a constant counts as constant
    let tiny = |s: f64, m: f64| s <= 1e-24 * n * (1.0 + m * m);
    if tiny(sxx, mx) || tiny(syy, my) {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Sum of correlations of differences: `corr(F − B, A) + corr(F − A, B)`.
pub fn scd(a: &impl Plane, b: &impl Plane, f: &impl Plane) -> Result<f64> {
    check_triplet(a, b, f)?;
    let (ga, gb, gf) = (
        Grid::from_plane(a),
        Grid::from_plane(b),
        Grid::from_plane(f),
    );
    let d1: Vec<f64> = gf.v.iter().zip(&gb.v).map(|(x, y)| x - y).collect();
    let d2: Vec<f64> = gf.v.iter().zip(&ga.v).map(|(x, y)| x - y).collect();
    Ok(pearson(&d1, &ga.v) + pearson(&d2, &gb.v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{GrayImage, RawField};
    use crate::metrics::testutil::rand_img;
    use crate::rng::SeededRng;

    #[test]
    fn closed_forms() {
        let c = GrayImage::filled(16, 16, 0.3).unwrap();
        assert_eq!(spatial_frequency(&c).unwrap(), 0.0);
        assert!(standard_deviation(&c) < 1e-12);
        assert_eq!(average_gradient(&c).unwrap(), 0.0);

        let cb = GrayImage::new(
            8,
            8,
            (0..64).map(|i| ((i / 8 + i % 8) % 2) as f64).collect(),
        )
        .unwrap();
        assert!((spatial_frequency(&cb).unwrap() - 2f64.sqrt() * 255.0).abs() < 1e-9);

        let half = GrayImage::new(
            8,
            8,
            (0..64).map(|i| if i < 32 { 0.0 } else { 1.0 }).collect(),
        )
        .unwrap();
        assert!((standard_deviation(&half) - 127.5).abs() < 1e-9);

        let ramp =
            GrayImage::new(16, 16, (0..256).map(|i| (i % 16) as f64 / 255.0).collect()).unwrap();
        assert!((average_gradient(&ramp).unwrap() - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn scd_cases() {
        let mut rng = SeededRng::new(1);
        let a = rand_img(&mut rng, 16, 16);
        let b = rand_img(&mut rng, 16, 16);
        let sum = RawField::new(
            16,
            16,
            a.values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| x + y)
                .collect(),
        )
        .unwrap();
        assert!((scd(&a, &b, &sum).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(scd(&a, &a, &a).unwrap(), 0.0);
    }

    #[test]
    fn contrast_increases_sf_sd_ag() {
        let mut rng = SeededRng::new(2);
        let x = rand_img(&mut rng, 16, 16);
        let half =
            GrayImage::new(16, 16, x.values().iter().map(|v| 0.25 + 0.5 * v).collect()).unwrap();
        assert!(spatial_frequency(&x).unwrap() > spatial_frequency(&half).unwrap());
        assert!(standard_deviation(&x) > standard_deviation(&half));
        assert!(average_gradient(&x).unwrap() > average_gradient(&half).unwrap());
    }
}
