use super::{check_triplet, Grid};
use crate::error::{Error, Result};
use crate::imaging::Plane;

pub(crate) const BINS: usize = 256;

/// One-level Haar detail coefficients (LH, HL, HH) concatenated.
pub(crate) fn haar_details(g: &Grid) -> Vec<f64> {
    let (h, w) = (g.h / 2, g.w / 2);
    let mut lh = Vec::with_capacity(h * w);
    let mut hl = Vec::with_capacity(h * w);
    let mut hh = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (g.at(2 * y, 2 * x), g.at(2 * y, 2 * x + 1));
            let (c, d) = (g.at(2 * y + 1, 2 * x), g.at(2 * y + 1, 2 * x + 1));
            lh.push((a + b - c - d) / 2.0);
            hl.push((a - b + c - d) / 2.0);
            hh.push((a - b - c + d) / 2.0);
        }
    }
    lh.extend(hl);
    lh.extend(hh);
    lh
}

fn bin_of(v: &[f64]) -> Vec<usize> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0; v.len()];
    }
    let scale = BINS as f64 / (hi - lo);
    v.iter()
        .map(|x| (((x - lo) * scale) as usize).min(BINS - 1))
        .collect()
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.log2()
        })
        .sum()
}

/// `I(X; Y) / (H(X) + H(Y))` from 256-bin min-max histograms; 0 when both
/// entropies vanish.
pub(crate) fn normalized_mi(x: &[f64], y: &[f64]) -> f64 {
    let (bx, by) = (bin_of(x), bin_of(y));
    let n = x.len() as f64;
    let mut joint = vec![0.0; BINS * BINS];
    let mut px = vec![0.0; BINS];
    let mut py = vec![0.0; BINS];
    for (&i, &j) in bx.iter().zip(&by) {
        joint[i * BINS + j] += 1.0;
        px[i] += 1.0;
        py[j] += 1.0;
    }
    let (hx, hy) = (entropy(&px, n), entropy(&py, n));
    if hx + hy == 0.0 {
        return 0.0;
    }
    let hxy = entropy(&joint, n);
    (hx + hy - hxy) / (hx + hy)
}

/// Feature mutual information on Haar detail coefficients, summed over both
/// sources.
pub fn fmi_wt(a: &impl Plane, b: &impl Plane, f: &impl Plane) -> Result<f64> {
    check_triplet(a, b, f)?;
    let (h, w) = f.dims();
    if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "FMI-WT needs even dimensions, got {h}x{w}"
        )));
    }
    let ff = haar_details(&Grid::from_plane(f));
    let fa = haar_details(&Grid::from_plane(a));
    let fb = haar_details(&Grid::from_plane(b));
    Ok(normalized_mi(&ff, &fa) + normalized_mi(&ff, &fb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::GrayImage;
    use crate::metrics::testutil::{rand_img, structured};
    use crate::rng::SeededRng;

    #[test]
    fn identity_is_one() {
        let x = structured(1, 64);
        let v = fmi_wt(&x, &x, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-3, "{v}");
        assert_eq!(v, fmi_wt(&x, &x, &x).unwrap());
    }

    #[test]
    fn independent_noise_near_zero() {
        let a = structured(2, 256);
        let b = structured(3, 256);
        let mut rng = SeededRng::new(4);
        let f = rand_img(&mut rng, 256, 256);
        let v = fmi_wt(&a, &b, &f).unwrap();
        assert!(v < 0.1, "{v}");
        assert!(v >= 0.0);
    }

    #[test]
    fn haar_of_known_block() {
        let g = Grid::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(haar_details(&g), vec![-2.0, -1.0, 0.0]);
    }

    #[test]
    fn rejects_odd_and_handles_constants() {
        let odd = GrayImage::filled(9, 9, 0.5).unwrap();
        assert!(fmi_wt(&odd, &odd, &odd).is_err());
        let c = GrayImage::filled(8, 8, 0.5).unwrap();
        assert_eq!(fmi_wt(&c, &c, &c).unwrap(), 0.0);
    }

    #[test]
    fn swap_symmetric() {
        let mut rng = SeededRng::new(5);
        let (a, b, f) = (
            rand_img(&mut rng, 32, 32),
            rand_img(&mut rng, 32, 32),
            rand_img(&mut rng, 32, 32),
        );
        assert!((fmi_wt(&a, &b, &f).unwrap() - fmi_wt(&b, &a, &f).unwrap()).abs() < 1e-12);
    }
}
