use super::{check_triplet, filter_same, gaussian_kernel, require_min, Grid};
use crate::error::Result;
use crate::imaging::Plane;

/// Visual-noise variance of the HVS channel model.
pub(crate) const NOISE_VAR: f64 = 2.0;
pub(crate) const BAND_WEIGHTS: [f64; 4] = [1.0 / 2.15, 0.0, 0.15 / 2.15, 1.0 / 2.15];
const EPS: f64 = 1e-10;
const STAB: f64 = 1e-7;
const BANDS: usize = 4;

/// Per-pixel VIF terms of one source against the fused image at one band.
pub(crate) struct BandTerms {
    /// Information preserved in the fused image.
    pub vid: Vec<f64>,
    /// Information in the source itself.
    pub vind: Vec<f64>,
    pub gain: Vec<f64>,
}

/// The four band images of the Gaussian pyramid (band 1 full size).
pub(crate) fn pyramid(g: &Grid) -> Vec<Grid> {
    let mut out = Vec::with_capacity(BANDS);
    let mut cur = g.clone();
    for band in 1..=BANDS {
        if band > 1 {
            let n = (1usize << (BANDS - band + 1)) + 1;
            let k = gaussian_kernel(n, n as f64 / 5.0);
            let f = filter_same(&cur, &k);
            let (h, w) = (f.h.div_ceil(2), f.w.div_ceil(2));
            let mut v = Vec::with_capacity(h * w);
            for y in (0..f.h).step_by(2) {
                for x in (0..f.w).step_by(2) {
                    v.push(f.at(y, x));
                }
            }
            cur = Grid::new(h, w, v);
        }
        out.push(cur.clone());
    }
    out
}

pub(crate) fn band_terms(src: &Grid, fused: &Grid, band: usize) -> BandTerms {
    let n = (1usize << (BANDS - band + 1)) + 1;
    let k = gaussian_kernel(n, n as f64 / 5.0);
    let mu1 = filter_same(src, &k);
    let mu2 = filter_same(fused, &k);
    let s11 = filter_same(&src.mul(src), &k);
    let s22 = filter_same(&fused.mul(fused), &k);
    let s12 = filter_same(&src.mul(fused), &k);
    let len = src.v.len();
    let mut t = BandTerms {
        vid: vec![0.0; len],
        vind: vec![0.0; len],
        gain: vec![0.0; len],
    };
    for i in 0..len {
        let mut v1 = (s11.v[i] - mu1.v[i] * mu1.v[i]).max(0.0);
        let v2 = (s22.v[i] - mu2.v[i] * mu2.v[i]).max(0.0);
        let c12 = s12.v[i] - mu1.v[i] * mu2.v[i];
        let mut g = c12 / (v1 + EPS);
        let mut sv = v2 - g * c12;
        if v1 < EPS {
            g = 0.0;
            sv = v2;
            v1 = 0.0;
        }
        if v2 < EPS {
            g = 0.0;
            sv = 0.0;
        }
        if g < 0.0 {
            sv = v2;
            g = 0.0;
        }
        if sv <= EPS {
            sv = EPS;
        }
        t.vid[i] = (1.0 + g * g * v1 / (sv + NOISE_VAR)).log10();
        t.vind[i] = (1.0 + v1 / NOISE_VAR).log10();
        t.gain[i] = g;
    }
    t
}

/// Multi-band visual information fidelity for fusion.
///
/// Per pixel and band the source with the smaller distortion gain supplies
/// both information terms (the two are averaged on equal gains); bands are combined with weights
/// `[1, 0, 0.15, 1] / 2.15`.
pub fn viff(a: &impl Plane, b: &impl Plane, f: &impl Plane) -> Result<f64> {
    check_triplet(a, b, f)?;
    require_min(f, 32, "VIFF")?;
    let pa = pyramid(&Grid::from_plane(a));
    let pb = pyramid(&Grid::from_plane(b));
    let pf = pyramid(&Grid::from_plane(f));
    let mut total = 0.0;
    for band in 1..=BANDS {
        let ta = band_terms(&pa[band - 1], &pf[band - 1], band);
        let tb = band_terms(&pb[band - 1], &pf[band - 1], band);
        let (mut vid, mut vind) = (0.0, 0.0);
        for i in 0..ta.vid.len() {
            let (z, m) = if ta.gain[i] < tb.gain[i] {
                (ta.vid[i], ta.vind[i])
            } else if tb.gain[i] < ta.gain[i] {
                (tb.vid[i], tb.vind[i])
            } else {
                // equal gains: average so the score is swap symmetric
                (
                    0.5 * (ta.vid[i] + tb.vid[i]),
                    0.5 * (ta.vind[i] + tb.vind[i]),
                )
            };
            vid += z + STAB;
            vind += m + STAB;
        }
        total += BAND_WEIGHTS[band - 1] * vid / vind;
    }
    Ok(total)
}
