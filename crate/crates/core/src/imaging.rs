//! Image carriers, color conversion, Sobel gradients and patch statistics.
//!
//! Intensities are continuous reals in `[0, 1]`; quantisation to 8 bits only
//! happens at PNG boundaries.

use std::path::Path;

use image::{GrayImage as Luma8, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Smallest accepted image side (3×3 kernels plus patching).
pub const MIN_SIDE: usize = 8;

/// Read access to a single real-valued plane.
pub trait Plane {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn values(&self) -> &[f64];

    fn at(&self, y: usize, x: usize) -> f64 {
        self.values()[y * self.width() + x]
    }

    fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
}

/// Unbounded finite real field: noised images, activations, gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct RawField {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl RawField {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} field needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite field value {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn from_plane(p: &impl Plane) -> Self {
        Self {
            height: p.height(),
            width: p.width(),
            values: p.values().to_vec(),
        }
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

impl Plane for RawField {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Build from arbitrary finite values by clamping into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite intensity".into()));
        }
        Self::new(
            height,
            width,
            values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Result<Self> {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Elementwise maximum of two equally sized images.
    pub fn pointwise_max(&self, other: &GrayImage) -> Result<GrayImage> {
        same_dims(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.max(*b))
            .collect();
        GrayImage::new(self.height, self.width, values)
    }

    pub fn load_png(path: &Path) -> Result<GrayImage> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let l = img.to_luma8();
        let (w, h) = l.dimensions();
        GrayImage::new(
            h as usize,
            w as usize,
            l.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Luma8 = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.values.iter().map(|&v| to_u8(v)).collect(),
        )
        .expect("buffer sized");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl Plane for GrayImage {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn same_dims(a: &impl Plane, b: &impl Plane) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Three-plane RGB image in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    height: usize,
    width: usize,
    planes: [Vec<f64>; 3],
}

impl ColorImage {
    pub fn new(height: usize, width: usize, r: Vec<f64>, g: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        for p in [&r, &g, &b] {
            if p.len() != height * width {
                return Err(Error::shape("color planes differ in size".to_string()));
            }
            if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "intensity {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            planes: [r, g, b],
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn red(&self) -> &[f64] {
        &self.planes[0]
    }

    pub fn green(&self) -> &[f64] {
        &self.planes[1]
    }

    pub fn blue(&self) -> &[f64] {
        &self.planes[2]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = y * self.width + x;
        [self.planes[0][i], self.planes[1][i], self.planes[2][i]]
    }

    pub fn load_png(path: &Path) -> Result<ColorImage> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let n = (w * h) as usize;
        let mut planes = [
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        ];
        for px in rgb.pixels() {
            for (c, plane) in planes.iter_mut().enumerate() {
                plane.push(px.0[c] as f64 / 255.0);
            }
        }
        let [r, g, b] = planes;
        ColorImage::new(h as usize, w as usize, r, g, b)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            *px = Rgb([
                to_u8(self.planes[0][i]),
                to_u8(self.planes[1][i]),
                to_u8(self.planes[2][i]),
            ]);
        }
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Either kind of source image, as decoded from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceImage {
    Gray(GrayImage),
    Color(ColorImage),
}

impl SourceImage {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            SourceImage::Gray(g) => g.dims(),
            SourceImage::Color(c) => (c.height(), c.width()),
        }
    }

    /// Luma plane (identity for grayscale).
    pub fn luma(&self) -> GrayImage {
        match self {
            SourceImage::Gray(g) => g.clone(),
            SourceImage::Color(c) => rgb_to_ycbcr(c).luma,
        }
    }

    pub fn is_color(&self) -> bool {
        matches!(self, SourceImage::Color(_))
    }

    /// Decode a PNG, keeping color only when the file stores color.
    pub fn load_png(path: &Path) -> Result<SourceImage> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        if img.color().has_color() {
            ColorImage::load_png(path).map(SourceImage::Color)
        } else {
            GrayImage::load_png(path).map(SourceImage::Gray)
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        match self {
            SourceImage::Gray(g) => g.save_png(path),
            SourceImage::Color(c) => c.save_png(path),
        }
    }
}

/// Full-range BT.601 luma/chroma decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct YCbCrImage {
    pub luma: GrayImage,
    pub cb: Vec<f64>,
    pub cr: Vec<f64>,
}

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;
// 2 (1 - KB) and 2 (1 - KR)
const CB_SCALE: f64 = 1.772;
const CR_SCALE: f64 = 1.402;

pub fn rgb_to_ycbcr(img: &ColorImage) -> YCbCrImage {
    let n = img.height * img.width;
    let mut y = Vec::with_capacity(n);
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    for i in 0..n {
        let (r, g, b) = (img.planes[0][i], img.planes[1][i], img.planes[2][i]);
        let luma = KR * r + KG * g + KB * b;
        y.push(luma.clamp(0.0, 1.0));
        cb.push((0.5 + (b - luma) / CB_SCALE).clamp(0.0, 1.0));
        cr.push((0.5 + (r - luma) / CR_SCALE).clamp(0.0, 1.0));
    }
    YCbCrImage {
        luma: GrayImage::new(img.height, img.width, y).expect("luma in range"),
        cb,
        cr,
    }
}

fn ycbcr_pixel_to_rgb(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    let r = y + CR_SCALE * (cr - 0.5);
    let b = y + CB_SCALE * (cb - 0.5);
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

/// Exact inverse of [`rgb_to_ycbcr`], clamped into `[0, 1]`.
pub fn ycbcr_to_rgb(img: &YCbCrImage) -> ColorImage {
    let (h, w) = img.luma.dims();
    let n = h * w;
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let rgb = ycbcr_pixel_to_rgb(img.luma.values[i], img.cb[i], img.cr[i]);
        for c in 0..3 {
            planes[c][i] = rgb[c].clamp(0.0, 1.0);
        }
    }
    let [r, g, b] = planes;
    ColorImage::new(h, w, r, g, b).expect("clamped")
}

/// Attach chroma to a luma plane without changing the luma.
///
/// Out-of-gamut pixels have their chroma pulled toward neutral just far enough
/// that every channel lands in `[0, 1]`; the luma of the result equals `luma`
/// exactly (up to float rounding), unlike a per-channel clamp.
pub fn attach_chroma(luma: &GrayImage, cb: &[f64], cr: &[f64]) -> Result<ColorImage> {
    let (h, w) = luma.dims();
    if cb.len() != h * w || cr.len() != h * w {
        return Err(Error::shape("chroma planes differ from luma".to_string()));
    }
    let n = h * w;
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let y = luma.values[i];
        let rgb = ycbcr_pixel_to_rgb(y, cb[i], cr[i]);
        // Each channel is y + s * (rgb - y); find the largest s ≤ 1 in gamut.
        let mut s: f64 = 1.0;
        for &v in &rgb {
            let d = v - y;
            if d > 0.0 {
                s = s.min((1.0 - y) / d);
            } else if d < 0.0 {
                s = s.min(y / -d);
            }
        }
        let s = s.max(0.0);
        for c in 0..3 {
            planes[c][i] = (y + s * (rgb[c] - y)).clamp(0.0, 1.0);
        }
    }
    let [r, g, b] = planes;
    ColorImage::new(h, w, r, g, b)
}

/// Raw 3×3 Sobel responses with replicate border padding.
pub fn sobel_components(p: &impl Plane) -> (RawField, RawField) {
    let (h, w) = p.dims();
    let v = p.values();
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        v[yy * w + xx]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (
        RawField {
            height: h,
            width: w,
            values: gx,
        },
        RawField {
            height: h,
            width: w,
            values: gy,
        },
    )
}

/// Adjoint of [`sobel_components`]: maps `(d gx, d gy)` back onto the input.
pub(crate) fn sobel_adjoint(h: usize, w: usize, dgx: &[f64], dgy: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let idx = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        yy * w + xx
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (a, b) = (dgx[i], dgy[i]);
            if a != 0.0 {
                out[idx(y - 1, x + 1)] += a;
                out[idx(y, x + 1)] += 2.0 * a;
                out[idx(y + 1, x + 1)] += a;
                out[idx(y - 1, x - 1)] -= a;
                out[idx(y, x - 1)] -= 2.0 * a;
                out[idx(y + 1, x - 1)] -= a;
            }
            if b != 0.0 {
                out[idx(y + 1, x - 1)] += b;
                out[idx(y + 1, x)] += 2.0 * b;
                out[idx(y + 1, x + 1)] += b;
                out[idx(y - 1, x - 1)] -= b;
                out[idx(y - 1, x)] -= 2.0 * b;
                out[idx(y - 1, x + 1)] -= b;
            }
        }
    }
    out
}

/// Per-pixel Sobel gradient magnitude `sqrt(gx² + gy²)`.
pub fn sobel_gradient(p: &impl Plane) -> RawField {
    let (gx, gy) = sobel_components(p);
    let values = gx
        .values
        .iter()
        .zip(&gy.values)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .collect();
    RawField {
        height: gx.height,
        width: gx.width,
        values,
    }
}

/// Grid of per-patch statistics, row-major over patch positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl PatchGrid {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// Top-left corners of `size`-wide windows tiled at `stride` along `extent`.
pub fn patch_origins(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    (0..)
        .map(|i| i * stride)
        .take_while(|&o| o + size <= extent)
        .collect()
}

/// Population mean and standard deviation of a square window.
pub(crate) fn window_mean_std(p: &impl Plane, y0: usize, x0: usize, size: usize) -> (f64, f64) {
    let w = p.width();
    let v = p.values();
    let n = (size * size) as f64;
    let mut sum = 0.0;
    for y in y0..y0 + size {
        sum += v[y * w + x0..y * w + x0 + size].iter().sum::<f64>();
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for y in y0..y0 + size {
        ss += v[y * w + x0..y * w + x0 + size]
            .iter()
            .map(|x| (x - mean).powi(2))
            .sum::<f64>();
    }
    (mean, (ss / n).sqrt())
}

/// Population standard deviation of each `patch_size` window.
pub fn local_std(p: &impl Plane, patch_size: usize, stride: usize) -> Result<PatchGrid> {
    let (h, w) = p.dims();
    if patch_size == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "patch size and stride must be positive".into(),
        ));
    }
    if patch_size > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} exceeds image {h}x{w}"
        )));
    }
    let ys = patch_origins(h, patch_size, stride);
    let xs = patch_origins(w, patch_size, stride);
    let mut values = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            values.push(window_mean_std(p, y, x, patch_size).1);
        }
    }
    Ok(PatchGrid {
        rows: ys.len(),
        cols: xs.len(),
        values,
    })
}
