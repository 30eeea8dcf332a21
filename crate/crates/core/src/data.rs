//! Synthetic multimodal phantoms, on-disk pair layout and manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{ColorImage, GrayImage, Plane, SourceImage};
use crate::rng::SeededRng;

/// Fusion task of a source pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    MriCt,
    MriPet,
    MriSpect,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::MriCt, Task::MriPet, Task::MriSpect];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::MriCt => "mri-ct",
            Task::MriPet => "mri-pet",
            Task::MriSpect => "mri-spect",
        }
    }

    /// Whether modality B is a color functional image.
    pub fn is_functional(self) -> bool {
        !matches!(self, Task::MriCt)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown task '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Manifest(format!("unknown split '{s}'"))),
        }
    }
}

/// Parameters of one synthetic pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub size: usize,
    pub task: Task,
    /// Number of high-intensity blobs in modality B.
    pub blob_count: usize,
    /// Number of curved soft-tissue contours in modality A.
    pub contour_count: usize,
    /// Amplitude of the band-limited texture in modality A.
    pub texture: f64,
}

impl PhantomSpec {
    pub fn new(seed: u64, size: usize, task: Task) -> Self {
        Self {
            seed,
            size,
            task,
            blob_count: 3,
            contour_count: 4,
            texture: 0.12,
        }
    }
}

/// A generated or loaded source pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SourcePair {
    pub id: String,
    pub task: Task,
    pub split: Split,
    pub a: GrayImage,
    pub b: SourceImage,
}

impl SourcePair {
    pub fn b_luma(&self) -> GrayImage {
        self.b.luma()
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Anatomy {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    wobble: [(f64, f64); 3],
}

impl Anatomy {
    fn sample(rng: &mut SeededRng, n: f64) -> Self {
        Self {
            cy: n * rng.uniform_range(0.46, 0.54),
            cx: n * rng.uniform_range(0.46, 0.54),
            ry: n * rng.uniform_range(0.36, 0.43),
            rx: n * rng.uniform_range(0.30, 0.38),
            wobble: [
                (
                    rng.uniform_range(0.0, 0.04),
                    rng.uniform_range(0.0, std::f64::consts::TAU),
                ),
                (
                    rng.uniform_range(0.0, 0.03),
                    rng.uniform_range(0.0, std::f64::consts::TAU),
                ),
                (
                    rng.uniform_range(0.0, 0.02),
                    rng.uniform_range(0.0, std::f64::consts::TAU),
                ),
            ],
        }
    }

    /// Normalised radius: < 1 inside the head outline.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        let theta = dy.atan2(dx);
        let mut scale = 1.0;
        for (k, (amp, phase)) in self.wobble.iter().enumerate() {
            scale += amp * ((k as f64 + 2.0) * theta + phase).sin();
        }
        (dy * dy + dx * dx).sqrt() / scale
    }
}

/// Sum of random plane waves normalised to unit peak amplitude.
fn band_limited(rng: &mut SeededRng, n: usize, waves: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..waves)
        .map(|_| {
            let f = rng.uniform_range(fmin, fmax) * std::f64::consts::TAU / n as f64;
            let th = rng.uniform_range(0.0, std::f64::consts::PI);
            (
                f * th.cos(),
                f * th.sin(),
                rng.uniform_range(0.0, std::f64::consts::TAU),
            )
        })
        .collect();
    let mut v = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            v[y * n + x] = comps
                .iter()
                .map(|(ky, kx, p)| (ky * y as f64 + kx * x as f64 + p).sin())
                .sum::<f64>();
        }
    }
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    v.iter_mut().for_each(|x| *x /= peak);
    v
}

/// Colormap for functional images: a "hot" ramp for PET, a blue-to-red ramp
/// for SPECT.
fn functional_color(task: Task, v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    match task {
        Task::MriSpect => [
            smoothstep(0.35, 0.75, v),
            (1.0 - (2.0 * v - 1.0).abs()).clamp(0.0, 1.0) * 0.9,
            (1.0 - smoothstep(0.1, 0.6, v)) * (v * 4.0).min(1.0),
        ],
        _ => [
            (3.0 * v).min(1.0),
            (3.0 * v - 1.0).clamp(0.0, 1.0),
            (3.0 * v - 2.0).clamp(0.0, 1.0),
        ],
    }
}

/// Generate one pair. Modality A carries fine texture and soft contours;
/// modality B is a bright skull ring with sparse blobs (CT-like) or smooth
/// colored uptake blobs (PET/SPECT-like). Both share the head outline.
pub fn gen_phantom_pair(spec: &PhantomSpec) -> Result<(GrayImage, SourceImage)> {
    if spec.size < 16 || !spec.size.is_multiple_of(16) {
        return Err(Error::InvalidArgument(format!(
            "phantom size {} must be a positive multiple of 16",
            spec.size
        )));
    }
    if !(spec.texture.is_finite() && spec.texture >= 0.0) {
        return Err(Error::InvalidArgument(
            "texture amplitude must be >= 0".into(),
        ));
    }
    let n = spec.size;
    let nf = n as f64;
    let mut rng = SeededRng::derive(spec.seed, 0x5048_414e);
    let anatomy = Anatomy::sample(&mut rng, nf);
    let texture = band_limited(&mut rng, n, 10, 0.12 * nf, 0.28 * nf);
    let contours: Vec<(f64, f64, f64, f64, f64)> = (0..spec.contour_count)
        .map(|_| {
            (
                rng.uniform_range(-0.4, 0.4),
                rng.uniform_range(-0.4, 0.4),
                rng.uniform_range(0.15, 0.45),
                rng.uniform_range(-0.25, 0.25),
                rng.uniform_range(0.7, 1.4),
            )
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..spec.blob_count)
        .map(|_| {
            let r = rng.uniform_range(0.0, 0.6);
            let th = rng.uniform_range(0.0, std::f64::consts::TAU);
            (
                r * th.sin(),
                r * th.cos(),
                rng.uniform_range(0.07, 0.16),
                rng.uniform_range(0.75, 1.0),
            )
        })
        .collect();

    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n * n];
    let edge = 1.5 / nf.min(anatomy.rx.min(anatomy.ry));
    for y in 0..n {
        for x in 0..n {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let r = anatomy.radius(yf, xf);
            let inside = 1.0 - smoothstep(0.93 - edge, 0.93 + edge, r);
            // normalised head coordinates
            let (u, v) = (
                (yf - anatomy.cy) / anatomy.ry,
                (xf - anatomy.cx) / anatomy.rx,
            );

            let mut tissue = 0.45;
            for &(cu, cv, rad, tilt, aspect) in &contours {
                let du = u - cu;
                let dv = (v - cv) * aspect + tilt * du;
                let d = (du * du + dv * dv).sqrt();
                tissue += 0.18 * (1.0 - smoothstep(rad - 0.04, rad + 0.04, d)) - 0.04;
            }
            let ring_a = smoothstep(0.8, 0.86, r) * (1.0 - smoothstep(0.9, 0.95, r));
            let val_a = (tissue + spec.texture * texture[y * n + x]) * (1.0 - 0.6 * ring_a);
            a[y * n + x] = (val_a * inside).clamp(0.0, 1.0);

            let blob = blobs
                .iter()
                .map(|&(bu, bv, s, amp)| {
                    let d2 = (u - bu).powi(2) + (v - bv).powi(2);
                    match spec.task {
                        Task::MriCt => amp * (1.0 - smoothstep(s * 0.6, s, d2.sqrt())),
                        _ => amp * (-d2 / (2.0 * s * s)).exp(),
                    }
                })
                .fold(0.0f64, f64::max);
            b[y * n + x] = match spec.task {
                Task::MriCt => {
                    let ring = smoothstep(0.82, 0.86, r) * (1.0 - smoothstep(0.9, 0.94, r));
                    (0.12 * inside + ring * 0.88 + blob * inside).clamp(0.0, 1.0)
                }
                _ => ((0.15 + 0.1 * (1.0 - r).max(0.0) + 0.75 * blob) * inside).clamp(0.0, 1.0),
            };
        }
    }
    let a = GrayImage::new(n, n, a)?;
    let b = if spec.task.is_functional() {
        let mut planes = [
            Vec::with_capacity(n * n),
            Vec::with_capacity(n * n),
            Vec::with_capacity(n * n),
        ];
        for &v in &b {
            let rgb = functional_color(spec.task, v);
            for c in 0..3 {
                planes[c].push(rgb[c]);
            }
        }
        let [r, g, bl] = planes;
        SourceImage::Color(ColorImage::new(n, n, r, g, bl)?)
    } else {
        SourceImage::Gray(GrayImage::new(n, n, b)?)
    };
    Ok((a, b))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub pair_id: String,
    /// Paths as written in the manifest (relative to its directory or absolute).
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    pub task: Task,
    pub split: Split,
    pub digest_a: String,
    pub digest_b: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairManifest {
    pub entries: Vec<ManifestEntry>,
}

impl PairManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.pair_id,
                e.path_a.display(),
                e.path_b.display(),
                e.task,
                e.split.as_str(),
                e.digest_a,
                e.digest_b
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(Error::Manifest(format!(
                    "line {}: expected 7 tab-separated fields, found {}",
                    ln + 1,
                    f.len()
                )));
            }
            entries.push(ManifestEntry {
                pair_id: f[0].to_string(),
                path_a: PathBuf::from(f[1]),
                path_b: PathBuf::from(f[2]),
                task: f[3].parse()?,
                split: f[4].parse()?,
                digest_a: f[5].to_string(),
                digest_b: f[6].to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn verify(path: &Path, expected: &str) -> Result<()> {
    let found = file_digest(path)?;
    if found != expected {
        return Err(Error::DigestMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

/// Load, verify and decode every pair listed in a manifest.
pub fn load_pairs(manifest_path: &Path) -> Result<Vec<SourcePair>> {
    let manifest = PairManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .entries
        .iter()
        .map(|e| {
            let pa = base.join(&e.path_a);
            let pb = base.join(&e.path_b);
            verify(&pa, &e.digest_a)?;
            verify(&pb, &e.digest_b)?;
            let a = SourceImage::load_png(&pa)?.luma();
            let b = SourceImage::load_png(&pb)?;
            if a.dims() != b.dims() {
                return Err(Error::Manifest(format!(
                    "pair {}: A is {:?} but B is {:?}",
                    e.pair_id,
                    a.dims(),
                    b.dims()
                )));
            }
            Ok(SourcePair {
                id: e.pair_id.clone(),
                task: e.task,
                split: e.split,
                a,
                b,
            })
        })
        .collect()
}

/// Pair counts per task for a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetLayout {
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub size: usize,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self {
            train_per_task: 30,
            test_per_task: 10,
            size: 64,
        }
    }
}

/// Seed of the `index`-th pair of a task and split.
pub fn phantom_seed(base: u64, task: Task, split: Split, index: usize) -> u64 {
    let t = task as u64;
    let s = split as u64;
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (t << 40) ^ (s << 32) ^ index as u64
}

/// In-memory phantom pairs for one task and split.
pub fn phantom_pairs(
    base_seed: u64,
    task: Task,
    split: Split,
    count: usize,
    size: usize,
) -> Result<Vec<SourcePair>> {
    (0..count)
        .map(|i| {
            let spec = PhantomSpec::new(phantom_seed(base_seed, task, split, i), size, task);
            let (a, b) = gen_phantom_pair(&spec)?;
            Ok(SourcePair {
                id: format!("{}-{}-{i:03}", task, split.as_str()),
                task,
                split,
                a,
                b,
            })
        })
        .collect()
}

/// Write `<root>/<task>/<split>/<pairid>_{A,B}.png` for every task and split
/// plus `<root>/manifest.tsv`; returns the manifest path.
pub fn write_phantom_dataset(root: &Path, layout: &DatasetLayout, seed: u64) -> Result<PathBuf> {
    let mut manifest = PairManifest::default();
    for task in Task::ALL {
        for (split, count) in [
            (Split::Train, layout.train_per_task),
            (Split::Test, layout.test_per_task),
        ] {
            let rel_dir = PathBuf::from(task.as_str()).join(split.as_str());
            let dir = root.join(&rel_dir);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for pair in phantom_pairs(seed, task, split, count, layout.size)? {
                let rel_a = rel_dir.join(format!("{}_A.png", pair.id));
                let rel_b = rel_dir.join(format!("{}_B.png", pair.id));
                pair.a.save_png(&root.join(&rel_a))?;
                pair.b.save_png(&root.join(&rel_b))?;
                manifest.entries.push(ManifestEntry {
                    pair_id: pair.id,
                    digest_a: file_digest(&root.join(&rel_a))?,
                    digest_b: file_digest(&root.join(&rel_b))?,
                    path_a: rel_a,
                    path_b: rel_b,
                    task,
                    split,
                });
            }
        }
    }
    let path = root.join("manifest.tsv");
    manifest.write(&path)?;
    Ok(path)
}
