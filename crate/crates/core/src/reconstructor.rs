//! Stage I denoising network: a five-scale encoder–decoder with skip
//! connections and sinusoidal time conditioning that predicts the image one
//! diffusion step earlier. The decoder activations are the feature pyramid
//! consumed by the fusion network.

use serde::{Deserialize, Serialize};

use crate::diffusion::{coupled_pair, stage1_loss_with_grad, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Plane, RawField};
use crate::nn::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::SeededRng;

pub const SCALES: usize = 5;

/// Architecture of the reconstructor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconArch {
    pub base_width: usize,
    /// Channel multipliers from the finest scale to the coarsest.
    pub multipliers: [usize; SCALES],
    /// Width of the sinusoidal time embedding (even).
    pub time_dim: usize,
}

impl Default for ReconArch {
    fn default() -> Self {
        Self {
            base_width: 16,
            multipliers: [1, 2, 2, 4, 4],
            time_dim: 32,
        }
    }
}

impl ReconArch {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.multipliers.contains(&0) {
            return Err(Error::Config(
                "reconstructor widths must be positive".into(),
            ));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(
                "time_dim must be a positive even number".into(),
            ));
        }
        Ok(())
    }

    /// Encoder channels, finest scale first.
    pub fn scale_channels(&self) -> [usize; SCALES] {
        self.multipliers.map(|m| m * self.base_width)
    }

    /// Channels of pyramid levels 1..=5 (coarsest first).
    pub fn pyramid_channels(&self) -> [usize; SCALES] {
        let c = self.scale_channels();
        [c[4], c[3], c[2], c[1], c[0]]
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: (ParamId, ParamId),
    time: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    time_mlp: (ParamId, ParamId),
    stem: (ParamId, ParamId),
    enc: Vec<Block>,
    /// Decoder blocks D_1 (coarsest) … D_5 (finest).
    dec: Vec<Block>,
    head: (ParamId, ParamId),
}

/// Trained or freshly initialised reconstructor parameters.
#[derive(Clone, Debug)]
pub struct ReconstructorWeights {
    arch: ReconArch,
    seed: u64,
    params: ParamStore,
    layout: Layout,
}

impl PartialEq for ReconstructorWeights {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

/// Five decoder activation stacks, level 1 coarsest, level 5 at input size.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i - 1]
    }
}

fn build_layout(arch: &ReconArch, params: &mut ParamStore, rng: &mut SeededRng) -> Layout {
    let ch = arch.scale_channels();
    let td = arch.time_dim;
    let mut conv =
        |params: &mut ParamStore, name: String, o: usize, i: usize, k: usize, gain: f64| {
            let w = params.conv_weight(&format!("{name}.w"), rng, o, i, k, gain);
            let b = params.bias(&format!("{name}.b"), o);
            (w, b)
        };
    let time_mlp = conv(params, "time.mlp".into(), td, td, 1, 1.0);
    let stem = conv(params, "stem".into(), ch[0], 1, 3, 1.0);
    let mut enc = Vec::with_capacity(SCALES);
    for s in 0..SCALES {
        let cin = if s == 0 { ch[0] } else { ch[s - 1] };
        enc.push(Block {
            conv1: conv(params, format!("enc{s}.conv1"), ch[s], cin, 3, 1.0),
            time: conv(params, format!("enc{s}.time"), ch[s], td, 1, 0.5),
            conv2: conv(params, format!("enc{s}.conv2"), ch[s], ch[s], 3, 1.0),
        });
    }
    let mut dec = Vec::with_capacity(SCALES);
    for level in 1..=SCALES {
        let s = SCALES - level;
        let cin = if level == 1 { ch[4] } else { ch[s + 1] + ch[s] };
        dec.push(Block {
            conv1: conv(params, format!("dec{level}.conv1"), ch[s], cin, 3, 1.0),
            time: conv(params, format!("dec{level}.time"), ch[s], td, 1, 0.5),
            conv2: conv(params, format!("dec{level}.conv2"), ch[s], ch[s], 3, 1.0),
        });
    }
    let head = conv(params, "head".into(), 1, ch[0], 3, 0.1);
    Layout {
        time_mlp,
        stem,
        enc,
        dec,
        head,
    }
}

/// Sinusoidal embedding of a diffusion step as a `[dim, 1, 1]` tensor.
pub fn time_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        v[k] = (t as f64 * freq).sin();
        v[k + half] = (t as f64 * freq).cos();
    }
    Tensor::chw(dim, 1, 1, v).expect("sized")
}

/// Check a spatial size is compatible with five scales (divisible by 16).
pub fn check_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::shape(format!(
            "input {h}x{w} must be non-empty and divisible by 16"
        )));
    }
    Ok(())
}

impl ReconstructorWeights {
    pub fn init(arch: &ReconArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = SeededRng::derive(seed, 0x5245_434f);
        let mut params = ParamStore::new();
        let layout = build_layout(arch, &mut params, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            seed,
            params,
            layout,
        })
    }

    /// Rebuild weights from a flat parameter vector in registration order.
    pub fn from_flat(arch: &ReconArch, seed: u64, flat: &[f64]) -> Result<Self> {
        let mut w = Self::init(arch, seed)?;
        if !w.params.load_flat(flat) {
            return Err(Error::Checkpoint(format!(
                "expected {} reconstructor parameters, found {}",
                w.params.count(),
                flat.len()
            )));
        }
        Ok(w)
    }

    pub fn arch(&self) -> &ReconArch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn block(&self, tape: &mut Tape, x: Var, temb: Var, b: &Block) -> Var {
        let h = tape.conv_p(x, b.conv1.0, Some(b.conv1.1), 1);
        let tproj = tape.conv_p(temb, b.time.0, Some(b.time.1), 1);
        let h = tape.add(h, tproj);
        let h = tape.silu(h);
        let h = tape.conv_p(h, b.conv2.0, Some(b.conv2.1), 1);
        tape.silu(h)
    }

    /// Record one forward pass; returns the prediction and the five decoder
    /// taps (coarsest first).
    pub fn forward(&self, tape: &mut Tape, x: Var, t: usize) -> (Var, [Var; SCALES]) {
        let l = &self.layout;
        let emb = tape.input(time_embedding(t, self.arch.time_dim));
        let temb = tape.conv_p(emb, l.time_mlp.0, Some(l.time_mlp.1), 1);
        let temb = tape.silu(temb);

        let mut h = tape.conv_p(x, l.stem.0, Some(l.stem.1), 1);
        let mut skips = Vec::with_capacity(SCALES);
        for (s, blk) in l.enc.iter().enumerate() {
            if s > 0 {
                h = tape.avg_pool2(h);
            }
            h = self.block(tape, h, temb, blk);
            skips.push(h);
        }
        let mut taps = Vec::with_capacity(SCALES);
        let mut d = skips[SCALES - 1];
        for (k, blk) in l.dec.iter().enumerate() {
            let level = k + 1;
            let input = if level == 1 {
                d
            } else {
                let up = tape.upsample2(d);
                tape.concat(&[up, skips[SCALES - level]])
            };
            d = self.block(tape, input, temb, blk);
            taps.push(d);
        }
        let out = tape.conv_p(d, l.head.0, Some(l.head.1), 1);
        (out, taps.try_into().expect("five taps"))
    }

    fn input_tensor(noisy: &RawField) -> Result<Tensor> {
        check_resolution(noisy.height(), noisy.width())?;
        Tensor::chw(1, noisy.height(), noisy.width(), noisy.values().to_vec())
    }

    /// Predict `I_{t−1}` from `I_t`.
    pub fn predict_previous(&self, noisy: &RawField, t: usize) -> Result<RawField> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(Self::input_tensor(noisy)?);
        let (out, _) = self.forward(&mut tape, x, t);
        RawField::new(
            noisy.height(),
            noisy.width(),
            tape.value(out).data().to_vec(),
        )
    }

    /// Decoder activations of the same forward pass as [`Self::predict_previous`].
    pub fn extract_features(&self, noisy: &RawField, t: usize) -> Result<FeaturePyramid> {
        self.predict_with_features(noisy, t).map(|(_, f)| f)
    }

    pub fn predict_with_features(
        &self,
        noisy: &RawField,
        t: usize,
    ) -> Result<(RawField, FeaturePyramid)> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(Self::input_tensor(noisy)?);
        let (out, taps) = self.forward(&mut tape, x, t);
        let pred = RawField::new(
            noisy.height(),
            noisy.width(),
            tape.value(out).data().to_vec(),
        )?;
        let levels = taps.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((pred, FeaturePyramid { levels }))
    }

    /// Stage I loss for one `(I_t, I_{t−1})` pair and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        noisy: &RawField,
        target: &RawField,
        t: usize,
    ) -> Result<(f64, crate::nn::GradStore)> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(Self::input_tensor(noisy)?);
        let (out, _) = self.forward(&mut tape, x, t);
        let (loss, g) = stage1_loss_with_grad(tape.value(out).data(), target.values());
        let seed = Tensor::chw(1, noisy.height(), noisy.width(), g)?;
        let grads = tape.backward(out, seed);
        Ok((loss, grads.params))
    }
}

/// How Stage I builds its training pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage1Mode {
    /// Predict `I_{t−1}` from `I_t` on a coupled noise path.
    Diffusion,
    /// Plain reconstruction at step 0: input and target are the clean image.
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub values: Vec<f64>,
}

impl LossCurve {
    /// Mean of the first `n` entries.
    pub fn head_mean(&self, n: usize) -> f64 {
        let n = n.min(self.values.len()).max(1);
        self.values.iter().take(n).sum::<f64>() / n as f64
    }

    /// Mean of the last `n` entries.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.min(self.values.len()).max(1);
        self.values.iter().rev().take(n).sum::<f64>() / n as f64
    }
}

/// Train the reconstructor; returns the final weights and the loss curve.
pub fn train_stage1(
    dataset: &[GrayImage],
    arch: &ReconArch,
    schedule: &NoiseSchedule,
    cfg: &Stage1Config,
    mode: Stage1Mode,
) -> Result<(ReconstructorWeights, LossCurve)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(
            "stage I needs at least one image".into(),
        ));
    }
    let (h, w) = dataset[0].dims();
    check_resolution(h, w)?;
    if dataset.iter().any(|img| img.dims() != (h, w)) {
        return Err(Error::shape("stage I images differ in size".to_string()));
    }
    let mut weights = ReconstructorWeights::init(arch, cfg.seed)?;
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        weights.params(),
    );
    let mut rng = SeededRng::derive(cfg.seed, 0x5354_4731);
    let batch = cfg.batch_size.max(1);
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let mut total = weights.params().zero_grads();
        let mut step_loss = 0.0;
        for _ in 0..batch {
            let img = &dataset[rng.index(dataset.len())];
            let (input, target, t) = match mode {
                Stage1Mode::Diffusion => {
                    let t = rng.int_inclusive(1, schedule.steps());
                    let noise = RawField::new(h, w, rng.normals(h * w))?;
                    let (cur, prev) = coupled_pair(img, t, schedule, &noise)?;
                    (cur, prev, t)
                }
                Stage1Mode::Reconstruction => {
                    let f = RawField::from_plane(img);
                    (f.clone(), f, 0)
                }
            };
            let (loss, grads) = weights.loss_and_grads(&input, &target, t)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("stage I loss {loss}"),
                });
            }
            step_loss += loss;
            total.merge(&grads);
        }
        total.scale(1.0 / batch as f64);
        opt.step(weights.params_mut(), &total);
        curve.values.push(step_loss / batch as f64);
        if step % 100 == 0 {
            log::debug!("stage I step {step}: loss {:.5}", step_loss / batch as f64);
        }
    }
    if !weights.params().all_finite() {
        return Err(Error::NonFinite {
            step: cfg.steps,
            detail: "stage I parameters".into(),
        });
    }
    Ok((weights, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;

    fn tiny_arch() -> ReconArch {
        ReconArch {
            base_width: 2,
            multipliers: [1, 2, 2, 4, 4],
            time_dim: 4,
        }
    }

    /// Parameter count derived layer by layer from the architecture.
    fn count_by_hand(arch: &ReconArch) -> usize {
        let c: Vec<usize> = arch
            .multipliers
            .iter()
            .map(|m| m * arch.base_width)
            .collect();
        let td = arch.time_dim;
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let mut n = conv(td, td, 1) + conv(c[0], 1, 3);
        for s in 0..5 {
            let cin = if s == 0 { c[0] } else { c[s - 1] };
            n += conv(c[s], cin, 3) + conv(c[s], td, 1) + conv(c[s], c[s], 3);
        }
        for level in 1..=5 {
            let s = 5 - level;
            let cin = if level == 1 { c[4] } else { c[s + 1] + c[s] };
            n += conv(c[s], cin, 3) + conv(c[s], td, 1) + conv(c[s], c[s], 3);
        }
        n + conv(1, c[0], 3)
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let arch = ReconArch::default();
        let a = ReconstructorWeights::init(&arch, 3).unwrap();
        let b = ReconstructorWeights::init(&arch, 3).unwrap();
        let c = ReconstructorWeights::init(&arch, 4).unwrap();
        assert_eq!(a.params().flatten(), b.params().flatten());
        assert_ne!(a.params().flatten(), c.params().flatten());
        assert!(a.params().all_finite());
    }

    #[test]
    fn parameter_count_matches_layer_count() {
        for arch in [ReconArch::default(), tiny_arch()] {
            let w = ReconstructorWeights::init(&arch, 0).unwrap();
            assert_eq!(w.param_count(), count_by_hand(&arch));
        }
        assert_eq!(count_by_hand(&ReconArch::default()), 439_857);
    }

    #[test]
    fn rejects_zero_width() {
        let arch = ReconArch {
            base_width: 0,
            ..ReconArch::default()
        };
        assert!(ReconstructorWeights::init(&arch, 0).is_err());
    }

    #[test]
    fn shapes_and_purity() {
        let w = ReconstructorWeights::init(&ReconArch::default(), 1).unwrap();
        let mut rng = SeededRng::new(2);
        let x = RawField::new(64, 64, rng.normals(64 * 64)).unwrap();
        let out = w.predict_previous(&x, 5).unwrap();
        assert_eq!(out.dims(), (64, 64));
        assert_eq!(out, w.predict_previous(&x, 5).unwrap());

        let (pred, pyr) = w.predict_with_features(&x, 5).unwrap();
        assert_eq!(pred, out);
        let sizes: Vec<usize> = pyr.levels.iter().map(|l| l.dims3().1).collect();
        assert_eq!(sizes, vec![4, 8, 16, 32, 64]);
        let chans: Vec<usize> = pyr.levels.iter().map(|l| l.dims3().0).collect();
        assert_eq!(chans, ReconArch::default().pyramid_channels().to_vec());
        assert_eq!(w.extract_features(&x, 5).unwrap(), pyr);

        assert!(w.predict_previous(&RawField::zeros(60, 64), 5).is_err());
    }

    #[test]
    fn single_pixel_perturbation_reaches_finest_level() {
        let w = ReconstructorWeights::init(&tiny_arch(), 1).unwrap();
        let mut rng = SeededRng::new(2);
        let x = RawField::new(16, 16, rng.normals(256)).unwrap();
        let mut y = x.clone();
        y.values_mut()[8 * 16 + 8] += 0.5;
        let fx = w.extract_features(&x, 3).unwrap();
        let fy = w.extract_features(&y, 3).unwrap();
        assert!(fx.level(5).max_abs_diff(fy.level(5)) > 0.0);
    }

    #[test]
    fn time_embedding_changes_output() {
        let w = ReconstructorWeights::init(&tiny_arch(), 1).unwrap();
        let x = RawField::filled(16, 16, 0.3);
        let a = w.predict_previous(&x, 5).unwrap();
        let b = w.predict_previous(&x, 500).unwrap();
        assert!(stage1_loss_with_grad(a.values(), b.values()).0 > 1e-9);
    }

    #[test]
    fn stage1_gradients_match_finite_differences() {
        let w = ReconstructorWeights::init(&tiny_arch(), 9).unwrap();
        let mut rng = SeededRng::new(4);
        let x = RawField::new(16, 16, rng.normals(256)).unwrap();
        let target = RawField::new(16, 16, rng.normals(256)).unwrap();
        let (_, grads) = w.loss_and_grads(&x, &target, 7).unwrap();
        let analytic = grads.flatten();
        let base = w.params().flatten();
        let loss_at = |flat: &[f64]| {
            let mut p = w.clone();
            p.params_mut().load_flat(flat);
            let pred = p.predict_previous(&x, 7).unwrap();
            crate::diffusion::stage1_loss(&pred, &target).unwrap()
        };
        // Probe coordinates whose gradient is well above finite-difference
        // round-off (~1e-10 here).
        let candidates: Vec<usize> = (0..base.len())
            .filter(|&i| analytic[i].abs() > 1e-6)
            .collect();
        assert!(candidates.len() > 100);
        let h = 1e-5;
        let mut sample = SeededRng::new(8);
        let mut worst: f64 = 0.0;
        for _ in 0..60 {
            let i = candidates[sample.index(candidates.len())];
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
            let an = analytic[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()));
        }
        assert!(worst <= 1e-3, "relative error {worst}");
    }

    #[test]
    fn zero_steps_returns_init() {
        let imgs = vec![GrayImage::filled(16, 16, 0.5).unwrap()];
        let s = ScheduleConfig::default().build().unwrap();
        let cfg = Stage1Config {
            steps: 0,
            ..Stage1Config::default()
        };
        let (w, curve) =
            train_stage1(&imgs, &tiny_arch(), &s, &cfg, Stage1Mode::Diffusion).unwrap();
        assert_eq!(
            w,
            ReconstructorWeights::init(&tiny_arch(), cfg.seed).unwrap()
        );
        assert!(curve.values.is_empty());
        assert!(train_stage1(&[], &tiny_arch(), &s, &cfg, Stage1Mode::Diffusion).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = SeededRng::new(1);
        let imgs: Vec<GrayImage> = (0..2)
            .map(|_| GrayImage::new(16, 16, (0..256).map(|_| rng.uniform()).collect()).unwrap())
            .collect();
        let s = ScheduleConfig::default().build().unwrap();
        let cfg = Stage1Config {
            steps: 5,
            ..Stage1Config::default()
        };
        let (a, ca) = train_stage1(&imgs, &tiny_arch(), &s, &cfg, Stage1Mode::Diffusion).unwrap();
        let (b, cb) = train_stage1(&imgs, &tiny_arch(), &s, &cfg, Stage1Mode::Diffusion).unwrap();
        assert_eq!(a.params().flatten(), b.params().flatten());
        assert_eq!(ca, cb);
        assert_ne!(
            a,
            ReconstructorWeights::init(&tiny_arch(), cfg.seed).unwrap()
        );
    }
}
