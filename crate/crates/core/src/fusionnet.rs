//! Stage II fusion network over multi-timestep diffusion features.
//!
//! Per scale, each modality's features from every time step are merged by a
//! 1×1 then 3×3 convolution. The two modalities are combined by the
//! attention-guided block (AMFF), the five scales are merged coarse to fine
//! (MSFF) and a two-convolution head produces the fused luma.

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_jump, NoiseSchedule, TimeStepSet};
use crate::error::{Error, Result};
use crate::imaging::{same_dims, GrayImage, Plane, RawField};
use crate::losses::{total_loss_with_grad, LossBreakdown, LossWeights, PatchGeometry};
use crate::nn::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};
use crate::reconstructor::{check_resolution, FeaturePyramid, ReconstructorWeights, SCALES};
use crate::rng::SeededRng;

/// Group count of the shuffle and group convolution inside AMFF.
pub const AMFF_GROUPS: usize = 4;

/// Structural variants used by the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    #[default]
    Full,
    /// Modalities merged by elementwise addition instead of AMFF.
    NoAmff,
    /// Only the finest-scale features reach the head.
    NoMsff,
}

/// Shape information needed to build a fusion network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    /// Channels of pyramid levels 1..=5, coarsest first.
    pub channels: [usize; SCALES],
    /// Number of diffusion time steps whose features are merged.
    pub n_steps: usize,
    pub variant: FusionVariant,
}

impl FusionSpec {
    pub fn new(channels: [usize; SCALES], n_steps: usize, variant: FusionVariant) -> Result<Self> {
        if channels.contains(&0) || n_steps == 0 {
            return Err(Error::Config(
                "fusion channels and step count must be positive".into(),
            ));
        }
        if variant != FusionVariant::NoAmff {
            for &c in &channels {
                if (2 * c) % AMFF_GROUPS != 0 {
                    return Err(Error::Config(format!(
                        "AMFF needs 2*C divisible by {AMFF_GROUPS}, got C = {c}"
                    )));
                }
            }
        }
        Ok(Self {
            channels,
            n_steps,
            variant,
        })
    }

    /// Scales (1-based) whose features are used by this variant.
    pub fn active_scales(&self) -> Vec<usize> {
        match self.variant {
            FusionVariant::NoMsff => vec![SCALES],
            _ => (1..=SCALES).collect(),
        }
    }
}

type Conv = (ParamId, Option<ParamId>);

#[derive(Clone, Debug)]
struct NoisyFuse {
    phi1: Conv,
    phi3: Conv,
}

#[derive(Clone, Debug)]
struct AmffLayout {
    sa: Conv,
    ca_down: Conv,
    ca_up: Conv,
    lambda1: ParamId,
    lambda2: ParamId,
    group: Conv,
    pa: Conv,
    proj: Conv,
}

#[derive(Clone, Debug)]
struct ScaleLayout {
    fuse_a: NoisyFuse,
    fuse_b: NoisyFuse,
    amff: Option<AmffLayout>,
}

#[derive(Clone, Debug)]
struct MsffLayout {
    main: Vec<ParamId>,
    /// Skip convolutions for stages 3, 4, 5.
    skip: Vec<ParamId>,
}

#[derive(Clone, Debug)]
struct Layout {
    scales: Vec<Option<ScaleLayout>>,
    msff: Option<MsffLayout>,
    head1: Conv,
    head2: Conv,
}

/// Sigmoid-gated maps produced inside one AMFF block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    /// Spatial attention per modality, `[1, h, w]`.
    pub spatial: [Tensor; 2],
    /// Channel attention per modality, `[C, 1, 1]`.
    pub channel: [Tensor; 2],
    /// Pixel attention on the shuffled stack, `[2C, h, w]`.
    pub pixel: Tensor,
}

#[derive(Clone, Debug)]
pub struct FusionWeights {
    spec: FusionSpec,
    seed: u64,
    params: ParamStore,
    layout: Layout,
}

impl PartialEq for FusionWeights {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

fn build_layout(spec: &FusionSpec, params: &mut ParamStore, rng: &mut SeededRng) -> Layout {
    let mut conv = |params: &mut ParamStore, name: &str, o, i, k, bias: bool| -> Conv {
        let w = params.conv_weight(&format!("{name}.w"), rng, o, i, k, 1.0);
        let b = bias.then(|| params.bias(&format!("{name}.b"), o));
        (w, b)
    };
    let ch = spec.channels;
    let n = spec.n_steps;
    let active = spec.active_scales();
    let mut scales = Vec::with_capacity(SCALES);
    for level in 1..=SCALES {
        if !active.contains(&level) {
            scales.push(None);
            continue;
        }
        let c = ch[level - 1];
        let mut fuse = |params: &mut ParamStore, m: &str| NoisyFuse {
            phi1: conv(params, &format!("s{level}.{m}.phi1"), c, n * c, 1, true),
            phi3: conv(params, &format!("s{level}.{m}.phi3"), c, c, 3, true),
        };
        let fuse_a = fuse(params, "a");
        let fuse_b = fuse(params, "b");
        let amff = (spec.variant != FusionVariant::NoAmff).then(|| {
            let hid = (c / 4).max(1);
            let p = format!("s{level}.amff");
            AmffLayout {
                sa: conv(params, &format!("{p}.sa"), 1, 2, 7, true),
                ca_down: conv(params, &format!("{p}.ca_down"), hid, c, 1, true),
                ca_up: conv(params, &format!("{p}.ca_up"), c, hid, 1, true),
                lambda1: params.add(format!("{p}.lambda1"), Tensor::full(&[1, 1, 1], 0.5)),
                lambda2: params.add(format!("{p}.lambda2"), Tensor::full(&[1, 1, 1], 0.5)),
                group: conv(
                    params,
                    &format!("{p}.group"),
                    2 * c,
                    2 * c / AMFF_GROUPS,
                    3,
                    true,
                ),
                pa: conv(params, &format!("{p}.pa"), 2 * c, 2 * c, 1, true),
                proj: conv(params, &format!("{p}.proj"), c, 2 * c, 1, true),
            }
        });
        scales.push(Some(ScaleLayout {
            fuse_a,
            fuse_b,
            amff,
        }));
    }
    let msff = (spec.variant != FusionVariant::NoMsff).then(|| {
        let main = (0..SCALES)
            .map(|i| {
                let out = ch[(i + 1).min(SCALES - 1)];
                conv(params, &format!("msff.main{}", i + 1), out, ch[i], 3, false).0
            })
            .collect();
        let skip = (3..=SCALES)
            .map(|i| {
                conv(
                    params,
                    &format!("msff.skip{i}"),
                    ch[i - 1],
                    ch[i - 2],
                    3,
                    false,
                )
                .0
            })
            .collect();
        MsffLayout { main, skip }
    });
    let c5 = ch[SCALES - 1];
    let head1 = conv(params, "head1", c5, c5, 3, true);
    let head2 = conv(params, "head2", 1, c5, 3, true);
    Layout {
        scales,
        msff,
        head1,
        head2,
    }
}

/// Tape variables of one forward pass.
pub struct FusionTrace {
    pub fused: Var,
    /// `F^i` for the active scales (index = level − 1).
    pub levels: Vec<Option<Var>>,
    pub maps: Vec<Option<AttentionMaps>>,
}

fn conv(tape: &mut Tape, x: Var, c: Conv, groups: usize) -> Var {
    tape.conv_p(x, c.0, c.1, groups)
}

impl FusionWeights {
    pub fn init(spec: FusionSpec, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, 0x4655_5345);
        let mut params = ParamStore::new();
        let layout = build_layout(&spec, &mut params, &mut rng);
        Self {
            spec,
            seed,
            params,
            layout,
        }
    }

    /// Fusion network matching a reconstructor's pyramid.
    pub fn for_reconstructor(
        recon: &ReconstructorWeights,
        n_steps: usize,
        variant: FusionVariant,
        seed: u64,
    ) -> Result<Self> {
        let spec = FusionSpec::new(recon.arch().pyramid_channels(), n_steps, variant)?;
        Ok(Self::init(spec, seed))
    }

    /// Rebuild weights from a flat parameter vector in registration order.
    pub fn from_flat(spec: FusionSpec, seed: u64, flat: &[f64]) -> Result<Self> {
        let mut w = Self::init(spec, seed);
        if !w.params.load_flat(flat) {
            return Err(Error::Checkpoint(format!(
                "expected {} fusion parameters, found {}",
                w.params.count(),
                flat.len()
            )));
        }
        Ok(w)
    }

    pub fn spec(&self) -> &FusionSpec {
        &self.spec
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

    fn scale(&self, level: usize) -> Result<&ScaleLayout> {
        self.layout
            .scales
            .get(level.wrapping_sub(1))
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InvalidArgument(format!("scale {level} is not active")))
    }

    /// φ₃(φ₁([H_t1, …, H_tn])) for one modality (0 = A, 1 = B).
    pub fn fuse_noisy_on_tape(
        &self,
        tape: &mut Tape,
        feats: &[Var],
        modality: usize,
        level: usize,
    ) -> Result<Var> {
        let s = self.scale(level)?;
        if feats.len() != self.spec.n_steps {
            return Err(Error::shape(format!(
                "expected {} time-step features, got {}",
                self.spec.n_steps,
                feats.len()
            )));
        }
        let c = self.spec.channels[level - 1];
        let (_, h, w) = tape.value(feats[0]).dims3();
        for &f in feats {
            if tape.value(f).shape() != [c, h, w] {
                return Err(Error::shape(format!(
                    "scale {level} feature {:?}, expected [{c}, {h}, {w}]",
                    tape.value(f).shape()
                )));
            }
        }
        let nf = if modality == 0 { &s.fuse_a } else { &s.fuse_b };
        let x = tape.concat(feats);
        let x = conv(tape, x, nf.phi1, 1);
        let x = tape.silu(x);
        let x = conv(tape, x, nf.phi3, 1);
        Ok(tape.silu(x))
    }

    /// Attention-guided fusion of two same-shaped stacks. With `probe` every
    /// gate is fixed to one and only the convolutional path remains.
    pub fn amff_on_tape(
        &self,
        tape: &mut Tape,
        fa: Var,
        fb: Var,
        level: usize,
        probe: bool,
    ) -> Result<(Var, Option<AttentionMaps>)> {
        let s = self.scale(level)?;
        let Some(l) = &s.amff else {
            return Err(Error::InvalidArgument(
                "AMFF disabled in this variant".into(),
            ));
        };
        let c = self.spec.channels[level - 1];
        if tape.value(fa).shape() != tape.value(fb).shape() || tape.value(fa).dims3().0 != c {
            return Err(Error::shape(format!(
                "AMFF inputs {:?} and {:?} at scale {level} (C = {c})",
                tape.value(fa).shape(),
                tape.value(fb).shape()
            )));
        }
        let mut spatial = Vec::new();
        let mut channel = Vec::new();
        let (ga, gb) = if probe {
            (fa, fb)
        } else {
            let mut gate = |tape: &mut Tape, x: Var| {
                let mean = tape.channel_mean(x);
                let max = tape.channel_max(x);
                let sa_in = tape.concat(&[mean, max]);
                let sa = conv(tape, sa_in, l.sa, 1);
                let sa = tape.sigmoid(sa);
                let pooled = tape.global_avg(x);
                let ca = conv(tape, pooled, l.ca_down, 1);
                let ca = tape.silu(ca);
                let ca = conv(tape, ca, l.ca_up, 1);
                let ca = tape.sigmoid(ca);
                spatial.push(tape.value(sa).clone());
                channel.push(tape.value(ca).clone());
                let l1 = tape.param(l.lambda1);
                let l2 = tape.param(l.lambda2);
                let wsa = tape.mul(sa, l1);
                let wca = tape.mul(ca, l2);
                let wmap = tape.add(wsa, wca);
                tape.mul(x, wmap)
            };
            let ga = gate(tape, fa);
            let gb = gate(tape, fb);
            (ga, gb)
        };
        let cat = tape.concat(&[ga, gb]);
        let sh = tape.channel_shuffle(cat, AMFF_GROUPS);
        let g = conv(tape, sh, l.group, AMFF_GROUPS);
        let g = tape.silu(g);
        let (refined, pixel) = if probe {
            (g, None)
        } else {
            let pa = conv(tape, g, l.pa, 1);
            let pa = tape.sigmoid(pa);
            let px = tape.value(pa).clone();
            (tape.mul(g, pa), Some(px))
        };
        let out = conv(tape, refined, l.proj, 1);
        let maps = pixel.map(|pixel| AttentionMaps {
            spatial: [spatial[0].clone(), spatial[1].clone()],
            channel: [channel[0].clone(), channel[1].clone()],
            pixel,
        });
        Ok((out, maps))
    }

    /// Coarse-to-fine merge of `F^1..F^5` into a full-resolution stack.
    pub fn msff_on_tape(&self, tape: &mut Tape, f: &[Var]) -> Result<Var> {
        let Some(m) = &self.layout.msff else {
            return Err(Error::InvalidArgument(
                "MSFF disabled in this variant".into(),
            ));
        };
        if f.len() != SCALES {
            return Err(Error::shape(format!(
                "MSFF needs {SCALES} scales, got {}",
                f.len()
            )));
        }
        for i in 1..SCALES {
            let (_, h0, w0) = tape.value(f[i - 1]).dims3();
            let (_, h1, w1) = tape.value(f[i]).dims3();
            if (2 * h0, 2 * w0) != (h1, w1) {
                return Err(Error::shape(format!(
                    "MSFF ladder breaks between scales {i} and {}: {h0}x{w0} vs {h1}x{w1}",
                    i + 1
                )));
            }
        }
        for (i, &fi) in f.iter().enumerate() {
            if tape.value(fi).dims3().0 != self.spec.channels[i] {
                return Err(Error::shape(format!(
                    "MSFF scale {} channel mismatch",
                    i + 1
                )));
            }
        }
        let mut ms: Vec<Var> = Vec::with_capacity(SCALES);
        for i in 1..=SCALES {
            let mut x = f[i - 1];
            if i >= 2 {
                x = tape.add(ms[i - 2], x);
            }
            if i >= 3 {
                let s = tape.conv_p(ms[i - 3], m.skip[i - 3], None, 1);
                let s = tape.silu(s);
                let s = tape.upsample2(s);
                x = tape.add(x, s);
            }
            let y = tape.conv_p(x, m.main[i - 1], None, 1);
            let y = tape.silu(y);
            ms.push(if i < SCALES { tape.upsample2(y) } else { y });
        }
        Ok(ms[SCALES - 1])
    }

    /// Two 3×3 convolutions down to one channel, squashed into (0, 1).
    pub fn head_on_tape(&self, tape: &mut Tape, m5: Var) -> Result<Var> {
        let c5 = self.spec.channels[SCALES - 1];
        if tape.value(m5).dims3().0 != c5 {
            return Err(Error::shape(format!("head expects {c5} channels")));
        }
        let x = conv(tape, m5, self.layout.head1, 1);
        let x = tape.silu(x);
        let x = conv(tape, x, self.layout.head2, 1);
        Ok(tape.sigmoid(x))
    }

    /// Full network on tape. `feats_x[k][i]` is level `i + 1` at time step `k`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        feats_a: &[Vec<Var>],
        feats_b: &[Vec<Var>],
        probe: bool,
    ) -> Result<FusionTrace> {
        let mut levels = vec![None; SCALES];
        let mut maps = vec![None; SCALES];
        for level in self.spec.active_scales() {
            let pick = |f: &[Vec<Var>]| f.iter().map(|p| p[level - 1]).collect::<Vec<_>>();
            let fa = self.fuse_noisy_on_tape(tape, &pick(feats_a), 0, level)?;
            let fb = self.fuse_noisy_on_tape(tape, &pick(feats_b), 1, level)?;
            let fi = match self.spec.variant {
                FusionVariant::NoAmff => tape.add(fa, fb),
                _ => {
                    let (out, m) = self.amff_on_tape(tape, fa, fb, level, probe)?;
                    maps[level - 1] = m;
                    out
                }
            };
            levels[level - 1] = Some(fi);
        }
        let m5 = match self.spec.variant {
            FusionVariant::NoMsff => levels[SCALES - 1].expect("finest scale active"),
            _ => {
                let f: Vec<Var> = levels
                    .iter()
                    .map(|v| v.expect("all scales active"))
                    .collect();
                self.msff_on_tape(tape, &f)?
            }
        };
        let fused = self.head_on_tape(tape, m5)?;
        Ok(FusionTrace {
            fused,
            levels,
            maps,
        })
    }

    /// Per-modality time-step fusion at one scale, outside any training tape.
    pub fn fuse_noisy_features(
        &self,
        pyramids: &[FeaturePyramid],
        modality: usize,
        level: usize,
    ) -> Result<Tensor> {
        if !(1..=SCALES).contains(&level) {
            return Err(Error::InvalidArgument(format!(
                "scale {level} out of 1..=5"
            )));
        }
        let mut tape = Tape::new(&self.params);
        let feats: Vec<Var> = pyramids
            .iter()
            .map(|p| tape.input(p.level(level).clone()))
            .collect();
        let out = self.fuse_noisy_on_tape(&mut tape, &feats, modality, level)?;
        Ok(tape.value(out).clone())
    }

    pub fn amff(
        &self,
        fa: &Tensor,
        fb: &Tensor,
        level: usize,
        probe: bool,
    ) -> Result<(Tensor, Option<AttentionMaps>)> {
        let mut tape = Tape::new(&self.params);
        let a = tape.input(fa.clone());
        let b = tape.input(fb.clone());
        let (out, maps) = self.amff_on_tape(&mut tape, a, b, level, probe)?;
        Ok((tape.value(out).clone(), maps))
    }

    pub fn msff(&self, f: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let vars: Vec<Var> = f.iter().map(|t| tape.input(t.clone())).collect();
        let out = self.msff_on_tape(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    }

    pub fn fusion_head(&self, m5: &Tensor) -> Result<GrayImage> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(m5.clone());
        let out = self.head_on_tape(&mut tape, x)?;
        let (_, h, w) = tape.value(out).dims3();
        GrayImage::new(h, w, tape.value(out).data().to_vec())
    }

    /// Fused luma from precomputed noisy pyramids of both modalities.
    pub fn fuse_pyramids(
        &self,
        pyr_a: &[FeaturePyramid],
        pyr_b: &[FeaturePyramid],
    ) -> Result<GrayImage> {
        let mut tape = Tape::new(&self.params);
        let (fa, fb) = pyramid_inputs(&mut tape, pyr_a, pyr_b);
        let trace = self.forward_on_tape(&mut tape, &fa, &fb, false)?;
        let out = tape.value(trace.fused);
        let (_, h, w) = out.dims3();
        GrayImage::new(h, w, out.data().to_vec())
    }
}

fn pyramid_inputs(
    tape: &mut Tape,
    pyr_a: &[FeaturePyramid],
    pyr_b: &[FeaturePyramid],
) -> (Vec<Vec<Var>>, Vec<Vec<Var>>) {
    let mut to_vars = |p: &[FeaturePyramid]| -> Vec<Vec<Var>> {
        p.iter()
            .map(|py| py.levels.iter().map(|l| tape.input(l.clone())).collect())
            .collect()
    };
    let a = to_vars(pyr_a);
    let b = to_vars(pyr_b);
    (a, b)
}

/// Noise both inputs at every step of `steps` and extract their pyramids.
///
/// Noise fields are drawn from `rng` in step order, A before B.
pub fn noisy_pyramids(
    recon: &ReconstructorWeights,
    ia: &GrayImage,
    ib: &GrayImage,
    steps: &TimeStepSet,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<(Vec<FeaturePyramid>, Vec<FeaturePyramid>)> {
    same_dims(ia, ib)?;
    steps.validate_against(schedule)?;
    let (h, w) = ia.dims();
    check_resolution(h, w)?;
    let mut pa = Vec::with_capacity(steps.len());
    let mut pb = Vec::with_capacity(steps.len());
    for &t in steps.steps() {
        let na = RawField::new(h, w, rng.normals(h * w))?;
        let nb = RawField::new(h, w, rng.normals(h * w))?;
        let xa = forward_jump(ia, t, schedule, &na)?;
        let xb = forward_jump(ib, t, schedule, &nb)?;
        pa.push(recon.extract_features(&xa, t)?);
        pb.push(recon.extract_features(&xb, t)?);
    }
    Ok((pa, pb))
}

/// End-to-end inference: noise, extract, fuse. `noise_seed` fixes every draw.
pub fn forward_fuse(
    recon: &ReconstructorWeights,
    fusion: &FusionWeights,
    ia: &GrayImage,
    ib_luma: &GrayImage,
    steps: &TimeStepSet,
    schedule: &NoiseSchedule,
    noise_seed: u64,
) -> Result<GrayImage> {
    if steps.len() != fusion.spec().n_steps {
        return Err(Error::Config(format!(
            "fusion network expects {} time steps, got {}",
            fusion.spec().n_steps,
            steps.len()
        )));
    }
    let mut rng = SeededRng::derive(noise_seed, 0x4e4f_4953);
    let (pa, pb) = noisy_pyramids(recon, ia, ib_luma, steps, schedule, &mut rng)?;
    fusion.fuse_pyramids(&pa, &pb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Per-step loss terms of a Stage II run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Curves {
    pub steps: Vec<LossBreakdown>,
}

impl Stage2Curves {
    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|b| b.total).collect()
    }

    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.min(self.steps.len()).max(1);
        self.steps
            .iter()
            .rev()
            .take(n)
            .map(|b| b.total)
            .sum::<f64>()
            / n as f64
    }
}

/// Everything Stage II needs besides data and the frozen reconstructor.
#[derive(Clone, Debug)]
pub struct Stage2Setup<'a> {
    pub schedule: &'a NoiseSchedule,
    pub time_steps: &'a TimeStepSet,
    pub loss: LossWeights,
    pub patch: PatchGeometry,
    pub variant: FusionVariant,
    pub train: Stage2Config,
}

/// Loss and parameter gradients of one fused sample.
pub fn stage2_loss_and_grads(
    fusion: &FusionWeights,
    pyr_a: &[FeaturePyramid],
    pyr_b: &[FeaturePyramid],
    ia: &GrayImage,
    ib: &GrayImage,
    loss: LossWeights,
    patch: PatchGeometry,
) -> Result<(LossBreakdown, crate::nn::GradStore)> {
    let mut tape = Tape::new(fusion.params());
    let (fa, fb) = pyramid_inputs(&mut tape, pyr_a, pyr_b);
    let trace = fusion.forward_on_tape(&mut tape, &fa, &fb, false)?;
    let out = tape.value(trace.fused);
    let (_, h, w) = out.dims3();
    let fused = RawField::new(h, w, out.data().to_vec())?;
    let (br, g) = total_loss_with_grad(&fused, ia, ib, loss, patch)?;
    let grads = tape.backward(trace.fused, Tensor::chw(1, h, w, g)?);
    Ok((br, grads.params))
}

/// Train the fusion network over a frozen reconstructor. Each step samples
/// one pair (tasks mixed) and draws fresh diffusion noise.
pub fn train_stage2(
    recon: &ReconstructorWeights,
    pairs: &[(GrayImage, GrayImage)],
    setup: &Stage2Setup,
) -> Result<(FusionWeights, Stage2Curves)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(
            "stage II needs at least one pair".into(),
        ));
    }
    setup.loss.validate()?;
    setup.time_steps.validate_against(setup.schedule)?;
    let dims = pairs[0].0.dims();
    for (a, b) in pairs {
        same_dims(a, b)?;
        if a.dims() != dims {
            return Err(Error::shape("stage II pairs differ in size".to_string()));
        }
    }
    let cfg = &setup.train;
    let mut fusion =
        FusionWeights::for_reconstructor(recon, setup.time_steps.len(), setup.variant, cfg.seed)?;
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        fusion.params(),
    );
    let mut rng = SeededRng::derive(cfg.seed, 0x5354_4732);
    let mut curves = Stage2Curves::default();
    for step in 0..cfg.steps {
        let (ia, ib) = &pairs[rng.index(pairs.len())];
        let (pa, pb) = noisy_pyramids(recon, ia, ib, setup.time_steps, setup.schedule, &mut rng)?;
        let (br, grads) =
            stage2_loss_and_grads(&fusion, &pa, &pb, ia, ib, setup.loss, setup.patch)?;
        if !br.total.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("stage II loss {}", br.total),
            });
        }
        opt.step(fusion.params_mut(), &grads);
        if step % 100 == 0 {
            log::debug!(
                "stage II step {step}: total {:.5} int {:.5} ssim {:.5} grad {:.5}",
                br.total,
                br.l_int,
                br.l_ssim,
                br.l_grad
            );
        }
        curves.steps.push(br);
    }
    if !fusion.params().all_finite() {
        return Err(Error::NonFinite {
            step: cfg.steps,
            detail: "stage II parameters".into(),
        });
    }
    Ok((fusion, curves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::losses::total_loss;
    use crate::reconstructor::ReconArch;

    fn tiny_recon() -> ReconstructorWeights {
        let arch = ReconArch {
            base_width: 2,
            multipliers: [1, 2, 2, 4, 4],
            time_dim: 4,
        };
        ReconstructorWeights::init(&arch, 3).unwrap()
    }

    fn rand_tensor(rng: &mut SeededRng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::chw(c, h, w, rng.normals(c * h * w)).unwrap()
    }

    fn rand_img(rng: &mut SeededRng, n: usize) -> GrayImage {
        GrayImage::new(n, n, (0..n * n).map(|_| rng.uniform()).collect()).unwrap()
    }

    fn rand_pyramid(rng: &mut SeededRng, ch: [usize; 5], size: usize) -> FeaturePyramid {
        FeaturePyramid {
            levels: (0..5)
                .map(|i| {
                    let s = size >> (4 - i);
                    rand_tensor(rng, ch[i], s, s)
                })
                .collect(),
        }
    }

    const CH: [usize; 5] = [8, 8, 4, 4, 2];

    #[test]
    fn spec_validation() {
        assert!(FusionSpec::new([8, 8, 4, 4, 0], 1, FusionVariant::Full).is_err());
        assert!(FusionSpec::new(CH, 0, FusionVariant::Full).is_err());
        assert!(FusionSpec::new([8, 8, 4, 4, 3], 1, FusionVariant::Full).is_err());
        assert!(FusionSpec::new([8, 8, 4, 4, 3], 1, FusionVariant::NoAmff).is_ok());
    }

    #[test]
    fn init_deterministic() {
        let spec = FusionSpec::new(CH, 3, FusionVariant::Full).unwrap();
        let a = FusionWeights::init(spec.clone(), 1);
        let b = FusionWeights::init(spec.clone(), 1);
        let c = FusionWeights::init(spec, 2);
        assert_eq!(a, b);
        assert_ne!(a.params().flatten(), c.params().flatten());
    }

    #[test]
    fn noisy_fusion_shapes_and_symmetry() {
        let mut rng = SeededRng::new(1);
        let p = rand_pyramid(&mut rng, CH, 64);
        let w1 = FusionWeights::init(FusionSpec::new(CH, 1, FusionVariant::Full).unwrap(), 0);
        for level in 1..=5 {
            let out = w1
                .fuse_noisy_features(std::slice::from_ref(&p), 0, level)
                .unwrap();
            let s = 64 >> (5 - level);
            assert_eq!(out.shape(), &[CH[level - 1], s, s]);
        }
        let w3 = FusionWeights::init(FusionSpec::new(CH, 3, FusionVariant::Full).unwrap(), 0);
        let q = rand_pyramid(&mut rng, CH, 64);
        let same = [p.clone(), p.clone(), p.clone()];
        let x = w3.fuse_noisy_features(&same, 1, 3).unwrap();
        let y = w3
            .fuse_noisy_features(&[p.clone(), p.clone(), p.clone()], 1, 3)
            .unwrap();
        assert_eq!(x, y);
        let z = w3
            .fuse_noisy_features(&[p.clone(), q.clone(), p.clone()], 1, 3)
            .unwrap();
        assert_ne!(x, z);
        // modality weights are separate
        assert_ne!(w3.fuse_noisy_features(&same, 0, 3).unwrap(), x);
        assert!(w3
            .fuse_noisy_features(std::slice::from_ref(&p), 0, 3)
            .is_err());
        let bad = rand_pyramid(&mut rng, [8, 8, 5, 4, 2], 64);
        assert!(w3.fuse_noisy_features(&[p.clone(), bad, p], 0, 3).is_err());
    }

    #[test]
    fn amff_shapes_maps_and_probe() {
        let mut rng = SeededRng::new(2);
        let w = FusionWeights::init(FusionSpec::new(CH, 1, FusionVariant::Full).unwrap(), 5);
        let fa = rand_tensor(&mut rng, 4, 16, 16);
        let fb = rand_tensor(&mut rng, 4, 16, 16);
        let (out, maps) = w.amff(&fa, &fb, 3, false).unwrap();
        assert_eq!(out.shape(), &[4, 16, 16]);
        let maps = maps.unwrap();
        assert_eq!(maps.spatial[0].shape(), &[1, 16, 16]);
        assert_eq!(maps.channel[1].shape(), &[4, 1, 1]);
        assert_eq!(maps.pixel.shape(), &[8, 16, 16]);
        let in_unit = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        assert!(maps.spatial.iter().chain(&maps.channel).all(in_unit) && in_unit(&maps.pixel));

        // probe: compare against the convolutional path built by hand
        let (probe, none) = w.amff(&fa, &fb, 3, true).unwrap();
        assert!(none.is_none());
        let l = w.layout.scales[2].as_ref().unwrap().amff.as_ref().unwrap();
        let p = w.params();
        let cat = Tensor::chw(8, 16, 16, [fa.data(), fb.data()].concat()).unwrap();
        let perm = crate::nn::shuffle_permutation(8, AMFF_GROUPS);
        let mut sh = Vec::new();
        for &src in &perm {
            sh.extend_from_slice(cat.channel(src));
        }
        let sh = Tensor::chw(8, 16, 16, sh).unwrap();
        let g = crate::nn::tape_conv(
            &sh,
            p.get(l.group.0),
            Some(p.get(l.group.1.unwrap())),
            AMFF_GROUPS,
        )
        .map(|v| v * crate::nn::sigmoid(v));
        let want = crate::nn::tape_conv(&g, p.get(l.proj.0), Some(p.get(l.proj.1.unwrap())), 1);
        assert!(probe.max_abs_diff(&want) < 1e-12);
        assert!(probe.max_abs_diff(&out) > 1e-6);
        assert!(w
            .amff(&fa, &rand_tensor(&mut rng, 4, 8, 8), 3, false)
            .is_err());
    }

    #[test]
    fn msff_ladder_zero_and_coarse_reach() {
        let mut rng = SeededRng::new(3);
        let w = FusionWeights::init(FusionSpec::new(CH, 1, FusionVariant::Full).unwrap(), 6);
        let f: Vec<Tensor> = rand_pyramid(&mut rng, CH, 64).levels;
        let out = w.msff(&f).unwrap();
        assert_eq!(out.shape(), &[2, 64, 64]);

        let mut f2 = f.clone();
        f2[0].data_mut()[0] += 1.0;
        assert!(w.msff(&f2).unwrap().max_abs_diff(&out) > 0.0);

        let mut zeroed = w.clone();
        let ids: Vec<ParamId> = {
            let m = zeroed.layout.msff.as_ref().unwrap();
            m.main.iter().chain(&m.skip).copied().collect()
        };
        for id in ids {
            zeroed.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        assert!(zeroed.msff(&f).unwrap().data().iter().all(|&v| v == 0.0));

        let mut bad = f.clone();
        bad[2] = rand_tensor(&mut rng, 4, 8, 8);
        assert!(w.msff(&bad).is_err());
    }

    #[test]
    fn head_bounded() {
        let mut rng = SeededRng::new(4);
        for seed in 0..5 {
            let w = FusionWeights::init(FusionSpec::new(CH, 1, FusionVariant::Full).unwrap(), seed);
            let m = Tensor::chw(
                2,
                16,
                16,
                rng.normals(512).iter().map(|v| 10.0 * v).collect(),
            )
            .unwrap();
            let img = w.fusion_head(&m).unwrap();
            assert_eq!(img.dims(), (16, 16));
            assert!(img.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn variants_are_smaller() {
        let full = FusionWeights::init(FusionSpec::new(CH, 3, FusionVariant::Full).unwrap(), 0);
        let no_amff =
            FusionWeights::init(FusionSpec::new(CH, 3, FusionVariant::NoAmff).unwrap(), 0);
        let no_msff =
            FusionWeights::init(FusionSpec::new(CH, 3, FusionVariant::NoMsff).unwrap(), 0);
        assert!(no_amff.param_count() < full.param_count());
        assert!(no_msff.param_count() < full.param_count());
        assert!(no_amff.params().names().iter().all(|n| !n.contains("amff")));
        assert!(no_msff
            .params()
            .names()
            .iter()
            .all(|n| !n.contains("msff") && !n.starts_with("s1.")));
    }

    #[test]
    fn no_amff_is_addition() {
        let mut rng = SeededRng::new(5);
        let w = FusionWeights::init(FusionSpec::new(CH, 1, FusionVariant::NoAmff).unwrap(), 0);
        let pa = rand_pyramid(&mut rng, CH, 32);
        let pb = rand_pyramid(&mut rng, CH, 32);
        let mut tape = Tape::new(w.params());
        let (fa, fb) = pyramid_inputs(
            &mut tape,
            std::slice::from_ref(&pa),
            std::slice::from_ref(&pb),
        );
        let trace = w.forward_on_tape(&mut tape, &fa, &fb, false).unwrap();
        for level in 1..=5 {
            let a = w
                .fuse_noisy_features(std::slice::from_ref(&pa), 0, level)
                .unwrap();
            let b = w
                .fuse_noisy_features(std::slice::from_ref(&pb), 1, level)
                .unwrap();
            let mut sum = a.clone();
            sum.add_assign(&b);
            assert!(
                tape.value(trace.levels[level - 1].unwrap())
                    .max_abs_diff(&sum)
                    < 1e-14
            );
        }
    }

    #[test]
    fn no_msff_uses_finest_only() {
        let mut rng = SeededRng::new(6);
        let w = FusionWeights::init(FusionSpec::new(CH, 1, FusionVariant::NoMsff).unwrap(), 0);
        let pa = rand_pyramid(&mut rng, CH, 32);
        let pb = rand_pyramid(&mut rng, CH, 32);
        let base = w
            .fuse_pyramids(std::slice::from_ref(&pa), std::slice::from_ref(&pb))
            .unwrap();
        let mut pa2 = pa.clone();
        for l in 0..4 {
            pa2.levels[l].data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        assert_eq!(
            w.fuse_pyramids(&[pa2], std::slice::from_ref(&pb)).unwrap(),
            base
        );
        // head applied directly to F^5
        let a5 = w.fuse_noisy_features(&[pa], 0, 5).unwrap();
        let b5 = w.fuse_noisy_features(&[pb], 1, 5).unwrap();
        let (f5, _) = w.amff(&a5, &b5, 5, false).unwrap();
        assert_eq!(w.fusion_head(&f5).unwrap(), base);
    }

    #[test]
    fn forward_fuse_deterministic_and_shaped() {
        let recon = tiny_recon();
        let schedule = ScheduleConfig::default().build().unwrap();
        let steps = TimeStepSet::default();
        let fusion = FusionWeights::for_reconstructor(&recon, 3, FusionVariant::Full, 0).unwrap();
        let mut rng = SeededRng::new(7);
        let a = rand_img(&mut rng, 32);
        let b = rand_img(&mut rng, 32);
        let x = forward_fuse(&recon, &fusion, &a, &b, &steps, &schedule, 9).unwrap();
        let y = forward_fuse(&recon, &fusion, &a, &b, &steps, &schedule, 9).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.dims(), (32, 32));
        let z = forward_fuse(&recon, &fusion, &a, &b, &steps, &schedule, 10).unwrap();
        assert_ne!(x, z);
        let bad = TimeStepSet::new(vec![5, 2000]).unwrap();
        let f2 = FusionWeights::for_reconstructor(&recon, 2, FusionVariant::Full, 0).unwrap();
        assert!(forward_fuse(&recon, &f2, &a, &b, &bad, &schedule, 0).is_err());
        assert!(forward_fuse(&recon, &f2, &a, &b, &steps, &schedule, 0).is_err());
    }

    fn fd_check(
        w: &FusionWeights,
        pa: &[FeaturePyramid],
        pb: &[FeaturePyramid],
        a: &GrayImage,
        b: &GrayImage,
    ) {
        let loss = LossWeights::default();
        let patch = PatchGeometry { size: 8, stride: 8 };
        let (_, grads) = stage2_loss_and_grads(w, pa, pb, a, b, loss, patch).unwrap();
        let analytic = grads.flatten();
        let eval = |flat: &[f64]| {
            let mut p = w.clone();
            p.params_mut().load_flat(flat);
            let img = p.fuse_pyramids(pa, pb).unwrap();
            total_loss(&img, a, b, loss, patch).unwrap().total
        };
        let base = w.params().flatten();
        let mut rng = SeededRng::new(99);
        let mut checked = 0;
        let h = 1e-5;
        for _ in 0..2000 {
            let i = rng.index(base.len());
            if analytic[i].abs() < 1e-6 {
                continue;
            }
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs());
            assert!(
                rel <= 1e-3,
                "{}: fd {fd} analytic {}",
                w.params().names().len(),
                analytic[i]
            );
            checked += 1;
            if checked == 40 {
                break;
            }
        }
        assert!(checked >= 20, "only {checked} coordinates checked");
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(8);
        let ch = [4, 4, 2, 2, 2];
        for variant in [
            FusionVariant::Full,
            FusionVariant::NoAmff,
            FusionVariant::NoMsff,
        ] {
            let w = FusionWeights::init(FusionSpec::new(ch, 2, variant).unwrap(), 1);
            let pa: Vec<_> = (0..2).map(|_| rand_pyramid(&mut rng, ch, 16)).collect();
            let pb: Vec<_> = (0..2).map(|_| rand_pyramid(&mut rng, ch, 16)).collect();
            let a = rand_img(&mut rng, 16);
            let b = rand_img(&mut rng, 16);
            fd_check(&w, &pa, &pb, &a, &b);
        }
    }

    #[test]
    fn stage2_freezes_recon_and_is_deterministic() {
        let recon = tiny_recon();
        let before = recon.params().flatten();
        let schedule = ScheduleConfig::default().build().unwrap();
        let steps = TimeStepSet::new(vec![5]).unwrap();
        let mut rng = SeededRng::new(9);
        let pairs = vec![(rand_img(&mut rng, 16), rand_img(&mut rng, 16))];
        let setup = Stage2Setup {
            schedule: &schedule,
            time_steps: &steps,
            loss: LossWeights::default(),
            patch: PatchGeometry { size: 8, stride: 8 },
            variant: FusionVariant::Full,
            train: Stage2Config {
                steps: 3,
                learning_rate: 1e-3,
                seed: 4,
            },
        };
        let (w1, c1) = train_stage2(&recon, &pairs, &setup).unwrap();
        let (w2, c2) = train_stage2(&recon, &pairs, &setup).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(c1, c2);
        assert_eq!(c1.steps.len(), 3);
        assert_eq!(recon.params().flatten(), before);
        assert!(train_stage2(&recon, &[], &setup).is_err());
    }
}
