//! Forward diffusion: variance schedules, one-step and closed-form noising,
//! and the Stage I reconstruction objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Plane, RawField};

/// Variance schedule `α_1 … α_T` with cumulative products.
///
/// Index `t` runs from 1 to `T`; `alpha_bar(0)` is 1 so step 0 is the clean
/// image.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::InvalidArgument(format!("alpha {a} outside (0, 1]")));
        }
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::InvalidArgument(
                "schedule destroys all signal".into(),
            ));
        }
        Ok(Self { alphas, alpha_bars })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.alphas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t, 0)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }
}

/// Schedule parameters as they appear in run configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// `α_t = 1 − β_t` with `β` linearly spaced from `beta_start` to `beta_end`.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) || beta_start > beta_end
    {
        return Err(Error::InvalidArgument(format!(
            "betas must satisfy 0 <= start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let alphas = (0..steps)
        .map(|i| {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            1.0 - beta
        })
        .collect();
    NoiseSchedule::from_alphas(alphas)
}

/// Ordered, duplicate-free set of diffusion steps used for feature taps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TimeStepSet(Vec<usize>);

impl TimeStepSet {
    pub fn new(steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("time-step set is empty".into()));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "time steps must be strictly increasing: {steps:?}"
            )));
        }
        Ok(Self(steps))
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Verify every step lies in `[0, T]`.
    pub fn validate_against(&self, schedule: &NoiseSchedule) -> Result<()> {
        for &t in &self.0 {
            if t > schedule.steps() {
                return Err(Error::StepOutOfRange {
                    t,
                    lo: 0,
                    hi: schedule.steps(),
                });
            }
        }
        Ok(())
    }
}

impl Default for TimeStepSet {
    fn default() -> Self {
        Self(vec![5, 10, 20])
    }
}

impl TryFrom<Vec<usize>> for TimeStepSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TimeStepSet> for Vec<usize> {
    fn from(s: TimeStepSet) -> Self {
        s.0
    }
}

fn check_noise(signal: &impl Plane, noise: &RawField) -> Result<()> {
    if signal.dims() != noise.dims() {
        return Err(Error::shape(format!(
            "noise {:?} vs signal {:?}",
            noise.dims(),
            signal.dims()
        )));
    }
    Ok(())
}

fn mix(signal: &impl Plane, a: f64, noise: &RawField, b: f64) -> RawField {
    let values = signal
        .values()
        .iter()
        .zip(noise.values())
        .map(|(s, z)| a * s + b * z)
        .collect();
    RawField::new(signal.height(), signal.width(), values).expect("finite mix")
}

/// One noising step: `sqrt(α_t)·prev + sqrt(1−α_t)·noise`.
pub fn forward_step(
    prev: &impl Plane,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &RawField,
) -> Result<RawField> {
    let a = schedule.alpha(t)?;
    check_noise(prev, noise)?;
    Ok(mix(prev, a.sqrt(), noise, (1.0 - a).sqrt()))
}

/// Closed-form noising from the clean image:
/// `sqrt(ᾱ_t)·clean + sqrt(1−ᾱ_t)·noise`. Step 0 returns the clean image.
pub fn forward_jump(
    clean: &impl Plane,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &RawField,
) -> Result<RawField> {
    let ab = schedule.alpha_bar(t)?;
    check_noise(clean, noise)?;
    Ok(mix(clean, ab.sqrt(), noise, (1.0 - ab).sqrt()))
}

/// Training pair `(I_t, I_{t−1})` on one coupled noise path: a single noise
/// field drives both the jump to `t − 1` and the final step to `t`.
pub fn coupled_pair(
    clean: &impl Plane,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &RawField,
) -> Result<(RawField, RawField)> {
    if t == 0 {
        return Err(Error::StepOutOfRange {
            t,
            lo: 1,
            hi: schedule.steps(),
        });
    }
    let prev = forward_jump(clean, t - 1, schedule, noise)?;
    let cur = forward_step(&prev, t, schedule, noise)?;
    Ok((cur, prev))
}

/// Mean absolute error between predicted and true previous-step images.
pub fn stage1_loss(predicted_prev: &impl Plane, true_prev: &impl Plane) -> Result<f64> {
    if predicted_prev.dims() != true_prev.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            predicted_prev.dims(),
            true_prev.dims()
        )));
    }
    let n = predicted_prev.values().len();
    if n == 0 {
        return Err(Error::shape("empty field".to_string()));
    }
    Ok(predicted_prev
        .values()
        .iter()
        .zip(true_prev.values())
        .map(|(p, t)| (t - p).abs())
        .sum::<f64>()
        / n as f64)
}

/// Stage I loss and its gradient with respect to the prediction.
pub fn stage1_loss_with_grad(predicted: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = predicted.len() as f64;
    let mut loss = 0.0;
    let grad = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn field(rng: &mut SeededRng, h: usize, w: usize) -> RawField {
        RawField::new(h, w, rng.normals(h * w)).unwrap()
    }

    #[test]
    fn noiseless_single_step_schedule() {
        let s = make_linear_schedule(1, 0.0, 0.0).unwrap();
        assert_eq!(s.alphas(), &[1.0]);
        assert_eq!(s.alpha_bars(), &[1.0]);
    }

    #[test]
    fn two_step_products() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_is_decreasing_and_positive() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.steps(), 1000);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(*s.alpha_bars().last().unwrap() > 0.0);
        for t in 1..=1000 {
            let prod: f64 = s.alphas()[..t].iter().product();
            assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_betas_and_steps() {
        assert!(make_linear_schedule(10, 0.2, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
        assert!(make_linear_schedule(10, -0.1, 0.1).is_err());
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        let s = make_linear_schedule(10, 0.1, 0.2).unwrap();
        let f = RawField::zeros(4, 4);
        assert!(forward_step(&f, 0, &s, &f).is_err());
        assert!(forward_step(&f, 11, &s, &f).is_err());
        assert!(forward_jump(&f, 11, &s, &f).is_err());
        assert!(forward_jump(&f, 3, &s, &RawField::zeros(4, 5)).is_err());
    }

    #[test]
    fn unit_alpha_step_is_identity_and_zero_signal_is_scaled_noise() {
        let mut rng = SeededRng::new(1);
        let s = make_linear_schedule(3, 0.0, 0.5).unwrap();
        let prev = field(&mut rng, 5, 5);
        let noise = field(&mut rng, 5, 5);
        assert_eq!(forward_step(&prev, 1, &s, &noise).unwrap(), prev);
        let zero = RawField::zeros(5, 5);
        let out = forward_step(&zero, 3, &s, &noise).unwrap();
        let k = (1.0 - s.alpha(3).unwrap()).sqrt();
        for (o, z) in out.values().iter().zip(noise.values()) {
            assert!((o - k * z).abs() < 1e-15);
        }
        assert_eq!(forward_jump(&prev, 0, &s, &noise).unwrap(), prev);
        assert_eq!(forward_jump(&prev, 1, &s, &noise).unwrap(), prev);
    }

    #[test]
    fn coupled_pair_is_consistent() {
        let mut rng = SeededRng::new(2);
        let s = ScheduleConfig::default().build().unwrap();
        let clean = field(&mut rng, 4, 4);
        let noise = field(&mut rng, 4, 4);
        let (cur, prev) = coupled_pair(&clean, 7, &s, &noise).unwrap();
        assert_eq!(prev, forward_jump(&clean, 6, &s, &noise).unwrap());
        assert_eq!(cur, forward_step(&prev, 7, &s, &noise).unwrap());
        assert!(coupled_pair(&clean, 0, &s, &noise).is_err());
    }

    #[test]
    fn stage1_loss_cases() {
        let mut rng = SeededRng::new(3);
        let a = field(&mut rng, 8, 8);
        assert_eq!(stage1_loss(&a, &a).unwrap(), 0.0);
        let shifted = RawField::new(8, 8, a.values().iter().map(|v| v - 0.25).collect()).unwrap();
        assert!((stage1_loss(&shifted, &a).unwrap() - 0.25).abs() < 1e-12);
        let b = field(&mut rng, 8, 8);
        let mut brute = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                brute += (a.at(y, x) - b.at(y, x)).abs();
            }
        }
        assert!((stage1_loss(&a, &b).unwrap() - brute / 64.0).abs() < 1e-12);
        assert!(stage1_loss(&a, &RawField::zeros(8, 7)).is_err());
        let (l, _) = stage1_loss_with_grad(a.values(), b.values());
        assert!((l - brute / 64.0).abs() < 1e-12);
    }

    #[test]
    fn timestep_set_validation() {
        assert_eq!(TimeStepSet::default().steps(), &[5, 10, 20]);
        assert!(TimeStepSet::new(vec![]).is_err());
        assert!(TimeStepSet::new(vec![5, 5]).is_err());
        assert!(TimeStepSet::new(vec![10, 5]).is_err());
        let s = make_linear_schedule(10, 0.1, 0.2).unwrap();
        assert!(TimeStepSet::new(vec![0, 10])
            .unwrap()
            .validate_against(&s)
            .is_ok());
        assert!(TimeStepSet::new(vec![11])
            .unwrap()
            .validate_against(&s)
            .is_err());
    }

    proptest! {
        #[test]
        fn jump_decomposes_exactly(t in 1usize..=1000, seed in 0u64..500) {
            let s = ScheduleConfig::default().build().unwrap();
            let mut rng = SeededRng::new(seed);
            let clean = field(&mut rng, 4, 4);
            let noise = field(&mut rng, 4, 4);
            let out = forward_jump(&clean, t, &s, &noise).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            for i in 0..16 {
                let resid = out.values()[i] - ab.sqrt() * clean.values()[i];
                prop_assert!((resid - (1.0 - ab).sqrt() * noise.values()[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn schedule_monotone(b0 in 0.0f64..0.05, span in 0.0f64..0.5, steps in 1usize..200) {
            let s = make_linear_schedule(steps, b0, b0 + span).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn loss_nonnegative_and_subadditive(seed in 0u64..500) {
            let mut rng = SeededRng::new(seed);
            let a = field(&mut rng, 4, 4);
            let d1 = field(&mut rng, 4, 4);
            let d2 = field(&mut rng, 4, 4);
            let add = |x: &RawField, d: &RawField| RawField::new(4, 4,
                x.values().iter().zip(d.values()).map(|(p, q)| p + q).collect()).unwrap();
            let l1 = stage1_loss(&add(&a, &d1), &a).unwrap();
            let l2 = stage1_loss(&add(&a, &d2), &a).unwrap();
            let l12 = stage1_loss(&add(&add(&a, &d1), &d2), &a).unwrap();
            prop_assert!(l1 >= 0.0);
            prop_assert!(l12 <= l1 + l2 + 1e-12);
        }
    }
}
