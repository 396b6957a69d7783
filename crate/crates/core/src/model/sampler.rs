//! Cosine noise schedule, forward noising and the x0-parameterized sampler.

use ndarray::{s, Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Denoiser, Sample, TextCondition};
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::scalar::Scalar;
use crate::seed;

/// Cumulative signal levels `alpha_bar[t]`, strictly decreasing in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Cosine schedule with offset 0.008 and betas capped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion steps must be positive".into()));
        }
        let f = |s: usize| {
            let x = (s as f64 / steps as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|t| {
                let beta = (1.0 - f(t + 1) / f(t)).min(0.999);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config("alpha_bar values must lie in (0, 1]".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `sqrt(a) * x0 + sqrt(1 - a) * noise` on valid frames; padding is copied.
pub fn q_sample<S: Scalar>(
    schedule: &DiffusionSchedule,
    x0: &MotionSequence<S>,
    t: usize,
    noise: &Array2<S>,
) -> Result<MotionSequence<S>> {
    if noise.dim() != x0.frames().dim() {
        return Err(Error::InvalidMotion(format!(
            "noise shape {:?} does not match motion {:?}",
            noise.dim(),
            x0.frames().dim()
        )));
    }
    if t >= schedule.steps() {
        return Err(Error::ModelContract(format!("step {t} outside schedule of {}", schedule.steps())));
    }
    let a = schedule.alpha_bar(t);
    let (ca, cn) = (S::lit(a.sqrt()), S::lit((1.0 - a).sqrt()));
    let mut frames = x0.frames().clone();
    let n = x0.valid_len();
    Zip::from(frames.slice_mut(s![..n, ..]))
        .and(noise.slice(s![..n, ..]))
        .for_each(|x, &e| *x = ca * *x + cn * e);
    Ok(MotionSequence::from_raw(frames, n, x0.layout().clone()))
}

pub(crate) fn gaussian<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<S> {
    Array2::from_shape_simple_fn((rows, cols), || S::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// One generation: the prefix and text in `cond`, `gen_len` new frames.
#[derive(Debug, Clone, Copy)]
pub struct SampleRequest<'a, S> {
    pub cond: &'a TextCondition<S>,
    pub gen_len: usize,
    pub seed: u64,
}

/// Generates `Np + gen_len` frames: starts from Gaussian noise, predicts x0
/// at every step and re-noises it to the next level. Uses exactly
/// `schedule.steps()` forward calls.
pub fn sample<S: Scalar>(
    den: &Denoiser<'_, S>,
    schedule: &DiffusionSchedule,
    req: &SampleRequest<'_, S>,
) -> Result<MotionSequence<S>> {
    Ok(sample_batch(den, schedule, std::slice::from_ref(req))?.remove(0))
}

/// Batched [`sample`]; every request must produce the same length. Each
/// request draws from its own seed, so results do not depend on batching.
pub fn sample_batch<S: Scalar>(
    den: &Denoiser<'_, S>,
    schedule: &DiffusionSchedule,
    reqs: &[SampleRequest<'_, S>],
) -> Result<Vec<MotionSequence<S>>> {
    let Some(first) = reqs.first() else {
        return Ok(Vec::new());
    };
    if schedule.steps() != den.params().config().diffusion_steps {
        return Err(Error::ModelContract("schedule length differs from the model's step count".into()));
    }
    let total = first.cond.prefix_len() + first.gen_len;
    for r in reqs {
        if r.gen_len == 0 {
            return Err(Error::Config("generation length must be at least 1".into()));
        }
        if r.cond.prefix_len() + r.gen_len != total {
            return Err(Error::ModelContract("batched requests must share one length".into()));
        }
    }
    let layout = den.params().layout();
    let f = layout.channels();
    let mut rngs: Vec<_> = reqs.iter().map(|r| seed::child_rng(r.seed, "sample")).collect();
    let mut xs: Vec<MotionSequence<S>> = reqs
        .iter()
        .zip(&mut rngs)
        .map(|(r, rng)| {
            let np = r.cond.prefix_len();
            let mut frames = Array2::zeros((total, f));
            frames.slice_mut(s![..np, ..]).assign(&r.cond.prefix);
            frames.slice_mut(s![np.., ..]).assign(&gaussian(rng, r.gen_len, f));
            MotionSequence::from_raw(frames, total, layout.clone())
        })
        .collect();
    for t in (0..schedule.steps()).rev() {
        let items: Vec<_> = xs
            .iter()
            .zip(reqs)
            .map(|(x, r)| Sample { x_t: x, t, cond: r.cond })
            .collect();
        let preds = den.forward_batch(&items)?;
        if t == 0 {
            return Ok(preds);
        }
        let a = schedule.alpha_bar(t - 1);
        let (ca, cn) = (S::lit(a.sqrt()), S::lit((1.0 - a).sqrt()));
        xs = preds
            .into_iter()
            .zip(reqs)
            .zip(&mut rngs)
            .map(|((p, r), rng)| {
                let np = r.cond.prefix_len();
                let mut frames = p.into_frames();
                let noise: Array2<S> = gaussian(rng, r.gen_len, f);
                Zip::from(frames.slice_mut(s![np.., ..]))
                    .and(&noise)
                    .for_each(|x, &e| *x = ca * *x + cn * e);
                MotionSequence::from_raw(frames, total, layout.clone())
            })
            .collect();
    }
    unreachable!("schedule has at least one step")
}
