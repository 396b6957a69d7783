//! Absorbing harmful behaviour into adapters, and negating it at inference.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array1, Array2, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusEntry, ToxicityLevel};
use crate::error::{Error, Result};
use crate::eval::{train_extractors, ExtractorConfig, Extractors};
use crate::lora::{apply_policy, attach_adapters, extract_task_vector, negate, LoraConfig, LoraSet, NegationPolicy, TaskVector};
use crate::losses::{dec_loss_batch, harm_loss_batch, pool, pool_backward, pres_divergence_grad, LossWeights, TermValues};
use crate::model::{
    q_sample, sample_batch, save_task_vector, Denoiser, DenoiserParams, DiffusionSchedule, ModelGrads, Sample,
    SampleRequest, TextCondition, PREFIX_LEN,
};
use crate::motion::{decouple, sync_prefix, DecoupleMode, MotionSequence};
use crate::optim::{clip_factor, Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub weights: LossWeights,
    pub batch_unsafe: usize,
    pub batch_safe: usize,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
    pub seed: u64,
    pub lora: LoraConfig,
    pub prefix_len: usize,
    /// Write a task-vector checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            batch_unsafe: 4,
            batch_safe: 4,
            steps: 2000,
            lr: 1e-2,
            optimizer: OptimizerKind::sgd(),
            clip: None,
            seed: 0,
            lora: LoraConfig::default(),
            prefix_len: PREFIX_LEN,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.lora.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("stage-1 steps must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_unsafe == 0 || self.batch_safe == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.weights.text != 0.0 && self.batch_unsafe < 2 {
            return Err(Error::Config("the text term needs an unsafe batch of at least 2".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_harm: f64,
    pub l_dec: f64,
    pub l_pres: f64,
    pub total: f64,
    pub harm_terms: TermValues,
    pub dec_terms: TermValues,
    /// Mean `||z_cur - z_base||` over the safe batch, main branch.
    pub feature_distance: f64,
    pub grad_norm: f64,
    pub weights: LossWeights,
}

#[derive(Debug, Clone)]
pub struct AbsorbOutput<S> {
    pub adapters: LoraSet<S>,
    pub task_vector: TaskVector<S>,
    pub log: Vec<StepRecord>,
}

/// One drawn training example: clean motion, its decoupled copy, and the
/// shared step and noise.
struct Draw<S> {
    caption: String,
    x_t: MotionSequence<S>,
    x0: MotionSequence<S>,
    cond: TextCondition<S>,
    xd_t: MotionSequence<S>,
    xd0: MotionSequence<S>,
    cond_dec: TextCondition<S>,
    t: usize,
}

fn draw<S: Scalar>(
    base: &DenoiserParams<S>,
    schedule: &DiffusionSchedule,
    pool_: &[&CorpusEntry<S>],
    rng: &mut ChaCha8Rng,
    np: usize,
) -> Result<Draw<S>> {
    let e = pool_[rng.random_range(0..pool_.len())];
    let t = rng.random_range(0..schedule.steps());
    let noise = crate::model::gaussian(rng, e.motion.len(), e.motion.channels());
    let mode = DecoupleMode::draw(rng);
    let dseed: u64 = rng.random();
    let x0 = e.motion.clone();
    let cond = base.condition(&e.caption, &x0, np)?;
    let xd0 = decouple(&x0, mode, dseed)?;
    let cond_dec = sync_prefix(&cond, &xd0, np)?;
    Ok(Draw {
        caption: e.caption.clone(),
        x_t: q_sample(schedule, &x0, t, &noise)?,
        xd_t: q_sample(schedule, &xd0, t, &noise)?,
        x0,
        cond,
        xd0,
        cond_dec,
        t,
    })
}

fn items<S>(draws: &[Draw<S>]) -> Vec<Sample<'_, S>> {
    let main = draws.iter().map(|d| Sample {
        x_t: &d.x_t,
        t: d.t,
        cond: &d.cond,
    });
    let dec = draws.iter().map(|d| Sample {
        x_t: &d.xd_t,
        t: d.t,
        cond: &d.cond_dec,
    });
    main.chain(dec).collect()
}

fn add_scaled<S: Scalar>(dst: &mut Array2<S>, src: &Array2<S>, c: S) {
    Zip::from(dst).and(src).for_each(|a, &b| *a += b * c);
}

fn finite_or(step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            step,
            what: what.into(),
        })
    }
}

/// [`absorb_with`] using extractors trained from the corpus when the text
/// term is weighted.
pub fn absorb<S: Scalar>(
    base: &DenoiserParams<S>,
    corpus: &[CorpusEntry<S>],
    cfg: &Stage1Config,
) -> Result<AbsorbOutput<S>> {
    let extractors = if cfg.weights.text != 0.0 {
        Some(train_extractors(
            corpus,
            seed::derive(cfg.seed, "extractors"),
            &ExtractorConfig::default(),
        )?)
    } else {
        None
    };
    absorb_with(base, corpus, cfg, extractors.as_ref())
}

/// Trains adapters on the base model so they absorb the unsafe entries,
/// then extracts their task vector. The backbone is never modified.
///
/// Only seen entries are used: level 2-3 form the unsafe stream, level 1
/// the safe one. Each stream draws from its own generator, so with a zero
/// preservation weight the safe entries have no effect on the result.
pub fn absorb_with<S: Scalar>(
    base: &DenoiserParams<S>,
    corpus: &[CorpusEntry<S>],
    cfg: &Stage1Config,
    extractors: Option<&Extractors<S>>,
) -> Result<AbsorbOutput<S>> {
    cfg.validate()?;
    let w = &cfg.weights;
    if w.text != 0.0 && extractors.is_none() {
        return Err(Error::Config("text term weighted but no feature extractors given".into()));
    }
    let unsafe_pool: Vec<&CorpusEntry<S>> =
        corpus.iter().filter(|e| !e.split.unseen && e.level.is_harmful()).collect();
    let safe_pool: Vec<&CorpusEntry<S>> =
        corpus.iter().filter(|e| !e.split.unseen && !e.level.is_harmful()).collect();
    if unsafe_pool.is_empty() {
        return Err(Error::StreamStarvation("unsafe"));
    }
    if safe_pool.is_empty() {
        return Err(Error::StreamStarvation("safe"));
    }
    let schedule = DiffusionSchedule::cosine(base.config().diffusion_steps)?;
    let np = cfg.prefix_len;
    let use_safe = w.pres != 0.0;

    let base_print = base.store().fingerprint();
    let epoch = unsafe_pool.len().div_ceil(cfg.batch_unsafe).max(1);
    let frozen = Denoiser::new(base, None);

    let mut lora = attach_adapters(base, &cfg.lora, seed::derive(cfg.seed, "lora"))?;
    let shapes: Vec<_> = lora.adapters().iter().flat_map(|a| [a.a.dim(), a.b.dim()]).collect();
    let mut opt = Optimizer::<S>::new(cfg.optimizer, cfg.lr, shapes);
    let mut rng_u = seed::child_rng(cfg.seed, "absorb.unsafe");
    let mut rng_s = seed::child_rng(cfg.seed, "absorb.safe");
    let mut rng_drop = seed::child_rng(cfg.seed, "absorb.dropout");
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if step % epoch == 0 && base.store().fingerprint() != base_print {
            return Err(Error::ModelContract(format!("frozen base changed before step {step}")));
        }
        let den = Denoiser::new(base, Some(&lora));
        let mut grads = ModelGrads::new(base, Some(&lora), false, true);

        // Unsafe stream: harmful and decoupled losses in one forward pass.
        let ud: Vec<Draw<S>> = (0..cfg.batch_unsafe)
            .map(|_| draw(base, &schedule, &unsafe_pool, &mut rng_u, np))
            .collect::<Result<_>>()?;
        let u_items = items(&ud);
        let (outs, tape) = den.forward_tape(&u_items, Some(&mut rng_drop))?;
        let bu = cfg.batch_unsafe;
        let (main_out, dec_out) = outs.split_at(bu);
        let targets: Vec<MotionSequence<S>> = ud.iter().map(|d| d.x0.clone()).collect();
        let dec_targets: Vec<MotionSequence<S>> = ud.iter().map(|d| d.xd0.clone()).collect();

        let feats = match extractors.filter(|_| w.text != 0.0) {
            Some(ex) => {
                let caps: Vec<&str> = ud.iter().map(|d| d.caption.as_str()).collect();
                let refs: Vec<&MotionSequence<S>> = main_out.iter().collect();
                let (e_m, ftape) = ex.motion_features_tape(&refs)?;
                Some((ex, ex.text_features(&caps), e_m, ftape))
            }
            None => None,
        };
        let harm = harm_loss_batch(
            main_out,
            &targets,
            feats.as_ref().map(|(_, e_t, e_m, _)| (e_t, e_m)),
            w,
        )?;
        let dec = if w.dec != 0.0 {
            Some(dec_loss_batch(dec_out, &dec_targets, w)?)
        } else {
            None
        };
        let l_harm = finite_or(step, "L_harm", harm.value.as_f64())?;
        let l_dec = finite_or(step, "L_dec", dec.as_ref().map_or(0.0, |d| d.value.as_f64()))?;

        let mut d_out: Vec<Array2<S>> = harm.grads.iter().map(|g| g * S::lit(w.harm)).collect();
        if let (Some((ex, _, _, ftape)), Some(ge)) = (&feats, &harm.grad_e_m) {
            let refs: Vec<&MotionSequence<S>> = main_out.iter().collect();
            for (dst, src) in d_out.iter_mut().zip(ex.motion_backward(ftape, &refs, ge)) {
                add_scaled(dst, &src, S::lit(w.harm));
            }
        }
        match &dec {
            Some(d) => d_out.extend(d.grads.iter().map(|g| g * S::lit(w.dec))),
            None => d_out.extend(dec_out.iter().map(|o| Array2::zeros(o.frames().dim()))),
        }
        den.backward(&tape, &d_out, &mut grads)?;

        // Safe stream: push pooled predictions away from the frozen base.
        let (mut l_pres, mut feature_distance) = (0.0, 0.0);
        if use_safe {
            let sd: Vec<Draw<S>> = (0..cfg.batch_safe)
                .map(|_| draw(base, &schedule, &safe_pool, &mut rng_s, np))
                .collect::<Result<_>>()?;
            let s_items = items(&sd);
            let (cur, stape) = den.forward_tape(&s_items, Some(&mut rng_drop))?;
            let reference = frozen.forward_batch(&s_items)?;
            let bs = cfg.batch_safe;
            let inv_b = 1.0 / bs as f64;
            let mut ds: Vec<Array2<S>> = Vec::with_capacity(2 * bs);
            let mut dec_grads = Vec::with_capacity(bs);
            for i in 0..bs {
                let (zc, zb) = (pool(&cur[i], w.eps), pool(&reference[i], w.eps));
                let (zcd, zbd) = (pool(&cur[bs + i], w.eps), pool(&reference[bs + i], w.eps));
                let pd = pres_divergence_grad(&zc, &zb, &zcd, &zbd, w.gamma)?;
                l_pres += pd.value.as_f64() * inv_b;
                feature_distance += diff_norm(&zc, &zb) * inv_b;
                let c = S::lit(w.pres * inv_b);
                ds.push(pool_backward(&cur[i], &(&pd.grad_cur * c), w.eps));
                dec_grads.push(pool_backward(&cur[bs + i], &(&pd.grad_cur_dec * c), w.eps));
            }
            ds.extend(dec_grads);
            l_pres = finite_or(step, "L_pres", l_pres)?;
            den.backward(&stape, &ds, &mut grads)?;
        }

        let total = w.harm * l_harm + w.dec * l_dec + w.pres * l_pres;
        let grad_norm = finite_or(step, "gradient", grads.sq_norm().as_f64().sqrt())?;
        let c = clip_factor(grad_norm, cfg.clip);
        if c < 1.0 {
            grads.scale(S::lit(c));
        }
        let g = grads.lora.as_ref().expect("adapter gradients requested");
        opt.step(
            lora.adapters_mut().iter_mut().flat_map(|a| [&mut a.a, &mut a.b]),
            g.iter().flat_map(|(da, db)| [da, db]),
        );

        let record = StepRecord {
            step,
            l_harm,
            l_dec,
            l_pres,
            total,
            harm_terms: harm.terms,
            dec_terms: dec.map(|d| d.terms).unwrap_or_default(),
            feature_distance,
            grad_norm,
            weights: *w,
        };
        log::debug!("{}", serde_json::to_string(&record)?);
        log.push(record);

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                save_task_vector(&extract_task_vector(&lora), &dir.join(format!("step-{:06}", step + 1)))?;
            }
        }
    }
    if base.store().fingerprint() != base_print {
        return Err(Error::ModelContract("frozen base changed during training".into()));
    }
    let task_vector = extract_task_vector(&lora);
    if !task_vector.all_finite() {
        return Err(Error::Divergence {
            step: cfg.steps,
            what: "task vector".into(),
        });
    }
    Ok(AbsorbOutput {
        adapters: lora,
        task_vector,
        log,
    })
}

fn diff_norm<S: Scalar>(a: &Array1<S>, b: &Array1<S>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Negates with the scale the policy assigns to `level` and samples.
pub fn negate_and_sample<S: Scalar>(
    base: &DenoiserParams<S>,
    delta: &TaskVector<S>,
    policy: &NegationPolicy,
    schedule: &DiffusionSchedule,
    req: &SampleRequest<'_, S>,
    level: ToxicityLevel,
) -> Result<MotionSequence<S>> {
    Ok(negate_and_sample_batch(base, delta, policy, schedule, &[(*req, level)])?.remove(0))
}

/// Batched [`negate_and_sample`]: one merge per distinct scale, outputs in
/// request order. Requests sharing a scale and length are sampled together.
pub fn negate_and_sample_batch<S: Scalar>(
    base: &DenoiserParams<S>,
    delta: &TaskVector<S>,
    policy: &NegationPolicy,
    schedule: &DiffusionSchedule,
    reqs: &[(SampleRequest<'_, S>, ToxicityLevel)],
) -> Result<Vec<MotionSequence<S>>> {
    policy.validate()?;
    let mut groups: BTreeMap<(u64, usize), Vec<usize>> = BTreeMap::new();
    for (i, (r, level)) in reqs.iter().enumerate() {
        let alpha = apply_policy(*level, policy);
        groups
            .entry((alpha.to_bits(), r.cond.prefix_len() + r.gen_len))
            .or_default()
            .push(i);
    }
    let mut out: Vec<Option<MotionSequence<S>>> = vec![None; reqs.len()];
    let mut merged: Option<(u64, DenoiserParams<S>)> = None;
    for ((bits, _), idx) in groups {
        if merged.as_ref().is_none_or(|(b, _)| *b != bits) {
            merged = Some((bits, negate(base, delta, S::lit(f64::from_bits(bits)))?));
        }
        let params = &merged.as_ref().expect("merged above").1;
        let batch: Vec<SampleRequest<'_, S>> = idx.iter().map(|&i| reqs[i].0).collect();
        let samples = sample_batch(&Denoiser::new(params, None), schedule, &batch)?;
        for (i, s) in idx.into_iter().zip(samples) {
            out[i] = Some(s);
        }
    }
    Ok(out.into_iter().map(|m| m.expect("every request sampled")).collect())
}
