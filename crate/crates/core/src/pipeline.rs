//! End-to-end orchestration: base training, generation under a negation
//! policy, reconstruction error, per-split evaluation and the scale sweep.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusEntry, SplitTag};
use crate::error::{Error, Result};
use crate::eval::{diversity, fid, r_precision_all, Extractors, GaussianStats, MeanCi, SplitReport, R_NEGATIVES};
use crate::lora::{NegationPolicy, TaskVector};
use crate::model::{
    q_sample, Denoiser, DenoiserParams, DiffusionSchedule, ModelConfig, ModelGrads, Sample, SampleRequest,
    TextCondition, PREFIX_LEN,
};
use crate::motion::MotionSequence;
use crate::optim::{clip_factor, Optimizer, OptimizerKind};
use crate::safety::Classifier;
use crate::scalar::Scalar;
use crate::seed;
use crate::unlearn::negate_and_sample_batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip: Option<f64>,
    pub seed: u64,
    pub prefix_len: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            steps: 5000,
            batch: 8,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            clip: Some(1.0),
            seed: 0,
            prefix_len: PREFIX_LEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Mean per-frame L2 error over generated frames `np..n` of the full pose
/// vector, with its gradient.
pub fn denoise_loss_grad<S: Scalar>(
    pred: &MotionSequence<S>,
    tgt: &MotionSequence<S>,
    np: usize,
    eps: f64,
) -> Result<(S, Array2<S>)> {
    pred.check_same_shape(tgt)?;
    let n = pred.valid_len();
    let mut g = Array2::zeros(pred.frames().dim());
    let mut total = 0.0;
    let denom = (n.saturating_sub(np)) as f64 + eps;
    for t in np.min(n)..n {
        let d = &pred.frames().row(t) - &tgt.frames().row(t);
        let norm = d.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        total += norm;
        if norm > 0.0 {
            g.row_mut(t).assign(&d.mapv(|v| S::lit(v.as_f64() / (norm * denom))));
        }
    }
    Ok((S::lit(total / denom), g))
}

/// Trains the denoiser from scratch on every corpus entry by regressing
/// clean motion from noised inputs. Zero steps returns the initialization.
pub fn train_base<S: Scalar>(
    corpus: &[CorpusEntry<S>],
    cfg: &BaseConfig,
) -> Result<(DenoiserParams<S>, Vec<BaseRecord>)> {
    if corpus.is_empty() {
        return Err(Error::StreamStarvation("training"));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("base training needs a positive batch size and learning rate".into()));
    }
    let mut params = DenoiserParams::init(cfg.model.clone(), seed::derive(cfg.seed, "base.init"))?;
    let schedule = DiffusionSchedule::cosine(cfg.model.diffusion_steps)?;
    let mut opt = Optimizer::<S>::new(cfg.optimizer, cfg.lr, params.store().values().iter().map(|v| v.dim()));
    let mut rng = seed::child_rng(cfg.seed, "base.batches");
    let mut log = Vec::with_capacity(cfg.steps);
    let np = cfg.prefix_len;
    for step in 0..cfg.steps {
        let mut drawn: Vec<(MotionSequence<S>, TextCondition<S>, usize, &MotionSequence<S>)> = Vec::new();
        for _ in 0..cfg.batch {
            let e = &corpus[rng.random_range(0..corpus.len())];
            let t = rng.random_range(0..schedule.steps());
            let noise = crate::model::gaussian(&mut rng, e.motion.len(), e.motion.channels());
            let x_t = q_sample(&schedule, &e.motion, t, &noise)?;
            drawn.push((x_t, params.condition(&e.caption, &e.motion, np)?, t, &e.motion));
        }
        let den = Denoiser::new(&params, None);
        let items: Vec<Sample<'_, S>> = drawn
            .iter()
            .map(|(x_t, cond, t, _)| Sample { x_t, t: *t, cond })
            .collect();
        let (outs, tape) = den.forward_tape(&items, None)?;
        let inv_b = S::lit(1.0 / cfg.batch as f64);
        let mut loss = 0.0;
        let mut d_out = Vec::with_capacity(cfg.batch);
        for (o, (_, _, _, x0)) in outs.iter().zip(&drawn) {
            let (v, g) = denoise_loss_grad(o, x0, np, crate::losses::EPS)?;
            loss += v.as_f64() / cfg.batch as f64;
            d_out.push(g * inv_b);
        }
        let mut grads = ModelGrads::new(&params, None, true, false);
        den.backward(&tape, &d_out, &mut grads)?;
        let grad_norm = grads.sq_norm().as_f64().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "base loss".into(),
            });
        }
        let c = clip_factor(grad_norm, cfg.clip);
        if c < 1.0 {
            grads.scale(S::lit(c));
        }
        let g = grads.params.expect("backbone gradients requested");
        opt.step(params.store_mut().values_mut().iter_mut(), g.values().iter());
        let record = BaseRecord { step, loss, grad_norm };
        log::debug!("{}", serde_json::to_string(&record)?);
        log.push(record);
    }
    Ok((params, log))
}

/// Mean joint-position distance over frames `np..n` of `generated` against
/// the first `n` frames of `truth`.
pub fn reconstruction_error<S: Scalar>(generated: &MotionSequence<S>, truth: &MotionSequence<S>, np: usize) -> Result<f64> {
    let n = generated.valid_len();
    if n > truth.valid_len() || np >= n {
        return Err(Error::InvalidMotion(format!(
            "cannot compare {n} generated frames after a prefix of {np} with {} true frames",
            truth.valid_len()
        )));
    }
    let jp = generated.layout().joint_positions();
    let a = generated.frames().slice(s![np..n, jp.clone()]);
    let b = truth.frames().slice(s![np..n, jp]);
    let mut total = 0.0;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        let mut sq = 0.0;
        Zip::from(&ra).and(&rb).for_each(|x, y| sq += (x.as_f64() - y.as_f64()).powi(2));
        total += sq.sqrt();
    }
    Ok(total / (n - np) as f64)
}

/// What to generate with: the base alone, or the base negated by a task
/// vector under a policy.
#[derive(Debug, Clone, Copy)]
pub enum Generator<'a, S> {
    Base,
    Negated {
        delta: &'a TaskVector<S>,
        policy: &'a NegationPolicy,
    },
}

/// One continuation per entry, conditioned on its caption and first
/// `prefix_len` frames and running to its valid length. Levels come from
/// classifying the caption.
pub fn generate<S: Scalar>(
    base: &DenoiserParams<S>,
    gen: Generator<'_, S>,
    entries: &[&CorpusEntry<S>],
    classifier: &Classifier,
    prefix_len: usize,
    seed_: u64,
) -> Result<Vec<MotionSequence<S>>> {
    let schedule = DiffusionSchedule::cosine(base.config().diffusion_steps)?;
    let conds: Vec<TextCondition<S>> = entries
        .iter()
        .map(|e| base.condition(&e.caption, &e.motion, prefix_len))
        .collect::<Result<_>>()?;
    let mut reqs = Vec::with_capacity(entries.len());
    for (e, cond) in entries.iter().zip(&conds) {
        let gen_len = e.motion.valid_len().saturating_sub(prefix_len);
        let level = classifier.classify(&e.caption)?.level;
        let req = SampleRequest {
            cond,
            gen_len,
            seed: seed::derive(seed_, &format!("generate.{}", e.id)),
        };
        reqs.push((req, level));
    }
    let zero = TaskVector {
        increments: BTreeMap::new(),
    };
    let off = NegationPolicy::Static { alpha: 0.0 };
    let (delta, policy) = match gen {
        Generator::Base => (&zero, &off),
        Generator::Negated { delta, policy } => (delta, policy),
    };
    negate_and_sample_batch(base, delta, policy, &schedule, &reqs)
}

/// Mean reconstruction error over entries.
pub fn mean_reconstruction<S: Scalar>(
    generated: &[MotionSequence<S>],
    entries: &[&CorpusEntry<S>],
    prefix_len: usize,
) -> Result<f64> {
    if generated.is_empty() || generated.len() != entries.len() {
        return Err(Error::Metric("generated motions must pair one-to-one with entries".into()));
    }
    let mut total = 0.0;
    for (g, e) in generated.iter().zip(entries) {
        total += reconstruction_error(g, &e.motion, prefix_len)?;
    }
    Ok(total / generated.len() as f64)
}

/// Evaluation settings shared by reports and sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Repetitions behind each mean and interval.
    pub reps: usize,
    pub seed: u64,
    pub prefix_len: usize,
    /// Upper bound on the diversity subset size.
    pub diversity_max: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            reps: 5,
            seed: 0,
            prefix_len: PREFIX_LEN,
            diversity_max: 300,
        }
    }
}

/// Named groups of entries reported on: the four split tags, then the
/// forget and retain totals.
pub fn split_groups<S>(corpus: &[CorpusEntry<S>]) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for forget in [true, false] {
        for unseen in [false, true] {
            let tag = SplitTag { forget, unseen };
            let idx = (0..corpus.len()).filter(|&i| corpus[i].split == tag).collect();
            out.push((tag.as_str().to_string(), idx));
        }
    }
    for (name, forget) in [("forget", true), ("retain", false)] {
        let idx = (0..corpus.len()).filter(|&i| corpus[i].split.forget == forget).collect();
        out.push((name.to_string(), idx));
    }
    out
}

struct RepMetrics {
    fid: f64,
    diversity: Option<f64>,
    r: Option<[f64; 3]>,
    recon: f64,
}

fn features_f64<S: Scalar>(ex: &Extractors<S>, motions: &[&MotionSequence<S>]) -> Result<Array2<f64>> {
    Ok(ex.motion_features(motions)?.mapv(|v| v.as_f64()))
}

fn group_metrics<S: Scalar>(
    ex: &Extractors<S>,
    generated: &[&MotionSequence<S>],
    entries: &[&CorpusEntry<S>],
    cfg: &EvalConfig,
    rep_seed: u64,
) -> Result<RepMetrics> {
    let gen_f = features_f64(ex, generated)?;
    let truth: Vec<&MotionSequence<S>> = entries.iter().map(|e| &e.motion).collect();
    let real_f = features_f64(ex, &truth)?;
    let fid = fid(&GaussianStats::fit(&gen_f)?, &GaussianStats::fit(&real_f)?)?;
    let m_d = (generated.len() / 2).min(cfg.diversity_max);
    let diversity = if m_d >= 1 {
        Some(diversity(&gen_f, m_d, seed::derive(rep_seed, "diversity"))?)
    } else {
        None
    };
    let r = if entries.len() > R_NEGATIVES {
        let caps: Vec<&str> = entries.iter().map(|e| e.caption.as_str()).collect();
        let text_f = ex.text_features(&caps).mapv(|v| v.as_f64());
        Some(r_precision_all(&text_f, &gen_f, seed::derive(rep_seed, "r_precision"))?)
    } else {
        None
    };
    let mut recon = 0.0;
    for (g, e) in generated.iter().zip(entries) {
        recon += reconstruction_error(g, &e.motion, cfg.prefix_len)?;
    }
    Ok(RepMetrics {
        fid,
        diversity,
        r,
        recon: recon / entries.len() as f64,
    })
}

/// Per-split report over `cfg.reps` seeded generations. Groups with fewer
/// than two entries are skipped.
pub fn evaluate<S: Scalar>(
    model_name: &str,
    base: &DenoiserParams<S>,
    gen: Generator<'_, S>,
    corpus: &[CorpusEntry<S>],
    ex: &Extractors<S>,
    classifier: &Classifier,
    cfg: &EvalConfig,
) -> Result<Vec<SplitReport>> {
    if cfg.reps == 0 {
        return Err(Error::Config("evaluation needs at least one repetition".into()));
    }
    let entries: Vec<&CorpusEntry<S>> = corpus.iter().collect();
    let seeds: Vec<u64> = (0..cfg.reps as u64)
        .map(|r| seed::derive_indexed(cfg.seed, "eval.rep", r))
        .collect();
    let generations: Vec<Vec<MotionSequence<S>>> = seeds
        .par_iter()
        .map(|&s| generate(base, gen, &entries, classifier, cfg.prefix_len, s))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (name, idx) in split_groups(corpus) {
        if idx.len() < 2 {
            continue;
        }
        let group: Vec<&CorpusEntry<S>> = idx.iter().map(|&i| &corpus[i]).collect();
        let per_rep: Vec<RepMetrics> = generations
            .iter()
            .zip(&seeds)
            .map(|(g, &s)| {
                let motions: Vec<&MotionSequence<S>> = idx.iter().map(|&i| &g[i]).collect();
                group_metrics(ex, &motions, &group, cfg, seed::derive(s, &name))
            })
            .collect::<Result<_>>()?;
        let ci = |f: &dyn Fn(&RepMetrics) -> f64| MeanCi::from_samples(&per_rep.iter().map(f).collect::<Vec<_>>());
        rows.push(SplitReport {
            model: model_name.to_string(),
            split: name,
            n: idx.len(),
            fid: ci(&|m| m.fid),
            diversity: per_rep[0].diversity.map(|_| ci(&|m| m.diversity.unwrap_or(0.0))),
            r_precision: per_rep[0]
                .r
                .map(|_| [0, 1, 2].map(|k| ci(&|m| m.r.map_or(0.0, |r| r[k])))),
            recon: ci(&|m| m.recon),
            seeds: seeds.clone(),
        });
    }
    Ok(rows)
}

/// One point of the negation-scale sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub split: String,
    pub fid: MeanCi,
    pub r1: Option<MeanCi>,
    pub recon: MeanCi,
}

/// Evaluates `Static(alpha)` for every alpha in `grid` on the forget and
/// retain sets.
pub fn alpha_sweep<S: Scalar>(
    base: &DenoiserParams<S>,
    delta: &TaskVector<S>,
    corpus: &[CorpusEntry<S>],
    ex: &Extractors<S>,
    classifier: &Classifier,
    grid: &[f64],
    cfg: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    let mut out = Vec::new();
    for &alpha in grid {
        let policy = NegationPolicy::Static { alpha };
        let rows = evaluate(
            &format!("static:{alpha}"),
            base,
            Generator::Negated { delta, policy: &policy },
            corpus,
            ex,
            classifier,
            cfg,
        )?;
        for r in rows.into_iter().filter(|r| r.split == "forget" || r.split == "retain") {
            out.push(SweepRow {
                alpha,
                split: r.split,
                fid: r.fid,
                r1: r.r_precision.map(|v| v[0]),
                recon: r.recon,
            });
        }
    }
    Ok(out)
}

/// Tab-separated sweep table for one split: alpha, FID and R@1 with their
/// intervals, and reconstruction error.
pub fn sweep_tsv(rows: &[SweepRow], split: &str) -> String {
    let mut out = String::from("alpha\tfid\tfid_ci\tr1\tr1_ci\trecon\trecon_ci\n");
    for r in rows.iter().filter(|r| r.split == split) {
        let (r1, r1c) = r.r1.map_or(("nan".into(), "nan".into()), |m| (m.mean.to_string(), m.ci.to_string()));
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.alpha, r.fid.mean, r.fid.ci, r1, r1c, r.recon.mean, r.recon.ci
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::synth_corpus;

    #[test]
    fn denoise_gradient_matches_finite_differences() {
        let corpus = synth_corpus::<f64>(3, 1).unwrap();
        let tgt = &corpus[0].motion;
        let mut pred = tgt.clone();
        let mut rng = seed::rng(9);
        pred.frames_mut().mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
        let (_, g) = denoise_loss_grad(&pred, tgt, 5, 1e-8).unwrap();
        let h = 1e-6;
        for &(t, c) in &[(5, 0), (7, 3), (20, 10), (2, 1)] {
            let mut p = pred.clone();
            p.frames_mut()[[t, c]] += h;
            let up = denoise_loss_grad(&p, tgt, 5, 1e-8).unwrap().0;
            p.frames_mut()[[t, c]] -= 2.0 * h;
            let dn = denoise_loss_grad(&p, tgt, 5, 1e-8).unwrap().0;
            assert!(((up - dn) / (2.0 * h) - g[[t, c]]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_step_base_is_the_initialization() {
        let corpus = synth_corpus::<f64>(0, 1).unwrap();
        let cfg = BaseConfig {
            model: ModelConfig::tiny(),
            steps: 0,
            ..BaseConfig::default()
        };
        let (p, log) = train_base(&corpus, &cfg).unwrap();
        let init = DenoiserParams::<f64>::init(ModelConfig::tiny(), seed::derive(0, "base.init")).unwrap();
        assert!(log.is_empty());
        assert_eq!(p.store(), init.store());
    }

    #[test]
    fn reconstruction_of_truth_is_zero() {
        let corpus = synth_corpus::<f64>(0, 1).unwrap();
        let m = &corpus[0].motion;
        assert_eq!(reconstruction_error(m, m, 10).unwrap(), 0.0);
        assert!(reconstruction_error(m, m, m.valid_len()).is_err());
    }
}
