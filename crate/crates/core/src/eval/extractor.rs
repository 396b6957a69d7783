//! Contrastively trained text and motion feature extractors sharing one
//! unit-sphere latent space.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusEntry;
use crate::error::{Error, Result};
use crate::losses::{pool, pool_backward, text_motion_loss_grad, EPS};
use crate::model::randn;
use crate::motion::MotionSequence;
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::seed;
use crate::text::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Latent size `d_e`.
    pub dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            hidden: 64,
            steps: 600,
            batch: 32,
            lr: 3e-3,
            tau: 0.07,
        }
    }
}

/// Two-layer tanh map followed by L2 normalization.
#[derive(Debug, Clone, PartialEq)]
struct Mlp<S> {
    w1: Array2<S>,
    b1: Array2<S>,
    w2: Array2<S>,
    b2: Array2<S>,
}

#[derive(Debug)]
struct MlpCache<S> {
    x: Array2<S>,
    h: Array2<S>,
    y: Array2<S>,
    norms: Array1<S>,
}

impl<S: Scalar> Mlp<S> {
    fn init(input: usize, hidden: usize, out: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            w1: randn(rng, hidden, input, 1.0 / (input as f64).sqrt()),
            b1: Array2::zeros((1, hidden)),
            w2: randn(rng, out, hidden, 1.0 / (hidden as f64).sqrt()),
            b2: Array2::zeros((1, out)),
        }
    }

    fn forward(&self, x: Array2<S>) -> MlpCache<S> {
        let h = (x.dot(&self.w1.t()) + &self.b1).mapv(|v| v.tanh());
        let u = h.dot(&self.w2.t()) + &self.b2;
        let norms = u.map_axis(Axis(1), |r| r.iter().map(|v| *v * *v).sum::<S>().sqrt().max(S::lit(1e-12)));
        let y = &u / &norms.view().insert_axis(Axis(1));
        MlpCache { x, h, y, norms }
    }

    /// Returns `(dx, [dw1, db1, dw2, db2])`.
    fn backward(&self, c: &MlpCache<S>, dy: &Array2<S>) -> (Array2<S>, [Array2<S>; 4]) {
        let proj = (dy * &c.y).sum_axis(Axis(1)).insert_axis(Axis(1));
        let du = (dy - &(&c.y * &proj)) / &c.norms.view().insert_axis(Axis(1));
        let dw2 = du.t().dot(&c.h);
        let db2 = du.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dh = du.dot(&self.w2);
        let da = dh * &c.h.mapv(|v| S::one() - v * v);
        let dw1 = da.t().dot(&c.x);
        let db1 = da.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx = da.dot(&self.w1);
        (dx, [dw1, db1, dw2, db2])
    }

    fn params_mut(&mut self) -> [&mut Array2<S>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn shapes(&self) -> [(usize, usize); 4] {
        [self.w1.dim(), self.b1.dim(), self.w2.dim(), self.b2.dim()]
    }
}

/// Gradient path from motion features back to the frames that produced them.
#[derive(Debug)]
pub struct MotionFeatureTape<S> {
    cache: MlpCache<S>,
}

/// Text encoder (bag of tokens) and motion encoder (standardized temporal
/// mean), trained jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractors<S> {
    vocab: Vocab,
    channels: usize,
    mean: Array1<S>,
    std: Array1<S>,
    text: Mlp<S>,
    motion: Mlp<S>,
}

impl<S: Scalar> Extractors<S> {
    pub fn dim(&self) -> usize {
        self.text.w2.nrows()
    }

    fn bag(&self, caption: &str) -> Array1<S> {
        let ids = self.vocab.encode(caption);
        let mut v = Array1::zeros(self.vocab.len());
        if ids.is_empty() {
            return v;
        }
        let w = S::lit(1.0 / ids.len() as f64);
        for id in ids {
            v[id] += w;
        }
        v
    }

    fn motion_input(&self, motions: &[&MotionSequence<S>]) -> Result<Array2<S>> {
        let mut x = Array2::zeros((motions.len(), self.channels));
        for (i, m) in motions.iter().enumerate() {
            if m.channels() != self.channels {
                return Err(Error::Feature(format!(
                    "motion has {} channels, extractor expects {}",
                    m.channels(),
                    self.channels
                )));
            }
            x.row_mut(i).assign(&((pool(m, EPS) - &self.mean) / &self.std));
        }
        Ok(x)
    }

    /// Unit-norm text features, one row per caption.
    pub fn text_features(&self, captions: &[&str]) -> Array2<S> {
        let mut x = Array2::zeros((captions.len(), self.vocab.len()));
        for (i, c) in captions.iter().enumerate() {
            x.row_mut(i).assign(&self.bag(c));
        }
        self.text.forward(x).y
    }

    /// Unit-norm motion features, one row per motion.
    pub fn motion_features(&self, motions: &[&MotionSequence<S>]) -> Result<Array2<S>> {
        Ok(self.motion.forward(self.motion_input(motions)?).y)
    }

    pub fn motion_features_tape(&self, motions: &[&MotionSequence<S>]) -> Result<(Array2<S>, MotionFeatureTape<S>)> {
        let cache = self.motion.forward(self.motion_input(motions)?);
        Ok((cache.y.clone(), MotionFeatureTape { cache }))
    }

    /// Gradients on each motion's frames given gradients on its features.
    pub fn motion_backward(
        &self,
        tape: &MotionFeatureTape<S>,
        motions: &[&MotionSequence<S>],
        d_features: &Array2<S>,
    ) -> Vec<Array2<S>> {
        let (dx, _) = self.motion.backward(&tape.cache, d_features);
        motions
            .iter()
            .zip(dx.rows())
            .map(|(m, row)| pool_backward(m, &(&row / &self.std), EPS))
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> Extractors<T> {
        let c2 = |a: &Array2<S>| a.mapv(|v| T::lit(v.as_f64()));
        let c1 = |a: &Array1<S>| a.mapv(|v| T::lit(v.as_f64()));
        let m = |p: &Mlp<S>| Mlp {
            w1: c2(&p.w1),
            b1: c2(&p.b1),
            w2: c2(&p.w2),
            b2: c2(&p.b2),
        };
        Extractors {
            vocab: self.vocab.clone(),
            channels: self.channels,
            mean: c1(&self.mean),
            std: c1(&self.std),
            text: m(&self.text),
            motion: m(&self.motion),
        }
    }
}

/// Trains both encoders on matched caption/motion pairs with the symmetric
/// contrastive loss. Deterministic in `(corpus, seed, cfg)`.
pub fn train_extractors<S: Scalar>(corpus: &[CorpusEntry<S>], seed: u64, cfg: &ExtractorConfig) -> Result<Extractors<S>> {
    let mut families: Vec<_> = corpus.iter().map(|e| e.family).collect();
    families.sort();
    families.dedup();
    let captions: std::collections::BTreeSet<_> = corpus.iter().map(|e| e.caption.as_str()).collect();
    let single_family = families.len() == 1 && families[0].is_some();
    if corpus.len() < 2 || single_family || captions.len() < 2 {
        return Err(Error::ExtractorTraining(
            "need at least two distinct families and captions".into(),
        ));
    }
    if cfg.dim == 0 || cfg.hidden == 0 || cfg.batch < 2 || !(cfg.lr > 0.0) || !(cfg.tau > 0.0) {
        return Err(Error::ExtractorTraining(format!("invalid config {cfg:?}")));
    }
    let channels = corpus[0].motion.channels();
    let pooled = {
        let mut p = Array2::<S>::zeros((corpus.len(), channels));
        for (i, e) in corpus.iter().enumerate() {
            if e.motion.channels() != channels {
                return Err(Error::ExtractorTraining("mixed channel counts".into()));
            }
            p.row_mut(i).assign(&pool(&e.motion, EPS));
        }
        p
    };
    let mean = pooled.mean_axis(Axis(0)).expect("non-empty corpus");
    let std = pooled
        .std_axis(Axis(0), S::zero())
        .mapv(|v| v.max(S::lit(1e-3)));
    let vocab = Vocab::builtin();
    let mut rng = seed::child_rng(seed, "extractors");
    let text = Mlp::init(vocab.len(), cfg.hidden, cfg.dim, &mut rng);
    let motion = Mlp::init(channels, cfg.hidden, cfg.dim, &mut rng);
    let mut ex = Extractors {
        vocab,
        channels,
        mean,
        std,
        text,
        motion,
    };
    let motion_in = (&pooled - &ex.mean) / &ex.std;
    let text_in = {
        let mut x = Array2::zeros((corpus.len(), ex.vocab.len()));
        for (i, e) in corpus.iter().enumerate() {
            x.row_mut(i).assign(&ex.bag(&e.caption));
        }
        x
    };
    let batch = cfg.batch.min(corpus.len());
    let mut opt_t = Optimizer::<S>::new(OptimizerKind::adam(), cfg.lr, ex.text.shapes());
    let mut opt_m = Optimizer::<S>::new(OptimizerKind::adam(), cfg.lr, ex.motion.shapes());
    for _ in 0..cfg.steps {
        let idx = index::sample(&mut rng, corpus.len(), batch).into_vec();
        let ct = ex.text.forward(text_in.select(Axis(0), &idx));
        let cm = ex.motion.forward(motion_in.select(Axis(0), &idx));
        let (loss, g_t, g_m) = text_motion_loss_grad(&ct.y, &cm.y, cfg.tau)?;
        if !loss.is_finite() {
            return Err(Error::ExtractorTraining("non-finite contrastive loss".into()));
        }
        let (_, gt) = ex.text.backward(&ct, &g_t);
        let (_, gm) = ex.motion.backward(&cm, &g_m);
        opt_t.step(ex.text.params_mut(), gt.iter());
        opt_m.step(ex.motion.params_mut(), gm.iter());
    }
    Ok(ex)
}
