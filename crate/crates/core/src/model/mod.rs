//! Prefix- and text-conditioned transformer denoiser predicting the clean
//! motion, its diffusion schedule and the iterative sampler.
//!
//! Tokens are one per frame: the first `Np` come from the clean motion
//! prefix, the rest from the noisy frames `x_t`. Each decoder layer runs
//! masked self-attention over frame tokens, cross-attention over the text
//! tokens and a GELU feed-forward block, all pre-normalized.

mod checkpoint;
mod denoiser;
pub(crate) mod nn;
mod sampler;
mod store;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MotionSequence, PoseLayout};
use crate::scalar::Scalar;
use crate::seed;
use crate::text::Vocab;

pub use checkpoint::{load_model, load_task_vector, save_model, save_task_vector, CheckpointKind, CHECKPOINT_VERSION};
pub use denoiser::{Denoiser, ModelGrads, Sample};
pub use sampler::{q_sample, sample, sample_batch, DiffusionSchedule, SampleRequest};
pub(crate) use sampler::gaussian;
pub(crate) use store::randn;
pub use store::ParamStore;

/// Default prefix length.
pub const PREFIX_LEN: usize = 20;
/// Default number of generated frames.
pub const GEN_LEN: usize = 40;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub joints: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    /// Width of the per-token text embeddings before projection.
    pub token_dim: usize,
    pub max_frames: usize,
    pub diffusion_steps: usize,
}

impl ModelConfig {
    /// CPU-trainable default: 2 layers, width 64, 2 heads, 4 joints.
    pub fn toy() -> Self {
        Self {
            joints: 4,
            d_model: 64,
            heads: 2,
            layers: 2,
            ffn_hidden: 128,
            token_dim: 32,
            max_frames: PREFIX_LEN + GEN_LEN,
            diffusion_steps: 10,
        }
    }

    /// Full-size shape: 8 layers of width 512 over the 22-joint skeleton.
    pub fn full() -> Self {
        Self {
            joints: 22,
            d_model: 512,
            heads: 4,
            layers: 8,
            ffn_hidden: 1024,
            token_dim: 768,
            max_frames: PREFIX_LEN + GEN_LEN,
            diffusion_steps: 10,
        }
    }

    /// Very small shape for unit tests.
    pub fn tiny() -> Self {
        Self {
            joints: 4,
            d_model: 8,
            heads: 2,
            layers: 1,
            ffn_hidden: 12,
            token_dim: 5,
            max_frames: 10,
            diffusion_steps: 4,
        }
    }

    pub fn channels(&self) -> usize {
        self.layout().map(|l| l.channels()).unwrap_or(0)
    }

    pub fn layout(&self) -> Result<PoseLayout> {
        PoseLayout::new(self.joints)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        let bad = |m: &str| Err(Error::Config(format!("model config: {m}")));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.layers == 0 || self.ffn_hidden == 0 || self.token_dim == 0 {
            return bad("layers, ffn_hidden and token_dim must be positive");
        }
        if self.max_frames < 2 || self.diffusion_steps == 0 {
            return bad("need max_frames >= 2 and diffusion_steps >= 1");
        }
        Ok(())
    }
}

/// Parameter ids of one decoder layer, as `(weight or gain, bias)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerIds {
    pub ln1: (usize, usize),
    pub qkv: (usize, usize),
    pub sa_out: (usize, usize),
    pub ln2: (usize, usize),
    pub cq: (usize, usize),
    pub ckv: (usize, usize),
    pub ca_out: (usize, usize),
    pub ln3: (usize, usize),
    pub ffn_in: (usize, usize),
    pub ffn_out: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct SiteIds {
    pub tok_embed: usize,
    pub text_proj: (usize, usize),
    pub prefix_in: (usize, usize),
    pub motion_in: (usize, usize),
    pub pos_embed: usize,
    pub time_embed: usize,
    pub ln_f: (usize, usize),
    pub head: (usize, usize),
}

/// Denoiser weights: a named site registry plus the vocabulary they embed.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<S> {
    config: ModelConfig,
    vocab: Vocab,
    store: ParamStore<S>,
}

fn pair(store: &ParamStore<impl Scalar>, prefix: &str, a: &str, b: &str) -> (usize, usize) {
    (store.expect_id(&format!("{prefix}.{a}")), store.expect_id(&format!("{prefix}.{b}")))
}

impl<S: Scalar> DenoiserParams<S> {
    /// Randomly initialized parameters over the builtin vocabulary.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_vocab(config, Vocab::builtin(), seed)
    }

    pub fn init_with_vocab(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::child_rng(seed, "model.init");
        let d = config.d_model;
        let f = config.channels();
        let h = config.ffn_hidden;
        let mut st = ParamStore::new();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let linear = |st: &mut ParamStore<S>, name: &str, out: usize, inp: usize, rng: &mut _| -> Result<()> {
            st.insert(format!("{name}.w"), randn(rng, out, inp, inv(inp)))?;
            st.insert(format!("{name}.b"), Array2::zeros((1, out)))?;
            Ok(())
        };
        let ln = |st: &mut ParamStore<S>, name: &str| -> Result<()> {
            st.insert(format!("{name}.g"), Array2::ones((1, d)))?;
            st.insert(format!("{name}.b"), Array2::zeros((1, d)))?;
            Ok(())
        };
        st.insert("tok_embed", randn(&mut rng, vocab.len(), config.token_dim, 1.0))?;
        linear(&mut st, "text_proj", d, config.token_dim, &mut rng)?;
        linear(&mut st, "prefix_in", d, f, &mut rng)?;
        linear(&mut st, "motion_in", d, f, &mut rng)?;
        st.insert("pos_embed", randn(&mut rng, config.max_frames, d, 0.1))?;
        st.insert("time_embed", randn(&mut rng, config.diffusion_steps, d, 0.1))?;
        for l in 0..config.layers {
            let p = format!("layers.{l}");
            ln(&mut st, &format!("{p}.ln1"))?;
            linear(&mut st, &format!("{p}.self_attn.qkv"), 3 * d, d, &mut rng)?;
            linear(&mut st, &format!("{p}.self_attn.out"), d, d, &mut rng)?;
            ln(&mut st, &format!("{p}.ln2"))?;
            linear(&mut st, &format!("{p}.cross_attn.q"), d, d, &mut rng)?;
            linear(&mut st, &format!("{p}.cross_attn.kv"), 2 * d, d, &mut rng)?;
            linear(&mut st, &format!("{p}.cross_attn.out"), d, d, &mut rng)?;
            ln(&mut st, &format!("{p}.ln3"))?;
            linear(&mut st, &format!("{p}.ffn.in"), h, d, &mut rng)?;
            linear(&mut st, &format!("{p}.ffn.out"), d, h, &mut rng)?;
        }
        ln(&mut st, "ln_f")?;
        linear(&mut st, "head", f, d, &mut rng)?;
        Self::from_parts(config, vocab, st)
    }

    /// Assembles parameters, checking every expected site and shape.
    pub fn from_parts(config: ModelConfig, vocab: Vocab, store: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.channels();
        let h = config.ffn_hidden;
        let mut expected: Vec<(String, (usize, usize))> = vec![
            ("tok_embed".into(), (vocab.len(), config.token_dim)),
            ("text_proj.w".into(), (d, config.token_dim)),
            ("text_proj.b".into(), (1, d)),
            ("prefix_in.w".into(), (d, f)),
            ("prefix_in.b".into(), (1, d)),
            ("motion_in.w".into(), (d, f)),
            ("motion_in.b".into(), (1, d)),
            ("pos_embed".into(), (config.max_frames, d)),
            ("time_embed".into(), (config.diffusion_steps, d)),
        ];
        for l in 0..config.layers {
            let p = format!("layers.{l}");
            for (name, w, b) in [
                ("ln1", (1, d), (1, d)),
                ("self_attn.qkv", (3 * d, d), (1, 3 * d)),
                ("self_attn.out", (d, d), (1, d)),
                ("ln2", (1, d), (1, d)),
                ("cross_attn.q", (d, d), (1, d)),
                ("cross_attn.kv", (2 * d, d), (1, 2 * d)),
                ("cross_attn.out", (d, d), (1, d)),
                ("ln3", (1, d), (1, d)),
                ("ffn.in", (h, d), (1, h)),
                ("ffn.out", (d, h), (1, d)),
            ] {
                let first = if name.starts_with("ln") { "g" } else { "w" };
                expected.push((format!("{p}.{name}.{first}"), w));
                expected.push((format!("{p}.{name}.b"), b));
            }
        }
        expected.push(("ln_f.g".into(), (1, d)));
        expected.push(("ln_f.b".into(), (1, d)));
        expected.push(("head.w".into(), (f, d)));
        expected.push(("head.b".into(), (1, f)));
        if expected.len() != store.len() {
            return Err(Error::ModelContract(format!(
                "expected {} sites, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (name, shape) in &expected {
            match store.get(name) {
                Some(v) if v.dim() == *shape => {}
                Some(v) => {
                    return Err(Error::ModelContract(format!(
                        "site {name} has shape {:?}, expected {shape:?}",
                        v.dim()
                    )))
                }
                None => return Err(Error::ModelContract(format!("missing site {name}"))),
            }
        }
        if !store.all_finite() {
            return Err(Error::ModelContract("non-finite parameter".into()));
        }
        Ok(Self { config, vocab, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn layout(&self) -> PoseLayout {
        self.config.layout().expect("validated at construction")
    }

    pub(crate) fn site_ids(&self) -> SiteIds {
        let st = &self.store;
        SiteIds {
            tok_embed: st.expect_id("tok_embed"),
            text_proj: pair(st, "text_proj", "w", "b"),
            prefix_in: pair(st, "prefix_in", "w", "b"),
            motion_in: pair(st, "motion_in", "w", "b"),
            pos_embed: st.expect_id("pos_embed"),
            time_embed: st.expect_id("time_embed"),
            ln_f: pair(st, "ln_f", "g", "b"),
            head: pair(st, "head", "w", "b"),
        }
    }

    pub(crate) fn layer_ids(&self, l: usize) -> LayerIds {
        let st = &self.store;
        let p = format!("layers.{l}");
        let lin = |n: &str| pair(st, &format!("{p}.{n}"), "w", "b");
        let ln = |n: &str| pair(st, &format!("{p}.{n}"), "g", "b");
        LayerIds {
            ln1: ln("ln1"),
            qkv: lin("self_attn.qkv"),
            sa_out: lin("self_attn.out"),
            ln2: ln("ln2"),
            cq: lin("cross_attn.q"),
            ckv: lin("cross_attn.kv"),
            ca_out: lin("cross_attn.out"),
            ln3: ln("ln3"),
            ffn_in: lin("ffn.in"),
            ffn_out: lin("ffn.out"),
        }
    }

    /// Per-token embeddings projected to the model width.
    pub fn encode_text(&self, caption: &str) -> Result<Array2<S>> {
        let ids = self.vocab.encode(caption);
        self.embed_ids(&ids)
    }

    pub(crate) fn embed_ids(&self, ids: &[usize]) -> Result<Array2<S>> {
        if ids.is_empty() {
            return Err(Error::EmptyCondition);
        }
        let ids_ = self.site_ids();
        let table = self.store.by_id(ids_.tok_embed);
        let mut e = Array2::zeros((ids.len(), self.config.token_dim));
        for (row, &id) in e.rows_mut().into_iter().zip(ids) {
            let mut row = row;
            row.assign(&table.row(id));
        }
        let w = self.store.by_id(ids_.text_proj.0);
        let b = self.store.by_id(ids_.text_proj.1);
        Ok(e.dot(&w.t()) + &b.row(0))
    }

    /// Text condition for `caption` carrying the first `prefix_len` frames
    /// of `motion` as the motion prefix.
    pub fn condition(
        &self,
        caption: &str,
        motion: &MotionSequence<S>,
        prefix_len: usize,
    ) -> Result<TextCondition<S>> {
        if prefix_len > motion.valid_len() {
            return Err(Error::PrefixTooLong {
                prefix: prefix_len,
                valid: motion.valid_len(),
            });
        }
        let token_ids = self.vocab.encode(caption);
        let tokens = self.embed_ids(&token_ids)?;
        Ok(TextCondition {
            token_ids,
            tokens,
            prefix: motion.frames().slice(s![..prefix_len, ..]).to_owned(),
        })
    }

    pub fn cast<T: Scalar>(&self) -> DenoiserParams<T> {
        DenoiserParams {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            store: self.store.cast(),
        }
    }
}

/// Conditioning for one prediction: projected text tokens plus the clean
/// motion prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition<S> {
    /// Vocabulary ids the tokens were embedded from.
    pub token_ids: Vec<usize>,
    /// `N_tokens x d_model`
    pub tokens: Array2<S>,
    /// `Np x F`
    pub prefix: Array2<S>,
}

impl<S: Scalar> TextCondition<S> {
    pub fn prefix_len(&self) -> usize {
        self.prefix.nrows()
    }
}
