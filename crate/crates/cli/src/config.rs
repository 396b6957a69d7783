//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. `include = path` pulls
//! in another file (relative to the including one) at that point, so later
//! lines override it. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use unlearn_core::lora::{LoraConfig, NegationPolicy};
use unlearn_core::losses::LossWeights;
use unlearn_core::model::ModelConfig;
use unlearn_core::motion::SynthSpec;
use unlearn_core::optim::OptimizerKind;
use unlearn_core::pipeline::{BaseConfig, EvalConfig};
use unlearn_core::unlearn::Stage1Config;

/// Every key with its default. Parsed before any user file, so the
/// documented defaults are the effective ones.
pub const DEFAULTS: &str = "\
# corpus: samples per family (walk, wave, punch, kick) and shape
corpus.per_class = 32
corpus.joints = 4
corpus.frames = 60
corpus.min_valid = 48
corpus.unseen_every = 5

# model preset: toy | full
model.preset = toy
prefix_len = 20

# base denoiser training
base.steps = 5000
base.batch = 8
base.lr = 1e-3
base.optimizer = adam
base.clip = 1.0

# adapter absorption
absorb.steps = 2000
absorb.batch_unsafe = 4
absorb.batch_safe = 4
absorb.lr = 1e-2
absorb.optimizer = sgd
absorb.clip = none
absorb.checkpoint_every = 0

# loss weights: lambda per kinematic term, W per stream, gamma, tau, eps
loss.mpjpe = 1.0
loss.vel = 1.0
loss.acc = 0.5
loss.foot = 0.5
loss.text = 0.1
loss.w_harm = 1.0
loss.w_dec = 0.5
loss.w_pres = 0.1
loss.gamma = 0.5
loss.tau = 0.07
loss.eps = 1e-8

# adapters: rank r, alpha_lora, dropout p
lora.rank = 16
lora.alpha = 16
lora.dropout = 0.05

# negation: static:<a> or gated:<a_safe>,<a_unsafe>
policy = gated:0.05,2.0
sweep.grid = 0.05,0.2,0.5,0.8,1.0,1.2,1.5,2.0

# evaluation repetitions and diversity subset cap
eval.reps = 5
eval.diversity_max = 300

# optional harmful-lemma file; empty uses the built-in list
lemmas =
# optional remote classifier endpoint; the environment variable overrides
agent.url =

seed = 0
out = runs/default
";

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub per_class: usize,
    pub base: BaseConfig,
    pub stage1: Stage1Config,
    pub policy: NegationPolicy,
    pub grid: Vec<f64>,
    pub eval: EvalConfig,
    pub lemmas: Option<PathBuf>,
    pub agent_url: Option<String>,
    pub seed: u64,
    pub out: PathBuf,
}

fn parse_into(text: &str, origin: &Path, map: &mut BTreeMap<String, String>, depth: usize) -> Result<()> {
    if depth > 16 {
        bail!("include nesting too deep at {}", origin.display());
    }
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("{}:{}: expected key = value", origin.display(), no + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "include" {
            let path = origin.parent().unwrap_or(Path::new(".")).join(v);
            let inner = fs::read_to_string(&path).with_context(|| format!("reading include {}", path.display()))?;
            parse_into(&inner, &path, map, depth + 1)?;
        } else {
            map.insert(k.to_string(), v.to_string());
        }
    }
    Ok(())
}

fn num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = &map[key];
    v.parse().map_err(|_| anyhow::anyhow!("config key {key}: cannot parse {v:?}"))
}

fn clip(map: &BTreeMap<String, String>, key: &str) -> Result<Option<f64>> {
    match map[key].as_str() {
        "" | "none" | "off" => Ok(None),
        _ => num(map, key).map(Some),
    }
}

fn optional(map: &BTreeMap<String, String>, key: &str) -> Option<String> {
    Some(map[key].clone()).filter(|v| !v.is_empty())
}

impl RunConfig {
    /// Defaults, overlaid by `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = BTreeMap::new();
        parse_into(DEFAULTS, Path::new("."), &mut map, 0)?;
        let known: Vec<String> = map.keys().cloned().collect();
        if let Some(p) = path {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse_into(&text, p, &mut map, 0)?;
        }
        if let Some(bad) = map.keys().find(|k| !known.contains(k)) {
            bail!("unknown config key {bad:?}");
        }
        Self::from_map(&map)
    }

    fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let seed: u64 = num(m, "seed")?;
        let per_class: usize = num(m, "corpus.per_class")?;
        if per_class == 0 {
            bail!("corpus.per_class must be at least 1");
        }
        let mut model = match m["model.preset"].as_str() {
            "toy" => ModelConfig::toy(),
            "full" => ModelConfig::full(),
            other => bail!("unknown model preset {other:?}; expected toy or full"),
        };
        let synth = SynthSpec {
            joints: num(m, "corpus.joints")?,
            frames: num(m, "corpus.frames")?,
            min_valid: num(m, "corpus.min_valid")?,
            unseen_every: num(m, "corpus.unseen_every")?,
        };
        model.joints = synth.joints;
        model.max_frames = model.max_frames.max(synth.frames);
        let prefix_len: usize = num(m, "prefix_len")?;
        let opt = |k: &str| OptimizerKind::parse(&m[k]).map_err(anyhow::Error::from);
        let weights = LossWeights {
            mpjpe: num(m, "loss.mpjpe")?,
            vel: num(m, "loss.vel")?,
            acc: num(m, "loss.acc")?,
            foot: num(m, "loss.foot")?,
            text: num(m, "loss.text")?,
            harm: num(m, "loss.w_harm")?,
            dec: num(m, "loss.w_dec")?,
            pres: num(m, "loss.w_pres")?,
            gamma: num(m, "loss.gamma")?,
            tau: num(m, "loss.tau")?,
            eps: num(m, "loss.eps")?,
        };
        weights.validate()?;
        let base = BaseConfig {
            model,
            steps: num(m, "base.steps")?,
            batch: num(m, "base.batch")?,
            lr: num(m, "base.lr")?,
            optimizer: opt("base.optimizer")?,
            clip: clip(m, "base.clip")?,
            seed,
            prefix_len,
        };
        let stage1 = Stage1Config {
            weights,
            batch_unsafe: num(m, "absorb.batch_unsafe")?,
            batch_safe: num(m, "absorb.batch_safe")?,
            steps: num(m, "absorb.steps")?,
            lr: num(m, "absorb.lr")?,
            optimizer: opt("absorb.optimizer")?,
            clip: clip(m, "absorb.clip")?,
            seed,
            lora: LoraConfig {
                rank: num(m, "lora.rank")?,
                alpha: num(m, "lora.alpha")?,
                dropout: num(m, "lora.dropout")?,
            },
            prefix_len,
            checkpoint_every: num(m, "absorb.checkpoint_every")?,
            checkpoint_dir: None,
        };
        let grid = m["sweep.grid"]
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| anyhow::anyhow!("bad sweep.grid value {v:?}")))
            .collect::<Result<Vec<_>>>()?;
        if grid.is_empty() || grid.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            bail!("sweep.grid must list finite non-negative scales");
        }
        Ok(Self {
            synth,
            per_class,
            base,
            stage1,
            policy: NegationPolicy::parse(&m["policy"])?,
            grid,
            eval: EvalConfig {
                reps: num(m, "eval.reps")?,
                seed,
                prefix_len,
                diversity_max: num(m, "eval.diversity_max")?,
            },
            lemmas: optional(m, "lemmas").map(PathBuf::from),
            agent_url: optional(m, "agent.url"),
            seed,
            out: PathBuf::from(&m["out"]),
        })
    }

    /// Propagates a seed override to every component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.base.seed = seed;
        self.stage1.seed = seed;
        self.eval.seed = seed;
    }
}
