//! Low-rank adapters, task-vector extraction and negation.
//!
//! An adapter at site `s` adds `(alpha / r) * B * A` to the weight `s.w`.
//! The task vector is that increment materialized densely; negation
//! subtracts a multiple of it from the base weights.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::corpus::ToxicityLevel;
use crate::error::{Error, Result};
use crate::model::DenoiserParams;
use crate::scalar::Scalar;
use crate::seed;

/// Suffixes of the per-layer weights that receive adapters.
pub const INJECTION_SUFFIXES: [&str; 3] = ["self_attn.out", "ffn.in", "ffn.out"];

/// Injection sites for a model with `layers` decoder layers.
pub fn injection_sites(layers: usize) -> Vec<String> {
    (0..layers)
        .flat_map(|l| INJECTION_SUFFIXES.iter().map(move |s| format!("layers.{l}.{s}")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} not in [0, 1)", self.dropout)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("LoRA alpha must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<S> {
    pub site: String,
    /// `r x d_in`
    pub a: Array2<S>,
    /// `d_out x r`
    pub b: Array2<S>,
    pub alpha: S,
    pub dropout: S,
}

impl<S: Scalar> LoraAdapter<S> {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// `alpha / r`
    pub fn scale(&self) -> S {
        self.alpha / S::lit(self.rank() as f64)
    }

    /// Dense increment `(alpha / r) * B * A`, shaped like the site weight.
    pub fn increment(&self) -> Array2<S> {
        self.b.dot(&self.a) * self.scale()
    }
}

/// The adapters attached to one model, plus a global multiplier on their
/// output (1 for training; `-alpha` to emulate a negated merge).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet<S> {
    adapters: Vec<LoraAdapter<S>>,
    index: HashMap<String, usize>,
    multiplier: S,
}

impl<S: Scalar> LoraSet<S> {
    pub fn from_adapters(adapters: Vec<LoraAdapter<S>>) -> Self {
        let index = adapters.iter().enumerate().map(|(i, a)| (a.site.clone(), i)).collect();
        Self {
            adapters,
            index,
            multiplier: S::one(),
        }
    }

    pub fn adapters(&self) -> &[LoraAdapter<S>] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter<S>] {
        &mut self.adapters
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, site: &str) -> Option<&LoraAdapter<S>> {
        self.index.get(site).map(|&i| &self.adapters[i])
    }

    pub(crate) fn position(&self, site: &str) -> Option<usize> {
        self.index.get(site).copied()
    }

    pub fn multiplier(&self) -> S {
        self.multiplier
    }

    /// Copy whose outputs are multiplied by `c`.
    pub fn scaled(&self, c: S) -> Self {
        let mut out = self.clone();
        out.multiplier = self.multiplier * c;
        out
    }

    pub fn sites(&self) -> Vec<&str> {
        self.adapters.iter().map(|a| a.site.as_str()).collect()
    }

    pub fn numel(&self) -> usize {
        self.adapters.iter().map(|a| a.a.len() + a.b.len()).sum()
    }
}

/// Creates rank-`r` adapters at every layer's self-attention output and
/// both FFN projections. `A` is Gaussian with std `1/sqrt(d_in)`, `B` is zero.
pub fn attach_adapters<S: Scalar>(
    params: &DenoiserParams<S>,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<LoraSet<S>> {
    cfg.validate()?;
    let mut rng = seed::child_rng(seed, "lora.init");
    let mut adapters = Vec::new();
    for site in injection_sites(params.config().layers) {
        let w = params
            .store()
            .get(&format!("{site}.w"))
            .ok_or_else(|| Error::InjectionSite(site.clone()))?;
        let (d_out, d_in) = w.dim();
        adapters.push(LoraAdapter {
            a: crate::model::randn(&mut rng, cfg.rank, d_in, 1.0 / (d_in as f64).sqrt()),
            b: Array2::zeros((d_out, cfg.rank)),
            alpha: S::lit(cfg.alpha),
            dropout: S::lit(cfg.dropout),
            site,
        });
    }
    Ok(LoraSet::from_adapters(adapters))
}

/// Dense per-site increments.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector<S> {
    pub increments: BTreeMap<String, Array2<S>>,
}

impl<S: Scalar> TaskVector<S> {
    pub fn sites(&self) -> impl Iterator<Item = &str> {
        self.increments.keys().map(String::as_str)
    }

    /// Same sites, every increment multiplied by `c`.
    pub fn scaled(&self, c: S) -> Self {
        Self {
            increments: self
                .increments
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| x * c)))
                .collect(),
        }
    }

    pub fn sq_norm(&self) -> S {
        self.increments.values().map(|v| v.iter().map(|x| *x * *x).sum::<S>()).sum()
    }

    /// Euclidean distance between two task vectors over the union of sites.
    pub fn distance(&self, other: &Self) -> S {
        let mut total = S::zero();
        for (site, a) in &self.increments {
            match other.increments.get(site) {
                Some(b) => {
                    total += Zip::from(a).and(b).fold(S::zero(), |acc, &x, &y| acc + (x - y) * (x - y))
                }
                None => total += a.iter().map(|x| *x * *x).sum::<S>(),
            }
        }
        for (site, b) in &other.increments {
            if !self.increments.contains_key(site) {
                total += b.iter().map(|x| *x * *x).sum::<S>();
            }
        }
        total.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.increments.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Per-site `(alpha / r) * B * A`.
pub fn extract_task_vector<S: Scalar>(adapters: &LoraSet<S>) -> TaskVector<S> {
    TaskVector {
        increments: adapters
            .adapters()
            .iter()
            .map(|a| (a.site.clone(), a.increment()))
            .collect(),
    }
}

/// `base - alpha * delta` at every task-vector site; an exact copy when
/// `alpha` is zero.
pub fn negate<S: Scalar>(
    base: &DenoiserParams<S>,
    delta: &TaskVector<S>,
    alpha: S,
) -> Result<DenoiserParams<S>> {
    let mut out = base.clone();
    for (site, inc) in &delta.increments {
        let name = format!("{site}.w");
        let w = out
            .store_mut()
            .get_mut(&name)
            .ok_or_else(|| Error::Merge(format!("site {site} not in base")))?;
        if w.dim() != inc.dim() {
            return Err(Error::Merge(format!(
                "site {site}: weight {:?} vs increment {:?}",
                w.dim(),
                inc.dim()
            )));
        }
        if alpha == S::zero() {
            continue;
        }
        Zip::from(w).and(inc).for_each(|x, &d| *x -= alpha * d);
    }
    Ok(out)
}

/// How strongly to negate, possibly depending on the prompt's toxicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NegationPolicy {
    Static { alpha: f64 },
    Gated { alpha_safe: f64, alpha_unsafe: f64 },
}

impl NegationPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64| a.is_finite() && a >= 0.0;
        let valid = match *self {
            NegationPolicy::Static { alpha } => ok(alpha),
            NegationPolicy::Gated {
                alpha_safe,
                alpha_unsafe,
            } => ok(alpha_safe) && ok(alpha_unsafe),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::Config(format!("negation scales must be finite and >= 0: {self:?}")))
        }
    }

    /// Parses `static:<a>` or `gated:<a_safe>,<a_unsafe>`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad policy {s:?}; expected static:<a> or gated:<a_safe>,<a_unsafe>"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let policy = match kind.trim() {
            "static" => NegationPolicy::Static { alpha: num(rest)? },
            "gated" => {
                let (a, b) = rest.split_once(',').ok_or_else(bad)?;
                NegationPolicy::Gated {
                    alpha_safe: num(a)?,
                    alpha_unsafe: num(b)?,
                }
            }
            _ => return Err(bad()),
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl std::fmt::Display for NegationPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NegationPolicy::Static { alpha } => write!(f, "static:{alpha}"),
            NegationPolicy::Gated {
                alpha_safe,
                alpha_unsafe,
            } => write!(f, "gated:{alpha_safe},{alpha_unsafe}"),
        }
    }
}

/// Negation scale for a prompt of the given level.
pub fn apply_policy(level: ToxicityLevel, policy: &NegationPolicy) -> f64 {
    match *policy {
        NegationPolicy::Static { alpha } => alpha,
        NegationPolicy::Gated {
            alpha_safe,
            alpha_unsafe,
        } => {
            if level.is_harmful() {
                alpha_unsafe
            } else {
                alpha_safe
            }
        }
    }
}

/// Scaling grid for the alpha sweep.
pub const ALPHA_SWEEP: [f64; 8] = [0.05, 0.2, 0.5, 0.8, 1.0, 1.2, 1.5, 2.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenoiserParams, ModelConfig};
    use ndarray::array;

    fn tiny() -> DenoiserParams<f64> {
        DenoiserParams::init(ModelConfig::tiny(), 3).unwrap()
    }

    #[test]
    fn six_adapters_for_two_layers() {
        let mut cfg = ModelConfig::tiny();
        cfg.layers = 2;
        let p = DenoiserParams::<f32>::init(cfg, 0).unwrap();
        let set = attach_adapters(&p, &LoraConfig::default(), 0).unwrap();
        assert_eq!(set.len(), 6);
        assert!(set.adapters().iter().all(|a| a.b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn missing_site_is_an_injection_error() {
        let mut p = tiny();
        let mut store = crate::model::ParamStore::new();
        for (name, v) in p.store().iter() {
            if !name.contains("ffn.in") {
                store.insert(name, v.clone()).unwrap();
            }
        }
        *p.store_mut() = store;
        assert!(matches!(
            attach_adapters(&p, &LoraConfig::default(), 0),
            Err(Error::InjectionSite(_))
        ));
    }

    #[test]
    fn rank_one_increment() {
        let adapter = LoraAdapter {
            site: "s".into(),
            a: array![[1.0, 0.0]],
            b: array![[2.0], [0.0]],
            alpha: 1.0,
            dropout: 0.0,
        };
        assert_eq!(adapter.increment(), array![[2.0, 0.0], [0.0, 0.0]]);
        let set = LoraSet::from_adapters(vec![adapter]);
        let tv = extract_task_vector(&set);
        assert_eq!(tv, extract_task_vector(&set));
    }

    #[test]
    fn untrained_adapters_give_zero_vector() {
        let p = tiny();
        let set = attach_adapters(&p, &LoraConfig::default(), 1).unwrap();
        let tv = extract_task_vector(&set);
        assert_eq!(tv.sq_norm(), 0.0);
        let sites: Vec<_> = tv.sites().map(String::from).collect();
        let mut expected = injection_sites(p.config().layers);
        expected.sort();
        assert_eq!(sites, expected);
    }

    #[test]
    fn negate_zero_is_exact_copy_and_inverse_restores() {
        let p = tiny();
        let mut set = attach_adapters(&p, &LoraConfig::default(), 1).unwrap();
        for a in set.adapters_mut() {
            a.b.mapv_inplace(|_| 0.01);
        }
        let tv = extract_task_vector(&set);
        assert_eq!(negate(&p, &tv, 0.0).unwrap(), p);
        let there = negate(&p, &tv, 0.7).unwrap();
        let back = negate(&there, &tv.scaled(-1.0), 0.7).unwrap();
        for ((_, a), (_, b)) in back.store().iter().zip(p.store().iter()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn policies() {
        let g = NegationPolicy::Gated {
            alpha_safe: 0.05,
            alpha_unsafe: 2.0,
        };
        assert_eq!(apply_policy(ToxicityLevel::Unsafe, &g), 2.0);
        assert_eq!(apply_policy(ToxicityLevel::Risky, &g), 2.0);
        assert_eq!(apply_policy(ToxicityLevel::Safe, &g), 0.05);
        let s = NegationPolicy::Static { alpha: 1.0 };
        for l in [ToxicityLevel::Safe, ToxicityLevel::Risky, ToxicityLevel::Unsafe] {
            assert_eq!(apply_policy(l, &s), 1.0);
        }
        assert_eq!(NegationPolicy::parse("gated:0.05,2").unwrap(), g);
        assert_eq!(NegationPolicy::parse("static:1.0").unwrap(), s);
        assert!(NegationPolicy::parse("static:-1").is_err());
        assert!(NegationPolicy::parse("weird:1").is_err());
        assert_eq!(NegationPolicy::parse(&g.to_string()).unwrap(), g);
    }
}
