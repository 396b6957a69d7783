//! First-order optimizers over lists of arrays, and global-norm clipping.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Gradient descent, optionally with heavy-ball momentum.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }

    /// `sgd`, `momentum:<beta>` or `adam`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "sgd" | "gd" => Ok(Self::sgd()),
            "adam" => Ok(Self::adam()),
            _ => {
                let beta = s
                    .strip_prefix("momentum:")
                    .and_then(|b| b.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown optimizer {s:?}")))?;
                if !(0.0..1.0).contains(&beta) {
                    return Err(Error::Config(format!("momentum {beta} not in [0, 1)")));
                }
                Ok(OptimizerKind::Sgd { momentum: beta })
            }
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimizerKind::Sgd { momentum } if *momentum == 0.0 => write!(f, "sgd"),
            OptimizerKind::Sgd { momentum } => write!(f, "momentum:{momentum}"),
            OptimizerKind::Adam { .. } => write!(f, "adam"),
        }
    }
}

/// Optimizer state aligned with a fixed list of parameter arrays.
#[derive(Debug, Clone)]
pub struct Optimizer<S> {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<Array2<S>>,
    v: Vec<Array2<S>>,
    steps: u64,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, lr: f64, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let m: Vec<Array2<S>> = shapes.into_iter().map(Array2::zeros).collect();
        let v = match kind {
            OptimizerKind::Adam { .. } => m.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            lr,
            m,
            v,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update; `params` and `grads` follow the construction order.
    pub fn step<'p, 'g>(
        &mut self,
        params: impl IntoIterator<Item = &'p mut Array2<S>>,
        grads: impl IntoIterator<Item = &'g Array2<S>>,
    ) where
        S: 'p + 'g,
    {
        self.steps += 1;
        let lr = S::lit(self.lr);
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = S::lit(momentum);
                for ((p, g), m) in params.into_iter().zip(grads).zip(&mut self.m) {
                    if momentum == 0.0 {
                        Zip::from(p).and(g).for_each(|p, &g| *p -= lr * g);
                    } else {
                        Zip::from(p).and(m).and(g).for_each(|p, m, &g| {
                            *m = mu * *m + g;
                            *p -= lr * *m;
                        });
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, e) = (S::lit(beta1), S::lit(beta2), S::lit(eps));
                let c1 = S::lit(1.0 / (1.0 - beta1.powi(self.steps as i32)));
                let c2 = S::lit(1.0 / (1.0 - beta2.powi(self.steps as i32)));
                let one = S::one();
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *p -= lr * (*m * c1) / ((*v * c2).sqrt() + e);
                    });
                }
            }
        }
    }
}

/// Factor that brings a gradient of norm `norm` down to at most `max_norm`.
pub fn clip_factor(norm: f64, max_norm: Option<f64>) -> f64 {
    match max_norm {
        Some(c) if norm > c && norm > 0.0 => c / norm,
        _ => 1.0,
    }
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Array2<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let c = clip_factor(norm, Some(max_norm));
    if c < 1.0 {
        for g in grads {
            *g *= S::lit(c);
        }
    }
    norm
}
