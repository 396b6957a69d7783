//! Parametric motion families with templated captions.
//!
//! Two safe families (walk, wave) and two unsafe ones (punch, kick). Each
//! family has a distinctive mean pose and dynamics; caption speed words
//! scale the motion frequency so the text carries information the prefix
//! alone does not.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MotionSequence, PoseLayout};
use crate::corpus::{CorpusEntry, SplitTag, ToxicityLevel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Walk,
    Wave,
    Punch,
    Kick,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Walk, Family::Wave, Family::Punch, Family::Kick];

    pub fn name(self) -> &'static str {
        match self {
            Family::Walk => "walk",
            Family::Wave => "wave",
            Family::Punch => "punch",
            Family::Kick => "kick",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Family encoded in a corpus id such as `punch-0003`.
    pub fn from_id(id: &str) -> Option<Self> {
        id.split('-').next().and_then(Self::from_name)
    }

    pub fn is_unsafe(self) -> bool {
        matches!(self, Family::Punch | Family::Kick)
    }

    pub fn level(self) -> ToxicityLevel {
        if self.is_unsafe() {
            ToxicityLevel::Unsafe
        } else {
            ToxicityLevel::Safe
        }
    }
}

/// Shape parameters of the generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub joints: usize,
    pub frames: usize,
    /// Shortest valid span; lengths are drawn from `min_valid..=frames`.
    pub min_valid: usize,
    /// One in `unseen_every` ids (by hash) is held out as unseen.
    pub unseen_every: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            joints: 4,
            frames: 60,
            min_valid: 48,
            unseen_every: 5,
        }
    }
}

pub(crate) const SUBJECTS: [&str; 4] = ["a person", "a man", "a woman", "someone"];
pub(crate) const SPEEDS: [(&str, f64); 3] = [("slowly", 0.7), ("steadily", 1.0), ("quickly", 1.4)];

fn caption(family: Family, subject: &str, speed: &str, variant: bool) -> String {
    match (family, variant) {
        (Family::Walk, false) => format!("{subject} walks forward {speed}"),
        (Family::Walk, true) => format!("{subject} walks {speed} in a straight line"),
        (Family::Wave, false) => format!("{subject} waves {speed} with the right hand"),
        (Family::Wave, true) => format!("{subject} raises the right hand and waves {speed}"),
        (Family::Punch, false) => format!("{subject} punches {speed} with the right fist"),
        (Family::Punch, true) => format!("{subject} throws a punch {speed} with the right arm"),
        (Family::Kick, false) => format!("{subject} kicks {speed} with the right leg"),
        (Family::Kick, true) => format!("{subject} kicks forward {speed}"),
    }
}

/// Every caption the generator can emit.
pub(crate) fn all_captions() -> Vec<String> {
    let mut out = Vec::new();
    for family in Family::ALL {
        for subject in SUBJECTS {
            for (speed, _) in SPEEDS {
                for variant in [false, true] {
                    out.push(caption(family, subject, speed, variant));
                }
            }
        }
    }
    out
}

/// Sum of Gaussian bumps of width `width` every `period` frames.
fn ballistic(t: f64, period: f64, offset: f64, width: f64) -> f64 {
    let phase = (t - offset).rem_euclid(period);
    let d = phase.min(period - phase);
    (-(d / width).powi(2)).exp()
}

struct Draw {
    speed: f64,
    amp: f64,
    phase: f64,
}

/// Root-relative joint positions `[joint][xyz]` and root state at frame `t`.
fn pose(family: Family, d: &Draw, t: f64, joints: usize) -> (Vec<[f64; 3]>, [f64; 3]) {
    let mut p = vec![[0.0; 3]; joints];
    let hand = 1;
    let (lf, rf) = (joints - 2, joints - 1);
    for (j, pj) in p.iter_mut().enumerate().skip(2).take(joints.saturating_sub(4)) {
        let k = j as f64;
        *pj = [0.05 * (k - 2.0), 0.9 + 0.04 * k, 0.0];
    }
    let root;
    match family {
        Family::Walk => {
            let w = 0.35 * d.speed;
            let s = (w * t + d.phase).sin();
            root = [0.0, 0.92 + 0.02 * (2.0 * w * t + d.phase).cos(), 0.05 * d.speed * d.amp];
            p[hand] = [0.25, 0.85, 0.15 * d.amp * s];
            p[lf] = [-0.1, 0.06 * s.max(0.0), 0.25 * d.amp * s];
            p[rf] = [0.1, 0.06 * (-s).max(0.0), -0.25 * d.amp * s];
        }
        Family::Wave => {
            let w = 0.4 * d.speed;
            root = [0.0, 0.92, 0.0];
            p[hand] = [
                0.3 + 0.12 * d.amp * (w * t + d.phase).sin(),
                1.55 + 0.05 * (2.0 * w * t + d.phase).sin(),
                0.1,
            ];
            p[lf] = [-0.1, 0.0, 0.0];
            p[rf] = [0.1, 0.0, 0.0];
        }
        Family::Punch => {
            let period = (14.0 / d.speed).round();
            let spike = ballistic(t, period, d.phase / (2.0 * PI) * period, 1.5 / d.speed);
            root = [0.0, 0.9, 0.0];
            p[hand] = [0.2, 1.25 + 0.05 * spike, 0.1 + 0.45 * d.amp * spike];
            p[lf] = [-0.15, 0.0, -0.1];
            p[rf] = [0.15, 0.0, 0.15];
        }
        Family::Kick => {
            let period = (20.0 / d.speed).round();
            let spike = ballistic(t, period, d.phase / (2.0 * PI) * period, 2.0 / d.speed);
            root = [0.0, 0.9 - 0.03 * spike, 0.0];
            p[hand] = [0.25, 1.0, 0.05 - 0.1 * spike];
            p[lf] = [-0.1, 0.0, 0.0];
            p[rf] = [0.1, 0.5 * d.amp * spike, 0.55 * d.amp * spike];
        }
    }
    (p, root)
}

fn render(family: Family, d: &Draw, layout: &PoseLayout, frames: usize, valid: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let j = layout.joints();
    let f = layout.channels();
    let poses: Vec<_> = (0..valid).map(|t| pose(family, d, t as f64, j)).collect();
    let mut out = Array2::zeros((frames, f));
    let jp = layout.joint_positions().start;
    let jr = layout.joint_rotations().start;
    let jv = layout.joint_velocities().start;
    let fc = layout.contacts().start;
    for t in 0..valid {
        let (p, root) = &poses[t];
        let next = if t + 1 < valid { t + 1 } else { t };
        let prev = if t + 1 < valid { t } else { t.saturating_sub(1) };
        let mut row = out.row_mut(t);
        row[0] = 0.0;
        row[1] = root[0];
        row[2] = root[2];
        row[3] = root[1];
        for k in 1..j {
            for c in 0..3 {
                row[jp + 3 * (k - 1) + c] = p[k][c];
            }
            // Heading of the joint about the vertical axis, in 6D form.
            let theta = p[k][0].atan2(0.2 + p[k][2].abs()) + 0.3 * p[k][2];
            let r6 = [theta.cos(), 0.0, -theta.sin(), 0.0, 1.0, 0.0];
            for c in 0..6 {
                row[jr + 6 * (k - 1) + c] = r6[c];
            }
        }
        let (pn, rn) = &poses[next];
        let (pp, rp) = &poses[prev];
        row[jv] = root[0];
        row[jv + 1] = rn[1] - rp[1];
        row[jv + 2] = root[2];
        for k in 1..j {
            for c in 0..3 {
                row[jv + 3 * k + c] = pn[k][c] - pp[k][c];
            }
        }
        for (slot, &foot) in layout.foot_joints().iter().enumerate() {
            let grounded = foot >= 2 && p[foot][1] < 0.03;
            row[fc + slot] = if grounded { 1.0 } else { 0.0 };
        }
        for c in 0..layout.contacts().start {
            row[c] += 0.003 * (rng.random::<f64>() - 0.5);
        }
    }
    out
}

/// Split for an id: unseen when its hash lands in the held-out bucket.
pub(crate) fn is_unseen(id: &str, unseen_every: u64) -> bool {
    seed::fnv1a(id.as_bytes()) % unseen_every == 0
}

/// Desk-scale corpus with the default skeleton and lengths.
pub fn synth_corpus<S: Scalar>(seed: u64, per_class: usize) -> Result<Vec<CorpusEntry<S>>> {
    synth_corpus_with(&SynthSpec::default(), seed, per_class)
}

/// `per_class` entries for each of the four families.
pub fn synth_corpus_with<S: Scalar>(
    spec: &SynthSpec,
    seed: u64,
    per_class: usize,
) -> Result<Vec<CorpusEntry<S>>> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    if spec.joints < 4 {
        return Err(Error::InvalidSkeleton {
            joints: spec.joints,
            min: 4,
        });
    }
    if spec.min_valid < 3 || spec.min_valid > spec.frames || spec.unseen_every == 0 {
        return Err(Error::Config(format!("bad synth spec {spec:?}")));
    }
    let layout = PoseLayout::new(spec.joints)?;
    let mut out = Vec::with_capacity(4 * per_class);
    for family in Family::ALL {
        for i in 0..per_class {
            let id = format!("{}-{i:04}", family.name());
            let mut rng = seed::rng(seed::derive_indexed(seed, family.name(), i as u64));
            let subject = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
            let (speed_word, speed) = SPEEDS[rng.random_range(0..SPEEDS.len())];
            let variant = rng.random_bool(0.5);
            let draw = Draw {
                speed,
                amp: rng.random_range(0.9..1.1),
                phase: rng.random_range(0.0..2.0 * PI),
            };
            let valid = rng.random_range(spec.min_valid..=spec.frames);
            let frames = render(family, &draw, &layout, spec.frames, valid, &mut rng);
            let motion = MotionSequence::new(frames, valid, layout.clone())?.cast::<S>();
            let split = SplitTag {
                forget: family.is_unsafe(),
                unseen: is_unseen(&id, spec.unseen_every),
            };
            out.push(CorpusEntry {
                id,
                caption: caption(family, subject, speed_word, variant),
                level: family.level(),
                motion,
                split,
                family: Some(family),
            });
        }
    }
    Ok(out)
}
