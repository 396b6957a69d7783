//! Pose representation, masked motion sequences and the sequence-level
//! decoupling transforms.
//!
//! A pose vector follows the HumanML3D channel layout: root angular
//! velocity, root planar velocity (x, z), root height, local joint
//! positions, 6D joint rotations, joint velocities and four foot-contact
//! labels.

mod io;
pub(crate) mod synth;

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TextCondition;
use crate::scalar::Scalar;

pub use io::{load_corpus, load_motion, save_corpus, save_motion, ManifestRecord};
pub use synth::{synth_corpus, synth_corpus_with, Family, SynthSpec};

/// Joint indices HumanML3D uses for the ankles and toes.
const HUMANML3D_FEET: [usize; 4] = [7, 10, 8, 11];

/// Channel map of a pose vector for a skeleton with `joints` joints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseLayout {
    joints: usize,
    foot_joints: Vec<usize>,
}

impl PoseLayout {
    pub fn new(joints: usize) -> Result<Self> {
        if joints < 2 {
            return Err(Error::InvalidSkeleton { joints, min: 2 });
        }
        let foot_joints = match joints {
            22 => HUMANML3D_FEET.to_vec(),
            j if j >= 4 => (j - 4..j).collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            joints,
            foot_joints,
        })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Total channel count F.
    pub fn channels(&self) -> usize {
        let j = self.joints;
        1 + 2 + 1 + 3 * (j - 1) + 6 * (j - 1) + 3 * j + 4
    }

    pub fn root_angular(&self) -> Range<usize> {
        0..1
    }

    /// Root planar channels: x at the start, z after it.
    pub fn root_planar(&self) -> Range<usize> {
        1..3
    }

    pub fn root_height(&self) -> Range<usize> {
        3..4
    }

    pub fn joint_positions(&self) -> Range<usize> {
        4..4 + 3 * (self.joints - 1)
    }

    pub fn joint_rotations(&self) -> Range<usize> {
        let start = self.joint_positions().end;
        start..start + 6 * (self.joints - 1)
    }

    pub fn joint_velocities(&self) -> Range<usize> {
        let start = self.joint_rotations().end;
        start..start + 3 * self.joints
    }

    pub fn contacts(&self) -> Range<usize> {
        let start = self.joint_velocities().end;
        start..start + 4
    }

    /// All spans in channel order.
    pub fn spans(&self) -> [Range<usize>; 7] {
        [
            self.root_angular(),
            self.root_planar(),
            self.root_height(),
            self.joint_positions(),
            self.joint_rotations(),
            self.joint_velocities(),
            self.contacts(),
        ]
    }

    pub fn foot_joints(&self) -> &[usize] {
        &self.foot_joints
    }

    /// Position channels (x, y, z) of joint `j`. The root has no entry in
    /// the local position block, so its translation channels stand in.
    pub fn joint_position_channels(&self, j: usize) -> [usize; 3] {
        assert!(j < self.joints, "joint {j} out of range");
        if j == 0 {
            [1, 3, 2]
        } else {
            let base = 4 + 3 * (j - 1);
            [base, base + 1, base + 2]
        }
    }

    /// Position channels of the foot joints, three per joint.
    pub fn foot_channels(&self) -> Vec<usize> {
        self.foot_joints
            .iter()
            .flat_map(|&j| self.joint_position_channels(j))
            .collect()
    }
}

/// Builds the layout for a skeleton with `joints` joints.
pub fn pose_layout(joints: usize) -> Result<PoseLayout> {
    PoseLayout::new(joints)
}

/// A `T x F` motion with a prefix validity mask.
///
/// Only the first `valid` frames carry data; the tail is padding.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence<S> {
    frames: Array2<S>,
    valid: usize,
    layout: PoseLayout,
}

impl<S: Scalar> MotionSequence<S> {
    /// Wraps `frames` with the first `valid` frames marked valid.
    pub fn new(frames: Array2<S>, valid: usize, layout: PoseLayout) -> Result<Self> {
        if frames.ncols() != layout.channels() {
            return Err(Error::InvalidMotion(format!(
                "{} channels, layout expects {}",
                frames.ncols(),
                layout.channels()
            )));
        }
        if valid > frames.nrows() {
            return Err(Error::InvalidMotion(format!(
                "valid length {valid} exceeds {} frames",
                frames.nrows()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMotion("non-finite frame value".into()));
        }
        Ok(Self {
            frames,
            valid,
            layout,
        })
    }

    /// Trusted constructor for model outputs; skips the finiteness scan so
    /// divergence is reported by the losses instead.
    pub(crate) fn from_raw(frames: Array2<S>, valid: usize, layout: PoseLayout) -> Self {
        debug_assert!(valid <= frames.nrows() && frames.ncols() == layout.channels());
        Self {
            frames,
            valid,
            layout,
        }
    }

    /// Wraps `frames` with an explicit boolean mask, which must be a prefix mask.
    pub fn with_mask(frames: Array2<S>, mask: &[bool], layout: PoseLayout) -> Result<Self> {
        if mask.len() != frames.nrows() {
            return Err(Error::InvalidMotion(format!(
                "mask has {} entries for {} frames",
                mask.len(),
                frames.nrows()
            )));
        }
        let valid = mask.iter().take_while(|m| **m).count();
        if mask[valid..].iter().any(|m| *m) {
            return Err(Error::InvalidMotion("mask is not a prefix mask".into()));
        }
        Self::new(frames, valid, layout)
    }

    /// All-zero sequence of `frames` frames, all valid.
    pub fn zeros(frames: usize, layout: PoseLayout) -> Self {
        let f = layout.channels();
        Self {
            frames: Array2::zeros((frames, f)),
            valid: frames,
            layout,
        }
    }

    pub fn frames(&self) -> &Array2<S> {
        &self.frames
    }

    /// Mutable access for in-place edits; callers must keep values finite.
    pub fn frames_mut(&mut self) -> &mut Array2<S> {
        &mut self.frames
    }

    pub fn into_frames(self) -> Array2<S> {
        self.frames
    }

    pub fn valid_frames(&self) -> ArrayView2<'_, S> {
        self.frames.slice(s![..self.valid, ..])
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn valid_len(&self) -> usize {
        self.valid
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.len()).map(|t| t < self.valid).collect()
    }

    pub fn layout(&self) -> &PoseLayout {
        &self.layout
    }

    pub fn channels(&self) -> usize {
        self.frames.ncols()
    }

    /// Converts to another scalar type.
    pub fn cast<T: Scalar>(&self) -> MotionSequence<T> {
        MotionSequence {
            frames: self.frames.mapv(|v| T::lit(v.as_f64())),
            valid: self.valid,
            layout: self.layout.clone(),
        }
    }

    /// Same shape, mask and layout with new frame data.
    pub fn with_frames(&self, frames: Array2<S>) -> Result<Self> {
        if frames.dim() != self.frames.dim() {
            return Err(Error::InvalidMotion(format!(
                "shape {:?} does not match {:?}",
                frames.dim(),
                self.frames.dim()
            )));
        }
        Self::new(frames, self.valid, self.layout.clone())
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.frames.dim() != other.frames.dim() || self.valid != other.valid {
            return Err(Error::InvalidMotion(format!(
                "shape/mask mismatch: {:?}/{} vs {:?}/{}",
                self.frames.dim(),
                self.valid,
                other.frames.dim(),
                other.valid
            )));
        }
        Ok(())
    }
}

/// Sequence-level perturbation used to decouple a motion from its prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoupleMode {
    SegmentShuffle,
    TimeReverse,
}

impl DecoupleMode {
    /// Uniform choice between the two modes.
    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        if rng.random_bool(0.5) {
            DecoupleMode::SegmentShuffle
        } else {
            DecoupleMode::TimeReverse
        }
    }
}

/// Number of segments the valid span is cut into for shuffling.
pub const SHUFFLE_SEGMENTS: usize = 4;

/// Lexicographic permutations of `0..k`; index 0 is the identity.
pub(crate) fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..rest.len() {
            let v = rest.remove(i);
            prefix.push(v);
            rec(prefix, rest, out);
            prefix.pop();
            rest.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..k).collect(), &mut out);
    out
}

/// Boundaries of `k` near-equal segments covering `0..n`; earlier segments
/// take the remainder.
pub(crate) fn segment_bounds(n: usize, k: usize) -> Vec<Range<usize>> {
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    (0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Segment order chosen by [`decouple`] in shuffle mode for a given seed.
pub fn shuffle_order(valid: usize, seed: u64) -> Vec<usize> {
    let k = SHUFFLE_SEGMENTS.min(valid);
    let perms = permutations(k);
    let mut rng = crate::seed::rng(seed);
    let idx = rng.random_range(1..perms.len());
    perms[idx].clone()
}

/// Shuffles segments of, or reverses, the valid span. Padding and mask are
/// left untouched.
pub fn decouple<S: Scalar>(
    x: &MotionSequence<S>,
    mode: DecoupleMode,
    seed: u64,
) -> Result<MotionSequence<S>> {
    let n = x.valid_len();
    if n < 2 {
        return Err(Error::DecoupleDegenerate { valid: n });
    }
    let mut out = x.frames.clone();
    match mode {
        DecoupleMode::TimeReverse => {
            for t in 0..n {
                out.row_mut(t).assign(&x.frames.row(n - 1 - t));
            }
        }
        DecoupleMode::SegmentShuffle => {
            let order = shuffle_order(n, seed);
            let bounds = segment_bounds(n, order.len());
            let mut dst = 0;
            for &seg in &order {
                for t in bounds[seg].clone() {
                    out.row_mut(dst).assign(&x.frames.row(t));
                    dst += 1;
                }
            }
        }
    }
    Ok(MotionSequence {
        frames: out,
        valid: n,
        layout: x.layout.clone(),
    })
}

/// Replaces the motion prefix of `cond` with the first `prefix_len` frames
/// of `target`; text tokens are kept.
pub fn sync_prefix<S: Scalar>(
    cond: &TextCondition<S>,
    target: &MotionSequence<S>,
    prefix_len: usize,
) -> Result<TextCondition<S>> {
    if prefix_len > target.valid_len() {
        return Err(Error::PrefixTooLong {
            prefix: prefix_len,
            valid: target.valid_len(),
        });
    }
    let mut out = cond.clone();
    out.prefix = target.frames.slice(s![..prefix_len, ..]).to_owned();
    Ok(out)
}
