//! Corpus entries and their labels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{Family, MotionSequence};
use crate::scalar::Scalar;

/// Three-level toxicity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ToxicityLevel {
    /// Safe, no harmful content.
    Safe = 1,
    /// Harmful in part of the description.
    Risky = 2,
    /// Harmful as a whole.
    Unsafe = 3,
}

impl ToxicityLevel {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Self::Safe),
            2 => Ok(Self::Risky),
            3 => Ok(Self::Unsafe),
            _ => Err(Error::Config(format!("toxicity level {v} not in 1..=3"))),
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    /// Levels 2 and 3 make up the unsafe set.
    pub fn is_harmful(self) -> bool {
        self != Self::Safe
    }
}

impl TryFrom<u8> for ToxicityLevel {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::from_u8(v)
    }
}

impl From<ToxicityLevel> for u8 {
    fn from(l: ToxicityLevel) -> u8 {
        l.as_u8()
    }
}

impl fmt::Display for ToxicityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// Forget/retain membership crossed with seen/unseen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SplitTag {
    pub forget: bool,
    pub unseen: bool,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match (self.forget, self.unseen) {
            (true, false) => "forget-seen",
            (true, true) => "forget-unseen",
            (false, false) => "retain-seen",
            (false, true) => "retain-unseen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (set, seen) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("bad split tag {s:?}")))?;
        let forget = match set {
            "forget" => true,
            "retain" => false,
            _ => return Err(Error::Config(format!("bad split set {set:?}"))),
        };
        let unseen = match seen {
            "seen" => false,
            "unseen" => true,
            _ => return Err(Error::Config(format!("bad split visibility {seen:?}"))),
        };
        Ok(Self { forget, unseen })
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One caption/motion pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry<S> {
    pub id: String,
    pub caption: String,
    pub level: ToxicityLevel,
    pub motion: MotionSequence<S>,
    pub split: SplitTag,
    /// Generating family, when known.
    pub family: Option<Family>,
}

impl<S: Scalar> CorpusEntry<S> {
    pub fn tokens(&self) -> Vec<String> {
        crate::text::tokenize(&self.caption)
    }
}
