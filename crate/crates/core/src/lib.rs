//! Selective unlearning for a text-to-motion diffusion denoiser.
//!
//! Harmful behaviour is first absorbed into low-rank adapters trained on
//! the frozen base model ([`unlearn::absorb`]). The adapters' dense task
//! vector is then subtracted from the base at inference, scaled per prompt
//! by a [`lora::NegationPolicy`] that can depend on the prompt's toxicity
//! level ([`safety::classify`]).
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the scalar for the common cases.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod lora;
pub mod losses;
pub mod model;
pub mod motion;
pub mod optim;
pub mod pipeline;
pub mod safety;
pub mod scalar;
pub mod seed;
pub mod text;
pub mod unlearn;

pub use corpus::{CorpusEntry, SplitTag, ToxicityLevel};
pub use error::{Error, Result};
pub use lora::{LoraConfig, LoraSet, NegationPolicy, TaskVector};
pub use losses::LossWeights;
pub use model::{Denoiser, DenoiserParams, DiffusionSchedule, ModelConfig};
pub use motion::{MotionSequence, PoseLayout};
pub use scalar::Scalar;
pub use unlearn::{absorb, negate_and_sample, Stage1Config};

pub type MotionSequenceF32 = MotionSequence<f32>;
pub type MotionSequenceF64 = MotionSequence<f64>;
pub type CorpusEntryF32 = CorpusEntry<f32>;
pub type CorpusEntryF64 = CorpusEntry<f64>;
pub type DenoiserParamsF32 = DenoiserParams<f32>;
pub type DenoiserParamsF64 = DenoiserParams<f64>;
pub type TaskVectorF32 = TaskVector<f32>;
pub type TaskVectorF64 = TaskVector<f64>;
pub type LoraSetF32 = LoraSet<f32>;
pub type LoraSetF64 = LoraSet<f64>;
