//! Decode-time steering of autoregressive language models toward a target
//! emotion at a chosen intensity, optionally combined with a topic.
//!
//! Steering perturbs the model's cached key/value history at every step by
//! a few gradient steps on a weighted objective (see [`loss`]), then samples
//! from the resulting distribution (see [`steer`]).

pub mod corpus;
pub mod error;
pub mod eval;
pub mod lexicon;
pub mod loss;
pub mod model;
pub mod steer;
pub mod vocab;

pub use error::{Error, Result};
pub use lexicon::{AffectBag, EmotionCategory, Lexicon, LexiconEntry, SubtokenProjection, TopicBag};
pub use loss::{ControlConfig, ControlSnapshot, GradientScaling, LossBreakdown, LossWeights};
pub use model::{HistoryState, LanguageModel, Perturbation, ReferenceLm, ReferenceLmConfig, StepOutput};
pub use steer::{generate, GenerationRecord, Sampler, SamplerSettings, SamplingMode};
pub use vocab::{TokenId, TokenizerVocabulary, VocabKind};
