//! Request and response bodies.

use std::sync::Arc;

use affectgen_core::eval::intensity_score;
use affectgen_core::lexicon::{builtin_topic_words, AffectBag, EmotionCategory, Lexicon, TopicBag};
use affectgen_core::loss::{ControlConfig, LossBreakdown, DEFAULT_KNOB, DEFAULT_VARIANCE};
use affectgen_core::steer::{GenerationRecord, SamplerSettings, SamplingMode};
use affectgen_core::{LanguageModel, TokenId};
use serde::{Deserialize, Serialize};

/// Version of the JSON bodies served by this crate.
pub const API_SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_LENGTH: usize = 20;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightOverrides {
    pub kl_scale: Option<f64>,
    pub topic_scale: Option<f64>,
    pub affect_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default)]
    pub emotion: Option<String>,
    #[serde(default)]
    pub knob: Option<f64>,
    #[serde(default)]
    pub variance: Option<f64>,
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub weights: Option<WeightOverrides>,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub gd_iterations: Option<usize>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub greedy: bool,
    #[serde(default)]
    pub stream: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub errors: Vec<FieldError>,
}

/// A validated request, ready to run.
pub struct Job {
    pub prompt: String,
    pub length: usize,
    pub config: ControlConfig,
    pub sampler: SamplerSettings,
    pub emotion: Option<EmotionCategory>,
    pub stream: bool,
}

impl GenerateRequest {
    /// Checks every field and resolves bags against the model vocabulary.
    /// All problems are reported at once.
    pub fn validate(
        &self,
        model: &dyn LanguageModel,
        lexicon: &Lexicon,
        max_length: usize,
        default_seed: u64,
    ) -> Result<Job, Vec<FieldError>> {
        let mut errors = Vec::new();
        let vocab = model.vocabulary();

        if self.prompt.trim().is_empty() || vocab.encode(&self.prompt).is_empty() {
            errors.push(FieldError::new("prompt", "must contain at least one token"));
        }
        let emotion = match self.emotion.as_deref() {
            None => None,
            Some(name) => match name.parse::<EmotionCategory>() {
                Ok(e) => Some(e),
                Err(e) => {
                    errors.push(FieldError::new("emotion", e.to_string()));
                    None
                }
            },
        };
        let knob = self.knob.unwrap_or(DEFAULT_KNOB);
        if !(0.0..=1.0).contains(&knob) {
            errors.push(FieldError::new("knob", format!("{knob} is outside [0, 1]")));
        }
        let variance = self.variance.unwrap_or(DEFAULT_VARIANCE);
        if !(variance > 0.0 && variance.is_finite()) {
            errors.push(FieldError::new("variance", "must be a positive number"));
        }
        let length = self.length.unwrap_or(DEFAULT_LENGTH);
        if length == 0 || length > max_length {
            errors.push(FieldError::new(
                "length",
                format!("must lie in [1, {max_length}], got {length}"),
            ));
        }

        let mut config = ControlConfig {
            knob,
            variance,
            ..Default::default()
        };
        if let Some(w) = &self.weights {
            for (field, value, slot) in [
                ("weights.kl_scale", w.kl_scale, &mut config.weights.kl_scale),
                ("weights.topic_scale", w.topic_scale, &mut config.weights.topic_scale),
                ("weights.affect_scale", w.affect_scale, &mut config.weights.affect_scale),
            ] {
                if let Some(v) = value {
                    if v >= 0.0 && v.is_finite() {
                        *slot = v;
                    } else {
                        errors.push(FieldError::new(field, "must be a non-negative number"));
                    }
                }
            }
        }
        if let Some(eta) = self.step_size {
            if eta >= 0.0 && eta.is_finite() {
                config.step_size = eta;
            } else {
                errors.push(FieldError::new("step_size", "must be a non-negative number"));
            }
        }
        if let Some(n) = self.gd_iterations {
            if (1..=50).contains(&n) {
                config.gd_iterations = n;
            } else {
                errors.push(FieldError::new("gd_iterations", "must lie in [1, 50]"));
            }
        }

        let mut sampler = SamplerSettings {
            seed: self.seed.unwrap_or(default_seed),
            ..Default::default()
        };
        if self.greedy {
            sampler.mode = SamplingMode::Greedy;
        }
        if let Some(k) = self.top_k {
            if k == 0 {
                errors.push(FieldError::new("top_k", "must be at least 1"));
            } else {
                sampler.k = k;
            }
        }
        if let Some(t) = self.temperature {
            if t > 0.0 && t.is_finite() {
                sampler.temperature = t;
            } else {
                errors.push(FieldError::new("temperature", "must be positive"));
            }
        }

        if let Some(e) = emotion {
            match AffectBag::build(lexicon, e, vocab) {
                Ok(bag) => config.affect = Some(Arc::new(bag)),
                Err(err) => errors.push(FieldError::new("emotion", err.to_string())),
            }
        }
        if let Some(name) = self.topic.as_deref() {
            // Only built-in topics: the service never reads client-named files.
            match builtin_topic_words(name) {
                Some(words) => match TopicBag::from_words(name, words, vocab) {
                    Ok(bag) => config.topic = Some(Arc::new(bag)),
                    Err(err) => errors.push(FieldError::new("topic", err.to_string())),
                },
                None => errors.push(FieldError::new("topic", format!("unknown topic {name:?}"))),
            }
        }

        if errors.is_empty() {
            Ok(Job {
                prompt: self.prompt.clone(),
                length,
                config,
                sampler,
                emotion,
                stream: self.stream,
            })
        } else {
            Err(errors)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub schema_version: u32,
    pub model_id: String,
    pub prompt: String,
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub token_texts: Vec<String>,
    pub losses: Vec<LossBreakdown>,
    pub kl: Vec<f64>,
    pub mean_kl: f64,
    pub flagged_steps: Vec<usize>,
    /// Lexicon intensity of the output for the requested emotion.
    pub intensity_score: Option<f64>,
    pub intensity_matches: Option<usize>,
    pub seed: u64,
    pub duration_ms: u64,
}

impl GenerateResponse {
    pub fn from_record(record: &GenerationRecord, emotion: Option<EmotionCategory>, lexicon: &Lexicon) -> Self {
        let score = emotion.map(|e| intensity_score(&record.text, e, lexicon));
        Self {
            schema_version: API_SCHEMA_VERSION,
            model_id: record.model_id.clone(),
            prompt: record.prompt.clone(),
            text: record.text.clone(),
            tokens: record.tokens.clone(),
            token_texts: record.token_texts.clone(),
            losses: record.losses.clone(),
            kl: record.kl.clone(),
            mean_kl: record.mean_kl(),
            flagged_steps: record.flagged_steps.clone(),
            intensity_score: score.map(|s| s.score),
            intensity_matches: score.map(|s| s.matched),
            seed: record.seed,
            duration_ms: record.duration_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub schema_version: u32,
    pub ready: bool,
    pub model_id: Option<String>,
    pub emotions: Vec<String>,
    pub topics: Vec<String>,
    pub knob: Bounds,
    pub variance: Bounds,
    pub max_length: usize,
    pub defaults: MetaDefaults,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDefaults {
    pub knob: f64,
    pub variance: f64,
    pub length: usize,
}
