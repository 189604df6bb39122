//! The per-token steering loop.
//!
//! For every emitted token the engine evaluates the unperturbed next-token
//! distribution, runs `gd_iterations` gradient steps on an additive
//! perturbation of the key/value history, re-runs the forward pass from the
//! perturbed history and samples from the result. The perturbation starts at
//! zero for every token.

use std::ops::ControlFlow;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{kld_loss, ControlConfig, ControlSnapshot, GradientScaling, LossBreakdown, Objective};
use crate::model::{softmax, truncation_keep, HistoryState, LanguageModel, Perturbation, StepOutput};
use crate::vocab::{join_tokens, TokenId};

/// Version of the serialized [`GenerationRecord`] layout.
pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Greedy,
    #[default]
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub mode: SamplingMode,
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            mode: SamplingMode::TopK,
            k: 10,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplerSettings {
    pub fn greedy() -> Self {
        Self {
            mode: SamplingMode::Greedy,
            ..Default::default()
        }
    }

    pub fn top_k(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(
                "temperature",
                format!("{} must be positive", self.temperature),
            ));
        }
        Ok(())
    }
}

/// Token sampler with its own random stream.
///
/// The stream is selected by `(settings.seed, session)`, so concurrent
/// sessions sharing a seed still draw independent values. Top-k sampling
/// consumes exactly one uniform draw per token; greedy consumes none.
#[derive(Debug, Clone)]
pub struct Sampler {
    settings: SamplerSettings,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(settings: SamplerSettings, session: u64) -> Result<Self> {
        settings.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(session);
        Ok(Self { settings, rng })
    }

    pub fn settings(&self) -> &SamplerSettings {
        &self.settings
    }

    pub fn sample(&mut self, p: &[f64]) -> TokenId {
        match self.settings.mode {
            SamplingMode::Greedy => argmax(p),
            SamplingMode::TopK => {
                let u: f64 = self.rng.random();
                top_k_pick(p, self.settings.k, self.settings.temperature, u)
            }
        }
    }
}

/// Highest-probability index; ties go to the lowest index.
fn argmax(p: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best as TokenId
}

fn top_k_pick(p: &[f64], k: usize, temperature: f64, u: f64) -> TokenId {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order.truncate(k.min(p.len()));
    let top = p[order[0]];
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| {
            if p[i] > 0.0 {
                ((p[i] / top).ln() / temperature).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (&i, &w) in order.iter().zip(&weights) {
        acc += w;
        if target < acc {
            return i as TokenId;
        }
    }
    // Only reachable through rounding at u close to 1.
    *order
        .iter()
        .zip(&weights)
        .rev()
        .find(|(_, &w)| w > 0.0)
        .map(|(i, _)| i)
        .unwrap_or(&order[0]) as TokenId
}

/// Result of perturbing the history for one token.
#[derive(Debug, Clone)]
pub struct PerturbOutcome {
    /// `H + Δ`, or `H` when nothing is steered or the step was flagged.
    pub history: HistoryState,
    pub perturbation: Perturbation,
    /// Objective at `Δ = 0`.
    pub initial: LossBreakdown,
    /// Objective at the final `Δ`.
    pub loss: LossBreakdown,
    /// Next-token distribution from the perturbed history.
    pub probabilities: Vec<f64>,
    /// Forward pass from the unperturbed history.
    pub unperturbed: StepOutput,
    /// A non-finite value aborted the descent.
    pub flagged: bool,
}

/// Runs the gradient descent on the history perturbation for `token`.
pub fn perturb_history<M: LanguageModel + ?Sized>(
    model: &M,
    token: TokenId,
    history: &HistoryState,
    config: &ControlConfig,
) -> Result<PerturbOutcome> {
    config.validate()?;
    let unperturbed = model.forward(token, history)?;
    let p = softmax(&unperturbed.logits);
    let unchanged = |unperturbed: StepOutput, initial: LossBreakdown, flagged: bool| PerturbOutcome {
        history: history.clone(),
        perturbation: history.zero_perturbation(),
        initial,
        loss: initial,
        probabilities: p.clone(),
        unperturbed,
        flagged,
    };
    if !config.steers() {
        return Ok(unchanged(unperturbed, LossBreakdown::ZERO, false));
    }
    let objective = Objective::new(config, &p)?;
    let initial = match objective.breakdown(&p) {
        Ok(b) => b,
        Err(Error::NonFinite { .. }) => return Ok(unchanged(unperturbed, LossBreakdown::ZERO, true)),
        Err(e) => return Err(e),
    };
    if config.step_size == 0.0 || history.is_empty() {
        return Ok(unchanged(unperturbed, initial, false));
    }

    let window_start = config.window.map_or(0, |w| history.len().saturating_sub(w));
    let mut delta = history.zero_perturbation();
    for _ in 0..config.gd_iterations {
        let mut grad = match model.loss_gradient(history, &delta, token, &objective) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => return Ok(unchanged(unperturbed, initial, true)),
            Err(e) => return Err(e),
        };
        grad.clear_before(window_start);
        if config.gradient_scaling == GradientScaling::PerTensorNorm {
            grad.normalize_per_tensor();
        }
        delta.axpy(-config.step_size, &grad)?;
    }
    if !delta.all_finite() {
        return Ok(unchanged(unperturbed, initial, true));
    }

    let perturbed = history.perturbed(&delta)?;
    let probabilities = softmax(&model.forward(token, &perturbed)?.logits);
    let loss = match objective.breakdown(&probabilities) {
        Ok(b) if probabilities.iter().all(|x| x.is_finite()) => b,
        Ok(_) | Err(Error::NonFinite { .. }) => return Ok(unchanged(unperturbed, initial, true)),
        Err(e) => return Err(e),
    };
    Ok(PerturbOutcome {
        history: perturbed,
        perturbation: delta,
        initial,
        loss,
        probabilities,
        unperturbed,
        flagged: false,
    })
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub token: TokenId,
    /// History extended by the consumed input token.
    pub next_history: HistoryState,
    pub loss: LossBreakdown,
    pub initial_total: f64,
    /// Realized `KL(p' || p)` in nats.
    pub kl: f64,
    pub flagged: bool,
}

/// Consumes `token`, steers the next-token distribution and samples from it.
pub fn step<M: LanguageModel + ?Sized>(
    model: &M,
    token: TokenId,
    history: &HistoryState,
    config: &ControlConfig,
    sampler: &mut Sampler,
) -> Result<StepOutcome> {
    let out = perturb_history(model, token, history, config)?;
    let p = softmax(&out.unperturbed.logits);
    let kl = kld_loss(&out.probabilities, &p, config.epsilon_floor)?;
    let sampled = sampler.sample(&out.probabilities);
    let next_history = if config.carry_perturbed_history && !out.perturbation.is_zero() {
        model.forward(token, &out.history)?.next_history
    } else {
        out.unperturbed.next_history
    };
    Ok(StepOutcome {
        token: sampled,
        next_history,
        loss: out.loss,
        initial_total: out.initial.total,
        kl,
        flagged: out.flagged,
    })
}

/// Full trace of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub schema_version: u32,
    pub model_id: String,
    pub prompt: String,
    pub prompt_tokens: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub token_texts: Vec<String>,
    /// Surface text of the emitted continuation.
    pub text: String,
    pub losses: Vec<LossBreakdown>,
    /// Objective total at zero perturbation, per step.
    pub initial_losses: Vec<f64>,
    pub kl: Vec<f64>,
    /// Steps whose descent was abandoned on a non-finite value.
    pub flagged_steps: Vec<usize>,
    /// Steps before which the history was re-encoded to fit the context.
    pub truncated_at: Vec<usize>,
    pub config: ControlSnapshot,
    pub sampler: SamplerSettings,
    pub seed: u64,
    /// Wall-clock time; left out of the JSON so records are reproducible.
    #[serde(skip)]
    pub duration_ms: u64,
}

impl GenerationRecord {
    pub fn mean_kl(&self) -> f64 {
        if self.kl.is_empty() {
            0.0
        } else {
            self.kl.iter().sum::<f64>() / self.kl.len() as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// One emitted token, reported while a generation is running.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepEvent {
    pub index: usize,
    pub token: TokenId,
    pub text: String,
    pub loss_total: f64,
    pub kl: f64,
    pub flagged: bool,
}

pub fn generate<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &str,
    length: usize,
    config: &ControlConfig,
    sampler: SamplerSettings,
) -> Result<GenerationRecord> {
    generate_session(model, prompt, length, config, sampler, 0, |_| ControlFlow::Continue(()))
}

/// Like [`generate`], with an explicit RNG session and a callback per token.
/// Returning `Break` from the callback stops with [`Error::Cancelled`].
pub fn generate_session<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &str,
    length: usize,
    config: &ControlConfig,
    settings: SamplerSettings,
    session: u64,
    mut on_step: impl FnMut(&StepEvent) -> ControlFlow<()>,
) -> Result<GenerationRecord> {
    let started = Instant::now();
    config.validate()?;
    if length == 0 {
        return Err(Error::config("length", "must be at least 1"));
    }
    let vocab = model.vocabulary();
    let prompt_tokens = vocab.encode(prompt);
    if prompt_tokens.is_empty() {
        return Err(Error::Empty("prompt".into()));
    }
    let mut sampler = Sampler::new(settings, session)?;
    let context = model.context_len();
    let keep = truncation_keep(context);

    let mut seq = prompt_tokens.clone();
    let mut truncated_at = Vec::new();
    let mut history = if seq.len() > context {
        truncated_at.push(0);
        model.prefill(&seq[seq.len() - keep..seq.len() - 1], &model.empty_history())?
    } else {
        model.prefill(&seq[..seq.len() - 1], &model.empty_history())?
    };
    let mut last = *seq.last().expect("non-empty prompt");

    let mut record = GenerationRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        model_id: model.model_id(),
        prompt: prompt.to_string(),
        prompt_tokens,
        tokens: Vec::with_capacity(length),
        token_texts: Vec::with_capacity(length),
        text: String::new(),
        losses: Vec::with_capacity(length),
        initial_losses: Vec::with_capacity(length),
        kl: Vec::with_capacity(length),
        flagged_steps: Vec::new(),
        truncated_at,
        config: config.snapshot(),
        sampler: settings,
        seed: settings.seed,
        duration_ms: 0,
    };
    for index in 0..length {
        if history.len() >= context {
            record.truncated_at.push(index);
            history = model.prefill(&seq[seq.len() - keep..seq.len() - 1], &model.empty_history())?;
        }
        let out = step(model, last, &history, config, &mut sampler)?;
        let text = vocab.token(out.token).unwrap_or_default().to_string();
        if out.flagged {
            record.flagged_steps.push(index);
        }
        let event = StepEvent {
            index,
            token: out.token,
            text: text.clone(),
            loss_total: out.loss.total,
            kl: out.kl,
            flagged: out.flagged,
        };
        record.tokens.push(out.token);
        record.token_texts.push(text);
        record.losses.push(out.loss);
        record.initial_losses.push(out.initial_total);
        record.kl.push(out.kl);
        history = out.next_history;
        seq.push(out.token);
        last = out.token;
        if on_step(&event).is_break() {
            return Err(Error::Cancelled(index + 1));
        }
    }
    record.text = join_tokens(record.token_texts.iter().map(String::as_str));
    record.duration_ms = started.elapsed().as_millis() as u64;
    Ok(record)
}

/// Plain sampling from the model with no steering machinery involved.
pub fn sample_unsteered<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &str,
    length: usize,
    settings: SamplerSettings,
) -> Result<Vec<TokenId>> {
    let mut seq = model.vocabulary().encode(prompt);
    if seq.is_empty() {
        return Err(Error::Empty("prompt".into()));
    }
    let mut sampler = Sampler::new(settings, 0)?;
    let context = model.context_len();
    let keep = truncation_keep(context);
    let start = if seq.len() > context { seq.len() - keep } else { 0 };
    let mut history = model.prefill(&seq[start..seq.len() - 1], &model.empty_history())?;
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        if history.len() >= context {
            history = model.prefill(&seq[seq.len() - keep..seq.len() - 1], &model.empty_history())?;
        }
        let step = model.forward(*seq.last().unwrap(), &history)?;
        let next = sampler.sample(&softmax(&step.logits));
        history = step.next_history;
        seq.push(next);
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{AffectBag, EmotionCategory, TopicBag};
    use crate::loss::{affect_loss, LossWeights};
    use crate::model::tests_support::tiny_model;
    use std::sync::Arc;

    fn affect_config(step_size: f64, iterations: usize) -> ControlConfig {
        ControlConfig {
            affect: Some(Arc::new(AffectBag {
                emotion: EmotionCategory::Joy,
                token_ids: vec![2, 5],
                intensities: vec![0.9, 0.4],
                source_words: vec!["w2".into(), "w5".into()],
                unprojected: vec![],
            })),
            knob: 0.9,
            step_size,
            gd_iterations: iterations,
            ..Default::default()
        }
    }

    fn prompt_history(m: &crate::model::ReferenceLm) -> HistoryState {
        m.prefill(&[1, 3, 6, 0], &m.empty_history()).unwrap()
    }

    #[test]
    fn zero_step_and_kl_only_leave_history_unchanged() {
        let m = tiny_model(5);
        let h = prompt_history(&m);
        let out = perturb_history(&m, 4, &h, &affect_config(0.0, 3)).unwrap();
        assert_eq!(out.history, h);
        assert!(out.perturbation.is_zero());

        let kl_only = ControlConfig {
            step_size: 0.5,
            ..Default::default()
        };
        let out = perturb_history(&m, 4, &h, &kl_only).unwrap();
        assert_eq!(out.history, h);
        assert_eq!(out.loss.kld, 0.0);
    }

    #[test]
    fn one_iteration_descends_and_line_search_agrees() {
        let m = tiny_model(5);
        let h = prompt_history(&m);
        let cfg = affect_config(0.05, 1);
        let bag = cfg.affect.clone().unwrap();
        let affect_at = |eta: f64| {
            let c = ControlConfig {
                step_size: eta,
                ..cfg.clone()
            };
            let out = perturb_history(&m, 4, &h, &c).unwrap();
            affect_loss(&out.probabilities, &bag, 0.9, 0.05, 1e-10).unwrap()
        };
        let initial = affect_at(0.0);
        for eta in [0.025, 0.05, 0.1] {
            assert!(affect_at(eta) < initial, "eta {eta}");
        }
    }

    #[test]
    fn greedy_steps_are_deterministic_and_match_base_when_unsteered() {
        let m = tiny_model(6);
        let h = prompt_history(&m);
        let mut s1 = Sampler::new(SamplerSettings::greedy(), 0).unwrap();
        let mut s2 = Sampler::new(SamplerSettings::greedy(), 0).unwrap();
        let a = step(&m, 2, &h, &affect_config(0.05, 3), &mut s1).unwrap();
        let b = step(&m, 2, &h, &affect_config(0.05, 3), &mut s2).unwrap();
        assert_eq!(a.token, b.token);

        let off = step(&m, 2, &h, &ControlConfig::default(), &mut s1).unwrap();
        let base = argmax(&m.forward(2, &h).unwrap().probabilities());
        assert_eq!(off.token, base);
        assert_eq!(off.kl, 0.0);
    }

    #[test]
    fn top_k_sampling_respects_k_and_seed() {
        let p = [0.05, 0.4, 0.1, 0.3, 0.15];
        let draws = |seed| {
            let mut s = Sampler::new(SamplerSettings::top_k(2, seed), 3).unwrap();
            (0..200).map(|_| s.sample(&p)).collect::<Vec<_>>()
        };
        let a = draws(1);
        assert_eq!(a, draws(1));
        assert_ne!(a, draws(2));
        assert!(a.iter().all(|&t| t == 1 || t == 3));
        assert!(a.contains(&1) && a.contains(&3));
        assert_eq!(top_k_pick(&[0.5, 0.5], 1, 1.0, 0.99), 0);
    }

    #[test]
    fn sessions_draw_independent_streams() {
        let p = vec![0.1; 10];
        let mut a = Sampler::new(SamplerSettings::top_k(10, 4), 0).unwrap();
        let mut b = Sampler::new(SamplerSettings::top_k(10, 4), 1).unwrap();
        let xa: Vec<_> = (0..50).map(|_| a.sample(&p)).collect();
        let xb: Vec<_> = (0..50).map(|_| b.sample(&p)).collect();
        assert_ne!(xa, xb);
    }

    #[test]
    fn generation_counts_and_reproducibility() {
        let m = tiny_model(7);
        let cfg = affect_config(0.05, 3);
        let one = generate(&m, "w1 w2", 1, &cfg, SamplerSettings::top_k(3, 9)).unwrap();
        assert_eq!((one.tokens.len(), one.losses.len(), one.kl.len()), (1, 1, 1));

        let a = generate(&m, "w1 w2", 40, &cfg, SamplerSettings::top_k(3, 9)).unwrap();
        let b = generate(&m, "w1 w2", 40, &cfg, SamplerSettings::top_k(3, 9)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        // 2 prompt tokens + 40 emitted overflows the 16-position context.
        assert!(!a.truncated_at.is_empty());
        assert!(matches!(
            generate(&m, "", 3, &cfg, SamplerSettings::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn unsteered_generation_matches_plain_sampling() {
        let m = tiny_model(8);
        for seed in 0..5 {
            let s = SamplerSettings::top_k(4, seed);
            let rec = generate(&m, "w3 w4 w5", 30, &ControlConfig::default(), s).unwrap();
            assert_eq!(rec.tokens, sample_unsteered(&m, "w3 w4 w5", 30, s).unwrap());
            assert!(rec.kl.iter().all(|&k| k == 0.0));
        }
    }

    #[test]
    fn window_restricts_perturbation_to_recent_positions() {
        let m = tiny_model(5);
        let h = prompt_history(&m);
        let cfg = ControlConfig {
            window: Some(2),
            topic: Some(Arc::new(TopicBag {
                topic_name: "t".into(),
                token_ids: vec![3],
                source_words: vec!["w3".into()],
            })),
            weights: LossWeights::default(),
            step_size: 0.05,
            ..Default::default()
        };
        let out = perturb_history(&m, 4, &h, &cfg).unwrap();
        let width = out.perturbation.width();
        for t in out.perturbation.tensors() {
            assert!(t[..(h.len() - 2) * width].iter().all(|&x| x == 0.0));
        }
        assert!(!out.perturbation.is_zero());
    }

    #[test]
    fn cancellation_stops_generation() {
        let m = tiny_model(7);
        let err = generate_session(
            &m,
            "w1",
            10,
            &ControlConfig::default(),
            SamplerSettings::default(),
            0,
            |e| {
                if e.index == 2 {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Cancelled(3)));
    }
}
