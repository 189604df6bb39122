//! Language-model abstraction: single-token forward steps over an explicit
//! key/value history, and gradients of probability-space losses with respect
//! to an additive perturbation of that history.

mod checkpoint;
mod history;
mod train;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use history::{HistoryState, KvLayer, KvTensors, Perturbation};
pub use train::{train_reference, TrainOptions, TrainReport, MIN_CORPUS_TOKENS};
pub use transformer::{ReferenceLm, ReferenceLmConfig};

#[cfg(test)]
pub(crate) use transformer::tests as tests_support;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenizerVocabulary};

/// Result of consuming one token.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Final hidden state fed to the output projection.
    pub output_embedding: Vec<f64>,
    pub logits: Vec<f64>,
    pub next_history: HistoryState,
}

impl StepOutput {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

/// A scalar loss over a next-token probability vector.
pub trait ProbabilityLoss {
    /// Loss value and its gradient with respect to `p`. The gradient only
    /// needs to be correct along the probability simplex: adding the same
    /// constant to every component does not change the result downstream.
    fn evaluate(&self, p: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> ProbabilityLoss for F
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn evaluate(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(self(p))
    }
}

/// Output of a perturbed forward pass with its backward pass.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub value: f64,
    pub probabilities: Vec<f64>,
    pub gradient: Perturbation,
}

/// An autoregressive model whose history can be perturbed.
pub trait LanguageModel: Send + Sync {
    fn vocabulary(&self) -> &TokenizerVocabulary;

    fn context_len(&self) -> usize;

    /// Short identifier reported by the service and records.
    fn model_id(&self) -> String;

    fn empty_history(&self) -> HistoryState;

    fn forward(&self, token: TokenId, history: &HistoryState) -> Result<StepOutput>;

    /// Evaluates `loss(softmax(forward(token, history + perturbation)))` and
    /// its gradient with respect to `perturbation`.
    fn loss_and_gradient(
        &self,
        history: &HistoryState,
        perturbation: &Perturbation,
        token: TokenId,
        loss: &dyn ProbabilityLoss,
    ) -> Result<LossGradient>;

    fn loss_gradient(
        &self,
        history: &HistoryState,
        perturbation: &Perturbation,
        token: TokenId,
        loss: &dyn ProbabilityLoss,
    ) -> Result<Perturbation> {
        self.loss_and_gradient(history, perturbation, token, loss)
            .map(|g| g.gradient)
    }

    /// Consumes `tokens` in order, returning the extended history.
    fn prefill(&self, tokens: &[TokenId], history: &HistoryState) -> Result<HistoryState> {
        let mut h = history.clone();
        for &t in tokens {
            h = self.forward(t, &h)?.next_history;
        }
        Ok(h)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// Pulls a probability-space gradient back through the softmax:
/// `dz_i = p_i (g_i - <g, p>)`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - inner)).collect()
}

/// Tokens kept when a history overflows the context and is re-encoded.
pub fn truncation_keep(context: usize) -> usize {
    (context / 2).max(1)
}

/// Perplexity of `tokens[1..]` given their prefixes.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, tokens: &[TokenId]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::SequenceTooShort(tokens.len()));
    }
    continuation_perplexity(model, &tokens[..1], &tokens[1..])
}

/// Perplexity of `continuation` conditioned on `prompt`; prompt tokens are
/// context only and never scored.
pub fn continuation_perplexity<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    continuation: &[TokenId],
) -> Result<f64> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt".into()));
    }
    if continuation.is_empty() {
        return Err(Error::Empty("continuation".into()));
    }
    let context = model.context_len();
    let mut seq: Vec<TokenId> = prompt.to_vec();
    let keep = truncation_keep(context);
    if seq.len() > context {
        seq.drain(..seq.len() - keep);
    }
    let mut history = model.prefill(&seq[..seq.len() - 1], &model.empty_history())?;
    let mut last = *seq.last().unwrap();
    let mut nll = 0.0;
    for &next in continuation {
        if history.len() >= context {
            let start = seq.len().saturating_sub(keep);
            seq.drain(..start);
            history = model.prefill(&seq[..seq.len() - 1], &model.empty_history())?;
        }
        let out = model.forward(last, &history)?;
        let p = softmax(&out.logits);
        nll -= p[next as usize].max(f64::MIN_POSITIVE).ln();
        history = out.next_history;
        seq.push(next);
        last = next;
    }
    Ok((nll / continuation.len() as f64).exp())
}
