use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::transformer::{Params, ReferenceLm, ReferenceLmConfig};
use super::{softmax, LanguageModel};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenizerVocabulary};

pub const MIN_CORPUS_TOKENS: usize = 10_000;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Training window length; defaults to the model context.
    pub seq_len: Option<usize>,
    pub grad_clip: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 3e-3,
            batch_size: 8,
            seq_len: None,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training cross-entropy (nats per token) of each epoch.
    pub epoch_losses: Vec<f64>,
    pub corpus_tokens: usize,
}

struct Adam {
    m: Params,
    v: Params,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn update(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(ms.iter_mut())
            .zip(vs.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains a word-level reference model on `corpus`. The vocabulary keeps the
/// `config.vocab_size` most frequent tokens. `on_epoch` receives the epoch
/// index and its mean training loss.
pub fn train_reference(
    corpus: &str,
    config: ReferenceLmConfig,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(ReferenceLm, TrainReport)> {
    config.validate()?;
    if options.epochs == 0 {
        return Err(Error::config("epochs", "must be positive"));
    }
    if options.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let vocab = TokenizerVocabulary::from_corpus(corpus, config.vocab_size)?;
    let stream = vocab.encode(corpus);
    if stream.len() < MIN_CORPUS_TOKENS {
        return Err(Error::CorpusTooSmall {
            got: stream.len(),
            min: MIN_CORPUS_TOKENS,
        });
    }
    let mut model = ReferenceLm::new(config, vocab)?;
    let seq_len = options.seq_len.unwrap_or(config.context).min(config.context);
    if seq_len < 2 {
        return Err(Error::config("seq_len", "must be at least 2"));
    }

    let windows: Vec<usize> = (0..stream.len().saturating_sub(seq_len)).step_by(seq_len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam {
        m: Params::zeros(model.config()),
        v: Params::zeros(model.config()),
        step: 0,
    };
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(options.epochs),
        corpus_tokens: stream.len(),
    };
    let mut order = windows.clone();
    for epoch in 0..options.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(options.batch_size) {
            let mut grads = Params::zeros(model.config());
            let scale = 1.0 / (batch.len() * seq_len) as f64;
            for &start in batch {
                let inputs = &stream[start..start + seq_len];
                let targets = &stream[start + 1..start + seq_len + 1];
                total += window_step(&model, inputs, targets, scale, &mut grads)?;
                count += seq_len;
            }
            clip(&mut grads, options.grad_clip);
            adam.update(&mut model.params, &grads, options.learning_rate);
        }
        let mean = total / count as f64;
        on_epoch(epoch, mean);
        report.epoch_losses.push(mean);
    }
    model.refresh_id();
    Ok((model, report))
}

/// Forward and backward over one window; returns the summed token loss.
fn window_step(
    model: &ReferenceLm,
    inputs: &[TokenId],
    targets: &[TokenId],
    scale: f64,
    grads: &mut Params,
) -> Result<f64> {
    let out = model.forward_block(inputs, &model.empty_history(), false)?;
    let vocab = out.logits.ncols();
    let mut dlogits = Array2::zeros((inputs.len(), vocab));
    let mut loss = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        let p = softmax(out.logits.row(i).as_slice().expect("contiguous"));
        loss -= p[target as usize].max(f64::MIN_POSITIVE).ln();
        let mut row = dlogits.row_mut(i);
        for (j, &pj) in p.iter().enumerate() {
            row[j] = pj * scale;
        }
        row[target as usize] -= scale;
    }
    model.backward_block(&out.cache, &dlogits, Some(grads));
    Ok(loss)
}

fn clip(grads: &mut Params, max_norm: f64) {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{perplexity, softmax};

    fn alternating_corpus(n: usize) -> String {
        (0..n)
            .map(|i| if i % 2 == 0 { "a" } else { "b" })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn small_config() -> ReferenceLmConfig {
        ReferenceLmConfig {
            layers: 1,
            heads: 2,
            dim: 16,
            context: 16,
            vocab_size: 50,
            seed: 11,
        }
    }

    #[test]
    fn learns_deterministic_alternation() {
        let corpus = alternating_corpus(10_000);
        let opts = TrainOptions {
            epochs: 2,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (model, report) = train_reference(&corpus, small_config(), &opts, |_, _| {}).unwrap();
        assert!(
            report.epoch_losses[1] < report.epoch_losses[0],
            "{:?}",
            report.epoch_losses
        );

        let vocab = model.vocabulary();
        let (a, b) = (vocab.id("a").unwrap(), vocab.id("b").unwrap());
        let h = model.prefill(&[a, b], &model.empty_history()).unwrap();
        let p = softmax(&model.forward(a, &h).unwrap().logits);
        assert!(p[b as usize] > 0.9, "P(b|a) = {}", p[b as usize]);

        let seq: Vec<TokenId> = (0..12).map(|i| if i % 2 == 0 { a } else { b }).collect();
        let ppl = perplexity(&model, &seq).unwrap();
        assert!((1.0..1.1).contains(&ppl), "perplexity {ppl}");
    }

    #[test]
    fn small_corpus_is_rejected() {
        let err = train_reference(
            &alternating_corpus(500),
            small_config(),
            &TrainOptions::default(),
            |_, _| {},
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::CorpusTooSmall {
                got: 500,
                min: MIN_CORPUS_TOKENS
            }
        ));
        assert!(err.to_string().contains("10000"));
    }
}
