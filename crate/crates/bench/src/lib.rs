//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use affectgen_core::lexicon::{builtin_topic_words, demo_lexicon};
use affectgen_core::{
    AffectBag, ControlConfig, EmotionCategory, LanguageModel, ReferenceLm, ReferenceLmConfig, TokenizerVocabulary,
    TopicBag, VocabKind,
};

/// Random-weight model over the demo lexicon plus filler words.
pub fn model(layers: usize, dim: usize, context: usize) -> ReferenceLm {
    let lexicon = demo_lexicon();
    let mut tokens: Vec<String> = ["it", "was", "a", "the", "day", "and", "."].map(String::from).to_vec();
    tokens.extend(lexicon.distinct_words().into_iter().map(String::from));
    tokens.extend(builtin_topic_words("space").unwrap().into_iter().map(String::from));
    let mut seen = std::collections::HashSet::new();
    tokens.retain(|t| seen.insert(t.clone()));
    let vocab = TokenizerVocabulary::from_tokens(tokens, VocabKind::Word).expect("vocabulary");
    let config = ReferenceLmConfig {
        layers,
        heads: 4,
        dim,
        context,
        vocab_size: 0,
        seed: 1,
    };
    let mut m = ReferenceLm::new(config, vocab).expect("model");
    m.jitter_parameters(0.3, 2).expect("jitter");
    m
}

/// Joy at knob 0.8 with the space topic, three descent iterations.
pub fn steering(model: &ReferenceLm) -> ControlConfig {
    let vocab = model.vocabulary();
    ControlConfig {
        affect: Some(Arc::new(
            AffectBag::build(&demo_lexicon(), EmotionCategory::Joy, vocab).unwrap(),
        )),
        topic: Some(Arc::new(TopicBag::load("space", vocab).unwrap())),
        knob: 0.8,
        step_size: 0.05,
        ..Default::default()
    }
}
