//! Seeded template-grammar corpus for training the reference model offline.
//!
//! Paragraphs share a topic and a mood: most adjectives come from one
//! emotion of the lexicon near one intensity level, the rest are drawn from
//! the whole lexicon. Noun slots lean toward the paragraph's topic words.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lexicon::{builtin_topic_names, builtin_topic_words, EmotionCategory, Lexicon};
use crate::vocab::split_words;

const NAMES: &[&str] = &[
    "anna", "ben", "clara", "david", "elena", "frank", "grace", "henry", "iris", "jack", "lena", "marcus", "nora",
    "oscar", "paula", "ruth", "samuel", "tessa", "victor", "willa",
];
const NOUNS: &[&str] = &[
    "house", "road", "river", "letter", "garden", "window", "morning", "evening", "child", "friend", "teacher",
    "crowd", "village", "city", "market", "door", "storm", "song", "book", "table", "train", "harbor", "field",
    "forest", "street", "mother", "father", "neighbor", "stranger", "dog",
];
const PLACES: &[&str] = &[
    "room",
    "hall",
    "town",
    "kitchen",
    "square",
    "office",
    "station",
    "valley",
    "courtyard",
    "library",
];
const VERBS: &[&str] = &[
    "watched",
    "found",
    "carried",
    "opened",
    "followed",
    "remembered",
    "described",
    "reached",
    "studied",
    "visited",
    "answered",
    "built",
    "lost",
    "noticed",
    "praised",
    "questioned",
];
const ADVERBS: &[&str] = &["very", "quite", "rather", "so", "truly", "deeply", "suddenly", "still"];
const LINKS: &[&str] = &["was", "seemed", "looked", "felt", "became", "grew"];
const PRONOUNS: &[&str] = &["she", "he", "they", "we", "i"];
const TIMES: &[&str] = &["day", "night", "week", "year", "hour", "season"];

/// Paragraph mood: the emotion most adjectives come from and the intensity
/// they cluster around.
struct Mood<'a> {
    words: Vec<(&'a str, f64)>,
    level: f64,
}

struct Writer<'a> {
    rng: ChaCha8Rng,
    all_adjectives: Vec<&'a str>,
    moods: Vec<(EmotionCategory, Vec<(&'a str, f64)>)>,
    topics: Vec<Vec<&'static str>>,
}

impl<'a> Writer<'a> {
    fn adjective(&mut self, mood: &Mood<'a>) -> &'a str {
        if self.rng.random_bool(0.85) {
            let weights: Vec<f64> = mood
                .words
                .iter()
                .map(|&(_, x)| (-(x - mood.level).powi(2) / (2.0 * 0.01)).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = self.rng.random::<f64>() * total;
            for (&(w, _), &wt) in mood.words.iter().zip(&weights) {
                if u < wt {
                    return w;
                }
                u -= wt;
            }
            mood.words.last().expect("non-empty mood").0
        } else {
            self.all_adjectives.choose(&mut self.rng).expect("non-empty lexicon")
        }
    }

    fn noun(&mut self, topic: &[&'static str]) -> &'static str {
        if self.rng.random_bool(0.6) {
            topic.choose(&mut self.rng).expect("non-empty topic")
        } else {
            NOUNS.choose(&mut self.rng).expect("nouns")
        }
    }

    fn pick(&mut self, words: &[&'static str]) -> &'static str {
        words.choose(&mut self.rng).expect("non-empty list")
    }

    fn sentence(&mut self, mood: &Mood<'a>, topic: &[&'static str], out: &mut Vec<String>) {
        let mut push = |w: &str| out.push(w.to_string());
        match self.rng.random_range(0..9) {
            0 => {
                let (n, l, a) = (self.pick(NOUNS), self.pick(LINKS), self.adjective(mood));
                for w in ["the", n, l, a, "."] {
                    push(w);
                }
            }
            1 => {
                let (who, a, t) = (self.pick(NAMES), self.adjective(mood), self.noun(topic));
                for w in [who, "felt", a, "about", "the", t, "."] {
                    push(w);
                }
            }
            2 => {
                let (t, v, n, p, l, a) = (
                    self.noun(topic),
                    self.pick(VERBS),
                    self.noun(topic),
                    self.pick(PRONOUNS),
                    self.pick(LINKS),
                    self.adjective(mood),
                );
                for w in ["the", t, v, "the", n, ",", "and", p, l, a, "."] {
                    push(w);
                }
            }
            3 => {
                let (p, l, adv, a, t, v) = (
                    self.pick(PRONOUNS),
                    self.pick(LINKS),
                    self.pick(ADVERBS),
                    self.adjective(mood),
                    self.noun(topic),
                    self.pick(VERBS),
                );
                for w in [p, l, adv, a, "when", "the", t, "was", v, "."] {
                    push(w);
                }
            }
            4 => {
                let (place, a, b) = (self.pick(PLACES), self.adjective(mood), self.adjective(mood));
                for w in ["everyone", "in", "the", place, "seemed", a, "and", b, "."] {
                    push(w);
                }
            }
            5 => {
                let (a, time, t) = (self.adjective(mood), self.pick(TIMES), self.noun(topic));
                for w in ["it", "was", "a", a, time, "for", "the", t, "."] {
                    push(w);
                }
            }
            6 => {
                let (who, t, l, a) = (
                    self.pick(NAMES),
                    self.noun(topic),
                    self.pick(LINKS),
                    self.adjective(mood),
                );
                for w in [who, "said", "the", t, l, a, "."] {
                    push(w);
                }
            }
            7 => {
                let (p, v, t, place) = (
                    self.pick(PRONOUNS),
                    self.pick(VERBS),
                    self.noun(topic),
                    self.pick(PLACES),
                );
                for w in [p, v, "the", t, "in", "the", place, "."] {
                    push(w);
                }
            }
            _ => {
                let (who, a, t, b) = (
                    self.pick(NAMES),
                    self.adjective(mood),
                    self.noun(topic),
                    self.adjective(mood),
                );
                for w in ["the", a, who, "met", "a", b, t, "."] {
                    push(w);
                }
            }
        }
    }
}

/// Generates at least `min_tokens` tokens of text, one paragraph per line.
/// The output depends only on `lexicon`, `min_tokens` and `seed`.
pub fn synthetic_corpus(lexicon: &Lexicon, min_tokens: usize, seed: u64) -> Result<String> {
    if lexicon.is_empty() {
        return Err(Error::Empty("lexicon".into()));
    }
    let moods: Vec<_> = EmotionCategory::ALL
        .iter()
        .map(|&e| (e, lexicon.words_for(e).collect::<Vec<_>>()))
        .filter(|(_, w)| !w.is_empty())
        .collect();
    let topics = builtin_topic_names()
        .map(|n| builtin_topic_words(n).expect("builtin topic"))
        .collect();
    let mut writer = Writer {
        rng: ChaCha8Rng::seed_from_u64(seed),
        all_adjectives: lexicon.distinct_words(),
        moods,
        topics,
    };

    let mut text = String::new();
    let mut count = 0;
    let mut words = Vec::new();
    while count < min_tokens {
        let mi = writer.rng.random_range(0..writer.moods.len());
        let mood = Mood {
            words: writer.moods[mi].1.clone(),
            level: writer.rng.random::<f64>(),
        };
        let ti = writer.rng.random_range(0..writer.topics.len());
        let topic = writer.topics[ti].clone();
        words.clear();
        for _ in 0..writer.rng.random_range(3..=6) {
            writer.sentence(&mood, &topic, &mut words);
        }
        let paragraph = words.join(" ");
        count += split_words(&paragraph).count();
        text.push_str(&paragraph);
        text.push('\n');
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::demo_lexicon;
    use crate::vocab::TokenizerVocabulary;

    #[test]
    fn corpus_is_seeded_and_large_enough() {
        let lex = demo_lexicon();
        let a = synthetic_corpus(&lex, 5_000, 3).unwrap();
        assert_eq!(a, synthetic_corpus(&lex, 5_000, 3).unwrap());
        assert_ne!(a, synthetic_corpus(&lex, 5_000, 4).unwrap());
        assert!(split_words(&a).count() >= 5_000);
    }

    #[test]
    fn vocabulary_covers_the_lexicon() {
        let lex = demo_lexicon();
        let text = synthetic_corpus(&lex, 100_000, 0).unwrap();
        let vocab = TokenizerVocabulary::from_corpus(&text, 2_000).unwrap();
        let covered = lex.distinct_words().iter().filter(|w| vocab.id(w).is_some()).count();
        assert!(covered >= 200, "{covered}");
        for topic in builtin_topic_names() {
            for w in builtin_topic_words(topic).unwrap() {
                assert!(vocab.id(w).is_some(), "{topic}: {w}");
            }
        }
    }
}
