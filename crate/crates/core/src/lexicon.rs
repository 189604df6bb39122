//! Emotion-intensity and topic word lists, and their projection onto a model
//! vocabulary as bags of token ids.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenizerVocabulary};

/// The eight basic emotion categories covered by the intensity lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionCategory {
    Joy,
    Trust,
    Fear,
    Surprise,
    Sadness,
    Disgust,
    Anger,
    Anticipation,
}

impl EmotionCategory {
    pub const ALL: [EmotionCategory; 8] = [
        EmotionCategory::Joy,
        EmotionCategory::Trust,
        EmotionCategory::Fear,
        EmotionCategory::Surprise,
        EmotionCategory::Sadness,
        EmotionCategory::Disgust,
        EmotionCategory::Anger,
        EmotionCategory::Anticipation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmotionCategory::Joy => "joy",
            EmotionCategory::Trust => "trust",
            EmotionCategory::Fear => "fear",
            EmotionCategory::Surprise => "surprise",
            EmotionCategory::Sadness => "sadness",
            EmotionCategory::Disgust => "disgust",
            EmotionCategory::Anger => "anger",
            EmotionCategory::Anticipation => "anticipation",
        }
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        Self::ALL.iter().map(|e| e.name())
    }
}

impl fmt::Display for EmotionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownEmotion(pub String);

impl fmt::Display for UnknownEmotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let valid: Vec<_> = EmotionCategory::names().collect();
        write!(f, "unknown emotion {:?}; expected one of: {}", self.0, valid.join(", "))
    }
}

impl std::error::Error for UnknownEmotion {}

impl FromStr for EmotionCategory {
    type Err = UnknownEmotion;

    /// Accepts lowercase labels only.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| UnknownEmotion(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub word: String,
    pub emotion: EmotionCategory,
    pub intensity: f64,
}

/// A word/emotion intensity lexicon. Entries are keyed by `(word, emotion)`,
/// so equality does not depend on input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<(String, EmotionCategory), f64>,
}

const HEADER_LABELS: [&str; 2] = ["emotion", "emotion-intensity-score"];

impl Lexicon {
    /// Loads a `word<TAB>emotion<TAB>score` file.
    pub fn load_nrc_eil(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lexicon = Lexicon::default();
        let mut seen_data = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let (word, label, score) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
            // Some distributions of the lexicon start with a column header.
            if !seen_data && word == "word" && HEADER_LABELS.contains(&label) {
                continue;
            }
            seen_data = true;
            if word.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty word".into(),
                });
            }
            let emotion: EmotionCategory = label.parse().map_err(|e: UnknownEmotion| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let intensity: f64 = score.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("score {score:?} is not a number"),
            })?;
            lexicon
                .insert(word, emotion, intensity)
                .map_err(|message| Error::Parse { line: line_no, message })?;
        }
        if lexicon.is_empty() {
            return Err(Error::Empty("lexicon".into()));
        }
        Ok(lexicon)
    }

    pub fn from_entries(entries: impl IntoIterator<Item = LexiconEntry>) -> Result<Self> {
        let mut lexicon = Lexicon::default();
        for (i, e) in entries.into_iter().enumerate() {
            lexicon
                .insert(&e.word, e.emotion, e.intensity)
                .map_err(|message| Error::Parse { line: i + 1, message })?;
        }
        Ok(lexicon)
    }

    fn insert(&mut self, word: &str, emotion: EmotionCategory, intensity: f64) -> Result<(), String> {
        if !(0.0..=1.0).contains(&intensity) {
            return Err(format!("score {intensity} out of range [0, 1]"));
        }
        let key = (word.to_lowercase(), emotion);
        if self.entries.contains_key(&key) {
            return Err(format!("duplicate entry ({}, {emotion})", key.0));
        }
        self.entries.insert(key, intensity);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, emotion: EmotionCategory) -> usize {
        self.entries.keys().filter(|(_, e)| *e == emotion).count()
    }

    pub fn counts(&self) -> BTreeMap<EmotionCategory, usize> {
        let mut out = BTreeMap::new();
        for (_, e) in self.entries.keys() {
            *out.entry(*e).or_insert(0) += 1;
        }
        out
    }

    pub fn intensity(&self, word: &str, emotion: EmotionCategory) -> Option<f64> {
        self.entries.get(&(word.to_string(), emotion)).copied()
    }

    /// `(word, intensity)` pairs for one emotion, in word order.
    pub fn words_for(&self, emotion: EmotionCategory) -> impl Iterator<Item = (&str, f64)> {
        self.entries
            .iter()
            .filter(move |((_, e), _)| *e == emotion)
            .map(|((w, _), &s)| (w.as_str(), s))
    }

    pub fn entries(&self) -> impl Iterator<Item = LexiconEntry> + '_ {
        self.entries.iter().map(|((w, e), &s)| LexiconEntry {
            word: w.clone(),
            emotion: *e,
            intensity: s,
        })
    }

    /// Distinct words across all emotions.
    pub fn distinct_words(&self) -> Vec<&str> {
        let mut words: Vec<&str> = self.entries.keys().map(|(w, _)| w.as_str()).collect();
        words.dedup();
        words
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ((w, e), s) in &self.entries {
            out.push_str(&format!("{w}\t{e}\t{s}\n"));
        }
        out
    }
}

/// A small hand-authored lexicon in the same TSV format, bundled for demos
/// and tests. Its scores are illustrative, not crowd-annotated.
pub const DEMO_LEXICON_TSV: &str = include_str!("../data/lexicon/demo_intensity.tsv");

pub fn demo_lexicon() -> Lexicon {
    Lexicon::parse_tsv(DEMO_LEXICON_TSV).expect("bundled demo lexicon parses")
}

/// How multi-token words are mapped onto bag entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtokenProjection {
    /// Only the first subword token represents the word.
    #[default]
    First,
    /// Every subword token is added with the word's intensity.
    All,
}

/// Vocabulary tokens standing for one emotion, each with an intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffectBag {
    pub emotion: EmotionCategory,
    pub token_ids: Vec<TokenId>,
    pub intensities: Vec<f64>,
    pub source_words: Vec<String>,
    /// Lexicon words for the emotion that had no vocabulary projection.
    pub unprojected: Vec<String>,
}

impl AffectBag {
    pub fn build(lexicon: &Lexicon, emotion: EmotionCategory, vocab: &TokenizerVocabulary) -> Result<Self> {
        Self::build_with(lexicon, emotion, vocab, SubtokenProjection::First)
    }

    pub fn build_with(
        lexicon: &Lexicon,
        emotion: EmotionCategory,
        vocab: &TokenizerVocabulary,
        projection: SubtokenProjection,
    ) -> Result<Self> {
        if lexicon.count(emotion) == 0 {
            return Err(Error::Empty(format!("lexicon section for {emotion}")));
        }
        // token id -> (position in output, intensity)
        let mut slot: HashMap<TokenId, usize> = HashMap::new();
        let mut bag = AffectBag {
            emotion,
            token_ids: Vec::new(),
            intensities: Vec::new(),
            source_words: Vec::new(),
            unprojected: Vec::new(),
        };
        for (word, intensity) in lexicon.words_for(emotion) {
            let Some(pieces) = vocab.project_word(word) else {
                bag.unprojected.push(word.to_string());
                continue;
            };
            let take = match projection {
                SubtokenProjection::First => &pieces[..1],
                SubtokenProjection::All => &pieces[..],
            };
            for &id in take {
                match slot.get(&id) {
                    Some(&i) => {
                        if intensity > bag.intensities[i] {
                            bag.intensities[i] = intensity;
                            bag.source_words[i] = word.to_string();
                        }
                    }
                    None => {
                        slot.insert(id, bag.token_ids.len());
                        bag.token_ids.push(id);
                        bag.intensities.push(intensity);
                        bag.source_words.push(word.to_string());
                    }
                }
            }
        }
        if bag.token_ids.is_empty() {
            return Err(Error::Unprojectable {
                what: format!("the {emotion} lexicon"),
                unprojected: bag.unprojected.len(),
            });
        }
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Vocabulary tokens standing for one topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicBag {
    pub topic_name: String,
    pub token_ids: Vec<TokenId>,
    pub source_words: Vec<String>,
}

const BUILTIN_TOPICS: [(&str, &str); 8] = [
    ("legal", include_str!("../data/topics/legal.txt")),
    ("military", include_str!("../data/topics/military.txt")),
    ("monsters", include_str!("../data/topics/monsters.txt")),
    ("politics", include_str!("../data/topics/politics.txt")),
    ("religion", include_str!("../data/topics/religion.txt")),
    ("science", include_str!("../data/topics/science.txt")),
    ("space", include_str!("../data/topics/space.txt")),
    ("technology", include_str!("../data/topics/technology.txt")),
];

pub fn builtin_topic_names() -> impl Iterator<Item = &'static str> {
    BUILTIN_TOPICS.iter().map(|(name, _)| *name)
}

/// Words of a built-in topic list.
pub fn builtin_topic_words(name: &str) -> Option<Vec<&'static str>> {
    BUILTIN_TOPICS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| word_list(text))
}

fn word_list(text: &str) -> Vec<&str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

impl TopicBag {
    /// Resolves `name_or_path` as a built-in topic first, then as a file with
    /// one word per line.
    pub fn load(name_or_path: &str, vocab: &TokenizerVocabulary) -> Result<Self> {
        if let Some(words) = builtin_topic_words(name_or_path) {
            return Self::from_words(name_or_path, words, vocab);
        }
        let path = Path::new(name_or_path);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name_or_path.to_string());
        Self::from_words(&name, word_list(&text), vocab)
    }

    pub fn from_words<'a>(
        name: &str,
        words: impl IntoIterator<Item = &'a str>,
        vocab: &TokenizerVocabulary,
    ) -> Result<Self> {
        let mut bag = TopicBag {
            topic_name: name.to_string(),
            token_ids: Vec::new(),
            source_words: Vec::new(),
        };
        let mut total = 0;
        for word in words {
            total += 1;
            if let Some(pieces) = vocab.project_word(word) {
                if !bag.token_ids.contains(&pieces[0]) {
                    bag.token_ids.push(pieces[0]);
                    bag.source_words.push(word.to_lowercase());
                }
            }
        }
        if total == 0 {
            return Err(Error::Empty(format!("topic word list {name:?}")));
        }
        if bag.token_ids.is_empty() {
            return Err(Error::Unprojectable {
                what: format!("topic {name:?}"),
                unprojected: total,
            });
        }
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}
