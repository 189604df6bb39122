//! Word-level tokenizer vocabulary shared by the reference model, the lexicon
//! projection and the evaluation scorers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK_TOKEN: &str = "<unk>";

/// How lexicon words are matched against vocabulary entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    /// Every vocabulary entry is a whole word; a word projects only on an exact match.
    #[default]
    Word,
    /// Entries are subword pieces; a word projects onto its greedy
    /// longest-prefix segmentation when the pieces cover it completely.
    Subword,
}

/// Bijection between token ids `[0, vocab_size)` and surface strings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct TokenizerVocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    /// Lowercased surface form -> lowest id carrying it.
    folded: HashMap<String, TokenId>,
    unk: TokenId,
    kind: VocabKind,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    kind: VocabKind,
    unk: TokenId,
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for TokenizerVocabulary {
    type Error = Error;

    fn try_from(repr: VocabRepr) -> Result<Self> {
        let mut vocab = Self::from_tokens(repr.tokens, repr.kind)?;
        if repr.unk as usize >= vocab.len() {
            return Err(Error::Checkpoint(format!("unk id {} out of range", repr.unk)));
        }
        vocab.unk = repr.unk;
        Ok(vocab)
    }
}

impl From<TokenizerVocabulary> for VocabRepr {
    fn from(v: TokenizerVocabulary) -> Self {
        VocabRepr {
            kind: v.kind,
            unk: v.unk,
            tokens: v.tokens,
        }
    }
}

impl TokenizerVocabulary {
    /// Builds a vocabulary from an explicit token list. An `<unk>` entry is
    /// appended when absent.
    pub fn from_tokens(mut tokens: Vec<String>, kind: VocabKind) -> Result<Self> {
        if !tokens.iter().any(|t| t == UNK_TOKEN) {
            tokens.push(UNK_TOKEN.to_string());
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        let mut folded = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::Shape(format!("duplicate vocabulary entry {tok:?}")));
            }
            folded.entry(tok.to_lowercase()).or_insert(id as TokenId);
        }
        let unk = token_to_id[UNK_TOKEN];
        Ok(Self {
            tokens,
            token_to_id,
            folded,
            unk,
            kind,
        })
    }

    /// Word-level vocabulary over a corpus: `<unk>` first, then the
    /// `max_size - 1` most frequent tokens (ties broken lexicographically).
    pub fn from_corpus(text: &str, max_size: usize) -> Result<Self> {
        if max_size < 2 {
            return Err(Error::config("max_size", "must be at least 2"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for word in split_words(text) {
            *counts.entry(word).or_default() += 1;
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = std::iter::once(UNK_TOKEN.to_string())
            .chain(ranked.into_iter().take(max_size - 1).map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens, VocabKind::Word)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn unk_id(&self) -> TokenId {
        self.unk
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenizes free text; out-of-vocabulary words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .map(|w| self.folded.get(&w).copied().unwrap_or(self.unk))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        join_tokens(ids.iter().map(|&id| self.token(id).unwrap_or(UNK_TOKEN)))
    }

    /// Token ids a (case-folded) word projects to, or `None` when the word is
    /// not representable without `<unk>`.
    pub fn project_word(&self, word: &str) -> Option<Vec<TokenId>> {
        let word = word.trim().to_lowercase();
        if word.is_empty() {
            return None;
        }
        if let Some(&id) = self.folded.get(&word) {
            return (id != self.unk).then(|| vec![id]);
        }
        match self.kind {
            VocabKind::Word => None,
            VocabKind::Subword => self.segment(&word),
        }
    }

    fn segment(&self, word: &str) -> Option<Vec<TokenId>> {
        let mut pieces = Vec::new();
        let mut rest = word;
        while !rest.is_empty() {
            let (len, id) = rest
                .char_indices()
                .map(|(i, c)| i + c.len_utf8())
                .rev()
                .find_map(|end| self.folded.get(&rest[..end]).map(|&id| (end, id)))?;
            if id == self.unk {
                return None;
            }
            pieces.push(id);
            rest = &rest[len..];
        }
        Some(pieces)
    }
}

/// Splits text into lowercase word and punctuation tokens. Runs of letters,
/// digits and apostrophes form words; every other non-space character is a
/// token of its own.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    let mut chars = text.char_indices().peekable();
    std::iter::from_fn(move || {
        while let Some(&(_, c)) = chars.peek() {
            if c.is_whitespace() {
                chars.next();
            } else {
                break;
            }
        }
        let (start, first) = chars.next()?;
        if !is_word_char(first) {
            return Some(text[start..start + first.len_utf8()].to_lowercase());
        }
        let mut end = start + first.len_utf8();
        while let Some(&(i, c)) = chars.peek() {
            if is_word_char(c) {
                end = i + c.len_utf8();
                chars.next();
            } else {
                break;
            }
        }
        Some(text[start..end].to_lowercase())
    })
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Joins tokens with spaces, attaching closing punctuation to the preceding word.
pub fn join_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for tok in tokens {
        let attach = matches!(tok, "." | "," | "!" | "?" | ";" | ":" | ")");
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_separates_punctuation() {
        let words: Vec<_> = split_words("Once upon, a TIME! don't").collect();
        assert_eq!(words, ["once", "upon", ",", "a", "time", "!", "don't"]);
    }

    #[test]
    fn corpus_vocab_is_frequency_capped() {
        let v = TokenizerVocabulary::from_corpus("a b a c a b", 3).unwrap();
        assert_eq!(v.tokens(), ["<unk>", "a", "b"]);
        assert_eq!(v.encode("a c"), vec![1, 0]);
    }

    #[test]
    fn decode_attaches_punctuation() {
        let v = TokenizerVocabulary::from_corpus("she smiled . he wept ,", 10).unwrap();
        let ids = v.encode("she smiled. he wept,");
        assert_eq!(v.decode(&ids), "she smiled. he wept,");
    }

    #[test]
    fn projection_respects_kind() {
        let toks = ["<unk>", "glee", "ful"].map(String::from).to_vec();
        let word = TokenizerVocabulary::from_tokens(toks.clone(), VocabKind::Word).unwrap();
        assert_eq!(word.project_word("Glee"), Some(vec![1]));
        assert_eq!(word.project_word("gleeful"), None);
        let sub = TokenizerVocabulary::from_tokens(toks, VocabKind::Subword).unwrap();
        assert_eq!(sub.project_word("gleeful"), Some(vec![1, 2]));
        assert_eq!(sub.project_word("gleefully"), None);
        assert_eq!(sub.project_word("<unk>"), None);
    }

    #[test]
    fn serde_round_trip_preserves_ids() {
        let v = TokenizerVocabulary::from_corpus("x y z y", 10).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: TokenizerVocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.unk_id(), v.unk_id());
    }
}
