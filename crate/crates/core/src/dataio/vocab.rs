use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;
pub const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<unk>", "<pad>"];

pub const MAX_CAPTION_TOKENS: usize = 16;
pub const DEFAULT_MIN_COUNT: usize = 5;

/// Lowercases, splits on whitespace runs and keeps the first 16 tokens.
pub fn tokenize(raw: &str) -> Vec<String> {
    raw.split_whitespace()
        .take(MAX_CAPTION_TOKENS)
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err("vocabulary must start with the special tokens".into());
        }
        let index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if index.len() != tokens.len() {
            return Err("duplicate token in vocabulary".into());
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by count
    /// descending then token ascending, after the four specials.
    pub fn build<S: AsRef<str>>(captions: &[Vec<S>], min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for cap in captions {
            for t in cap {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !SPECIALS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::try_from(tokens).expect("specials first, no duplicates")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// `[BOS] + encode(tokens) + [EOS]`.
    pub fn encode_caption<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut out = Vec::with_capacity(tokens.len() + 2);
        out.push(BOS);
        out.extend(self.encode(tokens));
        out.push(EOS);
        out
    }
}
