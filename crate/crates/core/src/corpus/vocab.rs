use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const SOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const LEN: TokenId = 4;
pub const UNK: TokenId = 5;

/// Reserved tokens, in id order.
pub const SPECIALS: [&str; 6] = ["<PAD>", "<SOS>", "<EOS>", "<MASK>", "<LEN>", "<UNK>"];
pub const NUM_SPECIALS: usize = SPECIALS.len();

/// Bidirectional token/id map. Ids `0..6` are the reserved specials, corpus
/// tokens follow ordered by descending frequency, then lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary over both sides of a parallel corpus. Tokens seen
    /// fewer than `min_count` times are left out and encode to `<UNK>`.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut pairs = 0usize;
        for (source, target) in corpus {
            pairs += 1;
            for tok in source
                .as_ref()
                .split_whitespace()
                .chain(target.as_ref().split_whitespace())
            {
                if SPECIALS.contains(&tok) {
                    continue;
                }
                *counts.entry(tok.to_owned()).or_default() += 1;
            }
        }
        if pairs == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Whitespace-tokenizes `sentence`; unknown tokens become `<UNK>`.
    pub fn encode(&self, sentence: &str) -> Vec<TokenId> {
        sentence
            .split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.to_owned()).collect();
        if tokens.len() < NUM_SPECIALS {
            return Err(Error::Parse {
                what: "vocab",
                line: tokens.len() + 1,
                message: "missing reserved tokens".into(),
            });
        }
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens[i] != *special {
                return Err(Error::Parse {
                    what: "vocab",
                    line: i + 1,
                    message: format!("expected `{special}`, found `{}`", tokens[i]),
                });
            }
        }
        let mut seen = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    what: "vocab",
                    line: i + 1,
                    message: "token is empty or contains whitespace".into(),
                });
            }
            if seen.insert(t.as_str(), i).is_some() {
                return Err(Error::Parse {
                    what: "vocab",
                    line: i + 1,
                    message: format!("duplicate token `{t}`"),
                });
            }
        }
        if tokens.len() > TokenId::MAX as usize {
            return Err(Error::Parse {
                what: "vocab",
                line: tokens.len(),
                message: "too many tokens".into(),
            });
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
