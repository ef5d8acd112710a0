//! Synthetic parallel corpora with exactly known transductions.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A sentence pair in surface form (whitespace-separated tokens).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TextPair {
    pub source: String,
    pub target: String,
}

impl TextPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
    ToyGrammar,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "toy_grammar" => Ok(Task::ToyGrammar),
            other => Err(Error::UnknownTask(other.to_owned())),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::ToyGrammar => "toy_grammar",
        })
    }
}

/// Alphabet shared by the copy and reverse tasks.
pub const SYMBOL_ALPHABET: [&str; 20] = [
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p", "q", "r", "s",
    "t",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Det,
    Adj,
    Noun,
    Verb,
    Prep,
    Adv,
}

/// Lexical rules of the toy grammar: (category, source word, target word).
pub const LEXICON: [(Category, &str, &str); 32] = [
    (Category::Det, "the", "der"),
    (Category::Det, "a", "ein"),
    (Category::Det, "some", "einige"),
    (Category::Adj, "red", "rot"),
    (Category::Adj, "big", "gross"),
    (Category::Adj, "old", "alt"),
    (Category::Adj, "small", "klein"),
    (Category::Adj, "blue", "blau"),
    (Category::Adj, "happy", "froh"),
    (Category::Noun, "cat", "katze"),
    (Category::Noun, "dog", "hund"),
    (Category::Noun, "bird", "vogel"),
    (Category::Noun, "man", "mann"),
    (Category::Noun, "woman", "frau"),
    (Category::Noun, "house", "haus"),
    (Category::Noun, "tree", "baum"),
    (Category::Noun, "car", "wagen"),
    (Category::Noun, "book", "buch"),
    (Category::Noun, "river", "fluss"),
    (Category::Verb, "sees", "sieht"),
    (Category::Verb, "likes", "mag"),
    (Category::Verb, "finds", "findet"),
    (Category::Verb, "takes", "nimmt"),
    (Category::Verb, "sleeps", "schlaeft"),
    (Category::Verb, "reads", "liest"),
    (Category::Verb, "runs", "rennt"),
    (Category::Prep, "in", "im"),
    (Category::Prep, "on", "auf"),
    (Category::Prep, "near", "bei"),
    (Category::Adv, "quickly", "schnell"),
    (Category::Adv, "often", "oft"),
    (Category::Adv, "slowly", "langsam"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Symbol {
    Sentence,
    NounPhrase,
    VerbPhrase,
    PrepPhrase,
    Word(Category),
}

use Category::*;
use Symbol::*;

/// Structural rules; together with the 32 lexical rules the grammar has 40.
const PHRASE_RULES: [(Symbol, &[Symbol]); 8] = [
    (Sentence, &[NounPhrase, VerbPhrase]),
    (Sentence, &[NounPhrase, VerbPhrase, PrepPhrase]),
    (NounPhrase, &[Word(Det), Word(Noun)]),
    (NounPhrase, &[Word(Det), Word(Adj), Word(Noun)]),
    (VerbPhrase, &[Word(Verb), NounPhrase]),
    (VerbPhrase, &[Word(Verb)]),
    (VerbPhrase, &[Word(Verb), Word(Adv)]),
    (PrepPhrase, &[Word(Prep), NounPhrase]),
];

pub const GRAMMAR_RULE_COUNT: usize = PHRASE_RULES.len() + LEXICON.len();

fn expand<R: Rng>(symbol: Symbol, rng: &mut R, out: &mut Vec<&'static str>) {
    match symbol {
        Word(cat) => {
            let words: Vec<&str> = LEXICON
                .iter()
                .filter(|(c, _, _)| *c == cat)
                .map(|(_, w, _)| *w)
                .collect();
            out.push(words[rng.random_range(0..words.len())]);
        }
        lhs => {
            let rules: Vec<&[Symbol]> = PHRASE_RULES
                .iter()
                .filter(|(l, _)| *l == lhs)
                .map(|(_, r)| *r)
                .collect();
            for &s in rules[rng.random_range(0..rules.len())] {
                expand(s, rng, out);
            }
        }
    }
}

/// Maps a toy-grammar source sentence to its target: word-by-word dictionary
/// lookup, then every adjacent adjective/noun pair is swapped.
pub fn toy_grammar_transduce(source: &[&str]) -> Option<Vec<&'static str>> {
    let entries: Vec<&(Category, &str, &str)> = source
        .iter()
        .map(|w| LEXICON.iter().find(|(_, s, _)| s == w))
        .collect::<Option<_>>()?;
    let mut out: Vec<&'static str> = entries.iter().map(|e| e.2).collect();
    let mut i = 0;
    while i + 1 < entries.len() {
        if entries[i].0 == Adj && entries[i + 1].0 == Noun {
            out.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    Some(out)
}

/// Generates `n` pairs for `task`, deterministically under `seed`.
pub fn generate_synthetic(task: Task, n: usize, max_len: usize, seed: u64) -> Result<Vec<TextPair>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    if max_len < 2 {
        return Err(Error::InvalidArgument("max_len must be at least 2".into()));
    }
    if task == Task::ToyGrammar && max_len < 3 {
        return Err(Error::InvalidArgument(
            "toy_grammar sentences need max_len >= 3".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let pair = match task {
            Task::Copy | Task::Reverse => {
                let len = rng.random_range(1..=max_len);
                let mut words: Vec<&str> = (0..len)
                    .map(|_| SYMBOL_ALPHABET[rng.random_range(0..SYMBOL_ALPHABET.len())])
                    .collect();
                let source = words.join(" ");
                if task == Task::Reverse {
                    words.reverse();
                }
                TextPair::new(source, words.join(" "))
            }
            Task::ToyGrammar => {
                let mut words = Vec::new();
                expand(Sentence, &mut rng, &mut words);
                if words.len() > max_len {
                    continue;
                }
                let target = toy_grammar_transduce(&words).expect("generated words are in the lexicon");
                TextPair::new(words.join(" "), target.join(" "))
            }
        };
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Training pairs under `seed`, and held-out pairs whose sources never
/// occur in the training set.
pub fn generate_split(
    task: Task,
    train_n: usize,
    dev_n: usize,
    max_len: usize,
    seed: u64,
) -> Result<(Vec<TextPair>, Vec<TextPair>)> {
    let train = generate_synthetic(task, train_n, max_len, seed)?;
    let seen: HashSet<&str> = train.iter().map(|p| p.source.as_str()).collect();
    let mut dev = Vec::with_capacity(dev_n);
    let mut round = 0u64;
    while dev.len() < dev_n {
        round += 1;
        if round > 64 {
            return Err(Error::InvalidArgument(format!(
                "could only find {} held-out {task} pairs unseen in training",
                dev.len()
            )));
        }
        let fresh = generate_synthetic(task, dev_n, max_len, seed ^ round.wrapping_mul(0x9e37_79b9_7f4a_7c15))?;
        dev.extend(
            fresh
                .into_iter()
                .filter(|p| !seen.contains(p.source.as_str()))
                .take(dev_n - dev.len()),
        );
    }
    Ok((train, dev))
}
