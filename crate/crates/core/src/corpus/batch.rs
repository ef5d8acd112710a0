use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::synthetic::TextPair;
use super::vocab::{TokenId, Vocab, EOS, LEN, PAD};
use crate::error::{Error, Result};

/// An encoded sentence pair without special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SentencePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SentencePair {
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::InvalidArgument(
                "sentence pairs must have non-empty source and target".into(),
            ));
        }
        if let Some(&id) = source
            .iter()
            .chain(&target)
            .find(|&&id| id as usize >= vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                size: vocab_size,
            });
        }
        Ok(Self { source, target })
    }

    pub fn encode(pair: &TextPair, vocab: &Vocab) -> Result<Self> {
        Self::new(
            vocab.encode(&pair.source),
            vocab.encode(&pair.target),
            vocab.len(),
        )
    }
}

pub fn encode_pairs(pairs: &[TextPair], vocab: &Vocab) -> Result<Vec<SentencePair>> {
    pairs.iter().map(|p| SentencePair::encode(p, vocab)).collect()
}

/// Samples the masked subset of a target of length `tgt_len`: a size `k`
/// uniform on `1..=tgt_len`, then a uniform `k`-subset. Returned sorted.
pub fn sample_mask<R: Rng + ?Sized>(tgt_len: usize, rng: &mut R) -> Result<Vec<usize>> {
    if tgt_len == 0 {
        return Err(Error::InvalidArgument(
            "cannot mask an empty target".into(),
        ));
    }
    let k = rng.random_range(1..=tgt_len);
    let mut picked = index::sample(rng, tgt_len, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Row-major matrix of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<TokenId>,
}

impl IdMatrix {
    fn padded(rows: &[Vec<TokenId>]) -> Self {
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut data = vec![PAD; rows.len() * cols];
        for (r, row) in rows.iter().enumerate() {
            data[r * cols..r * cols + row.len()].copy_from_slice(row);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// A padded training batch. Source rows start with `<LEN>`; target rows end
/// with `<EOS>`. Lengths include those tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: IdMatrix,
    pub tgt: IdMatrix,
    pub src_len: Vec<usize>,
    pub tgt_len: Vec<usize>,
    /// Sorted target indices forming the masked set, per row.
    pub mask_positions: Vec<Vec<usize>>,
    /// Index of each row's pair in the input slice.
    pub pair_index: Vec<usize>,
}

impl Batch {
    pub fn from_rows(
        sources: Vec<Vec<TokenId>>,
        targets: Vec<Vec<TokenId>>,
        mask_positions: Vec<Vec<usize>>,
        pair_index: Vec<usize>,
    ) -> Self {
        Self {
            src_len: sources.iter().map(Vec::len).collect(),
            tgt_len: targets.iter().map(Vec::len).collect(),
            src: IdMatrix::padded(&sources),
            tgt: IdMatrix::padded(&targets),
            mask_positions,
            pair_index,
        }
    }

    pub fn len(&self) -> usize {
        self.src_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_len.is_empty()
    }

    pub fn src_row(&self, r: usize) -> &[TokenId] {
        &self.src.row(r)[..self.src_len[r]]
    }

    pub fn tgt_row(&self, r: usize) -> &[TokenId] {
        &self.tgt.row(r)[..self.tgt_len[r]]
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_len.iter().sum()
    }

    pub fn masked_tokens(&self) -> usize {
        self.mask_positions.iter().map(Vec::len).sum()
    }

    /// Stable content hash for diagnostics.
    pub fn content_hash(&self) -> u64 {
        // FNV-1a
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x100000001b3);
        };
        for r in 0..self.len() {
            self.src_row(r).iter().for_each(|&t| feed(t as u64));
            feed(u64::MAX);
            self.tgt_row(r).iter().for_each(|&t| feed(t as u64));
            self.mask_positions[r].iter().for_each(|&p| feed(p as u64));
            feed(u64::MAX - 1);
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    /// Budget of padded target tokens per batch.
    pub batch_tokens: usize,
    /// Longest source accepted, excluding `<LEN>`.
    pub max_source_len: usize,
    /// Longest target accepted, including `<EOS>`.
    pub max_target_len: usize,
    /// When false the `<EOS>` slot is never masked.
    pub mask_eos: bool,
}

#[derive(Debug, Clone)]
pub struct Batches {
    pub batches: Vec<Batch>,
    /// Pairs dropped for exceeding the length limits.
    pub skipped: usize,
}

/// Groups pairs into length-bucketed batches under a padded target-token
/// budget, then samples a fresh mask for every row.
pub fn make_batches<R: Rng + ?Sized>(
    pairs: &[SentencePair],
    vocab: &Vocab,
    config: &BatchConfig,
    rng: &mut R,
) -> Result<Batches> {
    let mut order: Vec<usize> = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (i, p) in pairs.iter().enumerate() {
        if let Some(&id) = p
            .source
            .iter()
            .chain(&p.target)
            .find(|&&id| id as usize >= vocab.len())
        {
            return Err(Error::TokenOutOfRange {
                id,
                size: vocab.len(),
            });
        }
        if p.source.len() > config.max_source_len || p.target.len() + 1 > config.max_target_len {
            skipped += 1;
        } else {
            order.push(i);
        }
    }
    order.shuffle(rng);
    order.sort_by_key(|&i| (pairs[i].target.len(), pairs[i].source.len()));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut widest = 0;
    for i in order {
        let width = pairs[i].target.len() + 1;
        let grown = widest.max(width);
        if !current.is_empty() && (current.len() + 1) * grown > config.batch_tokens {
            groups.push(std::mem::take(&mut current));
            widest = 0;
        }
        widest = widest.max(width);
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(rng);

    let mut batches = Vec::with_capacity(groups.len());
    for group in groups {
        let mut sources = Vec::with_capacity(group.len());
        let mut targets = Vec::with_capacity(group.len());
        let mut masks = Vec::with_capacity(group.len());
        for &i in &group {
            let p = &pairs[i];
            let mut src = Vec::with_capacity(p.source.len() + 1);
            src.push(LEN);
            src.extend_from_slice(&p.source);
            let mut tgt = p.target.clone();
            tgt.push(EOS);
            let maskable = if config.mask_eos { tgt.len() } else { p.target.len() };
            masks.push(sample_mask(maskable, rng)?);
            sources.push(src);
            targets.push(tgt);
        }
        batches.push(Batch::from_rows(sources, targets, masks, group));
    }
    Ok(Batches { batches, skipped })
}
