//! Add-k smoothed n-gram language model.
//!
//! The model is a tractable target: it gives exact sequence likelihoods,
//! exact ancestral samples, and the exact conditional span distribution used
//! by the span-block proposal.
//!
//! The support of every conditional is the regular vocabulary plus EOS, so
//! `P(w | c) = (count(c, w) + k) / (count(c) + k * (|V| + 1))`. Contexts are the
//! previous `order - 1` tokens of the BOS-padded history. UNK never appears in
//! the support: occurrences of UNK in training text are skipped as prediction
//! events (they still count as context), and scoring an UNK token uses the
//! unseen-event floor `k / (count(c) + k * (|V| + 1))`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::ChainRng;
use crate::seq::{TokenId, TokenSeq, Vocab, BOS_TOKEN};

pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<TokenId, u64>,
}

#[derive(Clone, Debug)]
pub struct NgramModel {
    order: usize,
    k: f64,
    max_len: usize,
    vocab: Arc<Vocab>,
    counts: HashMap<Vec<TokenId>, ContextCounts>,
}

/// An ancestral sample. `truncated` is set when generation hit `max_len`
/// before drawing EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seq: TokenSeq,
    pub truncated: bool,
}

impl NgramModel {
    pub fn train(corpus: &[TokenSeq], vocab: Arc<Vocab>, order: usize, k: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Ngram("order must be at least 1".into()));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::Ngram(format!("smoothing constant must be positive, got {k}")));
        }
        if corpus.is_empty() {
            return Err(Error::Ngram("empty corpus".into()));
        }
        let mut model = NgramModel {
            order,
            k,
            max_len: DEFAULT_MAX_LEN,
            vocab,
            counts: HashMap::new(),
        };
        let mut history = Vec::new();
        for seq in corpus {
            history.clear();
            history.extend(seq.ids().iter().copied());
            history.push(Vocab::EOS);
            for (pos, &next) in history.iter().enumerate() {
                if next == Vocab::UNK || !(next == Vocab::EOS || model.vocab.is_regular(next)) {
                    continue;
                }
                let ctx = model.context(&history[..pos]);
                let entry = model.counts.entry(ctx).or_default();
                entry.total += 1;
                *entry.next.entry(next).or_default() += 1;
            }
        }
        Ok(model)
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    /// Size of the conditional support: regular tokens plus EOS.
    pub fn support_size(&self) -> usize {
        self.vocab.regular_len() + 1
    }

    /// Support ids in the order used by [`NgramModel::distribution`]:
    /// regular tokens by id, then EOS.
    pub fn support(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.vocab.regular_ids().chain(std::iter::once(Vocab::EOS))
    }

    /// The last `order - 1` tokens of `history`, left-padded with BOS.
    pub fn context(&self, history: &[TokenId]) -> Vec<TokenId> {
        let n = self.order - 1;
        let mut ctx = Vec::with_capacity(n);
        let have = history.len().min(n);
        ctx.extend(std::iter::repeat_n(Vocab::BOS, n - have));
        ctx.extend_from_slice(&history[history.len() - have..]);
        ctx
    }

    fn counts_for(&self, ctx: &[TokenId]) -> (u64, Option<&ContextCounts>) {
        match self.counts.get(ctx) {
            Some(c) => (c.total, Some(c)),
            None => (0, None),
        }
    }

    /// `P(next | ctx)` where `ctx` is exactly `order - 1` tokens.
    pub fn cond_prob(&self, ctx: &[TokenId], next: TokenId) -> f64 {
        let (total, counts) = self.counts_for(ctx);
        let c = counts.and_then(|c| c.next.get(&next)).copied().unwrap_or(0);
        let c = if next == Vocab::UNK || next == Vocab::BOS { 0 } else { c };
        (c as f64 + self.k) / (total as f64 + self.k * self.support_size() as f64)
    }

    pub fn cond_log_prob(&self, ctx: &[TokenId], next: TokenId) -> f64 {
        self.cond_prob(ctx, next).ln()
    }

    /// Full conditional over [`NgramModel::support`].
    pub fn distribution(&self, ctx: &[TokenId]) -> Vec<f64> {
        let (total, counts) = self.counts_for(ctx);
        let denom = total as f64 + self.k * self.support_size() as f64;
        self.support()
            .map(|id| {
                let c = counts.and_then(|c| c.next.get(&id)).copied().unwrap_or(0);
                (c as f64 + self.k) / denom
            })
            .collect()
    }

    /// Natural-log probability of `seq` followed by EOS.
    pub fn log_prob(&self, seq: &TokenSeq) -> f64 {
        let mut history: Vec<TokenId> = Vec::with_capacity(seq.len() + 1);
        let mut lp = 0.0;
        for &id in seq.ids().iter().chain(std::iter::once(&Vocab::EOS)) {
            lp += self.cond_log_prob(&self.context(&history), id);
            history.push(id);
        }
        lp
    }

    /// Draws left to right from the exact conditionals until EOS or
    /// `max_len` tokens.
    pub fn ancestral_sample(&self, rng: &mut ChainRng) -> Sample {
        let support: Vec<TokenId> = self.support().collect();
        let mut ids = Vec::new();
        loop {
            if ids.len() >= self.max_len {
                return Sample {
                    seq: self.vocab.seq_from_ids(ids),
                    truncated: true,
                };
            }
            let probs = self.distribution(&self.context(&ids));
            let next = support[draw_index(&probs, 1.0, rng)];
            if next == Vocab::EOS {
                return Sample {
                    seq: self.vocab.seq_from_ids(ids),
                    truncated: false,
                };
            }
            ids.push(next);
        }
    }

    /// Samples exactly `length` tokens after `left`, with EOS removed from
    /// the support and the remaining mass renormalized. Returns the tokens
    /// and their log-probability under that renormalized distribution.
    pub fn generate_span(&self, left: &[TokenId], length: usize, rng: &mut ChainRng) -> (Vec<TokenId>, f64) {
        let n_regular = self.vocab.regular_len();
        if length == 0 {
            return (Vec::new(), 0.0);
        }
        assert!(n_regular > 0, "span generation needs a non-empty vocabulary");
        let mut history = left.to_vec();
        let mut out = Vec::with_capacity(length);
        let mut lp = 0.0;
        for _ in 0..length {
            let probs = self.distribution(&self.context(&history));
            let mass: f64 = probs[..n_regular].iter().sum();
            let idx = draw_index(&probs[..n_regular], mass, rng);
            let id = self.vocab.regular_ids().nth(idx).expect("index within support");
            lp += (probs[idx] / mass).ln();
            history.push(id);
            out.push(id);
        }
        (out, lp)
    }

    /// Log-probability of `tokens` after `left` under the same EOS-excluded
    /// conditionals as [`NgramModel::generate_span`]. Tokens outside the
    /// regular vocabulary have probability zero.
    pub fn score_span(&self, left: &[TokenId], tokens: &[TokenId]) -> f64 {
        let mut history = left.to_vec();
        let mut lp = 0.0;
        for &id in tokens {
            if !self.vocab.is_regular(id) {
                return f64::NEG_INFINITY;
            }
            let ctx = self.context(&history);
            let p_eos = self.cond_prob(&ctx, Vocab::EOS);
            lp += self.cond_log_prob(&ctx, id) - (1.0 - p_eos).ln();
            history.push(id);
        }
        lp
    }

    pub fn to_file(&self, vocab_ref: &str) -> NgramFile {
        let tok = |id: TokenId| self.vocab.token(id).unwrap_or(BOS_TOKEN).to_owned();
        let mut sorted: BTreeMap<&Vec<TokenId>, &ContextCounts> = BTreeMap::new();
        sorted.extend(self.counts.iter());
        let counts = sorted
            .into_iter()
            .map(|(ctx, cc)| {
                let mut next: Vec<(TokenId, u64)> = cc.next.iter().map(|(&k, &v)| (k, v)).collect();
                next.sort();
                (
                    ctx.iter().map(|&id| tok(id)).collect(),
                    next.into_iter().map(|(id, c)| (tok(id), c)).collect(),
                )
            })
            .collect();
        NgramFile {
            order: self.order,
            k: self.k,
            max_len: self.max_len,
            vocab_ref: vocab_ref.to_owned(),
            counts,
        }
    }

    pub fn from_file(file: NgramFile, vocab: Arc<Vocab>) -> Result<Self> {
        if file.order == 0 || file.k.is_nan() || file.k <= 0.0 {
            return Err(Error::Ngram("order must be ≥ 1 and k > 0".into()));
        }
        let lookup = |t: &str| {
            vocab
                .id(t)
                .ok_or_else(|| Error::Ngram(format!("token {t:?} missing from vocabulary")))
        };
        let mut counts = HashMap::with_capacity(file.counts.len());
        for (ctx, next) in &file.counts {
            if ctx.len() != file.order - 1 {
                return Err(Error::Ngram(format!("context {ctx:?} has wrong length")));
            }
            let ctx = ctx.iter().map(|t| lookup(t)).collect::<Result<Vec<_>>>()?;
            let mut cc = ContextCounts::default();
            for (t, c) in next {
                cc.total += c;
                cc.next.insert(lookup(t)?, *c);
            }
            counts.insert(ctx, cc);
        }
        Ok(NgramModel {
            order: file.order,
            k: file.k,
            max_len: file.max_len,
            vocab,
            counts,
        })
    }

    /// Writes the model; the vocabulary goes to `vocab_ref`, resolved
    /// relative to the model file.
    pub fn save(&self, path: &Path, vocab_ref: &str) -> Result<()> {
        self.vocab.save(&crate::io::resolve(path, vocab_ref))?;
        let text = serde_json::to_string(&self.to_file(vocab_ref))?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: NgramFile = serde_json::from_str(&crate::io::read_text(path)?)?;
        let vocab = Vocab::load(&crate::io::resolve(path, &file.vocab_ref))?;
        Self::from_file(file, Arc::new(vocab))
    }
}

/// Serialized model layout. `counts` pairs each context (as token strings)
/// with its `[token, count]` continuations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NgramFile {
    pub order: usize,
    pub k: f64,
    pub max_len: usize,
    pub vocab_ref: String,
    pub counts: Vec<CountRow>,
}

/// A context and the counts of the tokens that followed it.
pub type CountRow = (Vec<String>, Vec<(String, u64)>);

/// Inverse-CDF draw from unnormalized weights with the given total.
pub(crate) fn draw_index(weights: &[f64], total: f64, rng: &mut ChainRng) -> usize {
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}
