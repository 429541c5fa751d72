//! Vocabulary, token sequences and whitespace tokenization.
//!
//! Every other module works on [`TokenSeq`] values produced here. A sequence
//! keeps both the token ids and the surface words, so out-of-vocabulary words
//! map to [`Vocab::UNK`] without losing the text that produced them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a [`Vocab`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token alphabet with reserved BOS, EOS and UNK markers.
///
/// Reserved markers always occupy ids 0, 1 and 2; regular tokens follow in
/// the order they were given, so the id assignment survives a save/load cycle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    lowercase: bool,
    min_count: u32,
}

/// On-disk vocabulary layout. Only regular tokens are listed.
#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    lowercase: bool,
    min_count: u32,
}

impl Vocab {
    pub const BOS: TokenId = TokenId(0);
    pub const EOS: TokenId = TokenId(1);
    pub const UNK: TokenId = TokenId(2);
    const RESERVED: usize = 3;

    /// Builds a vocabulary from an explicit list of regular tokens.
    pub fn from_tokens<I, S>(tokens: I, lowercase: bool) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::assemble(tokens.into_iter().map(Into::into).collect(), lowercase, 1)
    }

    fn assemble(regular: Vec<String>, lowercase: bool, min_count: u32) -> Result<Self> {
        let mut tokens = Vec::with_capacity(regular.len() + Self::RESERVED);
        tokens.extend([BOS_TOKEN, EOS_TOKEN, UNK_TOKEN].map(String::from));
        let mut index = HashMap::with_capacity(tokens.len() + regular.len());
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), TokenId(i as u32));
        }
        for tok in regular {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid token {tok:?}")));
            }
            if index.contains_key(&tok) {
                return Err(Error::Vocab(format!("duplicate token {tok:?}")));
            }
            index.insert(tok.clone(), TokenId(tokens.len() as u32));
            tokens.push(tok);
        }
        Ok(Vocab {
            tokens,
            index,
            lowercase,
            min_count,
        })
    }

    /// Collects every token with count ≥ `min_count`, ordered by descending
    /// count with ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: u32, lowercase: bool) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Vocab("empty corpus".into()));
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for line in corpus {
            for w in split_words(line.as_ref(), lowercase) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= u64::from(min_count) && !is_reserved(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::assemble(ranked.into_iter().map(|(w, _)| w).collect(), lowercase, min_count)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == Self::RESERVED
    }

    /// Number of regular (non-reserved) tokens.
    pub fn regular_len(&self) -> usize {
        self.tokens.len() - Self::RESERVED
    }

    /// Ids of the regular tokens, in id order.
    pub fn regular_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (Self::RESERVED..self.tokens.len()).map(|i| TokenId(i as u32))
    }

    pub fn is_regular(&self, id: TokenId) -> bool {
        id.index() >= Self::RESERVED && id.index() < self.tokens.len()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn min_count(&self) -> u32 {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    /// Splits on Unicode whitespace, optionally lowercases, and maps unknown
    /// words to [`Vocab::UNK`]. Never fails.
    pub fn tokenize(&self, text: &str) -> TokenSeq {
        let words = split_words(text, self.lowercase);
        let ids = words
            .iter()
            .map(|w| match self.index.get(w.as_str()) {
                Some(&id) if id != Self::BOS && id != Self::EOS => id,
                _ => Self::UNK,
            })
            .collect();
        TokenSeq { ids, words }
    }

    /// Builds a sequence from ids; the surface form is each id's token string.
    pub fn seq_from_ids(&self, ids: Vec<TokenId>) -> TokenSeq {
        let words = ids
            .iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN).to_owned())
            .collect();
        TokenSeq { ids, words }
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            tokens: self.tokens[Self::RESERVED..].to_vec(),
            lowercase: self.lowercase,
            min_count: self.min_count,
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        Self::assemble(file.tokens, file.lowercase, file.min_count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_text(path)?)
    }
}

fn is_reserved(w: &str) -> bool {
    matches!(w, BOS_TOKEN | EOS_TOKEN | UNK_TOKEN)
}

fn split_words(text: &str, lowercase: bool) -> Vec<String> {
    text.split_whitespace()
        .map(|w| if lowercase { w.to_lowercase() } else { w.to_owned() })
        .collect()
}

/// Collapses whitespace runs to single spaces and optionally lowercases.
pub fn normalize(text: &str, lowercase: bool) -> String {
    split_words(text, lowercase).join(" ")
}

/// An ordered token sequence: the state of a Markov chain.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
    words: Vec<String>,
}

impl TokenSeq {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Whitespace-normalized surface text.
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    /// Prefix of the first `end` tokens.
    pub fn prefix(&self, end: usize) -> TokenSeq {
        TokenSeq {
            ids: self.ids[..end].to_vec(),
            words: self.words[..end].to_vec(),
        }
    }

    /// Replaces `self[start..start + old_len]` with the given tokens.
    pub fn splice(&self, start: usize, old_len: usize, ids: &[TokenId], vocab: &Vocab) -> TokenSeq {
        let end = start + old_len;
        let mut out_ids = Vec::with_capacity(self.len() - old_len + ids.len());
        out_ids.extend_from_slice(&self.ids[..start]);
        out_ids.extend_from_slice(ids);
        out_ids.extend_from_slice(&self.ids[end..]);
        let mut words = Vec::with_capacity(out_ids.len());
        words.extend_from_slice(&self.words[..start]);
        words.extend(ids.iter().map(|&id| vocab.token(id).unwrap_or(UNK_TOKEN).to_owned()));
        words.extend_from_slice(&self.words[end..]);
        TokenSeq { ids: out_ids, words }
    }

    /// Replaces the token at `pos`.
    pub fn with_token(&self, pos: usize, id: TokenId, vocab: &Vocab) -> TokenSeq {
        self.splice(pos, 1, &[id], vocab)
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Inverse of [`Vocab::tokenize`] on normalized text.
pub fn detokenize(seq: &TokenSeq) -> String {
    seq.text()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shakespeare_vocab() -> Vocab {
        Vocab::from_tokens(["how", "art", "thou"], false).unwrap()
    }

    #[test]
    fn whitespace_split() {
        let v = shakespeare_vocab();
        let s = v.tokenize("how art thou");
        assert_eq!(s.words(), ["how", "art", "thou"]);
        assert!(s.ids().iter().all(|&id| v.is_regular(id)));
    }

    #[test]
    fn empty_input_gives_empty_seq() {
        let s = shakespeare_vocab().tokenize("");
        assert!(s.is_empty());
        assert_eq!(s.text(), "");
    }

    #[test]
    fn oov_maps_to_unk_and_keeps_surface() {
        let v = shakespeare_vocab();
        let s = v.tokenize("how zzz thou");
        assert_eq!(s.ids()[1], Vocab::UNK);
        assert_eq!(s.ids()[0], v.id("how").unwrap());
        assert_eq!(s.text(), "how zzz thou");
    }

    #[test]
    fn reserved_markers_in_text_are_not_boundaries() {
        let v = shakespeare_vocab();
        let s = v.tokenize("<s> how </s>");
        assert_eq!(s.ids()[0], Vocab::UNK);
        assert_eq!(s.ids()[2], Vocab::UNK);
    }

    #[test]
    fn build_min_count() {
        let v = Vocab::build(&["a b", "a"], 1, false).unwrap();
        assert_eq!(v.regular_len(), 2);
        assert_eq!(v.token(TokenId(3)), Some("a"));
        assert_eq!(v.token(TokenId(4)), Some("b"));

        let v = Vocab::build(&["a b", "a"], 2, false).unwrap();
        assert_eq!(v.regular_len(), 1);
        assert!(v.id("b").is_none());
    }

    #[test]
    fn build_ties_are_lexicographic() {
        let v = Vocab::build(&["zeta alpha mid", "mid"], 1, false).unwrap();
        let order: Vec<_> = v.regular_ids().map(|id| v.token(id).unwrap()).collect();
        assert_eq!(order, ["mid", "alpha", "zeta"]);
    }

    #[test]
    fn build_empty_corpus_errors() {
        let err = Vocab::build::<&str>(&[], 1, false).unwrap_err();
        assert!(err.to_string().contains("empty corpus"));
    }

    #[test]
    fn lowercase_flag() {
        let v = Vocab::build(&["How ART thou"], 1, true).unwrap();
        let s = v.tokenize("HOW Art   thou");
        assert_eq!(s.text(), "how art thou");
        assert!(!s.ids().contains(&Vocab::UNK));
    }

    #[test]
    fn save_load_keeps_ids() {
        let v = Vocab::build(&["b a c", "c"], 1, true).unwrap();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.id(BOS_TOKEN), Some(Vocab::BOS));
        assert_eq!(back.id(EOS_TOKEN), Some(Vocab::EOS));
        assert_eq!(back.id(UNK_TOKEN), Some(Vocab::UNK));
    }

    #[test]
    fn serialization_is_deterministic() {
        let corpus = ["the cat sat", "the dog sat", "a cat"];
        let a = Vocab::build(&corpus, 1, false).unwrap().to_json();
        let b = Vocab::build(&corpus, 1, false).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_tokens_rejected() {
        assert!(Vocab::from_tokens(["a", "a"], false).is_err());
    }

    #[test]
    fn splice_replaces_span() {
        let v = Vocab::from_tokens(["a", "b", "c"], false).unwrap();
        let s = v.tokenize("a b c");
        let c = v.id("c").unwrap();
        let out = s.splice(1, 1, &[c, c], &v);
        assert_eq!(out.text(), "a c c c");
        assert_eq!(s.splice(3, 0, &[], &v), s);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip(words in proptest::collection::vec(0usize..4, 0..12)) {
                let v = Vocab::from_tokens(["w0", "w1", "w2", "w3"], false).unwrap();
                let text = words.iter().map(|i| format!("w{i}")).collect::<Vec<_>>().join("  ");
                let seq = v.tokenize(&text);
                prop_assert_eq!(detokenize(&seq), normalize(&text, false));
                prop_assert_eq!(v.tokenize(&detokenize(&seq)), seq);
            }
        }
    }
}
