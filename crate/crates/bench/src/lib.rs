//! Benchmarks for the sampler live in `benches/`. This library only builds
//! the shared fixtures.

use std::sync::Arc;

use ebmh::rng::derive;
use ebmh::{NgramModel, TokenSeq, Vocab};

const WORDS: [&str; 8] = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran"];

/// A trigram over eight words trained on random sentences.
pub fn fixture_model() -> Arc<NgramModel> {
    use rand::Rng as _;
    let vocab = Arc::new(Vocab::from_tokens(WORDS, false).expect("vocab"));
    let mut rng = derive(7, 0);
    let corpus: Vec<TokenSeq> = (0..500)
        .map(|_| {
            let n = rng.gen_range(3..12);
            let line: Vec<&str> = (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
            vocab.tokenize(&line.join(" "))
        })
        .collect();
    Arc::new(NgramModel::train(&corpus, vocab, 3, 0.1).expect("train"))
}

pub fn fixture_seq(model: &NgramModel, len: usize) -> TokenSeq {
    let words: Vec<&str> = (0..len).map(|i| WORDS[i % WORDS.len()]).collect();
    model.vocab().tokenize(&words.join(" "))
}
