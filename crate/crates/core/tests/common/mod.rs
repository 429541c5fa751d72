#![allow(dead_code)]

use std::sync::Arc;

use ebmh::rng::derive;
use ebmh::{NgramModel, TokenSeq, Vocab};
use rand::Rng;

pub fn ab_vocab() -> Arc<Vocab> {
    Arc::new(Vocab::from_tokens(["a", "b"], false).unwrap())
}

pub fn ab_bigram() -> Arc<NgramModel> {
    let v = ab_vocab();
    let corpus = [v.tokenize("a b"), v.tokenize("b b a"), v.tokenize("a")];
    Arc::new(NgramModel::train(&corpus, v, 2, 1.0).unwrap())
}

pub const WORDS: [&str; 10] = ["the", "cat", "dog", "sat", "on", "mat", "a", "ran", "fast", "slowly"];

/// Sentences from a random first-order Markov chain over `WORDS` with a
/// 0.15 stopping probability after each word.
pub fn teacher_corpus(vocab: &Vocab, n: usize, seed: u64) -> Vec<TokenSeq> {
    let mut rng = derive(seed, 0);
    let w = WORDS.len();
    let prefs: Vec<Vec<f64>> = (0..=w)
        .map(|_| (0..w).map(|_| rng.gen::<f64>().powi(3)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let mut prev = w;
            let mut out = Vec::new();
            loop {
                let p = &prefs[prev];
                let mut u = rng.gen::<f64>() * p.iter().sum::<f64>();
                let k = p
                    .iter()
                    .position(|&x| {
                        u -= x;
                        u <= 0.0
                    })
                    .unwrap_or(w - 1);
                out.push(WORDS[k]);
                prev = k;
                if rng.gen::<f64>() < 0.15 || out.len() >= 30 {
                    break;
                }
            }
            vocab.tokenize(&out.join(" "))
        })
        .collect()
}

pub fn word_vocab() -> Arc<Vocab> {
    Arc::new(Vocab::from_tokens(WORDS, false).unwrap())
}

/// Bigram target trained on 400 teacher sentences.
pub fn teacher_bigram() -> Arc<NgramModel> {
    let v = word_vocab();
    let corpus = teacher_corpus(&v, 400, 1);
    Arc::new(NgramModel::train(&corpus, v, 2, 0.1).unwrap())
}

/// A 13-token sentence from the teacher corpus.
pub fn thirteen_token_init(model: &NgramModel) -> TokenSeq {
    teacher_corpus(model.vocab(), 400, 1)
        .into_iter()
        .find(|s| s.len() == 13)
        .expect("teacher corpus has a 13-token sentence")
}
