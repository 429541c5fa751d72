mod common;

use std::collections::HashMap;
use std::sync::Arc;

use ebmh::rng::derive;
use ebmh::{NgramModel, TokenSeq, Vocab};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Probability that ancestral sampling with cap `max_len` returns `seq`: the
/// full sequence probability below the cap, the prefix probability at it.
fn outcome_prob(m: &NgramModel, seq: &TokenSeq) -> f64 {
    let mut history = Vec::new();
    let mut p = 1.0;
    for &id in seq.ids() {
        p *= m.cond_prob(&m.context(&history), id);
        history.push(id);
    }
    if seq.len() < m.max_len() {
        p *= m.cond_prob(&m.context(&history), Vocab::EOS);
    }
    p
}

fn all_sequences(v: &Vocab, max_len: usize) -> Vec<TokenSeq> {
    let ids: Vec<_> = v.regular_ids().collect();
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|p: &Vec<_>| {
                ids.iter().map(move |&id| {
                    let mut q = p.clone();
                    q.push(id);
                    q
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out.into_iter().map(|ids| v.seq_from_ids(ids)).collect()
}

fn trigram_ab() -> NgramModel {
    let v = common::ab_vocab();
    let corpus = [v.tokenize("a b b"), v.tokenize("b a"), v.tokenize("a a b a"), v.tokenize("b")];
    NgramModel::train(&corpus, v, 3, 0.5).unwrap().with_max_len(4)
}

#[test]
fn enumerated_mass_is_one() {
    let m = trigram_ab();
    let seqs = all_sequences(m.vocab(), 4);
    assert_eq!(seqs.len(), 31);
    let total: f64 = seqs.iter().map(|s| outcome_prob(&m, s)).sum();
    assert!((total - 1.0).abs() < 1e-12, "{total}");
}

#[test]
fn ancestral_sampling_chi_square() {
    let m = trigram_ab();
    let seqs = all_sequences(m.vocab(), 4);
    let mut counts: HashMap<String, u64> = HashMap::new();
    let n = 100_000u64;
    let mut rng = derive(2024, 0);
    for _ in 0..n {
        *counts.entry(m.ancestral_sample(&mut rng).seq.text()).or_default() += 1;
    }
    let stat: f64 = seqs
        .iter()
        .map(|s| {
            let e = outcome_prob(&m, s) * n as f64;
            let o = counts.get(&s.text()).copied().unwrap_or(0) as f64;
            (o - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new((seqs.len() - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.001, "chi-square {stat}, p = {p}");
}

#[test]
fn log_prob_agrees_with_outcome_prob_below_cap() {
    let m = trigram_ab();
    for s in all_sequences(m.vocab(), 3) {
        assert!((m.log_prob(&s).exp() - outcome_prob(&m, &s)).abs() < 1e-14);
    }
}

#[test]
fn save_and_reload_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = trigram_ab();
    let path = dir.path().join("lm.json");
    m.save(&path, "lm.vocab.json").unwrap();
    let first = std::fs::read(&path).unwrap();
    let back = NgramModel::load(&path).unwrap();
    for s in all_sequences(m.vocab(), 3) {
        assert_eq!(m.log_prob(&s).to_bits(), back.log_prob(&s).to_bits());
    }
    back.save(&path, "lm.vocab.json").unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
}

proptest! {
    #[test]
    fn conditionals_normalize(k in 0.01f64..5.0, order in 1usize..4, seed in 0u64..1000) {
        let v = Arc::new(Vocab::from_tokens(common::WORDS, false).unwrap());
        let corpus = common::teacher_corpus(&v, 20, seed);
        let m = NgramModel::train(&corpus, v.clone(), order, k).unwrap();
        let mut rng = derive(seed, 1);
        let s = m.ancestral_sample(&mut rng).seq;
        for cut in 0..=s.len() {
            let d = m.distribution(&m.context(&s.ids()[..cut]));
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
