//! Downstream metrics, significance testing and intrinsic sampler evaluation.

use std::borrow::Borrow;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{SimilarityScorer, StyleClassifier};
use crate::error::{Error, Result};
use crate::mh::Sampler;
use crate::ngram::NgramModel;
use crate::rng::derive;
use crate::seq::{TokenSeq, Vocab};
use crate::EnergySpec;

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const MIN_RESAMPLES: usize = 1_000;
/// Fraction of training sentences the calibrated fluency threshold lets pass.
pub const DEFAULT_FLUENCY_QUANTILE: f64 = 0.9;

/// One judged test item.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub source: TokenSeq,
    pub output: TokenSeq,
    pub target: TokenSeq,
    pub acc: bool,
    pub fl: bool,
    pub sim: f64,
}

impl EvalRecord {
    /// A record with empty texts, for metric arithmetic.
    pub fn scores(acc: bool, sim: f64, fl: bool) -> Self {
        EvalRecord {
            source: TokenSeq::empty(),
            output: TokenSeq::empty(),
            target: TokenSeq::empty(),
            acc,
            fl,
            sim,
        }
    }

    /// `acc · sim · fl`.
    pub fn joint(&self) -> f64 {
        if self.acc && self.fl {
            self.sim
        } else {
            0.0
        }
    }
}

fn mean_of<R: Borrow<EvalRecord>>(records: &[R], f: impl Fn(&EvalRecord) -> f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Eval("no records".into()));
    }
    Ok(records.iter().map(|r| f(r.borrow())).sum::<f64>() / records.len() as f64)
}

/// Mean over items of `acc · sim · fl`.
pub fn j_score<R: Borrow<EvalRecord>>(records: &[R]) -> Result<f64> {
    mean_of(records, EvalRecord::joint)
}

pub fn mean_acc<R: Borrow<EvalRecord>>(records: &[R]) -> Result<f64> {
    mean_of(records, |r| r.acc as u8 as f64)
}

pub fn mean_fl<R: Borrow<EvalRecord>>(records: &[R]) -> Result<f64> {
    mean_of(records, |r| r.fl as u8 as f64)
}

pub fn mean_sim<R: Borrow<EvalRecord>>(records: &[R]) -> Result<f64> {
    mean_of(records, |r| r.sim)
}

// ---------------------------------------------------------------------------
// Judges

/// Binary fluency decision for one output.
pub trait FluencyJudge: Send + Sync {
    fn passes(&self, seq: &TokenSeq) -> Result<bool>;
}

/// Passes sentences whose per-token negative log-likelihood (end marker
/// included) under an n-gram model is below a threshold.
#[derive(Clone, Debug)]
pub struct NgramFluency {
    pub model: Arc<NgramModel>,
    pub threshold: f64,
}

impl NgramFluency {
    pub fn new(model: Arc<NgramModel>, threshold: f64) -> Self {
        NgramFluency { model, threshold }
    }

    pub fn per_token_nll(&self, seq: &TokenSeq) -> f64 {
        let seq = retokenize(seq, self.model.vocab());
        -self.model.log_prob(&seq) / (seq.len() + 1) as f64
    }

    /// Sets the threshold so that about `quantile` of `corpus` passes.
    pub fn calibrate<S: AsRef<str>>(model: Arc<NgramModel>, corpus: &[S], quantile: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Eval("fluency calibration corpus is empty".into()));
        }
        if !(0.0..=1.0).contains(&quantile) {
            return Err(Error::Config(format!("fluency quantile {quantile} is outside [0, 1]")));
        }
        let mut judge = NgramFluency::new(model, f64::INFINITY);
        let mut nll: Vec<f64> = corpus
            .iter()
            .map(|s| judge.per_token_nll(&judge.model.vocab().tokenize(s.as_ref())))
            .collect();
        nll.sort_by(f64::total_cmp);
        let rank = ((quantile * nll.len() as f64).ceil() as usize).clamp(1, nll.len());
        let q = nll[rank - 1];
        judge.threshold = q + 1e-9 * q.abs().max(1.0);
        Ok(judge)
    }
}

impl FluencyJudge for NgramFluency {
    fn passes(&self, seq: &TokenSeq) -> Result<bool> {
        let nll = self.per_token_nll(seq);
        if nll.is_nan() {
            return Err(Error::Eval("fluency score is NaN".into()));
        }
        Ok(nll < self.threshold)
    }
}

fn retokenize(seq: &TokenSeq, vocab: &Vocab) -> TokenSeq {
    vocab.tokenize(&seq.text())
}

/// The three judges behind an [`EvalRecord`].
pub struct Judges {
    pub classifier: Arc<StyleClassifier>,
    pub target_label: String,
    pub fluency: Arc<dyn FluencyJudge>,
    pub similarity: SimilarityScorer,
}

impl Judges {
    /// `acc` needs a target-style posterior strictly above 0.5; `sim` compares
    /// the output with the reference transfer.
    pub fn judge(&self, source: TokenSeq, output: TokenSeq, target: TokenSeq) -> Result<EvalRecord> {
        let judge_err = |judge: &str| {
            let judge = judge.to_owned();
            move |e: Error| Error::Judge {
                judge,
                message: e.to_string(),
            }
        };
        let posterior = self
            .classifier
            .posterior(&output, &self.target_label)
            .map_err(judge_err("acc"))?;
        let fl = self.fluency.passes(&output).map_err(judge_err("fl"))?;
        let sim = self.similarity.score(&target, &output).map_err(judge_err("sim"))?;
        Ok(EvalRecord {
            source,
            output,
            target,
            acc: posterior > 0.5,
            fl,
            sim,
        })
    }
}

// ---------------------------------------------------------------------------
// Paired bootstrap

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub p_value: f64,
    pub significant: bool,
    pub resamples: usize,
}

/// Tests whether system `a` beats `b` on `metric`. Items are resampled with
/// replacement, jointly for both systems; the p-value is the fraction of
/// resamples on which `a` does not win (ties count against `a`).
///
/// Resample `r` uses the stream `(seed, r)`, so the result does not depend
/// on the thread pool.
pub fn paired_bootstrap<F>(
    a: &[EvalRecord],
    b: &[EvalRecord],
    metric: F,
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapResult>
where
    F: Fn(&[&EvalRecord]) -> f64 + Sync,
{
    if a.len() != b.len() {
        return Err(Error::Eval(format!(
            "paired bootstrap needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Eval("no records".into()));
    }
    if resamples < MIN_RESAMPLES {
        return Err(Error::Config(format!("resamples must be at least {MIN_RESAMPLES}, got {resamples}")));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1), got {alpha}")));
    }
    let n = a.len();
    let losses: usize = (0..resamples)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(n), Vec::with_capacity(n)),
            |(ra, rb), r| {
                let mut rng = derive(seed, r as u64);
                ra.clear();
                rb.clear();
                for _ in 0..n {
                    let i = rng.gen_range(0..n);
                    ra.push(&a[i]);
                    rb.push(&b[i]);
                }
                (metric(ra) <= metric(rb)) as usize
            },
        )
        .sum();
    let p_value = losses as f64 / resamples as f64;
    Ok(BootstrapResult {
        p_value,
        significant: p_value < alpha,
        resamples,
    })
}

/// [`paired_bootstrap`] with the J-score as metric.
pub fn paired_bootstrap_j(
    a: &[EvalRecord],
    b: &[EvalRecord],
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    paired_bootstrap(a, b, |r| j_score(r).unwrap_or(0.0), resamples, alpha, seed)
}

// ---------------------------------------------------------------------------
// TSV input

/// One `source \t output \t target` row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TsvRow {
    pub source: String,
    pub output: String,
    pub target: String,
}

/// Parses the evaluation TSV. A first line equal to
/// `source\toutput\ttarget` is treated as a header; blank lines are skipped.
pub fn parse_tsv(text: &str, path: &Path) -> Result<Vec<TsvRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if i == 0 && fields == ["source", "output", "target"] {
            continue;
        }
        let [source, output, target] = fields[..] else {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        rows.push(TsvRow {
            source: source.to_owned(),
            output: output.to_owned(),
            target: target.to_owned(),
        });
    }
    Ok(rows)
}

pub fn load_tsv(path: &Path) -> Result<Vec<TsvRow>> {
    parse_tsv(&crate::io::read_text(path)?, path)
}

/// Judges every row.
pub fn judge_rows(rows: &[TsvRow], judges: &Judges, vocab: &Vocab) -> Result<Vec<EvalRecord>> {
    rows.iter()
        .map(|r| judges.judge(vocab.tokenize(&r.source), vocab.tokenize(&r.output), vocab.tokenize(&r.target)))
        .collect()
}

/// Aggregate metrics of one system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub j: f64,
    pub acc: f64,
    pub sim: f64,
    pub fl: f64,
}

impl Metrics {
    pub fn of(records: &[EvalRecord]) -> Result<Self> {
        Ok(Metrics {
            n: records.len(),
            j: j_score(records)?,
            acc: mean_acc(records)?,
            sim: mean_sim(records)?,
            fl: mean_fl(records)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Intrinsic evaluation

/// A sampler under intrinsic evaluation.
#[derive(Clone, Debug)]
pub enum IntrinsicSampler {
    /// `n` exact ancestral samples from the target model.
    Exact { n: usize, seed: u64 },
    /// One sample per chain: the final state of each of `batch_size` chains.
    Mh { sampler: Sampler, init: TokenSeq },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    pub stddev: f64,
    pub stderr: f64,
    /// Target-energy evaluations spent (steps × chains for MH samplers,
    /// zero for exact sampling).
    pub forward_passes: u64,
    /// Steps per chain, for MH samplers.
    pub steps: Option<usize>,
    /// Samples stopped at the model's length cap (exact sampling only).
    pub truncated: usize,
    pub errors: Vec<String>,
    pub energies: Vec<f64>,
}

impl SampleSet {
    fn new(name: &str, energies: Vec<f64>, forward_passes: u64, steps: Option<usize>) -> Self {
        let n = energies.len();
        let mean = energies.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 {
            energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        SampleSet {
            name: name.to_owned(),
            n,
            mean,
            stddev: var.sqrt(),
            stderr: (var / n.max(1) as f64).sqrt(),
            forward_passes,
            steps,
            truncated: 0,
            errors: Vec::new(),
            energies,
        }
    }

    /// Absolute gap between this set's mean energy and `reference`'s.
    pub fn mean_gap(&self, reference: &SampleSet) -> f64 {
        (self.mean - reference.mean).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicReport {
    pub exact: SampleSet,
    pub samplers: Vec<SampleSet>,
}

impl IntrinsicReport {
    pub fn sampler(&self, name: &str) -> Option<&SampleSet> {
        self.samplers.iter().find(|s| s.name == name)
    }

    /// Rows of `sampler,sample_id,energy`, exact samples first.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("sampler,sample_id,energy\n");
        for set in std::iter::once(&self.exact).chain(&self.samplers) {
            for (i, e) in set.energies.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", csv_field(&set.name), i, e));
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Draws `n` ancestral samples; sample `i` uses the stream `(seed, i)`.
pub fn exact_samples(model: &NgramModel, n: usize, seed: u64) -> Vec<(TokenSeq, bool)> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = model.ancestral_sample(&mut derive(seed, i as u64));
            (s.seq, s.truncated)
        })
        .collect()
}

/// Compares samplers against exact samples from `model`, scoring every
/// sample under `target` (normally the model's negative log-likelihood).
pub fn intrinsic_eval(
    model: &NgramModel,
    target: &EnergySpec,
    samplers: &[(String, IntrinsicSampler)],
    exact_n: usize,
    seed: u64,
) -> Result<IntrinsicReport> {
    if exact_n == 0 {
        return Err(Error::Config("exact_n must be at least 1".into()));
    }
    let exact_set = |name: &str, n: usize, seed: u64| -> Result<SampleSet> {
        let samples = exact_samples(model, n, seed);
        let energies = samples.iter().map(|(s, _)| target.total_energy(s)).collect::<Result<Vec<_>>>()?;
        let mut set = SampleSet::new(name, energies, 0, None);
        set.truncated = samples.iter().filter(|(_, t)| *t).count();
        Ok(set)
    };
    let exact = exact_set("exact", exact_n, seed)?;
    let mut sets = Vec::with_capacity(samplers.len());
    for (name, s) in samplers {
        let set = match s {
            IntrinsicSampler::Exact { n, seed } => exact_set(name, *n, *seed)?,
            IntrinsicSampler::Mh { sampler, init } => {
                let result = sampler.run_batch(init);
                let mut energies = Vec::with_capacity(result.chains.len());
                let mut errors: Vec<String> = result.init_errors.iter().map(|(id, e)| format!("chain {id}: {e}")).collect();
                for c in &result.chains {
                    match &c.error {
                        Some(e) => errors.push(format!("chain {}: {e}", c.chain_id)),
                        None => energies.push(target.total_energy(&c.state.seq)?),
                    }
                }
                if energies.is_empty() {
                    return Err(Error::Eval(format!("sampler `{name}`: every chain failed: {}", errors.join("; "))));
                }
                let passes = (sampler.steps as u64) * (sampler.batch_size as u64);
                let mut set = SampleSet::new(name, energies, passes, Some(sampler.steps));
                set.errors = errors;
                set
            }
        };
        sets.push(set);
    }
    Ok(IntrinsicReport { exact, samplers: sets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn recs(v: &[(u8, f64, u8)]) -> Vec<EvalRecord> {
        v.iter().map(|&(a, s, f)| EvalRecord::scores(a == 1, s, f == 1)).collect()
    }

    #[test]
    fn j_score_hand_example() {
        let r = recs(&[(1, 0.5, 1), (0, 0.9, 1), (1, 0.4, 0)]);
        assert!((j_score(&r).unwrap() - 0.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn j_score_degenerate() {
        assert_eq!(j_score(&recs(&[(0, 0.3, 1), (0, 1.0, 1)])).unwrap(), 0.0);
        let r = recs(&[(1, 0.3, 1), (1, 0.6, 1)]);
        assert_eq!(j_score(&r).unwrap(), mean_sim(&r).unwrap());
        assert!(j_score::<EvalRecord>(&[]).is_err());
    }

    #[test]
    fn bootstrap_basics() {
        let a = recs(&[(1, 0.9, 1); 30]);
        let b = recs(&[(1, 0.1, 1); 30]);
        let r = paired_bootstrap_j(&a, &b, 1000, 0.05, 1).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert!(r.significant);
        let same = paired_bootstrap_j(&a, &a, 1000, 0.05, 1).unwrap();
        assert_eq!(same.p_value, 1.0);
        assert!(!same.significant);
        assert!(paired_bootstrap_j(&a, &b[..3], 1000, 0.05, 1).is_err());
        assert!(paired_bootstrap_j(&a, &b, 10, 0.05, 1).is_err());
    }

    #[test]
    fn bootstrap_symmetry_without_ties() {
        let d = [2f64.sqrt() - 1.0, -(3f64.sqrt()) / 10.0, 5f64.sqrt() / 10.0, 7f64.sqrt() / 37.0, -(11f64.sqrt()) / 105.0];
        let a: Vec<_> = d.iter().map(|x| EvalRecord::scores(true, 0.5 + x, true)).collect();
        let b = recs(&[(1, 0.5, 1); 5]);
        let ab = paired_bootstrap_j(&a, &b, 2000, 0.05, 7).unwrap();
        let ba = paired_bootstrap_j(&b, &a, 2000, 0.05, 7).unwrap();
        // ties need every resampled delta sum to vanish, which these values rule out
        assert_relative_eq!(ab.p_value + ba.p_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn tsv_parsing() {
        let p = Path::new("x.tsv");
        let rows = parse_tsv("source\toutput\ttarget\na\tb\tc\n\nd\te\tf\r\n", p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].target, "f");
        let err = parse_tsv("a\tb\tc\na\tb\n", p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(parse_tsv("", p).unwrap().is_empty());
    }

    fn toy_model() -> Arc<NgramModel> {
        let v = Arc::new(Vocab::from_tokens(["a", "b"], false).unwrap());
        let corpus = [v.tokenize("a b"), v.tokenize("a a b"), v.tokenize("b")];
        Arc::new(NgramModel::train(&corpus, v, 2, 0.5).unwrap())
    }

    #[test]
    fn fluency_calibration_passes_about_ninety_percent() {
        let m = toy_model();
        let corpus: Vec<String> = (0..20).map(|i| ["a b", "a a b", "b", "b b b a", "a"][i % 5].to_owned()).collect();
        let judge = NgramFluency::calibrate(m, &corpus, 0.9).unwrap();
        let v = judge.model.vocab().clone();
        let passed = corpus.iter().filter(|s| judge.passes(&v.tokenize(s)).unwrap()).count();
        assert!(passed >= 18, "{passed}");
    }

    #[test]
    fn judge_boundaries() {
        let clf = StyleClassifier::from_unigram_probs(
            ["A", "B"],
            [&[("a", 0.8), ("b", 0.2)], &[("a", 0.2), ("b", 0.8)]],
            0.01,
        );
        let m = toy_model();
        let v = m.vocab().clone();
        let judges = Judges {
            classifier: Arc::new(clf),
            target_label: "A".into(),
            fluency: Arc::new(NgramFluency::new(m, f64::INFINITY)),
            similarity: SimilarityScorer::TokenF1,
        };
        let r = judges.judge(v.tokenize("b"), v.tokenize("a"), v.tokenize("a")).unwrap();
        assert!(r.acc && r.fl);
        assert_eq!(r.sim, 1.0);
        // "a b" has posterior exactly 0.5
        let r = judges.judge(v.tokenize("b"), v.tokenize("a b"), v.tokenize("a")).unwrap();
        assert!(!r.acc);
        let bad = Judges {
            target_label: "C".into(),
            ..judges
        };
        let err = bad.judge(v.tokenize("b"), v.tokenize("a"), v.tokenize("a")).unwrap_err();
        assert!(matches!(err, Error::Judge { ref judge, .. } if judge == "acc"));
    }

    #[test]
    fn exact_only_report_is_self_consistent() {
        let m = toy_model();
        let v = m.vocab().clone();
        let target = EnergySpec::new(vec![crate::EnergyTerm::new(
            "nll",
            1.0,
            crate::energy::NgramNll::new(m.clone(), &v),
        )])
        .unwrap();
        let samplers = vec![("exact-2".to_string(), IntrinsicSampler::Exact { n: 2000, seed: 9 })];
        let r = intrinsic_eval(&m, &target, &samplers, 2000, 1).unwrap();
        let s = &r.samplers[0];
        let pooled = (s.stderr.powi(2) + r.exact.stderr.powi(2)).sqrt();
        assert!(s.mean_gap(&r.exact) < 4.0 * pooled);
        assert_eq!(s.forward_passes, 0);
        let csv = r.histogram_csv();
        assert_eq!(csv.lines().count(), 1 + 4000);
        assert!(csv.starts_with("sampler,sample_id,energy\nexact,0,"));
    }
}
