//! Energy functions.
//!
//! An [`EnergySpec`] is a weighted sum of black-box potentials,
//! `E(X) = Σ_i w_i E_i(X)`. The revision energy used for style transfer is
//! the two-term instance `α E_disc(X') + β E_sim(X, X')`, where `E_disc` is
//! the negative log posterior of a style classifier and `E_sim` is an inverse
//! similarity to the seed sentence.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterClient;
use crate::error::{Error, Result};
use crate::ngram::NgramModel;
use crate::seq::{TokenSeq, Vocab};

/// Default discriminator weight of the revision energy.
pub const DEFAULT_DISC_WEIGHT: f64 = 20.0;
/// Default similarity weight of the revision energy.
pub const DEFAULT_SIM_WEIGHT: f64 = 120.0;

/// A black-box potential. Must be deterministic for a fixed model state.
pub trait Potential: Send + Sync {
    fn evaluate(&self, seq: &TokenSeq) -> Result<f64>;
}

impl<F> Potential for F
where
    F: Fn(&TokenSeq) -> f64 + Send + Sync,
{
    fn evaluate(&self, seq: &TokenSeq) -> Result<f64> {
        Ok(self(seq))
    }
}

#[derive(Clone)]
pub struct EnergyTerm {
    pub name: String,
    pub weight: f64,
    pub potential: Arc<dyn Potential>,
}

impl EnergyTerm {
    pub fn new(name: impl Into<String>, weight: f64, potential: impl Potential + 'static) -> Self {
        EnergyTerm {
            name: name.into(),
            weight,
            potential: Arc::new(potential),
        }
    }
}

impl fmt::Debug for EnergyTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnergyTerm")
            .field("name", &self.name)
            .field("weight", &self.weight)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub struct EnergySpec {
    terms: Vec<EnergyTerm>,
    seed_text: Option<TokenSeq>,
}

impl EnergySpec {
    pub fn new(terms: Vec<EnergyTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Config("energy spec needs at least one term".into()));
        }
        if let Some(t) = terms.iter().find(|t| !t.weight.is_finite()) {
            return Err(Error::Config(format!("term `{}` has non-finite weight", t.name)));
        }
        Ok(EnergySpec { terms, seed_text: None })
    }

    pub fn with_seed_text(mut self, seed: TokenSeq) -> Self {
        self.seed_text = Some(seed);
        self
    }

    pub fn terms(&self) -> &[EnergyTerm] {
        &self.terms
    }

    pub fn seed_text(&self) -> Option<&TokenSeq> {
        self.seed_text.as_ref()
    }

    /// Returns a copy with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.terms {
            t.weight *= factor;
        }
        out
    }

    /// Returns a copy with one extra term.
    pub fn with_term(&self, term: EnergyTerm) -> Self {
        let mut out = self.clone();
        out.terms.push(term);
        out
    }

    /// `Σ_i w_i E_i(seq)`. Zero-weight terms are not evaluated.
    pub fn total_energy(&self, seq: &TokenSeq) -> Result<f64> {
        let mut total = 0.0;
        for term in &self.terms {
            if term.weight == 0.0 {
                continue;
            }
            let e = term.potential.evaluate(seq).map_err(|err| match err {
                Error::Energy { .. } => err,
                other => Error::energy(&term.name, other),
            })?;
            if !e.is_finite() {
                return Err(Error::energy(&term.name, format!("non-finite energy {e}")));
            }
            total += term.weight * e;
        }
        Ok(total)
    }
}

/// A fixed energy, independent of the sequence.
#[derive(Clone, Copy, Debug)]
pub struct Constant(pub f64);

impl Potential for Constant {
    fn evaluate(&self, _: &TokenSeq) -> Result<f64> {
        Ok(self.0)
    }
}

/// Energies looked up by normalized text; unknown sequences are an error.
#[derive(Clone, Debug, Default)]
pub struct Table {
    entries: HashMap<String, f64>,
}

impl Table {
    pub fn new(entries: impl IntoIterator<Item = (String, f64)>) -> Self {
        Table {
            entries: entries.into_iter().collect(),
        }
    }
}

impl Potential for Table {
    fn evaluate(&self, seq: &TokenSeq) -> Result<f64> {
        let text = seq.text();
        self.entries
            .get(&text)
            .copied()
            .ok_or_else(|| Error::Eval(format!("no table entry for {text:?}")))
    }
}

/// Negative log-likelihood under an n-gram model.
#[derive(Clone, Debug)]
pub struct NgramNll {
    model: Arc<NgramModel>,
    reuse_ids: bool,
}

impl NgramNll {
    /// `run_vocab` is the vocabulary the chain tokenizes with; if it differs
    /// from the model's, sequences are retokenized before scoring.
    pub fn new(model: Arc<NgramModel>, run_vocab: &Vocab) -> Self {
        let reuse_ids = model.vocab().as_ref() == run_vocab;
        NgramNll { model, reuse_ids }
    }
}

impl Potential for NgramNll {
    fn evaluate(&self, seq: &TokenSeq) -> Result<f64> {
        if self.reuse_ids {
            Ok(-self.model.log_prob(seq))
        } else {
            Ok(-self.model.log_prob(&self.model.vocab().tokenize(&seq.text())))
        }
    }
}

/// Per-class feature log-probabilities. `log_unseen` is the mass of the
/// single bucket shared by every feature absent from the table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub log_probs: BTreeMap<String, f64>,
    pub log_unseen: f64,
}

impl FeatureTable {
    fn smoothed(counts: &BTreeMap<String, u64>, features: &[&String], alpha: f64) -> Self {
        let total: u64 = counts.values().sum();
        let denom = total as f64 + alpha * (features.len() + 1) as f64;
        let log_probs = features
            .iter()
            .map(|&f| {
                let c = counts.get(f).copied().unwrap_or(0) as f64;
                (f.clone(), ((c + alpha) / denom).ln())
            })
            .collect();
        FeatureTable {
            log_probs,
            log_unseen: (alpha / denom).ln(),
        }
    }

    fn log_prob(&self, feature: &str) -> f64 {
        self.log_probs.get(feature).copied().unwrap_or(self.log_unseen)
    }

    /// Total probability of the table including the unseen bucket.
    pub fn mass(&self) -> f64 {
        self.log_probs.values().map(|lp| lp.exp()).sum::<f64>() + self.log_unseen.exp()
    }
}

/// Two-class naive Bayes over unigram and bigram features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleClassifier {
    pub labels: [String; 2],
    pub log_priors: [f64; 2],
    pub unigram: Option<[FeatureTable; 2]>,
    pub bigram: Option<[FeatureTable; 2]>,
}

impl StyleClassifier {
    /// Trains with add-`smoothing` estimates and a uniform prior.
    pub fn train<S: AsRef<str>>(corpus_by_class: &[(&str, &[S])], smoothing: f64) -> Result<Self> {
        if corpus_by_class.len() != 2 || corpus_by_class.iter().any(|(_, c)| c.is_empty()) {
            return Err(Error::Classifier("missing class: need two non-empty classes".into()));
        }
        if corpus_by_class[0].0 == corpus_by_class[1].0 {
            return Err(Error::Classifier("class labels must differ".into()));
        }
        if smoothing.is_nan() || smoothing <= 0.0 {
            return Err(Error::Classifier("smoothing must be positive".into()));
        }
        let mut uni: [BTreeMap<String, u64>; 2] = Default::default();
        let mut bi: [BTreeMap<String, u64>; 2] = Default::default();
        for (class, (_, lines)) in corpus_by_class.iter().enumerate() {
            for line in lines.iter() {
                for f in unigrams(line.as_ref()) {
                    *uni[class].entry(f).or_default() += 1;
                }
                for f in bigrams(line.as_ref()) {
                    *bi[class].entry(f).or_default() += 1;
                }
            }
        }
        let tables = |counts: &[BTreeMap<String, u64>; 2]| {
            let mut features: Vec<&String> = counts[0].keys().chain(counts[1].keys()).collect();
            features.sort();
            features.dedup();
            [
                FeatureTable::smoothed(&counts[0], &features, smoothing),
                FeatureTable::smoothed(&counts[1], &features, smoothing),
            ]
        };
        Ok(StyleClassifier {
            labels: [corpus_by_class[0].0.to_owned(), corpus_by_class[1].0.to_owned()],
            log_priors: [0.5f64.ln(); 2],
            unigram: Some(tables(&uni)),
            bigram: Some(tables(&bi)),
        })
    }

    /// Builds a unigram-only classifier from explicit token probabilities.
    pub fn from_unigram_probs(
        labels: [&str; 2],
        probs: [&[(&str, f64)]; 2],
        unseen_prob: f64,
    ) -> Self {
        let table = |p: &[(&str, f64)]| FeatureTable {
            log_probs: p.iter().map(|(t, v)| (t.to_string(), v.ln())).collect(),
            log_unseen: unseen_prob.ln(),
        };
        StyleClassifier {
            labels: labels.map(String::from),
            log_priors: [0.5f64.ln(); 2],
            unigram: Some([table(probs[0]), table(probs[1])]),
            bigram: None,
        }
    }

    pub fn with_priors(mut self, priors: [f64; 2]) -> Self {
        let z = priors[0] + priors[1];
        self.log_priors = [(priors[0] / z).ln(), (priors[1] / z).ln()];
        self
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Classifier(format!("unknown label {label:?}")))
    }

    fn joint_scores(&self, words: &[String]) -> [f64; 2] {
        let text = words.join(" ");
        let mut s = self.log_priors;
        for (class, score) in s.iter_mut().enumerate() {
            if let Some(t) = &self.unigram {
                *score += unigrams(&text).map(|f| t[class].log_prob(&f)).sum::<f64>();
            }
            if let Some(t) = &self.bigram {
                *score += bigrams(&text).map(|f| t[class].log_prob(&f)).sum::<f64>();
            }
        }
        s
    }

    /// `log p(label | seq)` by Bayes rule over the two classes.
    pub fn log_posterior(&self, seq: &TokenSeq, label: &str) -> Result<f64> {
        let idx = self.label_index(label)?;
        let s = self.joint_scores(seq.words());
        let m = s[0].max(s[1]);
        let lse = m + ((s[0] - m).exp() + (s[1] - m).exp()).ln();
        Ok(s[idx] - lse)
    }

    pub fn posterior(&self, seq: &TokenSeq, label: &str) -> Result<f64> {
        self.log_posterior(seq, label).map(f64::exp)
    }

    /// `-log p(label | seq)`.
    pub fn disc_energy(&self, seq: &TokenSeq, label: &str) -> Result<f64> {
        self.log_posterior(seq, label).map(|lp| -lp)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("classifier serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let clf: StyleClassifier = serde_json::from_str(&crate::io::read_text(path)?)?;
        Ok(clf)
    }
}

fn unigrams(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_owned)
}

fn bigrams(text: &str) -> impl Iterator<Item = String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    words
        .windows(2)
        .map(|w| format!("{} {}", w[0], w[1]))
        .collect::<Vec<_>>()
        .into_iter()
}

/// The discriminator potential `-log p(target | X)`.
#[derive(Clone, Debug)]
pub struct DiscPotential {
    pub classifier: Arc<StyleClassifier>,
    pub target_label: String,
}

impl DiscPotential {
    pub fn new(classifier: Arc<StyleClassifier>, target_label: impl Into<String>) -> Result<Self> {
        let target_label = target_label.into();
        classifier.label_index(&target_label)?;
        Ok(DiscPotential {
            classifier,
            target_label,
        })
    }
}

impl Potential for DiscPotential {
    fn evaluate(&self, seq: &TokenSeq) -> Result<f64> {
        self.classifier.disc_energy(seq, &self.target_label)
    }
}

/// Similarity in `[0, 1]` between two sequences.
#[derive(Clone)]
pub enum SimilarityScorer {
    /// Token-level F1 over multisets of surface tokens.
    TokenF1,
    /// Delegates to an adapter `energy` call; the server returns the
    /// similarity for `term` between `ref` and `text`.
    Adapter { client: Arc<AdapterClient>, term: String },
}

impl fmt::Debug for SimilarityScorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimilarityScorer::TokenF1 => f.write_str("TokenF1"),
            SimilarityScorer::Adapter { term, .. } => write!(f, "Adapter({term})"),
        }
    }
}

impl SimilarityScorer {
    pub fn score(&self, reference: &TokenSeq, seq: &TokenSeq) -> Result<f64> {
        match self {
            SimilarityScorer::TokenF1 => Ok(token_f1(reference.words(), seq.words())),
            SimilarityScorer::Adapter { client, term } => {
                let s = client.energy(&seq.text(), term, Some(&reference.text()))?;
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::energy(term, format!("similarity {s} outside [0, 1]")));
                }
                Ok(s)
            }
        }
    }
}

/// `2 |A ∩ B| / (|A| + |B|)` with multiset intersection; 0 when either side
/// is empty.
pub fn token_f1(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for w in a {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in b {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    2.0 * overlap as f64 / (a.len() + b.len()) as f64
}

/// Maps a similarity score to an energy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMapping {
    /// `1 - score`
    #[default]
    Linear,
    /// `-ln(max(score, 1e-6))`
    NegLog,
}

impl SimMapping {
    pub fn apply(self, score: f64) -> f64 {
        match self {
            SimMapping::Linear => 1.0 - score,
            SimMapping::NegLog => -score.max(1e-6).ln(),
        }
    }
}

/// Inverse similarity to a fixed seed sequence.
#[derive(Clone, Debug)]
pub struct SimPotential {
    pub scorer: SimilarityScorer,
    pub seed: TokenSeq,
    pub mapping: SimMapping,
}

impl SimPotential {
    pub fn new(scorer: SimilarityScorer, seed: TokenSeq, mapping: SimMapping) -> Result<Self> {
        if seed.is_empty() {
            return Err(Error::Config("similarity term needs a non-empty seed text".into()));
        }
        Ok(SimPotential { scorer, seed, mapping })
    }
}

impl Potential for SimPotential {
    fn evaluate(&self, seq: &TokenSeq) -> Result<f64> {
        if seq.is_empty() {
            return Ok(self.mapping.apply(0.0));
        }
        Ok(self.mapping.apply(self.scorer.score(&self.seed, seq)?))
    }
}

/// `1 - score(seed, seq)` with the builtin scorer.
pub fn sim_energy(scorer: &SimilarityScorer, seed: &TokenSeq, seq: &TokenSeq) -> Result<f64> {
    SimPotential::new(scorer.clone(), seed.clone(), SimMapping::Linear)?.evaluate(seq)
}

/// A potential served by an adapter's `energy` op.
#[derive(Clone)]
pub struct AdapterPotential {
    pub client: Arc<AdapterClient>,
    pub term: String,
}

impl Potential for AdapterPotential {
    fn evaluate(&self, seq: &TokenSeq) -> Result<f64> {
        Ok(self.client.energy(&seq.text(), &self.term, None)?)
    }
}

/// The revision energy `α E_disc(X') + β E_sim(X, X')` for seed `X`.
pub fn revision_energy(
    classifier: Arc<StyleClassifier>,
    target_label: &str,
    seed: TokenSeq,
    disc_weight: f64,
    sim_weight: f64,
) -> Result<EnergySpec> {
    let disc = DiscPotential::new(classifier, target_label)?;
    let sim = SimPotential::new(SimilarityScorer::TokenF1, seed.clone(), SimMapping::Linear)?;
    Ok(EnergySpec::new(vec![
        EnergyTerm::new("disc", disc_weight, disc),
        EnergyTerm::new("sim", sim_weight, sim),
    ])?
    .with_seed_text(seed))
}

// ---------------------------------------------------------------------------
// Energy spec files

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySpecFile {
    #[serde(default)]
    pub seed_text: Option<String>,
    pub terms: Vec<TermFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermFile {
    pub name: String,
    pub weight: f64,
    pub kind: TermKind,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermKind {
    NgramNll,
    Disc,
    Sim,
    Adapter,
    Constant,
    Table,
}

/// What a spec file needs from its surroundings to be instantiated.
pub struct LoadContext {
    /// Relative model paths resolve against this directory.
    pub base_dir: PathBuf,
    pub vocab: Arc<Vocab>,
    pub adapter: Option<Arc<AdapterClient>>,
    /// Seed used when the file's `seed_text` is null (the chain's initial text).
    pub default_seed: Option<String>,
}

impl LoadContext {
    fn path(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    fn adapter(&self, term: &str) -> Result<Arc<AdapterClient>> {
        self.adapter
            .clone()
            .ok_or_else(|| Error::Config(format!("term `{term}` needs an adapter endpoint")))
    }
}

fn param_str<'a>(term: &'a TermFile, key: &str) -> Result<&'a str> {
    term.params
        .get(key)
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Config(format!("term `{}`: missing string param `{key}`", term.name)))
}

impl EnergySpecFile {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&crate::io::read_text(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn instantiate(&self, ctx: &LoadContext) -> Result<EnergySpec> {
        let seed_text = self.seed_text.clone().or_else(|| ctx.default_seed.clone());
        let seed = seed_text.as_deref().map(|t| ctx.vocab.tokenize(t));
        let mut terms = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let potential: Arc<dyn Potential> = match t.kind {
                TermKind::NgramNll => {
                    let model = NgramModel::load(&ctx.path(param_str(t, "model")?))?;
                    Arc::new(NgramNll::new(Arc::new(model), &ctx.vocab))
                }
                TermKind::Disc => {
                    let clf = StyleClassifier::load(&ctx.path(param_str(t, "classifier")?))?;
                    Arc::new(DiscPotential::new(Arc::new(clf), param_str(t, "target_label")?)?)
                }
                TermKind::Sim => {
                    let mapping = match t.params.get("mapping") {
                        Some(v) => serde_json::from_value(v.clone())
                            .map_err(|e| Error::Config(format!("term `{}`: mapping: {e}", t.name)))?,
                        None => SimMapping::default(),
                    };
                    let scorer = match t.params.get("scorer").and_then(|v| v.as_str()) {
                        None | Some("builtin-token-f1") => SimilarityScorer::TokenF1,
                        Some("adapter") => SimilarityScorer::Adapter {
                            client: ctx.adapter(&t.name)?,
                            term: t.name.clone(),
                        },
                        Some(other) => {
                            return Err(Error::Config(format!("term `{}`: unknown scorer {other:?}", t.name)))
                        }
                    };
                    let seed = seed.clone().ok_or_else(|| {
                        Error::Config(format!("term `{}`: similarity needs seed_text", t.name))
                    })?;
                    Arc::new(SimPotential::new(scorer, seed, mapping)?)
                }
                TermKind::Adapter => {
                    let term = t.params.get("term").and_then(|v| v.as_str()).unwrap_or(&t.name);
                    Arc::new(AdapterPotential {
                        client: ctx.adapter(&t.name)?,
                        term: term.to_owned(),
                    })
                }
                TermKind::Constant => {
                    let v = t.params.get("value").and_then(|v| v.as_f64()).ok_or_else(|| {
                        Error::Config(format!("term `{}`: missing numeric param `value`", t.name))
                    })?;
                    Arc::new(Constant(v))
                }
                TermKind::Table => {
                    let entries: BTreeMap<String, f64> = t
                        .params
                        .get("entries")
                        .cloned()
                        .map(serde_json::from_value)
                        .transpose()
                        .map_err(|e| Error::Config(format!("term `{}`: entries: {e}", t.name)))?
                        .unwrap_or_default();
                    Arc::new(Table::new(
                        entries.into_iter().map(|(k, v)| (crate::seq::normalize(&k, ctx.vocab.lowercase()), v)),
                    ))
                }
            };
            terms.push(EnergyTerm {
                name: t.name.clone(),
                weight: t.weight,
                potential,
            });
        }
        let spec = EnergySpec::new(terms)?;
        Ok(match seed {
            Some(s) => spec.with_seed_text(s),
            None => spec,
        })
    }
}
