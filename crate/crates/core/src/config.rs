//! Run configuration files.
//!
//! A sampling run is described by one JSON object ([`MhConfig`]); relative
//! paths inside it resolve against the directory of the config file.
//! Validation errors name the offending field.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::{AdapterClient, ClientConfig};
use crate::energy::{EnergySpecFile, EnergyTerm, LoadContext, NgramNll};
use crate::error::{Error, Result};
use crate::eval::IntrinsicSampler;
use crate::mh::{AcceptMode, Constraints, OnError, Sampler};
use crate::ngram::NgramModel;
use crate::proposal::{
    AdapterBlockProposal, IdentityProposal, Proposal, ProposalKind, SpanBlockProposal, SpanCfg, TokenMaskProposal,
};
use crate::seq::{TokenSeq, Vocab};
use crate::EnergySpec;

pub const DEFAULT_BATCH_SIZE: usize = 10;
pub const DEFAULT_MAX_SPAN: usize = 3;
pub const DEFAULT_MAX_NEW: usize = 3;

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

fn one() -> usize {
    1
}

/// Deserializes `value`, reporting the path of the first bad field.
pub fn from_value_at<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Error::Config(inner.to_string())
        } else {
            Error::Config(format!("field `{path}`: {inner}"))
        }
    })
}

fn parse_json(text: &str, path: &Path) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("field `{field}`: {msg}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    pub kind: ProposalKind,
    #[serde(default)]
    pub max_span: Option<usize>,
    #[serde(default)]
    pub max_new: Option<usize>,
    /// Path of the n-gram model behind token-mask and span-block proposals.
    #[serde(default)]
    pub lm: Option<String>,
    /// Opaque parameters forwarded to an adapter.
    #[serde(default)]
    pub params: Value,
}

/// Configuration of a sampling run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhConfig {
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Defaults to identity-variant for adapter proposals, strict otherwise.
    #[serde(default)]
    pub mode: Option<AcceptMode>,
    #[serde(default)]
    pub seed: u64,
    pub proposal: ProposalConfig,
    /// Path of an energy spec file, or the spec inline.
    pub energy: Value,
    pub init_text: String,
    /// Vocabulary file; defaults to the proposal model's vocabulary.
    #[serde(default)]
    pub vocab: Option<String>,
    #[serde(default)]
    pub adapter: Option<ClientConfig>,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thin: usize,
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default)]
    pub allow_empty: bool,
    #[serde(default)]
    pub on_error: OnError,
}

/// Everything needed to run a configured sampler.
#[derive(Debug)]
pub struct ResolvedRun {
    pub sampler: Sampler,
    pub init: TokenSeq,
    pub vocab: Arc<Vocab>,
    /// Files read while resolving.
    pub inputs: Vec<PathBuf>,
}

impl MhConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: MhConfig = from_value_at(parse_json(text, path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_text(path)?, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(field_err("steps", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(field_err("batch_size", "must be at least 1"));
        }
        if self.thin < 1 {
            return Err(field_err("thin", "must be at least 1"));
        }
        let p = &self.proposal;
        if matches!(p.kind, ProposalKind::TokenMask | ProposalKind::SpanBlock) && p.lm.is_none() {
            return Err(field_err("proposal.lm", format!("required for {} proposals", p.kind)));
        }
        if p.kind == ProposalKind::SpanBlock && p.max_span == Some(0) && p.max_new == Some(0) {
            return Err(field_err("proposal.max_span", "max_span and max_new cannot both be 0"));
        }
        if !(self.energy.is_string() || self.energy.is_object()) {
            return Err(field_err("energy", "expected a path or an inline spec object"));
        }
        if let Some(m) = self.max_len {
            if m == 0 && !self.allow_empty {
                return Err(field_err("max_len", "0 admits only the empty sequence, which is not allowed"));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> AcceptMode {
        self.mode.unwrap_or_else(|| AcceptMode::default_for(self.proposal.kind))
    }

    fn needs_adapter(&self) -> bool {
        self.adapter.is_some()
            || self.proposal.kind == ProposalKind::AdapterBlock
            || std::env::var_os(crate::adapter::ENDPOINT_ENV).is_some()
    }

    /// Loads models and builds the sampler. `base_dir` anchors relative paths.
    pub fn resolve(&self, base_dir: &Path) -> Result<ResolvedRun> {
        self.validate()?;
        let at = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_owned()
            } else {
                base_dir.join(p)
            }
        };
        let mut inputs = Vec::new();
        let lm = match &self.proposal.lm {
            Some(p) => {
                let path = at(p);
                let model = NgramModel::load(&path).map_err(|e| field_err("proposal.lm", e))?;
                inputs.push(path);
                Some(Arc::new(model))
            }
            None => None,
        };
        let vocab = match (&self.vocab, &lm) {
            (Some(p), lm) => {
                let path = at(p);
                let v = Arc::new(Vocab::load(&path).map_err(|e| field_err("vocab", e))?);
                if let Some(lm) = lm {
                    if **lm.vocab() != *v {
                        return Err(field_err("vocab", "differs from the proposal model's vocabulary"));
                    }
                }
                inputs.push(path);
                v
            }
            (None, Some(lm)) => lm.vocab().clone(),
            (None, None) => Arc::new(
                Vocab::from_tokens(unique_words(&self.init_text), false).map_err(|e| field_err("init_text", e))?,
            ),
        };
        let client = self
            .needs_adapter()
            .then(|| Arc::new(AdapterClient::new(self.adapter.clone().unwrap_or_default().with_env_override())));
        let proposal: Arc<dyn Proposal> = match self.proposal.kind {
            ProposalKind::TokenMask => Arc::new(TokenMaskProposal::from_ngram(lm.clone().expect("validated"))),
            ProposalKind::SpanBlock => Arc::new(SpanBlockProposal::new(
                lm.clone().expect("validated"),
                SpanCfg {
                    max_span: self.proposal.max_span.unwrap_or(DEFAULT_MAX_SPAN),
                    max_new: self.proposal.max_new.unwrap_or(DEFAULT_MAX_NEW),
                },
            )),
            ProposalKind::AdapterBlock => Arc::new(AdapterBlockProposal::new(
                client.clone().expect("adapter client"),
                vocab.clone(),
                self.proposal.params.clone(),
            )),
            ProposalKind::Identity => Arc::new(IdentityProposal),
        };
        let ctx = |base: PathBuf| LoadContext {
            base_dir: base,
            vocab: vocab.clone(),
            adapter: client.clone(),
            default_seed: Some(self.init_text.clone()),
        };
        let energy = match &self.energy {
            Value::String(p) => {
                let path = at(p);
                let file = EnergySpecFile::load(&path).map_err(|e| field_err("energy", e))?;
                let dir = path.parent().map(Path::to_owned).unwrap_or_default();
                inputs.push(path);
                file.instantiate(&ctx(dir))
            }
            inline => {
                let file: EnergySpecFile = from_value_at(inline.clone()).map_err(|e| field_err("energy", e))?;
                file.instantiate(&ctx(base_dir.to_owned()))
            }
        }
        .map_err(|e| match e {
            Error::Config(m) if m.starts_with("field") => Error::Config(m),
            Error::Config(m) => field_err("energy", m),
            other => other,
        })?;
        let init = vocab.tokenize(&self.init_text);
        let mut sampler = Sampler::new(proposal, Arc::new(energy));
        sampler.mode = self.mode();
        sampler.steps = self.steps;
        sampler.batch_size = self.batch_size;
        sampler.seed = self.seed;
        sampler.constraints = Constraints {
            max_len: self.max_len,
            allow_empty: self.allow_empty,
        };
        sampler.on_error = self.on_error;
        sampler.burn_in = self.burn_in;
        sampler.thin = self.thin;
        Ok(ResolvedRun {
            sampler,
            init,
            vocab,
            inputs,
        })
    }
}

fn unique_words(text: &str) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    text.split_whitespace().filter(|w| seen.insert(*w)).map(str::to_owned).collect()
}

// ---------------------------------------------------------------------------
// Intrinsic evaluation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntrinsicKind {
    Exact,
    TokenMask,
    SpanBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicSamplerConfig {
    pub name: String,
    pub kind: IntrinsicKind,
    /// Steps per chain (MH samplers).
    #[serde(default)]
    pub steps: Option<usize>,
    /// Number of chains, or of samples for `exact`.
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default)]
    pub max_span: Option<usize>,
    #[serde(default)]
    pub max_new: Option<usize>,
    /// Proposal model; defaults to the target model.
    #[serde(default)]
    pub proposal_lm: Option<String>,
    #[serde(default)]
    pub init_text: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_chains() -> usize {
    100
}

fn default_exact_n() -> usize {
    1000
}

/// Configuration of an intrinsic evaluation: an n-gram target, exact samples
/// from it and a list of samplers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicConfig {
    /// Target model; the energy is its negative log-likelihood.
    pub lm: String,
    #[serde(default = "default_exact_n")]
    pub exact_n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Initial text for samplers that do not set their own.
    #[serde(default)]
    pub init_text: Option<String>,
    pub samplers: Vec<IntrinsicSamplerConfig>,
}

#[derive(Debug)]
pub struct ResolvedIntrinsic {
    pub model: Arc<NgramModel>,
    pub target: EnergySpec,
    pub samplers: Vec<(String, IntrinsicSampler)>,
    pub inputs: Vec<PathBuf>,
}

impl IntrinsicConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: IntrinsicConfig = from_value_at(parse_json(text, path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_text(path)?, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.exact_n < 1 {
            return Err(field_err("exact_n", "must be at least 1"));
        }
        let mut names = std::collections::HashSet::new();
        for (i, s) in self.samplers.iter().enumerate() {
            let f = |k: &str| format!("samplers[{i}].{k}");
            if s.name == "exact" || !names.insert(s.name.as_str()) {
                return Err(field_err(&f("name"), format!("duplicate or reserved name {:?}", s.name)));
            }
            if s.chains < 1 {
                return Err(field_err(&f("chains"), "must be at least 1"));
            }
            if s.kind != IntrinsicKind::Exact {
                match s.steps {
                    None => return Err(field_err(&f("steps"), "required for MH samplers")),
                    Some(0) => return Err(field_err(&f("steps"), "must be at least 1")),
                    Some(_) => {}
                }
                if s.init_text.is_none() && self.init_text.is_none() {
                    return Err(field_err(&f("init_text"), "required when the top-level init_text is unset"));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, base_dir: &Path) -> Result<ResolvedIntrinsic> {
        self.validate()?;
        let at = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_owned()
            } else {
                base_dir.join(p)
            }
        };
        let lm_path = at(&self.lm);
        let model = Arc::new(NgramModel::load(&lm_path).map_err(|e| field_err("lm", e))?);
        let mut inputs = vec![lm_path];
        let target = Arc::new(EnergySpec::new(vec![EnergyTerm::new(
            "nll",
            1.0,
            NgramNll::new(model.clone(), model.vocab()),
        )])?);
        let mut samplers = Vec::with_capacity(self.samplers.len());
        for (i, s) in self.samplers.iter().enumerate() {
            let seed = s.seed.unwrap_or(self.seed);
            let entry = match s.kind {
                IntrinsicKind::Exact => IntrinsicSampler::Exact { n: s.chains, seed },
                kind => {
                    let proposal_model = match &s.proposal_lm {
                        Some(p) => {
                            let path = at(p);
                            let m = NgramModel::load(&path).map_err(|e| field_err(&format!("samplers[{i}].proposal_lm"), e))?;
                            if **m.vocab() != **model.vocab() {
                                return Err(field_err(
                                    &format!("samplers[{i}].proposal_lm"),
                                    "vocabulary differs from the target model's",
                                ));
                            }
                            inputs.push(path);
                            Arc::new(m)
                        }
                        None => model.clone(),
                    };
                    let proposal: Arc<dyn Proposal> = match kind {
                        IntrinsicKind::TokenMask => Arc::new(TokenMaskProposal::from_ngram(proposal_model)),
                        _ => Arc::new(SpanBlockProposal::new(
                            proposal_model,
                            SpanCfg {
                                max_span: s.max_span.unwrap_or(DEFAULT_MAX_SPAN),
                                max_new: s.max_new.unwrap_or(DEFAULT_MAX_NEW),
                            },
                        )),
                    };
                    let mut sampler = Sampler::new(proposal, target.clone());
                    sampler.mode = AcceptMode::Strict;
                    sampler.steps = s.steps.expect("validated");
                    sampler.batch_size = s.chains;
                    sampler.seed = seed;
                    sampler.constraints = Constraints {
                        max_len: Some(model.max_len()),
                        allow_empty: true,
                    };
                    sampler.keep_trace = false;
                    let init_text = s.init_text.as_ref().or(self.init_text.as_ref()).expect("validated");
                    IntrinsicSampler::Mh {
                        sampler,
                        init: model.vocab().tokenize(init_text),
                    }
                }
            };
            samplers.push((s.name.clone(), entry));
        }
        Ok(ResolvedIntrinsic {
            model,
            target: Arc::try_unwrap(target).unwrap_or_else(|a| (*a).clone()),
            samplers,
            inputs,
        })
    }
}
