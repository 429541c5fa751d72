//! The Metropolis-Hastings engine.
//!
//! A chain moves from `X` to a proposed `X̄` with probability
//!
//! ```text
//! min(1, exp(E(X) - E(X̄)) · q(X | X̄) / q(X̄ | X))
//! ```
//!
//! In identity-variant mode the reverse term `q(X | X̄)` is replaced by the
//! identity probability `q(X | X)`, which favours non-identity edits when the
//! proposal likes to copy its input. That variant is not exact.
//!
//! Batches run independent chains from the same initial text, each with its
//! own RNG stream, and keep the final state of minimum energy.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::EnergySpec;
use crate::error::{Error, Result};
use crate::proposal::{Proposal, ProposalKind, ProposalRecord};
use crate::rng::{derive, ChainRng};
use crate::seq::{TokenSeq, Vocab};

/// Bound on the log acceptance ratio before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcceptMode {
    Strict,
    IdentityVariant,
}

impl AcceptMode {
    /// Identity-variant for adapter proposals, strict otherwise.
    pub fn default_for(kind: ProposalKind) -> Self {
        match kind {
            ProposalKind::AdapterBlock => AcceptMode::IdentityVariant,
            _ => AcceptMode::Strict,
        }
    }
}

/// What to do when a proposal or energy evaluation fails mid-chain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OnError {
    /// Count the step as a rejection and continue.
    #[default]
    Reject,
    /// Stop the chain.
    Abort,
}

/// Acceptance probability for moving from energy `e_cur` to `e_cand`.
///
/// A reverse log-probability of negative infinity means the move cannot be
/// undone; its acceptance probability is exactly zero.
pub fn accept_prob(e_cur: f64, e_cand: f64, rec: &ProposalRecord, mode: AcceptMode) -> Result<f64> {
    let reverse = match mode {
        AcceptMode::Strict => rec.logq_reverse,
        AcceptMode::IdentityVariant => rec
            .logq_identity
            .ok_or_else(|| Error::Proposal("identity-variant mode needs logq_identity".into()))?,
    };
    if !(e_cur.is_finite() && e_cand.is_finite() && rec.logq_forward.is_finite()) {
        return Err(Error::NonFiniteAcceptance);
    }
    if reverse == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    if !reverse.is_finite() {
        return Err(Error::NonFiniteAcceptance);
    }
    let log_ratio = (e_cur - e_cand) + (reverse - rec.logq_forward);
    if log_ratio.is_nan() {
        return Err(Error::NonFiniteAcceptance);
    }
    let log_ratio = log_ratio.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    Ok(if log_ratio >= 0.0 { 1.0 } else { log_ratio.exp() })
}

/// The state of one chain. `energy` always equals the spec's energy of `seq`.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub seq: TokenSeq,
    pub energy: f64,
    pub step: usize,
    pub accepts: usize,
    pub failures: usize,
    pub rng: ChainRng,
}

impl ChainState {
    pub fn new(seq: TokenSeq, spec: &EnergySpec, rng: ChainRng) -> Result<Self> {
        let energy = spec.total_energy(&seq)?;
        Ok(ChainState {
            seq,
            energy,
            step: 0,
            accepts: 0,
            failures: 0,
            rng,
        })
    }
}

/// One line of the NDJSON trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub chain_id: usize,
    pub step: usize,
    pub candidate_text: String,
    pub energy_current: f64,
    /// Null when the candidate was never scored (outside the state space or
    /// a failed step).
    pub energy_candidate: Option<f64>,
    /// Null on failed steps.
    pub logq_forward: Option<f64>,
    /// Null on failed steps and for moves without a reverse.
    pub logq_reverse: Option<f64>,
    pub logq_identity: Option<f64>,
    pub accept_prob: f64,
    pub accepted: bool,
}

pub trait TraceSink {
    fn append(&mut self, entry: TraceEntry);
}

impl TraceSink for Vec<TraceEntry> {
    fn append(&mut self, entry: TraceEntry) {
        self.push(entry);
    }
}

/// Discards entries.
pub struct NullSink;

impl TraceSink for NullSink {
    fn append(&mut self, _: TraceEntry) {}
}

/// Hard limits on the state space; candidates outside are rejected without
/// being scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraints {
    pub max_len: Option<usize>,
    pub allow_empty: bool,
}

impl Constraints {
    pub fn admits(&self, seq: &TokenSeq) -> bool {
        (self.allow_empty || !seq.is_empty()) && self.max_len.is_none_or(|m| seq.len() <= m)
    }
}

/// A fully resolved sampler: proposal, energy and chain settings.
#[derive(Clone)]
pub struct Sampler {
    pub proposal: Arc<dyn Proposal>,
    pub energy: Arc<EnergySpec>,
    pub mode: AcceptMode,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub constraints: Constraints,
    pub on_error: OnError,
    pub burn_in: usize,
    pub thin: usize,
    pub keep_trace: bool,
    pub keep_samples: bool,
}

impl std::fmt::Debug for Sampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sampler")
            .field("proposal", &self.proposal.kind())
            .field("mode", &self.mode)
            .field("steps", &self.steps)
            .field("batch_size", &self.batch_size)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

/// What happened in one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    Rejected,
    /// The proposal or energy failed and the step counted as a rejection.
    Failed,
}

/// Result of one chain.
#[derive(Clone, Debug)]
pub struct ChainOutcome {
    pub chain_id: usize,
    pub state: ChainState,
    pub trace: Vec<TraceEntry>,
    /// States after burn-in, every `thin` steps (when `keep_samples`).
    pub samples: Vec<TokenSeq>,
    /// Set when the chain aborted.
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub chains: Vec<ChainOutcome>,
    /// `(chain_id, seq, energy)` of the surviving chain with the lowest
    /// final energy; ties go to the lowest chain id.
    pub best: Option<(usize, TokenSeq, f64)>,
    /// Chains that failed before their first step.
    pub init_errors: Vec<(usize, String)>,
}

impl BatchResult {
    /// Trace entries of all chains, ordered by chain then step.
    pub fn trace(&self) -> impl Iterator<Item = &TraceEntry> {
        self.chains.iter().flat_map(|c| c.trace.iter())
    }

    pub fn summary(&self) -> BatchSummary {
        BatchSummary {
            best_text: self.best.as_ref().map(|b| b.1.text()),
            best_energy: self.best.as_ref().map(|b| b.2),
            per_chain: self
                .chains
                .iter()
                .map(|c| ChainSummary {
                    chain_id: c.chain_id,
                    final_text: c.state.seq.text(),
                    final_energy: c.state.energy,
                    steps: c.state.step,
                    accepts: c.state.accepts,
                    failures: c.state.failures,
                    error: c.error.clone(),
                })
                .chain(self.init_errors.iter().map(|(id, e)| ChainSummary {
                    chain_id: *id,
                    final_text: String::new(),
                    final_energy: f64::NAN,
                    steps: 0,
                    accepts: 0,
                    failures: 1,
                    error: Some(e.clone()),
                }))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub best_text: Option<String>,
    pub best_energy: Option<f64>,
    pub per_chain: Vec<ChainSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub chain_id: usize,
    pub final_text: String,
    pub final_energy: f64,
    pub steps: usize,
    pub accepts: usize,
    pub failures: usize,
    pub error: Option<String>,
}

impl Sampler {
    pub fn new(proposal: Arc<dyn Proposal>, energy: Arc<EnergySpec>) -> Self {
        let mode = AcceptMode::default_for(proposal.kind());
        Sampler {
            proposal,
            energy,
            mode,
            steps: 10,
            batch_size: 10,
            seed: 0,
            constraints: Constraints::default(),
            on_error: OnError::Reject,
            burn_in: 0,
            thin: 1,
            keep_trace: true,
            keep_samples: false,
        }
    }

    /// Advances `state` by one proposal. Errors are returned only when
    /// `on_error` is [`OnError::Abort`].
    pub fn step(&self, state: &mut ChainState, chain_id: usize, sink: &mut dyn TraceSink) -> Result<StepOutcome> {
        state.step += 1;
        let want_identity = self.mode == AcceptMode::IdentityVariant;
        let mut entry = TraceEntry {
            chain_id,
            step: state.step,
            candidate_text: String::new(),
            energy_current: state.energy,
            energy_candidate: None,
            logq_forward: None,
            logq_reverse: None,
            logq_identity: None,
            accept_prob: 0.0,
            accepted: false,
        };
        let result = self.try_step(state, want_identity, &mut entry);
        // the acceptance uniform is drawn on every step so that streams stay
        // aligned across runs that differ only in energies
        let u: f64 = state.rng.gen();
        let outcome = match result {
            Ok((candidate, e_cand)) => {
                if u < entry.accept_prob {
                    entry.accepted = true;
                    state.seq = candidate;
                    state.energy = e_cand.expect("accepted candidates are scored");
                    state.accepts += 1;
                    StepOutcome::Accepted
                } else {
                    StepOutcome::Rejected
                }
            }
            Err(e) => {
                state.failures += 1;
                if self.on_error == OnError::Abort {
                    sink.append(entry);
                    return Err(e);
                }
                StepOutcome::Failed
            }
        };
        sink.append(entry);
        Ok(outcome)
    }

    fn try_step(
        &self,
        state: &mut ChainState,
        want_identity: bool,
        entry: &mut TraceEntry,
    ) -> Result<(TokenSeq, Option<f64>)> {
        let draw_u = |state: &mut ChainState| {
            let _: f64 = state.rng.gen();
        };
        let rec = match self.proposal.propose(&state.seq, &mut state.rng, want_identity) {
            Ok(r) => r,
            Err(e) => {
                draw_u(state);
                return Err(e);
            }
        };
        entry.candidate_text = rec.candidate.text();
        entry.logq_forward = Some(rec.logq_forward);
        entry.logq_reverse = rec.logq_reverse.is_finite().then_some(rec.logq_reverse);
        entry.logq_identity = rec.logq_identity;
        if !self.constraints.admits(&rec.candidate) {
            draw_u(state);
            return Ok((rec.candidate, None));
        }
        let e_cand = if rec.is_identity {
            state.energy
        } else {
            match self.energy.total_energy(&rec.candidate) {
                Ok(e) => e,
                Err(e) => {
                    draw_u(state);
                    return Err(e);
                }
            }
        };
        entry.energy_candidate = Some(e_cand);
        entry.accept_prob = match accept_prob(state.energy, e_cand, &rec, self.mode) {
            Ok(p) => p,
            Err(e) => {
                draw_u(state);
                return Err(e);
            }
        };
        Ok((rec.candidate, Some(e_cand)))
    }

    /// Runs one chain from `init` with the stream `(seed, chain_id)`.
    pub fn run_chain(&self, chain_id: usize, init: &TokenSeq) -> Result<ChainOutcome> {
        self.run_chain_observed(chain_id, init, |_| {})
    }

    /// Like [`Sampler::run_chain`], calling `observe` with the state after
    /// every step.
    pub fn run_chain_observed(
        &self,
        chain_id: usize,
        init: &TokenSeq,
        mut observe: impl FnMut(&ChainState),
    ) -> Result<ChainOutcome> {
        let mut state = ChainState::new(init.clone(), &self.energy, derive(self.seed, chain_id as u64))?;
        let mut trace = Vec::new();
        let mut samples = Vec::new();
        let mut error = None;
        let thin = self.thin.max(1);
        for _ in 0..self.steps {
            let res = if self.keep_trace {
                self.step(&mut state, chain_id, &mut trace)
            } else {
                self.step(&mut state, chain_id, &mut NullSink)
            };
            if let Err(e) = res {
                error = Some(e.to_string());
                break;
            }
            observe(&state);
            if self.keep_samples && state.step > self.burn_in && (state.step - self.burn_in).is_multiple_of(thin) {
                samples.push(state.seq.clone());
            }
        }
        Ok(ChainOutcome {
            chain_id,
            state,
            trace,
            samples,
            error,
        })
    }

    /// Runs `batch_size` independent chains in parallel. The result is
    /// identical to running them sequentially.
    pub fn run_batch(&self, init: &TokenSeq) -> BatchResult {
        let results: Vec<(usize, Result<ChainOutcome>)> = (0..self.batch_size)
            .into_par_iter()
            .map(|id| (id, self.run_chain(id, init)))
            .collect();
        let mut chains = Vec::with_capacity(results.len());
        let mut init_errors = Vec::new();
        for (id, r) in results {
            match r {
                Ok(c) => chains.push(c),
                Err(e) => init_errors.push((id, e.to_string())),
            }
        }
        let best = chains
            .iter()
            .filter(|c| c.error.is_none())
            .fold(None::<&ChainOutcome>, |best, c| match best {
                Some(b) if b.state.energy <= c.state.energy => Some(b),
                _ => Some(c),
            })
            .map(|c| (c.chain_id, c.state.seq.clone(), c.state.energy));
        BatchResult {
            chains,
            best,
            init_errors,
        }
    }
}

// ---------------------------------------------------------------------------
// Stationarity check on enumerable spaces

/// All sequences over a small vocabulary up to a maximum length, including
/// the empty sequence.
#[derive(Clone, Debug)]
pub struct ToySpace {
    pub vocab: Arc<Vocab>,
    pub max_len: usize,
}

pub const DEFAULT_SPACE_CAP: usize = 4096;

impl ToySpace {
    pub fn new(vocab: Arc<Vocab>, max_len: usize) -> Self {
        ToySpace { vocab, max_len }
    }

    pub fn size(&self) -> usize {
        let v = self.vocab.regular_len();
        (0..=self.max_len).map(|l| v.saturating_pow(l as u32)).fold(0usize, usize::saturating_add)
    }

    pub fn enumerate(&self, cap: usize) -> Result<Vec<TokenSeq>> {
        let size = self.size();
        if size > cap {
            return Err(Error::SpaceTooLarge { size, cap });
        }
        let ids: Vec<_> = self.vocab.regular_ids().collect();
        let mut out = vec![TokenSeq::empty()];
        let mut frontier = vec![Vec::new()];
        for _ in 0..self.max_len {
            let mut next = Vec::with_capacity(frontier.len() * ids.len());
            for prefix in &frontier {
                for &id in &ids {
                    let mut p: Vec<_> = prefix.clone();
                    p.push(id);
                    out.push(self.vocab.seq_from_ids(p.clone()));
                    next.push(p);
                }
            }
            frontier = next;
        }
        Ok(out)
    }

    /// `exp(-E) / Z` over the enumerated space.
    pub fn exact_distribution(&self, spec: &EnergySpec, cap: usize) -> Result<Vec<(TokenSeq, f64)>> {
        let seqs = self.enumerate(cap)?;
        let energies = seqs.iter().map(|s| spec.total_energy(s)).collect::<Result<Vec<_>>>()?;
        let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = energies.iter().map(|e| (min - e).exp()).collect();
        let z: f64 = w.iter().sum();
        Ok(seqs.into_iter().zip(w).map(|(s, w)| (s, w / z)).collect())
    }
}

#[derive(Clone, Debug)]
pub struct StationaryCfg {
    pub chains: usize,
    pub steps_per_chain: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub init: TokenSeq,
    pub cap: usize,
}

#[derive(Clone, Debug)]
pub struct StationaryReport {
    pub tv: f64,
    /// `(text, exact probability, empirical frequency)` per state.
    pub states: Vec<(String, f64, f64)>,
    pub visits: usize,
}

/// Runs strict-mode chains on an enumerable space and returns the total
/// variation distance between the visit frequencies (after burn-in, pooled
/// over chains) and the brute-force normalized target.
pub fn stationary_check(
    space: &ToySpace,
    spec: Arc<EnergySpec>,
    proposal: Arc<dyn Proposal>,
    cfg: &StationaryCfg,
) -> Result<StationaryReport> {
    let exact = space.exact_distribution(&spec, cfg.cap)?;
    let mut sampler = Sampler::new(proposal, spec);
    sampler.mode = AcceptMode::Strict;
    sampler.steps = cfg.steps_per_chain;
    sampler.seed = cfg.seed;
    sampler.constraints = Constraints {
        max_len: Some(space.max_len),
        allow_empty: true,
    };
    sampler.on_error = OnError::Abort;
    sampler.keep_trace = false;
    let per_chain: Vec<Result<HashMap<String, usize>>> = (0..cfg.chains)
        .into_par_iter()
        .map(|id| {
            let mut counts: HashMap<String, usize> = HashMap::new();
            let out = sampler.run_chain_observed(id, &cfg.init, |s| {
                if s.step > cfg.burn_in {
                    *counts.entry(s.seq.text()).or_default() += 1;
                }
            })?;
            match out.error {
                Some(e) => Err(Error::Eval(format!("chain {id}: {e}"))),
                None => Ok(counts),
            }
        })
        .collect();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for c in per_chain {
        for (k, v) in c? {
            *counts.entry(k).or_default() += v;
        }
    }
    let visits: usize = counts.values().sum();
    let states: Vec<(String, f64, f64)> = exact
        .iter()
        .map(|(s, p)| {
            let text = s.text();
            let f = counts.get(&text).copied().unwrap_or(0) as f64 / visits.max(1) as f64;
            (text, *p, f)
        })
        .collect();
    let tv = 0.5 * states.iter().map(|(_, p, f)| (p - f).abs()).sum::<f64>();
    Ok(StationaryReport { tv, states, visits })
}
