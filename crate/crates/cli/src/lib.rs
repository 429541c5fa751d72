//! Subcommands of the `ebmh` binary.
//!
//! Every command writes its artifacts atomically and finishes by writing a
//! [`RunManifest`] that lists them. Exit codes: 0 on success, 1 on runtime
//! failure, 2 on configuration or usage errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use ebmh::adapter::conformance::{conformance_suite, ConformanceOptions};
use ebmh::adapter::{AdapterClient, ClientConfig, ENDPOINT_ENV};
use ebmh::config::{from_value_at, IntrinsicConfig, MhConfig};
use ebmh::eval::{
    intrinsic_eval, judge_rows, load_tsv, paired_bootstrap_j, FluencyJudge, Judges, Metrics, NgramFluency,
    DEFAULT_FLUENCY_QUANTILE, DEFAULT_RESAMPLES,
};
use ebmh::io::{read_lines, read_text, write_atomic};
use ebmh::mh::AcceptMode;
use ebmh::{NgramModel, SimilarityScorer, StyleClassifier, Vocab};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(ebmh::Error),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_config() => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ebmh::Error> for CliError {
    fn from(e: ebmh::Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ebmh", version, about = "Block Metropolis-Hastings sampling for energy-based sequence models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an add-k n-gram model on a corpus with one sentence per line.
    TrainLm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        k: f64,
        #[arg(long, default_value_t = 1)]
        min_count: u32,
        #[arg(long)]
        lowercase: bool,
        /// Maximum length of ancestral samples.
        #[arg(long)]
        max_len: Option<usize>,
        /// Model file; the vocabulary is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a two-class naive Bayes style classifier.
    TrainClf {
        #[arg(long)]
        class_a: PathBuf,
        #[arg(long)]
        class_b: PathBuf,
        /// Class labels; default to the corpus file stems.
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        labels: Option<Vec<String>>,
        #[arg(long, default_value_t = 1.0)]
        smoothing: f64,
        #[arg(long)]
        lowercase: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a batch of chains and print the minimum-energy text.
    Sample {
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// strict or identity-variant
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        init_text: Option<String>,
        /// Output directory; defaults to `<config stem>.out` next to the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Skip writing the per-step trace.
        #[arg(long)]
        no_trace: bool,
    },
    /// Compare samplers against exact samples from an n-gram target.
    Intrinsic {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        exact_n: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score system outputs with J, ACC, SIM and FL.
    Eval {
        /// TSV with columns source, output, target.
        #[arg(long)]
        tsv: PathBuf,
        /// Judges configuration (JSON).
        #[arg(long)]
        judges: PathBuf,
        /// Baseline TSV for a paired bootstrap test.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics file; stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check an adapter server against the protocol.
    Conformance {
        /// Defaults to $EBMH_ADAPTER_URL, then the standard local endpoint.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
        #[arg(long)]
        sample_text: Option<String>,
        #[arg(long, default_value = "disc")]
        energy_term: String,
    },
}

/// Provenance record written after all other outputs of a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub artifacts: Vec<String>,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_owned(),
            config: None,
            seed: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    fn write_artifact(&mut self, path: &Path, bytes: &[u8]) -> CliResult {
        write_atomic(path, bytes)?;
        self.artifacts.push(path.display().to_string());
        Ok(())
    }

    fn finish(mut self, path: &Path) -> CliResult {
        self.artifacts.push(path.display().to_string());
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::Failed(e.to_string()))?;
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn config_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_owned).unwrap_or_default()
}

fn default_out_dir(config: &Path) -> PathBuf {
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    config_dir(config).join(format!("{stem}.out"))
}

fn to_json_pretty<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Failed(e.to_string()))
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::TrainLm {
            corpus,
            order,
            k,
            min_count,
            lowercase,
            max_len,
            out,
        } => cmd_train_lm(&corpus, order, k, min_count, lowercase, max_len, &out),
        Command::TrainClf {
            class_a,
            class_b,
            labels,
            smoothing,
            lowercase,
            out,
        } => cmd_train_clf(&class_a, &class_b, labels, smoothing, lowercase, &out),
        Command::Sample {
            config,
            steps,
            batch_size,
            seed,
            mode,
            init_text,
            out_dir,
            no_trace,
        } => {
            let overrides = SampleOverrides {
                steps,
                batch_size,
                seed,
                mode,
                init_text,
            };
            let out_dir = out_dir.unwrap_or_else(|| default_out_dir(&config));
            let best = cmd_sample(&config, &overrides, &out_dir, !no_trace)?;
            println!("{best}");
            Ok(())
        }
        Command::Intrinsic {
            config,
            seed,
            exact_n,
            out_dir,
        } => {
            let out_dir = out_dir.unwrap_or_else(|| default_out_dir(&config));
            cmd_intrinsic(&config, seed, exact_n, &out_dir)
        }
        Command::Eval {
            tsv,
            judges,
            baseline,
            resamples,
            alpha,
            seed,
            out,
        } => {
            let report = cmd_eval(&tsv, &judges, baseline.as_deref(), resamples, alpha, seed, out.as_deref())?;
            println!("{}", to_json_pretty(&report)?);
            Ok(())
        }
        Command::Conformance {
            endpoint,
            timeout_ms,
            sample_text,
            energy_term,
        } => cmd_conformance(endpoint, timeout_ms, sample_text, energy_term),
    }
}

pub fn cmd_train_lm(
    corpus: &Path,
    order: usize,
    k: f64,
    min_count: u32,
    lowercase: bool,
    max_len: Option<usize>,
    out: &Path,
) -> CliResult {
    let lines = read_lines(corpus)?;
    let vocab = Arc::new(Vocab::build(&lines, min_count, lowercase)?);
    let seqs: Vec<_> = lines.iter().map(|l| vocab.tokenize(l)).collect();
    let mut model = NgramModel::train(&seqs, vocab, order, k)?;
    if let Some(m) = max_len {
        model = model.with_max_len(m);
    }
    let vocab_ref = format!(
        "{}.vocab.json",
        out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "lm".into())
    );
    model.save(out, &vocab_ref)?;
    let mut manifest = RunManifest::new("train-lm");
    manifest.input(corpus);
    manifest.artifacts.push(out.display().to_string());
    manifest.artifacts.push(ebmh::io::resolve(out, &vocab_ref).display().to_string());
    manifest.finish(&sibling_manifest(out))
}

pub fn cmd_train_clf(
    class_a: &Path,
    class_b: &Path,
    labels: Option<Vec<String>>,
    smoothing: f64,
    lowercase: bool,
    out: &Path,
) -> CliResult {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let labels = labels.unwrap_or_else(|| vec![stem(class_a), stem(class_b)]);
    if labels[0] == labels[1] {
        return Err(CliError::Usage(format!("class labels must differ, both are {:?}", labels[0])));
    }
    let norm = |p: &Path| -> CliResult<Vec<String>> {
        Ok(read_lines(p)?.iter().map(|l| ebmh::seq::normalize(l, lowercase)).collect())
    };
    let (a, b) = (norm(class_a)?, norm(class_b)?);
    let clf = StyleClassifier::train(&[(labels[0].as_str(), &a[..]), (labels[1].as_str(), &b[..])], smoothing)?;
    let mut manifest = RunManifest::new("train-clf");
    manifest.input(class_a);
    manifest.input(class_b);
    manifest.write_artifact(out, clf.to_json().as_bytes())?;
    manifest.finish(&sibling_manifest(out))
}

#[derive(Clone, Debug, Default)]
pub struct SampleOverrides {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub init_text: Option<String>,
}

/// Loads a run config, applies flag overrides and runs the batch. Writes
/// `trace.ndjson`, `summary.json` and `manifest.json` into `out_dir` and
/// returns the best text.
pub fn cmd_sample(config: &Path, overrides: &SampleOverrides, out_dir: &Path, write_trace: bool) -> CliResult<String> {
    let mut cfg = MhConfig::load(config)?;
    if let Some(s) = overrides.steps {
        cfg.steps = s;
    }
    if let Some(b) = overrides.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(m) = &overrides.mode {
        cfg.mode = Some(from_value_at::<AcceptMode>(m.as_str().into()).map_err(|e| {
            CliError::Core(ebmh::Error::Config(format!("field `mode`: {}", e.to_string().trim_start_matches("config: "))))
        })?);
    }
    if let Some(t) = &overrides.init_text {
        cfg.init_text = t.clone();
    }
    let run = cfg.resolve(&config_dir(config))?;
    let result = run.sampler.run_batch(&run.init);

    let mut manifest = RunManifest::new("sample");
    manifest.config = Some(config.display().to_string());
    manifest.seed = Some(cfg.seed);
    manifest.input(config);
    for p in &run.inputs {
        manifest.input(p);
    }
    if write_trace {
        let mut trace = String::new();
        for entry in result.trace() {
            trace.push_str(&serde_json::to_string(entry).map_err(|e| CliError::Failed(e.to_string()))?);
            trace.push('\n');
        }
        manifest.write_artifact(&out_dir.join("trace.ndjson"), trace.as_bytes())?;
    }
    let summary = to_json_pretty(&result.summary())?;
    manifest.write_artifact(&out_dir.join("summary.json"), summary.as_bytes())?;
    manifest.finish(&out_dir.join("manifest.json"))?;

    match result.best {
        Some((_, seq, _)) => Ok(seq.text()),
        None => {
            let reasons: Vec<String> = result
                .chains
                .iter()
                .filter_map(|c| c.error.as_ref().map(|e| format!("chain {}: {e}", c.chain_id)))
                .chain(result.init_errors.iter().map(|(id, e)| format!("chain {id}: {e}")))
                .collect();
            Err(CliError::Failed(format!("every chain failed: {}", reasons.join("; "))))
        }
    }
}

/// Writes `report.json`, `histogram.csv` and `manifest.json` into `out_dir`
/// and prints one summary line per sample set.
pub fn cmd_intrinsic(config: &Path, seed: Option<u64>, exact_n: Option<usize>, out_dir: &Path) -> CliResult {
    let mut cfg = IntrinsicConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = exact_n {
        cfg.exact_n = n;
    }
    let resolved = cfg.resolve(&config_dir(config))?;
    let report = intrinsic_eval(&resolved.model, &resolved.target, &resolved.samplers, cfg.exact_n, cfg.seed)?;

    let mut manifest = RunManifest::new("intrinsic");
    manifest.config = Some(config.display().to_string());
    manifest.seed = Some(cfg.seed);
    manifest.input(config);
    for p in &resolved.inputs {
        manifest.input(p);
    }
    manifest.write_artifact(&out_dir.join("report.json"), to_json_pretty(&report)?.as_bytes())?;
    manifest.write_artifact(&out_dir.join("histogram.csv"), report.histogram_csv().as_bytes())?;
    manifest.finish(&out_dir.join("manifest.json"))?;

    println!("{:<16} {:>6} {:>10} {:>10} {:>10} {:>14}", "sampler", "n", "mean", "stddev", "gap", "forward_passes");
    for s in std::iter::once(&report.exact).chain(&report.samplers) {
        println!(
            "{:<16} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>14}",
            s.name,
            s.n,
            s.mean,
            s.stddev,
            s.mean_gap(&report.exact),
            s.forward_passes
        );
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityChoice {
    #[default]
    BuiltinTokenF1,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluencyConfig {
    /// Fluency n-gram model.
    pub lm: String,
    /// Per-token NLL threshold; calibrated from `calibration_corpus` when absent.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub calibration_corpus: Option<String>,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
}

fn default_quantile() -> f64 {
    DEFAULT_FLUENCY_QUANTILE
}

/// Judges for `ebmh eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgesConfig {
    pub classifier: String,
    pub target_label: String,
    pub fluency: FluencyConfig,
    #[serde(default)]
    pub similarity: SimilarityChoice,
    /// Energy term name used with the adapter similarity scorer.
    #[serde(default = "default_sim_term")]
    pub similarity_term: String,
    #[serde(default)]
    pub adapter: Option<ClientConfig>,
}

fn default_sim_term() -> String {
    "sim".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub p_value: f64,
    pub significant: bool,
    pub resamples: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: Metrics,
    pub baseline: Option<Metrics>,
    pub bootstrap: Option<BootstrapReport>,
}

fn load_judges(path: &Path, manifest: &mut RunManifest) -> CliResult<(Judges, Arc<Vocab>)> {
    let value: serde_json::Value = serde_json::from_str(&read_text(path)?)
        .map_err(|e| ebmh::Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: JudgesConfig = from_value_at(value)?;
    let dir = config_dir(path);
    let at = |p: &str| dir.join(p);
    let config_err = |field: &str, e: ebmh::Error| ebmh::Error::Config(format!("field `{field}`: {e}"));

    let clf_path = at(&cfg.classifier);
    let classifier = StyleClassifier::load(&clf_path).map_err(|e| config_err("classifier", e))?;
    classifier
        .label_index(&cfg.target_label)
        .map_err(|e| config_err("target_label", e))?;
    manifest.input(&clf_path);

    let lm_path = at(&cfg.fluency.lm);
    let lm = Arc::new(NgramModel::load(&lm_path).map_err(|e| config_err("fluency.lm", e))?);
    manifest.input(&lm_path);
    let vocab = lm.vocab().clone();
    let fluency: Arc<dyn FluencyJudge> = match (cfg.fluency.threshold, &cfg.fluency.calibration_corpus) {
        (Some(t), _) => Arc::new(NgramFluency::new(lm, t)),
        (None, Some(c)) => {
            let c = at(c);
            let corpus = read_lines(&c).map_err(|e| config_err("fluency.calibration_corpus", e))?;
            manifest.input(&c);
            Arc::new(NgramFluency::calibrate(lm, &corpus, cfg.fluency.quantile)?)
        }
        (None, None) => {
            return Err(config_err(
                "fluency.threshold",
                ebmh::Error::Config("set a threshold or a calibration_corpus".into()),
            )
            .into())
        }
    };
    let similarity = match cfg.similarity {
        SimilarityChoice::BuiltinTokenF1 => SimilarityScorer::TokenF1,
        SimilarityChoice::Adapter => SimilarityScorer::Adapter {
            client: Arc::new(AdapterClient::new(cfg.adapter.unwrap_or_default().with_env_override())),
            term: cfg.similarity_term,
        },
    };
    Ok((
        Judges {
            classifier: Arc::new(classifier),
            target_label: cfg.target_label,
            fluency,
            similarity,
        },
        vocab,
    ))
}

pub fn cmd_eval(
    tsv: &Path,
    judges_path: &Path,
    baseline: Option<&Path>,
    resamples: usize,
    alpha: f64,
    seed: u64,
    out: Option<&Path>,
) -> CliResult<EvalReport> {
    let mut manifest = RunManifest::new("eval");
    manifest.config = Some(judges_path.display().to_string());
    manifest.seed = Some(seed);
    manifest.input(judges_path);
    let (judges, vocab) = load_judges(judges_path, &mut manifest)?;

    let rows = load_tsv(tsv)?;
    manifest.input(tsv);
    if rows.is_empty() {
        return Err(CliError::Failed(format!("{}: no rows to evaluate", tsv.display())));
    }
    let system = judge_rows(&rows, &judges, &vocab)?;
    let mut report = EvalReport {
        system: Metrics::of(&system)?,
        baseline: None,
        bootstrap: None,
    };
    if let Some(b) = baseline {
        let base_rows = load_tsv(b)?;
        manifest.input(b);
        let base = judge_rows(&base_rows, &judges, &vocab)?;
        if base.len() != system.len() {
            return Err(CliError::Failed(format!(
                "baseline has {} rows but the system has {}",
                base.len(),
                system.len()
            )));
        }
        let bs = paired_bootstrap_j(&system, &base, resamples, alpha, seed)?;
        report.baseline = Some(Metrics::of(&base)?);
        report.bootstrap = Some(BootstrapReport {
            p_value: bs.p_value,
            significant: bs.significant,
            resamples: bs.resamples,
            alpha,
        });
    }
    if let Some(out) = out {
        manifest.write_artifact(out, to_json_pretty(&report)?.as_bytes())?;
        manifest.finish(&sibling_manifest(out))?;
    }
    Ok(report)
}

pub fn cmd_conformance(
    endpoint: Option<String>,
    timeout_ms: u64,
    sample_text: Option<String>,
    energy_term: String,
) -> CliResult {
    let mut cfg = ClientConfig {
        timeout_ms,
        ..ClientConfig::default()
    }
    .with_env_override();
    if let Some(e) = endpoint {
        cfg.endpoint = e;
    }
    let client = AdapterClient::new(cfg);
    let mut opts = ConformanceOptions {
        energy_term,
        ..ConformanceOptions::default()
    };
    if let Some(t) = sample_text {
        opts.sample_text = t;
    }
    let report = conformance_suite(&client, &opts);
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "{} failed conformance (endpoint from --endpoint, ${ENDPOINT_ENV} or the default)",
            report.endpoint
        )))
    }
}
