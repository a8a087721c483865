//! Subcommand definitions and their bindings to the core modules.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use debias_core::align::{
    encode_pairs, load_pairs, log_ratio_margin, ranking_accuracy, train_dpo_with, train_rm_with,
    train_sft, RewardModel, TrainCurve, TrainSummary,
};
use debias_core::corpus::{
    load_dataset, validate_split_counts, AnySplit, ClassificationRecord, DetectionRecord,
    MitigationRecord, SplitManifest, SplitName, SplitSizes, TaskKind, DEFAULT_SUPPLEMENT_PREFIX,
};
use debias_core::cot::{
    run_pipeline, ClassificationOutput, DetectionOutput, MitigationOutput, Prediction,
};
use debias_core::decode::guided_generate_with;
use debias_core::lmclient::{
    ChatBackend, ClientError, LiveBackend, RecordingBackend, ReplayBackend, ReplayStore,
    RetryPolicy,
};
use debias_core::par::{self, Exec};
use debias_core::prefgen::{build_preference_pairs, pair_prompt, pairs_to_jsonl};
use debias_core::template::TemplateSet;
use debias_core::toylm::{LanguageModel, ToyLm, Vocab};

use crate::config::{BackendKind, ConfigError, InitKind, LoadedConfig, RunConfig};
use crate::report::{self, EvalReport, Stamp, Summary};
use crate::toy;

#[derive(Debug, Parser)]
#[command(
    name = "debias",
    version,
    about = "Gender-bias detection, classification and mitigation toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set dpo.beta=0.2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set run.seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run every data-parallel stage on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// replay, live or record.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// JSONL store of recorded generator answers.
    #[arg(long, global = true, value_name = "FILE")]
    pub replay_store: Option<PathBuf>,
    /// Chat-completions endpoint for the live and record backends.
    #[arg(long, global = true, value_name = "URL")]
    pub base_url: Option<String>,
    #[arg(long, global = true)]
    pub model_name: Option<String>,
    /// Concurrent requests allowed against a live endpoint.
    #[arg(long, global = true)]
    pub max_inflight: Option<usize>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and check dataset splits, optionally writing normalized copies.
    Ingest(IngestArgs),
    /// Generate counterfactual preference pairs from a mitigation split.
    BuildPrefs(BuildPrefsArgs),
    /// Train the toy policy with DPO.
    TrainDpo(TrainDpoArgs),
    /// Train the pairwise reward model.
    TrainRm(TrainRmArgs),
    /// Rewrite a mitigation split with (optionally reward-guided) decoding.
    Decode(DecodeArgs),
    /// Run a chain-of-thought pipeline over a split.
    RunCot(RunCotArgs),
    /// Binary F1 of detection predictions.
    EvalDetect(EvalArgs),
    /// Macro-F1 of classification predictions.
    EvalClassify(EvalArgs),
    /// Corpus BLEU of rewrites against the edited references.
    EvalMitigate(EvalArgs),
    /// Merge evaluation reports into one summary.
    Report(ReportArgs),
    /// Write the offline toy fixture, including its replay store.
    ToyData(ToyDataArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// detect, classify or mitigate.
    #[arg(long)]
    pub task: TaskKind,
    /// Split files; the split is read from the file name (train/valid/test). One or more.
    #[arg(long = "input", required = true, num_args = 1.., value_name = "FILE")]
    pub inputs: Vec<PathBuf>,
    /// Extra training records appended to the train split.
    #[arg(long, value_name = "FILE")]
    pub supplement: Option<PathBuf>,
    /// Prepended to supplement record ids.
    #[arg(long, default_value = DEFAULT_SUPPLEMENT_PREFIX)]
    pub prefix: String,
    /// Write `<task>_<split>.jsonl` files here.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Write the count report as JSON.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Fail when a given split's size differs from the manifest.
    #[arg(long)]
    pub strict_counts: bool,
}

#[derive(Debug, Args)]
pub struct BuildPrefsArgs {
    /// Mitigation split.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Generation manifest; `<output stem>.manifest.jsonl` by default.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDpoArgs {
    /// Preference pairs from `build-prefs`.
    #[arg(long, value_name = "FILE")]
    pub pairs: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    /// Extra text whose characters join the vocabulary. Repeatable.
    #[arg(long, value_name = "TEXT")]
    pub vocab_extra: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainRmArgs {
    #[arg(long, value_name = "FILE")]
    pub pairs: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Language-model checkpoint whose table initializes the backbone.
    #[arg(long, value_name = "FILE")]
    pub backbone: Option<PathBuf>,
    #[arg(long, value_name = "TEXT")]
    pub vocab_extra: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Policy or base checkpoint.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Mitigation split whose biased sentences are rewritten.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Reward model for guided decoding; plain decoding without it.
    #[arg(long, value_name = "FILE")]
    pub rm: Option<PathBuf>,
    /// Per-step candidate scores as CSV.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunCotArgs {
    /// detect, classify or mitigate.
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Failure log; `<output stem>.failures.jsonl` by default.
    #[arg(long, value_name = "FILE")]
    pub failures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub gold: PathBuf,
    /// Canonical JSON report.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Human-readable report.
    #[arg(long, value_name = "FILE")]
    pub text: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation report JSON files. One or more.
    #[arg(long = "input", required = true, num_args = 1.., value_name = "FILE")]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub text: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToyDataArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{}", chain(.0))]
    Domain(anyhow::Error),
}

/// The error chain joined by `: `, skipping causes already quoted by their
/// parent's message.
fn chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Domain(e)
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Overrides implied by the convenience flags; they win over `--set`.
fn flag_overrides(g: &GlobalArgs) -> Vec<String> {
    let quote = |s: &str| toml::Value::String(s.to_string()).to_string();
    let mut out = g.set.clone();
    if let Some(s) = g.seed {
        out.push(format!("run.seed={s}"));
    }
    if g.sequential {
        out.push("run.exec=\"sequential\"".into());
    }
    if let Some(b) = &g.backend {
        out.push(format!("client.backend={}", quote(b)));
    }
    if let Some(p) = &g.replay_store {
        out.push(format!(
            "paths.replay_store={}",
            quote(&absolute(p).to_string_lossy())
        ));
    }
    if let Some(u) = &g.base_url {
        out.push(format!("client.base_url={}", quote(u)));
    }
    if let Some(m) = &g.model_name {
        out.push(format!("client.model_name={}", quote(m)));
    }
    if let Some(n) = g.max_inflight {
        out.push(format!("client.max_inflight={n}"));
    }
    out
}

struct Ctx {
    loaded: LoadedConfig,
    quiet: bool,
}

impl Ctx {
    fn cfg(&self) -> &RunConfig {
        &self.loaded.config
    }

    fn exec(&self) -> Exec {
        self.cfg().exec()
    }

    fn stamp(&self) -> Stamp {
        Stamp {
            fingerprint: self.loaded.fingerprint.clone(),
            seed: self.loaded.seed(),
        }
    }

    fn note(&self, msg: impl std::fmt::Display) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn templates(&self) -> Result<TemplateSet, CliError> {
        match &self.cfg().paths.templates {
            None => Ok(TemplateSet::builtin()),
            Some(dir) => {
                let dir = self.loaded.resolve(dir);
                TemplateSet::with_overrides(&dir)
                    .map_err(|e| config_err(format!("templates {}: {e}", dir.display())))
            }
        }
    }

    fn store_path(&self) -> Result<PathBuf, CliError> {
        self.cfg()
            .paths
            .replay_store
            .as_deref()
            .map(|p| self.loaded.resolve(p))
            .ok_or_else(|| {
                config_err("config: this backend needs paths.replay_store (or --replay-store)")
            })
    }

    fn live(&self) -> Result<LiveBackend, CliError> {
        let client = &self.cfg().client;
        let url = client.base_url.clone().ok_or_else(|| {
            config_err("config: this backend needs client.base_url (or --base-url)")
        })?;
        let live = if client.api_key_env.is_empty() {
            LiveBackend::new(url, None)
        } else {
            LiveBackend::from_env(url, &client.api_key_env)
                .map_err(|e| config_err(e.to_string()))?
        };
        Ok(live.with_retry(RetryPolicy {
            max_retries: client.max_retries,
            ..RetryPolicy::default()
        }))
    }

    /// Validate the backend settings without touching the store file.
    fn check_backend(&self) -> Result<(), CliError> {
        match self.cfg().client.backend {
            BackendKind::Replay => {
                let p = self.store_path()?;
                if !p.is_file() {
                    return Err(config_err(format!(
                        "replay store {} does not exist",
                        p.display()
                    )));
                }
            }
            BackendKind::Live => {
                self.live()?;
            }
            BackendKind::Record => {
                self.store_path()?;
                self.live()?;
            }
        }
        Ok(())
    }

    fn backend(&self) -> Result<Box<dyn ChatBackend>, CliError> {
        self.check_backend()?;
        let open = |p: &Path| -> Result<Arc<ReplayStore>, CliError> {
            Ok(Arc::new(ReplayStore::open(p).map_err(anyhow::Error::from)?))
        };
        Ok(match self.cfg().client.backend {
            BackendKind::Replay => Box::new(ReplayBackend::new(open(&self.store_path()?)?)),
            BackendKind::Live => Box::new(self.live()?),
            BackendKind::Record => Box::new(RecordingBackend::new(
                self.live()?,
                open(&self.store_path()?)?,
                self.cfg().client.force,
            )),
        })
    }

    fn meta_json(&self, command: &str) -> serde_json::Value {
        self.loaded.meta(command)
    }

    fn meta_comment(&self) -> String {
        format!(
            "fingerprint={} seed={}",
            self.loaded.fingerprint,
            self.loaded.seed()
        )
    }
}

fn require_input(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(config_err(format!("input {} does not exist", p.display())))
    }
}

/// Refuse to write over any input.
fn check_outputs(outputs: &[&Path], inputs: &[&Path]) -> Result<(), CliError> {
    for o in outputs {
        let o_abs = absolute(o);
        for i in inputs {
            let same = match (o.canonicalize(), i.canonicalize()) {
                (Ok(a), Ok(b)) => a == b,
                _ => o_abs == absolute(i),
            };
            if same {
                return Err(config_err(format!(
                    "output {} would overwrite an input",
                    o.display()
                )));
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn canonical_json<T: Serialize>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("serializable");
    format!("{}\n", debias_core::lmclient::canonical_string(&value))
}

/// Parse arguments already split by clap and run the command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::ToyData(a) = &cli.command {
        toy::write_fixture(&a.out).map_err(|e| CliError::Domain(e.into()))?;
        if !cli.global.quiet {
            eprintln!("toy fixture written to {}", a.out.display());
        }
        return Ok(());
    }
    let config_path = cli.global.config.as_deref().map(absolute);
    if let Some(p) = &config_path {
        if !p.is_file() {
            return Err(config_err(format!(
                "config file {} does not exist",
                p.display()
            )));
        }
    }
    let loaded = RunConfig::load(config_path.as_deref(), &flag_overrides(&cli.global))?;
    let ctx = Ctx {
        loaded,
        quiet: cli.global.quiet,
    };
    match &cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::BuildPrefs(a) => build_prefs(&ctx, a),
        Command::TrainDpo(a) => train_dpo(&ctx, a),
        Command::TrainRm(a) => train_rm(&ctx, a),
        Command::Decode(a) => decode(&ctx, a),
        Command::RunCot(a) => run_cot(&ctx, a),
        Command::EvalDetect(a) => eval(&ctx, a, TaskKind::Detect),
        Command::EvalClassify(a) => eval(&ctx, a, TaskKind::Classify),
        Command::EvalMitigate(a) => eval(&ctx, a, TaskKind::Mitigate),
        Command::Report(a) => merge_reports(&ctx, a),
        Command::ToyData(_) => unreachable!("handled above"),
    }
}

fn ingest(ctx: &Ctx, a: &IngestArgs) -> Result<(), CliError> {
    let mut named: Vec<(SplitName, &PathBuf)> = Vec::new();
    for p in &a.inputs {
        require_input(p)?;
        let split = SplitName::infer(p).ok_or_else(|| {
            config_err(format!(
                "cannot tell the split of {}; name it after train, valid or test",
                p.display()
            ))
        })?;
        if named.iter().any(|(s, _)| *s == split) {
            return Err(config_err(format!("two inputs for the {split} split")));
        }
        named.push((split, p));
    }
    if let Some(s) = &a.supplement {
        require_input(s)?;
        if !named.iter().any(|(split, _)| *split == SplitName::Train) {
            return Err(config_err("--supplement needs a train split input"));
        }
    }
    let manifest = match &ctx.cfg().paths.split_manifest {
        Some(p) => {
            let p = ctx.loaded.resolve(p);
            SplitManifest::load(&p)
                .map_err(|e| config_err(format!("split manifest {}: {e}", p.display())))?
        }
        None => SplitManifest::official(),
    };
    let outputs: Vec<PathBuf> = match &a.out_dir {
        Some(dir) => named
            .iter()
            .map(|(s, _)| dir.join(format!("{}_{}.jsonl", a.task, s)))
            .collect(),
        None => Vec::new(),
    };
    let mut inputs: Vec<&Path> = a.inputs.iter().map(PathBuf::as_path).collect();
    inputs.extend(a.supplement.as_deref());
    let out_refs: Vec<&Path> = outputs
        .iter()
        .map(PathBuf::as_path)
        .chain(a.report.as_deref())
        .collect();
    check_outputs(&out_refs, &inputs)?;

    let mut splits = Vec::new();
    let mut sizes = SplitSizes::default();
    for (split, p) in &named {
        let data = load_dataset(p, a.task, Some(*split))
            .with_context(|| format!("loading {}", p.display()))?;
        sizes.set(*split, data.len());
        splits.push(data);
    }
    let mut report = validate_split_counts(sizes, a.task, Some(&manifest));
    report
        .entries
        .retain(|e| named.iter().any(|(s, _)| *s == e.split));
    print!("{report}");
    if a.strict_counts && report.mismatches().next().is_some() {
        let which: Vec<String> = report.mismatches().map(|m| m.split.to_string()).collect();
        return Err(anyhow!("split sizes differ from the manifest: {}", which.join(", ")).into());
    }
    if let Some(s) = &a.supplement {
        let extra = load_dataset(s, a.task, Some(SplitName::Train))
            .with_context(|| format!("loading {}", s.display()))?;
        let train = splits
            .iter_mut()
            .find(|d| d.split_name() == SplitName::Train)
            .expect("checked above");
        *train = train
            .merge(&extra, &a.prefix)
            .context("merging supplement")?;
        ctx.note(format!("supplement: +{} train records", extra.len()));
    }
    let meta = ctx.loaded.meta_line("ingest");
    for (data, out) in splits.iter().zip(&outputs) {
        write_file(out, format!("{meta}{}", data.to_jsonl()))?;
        ctx.note(format!("wrote {} ({} records)", out.display(), data.len()));
    }
    if let Some(p) = &a.report {
        #[derive(Serialize)]
        struct Doc<'a> {
            fingerprint: &'a str,
            seed: u64,
            report: &'a debias_core::corpus::SplitReport,
        }
        let doc = Doc {
            fingerprint: &ctx.loaded.fingerprint,
            seed: ctx.loaded.seed(),
            report: &report,
        };
        write_file(p, canonical_json(&doc))?;
    }
    Ok(())
}

fn load_mitigation(
    p: &Path,
) -> anyhow::Result<debias_core::corpus::DatasetSplit<MitigationRecord>> {
    match load_dataset(p, TaskKind::Mitigate, None)
        .with_context(|| format!("loading {}", p.display()))?
    {
        AnySplit::Mitigate(s) => Ok(s),
        _ => unreachable!("loaded as mitigation"),
    }
}

fn build_prefs(ctx: &Ctx, a: &BuildPrefsArgs) -> Result<(), CliError> {
    require_input(&a.input)?;
    let manifest_path = a
        .manifest
        .clone()
        .unwrap_or_else(|| sibling(&a.output, ".manifest.jsonl"));
    check_outputs(&[&a.output, &manifest_path], &[&a.input])?;
    let templates = ctx.templates()?;
    let backend = ctx.backend()?;
    let split = load_mitigation(&a.input)?;
    let config = ctx.cfg().prefgen_config();
    let (pairs, manifest) =
        build_preference_pairs(&split, backend.as_ref(), &templates, &config, ctx.exec())
            .context("rendering counterfactual prompts")?;
    manifest
        .reconcile(&pairs)
        .map_err(|e| anyhow!("generation manifest does not reconcile: {e}"))?;
    write_file(
        &a.output,
        pairs_to_jsonl(&pairs, Some(&ctx.meta_json("build-prefs"))),
    )?;
    write_file(
        &manifest_path,
        manifest.to_jsonl(Some(&ctx.loaded.fingerprint)),
    )?;
    let t = manifest.total();
    ctx.note(format!(
        "{} records: generated {}, accepted {}, rejected {}, failed {}",
        split.len(),
        t.generated,
        t.accepted,
        t.rejected,
        t.failed
    ));
    Ok(())
}

fn pair_vocab(pairs: &[debias_core::align::PreferencePair], extra: &[String]) -> Vocab {
    Vocab::from_texts(
        pairs
            .iter()
            .flat_map(|p| p.texts())
            .chain(extra.iter().map(String::as_str)),
    )
}

fn checkpoint_meta(ctx: &Ctx, command: &str, role: &str) -> String {
    let mut m = ctx.meta_json(command);
    m["role"] = serde_json::Value::String(role.to_string());
    debias_core::lmclient::canonical_string(&m)
}

#[derive(Serialize)]
struct TrainReport<'a> {
    fingerprint: &'a str,
    seed: u64,
    pairs: usize,
    vocab_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    sft: Option<&'a TrainSummary>,
    train: &'a TrainSummary,
    /// DPO: share of pairs whose log-ratio margin ended above zero.
    /// RM: ranking accuracy on the training pairs.
    pair_metric: f64,
}

fn write_curve(ctx: &Ctx, path: &Path, curve: &TrainCurve) -> anyhow::Result<()> {
    write_file(path, curve.to_csv(Some(&ctx.meta_comment())))
}

fn train_dpo(ctx: &Ctx, a: &TrainDpoArgs) -> Result<(), CliError> {
    require_input(&a.pairs)?;
    if let Some(p) = &a.init {
        require_input(p)?;
    }
    let names = [
        "base.ckpt",
        "policy.ckpt",
        "dpo_curve.csv",
        "train_summary.json",
        "sft_curve.csv",
    ];
    let outs: Vec<PathBuf> = names.iter().map(|n| a.out_dir.join(n)).collect();
    let out_refs: Vec<&Path> = outs.iter().map(PathBuf::as_path).collect();
    let mut ins: Vec<&Path> = vec![&a.pairs];
    ins.extend(a.init.as_deref());
    check_outputs(&out_refs, &ins)?;
    let cfg = ctx.cfg();
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;

    let pairs = load_pairs(&a.pairs).with_context(|| format!("loading {}", a.pairs.display()))?;
    let base = match &a.init {
        Some(p) => {
            ToyLm::load(p)
                .with_context(|| format!("loading {}", p.display()))?
                .0
        }
        None => {
            let vocab = pair_vocab(&pairs, &a.vocab_extra);
            match cfg.toy.init {
                InitKind::Random => ToyLm::random(vocab, cfg.dpo.optim.seed, cfg.toy.init_scale),
                InitKind::Uniform => ToyLm::uniform(vocab),
            }
        }
    };
    let encoded = encode_pairs(&pairs, base.vocab()).context("tokenizing pairs")?;
    let (start, sft_curve) = if cfg.sft.enabled {
        let (m, c) =
            train_sft(base.clone(), &encoded, &cfg.sft.optim).context("supervised warm start")?;
        (m, Some(c))
    } else {
        (base.clone(), None)
    };
    let (policy, curve) =
        train_dpo_with(start.clone(), &encoded, &cfg.dpo, ctx.exec()).context("DPO training")?;
    let improved = encoded
        .iter()
        .filter(|p| log_ratio_margin(&policy, &start, p) > 0.0)
        .count() as f64
        / encoded.len() as f64;

    base.save(&outs[0], &checkpoint_meta(ctx, "train-dpo", "base"))
        .context("saving base checkpoint")?;
    policy
        .save(&outs[1], &checkpoint_meta(ctx, "train-dpo", "policy"))
        .context("saving policy checkpoint")?;
    write_curve(ctx, &outs[2], &curve)?;
    if let Some(c) = &sft_curve {
        write_curve(ctx, &outs[4], c)?;
    }
    let summary = TrainReport {
        fingerprint: &ctx.loaded.fingerprint,
        seed: cfg.dpo.optim.seed,
        pairs: encoded.len(),
        vocab_size: base.vocab().len(),
        sft: sft_curve.as_ref().map(|c| &c.summary),
        train: &curve.summary,
        pair_metric: improved,
    };
    write_file(&outs[3], canonical_json(&summary))?;
    ctx.note(format!(
        "dpo: loss {:.6} -> {:.6} over {} steps; margin up on {:.1}% of {} pairs",
        curve.summary.initial_loss,
        curve.summary.final_loss,
        curve.summary.steps,
        improved * 100.0,
        encoded.len()
    ));
    Ok(())
}

fn train_rm(ctx: &Ctx, a: &TrainRmArgs) -> Result<(), CliError> {
    require_input(&a.pairs)?;
    if let Some(p) = &a.backbone {
        require_input(p)?;
    }
    let outs = [
        a.out_dir.join("rm.ckpt"),
        a.out_dir.join("rm_curve.csv"),
        a.out_dir.join("rm_summary.json"),
    ];
    let out_refs: Vec<&Path> = outs.iter().map(PathBuf::as_path).collect();
    let mut ins: Vec<&Path> = vec![&a.pairs];
    ins.extend(a.backbone.as_deref());
    check_outputs(&out_refs, &ins)?;
    let cfg = ctx.cfg();
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;

    let pairs = load_pairs(&a.pairs).with_context(|| format!("loading {}", a.pairs.display()))?;
    let backbone = match &a.backbone {
        Some(p) => {
            ToyLm::load(p)
                .with_context(|| format!("loading {}", p.display()))?
                .0
        }
        None => ToyLm::random(
            pair_vocab(&pairs, &a.vocab_extra),
            cfg.rm.seed,
            cfg.toy.init_scale,
        ),
    };
    let encoded = encode_pairs(&pairs, backbone.vocab()).context("tokenizing pairs")?;
    let init = RewardModel::from_backbone(&backbone);
    let (rm, curve) =
        train_rm_with(init, &encoded, &cfg.rm, ctx.exec()).context("reward model training")?;
    let accuracy = ranking_accuracy(&rm, &encoded);
    rm.save(&outs[0], &checkpoint_meta(ctx, "train-rm", "reward"))
        .context("saving reward model")?;
    write_curve(ctx, &outs[1], &curve)?;
    let summary = TrainReport {
        fingerprint: &ctx.loaded.fingerprint,
        seed: cfg.rm.seed,
        pairs: encoded.len(),
        vocab_size: rm.vocab().len(),
        sft: None,
        train: &curve.summary,
        pair_metric: accuracy,
    };
    write_file(&outs[2], canonical_json(&summary))?;
    ctx.note(format!(
        "rm: loss {:.6} -> {:.6}; ranking accuracy {:.1}%",
        curve.summary.initial_loss,
        curve.summary.final_loss,
        accuracy * 100.0
    ));
    Ok(())
}

fn decode(ctx: &Ctx, a: &DecodeArgs) -> Result<(), CliError> {
    require_input(&a.model)?;
    require_input(&a.input)?;
    if let Some(p) = &a.rm {
        require_input(p)?;
    }
    let mut ins: Vec<&Path> = vec![&a.model, &a.input];
    ins.extend(a.rm.as_deref());
    let mut outs: Vec<&Path> = vec![&a.output];
    outs.extend(a.trace.as_deref());
    check_outputs(&outs, &ins)?;
    let cfg = ctx.cfg();
    let templates = ctx.templates()?;

    let (lm, _) =
        ToyLm::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let rm = match &a.rm {
        Some(p) => {
            RewardModel::load(p)
                .with_context(|| format!("loading {}", p.display()))?
                .0
        }
        None => RewardModel::zeroed(lm.vocab().clone()),
    };
    let split = load_mitigation(&a.input)?;
    let prompts = split
        .records()
        .iter()
        .map(|r| {
            let text = pair_prompt(&templates, &r.biased_text, cfg.prefgen.prompt_style)?;
            let tokens = lm
                .vocab()
                .encode(&text)
                .with_context(|| format!("record {}", r.id))?;
            Ok((r.id.clone(), tokens))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let results = par::map(ctx.exec(), &prompts, |(_, prompt)| {
        guided_generate_with(&lm, &rm, prompt, &cfg.decode, Exec::Sequential)
    });
    let mut out = ctx.loaded.meta_line("decode");
    let mut trace = format!("# {}\n", ctx.meta_comment());
    for ((id, _), res) in prompts.iter().zip(results) {
        let g = res.with_context(|| format!("decoding record {id}"))?;
        let rewrite = lm.vocab().decode(&g.tokens).context("detokenizing")?;
        let pred = Prediction {
            id: id.clone(),
            output: MitigationOutput { rewrite },
            flagged: false,
            flag_reason: None,
            attempts: 1,
        };
        out.push_str(&serde_json::to_string(&pred).expect("serializable"));
        out.push('\n');
        if a.trace.is_some() {
            for (i, line) in g.trace_csv(lm.vocab()).lines().enumerate() {
                if i == 0 && trace.lines().count() == 1 {
                    let _ = writeln!(trace, "id,{line}");
                } else if i > 0 {
                    let _ = writeln!(trace, "{id},{line}");
                }
            }
        }
    }
    write_file(&a.output, out)?;
    if let Some(p) = &a.trace {
        write_file(p, trace)?;
    }
    ctx.note(format!("decoded {} records", prompts.len()));
    Ok(())
}

fn run_cot(ctx: &Ctx, a: &RunCotArgs) -> Result<(), CliError> {
    require_input(&a.input)?;
    let failures_path = a
        .failures
        .clone()
        .unwrap_or_else(|| sibling(&a.output, ".failures.jsonl"));
    check_outputs(&[&a.output, &failures_path], &[&a.input])?;
    let templates = ctx.templates()?;
    let backend = ctx.backend()?;
    let split = load_dataset(&a.input, a.task, None)
        .with_context(|| format!("loading {}", a.input.display()))?;
    let out = run_pipeline(
        &split,
        a.task,
        backend.as_ref(),
        &templates,
        &ctx.cfg().pipeline_config(),
        ctx.exec(),
    )
    .context("running pipeline")?;
    let meta = ctx.loaded.meta_line("run-cot");
    write_file(&a.output, format!("{meta}{}", out.predictions_jsonl))?;
    write_file(&failures_path, format!("{meta}{}", out.failures_jsonl))?;
    ctx.note(format!(
        "{}: {} records, {} flagged, {} failure entries",
        a.task,
        out.records,
        out.flagged,
        out.failures_jsonl.lines().count()
    ));
    Ok(())
}

fn gold<R: debias_core::corpus::TaskRecord>(
    p: &Path,
) -> anyhow::Result<debias_core::corpus::DatasetSplit<R>> {
    Ok(report::read_gold::<R>(p)?)
}

fn eval(ctx: &Ctx, a: &EvalArgs, task: TaskKind) -> Result<(), CliError> {
    require_input(&a.pred)?;
    require_input(&a.gold)?;
    let outs: Vec<&Path> = a
        .output
        .iter()
        .chain(&a.text)
        .map(PathBuf::as_path)
        .collect();
    check_outputs(&outs, &[&a.pred, &a.gold])?;
    let stamp = ctx.stamp();
    let report: EvalReport = match task {
        TaskKind::Detect => report::eval_detect(
            &report::read_predictions::<DetectionOutput>(&a.pred)?,
            &gold::<DetectionRecord>(&a.gold)?,
            &stamp,
        )?,
        TaskKind::Classify => report::eval_classify(
            &report::read_predictions::<ClassificationOutput>(&a.pred)?,
            &gold::<ClassificationRecord>(&a.gold)?,
            &stamp,
        )?,
        TaskKind::Mitigate => report::eval_mitigate(
            &report::read_predictions::<MitigationOutput>(&a.pred)?,
            &gold::<MitigationRecord>(&a.gold)?,
            &ctx.cfg().bleu,
            &stamp,
        )?,
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(p) = &a.output {
        write_file(p, report.to_json())?;
    }
    if let Some(p) = &a.text {
        write_file(p, text)?;
    }
    Ok(())
}

fn merge_reports(ctx: &Ctx, a: &ReportArgs) -> Result<(), CliError> {
    for p in &a.inputs {
        require_input(p)?;
    }
    let ins: Vec<&Path> = a.inputs.iter().map(PathBuf::as_path).collect();
    let outs: Vec<&Path> = std::iter::once(&a.output)
        .chain(&a.text)
        .map(PathBuf::as_path)
        .collect();
    check_outputs(&outs, &ins)?;
    let mut seen = BTreeSet::new();
    let mut reports = Vec::new();
    for p in &a.inputs {
        let text =
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let r: EvalReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        seen.insert(r.fingerprint.clone());
        reports.push(r);
    }
    if seen.len() > 1 {
        ctx.note("warning: reports carry different config fingerprints");
    }
    let summary = Summary::merge(reports, &ctx.stamp())?;
    let text = summary.to_text();
    print!("{text}");
    write_file(&a.output, summary.to_json())?;
    if let Some(p) = &a.text {
        write_file(p, text)?;
    }
    Ok(())
}

impl From<report::EvalError> for CliError {
    fn from(e: report::EvalError) -> Self {
        CliError::Domain(e.into())
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError::Domain(e.into())
    }
}
