//! Command-line orchestration of the pipeline:
//! `synth` → `ingest` → `label` → `train` → `eval` → `report`.
//!
//! Each stage reads only its documented inputs and writes only into `--out`,
//! so stages can be re-run, resumed, or swapped independently. All stages are
//! deterministic for a fixed seed: re-running a completed stage with
//! unchanged inputs reproduces its outputs byte for byte.
//!
//! Exit codes: 0 success, 1 failure (with one machine-readable JSON error
//! line on stderr), 2 usage errors.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;

use crate::corpus::{self, Corpus, FilterConfig};
use crate::error::{Error, Result};
use crate::evalkit::{emit_report, evaluate, EvalConfig, EvalReport};
use crate::policy::load_checkpoint;
use crate::reward::RewardProfile;
use crate::synth::{self, SyntheticTaskSpec, TaskFamily};
use crate::trainer::{train, Objective, OptimizerKind, TrainConfig};
use crate::verifier::{label_corpus, ExecLimits, LabelOptions};

/// Flat `key = value` configuration file.
///
/// One assignment per line; `#` starts a comment line; values may be
/// wrapped in single or double quotes; duplicate or unknown keys are
/// rejected so typos fail loudly instead of silently using defaults.
#[derive(Debug, Default)]
pub struct FlatConfig {
    entries: IndexMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<FlatConfig> {
        let mut entries = IndexMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let mut value = value.trim();
            if value.len() >= 2
                && ((value.starts_with('"') && value.ends_with('"'))
                    || (value.starts_with('\'') && value.ends_with('\'')))
            {
                value = &value[1..value.len() - 1];
            }
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        Ok(FlatConfig { entries, used: RefCell::new(BTreeSet::new()) })
    }

    pub fn load(path: &Path) -> Result<FlatConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        FlatConfig::parse(&text)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let value = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(value)
    }

    /// Typed lookup; absent key → `None`.
    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("key {key:?}: cannot parse {v:?}: {e}"))),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.raw(key) {
            None => Ok(None),
            Some("true") => Ok(Some(true)),
            Some("false") => Ok(Some(false)),
            Some(v) => {
                Err(Error::Config(format!("key {key:?}: expected true or false, got {v:?}")))
            }
        }
    }

    /// Lookup where the literal value `none` selects `None` (for optional
    /// settings like `grad_clip_norm`).
    pub fn get_or_none<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Option<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some("none") => Ok(Some(None)),
            Some(v) => v
                .parse::<T>()
                .map(|t| Some(Some(t)))
                .map_err(|e| Error::Config(format!("key {key:?}: cannot parse {v:?}: {e}"))),
        }
    }

    /// Comma-separated list of values.
    pub fn get_list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.trim().parse::<T>().map_err(|e| {
                        Error::Config(format!("key {key:?}: cannot parse item {item:?}: {e}"))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Error on any key that no stage consumed (typo guard).
    pub fn assert_consumed(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !used.contains(k.as_str()))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "grouprl",
    version,
    about = "Offline policy-gradient post-training with verifiable code rewards",
    after_help = "The interpreter used by label/eval stages can be overridden with the \
                  GROUPRL_INTERPRETER environment variable (a command template where \
                  {source} stands for the program path)."
)]
pub struct Cli {
    /// Flat `key = value` config file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for this stage.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Redo work that is already done (e.g. re-verify labeled solutions).
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task corpus with known-verdict solutions.
    Synth(SynthArgs),
    /// Validate and filter a raw JSONL corpus; quarantine malformed lines.
    Ingest(IngestArgs),
    /// Execute every solution against its tests and record verdicts.
    Label(LabelArgs),
    /// Train a policy on a labeled corpus (offline; no execution).
    Train(TrainArgs),
    /// Sample from a checkpoint, verify, and report pass@k.
    Eval(EvalArgs),
    /// Merge eval reports (and a training eval history) into tables + plots.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Task family: reverse-string | sort-digits | balanced-parens.
    #[arg(long)]
    pub family: Option<TaskFamily>,
    #[arg(long)]
    pub problems: Option<usize>,
    #[arg(long)]
    pub solutions_per_problem: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw JSONL corpus to ingest.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Discard solutions longer than this many tokens.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Reject problems that carry no tests.
    #[arg(long)]
    pub require_tests: bool,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Corpus JSONL to label (output of ingest or synth).
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Parallel verification workers.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Wall-clock budget per test, in milliseconds.
    #[arg(long)]
    pub wall_time_ms: Option<u64>,
    /// After labeling, keep at most this many Accepted solutions per problem.
    #[arg(long)]
    pub cap_correct: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled corpus JSONL.
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Advantage estimator: rloo | grpo | exp.
    #[arg(long)]
    pub advantage_mode: Option<String>,
    /// Objective: rl | sft.
    #[arg(long)]
    pub objective: Option<String>,
    /// Skip periodic held-out evaluation (training then never runs programs).
    #[arg(long)]
    pub no_eval: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Policy checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Corpus JSONL supplying the problems (solutions are ignored).
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long)]
    pub samples_per_problem: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// eval_report.json files to merge; row names come from their parent
    /// directories.
    #[arg(value_name = "REPORT", required_unless_present = "history")]
    pub reports: Vec<PathBuf>,
    /// eval_history.jsonl from a training run, plotted across checkpoints.
    #[arg(long, value_name = "FILE")]
    pub history: Option<PathBuf>,
}

/// Entry point for the binary: parse, dispatch, translate errors to exit
/// codes.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 for usage errors and 0 for --help/--version.
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": err.kind(), "message": err.to_string() })
            );
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => FlatConfig::load(path)?,
        None => FlatConfig::default(),
    };
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Config("missing --out <dir>".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io_at(&out, e))?;

    match &cli.command {
        Command::Synth(args) => cmd_synth(&cli, &config, args, &out)?,
        Command::Ingest(args) => cmd_ingest(&cli, &config, args, &out)?,
        Command::Label(args) => cmd_label(&cli, &config, args, &out)?,
        Command::Train(args) => cmd_train(&cli, &config, args, &out)?,
        Command::Eval(args) => cmd_eval(&cli, &config, args, &out)?,
        Command::Report(args) => cmd_report(args, &out)?,
    }
    config.assert_consumed()
}

fn seed_of(cli: &Cli, config: &FlatConfig) -> Result<u64> {
    Ok(cli.seed.or(config.get("seed")?).unwrap_or(0))
}

/// Command-line flag wins over the config-file key.
fn pick<T>(flag: Option<T>, from_config: Result<Option<T>>) -> Result<Option<T>> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => from_config,
    }
}

fn synth_spec(cli: &Cli, config: &FlatConfig, args: &SynthArgs) -> Result<SyntheticTaskSpec> {
    let mut spec = SyntheticTaskSpec::default();
    if let Some(f) = config.get::<TaskFamily>("family")? {
        spec.family = f;
    }
    if let Some(n) = config.get("problems")? {
        spec.problems = n;
    }
    if let Some(n) = config.get("solutions_per_problem")? {
        spec.solutions_per_problem = n;
    }
    if let Some(v) = config.get("mix.accepted")? {
        spec.mix.accepted = v;
    }
    if let Some(v) = config.get("mix.wrong_answer")? {
        spec.mix.wrong_answer = v;
    }
    if let Some(v) = config.get("mix.time_limit")? {
        spec.mix.time_limit = v;
    }
    if let Some(v) = config.get("mix.runtime_error")? {
        spec.mix.runtime_error = v;
    }
    if let Some(v) = config.get("mix.compile_error")? {
        spec.mix.compile_error = v;
    }
    if let Some(f) = args.family {
        spec.family = f;
    }
    if let Some(n) = args.problems {
        spec.problems = n;
    }
    if let Some(n) = args.solutions_per_problem {
        spec.solutions_per_problem = n;
    }
    spec.seed = seed_of(cli, config)?;
    Ok(spec)
}

fn cmd_synth(cli: &Cli, config: &FlatConfig, args: &SynthArgs, out: &Path) -> Result<()> {
    let spec = synth_spec(cli, config, args)?;
    let corpus = synth::generate(&spec)?;
    let path = out.join("corpus.jsonl");
    corpus.save(&path)?;
    println!(
        "[synth] wrote {} problems × {} solutions ({}) to {}",
        spec.problems,
        spec.solutions_per_problem,
        spec.family,
        path.display()
    );
    Ok(())
}

fn cmd_ingest(cli: &Cli, config: &FlatConfig, args: &IngestArgs, out: &Path) -> Result<()> {
    let _ = seed_of(cli, config)?; // seed is accepted but unused here
    let mut filter = FilterConfig::default();
    if let Some(n) = pick(args.max_tokens, config.get("max_tokens"))? {
        filter.max_tokens = n;
    }
    filter.require_tests = args.require_tests || config.get_bool("require_tests")?.unwrap_or(false);

    let outcome = corpus::ingest_corpus(&args.input, &filter)?;
    let corpus_path = out.join("corpus.jsonl");
    outcome.corpus.save(&corpus_path)?;
    let rejects_path = out.join("rejects.jsonl");
    corpus::write_rejects(&outcome.stats.rejects, &rejects_path)?;
    let stats_path = out.join("ingest_stats.json");
    std::fs::write(
        &stats_path,
        serde_json::to_string_pretty(&outcome.stats)? + "\n",
    )
    .map_err(|e| Error::io_at(&stats_path, e))?;
    println!(
        "[ingest] kept {} problems / {} solutions; {} rejects, {} over-length → {}",
        outcome.corpus.problems().len(),
        outcome.corpus.total_solutions(),
        outcome.stats.rejects.len(),
        outcome.stats.solutions_discarded_by_length,
        corpus_path.display()
    );
    Ok(())
}

/// Verifier limits shared by label/eval/train stages; the
/// `GROUPRL_INTERPRETER` environment variable overrides the interpreter
/// command last.
fn exec_limits(config: &FlatConfig, wall_time_ms: Option<u64>) -> Result<ExecLimits> {
    let mut limits = ExecLimits::default();
    if let Some(ms) = pick(wall_time_ms, config.get("wall_time_ms"))? {
        limits.wall_time_per_test = Duration::from_millis(ms);
    }
    if let Some(mem) = config.get_or_none::<u64>("memory_bytes")? {
        limits.memory_bytes = mem;
    }
    if let Some(cmd) = config.get::<String>("interpreter")? {
        limits.interpreter_command = cmd;
    }
    if let Some(b) = config.get_bool("isolate_network")? {
        limits.isolate_network = b;
    }
    if let Some(n) = config.get("max_output_bytes")? {
        limits.max_output_bytes = n;
    }
    Ok(limits.with_env_override())
}

fn cmd_label(cli: &Cli, config: &FlatConfig, args: &LabelArgs, out: &Path) -> Result<()> {
    let seed = seed_of(cli, config)?;
    let corpus = Corpus::load(&args.corpus)?;
    let out_path = out.join("corpus.labeled.jsonl");

    if corpus.is_fully_labeled() && !cli.force {
        corpus.save(&out_path)?;
        println!("[label] corpus already fully labeled; nothing to do");
        return Ok(());
    }

    let limits = exec_limits(config, args.wall_time_ms)?;
    let options = LabelOptions {
        workers: pick(args.workers, config.get("workers"))?.unwrap_or(1),
        force: cli.force,
        progress_path: Some(out.join("label_progress.jsonl")),
        reward_profile: reward_profile_from(config)?,
    };
    let labeled = label_corpus(&corpus, &limits, &options)?;

    let cap = pick(args.cap_correct, config.get("cap_correct"))?;
    let finished = match cap {
        Some(cap) => corpus::cap_correct(&labeled, cap, seed)?,
        None => labeled,
    };
    finished.save(&out_path)?;

    let mut hist: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, _, _, sol) in finished.indexed_solutions() {
        if let Some(v) = sol.verdict {
            *hist.entry(v.as_str()).or_default() += 1;
        }
    }
    let stats_path = out.join("label_stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&hist)? + "\n")
        .map_err(|e| Error::io_at(&stats_path, e))?;
    println!(
        "[label] {} solutions labeled {:?} → {}",
        finished.total_solutions(),
        hist,
        out_path.display()
    );
    Ok(())
}

fn reward_profile_from(config: &FlatConfig) -> Result<RewardProfile> {
    let mut profile = RewardProfile::default();
    if let Some(name) = config.get::<String>("reward.name")? {
        profile.name = name;
    }
    if let Some(v) = config.get("reward.accepted")? {
        profile.accepted = v;
    }
    if let Some(v) = config.get("reward.wrong_answer")? {
        profile.wrong_answer = v;
    }
    if let Some(v) = config.get("reward.time_limit")? {
        profile.time_limit = v;
    }
    if let Some(v) = config.get("reward.runtime_error")? {
        profile.runtime_error = v;
    }
    if let Some(v) = config.get("reward.compile_error")? {
        profile.compile_error = v;
    }
    Ok(profile)
}

/// Build a TrainConfig from config keys (documented in the README) and
/// flag overrides.
pub fn train_config_from(cli: &Cli, config: &FlatConfig, args: &TrainArgs) -> Result<TrainConfig> {
    let mut tc = TrainConfig::default();
    tc.seed = seed_of(cli, config)?;
    if let Some(v) = config.get::<String>("objective")? {
        tc.objective = v.parse()?;
    }
    if let Some(v) = config.get::<String>("advantage_mode")? {
        tc.advantage_mode = v.parse()?;
    }
    if let Some(v) = config.get("learning_rate")? {
        tc.learning_rate = v;
    }
    if let Some(v) = config.get::<String>("optimizer")? {
        tc.optimizer = v.parse::<OptimizerKind>()?;
    }
    if let Some(v) = config.get("steps")? {
        tc.steps = v;
    }
    if let Some(v) = config.get_or_none("grad_clip_norm")? {
        tc.grad_clip_norm = v;
    }
    if let Some(v) = config.get("eval_every")? {
        tc.eval_every = v;
    }
    if let Some(v) = config.get_bool("length_normalize")? {
        tc.length_normalize = v;
    }
    if let Some(v) = config.get("holdout_problems")? {
        tc.holdout_problems = v;
    }
    if let Some(v) = config.get("grpo_eps")? {
        tc.grpo_eps = v;
    }
    if let Some(v) = config.get_or_none("negative_floor")? {
        tc.negative_floor = v;
    }
    if let Some(v) = config.get("sampler.group_size")? {
        tc.sampler.group_size = v;
    }
    if let Some(v) = config.get("sampler.batch_solutions")? {
        tc.sampler.batch_solutions = v;
    }
    if let Some(v) = config.get_bool("sampler.epoch_shuffle")? {
        tc.sampler.epoch_shuffle = v;
    }
    tc.sampler.seed = config.get("sampler.seed")?.unwrap_or(tc.seed);
    tc.reward = reward_profile_from(config)?;
    if let Some(v) = config.get("arch.embed_dim")? {
        tc.arch.embed_dim = v;
    }
    if let Some(v) = config.get("arch.layers")? {
        tc.arch.layers = v;
    }
    if let Some(v) = config.get("arch.heads")? {
        tc.arch.heads = v;
    }
    if let Some(v) = config.get("arch.context")? {
        tc.arch.context = v;
    }
    if let Some(v) = config.get("eval.samples_per_problem")? {
        tc.eval.samples_per_problem = v;
    }
    if let Some(v) = config.get_list("eval.k_values")? {
        tc.eval.k_values = v;
    }
    if let Some(v) = config.get("eval.temperature")? {
        tc.eval.temperature = v;
    }
    if let Some(v) = config.get("eval.max_new_tokens")? {
        tc.eval.max_new_tokens = v;
    }
    if let Some(v) = config.get_bool("eval.include_greedy")? {
        tc.eval.include_greedy = v;
    }
    tc.eval.seed = config.get("eval.seed")?.unwrap_or(tc.seed);

    if let Some(v) = &args.advantage_mode {
        tc.advantage_mode = v.parse()?;
    }
    if let Some(v) = &args.objective {
        tc.objective = v.parse::<Objective>()?;
    }
    if let Some(v) = args.steps {
        tc.steps = v;
    }
    Ok(tc)
}

fn cmd_train(cli: &Cli, config: &FlatConfig, args: &TrainArgs, out: &Path) -> Result<()> {
    let tc = train_config_from(cli, config, args)?;
    let corpus = Corpus::load(&args.corpus)?;
    let limits;
    let eval_limits = if args.no_eval || tc.holdout_problems == 0 {
        None
    } else {
        limits = exec_limits(config, None)?;
        Some(&limits)
    };
    let outcome = train(&corpus, &tc, out, eval_limits)?;
    println!(
        "[train] {} steps done; final checkpoint {}",
        outcome.steps_run,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, config: &FlatConfig, args: &EvalArgs, out: &Path) -> Result<()> {
    let mut ec = EvalConfig { seed: seed_of(cli, config)?, ..EvalConfig::default() };
    if let Some(v) = pick(args.samples_per_problem, config.get("samples_per_problem"))? {
        ec.samples_per_problem = v;
    }
    if let Some(v) = config.get_list("k_values")? {
        ec.k_values = v;
    }
    if let Some(v) = pick(args.temperature, config.get("temperature"))? {
        ec.temperature = v;
    }
    if let Some(v) = config.get("max_new_tokens")? {
        ec.max_new_tokens = v;
    }
    if let Some(v) = config.get_bool("include_greedy")? {
        ec.include_greedy = v;
    }
    // Drop configured k values that exceed the sample count instead of
    // erroring: `--samples-per-problem 1` should just report pass@1.
    ec.k_values.retain(|&k| k <= ec.samples_per_problem);
    if ec.k_values.is_empty() {
        ec.k_values = vec![1];
    }

    let limits = exec_limits(config, None)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let corpus = Corpus::load(&args.corpus)?;
    let problems: Vec<_> = corpus.problems().values().cloned().collect();
    let report = evaluate(&model, &problems, &ec, &limits)?;
    let paths = emit_report(&report, out)?;
    println!(
        "[eval] {} problems, pass@k {:?} → {}",
        problems.len(),
        report.pass_at_k,
        paths[0].display()
    );
    Ok(())
}

#[derive(Debug, serde::Serialize)]
struct MergedRun {
    name: String,
    pass_at_k: BTreeMap<usize, f64>,
    by_difficulty: BTreeMap<String, BTreeMap<usize, f64>>,
    greedy_pass_at_1: Option<f64>,
}

fn run_name(path: &Path) -> String {
    path.parent()
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_report(args: &ReportArgs, out: &Path) -> Result<()> {
    let mut runs = Vec::new();
    for path in &args.reports {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let report: EvalReport = serde_json::from_str(&text)?;
        runs.push(MergedRun {
            name: run_name(path),
            pass_at_k: report.pass_at_k,
            by_difficulty: report.by_difficulty,
            greedy_pass_at_1: report.greedy_pass_at_1,
        });
    }

    let mut outputs = Vec::new();
    if !runs.is_empty() {
        let json_path = out.join("report.json");
        std::fs::write(
            &json_path,
            serde_json::to_string_pretty(&serde_json::json!({ "runs": runs }))? + "\n",
        )
        .map_err(|e| Error::io_at(&json_path, e))?;
        let table_path = out.join("report.txt");
        std::fs::write(&table_path, merged_table(&runs)).map_err(|e| Error::io_at(&table_path, e))?;
        outputs.push(json_path);
        outputs.push(table_path);
    }
    if let Some(history) = &args.history {
        let entries = read_history(history)?;
        let svg_path = out.join("pass_at_k_history.svg");
        std::fs::write(&svg_path, history_svg(&entries)).map_err(|e| Error::io_at(&svg_path, e))?;
        outputs.push(svg_path);
    }
    println!(
        "[report] merged {} runs{}; wrote {}",
        runs.len(),
        if args.history.is_some() { " + history plot" } else { "" },
        outputs
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

/// Rows = runs (training modes), columns = pass@k for the aggregate and for
/// each difficulty tag.
fn merged_table(runs: &[MergedRun]) -> String {
    let mut ks: BTreeSet<usize> = BTreeSet::new();
    let mut tags: BTreeSet<&str> = BTreeSet::new();
    for run in runs {
        ks.extend(run.pass_at_k.keys().copied());
        for tag in run.by_difficulty.keys() {
            tags.insert(tag);
        }
    }
    let mut out = String::new();
    out.push_str(&format!("{:<18}", "run"));
    for &k in &ks {
        out.push_str(&format!("  all@{k:<7}"));
    }
    for tag in &tags {
        for &k in &ks {
            out.push_str(&format!("  {tag}@{k:<5}"));
        }
    }
    out.push('\n');
    for run in runs {
        out.push_str(&format!("{:<18}", run.name));
        for &k in &ks {
            match run.pass_at_k.get(&k) {
                Some(v) => out.push_str(&format!("  {v:<10.4}")),
                None => out.push_str(&format!("  {:<10}", "-")),
            }
        }
        for tag in &tags {
            for &k in &ks {
                let width = 6 + tag.len();
                match run.by_difficulty.get(*tag).and_then(|m| m.get(&k)) {
                    Some(v) => out.push_str(&format!("  {v:<width$.4}")),
                    None => out.push_str(&format!("  {:<width$}", "-")),
                }
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, serde::Deserialize)]
struct HistoryEntry {
    step: usize,
    pass_at_k: BTreeMap<usize, f64>,
}

fn read_history(path: &Path) -> Result<Vec<HistoryEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut entries = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        entries.push(serde_json::from_str::<HistoryEntry>(line)?);
    }
    Ok(entries)
}

/// Line plot of pass@k across training checkpoints.
fn history_svg(entries: &[HistoryEntry]) -> String {
    const W: f64 = 560.0;
    const H: f64 = 320.0;
    const L: f64 = 50.0; // left margin
    const B: f64 = 280.0; // baseline y (value 0)
    const T: f64 = 40.0; // top y (value 1)
    let max_step = entries.iter().map(|e| e.step).max().unwrap_or(1).max(1) as f64;
    let mut ks: BTreeSet<usize> = BTreeSet::new();
    for e in entries {
        ks.extend(e.pass_at_k.keys().copied());
    }
    let colors = ["#4477aa", "#ee6677", "#228833", "#ccbb44"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"12\" y=\"24\" font-family=\"monospace\" font-size=\"14\">pass@k across checkpoints</text>\n\
         <line x1=\"{L}\" y1=\"{B}\" x2=\"{L}\" y2=\"{T}\" stroke=\"black\"/>\n\
         <line x1=\"{L}\" y1=\"{B}\" x2=\"540\" y2=\"{B}\" stroke=\"black\"/>\n"
    );
    for (i, &k) in ks.iter().enumerate() {
        let color = colors[i % colors.len()];
        let points: Vec<String> = entries
            .iter()
            .filter_map(|e| e.pass_at_k.get(&k).map(|v| (e.step, *v)))
            .map(|(step, v)| {
                let x = L + (step as f64 / max_step) * (540.0 - L);
                let y = B - v.clamp(0.0, 1.0) * (B - T);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        if !points.is_empty() {
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                points.join(" ")
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">k={k}</text>\n",
            460,
            24 + 16 * (i + 1)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
