//! Pipeline operator surface. One subcommand per stage, composed through
//! files on disk so every stage can be re-run or cached independently:
//!
//! ```text
//! synth -> ingest -> cohort -> compile -> prompt -> predict -> parse
//!   -> reward / recall / ablate / probe
//! sid-train / sid-encode and cg-train / cg-blend / cg-diversity feed the
//! retrieval side; run drives checkpointed batch inference.
//! ```
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 remote predictor failure.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use adprior_core::cohort::{build_cohort, CohortConfig, CohortExample, Split};
use adprior_core::compiler::{compile_context, CompileConfig, UserContext};
use adprior_core::domain::{validate_event, Event, Label, Prediction};
use adprior_core::evaluation::{
    ablate, emit_ranking_features, recall_at_k, sequence_experiment, train_logistic_probe,
    FeatureGroup, SequenceMode,
};
use adprior_core::fnv1a64;
use adprior_core::ingestion::{
    build_snapshot, end_of_day_utc, read_catalog, read_events, read_jsonl, read_profiles,
    write_jsonl, Snapshot,
};
use adprior_core::orchestrator::{
    cache_accounting, incremental_user_set, plan_run, run_epochs, FailurePoint, RunConfig,
};
use adprior_core::parsing::parse_answer;
use adprior_core::predictor::{predict, PredictError, PredictErrorKind, PredictorKind, PredictorSpec};
use adprior_core::prompting::{
    render_within_budget, PromptStage, RenderedPrompt, DEFAULT_TOKEN_BUDGET,
};
use adprior_core::retrieval::{
    blend, diversity, train_two_tower, AdItem, BlendConfig, DedupKey, TrainingObjective,
    TwoTowerModel,
};
use adprior_core::reward::total_reward;
use adprior_core::sid::{encode, format_sid_sequence, train_codebook, SidCodebook};
use adprior_core::synthgen::{generate_world, write_world, SynthConfig};

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// key = value defaults; any long flag left unset falls back to the key of
/// the same name (dashes as underscores).
#[derive(Debug, Default)]
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut map = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(usage(format!(
                    "config {} line {}: expected key = value",
                    path.display(),
                    idx + 1
                )));
            };
            map.insert(key.trim().to_owned(), value.trim().to_owned());
        }
        Ok(FileConfig(map))
    }

    /// Flag wins, then config, then the built-in default.
    fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| usage(format!("config key {key} = {raw:?}: {e}"))),
            None => Ok(default),
        }
    }

    fn pick_opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.0.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config key {key} = {raw:?}: {e}"))),
            None => Ok(None),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "adprior",
    about = "Advertiser-prior pipeline: synthesize, compile, predict, evaluate",
    version
)]
struct Cli {
    /// Config file with key = value lines; explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic world with planted preferences.
    Synth(SynthArgs),
    /// Validate raw files and freeze an anchored snapshot.
    Ingest(IngestArgs),
    /// Select users, attach labels, split train/eval.
    Cohort(CohortArgs),
    /// Compile per-user feature contexts from a snapshot.
    Compile(CompileArgs),
    /// Render stage prompts from compiled contexts.
    Prompt(PromptArgs),
    /// Produce completions with the chosen predictor backend.
    Predict(PredictArgs),
    /// Parse completions into structured predictions.
    Parse(ParseArgs),
    /// Score parsed predictions against cohort labels.
    Reward(RewardArgs),
    /// Recall@k table over predictions and labels.
    Recall(RecallArgs),
    /// Remove feature groups and measure recall deltas.
    Ablate(AblateArgs),
    /// Train a residual quantizer on embedding vectors.
    SidTrain(SidTrainArgs),
    /// Encode vectors with a trained quantizer.
    SidEncode(SidEncodeArgs),
    /// Train the two-tower candidate scorer.
    CgTrain(CgTrainArgs),
    /// Blend candidate channels under an LLM quota.
    CgBlend(CgBlendArgs),
    /// Advertiser diversity of a blended slate.
    CgDiversity(CgDiversityArgs),
    /// Logistic probe: what do the emitted features add.
    Probe(ProbeArgs),
    /// Checkpointed batch inference over compiled contexts.
    Run(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    n_advertisers: Option<usize>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    days: Option<i64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    affinity: Option<f64>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    /// Anchor date, YYYY-MM-DD. Features end here; labels start after.
    #[arg(long)]
    anchor: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CohortArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Full event stream; label conversions are read from after the anchor.
    #[arg(long)]
    events: PathBuf,
    /// Strict preset: users need 10+ matched and attributed conversions.
    #[arg(long, conflicts_with = "v1")]
    v0: bool,
    /// Relaxed preset: no minimum sequence length.
    #[arg(long)]
    v1: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep only users whose profile state matches exactly.
    #[arg(long)]
    market: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompileArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Compile only the users of this cohort file (default: all profiles).
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Join file of {user_id, sequences} to attach semantic-id lines.
    #[arg(long)]
    sids: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    contexts: PathBuf,
    /// sft_text | sft_sid | grpo_text | grpo_sid | inference
    #[arg(long)]
    stage: String,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct PredictorFlags {
    /// mock | baseline | remote
    #[arg(long)]
    predictor: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Environment variable holding the bearer token for remote calls.
    #[arg(long)]
    auth_env: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    contexts: PathBuf,
    /// Pre-rendered prompts; rendered on the fly at inference stage if absent.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
    #[command(flatten)]
    predictor: PredictorFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    completions: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RewardArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecallArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    /// Comma-separated cutoffs, e.g. 1,5,20.
    #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
    k: Vec<usize>,
    /// eval | train | all
    #[arg(long, default_value = "eval")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    contexts: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    /// Comma-separated group names, or "all".
    #[arg(long, default_value = "all")]
    groups: String,
    #[arg(long)]
    k: Option<usize>,
    /// Optional sequence follow-up: reorder | delete | reorder+delete.
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    predictor: PredictorFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SidTrainArgs {
    /// JSONL rows of {id, vector}.
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    codes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SidEncodeArgs {
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CgTrainArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    items: PathBuf,
    /// impressions | clicks | conversions
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    buckets: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CgBlendArgs {
    /// Repeatable channel spec id=items.jsonl; order fixes interleave order.
    #[arg(long = "channel", required = true)]
    channels: Vec<String>,
    #[arg(long)]
    l0_quota: Option<usize>,
    /// advertiser | item
    #[arg(long)]
    dedup: Option<String>,
    #[arg(long)]
    llm_channel: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CgDiversityArgs {
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    contexts: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    /// Sampled non-label candidates per user.
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    contexts: PathBuf,
    #[arg(long)]
    run_id: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    epoch_size: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    /// Continue from an existing checkpoint instead of starting over.
    #[arg(long)]
    resume: bool,
    /// Schedule only users with events newer than the prior checkpoint.
    #[arg(long, requires = "events", requires = "prior_checkpoint")]
    incremental: bool,
    /// Event stream used for watermarks and incremental scheduling.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Checkpoint of the run being incrementally extended.
    #[arg(long)]
    prior_checkpoint: Option<PathBuf>,
    /// Crash drill: during:<epoch> or after:<epoch>.
    #[arg(long)]
    inject_failure: Option<String>,
    #[command(flatten)]
    predictor: PredictorFlags,
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptRow {
    user_id: String,
    #[serde(flatten)]
    prompt: RenderedPrompt,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompletionRow {
    user_id: String,
    completion: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    user_id: String,
    #[serde(flatten)]
    prediction: Prediction,
}

#[derive(Debug, Serialize, Deserialize)]
struct SidJoinRow {
    user_id: String,
    sequences: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VectorRow {
    id: String,
    vector: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SidRow {
    id: String,
    codes: Vec<u32>,
    text: String,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            std::process::exit(if benign { 0 } else { 1 });
        }
    };
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(p) = cause.downcast_ref::<PredictError>() {
            return match p.kind {
                PredictErrorKind::InvalidSpec => 1,
                _ => 3,
            };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return 1;
        }
    }
    2
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(args) => cmd_synth(args, &cfg),
        Command::Ingest(args) => cmd_ingest(args, &cfg),
        Command::Cohort(args) => cmd_cohort(args, &cfg),
        Command::Compile(args) => cmd_compile(args, &cfg),
        Command::Prompt(args) => cmd_prompt(args, &cfg),
        Command::Predict(args) => cmd_predict(args, &cfg),
        Command::Parse(args) => cmd_parse(args),
        Command::Reward(args) => cmd_reward(args),
        Command::Recall(args) => cmd_recall(args),
        Command::Ablate(args) => cmd_ablate(args, &cfg),
        Command::SidTrain(args) => cmd_sid_train(args, &cfg),
        Command::SidEncode(args) => cmd_sid_encode(args),
        Command::CgTrain(args) => cmd_cg_train(args, &cfg),
        Command::CgBlend(args) => cmd_cg_blend(args, &cfg),
        Command::CgDiversity(args) => cmd_cg_diversity(args, &cfg),
        Command::Probe(args) => cmd_probe(args, &cfg),
        Command::Run(args) => cmd_run(args, &cfg),
    }
}

fn cmd_synth(args: SynthArgs, cfg: &FileConfig) -> Result<()> {
    let defaults = SynthConfig::default();
    let config = SynthConfig {
        n_users: cfg.pick(args.n_users, "n_users", defaults.n_users)?,
        n_advertisers: cfg.pick(args.n_advertisers, "n_advertisers", defaults.n_advertisers)?,
        n_items: cfg.pick(args.n_items, "n_items", defaults.n_items)?,
        days: cfg.pick(args.days, "days", defaults.days)?,
        seed: cfg.pick(args.seed, "seed", defaults.seed)?,
        affinity_strength: cfg.pick(args.affinity, "affinity", defaults.affinity_strength)?,
    };
    if !(0.0..=1.0).contains(&config.affinity_strength) {
        return Err(usage("affinity must be within [0, 1]"));
    }
    let world = generate_world(&config);
    write_world(&world, &args.out_dir)?;
    println!(
        "world: {} users, {} advertisers, {} items, {} events, anchor {}",
        world.profiles.len(),
        world.catalog.len(),
        world.items.len(),
        world.events.len(),
        world.anchor_date
    );
    Ok(())
}

fn cmd_ingest(args: IngestArgs, cfg: &FileConfig) -> Result<()> {
    let anchor_raw = cfg.pick(args.anchor, "anchor", "2024-06-01".to_owned())?;
    let anchor = anchor_raw
        .parse::<chrono::NaiveDate>()
        .map_err(|e| usage(format!("--anchor {anchor_raw:?}: {e}")))?;
    let events = read_events(&args.events)?;
    let catalog = read_catalog(&args.catalog)?;
    let profiles = read_profiles(&args.profiles)?;

    let mut bad = Vec::new();
    for (idx, event) in events.iter().enumerate() {
        let violations = validate_event(event);
        if !violations.is_empty() {
            bad.push(format!(
                "line {}: user {}: {}",
                idx + 1,
                event.user_id,
                violations
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
        }
    }
    if !bad.is_empty() {
        let shown = bad.iter().take(5).cloned().collect::<Vec<_>>().join("\n  ");
        bail!("{} invalid events:\n  {shown}", bad.len());
    }

    let snapshot = build_snapshot(events, catalog, profiles, anchor);
    write_json(&args.out, &snapshot)?;
    println!(
        "snapshot: {} events <= {}, {} advertisers, {} profiles",
        snapshot.events.len(),
        snapshot.anchor_date,
        snapshot.catalog.len(),
        snapshot.profiles.len()
    );
    Ok(())
}

fn cmd_cohort(args: CohortArgs, cfg: &FileConfig) -> Result<()> {
    if !args.v0 && !args.v1 {
        return Err(usage("pick a preset: --v0 or --v1"));
    }
    let seed = cfg.pick(args.seed, "seed", 11)?;
    let mut config = if args.v0 { CohortConfig::v0(seed) } else { CohortConfig::v1(seed) };
    if let Some(market) = cfg.pick_opt(args.market, "market")? {
        config.market_filter = market;
    }
    let snapshot = read_snapshot(&args.snapshot)?;
    let cutoff = end_of_day_utc(snapshot.anchor_date);
    let future: Vec<Event> = read_events(&args.events)?
        .into_iter()
        .filter(|e| e.timestamp > cutoff)
        .collect();
    let cohort = build_cohort(&snapshot, &future, &config);
    let train = cohort.iter().filter(|e| e.split == Split::Train).count();
    write_jsonl(&cohort, &args.out)?;
    println!("cohort: {} examples ({} train, {} eval)", cohort.len(), train, cohort.len() - train);
    Ok(())
}

fn cmd_compile(args: CompileArgs, cfg: &FileConfig) -> Result<()> {
    let snapshot = read_snapshot(&args.snapshot)?;
    let config = CompileConfig {
        preset_pool_size: cfg.pick(None, "preset_pool_size", CompileConfig::default().preset_pool_size)?,
        ..CompileConfig::default()
    };
    let users: Vec<String> = match &args.cohort {
        Some(path) => {
            let cohort: Vec<CohortExample> = read_jsonl(path)?;
            let mut seen = std::collections::HashSet::new();
            cohort
                .into_iter()
                .map(|e| e.user_id)
                .filter(|u| seen.insert(u.clone()))
                .collect()
        }
        None => snapshot.profiles.iter().map(|p| p.user_id.clone()).collect(),
    };
    let sids: HashMap<String, Vec<String>> = match &args.sids {
        Some(path) => read_jsonl::<SidJoinRow>(path)?
            .into_iter()
            .map(|r| (r.user_id, r.sequences))
            .collect(),
        None => HashMap::new(),
    };
    let mut contexts = Vec::with_capacity(users.len());
    for user in &users {
        let mut ctx = compile_context(&snapshot, user, &config)?;
        if let Some(sequences) = sids.get(user) {
            ctx.sid_sequences = Some(sequences.clone());
        }
        contexts.push(ctx);
    }
    write_jsonl(&contexts, &args.out)?;
    println!("contexts: {} users compiled", contexts.len());
    Ok(())
}

fn parse_stage(raw: &str) -> Result<PromptStage> {
    raw.parse::<PromptStage>().map_err(|e| usage(e.to_string()))
}

fn cmd_prompt(args: PromptArgs, cfg: &FileConfig) -> Result<()> {
    let stage = parse_stage(&args.stage)?;
    let budget = cfg.pick(args.budget, "budget", DEFAULT_TOKEN_BUDGET)?;
    let contexts: Vec<UserContext> = read_jsonl(&args.contexts)?;
    let mut rows = Vec::with_capacity(contexts.len());
    for ctx in &contexts {
        let prompt = render_within_budget(ctx, stage, budget)
            .with_context(|| format!("rendering user {}", ctx.profile.user_id))?;
        rows.push(PromptRow { user_id: ctx.profile.user_id.clone(), prompt });
    }
    let stats = cache_accounting(&rows.iter().map(|r| r.prompt.clone()).collect::<Vec<_>>());
    write_jsonl(&rows, &args.out)?;
    println!(
        "prompts: {} rendered, {} prefix groups, ~{} of ~{} tokens cacheable",
        stats.total_prompts,
        stats.distinct_template_prefixes,
        stats.estimated_cached_tokens,
        stats.estimated_total_tokens
    );
    Ok(())
}

fn build_spec(flags: &PredictorFlags, cfg: &FileConfig) -> Result<PredictorSpec> {
    let kind_raw = cfg.pick(flags.predictor.clone(), "predictor", "baseline".to_owned())?;
    let kind = kind_raw.parse::<PredictorKind>().map_err(usage)?;
    let seed = cfg.pick(flags.seed, "seed", 0)?;
    let mut spec = match kind {
        PredictorKind::Mock => PredictorSpec::mock(seed),
        PredictorKind::Baseline => PredictorSpec::baseline(),
        PredictorKind::Remote => PredictorSpec {
            kind: PredictorKind::Remote,
            endpoint_url: cfg.pick_opt(flags.endpoint.clone(), "endpoint")?,
            model_name: cfg.pick_opt(flags.model.clone(), "model")?,
            timeout_ms: cfg.pick(flags.timeout_ms, "timeout_ms", 30_000)?,
            max_retries: cfg.pick(flags.max_retries, "max_retries", 3)?,
            temperature: cfg.pick_opt(flags.temperature, "temperature")?,
            seed: Some(seed),
            auth_env: cfg.pick_opt(flags.auth_env.clone(), "auth_env")?,
        },
    };
    if kind != PredictorKind::Remote {
        spec.seed = Some(seed);
    }
    Ok(spec)
}

fn cmd_predict(args: PredictArgs, cfg: &FileConfig) -> Result<()> {
    let spec = build_spec(&args.predictor, cfg)?;
    let budget = cfg.pick(args.budget, "budget", DEFAULT_TOKEN_BUDGET)?;
    let contexts: Vec<UserContext> = read_jsonl(&args.contexts)?;
    let prompts: HashMap<String, RenderedPrompt> = match &args.prompts {
        Some(path) => read_jsonl::<PromptRow>(path)?
            .into_iter()
            .map(|r| (r.user_id, r.prompt))
            .collect(),
        None => HashMap::new(),
    };
    let mut rows = Vec::with_capacity(contexts.len());
    for ctx in &contexts {
        let user = &ctx.profile.user_id;
        let prompt = match prompts.get(user) {
            Some(p) => p.clone(),
            None => render_within_budget(ctx, PromptStage::Inference, budget)
                .with_context(|| format!("rendering user {user}"))?,
        };
        let completion = predict(&spec, &prompt, ctx)?;
        rows.push(CompletionRow { user_id: user.clone(), completion });
    }
    write_jsonl(&rows, &args.out)?;
    println!("completions: {} users", rows.len());
    Ok(())
}

fn cmd_parse(args: ParseArgs) -> Result<()> {
    let completions: Vec<CompletionRow> = read_jsonl(&args.completions)?;
    let rows: Vec<PredictionRow> = completions
        .into_iter()
        .map(|c| PredictionRow { user_id: c.user_id, prediction: parse_answer(&c.completion) })
        .collect();
    let ok = rows.iter().filter(|r| r.prediction.is_ok()).count();
    write_jsonl(&rows, &args.out)?;
    println!("predictions: {} parsed, {} well-formed, {} malformed", rows.len(), ok, rows.len() - ok);
    Ok(())
}

/// Joins prediction rows with cohort labels; errors if nothing joins.
fn join_labels(
    predictions: Vec<PredictionRow>,
    cohort: &[CohortExample],
) -> Result<Vec<(String, Prediction, Label, Split)>> {
    let by_user: HashMap<&str, &CohortExample> =
        cohort.iter().map(|e| (e.user_id.as_str(), e)).collect();
    let joined: Vec<(String, Prediction, Label, Split)> = predictions
        .into_iter()
        .filter_map(|row| {
            by_user.get(row.user_id.as_str()).map(|example| {
                (row.user_id, row.prediction, example.label.clone(), example.split)
            })
        })
        .collect();
    if joined.is_empty() {
        bail!("no prediction user ids appear in the cohort file");
    }
    Ok(joined)
}

#[derive(Debug, Serialize)]
struct RewardRow {
    user_id: String,
    #[serde(flatten)]
    breakdown: adprior_core::reward::RewardBreakdown,
}

fn cmd_reward(args: RewardArgs) -> Result<()> {
    let predictions: Vec<PredictionRow> = read_jsonl(&args.predictions)?;
    let cohort: Vec<CohortExample> = read_jsonl(&args.cohort)?;
    let joined = join_labels(predictions, &cohort)?;
    let rows: Vec<RewardRow> = joined
        .into_iter()
        .map(|(user_id, prediction, label, _)| RewardRow {
            user_id,
            breakdown: total_reward(&prediction, &label.advertiser_name),
        })
        .collect();
    let mean = rows.iter().map(|r| r.breakdown.r_total).sum::<f64>() / rows.len() as f64;
    write_jsonl(&rows, &args.out)?;
    println!("rewards: {} users, mean total {mean:.4}", rows.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct RecallReport {
    split: String,
    n: usize,
    recall: std::collections::BTreeMap<usize, f64>,
}

fn cmd_recall(args: RecallArgs) -> Result<()> {
    if args.k.is_empty() {
        return Err(usage("--k needs at least one cutoff"));
    }
    if !matches!(args.split.as_str(), "eval" | "train" | "all") {
        return Err(usage(format!("--split {}: expected eval, train, or all", args.split)));
    }
    let predictions: Vec<PredictionRow> = read_jsonl(&args.predictions)?;
    let cohort: Vec<CohortExample> = read_jsonl(&args.cohort)?;
    let joined = join_labels(predictions, &cohort)?;
    let examples: Vec<(Prediction, Label)> = joined
        .into_iter()
        .filter(|(_, _, _, split)| match args.split.as_str() {
            "eval" => *split == Split::Eval,
            "train" => *split == Split::Train,
            _ => true,
        })
        .map(|(_, prediction, label, _)| (prediction, label))
        .collect();
    if examples.is_empty() {
        bail!("no examples left in split {:?}", args.split);
    }
    let mut recall = std::collections::BTreeMap::new();
    for &k in &args.k {
        if k == 0 {
            return Err(usage("--k cutoffs must be >= 1"));
        }
        recall.insert(k, recall_at_k(&examples, k)?);
    }
    let report = RecallReport { split: args.split.clone(), n: examples.len(), recall };
    write_json(&args.out, &report)?;

    let header: Vec<String> = args.k.iter().map(|k| format!("recall@{k}")).collect();
    let values: Vec<String> =
        args.k.iter().map(|k| format!("{:.4}", report.recall[k])).collect();
    println!("{}", header.join("\t"));
    println!("{}", values.join("\t"));
    println!("n={} split={}", report.n, report.split);
    Ok(())
}

fn parse_groups(raw: &str) -> Result<Vec<FeatureGroup>> {
    if raw == "all" {
        return Ok(FeatureGroup::ALL.to_vec());
    }
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<FeatureGroup>().map_err(|e| usage(e.to_string())))
        .collect()
}

fn cmd_ablate(args: AblateArgs, cfg: &FileConfig) -> Result<()> {
    let spec = build_spec(&args.predictor, cfg)?;
    let k = cfg.pick(args.k, "k", 5)?;
    let groups = parse_groups(&args.groups)?;
    let contexts: Vec<UserContext> = read_jsonl(&args.contexts)?;
    let cohort: Vec<CohortExample> = read_jsonl(&args.cohort)?;
    let by_user: HashMap<&str, &CohortExample> =
        cohort.iter().map(|e| (e.user_id.as_str(), e)).collect();
    let examples: Vec<(UserContext, Label)> = contexts
        .into_iter()
        .filter_map(|ctx| {
            by_user
                .get(ctx.profile.user_id.as_str())
                .map(|e| (ctx, e.label.clone()))
        })
        .collect();
    if examples.is_empty() {
        bail!("no context user ids appear in the cohort file");
    }

    let report = ablate(&examples, &spec, &groups, k)?;
    let mut tsv = String::from("group\trecall\tdelta_recall\n");
    tsv.push_str(&format!("(baseline)\t{:.6}\t0.000000\n", report.baseline_recall));
    for row in &report.rows {
        tsv.push_str(&format!("{}\t{:.6}\t{:.6}\n", row.group, row.recall, row.delta_recall));
    }
    fs::write(&args.out, tsv)?;
    println!(
        "ablation: baseline recall@{k} {:.4}; impact order: {}",
        report.baseline_recall,
        report.impact_order.join(" > ")
    );

    if let Some(mode_raw) = &args.mode {
        let mode = mode_raw.parse::<SequenceMode>().map_err(usage)?;
        let exp = sequence_experiment(&examples, &spec, &groups, k, mode)?;
        println!("{}", serde_json::to_string_pretty(&exp)?);
    }
    Ok(())
}

fn cmd_sid_train(args: SidTrainArgs, cfg: &FileConfig) -> Result<()> {
    let levels = cfg.pick(args.levels, "levels", 5)?;
    let codes = cfg.pick(args.codes, "codes", 256)?;
    let seed = cfg.pick(args.seed, "seed", 1)?;
    let max_iters = cfg.pick(args.max_iters, "max_iters", 25)?;
    let tol = cfg.pick(args.tol, "tol", 1e-6)?;
    let rows: Vec<VectorRow> = read_jsonl(&args.vectors)?;
    let embeddings: Vec<Vec<f32>> = rows.into_iter().map(|r| r.vector).collect();
    let codebook = train_codebook(&embeddings, levels, codes, seed, max_iters, tol)?;
    write_json(&args.out, &codebook)?;
    println!(
        "codebook: {} levels x {} codes, dim {}",
        codebook.levels, codebook.codes_per_level, codebook.dim
    );
    Ok(())
}

fn cmd_sid_encode(args: SidEncodeArgs) -> Result<()> {
    let codebook: SidCodebook = read_json(&args.codebook)?;
    let rows: Vec<VectorRow> = read_jsonl(&args.vectors)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let sid = encode(&codebook, &row.vector)
            .with_context(|| format!("encoding id {}", row.id))?;
        out.push(SidRow {
            id: row.id,
            text: format_sid_sequence(std::slice::from_ref(&sid)),
            codes: sid.codes,
        });
    }
    write_jsonl(&out, &args.out)?;
    println!("sids: {} vectors encoded", out.len());
    Ok(())
}

fn cmd_cg_train(args: CgTrainArgs, cfg: &FileConfig) -> Result<()> {
    let objective_raw = cfg.pick(args.objective, "objective", "impressions".to_owned())?;
    let objective = objective_raw.parse::<TrainingObjective>().map_err(usage)?;
    let dim = cfg.pick(args.dim, "dim", 16)?;
    let buckets = cfg.pick(args.buckets, "buckets", 4096)?;
    let epochs = cfg.pick(args.epochs, "epochs", 10)?;
    let lr = cfg.pick(args.lr, "lr", 0.3)?;
    let negatives = cfg.pick(args.negatives, "negatives", 4)?;
    let seed = cfg.pick(args.seed, "seed", 1)?;
    let events = read_events(&args.events)?;
    let items: Vec<AdItem> = read_jsonl(&args.items)?;
    let model = TwoTowerModel::new_random(dim, buckets, seed);
    let report = train_two_tower(model, &events, &items, objective, epochs, lr, negatives, seed)?;
    write_json(&args.out, &report.model)?;
    let losses: Vec<String> = report.epoch_losses.iter().map(|l| format!("{l:.4}")).collect();
    println!("two-tower: {} positives, epoch losses [{}]", report.positives, losses.join(", "));
    Ok(())
}

fn cmd_cg_blend(args: CgBlendArgs, cfg: &FileConfig) -> Result<()> {
    let l0_quota = cfg.pick(args.l0_quota, "l0_quota", BlendConfig::default().l0_quota)?;
    let dedup_raw = cfg.pick(args.dedup, "dedup", "advertiser".to_owned())?;
    let dedup_key = match dedup_raw.as_str() {
        "advertiser" => DedupKey::Advertiser,
        "item" => DedupKey::Item,
        other => return Err(usage(format!("--dedup {other}: expected advertiser or item"))),
    };
    let llm_channel_id = cfg.pick(args.llm_channel, "llm_channel", "llm".to_owned())?;
    let mut channels = Vec::new();
    for spec in &args.channels {
        let (id, path) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("--channel {spec}: expected id=path")))?;
        let items: Vec<AdItem> = read_jsonl(Path::new(path))?;
        channels.push((id.to_owned(), items));
    }
    let config = BlendConfig { l0_quota, dedup_key, llm_channel_id };
    let blended = blend(&channels, &config);
    write_jsonl(&blended, &args.out)?;
    println!("blend: {} candidates from {} channels (quota {})", blended.len(), channels.len(), l0_quota);
    Ok(())
}

fn cmd_cg_diversity(args: CgDiversityArgs, cfg: &FileConfig) -> Result<()> {
    let k = cfg.pick(args.k, "k", 50)?;
    if k == 0 {
        return Err(usage("--k must be >= 1"));
    }
    let items: Vec<AdItem> = read_jsonl(&args.items)?;
    let value = diversity(&items, k);
    if let Some(out) = &args.out {
        write_json(out, &serde_json::json!({ "k": k, "diversity": value }))?;
    }
    println!("diversity@{k} = {value:.4}");
    Ok(())
}

fn cmd_probe(args: ProbeArgs, cfg: &FileConfig) -> Result<()> {
    let negatives = cfg.pick(args.negatives, "negatives", 20)?;
    let seed = cfg.pick(args.seed, "seed", 1)?;
    let epochs = cfg.pick(args.epochs, "epochs", 200)?;
    let lr = cfg.pick(args.lr, "lr", 0.5)?;
    let predictions: Vec<PredictionRow> = read_jsonl(&args.predictions)?;
    let contexts: Vec<UserContext> = read_jsonl(&args.contexts)?;
    let cohort: Vec<CohortExample> = read_jsonl(&args.cohort)?;
    let catalog = read_catalog(&args.catalog)?;
    if catalog.len() < 2 {
        bail!("catalog too small to sample negative candidates");
    }

    let context_by_user: HashMap<&str, &UserContext> =
        contexts.iter().map(|c| (c.profile.user_id.as_str(), c)).collect();
    let label_by_user: HashMap<&str, &Label> =
        cohort.iter().map(|e| (e.user_id.as_str(), &e.label)).collect();

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut joined_users = 0usize;
    for row in &predictions {
        let (Some(context), Some(label)) = (
            context_by_user.get(row.user_id.as_str()),
            label_by_user.get(row.user_id.as_str()),
        ) else {
            continue;
        };
        joined_users += 1;
        features.push(emit_ranking_features(&row.prediction, &label.advertiser_name, context));
        labels.push(true);
        // Deterministic per-user negative sample from the catalog.
        use rand::Rng;
        let mut rng = rand_chacha_seed(seed ^ fnv1a64(row.user_id.as_bytes()));
        let mut drawn = 0;
        let mut attempts = 0;
        while drawn < negatives && attempts < negatives * 20 {
            attempts += 1;
            let candidate = &catalog[rng.gen_range(0..catalog.len())];
            if candidate.advertiser_id == label.advertiser_id {
                continue;
            }
            features.push(emit_ranking_features(&row.prediction, &candidate.name, context));
            labels.push(false);
            drawn += 1;
        }
    }
    if joined_users == 0 {
        bail!("no prediction user ids appear in both contexts and cohort");
    }

    let report = train_logistic_probe(&features, &labels, epochs, lr, seed)?;
    write_json(&args.out, &report)?;
    println!(
        "probe: {} users, {} pairs; auc {:.4} vs {:.4} (delta {:+.4}), pr-auc {:.4} vs {:.4} (delta {:+.4})",
        joined_users,
        features.len(),
        report.auc_with,
        report.auc_without,
        report.delta_auc,
        report.pr_auc_with,
        report.pr_auc_without,
        report.delta_pr_auc
    );
    Ok(())
}

fn rand_chacha_seed(seed: u64) -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn parse_inject(raw: &str) -> Result<FailurePoint> {
    let (kind, idx) = raw
        .split_once(':')
        .ok_or_else(|| usage(format!("--inject-failure {raw}: expected during:<i> or after:<i>")))?;
    let epoch: usize = idx
        .parse()
        .map_err(|_| usage(format!("--inject-failure {raw}: epoch index must be a number")))?;
    match kind {
        "during" => Ok(FailurePoint::DuringEpoch(epoch)),
        "after" => Ok(FailurePoint::AfterEpoch(epoch)),
        _ => Err(usage(format!("--inject-failure {raw}: expected during:<i> or after:<i>"))),
    }
}

fn cmd_run(args: RunArgs, cfg: &FileConfig) -> Result<()> {
    let spec = build_spec(&args.predictor, cfg)?;
    let epoch_size = cfg.pick(args.epoch_size, "epoch_size", 100)?;
    let concurrency = cfg.pick(args.concurrency, "concurrency", 4)?;
    // One seed drives both the epoch shuffle and the predictor.
    let seed = cfg.pick(args.predictor.seed, "seed", 0)?;
    let budget = cfg.pick(args.budget, "budget", DEFAULT_TOKEN_BUDGET)?;
    if epoch_size == 0 {
        return Err(usage("--epoch-size must be >= 1"));
    }
    let inject = args.inject_failure.as_deref().map(parse_inject).transpose()?;

    let contexts: Vec<UserContext> = read_jsonl(&args.contexts)?;
    let by_user: HashMap<String, UserContext> = contexts
        .iter()
        .map(|c| (c.profile.user_id.clone(), c.clone()))
        .collect();
    let all_users: Vec<String> = contexts.iter().map(|c| c.profile.user_id.clone()).collect();

    let events: Option<Vec<Event>> =
        args.events.as_deref().map(read_events).transpose().map_err(anyhow::Error::from)?;
    let watermark = events
        .as_ref()
        .and_then(|evs| evs.iter().map(|e| e.timestamp).max())
        .unwrap_or(0);

    let scheduled: Vec<String> = if args.incremental {
        let prior_path = args.prior_checkpoint.as_ref().expect("clap requires");
        let prior: adprior_core::orchestrator::EpochCheckpoint =
            read_json(prior_path).context("reading --prior-checkpoint")?;
        let events = events.as_ref().expect("clap requires");
        incremental_user_set(&all_users, events, prior.last_success_timestamp)
    } else {
        all_users
    };

    let plan = plan_run(&scheduled, epoch_size, &args.run_id, seed);
    let checkpoint_path = args.out_dir.join("checkpoint.json");
    if !args.resume && checkpoint_path.exists() {
        fs::remove_file(&checkpoint_path)?;
    }

    let worker = |user: &str| -> std::result::Result<String, String> {
        let ctx = by_user.get(user).ok_or_else(|| format!("no context for {user}"))?;
        let prompt = render_within_budget(ctx, PromptStage::Inference, budget)
            .map_err(|e| e.to_string())?;
        predict(&spec, &prompt, ctx).map_err(|e| e.to_string())
    };

    let run_config = RunConfig { concurrency, watermark, inject };
    let summary = run_epochs(&plan, &checkpoint_path, &args.out_dir, &worker, &run_config)?;

    let prompts: Vec<RenderedPrompt> = plan
        .epochs
        .iter()
        .flatten()
        .filter_map(|u| by_user.get(u))
        .filter_map(|ctx| render_within_budget(ctx, PromptStage::Inference, budget).ok())
        .collect();
    let cache = cache_accounting(&prompts);

    println!(
        "run {}: {} epochs processed, {} skipped, {} predictor calls, {} dead letters",
        plan.run_id,
        summary.processed_epochs.len(),
        summary.skipped_epochs.len(),
        summary.worker_calls,
        summary.dead_letters
    );
    println!(
        "cache: {} prompts, {} prefix groups, ~{} of ~{} tokens cacheable",
        cache.total_prompts,
        cache.distinct_template_prefixes,
        cache.estimated_cached_tokens,
        cache.estimated_total_tokens
    );
    Ok(())
}

fn read_snapshot(path: &Path) -> Result<Snapshot> {
    read_json(path)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
