mod heatmap;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use promptlens::embedding::Embedder;
use promptlens::eval::synthetic::{
    default_wordlist, keyword_dataset, SuffixAttentionBackend, KEYWORDS,
};
use promptlens::eval::{
    load_queries, load_wordlist, run_flip_rate, run_suffix_correlation, sweep, FlipRateConfig,
    GuardScope, SweepRow, DEFAULT_SUFFIX,
};
use promptlens::explain::{KeywordOracle, MethodExplainer, UnitScorer};
use promptlens::gateway::{Backend, GenerationParams};
use promptlens::types::{ExplainerId, Family, Span, TopK};
use promptlens_server::api::{
    compress_response, explain_response, ApiError, ComponentRanges, CompressRequest,
    ExplainRequest, Granularity, MethodSpec, RequestParams,
};
use promptlens_server::registry::KEYWORD_MODEL;
use promptlens_server::{Registry, ServerConfig};

/// Explains which parts of a prompt drive a language model's answer.
#[derive(Parser)]
#[command(name = "promptlens", version)]
struct Cli {
    /// TOML config file (models, embedding service, server settings).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output on stderr; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every prompt unit for one prompt.
    Explain(ExplainArgs),
    /// Faithfulness evaluations.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Flip-rate test over a grid of K and M values, as CSV.
    Sweep(SweepArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Drop the least important units of a prompt.
    Compress(CompressArgs),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Perturb the most and least important words of sentiment prompts and
    /// count label flips.
    FlipRate(FlipRateArgs),
    /// Correlate the importance of a length-limiting suffix with how much it
    /// shortens the output.
    Suffix(SuffixArgs),
}

#[derive(Args)]
struct PromptInput {
    #[arg(long, conflicts_with = "prompt_file")]
    prompt: Option<String>,
    #[arg(long)]
    prompt_file: Option<PathBuf>,
}

impl PromptInput {
    fn read(&self) -> Result<String, Failure> {
        match (&self.prompt, &self.prompt_file) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(path)) => std::fs::read_to_string(path)
                .map(|s| s.trim_end_matches(['\n', '\r']).to_string())
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display()))),
            (None, None) => Err(Failure::usage("give --prompt or --prompt-file")),
        }
    }
}

#[derive(Args)]
struct ModelParams {
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Top log-probabilities per step for perb_log: a count or "full".
    #[arg(long)]
    k: Option<TopK>,
    /// Rounds sampled by the aggregation explainers.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    ig_steps: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
}

impl ModelParams {
    fn request(&self) -> RequestParams {
        RequestParams {
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            k: self.k,
            m: self.m,
            ig_steps: self.ig_steps,
            parallelism: self.parallelism,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Token,
    Word,
    Sentence,
    Component,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Token => Granularity::Token,
            GranularityArg::Word => Granularity::Word,
            GranularityArg::Sentence => Granularity::Sentence,
            GranularityArg::Component => Granularity::Component,
        }
    }
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    input: PromptInput,
    #[arg(long, default_value = "ref")]
    model: String,
    /// perb_log, perb_sim, perb_dis, agg_equ or agg_conf; omit to only generate.
    #[arg(long)]
    method: Option<Family>,
    #[arg(long, value_enum, default_value = "token")]
    granularity: GranularityArg,
    /// NAME=START..END byte range; repeat for more ranges or components.
    #[arg(long = "component")]
    components: Vec<String>,
    #[command(flatten)]
    params: ModelParams,
    /// Include each perturbed prompt and its output.
    #[arg(long)]
    audit: bool,
    /// Print the response body as JSON.
    #[arg(long, conflicts_with = "ansi")]
    json: bool,
    /// Print a colored heatmap (the default).
    #[arg(long)]
    ansi: bool,
}

#[derive(Args)]
struct DatasetArgs {
    /// Text file with one query per line, or a CSV with a "sentence" column.
    /// Without it a synthetic keyword dataset is generated.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Size of the synthetic dataset.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 11)]
    dataset_seed: u64,
    /// Replacement words, one per line; defaults to the reference vocabulary.
    #[arg(long)]
    wordlist: Option<PathBuf>,
}

impl DatasetArgs {
    fn queries(&self) -> Result<Vec<String>, Failure> {
        match &self.dataset {
            Some(p) => Ok(load_queries(p)?),
            None => Ok(keyword_dataset(self.n, self.dataset_seed)
                .into_iter()
                .map(|c| c.query)
                .collect()),
        }
    }

    fn wordlist(&self) -> Result<Vec<String>, Failure> {
        match &self.wordlist {
            Some(p) => Ok(load_wordlist(p)?),
            None => Ok(default_wordlist()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Replaced,
    Prompt,
}

#[derive(Args)]
struct FlipArgs {
    /// Fraction of the winning component's words to perturb.
    #[arg(long, default_value_t = 0.2)]
    x: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum cosine similarity a replacement must keep.
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "replaced")]
    guard_scope: ScopeArg,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

impl FlipArgs {
    fn config(&self) -> FlipRateConfig {
        let mut cfg = FlipRateConfig {
            x: self.x,
            seed: self.seed,
            parallelism: self.parallelism.max(1),
            ..Default::default()
        };
        cfg.replace.threshold = self.threshold;
        cfg.replace.scope = match self.guard_scope {
            ScopeArg::Replaced => GuardScope::Replaced,
            ScopeArg::Prompt => GuardScope::Prompt,
        };
        if let Some(t) = self.max_tokens {
            cfg.generation.max_tokens = t;
        }
        cfg
    }
}

#[derive(Args)]
struct FlipRateArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    flip: FlipArgs,
    #[arg(long, default_value = KEYWORD_MODEL)]
    model: String,
    /// An explainer family, or "oracle" for the planted-keyword oracle.
    #[arg(long, default_value = "perb_dis")]
    method: String,
    #[arg(long)]
    k: Option<TopK>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    ig_steps: Option<usize>,
}

#[derive(Args)]
struct SuffixArgs {
    /// Prompts, one per line; defaults to a small built-in set.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// A configured model, or "suffix-mock" for a backend that obeys the
    /// suffix only after prompts ending in "!".
    #[arg(long, default_value = "ref")]
    model: String,
    #[arg(long, default_value = "perb_dis")]
    method: Family,
    #[arg(long, default_value = DEFAULT_SUFFIX)]
    suffix: String,
    #[arg(long, default_value_t = 32)]
    max_tokens: usize,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    flip: FlipArgs,
    #[arg(long, default_value = KEYWORD_MODEL)]
    model: String,
    #[arg(long, default_value = "agg_equ")]
    family: Family,
    /// Comma-separated K values ("full" allowed).
    #[arg(long, value_delimiter = ',', default_value = "full")]
    k: Vec<TopK>,
    /// Comma-separated M values.
    #[arg(long, value_delimiter = ',', default_value = "5")]
    m: Vec<usize>,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen address; overrides the config file and environment.
    #[arg(long)]
    bind: Option<String>,
}

#[derive(Args)]
struct CompressArgs {
    #[command(flatten)]
    input: PromptInput,
    #[arg(long, default_value = "ref")]
    model: String,
    #[arg(long, default_value = "perb_dis")]
    method: Family,
    /// Fraction of units to keep, in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    keep: f64,
    #[command(flatten)]
    params: ModelParams,
    #[arg(long)]
    json: bool,
}

/// A failed command: message for stderr and the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        // request problems are the caller's to fix; the rest are backend trouble
        let code = if e.status < 500 { 1 } else { 2 };
        Self {
            code,
            message: e.message,
        }
    }
}

impl From<promptlens::Error> for Failure {
    fn from(e: promptlens::Error) -> Self {
        ApiError::from(e).into()
    }
}

/// File values, then environment overrides; command flags are applied last
/// by each subcommand.
fn load_config(
    path: Option<&Path>,
    env: impl Fn(&str) -> Option<String>,
) -> Result<ServerConfig, Failure> {
    let file = match path {
        Some(p) => ServerConfig::load(p).map_err(Failure::usage)?,
        None => ServerConfig::default(),
    };
    file.with_env(env).map_err(Failure::usage)
}

fn registry(cfg: &ServerConfig) -> Result<Registry, Failure> {
    Ok(Registry::from_config(cfg)?)
}

fn backend(reg: &Registry, name: &str) -> Result<Arc<dyn Backend>, Failure> {
    reg.backend(name)
        .ok_or_else(|| Failure::usage(format!("unknown model {name:?}")))
}

fn parse_component(spec: &str) -> Result<(String, Span), Failure> {
    let bad = || Failure::usage(format!("component {spec:?} is not NAME=START..END"));
    let (name, range) = spec.rsplit_once('=').ok_or_else(bad)?;
    let (s, e) = range.split_once("..").ok_or_else(bad)?;
    let s = s.trim().parse().map_err(|_| bad())?;
    let e = e.trim().parse().map_err(|_| bad())?;
    Ok((name.to_string(), Span(s, e)))
}

fn components(specs: &[String]) -> Result<Option<Vec<ComponentRanges>>, Failure> {
    if specs.is_empty() {
        return Ok(None);
    }
    let mut out: Vec<ComponentRanges> = Vec::new();
    for spec in specs {
        let (name, span) = parse_component(spec)?;
        match out.iter_mut().find(|c| c.name == name) {
            Some(c) => c.ranges.push(span),
            None => out.push(ComponentRanges {
                name,
                ranges: vec![span],
            }),
        }
    }
    Ok(Some(out))
}

fn print_json<T: serde::Serialize>(v: &T, pretty: bool) -> Result<(), Failure> {
    let text = if pretty {
        serde_json::to_string_pretty(v)
    } else {
        serde_json::to_string(v)
    }
    .map_err(|e| Failure {
        code: 2,
        message: e.to_string(),
    })?;
    emit(&format!("{text}\n"))
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure {
            code: 2,
            message: format!("cannot write output: {e}"),
        }),
        _ => Ok(()),
    }
}

fn explain(args: &ExplainArgs, cfg: &ServerConfig) -> Result<(), Failure> {
    let req = ExplainRequest {
        prompt: args.input.read()?,
        model: args.model.clone(),
        method: args.method.map(MethodSpec::Family),
        granularity: args.granularity.into(),
        components: components(&args.components)?,
        params: args.params.request(),
        audit: args.audit,
    };
    let reg = registry(cfg)?;
    let resp = explain_response(&reg, &req, cfg.max_parallelism)?;
    if args.json {
        // compact, exactly as the service serializes it
        return print_json(&resp, false);
    }
    emit(&heatmap::render(&resp))
}

fn explainer(
    method: &str,
    id: impl FnOnce(Family) -> ExplainerId,
    embedder: Arc<dyn Embedder>,
) -> Result<Box<dyn UnitScorer>, Failure> {
    if method == "oracle" {
        return Ok(Box::new(KeywordOracle {
            keywords: KEYWORDS.iter().map(|k| k.to_string()).collect(),
        }));
    }
    let family: Family = method.parse()?;
    let id = id(family);
    id.validate()?;
    Ok(Box::new(MethodExplainer::new(id, Some(embedder))))
}

fn flip_rate(args: &FlipRateArgs, cfg: &ServerConfig) -> Result<(), Failure> {
    let reg = registry(cfg)?;
    let backend = backend(&reg, &args.model)?;
    let embedder = reg.embedder();
    let explainer = explainer(
        &args.method,
        |f| {
            let mut id = ExplainerId::new(f);
            if let Some(k) = args.k {
                id.k = k;
            }
            if let Some(m) = args.m {
                id.m = m;
            }
            if let Some(s) = args.ig_steps {
                id.ig_steps = s;
            }
            id
        },
        embedder.clone(),
    )?;
    let report = run_flip_rate(
        &args.data.queries()?,
        explainer.as_ref(),
        backend.as_ref(),
        embedder.as_ref(),
        &args.data.wordlist()?,
        &args.flip.config(),
    )?;
    print_json(&report, true)
}

const SUFFIX_MOCK: &str = "suffix-mock";

fn builtin_suffix_prompts() -> Vec<String> {
    keyword_dataset(20, 3)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if i % 2 == 0 {
                format!("{}!", c.query)
            } else {
                c.query
            }
        })
        .collect()
}

fn suffix(args: &SuffixArgs, cfg: &ServerConfig) -> Result<(), Failure> {
    let reg = registry(cfg)?;
    let backend: Arc<dyn Backend> = if args.model == SUFFIX_MOCK {
        Arc::new(SuffixAttentionBackend::new(&args.suffix))
    } else {
        backend(&reg, &args.model)?
    };
    let prompts = match &args.dataset {
        Some(p) => load_queries(p)?,
        None => builtin_suffix_prompts(),
    };
    let explainer = MethodExplainer::new(ExplainerId::new(args.method), Some(reg.embedder()));
    let params = GenerationParams {
        max_tokens: args.max_tokens,
        ..Default::default()
    };
    let report = run_suffix_correlation(
        &prompts,
        &explainer,
        backend.as_ref(),
        &args.suffix,
        &params,
        args.parallelism.max(1),
    )?;
    print_json(&report, true)
}

fn run_sweep(args: &SweepArgs, cfg: &ServerConfig) -> Result<(), Failure> {
    let reg = registry(cfg)?;
    let backend = backend(&reg, &args.model)?;
    let rows = sweep(
        args.family,
        &args.k,
        &args.m,
        backend.as_ref(),
        reg.embedder(),
        &args.data.queries()?,
        &args.data.wordlist()?,
        &args.flip.config(),
    );
    emit(&SweepRow::to_csv(&rows)?)
}

fn serve_config(args: &ServeArgs, mut cfg: ServerConfig) -> ServerConfig {
    if let Some(bind) = &args.bind {
        cfg.bind = bind.clone();
    }
    cfg
}

fn serve(args: &ServeArgs, cfg: ServerConfig) -> Result<(), Failure> {
    let cfg = serve_config(args, cfg);
    promptlens_server::http::serve_blocking(cfg).map_err(|message| Failure { code: 2, message })
}

fn compress(args: &CompressArgs, cfg: &ServerConfig) -> Result<(), Failure> {
    let req = CompressRequest {
        prompt: args.input.read()?,
        model: args.model.clone(),
        method: MethodSpec::Family(args.method),
        keep_fraction: args.keep,
        params: args.params.request(),
    };
    let reg = registry(cfg)?;
    let resp = compress_response(&reg, &req, cfg.max_parallelism)?;
    if args.json {
        return print_json(&resp, false);
    }
    emit(&format!("{}\n", resp.compressed_prompt))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(cli.config.as_deref(), |k| std::env::var(k).ok())?;
    match &cli.command {
        Command::Explain(a) => explain(a, &cfg),
        Command::Eval(EvalCommand::FlipRate(a)) => flip_rate(a, &cfg),
        Command::Eval(EvalCommand::Suffix(a)) => suffix(a, &cfg),
        Command::Sweep(a) => run_sweep(a, &cfg),
        Command::Serve(a) => serve(a, cfg),
        Command::Compress(a) => compress(a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => tracing_subscriber::filter::LevelFilter::WARN,
        1 => tracing_subscriber::filter::LevelFilter::INFO,
        _ => tracing_subscriber::filter::LevelFilter::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
