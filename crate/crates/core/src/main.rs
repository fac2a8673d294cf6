use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use claimbench::bootstrap::{bootstrap_metrics, boxplot_csv, BootstrapConfig, BootstrapResult};
use claimbench::cohort::{self, BalanceKey, SidecarCounts, Split, SplitSpec, TokenCounter, WhitespaceTokenizer};
use claimbench::error::{Error, Result};
use claimbench::gateway::{
    run_evaluation, EmbeddingEndpoint, EndpointConfig, GenerationParams, HttpEndpoint, RunHeader, RunManifest,
    RunStore, API_KEY_ENV, ENDPOINT_ENV,
};
use claimbench::metrics::Meteor;
use claimbench::pipeline::{self, RagInputs};
use claimbench::prompt::{PromptTemplateSet, PromptVariant};
use claimbench::registry::RegistrySet;
use claimbench::report::{self, EvalReport};
use claimbench::retrieval::{self, HashingEmbedder, VectorIndex, DEFAULT_DIM};
use claimbench::stub::{Reply, StubConfig, StubServer};
use claimbench::synth::{self, SynthConfig};

const CORPUS_SCHEMA: &str = "\
CORPUS FORMAT
  JSON Lines, one encounter per line:
    {\"id\": \"enc-1\",                    unique, non-empty
     \"note\": \"OPERATIVE REPORT ...\",   operative note text
     \"date\": \"2018-03-14\",             date of surgery (YYYY-MM-DD)
     \"service\": \"General Surgery\",
     \"age\": 61,                        optional
     \"sex\": \"F\",                       optional, F or M
     \"claim\": {
       \"icd10\": [\"K80.20\", \"I10\"],
       \"providers\": [
         {\"name\": \"Dr. A\",
          \"lines\": [{\"cpt\": \"47562\", \"modifiers\": [\"59\"], \"description\": \"...\"}]}]}}

REGISTRY FORMAT
  A directory of {year}.csv files with KIND,CODE rows (KIND is ICD10 or CPT).
  Blank lines and lines starting with # are ignored.

EXIT CODES
  0 success, 1 I/O, 2 configuration, 3 data, 4 endpoint failure";

#[derive(Parser)]
#[command(name = "claimbench", version, about = "Evaluate generated surgical billing claims", after_long_help = CORPUS_SCHEMA)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and matching code registries.
    Synth(SynthArgs),
    /// Print cohort characteristics and note token-length statistics.
    Summarize(SummarizeArgs),
    /// Split a corpus into train/validation/test within date strata.
    Split(SplitArgs),
    /// Embed operative notes through an embedding endpoint.
    Embed(EmbedArgs),
    /// Build the retrieval index over training encounters.
    Index(IndexArgs),
    /// Render inference prompts for the test set without calling an endpoint.
    Prompts(PromptArgs),
    /// Generate claims for the test set through a completion endpoint.
    Infer(InferArgs),
    /// Score a run directory against ground truth.
    Score(ScoreArgs),
    /// Bootstrap precision/recall distributions from a scored report.
    Bootstrap(BootstrapArgs),
    /// Print the results table for one or more scored reports.
    Report(ReportArgs),
    /// Extract codes from generated text and print them as JSON.
    Parse(ParseArgs),
    /// Serve a local completion/embedding endpoint for offline runs.
    Stub(StubArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Directory for {year}.csv registries.
    #[arg(long)]
    registry_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    encounters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2019)]
    first_year: i32,
    #[arg(long, default_value_t = 2019)]
    last_year: i32,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// CSV of id,tokens from an external tokenizer; whitespace tokens otherwise.
    #[arg(long)]
    token_counts: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    bin_width: usize,
    /// Write the cohort table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write token statistics as JSON here.
    #[arg(long)]
    token_json: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.6)]
    train: f64,
    #[arg(long, default_value_t = 0.2)]
    validation: f64,
    #[arg(long, default_value_t = 0.2)]
    test: f64,
    #[arg(long, value_enum, default_value_t = BalanceKey::Month)]
    balance_key: BalanceKey,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Args)]
struct EndpointArgs {
    /// Base URL of the model service, e.g. http://host:8000/v1.
    #[arg(long, env = ENDPOINT_ENV)]
    endpoint: Option<String>,
    #[arg(long, default_value = "default")]
    model: String,
    /// Environment variable holding the bearer token.
    #[arg(long, default_value = API_KEY_ENV)]
    api_key_env: String,
    #[arg(long, default_value_t = 120_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 4)]
    max_attempts: u32,
    #[arg(long, default_value_t = 500)]
    backoff_ms: u64,
}

impl EndpointArgs {
    fn config(&self) -> Result<EndpointConfig> {
        let url = self
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config(format!("no endpoint: pass --endpoint or set {ENDPOINT_ENV}")))?;
        let mut c = EndpointConfig::new(url, self.model.clone());
        c.api_key_env = Some(self.api_key_env.clone());
        c.timeout = Duration::from_millis(self.timeout_ms);
        c.retry.max_attempts = self.max_attempts;
        c.retry.initial_backoff = Duration::from_millis(self.backoff_ms);
        Ok(c)
    }

    fn client(&self) -> Result<HttpEndpoint> {
        Ok(HttpEndpoint::new(self.config()?)?)
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Required unless --subset all.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Subset::All)]
    subset: Subset,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Use the built-in feature-hashing embedder instead of an endpoint.
    #[arg(long)]
    local_hash: bool,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Embeddings JSONL covering every training encounter.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PromptSource {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum, default_value_t = PromptVariant::Finetuned)]
    variant: PromptVariant,
    /// Directory of template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Index directory (rag variant).
    #[arg(long)]
    index: Option<PathBuf>,
    /// Embeddings JSONL covering every test encounter (rag variant).
    #[arg(long)]
    query_embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    rag_k: usize,
}

struct Prepared {
    corpus: cohort::Corpus,
    split: Split,
    cases: Vec<claimbench::gateway::PreparedCase>,
}

impl PromptSource {
    fn prepare(&self) -> Result<Prepared> {
        let corpus = cohort::ingest(&self.corpus)?;
        let split: Split = pipeline::read_json(&self.split)?;
        check_split(&corpus, &split)?;
        let templates = match &self.templates {
            Some(dir) => PromptTemplateSet::from_dir(dir)?,
            None => PromptTemplateSet::default(),
        }
        .with_rag_k(self.rag_k);
        let index = match (&self.index, self.variant) {
            (Some(dir), PromptVariant::Rag) => Some(VectorIndex::load(dir)?),
            (None, PromptVariant::Rag) => return Err(Error::Config("--variant rag requires --index".into())),
            _ => None,
        };
        let rag = match (&index, &self.query_embeddings) {
            (Some(index), Some(path)) => Some(RagInputs::new(index, retrieval::read_embeddings(path)?)),
            (Some(_), None) => return Err(Error::Config("--variant rag requires --query-embeddings".into())),
            _ => None,
        };
        let cases = pipeline::prepare_cases(&corpus, &split.test, &templates, self.variant, rag.as_ref())?;
        Ok(Prepared { corpus, split, cases })
    }
}

fn check_split(corpus: &cohort::Corpus, split: &Split) -> Result<()> {
    if split.corpus_digest != corpus.source_digest() {
        log::warn!("split was made from a different corpus file (digest mismatch)");
    }
    Ok(())
}

#[derive(Args)]
struct PromptArgs {
    #[command(flatten)]
    source: PromptSource,
    /// JSONL output, one {encounter_id, prompt} per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    source: PromptSource,
    #[command(flatten)]
    endpoint: EndpointArgs,
    /// Run directory; an existing one for the same run is resumed.
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 512)]
    max_new_tokens: u32,
    #[arg(long, default_value_t = 1.1)]
    repetition_penalty: f64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory of {year}.csv code registries.
    #[arg(long)]
    registry_dir: PathBuf,
    /// Column label in tables; defaults to the model name.
    #[arg(long)]
    label: Option<String>,
    /// Comma-separated synonym groups for METEOR, one group per line.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BootstrapArgs {
    /// Scored report JSON; the bootstrap result is stored back into it.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Cases per iteration; defaults to the number of scored cases.
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    boxplot_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Box-plot CSV across all reports that carry bootstrap results.
    #[arg(long)]
    boxplot_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ParseArgs {
    /// File with generated text; stdin when omitted.
    input: Option<PathBuf>,
}

#[derive(Args)]
struct StubArgs {
    /// Echo each encounter's true claim when its note appears in the prompt.
    #[arg(long, conflicts_with = "fixed")]
    echo_corpus: Option<PathBuf>,
    /// Reply to every completion with this text.
    #[arg(long)]
    fixed: Option<String>,
    #[arg(long, default_value = "127.0.0.1:8089")]
    bind: String,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    /// Require this bearer token, read from the named environment variable.
    #[arg(long)]
    require_token_env: Option<String>,
}

fn main() -> ExitCode {
    // Exit quietly when piped into a reader that closes early, such as `head`.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth_cmd(a),
        Command::Summarize(a) => summarize_cmd(a),
        Command::Split(a) => split_cmd(a),
        Command::Embed(a) => embed_cmd(a),
        Command::Index(a) => index_cmd(a),
        Command::Prompts(a) => prompts_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::Bootstrap(a) => bootstrap_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Parse(a) => parse_cmd(a),
        Command::Stub(a) => stub_cmd(a),
    }
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    if a.first_year > a.last_year {
        return Err(Error::Config("--first-year must not exceed --last-year".into()));
    }
    let cfg = SynthConfig {
        encounters: a.encounters,
        seed: a.seed,
        first_year: a.first_year,
        last_year: a.last_year,
    };
    let corpus = cohort::Corpus::from_records(synth::synth_corpus(&cfg))?;
    pipeline::write_text(&a.out, &corpus.to_jsonl())?;
    if let Some(dir) = &a.registry_dir {
        synth::synth_registries(a.first_year, a.last_year)
            .write_dir(dir)
            .map_err(Error::io(dir))?;
    }
    println!("wrote {} encounters to {}", corpus.len(), a.out.display());
    Ok(())
}

fn summarize_cmd(a: SummarizeArgs) -> Result<()> {
    let corpus = cohort::ingest(&a.corpus)?;
    let summary = cohort::summarize(&corpus);
    print!("{}", summary.to_text());
    if let Some(path) = &a.csv {
        pipeline::write_text(path, &summary.to_csv())?;
    }
    let sidecar;
    let counter: &dyn TokenCounter = match &a.token_counts {
        Some(path) => {
            sidecar = SidecarCounts::load(path)?;
            &sidecar
        }
        None => &WhitespaceTokenizer,
    };
    let stats = cohort::token_stats(&corpus, counter, a.bin_width)?;
    println!(
        "\nNote tokens: n={} mean={:.1} sd={:.1} min={} q1={:.1} median={:.1} q3={:.1} max={}",
        stats.n, stats.mean, stats.sd, stats.min, stats.q1, stats.median, stats.q3, stats.max
    );
    if let Some(path) = &a.token_json {
        pipeline::write_json(path, &stats)?;
    }
    Ok(())
}

fn split_cmd(a: SplitArgs) -> Result<()> {
    let corpus = cohort::ingest(&a.corpus)?;
    let spec = SplitSpec {
        train_frac: a.train,
        val_frac: a.validation,
        test_frac: a.test,
        balance_key: a.balance_key,
        seed: a.seed,
    };
    spec.validate()?;
    let split = cohort::split(&corpus, &spec)?;
    pipeline::write_json(&a.out, &split)?;
    println!(
        "train {} / validation {} / test {} across {} strata",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        split.strata.len()
    );
    Ok(())
}

fn subset_ids(corpus: &cohort::Corpus, split: Option<&Path>, subset: Subset) -> Result<Vec<String>> {
    if let Subset::All = subset {
        return Ok(corpus.encounters().iter().map(|e| e.id.clone()).collect());
    }
    let path = split.ok_or_else(|| Error::Config("--split is required for this subset".into()))?;
    let split: Split = pipeline::read_json(path)?;
    Ok(match subset {
        Subset::Train => split.train,
        Subset::Validation => split.validation,
        Subset::Test => split.test,
        Subset::All => unreachable!(),
    })
}

fn embed_cmd(a: EmbedArgs) -> Result<()> {
    let corpus = cohort::ingest(&a.corpus)?;
    let ids = subset_ids(&corpus, a.split.as_deref(), a.subset)?;
    let local = HashingEmbedder::new(a.dim);
    let remote;
    let embedder: &dyn EmbeddingEndpoint = if a.local_hash {
        &local
    } else {
        remote = a.endpoint.client()?;
        &remote
    };
    let records = pipeline::embed_notes(&corpus, &ids, embedder, a.dim, a.batch)?;
    retrieval::write_embeddings(&a.out, &records).map_err(Error::io(&a.out))?;
    println!("wrote {} embeddings to {}", records.len(), a.out.display());
    Ok(())
}

fn index_cmd(a: IndexArgs) -> Result<()> {
    let corpus = cohort::ingest(&a.corpus)?;
    let split: Split = pipeline::read_json(&a.split)?;
    let embeddings = retrieval::read_embeddings(&a.embeddings)?;
    let index = pipeline::build_train_index(&corpus, &split, &embeddings, a.dim)?;
    index.save(&a.out)?;
    println!("indexed {} training encounters in {}", index.len(), a.out.display());
    Ok(())
}

fn prompts_cmd(a: PromptArgs) -> Result<()> {
    let prepared = a.source.prepare()?;
    let mut text = String::new();
    for c in &prepared.cases {
        text.push_str(&serde_json::to_string(c).map_err(Error::json(&a.out))?);
        text.push('\n');
    }
    pipeline::write_text(&a.out, &text)?;
    println!("wrote {} prompts to {}", prepared.cases.len(), a.out.display());
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    if a.workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    let endpoint = a.endpoint.client()?;
    let prepared = a.source.prepare()?;
    let params = GenerationParams {
        max_new_tokens: a.max_new_tokens,
        repetition_penalty: a.repetition_penalty,
        ..GenerationParams::default()
    };
    let header = RunHeader::new(
        a.source.variant,
        &a.endpoint.model,
        params,
        prepared.corpus.source_digest(),
        Some(prepared.split.seed),
        &prepared.cases,
    );
    let mut store = RunStore::open(&a.run_dir, &header)?;
    let manifest = run_evaluation(&header, &prepared.cases, &endpoint, a.workers, Some(&mut store))?;
    let failed = manifest.failure_count();
    println!(
        "run {}: {} cases, {} succeeded, {} failed ({})",
        header.run_id,
        manifest.cases.len(),
        manifest.cases.len() - failed,
        failed,
        a.run_dir.display()
    );
    if failed > 0 {
        return Err(Error::CasesFailed { failed, total: manifest.cases.len() });
    }
    Ok(())
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.run_dir)?;
    let corpus = cohort::ingest(&a.corpus)?;
    let registries = RegistrySet::load_dir(&a.registry_dir)?;
    let mut meteor = Meteor::default();
    if let Some(path) = &a.synonyms {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        meteor = meteor.load_synonyms(&text);
    }
    let label = a.label.clone().unwrap_or_else(|| format!("{}-{}", manifest.header.model, manifest.header.variant));
    let report = report::score_manifest(&manifest, &corpus, &registries, &meteor, &label)?;
    pipeline::write_json(&a.out, &report)?;
    print!("{}", report::table_text(std::slice::from_ref(&report)));
    Ok(())
}

fn bootstrap_cmd(a: BootstrapArgs) -> Result<()> {
    let mut report: EvalReport = pipeline::read_json(&a.report)?;
    let config = BootstrapConfig {
        iterations: a.iterations,
        sample_size: a.sample_size,
        seed: a.seed,
    };
    let result: BootstrapResult = bootstrap_metrics(&report.case_scores(), &config)?;
    for m in &result.metrics {
        let s = &m.summary;
        println!(
            "{:<20} mean {:.4}  95% CI [{:.4}, {:.4}]  median {:.4}",
            m.metric, s.mean, s.ci_lower, s.ci_upper, s.median
        );
    }
    if let Some(path) = &a.boxplot_csv {
        pipeline::write_text(path, &boxplot_csv([(report.label.as_str(), &result)]))?;
    }
    report.bootstrap = Some(result);
    pipeline::write_json(&a.report, &report)
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| pipeline::read_json::<EvalReport>(p))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", report::table_text(&reports));
    if let Some(path) = &a.csv {
        pipeline::write_text(path, &report::table_csv(&reports))?;
    }
    if let Some(path) = &a.boxplot_csv {
        let with_boot = reports
            .iter()
            .filter_map(|r| r.bootstrap.as_ref().map(|b| (r.label.as_str(), b)));
        pipeline::write_text(path, &boxplot_csv(with_boot))?;
    }
    Ok(())
}

fn parse_cmd(a: ParseArgs) -> Result<()> {
    let text = match &a.input {
        Some(path) => std::fs::read_to_string(path).map_err(Error::io(path))?,
        None => std::io::read_to_string(std::io::stdin()).map_err(Error::io("<stdin>"))?,
    };
    let parsed = claimbench::parse_claim(&text);
    println!("{}", serde_json::to_string_pretty(&parsed.codes).map_err(Error::json("<stdout>"))?);
    Ok(())
}

fn stub_cmd(a: StubArgs) -> Result<()> {
    let reply = match (&a.echo_corpus, &a.fixed) {
        (Some(path), _) => Reply::echo_corpus(&cohort::ingest(path)?),
        (None, Some(text)) => Reply::Fixed(text.clone()),
        (None, None) => return Err(Error::Config("pass --echo-corpus or --fixed".into())),
    };
    let mut config = StubConfig::new(reply);
    config.embedding_dim = a.dim;
    if let Some(var) = &a.require_token_env {
        let token = std::env::var(var).map_err(|_| Error::Config(format!("{var} is not set")))?;
        config.required_token = Some(token);
    }
    let server = StubServer::bind(&a.bind, config).map_err(Error::io(&a.bind))?;
    println!("serving {}", server.base_url());
    server.wait();
    Ok(())
}
