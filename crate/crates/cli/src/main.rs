//! `contextcrop`: refine dialogue images against their preceding text, summarise
//! crop statistics, compute DMOS reports and run the rating service.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 invalid input or
//! configuration, 3 a model backend could not be reached.

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use contextcrop_core::assessment::{build_report, parse_ratings, AssessmentError, TestMethod};
use contextcrop_core::backend::{GroundingBackend, RetryPolicy, TextGenBackend};
use contextcrop_core::context::extract_context;
use contextcrop_core::dialogue::{parse_dataset, serialize_dataset};
use contextcrop_core::fixtures::{FixtureGrounding, FixtureTextGen};
use contextcrop_core::grounding::{DEFAULT_BOX_THRESHOLD, DEFAULT_TEXT_THRESHOLD};
use contextcrop_core::keywords::{Lexicon, PromptTemplate, DEFAULT_MAX_KEYWORDS, DEFAULT_TARGET_LANGUAGE};
use contextcrop_core::pipeline::{
    ratio_histogram, read_provenance, refine_dataset, write_provenance, Backends, ImageDir, PipelineConfig, Population,
    ProvenanceRecord, Refiner, DEFAULT_CROP_CUTOFF,
};
use contextcrop_core::roi::RefinementStatus;
use contextcrop_server::{probe, AppState, HttpGrounding, HttpTextGen, ServeOptions};

#[derive(Parser)]
#[command(name = "contextcrop", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crop every image in a dataset to the region its context talks about.
    Refine(RefineArgs),
    /// Area-ratio histogram of a provenance log.
    Stats(StatsArgs),
    /// Print the context window the keyword prompt would see for one image.
    Context(ContextArgs),
    /// DMOS and MOS report from a ratings file.
    Dmos(DmosArgs),
    /// Run the rating and refinement HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Base URL of the text-generation backend (POST /v1/complete).
    #[arg(long)]
    kw_endpoint: Option<String>,
    /// Base URL of the grounding backend (POST /v1/ground).
    #[arg(long)]
    ground_endpoint: Option<String>,
    /// Directory with canned backend replies (keywords.json, grounding/*.json); replaces both endpoints.
    #[arg(long, conflicts_with_all = ["kw_endpoint", "ground_endpoint"])]
    fixtures: Option<PathBuf>,
    /// Per-call timeout for both backends.
    #[arg(long, default_value_t = 30_000)]
    kw_timeout_ms: u64,
    /// Extra attempts after a failed backend call.
    #[arg(long, default_value_t = 2)]
    kw_retries: u32,
    /// First retry delay; later retries double it.
    #[arg(long, default_value_t = 200)]
    retry_base_ms: u64,
    /// Minimum box confidence a detection needs (inclusive).
    #[arg(long, default_value_t = DEFAULT_BOX_THRESHOLD)]
    box_threshold: f64,
    /// Minimum phrase confidence a detection needs (inclusive).
    #[arg(long, default_value_t = DEFAULT_TEXT_THRESHOLD)]
    text_threshold: f64,
    /// Text turns before an image that feed the keyword prompt.
    #[arg(long, default_value_t = contextcrop_core::context::DEFAULT_CONTEXT_TURNS)]
    context_turns: usize,
    /// Keywords kept per image.
    #[arg(long, default_value_t = DEFAULT_MAX_KEYWORDS)]
    max_keywords: usize,
    /// Language the keywords are requested in.
    #[arg(long, default_value = DEFAULT_TARGET_LANGUAGE)]
    target_language: String,
    /// Parallel per-image tasks.
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    /// Prompt template file. Placeholders: {{conversation}}, {{max_keywords}}, {{target_language}}.
    #[arg(long)]
    prompt_template: Option<PathBuf>,
    /// Term list for the keyword fallback (default: the bundled seed list).
    #[arg(long, conflicts_with = "no_fallback")]
    lexicon: Option<PathBuf>,
    /// Do not fall back to lexicon matching when the backend yields no keywords.
    #[arg(long)]
    no_fallback: bool,
}

#[derive(Args)]
struct RefineArgs {
    /// Dataset, one session per line.
    #[arg(long)]
    input: PathBuf,
    /// Root that image URIs are relative to; refined images are written beside the originals.
    #[arg(long)]
    images: PathBuf,
    /// Refined dataset.
    #[arg(long)]
    out: PathBuf,
    /// Provenance log. An existing log is used to skip images already done.
    #[arg(long)]
    provenance: PathBuf,
    /// Ignore an existing provenance log.
    #[arg(long)]
    fresh: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum PopulationArg {
    All,
    Cropped,
}

#[derive(Args)]
struct StatsArgs {
    /// Provenance log written by `refine`.
    #[arg(long)]
    provenance: PathBuf,
    /// Every image, or only the ones that were cropped.
    #[arg(long, value_enum, default_value = "all")]
    population: PopulationArg,
}

#[derive(Args)]
struct ContextArgs {
    /// Dataset, one session per line.
    #[arg(long)]
    input: PathBuf,
    /// Session id.
    #[arg(long)]
    session: String,
    /// Image id within the session.
    #[arg(long)]
    image: String,
    #[arg(long, default_value_t = contextcrop_core::context::DEFAULT_CONTEXT_TURNS)]
    max_turns: usize,
}

#[derive(Args)]
struct DmosArgs {
    /// Ratings, one record per line.
    #[arg(long)]
    ratings: PathBuf,
    /// Provenance of the refinement run; enables the cropped-image column.
    #[arg(long)]
    provenance: Option<PathBuf>,
    /// Images cropped to strictly less than this fraction of their area count as cropped.
    #[arg(long, default_value_t = DEFAULT_CROP_CUTOFF)]
    cutoff: f64,
    /// Significance test: t or wilcoxon.
    #[arg(long, default_value = "t")]
    test: TestMethod,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Seed for the per-task A/B order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append-only ratings file; created if missing.
    #[arg(long)]
    ratings_store: PathBuf,
    /// Task file with the evaluator tokens and the response pairs to rate.
    #[arg(long)]
    tasks: PathBuf,
    /// Provenance of the refinement run; enables the cropped-image figures in reports.
    #[arg(long)]
    provenance: Option<PathBuf>,
    /// Largest accepted body for image uploads.
    #[arg(long, default_value_t = contextcrop_server::app::DEFAULT_MAX_UPLOAD_BYTES)]
    max_upload_bytes: usize,
    #[command(flatten)]
    backend: BackendArgs,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn invalid(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

fn unreachable_backend(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 3,
        error: error.into(),
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Refine(a) => refine(a),
        Command::Stats(a) => stats(a),
        Command::Context(a) => context(a),
        Command::Dmos(a) => dmos(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

impl BackendArgs {
    fn config(&self) -> PipelineConfig {
        PipelineConfig {
            max_keywords: self.max_keywords,
            context_turns: self.context_turns,
            box_threshold: self.box_threshold,
            text_threshold: self.text_threshold,
            max_in_flight: self.max_in_flight,
            target_language: self.target_language.clone(),
            kw_endpoint: self.kw_endpoint.clone(),
            ground_endpoint: self.ground_endpoint.clone(),
            kw_timeout_ms: self.kw_timeout_ms,
            kw_retries: self.kw_retries,
            ..PipelineConfig::default()
        }
    }

    fn configured(&self) -> bool {
        self.fixtures.is_some() || self.kw_endpoint.is_some() || self.ground_endpoint.is_some()
    }

    /// Builds the refiner; endpoints are probed first so a dead backend fails fast.
    fn refiner(&self) -> Result<Refiner, Failure> {
        let (text, grounding): (Arc<dyn TextGenBackend>, Arc<dyn GroundingBackend>) = match &self.fixtures {
            Some(dir) => {
                let text = FixtureTextGen::load(dir)
                    .with_context(|| format!("loading keyword fixtures from {}", dir.display()))
                    .map_err(invalid)?;
                let grounding = FixtureGrounding::load(dir)
                    .with_context(|| format!("loading grounding fixtures from {}", dir.display()))
                    .map_err(invalid)?;
                (Arc::new(text), Arc::new(grounding))
            }
            None => {
                let (Some(kw), Some(ground)) = (&self.kw_endpoint, &self.ground_endpoint) else {
                    return Err(invalid(anyhow!(
                        "both --kw-endpoint and --ground-endpoint are required unless --fixtures is given"
                    )));
                };
                let timeout = Duration::from_millis(self.kw_timeout_ms);
                let connect = timeout.min(Duration::from_secs(5));
                for (name, url) in [("keyword", kw), ("grounding", ground)] {
                    probe(url, connect)
                        .with_context(|| format!("{name} backend at {url}"))
                        .map_err(unreachable_backend)?;
                }
                (
                    Arc::new(HttpTextGen::new(kw, timeout)),
                    Arc::new(HttpGrounding::new(ground, timeout)),
                )
            }
        };
        let template = match &self.prompt_template {
            Some(p) => PromptTemplate::load(p)
                .with_context(|| format!("prompt template {}", p.display()))
                .map_err(invalid)?,
            None => PromptTemplate::default(),
        };
        let lexicon = match (&self.lexicon, self.no_fallback) {
            (_, true) => None,
            (Some(p), false) => Some(
                Lexicon::load(p)
                    .with_context(|| format!("lexicon {}", p.display()))
                    .map_err(invalid)?,
            ),
            (None, false) => Some(Lexicon::seed()),
        };
        let backends = Backends {
            template,
            lexicon,
            retry: RetryPolicy {
                retries: self.kw_retries,
                base_delay_ms: self.retry_base_ms,
            },
            ..Backends::new(text, grounding)
        };
        Refiner::new(self.config(), backends).map_err(invalid)
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(Failure::from)
}

/// Writes through a sibling temporary file so readers never see a partial file.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), Failure> {
    let mut buf = Vec::new();
    fill(&mut buf).context("serializing output")?;
    let tmp = path.with_extension("partial");
    let mut f = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(&buf)
        .and_then(|_| f.sync_all())
        .with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

fn refine(args: RefineArgs) -> Outcome {
    let dataset = parse_dataset(open(&args.input)?)
        .with_context(|| format!("dataset {}", args.input.display()))
        .map_err(invalid)?;
    let refiner = args.backend.refiner()?;
    let previous: Vec<ProvenanceRecord> = if !args.fresh && args.provenance.is_file() {
        read_provenance(open(&args.provenance)?)
            .with_context(|| format!("existing provenance {}", args.provenance.display()))
            .map_err(invalid)?
    } else {
        Vec::new()
    };
    let out = refine_dataset(&dataset, &refiner, &ImageDir::new(&args.images), &previous).context("refinement run")?;
    write_atomic(&args.out, |buf| serialize_dataset(&out.dataset, buf))?;
    write_atomic(&args.provenance, |buf| write_provenance(&out.records, buf))?;

    let cropped = out
        .records
        .iter()
        .filter(|r| r.result.status == RefinementStatus::Cropped)
        .count();
    println!(
        "{} images: {} cropped, {} unchanged, {} reused from earlier provenance",
        out.records.len(),
        cropped,
        out.records.len() - cropped,
        out.resumed
    );
    print!("{}", ratio_histogram(&out.records, Population::AllImages));
    Ok(())
}

fn stats(args: StatsArgs) -> Outcome {
    let records = read_provenance(open(&args.provenance)?)
        .with_context(|| format!("provenance {}", args.provenance.display()))
        .map_err(invalid)?;
    let population = match args.population {
        PopulationArg::All => Population::AllImages,
        PopulationArg::Cropped => Population::CroppedOnly,
    };
    let h = ratio_histogram(&records, population);
    print!("{h}");
    println!("{}", serde_json::to_string(&h).context("serializing histogram")?);
    Ok(())
}

fn context(args: ContextArgs) -> Outcome {
    let dataset = parse_dataset(open(&args.input)?)
        .with_context(|| format!("dataset {}", args.input.display()))
        .map_err(invalid)?;
    let session = dataset
        .session(&args.session)
        .ok_or_else(|| invalid(anyhow!("no session `{}`", args.session)))?;
    let window = extract_context(session, &args.image, args.max_turns).map_err(invalid)?;
    println!("image {} ({} turns of context)", window.image_id, window.turns_used);
    for e in &window.entries {
        let turn = e.turn.map(|t| t.to_string()).unwrap_or_default();
        println!("  [{turn}] {:?}: {}", e.role, e.text);
    }
    println!("{}", serde_json::to_string(&window).context("serializing window")?);
    Ok(())
}

fn dmos(args: DmosArgs) -> Outcome {
    if !(args.cutoff > 0.0 && args.cutoff <= 1.0) {
        return Err(invalid(anyhow!("--cutoff must lie in (0, 1], got {}", args.cutoff)));
    }
    let ratings = parse_ratings(open(&args.ratings)?)
        .with_context(|| format!("ratings {}", args.ratings.display()))
        .map_err(invalid)?;
    let provenance = match &args.provenance {
        Some(p) => Some(
            read_provenance(open(p)?)
                .with_context(|| format!("provenance {}", p.display()))
                .map_err(invalid)?,
        ),
        None => None,
    };
    match build_report(&ratings, provenance.as_deref(), args.cutoff, args.test) {
        Ok(report) => {
            print!("{report}");
            println!("{}", serde_json::to_string(&report).context("serializing report")?);
            Ok(())
        }
        Err(AssessmentError::Incomplete { missing }) => {
            eprintln!("rating grid is incomplete; missing (evaluator, session, response):");
            for m in &missing {
                eprintln!("  {} {} {}", m.evaluator, m.session, m.response_index);
            }
            Err(invalid(anyhow!("{} ratings missing", missing.len())))
        }
        Err(e) => Err(invalid(e)),
    }
}

fn serve(args: ServeArgs) -> Outcome {
    let refiner = if args.backend.configured() {
        Some(args.backend.refiner()?)
    } else {
        log::warn!("no model backends configured; /api/refine will answer 503");
        None
    };
    let opts = ServeOptions {
        addr: SocketAddr::new(args.host, args.port),
        seed: args.seed,
        ratings_store: args.ratings_store,
        tasks: args.tasks,
        provenance: args.provenance,
        max_upload_bytes: args.max_upload_bytes,
        max_in_flight: args.backend.max_in_flight,
    };
    let state = AppState::load(&opts, refiner).map_err(invalid)?;
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(opts.addr)
            .await
            .with_context(|| format!("binding {}", opts.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        contextcrop_server::serve(listener, state).await.context("serving")?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}
