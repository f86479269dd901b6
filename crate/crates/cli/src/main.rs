//! `dalm`: batch front end for the crystal library.
//!
//! Exit codes: 0 success, 1 validation rejections present, 2 usage, format
//! or other errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use dalm_core::decoder::{self, ActivationSource, GenerationConfig, OutputMode, Vocabulary};
use dalm_core::denoise::{self, CorpusSpec, ExperimentConfig, Field};
use dalm_core::embeddings::{self, CompletionConfig, EmbeddingSpace, Geometry, TrainConfig};
use dalm_core::inference::{self, AnswerRecord, QueryPattern};
use dalm_core::store::parse_jsonl;
use dalm_core::{CrystalLibrary, DomainPath, Execution, Scope};

#[derive(Parser, Debug)]
#[command(name = "dalm", version, about = "Domain-scoped crystal library tools")]
struct Cli {
    /// Crystal library (JSONL).
    #[arg(long, global = true, env = "DALM_LIBRARY")]
    library: Option<PathBuf>,
    /// Meta-fiber configuration (JSON). Defaults to the built-in relation table.
    #[arg(long, global = true)]
    meta: Option<PathBuf>,
    /// Embedding snapshot (JSON).
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ScopeArg {
    Local,
    Effective,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Local => Scope::Local,
            ScopeArg::Effective => Scope::Effective,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Insert crystals from a JSONL file through the validation gate.
    Ingest {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = ScopeArg::Local)]
        scope: ScopeArg,
        /// Report without writing the library back.
        #[arg(long)]
        dry_run: bool,
    },
    /// Re-check every stored crystal against the rest of the library.
    Validate {
        #[arg(long, value_enum, default_value_t = ScopeArg::Local)]
        scope: ScopeArg,
    },
    /// Pattern query in one domain, or across activated domains.
    Query(QueryArgs),
    /// Constrained generation for a list of query concepts.
    Generate(GenerateArgs),
    /// Train domain embeddings, then concept/relation vectors.
    TrainEmbeddings(TrainArgs),
    /// Hierarchical top-k routing of query concepts over the lattice.
    Route {
        #[arg(long = "query", required = true, value_delimiter = ',')]
        query: Vec<String>,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Structured versus random denoising experiment.
    SimulateDenoise(DenoiseArgs),
    /// Write the library in canonical form.
    Export {
        #[arg(long, value_enum, default_value_t = ExportWhat::Crystals)]
        what: ExportWhat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Library counts.
    Stats,
    /// Generate a synthetic corpus into --library (and --meta if given).
    Synth(SynthArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ExportWhat {
    Crystals,
    Meta,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    relation: Option<String>,
    #[arg(long)]
    object: Option<String>,
    /// Query a single domain. Without it the query runs in every activated domain.
    #[arg(long)]
    domain: Option<DomainPath>,
    /// Only local fiber contents, no inherited crystals.
    #[arg(long)]
    local_only: bool,
    /// JSON object mapping domain paths to activation weights.
    #[arg(long, conflicts_with = "domain")]
    activations: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, value_enum)]
    activation_source: Option<SourceArg>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SourceArg {
    Embedding,
    Overlap,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Crystal,
    #[value(alias = "multi")]
    MultiPerspective,
    Verbalized,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum VocabArg {
    Closed,
    Open,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long = "query", required = true, value_delimiter = ',')]
    query: Vec<String>,
    #[arg(long, value_enum, default_value_t = ModeArg::Crystal)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = VocabArg::Closed)]
    vocabulary: VocabArg,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.15)]
    theta_novel: f64,
    #[arg(long, default_value_t = 3)]
    max_concepts_per_pair: usize,
    /// Defaults to `embedding` when --embeddings is given, else `overlap`.
    #[arg(long, value_enum)]
    activation_source: Option<SourceArg>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Submit provisional concepts through the validation gate and save.
    #[arg(long)]
    submit: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum GeometryArg {
    Euclidean,
    Poincare,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Snapshot path to write (defaults to --embeddings).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GeometryArg::Euclidean)]
    geometry: GeometryArg,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 5)]
    negatives_per_positive: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Epochs of concept/relation training; 0 skips it.
    #[arg(long, default_value_t = 200)]
    completion_epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    completion_learning_rate: f64,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "domain,relation,subject,object")]
    fields: Vec<FieldArg>,
    /// Write the CSV report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FieldArg {
    Domain,
    Relation,
    Subject,
    Object,
}

impl From<FieldArg> for Field {
    fn from(f: FieldArg) -> Self {
        match f {
            FieldArg::Domain => Field::Domain,
            FieldArg::Relation => Field::Relation,
            FieldArg::Subject => Field::Subject,
            FieldArg::Object => Field::Object,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    Icd11Like,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 3)]
    branching: usize,
    #[arg(long, default_value_t = 10)]
    concepts_per_fiber: usize,
    #[arg(long, default_value_t = 20)]
    crystals_per_fiber: usize,
    #[arg(long, default_value_t = 0.0)]
    shared_fraction: f64,
    /// Root segment placed under ⊤.
    #[arg(long)]
    root: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn library_path(cli: &Cli) -> Result<&Path> {
    cli.library
        .as_deref()
        .context("no library given (use --library or DALM_LIBRARY)")
}

fn load_library(cli: &Cli, allow_missing: bool) -> Result<CrystalLibrary> {
    let path = library_path(cli)?;
    let meta = match &cli.meta {
        Some(p) if p.exists() || !allow_missing => {
            Some(fs::read(p).with_context(|| format!("reading {}", p.display()))?)
        }
        _ => None,
    };
    let crystals = if allow_missing && !path.exists() {
        Vec::new()
    } else {
        fs::read(path).with_context(|| format!("reading {}", path.display()))?
    };
    CrystalLibrary::load(&crystals, meta.as_deref()).with_context(|| format!("loading {}", path.display()))
}

fn save_library(cli: &Cli, lib: &CrystalLibrary) -> Result<()> {
    let path = library_path(cli)?;
    fs::write(path, lib.save_crystals()).with_context(|| format!("writing {}", path.display()))?;
    if let Some(meta) = &cli.meta {
        fs::write(meta, lib.save_meta()).with_context(|| format!("writing {}", meta.display()))?;
    }
    Ok(())
}

fn load_space(cli: &Cli) -> Result<Option<EmbeddingSpace>> {
    match &cli.embeddings {
        Some(p) if p.exists() => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Some(EmbeddingSpace::from_json(&text).with_context(|| format!("loading {}", p.display()))?))
        }
        Some(p) => bail!("embedding snapshot {} does not exist", p.display()),
        None => Ok(None),
    }
}

fn emit<T: Serialize>(cli: &Cli, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    let mut out = io::stdout().lock();
    match cli.format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, value)?;
            writeln!(out)?;
        }
        Format::Text => write!(out, "{}", text())?,
    }
    Ok(())
}

fn exit_for(rejected: usize) -> ExitCode {
    if rejected > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn source(arg: Option<SourceArg>, space: Option<&EmbeddingSpace>) -> ActivationSource {
    match arg {
        Some(SourceArg::Embedding) => ActivationSource::Embedding,
        Some(SourceArg::Overlap) => ActivationSource::Overlap,
        None if space.is_some() => ActivationSource::Embedding,
        None => ActivationSource::Overlap,
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Ingest { file, scope, dry_run } => {
            let mut lib = load_library(cli, true)?;
            let bytes = fs::read(file).with_context(|| format!("reading {}", file.display()))?;
            let records = parse_jsonl(bytes.as_slice()).with_context(|| format!("parsing {}", file.display()))?;
            let summary = lib.bulk_ingest(records, (*scope).into())?;
            if !dry_run {
                save_library(cli, &lib)?;
            }
            emit(cli, &summary, || {
                let mut s = format!("accepted: {}, rejected: {}\n", summary.accepted, summary.rejected_total());
                for r in &summary.rejections {
                    s += &format!("  record {}: reason={} {}\n", r.record, r.reason, r.details);
                }
                s
            })?;
            Ok(exit_for(summary.rejected_total()))
        }
        Command::Validate { scope } => {
            let lib = load_library(cli, false)?;
            let results = lib.revalidate((*scope).into(), Execution::Parallel);
            let rejections: Vec<_> = results
                .iter()
                .filter(|(_, r)| !r.is_accepted())
                .map(|(c, r)| json!({"crystal": c.to_record(), "reason": r.reason, "details": r.details}))
                .collect();
            let accepted = results.len() - rejections.len();
            let doc = json!({"accepted": accepted, "rejected": rejections.len(), "rejections": rejections});
            emit(cli, &doc, || {
                let mut s = format!("accepted: {}, rejected: {}\n", accepted, rejections.len());
                for (c, r) in results.iter().filter(|(_, r)| !r.is_accepted()) {
                    s += &format!("  {c}: reason={} {}\n", r.reason, r.details);
                }
                s
            })?;
            Ok(exit_for(rejections.len()))
        }
        Command::Query(args) => query(cli, args),
        Command::Generate(args) => generate(cli, args),
        Command::TrainEmbeddings(args) => train(cli, args),
        Command::Route { query, k } => {
            let lib = load_library(cli, false)?;
            let space = load_space(cli)?.context("route needs --embeddings")?;
            let result = decoder::hierarchical_route(query, &lib, &space, *k)?;
            emit(cli, &result, || {
                let mut s = format!("visited: {}\n", result.visited);
                for (d, score) in &result.domains {
                    s += &format!("{d}\t{score:.6}\n");
                }
                s
            })?;
            Ok(ExitCode::SUCCESS)
        }
        Command::SimulateDenoise(args) => simulate(cli, args),
        Command::Export { what, out } => {
            let lib = load_library(cli, false)?;
            let bytes = match what {
                ExportWhat::Crystals => lib.save_crystals(),
                ExportWhat::Meta => lib.save_meta(),
            };
            match out {
                Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?,
                None => io::stdout().lock().write_all(&bytes)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Stats => {
            let lib = load_library(cli, false)?;
            let per_fiber: BTreeMap<String, usize> = lib.fibers().map(|f| (f.domain().to_string(), f.len())).collect();
            let relations: BTreeMap<String, usize> = lib.crystals().fold(BTreeMap::new(), |mut m, c| {
                *m.entry(c.relation.to_string()).or_default() += 1;
                m
            });
            let doc = json!({
                "domains": lib.lattice().len(),
                "fibers": per_fiber.len(),
                "crystals": lib.len(),
                "concepts": lib.concepts().len(),
                "provisional": lib.provisional().len(),
                "max_depth": lib.lattice().max_depth(),
                "max_branching": lib.lattice().max_branching(),
                "relations": relations,
                "crystals_per_fiber": per_fiber,
            });
            emit(cli, &doc, || {
                let mut s = format!(
                    "domains: {}\nfibers: {}\ncrystals: {}\nconcepts: {}\nprovisional: {}\n",
                    lib.lattice().len(),
                    per_fiber.len(),
                    lib.len(),
                    lib.concepts().len(),
                    lib.provisional().len()
                );
                s += "relations:\n";
                for (r, n) in &relations {
                    s += &format!("  {r}: {n}\n");
                }
                s += "crystals per fiber:\n";
                for (d, n) in &per_fiber {
                    s += &format!("  {d}: {n}\n");
                }
                s
            })?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth(args) => {
            let spec = match args.preset {
                Some(Preset::Icd11Like) => CorpusSpec::icd11_like(cli.seed),
                None => CorpusSpec {
                    root: args.root.clone(),
                    depth: args.depth,
                    branching: args.branching,
                    concepts_per_fiber: args.concepts_per_fiber,
                    crystals_per_fiber: args.crystals_per_fiber,
                    shared_fraction: args.shared_fraction,
                    seed: cli.seed,
                },
            };
            let lib = denoise::synth_corpus(&spec)?;
            save_library(cli, &lib)?;
            let doc = json!({"domains": lib.lattice().len(), "crystals": lib.len(), "concepts": lib.concepts().len()});
            emit(cli, &doc, || {
                format!(
                    "domains: {}, crystals: {}, concepts: {}\n",
                    lib.lattice().len(),
                    lib.len(),
                    lib.concepts().len()
                )
            })?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn query(cli: &Cli, args: &QueryArgs) -> Result<ExitCode> {
    let lib = load_library(cli, false)?;
    let relation = args
        .relation
        .as_deref()
        .map(|r| lib.meta().relation(r))
        .transpose()?;
    let mut pattern = QueryPattern::new(args.subject.as_deref(), relation, args.object.as_deref());
    pattern.include_inherited = !args.local_only;
    if !pattern.is_valid() {
        bail!("query needs at least one of --subject, --relation, --object");
    }
    if let Some(d) = &args.domain {
        let answers: Vec<AnswerRecord> = inference::query(&pattern, d, &lib).iter().map(AnswerRecord::from).collect();
        let doc = json!({"domain": d, "answers": answers});
        emit(cli, &doc, || {
            answers
                .iter()
                .map(|a| format!("{} {} {} @{}\n", a.crystal.s, a.crystal.r, a.crystal.o, origin_text(&a.origin)))
                .collect()
        })?;
        return Ok(ExitCode::SUCCESS);
    }
    let activations: BTreeMap<DomainPath, f64> = match &args.activations {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => {
            let space = load_space(cli)?;
            let concepts: Vec<&str> = [args.subject.as_deref(), args.object.as_deref()]
                .into_iter()
                .flatten()
                .collect();
            let config = GenerationConfig {
                epsilon: 0.0,
                activation_source: source(args.activation_source, space.as_ref()),
                ..GenerationConfig::default()
            };
            decoder::activate_domains(&concepts, &lib, space.as_ref(), &config)?
        }
    };
    let response = inference::multi_perspective_query(&pattern, &lib, &activations, args.epsilon);
    emit(cli, &response, || {
        let mut s = String::new();
        for p in &response.perspectives {
            s += &format!("{} (weight {:.4})\n", p.domain, p.weight);
            for a in &p.answers {
                s += &format!("  {} {} {} [{}]\n", a.crystal.s, a.crystal.r, a.crystal.o, origin_text(&a.origin));
            }
        }
        s
    })?;
    Ok(ExitCode::SUCCESS)
}

fn origin_text(o: &inference::Origin) -> String {
    match o {
        inference::Origin::Local => "local".into(),
        inference::Origin::Inherited(d) => format!("from {d}"),
    }
}

fn generate(cli: &Cli, args: &GenerateArgs) -> Result<ExitCode> {
    let mut lib = load_library(cli, false)?;
    let space = load_space(cli)?;
    let config = GenerationConfig {
        epsilon: args.epsilon,
        theta_novel: args.theta_novel,
        vocabulary: match args.vocabulary {
            VocabArg::Closed => Vocabulary::Closed,
            VocabArg::Open => Vocabulary::Open,
        },
        output_mode: match args.mode {
            ModeArg::Crystal => OutputMode::Crystal,
            ModeArg::MultiPerspective => OutputMode::MultiPerspective,
            ModeArg::Verbalized => OutputMode::Verbalized,
        },
        max_concepts_per_pair: args.max_concepts_per_pair,
        seed: cli.seed,
        activation_source: source(args.activation_source, space.as_ref()),
        temperature: args.temperature,
    };
    let output = decoder::generate(&args.query, &lib, space.as_ref(), &config)?;
    if !args.submit {
        emit(cli, &output, || render(&output))?;
        return Ok(ExitCode::SUCCESS);
    }
    let submissions = decoder::submit_provisional(&output, &mut lib, Scope::Effective)?;
    save_library(cli, &lib)?;
    let rejected = submissions.iter().filter(|s| !s.report.is_accepted()).count();
    let doc = json!({"output": output, "submissions": submissions});
    emit(cli, &doc, || {
        let mut s = render(&output);
        for sub in &submissions {
            let c = &sub.crystal;
            let verdict = if sub.report.is_accepted() {
                "accepted".to_string()
            } else {
                format!("rejected reason={}", sub.report.reason)
            };
            s += &format!("submitted {} {} {} {}: {verdict}\n", c.s, c.r, c.o, c.d);
            if let Some(w) = &sub.warning {
                s += &format!("  warning: {w}\n");
            }
        }
        s
    })?;
    Ok(exit_for(rejected))
}

fn render(output: &decoder::GeneratedOutput) -> String {
    if let Some(text) = &output.rendered {
        return text.clone();
    }
    let mut s = String::new();
    for e in &output.entries {
        s += &format!("{} (weight {:.4})\n", e.domain, e.weight);
        for rg in &e.relations {
            for c in &rg.concepts {
                s += &format!("  {} {} {}  p={:.4} {:?}\n", e.subject, rg.relation, c.concept, c.probability, c.status);
            }
        }
    }
    let a = &output.audit;
    s += &format!(
        "audit: total={} out_of_fiber={} leakage={} provisional={}\n",
        a.total_concepts, a.out_of_fiber, a.leakage_rate, a.provisional_count
    );
    s
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<ExitCode> {
    let lib = load_library(cli, false)?;
    let out = args
        .out
        .as_ref()
        .or(cli.embeddings.as_ref())
        .context("train-embeddings needs --out or --embeddings")?;
    let geometry = match args.geometry {
        GeometryArg::Euclidean => Geometry::Euclidean,
        GeometryArg::Poincare => Geometry::Poincare,
    };
    let config = TrainConfig {
        learning_rate: args.learning_rate,
        epochs: args.epochs,
        margin: args.margin,
        negatives_per_positive: args.negatives_per_positive,
        batch_size: args.batch_size,
        seed: cli.seed,
        geometry,
        dim: args.dim.unwrap_or(geometry.default_dim()),
    };
    let (mut space, report) = embeddings::train_domain_embeddings(lib.lattice(), &config)?;
    let mut completion = None;
    if args.completion_epochs > 0 && !lib.is_empty() {
        let cc = CompletionConfig {
            learning_rate: args.completion_learning_rate,
            epochs: args.completion_epochs,
            temperature: 1.0,
            seed: cli.seed,
        };
        let (trained, rep) = embeddings::train_completion(&lib, &space, &cc)?;
        space = trained;
        completion = Some(rep);
    }
    fs::write(out, space.to_json()).with_context(|| format!("writing {}", out.display()))?;
    let doc = json!({"lattice": report, "completion": completion});
    emit(cli, &doc, || {
        let mut s = format!(
            "initial loss: {:.6}\nfinal loss: {:.6}\nconstraint satisfaction: {:.4}\n",
            report.initial_loss,
            report.epoch_losses.last().copied().unwrap_or(report.initial_loss),
            report.constraint_satisfaction
        );
        if let Some(c) = &completion {
            s += &format!("completion cross-entropy: {:.6}\n", c.final_loss);
        }
        s
    })?;
    Ok(ExitCode::SUCCESS)
}

fn simulate(cli: &Cli, args: &DenoiseArgs) -> Result<ExitCode> {
    let lib = load_library(cli, false)?;
    let space = load_space(cli)?;
    let config = ExperimentConfig {
        grid: args.grid.clone(),
        trials: args.trials,
        fields: args.fields.iter().copied().map(Field::from).collect(),
        seed: cli.seed,
    };
    let exec = if args.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let results = denoise::experiment(&lib, space.as_ref(), &config, exec)?;
    let mut csv = Vec::new();
    denoise::write_csv(&results, &mut csv)?;
    if let Some(p) = &args.out {
        fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(cli, &results, || String::from_utf8_lossy(&csv).into_owned())?;
    Ok(ExitCode::SUCCESS)
}
