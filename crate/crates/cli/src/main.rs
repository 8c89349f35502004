use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use coder_core::atg::{
    self, CachedGateway, ExporterCommand, GenerationContext, LlmGateway, NoSynonyms, OneToOnePairGenerator,
    OneToOneStore, OpenAiChat, ResponseCache, SynonymProvider, TemplateSet, TextSetSpec, TsvSynonyms,
    WordNetSynonyms,
};
use coder_core::eval::{self, EvalError, RunManifest};
use coder_core::fewshot::{self, AdapterParams, CoderOptions, NormMode, ParamGrid, SupportCache};
use coder_core::zeroshot::{DirPairStore, PairStore, RerankConfig, ZeroShotClassifier};
use coder_core::{read_bundle, Family};

#[derive(Parser)]
#[command(name = "coder", version, about = "Cross-modal neighbor representations for training-free classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the general text set for a list of class names.
    Atg(AtgArgs),
    /// Two-stage zero-shot classification.
    Zeroshot(ZeroShotArgs),
    /// Few-shot adapter classification.
    Fewshot(FewShotArgs),
    /// Run a manifest and write an accuracy report.
    Eval(EvalArgs),
}

#[derive(Args)]
struct LlmArgs {
    /// Chat-completions URL of an OpenAI-compatible server.
    #[arg(long)]
    llm_endpoint: Option<String>,
    #[arg(long, default_value = "gpt-3.5-turbo")]
    llm_model: String,
    /// Response cache (JSON lines).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Answer only from the cache; a miss is an error.
    #[arg(long)]
    offline: bool,
    #[arg(long, default_value_t = atg::gateway::DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = atg::gateway::DEFAULT_MAX_IN_FLIGHT)]
    max_in_flight: usize,
    /// Template file (JSON); built-in templates when absent.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Text exporter command, run as `<cmd> --texts <json> --out <bundle>`.
    #[arg(long)]
    exporter_cmd: Option<String>,
}

impl LlmArgs {
    fn gateway(&self) -> Result<CachedGateway> {
        let cache = match &self.cache {
            Some(p) => ResponseCache::open(p).with_context(|| format!("opening cache {}", p.display()))?,
            None => ResponseCache::in_memory(),
        };
        if self.offline {
            return Ok(CachedGateway::offline(&self.llm_model, cache));
        }
        let Some(endpoint) = &self.llm_endpoint else {
            bail!("--llm-endpoint is required unless --offline is given");
        };
        let mut chat = OpenAiChat::new(endpoint)?;
        chat.temperature = self.temperature;
        Ok(CachedGateway::new(&self.llm_model, Box::new(chat), cache).with_max_in_flight(self.max_in_flight))
    }

    fn templates(&self) -> Result<TemplateSet> {
        Ok(match &self.templates {
            Some(p) => TemplateSet::load(p).with_context(|| format!("loading templates {}", p.display()))?,
            None => TemplateSet::default(),
        })
    }
}

#[derive(Args)]
struct AtgArgs {
    /// Class names, one per line.
    #[arg(long)]
    classes: PathBuf,
    /// Comma-separated families: p, att, ana, syn.
    #[arg(long, default_value = "p,att,ana,syn")]
    families: String,
    #[arg(long, default_value_t = atg::DEFAULT_ATTRIBUTE_COUNT)]
    attributes: usize,
    #[arg(long, default_value_t = atg::DEFAULT_ANALOGOUS_COUNT)]
    analogous: usize,
    #[arg(long, default_value_t = atg::DEFAULT_SYNONYM_COUNT)]
    synonym_count: usize,
    /// Analogous classes this similar to a dataset class are dropped.
    #[arg(long, default_value_t = atg::DEFAULT_SIMILARITY_THRESHOLD)]
    similarity_threshold: f64,
    /// TSV synonym file or a WordNet `dict/` directory.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    #[arg(long, default_value = "unknown")]
    encoder_tag: String,
    #[command(flatten)]
    llm: LlmArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ZeroShotArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    texts: PathBuf,
    /// One-to-one pair bundles; stage 1 only when absent.
    #[arg(long)]
    pairs_dir: Option<PathBuf>,
    #[arg(long, default_value_t = coder_core::zeroshot::DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = coder_core::zeroshot::DEFAULT_GATE_MARGIN)]
    gate_margin: f64,
    /// Rerank every image regardless of the stage-1 margin.
    #[arg(long)]
    always_rerank: bool,
    /// Class-pair texts as JSON lines, reused across runs.
    #[arg(long)]
    pair_texts: Option<PathBuf>,
    #[command(flatten)]
    llm: LlmArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FewShotArgs {
    #[arg(long)]
    support: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    texts: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 5.5)]
    beta: f64,
    #[arg(long = "T", default_value_t = 3.0)]
    temperature: f64,
    #[arg(long, default_value = "minmax")]
    norm: NormMode,
    /// Parameter grid (JSON); needs `--val`.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Labeled validation images for the grid search.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    normalize_image_features: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Family subsets separated by `;`, e.g. `p;p,att;p,att,ana`. Writes one
    /// report per subset.
    #[arg(long)]
    ablate: Option<String>,
    /// Leave wall time out so reports compare byte for byte.
    #[arg(long)]
    canonical: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_families(s: &str) -> Result<Vec<Family>> {
    s.split(',')
        .filter(|f| !f.trim().is_empty())
        .map(|f| Family::parse(f).with_context(|| format!("unknown family {f:?}")))
        .collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn synonym_provider(path: Option<&Path>) -> Result<Box<dyn SynonymProvider>> {
    Ok(match path {
        None => Box::new(NoSynonyms),
        Some(p) if p.is_dir() => Box::new(WordNetSynonyms::open(p)?),
        Some(p) => Box::new(TsvSynonyms::load(p)?),
    })
}

fn run_atg(args: AtgArgs) -> Result<()> {
    let classes: Vec<String> = std::fs::read_to_string(&args.classes)
        .with_context(|| format!("reading {}", args.classes.display()))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let mut spec = TextSetSpec::only(classes, &parse_families(&args.families)?);
    spec.per_family_counts.insert(Family::Attribute, args.attributes);
    spec.per_family_counts.insert(Family::AnalogousClass, args.analogous);
    spec.per_family_counts.insert(Family::Synonym, args.synonym_count);
    spec.similarity_threshold = args.similarity_threshold;

    let gateway = args.llm.gateway()?;
    let synonyms = synonym_provider(args.synonyms.as_deref())?;
    let templates = args.llm.templates()?;
    let encoder = match &args.llm.exporter_cmd {
        Some(cmd) => Some(ExporterCommand::from_command_line(cmd, &args.encoder_tag)?),
        None => None,
    };
    let ctx = GenerationContext {
        gateway: &gateway,
        synonyms: synonyms.as_ref(),
        templates: &templates,
        encoder: encoder.as_ref().map(|e| e as &dyn atg::TextEncoder),
        max_in_flight: args.llm.max_in_flight,
    };
    let set = atg::assemble_general_text_set(&spec, &ctx)?;
    for w in &set.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::write(&args.out, set.to_file().to_json()?).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("{} texts for {} classes", set.records.len(), set.class_names.len());
    Ok(())
}

fn run_zeroshot(args: ZeroShotArgs) -> Result<()> {
    let images = read_bundle(&args.images).with_context(|| format!("reading {}", args.images.display()))?;
    let texts = read_bundle(&args.texts).with_context(|| format!("reading {}", args.texts.display()))?;
    let ids: Vec<u64> = images
        .image_records()
        .context("--images is not an image bundle")?
        .iter()
        .map(|r| r.id)
        .collect();
    let classifier = ZeroShotClassifier::from_bundle(&texts)?;
    let cfg = RerankConfig {
        top_k: args.top_k,
        gate_margin: args.gate_margin,
        gating: !args.always_rerank,
    };

    let store: Option<DirPairStore> = match &args.pairs_dir {
        None => None,
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(match &args.llm.exporter_cmd {
                None => DirPairStore::offline(dir, &texts.encoder_tag),
                Some(cmd) => {
                    let gateway: Arc<dyn LlmGateway> = Arc::new(args.llm.gateway()?);
                    let pair_store = match &args.pair_texts {
                        Some(p) => OneToOneStore::open(p)?,
                        None => OneToOneStore::in_memory(),
                    };
                    let generator = OneToOnePairGenerator {
                        class_names: texts.class_names.clone(),
                        gateway,
                        store: Arc::new(pair_store),
                        templates: args.llm.templates()?,
                        encoder: Arc::new(ExporterCommand::from_command_line(cmd, &texts.encoder_tag)?),
                    };
                    DirPairStore::with_generator(dir, &texts.encoder_tag, Box::new(generator))
                }
            })
        }
    };
    let predictions = classifier.predict(
        &images.features,
        &ids,
        store.as_ref().map(|s| s as &dyn PairStore),
        &cfg,
    )?;
    let by_id: BTreeMap<String, _> = ids
        .iter()
        .zip(predictions)
        .map(|(id, p)| (id.to_string(), p))
        .collect();
    write_json(&args.out, &serde_json::to_value(by_id)?)
}

fn run_fewshot(args: FewShotArgs) -> Result<()> {
    let support = read_bundle(&args.support).with_context(|| format!("reading {}", args.support.display()))?;
    let images = read_bundle(&args.images).with_context(|| format!("reading {}", args.images.display()))?;
    let texts = read_bundle(&args.texts).with_context(|| format!("reading {}", args.texts.display()))?;
    let ids: Vec<u64> = images
        .image_records()
        .context("--images is not an image bundle")?
        .iter()
        .map(|r| r.id)
        .collect();
    let opts = CoderOptions {
        normalize_image_features: args.normalize_image_features,
    };
    let cache = SupportCache::build(&support, &texts, opts)?;

    let (params, grid_scores) = match &args.grid {
        None => {
            let p = AdapterParams {
                alpha: args.alpha,
                beta: args.beta,
                temperature: args.temperature,
                norm: args.norm,
            };
            p.validate()?;
            (p, None)
        }
        Some(grid_path) => {
            let Some(val_path) = &args.val else {
                bail!("--grid needs --val");
            };
            let grid: ParamGrid = serde_json::from_str(&std::fs::read_to_string(grid_path)?)
                .with_context(|| format!("parsing grid {}", grid_path.display()))?;
            let val = read_bundle(val_path).with_context(|| format!("reading {}", val_path.display()))?;
            let labels = val
                .image_records()
                .context("--val is not an image bundle")?
                .iter()
                .map(|r| r.label_class_id.with_context(|| format!("validation image {} has no label", r.id)))
                .collect::<Result<Vec<_>>>()?;
            let r = fewshot::grid_search(
                &grid.points(),
                &cache.test_coder(&val.features)?,
                &labels,
                &fewshot::class_name_logits(&val.features, &texts)?,
                &cache,
            )?;
            eprintln!("grid search: validation accuracy {:.4}", r.accuracy);
            (r.best, Some(r.scores))
        }
    };

    let zs = fewshot::class_name_logits(&images.features, &texts)?;
    let predicted = fewshot::predict(&zs, &cache.test_coder(&images.features)?, &cache, &params)?;
    let by_id: BTreeMap<String, usize> = ids.iter().map(|id| id.to_string()).zip(predicted).collect();
    write_json(
        &args.out,
        &json!({
            "params": params,
            "grid_scores": grid_scores,
            "predictions": by_id,
        }),
    )
}

fn run_eval(args: EvalArgs) -> Result<(), EvalError> {
    let manifest = RunManifest::load(&args.manifest)?;
    let render = |r: &eval::Report| if args.canonical { r.to_canonical_json() } else { r.to_json() };
    let body = match &args.ablate {
        None => render(&eval::evaluate(&manifest)?),
        Some(spec) => {
            let sets = spec
                .split(';')
                .map(parse_families)
                .collect::<Result<Vec<_>>>()
                .map_err(|e| EvalError::Manifest(e.to_string()))?;
            let reports = eval::ablation_sweep(&manifest, &sets)?;
            let items: Vec<String> = reports.iter().map(|r| render(r).trim_end().to_string()).collect();
            format!("[\n{}\n]\n", items.join(",\n"))
        }
    };
    std::fs::write(&args.out, body)
        .map_err(|e| EvalError::Pipeline(format!("writing {}: {e}", args.out.display())))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let result = match cli.command {
        Command::Atg(a) => run_atg(a),
        Command::Zeroshot(a) => run_zeroshot(a),
        Command::Fewshot(a) => run_fewshot(a),
        Command::Eval(a) => {
            return match run_eval(a) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
