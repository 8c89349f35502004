//! Automatic text generation for the five text families.
//!
//! Class-name texts come straight from templates. Attribute, analogous-class
//! and one-to-one texts come from LLM answers run through the list parser.
//! Synonym texts come from a [`SynonymProvider`]. The general text set is the
//! union of everything except the one-to-one texts.

pub mod encoder;
pub mod gateway;
pub mod parse;
pub mod synonyms;
pub mod templates;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_store::{EmbeddingBundle, Family, FeatureMatrix, TextRecord};
use crate::zeroshot::PairGenerator;

pub use encoder::{encode_names, ExporterCommand, TextEncoder};
pub use gateway::{CachedGateway, LlmExchange, LlmGateway, OpenAiChat, ResponseCache};
pub use synonyms::{NoSynonyms, SynonymProvider, TsvSynonyms, WordNetSynonyms};
pub use templates::{Fill, PromptTemplate, TemplateSet};

pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.85;
pub const DEFAULT_ATTRIBUTE_COUNT: usize = 10;
pub const DEFAULT_ANALOGOUS_COUNT: usize = 5;
pub const DEFAULT_SYNONYM_COUNT: usize = 5;
pub const ONE_TO_ONE_CAP: usize = 10;

pub const ANALOGOUS_PROMPT: &str = "Q: What other categories are {class} visually similar to?\nAnswer with up to {n} category names as a numbered list.";
pub const ATTRIBUTE_PROMPT: &str = "Q: What are useful features for distinguishing a {class} in a photo?\nA: There are several useful visual features to tell there is a {class} in a photo:\n-";
pub const ONE_TO_ONE_PROMPT: &str = "Q: What are different visual features between a {class 1} and a {class 2} in a photo? Focus on their key differences.\nAnswer with two bulleted lists, one under the heading \"{class 1}:\" and one under the heading \"{class 2}:\".";

#[derive(Debug, Error)]
pub enum AtgError {
    #[error("no class names given")]
    EmptyInput,
    #[error("class name at index {0} is empty")]
    EmptyClassName(usize),
    #[error("cannot compare class {0:?} with itself")]
    IdenticalClasses(String),
    #[error("invalid text-set spec: {0}")]
    InvalidSpec(String),
    #[error("LLM gateway error: {0}")]
    Gateway(String),
    #[error("offline mode and no cached response for prompt {prompt:?}")]
    OfflineMiss { prompt: String },
    #[error("could not parse LLM response ({reason}): {raw:?}")]
    Parse { raw: String, reason: String },
    #[error("template error: {0}")]
    Template(String),
    #[error("synonym provider error: {0}")]
    Synonyms(String),
    #[error("text encoder error: {0}")]
    Encoder(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("{expected} features for {given} names")]
    CountMismatch { expected: usize, given: usize },
    #[error("class id {0} out of range")]
    ClassOutOfRange(u32),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AtgError> = std::result::Result<T, E>;

fn fill_prompt(pattern: &str, pairs: &[(&str, &str)]) -> String {
    pairs
        .iter()
        .fold(pattern.to_string(), |s, (k, v)| s.replace(&format!("{{{k}}}"), v))
}

pub fn analogous_prompt(class_name: &str, n: usize) -> String {
    fill_prompt(ANALOGOUS_PROMPT, &[("class", class_name), ("n", &n.to_string())])
}

pub fn attribute_prompt(class_name: &str) -> String {
    fill_prompt(ATTRIBUTE_PROMPT, &[("class", class_name)])
}

pub fn one_to_one_prompt(class_1: &str, class_2: &str) -> String {
    fill_prompt(ONE_TO_ONE_PROMPT, &[("class 1", class_1), ("class 2", class_2)])
}

/// What to generate for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSetSpec {
    pub class_names: Vec<String>,
    pub families_enabled: BTreeSet<Family>,
    pub per_family_counts: BTreeMap<Family, usize>,
    pub similarity_threshold: f64,
}

impl TextSetSpec {
    /// All general families with the default counts.
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            class_names,
            families_enabled: [
                Family::ClassName,
                Family::Attribute,
                Family::AnalogousClass,
                Family::Synonym,
            ]
            .into_iter()
            .collect(),
            per_family_counts: [
                (Family::Attribute, DEFAULT_ATTRIBUTE_COUNT),
                (Family::AnalogousClass, DEFAULT_ANALOGOUS_COUNT),
                (Family::Synonym, DEFAULT_SYNONYM_COUNT),
            ]
            .into_iter()
            .collect(),
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
        }
    }

    pub fn only(class_names: Vec<String>, families: &[Family]) -> Self {
        Self {
            families_enabled: families.iter().copied().collect(),
            ..Self::new(class_names)
        }
    }

    pub fn count(&self, family: Family) -> usize {
        self.per_family_counts.get(&family).copied().unwrap_or(match family {
            Family::Attribute => DEFAULT_ATTRIBUTE_COUNT,
            Family::AnalogousClass => DEFAULT_ANALOGOUS_COUNT,
            Family::Synonym => DEFAULT_SYNONYM_COUNT,
            _ => usize::MAX,
        })
    }

    pub fn enabled(&self, family: Family) -> bool {
        self.families_enabled.contains(&family)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(AtgError::EmptyInput);
        }
        if let Some(i) = self.class_names.iter().position(|c| c.trim().is_empty()) {
            return Err(AtgError::EmptyClassName(i));
        }
        if !self.enabled(Family::ClassName) {
            return Err(AtgError::InvalidSpec("class-name texts must be enabled".into()));
        }
        if self.enabled(Family::OneToOne) {
            return Err(AtgError::InvalidSpec(
                "one-to-one texts are generated per pair, not in the general set".into(),
            ));
        }
        for f in &self.families_enabled {
            if *f != Family::ClassName && self.count(*f) == 0 {
                return Err(AtgError::InvalidSpec(format!("count for {f} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(AtgError::InvalidSpec(format!(
                "similarity threshold {} not in [0, 1]",
                self.similarity_threshold
            )));
        }
        Ok(())
    }
}

/// Text-set JSON file: class names plus records, no features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSetFile {
    pub class_names: Vec<String>,
    pub records: Vec<TextRecord>,
}

impl TextSetFile {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn record(text: String, family: Family, class_id: u32, pair: Option<u32>, template_id: &str) -> TextRecord {
    TextRecord {
        id: 0,
        text,
        family,
        class_id,
        pair_class_id: pair,
        template_id: template_id.to_string(),
    }
}

/// Assigns ids `0..n` in list order.
fn number(mut records: Vec<TextRecord>) -> Vec<TextRecord> {
    for (i, r) in records.iter_mut().enumerate() {
        r.id = i as u64;
    }
    records
}

fn check_name(class_name: &str) -> Result<()> {
    if class_name.trim().is_empty() {
        Err(AtgError::EmptyClassName(0))
    } else {
        Ok(())
    }
}

/// One record per class per class-name template.
pub fn build_class_name_texts(spec: &TextSetSpec, templates: &TemplateSet) -> Result<Vec<TextRecord>> {
    if spec.class_names.is_empty() {
        return Err(AtgError::EmptyInput);
    }
    let mut out = Vec::new();
    for (c, name) in spec.class_names.iter().enumerate() {
        if name.trim().is_empty() {
            return Err(AtgError::EmptyClassName(c));
        }
        for t in templates.for_family(Family::ClassName) {
            let text = t.render(&Fill {
                class: Some(name),
                ..Default::default()
            })?;
            out.push(record(text, Family::ClassName, c as u32, None, &t.template_id));
        }
    }
    Ok(number(out))
}

/// Asks for visually similar categories; returns lowercased, deduplicated names.
pub fn query_analogous_classes(class_name: &str, gateway: &dyn LlmGateway, max: usize) -> Result<Vec<String>> {
    check_name(class_name)?;
    let ex = gateway.query(&analogous_prompt(class_name, max))?;
    let mut names = parse::parse_class_names(&ex.response)?;
    names.truncate(max);
    Ok(names)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut d, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        d += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na.sqrt() * nb.sqrt())
    }
}

/// Drops candidates that name an existing class: exact (case-insensitive)
/// string matches, and any whose feature has cosine `>= threshold` with some
/// dataset class-name feature. `name_features` holds one row per candidate
/// followed by one row per dataset class.
pub fn filter_analogous(
    candidates: &[String],
    dataset_class_names: &[String],
    name_features: &FeatureMatrix,
    threshold: f64,
) -> Result<Vec<String>> {
    let expected = candidates.len() + dataset_class_names.len();
    if name_features.rows() != expected {
        return Err(AtgError::CountMismatch {
            expected: name_features.rows(),
            given: expected,
        });
    }
    let existing: HashSet<String> = dataset_class_names.iter().map(|c| c.trim().to_lowercase()).collect();
    let base = candidates.len();
    Ok(candidates
        .iter()
        .enumerate()
        .filter(|(i, cand)| {
            if existing.contains(&cand.trim().to_lowercase()) {
                return false;
            }
            let f = name_features.row(*i);
            (0..dataset_class_names.len()).all(|j| cosine(f, name_features.row(base + j)) < threshold)
        })
        .map(|(_, c)| c.clone())
        .collect())
}

/// String-only filter used when no text encoder is available.
pub fn filter_analogous_by_name(candidates: &[String], dataset_class_names: &[String]) -> Vec<String> {
    let existing: HashSet<String> = dataset_class_names.iter().map(|c| c.trim().to_lowercase()).collect();
    candidates
        .iter()
        .filter(|c| !existing.contains(&c.trim().to_lowercase()))
        .cloned()
        .collect()
}

pub fn build_analogous_texts(
    class_id: u32,
    class_name: &str,
    kept: &[String],
    templates: &TemplateSet,
) -> Result<Vec<TextRecord>> {
    let mut out = Vec::new();
    for ana in kept {
        for t in templates.for_family(Family::AnalogousClass) {
            let text = t.render(&Fill {
                class: Some(class_name),
                analogous: Some(ana),
                ..Default::default()
            })?;
            out.push(record(text, Family::AnalogousClass, class_id, None, &t.template_id));
        }
    }
    Ok(number(out))
}

pub fn build_synonym_texts(
    class_id: u32,
    class_name: &str,
    synonyms: &dyn SynonymProvider,
    templates: &TemplateSet,
    max: usize,
) -> Result<Vec<TextRecord>> {
    check_name(class_name)?;
    let mut out = Vec::new();
    for syn in synonyms.synonyms(class_name)?.iter().take(max) {
        for t in templates.for_family(Family::Synonym) {
            let text = t.render(&Fill {
                synonym: Some(syn),
                ..Default::default()
            })?;
            out.push(record(text, Family::Synonym, class_id, None, &t.template_id));
        }
    }
    Ok(number(out))
}

pub fn build_attribute_texts(
    class_id: u32,
    class_name: &str,
    gateway: &dyn LlmGateway,
    templates: &TemplateSet,
    max: usize,
) -> Result<Vec<TextRecord>> {
    check_name(class_name)?;
    let ex = gateway.query(&attribute_prompt(class_name))?;
    let mut attrs = parse::parse_continued_list(&ex.response)?;
    attrs.truncate(max);
    let mut out = Vec::new();
    for a in &attrs {
        for t in templates.for_family(Family::Attribute) {
            let text = t.render(&Fill {
                class: Some(class_name),
                attribute: Some(a),
                ..Default::default()
            })?;
            out.push(record(text, Family::Attribute, class_id, None, &t.template_id));
        }
    }
    Ok(number(out))
}

/// Raw distinguishing texts for an unordered class pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredPair {
    pub class_1: String,
    pub class_2: String,
    pub texts_1: Vec<String>,
    pub texts_2: Vec<String>,
    pub model_tag: String,
}

/// Append-only JSON-lines store of one-to-one answers keyed by unordered pair.
pub struct OneToOneStore {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<(String, String), StoredPair>>,
    writer: Mutex<Option<File>>,
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    let (a, b) = (a.trim().to_lowercase(), b.trim().to_lowercase());
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl OneToOneStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: Mutex::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let p: StoredPair = serde_json::from_str(&line)
                    .map_err(|e| AtgError::Cache(format!("{}:{}: {e}", path.display(), n + 1)))?;
                entries.entry(pair_key(&p.class_1, &p.class_2)).or_insert(p);
            }
        }
        Ok(Self {
            path: Some(path),
            entries: Mutex::new(entries),
            writer: Mutex::new(None),
        })
    }

    /// Texts for `(a, b)` oriented so the first list describes `a`.
    pub fn get(&self, a: &str, b: &str) -> Option<(Vec<String>, Vec<String>)> {
        let entries = self.entries.lock().unwrap();
        let p = entries.get(&pair_key(a, b))?;
        if p.class_1.trim().eq_ignore_ascii_case(a.trim()) {
            Some((p.texts_1.clone(), p.texts_2.clone()))
        } else {
            Some((p.texts_2.clone(), p.texts_1.clone()))
        }
    }

    pub fn insert(&self, pair: StoredPair) -> Result<()> {
        let key = pair_key(&pair.class_1, &pair.class_2);
        let mut writer = self.writer.lock().unwrap();
        let mut entries = self.entries.lock().unwrap();
        if entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(path) = &self.path {
            if writer.is_none() {
                *writer = Some(OpenOptions::new().create(true).append(true).open(path)?);
            }
            let mut line = serde_json::to_vec(&pair)?;
            line.push(b'\n');
            let f = writer.as_mut().unwrap();
            f.write_all(&line)?;
            f.flush()?;
        }
        entries.insert(key, pair);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One-to-one records for both sides of a pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneToOneTexts {
    pub side_a: Vec<TextRecord>,
    pub side_b: Vec<TextRecord>,
    /// True when the answer came from the one-to-one store.
    pub retrieved_from_cache: bool,
}

impl OneToOneTexts {
    /// Both sides with ids `0..n`, side a first.
    pub fn into_records(self) -> Vec<TextRecord> {
        number(self.side_a.into_iter().chain(self.side_b).collect())
    }
}

fn side_records(
    texts: &[String],
    described: (u32, &str),
    other: (u32, &str),
    templates: &TemplateSet,
) -> Result<Vec<TextRecord>> {
    let mut out = Vec::new();
    for text in texts.iter().take(ONE_TO_ONE_CAP) {
        for t in templates.for_family(Family::OneToOne) {
            let rendered = t.render(&Fill {
                one_to_one: Some(text),
                class_1: Some(described.1),
                class_2: Some(other.1),
                ..Default::default()
            })?;
            out.push(record(rendered, Family::OneToOne, described.0, Some(other.0), &t.template_id));
        }
    }
    Ok(out)
}

/// Distinguishing texts for classes `a` and `b`, generated once per unordered
/// pair and then served from `store`.
pub fn build_one_to_one_texts(
    class_names: &[String],
    a: u32,
    b: u32,
    gateway: &dyn LlmGateway,
    store: &OneToOneStore,
    templates: &TemplateSet,
) -> Result<OneToOneTexts> {
    let name = |c: u32| {
        class_names
            .get(c as usize)
            .map(String::as_str)
            .ok_or(AtgError::ClassOutOfRange(c))
    };
    let (name_a, name_b) = (name(a)?, name(b)?);
    check_name(name_a)?;
    check_name(name_b)?;
    if a == b || name_a.trim().eq_ignore_ascii_case(name_b.trim()) {
        return Err(AtgError::IdenticalClasses(name_a.to_string()));
    }
    let (texts_a, texts_b, cached) = match store.get(name_a, name_b) {
        Some((ta, tb)) => (ta, tb, true),
        None => {
            let ex = gateway.query(&one_to_one_prompt(name_a, name_b))?;
            let (mut ta, mut tb) = parse::parse_one_to_one(&ex.response, name_a, name_b)?;
            ta.truncate(ONE_TO_ONE_CAP);
            tb.truncate(ONE_TO_ONE_CAP);
            store.insert(StoredPair {
                class_1: name_a.to_string(),
                class_2: name_b.to_string(),
                texts_1: ta.clone(),
                texts_2: tb.clone(),
                model_tag: gateway.model_tag().to_string(),
            })?;
            (ta, tb, false)
        }
    };
    Ok(OneToOneTexts {
        side_a: side_records(&texts_a, (a, name_a), (b, name_b), templates)?,
        side_b: side_records(&texts_b, (b, name_b), (a, name_a), templates)?,
        retrieved_from_cache: cached,
    })
}

/// Result of general text-set assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTextSet {
    pub class_names: Vec<String>,
    pub records: Vec<TextRecord>,
    /// Families that failed for some class, ambiguous names, and similar.
    pub warnings: Vec<String>,
}

impl GeneratedTextSet {
    pub fn to_file(&self) -> TextSetFile {
        TextSetFile {
            class_names: self.class_names.clone(),
            records: self.records.clone(),
        }
    }
}

/// Everything the assembler needs besides the spec.
pub struct GenerationContext<'a> {
    pub gateway: &'a dyn LlmGateway,
    pub synonyms: &'a dyn SynonymProvider,
    pub templates: &'a TemplateSet,
    /// Used to embed analogous candidates for similarity filtering. Without
    /// it only exact-name matches are filtered.
    pub encoder: Option<&'a dyn TextEncoder>,
    pub max_in_flight: usize,
}

struct ClassOutput {
    records: Vec<TextRecord>,
    warnings: Vec<String>,
}

fn generate_for_class(
    spec: &TextSetSpec,
    ctx: &GenerationContext<'_>,
    class_id: u32,
) -> Result<ClassOutput> {
    let name = &spec.class_names[class_id as usize];
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let soft = |family: Family, r: Result<Vec<TextRecord>>, records: &mut Vec<TextRecord>, warnings: &mut Vec<String>| match r {
        Ok(mut v) => records.append(&mut v),
        Err(e) => {
            let msg = format!("class {class_id} ({name}): {family} texts skipped: {e}");
            tracing::warn!("{msg}");
            warnings.push(msg);
        }
    };

    if spec.enabled(Family::Attribute) {
        let r = build_attribute_texts(class_id, name, ctx.gateway, ctx.templates, spec.count(Family::Attribute));
        soft(Family::Attribute, r, &mut records, &mut warnings);
    }
    if spec.enabled(Family::AnalogousClass) {
        let r = query_analogous_classes(name, ctx.gateway, spec.count(Family::AnalogousClass))
            .and_then(|cands| {
                let kept = match ctx.encoder {
                    Some(enc) => {
                        let names: Vec<String> =
                            cands.iter().chain(&spec.class_names).cloned().collect();
                        let feats = encode_names(enc, &names)?;
                        filter_analogous(&cands, &spec.class_names, &feats, spec.similarity_threshold)?
                    }
                    None => filter_analogous_by_name(&cands, &spec.class_names),
                };
                build_analogous_texts(class_id, name, &kept, ctx.templates)
            });
        soft(Family::AnalogousClass, r, &mut records, &mut warnings);
    }
    if spec.enabled(Family::Synonym) {
        match ctx.synonyms.senses(name) {
            Ok(senses) if senses.len() > 1 => {
                let msg = format!(
                    "class {class_id} ({name}) has {} senses; consider a more specific class name",
                    senses.len()
                );
                tracing::warn!("{msg}");
                warnings.push(msg);
            }
            _ => {}
        }
        let r = build_synonym_texts(class_id, name, ctx.synonyms, ctx.templates, spec.count(Family::Synonym));
        soft(Family::Synonym, r, &mut records, &mut warnings);
    }
    Ok(ClassOutput { records, warnings })
}

/// Builds the general text set: class-name, attribute, analogous and synonym
/// texts for every class. Texts repeated within a class are kept once, the
/// earliest family winning. Output is in canonical `(class_id, family)` order
/// with ids `0..n`.
pub fn assemble_general_text_set(spec: &TextSetSpec, ctx: &GenerationContext<'_>) -> Result<GeneratedTextSet> {
    spec.validate()?;
    let class_names = build_class_name_texts(spec, ctx.templates)?;
    let needs_llm = spec.enabled(Family::Attribute) || spec.enabled(Family::AnalogousClass);
    if !needs_llm && !spec.enabled(Family::Synonym) {
        return Ok(GeneratedTextSet {
            class_names: spec.class_names.clone(),
            records: number(class_names),
            warnings: Vec::new(),
        });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.max_in_flight.max(1))
        .build()
        .map_err(|e| AtgError::Gateway(e.to_string()))?;
    let per_class: Vec<ClassOutput> = pool.install(|| {
        (0..spec.class_names.len() as u32)
            .into_par_iter()
            .map(|c| generate_for_class(spec, ctx, c))
            .collect::<Result<_>>()
    })?;

    let mut all = class_names;
    let mut warnings = Vec::new();
    for out in per_class {
        all.extend(out.records);
        warnings.extend(out.warnings);
    }
    // stable: keeps generation order inside each (class, family) group
    all.sort_by_key(|r| (r.class_id, r.family));
    let mut seen = HashSet::new();
    all.retain(|r| seen.insert((r.class_id, r.text.clone())));
    Ok(GeneratedTextSet {
        class_names: spec.class_names.clone(),
        records: number(all),
        warnings,
    })
}

/// Generates and encodes one-to-one pair bundles on demand for the zero-shot
/// pair store.
pub struct OneToOnePairGenerator {
    pub class_names: Vec<String>,
    pub gateway: Arc<dyn LlmGateway>,
    pub store: Arc<OneToOneStore>,
    pub templates: TemplateSet,
    pub encoder: Arc<dyn TextEncoder>,
}

impl PairGenerator for OneToOnePairGenerator {
    fn generate(&self, a: u32, b: u32) -> std::result::Result<EmbeddingBundle, String> {
        let texts = build_one_to_one_texts(
            &self.class_names,
            a,
            b,
            self.gateway.as_ref(),
            &self.store,
            &self.templates,
        )
        .map_err(|e| e.to_string())?;
        let records = texts.into_records();
        let mut bundle = self
            .encoder
            .encode(&records, &self.class_names)
            .map_err(|e| e.to_string())?;
        if bundle.encoder_tag != self.encoder.encoder_tag() {
            bundle.encoder_tag = self.encoder.encoder_tag().to_string();
        }
        Ok(bundle)
    }
}
