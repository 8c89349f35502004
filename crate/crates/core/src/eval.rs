//! Run manifests, accuracy reports and text-family ablations.
//!
//! A [`RunManifest`] names the bundles and the full configuration of one run.
//! [`evaluate`] turns it into a [`Report`]; [`ablation_sweep`] produces one
//! report per enabled-family subset from a single CODER computation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::coder::{self, build_coder, project_raw, ClassPartition, ClassScores, CoderMatrix, PsiMapping};
use crate::embedding_store::{read_bundle, EmbeddingBundle, Family, FeatureMatrix, TextRecord};
use crate::fewshot::{self, AdapterParams, ParamGrid, SupportCache};
use crate::zeroshot::{self, DirPairStore, PairStore, RerankConfig};

/// Families of the general text set, in canonical order.
pub const GENERAL_FAMILIES: [Family; 4] = [
    Family::ClassName,
    Family::Attribute,
    Family::AnalogousClass,
    Family::Synonym,
];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("image {image}: {message}")]
    Image { image: u64, message: String },
    #[error("pipeline error: {0}")]
    Pipeline(String),
}

impl EvalError {
    /// Process exit code for the `eval` command.
    pub fn exit_code(&self) -> i32 {
        match self {
            EvalError::Manifest(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn pipeline<E: std::fmt::Display>(e: E) -> EvalError {
    EvalError::Pipeline(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Zeroshot,
    ZeroshotRerank,
    Fewshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotConfig {
    pub support_bundle: PathBuf,
    #[serde(default)]
    pub params: AdapterParams,
    /// When set, parameters are chosen on `val_bundle` and `params` is ignored.
    #[serde(default)]
    pub grid: Option<ParamGrid>,
    #[serde(default)]
    pub val_bundle: Option<PathBuf>,
    #[serde(default)]
    pub normalize_image_features: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// General-text families to use; all four when absent.
    #[serde(default)]
    pub families: Option<Vec<Family>>,
    #[serde(default)]
    pub rerank: RerankConfig,
    /// Directory of one-to-one pair bundles, read offline.
    #[serde(default)]
    pub pairs_dir: Option<PathBuf>,
    #[serde(default)]
    pub fewshot: Option<FewShotConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub dataset_tag: String,
    pub image_bundle: PathBuf,
    pub text_bundle: PathBuf,
    pub mode: Mode,
    #[serde(default)]
    pub config: RunConfig,
    #[serde(default)]
    pub seed: u64,
    /// Directory relative paths resolve against; set by [`RunManifest::load`].
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl RunManifest {
    /// Reads a manifest; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvalError::Manifest(format!("{}: {e}", path.display())))?;
        let mut m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| EvalError::Manifest(format!("{}: {e}", path.display())))?;
        m.base_dir = Some(path.parent().unwrap_or(Path::new(".")).to_path_buf());
        m.validate()?;
        Ok(m)
    }

    /// `p` resolved against the manifest's directory.
    pub fn path(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Checks referenced files exist and the config fits the mode.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EvalError::Manifest(m));
        let exists = |p: &Path, what: &str| {
            let p = &self.path(p);
            if p.exists() {
                Ok(())
            } else {
                Err(EvalError::Manifest(format!("{what} {} does not exist", p.display())))
            }
        };
        exists(&self.image_bundle, "image bundle")?;
        exists(&self.text_bundle, "text bundle")?;
        if let Some(fams) = &self.config.families {
            validate_families(fams).map_err(|e| EvalError::Manifest(e.to_string()))?;
        }
        match self.mode {
            Mode::Zeroshot => {}
            Mode::ZeroshotRerank => {
                self.config
                    .rerank
                    .validate()
                    .map_err(|e| EvalError::Manifest(e.to_string()))?;
                match &self.config.pairs_dir {
                    Some(d) => exists(d, "pairs directory")?,
                    None => return bad("mode zeroshot_rerank needs config.pairs_dir".into()),
                }
            }
            Mode::Fewshot => {
                let Some(fs) = &self.config.fewshot else {
                    return bad("mode fewshot needs config.fewshot".into());
                };
                exists(&fs.support_bundle, "support bundle")?;
                fs.params
                    .validate()
                    .map_err(|e| EvalError::Manifest(e.to_string()))?;
                if let Some(grid) = &fs.grid {
                    if grid.points().is_empty() {
                        return bad("config.fewshot.grid is empty".into());
                    }
                    match &fs.val_bundle {
                        Some(v) => exists(v, "validation bundle")?,
                        None => return bad("config.fewshot.grid needs val_bundle".into()),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rejects empty subsets and subsets without class-name texts.
pub fn validate_families(families: &[Family]) -> Result<()> {
    if families.is_empty() {
        return Err(EvalError::Pipeline("family subset is empty".into()));
    }
    if !families.contains(&Family::ClassName) {
        return Err(EvalError::Pipeline(format!(
            "family subset {} has no class-name texts",
            family_label(families)
        )));
    }
    if families.contains(&Family::OneToOne) {
        return Err(EvalError::Pipeline(
            "one-to-one texts are not part of the general text set".into(),
        ));
    }
    Ok(())
}

fn family_label(families: &[Family]) -> String {
    let set: BTreeSet<Family> = families.iter().copied().collect();
    set.iter().map(|f| f.as_str()).collect::<Vec<_>>().join("+")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: u32,
    pub name: String,
    pub correct: u64,
    pub total: u64,
    /// `None` when the class has no test images.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub image_id: u64,
    pub label: u32,
    pub predicted: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset_tag: String,
    pub mode: Mode,
    pub families: Vec<Family>,
    pub seed: u64,
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    pub per_class: Vec<ClassAccuracy>,
    /// Images that went through stage 2 (rerank mode only).
    pub reranked: Option<u64>,
    /// Adapter parameters used (few-shot mode only).
    pub adapter_params: Option<AdapterParams>,
    /// Validation accuracy of every grid point, when a grid was searched.
    pub grid_scores: Option<Vec<(AdapterParams, f64)>>,
    pub config: RunConfig,
    pub predictions: Vec<ImagePrediction>,
    /// Left out of the canonical JSON; see [`Report::to_canonical_json`].
    pub wall_time_ms: Option<u64>,
}

/// Rounds every float in `v` to 9 significant digits.
fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(0.0);
            let r: f64 = format!("{x:.8e}").parse().unwrap_or(x);
            if let Some(num) = serde_json::Number::from_f64(r) {
                *n = num;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}

impl Report {
    fn to_value(&self, with_wall_time: bool) -> Value {
        let mut v = serde_json::to_value(self).expect("report is serializable");
        if let Value::Object(o) = &mut v {
            if !with_wall_time || self.wall_time_ms.is_none() {
                o.remove("wall_time_ms");
            }
        }
        round_floats(&mut v);
        v
    }

    /// Deterministic JSON: sorted keys, floats at 9 significant digits, no
    /// wall time. Two runs over the same inputs give identical bytes.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_value(false)).expect("report is serializable");
        s.push('\n');
        s
    }

    /// Same as the canonical form plus `wall_time_ms`.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_value(true)).expect("report is serializable");
        s.push('\n');
        s
    }
}

/// Bundles a run reads, already loaded.
pub struct EvalInputs {
    pub images: EmbeddingBundle,
    pub texts: EmbeddingBundle,
    pub support: Option<EmbeddingBundle>,
    pub val: Option<EmbeddingBundle>,
    pub pairs: Option<Box<dyn PairStore>>,
}

fn load(path: &Path) -> Result<EmbeddingBundle> {
    read_bundle(path).map_err(|e| EvalError::Pipeline(format!("{}: {e}", path.display())))
}

impl EvalInputs {
    pub fn load(manifest: &RunManifest) -> Result<Self> {
        let texts = load(&manifest.path(&manifest.text_bundle))?;
        let fs = manifest.config.fewshot.as_ref();
        let pairs: Option<Box<dyn PairStore>> = match (manifest.mode, &manifest.config.pairs_dir) {
            (Mode::ZeroshotRerank, Some(dir)) => Some(Box::new(DirPairStore::offline(
                manifest.path(dir),
                texts.encoder_tag.clone(),
            ))),
            _ => None,
        };
        Ok(Self {
            images: load(&manifest.path(&manifest.image_bundle))?,
            support: match (manifest.mode, fs) {
                (Mode::Fewshot, Some(fs)) => Some(load(&manifest.path(&fs.support_bundle))?),
                _ => None,
            },
            val: match (manifest.mode, fs.and_then(|f| f.grid.as_ref().and(f.val_bundle.as_ref()))) {
                (Mode::Fewshot, Some(v)) => Some(load(&manifest.path(v))?),
                _ => None,
            },
            texts,
            pairs,
        })
    }
}

/// Labels of an image bundle; fails on the first unlabeled or out-of-range image.
fn image_labels(bundle: &EmbeddingBundle, n_classes: usize) -> Result<Vec<u32>> {
    let records = bundle
        .image_records()
        .ok_or_else(|| EvalError::Pipeline(format!("expected an image bundle, found {}", bundle.records.kind())))?;
    records
        .iter()
        .map(|r| match r.label_class_id {
            Some(l) if (l as usize) < n_classes => Ok(l),
            Some(l) => Err(EvalError::Image {
                image: r.id,
                message: format!("label {l} out of range for {n_classes} classes"),
            }),
            None => Err(EvalError::Image {
                image: r.id,
                message: "image has no label".into(),
            }),
        })
        .collect()
}

fn image_ids(bundle: &EmbeddingBundle) -> Vec<u64> {
    bundle
        .image_records()
        .map(|r| r.iter().map(|r| r.id).collect())
        .unwrap_or_default()
}

/// Rows of the general text set restricted to `families`.
pub fn family_columns(records: &[TextRecord], families: &[Family]) -> Vec<usize> {
    (0..records.len())
        .filter(|&i| records[i].family != Family::OneToOne && families.contains(&records[i].family))
        .collect()
}

/// Everything computed once per run and shared across family subsets.
struct Prepared<'a> {
    inputs: &'a EvalInputs,
    records: Vec<TextRecord>,
    general: Vec<usize>,
    unit_texts: FeatureMatrix,
    labels: Vec<u32>,
    ids: Vec<u64>,
    /// CODER over all general texts, one column per `general` entry.
    coders: CoderMatrix,
    fewshot: Option<FewShotPrepared>,
}

struct FewShotPrepared {
    support_coders: CoderMatrix,
    support_labels: Vec<u32>,
    zs: Vec<ClassScores>,
    val: Option<(CoderMatrix, Vec<u32>, Vec<ClassScores>)>,
}

fn project(images: &FeatureMatrix, texts: &FeatureMatrix, normalize: bool) -> Result<CoderMatrix> {
    if normalize {
        build_coder(images, texts, PsiMapping::Identity).map_err(pipeline)
    } else {
        project_raw(images, texts, PsiMapping::Identity).map_err(pipeline)
    }
}

impl<'a> Prepared<'a> {
    fn new(manifest: &RunManifest, inputs: &'a EvalInputs) -> Result<Self> {
        let texts = &inputs.texts;
        let records = texts
            .text_records()
            .ok_or_else(|| EvalError::Pipeline(format!("expected a text bundle, found {}", texts.records.kind())))?
            .to_vec();
        let n = texts.class_names.len();
        if inputs.images.encoder_tag != texts.encoder_tag {
            tracing::warn!(
                images = %inputs.images.encoder_tag,
                texts = %texts.encoder_tag,
                "image and text bundles come from different encoders"
            );
        }
        let labels = image_labels(&inputs.images, n)?;
        let ids = image_ids(&inputs.images);
        let general = family_columns(&records, &GENERAL_FAMILIES);
        let unit_texts = {
            let m = texts.features.select_rows(&general);
            if m.is_normalized() {
                m
            } else {
                m.normalize_rows().map_err(pipeline)?
            }
        };

        let (coders, fewshot) = if manifest.mode == Mode::Fewshot {
            let cfg = manifest
                .config
                .fewshot
                .as_ref()
                .ok_or_else(|| EvalError::Manifest("mode fewshot needs config.fewshot".into()))?;
            let norm = cfg.normalize_image_features;
            let support = inputs
                .support
                .as_ref()
                .ok_or_else(|| EvalError::Pipeline("support bundle not loaded".into()))?;
            let support_labels = image_labels(support, n)?;
            let val = match (&cfg.grid, &inputs.val) {
                (Some(_), Some(v)) => Some((
                    project(&v.features, &unit_texts, norm)?,
                    image_labels(v, n)?,
                    fewshot::class_name_logits(&v.features, texts).map_err(pipeline)?,
                )),
                (Some(_), None) => return Err(EvalError::Pipeline("validation bundle not loaded".into())),
                _ => None,
            };
            let prepared = FewShotPrepared {
                support_coders: project(&support.features, &unit_texts, norm)?,
                support_labels,
                zs: fewshot::class_name_logits(&inputs.images.features, texts).map_err(pipeline)?,
                val,
            };
            (project(&inputs.images.features, &unit_texts, norm)?, Some(prepared))
        } else {
            (
                build_coder(&inputs.images.features, &unit_texts, PsiMapping::Identity).map_err(|e| {
                    image_error(&ids, e.to_string())
                })?,
                None,
            )
        };
        Ok(Self {
            inputs,
            records,
            general,
            unit_texts,
            labels,
            ids,
            coders,
            fewshot,
        })
    }

    /// Positions inside `general` (hence CODER columns) kept for `families`.
    fn mask(&self, families: &[Family]) -> Vec<usize> {
        self.general
            .iter()
            .enumerate()
            .filter(|(_, &row)| families.contains(&self.records[row].family))
            .map(|(col, _)| col)
            .collect()
    }
}

fn image_error(ids: &[u64], message: String) -> EvalError {
    // whole-matrix failures name the first image
    match ids.first() {
        Some(&image) => EvalError::Image { image, message },
        None => EvalError::Pipeline(message),
    }
}

struct SubsetOutcome {
    predicted: Vec<u32>,
    reranked: Option<u64>,
    adapter_params: Option<AdapterParams>,
    grid_scores: Option<Vec<(AdapterParams, f64)>>,
}

fn run_subset(manifest: &RunManifest, prep: &Prepared<'_>, families: &[Family]) -> Result<SubsetOutcome> {
    validate_families(families)?;
    let n_classes = prep.inputs.texts.class_names.len();
    let cols = prep.mask(families);
    let coders = prep.coders.select_columns(&cols);
    let kept: Vec<TextRecord> = cols.iter().map(|&c| prep.records[prep.general[c]].clone()).collect();

    match manifest.mode {
        Mode::Zeroshot | Mode::ZeroshotRerank => {
            let partition = ClassPartition::from_records(&kept, n_classes).map_err(pipeline)?;
            let store = match manifest.mode {
                Mode::ZeroshotRerank => Some(
                    prep.inputs
                        .pairs
                        .as_deref()
                        .ok_or_else(|| EvalError::Pipeline("pair store not loaded".into()))?,
                ),
                _ => None,
            };
            let cfg = &manifest.config.rerank;
            let outcomes: Vec<(u32, bool)> = (0..coders.rows())
                .into_par_iter()
                .map(|i| {
                    let fail = |m: String| EvalError::Image {
                        image: prep.ids[i],
                        message: m,
                    };
                    let logits = coder::stage1_logits(coders.row(i), &partition).map_err(|e| fail(e.to_string()))?;
                    match store {
                        Some(s) => {
                            let o = zeroshot::rerank(&logits, prep.inputs.images.features.row(i), s, cfg)
                                .map_err(|e| fail(e.to_string()))?;
                            Ok((o.final_class as u32, o.reranked))
                        }
                        None => Ok((logits.argmax().unwrap_or(0) as u32, false)),
                    }
                })
                .collect::<Result<_>>()?;
            Ok(SubsetOutcome {
                reranked: store.map(|_| outcomes.iter().filter(|o| o.1).count() as u64),
                predicted: outcomes.into_iter().map(|o| o.0).collect(),
                adapter_params: None,
                grid_scores: None,
            })
        }
        Mode::Fewshot => {
            let fsp = prep
                .fewshot
                .as_ref()
                .ok_or_else(|| EvalError::Pipeline("few-shot inputs not prepared".into()))?;
            let cfg = manifest
                .config
                .fewshot
                .as_ref()
                .ok_or_else(|| EvalError::Manifest("mode fewshot needs config.fewshot".into()))?;
            let cache = SupportCache::from_parts(
                fsp.support_coders.select_columns(&cols),
                fsp.support_labels.clone(),
                n_classes,
                prep.unit_texts.select_rows(&cols),
            )
            .map_err(pipeline)?;
            let (params, grid_scores) = match (&cfg.grid, &fsp.val) {
                (Some(grid), Some((vc, vl, vz))) => {
                    let r = fewshot::grid_search(&grid.points(), &vc.select_columns(&cols), vl, vz, &cache)
                        .map_err(pipeline)?;
                    (r.best, Some(r.scores))
                }
                _ => (cfg.params, None),
            };
            let predicted = fewshot::predict(&fsp.zs, &coders, &cache, &params)
                .map_err(|e| image_error(&prep.ids, e.to_string()))?
                .into_iter()
                .map(|c| c as u32)
                .collect();
            Ok(SubsetOutcome {
                predicted,
                reranked: None,
                adapter_params: Some(params),
                grid_scores,
            })
        }
    }
}

fn build_report(
    manifest: &RunManifest,
    prep: &Prepared<'_>,
    families: &[Family],
    outcome: SubsetOutcome,
    started: Instant,
) -> Report {
    let names = &prep.inputs.texts.class_names;
    let mut per: BTreeMap<u32, (u64, u64)> = (0..names.len() as u32).map(|c| (c, (0, 0))).collect();
    let mut predictions = Vec::with_capacity(prep.labels.len());
    for ((&label, &predicted), &image_id) in prep.labels.iter().zip(&outcome.predicted).zip(&prep.ids) {
        let e = per.entry(label).or_default();
        e.1 += 1;
        if label == predicted {
            e.0 += 1;
        }
        predictions.push(ImagePrediction {
            image_id,
            label,
            predicted,
        });
    }
    let correct: u64 = per.values().map(|v| v.0).sum();
    let total = prep.labels.len() as u64;
    let mut config = manifest.config.clone();
    let mut fams: Vec<Family> = families.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    fams.dedup();
    config.families = Some(fams.clone());
    Report {
        dataset_tag: manifest.dataset_tag.clone(),
        mode: manifest.mode,
        families: fams,
        seed: manifest.seed,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        per_class: per
            .into_iter()
            .map(|(c, (ok, n))| ClassAccuracy {
                class_id: c,
                name: names.get(c as usize).cloned().unwrap_or_default(),
                correct: ok,
                total: n,
                accuracy: (n > 0).then(|| ok as f64 / n as f64),
            })
            .collect(),
        reranked: outcome.reranked,
        adapter_params: outcome.adapter_params,
        grid_scores: outcome.grid_scores,
        config,
        predictions,
        wall_time_ms: Some(started.elapsed().as_millis() as u64),
    }
}

fn manifest_families(manifest: &RunManifest) -> Vec<Family> {
    manifest
        .config
        .families
        .clone()
        .unwrap_or_else(|| GENERAL_FAMILIES.to_vec())
}

/// Runs the manifest's pipeline over already-loaded bundles.
pub fn evaluate_inputs(manifest: &RunManifest, inputs: &EvalInputs) -> Result<Report> {
    let started = Instant::now();
    let families = manifest_families(manifest);
    validate_families(&families)?;
    let prep = Prepared::new(manifest, inputs)?;
    let outcome = run_subset(manifest, &prep, &families)?;
    Ok(build_report(manifest, &prep, &families, outcome, started))
}

/// Loads the manifest's bundles and runs its pipeline.
pub fn evaluate(manifest: &RunManifest) -> Result<Report> {
    manifest.validate()?;
    let inputs = EvalInputs::load(manifest)?;
    evaluate_inputs(manifest, &inputs)
}

/// One report per family subset; the CODER is computed once and masked.
pub fn ablation_sweep_inputs(
    manifest: &RunManifest,
    inputs: &EvalInputs,
    family_sets: &[Vec<Family>],
) -> Result<Vec<Report>> {
    for set in family_sets {
        validate_families(set)?;
    }
    let prep = Prepared::new(manifest, inputs)?;
    family_sets
        .iter()
        .map(|set| {
            let started = Instant::now();
            let outcome = run_subset(manifest, &prep, set)?;
            Ok(build_report(manifest, &prep, set, outcome, started))
        })
        .collect()
}

pub fn ablation_sweep(manifest: &RunManifest, family_sets: &[Vec<Family>]) -> Result<Vec<Report>> {
    manifest.validate()?;
    let inputs = EvalInputs::load(manifest)?;
    ablation_sweep_inputs(manifest, &inputs, family_sets)
}
