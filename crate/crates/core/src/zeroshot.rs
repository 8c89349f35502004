//! Two-stage zero-shot classification.
//!
//! Stage 1 scores every class from the general CODER with the heuristic
//! classifier. Stage 2 takes the top-k classes, builds a one-to-one CODER for
//! every pair among them and picks the class with the largest summed score
//! gap. Stage 2 only reorders within the top-k set.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coder::{self, build_coder, ClassPartition, ClassScores, CoderError, PsiMapping};
use crate::embedding_store::{
    read_bundle, row_norm, write_bundle, EmbeddingBundle, Family, FeatureMatrix, StoreError,
    MIN_ROW_NORM,
};

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_GATE_MARGIN: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ZeroShotError {
    #[error("invalid rerank config: {0}")]
    InvalidConfig(String),
    #[error("top-{k} requested from {classes} classes")]
    KTooLarge { k: usize, classes: usize },
    #[error("one-to-one texts for pair ({a}, {b}) have no entries for class {empty}")]
    EmptySide { a: u32, b: u32, empty: u32 },
    #[error("bad pair bundle for ({a}, {b}): {reason}")]
    BadPairBundle { a: u32, b: u32, reason: String },
    #[error("pair ({a}, {b}) not in store and generation is disabled (offline)")]
    PairMissing { a: u32, b: u32 },
    #[error("pair generation for ({a}, {b}) failed: {reason}")]
    Generation { a: u32, b: u32, reason: String },
    #[error("image {image}: {source}")]
    Image {
        image: u64,
        #[source]
        source: Box<ZeroShotError>,
    },
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = ZeroShotError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub top_k: usize,
    /// Rerank only when the stage-1 top1 - top2 logit margin is below this.
    pub gate_margin: f64,
    /// When false every image is reranked regardless of margin.
    pub gating: bool,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            gate_margin: DEFAULT_GATE_MARGIN,
            gating: true,
        }
    }
}

impl RerankConfig {
    pub fn always() -> Self {
        Self {
            gating: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k < 2 {
            return Err(ZeroShotError::InvalidConfig(format!(
                "top_k must be >= 2, got {}",
                self.top_k
            )));
        }
        if self.gate_margin.is_nan() || self.gate_margin < 0.0 {
            return Err(ZeroShotError::InvalidConfig(format!(
                "gate_margin must be >= 0, got {}",
                self.gate_margin
            )));
        }
        Ok(())
    }
}

/// The `k` highest-scoring classes in descending order; ties by lowest id.
pub fn top_k_classes(logits: &ClassScores, k: usize) -> Result<Vec<usize>> {
    let n = logits.len();
    if k > n {
        return Err(ZeroShotError::KTooLarge { k, classes: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| logits.0[b].total_cmp(&logits.0[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// All unordered pairs drawn from `classes`, in position order.
pub fn pair_set(classes: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(classes.len() * classes.len().saturating_sub(1) / 2);
    for (i, &a) in classes.iter().enumerate() {
        for &b in &classes[i + 1..] {
            out.push((a, b));
        }
    }
    out
}

/// One-to-one text features for a class pair, split by described class.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTexts {
    pub class_a: u32,
    pub class_b: u32,
    pub side_a: FeatureMatrix,
    pub side_b: FeatureMatrix,
}

impl PairTexts {
    pub fn new(class_a: u32, class_b: u32, side_a: FeatureMatrix, side_b: FeatureMatrix) -> Result<Self> {
        if side_a.rows() == 0 {
            return Err(ZeroShotError::EmptySide {
                a: class_a,
                b: class_b,
                empty: class_a,
            });
        }
        if side_b.rows() == 0 {
            return Err(ZeroShotError::EmptySide {
                a: class_a,
                b: class_b,
                empty: class_b,
            });
        }
        Ok(Self {
            class_a,
            class_b,
            side_a,
            side_b,
        })
    }

    /// Splits a text bundle holding only one-to-one records for `{a, b}`.
    pub fn from_bundle(bundle: &EmbeddingBundle, a: u32, b: u32) -> Result<Self> {
        let bad = |reason: String| ZeroShotError::BadPairBundle { a, b, reason };
        let records = bundle
            .text_records()
            .ok_or_else(|| bad(format!("expected a text bundle, found {}", bundle.records.kind())))?;
        let (mut ia, mut ib) = (Vec::new(), Vec::new());
        for (i, r) in records.iter().enumerate() {
            if r.family != Family::OneToOne {
                return Err(bad(format!("record {} has family {}", r.id, r.family)));
            }
            match (r.class_id, r.pair_class_id) {
                (c, Some(p)) if c == a && p == b => ia.push(i),
                (c, Some(p)) if c == b && p == a => ib.push(i),
                (c, p) => {
                    return Err(bad(format!(
                        "record {} describes class {c} against {p:?}",
                        r.id
                    )))
                }
            }
        }
        Self::new(
            a,
            b,
            bundle.features.select_rows(&ia),
            bundle.features.select_rows(&ib),
        )
    }

    /// Same texts with the sides swapped.
    pub fn flipped(&self) -> Self {
        Self {
            class_a: self.class_b,
            class_b: self.class_a,
            side_a: self.side_b.clone(),
            side_b: self.side_a.clone(),
        }
    }
}

fn mean_cosine(x: &[f32], x_inv_norm: f64, texts: &FeatureMatrix) -> Result<f64> {
    let mut sum = 0.0;
    for (k, t) in texts.iter_rows().enumerate() {
        let tn = row_norm(t);
        if tn < MIN_ROW_NORM {
            return Err(CoderError::DegenerateRow { side: "text", row: k }.into());
        }
        let d: f64 = x.iter().zip(t).map(|(&p, &q)| f64::from(p) * f64::from(q)).sum();
        sum += d * x_inv_norm / tn;
    }
    Ok(sum / texts.rows() as f64)
}

/// Per-side mean of the image's one-to-one CODER: `(score_a, score_b)`.
pub fn one_to_one_scores(image_feature: &[f32], pair: &PairTexts) -> Result<(f64, f64)> {
    let dim = pair.side_a.dim();
    if image_feature.len() != dim || pair.side_b.dim() != dim {
        return Err(CoderError::DimensionMismatch {
            images: image_feature.len(),
            texts: dim,
        }
        .into());
    }
    let n = row_norm(image_feature);
    if n < MIN_ROW_NORM {
        return Err(CoderError::DegenerateRow { side: "image", row: 0 }.into());
    }
    let inv = 1.0 / n;
    Ok((
        mean_cosine(image_feature, inv, &pair.side_a)?,
        mean_cosine(image_feature, inv, &pair.side_b)?,
    ))
}

/// Score gaps between every ordered pair of the reranked classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapLedger {
    pub classes: Vec<usize>,
    /// Row-major `classes.len()²` matrix; `gaps[i*k + j]` is the gap of
    /// `classes[i]` over `classes[j]`. Diagonal entries are zero.
    pub gaps: Vec<f64>,
}

impl GapLedger {
    fn new(classes: Vec<usize>) -> Self {
        let k = classes.len();
        Self {
            classes,
            gaps: vec![0.0; k * k],
        }
    }

    fn record(&mut self, i: usize, j: usize, score_i: f64, score_j: f64) {
        let k = self.classes.len();
        self.gaps[i * k + j] = score_i - score_j;
        self.gaps[j * k + i] = score_j - score_i;
    }

    pub fn gap(&self, c: usize, j: usize) -> Option<f64> {
        let k = self.classes.len();
        let pc = self.classes.iter().position(|&x| x == c)?;
        let pj = self.classes.iter().position(|&x| x == j)?;
        Some(self.gaps[pc * k + pj])
    }

    /// Summed gap of each class against all others, aligned with `classes`.
    pub fn sums(&self) -> Vec<f64> {
        let k = self.classes.len();
        (0..k)
            .map(|i| (0..k).filter(|&j| j != i).map(|j| self.gaps[i * k + j]).sum())
            .collect()
    }

    /// Class with the largest gap sum; ties go to the lowest class id.
    pub fn winner(&self) -> usize {
        let sums = self.sums();
        let mut best = 0;
        for i in 1..self.classes.len() {
            if sums[i] > sums[best] || (sums[i] == sums[best] && self.classes[i] < self.classes[best]) {
                best = i;
            }
        }
        self.classes[best]
    }

    /// Ordered `(class, other, gap)` triples, off-diagonal only.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        let k = self.classes.len();
        let mut out = Vec::with_capacity(k * k.saturating_sub(1));
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    out.push((self.classes[i], self.classes[j], self.gaps[i * k + j]));
                }
            }
        }
        out
    }
}

/// Source of one-to-one text features for class pairs.
pub trait PairStore: Send + Sync {
    /// Texts for the unordered pair, oriented so that `class_a == a`.
    fn pair(&self, a: u32, b: u32) -> Result<Arc<PairTexts>>;
}

/// Produces a one-to-one pair bundle on a store miss.
pub trait PairGenerator: Send + Sync {
    fn generate(&self, a: u32, b: u32) -> Result<EmbeddingBundle, String>;
}

/// In-memory pair store, mostly for tests and small experiments.
#[derive(Debug, Default)]
pub struct MemoryPairStore {
    pairs: HashMap<(u32, u32), Arc<PairTexts>>,
}

impl MemoryPairStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pair: PairTexts) {
        let key = (pair.class_a.min(pair.class_b), pair.class_a.max(pair.class_b));
        let pair = if pair.class_a == key.0 { pair } else { pair.flipped() };
        self.pairs.insert(key, Arc::new(pair));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn orient(stored: &Arc<PairTexts>, a: u32) -> Arc<PairTexts> {
    if stored.class_a == a {
        Arc::clone(stored)
    } else {
        Arc::new(stored.flipped())
    }
}

impl PairStore for MemoryPairStore {
    fn pair(&self, a: u32, b: u32) -> Result<Arc<PairTexts>> {
        let key = (a.min(b), a.max(b));
        self.pairs
            .get(&key)
            .map(|p| orient(p, a))
            .ok_or(ZeroShotError::PairMissing { a, b })
    }
}

type Slot = Arc<Mutex<Option<Arc<PairTexts>>>>;

/// Pair bundles on disk, one file per unordered pair and encoder.
///
/// Loaded pairs are memoized. On a miss the optional generator runs under a
/// per-pair lock so concurrent callers never generate the same pair twice.
pub struct DirPairStore {
    dir: PathBuf,
    encoder_tag: String,
    generator: Option<Box<dyn PairGenerator>>,
    slots: Mutex<HashMap<(u32, u32), Slot>>,
}

impl DirPairStore {
    /// Read-only store; a missing pair is an error.
    pub fn offline(dir: impl Into<PathBuf>, encoder_tag: impl Into<String>) -> Self {
        Self {
            dir: dir.into(),
            encoder_tag: encoder_tag.into(),
            generator: None,
            slots: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_generator(
        dir: impl Into<PathBuf>,
        encoder_tag: impl Into<String>,
        generator: Box<dyn PairGenerator>,
    ) -> Self {
        Self {
            generator: Some(generator),
            ..Self::offline(dir, encoder_tag)
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// File holding the pair bundle for the unordered pair and encoder tag.
    pub fn pair_path(&self, a: u32, b: u32) -> PathBuf {
        self.dir.join(pair_file_name(a, b, &self.encoder_tag))
    }

    fn load_or_generate(&self, lo: u32, hi: u32) -> Result<Arc<PairTexts>> {
        let path = self.pair_path(lo, hi);
        let bundle = if path.exists() {
            read_bundle(&path)?
        } else if let Some(gen) = &self.generator {
            let bundle = gen
                .generate(lo, hi)
                .map_err(|reason| ZeroShotError::Generation { a: lo, b: hi, reason })?;
            fs::create_dir_all(&self.dir).map_err(StoreError::from)?;
            write_bundle(&bundle, &path)?;
            bundle
        } else {
            return Err(ZeroShotError::PairMissing { a: lo, b: hi });
        };
        if bundle.encoder_tag != self.encoder_tag {
            return Err(ZeroShotError::BadPairBundle {
                a: lo,
                b: hi,
                reason: format!(
                    "encoder tag {:?} does not match {:?}",
                    bundle.encoder_tag, self.encoder_tag
                ),
            });
        }
        Ok(Arc::new(PairTexts::from_bundle(&bundle, lo, hi)?))
    }
}

pub fn pair_file_name(a: u32, b: u32, encoder_tag: &str) -> String {
    let (lo, hi) = (a.min(b), a.max(b));
    let tag = hex::encode(&Sha256::digest(encoder_tag.as_bytes())[..6]);
    format!("pair-{lo}-{hi}-{tag}.codr")
}

impl PairStore for DirPairStore {
    fn pair(&self, a: u32, b: u32) -> Result<Arc<PairTexts>> {
        let key = (a.min(b), a.max(b));
        let slot = {
            let mut slots = self.slots.lock().unwrap();
            Arc::clone(slots.entry(key).or_default())
        };
        let mut guard = slot.lock().unwrap();
        if let Some(p) = guard.as_ref() {
            return Ok(orient(p, a));
        }
        let loaded = self.load_or_generate(key.0, key.1)?;
        *guard = Some(Arc::clone(&loaded));
        Ok(orient(&loaded, a))
    }
}

/// Result of running both stages on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    pub stage1_top: Vec<usize>,
    pub final_class: usize,
    /// True when the image went through stage 2.
    pub reranked: bool,
    pub gaps: Option<GapLedger>,
}

/// Stage-1 top1 - top2 margin; `None` with fewer than two classes.
pub fn top_margin(logits: &ClassScores) -> Option<f64> {
    let top = top_k_classes(logits, 2).ok()?;
    Some(logits.0[top[0]] - logits.0[top[1]])
}

/// Runs stage 2 for one image. The top-k set is capped at the class count.
pub fn rerank(
    logits: &ClassScores,
    image_feature: &[f32],
    store: &dyn PairStore,
    cfg: &RerankConfig,
) -> Result<RerankOutcome> {
    cfg.validate()?;
    let k = cfg.top_k.min(logits.len());
    let top = top_k_classes(logits, k)?;
    let stage1 = top.first().copied().ok_or(ZeroShotError::KTooLarge { k: 1, classes: 0 })?;
    let skip = top.len() < 2
        || (cfg.gating && top_margin(logits).is_some_and(|m| m >= cfg.gate_margin));
    if skip {
        return Ok(RerankOutcome {
            stage1_top: top,
            final_class: stage1,
            reranked: false,
            gaps: None,
        });
    }

    let mut ledger = GapLedger::new(top.clone());
    for i in 0..top.len() {
        for j in i + 1..top.len() {
            let pair = store.pair(top[i] as u32, top[j] as u32)?;
            let (si, sj) = one_to_one_scores(image_feature, &pair)?;
            ledger.record(i, j, si, sj);
        }
    }
    Ok(RerankOutcome {
        stage1_top: top,
        final_class: ledger.winner(),
        reranked: true,
        gaps: Some(ledger),
    })
}

/// Per-image prediction as written to predictions files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub stage1_top5: Vec<usize>,
    pub final_class: usize,
    pub gated: bool,
    pub gaps: Vec<GapEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub class: usize,
    pub other: usize,
    pub gap: f64,
}

impl From<RerankOutcome> for Prediction {
    fn from(o: RerankOutcome) -> Self {
        Self {
            stage1_top5: o.stage1_top,
            final_class: o.final_class,
            gated: o.reranked,
            gaps: o
                .gaps
                .map(|g| {
                    g.entries()
                        .into_iter()
                        .map(|(class, other, gap)| GapEntry { class, other, gap })
                        .collect()
                })
                .unwrap_or_default(),
        }
    }
}

/// General-text-set classifier shared by both zero-shot modes.
#[derive(Debug, Clone)]
pub struct ZeroShotClassifier {
    pub texts: FeatureMatrix,
    pub partition: ClassPartition,
    pub psi: PsiMapping,
}

impl ZeroShotClassifier {
    /// Uses the text bundle's general text set; one-to-one rows are dropped.
    pub fn from_bundle(texts: &EmbeddingBundle) -> Result<Self> {
        let records = texts.text_records().ok_or_else(|| ZeroShotError::InvalidConfig(
            format!("expected a text bundle, found {}", texts.records.kind()),
        ))?;
        let keep: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].family != Family::OneToOne)
            .collect();
        let kept: Vec<_> = keep.iter().map(|&i| records[i].clone()).collect();
        Ok(Self {
            texts: texts.features.select_rows(&keep),
            partition: ClassPartition::from_records(&kept, texts.class_names.len())?,
            psi: PsiMapping::Identity,
        })
    }

    pub fn stage1(&self, images: &FeatureMatrix) -> Result<Vec<ClassScores>> {
        let coders = build_coder(images, &self.texts, self.psi)?;
        (0..coders.rows())
            .into_par_iter()
            .map(|i| Ok(coder::stage1_logits(coders.row(i), &self.partition)?))
            .collect()
    }

    /// Both stages for every image. With `store = None` only stage 1 runs.
    /// `image_ids` name images in errors.
    pub fn predict(
        &self,
        images: &FeatureMatrix,
        image_ids: &[u64],
        store: Option<&dyn PairStore>,
        cfg: &RerankConfig,
    ) -> Result<Vec<Prediction>> {
        cfg.validate()?;
        let logits = self.stage1(images)?;
        logits
            .par_iter()
            .enumerate()
            .map(|(i, l)| {
                let outcome = match store {
                    Some(s) => rerank(l, images.row(i), s, cfg),
                    None => {
                        let k = cfg.top_k.min(l.len());
                        top_k_classes(l, k).map(|top| RerankOutcome {
                            final_class: top[0],
                            stage1_top: top,
                            reranked: false,
                            gaps: None,
                        })
                    }
                };
                outcome.map(Prediction::from).map_err(|e| ZeroShotError::Image {
                    image: image_ids.get(i).copied().unwrap_or(i as u64),
                    source: Box::new(e),
                })
            })
            .collect()
    }
}
