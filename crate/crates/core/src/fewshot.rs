//! Training-free few-shot adapter in CODER space.
//!
//! Support images and test images are both mapped onto the general text set.
//! A test image's affinity to each support image reweights the support labels,
//! and the weighted label mass corrects the zero-shot logits:
//!
//! ```text
//! A      = exp(-beta * (1 - Norm(s_i · S_trainᵀ) / T))
//! logits = alpha * A · L_train + zs_logits
//! ```

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coder::{argmax, build_coder, project_raw, ClassScores, CoderError, CoderMatrix, PsiMapping};
use crate::embedding_store::{EmbeddingBundle, Family, FeatureMatrix, StoreError};

/// Logit scale applied to plain cosine zero-shot logits.
pub const LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum FewShotError {
    #[error("support image {id} has no label")]
    MissingLabel { id: u64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("support set is empty")]
    EmptySupport,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid adapter params: {0}")]
    InvalidParams(String),
    #[error("parameter grid is empty")]
    EmptyGrid,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("expected a {expected} bundle, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("class {0} has no class-name texts")]
    NoClassNameText(usize),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = FewShotError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    MinMax,
    L2,
}

impl std::str::FromStr for NormMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "minmax" | "min-max" => Ok(NormMode::MinMax),
            "l2" => Ok(NormMode::L2),
            other => Err(format!("unknown norm mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub norm: NormMode,
}

impl Default for AdapterParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 5.5,
            temperature: 3.0,
            norm: NormMode::MinMax,
        }
    }
}

impl AdapterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(FewShotError::InvalidParams(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(FewShotError::InvalidParams(format!("beta {} must be > 0", self.beta)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(FewShotError::InvalidParams(format!(
                "T {} must be > 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Cartesian hyperparameter grid; iteration order is alpha-major, then beta,
/// then T, then norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(rename = "T")]
    pub temperature: Vec<f64>,
    #[serde(default = "default_norms")]
    pub norm: Vec<NormMode>,
}

fn default_norms() -> Vec<NormMode> {
    vec![NormMode::MinMax]
}

impl ParamGrid {
    pub fn points(&self) -> Vec<AdapterParams> {
        let mut out = Vec::new();
        for &alpha in &self.alpha {
            for &beta in &self.beta {
                for &temperature in &self.temperature {
                    for &norm in &self.norm {
                        out.push(AdapterParams {
                            alpha,
                            beta,
                            temperature,
                            norm,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoderOptions {
    /// Divide image features by their norm before projecting (cosine CODER).
    pub normalize_image_features: bool,
}

/// Support-set CODER rows and labels, plus the text set they were built from.
#[derive(Debug, Clone)]
pub struct SupportCache {
    s_train: CoderMatrix,
    labels: Vec<u32>,
    n_classes: usize,
    texts: FeatureMatrix,
    options: CoderOptions,
}

/// Unit-normalized general text set (one-to-one rows removed).
fn general_text_matrix(texts: &EmbeddingBundle) -> Result<FeatureMatrix> {
    let records = texts.text_records().ok_or(FewShotError::WrongKind {
        expected: "text",
        found: texts.records.kind(),
    })?;
    let keep: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].family != Family::OneToOne)
        .collect();
    let m = texts.features.select_rows(&keep);
    Ok(if m.is_normalized() { m } else { m.normalize_rows()? })
}

fn image_coder(images: &FeatureMatrix, texts: &FeatureMatrix, opts: CoderOptions) -> Result<CoderMatrix> {
    Ok(if opts.normalize_image_features {
        build_coder(images, texts, PsiMapping::Identity)?
    } else {
        project_raw(images, texts, PsiMapping::Identity)?
    })
}

impl SupportCache {
    pub fn build(support: &EmbeddingBundle, texts: &EmbeddingBundle, options: CoderOptions) -> Result<Self> {
        let records = support.image_records().ok_or(FewShotError::WrongKind {
            expected: "image",
            found: support.records.kind(),
        })?;
        if records.is_empty() {
            return Err(FewShotError::EmptySupport);
        }
        if support.encoder_tag != texts.encoder_tag {
            tracing::warn!(
                support = %support.encoder_tag,
                texts = %texts.encoder_tag,
                "support and text bundles come from different encoders"
            );
        }
        let n_classes = texts.class_names.len();
        let labels = records
            .iter()
            .map(|r| {
                let label = r.label_class_id.ok_or(FewShotError::MissingLabel { id: r.id })?;
                if (label as usize) >= n_classes {
                    return Err(FewShotError::LabelOutOfRange {
                        label,
                        classes: n_classes,
                    });
                }
                Ok(label)
            })
            .collect::<Result<Vec<_>>>()?;
        let text_matrix = general_text_matrix(texts)?;
        let s_train = image_coder(&support.features, &text_matrix, options)?;
        Ok(Self {
            s_train,
            labels,
            n_classes,
            texts: text_matrix,
            options,
        })
    }

    /// Builds a cache straight from CODER rows and labels.
    pub fn from_parts(s_train: CoderMatrix, labels: Vec<u32>, n_classes: usize, texts: FeatureMatrix) -> Result<Self> {
        if s_train.rows() == 0 {
            return Err(FewShotError::EmptySupport);
        }
        if s_train.rows() != labels.len() {
            return Err(FewShotError::Shape(format!(
                "{} support rows but {} labels",
                s_train.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(FewShotError::LabelOutOfRange {
                label,
                classes: n_classes,
            });
        }
        Ok(Self {
            s_train,
            labels,
            n_classes,
            texts,
            options: CoderOptions::default(),
        })
    }

    pub fn s_train(&self) -> &CoderMatrix {
        &self.s_train
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Distinct classes present in the support set.
    pub fn ways(&self) -> usize {
        self.labels.iter().collect::<BTreeSet<_>>().len()
    }

    /// Support images per class, assuming a balanced set.
    pub fn shots(&self) -> usize {
        self.labels.len() / self.ways().max(1)
    }

    /// One-hot label row for support image `i`.
    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_classes];
        row[self.labels[i] as usize] = 1.0;
        row
    }

    /// Test-time CODER over the same text set and options as the support rows.
    pub fn test_coder(&self, images: &FeatureMatrix) -> Result<CoderMatrix> {
        image_coder(images, &self.texts, self.options)
    }
}

/// Affinity of one test CODER to every support image.
pub fn affinity(s_i: &[f32], cache: &SupportCache, p: &AdapterParams) -> Result<Vec<f64>> {
    p.validate()?;
    let support = cache.s_train();
    if support.rows() == 0 {
        return Err(FewShotError::EmptySupport);
    }
    if s_i.len() != support.cols() {
        return Err(FewShotError::Shape(format!(
            "test coder length {} vs support coder length {}",
            s_i.len(),
            support.cols()
        )));
    }
    let inner: Vec<f64> = (0..support.rows())
        .map(|n| {
            s_i.iter()
                .zip(support.row(n))
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum()
        })
        .collect();
    let normed = match p.norm {
        NormMode::MinMax => {
            let lo = inner.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = inner.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                inner.iter().map(|v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![0.5; inner.len()]
            }
        }
        NormMode::L2 => {
            let n = inner.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                inner.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; inner.len()]
            }
        }
    };
    Ok(normed
        .into_iter()
        .map(|v| (-p.beta * (1.0 - v / p.temperature)).exp())
        .collect())
}

/// `alpha · (A · L_train) + zs_logits`.
pub fn adapt_logits(zs_logits: &ClassScores, s_i: &[f32], cache: &SupportCache, p: &AdapterParams) -> Result<ClassScores> {
    if zs_logits.len() != cache.n_classes() {
        return Err(FewShotError::Shape(format!(
            "{} zero-shot logits for {} classes",
            zs_logits.len(),
            cache.n_classes()
        )));
    }
    let a = affinity(s_i, cache, p)?;
    let mut mass = vec![0.0; cache.n_classes()];
    for (w, &label) in a.iter().zip(cache.labels()) {
        mass[label as usize] += w;
    }
    Ok(ClassScores(
        zs_logits
            .0
            .iter()
            .zip(&mass)
            .map(|(z, m)| p.alpha * m + z)
            .collect(),
    ))
}

/// Plain zero-shot logits: scaled cosine to each class's averaged class-name
/// text embedding.
pub fn class_name_logits(images: &FeatureMatrix, texts: &EmbeddingBundle) -> Result<Vec<ClassScores>> {
    let records = texts.text_records().ok_or(FewShotError::WrongKind {
        expected: "text",
        found: texts.records.kind(),
    })?;
    let n = texts.class_names.len();
    let dim = texts.features.dim();
    let unit = if texts.features.is_normalized() {
        texts.features.clone()
    } else {
        texts.features.normalize_rows()?
    };
    let mut centers = vec![vec![0f64; dim]; n];
    let mut counts = vec![0usize; n];
    for (i, r) in records.iter().enumerate() {
        if r.family == Family::ClassName {
            let c = r.class_id as usize;
            counts[c] += 1;
            for (acc, &v) in centers[c].iter_mut().zip(unit.row(i)) {
                *acc += f64::from(v);
            }
        }
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(FewShotError::NoClassNameText(c));
    }
    let rows: Vec<Vec<f32>> = centers
        .iter()
        .map(|c| c.iter().map(|&v| v as f32).collect())
        .collect();
    let class_matrix = FeatureMatrix::from_rows(&rows, false)?;
    let cos = build_coder(images, &class_matrix, PsiMapping::Identity)?;
    Ok((0..cos.rows())
        .map(|i| ClassScores(cos.row(i).iter().map(|&v| LOGIT_SCALE * f64::from(v)).collect()))
        .collect())
}

/// Predicted class per test image.
pub fn predict(
    zs_logits: &[ClassScores],
    coders: &CoderMatrix,
    cache: &SupportCache,
    p: &AdapterParams,
) -> Result<Vec<usize>> {
    if zs_logits.len() != coders.rows() {
        return Err(FewShotError::Shape(format!(
            "{} logit rows for {} images",
            zs_logits.len(),
            coders.rows()
        )));
    }
    (0..coders.rows())
        .into_par_iter()
        .map(|i| {
            let out = adapt_logits(&zs_logits[i], coders.row(i), cache, p)?;
            Ok(out.argmax().unwrap_or(0))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub best: AdapterParams,
    pub accuracy: f64,
    /// Accuracy of every grid point, in grid order.
    pub scores: Vec<(AdapterParams, f64)>,
}

/// Picks the grid point with the highest validation accuracy; ties keep the
/// earliest point.
pub fn grid_search(
    grid: &[AdapterParams],
    val_coders: &CoderMatrix,
    val_labels: &[u32],
    val_zs_logits: &[ClassScores],
    cache: &SupportCache,
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(FewShotError::EmptyGrid);
    }
    if val_labels.is_empty() {
        return Err(FewShotError::EmptyValidation);
    }
    if val_labels.len() != val_coders.rows() {
        return Err(FewShotError::Shape(format!(
            "{} validation labels for {} coder rows",
            val_labels.len(),
            val_coders.rows()
        )));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for p in grid {
        let preds = predict(val_zs_logits, val_coders, cache, p)?;
        let correct = preds
            .iter()
            .zip(val_labels)
            .filter(|(&p, &l)| p == l as usize)
            .count();
        scores.push((*p, correct as f64 / val_labels.len() as f64));
    }
    let accs: Vec<f64> = scores.iter().map(|s| s.1).collect();
    let best = argmax(&accs).expect("grid is non-empty");
    Ok(GridSearchResult {
        best: scores[best].0,
        accuracy: scores[best].1,
        scores,
    })
}
