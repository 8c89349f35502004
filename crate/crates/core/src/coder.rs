//! Cross-modal neighbor representations.
//!
//! An image's CODER is its vector of cosine similarities against an ordered
//! text set. Each entry belongs to one text record, so the vector can be cut
//! into per-class, per-family slices and scored by the heuristic classifier.

use rayon::prelude::*;
use thiserror::Error;

use crate::embedding_store::{row_norm, CoderColumn, Family, FeatureMatrix, TextRecord, MIN_ROW_NORM};

#[derive(Debug, Error, PartialEq)]
pub enum CoderError {
    #[error("dimension mismatch: images have dim {images}, texts have dim {texts}")]
    DimensionMismatch { images: usize, texts: usize },
    #[error("degenerate {side} row {row}")]
    DegenerateRow { side: &'static str, row: usize },
    #[error("no class-name entries to score")]
    NoClassNameEntries,
    #[error("class {0} has neither class-name nor synonym entries")]
    NoNameEntries(usize),
    #[error("record {id} has class_id {class_id} outside {n_classes} classes")]
    ClassOutOfRange { id: u64, class_id: u32, n_classes: usize },
    #[error("coder length {actual} does not match layout length {expected}")]
    LengthMismatch { expected: usize, actual: usize },
}

pub type Result<T, E = CoderError> = std::result::Result<T, E>;

/// Mapping applied to each cosine similarity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum PsiMapping {
    #[default]
    Identity,
}

impl PsiMapping {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            PsiMapping::Identity => x,
        }
    }
}

/// CODER vectors for a batch of images, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct CoderMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl CoderMatrix {
    pub fn from_raw(rows: usize, cols: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), rows * cols);
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Keeps only the listed columns, in the listed order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let row = self.row(i);
            values.extend(cols.iter().map(|&c| row[c]));
        }
        Self {
            rows: self.rows,
            cols: cols.len(),
            values,
        }
    }

    pub fn into_feature_matrix(self) -> FeatureMatrix {
        FeatureMatrix::new(self.rows, self.cols, self.values, false)
            .expect("coder values are finite")
    }
}

fn inverse_norms(m: &FeatureMatrix, side: &'static str) -> Result<Vec<f64>> {
    m.iter_rows()
        .enumerate()
        .map(|(row, r)| {
            let n = row_norm(r);
            if n < MIN_ROW_NORM || !n.is_finite() {
                Err(CoderError::DegenerateRow { side, row })
            } else {
                Ok(1.0 / n)
            }
        })
        .collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// `out[i][k] = psi(cos(image_i, text_k))`.
pub fn build_coder(
    image_features: &FeatureMatrix,
    text_features: &FeatureMatrix,
    psi: PsiMapping,
) -> Result<CoderMatrix> {
    let img_inv = inverse_norms(image_features, "image")?;
    project(image_features, Some(&img_inv), text_features, psi)
}

/// Projects raw (unnormalized) image rows onto unit-normalized text rows.
/// This is the support-set form used by the few-shot adapter.
pub fn project_raw(
    image_features: &FeatureMatrix,
    text_features: &FeatureMatrix,
    psi: PsiMapping,
) -> Result<CoderMatrix> {
    project(image_features, None, text_features, psi)
}

fn project(
    images: &FeatureMatrix,
    image_inv_norms: Option<&[f64]>,
    texts: &FeatureMatrix,
    psi: PsiMapping,
) -> Result<CoderMatrix> {
    if images.dim() != texts.dim() && images.rows() > 0 && texts.rows() > 0 {
        return Err(CoderError::DimensionMismatch {
            images: images.dim(),
            texts: texts.dim(),
        });
    }
    let text_inv = inverse_norms(texts, "text")?;
    let cols = texts.rows();
    let mut values = vec![0f32; images.rows() * cols];
    if cols > 0 {
        values
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, out)| {
                let x = images.row(i);
                let scale = image_inv_norms.map_or(1.0, |n| n[i]);
                for (k, o) in out.iter_mut().enumerate() {
                    *o = psi.apply(dot(x, texts.row(k)) * scale * text_inv[k]) as f32;
                }
            });
    }
    Ok(CoderMatrix {
        rows: images.rows(),
        cols,
        values,
    })
}

/// Column layout of a CODER vector, mirroring the text bundle row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoderLayout {
    pub columns: Vec<CoderColumn>,
}

impl CoderLayout {
    pub fn from_records(records: &[TextRecord]) -> Self {
        Self {
            columns: records
                .iter()
                .map(|r| CoderColumn {
                    id: r.id,
                    family: r.family,
                    class_id: r.class_id,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// Index slices of one class's entries, split by family.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassSlices {
    pub ori: Vec<usize>,
    pub att: Vec<usize>,
    pub ana: Vec<usize>,
    pub syn: Vec<usize>,
}

/// Per-class family slices into a CODER vector. One-to-one columns are never
/// part of any slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    classes: Vec<ClassSlices>,
    len: usize,
}

impl ClassPartition {
    pub fn from_layout(layout: &CoderLayout, n_classes: usize) -> Result<Self> {
        let mut classes = vec![ClassSlices::default(); n_classes];
        for (k, col) in layout.columns.iter().enumerate() {
            let c = col.class_id as usize;
            if c >= n_classes {
                return Err(CoderError::ClassOutOfRange {
                    id: col.id,
                    class_id: col.class_id,
                    n_classes,
                });
            }
            let slot = &mut classes[c];
            match col.family {
                Family::ClassName => slot.ori.push(k),
                Family::Attribute => slot.att.push(k),
                Family::AnalogousClass => slot.ana.push(k),
                Family::Synonym => slot.syn.push(k),
                Family::OneToOne => {}
            }
        }
        Ok(Self {
            classes,
            len: layout.len(),
        })
    }

    pub fn from_records(records: &[TextRecord], n_classes: usize) -> Result<Self> {
        Self::from_layout(&CoderLayout::from_records(records), n_classes)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, j: usize) -> &ClassSlices {
        &self.classes[j]
    }

    /// Length of the CODER vectors this partition indexes.
    pub fn coder_len(&self) -> usize {
        self.len
    }

    fn check_len(&self, coder: &[f32]) -> Result<()> {
        if coder.len() == self.len {
            Ok(())
        } else {
            Err(CoderError::LengthMismatch {
                expected: self.len,
                actual: coder.len(),
            })
        }
    }
}

/// Borrowed per-family similarity values for one class.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogitParts<'a> {
    pub ori: &'a [f64],
    pub att: &'a [f64],
    pub ana: &'a [f64],
    pub syn: &'a [f64],
}

/// Mean of the attribute and analogous entries together with the single
/// scalar `max(ori ++ syn)`.
pub fn heuristic_logit(parts: LogitParts<'_>) -> Result<f64> {
    let name_max = parts
        .ori
        .iter()
        .chain(parts.syn)
        .copied()
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or(CoderError::NoNameEntries(0))?;
    let sum: f64 = parts.att.iter().chain(parts.ana).sum::<f64>() + name_max;
    let count = parts.att.len() + parts.ana.len() + 1;
    Ok(sum / count as f64)
}

/// Per-class scores, indexed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores(pub Vec<f64>);

impl ClassScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest score; ties go to the lowest class id.
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.0)
    }
}

/// First index holding the maximum. NaN entries never win.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ if v.is_nan() => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

fn gather(coder: &[f32], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&k| f64::from(coder[k])).collect()
}

/// Stage-1 heuristic logits, one per class in class-id order.
pub fn stage1_logits(coder: &[f32], partition: &ClassPartition) -> Result<ClassScores> {
    partition.check_len(coder)?;
    let mut out = Vec::with_capacity(partition.n_classes());
    for (j, s) in partition.classes.iter().enumerate() {
        let (ori, att, ana, syn) = (
            gather(coder, &s.ori),
            gather(coder, &s.att),
            gather(coder, &s.ana),
            gather(coder, &s.syn),
        );
        let logit = heuristic_logit(LogitParts {
            ori: &ori,
            att: &att,
            ana: &ana,
            syn: &syn,
        })
        .map_err(|_| CoderError::NoNameEntries(j))?;
        out.push(logit);
    }
    Ok(ClassScores(out))
}

/// Class owning the single largest class-name entry (nearest-text baseline).
pub fn one_nn_class(coder: &[f32], partition: &ClassPartition) -> Result<usize> {
    partition.check_len(coder)?;
    let mut best: Option<(usize, f32)> = None;
    for (j, s) in partition.classes.iter().enumerate() {
        for &k in &s.ori {
            let v = coder[k];
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((j, v)),
            }
        }
    }
    best.map(|(j, _)| j).ok_or(CoderError::NoClassNameEntries)
}
