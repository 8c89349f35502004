//! Bundle file format and the in-memory feature/metadata model.
//!
//! A bundle is a single file holding a row-major `f32` matrix plus a JSON
//! metadata section describing one record per row:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CODR"
//! 4       4     version (u32 LE, = 1)
//! 8       4     rows (u32 LE)
//! 12      4     dim (u32 LE)
//! 16      8     metadata_len (u64 LE)
//! 24      n     metadata, UTF-8 JSON
//! 24+n    4·r·d payload, f32 LE, row-major
//! ```
//!
//! There is no padding anywhere. Serialization is deterministic, so writing
//! an unchanged bundle twice yields identical bytes.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CODR";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Rows whose Euclidean norm falls below this are treated as degenerate.
pub const MIN_ROW_NORM: f64 = 1e-12;
/// Tolerance on the unit-norm claim carried by `normalized = true`.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"CODR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated bundle: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("trailing bytes after payload: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("header declares {header} rows but metadata holds {records} records")]
    RowCountMismatch { header: usize, records: usize },
    #[error("malformed metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("degenerate feature row {row}: norm {norm:e} is below {MIN_ROW_NORM:e}")]
    DegenerateRow { row: usize, norm: f64 },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        let m = Self {
            rows,
            dim,
            data,
            normalized,
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds a matrix from row slices; all rows must share one length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], normalized: bool) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(StoreError::Invariant(format!(
                    "row {i} has length {}, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data, normalized)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            rows: 0,
            dim,
            data: Vec::new(),
            normalized: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.rows * self.dim {
            return Err(StoreError::Invariant(format!(
                "data length {} != rows {} x dim {}",
                self.data.len(),
                self.rows,
                self.dim
            )));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::Invariant(format!(
                "non-finite value at row {}, column {}",
                pos / self.dim.max(1),
                pos % self.dim.max(1)
            )));
        }
        if self.normalized {
            for i in 0..self.rows {
                let n = row_norm(self.row(i));
                if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(StoreError::Invariant(format!(
                        "row {i} has norm {n} but matrix is flagged normalized"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            dim: self.dim,
            data,
            normalized: self.normalized,
        }
    }

    /// Divides every row by its Euclidean norm.
    pub fn normalize_rows(&self) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.rows {
            let row = self.row(i);
            let norm = row_norm(row);
            if norm < MIN_ROW_NORM || !norm.is_finite() {
                return Err(StoreError::DegenerateRow { row: i, norm });
            }
            data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
        }
        Ok(Self {
            rows: self.rows,
            dim: self.dim,
            data,
            normalized: true,
        })
    }
}

/// Free-function form of [`FeatureMatrix::normalize_rows`].
pub fn normalize_rows(m: &FeatureMatrix) -> Result<FeatureMatrix> {
    m.normalize_rows()
}

pub(crate) fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Text family a record belongs to. Declaration order is the canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ClassName,
    Attribute,
    AnalogousClass,
    Synonym,
    OneToOne,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::ClassName,
        Family::Attribute,
        Family::AnalogousClass,
        Family::Synonym,
        Family::OneToOne,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::ClassName => "class_name",
            Family::Attribute => "attribute",
            Family::AnalogousClass => "analogous_class",
            Family::Synonym => "synonym",
            Family::OneToOne => "one_to_one",
        }
    }

    /// Accepts the snake_case names plus the short ablation labels
    /// (`p`, `att`, `ana`, `syn`, `1v1`).
    pub fn parse(s: &str) -> Option<Family> {
        match s.trim().to_ascii_lowercase().as_str() {
            "class_name" | "p" | "ori" => Some(Family::ClassName),
            "attribute" | "att" => Some(Family::Attribute),
            "analogous_class" | "ana" => Some(Family::AnalogousClass),
            "synonym" | "syn" => Some(Family::Synonym),
            "one_to_one" | "1v1" => Some(Family::OneToOne),
            _ => None,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One generated text and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: u64,
    pub text: String,
    pub family: Family,
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_class_id: Option<u32>,
    pub template_id: String,
}

impl TextRecord {
    fn canonical_key(&self) -> (u32, Family, u64) {
        (self.class_id, self.family, self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    #[serde(default)]
    pub label_class_id: Option<u32>,
    #[serde(default)]
    pub source_path: String,
}

/// Column descriptor of a dumped CODER matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoderColumn {
    pub id: u64,
    pub family: Family,
    pub class_id: u32,
}

/// Per-row records; the variant determines the bundle `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Records {
    Text {
        records: Vec<TextRecord>,
    },
    Image {
        records: Vec<ImageRecord>,
    },
    /// Image rows against text columns; `columns.len()` equals the bundle dim.
    Coder {
        records: Vec<ImageRecord>,
        columns: Vec<CoderColumn>,
    },
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Text { records } => records.len(),
            Records::Image { records } | Records::Coder { records, .. } => records.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Records::Text { .. } => "text",
            Records::Image { .. } => "image",
            Records::Coder { .. } => "coder",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    #[serde(flatten)]
    records: Records,
    class_names: Vec<String>,
    encoder_tag: String,
    normalized: bool,
}

/// Feature matrix plus aligned per-row records. Row `i` belongs to record `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub features: FeatureMatrix,
    pub records: Records,
    pub class_names: Vec<String>,
    pub encoder_tag: String,
}

impl EmbeddingBundle {
    pub fn text(
        features: FeatureMatrix,
        records: Vec<TextRecord>,
        class_names: Vec<String>,
        encoder_tag: impl Into<String>,
    ) -> Result<Self> {
        let b = Self {
            features,
            records: Records::Text { records },
            class_names,
            encoder_tag: encoder_tag.into(),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn image(
        features: FeatureMatrix,
        records: Vec<ImageRecord>,
        class_names: Vec<String>,
        encoder_tag: impl Into<String>,
    ) -> Result<Self> {
        let b = Self {
            features,
            records: Records::Image { records },
            class_names,
            encoder_tag: encoder_tag.into(),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    pub fn text_records(&self) -> Option<&[TextRecord]> {
        match &self.records {
            Records::Text { records } => Some(records),
            _ => None,
        }
    }

    pub fn image_records(&self) -> Option<&[ImageRecord]> {
        match &self.records {
            Records::Image { records } | Records::Coder { records, .. } => Some(records),
            Records::Text { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        if self.records.len() != self.features.rows() {
            return Err(StoreError::RowCountMismatch {
                header: self.features.rows(),
                records: self.records.len(),
            });
        }
        let n_classes = self.class_names.len();
        let check_class = |c: u32, what: &str| -> Result<()> {
            if (c as usize) < n_classes {
                Ok(())
            } else {
                Err(StoreError::Invariant(format!(
                    "{what} {c} out of range for {n_classes} classes"
                )))
            }
        };
        let mut ids = HashSet::new();
        match &self.records {
            Records::Text { records } => {
                let mut seen = HashSet::new();
                for r in records {
                    if !ids.insert(r.id) {
                        return Err(StoreError::Invariant(format!("duplicate record id {}", r.id)));
                    }
                    if r.text.is_empty() {
                        return Err(StoreError::Invariant(format!("record {} has empty text", r.id)));
                    }
                    check_class(r.class_id, "class_id")?;
                    match (r.family, r.pair_class_id) {
                        (Family::OneToOne, Some(p)) => {
                            check_class(p, "pair_class_id")?;
                            if p == r.class_id {
                                return Err(StoreError::Invariant(format!(
                                    "record {} pairs class {p} with itself",
                                    r.id
                                )));
                            }
                        }
                        (Family::OneToOne, None) => {
                            return Err(StoreError::Invariant(format!(
                                "one-to-one record {} lacks pair_class_id",
                                r.id
                            )))
                        }
                        (_, Some(_)) => {
                            return Err(StoreError::Invariant(format!(
                                "record {} has pair_class_id but family {}",
                                r.id, r.family
                            )))
                        }
                        (_, None) => {}
                    }
                    if !seen.insert((r.text.as_str(), r.family, r.class_id, r.pair_class_id)) {
                        return Err(StoreError::Invariant(format!(
                            "duplicate text {:?} for class {} family {}",
                            r.text, r.class_id, r.family
                        )));
                    }
                }
            }
            Records::Image { records } => {
                for r in records {
                    if !ids.insert(r.id) {
                        return Err(StoreError::Invariant(format!("duplicate image id {}", r.id)));
                    }
                    if let Some(c) = r.label_class_id {
                        check_class(c, "label_class_id")?;
                    }
                }
            }
            Records::Coder { records, columns } => {
                if columns.len() != self.features.dim() {
                    return Err(StoreError::Invariant(format!(
                        "coder bundle has {} columns but dim {}",
                        columns.len(),
                        self.features.dim()
                    )));
                }
                for r in records {
                    if !ids.insert(r.id) {
                        return Err(StoreError::Invariant(format!("duplicate image id {}", r.id)));
                    }
                    if let Some(c) = r.label_class_id {
                        check_class(c, "label_class_id")?;
                    }
                }
                for c in columns {
                    check_class(c.class_id, "column class_id")?;
                }
            }
        }
        Ok(())
    }

    /// Row permutation that puts records in canonical order: text records by
    /// `(class_id, family, id)`, image rows by `id`. Coder columns keep their order.
    fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        match &self.records {
            Records::Text { records } => order.sort_by_key(|&i| records[i].canonical_key()),
            Records::Image { records } | Records::Coder { records, .. } => {
                order.sort_by_key(|&i| records[i].id)
            }
        }
        order
    }

    pub fn is_canonical(&self) -> bool {
        self.canonical_order().iter().enumerate().all(|(a, &b)| a == b)
    }

    /// Reorders rows and records together into canonical order.
    pub fn canonicalize(&self) -> Self {
        let order = self.canonical_order();
        let features = self.features.select_rows(&order);
        let records = match &self.records {
            Records::Text { records } => Records::Text {
                records: order.iter().map(|&i| records[i].clone()).collect(),
            },
            Records::Image { records } => Records::Image {
                records: order.iter().map(|&i| records[i].clone()).collect(),
            },
            Records::Coder { records, columns } => Records::Coder {
                records: order.iter().map(|&i| records[i].clone()).collect(),
                columns: columns.clone(),
            },
        };
        Self {
            features,
            records,
            class_names: self.class_names.clone(),
            encoder_tag: self.encoder_tag.clone(),
        }
    }

    /// Serializes the canonical form of this bundle.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let canon;
        let b = if self.is_canonical() {
            self
        } else {
            canon = self.canonicalize();
            &canon
        };
        let meta = Metadata {
            records: b.records.clone(),
            class_names: b.class_names.clone(),
            encoder_tag: b.encoder_tag.clone(),
            normalized: b.features.is_normalized(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let rows = u32::try_from(b.features.rows())
            .map_err(|_| StoreError::Invariant("row count exceeds u32".into()))?;
        let dim = u32::try_from(b.features.dim())
            .map_err(|_| StoreError::Invariant("dim exceeds u32".into()))?;

        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + b.features.data().len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&rows.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for v in b.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let actual = bytes.len() as u64;
        if bytes.len() < HEADER_LEN {
            // A short file with the wrong magic is still a magic error.
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(StoreError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(StoreError::Truncated {
                expected: HEADER_LEN as u64,
                actual,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let rows = u32_at(8) as usize;
        let dim = u32_at(12) as usize;
        let meta_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap());

        let expected = (HEADER_LEN as u64)
            .checked_add(meta_len)
            .and_then(|v| v.checked_add((rows as u64) * (dim as u64) * 4))
            .ok_or_else(|| StoreError::Invariant("declared sizes overflow".into()))?;
        if actual < expected {
            return Err(StoreError::Truncated { expected, actual });
        }
        if actual > expected {
            return Err(StoreError::TrailingBytes { expected, actual });
        }

        let meta_end = HEADER_LEN + meta_len as usize;
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])?;
        if meta.records.len() != rows {
            return Err(StoreError::RowCountMismatch {
                header: rows,
                records: meta.records.len(),
            });
        }
        let data = bytes[meta_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let bundle = Self {
            features: FeatureMatrix::new(rows, dim, data, meta.normalized)?,
            records: meta.records,
            class_names: meta.class_names,
            encoder_tag: meta.encoder_tag,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Writes `bundle` atomically (temp file in the target directory, then rename).
/// Invariants are checked before anything touches the filesystem.
pub fn write_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = bundle.to_bytes()?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
    Ok(())
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    let bytes = fs::read(path)?;
    EmbeddingBundle::from_bytes(&bytes)
}
