//! Hook for turning text records into features.
//!
//! The toolkit never runs a text encoder itself. [`ExporterCommand`] shells out
//! to an external exporter that reads a text-set JSON file and writes a bundle.

use std::collections::HashMap;
use std::process::Command;

use super::{AtgError, TextSetFile};
use crate::embedding_store::{read_bundle, EmbeddingBundle, Family, FeatureMatrix, TextRecord};

pub trait TextEncoder: Send + Sync {
    fn encoder_tag(&self) -> &str;

    /// One feature row per record, as a text bundle.
    fn encode(&self, records: &[TextRecord], class_names: &[String]) -> Result<EmbeddingBundle, AtgError>;
}

/// Runs `<program> <args..> --texts <in.json> --out <out.codr>`.
pub struct ExporterCommand {
    program: String,
    args: Vec<String>,
    encoder_tag: String,
}

impl ExporterCommand {
    pub fn new(program: impl Into<String>, args: Vec<String>, encoder_tag: impl Into<String>) -> Self {
        Self {
            program: program.into(),
            args,
            encoder_tag: encoder_tag.into(),
        }
    }

    /// Splits a whitespace-separated command line (no quoting support).
    pub fn from_command_line(cmd: &str, encoder_tag: impl Into<String>) -> Result<Self, AtgError> {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| AtgError::Encoder("empty exporter command".into()))?;
        Ok(Self::new(program, parts.collect(), encoder_tag))
    }
}

impl TextEncoder for ExporterCommand {
    fn encoder_tag(&self) -> &str {
        &self.encoder_tag
    }

    fn encode(&self, records: &[TextRecord], class_names: &[String]) -> Result<EmbeddingBundle, AtgError> {
        let dir = tempfile::tempdir()?;
        let input = dir.path().join("texts.json");
        let output = dir.path().join("texts.codr");
        let set = TextSetFile {
            class_names: class_names.to_vec(),
            records: records.to_vec(),
        };
        std::fs::write(&input, set.to_json()?)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg("--texts")
            .arg(&input)
            .arg("--out")
            .arg(&output)
            .status()
            .map_err(|e| AtgError::Encoder(format!("cannot run {}: {e}", self.program)))?;
        if !status.success() {
            return Err(AtgError::Encoder(format!("{} exited with {status}", self.program)));
        }
        let bundle = read_bundle(&output).map_err(|e| AtgError::Encoder(e.to_string()))?;
        if bundle.rows() != records.len() {
            return Err(AtgError::Encoder(format!(
                "exporter returned {} rows for {} records",
                bundle.rows(),
                records.len()
            )));
        }
        if bundle.encoder_tag != self.encoder_tag {
            tracing::warn!(
                expected = %self.encoder_tag,
                got = %bundle.encoder_tag,
                "exporter reported a different encoder tag"
            );
        }
        Ok(bundle)
    }
}

/// Encodes bare strings, returning rows in input order. Duplicates are
/// encoded once.
pub fn encode_names(encoder: &dyn TextEncoder, names: &[String]) -> Result<FeatureMatrix, AtgError> {
    let mut unique: Vec<String> = Vec::new();
    let mut slot = Vec::with_capacity(names.len());
    for n in names {
        let pos = match unique.iter().position(|u| u == n) {
            Some(p) => p,
            None => {
                unique.push(n.clone());
                unique.len() - 1
            }
        };
        slot.push(pos);
    }
    let records: Vec<TextRecord> = unique
        .iter()
        .enumerate()
        .map(|(i, n)| TextRecord {
            id: i as u64,
            text: n.clone(),
            family: Family::ClassName,
            class_id: i as u32,
            pair_class_id: None,
            template_id: "name".into(),
        })
        .collect();
    let bundle = encoder.encode(&records, &unique)?;
    let recs = bundle
        .text_records()
        .ok_or_else(|| AtgError::Encoder("encoder returned a non-text bundle".into()))?;
    let row_of: HashMap<u64, usize> = recs.iter().enumerate().map(|(row, r)| (r.id, row)).collect();
    let rows = slot
        .iter()
        .map(|&u| {
            row_of
                .get(&(u as u64))
                .copied()
                .ok_or_else(|| AtgError::Encoder(format!("encoder dropped name {:?}", unique[u])))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(bundle.features.select_rows(&rows))
}
