//! Portable, checksummed experience bundles. Learned values and visit counts
//! travel with the records so a fresh kernel starts from the donor's position.
//!
//! File layout: one header line
//! `{"format_version":1,"source_kernel_id":...,"record_count":N,"checksum":"<hex>"}`
//! followed by `N` JSON lines in ascending id order. The checksum is the
//! SHA-256 of everything after the header line.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::KernelConfig;
use crate::error::{KernelError, Result};
use crate::experience::{
    ExperienceDraft, ExperienceId, ExperienceRecord, ExperienceStore, InsertOutcome, RecordFilter,
};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub format_version: u32,
    pub source_kernel_id: String,
    pub record_count: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceBundle {
    pub header: BundleHeader,
    pub records: Vec<ExperienceRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub added: usize,
    pub replaced: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ImportOptions {
    /// Start every imported record from zero visits.
    pub reset_visits: bool,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serialises the (optionally filtered) store into bundle bytes. Output is
/// deterministic for a given store state.
pub fn export(store: &ExperienceStore, filter: Option<&RecordFilter>, source_kernel_id: &str) -> Result<Vec<u8>> {
    let mut records = match filter {
        Some(f) => store.list(f),
        None => store.records().to_vec(),
    };
    records.sort_by_key(|r| r.id);
    let mut body = String::new();
    for record in &records {
        body.push_str(&serde_json::to_string(record)?);
        body.push('\n');
    }
    let header = BundleHeader {
        format_version: BUNDLE_FORMAT_VERSION,
        source_kernel_id: source_kernel_id.to_string(),
        record_count: records.len(),
        checksum: sha256_hex(body.as_bytes()),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    out.push_str(&body);
    Ok(out.into_bytes())
}

/// Parses and verifies bundle bytes.
pub fn parse(bytes: &[u8]) -> Result<ExperienceBundle> {
    let split = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| KernelError::Corrupt("bundle has no header line".into()))?;
    let (head, body) = (&bytes[..split], &bytes[split + 1..]);
    let header: BundleHeader = serde_json::from_slice(head)?;
    if header.format_version != BUNDLE_FORMAT_VERSION {
        return Err(KernelError::UnsupportedVersion(header.format_version));
    }
    let actual = sha256_hex(body);
    if actual != header.checksum {
        return Err(KernelError::Checksum {
            expected: header.checksum,
            actual,
        });
    }
    let text = std::str::from_utf8(body).map_err(|e| KernelError::Corrupt(e.to_string()))?;
    let records = text
        .lines()
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<ExperienceRecord>, _>>()?;
    if records.len() != header.record_count {
        return Err(KernelError::Corrupt(format!(
            "header promises {} records, body has {}",
            header.record_count,
            records.len()
        )));
    }
    if records.windows(2).any(|w| w[0].id >= w[1].id) {
        return Err(KernelError::Corrupt(
            "bundle records are not in ascending id order".into(),
        ));
    }
    Ok(ExperienceBundle { header, records })
}

/// Imports a bundle through the store's normal insert path (so
/// near-duplicate replacement applies) as one all-or-nothing batch.
///
/// A record whose near-duplicate incumbent already has identical content is
/// skipped. Provenance links are remapped to the ids the referenced records
/// received in this import; links to records outside the bundle are dropped.
pub fn import(
    store: &mut ExperienceStore,
    bytes: &[u8],
    config: &KernelConfig,
    options: ImportOptions,
) -> Result<ImportReport> {
    let bundle = parse(bytes)?;
    let mut tx = store.begin();
    let mut report = ImportReport::default();
    let mut remap: HashMap<ExperienceId, ExperienceId> = HashMap::new();
    for record in bundle.records {
        let scratch = tx.store();
        if let Some(found) = scratch.find_near_duplicate(&record.intent, &record.script, config) {
            let incumbent = scratch.get(found.id)?;
            if incumbent.intent == record.intent
                && incumbent.script == record.script
                && incumbent.digest == record.digest
            {
                remap.insert(record.id, found.id);
                report.skipped += 1;
                continue;
            }
        }
        let mut used: Vec<ExperienceId> = record
            .used_experience_ids
            .iter()
            .filter_map(|id| remap.get(id).copied())
            .collect();
        used.sort_unstable();
        used.dedup();
        let draft = ExperienceDraft {
            intent: record.intent,
            script: record.script,
            digest: record.digest,
            initial_q: Some(record.q_values),
            visit_count: if options.reset_visits { 0 } else { record.visit_count },
            source_model: record.source_model,
            used_experience_ids: used,
        };
        match tx.store_mut().insert(draft, config)? {
            InsertOutcome::Added(id) => {
                remap.insert(record.id, id);
                report.added += 1;
            }
            InsertOutcome::Replaced(id) => {
                remap.insert(record.id, id);
                report.replaced += 1;
            }
        }
    }
    store.commit(tx)?;
    Ok(report)
}
