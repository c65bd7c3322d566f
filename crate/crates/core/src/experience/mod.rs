//! The experience store: behavioural priors distilled from past episodes,
//! each carrying per-dimension reuse values learned through delayed credit.
//!
//! All mutation goes through one owner. Every mutation is first turned into
//! [`LogEntry`] values, handed to the journal, and only then applied through
//! the same code path that replays a log on reload, so the in-memory state
//! and the on-disk state cannot drift apart.

pub mod journal;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::KernelConfig;
use crate::credit::{credit_step, CreditEntry, CreditReport, TurnKey, UsageLink};
use crate::error::{KernelError, Result};
use crate::reward::{RewardVector, DIMENSIONS};
use crate::similarity::{Embedding, SimilarityProvider, TrigramProvider};

pub use journal::{FileJournal, Journal, LogEntry, MemoryJournal, Snapshot, SnapshotHeader};

/// Per-dimension value estimates, each in [-1, 1].
pub type QVector = [f64; DIMENSIONS];

/// Monotonically assigned record identifier. Identity is never derived from
/// content since near-duplicates differ textually.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExperienceId(pub u64);

impl fmt::Display for ExperienceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One stored behavioural prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub id: ExperienceId,
    /// Inferred intent of the episode; also the retrieval key.
    pub intent: String,
    /// Distilled execution script.
    pub script: String,
    /// Raw trajectory digest.
    pub digest: String,
    pub q_values: QVector,
    pub visit_count: u64,
    pub source_model: String,
    /// Experiences that were injected while this record's episode ran.
    pub used_experience_ids: Vec<ExperienceId>,
    pub revision: u32,
    pub created_at: u64,
    pub updated_at: u64,
}

impl ExperienceRecord {
    /// Scalar value `Σ_d λ_d Q_d`.
    pub fn q_scalar(&self, lambda: &[f64; DIMENSIONS]) -> f64 {
        crate::reward::weighted_sum(&self.q_values, lambda)
    }
}

/// Content for a new record, before an id is assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceDraft {
    pub intent: String,
    pub script: String,
    pub digest: String,
    /// Starting values; `None` means the zero vector.
    pub initial_q: Option<QVector>,
    /// Starting visit count, non-zero only for imported records.
    #[serde(default)]
    pub visit_count: u64,
    pub source_model: String,
    pub used_experience_ids: Vec<ExperienceId>,
}

impl ExperienceDraft {
    pub fn new(intent: impl Into<String>, script: impl Into<String>, digest: impl Into<String>) -> Self {
        ExperienceDraft {
            intent: intent.into(),
            script: script.into(),
            digest: digest.into(),
            initial_q: None,
            visit_count: 0,
            source_model: String::new(),
            used_experience_ids: Vec::new(),
        }
    }

    pub fn with_q(mut self, q: QVector) -> Self {
        self.initial_q = Some(q);
        self
    }

    pub fn with_source_model(mut self, model: impl Into<String>) -> Self {
        self.source_model = model.into();
        self
    }

    pub fn with_used(mut self, ids: Vec<ExperienceId>) -> Self {
        self.used_experience_ids = ids;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "id", rename_all = "snake_case")]
pub enum InsertOutcome {
    Added(ExperienceId),
    Replaced(ExperienceId),
}

impl InsertOutcome {
    pub fn id(&self) -> ExperienceId {
        match *self {
            InsertOutcome::Added(id) | InsertOutcome::Replaced(id) => id,
        }
    }
}

/// A near-duplicate incumbent found for a draft.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DuplicateMatch {
    pub id: ExperienceId,
    pub intent_similarity: f64,
    pub script_similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecordFilter {
    pub source_model: Option<String>,
    pub intent_contains: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotStats {
    pub records: usize,
    pub usage_links: usize,
}

/// Serializable view of the whole store, used for equality checks between a
/// live store and a reloaded one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    pub next_id: u64,
    pub clock: u64,
    pub records: Vec<ExperienceRecord>,
    pub usage: Vec<UsageLink>,
}

#[derive(Clone)]
struct Keys {
    intent: Embedding,
    script: Embedding,
}

/// Single-writer collection of experience records.
pub struct ExperienceStore {
    records: Vec<ExperienceRecord>,
    keys: Vec<Keys>,
    usage: Vec<UsageLink>,
    next_id: u64,
    clock: u64,
    provider: Arc<dyn SimilarityProvider>,
    journal: Option<Box<dyn Journal>>,
    /// Count of committed mutations, for transaction conflict checks.
    writes: u64,
}

/// Pending batch of store mutations; see [`ExperienceStore::begin`].
pub struct Transaction {
    scratch: ExperienceStore,
    journal: MemoryJournal,
    base_writes: u64,
}

impl Transaction {
    pub fn store(&self) -> &ExperienceStore {
        &self.scratch
    }

    pub fn store_mut(&mut self) -> &mut ExperienceStore {
        &mut self.scratch
    }
}

impl fmt::Debug for ExperienceStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExperienceStore")
            .field("records", &self.records.len())
            .field("usage", &self.usage.len())
            .field("clock", &self.clock)
            .finish()
    }
}

impl Default for ExperienceStore {
    fn default() -> Self {
        Self::in_memory(Arc::new(TrigramProvider::default()))
    }
}

fn check_q(q: &QVector) -> Result<()> {
    if q.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(KernelError::InvalidInput(format!("q values {q:?} outside [-1, 1]")))
    }
}

impl ExperienceStore {
    /// A store with no persistence.
    pub fn in_memory(provider: Arc<dyn SimilarityProvider>) -> Self {
        ExperienceStore {
            records: Vec::new(),
            keys: Vec::new(),
            usage: Vec::new(),
            next_id: 1,
            clock: 0,
            provider,
            journal: None,
            writes: 0,
        }
    }

    /// A store writing every mutation to `journal`.
    pub fn with_journal(provider: Arc<dyn SimilarityProvider>, journal: Box<dyn Journal>) -> Self {
        let mut store = Self::in_memory(provider);
        store.journal = Some(journal);
        store
    }

    /// Opens a file-backed store in `dir`, replaying snapshot and log.
    pub fn open(dir: &Path, provider: Arc<dyn SimilarityProvider>) -> Result<Self> {
        let (journal, loaded) = FileJournal::open(dir)?;
        let mut store = Self::in_memory(provider);
        if let Some(snapshot) = &loaded.snapshot {
            store.restore(snapshot)?;
        }
        for entry in loaded.pending_entries() {
            store.apply(entry.clone())?;
        }
        store.journal = Some(Box::new(journal));
        Ok(store)
    }

    /// Rebuilds a store from a snapshot plus log entries, without a journal.
    pub fn replay(
        provider: Arc<dyn SimilarityProvider>,
        snapshot: Option<&Snapshot>,
        entries: &[LogEntry],
    ) -> Result<Self> {
        let mut store = Self::in_memory(provider);
        if let Some(snapshot) = snapshot {
            store.restore(snapshot)?;
        }
        for entry in entries {
            store.apply(entry.clone())?;
        }
        Ok(store)
    }

    fn restore(&mut self, snapshot: &Snapshot) -> Result<()> {
        for (i, record) in snapshot.records.iter().enumerate() {
            if record.id.0 != i as u64 + 1 {
                return Err(KernelError::Corrupt(format!(
                    "snapshot record {} out of sequence",
                    record.id
                )));
            }
            self.keys.push(self.keys_for(&record.intent, &record.script));
            self.records.push(record.clone());
        }
        self.usage = snapshot.header.usage.clone();
        self.next_id = snapshot.header.next_id;
        self.clock = snapshot.header.clock;
        Ok(())
    }

    pub fn provider(&self) -> &Arc<dyn SimilarityProvider> {
        &self.provider
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn get(&self, id: ExperienceId) -> Result<&ExperienceRecord> {
        self.index_of(id)
            .map(|i| &self.records[i])
            .ok_or_else(|| KernelError::not_found("experience", id))
    }

    pub fn contains(&self, id: ExperienceId) -> bool {
        self.index_of(id).is_some()
    }

    /// Records ordered by creation time, then id.
    pub fn list(&self, filter: &RecordFilter) -> Vec<ExperienceRecord> {
        let needle = filter.intent_contains.as_ref().map(|s| s.to_lowercase());
        let mut out: Vec<ExperienceRecord> = self
            .records
            .iter()
            .filter(|r| filter.source_model.as_ref().is_none_or(|m| &r.source_model == m))
            .filter(|r| needle.as_ref().is_none_or(|n| r.intent.to_lowercase().contains(n)))
            .cloned()
            .collect();
        out.sort_by_key(|r| (r.created_at, r.id));
        out
    }

    pub fn records(&self) -> &[ExperienceRecord] {
        &self.records
    }

    pub fn usage_links(&self) -> &[UsageLink] {
        &self.usage
    }

    pub fn state(&self) -> StoreState {
        StoreState {
            next_id: self.next_id,
            clock: self.clock,
            records: self.records.clone(),
            usage: self.usage.clone(),
        }
    }

    pub(crate) fn intent_key(&self, id: ExperienceId) -> Option<&Embedding> {
        self.index_of(id).map(|i| &self.keys[i].intent)
    }

    fn index_of(&self, id: ExperienceId) -> Option<usize> {
        let idx = id.0.checked_sub(1)? as usize;
        (idx < self.records.len()).then_some(idx)
    }

    fn keys_for(&self, intent: &str, script: &str) -> Keys {
        Keys {
            intent: self.provider.embed(intent),
            script: self.provider.embed(script),
        }
    }

    /// Finds the incumbent that both similarity thresholds accept, preferring
    /// the highest intent similarity, then script similarity, then older id.
    pub fn find_near_duplicate(&self, intent: &str, script: &str, config: &KernelConfig) -> Option<DuplicateMatch> {
        let probe = self.keys_for(intent, script);
        self.near_duplicate_of(&probe, config)
    }

    fn near_duplicate_of(&self, probe: &Keys, config: &KernelConfig) -> Option<DuplicateMatch> {
        let mut best: Option<DuplicateMatch> = None;
        for (record, keys) in self.records.iter().zip(&self.keys) {
            let intent_similarity = self.provider.similarity(&probe.intent, &keys.intent);
            if intent_similarity < config.tau_intent {
                continue;
            }
            let script_similarity = self.provider.similarity(&probe.script, &keys.script);
            if script_similarity < config.tau_script {
                continue;
            }
            let better = best
                .is_none_or(|b| (intent_similarity, script_similarity) > (b.intent_similarity, b.script_similarity));
            if better {
                best = Some(DuplicateMatch {
                    id: record.id,
                    intent_similarity,
                    script_similarity,
                });
            }
        }
        best
    }

    fn validate_draft(&self, draft: &ExperienceDraft) -> Result<()> {
        for (name, text) in [
            ("intent", &draft.intent),
            ("script", &draft.script),
            ("digest", &draft.digest),
        ] {
            if text.trim().is_empty() {
                return Err(KernelError::InvalidInput(format!("experience {name} is empty")));
            }
        }
        if let Some(q) = &draft.initial_q {
            check_q(q)?;
        }
        let mut seen = HashSet::new();
        for id in &draft.used_experience_ids {
            if !self.contains(*id) {
                return Err(KernelError::not_found("experience", id));
            }
            if !seen.insert(*id) {
                return Err(KernelError::InvalidInput(format!("experience {id} listed twice")));
            }
        }
        Ok(())
    }

    /// Adds a record, or folds it into a near-duplicate incumbent when both
    /// intent and script similarity reach their thresholds. A replaced
    /// incumbent adopts the new content and provenance but keeps its values
    /// and visit count.
    pub fn insert(&mut self, draft: ExperienceDraft, config: &KernelConfig) -> Result<InsertOutcome> {
        self.validate_draft(&draft)?;
        let probe = self.keys_for(&draft.intent, &draft.script);
        let at = self.clock + 1;
        if let Some(found) = self.near_duplicate_of(&probe, config) {
            let incumbent = self.get(found.id)?;
            let entry = LogEntry::Replace {
                id: found.id,
                intent: draft.intent,
                script: draft.script,
                digest: draft.digest,
                source_model: draft.source_model,
                used_experience_ids: draft.used_experience_ids,
                revision: incumbent.revision + 1,
                updated_at: at,
            };
            self.write(vec![entry])?;
            return Ok(InsertOutcome::Replaced(found.id));
        }
        let id = ExperienceId(self.next_id);
        let record = ExperienceRecord {
            id,
            intent: draft.intent,
            script: draft.script,
            digest: draft.digest,
            q_values: draft.initial_q.unwrap_or([0.0; DIMENSIONS]),
            visit_count: draft.visit_count,
            source_model: draft.source_model,
            used_experience_ids: draft.used_experience_ids,
            revision: 0,
            created_at: at,
            updated_at: at,
        };
        self.write(vec![LogEntry::Insert { record }])?;
        Ok(InsertOutcome::Added(id))
    }

    /// Records that `ids` were injected into `turn`: each visit count grows by
    /// one and the usage link is kept for later credit.
    pub fn record_usage(&mut self, turn: TurnKey, ids: &[ExperienceId]) -> Result<UsageLink> {
        let mut seen = HashSet::new();
        for id in ids {
            if !self.contains(*id) {
                return Err(KernelError::not_found("experience", id));
            }
            if !seen.insert(*id) {
                return Err(KernelError::InvalidInput(format!("experience {id} injected twice")));
            }
        }
        if self.usage.iter().any(|link| link.turn == turn) {
            return Err(KernelError::Rejected(format!("usage for turn {turn} already recorded")));
        }
        let entry = LogEntry::Visit {
            turn,
            ids: ids.to_vec(),
            updated_at: self.clock + 1,
        };
        self.write(vec![entry])?;
        Ok(UsageLink {
            turn,
            used_ids: ids.to_vec(),
        })
    }

    pub fn usage_for(&self, turn: TurnKey) -> Option<&UsageLink> {
        self.usage.iter().find(|link| link.turn == turn)
    }

    /// Moves the values of every record in `link` toward `reward`, all or
    /// none.
    pub fn apply_credit(&mut self, link: &UsageLink, reward: &RewardVector, alpha: f64) -> Result<CreditReport> {
        reward.validate()?;
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(KernelError::InvalidInput(format!("alpha {alpha} outside (0, 1]")));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = link.used_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(KernelError::InvalidInput(format!(
                "experience {dup} appears twice in the link"
            )));
        }
        let r = reward.dims();
        let target = reward.as_f64();
        let mut entries = Vec::with_capacity(link.used_ids.len());
        let mut report = Vec::with_capacity(link.used_ids.len());
        for id in &link.used_ids {
            let before = self.get(*id)?.q_values;
            let after = credit_step(&before, &target, alpha, reward.confidence);
            entries.push(LogEntry::Credit {
                id: *id,
                t: link.turn.index,
                alpha,
                c: reward.confidence,
                r,
                q_before: before,
                q_after: after,
            });
            report.push(CreditEntry { id: *id, before, after });
        }
        if !entries.is_empty() {
            self.write(entries)?;
        }
        Ok(CreditReport {
            turn: link.turn,
            entries: report,
        })
    }

    /// Starts a batch of mutations against a private copy of the store.
    /// Nothing is visible or durable until [`ExperienceStore::commit`].
    pub fn begin(&self) -> Transaction {
        let journal = MemoryJournal::new();
        let scratch = ExperienceStore {
            records: self.records.clone(),
            keys: self.keys.clone(),
            usage: self.usage.clone(),
            next_id: self.next_id,
            clock: self.clock,
            provider: Arc::clone(&self.provider),
            journal: Some(Box::new(journal.clone())),
            writes: 0,
        };
        Transaction {
            scratch,
            journal,
            base_writes: self.writes,
        }
    }

    /// Makes a transaction's mutations durable with a single journal append
    /// and swaps its state in. Fails without effect if the journal write
    /// fails or the store changed since [`ExperienceStore::begin`].
    pub fn commit(&mut self, tx: Transaction) -> Result<()> {
        if tx.base_writes != self.writes {
            return Err(KernelError::Rejected("store changed during transaction".into()));
        }
        let entries = tx.journal.entries();
        if entries.is_empty() {
            return Ok(());
        }
        if let Some(journal) = self.journal.as_mut() {
            journal.append(&entries)?;
        }
        let scratch = tx.scratch;
        self.records = scratch.records;
        self.keys = scratch.keys;
        self.usage = scratch.usage;
        self.next_id = scratch.next_id;
        self.clock = scratch.clock;
        self.writes += 1;
        Ok(())
    }

    /// Folds the log into a snapshot file (file-backed stores) and returns
    /// what the snapshot holds.
    pub fn compact(&mut self) -> Result<SnapshotStats> {
        let snapshot = Snapshot {
            header: SnapshotHeader {
                format_version: journal::FORMAT_VERSION,
                generation: 0,
                next_id: self.next_id,
                clock: self.clock,
                usage: self.usage.clone(),
            },
            records: self.records.clone(),
        };
        if let Some(journal) = self.journal.as_mut() {
            journal.compact(&snapshot)?;
        }
        Ok(SnapshotStats {
            records: self.records.len(),
            usage_links: self.usage.len(),
        })
    }

    fn write(&mut self, entries: Vec<LogEntry>) -> Result<()> {
        if let Some(journal) = self.journal.as_mut() {
            journal.append(&entries)?;
        }
        self.writes += 1;
        for entry in entries {
            self.apply(entry)?;
        }
        Ok(())
    }

    /// Applies one log entry. Used both for live mutations (after the entry
    /// is durable) and for replay.
    fn apply(&mut self, entry: LogEntry) -> Result<()> {
        match entry {
            LogEntry::Insert { record } => {
                if record.id.0 != self.next_id {
                    return Err(KernelError::Corrupt(format!(
                        "insert of id {} but next id is {}",
                        record.id, self.next_id
                    )));
                }
                self.keys.push(self.keys_for(&record.intent, &record.script));
                self.next_id += 1;
                self.clock = self.clock.max(record.updated_at);
                self.records.push(record);
            }
            LogEntry::Replace {
                id,
                intent,
                script,
                digest,
                source_model,
                used_experience_ids,
                revision,
                updated_at,
            } => {
                let idx = self
                    .index_of(id)
                    .ok_or_else(|| KernelError::Corrupt(format!("replace of unknown id {id}")))?;
                self.keys[idx] = self.keys_for(&intent, &script);
                let record = &mut self.records[idx];
                record.intent = intent;
                record.script = script;
                record.digest = digest;
                record.source_model = source_model;
                record.used_experience_ids = used_experience_ids;
                record.revision = revision;
                record.updated_at = updated_at;
                self.clock = self.clock.max(updated_at);
            }
            LogEntry::Credit {
                id, q_before, q_after, ..
            } => {
                let idx = self
                    .index_of(id)
                    .ok_or_else(|| KernelError::Corrupt(format!("credit of unknown id {id}")))?;
                let record = &mut self.records[idx];
                if record.q_values != q_before {
                    return Err(KernelError::Corrupt(format!(
                        "credit for {id} expects {q_before:?}, store has {:?}",
                        record.q_values
                    )));
                }
                record.q_values = q_after;
            }
            LogEntry::Visit { turn, ids, updated_at } => {
                for id in &ids {
                    let idx = self
                        .index_of(*id)
                        .ok_or_else(|| KernelError::Corrupt(format!("visit of unknown id {id}")))?;
                    self.records[idx].visit_count += 1;
                    self.records[idx].updated_at = updated_at;
                }
                self.clock = self.clock.max(updated_at);
                self.usage.push(UsageLink { turn, used_ids: ids });
            }
        }
        Ok(())
    }
}
