//! Identity-bearing persistence: typed long-term memory, notes, the profile
//! and social contacts.
//!
//! This module is kept apart from the experience store on purpose. It never
//! reads or writes experience records.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{KernelError, Result};
use crate::similarity::SimilarityProvider;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryCategory {
    #[serde(rename = "self")]
    SelfModel,
    User,
    Relationship,
    Preference,
    Asset,
    Insight,
    Knowledge,
    General,
}

impl MemoryCategory {
    pub const ALL: [MemoryCategory; 8] = [
        MemoryCategory::SelfModel,
        MemoryCategory::User,
        MemoryCategory::Relationship,
        MemoryCategory::Preference,
        MemoryCategory::Asset,
        MemoryCategory::Insight,
        MemoryCategory::Knowledge,
        MemoryCategory::General,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MemoryCategory::SelfModel => "self",
            MemoryCategory::User => "user",
            MemoryCategory::Relationship => "relationship",
            MemoryCategory::Preference => "preference",
            MemoryCategory::Asset => "asset",
            MemoryCategory::Insight => "insight",
            MemoryCategory::Knowledge => "knowledge",
            MemoryCategory::General => "general",
        }
    }
}

impl fmt::Display for MemoryCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MemoryCategory {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self> {
        MemoryCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| KernelError::InvalidInput(format!("unknown memory category `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: u64,
    pub category: MemoryCategory,
    pub content: String,
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub display_name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub id: u64,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub name: String,
    pub address: String,
    #[serde(default)]
    pub friend: bool,
}

/// Resolves contact names to delivery addresses for the mailbox.
pub trait ContactDirectory {
    fn resolve_contact(&self, name: &str) -> Option<String>;
}

/// Similarity at or above which a text filter matches memory content.
pub const MATCH_THRESHOLD: f64 = 0.8;

#[derive(Clone, Serialize, Deserialize)]
pub struct IdentityMemory {
    entries: Vec<MemoryEntry>,
    notes: Vec<Note>,
    contacts: BTreeMap<String, Contact>,
    profile: Profile,
    next_id: u64,
    #[serde(skip)]
    provider: Option<Arc<dyn SimilarityProvider>>,
}

impl Default for IdentityMemory {
    fn default() -> Self {
        IdentityMemory {
            entries: Vec::new(),
            notes: Vec::new(),
            contacts: BTreeMap::new(),
            profile: Profile::default(),
            next_id: 1,
            provider: None,
        }
    }
}

impl fmt::Debug for IdentityMemory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IdentityMemory")
            .field("entries", &self.entries.len())
            .field("notes", &self.notes.len())
            .field("contacts", &self.contacts.len())
            .finish()
    }
}

impl PartialEq for IdentityMemory {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
            && self.notes == other.notes
            && self.contacts == other.contacts
            && self.profile == other.profile
            && self.next_id == other.next_id
    }
}

impl IdentityMemory {
    /// Memory whose text queries also match by similarity, not just substring.
    pub fn with_provider(provider: Arc<dyn SimilarityProvider>) -> Self {
        IdentityMemory {
            provider: Some(provider),
            ..Self::default()
        }
    }

    pub fn set_provider(&mut self, provider: Arc<dyn SimilarityProvider>) {
        self.provider = Some(provider);
    }

    fn next(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn memory_put(&mut self, category: MemoryCategory, content: &str, now: u64) -> Result<u64> {
        if content.trim().is_empty() {
            return Err(KernelError::InvalidInput("memory content is empty".into()));
        }
        let id = self.next();
        self.entries.push(MemoryEntry {
            id,
            category,
            content: content.to_string(),
            created_at: now,
            updated_at: now,
        });
        Ok(id)
    }

    /// Entries matching the optional filters, newest first.
    pub fn memory_query(&self, category: Option<MemoryCategory>, text: Option<&str>) -> Vec<MemoryEntry> {
        let needle = text.map(|t| (t.to_lowercase(), self.provider.as_ref().map(|p| p.embed(t))));
        let mut out: Vec<MemoryEntry> = self
            .entries
            .iter()
            .filter(|e| category.is_none_or(|c| e.category == c))
            .filter(|e| match &needle {
                None => true,
                Some((lower, probe)) => {
                    e.content.to_lowercase().contains(lower.as_str())
                        || match (probe, &self.provider) {
                            (Some(probe), Some(p)) => p.similarity(probe, &p.embed(&e.content)) >= MATCH_THRESHOLD,
                            _ => false,
                        }
                }
            })
            .cloned()
            .collect();
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then(b.id.cmp(&a.id)));
        out
    }

    pub fn note_put(&mut self, title: &str, body: &str) -> Result<u64> {
        if title.trim().is_empty() {
            return Err(KernelError::InvalidInput("note title is empty".into()));
        }
        let id = self.next();
        self.notes.push(Note {
            id,
            title: title.to_string(),
            body: body.to_string(),
        });
        Ok(id)
    }

    pub fn note_update(&mut self, id: u64, body: &str) -> Result<()> {
        let note = self
            .notes
            .iter_mut()
            .find(|n| n.id == id)
            .ok_or_else(|| KernelError::not_found("note", id))?;
        note.body = body.to_string();
        Ok(())
    }

    pub fn notes(&self) -> &[Note] {
        &self.notes
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn set_profile(&mut self, profile: Profile) {
        self.profile = profile;
    }

    /// Inserts or replaces the contact with this name.
    pub fn contact_upsert(&mut self, contact: Contact) -> Result<()> {
        if contact.name.trim().is_empty() {
            return Err(KernelError::InvalidInput("contact name is empty".into()));
        }
        self.contacts.insert(contact.name.clone(), contact);
        Ok(())
    }

    pub fn contact_resolve(&self, name: &str) -> Result<String> {
        self.contacts
            .get(name)
            .map(|c| c.address.clone())
            .ok_or_else(|| KernelError::not_found("contact", name))
    }

    pub fn contacts(&self) -> impl Iterator<Item = &Contact> {
        self.contacts.values()
    }
}

impl ContactDirectory for IdentityMemory {
    fn resolve_contact(&self, name: &str) -> Option<String> {
        self.contact_resolve(name).ok()
    }
}
