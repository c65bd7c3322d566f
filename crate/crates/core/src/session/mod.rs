//! Sessions as execution capsules: transcript, continuity texts, a local plan
//! graph, parent/child delegation, and the mailbox that carries messages
//! between them.

pub mod dag;
pub mod mailbox;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{KernelError, Result};
use crate::memory::ContactDirectory;

pub use dag::{DagMutation, DagNode, NodeStatus, PlanDag, PromotionReport};
pub use mailbox::{DeliveryState, Mailbox, MailboxMessage, MessageId, Outgoing, Reachability, Sender, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Agent,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub index: u64,
    pub role: Role,
    pub text: String,
}

/// Ordered messages of a session; an entry's index is its position.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript(Vec<TranscriptEntry>);

impl Transcript {
    pub fn push(&mut self, role: Role, text: impl Into<String>) -> u64 {
        let index = self.0.len() as u64;
        self.0.push(TranscriptEntry {
            index,
            role,
            text: text.into(),
        });
        index
    }

    pub fn get(&self, index: u64) -> Option<&TranscriptEntry> {
        self.0.get(usize::try_from(index).ok()?)
    }

    /// Entries strictly after `index`.
    pub fn after(&self, index: u64) -> impl Iterator<Item = &TranscriptEntry> {
        let start = usize::try_from(index).map_or(self.0.len(), |i| (i + 1).min(self.0.len()));
        self.0[start..].iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.0
    }
}

/// Why a session exists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionOrigin {
    Attached,
    ChildTask { node: Option<String> },
    Agenda { item: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: SessionId,
    /// Attachment key derived from the client's working directory.
    pub scope: String,
    pub parent_id: Option<SessionId>,
    pub children: Vec<SessionId>,
    pub origin: SessionOrigin,
    pub state: SessionState,
    pub transcript: Transcript,
    pub title: String,
    pub summary: String,
    pub snapshot: String,
    pub result: Option<String>,
    pub dag: PlanDag,
    pub created_at: u64,
}

impl SessionRecord {
    pub fn is_active(&self) -> bool {
        self.state == SessionState::Active
    }
}

/// Side effects of closing a session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompletionEffects {
    pub notified: Option<MessageId>,
    pub auto_completed: Option<String>,
    pub promoted: Vec<String>,
}

/// Owner of all sessions and the mailbox.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionKernel {
    sessions: BTreeMap<SessionId, SessionRecord>,
    next_id: u64,
    mailbox: Mailbox,
    retries: u32,
}

impl Default for SessionKernel {
    fn default() -> Self {
        Self::new(0)
    }
}

impl SessionKernel {
    pub fn new(mailbox_retries: u32) -> Self {
        SessionKernel {
            sessions: BTreeMap::new(),
            next_id: 1,
            mailbox: Mailbox::new(),
            retries: mailbox_retries,
        }
    }

    pub fn get(&self, id: SessionId) -> Result<&SessionRecord> {
        self.sessions
            .get(&id)
            .ok_or_else(|| KernelError::not_found("session", id))
    }

    fn get_mut(&mut self, id: SessionId) -> Result<&mut SessionRecord> {
        self.sessions
            .get_mut(&id)
            .ok_or_else(|| KernelError::not_found("session", id))
    }

    fn active_mut(&mut self, id: SessionId) -> Result<&mut SessionRecord> {
        let session = self.get_mut(id)?;
        if !session.is_active() {
            return Err(KernelError::Rejected(format!("session {id} is not active")));
        }
        Ok(session)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionRecord> {
        self.sessions.values()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn mailbox(&self) -> &Mailbox {
        &self.mailbox
    }

    /// Creates a session attached to `scope`, optionally as a child.
    pub fn create_session(&mut self, scope: &str, parent: Option<SessionId>, now: u64) -> Result<SessionId> {
        self.create_with(scope, parent, SessionOrigin::Attached, None, now)
    }

    pub(crate) fn create_with(
        &mut self,
        scope: &str,
        parent: Option<SessionId>,
        origin: SessionOrigin,
        seed: Option<&str>,
        now: u64,
    ) -> Result<SessionId> {
        if let Some(p) = parent {
            self.get(p)?;
        }
        let id = SessionId(self.next_id);
        self.next_id += 1;
        let mut transcript = Transcript::default();
        if let Some(seed) = seed {
            transcript.push(Role::User, seed);
        }
        self.sessions.insert(
            id,
            SessionRecord {
                id,
                scope: scope.to_string(),
                parent_id: parent,
                children: Vec::new(),
                origin,
                state: SessionState::Active,
                transcript,
                title: String::new(),
                summary: String::new(),
                snapshot: String::new(),
                result: None,
                dag: PlanDag::new(),
                created_at: now,
            },
        );
        if let Some(p) = parent {
            self.sessions.get_mut(&p).expect("checked above").children.push(id);
        }
        Ok(id)
    }

    /// Dispatches a task into a new child session. When `dag_node` is given,
    /// the node is marked running and completes together with the child.
    pub fn spawn_child_task(
        &mut self,
        parent: SessionId,
        task_spec: &str,
        dag_node: Option<&str>,
        now: u64,
    ) -> Result<SessionId> {
        let parent_rec = self.get(parent)?;
        if !parent_rec.is_active() {
            return Err(KernelError::Rejected(format!("parent session {parent} is not active")));
        }
        if task_spec.trim().is_empty() {
            return Err(KernelError::InvalidInput("task spec is empty".into()));
        }
        if let Some(node) = dag_node {
            // Validate on a scratch copy so a rejection leaves nothing behind.
            let mut scratch = parent_rec.dag.clone();
            scratch.attach_child(node, SessionId(self.next_id))?;
        }
        let scope = parent_rec.scope.clone();
        let origin = SessionOrigin::ChildTask {
            node: dag_node.map(str::to_string),
        };
        let child = self.create_with(&scope, Some(parent), origin, Some(task_spec), now)?;
        if let Some(node) = dag_node {
            self.get_mut(parent)?.dag.attach_child(node, child)?;
        }
        Ok(child)
    }

    pub fn append(&mut self, id: SessionId, role: Role, text: &str) -> Result<u64> {
        Ok(self.active_mut(id)?.transcript.push(role, text))
    }

    pub fn set_continuity(
        &mut self,
        id: SessionId,
        title: Option<&str>,
        summary: Option<&str>,
        snapshot: Option<&str>,
    ) -> Result<()> {
        let session = self.get_mut(id)?;
        if let Some(t) = title {
            session.title = t.to_string();
        }
        if let Some(s) = summary {
            session.summary = s.to_string();
        }
        if let Some(s) = snapshot {
            session.snapshot = s.to_string();
        }
        Ok(())
    }

    pub fn complete_session(&mut self, id: SessionId, result: &str, now: u64) -> Result<CompletionEffects> {
        self.close(id, SessionState::Completed, result, now)
    }

    pub fn fail_session(&mut self, id: SessionId, reason: &str, now: u64) -> Result<CompletionEffects> {
        self.close(id, SessionState::Failed, reason, now)
    }

    fn close(&mut self, id: SessionId, state: SessionState, result: &str, now: u64) -> Result<CompletionEffects> {
        let session = self.active_mut(id)?;
        session.state = state;
        session.result = Some(result.to_string());
        let parent = session.parent_id;
        let node = match &session.origin {
            SessionOrigin::ChildTask { node } => Some(node.clone()),
            _ => None,
        };
        let mut effects = CompletionEffects::default();
        let (Some(parent), Some(node)) = (parent, node) else {
            return Ok(effects);
        };
        let verb = if state == SessionState::Completed {
            "completed"
        } else {
            "failed"
        };
        let out = Outgoing {
            sender: Sender::Session(id),
            target: Target::Session(parent),
            payload: format!("task {id} {verb}: {result}"),
            idempotency_key: Some(format!("completion:{id}")),
        };
        let reach = self.reachability(&out.target, None);
        effects.notified = Some(self.mailbox.send(out, reach, self.retries, now));

        if let Some(node) = node {
            let dag = &mut self.get_mut(parent)?.dag;
            let tied = dag.node(&node).is_some_and(|n| {
                n.auto_complete_child == Some(id) && matches!(n.status, NodeStatus::Ready | NodeStatus::Running)
            });
            if tied {
                let mutation = if state == SessionState::Completed {
                    DagMutation::CompleteNode { id: node.clone() }
                } else {
                    DagMutation::FailNode { id: node.clone() }
                };
                effects.promoted = dag.apply(mutation)?.promoted;
                effects.auto_completed = Some(node);
            }
        }
        Ok(effects)
    }

    pub fn dag_update(&mut self, id: SessionId, mutation: DagMutation) -> Result<PromotionReport> {
        self.active_mut(id)?.dag.apply(mutation)
    }

    fn reachability(&self, target: &Target, contacts: Option<&dyn ContactDirectory>) -> Reachability {
        match target {
            Target::Home => Reachability::Open,
            Target::Session(id) => match self.sessions.get(id) {
                None => Reachability::Unavailable("missing".into()),
                Some(s) if !s.is_active() => Reachability::Unavailable("closed".into()),
                Some(_) => Reachability::Open,
            },
            Target::Contact(name) => match contacts.and_then(|c| c.resolve_contact(name)) {
                Some(_) => Reachability::Open,
                None => Reachability::Unroutable(format!("unregistered contact `{name}`")),
            },
        }
    }

    pub fn mailbox_send(&mut self, out: Outgoing, contacts: &dyn ContactDirectory, now: u64) -> Result<MessageId> {
        if let Sender::Session(id) = &out.sender {
            self.get(*id)?;
        }
        let reach = self.reachability(&out.target, Some(contacts));
        Ok(self.mailbox.send(out, reach, self.retries, now))
    }

    /// Delivers pending messages for `target`. Closed or missing sessions
    /// receive nothing; their messages age out through [`Self::mailbox_pump`].
    pub fn mailbox_poll(&mut self, target: &Target, now: u64) -> Vec<MailboxMessage> {
        if let Target::Session(id) = target {
            if !self.sessions.get(id).is_some_and(SessionRecord::is_active) {
                return Vec::new();
            }
        }
        self.mailbox.poll(target, now)
    }

    /// Spends one retry on every pending message whose target is unreachable.
    pub fn mailbox_pump(&mut self, contacts: &dyn ContactDirectory) -> Vec<MessageId> {
        let mut reach: Vec<(Target, Reachability)> = Vec::new();
        for m in self
            .mailbox
            .messages()
            .iter()
            .filter(|m| m.state == DeliveryState::Pending)
        {
            if !reach.iter().any(|(t, _)| t == &m.target) {
                reach.push((m.target.clone(), self.reachability(&m.target, Some(contacts))));
            }
        }
        let retries = self.retries;
        self.mailbox.pump(
            |t| {
                reach
                    .iter()
                    .find(|(target, _)| target == t)
                    .map_or(Reachability::Open, |(_, r)| r.clone())
            },
            retries,
        )
    }

    pub(crate) fn send_internal(&mut self, out: Outgoing, now: u64) -> MessageId {
        let reach = self.reachability(&out.target, None);
        self.mailbox.send(out, reach, self.retries, now)
    }
}
