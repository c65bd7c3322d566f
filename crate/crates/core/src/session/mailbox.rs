//! Asynchronous delivery between sessions, the home surface and contacts.
//!
//! Messages are enqueued pending and become visible exactly once, when the
//! target polls. Enqueue may be retried with the same idempotency key without
//! creating a second message. Messages whose target session is closed or
//! missing are dead-lettered once the retry budget is used up.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SessionId;
use crate::error::{KernelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageId(pub u64);

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Target {
    Session(SessionId),
    Home,
    Contact(String),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Session(id) => write!(f, "session:{id}"),
            Target::Home => f.write_str("home"),
            Target::Contact(name) => write!(f, "contact:{name}"),
        }
    }
}

impl FromStr for Target {
    type Err = KernelError;

    /// Accepts `home`, `session:<id>` and `contact:<name>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "home" {
            return Ok(Target::Home);
        }
        if let Some(id) = s.strip_prefix("session:") {
            return id
                .parse()
                .map(|n| Target::Session(SessionId(n)))
                .map_err(|_| KernelError::InvalidInput(format!("bad session id in target `{s}`")));
        }
        if let Some(name) = s.strip_prefix("contact:") {
            if !name.is_empty() {
                return Ok(Target::Contact(name.to_string()));
            }
        }
        Err(KernelError::InvalidInput(format!(
            "target `{s}` is not home, session:<id> or contact:<name>"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Sender {
    Session(SessionId),
    Agent(String),
}

impl fmt::Display for Sender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sender::Session(id) => write!(f, "session:{id}"),
            Sender::Agent(name) => write!(f, "agent:{name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum DeliveryState {
    Pending,
    Delivered { at: u64 },
    Dead { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MailboxMessage {
    pub id: MessageId,
    pub sender: Sender,
    pub target: Target,
    pub payload: String,
    pub enqueued_at: u64,
    pub state: DeliveryState,
    /// Failed delivery attempts so far.
    pub attempts: u32,
    pub idempotency_key: Option<String>,
}

/// What the outside world says about a target right now.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reachability {
    Open,
    /// Temporarily or permanently unavailable; retried until the budget is spent.
    Unavailable(String),
    /// Can never be delivered; dead-lettered at once.
    Unroutable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outgoing {
    pub sender: Sender,
    pub target: Target,
    pub payload: String,
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Mailbox {
    messages: Vec<MailboxMessage>,
    next_id: u64,
}

impl Mailbox {
    pub fn new() -> Self {
        Mailbox {
            messages: Vec::new(),
            next_id: 1,
        }
    }

    pub fn get(&self, id: MessageId) -> Option<&MailboxMessage> {
        self.messages.iter().find(|m| m.id == id)
    }

    pub fn messages(&self) -> &[MailboxMessage] {
        &self.messages
    }

    /// Enqueues a message, or returns the existing one for a repeated
    /// idempotency key from the same sender.
    pub fn send(&mut self, out: Outgoing, reach: Reachability, retries: u32, now: u64) -> MessageId {
        if let Some(key) = &out.idempotency_key {
            if let Some(existing) = self
                .messages
                .iter()
                .find(|m| m.sender == out.sender && m.idempotency_key.as_deref() == Some(key))
            {
                return existing.id;
            }
        }
        let id = MessageId(self.next_id.max(1));
        self.next_id = id.0 + 1;
        let mut msg = MailboxMessage {
            id,
            sender: out.sender,
            target: out.target,
            payload: out.payload,
            enqueued_at: now,
            state: DeliveryState::Pending,
            attempts: 0,
            idempotency_key: out.idempotency_key,
        };
        Self::attempt(&mut msg, &reach, retries);
        self.messages.push(msg);
        id
    }

    fn attempt(msg: &mut MailboxMessage, reach: &Reachability, retries: u32) {
        match reach {
            Reachability::Open => {}
            Reachability::Unroutable(reason) => {
                msg.state = DeliveryState::Dead { reason: reason.clone() };
            }
            Reachability::Unavailable(reason) => {
                if msg.attempts >= retries {
                    msg.state = DeliveryState::Dead { reason: reason.clone() };
                } else {
                    msg.attempts += 1;
                }
            }
        }
    }

    /// Re-checks every pending message against `reach`, spending retries on
    /// unavailable targets. Returns ids that died in this pass.
    pub fn pump(&mut self, reach: impl Fn(&Target) -> Reachability, retries: u32) -> Vec<MessageId> {
        let mut died = Vec::new();
        for msg in self.messages.iter_mut().filter(|m| m.state == DeliveryState::Pending) {
            Self::attempt(msg, &reach(&msg.target), retries);
            if matches!(msg.state, DeliveryState::Dead { .. }) {
                died.push(msg.id);
            }
        }
        died
    }

    /// Delivers every pending message for `target`, in enqueue order (which
    /// preserves per-sender order).
    pub fn poll(&mut self, target: &Target, now: u64) -> Vec<MailboxMessage> {
        let mut out = Vec::new();
        for msg in self.messages.iter_mut() {
            if &msg.target == target && msg.state == DeliveryState::Pending {
                msg.state = DeliveryState::Delivered { at: now };
                out.push(msg.clone());
            }
        }
        out
    }

    /// Everything already delivered to `target`.
    pub fn inbox(&self, target: &Target) -> Vec<&MailboxMessage> {
        self.messages
            .iter()
            .filter(|m| &m.target == target && matches!(m.state, DeliveryState::Delivered { .. }))
            .collect()
    }

    pub fn dead_letters(&self) -> Vec<&MailboxMessage> {
        self.messages
            .iter()
            .filter(|m| matches!(m.state, DeliveryState::Dead { .. }))
            .collect()
    }

    pub fn pending_for(&self, target: &Target) -> usize {
        self.messages
            .iter()
            .filter(|m| &m.target == target && m.state == DeliveryState::Pending)
            .count()
    }
}
