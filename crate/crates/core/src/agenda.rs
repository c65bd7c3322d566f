//! Durable temporal triggers. A firing agenda item becomes an ordinary
//! session seeded with its action; when that session closes, the result is
//! delivered home, to a chosen session, or kept silently on the item.
//!
//! Time is a [`LogicalClock`]; wall time only enters at the CLI boundary.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KernelError, Result};
use crate::session::{Outgoing, Sender, SessionId, SessionKernel, SessionOrigin, Target};

/// Monotone logical time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalClock {
    now: u64,
}

impl LogicalClock {
    pub fn new(now: u64) -> Self {
        LogicalClock { now }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn advance(&mut self, dt: u64) -> u64 {
        self.now = self.now.saturating_add(dt);
        self.now
    }

    /// Moves to `t`; going backwards is rejected.
    pub fn advance_to(&mut self, t: u64) -> Result<u64> {
        if t < self.now {
            return Err(KernelError::Rejected(format!(
                "clock is at {}, cannot go back to {t}",
                self.now
            )));
        }
        self.now = t;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trigger {
    WallClock { fire_at: u64 },
    Event { event_key: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Delivery {
    Home,
    Session(SessionId),
    Silent,
}

impl fmt::Display for Delivery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delivery::Home => f.write_str("home"),
            Delivery::Session(id) => write!(f, "session:{id}"),
            Delivery::Silent => f.write_str("silent"),
        }
    }
}

impl FromStr for Delivery {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "home" => Ok(Delivery::Home),
            "silent" => Ok(Delivery::Silent),
            _ => s
                .strip_prefix("session:")
                .and_then(|id| id.parse().ok())
                .map(|id| Delivery::Session(SessionId(id)))
                .ok_or_else(|| {
                    KernelError::InvalidInput(format!("delivery `{s}` is not home, session:<id> or silent"))
                }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgendaState {
    Scheduled,
    Fired,
    Completed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgendaResult {
    pub session: SessionId,
    pub success: bool,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgendaItem {
    pub id: u64,
    pub trigger: Trigger,
    pub action_spec: String,
    pub delivery: Delivery,
    pub state: AgendaState,
    /// Re-arm interval for recurring items.
    pub recurring: Option<u64>,
    /// One session per firing, in firing order.
    pub sessions: Vec<SessionId>,
    pub results: Vec<AgendaResult>,
}

/// What a caller supplies to schedule an item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgendaDraft {
    pub trigger: Trigger,
    pub action_spec: String,
    pub delivery: Delivery,
    pub recurring: Option<u64>,
}

/// Seed text of the periodic wake item; the wake behaviour itself is not
/// part of the kernel.
pub const ANIMA_WAKE_SPEC: &str = "anima_wake: no-op";

impl AgendaDraft {
    /// The periodic self-wake item, delivered silently.
    pub fn anima_wake(first_at: u64, interval: u64) -> Self {
        AgendaDraft {
            trigger: Trigger::WallClock { fire_at: first_at },
            action_spec: ANIMA_WAKE_SPEC.to_string(),
            delivery: Delivery::Silent,
            recurring: Some(interval),
        }
    }
}

/// One firing: which item fired and the session created for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Firing {
    pub item: u64,
    pub session: SessionId,
}

pub const AGENDA_SCOPE: &str = "agenda";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgendaScheduler {
    items: BTreeMap<u64, AgendaItem>,
    next_id: u64,
}

impl Default for AgendaScheduler {
    fn default() -> Self {
        AgendaScheduler {
            items: BTreeMap::new(),
            next_id: 1,
        }
    }
}

impl AgendaScheduler {
    pub fn get(&self, id: u64) -> Result<&AgendaItem> {
        self.items
            .get(&id)
            .ok_or_else(|| KernelError::not_found("agenda item", id))
    }

    pub fn items(&self) -> impl Iterator<Item = &AgendaItem> {
        self.items.values()
    }

    pub fn schedule(&mut self, draft: AgendaDraft, now: u64) -> Result<u64> {
        match &draft.trigger {
            Trigger::WallClock { fire_at } if *fire_at < now => {
                return Err(KernelError::Rejected(format!(
                    "fire_at {fire_at} is before now ({now})"
                )));
            }
            Trigger::Event { event_key } if event_key.trim().is_empty() => {
                return Err(KernelError::InvalidInput("event key is empty".into()));
            }
            _ => {}
        }
        if draft.recurring == Some(0) {
            return Err(KernelError::InvalidInput("recurring interval must be positive".into()));
        }
        if draft.action_spec.trim().is_empty() {
            return Err(KernelError::InvalidInput("action spec is empty".into()));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.items.insert(
            id,
            AgendaItem {
                id,
                trigger: draft.trigger,
                action_spec: draft.action_spec,
                delivery: draft.delivery,
                state: AgendaState::Scheduled,
                recurring: draft.recurring,
                sessions: Vec::new(),
                results: Vec::new(),
            },
        );
        Ok(id)
    }

    /// Cancels a scheduled item. Items that already fired (non-recurring)
    /// cannot be cancelled.
    pub fn cancel(&mut self, id: u64) -> Result<()> {
        let item = self
            .items
            .get_mut(&id)
            .ok_or_else(|| KernelError::not_found("agenda item", id))?;
        if item.state != AgendaState::Scheduled {
            return Err(KernelError::Rejected(format!("agenda item {id} is {:?}", item.state)));
        }
        item.state = AgendaState::Cancelled;
        Ok(())
    }

    /// Fires every scheduled wall-clock item due at `now`, earliest first.
    pub fn tick(&mut self, now: u64, sessions: &mut SessionKernel) -> Vec<Firing> {
        let mut due: Vec<(u64, u64)> = self
            .items
            .values()
            .filter(|i| i.state == AgendaState::Scheduled)
            .filter_map(|i| match i.trigger {
                Trigger::WallClock { fire_at } if fire_at <= now => Some((fire_at, i.id)),
                _ => None,
            })
            .collect();
        due.sort_unstable();
        due.into_iter().map(|(_, id)| self.fire(id, now, sessions)).collect()
    }

    /// Fires every scheduled item waiting on `event_key`.
    pub fn raise_event(&mut self, event_key: &str, now: u64, sessions: &mut SessionKernel) -> Vec<Firing> {
        let matching: Vec<u64> = self
            .items
            .values()
            .filter(|i| i.state == AgendaState::Scheduled)
            .filter(|i| matches!(&i.trigger, Trigger::Event { event_key: k } if k == event_key))
            .map(|i| i.id)
            .collect();
        matching.into_iter().map(|id| self.fire(id, now, sessions)).collect()
    }

    fn fire(&mut self, id: u64, now: u64, sessions: &mut SessionKernel) -> Firing {
        let item = self.items.get_mut(&id).expect("caller found the item");
        let session = sessions
            .create_with(
                AGENDA_SCOPE,
                None,
                SessionOrigin::Agenda { item: id },
                Some(&item.action_spec),
                now,
            )
            .expect("root sessions have no preconditions");
        item.sessions.push(session);
        match (item.recurring, &mut item.trigger) {
            (Some(interval), Trigger::WallClock { fire_at }) => *fire_at += interval,
            (Some(_), Trigger::Event { .. }) => {}
            (None, _) => item.state = AgendaState::Fired,
        }
        Firing { item: id, session }
    }

    /// Records the outcome of an item's session and routes the result.
    /// Returns the delivery message, if one was sent.
    pub(crate) fn session_closed(
        &mut self,
        item_id: u64,
        session: SessionId,
        success: bool,
        text: &str,
        sessions: &mut SessionKernel,
        now: u64,
    ) -> Result<Option<crate::session::MessageId>> {
        let item = self
            .items
            .get_mut(&item_id)
            .ok_or_else(|| KernelError::not_found("agenda item", item_id))?;
        item.results.push(AgendaResult {
            session,
            success,
            text: text.to_string(),
        });
        if item.state == AgendaState::Fired {
            item.state = AgendaState::Completed;
        }
        let target = match item.delivery {
            Delivery::Silent => return Ok(None),
            Delivery::Home => Target::Home,
            Delivery::Session(id) => Target::Session(id),
        };
        let verb = if success { "result" } else { "failed" };
        let out = Outgoing {
            sender: Sender::Session(session),
            target,
            payload: format!("agenda {item_id} {verb}: {text}"),
            idempotency_key: Some(format!("agenda:{item_id}:{session}")),
        };
        Ok(Some(sessions.send_internal(out, now)))
    }
}
