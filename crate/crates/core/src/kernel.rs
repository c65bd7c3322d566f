//! The kernel facade: one owner for the experience store, sessions, agenda
//! and identity memory, driving the experience loop
//!
//! ```text
//! request → recall → action → window → judge → credit → encode
//! ```
//!
//! A turn is judged once its reward window holds `window_h` messages or its
//! session closes, whichever comes first. Every state change can also be
//! expressed as a serialisable [`Command`], which is how the CLI logs and
//! replays session, agenda and memory state.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agenda::{AgendaDraft, AgendaItem, AgendaScheduler, Firing, LogicalClock, ANIMA_WAKE_SPEC};
use crate::config::{KernelConfig, SeedQ};
use crate::credit::{CreditReport, TurnKey};
use crate::error::{KernelError, Result};
use crate::experience::{ExperienceDraft, ExperienceId, ExperienceStore, InsertOutcome};
use crate::memory::{Contact, IdentityMemory, MemoryCategory, MemoryEntry};
use crate::retrieval::{self, InjectionPayload};
use crate::reward::{collect_window, judge_turn, InteractionTurn, MarkerJudge, RewardJudge, RewardVector};
use crate::session::{
    CompletionEffects, DagMutation, MailboxMessage, MessageId, Outgoing, PromotionReport, Role, SessionId,
    SessionKernel, SessionOrigin, Target,
};

/// Runs the action of a fired agenda item inside its session. `Ok` carries
/// the result text, `Err` the failure reason.
pub trait AgendaRunner: Send {
    fn run(&mut self, item: &AgendaItem, session: SessionId) -> std::result::Result<String, String>;
}

impl<F> AgendaRunner for F
where
    F: FnMut(&AgendaItem, SessionId) -> std::result::Result<String, String> + Send,
{
    fn run(&mut self, item: &AgendaItem, session: SessionId) -> std::result::Result<String, String> {
        self(item, session)
    }
}

/// Default runner: reports the action spec back as the result. The wake item
/// does nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoRunner;

impl AgendaRunner for EchoRunner {
    fn run(&mut self, item: &AgendaItem, _session: SessionId) -> std::result::Result<String, String> {
        if item.action_spec == ANIMA_WAKE_SPEC {
            Ok(String::new())
        } else {
            Ok(format!("ran: {}", item.action_spec))
        }
    }
}

/// A turn between recall and action.
#[derive(Debug, Clone)]
struct OpenTurn {
    key: TurnKey,
    request: String,
    injected: Vec<ExperienceId>,
}

/// A turn that has acted and waits for its reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingTurn {
    pub turn: InteractionTurn,
    pub injected: Vec<ExperienceId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnStart {
    pub turn: TurnKey,
    pub payload: InjectionPayload,
}

/// Everything that happened when one turn was rewarded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedTurn {
    pub turn: TurnKey,
    pub reward: RewardVector,
    pub credit: Option<CreditReport>,
    pub encoded: InsertOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseReport {
    pub effects: CompletionEffects,
    pub judged: Vec<JudgedTurn>,
    /// Turns whose judge failed; they stay pending and can be retried.
    pub unjudged: Vec<TurnKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgendaOutcome {
    pub firing: Firing,
    pub success: bool,
    pub delivered: Option<MessageId>,
}

/// A serialisable kernel operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    CreateSession {
        scope: String,
        parent: Option<SessionId>,
    },
    SpawnChild {
        parent: SessionId,
        task_spec: String,
        node: Option<String>,
    },
    Append {
        session: SessionId,
        role: Role,
        text: String,
    },
    SetContinuity {
        session: SessionId,
        title: Option<String>,
        summary: Option<String>,
        snapshot: Option<String>,
    },
    CloseSession {
        session: SessionId,
        result: String,
        failed: bool,
    },
    DagUpdate {
        session: SessionId,
        mutation: DagMutation,
    },
    MailboxSend {
        message: Outgoing,
    },
    MailboxPoll {
        target: Target,
    },
    MailboxPump,
    AgendaSchedule {
        draft: AgendaDraft,
    },
    AgendaCancel {
        id: u64,
    },
    Tick {
        now: u64,
    },
    RaiseEvent {
        key: String,
    },
    MemoryPut {
        category: MemoryCategory,
        content: String,
    },
    MemoryQuery {
        category: Option<MemoryCategory>,
        text: Option<String>,
    },
    NotePut {
        title: String,
        body: String,
    },
    ContactUpsert {
        contact: Contact,
    },
    BeginTurn {
        session: SessionId,
        request: String,
    },
    Act {
        session: SessionId,
        action: String,
    },
    ExperienceAdd {
        draft: ExperienceDraft,
    },
    Recall {
        query: String,
        k: Option<usize>,
    },
}

impl Command {
    /// Whether the command touches the experience store. Those commands are
    /// made durable by the store's own journal; the rest can be logged and
    /// replayed to rebuild session, agenda and memory state.
    pub fn touches_store(&self) -> bool {
        matches!(
            self,
            Command::BeginTurn { .. } | Command::Act { .. } | Command::ExperienceAdd { .. } | Command::Recall { .. }
        )
    }

    /// Whether the command changes state at all.
    pub fn is_mutation(&self) -> bool {
        !matches!(self, Command::MemoryQuery { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reply", content = "value", rename_all = "snake_case")]
pub enum Reply {
    Unit,
    Session(SessionId),
    Index(u64),
    Closed(CloseReport),
    Promotion(PromotionReport),
    Message(MessageId),
    Messages(Vec<MailboxMessage>),
    DeadLettered(Vec<MessageId>),
    AgendaItem(u64),
    Fired(Vec<AgendaOutcome>),
    Memory(u64),
    Entries(Vec<MemoryEntry>),
    TurnStarted(TurnStart),
    Acted { turn: TurnKey, judged: Vec<JudgedTurn> },
    Inserted(InsertOutcome),
    Payload(InjectionPayload),
}

/// Session that ad-hoc recalls (outside any turn) are accounted to.
pub const ADHOC_SESSION: SessionId = SessionId(0);

pub struct Kernel {
    id: String,
    config: KernelConfig,
    store: ExperienceStore,
    sessions: SessionKernel,
    agenda: AgendaScheduler,
    memory: IdentityMemory,
    clock: LogicalClock,
    judge: Arc<dyn RewardJudge>,
    runner: Box<dyn AgendaRunner>,
    source_model: String,
    open: BTreeMap<SessionId, OpenTurn>,
    pending: Vec<PendingTurn>,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("id", &self.id)
            .field("store", &self.store)
            .field("sessions", &self.sessions.len())
            .field("now", &self.clock.now())
            .finish()
    }
}

impl Kernel {
    /// A kernel over an in-memory store with the marker judge.
    pub fn new(config: KernelConfig) -> Result<Self> {
        Self::with_store(config, ExperienceStore::default())
    }

    pub fn with_store(config: KernelConfig, store: ExperienceStore) -> Result<Self> {
        config.validate()?;
        let memory = IdentityMemory::with_provider(Arc::clone(store.provider()));
        Ok(Kernel {
            id: "kernel".to_string(),
            sessions: SessionKernel::new(config.mailbox_retries),
            config,
            store,
            agenda: AgendaScheduler::default(),
            memory,
            clock: LogicalClock::default(),
            judge: Arc::new(MarkerJudge),
            runner: Box::new(EchoRunner),
            source_model: "scripted".to_string(),
            open: BTreeMap::new(),
            pending: Vec::new(),
        })
    }

    pub fn with_judge(mut self, judge: Arc<dyn RewardJudge>) -> Self {
        self.judge = judge;
        self
    }

    pub fn with_runner(mut self, runner: Box<dyn AgendaRunner>) -> Self {
        self.runner = runner;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_source_model(mut self, model: impl Into<String>) -> Self {
        self.source_model = model.into();
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn store(&self) -> &ExperienceStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ExperienceStore {
        &mut self.store
    }

    pub fn sessions(&self) -> &SessionKernel {
        &self.sessions
    }

    pub fn agenda(&self) -> &AgendaScheduler {
        &self.agenda
    }

    pub fn memory(&self) -> &IdentityMemory {
        &self.memory
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn pending_turns(&self) -> &[PendingTurn] {
        &self.pending
    }

    pub fn into_store(self) -> ExperienceStore {
        self.store
    }

    pub fn create_session(&mut self, scope: &str, parent: Option<SessionId>) -> Result<SessionId> {
        self.sessions.create_session(scope, parent, self.clock.now())
    }

    /// Records the user request and recalls experiences for the action that
    /// will answer it.
    pub fn begin_turn(&mut self, session: SessionId, request: &str) -> Result<TurnStart> {
        if self.open.contains_key(&session) {
            return Err(KernelError::Rejected(format!(
                "session {session} already has a turn in progress"
            )));
        }
        if request.trim().is_empty() {
            return Err(KernelError::InvalidInput("request is empty".into()));
        }
        let index = self.sessions.append(session, Role::User, request)?;
        let key = TurnKey {
            session,
            index: index + 1,
        };
        let mut rng = retrieval::turn_rng(self.config.rng_seed, key);
        let (payload, link) = retrieval::recall(&mut self.store, request, key, &self.config, &mut rng)?;
        self.open.insert(
            session,
            OpenTurn {
                key,
                request: request.to_string(),
                injected: link.map(|l| l.used_ids).unwrap_or_default(),
            },
        );
        Ok(TurnStart { turn: key, payload })
    }

    /// Records the action for the session's open turn. The turn then waits
    /// for its reward window.
    pub fn act(&mut self, session: SessionId, action: &str) -> Result<TurnKey> {
        let open = self
            .open
            .get(&session)
            .ok_or_else(|| KernelError::Rejected(format!("session {session} has no turn in progress")))?;
        let key = open.key;
        let index = self.sessions.append(session, Role::Agent, action)?;
        debug_assert_eq!(index, key.index, "appends are blocked while a turn is open");
        let open = self.open.remove(&session).expect("checked above");
        self.pending.push(PendingTurn {
            turn: InteractionTurn {
                session_id: session,
                turn_index: key.index,
                user_request: open.request,
                action_trajectory: action.to_string(),
            },
            injected: open.injected,
        });
        Ok(key)
    }

    /// Appends a message and judges every turn of the session whose window
    /// is now full.
    pub fn append(&mut self, session: SessionId, role: Role, text: &str) -> Result<(u64, Vec<JudgedTurn>)> {
        if self.open.contains_key(&session) {
            return Err(KernelError::Rejected(format!(
                "session {session} is waiting for an action"
            )));
        }
        let index = self.sessions.append(session, role, text)?;
        let h = self.config.window_h as u64;
        let due: Vec<TurnKey> = self
            .pending
            .iter()
            .filter(|p| p.turn.session_id == session && index - p.turn.turn_index >= h)
            .map(|p| TurnKey {
                session,
                index: p.turn.turn_index,
            })
            .collect();
        let mut judged = Vec::with_capacity(due.len());
        for turn in due {
            judged.push(self.judge_pending(turn)?);
        }
        Ok((index, judged))
    }

    /// Closes a session, judging its pending turns over whatever window they
    /// have. Judge failures leave the turn pending.
    pub fn close_session(&mut self, session: SessionId, result: &str, failed: bool) -> Result<CloseReport> {
        let now = self.clock.now();
        let effects = if failed {
            self.sessions.fail_session(session, result, now)?
        } else {
            self.sessions.complete_session(session, result, now)?
        };
        self.open.remove(&session);
        let due: Vec<TurnKey> = self
            .pending
            .iter()
            .filter(|p| p.turn.session_id == session)
            .map(|p| TurnKey {
                session,
                index: p.turn.turn_index,
            })
            .collect();
        let mut report = CloseReport {
            effects,
            judged: Vec::new(),
            unjudged: Vec::new(),
        };
        for turn in due {
            match self.judge_pending(turn) {
                Ok(j) => report.judged.push(j),
                Err(err @ KernelError::Judge { .. }) => {
                    tracing::warn!(%turn, %err, "turn left unjudged");
                    report.unjudged.push(turn);
                }
                Err(err) => return Err(err),
            }
        }
        Ok(report)
    }

    /// Retries judging a pending turn, e.g. after a judge failure.
    pub fn judge_pending(&mut self, turn: TurnKey) -> Result<JudgedTurn> {
        let at = self
            .pending
            .iter()
            .position(|p| p.turn.session_id == turn.session && p.turn.turn_index == turn.index)
            .ok_or_else(|| KernelError::not_found("pending turn", turn))?;
        let pending = &self.pending[at];
        let transcript = &self.sessions.get(turn.session)?.transcript;
        let window = collect_window(transcript, turn.index, self.config.window_h)?;
        let reward = judge_turn(self.judge.as_ref(), &pending.turn, &window)?;

        let mut tx = self.store.begin();
        let credit = match tx.store().usage_for(turn).cloned() {
            Some(link) => Some(tx.store_mut().apply_credit(&link, &reward, self.config.alpha)?),
            None => None,
        };
        let q = match self.config.seed_q {
            SeedQ::OwnReward => reward.as_f64(),
            SeedQ::Zero => [0.0; crate::reward::DIMENSIONS],
        };
        let digest = if window.messages.is_empty() {
            pending.turn.action_trajectory.clone()
        } else {
            format!("{} | {}", pending.turn.action_trajectory, window.messages.join(" / "))
        };
        let draft = ExperienceDraft::new(&pending.turn.user_request, &pending.turn.action_trajectory, digest)
            .with_q(q)
            .with_source_model(&self.source_model)
            .with_used(pending.injected.clone());
        let encoded = tx.store_mut().insert(draft, &self.config)?;
        self.store.commit(tx)?;
        self.pending.remove(at);
        Ok(JudgedTurn {
            turn,
            reward,
            credit,
            encoded,
        })
    }

    /// Recall outside any turn, accounted to [`ADHOC_SESSION`].
    pub fn recall(&mut self, query: &str, k: Option<usize>) -> Result<InjectionPayload> {
        let mut config = self.config.clone();
        if let Some(k) = k {
            if k == 0 {
                return Err(KernelError::InvalidInput("k must be at least 1".into()));
            }
            config.top_k = k;
            config.shortlist_m = config.shortlist_m.max(k);
        }
        let turn = TurnKey {
            session: ADHOC_SESSION,
            index: self
                .store
                .usage_links()
                .iter()
                .filter(|l| l.turn.session == ADHOC_SESSION)
                .count() as u64,
        };
        let mut rng = retrieval::turn_rng(config.rng_seed, turn);
        Ok(retrieval::recall(&mut self.store, query, turn, &config, &mut rng)?.0)
    }

    /// Advances the logical clock and runs every agenda item that came due.
    pub fn tick(&mut self, now: u64) -> Result<Vec<AgendaOutcome>> {
        self.clock.advance_to(now)?;
        let firings = self.agenda.tick(now, &mut self.sessions);
        self.run_firings(firings)
    }

    pub fn raise_event(&mut self, key: &str) -> Result<Vec<AgendaOutcome>> {
        let firings = self.agenda.raise_event(key, self.clock.now(), &mut self.sessions);
        self.run_firings(firings)
    }

    fn run_firings(&mut self, firings: Vec<Firing>) -> Result<Vec<AgendaOutcome>> {
        let now = self.clock.now();
        let mut out = Vec::with_capacity(firings.len());
        for firing in firings {
            let item = self.agenda.get(firing.item)?.clone();
            let (success, text) = match self.runner.run(&item, firing.session) {
                Ok(text) => (true, text),
                Err(reason) => (false, reason),
            };
            if success {
                self.sessions.complete_session(firing.session, &text, now)?;
            } else {
                self.sessions.fail_session(firing.session, &text, now)?;
            }
            let delivered =
                self.agenda
                    .session_closed(firing.item, firing.session, success, &text, &mut self.sessions, now)?;
            out.push(AgendaOutcome {
                firing,
                success,
                delivered,
            });
        }
        Ok(out)
    }

    /// Applies one command.
    pub fn execute(&mut self, command: Command) -> Result<Reply> {
        let now = self.clock.now();
        Ok(match command {
            Command::CreateSession { scope, parent } => Reply::Session(self.create_session(&scope, parent)?),
            Command::SpawnChild {
                parent,
                task_spec,
                node,
            } => Reply::Session(
                self.sessions
                    .spawn_child_task(parent, &task_spec, node.as_deref(), now)?,
            ),
            Command::Append { session, role, text } => {
                let (index, _) = self.append(session, role, &text)?;
                Reply::Index(index)
            }
            Command::SetContinuity {
                session,
                title,
                summary,
                snapshot,
            } => {
                self.sessions
                    .set_continuity(session, title.as_deref(), summary.as_deref(), snapshot.as_deref())?;
                Reply::Unit
            }
            Command::CloseSession {
                session,
                result,
                failed,
            } => Reply::Closed(self.close_session(session, &result, failed)?),
            Command::DagUpdate { session, mutation } => Reply::Promotion(self.sessions.dag_update(session, mutation)?),
            Command::MailboxSend { message } => {
                Reply::Message(self.sessions.mailbox_send(message, &self.memory, now)?)
            }
            Command::MailboxPoll { target } => Reply::Messages(self.sessions.mailbox_poll(&target, now)),
            Command::MailboxPump => Reply::DeadLettered(self.sessions.mailbox_pump(&self.memory)),
            Command::AgendaSchedule { draft } => Reply::AgendaItem(self.agenda.schedule(draft, now)?),
            Command::AgendaCancel { id } => {
                self.agenda.cancel(id)?;
                Reply::Unit
            }
            Command::Tick { now } => Reply::Fired(self.tick(now)?),
            Command::RaiseEvent { key } => Reply::Fired(self.raise_event(&key)?),
            Command::MemoryPut { category, content } => Reply::Memory(self.memory.memory_put(category, &content, now)?),
            Command::MemoryQuery { category, text } => {
                Reply::Entries(self.memory.memory_query(category, text.as_deref()))
            }
            Command::NotePut { title, body } => Reply::Memory(self.memory.note_put(&title, &body)?),
            Command::ContactUpsert { contact } => {
                self.memory.contact_upsert(contact)?;
                Reply::Unit
            }
            Command::BeginTurn { session, request } => Reply::TurnStarted(self.begin_turn(session, &request)?),
            Command::Act { session, action } => {
                let turn = self.act(session, &action)?;
                Reply::Acted {
                    turn,
                    judged: Vec::new(),
                }
            }
            Command::ExperienceAdd { draft } => Reply::Inserted(self.store.insert(draft, &self.config)?),
            Command::Recall { query, k } => Reply::Payload(self.recall(&query, k)?),
        })
    }

    /// The agenda item that spawned `session`, if any.
    pub fn agenda_session_of(&self, session: SessionId) -> Option<u64> {
        match self.sessions.get(session).ok()?.origin {
            SessionOrigin::Agenda { item } => Some(item),
            _ => None,
        }
    }
}
