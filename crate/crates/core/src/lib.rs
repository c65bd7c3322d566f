//! An agent-runtime kernel that learns from its own experience.
//!
//! Every interaction turn recalls stored experiences, acts, and is later
//! rewarded from the messages that follow it. The reward flows back into the
//! values of the experiences that were injected, and the turn itself is
//! stored as a new experience. Around that loop sit sessions with plan
//! graphs and a mailbox, an agenda of timed and event-driven work, identity
//! memory, portable experience bundles and a synthetic world for measuring
//! learning.

pub mod agenda;
pub mod bundle;
pub mod config;
pub mod credit;
pub mod error;
pub mod experience;
pub mod kernel;
pub mod memory;
pub mod retrieval;
pub mod reward;
pub mod runtime;
pub mod session;
pub mod sim;
pub mod similarity;

pub use agenda::{AgendaDraft, AgendaItem, AgendaScheduler, Delivery, LogicalClock, Trigger};
pub use bundle::{ExperienceBundle, ImportOptions, ImportReport};
pub use config::{KernelConfig, SeedQ};
pub use credit::{CreditReport, TurnKey, UsageLink};
pub use error::{KernelError, Result};
pub use experience::{ExperienceDraft, ExperienceId, ExperienceRecord, ExperienceStore, InsertOutcome, RecordFilter};
pub use kernel::{Command, Kernel, Reply};
pub use memory::{Contact, IdentityMemory, MemoryCategory};
pub use retrieval::{InjectedExperience, InjectionPayload, ScoredCandidate};
pub use reward::{BenchmarkJudge, MarkerJudge, RewardJudge, RewardVector, RewardWindow};
pub use runtime::KernelHandle;
pub use session::{SessionId, SessionKernel, Target};
pub use sim::{EpochTrajectory, MetricsReport, RetrieverMode, SyntheticWorld};
pub use similarity::{SimilarityProvider, TrigramProvider};
