//! Delayed credit: once a turn is judged, every experience that was injected
//! into it moves toward the turn's reward,
//!
//! ```text
//! Q_d <- (1 - α·c) Q_d + α·c·r_d
//! ```
//!
//! so a record's value reflects how its reuse went, not how its own episode
//! went.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::KernelConfig;
use crate::error::{KernelError, Result};
use crate::experience::{ExperienceId, ExperienceStore, LogEntry, QVector};
use crate::reward::{RewardVector, DIMENSIONS};
use crate::session::SessionId;

/// Identifies one turn: a session and the transcript index of its request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TurnKey {
    pub session: SessionId,
    pub index: u64,
}

impl fmt::Display for TurnKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.session, self.index)
    }
}

/// The experiences injected into one turn, fixed at injection time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLink {
    pub turn: TurnKey,
    pub used_ids: Vec<ExperienceId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditEntry {
    pub id: ExperienceId,
    pub before: QVector,
    pub after: QVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditReport {
    pub turn: TurnKey,
    pub entries: Vec<CreditEntry>,
}

/// One application of the update rule. Results are clamped to [-1, 1] so
/// rounding can never push a value out of range.
pub fn credit_step(q: &QVector, r: &[f64; DIMENSIONS], alpha: f64, confidence: f64) -> QVector {
    let step = alpha * confidence;
    std::array::from_fn(|d| ((1.0 - step) * q[d] + step * r[d]).clamp(-1.0, 1.0))
}

/// Applies `reward` to every record in `link`. Unknown ids reject the whole
/// update.
pub fn apply_credit(
    store: &mut ExperienceStore,
    link: &UsageLink,
    reward: &RewardVector,
    config: &KernelConfig,
) -> Result<CreditReport> {
    store.apply_credit(link, reward, config.alpha)
}

/// Recomputes a record's values by folding every logged credit update over
/// its initial values. The log must reach back to the record's insertion.
pub fn replay_q(log: &[LogEntry], id: ExperienceId) -> Result<QVector> {
    let mut q: Option<QVector> = None;
    for entry in log {
        match entry {
            LogEntry::Insert { record } if record.id == id => {
                q = Some(record.q_values);
            }
            LogEntry::Credit {
                id: credited,
                alpha,
                c,
                r,
                ..
            } if *credited == id => {
                let current = q.as_mut().ok_or_else(|| {
                    KernelError::Corrupt(format!("log is truncated: credit for {id} before its insert"))
                })?;
                let step = alpha * c;
                for d in 0..DIMENSIONS {
                    current[d] = (1.0 - step) * current[d] + step * f64::from(r[d]);
                }
            }
            _ => {}
        }
    }
    q.ok_or_else(|| KernelError::Corrupt(format!("log is truncated: no insert for {id}")))
}
