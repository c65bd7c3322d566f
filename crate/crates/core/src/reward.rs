//! Reward windows, the pluggable judge contract and the five-dimensional
//! discretised reward.
//!
//! A turn is judged from the user request, the action trajectory and the
//! `H` messages that follow it. Feedback often shows up a few turns late, so
//! the kernel defers judging until the window is full or the session closes.

use serde::{Deserialize, Serialize};

use crate::error::{KernelError, Result};
use crate::session::{SessionId, Transcript};

/// Number of reward dimensions.
pub const DIMENSIONS: usize = 5;

/// Dimension names in storage order.
pub const DIMENSION_NAMES: [&str; DIMENSIONS] = ["out", "int", "exe", "orc", "exp"];

/// One user request and the action taken in response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionTurn {
    pub session_id: SessionId,
    /// Transcript index of the action that answered the request.
    pub turn_index: u64,
    pub user_request: String,
    pub action_trajectory: String,
}

/// The messages following a turn that a judge reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWindow {
    pub turn_index: u64,
    pub messages: Vec<String>,
    pub h_used: usize,
}

/// Returns up to `h` transcript messages strictly after `turn_index`.
pub fn collect_window(transcript: &Transcript, turn_index: u64, h: usize) -> Result<RewardWindow> {
    if transcript.get(turn_index).is_none() {
        return Err(KernelError::not_found("turn", turn_index));
    }
    let messages: Vec<String> = transcript
        .after(turn_index)
        .take(h)
        .map(|entry| entry.text.clone())
        .collect();
    Ok(RewardWindow {
        turn_index,
        h_used: messages.len(),
        messages,
    })
}

/// A discretised reward: outcome, intent understanding, execution quality,
/// orchestration quality and expression quality, each in {-1, 0, +1}, plus
/// the judge's confidence in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub out: i8,
    pub int: i8,
    pub exe: i8,
    pub orc: i8,
    pub exp: i8,
    pub confidence: f64,
    pub judge_id: String,
}

fn tri(value: i64) -> Option<i8> {
    matches!(value, -1..=1).then_some(value as i8)
}

impl RewardVector {
    /// Builds a vector from raw values. Out-of-range dimensions are an error;
    /// confidence is clamped into [0, 1].
    pub fn new(dims: [i64; DIMENSIONS], confidence: f64, judge_id: impl Into<String>) -> Result<Self> {
        let judge_id = judge_id.into();
        let mut out = [0i8; DIMENSIONS];
        for (i, value) in dims.iter().enumerate() {
            out[i] = tri(*value).ok_or_else(|| KernelError::Judge {
                judge_id: judge_id.clone(),
                reason: format!("dimension {} = {value} is outside {{-1, 0, 1}}", DIMENSION_NAMES[i]),
            })?;
        }
        if confidence.is_nan() {
            return Err(KernelError::Judge {
                judge_id,
                reason: "confidence is NaN".into(),
            });
        }
        let clamped = confidence.clamp(0.0, 1.0);
        if clamped != confidence {
            tracing::warn!(judge = %judge_id, confidence, "judge confidence clamped into [0, 1]");
        }
        Ok(RewardVector {
            out: out[0],
            int: out[1],
            exe: out[2],
            orc: out[3],
            exp: out[4],
            confidence: clamped,
            judge_id,
        })
    }

    /// The all-zero, zero-confidence vector: no signal.
    pub fn neutral(judge_id: impl Into<String>) -> Self {
        RewardVector {
            out: 0,
            int: 0,
            exe: 0,
            orc: 0,
            exp: 0,
            confidence: 0.0,
            judge_id: judge_id.into(),
        }
    }

    pub fn dims(&self) -> [i8; DIMENSIONS] {
        [self.out, self.int, self.exe, self.orc, self.exp]
    }

    pub fn as_f64(&self) -> [f64; DIMENSIONS] {
        self.dims().map(f64::from)
    }

    /// Re-checks the invariants, e.g. after deserialising from an untrusted source.
    pub fn validate(&self) -> Result<()> {
        if self.dims().iter().any(|d| !(-1..=1).contains(d)) {
            return Err(KernelError::InvalidInput("reward dimension outside {-1, 0, 1}".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(KernelError::InvalidInput(format!(
                "reward confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Weighted scalar summary `Σ_d λ_d r_d`.
pub fn scalarize(reward: &RewardVector, lambda: &[f64; DIMENSIONS]) -> f64 {
    weighted_sum(&reward.as_f64(), lambda)
}

pub(crate) fn weighted_sum(values: &[f64; DIMENSIONS], lambda: &[f64; DIMENSIONS]) -> f64 {
    values.iter().zip(lambda).map(|(v, w)| v * w).sum()
}

/// What a judge returns before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawJudgement {
    pub dims: [i64; DIMENSIONS],
    pub confidence: f64,
}

/// Maps (request, action, window) to a reward. Implementations are called
/// from several workers at once and must be deterministic for identical
/// inputs if they claim to be.
pub trait RewardJudge: Send + Sync {
    fn judge_id(&self) -> &str;

    fn evaluate(&self, request: &str, action: &str, window: &RewardWindow) -> Result<RawJudgement, String>;
}

/// Runs a judge over a turn and validates what it returns.
pub fn judge_turn(judge: &dyn RewardJudge, turn: &InteractionTurn, window: &RewardWindow) -> Result<RewardVector> {
    if window.turn_index != turn.turn_index {
        return Err(KernelError::InvalidInput(format!(
            "window belongs to turn {}, not {}",
            window.turn_index, turn.turn_index
        )));
    }
    let raw = judge
        .evaluate(&turn.user_request, &turn.action_trajectory, window)
        .map_err(|reason| KernelError::Judge {
            judge_id: judge.judge_id().to_string(),
            reason,
        })?;
    RewardVector::new(raw.dims, raw.confidence, judge.judge_id())
}

/// Reads `FB:out=<v>,int=<v>,exe=<v>,orc=<v>,exp=<v>,c=<float>` markers from
/// the window. The first well-formed marker wins; no marker means no signal.
#[derive(Debug, Clone, Default)]
pub struct MarkerJudge;

impl MarkerJudge {
    pub const ID: &'static str = "marker";

    /// Parses one marker token (without surrounding whitespace).
    pub fn parse_marker(token: &str) -> Option<RawJudgement> {
        let body = token.strip_prefix("FB:")?;
        let mut parts = body.split(',');
        let mut dims = [0i64; DIMENSIONS];
        for (slot, name) in dims.iter_mut().zip(DIMENSION_NAMES) {
            let value = parts.next()?.strip_prefix(name)?.strip_prefix('=')?;
            *slot = value.strip_prefix('+').unwrap_or(value).parse().ok()?;
        }
        let confidence = parts.next()?.strip_prefix("c=")?.parse().ok()?;
        if parts.next().is_some() {
            return None;
        }
        Some(RawJudgement { dims, confidence })
    }

    /// Formats a marker for the given dimensions and confidence.
    pub fn format_marker(dims: [i8; DIMENSIONS], confidence: f64) -> String {
        let fmt = |v: i8| if v > 0 { format!("+{v}") } else { v.to_string() };
        format!(
            "FB:out={},int={},exe={},orc={},exp={},c={}",
            fmt(dims[0]),
            fmt(dims[1]),
            fmt(dims[2]),
            fmt(dims[3]),
            fmt(dims[4]),
            confidence
        )
    }
}

impl RewardJudge for MarkerJudge {
    fn judge_id(&self) -> &str {
        Self::ID
    }

    fn evaluate(&self, _request: &str, _action: &str, window: &RewardWindow) -> Result<RawJudgement, String> {
        let found = window
            .messages
            .iter()
            .flat_map(|m| m.split_whitespace())
            .filter(|token| token.starts_with("FB:"))
            .find_map(MarkerJudge::parse_marker);
        Ok(found.unwrap_or(RawJudgement {
            dims: [0; DIMENSIONS],
            confidence: 0.0,
        }))
    }
}

/// Maps explicit benchmark verdicts (`VERDICT:pass`, `VERDICT:fail`) to fixed
/// vectors:
///
/// | verdict | out | int | exe | orc | exp | c |
/// |---------|-----|-----|-----|-----|-----|---|
/// | pass    | +1  |  0  | +1  |  0  |  0  | 1 |
/// | fail    | -1  |  0  | -1  |  0  |  0  | 1 |
/// | none    |  0  |  0  |  0  |  0  |  0  | 0 |
#[derive(Debug, Clone, Default)]
pub struct BenchmarkJudge;

impl BenchmarkJudge {
    pub const ID: &'static str = "benchmark";
}

impl RewardJudge for BenchmarkJudge {
    fn judge_id(&self) -> &str {
        Self::ID
    }

    fn evaluate(&self, _request: &str, _action: &str, window: &RewardWindow) -> Result<RawJudgement, String> {
        let verdict = window
            .messages
            .iter()
            .flat_map(|m| m.split_whitespace())
            .find_map(|token| token.strip_prefix("VERDICT:"));
        let (dims, confidence) = match verdict {
            Some("pass") => ([1, 0, 1, 0, 0], 1.0),
            Some("fail") => ([-1, 0, -1, 0, 0], 1.0),
            Some(other) => return Err(format!("unknown verdict `{other}`")),
            None => ([0; DIMENSIONS], 0.0),
        };
        Ok(RawJudgement { dims, confidence })
    }
}
