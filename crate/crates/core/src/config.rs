//! Learning hyperparameters and their flat `key = value` file format.
//!
//! Every field has a documented default; a missing config file yields
//! [`KernelConfig::default`]. Range checks run on every load so an
//! out-of-range value never reaches the learning loop.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KernelError, Result};
use crate::reward::DIMENSIONS;

/// How the value vector of a freshly encoded experience is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedQ {
    /// Start from the reward of the episode that produced the record.
    OwnReward,
    /// Start from the zero vector.
    Zero,
}

impl FromStr for SeedQ {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "own_reward" => Ok(SeedQ::OwnReward),
            "zero" => Ok(SeedQ::Zero),
            other => Err(KernelError::config(
                "seed_q",
                format!("expected own_reward or zero, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for SeedQ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedQ::OwnReward => f.write_str("own_reward"),
            SeedQ::Zero => f.write_str("zero"),
        }
    }
}

/// All tunable parameters of the experience loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Per-dimension weights used for scalar summaries of rewards and values.
    pub lambda: [f64; DIMENSIONS],
    /// Credit step size, in (0, 1].
    pub alpha: f64,
    /// Number of follow-up messages that form a reward window.
    pub window_h: usize,
    /// Weight of the normalised similarity term.
    pub w_s: f64,
    /// Weight of the normalised value term.
    pub w_q: f64,
    /// Exploration constant of the visit bonus.
    pub ucb_c: f64,
    /// Probability of a random pick per injection slot.
    pub epsilon: f64,
    /// Number of experiences injected per turn.
    pub top_k: usize,
    /// Size of the semantic shortlist that gets scored.
    pub shortlist_m: usize,
    /// Intent similarity needed for near-duplicate replacement.
    pub tau_intent: f64,
    /// Script similarity needed for near-duplicate replacement.
    pub tau_script: f64,
    pub rng_seed: u64,
    pub seed_q: SeedQ,
    /// Extra delivery attempts before a message to a closed or missing
    /// session is dead-lettered.
    pub mailbox_retries: u32,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            lambda: [1.0; DIMENSIONS],
            alpha: 0.3,
            window_h: 5,
            w_s: 1.0,
            w_q: 1.0,
            ucb_c: 0.5,
            epsilon: 0.1,
            top_k: 3,
            shortlist_m: 16,
            tau_intent: 0.85,
            tau_script: 0.85,
            rng_seed: 0,
            seed_q: SeedQ::OwnReward,
            mailbox_retries: 0,
        }
    }
}

fn finite(field: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(KernelError::config(field, "must be finite"))
    }
}

fn in_unit(field: &str, value: f64) -> Result<()> {
    finite(field, value)?;
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(KernelError::config(field, format!("{value} is outside [0, 1]")))
    }
}

fn non_negative(field: &str, value: f64) -> Result<()> {
    finite(field, value)?;
    if value >= 0.0 {
        Ok(())
    } else {
        Err(KernelError::config(field, format!("{value} is negative")))
    }
}

impl KernelConfig {
    /// Checks every range constraint, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        for &weight in &self.lambda {
            non_negative("lambda", weight)?;
        }
        if self.lambda.iter().sum::<f64>() <= 0.0 {
            return Err(KernelError::config("lambda", "weights must sum to > 0"));
        }
        finite("alpha", self.alpha)?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(KernelError::config(
                "alpha",
                format!("{} is outside (0, 1]", self.alpha),
            ));
        }
        if self.window_h < 1 {
            return Err(KernelError::config("window_h", "must be at least 1"));
        }
        non_negative("w_s", self.w_s)?;
        non_negative("w_q", self.w_q)?;
        non_negative("ucb_c", self.ucb_c)?;
        in_unit("epsilon", self.epsilon)?;
        if self.top_k < 1 {
            return Err(KernelError::config("top_k", "must be at least 1"));
        }
        if self.shortlist_m < self.top_k {
            return Err(KernelError::config(
                "shortlist_m",
                format!("{} is smaller than top_k {}", self.shortlist_m, self.top_k),
            ));
        }
        in_unit("tau_intent", self.tau_intent)?;
        in_unit("tau_script", self.tau_script)?;
        Ok(())
    }

    /// Loads a config file. A missing file yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(KernelConfig::default());
        };
        match fs::read_to_string(path) {
            Ok(text) => Self::parse(&text),
            Err(err) if err.kind() == io::ErrorKind::NotFound => Ok(KernelConfig::default()),
            Err(err) => Err(err.into()),
        }
    }

    /// Parses flat `key = value` text. Blank lines and `#` comments are
    /// ignored; absent keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = KernelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                KernelError::InvalidInput(format!("config line {}: expected `key = value`", lineno + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Sets one field from its textual form without range validation.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(field: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| KernelError::config(field, format!("cannot parse `{value}`")))
        }
        match key {
            "lambda" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != DIMENSIONS {
                    return Err(KernelError::config(
                        "lambda",
                        format!("expected {DIMENSIONS} comma-separated weights"),
                    ));
                }
                for (slot, part) in self.lambda.iter_mut().zip(parts) {
                    *slot = num("lambda", part)?;
                }
            }
            "alpha" => self.alpha = num(key, value)?,
            "window_h" => self.window_h = num(key, value)?,
            "w_s" => self.w_s = num(key, value)?,
            "w_q" => self.w_q = num(key, value)?,
            "ucb_c" => self.ucb_c = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "shortlist_m" => self.shortlist_m = num(key, value)?,
            "tau_intent" => self.tau_intent = num(key, value)?,
            "tau_script" => self.tau_script = num(key, value)?,
            "rng_seed" => self.rng_seed = num(key, value)?,
            "seed_q" => self.seed_q = value.parse()?,
            "mailbox_retries" => self.mailbox_retries = num(key, value)?,
            other => return Err(KernelError::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Renders the config in the same flat format `parse` accepts.
    pub fn to_kv_string(&self) -> String {
        let lambda: Vec<String> = self.lambda.iter().map(|w| w.to_string()).collect();
        format!(
            "lambda = {}\nalpha = {}\nwindow_h = {}\nw_s = {}\nw_q = {}\nucb_c = {}\n\
             epsilon = {}\ntop_k = {}\nshortlist_m = {}\ntau_intent = {}\ntau_script = {}\n\
             rng_seed = {}\nseed_q = {}\nmailbox_retries = {}\n",
            lambda.join(", "),
            self.alpha,
            self.window_h,
            self.w_s,
            self.w_q,
            self.ucb_c,
            self.epsilon,
            self.top_k,
            self.shortlist_m,
            self.tau_intent,
            self.tau_script,
            self.rng_seed,
            self.seed_q,
            self.mailbox_retries,
        )
    }
}
