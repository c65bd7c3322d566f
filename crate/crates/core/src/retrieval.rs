//! Value-aware recall: a semantic shortlist in intent space, hybrid scoring
//!
//! ```text
//! score_i = w_s·ẑ(σ_i) + w_q·ẑ(q_i) + c·sqrt(ln T / max(n_i, 1)),   T = max(Σ_j n_j, 1)
//! ```
//!
//! where `ẑ` is the z-score within the shortlist and the visit total runs over
//! the shortlist, followed by slot-wise ε-greedy selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KernelConfig;
use crate::credit::{TurnKey, UsageLink};
use crate::error::Result;
use crate::experience::{ExperienceId, ExperienceStore};

/// A shortlisted record with the inputs scoring needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: ExperienceId,
    pub sigma: f64,
    pub q_scalar: f64,
    pub visits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub id: ExperienceId,
    pub sigma: f64,
    pub q_scalar: f64,
    pub sigma_z: f64,
    pub q_z: f64,
    pub visits: u64,
    pub bonus: f64,
    pub score: f64,
}

/// One injected experience as handed to the decision context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedExperience {
    pub id: ExperienceId,
    pub intent: String,
    pub script: String,
    pub score: f64,
}

/// Experiences selected for one turn, in selection order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InjectionPayload(pub Vec<InjectedExperience>);

impl InjectionPayload {
    pub fn ids(&self) -> Vec<ExperienceId> {
        self.0.iter().map(|e| e.id).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Plain-text block for a prompt.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (rank, e) in self.0.iter().enumerate() {
            out.push_str(&format!(
                "[experience {} | id {} | score {:.3}]\nintent: {}\nscript: {}\n",
                rank + 1,
                e.id,
                e.score,
                e.intent,
                e.script
            ));
        }
        out
    }
}

/// Top `m` records by intent similarity to `query`, most similar first, ties
/// to the older id.
pub fn shortlist(store: &ExperienceStore, query: &str, m: usize) -> Vec<(ExperienceId, f64)> {
    if m == 0 || store.is_empty() {
        return Vec::new();
    }
    let provider = store.provider();
    let probe = provider.embed(query);
    let mut all: Vec<(ExperienceId, f64)> = store
        .records()
        .iter()
        .map(|r| {
            let key = store.intent_key(r.id).expect("every record has a key");
            (r.id, provider.similarity(&probe, key))
        })
        .collect();
    let order = |a: &(ExperienceId, f64), b: &(ExperienceId, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if all.len() > m {
        all.select_nth_unstable_by(m - 1, order);
        all.truncate(m);
    }
    all.sort_by(order);
    all
}

/// Attaches scalar values and visit counts to a shortlist.
pub fn candidates(
    store: &ExperienceStore,
    shortlist: &[(ExperienceId, f64)],
    config: &KernelConfig,
) -> Result<Vec<Candidate>> {
    shortlist
        .iter()
        .map(|&(id, sigma)| {
            let record = store.get(id)?;
            Ok(Candidate {
                id,
                sigma,
                q_scalar: record.q_scalar(&config.lambda),
                visits: record.visit_count,
            })
        })
        .collect()
}

/// Population z-scores; a singleton or constant set maps to all zeros.
pub fn z_scores(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let constant = values.windows(2).all(|w| w[0] == w[1]);
    if n < 2 || constant {
        return vec![0.0; n];
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; n];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Visit bonus `c·sqrt(ln T / max(n, 1))` with `T` already floored at 1.
pub fn exploration_bonus(c: f64, total_visits: u64, visits: u64) -> f64 {
    let total = total_visits.max(1) as f64;
    c * (total.ln() / visits.max(1) as f64).sqrt()
}

/// Scores a candidate set. Output order matches input order.
pub fn score(candidates: &[Candidate], config: &KernelConfig) -> Vec<ScoredCandidate> {
    let sigmas: Vec<f64> = candidates.iter().map(|c| c.sigma).collect();
    let values: Vec<f64> = candidates.iter().map(|c| c.q_scalar).collect();
    let sigma_z = z_scores(&sigmas);
    let q_z = z_scores(&values);
    let total: u64 = candidates.iter().map(|c| c.visits).sum();
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let bonus = exploration_bonus(config.ucb_c, total, c.visits);
            ScoredCandidate {
                id: c.id,
                sigma: c.sigma,
                q_scalar: c.q_scalar,
                sigma_z: sigma_z[i],
                q_z: q_z[i],
                visits: c.visits,
                bonus,
                score: config.w_s * sigma_z[i] + config.w_q * q_z[i] + bonus,
            }
        })
        .collect()
}

/// Fills up to `k` slots. Each slot independently takes the best remaining
/// candidate with probability `1 - epsilon`, otherwise a uniformly random
/// remaining one. Returns indices into `scored`, in selection order.
pub fn select_top_k<R: Rng + ?Sized>(scored: &[ScoredCandidate], k: usize, epsilon: f64, rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..scored.len()).collect();
    remaining.sort_by(|&a, &b| {
        scored[b]
            .score
            .total_cmp(&scored[a].score)
            .then(scored[a].id.cmp(&scored[b].id))
    });
    let mut picked = Vec::with_capacity(k.min(scored.len()));
    while picked.len() < k && !remaining.is_empty() {
        let explore = epsilon > 0.0 && rng.gen::<f64>() < epsilon;
        let slot = if explore { rng.gen_range(0..remaining.len()) } else { 0 };
        picked.push(remaining.remove(slot));
    }
    picked
}

/// The random stream used for `turn`'s selection. Keyed by turn rather than
/// drawn from a shared generator, so a recall's outcome does not depend on
/// how many recalls happened before it.
pub fn turn_rng(seed: u64, turn: TurnKey) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(turn.session.0);
    rng.set_word_pos(u128::from(turn.index) << 32);
    rng
}

/// Scores the shortlist for `query` without touching the store.
pub fn rank(store: &ExperienceStore, query: &str, config: &KernelConfig) -> Result<Vec<ScoredCandidate>> {
    let short = shortlist(store, query, config.shortlist_m);
    let cands = candidates(store, &short, config)?;
    Ok(score(&cands, config))
}

/// Shortlist, score and select for `turn`, then record the usage link (which
/// bumps visit counts). An empty selection records nothing.
pub fn recall<R: Rng + ?Sized>(
    store: &mut ExperienceStore,
    query: &str,
    turn: TurnKey,
    config: &KernelConfig,
    rng: &mut R,
) -> Result<(InjectionPayload, Option<UsageLink>)> {
    let scored = rank(store, query, config)?;
    let picked = select_top_k(&scored, config.top_k, config.epsilon, rng);
    if picked.is_empty() {
        return Ok((InjectionPayload::default(), None));
    }
    let mut payload = Vec::with_capacity(picked.len());
    for &i in &picked {
        let record = store.get(scored[i].id)?;
        payload.push(InjectedExperience {
            id: record.id,
            intent: record.intent.clone(),
            script: record.script.clone(),
            score: scored[i].score,
        });
    }
    let payload = InjectionPayload(payload);
    let link = store.record_usage(turn, &payload.ids())?;
    Ok((payload, Some(link)))
}
