//! Deterministic synthetic world for exercising the whole loop without a
//! model backend.
//!
//! Each task belongs to one of `F` families, and each family has a hidden
//! correct script token. The scripted policy succeeds with `p1` when an
//! injected experience carries its family's token, otherwise with `p0`. A
//! success emits the correct token and a failure emits a random wrong one.
//! Feedback is a marker with `out = ±1` and `c = 1`. Task intents mix a
//! family topic word with filler drawn from a shared vocabulary, so semantic
//! similarity alone is a noisy guide to the right experience.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{self, ImportOptions, ImportReport};
use crate::config::KernelConfig;
use crate::error::{KernelError, Result};
use crate::kernel::Kernel;
use crate::reward::MarkerJudge;
use crate::session::Role;

const TOPICS: [&str; 24] = [
    "ledger", "kiln", "harbor", "quartz", "meadow", "turbine", "lantern", "glacier", "orchard", "beacon", "canyon",
    "falcon", "cobalt", "prairie", "saffron", "tundra", "walnut", "zephyr", "marble", "thistle", "juniper", "basalt",
    "mirage", "nectar",
];

const FILLER: [&str; 32] = [
    "please", "update", "check", "the", "service", "module", "quickly", "again", "handle", "report", "config", "issue",
    "build", "deploy", "review", "request", "fix", "broken", "latest", "change", "pipeline", "error", "job", "cache",
    "task", "team", "queue", "metric", "alert", "patch", "branch", "cluster",
];

const TOKEN_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
const TOKEN_LEN: usize = 8;

/// Parameters of the synthetic task stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub families: usize,
    pub tasks_per_epoch: usize,
    pub base_success: f64,
    pub boosted_success: f64,
    pub rng_seed: u64,
    /// Filler words mixed into every task intent.
    pub noise_words: usize,
}

impl SyntheticWorld {
    pub const DEFAULT_NOISE_WORDS: usize = 6;

    pub fn new(
        families: usize,
        tasks_per_epoch: usize,
        base_success: f64,
        boosted_success: f64,
        rng_seed: u64,
    ) -> Self {
        SyntheticWorld {
            families,
            tasks_per_epoch,
            base_success,
            boosted_success,
            rng_seed,
            noise_words: Self::DEFAULT_NOISE_WORDS,
        }
    }

    /// `p0 = p1` is allowed: it is the control world with nothing to learn.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(KernelError::InvalidInput(format!("world {field}: {why}")));
        if self.families == 0 || self.families > TOPICS.len() {
            return bad("families", "must be between 1 and 24");
        }
        if self.tasks_per_epoch == 0 {
            return bad("tasks_per_epoch", "must be positive");
        }
        let (p0, p1) = (self.base_success, self.boosted_success);
        if !(0.0..=1.0).contains(&p0) || !(0.0..=1.0).contains(&p1) || p0 > p1 {
            return bad("success probabilities", "need 0 <= p0 <= p1 <= 1");
        }
        Ok(())
    }

    /// The hidden correct token of each family.
    pub fn family_tokens(&self) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(1);
        (0..self.families).map(|_| random_token(&mut rng)).collect()
    }

    /// The fixed task set every epoch passes over.
    pub fn tasks(&self) -> Vec<Task> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(2);
        (0..self.tasks_per_epoch)
            .map(|_| {
                let family = rng.gen_range(0..self.families);
                let mut words: Vec<&str> = (0..self.noise_words)
                    .map(|_| *FILLER.choose(&mut rng).expect("non-empty"))
                    .collect();
                let at = rng.gen_range(0..=words.len());
                words.insert(at, TOPICS[family]);
                Task {
                    family,
                    intent: words.join(" "),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub family: usize,
    pub intent: String,
}

fn random_token<R: Rng>(rng: &mut R) -> String {
    (0..TOKEN_LEN)
        .map(|_| TOKEN_CHARS[rng.gen_range(0..TOKEN_CHARS.len())] as char)
        .collect()
}

/// Which retriever the simulated agent runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverMode {
    /// Similarity, learned value and exploration bonus.
    Full,
    /// Similarity only (`w_q = 0`, `c = 0`).
    SimilarityOnly,
    /// The policy never sees injected experience.
    NoInjection,
}

impl RetrieverMode {
    pub fn configure(&self, config: &KernelConfig) -> KernelConfig {
        let mut config = config.clone();
        if *self == RetrieverMode::SimilarityOnly {
            config.w_q = 0.0;
            config.ucb_c = 0.0;
        }
        config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrajectory {
    pub success_rates: Vec<f64>,
    pub store_sizes: Vec<usize>,
    /// Fraction of tasks whose action reused an injected script. There is no
    /// synthetic analog of a patch generation rate; this is tracked instead.
    pub emission_rates: Vec<f64>,
    pub mode: RetrieverMode,
    pub config: KernelConfig,
    pub world: SyntheticWorld,
}

impl EpochTrajectory {
    pub fn len(&self) -> usize {
        self.success_rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.success_rates.is_empty()
    }

    /// Plot-ready CSV with columns `epoch,success_rate,store_size`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,success_rate,store_size\n");
        for (i, (rate, size)) in self.success_rates.iter().zip(&self.store_sizes).enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, rate, size));
        }
        out
    }
}

struct EpochResult {
    success_rate: f64,
    emission_rate: f64,
}

/// Runs one pass over the task set. `epoch` keys the outcome randomness, so
/// two kernels running the same epoch index face identical coin flips.
fn run_epoch(world: &SyntheticWorld, kernel: &mut Kernel, mode: RetrieverMode, epoch: u64) -> Result<EpochResult> {
    let tokens = world.family_tokens();
    let tasks = world.tasks();
    let mut rng = ChaCha8Rng::seed_from_u64(world.rng_seed);
    rng.set_stream(3 + epoch);
    let (mut successes, mut reused) = (0usize, 0usize);
    for task in &tasks {
        let token = &tokens[task.family];
        let session = kernel.create_session("sim", None)?;
        let start = kernel.begin_turn(session, &task.intent)?;
        let boosted = mode != RetrieverMode::NoInjection && start.payload.0.iter().any(|e| &e.script == token);
        let p = if boosted {
            world.boosted_success
        } else {
            world.base_success
        };
        let success = rng.gen::<f64>() < p;
        let wrong = random_token(&mut rng);
        let action = if success { token.as_str() } else { wrong.as_str() };
        successes += usize::from(success);
        reused += usize::from(success && boosted);
        kernel.act(session, action)?;
        let out = if success { 1 } else { -1 };
        kernel.append(session, Role::User, &MarkerJudge::format_marker([out, 0, 0, 0, 0], 1.0))?;
        kernel.close_session(session, if success { "pass" } else { "fail" }, false)?;
    }
    let n = tasks.len() as f64;
    Ok(EpochResult {
        success_rate: successes as f64 / n,
        emission_rate: reused as f64 / n,
    })
}

/// Runs `epochs` passes on an existing kernel, with epoch indices starting at
/// `first_epoch`.
pub fn run_epochs_on(
    world: &SyntheticWorld,
    kernel: &mut Kernel,
    mode: RetrieverMode,
    first_epoch: u64,
    epochs: usize,
) -> Result<EpochTrajectory> {
    world.validate()?;
    let mut traj = EpochTrajectory {
        success_rates: Vec::with_capacity(epochs),
        store_sizes: Vec::with_capacity(epochs),
        emission_rates: Vec::with_capacity(epochs),
        mode,
        config: kernel.config().clone(),
        world: world.clone(),
    };
    for e in 0..epochs {
        let result = run_epoch(world, kernel, mode, first_epoch + e as u64)?;
        traj.success_rates.push(result.success_rate);
        traj.emission_rates.push(result.emission_rate);
        traj.store_sizes.push(kernel.store().len());
    }
    Ok(traj)
}

/// The kernel configuration a simulation runs with: `config` adjusted for
/// the mode and seeded from the world.
pub fn sim_config(world: &SyntheticWorld, config: &KernelConfig, mode: RetrieverMode) -> KernelConfig {
    let mut config = mode.configure(config);
    config.rng_seed = world.rng_seed;
    config
}

/// Runs `epochs` passes on a fresh kernel.
pub fn run_epochs(
    world: &SyntheticWorld,
    config: &KernelConfig,
    mode: RetrieverMode,
    epochs: usize,
) -> Result<EpochTrajectory> {
    let mut kernel = Kernel::new(sim_config(world, config, mode))?;
    run_epochs_on(world, &mut kernel, mode, 0, epochs)
}

/// Learning and transfer metrics over a score series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub start: f64,
    pub best: f64,
    pub gain_pp: f64,
    /// `gain_pp / start`; undefined when `start` is 0.
    pub relative_gain: Option<f64>,
    /// Share of the total gain reached by the fifth score (or the last, for
    /// shorter series); 1 when there is no gain.
    pub gain_by_epoch5_fraction: f64,
    /// Trajectory mode: each score minus `start`. Paired mode: injected
    /// minus baseline, per metric.
    pub deltas: Vec<f64>,
}

/// Metrics of one score trajectory.
pub fn report(scores: &[f64]) -> Result<MetricsReport> {
    let (&start, _) = scores
        .split_first()
        .ok_or_else(|| KernelError::InvalidInput("cannot report on an empty trajectory".into()))?;
    let best = scores.iter().copied().fold(start, f64::max);
    let gain_pp = best - start;
    let fifth = scores[4.min(scores.len() - 1)];
    Ok(MetricsReport {
        start,
        best,
        gain_pp,
        relative_gain: (start != 0.0).then(|| gain_pp / start),
        gain_by_epoch5_fraction: if best > start { (fifth - start) / gain_pp } else { 1.0 },
        deltas: scores.iter().map(|s| s - start).collect(),
    })
}

/// Metrics of `(baseline, injected)` pairs. The headline figures treat the
/// first pair as a two-point trajectory; `deltas` covers every pair.
pub fn report_pairs(pairs: &[(f64, f64)]) -> Result<MetricsReport> {
    let &(base, injected) = pairs
        .first()
        .ok_or_else(|| KernelError::InvalidInput("cannot report on zero pairs".into()))?;
    let mut headline = report(&[base, injected])?;
    headline.deltas = pairs.iter().map(|(b, i)| i - b).collect();
    Ok(headline)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub donor: EpochTrajectory,
    pub import: ImportReport,
    pub baseline: EpochTrajectory,
    pub recipient: EpochTrajectory,
    /// Pairs are (success rate, emission rate) for baseline vs recipient.
    pub report: MetricsReport,
}

impl TransferOutcome {
    /// Recipient minus baseline first-epoch success rate.
    pub fn success_delta(&self) -> f64 {
        self.report.deltas[0]
    }
}

/// A donor runs `donor_epochs`, its store is bundled and imported into a
/// fresh recipient, then the recipient and an empty baseline each run one
/// epoch facing the same outcome randomness.
pub fn transfer_experiment(
    world: &SyntheticWorld,
    config: &KernelConfig,
    donor_epochs: usize,
) -> Result<TransferOutcome> {
    let mode = RetrieverMode::Full;
    let config = sim_config(world, config, mode);
    let mut donor = Kernel::new(config.clone())?.with_id("donor");
    let donor_traj = run_epochs_on(world, &mut donor, mode, 0, donor_epochs)?;
    let bytes = bundle::export(donor.store(), None, donor.id())?;

    let mut recipient = Kernel::new(config.clone())?.with_id("recipient");
    let import = bundle::import(recipient.store_mut(), &bytes, &config, ImportOptions::default())?;
    let recipient_traj = run_epochs_on(world, &mut recipient, mode, 0, 1)?;

    let mut baseline = Kernel::new(config)?.with_id("baseline");
    let baseline_traj = run_epochs_on(world, &mut baseline, mode, 0, 1)?;

    let report = report_pairs(&[
        (baseline_traj.success_rates[0], recipient_traj.success_rates[0]),
        (baseline_traj.emission_rates[0], recipient_traj.emission_rates[0]),
    ])?;
    Ok(TransferOutcome {
        donor: donor_traj,
        import,
        baseline: baseline_traj,
        recipient: recipient_traj,
        report,
    })
}
