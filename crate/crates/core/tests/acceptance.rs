//! Acceptance suite: one line per criterion, `PASS` or `FAIL`, with the
//! measured figures. Exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synkernel::agenda::{AgendaDraft, AgendaState, Delivery, Trigger};
use synkernel::bundle::{self, ImportOptions};
use synkernel::credit::{credit_step, replay_q, TurnKey, UsageLink};
use synkernel::experience::{ExperienceDraft, ExperienceId, ExperienceStore, MemoryJournal};
use synkernel::kernel::{Command, Kernel, Reply};
use synkernel::retrieval::{self, Candidate};
use synkernel::reward::RewardVector;
use synkernel::session::{
    DagMutation, DeliveryState, Mailbox, NodeStatus, Outgoing, PlanDag, Reachability, Sender, SessionId, Target,
};
use synkernel::sim::{self, RetrieverMode, SyntheticWorld};
use synkernel::similarity::{SimilarityProvider, TrigramProvider};
use synkernel::{KernelConfig, KernelError};

type Outcome = Result<String, String>;

/// Number, name, time budget and check.
type Criterion = (&'static str, &'static str, Duration, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    }};
}

// Regression values measured on the seeded synthetic world (F=10, N=200,
// p0=0.3, p1=0.9, seed 42, default config) and frozen.
const GROWTH_EPOCH1: f64 = 0.535;
const GROWTH_EPOCH8: f64 = 0.845;
const GROWTH_MARGIN_FLOOR: f64 = 0.25;
const TRANSFER_DELTA: f64 = 0.295;
const TRANSFER_MARGIN_FLOOR: f64 = 0.2;

fn world() -> SyntheticWorld {
    SyntheticWorld::new(10, 200, 0.3, 0.9, 42)
}

fn turn(session: u64, index: u64) -> TurnKey {
    TurnKey {
        session: SessionId(session),
        index,
    }
}

fn random_q(rng: &mut ChaCha8Rng) -> [f64; 5] {
    std::array::from_fn(|_| rng.gen_range(-1.0..=1.0))
}

fn random_r(rng: &mut ChaCha8Rng) -> [i64; 5] {
    std::array::from_fn(|_| rng.gen_range(-1..=1))
}

fn q_update_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_replay, mut worst_geo, mut updates) = (0.0f64, 0.0f64, 0usize);
    for seq in 0..1000u64 {
        let journal = MemoryJournal::new();
        let mut store = ExperienceStore::with_journal(Arc::new(TrigramProvider::default()), Box::new(journal.clone()));
        let q0 = random_q(&mut rng);
        let id = store
            .insert(
                ExperienceDraft::new(format!("intent {seq}"), "script", "digest").with_q(q0),
                &KernelConfig::default(),
            )
            .map_err(|e| e.to_string())?
            .id();
        let link = UsageLink {
            turn: turn(1, seq),
            used_ids: vec![id],
        };
        // Independent fold in plain arithmetic, no clamping.
        let mut naive = q0;
        for _ in 0..rng.gen_range(1..=60) {
            let r = random_r(&mut rng);
            let alpha = rng.gen_range(0.01..=1.0);
            let c = rng.gen_range(0.0..=1.0);
            let reward = RewardVector::new(r, c, "acceptance").map_err(|e| e.to_string())?;
            store.apply_credit(&link, &reward, alpha).map_err(|e| e.to_string())?;
            for d in 0..5 {
                naive[d] = (1.0 - alpha * c) * naive[d] + alpha * c * r[d] as f64;
            }
            updates += 1;
            let stored = store.get(id).map_err(|e| e.to_string())?.q_values;
            ensure!(
                stored.iter().all(|v| (-1.0..=1.0).contains(v)),
                "sequence {seq}: Q {stored:?} left [-1, 1]"
            );
        }
        let stored = store.get(id).map_err(|e| e.to_string())?.q_values;
        let replayed = replay_q(&journal.entries(), id).map_err(|e| e.to_string())?;
        for d in 0..5 {
            worst_replay = worst_replay
                .max((stored[d] - replayed[d]).abs())
                .max((stored[d] - naive[d]).abs());
        }

        // Geometric convergence under a repeated update.
        let r = random_r(&mut rng).map(|v| v as f64);
        let alpha = rng.gen_range(0.01..=1.0);
        let c = rng.gen_range(0.0..=1.0);
        let k = rng.gen_range(1..=40);
        let mut q = q0;
        for _ in 0..k {
            q = credit_step(&q, &r, alpha, c);
        }
        for d in 0..5 {
            let expected = (1.0 - alpha * c).powi(k) * (q0[d] - r[d]).abs();
            worst_geo = worst_geo.max(((q[d] - r[d]).abs() - expected).abs());
        }
    }
    ensure!(worst_replay <= 1e-12, "replay deviation {worst_replay:e} > 1e-12");
    ensure!(worst_geo <= 1e-9, "geometric identity deviation {worst_geo:e} > 1e-9");
    Ok(format!(
        "1000 sequences, {updates} updates; max |stored - replay| = {worst_replay:.1e}; max geometric error = {worst_geo:.1e}"
    ))
}

const WORDS: [&str; 20] = [
    "deploy", "index", "cache", "schema", "router", "billing", "token", "queue", "backup", "metrics", "login",
    "search", "upload", "mailer", "shard", "lint", "report", "invoice", "sync", "alert",
];

fn phrase(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| *WORDS.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn population_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Exhaustive-sort oracle for ε = 0 selection: returns (id, score) of the top
/// `k`, best first.
fn oracle_top_k(store: &ExperienceStore, query: &str, cfg: &KernelConfig) -> Vec<(ExperienceId, f64)> {
    let provider = TrigramProvider::default();
    let mut all: Vec<(ExperienceId, f64)> = store
        .records()
        .iter()
        .map(|r| (r.id, provider.text_similarity(query, &r.intent)))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(cfg.shortlist_m);
    let sig: Vec<f64> = all.iter().map(|a| a.1).collect();
    let qs: Vec<f64> = all
        .iter()
        .map(|a| {
            let r = store.get(a.0).expect("listed");
            r.q_values.iter().zip(&cfg.lambda).map(|(q, l)| q * l).sum()
        })
        .collect();
    let visits: Vec<u64> = all
        .iter()
        .map(|a| store.get(a.0).expect("listed").visit_count)
        .collect();
    let z = |xs: &[f64]| -> Vec<f64> {
        let (mean, sd) = population_stats(xs);
        if xs.len() < 2 || sd == 0.0 {
            vec![0.0; xs.len()]
        } else {
            xs.iter().map(|x| (x - mean) / sd).collect()
        }
    };
    let (zs, zq) = (z(&sig), z(&qs));
    let total = visits.iter().sum::<u64>().max(1) as f64;
    let mut scored: Vec<(ExperienceId, f64)> = all
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let bonus = cfg.ucb_c * (total.ln() / visits[i].max(1) as f64).sqrt();
            (a.0, cfg.w_s * zs[i] + cfg.w_q * zq[i] + bonus)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(cfg.top_k);
    scored
}

fn retrieval_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut compared = 0usize;
    let mut z_checked = 0usize;
    for s in 0..200u64 {
        let cfg = KernelConfig {
            epsilon: 0.0,
            top_k: rng.gen_range(1..=5),
            shortlist_m: rng.gen_range(5..=32),
            ucb_c: rng.gen_range(0.0..=1.5),
            w_q: rng.gen_range(0.0..=2.0),
            ..KernelConfig::default()
        };
        let mut store = ExperienceStore::default();
        let n = rng.gen_range(1..=500);
        for i in 0..n {
            let mut draft = ExperienceDraft::new(
                phrase(&mut rng, 4),
                format!("script {s}-{i} {}", phrase(&mut rng, 3)),
                "d",
            )
            .with_q(random_q(&mut rng));
            draft.visit_count = if rng.gen_bool(0.3) { 0 } else { rng.gen_range(0..50) };
            store.insert(draft, &cfg).map_err(|e| e.to_string())?;
        }
        let query = phrase(&mut rng, 4);
        let oracle = oracle_top_k(&store, &query, &cfg);
        let scored = retrieval::rank(&store, &query, &cfg).map_err(|e| e.to_string())?;
        let picked = retrieval::select_top_k(&scored, cfg.top_k, 0.0, &mut rng);
        ensure!(
            picked.len() == oracle.len(),
            "store {s}: picked {} vs oracle {}",
            picked.len(),
            oracle.len()
        );
        let oracle_score: HashMap<ExperienceId, f64> = oracle.iter().copied().collect();
        for (slot, (&i, &(want, want_score))) in picked.iter().zip(&oracle).enumerate() {
            let got = scored[i].id;
            ensure!(scored[i].score.is_finite(), "store {s}: non-finite score");
            // A different id is only acceptable at an exact tie up to rounding.
            let tie = oracle_score.get(&got).is_some_and(|g| (g - want_score).abs() < 1e-12);
            ensure!(got == want || tie, "store {s} slot {slot}: got {got}, oracle {want}");
            compared += 1;
        }
        if scored.len() >= 2 {
            for column in [
                scored.iter().map(|c| c.sigma_z).collect::<Vec<_>>(),
                scored.iter().map(|c| c.q_z).collect::<Vec<_>>(),
            ] {
                let (mean, sd) = population_stats(&column);
                if sd > 0.0 {
                    ensure!(
                        mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9,
                        "store {s}: z mean {mean}, sd {sd}"
                    );
                    z_checked += 1;
                }
            }
        }
    }
    let single = retrieval::score(
        &[Candidate {
            id: ExperienceId(1),
            sigma: 0.7,
            q_scalar: 0.3,
            visits: 0,
        }],
        &KernelConfig::default(),
    );
    ensure!(single[0].score == 0.0, "singleton score {}", single[0].score);
    let unvisited: Vec<Candidate> = (1..=4)
        .map(|i| Candidate {
            id: ExperienceId(i),
            sigma: 0.5 + i as f64 / 10.0,
            q_scalar: 0.0,
            visits: 0,
        })
        .collect();
    let scored = retrieval::score(&unvisited, &KernelConfig::default());
    ensure!(
        scored.iter().all(|c| c.score.is_finite() && c.bonus == 0.0),
        "zero-visit convention violated"
    );
    Ok(format!(
        "200 stores, {compared} slots match the exhaustive oracle; {z_checked} z-score columns at mean 0 / sd 1"
    ))
}

fn epsilon_statistics() -> Outcome {
    let cands: Vec<Candidate> = (1..=10)
        .map(|i| Candidate {
            id: ExperienceId(i),
            sigma: i as f64 / 10.0,
            q_scalar: 0.0,
            visits: 1,
        })
        .collect();
    let scored = retrieval::score(&cands, &KernelConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; 10];
    for _ in 0..10_000 {
        let picked = retrieval::select_top_k(&scored, 1, 1.0, &mut rng);
        counts[picked[0]] += 1;
    }
    let (lo, hi) = (
        counts.iter().min().copied().unwrap_or(0),
        counts.iter().max().copied().unwrap_or(0),
    );
    ensure!(lo >= 850 && hi <= 1150, "counts {counts:?} outside 1000 ± 150");
    Ok(format!("counts {counts:?} (min {lo}, max {hi})"))
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
    let den: f64 = (0..ys.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    num / den
}

fn learning_growth() -> Outcome {
    let cfg = KernelConfig::default();
    let traj = sim::run_epochs(&world(), &cfg, RetrieverMode::Full, 8).map_err(|e| e.to_string())?;
    let rates = &traj.success_rates;
    let gain = rates[7] - rates[0];
    ensure!(
        (rates[0] - GROWTH_EPOCH1).abs() < 1e-12 && (rates[7] - GROWTH_EPOCH8).abs() < 1e-12,
        "trajectory drifted from frozen values: {rates:?}"
    );
    ensure!(
        gain >= GROWTH_MARGIN_FLOOR,
        "epoch-8 minus epoch-1 = {gain:.3} < {GROWTH_MARGIN_FLOOR}"
    );
    let trend = slope(rates);
    let (early, late) = (
        rates[..4].iter().sum::<f64>() / 4.0,
        rates[4..].iter().sum::<f64>() / 4.0,
    );
    ensure!(
        trend > 0.0 && late > early,
        "not improving on average: slope {trend}, halves {early} / {late}"
    );

    let mut finals = BTreeMap::new();
    for mode in [
        RetrieverMode::Full,
        RetrieverMode::SimilarityOnly,
        RetrieverMode::NoInjection,
    ] {
        let mut sum = 0.0;
        for seed in 1..=5 {
            let w = SyntheticWorld {
                rng_seed: seed,
                ..world()
            };
            sum += sim::run_epochs(&w, &cfg, mode, 8)
                .map_err(|e| e.to_string())?
                .success_rates[7];
        }
        finals.insert(format!("{mode:?}"), sum / 5.0);
    }
    let (full, sim_only, none) = (finals["Full"], finals["SimilarityOnly"], finals["NoInjection"]);
    ensure!(
        full >= sim_only && sim_only >= none,
        "ablation order broken: {finals:?}"
    );
    Ok(format!(
        "epoch 1 {:.3} -> epoch 8 {:.3} (gain {gain:.3}, slope {trend:.4}/epoch); 5-seed final: full {full:.3} >= similarity-only {sim_only:.3} >= none {none:.3}",
        rates[0], rates[7]
    ))
}

fn transfer_head_start() -> Outcome {
    let cfg = KernelConfig::default();
    let six = sim::transfer_experiment(&world(), &cfg, 6).map_err(|e| e.to_string())?;
    let delta = six.success_delta();
    ensure!(
        (delta - TRANSFER_DELTA).abs() < 1e-12,
        "delta {delta} drifted from frozen {TRANSFER_DELTA}"
    );
    ensure!(
        delta >= TRANSFER_MARGIN_FLOOR,
        "delta {delta:.3} < {TRANSFER_MARGIN_FLOOR}"
    );
    let zero = sim::transfer_experiment(&world(), &cfg, 0).map_err(|e| e.to_string())?;
    ensure!(
        zero.report.deltas.iter().all(|d| *d == 0.0),
        "donor_epochs=0 deltas {:?}",
        zero.report.deltas
    );
    ensure!(
        zero.baseline.success_rates == zero.recipient.success_rates,
        "empty bundle changed the recipient"
    );
    Ok(format!(
        "donor 6 epochs ({} records imported): baseline {:.3} vs recipient {:.3}, delta {delta:.3}; donor 0 epochs: delta 0",
        six.import.added, six.baseline.success_rates[0], six.recipient.success_rates[0]
    ))
}

fn metric_arithmetic() -> Outcome {
    // (start, best, reported relative gain in %)
    let rows = [(63.0, 82.6, 31.1), (60.8, 83.0, 36.5), (11.94, 29.6, 148.1)];
    let mut seen = Vec::new();
    for (start, best, reported) in rows {
        let r = sim::report(&[start, best]).map_err(|e| e.to_string())?;
        let rel = 100.0 * r.relative_gain.ok_or("start is non-zero")?;
        ensure!((rel - reported).abs() <= 0.3, "{start} -> {best}: {rel:.2}% vs {reported}%");
        seen.push(format!("{rel:.1}%"));
    }
    let fig = sim::report_pairs(&[(20.64, 48.44), (17.86, 50.58), (3.79, 23.51)]).map_err(|e| e.to_string())?;
    let mean_delta = fig.deltas[0];
    ensure!(format!("{mean_delta:.2}") == "27.80", "mean delta {mean_delta}");
    ensure!((mean_delta - 27.8).abs() < 1e-9, "mean delta {mean_delta}");
    ensure!(
        format!("{:.1}", fig.deltas[1]) == "32.7" && format!("{:.1}", fig.deltas[2]) == "19.7",
        "deltas {:?}",
        fig.deltas
    );
    Ok(format!(
        "relative gains {} ; mean delta +{mean_delta:.1} pp",
        seen.join(", ")
    ))
}

/// Oracle: does `from` reach `to` following dependency edges backwards?
fn depends_on(deps: &BTreeMap<String, BTreeSet<String>>, node: &str, target: &str) -> bool {
    let mut stack = vec![node.to_string()];
    let mut seen = BTreeSet::new();
    while let Some(n) = stack.pop() {
        if n == target {
            return true;
        }
        if seen.insert(n.clone()) {
            stack.extend(deps[&n].iter().cloned());
        }
    }
    false
}

fn check_dag(dag: &PlanDag) -> Result<(), String> {
    let order = dag
        .topological_order()
        .ok_or("topological sort failed on an accepted graph")?;
    let pos: HashMap<&str, usize> = order.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    for node in dag.nodes() {
        for dep in &node.deps {
            ensure!(
                pos[dep.as_str()] < pos[node.id.as_str()],
                "order puts {} before its dep {dep}",
                node.id
            );
        }
        let deps_done = node.deps.iter().all(|d| dag.status(d) == Some(NodeStatus::Done));
        match node.status {
            NodeStatus::Ready => ensure!(deps_done, "{} ready with unfinished deps", node.id),
            NodeStatus::Blocked => ensure!(!deps_done, "{} blocked although all deps are done", node.id),
            _ => {}
        }
    }
    Ok(())
}

fn dag_fuzz(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut dag = PlanDag::new();
    let mut mirror: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let n = rng.gen_range(2..=25);
    let mut rejected_cycles = 0;
    for i in 0..n {
        let id = format!("n{i}");
        let existing: Vec<String> = mirror.keys().cloned().collect();
        let deps: Vec<String> = existing.iter().filter(|_| rng.gen_bool(0.2)).cloned().collect();
        dag.apply(DagMutation::AddNode {
            id: id.clone(),
            label: id.clone(),
            deps: deps.clone(),
        })
        .map_err(|e| e.to_string())?;
        mirror.insert(id, deps.into_iter().collect());
        check_dag(&dag)?;
    }
    let ids: Vec<String> = mirror.keys().cloned().collect();
    for _ in 0..n * 3 {
        let a = ids.choose(rng).expect("non-empty").clone();
        let b = ids.choose(rng).expect("non-empty").clone();
        match rng.gen_range(0..3) {
            0 => {
                let cyclic = a == b || depends_on(&mirror, &a, &b);
                let status = dag.status(&b).expect("exists");
                let result = dag.apply(DagMutation::AddEdge {
                    from: a.clone(),
                    to: b.clone(),
                });
                match result {
                    Err(KernelError::Cycle { from, to }) => {
                        ensure!(cyclic, "edge {a}->{b} rejected as a cycle but the oracle finds none");
                        ensure!(
                            (from.as_str(), to.as_str()) == (a.as_str(), b.as_str()),
                            "cycle error names wrong edge"
                        );
                        rejected_cycles += 1;
                    }
                    Err(_) => ensure!(
                        !matches!(status, NodeStatus::Blocked | NodeStatus::Ready),
                        "edge into open node rejected"
                    ),
                    Ok(_) => {
                        ensure!(!cyclic, "edge {a}->{b} accepted but closes a cycle");
                        mirror.get_mut(&b).expect("exists").insert(a);
                    }
                }
            }
            1 => {
                let before = dag.status(&a).expect("exists");
                let promoted = dag.apply(DagMutation::CompleteNode { id: a.clone() });
                match promoted {
                    Ok(report) => {
                        ensure!(
                            matches!(before, NodeStatus::Ready | NodeStatus::Running),
                            "completed a {before} node"
                        );
                        let unique: BTreeSet<&String> = report.promoted.iter().collect();
                        ensure!(unique.len() == report.promoted.len(), "a node was promoted twice");
                    }
                    Err(_) => ensure!(
                        !matches!(before, NodeStatus::Ready | NodeStatus::Running),
                        "completion of {before} node rejected"
                    ),
                }
            }
            _ => {
                let _ = dag.apply(DagMutation::StartNode { id: a });
            }
        }
        check_dag(&dag)?;
    }
    Ok(rejected_cycles)
}

fn mailbox_fuzz(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut mb = Mailbox::new();
    let targets = [
        Target::Home,
        Target::Session(SessionId(1)),
        Target::Session(SessionId(2)),
    ];
    let mut sent: Vec<(String, Target, u64)> = Vec::new();
    let mut delivered: HashMap<u64, usize> = HashMap::new();
    let mut last_seen: HashMap<(String, String), u64> = HashMap::new();
    let mut seq = 0u64;
    for now in 0..300u64 {
        if rng.gen_bool(0.6) {
            let sender = format!("a{}", rng.gen_range(0..4));
            let target = targets.choose(rng).expect("non-empty").clone();
            mb.send(
                Outgoing {
                    sender: Sender::Agent(sender.clone()),
                    target: target.clone(),
                    payload: seq.to_string(),
                    idempotency_key: None,
                },
                Reachability::Open,
                0,
                now,
            );
            sent.push((sender, target, seq));
            seq += 1;
        } else {
            let target = targets.choose(rng).expect("non-empty");
            for msg in mb.poll(target, now) {
                let n: u64 = msg.payload.parse().map_err(|_| "bad payload")?;
                *delivered.entry(n).or_default() += 1;
                let Sender::Agent(sender) = &msg.sender else {
                    return Err("unexpected sender".into());
                };
                let key = (sender.clone(), msg.target.to_string());
                if let Some(prev) = last_seen.insert(key, n) {
                    ensure!(prev < n, "sender {sender} order broken: {prev} then {n}");
                }
            }
        }
    }
    for target in &targets {
        for msg in mb.poll(target, 999) {
            *delivered
                .entry(msg.payload.parse().map_err(|_| "bad payload")?)
                .or_default() += 1;
        }
        ensure!(mb.poll(target, 1000).is_empty(), "second poll returned messages");
    }
    ensure!(
        sent.len() == delivered.len(),
        "{} sent, {} delivered",
        sent.len(),
        delivered.len()
    );
    ensure!(delivered.values().all(|c| *c == 1), "a message became visible twice");
    ensure!(
        mb.messages()
            .iter()
            .all(|m| matches!(m.state, DeliveryState::Delivered { .. })),
        "undelivered message left behind"
    );
    Ok(sent.len())
}

fn agenda_fuzz(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut kernel = Kernel::new(KernelConfig::default()).map_err(|e| e.to_string())?;
    let home = kernel.create_session("/home", None).map_err(|e| e.to_string())?;
    let mut items = Vec::new();
    for _ in 0..rng.gen_range(5..=20) {
        let delivery = *[Delivery::Home, Delivery::Silent, Delivery::Session(home)]
            .choose(rng)
            .expect("non-empty");
        let (trigger, recurring) = match rng.gen_range(0..3) {
            0 => (
                Trigger::WallClock {
                    fire_at: rng.gen_range(0..200),
                },
                None,
            ),
            1 => (
                Trigger::WallClock {
                    fire_at: rng.gen_range(0..200),
                },
                Some(rng.gen_range(4..40)),
            ),
            _ => (
                Trigger::Event {
                    event_key: format!("ev{}", rng.gen_range(0..3)),
                },
                None,
            ),
        };
        let draft = AgendaDraft {
            trigger: trigger.clone(),
            action_spec: "tidy up".into(),
            delivery,
            recurring,
        };
        let Reply::AgendaItem(id) = kernel
            .execute(Command::AgendaSchedule { draft })
            .map_err(|e| e.to_string())?
        else {
            return Err("schedule did not return an item id".into());
        };
        items.push((id, trigger, recurring, delivery));
    }
    let mut now = 0;
    let mut first_raise: HashMap<String, u64> = HashMap::new();
    let mut ticks = Vec::new();
    while now < 250 {
        now += rng.gen_range(0..=3);
        kernel.tick(now).map_err(|e| e.to_string())?;
        ticks.push(now);
        if rng.gen_bool(0.1) {
            let key = format!("ev{}", rng.gen_range(0..3));
            first_raise.entry(key.clone()).or_insert(now);
            kernel.raise_event(&key).map_err(|e| e.to_string())?;
        }
    }
    let messages = kernel.sessions().mailbox().messages().to_vec();
    let mut firings = 0;
    for (id, trigger, recurring, delivery) in items {
        let item = kernel.agenda().get(id).map_err(|e| e.to_string())?;
        let fired_at: Vec<u64> = item
            .sessions
            .iter()
            .map(|s| kernel.sessions().get(*s).map(|r| r.created_at))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let expected: Vec<u64> = match (&trigger, recurring) {
            (Trigger::WallClock { fire_at }, None) => {
                ticks.iter().copied().find(|t| t >= fire_at).into_iter().collect()
            }
            (Trigger::WallClock { fire_at }, Some(every)) => {
                let mut due = *fire_at;
                let mut out = Vec::new();
                for t in &ticks {
                    if *t >= due {
                        out.push(*t);
                        due += every;
                    }
                }
                out
            }
            (Trigger::Event { event_key }, _) => first_raise.get(event_key).copied().into_iter().collect(),
        };
        ensure!(
            fired_at == expected,
            "item {id}: fired at {fired_at:?}, expected {expected:?}"
        );
        if recurring.is_none() && !expected.is_empty() {
            ensure!(
                item.state == AgendaState::Completed,
                "item {id} is {:?} after firing",
                item.state
            );
        }
        for session in &item.sessions {
            let count = messages
                .iter()
                .filter(|m| m.sender == Sender::Session(*session))
                .count();
            let want = usize::from(delivery != Delivery::Silent);
            ensure!(count == want, "item {id} ({delivery}): {count} messages for one firing");
        }
        firings += fired_at.len();
    }
    Ok(firings)
}

fn kernel_mechanics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cycles = 0;
    for _ in 0..500 {
        cycles += dag_fuzz(&mut rng)?;
    }
    let mut messages = 0;
    for _ in 0..100 {
        messages += mailbox_fuzz(&mut rng)?;
    }
    let mut firings = 0;
    for _ in 0..100 {
        firings += agenda_fuzz(&mut rng)?;
    }
    Ok(format!(
        "500 DAGs ({cycles} cycle edges rejected); 100 mailbox runs ({messages} messages, each visible once); 100 agenda runs ({firings} firings)"
    ))
}

/// Applies a seeded mix of inserts, credited recalls and (when `compact` is
/// set) compactions. The RNG is consumed identically either way.
fn random_ops(
    store: &mut ExperienceStore,
    rng: &mut ChaCha8Rng,
    ops: usize,
    session: u64,
    compact: bool,
) -> Result<(), String> {
    let cfg = KernelConfig::default();
    for i in 0..ops {
        match rng.gen_range(0..10) {
            0..=4 => {
                let draft =
                    ExperienceDraft::new(phrase(rng, 3), phrase(rng, 3), format!("digest {i}")).with_q(random_q(rng));
                store.insert(draft, &cfg).map_err(|e| e.to_string())?;
            }
            5..=7 if !store.is_empty() => {
                let t = turn(session, i as u64);
                let mut r = retrieval::turn_rng(cfg.rng_seed, t);
                let (_, link) =
                    retrieval::recall(store, &phrase(rng, 3), t, &cfg, &mut r).map_err(|e| e.to_string())?;
                if let Some(link) = link {
                    let reward = RewardVector::new(random_r(rng), rng.gen_range(0.0..=1.0), "acceptance")
                        .map_err(|e| e.to_string())?;
                    store
                        .apply_credit(&link, &reward, cfg.alpha)
                        .map_err(|e| e.to_string())?;
                }
            }
            8 if compact => {
                store.compact().map_err(|e| e.to_string())?;
            }
            _ => {}
        }
    }
    Ok(())
}

fn persistence_and_bundles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let provider: Arc<dyn SimilarityProvider> = Arc::new(TrigramProvider::default());
    for round in 0..20 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut live = ExperienceStore::open(dir.path(), Arc::clone(&provider)).map_err(|e| e.to_string())?;
        let journal = MemoryJournal::new();
        let mut mirror = ExperienceStore::with_journal(Arc::clone(&provider), Box::new(journal.clone()));
        let mut seed_rng = rng.clone();
        random_ops(&mut live, &mut rng, 60, 1, true)?;
        random_ops(&mut mirror, &mut seed_rng, 60, 1, false)?;
        ensure!(
            mirror.state() == live.state(),
            "round {round}: compaction changed the live state"
        );
        drop(live);
        // Crash mid-append: a partial line at the end of the log.
        let log = dir.path().join("experience.log");
        let mut file = std::fs::OpenOptions::new()
            .append(true)
            .open(&log)
            .map_err(|e| e.to_string())?;
        std::io::Write::write_all(&mut file, b"{\"op\":\"insert\",\"rec").map_err(|e| e.to_string())?;
        drop(file);
        let mut live = ExperienceStore::open(dir.path(), Arc::clone(&provider)).map_err(|e| e.to_string())?;
        ensure!(
            live.state() == mirror.state(),
            "round {round}: reload after torn tail differs"
        );
        let mut rng_b = rng.clone();
        random_ops(&mut live, &mut rng, 30, 2, true)?;
        random_ops(&mut mirror, &mut rng_b, 30, 2, false)?;
        let reopened = ExperienceStore::open(dir.path(), Arc::clone(&provider)).map_err(|e| e.to_string())?;
        ensure!(
            reopened.state() == live.state(),
            "round {round}: reload differs from live state"
        );
        ensure!(
            reopened.state() == mirror.state(),
            "round {round}: reload differs from in-memory mirror"
        );
        let folded =
            ExperienceStore::replay(Arc::clone(&provider), None, &journal.entries()).map_err(|e| e.to_string())?;
        ensure!(
            folded.state() == live.state(),
            "round {round}: log fold differs from live state"
        );
    }

    let mut donor = ExperienceStore::default();
    random_ops(&mut donor, &mut rng, 400, 1, false)?;
    let bytes = bundle::export(&donor, None, "donor").map_err(|e| e.to_string())?;
    let mut recipient = ExperienceStore::default();
    let report = bundle::import(
        &mut recipient,
        &bytes,
        &KernelConfig::default(),
        ImportOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let cfg = KernelConfig::default();
    let mut recalls = 0;
    for i in 0..50u64 {
        let query = phrase(&mut rng, 3);
        let t = turn(99, i);
        let a = retrieval::recall(&mut donor, &query, t, &cfg, &mut retrieval::turn_rng(5, t))
            .map_err(|e| e.to_string())?;
        let b = retrieval::recall(&mut recipient, &query, t, &cfg, &mut retrieval::turn_rng(5, t))
            .map_err(|e| e.to_string())?;
        let (ja, jb) = (
            serde_json::to_string(&a.0).map_err(|e| e.to_string())?,
            serde_json::to_string(&b.0).map_err(|e| e.to_string())?,
        );
        ensure!(ja == jb, "recall {i} differs:\n{ja}\n{jb}");
        recalls += 1;
    }

    let body_start = bytes.iter().position(|b| *b == b'\n').ok_or("no header")? + 1;
    let checksum_at = String::from_utf8_lossy(&bytes[..body_start])
        .find("\"checksum\":\"")
        .ok_or("no checksum")?
        + 12;
    let mut rejected = 0;
    for _ in 0..200 {
        let mut bad = bytes.clone();
        let pos = if rng.gen_bool(0.9) {
            rng.gen_range(body_start..bad.len())
        } else {
            rng.gen_range(checksum_at..checksum_at + 64)
        };
        bad[pos] ^= 1 << rng.gen_range(0..7);
        let before = recipient.state();
        let result = bundle::import(&mut recipient, &bad, &cfg, ImportOptions::default());
        ensure!(result.is_err(), "corruption at byte {pos} accepted");
        ensure!(recipient.state() == before, "failed import changed the store");
        rejected += 1;
    }
    Ok(format!(
        "20 crash/torn-tail reload rounds equal; log fold equal; bundle of {} records round-trips ({recalls} identical recalls); {rejected}/200 corruptions rejected atomically",
        report.added
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1", "Q-update algebra", Duration::from_secs(5), q_update_algebra),
        (
            "2",
            "retrieval correctness",
            Duration::from_secs(10),
            retrieval_correctness,
        ),
        ("3", "epsilon statistics", Duration::from_secs(5), epsilon_statistics),
        ("4", "learning growth", Duration::from_secs(60), learning_growth),
        ("5", "transfer head-start", Duration::from_secs(60), transfer_head_start),
        ("6", "metric arithmetic", Duration::from_secs(1), metric_arithmetic),
        ("7", "kernel mechanics", Duration::from_secs(30), kernel_mechanics),
        (
            "8",
            "persistence and bundles",
            Duration::from_secs(10),
            persistence_and_bundles,
        ),
    ];
    let mut failed = 0;
    for (num, name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!("{detail}; took {took:.2?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {num} ({name}) [{took:.2?}]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {num} ({name}) [{took:.2?}]: {why}");
            }
        }
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
