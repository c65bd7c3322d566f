//! Seeded fixtures shared by the benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synkernel::{ExperienceDraft, ExperienceStore, KernelConfig};

const WORDS: [&str; 24] = [
    "deploy", "index", "cache", "schema", "router", "billing", "token", "queue", "backup", "metrics", "login",
    "search", "upload", "mailer", "shard", "lint", "report", "invoice", "sync", "alert", "replica", "quota", "webhook",
    "cron",
];

pub fn phrase(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words)
        .map(|_| *WORDS.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// An in-memory store holding up to `n` records with random values and visit
/// counts. Near-duplicates collapse, so the result may be slightly smaller.
pub fn seeded_store(n: usize, seed: u64) -> ExperienceStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ExperienceStore::default();
    let config = KernelConfig::default();
    for i in 0..n {
        let q = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        let mut draft = ExperienceDraft::new(
            phrase(&mut rng, 5),
            format!("step {i}: {}", phrase(&mut rng, 3)),
            "bench",
        )
        .with_q(q);
        draft.visit_count = rng.gen_range(0..100);
        store.insert(draft, &config).expect("valid draft");
    }
    store
}
