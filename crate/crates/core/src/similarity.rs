//! Text similarity used for intent shortlisting, near-duplicate detection and
//! memory matching.
//!
//! The default provider hashes character trigrams into a 256-bucket frequency
//! vector and maps cosine similarity into [0, 1] via `(cos + 1) / 2`. It needs
//! no model and is fully deterministic.

use std::fmt;

/// A unit-normalised embedding with a cached list of its non-zero buckets.
#[derive(Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    nonzero: Vec<u32>,
}

impl Embedding {
    /// Builds an embedding from a raw vector, normalising it to unit length.
    /// An all-zero vector stays all-zero.
    pub fn from_raw(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        let nonzero = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i as u32)
            .collect();
        Embedding { values, nonzero }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.nonzero.is_empty()
    }

    /// Dot product summed in ascending bucket order, so `a.dot(b)` and
    /// `b.dot(a)` are bit-identical.
    pub fn dot(&self, other: &Embedding) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.nonzero
            .iter()
            .map(|&i| self.values[i as usize] * other.values[i as usize])
            .sum()
    }
}

impl fmt::Debug for Embedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Embedding")
            .field("dim", &self.values.len())
            .field("nonzero", &self.nonzero.len())
            .finish()
    }
}

/// Maps texts to embeddings and embeddings to a similarity in [0, 1].
///
/// Implementations must satisfy `similarity(a, a) == 1` and symmetry.
pub trait SimilarityProvider: Send + Sync {
    fn embed(&self, text: &str) -> Embedding;

    fn similarity(&self, a: &Embedding, b: &Embedding) -> f64 {
        cosine_unit(a, b)
    }

    fn text_similarity(&self, a: &str, b: &str) -> f64 {
        self.similarity(&self.embed(a), &self.embed(b))
    }
}

/// Cosine of two unit embeddings mapped to [0, 1].
pub fn cosine_unit(a: &Embedding, b: &Embedding) -> f64 {
    match (a.is_zero(), b.is_zero()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.5,
        _ => {}
    }
    let cos = a.dot(b).clamp(-1.0, 1.0);
    // Rounding can leave a self-similarity a hair under 1.
    if cos > 1.0 - 1e-9 && a == b {
        return 1.0;
    }
    ((cos + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Hashed character-trigram frequency embedding.
#[derive(Debug, Clone)]
pub struct TrigramProvider {
    dim: usize,
}

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

impl Default for TrigramProvider {
    fn default() -> Self {
        TrigramProvider {
            dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

impl TrigramProvider {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        TrigramProvider { dim }
    }
}

fn fnv1a(chars: &[char]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for c in chars {
        let mut buf = [0u8; 4];
        for byte in c.encode_utf8(&mut buf).bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

impl SimilarityProvider for TrigramProvider {
    fn embed(&self, text: &str) -> Embedding {
        let mut chars: Vec<char> = vec![' ', ' '];
        let mut last_space = true;
        for c in text.chars().flat_map(char::to_lowercase) {
            if c.is_whitespace() {
                if !last_space {
                    chars.push(' ');
                }
                last_space = true;
            } else {
                chars.push(c);
                last_space = false;
            }
        }
        if !last_space {
            chars.push(' ');
        }
        let mut counts = vec![0.0; self.dim];
        for window in chars.windows(3) {
            counts[(fnv1a(window) % self.dim as u64) as usize] += 1.0;
        }
        Embedding::from_raw(counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exactly_one() {
        let p = TrigramProvider::default();
        for text in ["", "fix the flaky test", "Ünïcode  text\twith   spaces"] {
            assert_eq!(p.text_similarity(text, text), 1.0, "{text:?}");
        }
    }

    #[test]
    fn symmetric_and_bounded() {
        let p = TrigramProvider::default();
        let texts = ["deploy the service", "roll back deploy", "write a poem", "x"];
        for a in texts {
            for b in texts {
                let ab = p.text_similarity(a, b);
                assert_eq!(ab, p.text_similarity(b, a));
                assert!((0.0..=1.0).contains(&ab));
            }
        }
    }

    #[test]
    fn case_and_whitespace_are_normalised() {
        let p = TrigramProvider::default();
        assert_eq!(p.text_similarity("Fix  The Bug", "fix the bug"), 1.0);
    }

    #[test]
    fn related_texts_score_higher_than_unrelated() {
        let p = TrigramProvider::default();
        let near = p.text_similarity("restart the database server", "restart the database");
        let far = p.text_similarity("restart the database server", "compose a haiku about autumn");
        assert!(near > far, "{near} vs {far}");
    }

    #[test]
    fn zero_embeddings() {
        let zero = Embedding::from_raw(vec![0.0; 4]);
        let one = Embedding::from_raw(vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(cosine_unit(&zero, &zero), 1.0);
        assert_eq!(cosine_unit(&zero, &one), 0.5);
    }
}
