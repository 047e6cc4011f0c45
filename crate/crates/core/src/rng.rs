//! Seed management: every random decision in a run flows from one master
//! seed through named substreams, so each stage (train, generate, eval)
//! can be replayed in isolation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit FNV-1a over the label bytes. Not for security, only for
/// deriving well-separated substream seeds independent of hasher state.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a deterministic substream rng from a master seed and a label
/// such as `"train"`, `"generate"`, or `"eval:2"`.
pub fn substream(master: u64, label: &str) -> ChaCha8Rng {
    let mixed = master ^ fnv1a(label.as_bytes()).rotate_left(17);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Substream with a numeric suffix, e.g. per-candidate or per-episode.
pub fn substream_indexed(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    substream(master, &format!("{label}:{index}"))
}

/// Draw an index from an explicit categorical distribution.
/// `probs` need not be normalized; all entries must be >= 0.
pub fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    debug_assert!(total > 0.0 && total.is_finite());
    let mut dart = rng.gen::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_deterministic_and_distinct() {
        let mut a = substream(42, "train");
        let mut b = substream(42, "train");
        let mut c = substream(42, "eval");
        let xa: u64 = a.gen();
        assert_eq!(xa, b.gen::<u64>());
        assert_ne!(xa, c.gen::<u64>());
    }

    #[test]
    fn categorical_respects_point_mass() {
        let mut rng = substream(1, "t");
        for _ in 0..100 {
            assert_eq!(sample_categorical(&mut rng, &[0.0, 1.0, 0.0]), 1);
        }
    }

    #[test]
    fn categorical_large_sample_frequencies() {
        let mut rng = substream(7, "freq");
        let probs = [0.2, 0.5, 0.3];
        let mut counts = [0usize; 3];
        let n = 60_000;
        for _ in 0..n {
            counts[sample_categorical(&mut rng, &probs)] += 1;
        }
        for i in 0..3 {
            let freq = counts[i] as f64 / n as f64;
            // 3 sigma binomial bound
            let sigma = (probs[i] * (1.0 - probs[i]) / n as f64).sqrt();
            assert!((freq - probs[i]).abs() < 3.0 * sigma + 1e-3, "freq {freq} vs {}", probs[i]);
        }
    }
}
