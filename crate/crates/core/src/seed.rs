//! Labeled sub-seeds derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// First eight bytes of `SHA-256(root_le || label)`.
pub fn sub_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(root, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_separate_streams() {
        assert_eq!(sub_seed(1, "partition"), sub_seed(1, "partition"));
        assert_ne!(sub_seed(1, "partition"), sub_seed(1, "init"));
        assert_ne!(sub_seed(1, "partition"), sub_seed(2, "partition"));
    }
}
