use sha2::{Digest as _, Sha256};

/// A SHA-256 digest.
pub type Digest = [u8; 32];

pub fn hash256(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

/// Hashes the concatenation of `parts` without allocating it.
pub fn hash256_parts(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    hasher.finalize().into()
}

/// Byte-wise comparison that does not exit early.
pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn empty_string_vector() {
        assert_eq!(
            hex::encode(hash256(b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn abc_vector() {
        // FIPS 180-2 appendix B.1
        assert_eq!(
            hex::encode(hash256(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(hash256_parts(&[b"a", b"bc"]), hash256(b"abc"));
    }

    #[test]
    fn single_bit_flips_change_digest() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let len = rng.gen_range(1..256);
            let mut data = vec![0u8; len];
            rng.fill_bytes(&mut data);
            let before = hash256(&data);
            assert_eq!(before, hash256(&data));
            let bit = rng.gen_range(0..len * 8);
            data[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(before, hash256(&data));
        }
    }
}
