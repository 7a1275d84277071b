//! Hashed ElGamal KEM with a hash-counter keystream and hash MAC.
//!
//! Desk-scale construction: bit-exact and dependency-free, not a
//! replacement for an audited AEAD.

use std::fmt;

use rand::RngCore;

use super::hash::{ct_eq, hash256, hash256_parts, Digest};
use super::CryptoError;
use crate::math::{FieldElement, GroupElement, GroupParams};
use crate::wire::canonical::{
    Canonical, CanonicalError, CanonicalValue, FromCanonical, Record, RecordReader,
};

const KEM_LABEL: &[u8] = b"kem-v1";

/// Encryption key pair (`ek = g^dk`).
#[derive(Clone, PartialEq, Eq)]
pub struct EncKeyPair {
    dk: FieldElement,
    ek: GroupElement,
}

impl EncKeyPair {
    pub fn generate<R: RngCore + ?Sized>(params: &GroupParams, rng: &mut R) -> Self {
        Self::from_secret(params, params.scalars().random(rng))
    }

    pub fn from_secret(params: &GroupParams, dk: FieldElement) -> Self {
        let ek = params.exp_g(&dk);
        EncKeyPair { dk, ek }
    }

    pub fn public(&self) -> &GroupElement {
        &self.ek
    }

    pub fn secret(&self) -> &FieldElement {
        &self.dk
    }
}

impl fmt::Debug for EncKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncKeyPair").field("ek", &self.ek).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HybridCiphertext {
    pub ephemeral: GroupElement,
    pub body: Vec<u8>,
    pub tag: Digest,
}

struct DemKeys {
    enc: [u8; 16],
    mac: [u8; 16],
}

fn derive_keys(params: &GroupParams, shared: &GroupElement) -> DemKeys {
    let okm = hash256_parts(&[&params.element_bytes(shared), KEM_LABEL]);
    let mut enc = [0u8; 16];
    let mut mac = [0u8; 16];
    enc.copy_from_slice(&okm[..16]);
    mac.copy_from_slice(&okm[16..]);
    DemKeys { enc, mac }
}

fn apply_keystream(key: &[u8; 16], data: &mut [u8]) {
    for (counter, chunk) in data.chunks_mut(32).enumerate() {
        let block = hash256_parts(&[key, &(counter as u64).to_be_bytes()]);
        for (byte, k) in chunk.iter_mut().zip(block) {
            *byte ^= k;
        }
    }
}

fn mac(params: &GroupParams, key: &[u8; 16], ephemeral: &GroupElement, body: &[u8]) -> Digest {
    hash256_parts(&[key, &params.element_bytes(ephemeral), body])
}

pub fn pke_encrypt<R: RngCore + ?Sized>(
    params: &GroupParams,
    ek: &GroupElement,
    plaintext: &[u8],
    rng: &mut R,
) -> HybridCiphertext {
    let t = params.scalars().random(rng);
    let ephemeral = params.exp_g(&t);
    let keys = derive_keys(params, &params.exp(ek, &t));
    let mut body = plaintext.to_vec();
    apply_keystream(&keys.enc, &mut body);
    let tag = mac(params, &keys.mac, &ephemeral, &body);
    HybridCiphertext { ephemeral, body, tag }
}

/// Checks the tag before producing any plaintext.
pub fn pke_decrypt(
    params: &GroupParams,
    key: &EncKeyPair,
    ct: &HybridCiphertext,
) -> Result<Vec<u8>, CryptoError> {
    let keys = derive_keys(params, &params.exp(&ct.ephemeral, &key.dk));
    if !ct_eq(&mac(params, &keys.mac, &ct.ephemeral, &ct.body), &ct.tag) {
        return Err(CryptoError::AuthFailure);
    }
    let mut out = ct.body.clone();
    apply_keystream(&keys.enc, &mut out);
    Ok(out)
}

impl HybridCiphertext {
    /// Digest of the encoded ciphertext; handy for transcripts.
    pub fn fingerprint(&self) -> Digest {
        hash256(&self.canonical_bytes())
    }
}

impl Canonical for HybridCiphertext {
    fn to_canonical(&self) -> CanonicalValue {
        Record::new()
            .with("body", CanonicalValue::bytes(self.body.clone()))
            .with("ephemeral", &self.ephemeral)
            .with("tag", CanonicalValue::bytes(self.tag.to_vec()))
            .build()
    }
}

impl FromCanonical for HybridCiphertext {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(value)?;
        let ct = HybridCiphertext {
            body: r.field("body")?.as_bytes()?.to_vec(),
            ephemeral: r.field("ephemeral")?.as_group(params)?,
            tag: r.field("tag")?.as_array()?,
        };
        r.finish()?;
        Ok(ct)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn round_trip_random_plaintexts() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let key = EncKeyPair::generate(&params, &mut rng);
        for i in 0..1000 {
            // mostly short messages, with a few at the 64 KiB ceiling
            let len = if i % 100 == 0 { 64 * 1024 } else { rng.gen_range(0..2048) };
            let mut pt = vec![0u8; len];
            rng.fill_bytes(&mut pt);
            let ct = pke_encrypt(&params, key.public(), &pt, &mut rng);
            assert_eq!(pke_decrypt(&params, &key, &ct).unwrap(), pt);
        }
    }

    #[test]
    fn standard_group_round_trip() {
        let params = GroupParams::standard();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let key = EncKeyPair::generate(&params, &mut rng);
        let ct = pke_encrypt(&params, key.public(), b"share vector", &mut rng);
        assert_eq!(pke_decrypt(&params, &key, &ct).unwrap(), b"share vector");
    }

    #[test]
    fn any_modification_is_rejected() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let key = EncKeyPair::generate(&params, &mut rng);
        let ct = pke_encrypt(&params, key.public(), b"hello shares", &mut rng);

        for i in 0..ct.body.len() * 8 {
            let mut bad = ct.clone();
            bad.body[i / 8] ^= 1 << (i % 8);
            assert_eq!(pke_decrypt(&params, &key, &bad), Err(CryptoError::AuthFailure));
        }
        for i in 0..256 {
            let mut bad = ct.clone();
            bad.tag[i / 8] ^= 1 << (i % 8);
            assert_eq!(pke_decrypt(&params, &key, &bad), Err(CryptoError::AuthFailure));
        }
        let mut bad = ct.clone();
        bad.ephemeral = params.mul(&ct.ephemeral, params.g());
        assert_eq!(pke_decrypt(&params, &key, &bad), Err(CryptoError::AuthFailure));
        let mut truncated = ct.clone();
        truncated.body.pop();
        assert_eq!(pke_decrypt(&params, &key, &truncated), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn wrong_key_is_rejected() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let key = EncKeyPair::generate(&params, &mut rng);
        let mut other = EncKeyPair::generate(&params, &mut rng);
        while other.public() == key.public() {
            other = EncKeyPair::generate(&params, &mut rng);
        }
        let ct = pke_encrypt(&params, key.public(), b"x", &mut rng);
        assert_eq!(pke_decrypt(&params, &other, &ct), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn keystream_counter_blocks() {
        let key = [1u8; 16];
        let mut data = vec![0u8; 70];
        apply_keystream(&key, &mut data);
        let block0 = hash256_parts(&[&key, &0u64.to_be_bytes()]);
        let block2 = hash256_parts(&[&key, &2u64.to_be_bytes()]);
        assert_eq!(&data[..32], &block0);
        assert_eq!(&data[64..], &block2[..6]);
    }
}
