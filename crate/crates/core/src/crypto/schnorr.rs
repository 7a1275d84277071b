//! Schnorr signatures over the prime-order group.
//!
//! `c = H(pk || R || m) mod q`, `s = k - c*sk mod q`; valid iff
//! `g^s * pk^c == R` and `c` matches the recomputed challenge.

use std::fmt;

use rand::RngCore;

use super::hash::hash256_parts;
use crate::math::{FieldElement, GroupElement, GroupParams};
use crate::wire::canonical::{
    Canonical, CanonicalError, CanonicalValue, FromCanonical, Record, RecordReader,
};

/// Long-term signing key (`pk = g^sk`).
#[derive(Clone, PartialEq, Eq)]
pub struct SigKeyPair {
    sk: FieldElement,
    pk: GroupElement,
}

impl SigKeyPair {
    pub fn generate<R: RngCore + ?Sized>(params: &GroupParams, rng: &mut R) -> Self {
        Self::from_secret(params, params.scalars().random(rng))
    }

    pub fn from_secret(params: &GroupParams, sk: FieldElement) -> Self {
        let pk = params.exp_g(&sk);
        SigKeyPair { sk, pk }
    }

    pub fn public(&self) -> &GroupElement {
        &self.pk
    }

    pub fn secret(&self) -> &FieldElement {
        &self.sk
    }
}

impl fmt::Debug for SigKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigKeyPair").field("pk", &self.pk).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SchnorrSignature {
    pub commitment_nonce: GroupElement,
    pub challenge: FieldElement,
    pub response: FieldElement,
}

fn challenge(params: &GroupParams, pk: &GroupElement, nonce: &GroupElement, msg: &[u8]) -> FieldElement {
    let digest = hash256_parts(&[&params.element_bytes(pk), &params.element_bytes(nonce), msg]);
    params.scalars().from_digest(&digest)
}

pub fn schnorr_sign<R: RngCore + ?Sized>(
    params: &GroupParams,
    key: &SigKeyPair,
    msg: &[u8],
    rng: &mut R,
) -> SchnorrSignature {
    let f = params.scalars();
    let k = f.random(rng);
    let nonce = params.exp_g(&k);
    let c = challenge(params, &key.pk, &nonce, msg);
    let s = f.sub(&k, &f.mul(&c, &key.sk));
    SchnorrSignature { commitment_nonce: nonce, challenge: c, response: s }
}

pub fn schnorr_verify(
    params: &GroupParams,
    pk: &GroupElement,
    msg: &[u8],
    sig: &SchnorrSignature,
) -> bool {
    if sig.challenge != challenge(params, pk, &sig.commitment_nonce, msg) {
        return false;
    }
    let lhs = params.mul(&params.exp_g(&sig.response), &params.exp(pk, &sig.challenge));
    lhs == sig.commitment_nonce
}

impl Canonical for SchnorrSignature {
    fn to_canonical(&self) -> CanonicalValue {
        Record::new()
            .with("challenge", &self.challenge)
            .with("commitment_nonce", &self.commitment_nonce)
            .with("response", &self.response)
            .build()
    }
}

impl FromCanonical for SchnorrSignature {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(value)?;
        let sig = SchnorrSignature {
            challenge: r.field("challenge")?.as_field(params.scalars())?,
            commitment_nonce: r.field("commitment_nonce")?.as_group(params)?,
            response: r.field("response")?.as_field(params.scalars())?,
        };
        r.finish()?;
        Ok(sig)
    }
}
