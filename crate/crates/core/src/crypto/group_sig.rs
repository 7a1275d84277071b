//! Group signatures without an opening authority.
//!
//! The baseline scheme hands every member the group secret, so a signature
//! is an ordinary Schnorr signature under `gpk`. Signer anonymity inside
//! the group is perfect; traceability and exculpability do not exist.
//! Callers go through [`GroupSignatureScheme`] so a BBS- or EPID-style
//! scheme can be dropped in later.

use std::collections::BTreeSet;
use std::fmt;

use rand::RngCore;

use super::hash::Digest;
use super::schnorr::{schnorr_sign, schnorr_verify, SchnorrSignature, SigKeyPair};
use super::CryptoError;
use crate::math::{FieldElement, GroupElement, GroupParams};
use crate::wire::canonical::{Canonical, CanonicalError, CanonicalValue, FromCanonical};

/// Identifier a group manager authorizes before a join (pseudonym or device serial).
pub type MemberId = Digest;

pub trait GroupSignatureScheme {
    type MemberKey;
    type Signature;

    fn sign<R: RngCore + ?Sized>(&self, key: &Self::MemberKey, msg: &[u8], rng: &mut R) -> Self::Signature;

    /// Verification sees only the group public key, the message and the signature.
    fn verify(&self, gpk: &GroupElement, msg: &[u8], sig: &Self::Signature) -> bool;
}

/// Shared-key Schnorr: every member key equals the master secret.
#[derive(Debug, Clone)]
pub struct SharedKeySchnorr<'a> {
    params: &'a GroupParams,
}

impl<'a> SharedKeySchnorr<'a> {
    pub fn new(params: &'a GroupParams) -> Self {
        SharedKeySchnorr { params }
    }
}

impl GroupSignatureScheme for SharedKeySchnorr<'_> {
    type MemberKey = MemberKey;
    type Signature = GroupSignature;

    fn sign<R: RngCore + ?Sized>(&self, key: &MemberKey, msg: &[u8], rng: &mut R) -> GroupSignature {
        GroupSignature(schnorr_sign(self.params, &key.signing, msg, rng))
    }

    fn verify(&self, gpk: &GroupElement, msg: &[u8], sig: &GroupSignature) -> bool {
        schnorr_verify(self.params, gpk, msg, &sig.0)
    }
}

/// Signature on behalf of a group. Carries no member identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroupSignature(pub SchnorrSignature);

impl GroupSignature {
    pub fn commitment_nonce(&self) -> &GroupElement {
        &self.0.commitment_nonce
    }

    pub fn challenge(&self) -> &FieldElement {
        &self.0.challenge
    }

    pub fn response(&self) -> &FieldElement {
        &self.0.response
    }
}

impl Canonical for GroupSignature {
    fn to_canonical(&self) -> CanonicalValue {
        self.0.to_canonical()
    }
}

impl FromCanonical for GroupSignature {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        SchnorrSignature::from_canonical(value, params).map(GroupSignature)
    }
}

/// A member's signing key for one group.
#[derive(Clone, PartialEq, Eq)]
pub struct MemberKey {
    pub group_id: String,
    signing: SigKeyPair,
}

impl MemberKey {
    pub fn gpk(&self) -> &GroupElement {
        self.signing.public()
    }

    pub fn secret(&self) -> &FieldElement {
        self.signing.secret()
    }

    pub fn from_secret(params: &GroupParams, group_id: impl Into<String>, secret: FieldElement) -> Self {
        MemberKey { group_id: group_id.into(), signing: SigKeyPair::from_secret(params, secret) }
    }
}

impl fmt::Debug for MemberKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemberKey")
            .field("group_id", &self.group_id)
            .field("gpk", self.gpk())
            .finish_non_exhaustive()
    }
}

#[derive(Clone)]
pub struct GroupKeys {
    pub gpk: GroupElement,
    msk: FieldElement,
}

impl GroupKeys {
    pub fn msk(&self) -> &FieldElement {
        &self.msk
    }
}

/// The group manager: holds `msk` and the join registry.
pub struct GroupManager {
    params: GroupParams,
    group_id: String,
    keys: GroupKeys,
    authorized: BTreeSet<MemberId>,
    joined: BTreeSet<MemberId>,
}

impl fmt::Debug for GroupManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupManager")
            .field("group_id", &self.group_id)
            .field("gpk", &self.keys.gpk)
            .field("members", &self.joined.len())
            .finish_non_exhaustive()
    }
}

pub fn gs_setup<R: RngCore + ?Sized>(params: &GroupParams, group_id: &str, rng: &mut R) -> GroupManager {
    GroupManager::from_secret(params, group_id, params.scalars().random(rng))
}

impl GroupManager {
    pub fn from_secret(params: &GroupParams, group_id: &str, msk: FieldElement) -> Self {
        GroupManager {
            params: params.clone(),
            group_id: group_id.to_owned(),
            keys: GroupKeys { gpk: params.exp_g(&msk), msk },
            authorized: BTreeSet::new(),
            joined: BTreeSet::new(),
        }
    }

    pub fn group_id(&self) -> &str {
        &self.group_id
    }

    pub fn gpk(&self) -> &GroupElement {
        &self.keys.gpk
    }

    pub fn keys(&self) -> &GroupKeys {
        &self.keys
    }

    /// Marks `member` as eligible, e.g. after its credential verified.
    pub fn authorize(&mut self, member: MemberId) {
        self.authorized.insert(member);
    }

    pub fn is_member(&self, member: &MemberId) -> bool {
        self.joined.contains(member)
    }

    /// Issues the member key. The caller delivers it over an authenticated,
    /// confidential channel.
    pub fn join(&mut self, member: MemberId) -> Result<MemberKey, CryptoError> {
        if !self.authorized.contains(&member) {
            return Err(CryptoError::NotAuthorized);
        }
        self.joined.insert(member);
        Ok(MemberKey::from_secret(&self.params, self.group_id.clone(), self.keys.msk.clone()))
    }
}

pub fn gs_sign<R: RngCore + ?Sized>(
    params: &GroupParams,
    key: &MemberKey,
    msg: &[u8],
    rng: &mut R,
) -> GroupSignature {
    SharedKeySchnorr::new(params).sign(key, msg, rng)
}

pub fn gs_verify(params: &GroupParams, gpk: &GroupElement, msg: &[u8], sig: &GroupSignature) -> bool {
    SharedKeySchnorr::new(params).verify(gpk, msg, sig)
}
