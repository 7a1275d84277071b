//! Catalog listings and the per-node share bundles they point at.

use crate::crypto::hash::{hash256, hash256_parts, Digest};
use crate::crypto::{GroupSignature, HybridCiphertext};
use crate::math::GroupParams;
use crate::policy::{policy_digest, Policy, Timestamp};
use crate::sharing::{CommitmentVector, NODE_COUNT};
use crate::wire::canonical::{
    Canonical, CanonicalError, CanonicalValue, FromCanonical, Record, RecordReader,
};

/// Message signed with the user policy group key: policy digest then
/// commitment root.
pub fn policy_message(policy: &Policy, commitment_root: &Digest) -> Vec<u8> {
    let mut m = policy_digest(policy).to_vec();
    m.extend_from_slice(commitment_root);
    m
}

/// A data offering. Carries no owner identity of any kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Listing {
    pub listing_id: Digest,
    pub storage_refs: [Digest; NODE_COUNT],
    pub commitment_root: Digest,
    pub policy: Policy,
    pub policy_signature: GroupSignature,
    pub device_group_id: String,
    pub created_at: Timestamp,
}

fn digest_list(items: &[Digest]) -> CanonicalValue {
    CanonicalValue::List(items.iter().map(|d| CanonicalValue::bytes(d.to_vec())).collect())
}

impl Listing {
    pub fn new(
        storage_refs: [Digest; NODE_COUNT],
        commitment_root: Digest,
        policy: Policy,
        policy_signature: GroupSignature,
        device_group_id: impl Into<String>,
        created_at: Timestamp,
    ) -> Self {
        let mut l = Listing {
            listing_id: [0; 32],
            storage_refs,
            commitment_root,
            policy,
            policy_signature,
            device_group_id: device_group_id.into(),
            created_at,
        };
        l.listing_id = l.compute_id();
        l
    }

    fn body(&self) -> Record {
        Record::new()
            .with("commitment_root", CanonicalValue::bytes(self.commitment_root.to_vec()))
            .with("created_at", self.created_at)
            .with("device_group_id", self.device_group_id.as_str())
            .with("policy", self.policy.to_canonical())
            .with("policy_signature", self.policy_signature.to_canonical())
            .with("storage_refs", digest_list(&self.storage_refs))
    }

    /// Digest of every field except the id itself.
    pub fn compute_id(&self) -> Digest {
        hash256_parts(&[b"listing", &self.body().build().encode()])
    }

    pub fn policy_message(&self) -> Vec<u8> {
        policy_message(&self.policy, &self.commitment_root)
    }
}

impl Canonical for Listing {
    fn to_canonical(&self) -> CanonicalValue {
        self.body().with("listing_id", CanonicalValue::bytes(self.listing_id.to_vec())).build()
    }
}

impl FromCanonical for Listing {
    /// Strict: any field outside the schema is an `UnexpectedField` error,
    /// and the id must match the content.
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(value)?;
        let refs = r.field("storage_refs")?.as_list()?;
        let [a, b, c] = refs else {
            return Err(CanonicalError::schema("storage_refs must hold three ids"));
        };
        let l = Listing {
            listing_id: r.field("listing_id")?.as_array()?,
            storage_refs: [a.as_array()?, b.as_array()?, c.as_array()?],
            commitment_root: r.field("commitment_root")?.as_array()?,
            policy: Policy::from_value(r.field("policy")?)?,
            policy_signature: GroupSignature::from_canonical(r.field("policy_signature")?, params)?,
            device_group_id: r.field("device_group_id")?.as_text()?.to_owned(),
            created_at: r.field("created_at")?.as_u64()?,
        };
        r.finish()?;
        if l.compute_id() != l.listing_id {
            return Err(CanonicalError::schema("listing id does not match content"));
        }
        Ok(l)
    }
}

/// What one node fetches from storage for one listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareBundle {
    pub node_index: u8,
    /// Encrypts a `SharePayload` to the node's key.
    pub ciphertext: HybridCiphertext,
    pub commitment_vector: CommitmentVector,
    /// One device group signature per commitment.
    pub device_signatures: Vec<GroupSignature>,
}

impl ShareBundle {
    pub fn content_id(&self) -> Digest {
        hash256(&self.canonical_bytes())
    }
}

impl Canonical for ShareBundle {
    fn to_canonical(&self) -> CanonicalValue {
        Record::new()
            .with("ciphertext", self.ciphertext.to_canonical())
            .with("commitments", self.commitment_vector.to_canonical())
            .with(
                "device_signatures",
                CanonicalValue::List(self.device_signatures.iter().map(Canonical::to_canonical).collect()),
            )
            .with("node_index", u64::from(self.node_index))
            .build()
    }
}

impl FromCanonical for ShareBundle {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(value)?;
        let node_index = r.field("node_index")?.as_u64()?;
        if !(1..=NODE_COUNT as u64).contains(&node_index) {
            return Err(CanonicalError::schema("node_index out of range"));
        }
        let b = ShareBundle {
            node_index: node_index as u8,
            ciphertext: HybridCiphertext::from_canonical(r.field("ciphertext")?, params)?,
            commitment_vector: CommitmentVector::from_canonical(r.field("commitments")?, params)?,
            device_signatures: r
                .field("device_signatures")?
                .as_list()?
                .iter()
                .map(|s| GroupSignature::from_canonical(s, params))
                .collect::<Result<_, _>>()?,
        };
        r.finish()?;
        if b.device_signatures.len() != b.commitment_vector.0.len() {
            return Err(CanonicalError::schema("one device signature per commitment required"));
        }
        Ok(b)
    }
}
