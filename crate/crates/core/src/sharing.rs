//! Additive 3-of-3 secret sharing over `Z_q`, Pedersen commitments and a
//! trusted Beaver-triple dealer.
//!
//! Devices sign per-element Pedersen commitments `C = g^m h^r`. Sharing
//! both `m` and `r` additively lets each node publish `C_i = g^{m_i} h^{r_i}`;
//! the product of the three partial commitments must equal the signed `C`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::hash::{hash256_parts, Digest};
use crate::math::{FieldElement, GroupElement, GroupParams, ScalarField};
use crate::wire::canonical::{
    field_list, group_list, parse_field_list, parse_group_list, Canonical, CanonicalError,
    CanonicalValue, FromCanonical, Record, RecordReader,
};

/// Number of computation nodes in the reference configuration.
pub const NODE_COUNT: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SharingError {
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
    #[error("invalid or duplicate node index")]
    Index,
}

/// One node's additive share of a vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareVector {
    pub node_index: u8,
    pub elements: Vec<FieldElement>,
    /// Identifies the sharing this share came from; equal across its three shares.
    pub randomness_tag: [u8; 16],
}

/// Pedersen commitments to each element of a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitmentVector(pub Vec<GroupElement>);

/// Splits `secret` into three additive shares with uniformly drawn `s1`, `s2`.
pub fn share<R: RngCore + ?Sized>(
    field: &ScalarField,
    secret: &[FieldElement],
    rng: &mut R,
) -> Result<[ShareVector; 3], SharingError> {
    if secret.is_empty() {
        return Err(SharingError::EmptyInput);
    }
    let s1: Vec<_> = secret.iter().map(|_| field.random(rng)).collect();
    let s2: Vec<_> = secret.iter().map(|_| field.random(rng)).collect();
    let mut tag = [0u8; 16];
    rng.fill_bytes(&mut tag);
    share_with_masks(field, secret, s1, s2, tag)
}

/// Deterministic core of [`share`]: `s3 = secret - s1 - s2`.
pub fn share_with_masks(
    field: &ScalarField,
    secret: &[FieldElement],
    s1: Vec<FieldElement>,
    s2: Vec<FieldElement>,
    tag: [u8; 16],
) -> Result<[ShareVector; 3], SharingError> {
    if secret.is_empty() {
        return Err(SharingError::EmptyInput);
    }
    if s1.len() != secret.len() || s2.len() != secret.len() {
        return Err(SharingError::Shape("mask length differs from secret"));
    }
    let s3 = secret
        .iter()
        .zip(s1.iter().zip(&s2))
        .map(|(v, (a, b))| field.sub(&field.sub(v, a), b))
        .collect();
    let mk = |node_index, elements| ShareVector { node_index, elements, randomness_tag: tag };
    Ok([mk(1, s1), mk(2, s2), mk(3, s3)])
}

fn check_node_set(indices: impl Iterator<Item = u8>) -> Result<(), SharingError> {
    let mut seen = [false; NODE_COUNT];
    for i in indices {
        let slot = match i {
            1..=3 => &mut seen[usize::from(i) - 1],
            _ => return Err(SharingError::Index),
        };
        if std::mem::replace(slot, true) {
            return Err(SharingError::Index);
        }
    }
    Ok(())
}

/// Element-wise sum of exactly three shares with distinct node indices.
pub fn reconstruct(field: &ScalarField, shares: &[ShareVector]) -> Result<Vec<FieldElement>, SharingError> {
    if shares.len() != NODE_COUNT {
        return Err(SharingError::Shape("need exactly three shares"));
    }
    let len = shares[0].elements.len();
    if shares.iter().any(|s| s.elements.len() != len) {
        return Err(SharingError::Shape("share lengths differ"));
    }
    check_node_set(shares.iter().map(|s| s.node_index))?;
    Ok((0..len)
        .map(|j| field.sum(shares.iter().map(|s| &s.elements[j])))
        .collect())
}

/// `g^m * h^r mod p`.
pub fn commit(params: &GroupParams, m: &FieldElement, r: &FieldElement) -> GroupElement {
    params.mul(&params.exp_g(m), &params.exp(params.h(), r))
}

pub fn commit_vector(
    params: &GroupParams,
    values: &[FieldElement],
    blinding: &[FieldElement],
) -> Result<CommitmentVector, SharingError> {
    if values.len() != blinding.len() {
        return Err(SharingError::Shape("values and blinding differ in length"));
    }
    Ok(CommitmentVector(
        values.iter().zip(blinding).map(|(m, r)| commit(params, m, r)).collect(),
    ))
}

/// A node's partial commitments `g^{m_i} h^{r_i}` for its data and blinding shares.
pub fn partial_commitments(
    params: &GroupParams,
    data_share: &[FieldElement],
    blinding_share: &[FieldElement],
) -> Result<Vec<GroupElement>, SharingError> {
    if data_share.is_empty() {
        return Err(SharingError::Shape("empty share vector"));
    }
    commit_vector(params, data_share, blinding_share).map(|c| c.0)
}

/// True iff for every element the product of the three nodes' partial
/// commitments equals the claimed commitment.
pub fn check_partial_commitments(
    params: &GroupParams,
    partials: &[&[GroupElement]],
    claimed: &CommitmentVector,
) -> Result<bool, SharingError> {
    let len = claimed.0.len();
    if len == 0 {
        return Err(SharingError::Shape("empty commitment vector"));
    }
    if partials.len() != NODE_COUNT || partials.iter().any(|p| p.len() != len) {
        return Err(SharingError::Shape("partial commitment shape"));
    }
    Ok((0..len).all(|j| params.product(partials.iter().map(|p| &p[j])) == claimed.0[j]))
}

/// Joint authenticity check computed directly from the three nodes' shares.
pub fn partial_commitment_check(
    params: &GroupParams,
    data_shares: &[ShareVector],
    blinding_shares: &[ShareVector],
    claimed: &CommitmentVector,
) -> Result<bool, SharingError> {
    if data_shares.len() != NODE_COUNT || blinding_shares.len() != NODE_COUNT {
        return Err(SharingError::Shape("need three data and three blinding shares"));
    }
    if claimed.0.is_empty() {
        return Err(SharingError::Shape("empty commitment vector"));
    }
    let partials = data_shares
        .iter()
        .zip(blinding_shares)
        .map(|(d, r)| {
            if d.elements.len() != claimed.0.len() || r.elements.len() != claimed.0.len() {
                return Err(SharingError::Shape("share length differs from commitments"));
            }
            partial_commitments(params, &d.elements, &r.elements)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let views: Vec<&[GroupElement]> = partials.iter().map(Vec::as_slice).collect();
    check_partial_commitments(params, &views, claimed)
}

/// Bytes a device signs for one element commitment.
pub fn commitment_message(c: &GroupElement) -> Vec<u8> {
    CanonicalValue::from(c).encode()
}

impl CommitmentVector {
    /// Digest of the canonical encoding; what a listing's policy signature covers.
    pub fn root(&self) -> Digest {
        crate::crypto::hash256(&self.canonical_bytes())
    }
}

impl Canonical for CommitmentVector {
    fn to_canonical(&self) -> CanonicalValue {
        group_list(&self.0)
    }
}

impl FromCanonical for CommitmentVector {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        parse_group_list(value, params).map(CommitmentVector)
    }
}

/// One node's share of a Beaver triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleShare {
    pub a: FieldElement,
    pub b: FieldElement,
    pub c: FieldElement,
}

/// All three nodes' shares of one triple `(a, b, c = ab)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeaverTripleShares {
    pub shares: [TripleShare; 3],
}

impl BeaverTripleShares {
    pub fn for_node(&self, node_index: u8) -> &TripleShare {
        &self.shares[usize::from(node_index) - 1]
    }
}

pub fn deal_triples<R: RngCore + ?Sized>(
    field: &ScalarField,
    count: usize,
    rng: &mut R,
) -> Vec<BeaverTripleShares> {
    (0..count)
        .map(|_| {
            let a = field.random(rng);
            let b = field.random(rng);
            let c = field.mul(&a, &b);
            let split = |v: &FieldElement, rng: &mut R| {
                let x1 = field.random(rng);
                let x2 = field.random(rng);
                let x3 = field.sub(&field.sub(v, &x1), &x2);
                [x1, x2, x3]
            };
            let [a1, a2, a3] = split(&a, rng);
            let [b1, b2, b3] = split(&b, rng);
            let [c1, c2, c3] = split(&c, rng);
            BeaverTripleShares {
                shares: [
                    TripleShare { a: a1, b: b1, c: c1 },
                    TripleShare { a: a2, b: b2, c: c2 },
                    TripleShare { a: a3, b: b3, c: c3 },
                ],
            }
        })
        .collect()
}

/// Seeded, auditable triple dealer. Triples for a session are a pure
/// function of `(seed, session_id, count)`, so each node can be served its
/// shares independently.
#[derive(Debug, Clone)]
pub struct TripleDealer {
    seed: [u8; 32],
}

impl TripleDealer {
    pub fn new(seed: [u8; 32]) -> Self {
        TripleDealer { seed }
    }

    pub fn session_triples(
        &self,
        field: &ScalarField,
        session_id: &Digest,
        count: usize,
    ) -> Vec<BeaverTripleShares> {
        let mut rng = ChaCha20Rng::from_seed(hash256_parts(&[b"dealer", &self.seed, session_id]));
        deal_triples(field, count, &mut rng)
    }

    pub fn node_triples(
        &self,
        field: &ScalarField,
        session_id: &Digest,
        count: usize,
        node_index: u8,
    ) -> Vec<TripleShare> {
        self.session_triples(field, session_id, count)
            .into_iter()
            .map(|t| t.for_node(node_index).clone())
            .collect()
    }
}

impl Canonical for TripleShare {
    fn to_canonical(&self) -> CanonicalValue {
        Record::new().with("a", &self.a).with("b", &self.b).with("c", &self.c).build()
    }
}

impl FromCanonical for TripleShare {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let f = params.scalars();
        let mut r = RecordReader::new(value)?;
        let t = TripleShare {
            a: r.field("a")?.as_field(f)?,
            b: r.field("b")?.as_field(f)?,
            c: r.field("c")?.as_field(f)?,
        };
        r.finish()?;
        Ok(t)
    }
}

/// The plaintext each node receives for one record: its data share and
/// its share of the commitment blinding values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharePayload {
    pub data: Vec<FieldElement>,
    pub blinding: Vec<FieldElement>,
}

impl Canonical for SharePayload {
    fn to_canonical(&self) -> CanonicalValue {
        Record::new()
            .with("data", field_list(&self.data))
            .with("r", field_list(&self.blinding))
            .build()
    }
}

impl FromCanonical for SharePayload {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(value)?;
        let p = SharePayload {
            data: parse_field_list(r.field("data")?, params.scalars())?,
            blinding: parse_field_list(r.field("r")?, params.scalars())?,
        };
        r.finish()?;
        if p.data.len() != p.blinding.len() {
            return Err(CanonicalError::schema("data and r lengths differ"));
        }
        Ok(p)
    }
}
