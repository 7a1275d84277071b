//! Signed result attestations.
//!
//! Each node signs the public statement of its computation: session,
//! function, input root and commitments to its output shares. This carries
//! no zero-knowledge or succinctness guarantee; it binds a node to what it
//! claims to have computed.

use rand::RngCore;

use super::hash::Digest;
use super::schnorr::{schnorr_sign, schnorr_verify, SchnorrSignature, SigKeyPair};
use super::CryptoError;
use crate::math::{GroupElement, GroupParams};
use crate::wire::canonical::{
    group_list, parse_group_list, Canonical, CanonicalError, CanonicalValue, FromCanonical, Record,
    RecordReader,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attestation {
    pub node_index: u8,
    pub session_id: Digest,
    /// Digest of the canonical function descriptor that was evaluated.
    pub function_id: Digest,
    pub input_root: Digest,
    pub output_commitments: Vec<GroupElement>,
    pub node_signature: SchnorrSignature,
}

fn statement(
    node_index: u8,
    session_id: &Digest,
    function_id: &Digest,
    input_root: &Digest,
    output_commitments: &[GroupElement],
) -> Vec<u8> {
    Record::new()
        .with("function_id", CanonicalValue::bytes(function_id.to_vec()))
        .with("input_root", CanonicalValue::bytes(input_root.to_vec()))
        .with("node_index", u64::from(node_index))
        .with("output_commitments", group_list(output_commitments))
        .with("session_id", CanonicalValue::bytes(session_id.to_vec()))
        .build()
        .encode()
}

#[allow(clippy::too_many_arguments)]
pub fn attest<R: RngCore + ?Sized>(
    params: &GroupParams,
    node_key: &SigKeyPair,
    node_index: u8,
    session_id: Digest,
    function_id: Digest,
    input_root: Digest,
    output_commitments: Vec<GroupElement>,
    rng: &mut R,
) -> Attestation {
    let msg = statement(node_index, &session_id, &function_id, &input_root, &output_commitments);
    Attestation {
        node_index,
        session_id,
        function_id,
        input_root,
        output_commitments,
        node_signature: schnorr_sign(params, node_key, &msg, rng),
    }
}

impl Attestation {
    pub fn verify_signature(&self, params: &GroupParams, node_pk: &GroupElement) -> bool {
        let msg = statement(
            self.node_index,
            &self.session_id,
            &self.function_id,
            &self.input_root,
            &self.output_commitments,
        );
        schnorr_verify(params, node_pk, &msg, &self.node_signature)
    }
}

/// True iff exactly one attestation per node is present, every signature
/// verifies under that node's key, and all three agree with the expected
/// session, function and input root.
pub fn verify_attestations(
    params: &GroupParams,
    expected_session: &Digest,
    expected_function: &Digest,
    expected_input_root: &Digest,
    attestations: &[Attestation],
    node_pks: &[GroupElement; 3],
) -> Result<bool, CryptoError> {
    let mut by_node: [Option<&Attestation>; 3] = [None, None, None];
    for a in attestations {
        let slot = match a.node_index {
            1..=3 => &mut by_node[usize::from(a.node_index) - 1],
            _ => return Err(CryptoError::IncompleteAttestation),
        };
        if slot.replace(a).is_some() {
            return Err(CryptoError::IncompleteAttestation);
        }
    }
    if attestations.len() != 3 || by_node.iter().any(Option::is_none) {
        return Err(CryptoError::IncompleteAttestation);
    }
    Ok(by_node.iter().flatten().zip(node_pks).all(|(a, pk)| {
        &a.session_id == expected_session
            && &a.function_id == expected_function
            && &a.input_root == expected_input_root
            && a.verify_signature(params, pk)
    }))
}

impl Canonical for Attestation {
    fn to_canonical(&self) -> CanonicalValue {
        Record::new()
            .with("function_id", CanonicalValue::bytes(self.function_id.to_vec()))
            .with("input_root", CanonicalValue::bytes(self.input_root.to_vec()))
            .with("node_index", u64::from(self.node_index))
            .with("node_signature", self.node_signature.to_canonical())
            .with("output_commitments", group_list(&self.output_commitments))
            .with("session_id", CanonicalValue::bytes(self.session_id.to_vec()))
            .build()
    }
}

impl FromCanonical for Attestation {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(value)?;
        let node_index = u8::try_from(r.field("node_index")?.as_u64()?)
            .map_err(|_| CanonicalError::schema("node_index out of range"))?;
        let a = Attestation {
            function_id: r.field("function_id")?.as_array()?,
            input_root: r.field("input_root")?.as_array()?,
            node_index,
            node_signature: SchnorrSignature::from_canonical(r.field("node_signature")?, params)?,
            output_commitments: parse_group_list(r.field("output_commitments")?, params)?,
            session_id: r.field("session_id")?.as_array()?,
        };
        r.finish()?;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        params: GroupParams,
        keys: Vec<SigKeyPair>,
        pks: [GroupElement; 3],
        atts: Vec<Attestation>,
    }

    fn fixture() -> Fixture {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let keys: Vec<_> = (0..3).map(|_| SigKeyPair::generate(&params, &mut rng)).collect();
        let pks = [keys[0].public().clone(), keys[1].public().clone(), keys[2].public().clone()];
        let atts = (0..3)
            .map(|i| {
                let out = vec![params.exp_g(&params.scalars().from_u64(i as u64 + 5))];
                attest(&params, &keys[i], i as u8 + 1, [1; 32], [2; 32], [3; 32], out, &mut rng)
            })
            .collect();
        Fixture { params, keys, pks, atts }
    }

    fn check(f: &Fixture, atts: &[Attestation]) -> Result<bool, CryptoError> {
        verify_attestations(&f.params, &[1; 32], &[2; 32], &[3; 32], atts, &f.pks)
    }

    #[test]
    fn honest_attestations_verify() {
        let f = fixture();
        assert_eq!(check(&f, &f.atts), Ok(true));
        let mut shuffled = f.atts.clone();
        shuffled.reverse();
        assert_eq!(check(&f, &shuffled), Ok(true));
    }

    #[test]
    fn every_single_field_disagreement_fails() {
        let f = fixture();
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for node in 0..3 {
            // re-signed with a different field value: signature valid, agreement broken
            let base = &f.atts[node];
            let resign = |session, function, root| {
                attest(
                    &f.params,
                    &f.keys[node],
                    base.node_index,
                    session,
                    function,
                    root,
                    base.output_commitments.clone(),
                    &mut ChaCha20Rng::seed_from_u64(1),
                )
            };
            for variant in [
                resign([9; 32], [2; 32], [3; 32]),
                resign([1; 32], [9; 32], [3; 32]),
                resign([1; 32], [2; 32], [9; 32]),
            ] {
                let mut atts = f.atts.clone();
                atts[node] = variant;
                assert_eq!(check(&f, &atts), Ok(false));
            }
            // mutated without re-signing
            let mut atts = f.atts.clone();
            atts[node].output_commitments[0] = f.params.g().clone();
            assert_eq!(check(&f, &atts), Ok(false));
            let mut atts = f.atts.clone();
            atts[node].function_id[0] ^= 1;
            assert_eq!(check(&f, &atts), Ok(false));
            // signed by the wrong node key
            let mut atts = f.atts.clone();
            atts[node] = attest(
                &f.params,
                &f.keys[(node + 1) % 3],
                base.node_index,
                [1; 32],
                [2; 32],
                [3; 32],
                base.output_commitments.clone(),
                &mut rng,
            );
            assert_eq!(check(&f, &atts), Ok(false));
        }
    }

    #[test]
    fn missing_or_duplicate_nodes_are_incomplete() {
        let f = fixture();
        assert_eq!(check(&f, &f.atts[..2]), Err(CryptoError::IncompleteAttestation));
        let dup = vec![f.atts[0].clone(), f.atts[0].clone(), f.atts[2].clone()];
        assert_eq!(check(&f, &dup), Err(CryptoError::IncompleteAttestation));
        let mut bad_index = f.atts.clone();
        bad_index[2].node_index = 4;
        assert_eq!(check(&f, &bad_index), Err(CryptoError::IncompleteAttestation));
    }

    #[test]
    fn encoding_round_trip() {
        let f = fixture();
        let a = &f.atts[1];
        assert_eq!(&Attestation::from_canonical_bytes(&a.canonical_bytes(), &f.params).unwrap(), a);
    }
}
