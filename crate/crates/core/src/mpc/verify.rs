//! Input checks a node runs before evaluating: policy signature, policy
//! eligibility, device signatures and the joint commitment check.

use std::collections::BTreeMap;

use crate::crypto::hash::Digest;
use crate::crypto::{gs_verify, GroupSignature};
use crate::market::listing::Listing;
use crate::math::{GroupElement, GroupParams};
use crate::policy::{eligible, FunctionDescriptor, Timestamp};
use crate::sharing::{
    check_partial_commitments, commitment_message, partial_commitments, CommitmentVector, SharePayload,
};

use super::AbortReason;

/// Policy signature under the user group key, then eligibility of `f`.
pub fn verify_policy(
    params: &GroupParams,
    listing: &Listing,
    user_gpk: &GroupElement,
    f: &FunctionDescriptor,
    cohort: usize,
    now: Timestamp,
) -> Result<(), AbortReason> {
    if !gs_verify(params, user_gpk, &listing.policy_message(), &listing.policy_signature) {
        return Err(AbortReason::PolicySignatureInvalid);
    }
    eligible(&listing.policy, f, cohort as u64, now).map_err(AbortReason::Policy)
}

/// The commitments match the listing's root and every element carries a
/// valid signature of the listing's device group.
pub fn verify_device_signatures(
    params: &GroupParams,
    listing: &Listing,
    device_gpks: &BTreeMap<String, GroupElement>,
    commitments: &CommitmentVector,
    signatures: &[GroupSignature],
) -> Result<(), AbortReason> {
    if commitments.root() != listing.commitment_root {
        return Err(AbortReason::CommitmentMismatch);
    }
    let gpk = device_gpks.get(&listing.device_group_id).ok_or(AbortReason::DeviceSignatureInvalid)?;
    if commitments.0.len() != signatures.len()
        || !commitments
            .0
            .iter()
            .zip(signatures)
            .all(|(c, s)| gs_verify(params, gpk, &commitment_message(c), s))
    {
        return Err(AbortReason::DeviceSignatureInvalid);
    }
    Ok(())
}

/// One listing's inputs as seen jointly by all three nodes.
#[derive(Debug, Clone, Copy)]
pub struct InputItem<'a> {
    pub listing: &'a Listing,
    pub commitments: &'a CommitmentVector,
    pub device_signatures: &'a [GroupSignature],
    /// Decrypted payloads of nodes 1, 2 and 3.
    pub shares: [&'a SharePayload; 3],
}

/// All checks in order; the first failure is returned.
pub fn verify_inputs(
    params: &GroupParams,
    items: &[InputItem<'_>],
    user_gpk: &GroupElement,
    device_gpks: &BTreeMap<String, GroupElement>,
    f: &FunctionDescriptor,
    now: Timestamp,
) -> Result<(), AbortReason> {
    verify_inputs_policy(params, items, user_gpk, f, now)?;
    verify_inputs_authenticity(params, items, device_gpks)
}

pub fn verify_inputs_policy(
    params: &GroupParams,
    items: &[InputItem<'_>],
    user_gpk: &GroupElement,
    f: &FunctionDescriptor,
    now: Timestamp,
) -> Result<(), AbortReason> {
    items
        .iter()
        .try_for_each(|it| verify_policy(params, it.listing, user_gpk, f, items.len(), now))
}

pub fn verify_inputs_authenticity(
    params: &GroupParams,
    items: &[InputItem<'_>],
    device_gpks: &BTreeMap<String, GroupElement>,
) -> Result<(), AbortReason> {
    for it in items {
        verify_device_signatures(params, it.listing, device_gpks, it.commitments, it.device_signatures)?;
    }
    for it in items {
        let partials = it
            .shares
            .iter()
            .map(|s| partial_commitments(params, &s.data, &s.blinding))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| AbortReason::MalformedInput)?;
        check_commitments(params, &[&partials[0], &partials[1], &partials[2]], it.commitments)?;
    }
    Ok(())
}

pub fn check_commitments(
    params: &GroupParams,
    partials: &[&[GroupElement]; 3],
    claimed: &CommitmentVector,
) -> Result<(), AbortReason> {
    match check_partial_commitments(params, partials, claimed) {
        Ok(true) => Ok(()),
        Ok(false) => Err(AbortReason::CommitmentMismatch),
        Err(_) => Err(AbortReason::MalformedInput),
    }
}

/// Hash of the sorted content ids of every bundle in the session.
pub fn input_root(listings: &[Listing]) -> Digest {
    let mut ids: Vec<Digest> = listings.iter().flat_map(|l| l.storage_refs).collect();
    ids.sort();
    crate::crypto::hash::hash256(&ids.concat())
}
