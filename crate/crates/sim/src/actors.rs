//! The issuer stub, the device emulator, the data-owner client and the
//! consumer's result finalizer.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use kraken_core::crypto::credential::ROLE_ATTRIBUTE;
use kraken_core::crypto::hash::{hash256_parts, Digest};
use kraken_core::crypto::{
    gs_sign, issue_credential, pke_decrypt, pke_encrypt, verify_attestations, Credential, CryptoError, EncKeyPair,
    GroupSignature, MemberKey, SigKeyPair,
};
use kraken_core::market::listing::policy_message;
use kraken_core::market::{Listing, ShareBundle};
use kraken_core::math::{FieldElement, GroupElement, GroupParams};
use kraken_core::mpc::{plan, OutputLabel, OutputShares, ResultMessage};
use kraken_core::policy::{policy_warnings, FunctionDescriptor, Policy, PrivacyWarning, Timestamp};
use kraken_core::sharing::{commit, commitment_message, share, CommitmentVector, SharePayload};
use kraken_core::wire::{ActorId, Canonical, CanonicalValue, FromCanonical};

use crate::client::{Endpoint, MarketApi, Remote, Rpc, StorageApi};
use crate::error::AppError;
use crate::stats::{finish, Stats};

/// Issues role credentials under pseudonyms it derives itself. The
/// identity-to-pseudonym mapping never leaves this actor.
pub struct Issuer {
    params: GroupParams,
    key: SigKeyPair,
    salt: [u8; 32],
    rng: ChaCha20Rng,
}

impl Issuer {
    pub fn new(params: GroupParams, seed: [u8; 32]) -> Self {
        let mut rng = ChaCha20Rng::from_seed(seed);
        let key = SigKeyPair::generate(&params, &mut rng);
        let mut salt = [0u8; 32];
        rng.fill_bytes(&mut salt);
        Issuer { params, key, salt, rng }
    }

    pub fn public(&self) -> &GroupElement {
        self.key.public()
    }

    pub fn pseudonym(&self, identity: &str) -> Digest {
        hash256_parts(&[b"pseudonym", &self.salt, identity.as_bytes()])
    }

    pub fn issue(&mut self, identity: &str, role: &str) -> Result<Credential, AppError> {
        let attrs = BTreeMap::from([(ROLE_ATTRIBUTE.to_owned(), role.to_owned())]);
        let pseudonym = self.pseudonym(identity);
        Ok(issue_credential(&self.params, &self.key, pseudonym, attrs, &mut self.rng)?)
    }
}

/// A record as it leaves the sensing device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedRecord {
    pub values: Vec<FieldElement>,
    /// Pedersen blinding per element.
    pub blinding: Vec<FieldElement>,
    pub commitments: CommitmentVector,
    /// One device group signature per commitment.
    pub signatures: Vec<GroupSignature>,
    pub device_group_id: String,
}

/// Commits to every element and signs each commitment with the device's
/// group member key.
pub fn device_capture<R: RngCore + ?Sized>(
    params: &GroupParams,
    device_key: &MemberKey,
    record: &[FieldElement],
    rng: &mut R,
) -> CapturedRecord {
    let blinding: Vec<FieldElement> = record.iter().map(|_| params.scalars().random(rng)).collect();
    let commitments: Vec<GroupElement> = record.iter().zip(&blinding).map(|(m, r)| commit(params, m, r)).collect();
    let signatures = commitments.iter().map(|c| gs_sign(params, device_key, &commitment_message(c), rng)).collect();
    CapturedRecord {
        values: record.to_vec(),
        blinding,
        commitments: CommitmentVector(commitments),
        signatures,
        device_group_id: device_key.group_id.clone(),
    }
}

/// Market and storage access for an owner.
pub trait OwnerApi: MarketApi + StorageApi {}

impl<T: MarketApi + StorageApi + ?Sized> OwnerApi for T {}

/// One endpoint reaching both the market and storage.
pub struct Link<'a> {
    pub endpoint: &'a mut Endpoint,
    pub rpc: &'a mut dyn Rpc,
    pub market: ActorId,
    pub storage: ActorId,
}

impl Link<'_> {
    fn market(&mut self) -> Remote<'_> {
        Remote::new(self.endpoint, self.rpc, self.market)
    }

    fn storage(&mut self) -> Remote<'_> {
        Remote::new(self.endpoint, self.rpc, self.storage)
    }
}

impl MarketApi for Link<'_> {
    fn register(&mut self, credential: &Credential, role: &str, ek: &EncKeyPair) -> Result<(GroupElement, MemberKey), AppError> {
        self.market().register(credential, role, ek)
    }

    fn publish(&mut self, listing: CanonicalValue) -> Result<Digest, AppError> {
        self.market().publish(listing)
    }

    fn catalog(&mut self) -> Result<Vec<Listing>, AppError> {
        self.market().catalog()
    }

    fn request_analysis(&mut self, ek: &GroupElement, f: &FunctionDescriptor, ids: &[Digest]) -> Result<Digest, AppError> {
        self.market().request_analysis(ek, f, ids)
    }

    fn session_status(&mut self, session_id: Digest) -> Result<String, AppError> {
        self.market().session_status(session_id)
    }
}

impl StorageApi for Link<'_> {
    fn put(&mut self, bytes: &[u8]) -> Result<Digest, AppError> {
        self.storage().put(bytes)
    }

    fn get(&mut self, id: &Digest) -> Result<Vec<u8>, AppError> {
        self.storage().get(id)
    }

    fn delete(&mut self, id: &Digest) -> Result<(), AppError> {
        self.storage().delete(id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Published {
    pub listing_id: Digest,
    pub storage_refs: [Digest; 3],
    /// Advisory only; publication goes ahead regardless.
    pub warnings: Vec<PrivacyWarning>,
}

/// The owner's bundles before upload: one per node, plus the listing
/// ingredients.
pub fn prepare_bundles<R: RngCore + ?Sized>(
    params: &GroupParams,
    captured: &CapturedRecord,
    node_eks: &[GroupElement; 3],
    rng: &mut R,
) -> Result<[ShareBundle; 3], AppError> {
    let field = params.scalars();
    let shares = share(field, &captured.values, rng).map_err(|e| AppError::config(e.to_string()))?;
    let masks = share(field, &captured.blinding, rng).map_err(|e| AppError::config(e.to_string()))?;
    let bundle = |i: usize, rng: &mut R| {
        let payload = SharePayload { data: shares[i].elements.clone(), blinding: masks[i].elements.clone() };
        ShareBundle {
            node_index: i as u8 + 1,
            ciphertext: pke_encrypt(params, &node_eks[i], &payload.canonical_bytes(), rng),
            commitment_vector: captured.commitments.clone(),
            device_signatures: captured.signatures.clone(),
        }
    };
    Ok([bundle(0, rng), bundle(1, rng), bundle(2, rng)])
}

/// Shares, encrypts, signs, uploads and publishes one record. Uploads are
/// deleted again if any later step fails.
#[allow(clippy::too_many_arguments)]
pub fn owner_prepare_and_publish<A: OwnerApi + ?Sized, R: RngCore + ?Sized>(
    params: &GroupParams,
    member_key: Option<&MemberKey>,
    captured: &CapturedRecord,
    policy: &Policy,
    node_eks: &[GroupElement; 3],
    api: &mut A,
    now: Timestamp,
    rng: &mut R,
) -> Result<Published, AppError> {
    let member_key = member_key.ok_or(AppError::NotAuthorized)?;
    let bundles = prepare_bundles(params, captured, node_eks, rng)?;
    let root = captured.commitments.root();
    let signature = gs_sign(params, member_key, &policy_message(policy, &root), rng);
    let mut uploaded: Vec<Digest> = Vec::with_capacity(3);
    let result = (|| {
        for b in &bundles {
            let id = api.put(&b.canonical_bytes())?;
            uploaded.push(id);
            if id != b.content_id() {
                return Err(AppError::UnexpectedReply("storage returned a different content id".into()));
            }
        }
        let refs = [uploaded[0], uploaded[1], uploaded[2]];
        let listing = Listing::new(refs, root, policy.clone(), signature, captured.device_group_id.clone(), now);
        let id = api.publish(listing.to_canonical())?;
        Ok((id, refs))
    })();
    match result {
        Ok((listing_id, storage_refs)) => {
            Ok(Published { listing_id, storage_refs, warnings: policy_warnings(policy) })
        }
        Err(e) => {
            for id in &uploaded {
                // best effort; the original error is what the caller needs
                let _ = api.delete(id);
            }
            Err(e)
        }
    }
}

/// The consumer's view of a finished session.
#[derive(Debug, Clone)]
pub struct Finalized {
    pub labels: Vec<OutputLabel>,
    pub values: Vec<BigUint>,
    pub stats: Stats,
    /// Decrypted output-share plaintexts, in node order.
    pub plaintexts: Vec<Vec<u8>>,
}

/// What the consumer expects the nodes to have computed.
#[derive(Debug, Clone)]
pub struct Expectation<'a> {
    pub session_id: Digest,
    pub function: &'a FunctionDescriptor,
    pub input_root: Digest,
    pub node_pks: &'a [GroupElement; 3],
    pub cohort: usize,
}

/// Verifies attestations before decrypting anything, then checks every
/// output share against its attested commitment and reconstructs.
pub fn consumer_finalize(
    params: &GroupParams,
    dk: &EncKeyPair,
    results: &[ResultMessage],
    expect: &Expectation<'_>,
) -> Result<Finalized, AppError> {
    let atts: Vec<_> = results.iter().map(|r| r.attestation.clone()).collect();
    match verify_attestations(
        params,
        &expect.session_id,
        &expect.function.digest(),
        &expect.input_root,
        &atts,
        expect.node_pks,
    ) {
        Ok(true) => {}
        Ok(false) => return Err(AppError::ResultRejected("attestation does not verify".into())),
        Err(CryptoError::IncompleteAttestation) => {
            return Err(AppError::ResultRejected("incomplete attestation set".into()))
        }
        Err(e) => return Err(e.into()),
    }
    let mut ordered: Vec<&ResultMessage> = results.iter().collect();
    ordered.sort_by_key(|r| r.attestation.node_index);
    let record_len = expect.function.element_selector.iter().max().map_or(1, |m| m + 1);
    let expected_labels = plan(params.scalars(), expect.function, expect.cohort, record_len)
        .map_err(|e| AppError::ResultRejected(e.to_string()))?
        .outputs;
    let mut plaintexts = Vec::with_capacity(3);
    let mut sums: Vec<FieldElement> = vec![params.scalars().zero(); expected_labels.len()];
    for r in ordered {
        let plain = pke_decrypt(params, dk, &r.ciphertext)?;
        let out = OutputShares::from_canonical_bytes(&plain, params)
            .map_err(|e| AppError::ResultRejected(format!("output shares: {e}")))?;
        let a = &r.attestation;
        if out.node_index != a.node_index || out.labels != expected_labels {
            return Err(AppError::ResultRejected("output labels disagree with the function".into()));
        }
        if a.output_commitments.len() != out.values.len() {
            return Err(AppError::ResultRejected("commitment count differs".into()));
        }
        let opens = out
            .values
            .iter()
            .zip(&out.blinding)
            .zip(&a.output_commitments)
            .all(|((v, b), c)| commit(params, v, b) == *c);
        if !opens {
            return Err(AppError::ResultRejected("output share does not open its commitment".into()));
        }
        for (s, v) in sums.iter_mut().zip(&out.values) {
            *s = params.scalars().add(s, v);
        }
        plaintexts.push(plain);
    }
    let values: Vec<BigUint> = sums.into_iter().map(FieldElement::into_value).collect();
    let stats = finish(expect.function, &expected_labels, &values)?;
    Ok(Finalized { labels: expected_labels, values, stats, plaintexts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use kraken_core::crypto::{attest, gs_setup, gs_verify};
    use kraken_core::policy::FunctionId;
    use kraken_core::sharing::reconstruct;
    use std::collections::BTreeSet;

    fn toy() -> GroupParams {
        GroupParams::toy()
    }

    fn fe(params: &GroupParams, v: &[u64]) -> Vec<FieldElement> {
        v.iter().map(|&x| params.scalars().from_u64(x)).collect()
    }

    #[test]
    fn captured_record_verifies() {
        let params = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut mgr = gs_setup(&params, "acme-sensors", &mut rng);
        mgr.authorize([1; 32]);
        let key = mgr.join([1; 32]).unwrap();
        let cap = device_capture(&params, &key, &fe(&params, &[2, 9, 4]), &mut rng);
        for (c, s) in cap.commitments.0.iter().zip(&cap.signatures) {
            assert!(gs_verify(&params, mgr.gpk(), &commitment_message(c), s));
        }
        assert_eq!(cap.commitments.0[0], commit(&params, &params.scalars().from_u64(2), &cap.blinding[0]));
        let mut tampered = cap.commitments.0[1].clone();
        tampered = params.mul(&tampered, params.g());
        assert!(!gs_verify(&params, mgr.gpk(), &commitment_message(&tampered), &cap.signatures[1]));
    }

    #[test]
    fn pseudonyms_are_stable_and_distinct() {
        let mut issuer = Issuer::new(toy(), [3; 32]);
        assert_eq!(issuer.pseudonym("alice"), issuer.pseudonym("alice"));
        assert_ne!(issuer.pseudonym("alice"), issuer.pseudonym("bob"));
        let cred = issuer.issue("alice", "owner").unwrap();
        assert_eq!(cred.role(), Some("owner"));
        assert!(issuer.issue("alice", "admin").is_err());
    }

    #[test]
    fn bundles_reconstruct_to_the_record() {
        let params = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let nodes: Vec<EncKeyPair> = (0..3).map(|_| EncKeyPair::generate(&params, &mut rng)).collect();
        let eks = [nodes[0].public().clone(), nodes[1].public().clone(), nodes[2].public().clone()];
        let mut mgr = gs_setup(&params, "dev", &mut rng);
        mgr.authorize([0; 32]);
        let key = mgr.join([0; 32]).unwrap();
        let cap = device_capture(&params, &key, &fe(&params, &[5, 6]), &mut rng);
        let bundles = prepare_bundles(&params, &cap, &eks, &mut rng).unwrap();
        let payloads: Vec<SharePayload> = bundles
            .iter()
            .zip(&nodes)
            .map(|(b, k)| SharePayload::from_canonical_bytes(&pke_decrypt(&params, k, &b.ciphertext).unwrap(), &params).unwrap())
            .collect();
        let as_shares = |f: fn(&SharePayload) -> &Vec<FieldElement>| {
            payloads
                .iter()
                .enumerate()
                .map(|(i, p)| kraken_core::sharing::ShareVector { node_index: i as u8 + 1, elements: f(p).clone(), randomness_tag: [0; 16] })
                .collect::<Vec<_>>()
        };
        assert_eq!(reconstruct(params.scalars(), &as_shares(|p| &p.data)).unwrap(), cap.values);
        assert_eq!(reconstruct(params.scalars(), &as_shares(|p| &p.blinding)).unwrap(), cap.blinding);
    }

    /// In-memory market and storage with a switch to fail publication.
    #[derive(Default)]
    struct Fake {
        blobs: BTreeMap<Digest, Vec<u8>>,
        fail_publish: bool,
        published: Vec<CanonicalValue>,
    }

    impl MarketApi for Fake {
        fn register(&mut self, _: &Credential, _: &str, _: &EncKeyPair) -> Result<(GroupElement, MemberKey), AppError> {
            unimplemented!()
        }
        fn publish(&mut self, listing: CanonicalValue) -> Result<Digest, AppError> {
            if self.fail_publish {
                return Err(AppError::Remote { code: "NotAuthorized".into(), detail: String::new() });
            }
            self.published.push(listing);
            Ok([7; 32])
        }
        fn catalog(&mut self) -> Result<Vec<Listing>, AppError> {
            Ok(vec![])
        }
        fn request_analysis(&mut self, _: &GroupElement, _: &FunctionDescriptor, _: &[Digest]) -> Result<Digest, AppError> {
            unimplemented!()
        }
        fn session_status(&mut self, _: Digest) -> Result<String, AppError> {
            unimplemented!()
        }
    }

    impl StorageApi for Fake {
        fn put(&mut self, bytes: &[u8]) -> Result<Digest, AppError> {
            let id = kraken_core::crypto::hash256(bytes);
            self.blobs.insert(id, bytes.to_vec());
            Ok(id)
        }
        fn get(&mut self, id: &Digest) -> Result<Vec<u8>, AppError> {
            self.blobs.get(id).cloned().ok_or(AppError::Storage(kraken_core::market::StorageError::NotFound))
        }
        fn delete(&mut self, id: &Digest) -> Result<(), AppError> {
            self.blobs.remove(id);
            Ok(())
        }
    }

    struct Owner {
        params: GroupParams,
        key: MemberKey,
        cap: CapturedRecord,
        eks: [GroupElement; 3],
        policy: Policy,
    }

    fn owner(min_cohort: u64) -> Owner {
        let params = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut dev = gs_setup(&params, "dev", &mut rng);
        dev.authorize([0; 32]);
        let dkey = dev.join([0; 32]).unwrap();
        let mut users = gs_setup(&params, "users", &mut rng);
        users.authorize([1; 32]);
        let key = users.join([1; 32]).unwrap();
        let cap = device_capture(&params, &dkey, &fe(&params, &[2]), &mut rng);
        let eks = std::array::from_fn(|_| EncKeyPair::generate(&params, &mut rng).public().clone());
        let policy = Policy::new(BTreeSet::from([FunctionId::Sum]), min_cohort, None, u64::MAX).unwrap();
        Owner { params, key, cap, eks, policy }
    }

    #[test]
    fn publish_uploads_three_bundles() {
        let o = owner(3);
        let mut api = Fake::default();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let p = owner_prepare_and_publish(&o.params, Some(&o.key), &o.cap, &o.policy, &o.eks, &mut api, 10, &mut rng).unwrap();
        assert_eq!(api.blobs.len(), 3);
        assert!(p.warnings.is_empty());
        let listing = Listing::from_canonical(&api.published[0], &o.params).unwrap();
        assert_eq!(listing.storage_refs, p.storage_refs);
        assert!(gs_verify(&o.params, o.key.gpk(), &listing.policy_message(), &listing.policy_signature));
    }

    #[test]
    fn singleton_policy_warns_but_publishes() {
        let o = owner(1);
        let mut api = Fake::default();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let p = owner_prepare_and_publish(&o.params, Some(&o.key), &o.cap, &o.policy, &o.eks, &mut api, 10, &mut rng).unwrap();
        assert_eq!(p.warnings, vec![PrivacyWarning::SingletonAggregate]);
        assert_eq!(api.published.len(), 1);
    }

    #[test]
    fn failed_publish_rolls_back_uploads() {
        let o = owner(3);
        let mut api = Fake { fail_publish: true, ..Fake::default() };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let r = owner_prepare_and_publish(&o.params, Some(&o.key), &o.cap, &o.policy, &o.eks, &mut api, 10, &mut rng);
        assert!(matches!(r, Err(AppError::Remote { .. })));
        assert!(api.blobs.is_empty());
    }

    #[test]
    fn unregistered_owner_not_authorized() {
        let o = owner(3);
        let mut api = Fake::default();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let r = owner_prepare_and_publish(&o.params, None, &o.cap, &o.policy, &o.eks, &mut api, 10, &mut rng);
        assert_eq!(r, Err(AppError::NotAuthorized));
        assert!(api.blobs.is_empty());
    }

    struct Session {
        params: GroupParams,
        consumer: EncKeyPair,
        node_keys: Vec<SigKeyPair>,
        pks: [GroupElement; 3],
        f: FunctionDescriptor,
        results: Vec<ResultMessage>,
    }

    /// Honest node outputs for moments (12, 62, 3) of the values 2, 3 and 7.
    fn session() -> Session {
        let params = toy();
        let field = params.scalars().clone();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let consumer = EncKeyPair::generate(&params, &mut rng);
        let node_keys: Vec<SigKeyPair> = (0..3).map(|_| SigKeyPair::generate(&params, &mut rng)).collect();
        let pks = std::array::from_fn(|i| node_keys[i].public().clone());
        let f = FunctionDescriptor::new(FunctionId::VarianceMoments, vec![0], vec![]).unwrap();
        let labels = vec![OutputLabel::Sum(Some(0)), OutputLabel::SumSq(0), OutputLabel::Count];
        let totals = [12u64, 62, 3];
        let mut shares: Vec<Vec<FieldElement>> = vec![vec![], vec![], vec![]];
        for t in totals {
            let s = share(&field, &[field.from_u64(t)], &mut rng).unwrap();
            for i in 0..3 {
                shares[i].push(s[i].elements[0].clone());
            }
        }
        let results = (0..3)
            .map(|i| {
                let blinding: Vec<FieldElement> = (0..3).map(|_| field.random(&mut rng)).collect();
                let commitments = shares[i].iter().zip(&blinding).map(|(v, r)| commit(&params, v, r)).collect();
                let out = OutputShares { node_index: i as u8 + 1, labels: labels.clone(), values: shares[i].clone(), blinding };
                ResultMessage {
                    attestation: attest(&params, &node_keys[i], i as u8 + 1, [1; 32], f.digest(), [2; 32], commitments, &mut rng),
                    ciphertext: pke_encrypt(&params, consumer.public(), &out.canonical_bytes(), &mut rng),
                }
            })
            .collect();
        Session { params, consumer, node_keys, pks, f, results }
    }

    fn finalize(s: &Session, results: &[ResultMessage]) -> Result<Finalized, AppError> {
        let expect = Expectation { session_id: [1; 32], function: &s.f, input_root: [2; 32], node_pks: &s.pks, cohort: 3 };
        consumer_finalize(&s.params, &s.consumer, results, &expect)
    }

    #[test]
    fn honest_results_finish_to_mean_and_variance() {
        let s = session();
        let done = finalize(&s, &s.results).unwrap();
        let r = crate::stats::render(&done.stats);
        assert_eq!(r["MEAN[0]"], "4");
        assert_eq!(r["VARIANCE[0]"], "14/3");
    }

    #[test]
    fn forged_attestation_rejected_before_decryption() {
        let s = session();
        let mut results = s.results.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = &results[1].attestation;
        // signed by node 1's key in node 2's slot
        results[1].attestation = attest(&s.params, &s.node_keys[0], 2, a.session_id, a.function_id, a.input_root, a.output_commitments.clone(), &mut rng);
        // an undecryptable ciphertext proves decryption is never reached
        results[1].ciphertext.tag[0] ^= 1;
        assert!(matches!(finalize(&s, &results), Err(AppError::ResultRejected(_))));
        assert!(matches!(finalize(&s, &s.results[..2]), Err(AppError::ResultRejected(_))));
    }

    #[test]
    fn bad_tag_is_auth_failure() {
        let s = session();
        let mut results = s.results.clone();
        results[2].ciphertext.body[0] ^= 1;
        assert_eq!(finalize(&s, &results).unwrap_err().code(), "AuthFailure");
    }

    #[test]
    fn altered_output_share_rejected() {
        let s = session();
        let mut results = s.results.clone();
        let plain = pke_decrypt(&s.params, &s.consumer, &results[0].ciphertext).unwrap();
        let mut out = OutputShares::from_canonical_bytes(&plain, &s.params).unwrap();
        out.values[0] = s.params.scalars().add(&out.values[0], &s.params.scalars().one());
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        results[0].ciphertext = pke_encrypt(&s.params, s.consumer.public(), &out.canonical_bytes(), &mut rng);
        assert!(matches!(finalize(&s, &results), Err(AppError::ResultRejected(_))));
    }
}
