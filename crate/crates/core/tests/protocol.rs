//! Three nodes on in-process channels, driven by the blocking session
//! driver, with the market and owners played directly through the library.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use kraken_core::crypto::credential::ROLE_ATTRIBUTE;
use kraken_core::crypto::hash::Digest;
use kraken_core::crypto::{
    gs_setup, gs_sign, issue_credential, pke_decrypt, pke_encrypt, verify_attestations, EncKeyPair, SigKeyPair,
    TrustedIssuers,
};
use kraken_core::market::listing::policy_message;
use kraken_core::market::{Listing, MarketConfig, Marketplace, SessionStatus, ShareBundle};
use kraken_core::math::{FieldElement, GroupParams};
use kraken_core::mpc::driver::wall_clock_ms;
use kraken_core::mpc::messages::{self as msg, OutputShares};
use kraken_core::mpc::{
    input_root, run_session, Node, NodeBehavior, NodeConfig, NodeServices, Phase, ResultMessage, ServiceError,
};
use kraken_core::policy::{FunctionDescriptor, FunctionId, Policy};
use kraken_core::sharing::{commit, commitment_message, share, CommitmentVector, SharePayload, TripleDealer, TripleShare};
use kraken_core::wire::{actor_id, open, Canonical, FromCanonical, KeyDirectory, MemoryHub, ReplayGuard, Transport};

struct LocalServices {
    blobs: HashMap<Digest, Vec<u8>>,
    dealer: TripleDealer,
    params: GroupParams,
    index: u8,
}

impl NodeServices for LocalServices {
    fn fetch_blob(&mut self, id: &Digest) -> Result<Vec<u8>, ServiceError> {
        self.blobs.get(id).cloned().ok_or_else(|| ServiceError("missing blob".into()))
    }

    fn fetch_triples(&mut self, sid: &Digest, count: usize) -> Result<Vec<TripleShare>, ServiceError> {
        Ok(self.dealer.node_triples(self.params.scalars(), sid, count, self.index))
    }
}

struct Outcome {
    phases: Vec<Phase>,
    results: Vec<ResultMessage>,
    aborts: usize,
    consumer: EncKeyPair,
    node_pks: [kraken_core::math::GroupElement; 3],
    sid: Digest,
    f: FunctionDescriptor,
    root: Digest,
    params: GroupParams,
}

fn run(records: &[u64], f_id: FunctionId, allowed: FunctionId, behaviors: [NodeBehavior; 3]) -> Outcome {
    let params = GroupParams::toy();
    let field = params.scalars().clone();
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let now_ms = wall_clock_ms();
    let now = now_ms / 1000;

    let mut taken = BTreeSet::new();
    let mut key = || loop {
        let k = SigKeyPair::generate(&params, &mut rng);
        if taken.insert(k.public().clone()) {
            return k;
        }
    };
    let issuer = key();
    let market_key = key();
    let node_sig: Vec<SigKeyPair> = (0..3).map(|_| key()).collect();
    let consumer_sig = key();
    let owner_sig: Vec<SigKeyPair> = records.iter().map(|_| key()).collect();
    let node_enc: Vec<EncKeyPair> = (0..3).map(|_| EncKeyPair::generate(&params, &mut rng)).collect();
    let consumer_enc = EncKeyPair::generate(&params, &mut rng);

    let mut directory = KeyDirectory::new();
    for k in [&market_key, &consumer_sig].into_iter().chain(&node_sig).chain(&owner_sig) {
        directory.register(&params, k.public().clone());
    }
    let node_ids: [Digest; 3] = std::array::from_fn(|i| actor_id(&params, node_sig[i].public()));
    let consumer_id = actor_id(&params, consumer_sig.public());
    let mut market = Marketplace::in_memory(MarketConfig {
        params: params.clone(),
        signing: market_key.clone(),
        issuers: TrustedIssuers::new([issuer.public().clone()]),
        directory: directory.clone(),
        node_ids,
        seed: [9; 32],
        precheck: false,
    });
    let mut vendor = gs_setup(&params, "vendor", &mut rng);
    let device_gpks = BTreeMap::from([("vendor".to_owned(), vendor.gpk().clone())]);

    let credential = |pseudonym: u8, role: &str, rng: &mut ChaCha20Rng| {
        let attrs = BTreeMap::from([(ROLE_ATTRIBUTE.to_owned(), role.to_owned())]);
        issue_credential(&params, &issuer, [pseudonym; 32], attrs, rng).unwrap()
    };
    let policy = Policy::new(BTreeSet::from([allowed]), 1, None, now + 3600).unwrap();
    let mut blobs = HashMap::new();
    let mut ids = Vec::new();
    for (i, &x) in records.iter().enumerate() {
        let owner = actor_id(&params, owner_sig[i].public());
        let member = market.register_user(owner, &credential(i as u8 + 1, "owner", &mut rng), "owner", now).unwrap();
        vendor.authorize([100 + i as u8; 32]);
        let device = vendor.join([100 + i as u8; 32]).unwrap();
        let value = vec![field.from_u64(x)];
        let blinding = vec![field.random(&mut rng)];
        let commitments = CommitmentVector(vec![commit(&params, &value[0], &blinding[0])]);
        let sigs = vec![gs_sign(&params, &device, &commitment_message(&commitments.0[0]), &mut rng)];
        let data = share(&field, &value, &mut rng).unwrap();
        let masks = share(&field, &blinding, &mut rng).unwrap();
        let refs: [Digest; 3] = std::array::from_fn(|n| {
            let payload = SharePayload { data: data[n].elements.clone(), blinding: masks[n].elements.clone() };
            let bundle = ShareBundle {
                node_index: n as u8 + 1,
                ciphertext: pke_encrypt(&params, node_enc[n].public(), &payload.canonical_bytes(), &mut rng),
                commitment_vector: commitments.clone(),
                device_signatures: sigs.clone(),
            };
            let id = bundle.content_id();
            blobs.insert(id, bundle.canonical_bytes());
            id
        });
        let root = commitments.root();
        let signature = gs_sign(&params, &member, &policy_message(&policy, &root), &mut rng);
        let listing = Listing::new(refs, root, policy.clone(), signature, "vendor", now);
        ids.push(market.publish_listing(&listing.to_canonical(), now).unwrap());
    }
    market.register_user(consumer_id, &credential(200, "consumer", &mut rng), "consumer", now).unwrap();
    let f = FunctionDescriptor::new(f_id, vec![0], vec![]).unwrap();
    let listings: Vec<Listing> = ids.iter().map(|id| market.listing(id).unwrap().clone()).collect();
    let (sid, starts) = market.request_analysis(consumer_id, consumer_enc.public().clone(), f.clone(), &ids, now).unwrap();

    let hub = MemoryHub::new();
    let mut consumer_transport = hub.endpoint(consumer_id);
    let mut market_transport = hub.endpoint(market.id());
    let mut handles = Vec::new();
    for i in 0..3 {
        let mut transport = hub.endpoint(node_ids[i]);
        let cfg = NodeConfig {
            index: i as u8 + 1,
            params: params.clone(),
            signing: node_sig[i].clone(),
            encryption: node_enc[i].clone(),
            directory: directory.clone(),
            market_id: market.id(),
            node_ids,
            user_gpk: market.user_gpk().clone(),
            device_gpks: device_gpks.clone(),
            phase_timeout_ms: 5_000,
            behavior: behaviors[i].clone(),
        };
        let mut services = LocalServices {
            blobs: blobs.clone(),
            dealer: TripleDealer::new([5; 32]),
            params: params.clone(),
            index: i as u8 + 1,
        };
        handles.push(thread::spawn(move || {
            let mut node = Node::new(cfg, [i as u8; 32]);
            run_session(&mut node, &mut transport, &mut services, &wall_clock_ms, Duration::from_secs(10))
                .unwrap()
                .expect("session finishes")
        }));
    }
    for s in starts {
        market_transport.send(&s.to, &s.envelope).unwrap();
    }
    let phases: Vec<Phase> = handles.into_iter().map(|h| h.join().unwrap().state.phase).collect();

    let mut guard = ReplayGuard::new();
    let mut results = Vec::new();
    let mut aborts = 0;
    while let Some(env) = consumer_transport.recv(Duration::from_millis(300)).unwrap() {
        let payload = open(&params, &directory, &mut guard, &env).unwrap();
        match env.msg_type.as_str() {
            msg::RESULT => results.push(ResultMessage::from_canonical(&payload, &params).unwrap()),
            msg::ABORT => aborts += 1,
            _ => {}
        }
    }
    // node status reports settle the market's view
    while let Some(env) = market_transport.recv(Duration::from_millis(100)).unwrap() {
        market.handle(&env, now);
    }
    let status = market.session_status(&sid).cloned();
    match phases.iter().all(|p| *p == Phase::Done) {
        true => assert_eq!(status, Some(SessionStatus::Done)),
        false => assert!(matches!(status, Some(SessionStatus::Aborted(_)))),
    }
    Outcome {
        phases,
        results,
        aborts,
        consumer: consumer_enc,
        node_pks: std::array::from_fn(|i| node_sig[i].public().clone()),
        sid,
        root: input_root(&listings),
        f,
        params,
    }
}

fn reconstruct(o: &Outcome) -> Vec<FieldElement> {
    let field = o.params.scalars();
    let shares: Vec<OutputShares> = o
        .results
        .iter()
        .map(|r| {
            let plain = pke_decrypt(&o.params, &o.consumer, &r.ciphertext).unwrap();
            OutputShares::from_canonical_bytes(&plain, &o.params).unwrap()
        })
        .collect();
    (0..shares[0].values.len()).map(|j| field.sum(shares.iter().map(|s| &s.values[j]))).collect()
}

#[test]
fn honest_nodes_compute_the_moments() {
    let o = run(&[2, 3, 7], FunctionId::VarianceMoments, FunctionId::VarianceMoments, Default::default());
    assert!(o.phases.iter().all(|p| *p == Phase::Done));
    assert_eq!(o.results.len(), 3);
    let atts: Vec<_> = o.results.iter().map(|r| r.attestation.clone()).collect();
    assert!(verify_attestations(&o.params, &o.sid, &o.f.digest(), &o.root, &atts, &o.node_pks).unwrap());
    let mut values: Vec<u64> = reconstruct(&o).iter().map(|v| u64::try_from(v.value()).unwrap()).collect();
    values.sort();
    // count, sum, sum of squares
    assert_eq!(values, vec![3, 12, 62]);
}

#[test]
fn disallowed_function_aborts_every_node() {
    let o = run(&[2, 3, 7], FunctionId::Sum, FunctionId::VarianceMoments, Default::default());
    assert!(o.phases.iter().all(|p| *p == Phase::Aborted));
    assert!(o.results.is_empty());
    assert!(o.aborts > 0);
}

#[test]
fn tampered_share_aborts_every_node() {
    let bad = NodeBehavior { tamper_share: true, ..NodeBehavior::default() };
    let o = run(&[4, 5, 6], FunctionId::Sum, FunctionId::Sum, [NodeBehavior::default(), bad, NodeBehavior::default()]);
    assert!(o.phases.iter().all(|p| *p == Phase::Aborted));
    assert!(o.results.is_empty());
}
