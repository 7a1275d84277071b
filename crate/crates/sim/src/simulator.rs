//! Deterministic end-to-end runs on the in-process bus.
//!
//! Every actor lives in one thread. Synchronous requests (registration,
//! publication, storage, triples) are carried by [`World`] and logged on the
//! bus transcript; protocol traffic between the market, the nodes and the
//! consumer is posted on the bus and delivered in a seed-determined order,
//! one virtual millisecond per delivery. When nothing is in flight the clock
//! jumps to the next node deadline.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use kraken_core::crypto::hash::{hash256, hash256_parts, Digest};
use kraken_core::crypto::{gs_setup, pke_decrypt, EncKeyPair, GroupManager, SigKeyPair, TrustedIssuers};
use kraken_core::market::ledger::verify_persisted;
use kraken_core::market::{BlobStore, MarketConfig, Marketplace, SessionStatus, ShareBundle};
use kraken_core::math::{FieldElement, GroupElement};
use kraken_core::mpc::messages::{self as msg};
use kraken_core::mpc::{
    input_root, Node, NodeBehavior, NodeConfig, Outgoing, Phase, ResultMessage, SessionState, DEFAULT_PHASE_TIMEOUT_MS,
};
use kraken_core::policy::privacy_warning;
use kraken_core::wire::canonical::field_list;
use kraken_core::wire::{
    ActorId, CanonicalValue, DeterministicBus, Envelope, FromCanonical, KeyDirectory, ReplayGuard, WireError,
};

use crate::actors::{consumer_finalize, device_capture, owner_prepare_and_publish, Expectation, Issuer, Link};
use crate::client::{Endpoint, MarketApi, Rpc};
use crate::error::AppError;
use crate::report::{NodeReport, Report};
use crate::scenario::{Scenario, SIM_EPOCH_SECS};
use crate::serve::split_reply;
use crate::services::{DealerService, NodeLink, StorageService};
use crate::stats::{oracle, render, Stats};

/// Group id of the emulated device manufacturer.
pub const DEVICE_GROUP_ID: &str = "sensor-vendor";

const MAX_DELIVERIES: usize = 2_000_000;
/// Needles shorter than this match ciphertext bytes by chance.
const MIN_NEEDLE_LEN: usize = 12;

/// A finished run: the report plus the statistics the consumer accepted.
#[derive(Debug, Clone)]
pub struct Run {
    pub report: Report,
    pub stats: Option<Stats>,
}

/// Services reached by synchronous request, plus the bus.
pub struct World {
    pub bus: DeterministicBus,
    pub market: Marketplace,
    pub storage: StorageService,
    pub dealer: DealerService,
    pub now_ms: u64,
}

impl World {
    fn post_all(&mut self, from: ActorId, out: Vec<Outgoing>) {
        for o in out {
            self.bus.post(from, o.to, o.envelope);
        }
    }
}

impl Rpc for World {
    fn call(&mut self, to: &ActorId, request: Envelope) -> Result<Envelope, AppError> {
        let from = request.sender_id;
        self.bus.record(from, *to, &request);
        let reply = if *to == self.market.id() {
            let out = self.market.handle(&request, self.now_ms / 1000);
            let (reply, rest) = split_reply(out, &from);
            let market = self.market.id();
            self.post_all(market, rest);
            reply
        } else if *to == self.storage.id() {
            self.storage.handle(&request)
        } else if *to == self.dealer.id() {
            self.dealer.handle(&request)
        } else {
            None
        };
        let reply = reply.ok_or(WireError::Closed)?;
        self.bus.record(*to, from, &reply);
        Ok(reply)
    }
}

struct NodeSlot {
    node: Node,
    endpoint: Endpoint,
    encryption: EncKeyPair,
}

struct Party {
    endpoint: Endpoint,
    encryption: EncKeyPair,
}

fn sub_seed(seed: u64, label: &str) -> [u8; 32] {
    hash256_parts(&[b"kraken-sim", &seed.to_be_bytes(), label.as_bytes()])
}

fn behavior(scenario: &Scenario, node: u8) -> NodeBehavior {
    let a = &scenario.adversary;
    NodeBehavior {
        tamper_share: a.node_tampers_share.contains(&node),
        wrong_function: a.node_wrong_function.contains(&node),
        skip_policy_check: a.node_skips_policy_check.contains(&node),
        inconsistent_opening: a.node_inconsistent_opening.contains(&node),
        corrupt_output: a.node_corrupts_output.contains(&node),
    }
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

fn guard_unique(g: &ReplayGuard) -> bool {
    g.accepted().iter().collect::<HashSet<_>>().len() == g.accepted().len()
}

fn phase_monotone(s: &SessionState) -> bool {
    let Some((last, rest)) = s.history.split_last() else { return false };
    let ordered = s.history.windows(2).all(|w| w[0] < w[1]);
    ordered && rest.iter().all(|p| !p.is_terminal()) && s.history[0] == Phase::Init && (s.phase == *last)
}

/// Runs `scenario`, with `seed_override` replacing its seed when given.
pub fn run_scenario(scenario: &Scenario, seed_override: Option<u64>) -> Result<Report, AppError> {
    simulate(scenario, seed_override).map(|r| r.report)
}

pub fn simulate(scenario: &Scenario, seed_override: Option<u64>) -> Result<Run, AppError> {
    let v = scenario.validate()?;
    let params = v.params.clone();
    let seed = seed_override.unwrap_or(scenario.seed);
    let adv = &scenario.adversary;
    let field = params.scalars().clone();
    let now_s = SIM_EPOCH_SECS;

    // keys
    let mut keygen = ChaCha20Rng::from_seed(sub_seed(seed, "keys"));
    // The toy group has only q public keys; redraw so actor ids stay unique.
    let mut taken = BTreeSet::new();
    let mut sig = || loop {
        let k = SigKeyPair::generate(&params, &mut keygen);
        if taken.insert(k.public().clone()) {
            return k;
        }
    };
    let market_key = sig();
    let storage_key = sig();
    let dealer_key = sig();
    let node_sig: Vec<SigKeyPair> = (0..3).map(|_| sig()).collect();
    let consumer_sig = sig();
    let owner_sig: Vec<SigKeyPair> = scenario.owners.iter().map(|_| sig()).collect();
    let mut enc = || EncKeyPair::generate(&params, &mut keygen);
    let node_enc: Vec<EncKeyPair> = (0..3).map(|_| enc()).collect();
    let consumer_enc = enc();
    let owner_enc: Vec<EncKeyPair> = scenario.owners.iter().map(|_| enc()).collect();

    let mut directory = KeyDirectory::new();
    let mut register = |k: &SigKeyPair| directory.register(&params, k.public().clone());
    let market_id = register(&market_key);
    let storage_id = register(&storage_key);
    let dealer_id = register(&dealer_key);
    let node_ids: [ActorId; 3] = std::array::from_fn(|i| register(&node_sig[i]));
    let consumer_id = register(&consumer_sig);
    let owner_ids: Vec<ActorId> = owner_sig.iter().map(&mut register).collect();
    let node_pks: [GroupElement; 3] = std::array::from_fn(|i| node_sig[i].public().clone());
    let node_eks: [GroupElement; 3] = std::array::from_fn(|i| node_enc[i].public().clone());

    let mut issuer = Issuer::new(params.clone(), sub_seed(seed, "issuer"));
    let mut vendor_rng = ChaCha20Rng::from_seed(sub_seed(seed, "vendor"));
    let mut vendor: GroupManager = gs_setup(&params, DEVICE_GROUP_ID, &mut vendor_rng);
    let device_gpks = BTreeMap::from([(DEVICE_GROUP_ID.to_owned(), vendor.gpk().clone())]);

    let market = Marketplace::in_memory(MarketConfig {
        params: params.clone(),
        signing: market_key,
        issuers: TrustedIssuers::new([issuer.public().clone()]),
        directory: directory.clone(),
        node_ids,
        seed: sub_seed(seed, "market"),
        precheck: !adv.market_skips_precheck,
    });
    let user_gpk = market.user_gpk().clone();
    let storage = StorageService::new(
        Endpoint::new(params.clone(), storage_key, directory.clone(), sub_seed(seed, "storage")),
        BlobStore::in_memory(),
    )
    .tamper_for(adv.storage_tampers_blob.map(|k| node_ids[usize::from(k) - 1]));
    let dealer_nodes = (0..3).map(|i| (node_ids[i], (i as u8 + 1, node_eks[i].clone()))).collect();
    let dealer = DealerService::new(
        Endpoint::new(params.clone(), dealer_key, directory.clone(), sub_seed(seed, "dealer-ep")),
        sub_seed(seed, "dealer"),
        dealer_nodes,
    );
    let mut world = World { bus: DeterministicBus::new(), market, storage, dealer, now_ms: now_s * 1000 };

    let mut nodes: Vec<NodeSlot> = (0..3)
        .map(|i| {
            let index = i as u8 + 1;
            let cfg = NodeConfig {
                index,
                params: params.clone(),
                signing: node_sig[i].clone(),
                encryption: node_enc[i].clone(),
                directory: directory.clone(),
                market_id,
                node_ids,
                user_gpk: user_gpk.clone(),
                device_gpks: device_gpks.clone(),
                phase_timeout_ms: DEFAULT_PHASE_TIMEOUT_MS,
                behavior: behavior(scenario, index),
            };
            NodeSlot {
                node: Node::new(cfg, sub_seed(seed, &format!("node-{index}"))),
                endpoint: Endpoint::new(params.clone(), node_sig[i].clone(), directory.clone(), sub_seed(seed, &format!("node-ep-{index}"))),
                encryption: node_enc[i].clone(),
            }
        })
        .collect();

    // registration and publication
    let mut warnings = BTreeSet::new();
    let mut listing_ids = Vec::with_capacity(scenario.owners.len());
    let mut owners: Vec<Party> = Vec::with_capacity(scenario.owners.len());
    let mut records: Vec<Vec<FieldElement>> = Vec::new();
    for (i, spec) in scenario.owners.iter().enumerate() {
        let mut party = Party {
            endpoint: Endpoint::new(params.clone(), owner_sig[i].clone(), directory.clone(), sub_seed(seed, &format!("owner-{i}"))),
            encryption: owner_enc[i].clone(),
        };
        let identity = format!("owner-{i}");
        let credential = issuer.issue(&identity, "owner")?;
        let member = hash256_parts(&[b"device", identity.as_bytes()]);
        vendor.authorize(member);
        let device_key = vendor.join(member)?;
        let record: Vec<FieldElement> = spec.record.iter().map(|&x| field.from_u64(x)).collect();
        let mut rng = ChaCha20Rng::from_seed(sub_seed(seed, &format!("owner-rng-{i}")));
        let mut captured = device_capture(&params, &device_key, &record, &mut rng);
        if adv.owner_bad_device_signature == Some(i) {
            let s = &mut captured.signatures[0].0;
            s.response = field.add(&s.response, &field.one());
        }
        let mut link = Link { endpoint: &mut party.endpoint, rpc: &mut world, market: market_id, storage: storage_id };
        let (_, member_key) = link.register(&credential, "owner", &party.encryption)?;
        let published = owner_prepare_and_publish(
            &params,
            Some(&member_key),
            &captured,
            &v.policies[i],
            &node_eks,
            &mut link,
            now_s,
            &mut rng,
        )?;
        for w in published.warnings.iter().chain(&privacy_warning(&v.policies[i], &v.function)) {
            warnings.insert(format!("owner[{i}]:{}", w.code()));
        }
        listing_ids.push(published.listing_id);
        owners.push(party);
        records.push(record);
    }

    let mut consumer = Party {
        endpoint: Endpoint::new(params.clone(), consumer_sig, directory.clone(), sub_seed(seed, "consumer")),
        encryption: consumer_enc,
    };
    let consumer_cred = issuer.issue("consumer-0", "consumer")?;
    let mut link = Link { endpoint: &mut consumer.endpoint, rpc: &mut world, market: market_id, storage: storage_id };
    link.register(&consumer_cred, "consumer", &consumer.encryption)?;
    let catalog = link.catalog()?;
    let listings: Vec<_> = listing_ids
        .iter()
        .map(|id| catalog.iter().find(|l| l.listing_id == *id).cloned())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| AppError::UnexpectedReply("published listing missing from the catalog".into()))?;
    let requested = link.request_analysis(consumer.encryption.public(), &v.function, &listing_ids);

    // protocol
    let mut results: Vec<ResultMessage> = Vec::new();
    let mut consumer_aborts: Vec<String> = Vec::new();
    let mut replayed = false;
    let mut bus_rng = ChaCha20Rng::from_seed(sub_seed(seed, "bus"));
    let session_id = match &requested {
        Ok(sid) => Some(*sid),
        Err(AppError::Remote { .. }) => None,
        Err(e) => return Err(e.clone()),
    };
    if session_id.is_some() {
        for _ in 0..MAX_DELIVERIES {
            let Some(d) = world.bus.next(&mut bus_rng) else {
                let deadline = nodes.iter().filter_map(|n| n.node.next_deadline()).min();
                let Some(deadline) = deadline else { break };
                world.now_ms = world.now_ms.max(deadline);
                for n in nodes.iter_mut() {
                    let out = n.node.tick(world.now_ms);
                    let id = n.node.id();
                    world.post_all(id, out);
                }
                continue;
            };
            world.now_ms += 1;
            if let Some(k) = node_ids.iter().position(|id| *id == d.to) {
                let slot = &mut nodes[k];
                let now = world.now_ms;
                let mut services = NodeLink {
                    endpoint: &mut slot.endpoint,
                    encryption: &slot.encryption,
                    rpc: &mut world,
                    storage: storage_id,
                    dealer: dealer_id,
                };
                let out = slot.node.handle(&d.envelope, now, &mut services);
                world.post_all(d.to, out);
                if !replayed && adv.replay_envelope == Some(k as u8 + 1) && d.envelope.msg_type == msg::SESSION_START {
                    world.bus.inject(d.from, d.to, d.envelope.clone());
                    replayed = true;
                }
            } else if d.to == market_id {
                let out = world.market.handle(&d.envelope, world.now_ms / 1000);
                world.post_all(market_id, out);
            } else if d.to == consumer_id {
                let Ok(payload) = consumer.endpoint.open(&d.envelope) else { continue };
                if d.envelope.session_id != session_id {
                    continue;
                }
                match d.envelope.msg_type.as_str() {
                    msg::RESULT => {
                        if let Ok(r) = ResultMessage::from_canonical(&payload, &params) {
                            results.push(r);
                        }
                    }
                    msg::ABORT => consumer_aborts.push(msg::decode_reason(&payload).unwrap_or_default()),
                    _ => {}
                }
            }
        }
    }

    // outcome
    let states: Vec<Option<SessionState>> =
        nodes.iter().map(|n| session_id.and_then(|s| n.node.session(&s).cloned())).collect();
    let all_done = states.iter().all(|s| s.as_ref().is_some_and(|s| s.phase == Phase::Done));
    let root = input_root(&listings);
    let mut stats: Option<Stats> = None;
    let mut output_plaintexts: Vec<Vec<u8>> = Vec::new();
    let (outcome, reason) = match (&requested, all_done) {
        (Err(e), _) => ("ABORTED", Some(e.code())),
        (Ok(sid), true) => {
            let expect = Expectation {
                session_id: *sid,
                function: &v.function,
                input_root: root,
                node_pks: &node_pks,
                cohort: listings.len(),
            };
            match consumer_finalize(&params, &consumer.encryption, &results, &expect) {
                Ok(done) => {
                    output_plaintexts = done.plaintexts;
                    output_plaintexts.push(field_list(&done.values.iter().map(|x| field.reduce(x)).collect::<Vec<_>>()).encode());
                    stats = Some(done.stats);
                    ("DONE", None)
                }
                Err(e) => ("REJECTED", Some(e.to_string())),
            }
        }
        (Ok(_), false) => {
            let reasons: Vec<String> =
                states.iter().flatten().filter_map(|s| s.abort_reason.map(|r| r.code().to_owned())).collect();
            let root_cause = reasons
                .iter()
                .find(|r| r.as_str() != "PeerAbort")
                .or(reasons.first())
                .cloned()
                .unwrap_or_else(|| "Incomplete".into());
            ("ABORTED", Some(root_cause))
        }
    };

    // assertions
    let transcript = world.bus.transcript();
    let mut needles: Vec<Vec<u8>> = Vec::new();
    for (spec, record) in scenario.owners.iter().zip(&records) {
        needles.push(field_list(record).encode());
        needles.push(CanonicalValue::List(spec.record.iter().map(|&x| CanonicalValue::int(x)).collect()).encode());
    }
    for l in &listings {
        for (i, r) in l.storage_refs.iter().enumerate() {
            let Some(raw) = world.storage.store().raw(r) else { continue };
            let Ok(bundle) = ShareBundle::from_canonical_bytes(&raw, &params) else { continue };
            if let Ok(plain) = pke_decrypt(&params, &node_enc[i], &bundle.ciphertext) {
                needles.push(plain);
            }
        }
    }
    needles.extend(output_plaintexts.iter().cloned());
    if let Some(s) = &stats {
        let rendered = render(s);
        let map = rendered.into_iter().map(|(k, v)| (k, CanonicalValue::text(v))).collect();
        needles.push(CanonicalValue::Map(map).encode());
    }
    needles.retain(|n| n.len() >= MIN_NEEDLE_LEN);
    let leaks = |bytes: &[u8]| needles.iter().any(|n| contains(bytes, n));

    let mut assertions = BTreeMap::new();
    assertions.insert(
        "envelopes_only".to_owned(),
        transcript.iter().all(|d| {
            d.envelope.sender_id == d.from && Envelope::from_bytes(&d.envelope.to_bytes(), &params).as_ref() == Ok(&d.envelope)
        }),
    );
    let guards = nodes
        .iter()
        .flat_map(|n| [n.node.replay_guard(), n.endpoint.guard()])
        .chain(owners.iter().map(|o| o.endpoint.guard()))
        .chain([consumer.endpoint.guard(), world.storage.endpoint().guard(), world.dealer.endpoint().guard()]);
    assertions.insert("replay_cache_unique".to_owned(), guards.into_iter().all(guard_unique));
    assertions.insert("phase_monotone".to_owned(), states.iter().flatten().all(phase_monotone));
    let store_ids = world.storage.store().ids()?;
    let broker_blind = !world.market.message_log().iter().any(|m| leaks(m))
        && !leaks(&world.market.persisted_state())
        && !store_ids.iter().any(|id| world.storage.store().raw(id).is_some_and(|b| leaks(&b)));
    assertions.insert("broker_blind".to_owned(), broker_blind);
    let owner_set: BTreeSet<ActorId> = owner_ids.iter().copied().collect();
    assertions.insert(
        "owner_no_plaintext".to_owned(),
        !transcript.iter().filter(|d| owner_set.contains(&d.from)).any(|d| leaks(&d.envelope.to_bytes())),
    );
    let aborted_nodes_silent = states
        .iter()
        .flatten()
        .all(|s| s.phase != Phase::Aborted || s.output_ciphertexts == 0);
    assertions.insert(
        "no_output_after_abort".to_owned(),
        aborted_nodes_silent && (outcome != "ABORTED" || results.is_empty()),
    );
    let terminal_agreement = session_id.is_none()
        || states.iter().all(|s| s.as_ref().is_some_and(|s| s.phase == Phase::Done))
        || states.iter().all(|s| s.as_ref().is_some_and(|s| s.phase == Phase::Aborted));
    assertions.insert("global_termination".to_owned(), terminal_agreement);
    let expected = oracle(
        &scenario.owners.iter().map(|o| o.record.clone()).collect::<Vec<_>>(),
        &v.function,
        &scenario.function.weights,
    );
    assertions.insert("oracle_match".to_owned(), stats.as_ref().is_none_or(|s| *s == expected));
    let ledger = world.market.ledger();
    assertions.insert("ledger_verifies".to_owned(), ledger.verify() && verify_persisted(ledger.persisted_bytes()));
    assertions.insert(
        "attestations_verify".to_owned(),
        results.iter().all(|r| {
            let i = usize::from(r.attestation.node_index);
            (1..=3).contains(&i) && r.attestation.verify_signature(&params, &node_pks[i - 1])
        }),
    );
    let market_status = session_id.and_then(|s| world.market.session_status(&s).cloned());
    let status_agrees = match (outcome, &market_status) {
        (_, None) => session_id.is_none(),
        ("ABORTED", Some(SessionStatus::Aborted(_))) => true,
        ("DONE" | "REJECTED", Some(SessionStatus::Done)) => true,
        _ => false,
    };
    assertions.insert("market_status_agrees".to_owned(), status_agrees);

    let mut chain = Vec::with_capacity(transcript.len() * 96);
    for d in transcript {
        chain.extend_from_slice(&d.from);
        chain.extend_from_slice(&d.to);
        chain.extend_from_slice(&d.envelope.digest());
    }
    let node_reports = states
        .iter()
        .enumerate()
        .map(|(i, s)| NodeReport {
            index: i as u8 + 1,
            phase: s.as_ref().map_or("NONE", |s| s.phase.as_str()).to_owned(),
            abort_reason: s.as_ref().and_then(|s| s.abort_reason.map(|r| r.code().to_owned())),
            output_ciphertexts: s.as_ref().map_or(0, |s| s.output_ciphertexts),
            history: s.as_ref().map_or(vec![], |s| s.history.iter().map(|p| p.as_str().to_owned()).collect()),
        })
        .collect();
    let report = Report {
        seed,
        group_profile: v.profile.as_str().to_owned(),
        function: v.function.function_id.as_str().to_owned(),
        outcome: outcome.to_owned(),
        reason,
        result: stats.as_ref().map(render),
        session_id: session_id.map(hex::encode),
        transcript_digest: hex::encode(hash256(&chain)),
        envelope_count: transcript.len(),
        ledger_head: hex::encode(ledger.head()),
        ledger_entries: ledger.len(),
        nodes: node_reports,
        warnings: warnings.into_iter().collect(),
        assertions,
    };
    Ok(Run { report, stats })
}

#[doc(hidden)]
pub fn digest_hex(d: &Digest) -> String {
    hex::encode(d)
}
