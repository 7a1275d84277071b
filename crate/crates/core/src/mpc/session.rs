//! Per-node session state machine.
//!
//! A [`Node`] owns its keys and replay cache and runs one [`SessionState`]
//! per session id. It is fed envelopes through [`Node::handle`] and the
//! passage of time through [`Node::tick`]; both return the envelopes to send.
//! Storage and the triple dealer are reached synchronously through
//! [`NodeServices`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::hash::{hash256, Digest};
use crate::crypto::{attest, pke_decrypt, pke_encrypt, EncKeyPair, SigKeyPair};
use crate::market::listing::ShareBundle;
use crate::math::{FieldElement, GroupElement, GroupParams};
use crate::policy::{FunctionDescriptor, FunctionId};
use crate::sharing::{commit, partial_commitments, SharePayload, TripleShare, NODE_COUNT};
use crate::wire::canonical::{Canonical, CanonicalValue, FromCanonical};
use crate::wire::envelope::{open, seal, ActorId, Envelope, KeyDirectory, ReplayGuard};
use crate::wire::WireError;

use super::eval::{eval_outputs, masked_shares, mult_gate, open as open_gate, OpenedValue};
use super::messages::{self as msg, OpenStage, OutputShares, ResultMessage, SessionStart};
use super::plan::{plan, EvalPlan};
use super::verify::{check_commitments, input_root, verify_device_signatures, verify_policy};
use super::AbortReason;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Init,
    Fetch,
    PolicyCheck,
    Decrypt,
    AuthVerify,
    Eval,
    Output,
    Attest,
    Done,
    Aborted,
}

impl Phase {
    pub const ORDER: [Phase; 9] = [
        Phase::Init,
        Phase::Fetch,
        Phase::PolicyCheck,
        Phase::Decrypt,
        Phase::AuthVerify,
        Phase::Eval,
        Phase::Output,
        Phase::Attest,
        Phase::Done,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Init => "INIT",
            Phase::Fetch => "FETCH",
            Phase::PolicyCheck => "POLICY_CHECK",
            Phase::Decrypt => "DECRYPT",
            Phase::AuthVerify => "AUTH_VERIFY",
            Phase::Eval => "EVAL",
            Phase::Output => "OUTPUT",
            Phase::Attest => "ATTEST",
            Phase::Done => "DONE",
            Phase::Aborted => "ABORTED",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Phase::Done | Phase::Aborted)
    }
}

/// Observable state of one session at one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    pub session_id: Digest,
    pub phase: Phase,
    /// The function this node evaluates.
    pub function: Option<FunctionDescriptor>,
    pub listing_refs: Vec<Digest>,
    pub input_root: Option<Digest>,
    pub abort_reason: Option<AbortReason>,
    /// Every phase entered, in order, starting with `Init`.
    pub history: Vec<Phase>,
    pub output_ciphertexts: usize,
}

/// Deviations a corrupted node can be configured with.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeBehavior {
    /// Adds one to the first decrypted data share.
    pub tamper_share: bool,
    /// Evaluates a different function than requested.
    pub wrong_function: bool,
    pub skip_policy_check: bool,
    /// Sends a different opening contribution to each peer.
    pub inconsistent_opening: bool,
    /// Encrypts altered output shares under honest commitments.
    pub corrupt_output: bool,
}

impl NodeBehavior {
    pub fn is_honest(&self) -> bool {
        *self == NodeBehavior::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("service call failed: {0}")]
pub struct ServiceError(pub String);

impl From<WireError> for ServiceError {
    fn from(e: WireError) -> Self {
        ServiceError(e.to_string())
    }
}

/// Synchronous access to storage and the triple dealer.
pub trait NodeServices {
    fn fetch_blob(&mut self, id: &Digest) -> Result<Vec<u8>, ServiceError>;
    fn fetch_triples(&mut self, session_id: &Digest, count: usize) -> Result<Vec<TripleShare>, ServiceError>;
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    /// 1, 2 or 3.
    pub index: u8,
    pub params: GroupParams,
    pub signing: SigKeyPair,
    pub encryption: EncKeyPair,
    pub directory: KeyDirectory,
    pub market_id: ActorId,
    pub node_ids: [ActorId; NODE_COUNT],
    pub user_gpk: GroupElement,
    pub device_gpks: BTreeMap<String, GroupElement>,
    pub phase_timeout_ms: u64,
    pub behavior: NodeBehavior,
}

#[derive(Debug, Clone)]
pub struct Outgoing {
    pub to: ActorId,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sender {
    Market,
    Node(usize),
    Other,
}

type Pairs = Vec<(FieldElement, FieldElement)>;

#[derive(Debug)]
struct Session {
    state: SessionState,
    deadline: u64,
    start: Option<SessionStart>,
    view: [Option<Digest>; NODE_COUNT],
    partials: [Option<Vec<Vec<GroupElement>>>; NODE_COUNT],
    open_shares: [Option<Pairs>; NODE_COUNT],
    echoes: [Option<Pairs>; NODE_COUNT],
    ready: [bool; NODE_COUNT],
    bundles: Vec<ShareBundle>,
    payloads: Vec<SharePayload>,
    plan: Option<EvalPlan>,
    triples: Vec<TripleShare>,
    opened: Option<Vec<OpenedValue>>,
    outputs: Option<Vec<FieldElement>>,
    result: Option<ResultMessage>,
}

struct Ctx<'a> {
    cfg: &'a NodeConfig,
    rng: &'a mut ChaCha20Rng,
    out: &'a mut Vec<Outgoing>,
    now_ms: u64,
}

impl Ctx<'_> {
    fn me(&self) -> usize {
        usize::from(self.cfg.index) - 1
    }

    fn send(&mut self, to: ActorId, msg_type: &str, sid: Digest, payload: CanonicalValue) {
        let envelope = seal(&self.cfg.params, &self.cfg.signing, msg_type, Some(sid), payload, self.rng);
        self.out.push(Outgoing { to, envelope });
    }

    fn peers(&self) -> Vec<(usize, ActorId)> {
        let me = self.me();
        self.cfg.node_ids.iter().copied().enumerate().filter(|(i, _)| *i != me).collect()
    }

    fn broadcast(&mut self, msg_type: &str, sid: Digest, payload: CanonicalValue) {
        for (_, id) in self.peers() {
            self.send(id, msg_type, sid, payload.clone());
        }
    }
}

/// The function a `wrong_function` node evaluates instead of `f`.
fn substitute(f: &FunctionDescriptor) -> FunctionDescriptor {
    let id = if f.function_id == FunctionId::Sum { FunctionId::MeanMoments } else { FunctionId::Sum };
    FunctionDescriptor::new(id, f.element_selector.clone(), vec![]).expect("selector already validated")
}

fn store<T>(slot: &mut Option<T>, value: T) -> Result<(), AbortReason> {
    if slot.is_some() {
        return Err(AbortReason::ProtocolViolation);
    }
    *slot = Some(value);
    Ok(())
}

impl Session {
    fn new(session_id: Digest, deadline: u64) -> Self {
        Session {
            state: SessionState {
                session_id,
                phase: Phase::Init,
                function: None,
                listing_refs: vec![],
                input_root: None,
                abort_reason: None,
                history: vec![Phase::Init],
                output_ciphertexts: 0,
            },
            deadline,
            start: None,
            view: Default::default(),
            partials: Default::default(),
            open_shares: Default::default(),
            echoes: Default::default(),
            ready: [false; NODE_COUNT],
            bundles: vec![],
            payloads: vec![],
            plan: None,
            triples: vec![],
            opened: None,
            outputs: None,
            result: None,
        }
    }

    fn sid(&self) -> Digest {
        self.state.session_id
    }

    fn enter(&mut self, next: Phase, ctx: &Ctx<'_>) {
        debug_assert!(!self.state.phase.is_terminal() && next > self.state.phase);
        self.state.phase = next;
        self.state.history.push(next);
        self.deadline = ctx.now_ms.saturating_add(ctx.cfg.phase_timeout_ms);
    }

    fn abort(&mut self, ctx: &mut Ctx<'_>, reason: AbortReason) {
        if self.state.phase.is_terminal() {
            return;
        }
        self.state.phase = Phase::Aborted;
        self.state.history.push(Phase::Aborted);
        self.state.abort_reason = Some(reason);
        let sid = self.sid();
        let payload = msg::encode_reason(reason.code());
        ctx.broadcast(msg::ABORT, sid, payload.clone());
        if let Some(start) = &self.start {
            ctx.send(start.consumer_id, msg::ABORT, sid, payload.clone());
        }
        ctx.send(ctx.cfg.market_id, msg::ABORT, sid, payload);
    }

    fn on_message(
        &mut self,
        ctx: &Ctx<'_>,
        sender: Sender,
        msg_type: &str,
        payload: &CanonicalValue,
    ) -> Result<(), AbortReason> {
        let params = &ctx.cfg.params;
        let malformed = |_| AbortReason::MalformedInput;
        match (msg_type, sender) {
            (msg::SESSION_START, Sender::Market) => {
                let start = SessionStart::from_canonical(payload, params).map_err(malformed)?;
                if start.session_id != self.sid() {
                    return Err(AbortReason::ProtocolViolation);
                }
                store(&mut self.start, start)
            }
            (msg::ABORT, Sender::Node(_) | Sender::Market) => Err(AbortReason::PeerAbort),
            (msg::SHARE_FETCHED, Sender::Node(j)) => {
                store(&mut self.view[j], msg::decode_view(payload).map_err(malformed)?)
            }
            (msg::PARTIAL_COMMITMENT, Sender::Node(j)) => {
                store(&mut self.partials[j], msg::decode_partials(payload, params).map_err(malformed)?)
            }
            (msg::BEAVER_OPEN, Sender::Node(j)) => {
                let (stage, pairs) = msg::decode_pairs(payload, params).map_err(malformed)?;
                match stage {
                    OpenStage::Share => store(&mut self.open_shares[j], pairs),
                    OpenStage::Echo => store(&mut self.echoes[j], pairs),
                }
            }
            (msg::OUTPUT_READY, Sender::Node(j)) => {
                if std::mem::replace(&mut self.ready[j], true) {
                    return Err(AbortReason::ProtocolViolation);
                }
                Ok(())
            }
            _ => Err(AbortReason::ProtocolViolation),
        }
    }

    fn advance(&mut self, ctx: &mut Ctx<'_>, services: &mut dyn NodeServices) -> Result<(), AbortReason> {
        loop {
            match self.state.phase {
                Phase::Init => {
                    if self.start.is_none() {
                        return Ok(());
                    }
                    self.enter(Phase::Fetch, ctx);
                    self.fetch(ctx, services)?;
                }
                Phase::Fetch => {
                    let Some(views) = all(&self.view) else { return Ok(()) };
                    if views.iter().any(|v| *v != views[ctx.me()]) {
                        return Err(AbortReason::FunctionMismatch);
                    }
                    self.enter(Phase::PolicyCheck, ctx);
                    self.policy_check(ctx)?;
                    self.enter(Phase::Decrypt, ctx);
                    self.decrypt(ctx)?;
                    self.enter(Phase::AuthVerify, ctx);
                    self.send_partials(ctx)?;
                }
                Phase::AuthVerify => {
                    let Some(partials) = all(&self.partials) else { return Ok(()) };
                    for (k, bundle) in self.bundles.iter().enumerate() {
                        let views = partials
                            .iter()
                            .map(|p| p.get(k).map(Vec::as_slice).ok_or(AbortReason::MalformedInput))
                            .collect::<Result<Vec<_>, _>>()?;
                        check_commitments(&ctx.cfg.params, &[views[0], views[1], views[2]], &bundle.commitment_vector)?;
                    }
                    if partials.iter().any(|p| p.len() != self.bundles.len()) {
                        return Err(AbortReason::MalformedInput);
                    }
                    self.enter(Phase::Eval, ctx);
                    self.start_eval(ctx, services)?;
                }
                Phase::Eval => {
                    if !self.eval_step(ctx)? {
                        return Ok(());
                    }
                    self.enter(Phase::Output, ctx);
                    let (result, commitments) = self.encrypt_output(ctx);
                    self.enter(Phase::Attest, ctx);
                    self.attest_and_deliver(ctx, result, commitments);
                    self.enter(Phase::Done, ctx);
                }
                Phase::PolicyCheck | Phase::Decrypt | Phase::Output | Phase::Attest => {
                    unreachable!("local phases complete within one step")
                }
                Phase::Done | Phase::Aborted => return Ok(()),
            }
        }
    }

    fn start(&self) -> &SessionStart {
        self.start.as_ref().expect("started")
    }

    fn function(&self) -> &FunctionDescriptor {
        self.state.function.as_ref().expect("set at fetch")
    }

    fn fetch(&mut self, ctx: &mut Ctx<'_>, services: &mut dyn NodeServices) -> Result<(), AbortReason> {
        let cfg = ctx.cfg;
        let start = self.start();
        let f = if cfg.behavior.wrong_function { substitute(&start.function) } else { start.function.clone() };
        let root = input_root(&start.listings);
        let listing_refs = start.listings.iter().map(|l| l.listing_id).collect();
        let view = hash256(
            &CanonicalValue::List(vec![
                CanonicalValue::bytes(self.sid().to_vec()),
                f.to_canonical(),
                CanonicalValue::bytes(root.to_vec()),
                (&start.consumer_ek).into(),
                CanonicalValue::bytes(start.consumer_id.to_vec()),
            ])
            .encode(),
        );
        let mut bundles = Vec::with_capacity(start.listings.len());
        for l in &start.listings {
            let id = l.storage_refs[ctx.me()];
            let bytes = services.fetch_blob(&id).map_err(|_| AbortReason::FetchFailure)?;
            if hash256(&bytes) != id {
                return Err(AbortReason::FetchFailure);
            }
            let bundle =
                ShareBundle::from_canonical_bytes(&bytes, &cfg.params).map_err(|_| AbortReason::FetchFailure)?;
            if bundle.node_index != cfg.index {
                return Err(AbortReason::FetchFailure);
            }
            bundles.push(bundle);
        }
        self.bundles = bundles;
        self.state.function = Some(f);
        self.state.listing_refs = listing_refs;
        self.state.input_root = Some(root);
        self.view[ctx.me()] = Some(view);
        ctx.broadcast(msg::SHARE_FETCHED, self.sid(), msg::encode_view(&view));
        Ok(())
    }

    fn policy_check(&self, ctx: &Ctx<'_>) -> Result<(), AbortReason> {
        if ctx.cfg.behavior.skip_policy_check {
            return Ok(());
        }
        let listings = &self.start().listings;
        let now = ctx.now_ms / 1000;
        listings
            .iter()
            .try_for_each(|l| verify_policy(&ctx.cfg.params, l, &ctx.cfg.user_gpk, self.function(), listings.len(), now))
    }

    fn decrypt(&mut self, ctx: &Ctx<'_>) -> Result<(), AbortReason> {
        let params = &ctx.cfg.params;
        let mut payloads = Vec::with_capacity(self.bundles.len());
        for b in &self.bundles {
            let pt = pke_decrypt(params, &ctx.cfg.encryption, &b.ciphertext).map_err(|_| AbortReason::DecryptFailure)?;
            let p = SharePayload::from_canonical_bytes(&pt, params).map_err(|_| AbortReason::DecryptFailure)?;
            if p.data.len() != b.commitment_vector.0.len() {
                return Err(AbortReason::MalformedInput);
            }
            payloads.push(p);
        }
        if ctx.cfg.behavior.tamper_share {
            if let Some(x) = payloads.first_mut().and_then(|p| p.data.first_mut()) {
                *x = params.scalars().add(x, &params.scalars().one());
            }
        }
        self.payloads = payloads;
        Ok(())
    }

    fn send_partials(&mut self, ctx: &mut Ctx<'_>) -> Result<(), AbortReason> {
        let params = &ctx.cfg.params;
        let listings = &self.start().listings;
        for (l, b) in listings.iter().zip(&self.bundles) {
            verify_device_signatures(params, l, &ctx.cfg.device_gpks, &b.commitment_vector, &b.device_signatures)?;
        }
        let len = self.payloads.first().map(|p| p.data.len()).unwrap_or(0);
        if self.payloads.iter().any(|p| p.data.len() != len) {
            return Err(AbortReason::MalformedInput);
        }
        let partials = self
            .payloads
            .iter()
            .map(|p| partial_commitments(params, &p.data, &p.blinding))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| AbortReason::MalformedInput)?;
        ctx.broadcast(msg::PARTIAL_COMMITMENT, self.sid(), msg::encode_partials(&partials));
        self.partials[ctx.me()] = Some(partials);
        Ok(())
    }

    fn inputs(&self) -> Vec<Vec<FieldElement>> {
        self.payloads.iter().map(|p| p.data.clone()).collect()
    }

    fn start_eval(&mut self, ctx: &mut Ctx<'_>, services: &mut dyn NodeServices) -> Result<(), AbortReason> {
        let field = ctx.cfg.params.scalars();
        let record_len = self.payloads.first().map_or(0, |p| p.data.len());
        let p = plan(field, self.function(), self.payloads.len(), record_len).map_err(|_| AbortReason::MalformedInput)?;
        let gates = p.triple_count();
        if gates > 0 {
            let triples = services.fetch_triples(&self.sid(), gates).map_err(|_| AbortReason::FetchFailure)?;
            if triples.len() != gates {
                return Err(AbortReason::FetchFailure);
            }
            self.triples = triples;
            let inputs = self.inputs();
            let mine = p
                .mult_gates
                .iter()
                .map(|g| masked_shares(field, &inputs, g, &self.triples))
                .collect::<Result<Pairs, _>>()
                .map_err(|_| AbortReason::MalformedInput)?;
            let sid = self.sid();
            for (n, (_, id)) in ctx.peers().into_iter().enumerate() {
                let mut sent = mine.clone();
                if ctx.cfg.behavior.inconsistent_opening && n == 1 {
                    sent[0].1 = field.add(&sent[0].1, &field.one());
                }
                ctx.send(id, msg::BEAVER_OPEN, sid, msg::encode_pairs(OpenStage::Share, &sent));
            }
            self.open_shares[ctx.me()] = Some(mine);
        }
        self.plan = Some(p);
        Ok(())
    }

    /// Progresses evaluation as far as received messages allow. True once
    /// every node has announced its output as ready.
    fn eval_step(&mut self, ctx: &mut Ctx<'_>) -> Result<bool, AbortReason> {
        let field = ctx.cfg.params.scalars();
        let me = ctx.me();
        let p = self.plan.as_ref().expect("planned");
        let gates = p.triple_count();
        if gates > 0 && self.opened.is_none() {
            let Some(shares) = all(&self.open_shares) else { return Ok(false) };
            if shares.iter().any(|s| s.len() != gates) {
                return Err(AbortReason::MalformedInput);
            }
            let opened: Vec<OpenedValue> = (0..gates)
                .map(|g| open_gate(field, g, &shares.iter().map(|s| s[g].clone()).collect::<Vec<_>>()))
                .collect();
            let echo: Pairs = opened.iter().map(|o| (o.d.clone(), o.e.clone())).collect();
            ctx.broadcast(msg::BEAVER_OPEN, self.sid(), msg::encode_pairs(OpenStage::Echo, &echo));
            self.echoes[me] = Some(echo);
            self.opened = Some(opened);
        }
        if self.outputs.is_none() {
            let mut gate_outputs = Vec::with_capacity(gates);
            if gates > 0 {
                let Some(echoes) = all(&self.echoes) else { return Ok(false) };
                if echoes.iter().any(|e| e.len() != gates) {
                    return Err(AbortReason::ConsistencyAbort);
                }
                for g in 0..gates {
                    let views: Vec<OpenedValue> = echoes
                        .iter()
                        .map(|e| OpenedValue { gate: g, d: e[g].0.clone(), e: e[g].1.clone() })
                        .collect();
                    let refs: Vec<&OpenedValue> = views.iter().collect();
                    let z = mult_gate(field, &self.triples[p.mult_gates[g].triple], &refs, ctx.cfg.index)
                        .map_err(|_| AbortReason::ConsistencyAbort)?;
                    gate_outputs.push(z);
                }
            }
            let outputs = eval_outputs(field, p, &self.inputs(), &gate_outputs, ctx.cfg.index)
                .map_err(|_| AbortReason::MalformedInput)?;
            self.outputs = Some(outputs);
            self.ready[me] = true;
            ctx.broadcast(msg::OUTPUT_READY, self.sid(), CanonicalValue::Map(Default::default()));
        }
        Ok(self.ready.iter().all(|r| *r))
    }

    fn encrypt_output(&mut self, ctx: &mut Ctx<'_>) -> (crate::crypto::HybridCiphertext, Vec<GroupElement>) {
        let params = &ctx.cfg.params;
        let field = params.scalars();
        let p = self.plan.as_ref().expect("planned");
        let values = self.outputs.clone().expect("evaluated");
        let blinding: Vec<FieldElement> = values.iter().map(|_| field.random(ctx.rng)).collect();
        let commitments = values.iter().zip(&blinding).map(|(v, r)| commit(params, v, r)).collect();
        let mut sent = values;
        if ctx.cfg.behavior.corrupt_output {
            sent[0] = field.add(&sent[0], &field.one());
        }
        let shares = OutputShares { node_index: ctx.cfg.index, labels: p.outputs.clone(), values: sent, blinding };
        let ct = pke_encrypt(params, &self.start().consumer_ek, &shares.canonical_bytes(), ctx.rng);
        self.state.output_ciphertexts += 1;
        (ct, commitments)
    }

    fn attest_and_deliver(
        &mut self,
        ctx: &mut Ctx<'_>,
        ciphertext: crate::crypto::HybridCiphertext,
        commitments: Vec<GroupElement>,
    ) {
        let cfg = ctx.cfg;
        let attestation = attest(
            &cfg.params,
            &cfg.signing,
            cfg.index,
            self.sid(),
            self.function().digest(),
            self.state.input_root.expect("set at fetch"),
            commitments,
            ctx.rng,
        );
        let result = ResultMessage { attestation, ciphertext };
        let sid = self.sid();
        let consumer = self.start().consumer_id;
        ctx.send(consumer, msg::RESULT, sid, result.to_canonical());
        ctx.send(cfg.market_id, msg::SESSION_STATUS, sid, msg::encode_status(true, None));
        self.result = Some(result);
    }
}

fn all<T: Clone>(slots: &[Option<T>; NODE_COUNT]) -> Option<Vec<T>> {
    slots.iter().cloned().collect()
}

/// One computation node.
#[derive(Debug)]
pub struct Node {
    cfg: NodeConfig,
    guard: ReplayGuard,
    rng: ChaCha20Rng,
    sessions: BTreeMap<Digest, Session>,
    finished: Vec<Digest>,
}

impl Node {
    pub fn new(cfg: NodeConfig, seed: [u8; 32]) -> Self {
        assert!((1..=NODE_COUNT as u8).contains(&cfg.index), "node index must be 1, 2 or 3");
        Node { cfg, guard: ReplayGuard::new(), rng: ChaCha20Rng::from_seed(seed), sessions: BTreeMap::new(), finished: vec![] }
    }

    pub fn index(&self) -> u8 {
        self.cfg.index
    }

    pub fn id(&self) -> ActorId {
        self.cfg.node_ids[usize::from(self.cfg.index) - 1]
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn replay_guard(&self) -> &ReplayGuard {
        &self.guard
    }

    pub fn session(&self, id: &Digest) -> Option<&SessionState> {
        self.sessions.get(id).map(|s| &s.state)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionState> {
        self.sessions.values().map(|s| &s.state)
    }

    pub fn result(&self, id: &Digest) -> Option<&ResultMessage> {
        self.sessions.get(id).and_then(|s| s.result.as_ref())
    }

    /// Sessions that reached a terminal phase since the last call.
    pub fn take_finished(&mut self) -> Vec<Digest> {
        std::mem::take(&mut self.finished)
    }

    /// Earliest deadline among live sessions.
    pub fn next_deadline(&self) -> Option<u64> {
        self.sessions.values().filter(|s| !s.state.phase.is_terminal()).map(|s| s.deadline).min()
    }

    fn classify(&self, sender: &ActorId) -> Sender {
        if *sender == self.cfg.market_id {
            return Sender::Market;
        }
        match self.cfg.node_ids.iter().position(|id| id == sender) {
            Some(j) if j + 1 != usize::from(self.cfg.index) => Sender::Node(j),
            _ => Sender::Other,
        }
    }

    pub fn handle(&mut self, envelope: &Envelope, now_ms: u64, services: &mut dyn NodeServices) -> Vec<Outgoing> {
        let mut out = Vec::new();
        let Some(sid) = envelope.session_id else { return out };
        let opened = open(&self.cfg.params, &self.cfg.directory, &mut self.guard, envelope);
        let sender = self.classify(&envelope.sender_id);
        let timeout = self.cfg.phase_timeout_ms;
        let mut ctx = Ctx { cfg: &self.cfg, rng: &mut self.rng, out: &mut out, now_ms };
        let payload = match opened {
            Ok(p) => p,
            Err(WireError::UnknownSender) => return out,
            Err(_) => {
                if let Some(s) = self.sessions.get_mut(&sid) {
                    s.abort(&mut ctx, AbortReason::ChannelViolation);
                    if s.state.phase.is_terminal() {
                        self.finished.push(sid);
                    }
                }
                return out;
            }
        };
        let session = self.sessions.entry(sid).or_insert_with(|| Session::new(sid, now_ms.saturating_add(timeout)));
        if session.state.phase.is_terminal() {
            return out;
        }
        let r = session
            .on_message(&ctx, sender, &envelope.msg_type, &payload)
            .and_then(|()| session.advance(&mut ctx, services));
        if let Err(reason) = r {
            session.abort(&mut ctx, reason);
        }
        if session.state.phase.is_terminal() {
            self.finished.push(sid);
        }
        out
    }

    /// Aborts every live session whose phase deadline has passed.
    pub fn tick(&mut self, now_ms: u64) -> Vec<Outgoing> {
        let mut out = Vec::new();
        let mut ctx = Ctx { cfg: &self.cfg, rng: &mut self.rng, out: &mut out, now_ms };
        for (sid, s) in self.sessions.iter_mut() {
            if !s.state.phase.is_terminal() && now_ms >= s.deadline {
                s.abort(&mut ctx, AbortReason::Timeout);
                self.finished.push(*sid);
            }
        }
        out
    }
}
