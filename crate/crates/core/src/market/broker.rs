//! The marketplace broker: registration, catalog, session initiation and
//! session bookkeeping. It only ever handles ciphertexts, commitments,
//! signatures and policies; it never sees data or results.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::hash::{hash256_parts, Digest};
use crate::crypto::{
    gs_setup, gs_verify, pke_encrypt, Credential, GroupManager, MemberKey, SigKeyPair, TrustedIssuers,
};
use crate::math::{GroupElement, GroupParams};
use crate::mpc::messages::{self as msg, SessionStart};
use crate::mpc::session::Outgoing;
use crate::mpc::AbortReason;
use crate::policy::{eligible, FunctionDescriptor, PolicyViolation, Timestamp};
use crate::sharing::NODE_COUNT;
use crate::wire::canonical::{Canonical, CanonicalError, CanonicalValue, FromCanonical, Record, RecordReader};
use crate::wire::envelope::{open, seal, ActorId, Envelope, KeyDirectory, ReplayGuard};

use super::ledger::{Ledger, LedgerError, LedgerRecord};
use super::listing::Listing;

pub const REGISTER: &str = "REGISTER";
pub const PUBLISH: &str = "PUBLISH";
pub const QUERY_CATALOG: &str = "QUERY_CATALOG";
pub const REQUEST_ANALYSIS: &str = "REQUEST_ANALYSIS";
pub const SESSION_STATUS: &str = msg::SESSION_STATUS;
/// Suffix of a successful reply's message type.
pub const OK_SUFFIX: &str = "_OK";
pub const ERROR: &str = "ERROR";

/// Group id of the user policy-signing group.
pub const USER_GROUP_ID: &str = "kraken-users";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MarketError {
    #[error("not authorized")]
    NotAuthorized,
    #[error("pseudonym already registered")]
    AlreadyRegistered,
    #[error("not found")]
    NotFound,
    #[error("listing carries a field outside the schema: {0}")]
    MinimizationError(String),
    #[error("policy violation: {0}")]
    PolicyViolation(PolicyViolation),
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl MarketError {
    pub fn code(&self) -> &'static str {
        match self {
            MarketError::NotAuthorized => "NotAuthorized",
            MarketError::AlreadyRegistered => "AlreadyRegistered",
            MarketError::NotFound => "NotFound",
            MarketError::MinimizationError(_) => "MinimizationError",
            MarketError::PolicyViolation(v) => v.as_str(),
            MarketError::Malformed(_) => "Malformed",
            MarketError::Ledger(_) => "LedgerError",
            MarketError::Io(_) => "IoError",
        }
    }
}

impl From<CanonicalError> for MarketError {
    fn from(e: CanonicalError) -> Self {
        match e {
            CanonicalError::UnexpectedField(f) => MarketError::MinimizationError(f),
            other => MarketError::Malformed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for MarketError {
    fn from(e: std::io::Error) -> Self {
        MarketError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionStatus {
    Running,
    Done,
    Aborted(String),
}

#[derive(Debug, Clone)]
struct SessionRecord {
    done: [bool; NODE_COUNT],
    status: SessionStatus,
}

#[derive(Debug, Clone)]
pub struct MarketConfig {
    pub params: GroupParams,
    pub signing: SigKeyPair,
    pub issuers: TrustedIssuers,
    pub directory: KeyDirectory,
    pub node_ids: [ActorId; NODE_COUNT],
    /// Seed for the user group key and envelope nonces.
    pub seed: [u8; 32],
    /// Advisory eligibility check before starting a session.
    pub precheck: bool,
}

#[derive(Debug)]
pub struct Marketplace {
    cfg: MarketConfig,
    id: ActorId,
    rng: ChaCha20Rng,
    guard: ReplayGuard,
    users: GroupManager,
    pseudonyms: BTreeMap<Digest, String>,
    actors: BTreeMap<ActorId, Digest>,
    catalog: BTreeMap<Digest, Listing>,
    catalog_file: Option<PathBuf>,
    catalog_bytes: Vec<u8>,
    ledger: Ledger,
    sessions: BTreeMap<Digest, SessionRecord>,
    message_log: Vec<Vec<u8>>,
}

/// Canonical form of a delivered member key.
pub fn member_key_to_canonical(key: &MemberKey) -> CanonicalValue {
    Record::new().with("group_id", key.group_id.as_str()).with("secret", key.secret()).build()
}

pub fn member_key_from_canonical(v: &CanonicalValue, params: &GroupParams) -> Result<MemberKey, CanonicalError> {
    let mut r = RecordReader::new(v)?;
    let group_id = r.field("group_id")?.as_text()?.to_owned();
    let secret = r.field("secret")?.as_field(params.scalars())?;
    r.finish()?;
    Ok(MemberKey::from_secret(params, group_id, secret))
}

impl Marketplace {
    pub fn in_memory(cfg: MarketConfig) -> Self {
        Self::build(cfg, Ledger::in_memory(), None, Vec::new())
    }

    /// Persistent state under `data_dir`: `ledger.log` and `catalog.log`.
    pub fn open(cfg: MarketConfig, data_dir: &Path) -> Result<Self, MarketError> {
        let ledger = Ledger::open(data_dir)?;
        let path = data_dir.join("catalog.log");
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let mut m = Self::build(cfg, ledger, Some(path), Vec::new());
        for line in bytes.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
            let listing = Listing::from_canonical_bytes(line, &m.cfg.params)?;
            m.catalog.insert(listing.listing_id, listing);
        }
        m.catalog_bytes = bytes;
        // registrations are replayed from the ledger
        for e in m.ledger.entries().to_vec() {
            if let LedgerRecord::UserRegistered { pseudonym, role } = e.record {
                m.users.authorize(pseudonym);
                m.pseudonyms.insert(pseudonym, role);
            }
        }
        Ok(m)
    }

    fn build(cfg: MarketConfig, ledger: Ledger, catalog_file: Option<PathBuf>, catalog_bytes: Vec<u8>) -> Self {
        let mut rng = ChaCha20Rng::from_seed(cfg.seed);
        let users = gs_setup(&cfg.params, USER_GROUP_ID, &mut rng);
        let id = crate::wire::actor_id(&cfg.params, cfg.signing.public());
        Marketplace {
            cfg,
            id,
            rng,
            guard: ReplayGuard::new(),
            users,
            pseudonyms: BTreeMap::new(),
            actors: BTreeMap::new(),
            catalog: BTreeMap::new(),
            catalog_file,
            catalog_bytes,
            ledger,
            sessions: BTreeMap::new(),
            message_log: Vec::new(),
        }
    }

    pub fn id(&self) -> ActorId {
        self.id
    }

    pub fn user_gpk(&self) -> &GroupElement {
        self.users.gpk()
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn catalog(&self) -> impl Iterator<Item = &Listing> {
        self.catalog.values()
    }

    pub fn listing(&self, id: &Digest) -> Option<&Listing> {
        self.catalog.get(id)
    }

    pub fn session_status(&self, id: &Digest) -> Option<&SessionStatus> {
        self.sessions.get(id).map(|s| &s.status)
    }

    /// Every envelope the marketplace received or sent, as canonical bytes.
    pub fn message_log(&self) -> &[Vec<u8>] {
        &self.message_log
    }

    /// Everything the marketplace keeps on disk.
    pub fn persisted_state(&self) -> Vec<u8> {
        let mut all = self.ledger.persisted_bytes().to_vec();
        all.extend_from_slice(&self.catalog_bytes);
        all
    }

    pub fn register_user(
        &mut self,
        actor: ActorId,
        credential: &Credential,
        role: &str,
        now: Timestamp,
    ) -> Result<MemberKey, MarketError> {
        if !self.cfg.issuers.verify_any(&self.cfg.params, credential) || credential.role() != Some(role) {
            return Err(MarketError::NotAuthorized);
        }
        if self.pseudonyms.contains_key(&credential.pseudonym) {
            return Err(MarketError::AlreadyRegistered);
        }
        self.users.authorize(credential.pseudonym);
        let key = self.users.join(credential.pseudonym).map_err(|_| MarketError::NotAuthorized)?;
        self.ledger.append(
            LedgerRecord::UserRegistered { pseudonym: credential.pseudonym, role: role.to_owned() },
            now,
        )?;
        self.pseudonyms.insert(credential.pseudonym, role.to_owned());
        self.actors.insert(actor, credential.pseudonym);
        Ok(key)
    }

    /// Accepts a listing in canonical form. Unknown fields are refused.
    pub fn publish_listing(&mut self, value: &CanonicalValue, now: Timestamp) -> Result<Digest, MarketError> {
        let listing = Listing::from_canonical(value, &self.cfg.params)?;
        if !gs_verify(&self.cfg.params, self.users.gpk(), &listing.policy_message(), &listing.policy_signature) {
            return Err(MarketError::NotAuthorized);
        }
        let id = listing.listing_id;
        if self.catalog.contains_key(&id) {
            return Ok(id);
        }
        let mut line = listing.canonical_bytes();
        line.push(b'\n');
        if let Some(path) = &self.catalog_file {
            OpenOptions::new().create(true).append(true).open(path)?.write_all(&line)?;
        }
        self.catalog_bytes.extend_from_slice(&line);
        self.ledger.append(LedgerRecord::ListingPublished { listing_id: id }, now)?;
        self.catalog.insert(id, listing);
        Ok(id)
    }

    /// Starts a session and returns its id with the three `SESSION_START`
    /// envelopes.
    pub fn request_analysis(
        &mut self,
        consumer: ActorId,
        consumer_ek: GroupElement,
        f: FunctionDescriptor,
        listing_ids: &[Digest],
        now: Timestamp,
    ) -> Result<(Digest, Vec<Outgoing>), MarketError> {
        let pseudonym = self.actors.get(&consumer).ok_or(MarketError::NotAuthorized)?;
        if self.pseudonyms.get(pseudonym).map(String::as_str) != Some("consumer") {
            return Err(MarketError::NotAuthorized);
        }
        if listing_ids.is_empty() {
            return Err(MarketError::Malformed("no listings requested".into()));
        }
        let mut listings = Vec::with_capacity(listing_ids.len());
        for id in listing_ids {
            listings.push(self.catalog.get(id).ok_or(MarketError::NotFound)?.clone());
        }
        if listings.iter().map(|l| l.listing_id).collect::<std::collections::BTreeSet<_>>().len() != listings.len() {
            return Err(MarketError::Malformed("duplicate listing".into()));
        }
        if self.cfg.precheck {
            for l in &listings {
                eligible(&l.policy, &f, listings.len() as u64, now).map_err(MarketError::PolicyViolation)?;
            }
        }
        let counter = (self.sessions.len() as u64).to_be_bytes();
        let ids: Vec<u8> = listing_ids.concat();
        let session_id = hash256_parts(&[b"session", &counter, pseudonym, &f.digest(), &ids]);
        self.ledger.append(
            LedgerRecord::SessionRequested { session_id, function_id: f.digest(), listing_ids: listing_ids.to_vec() },
            now,
        )?;
        self.sessions.insert(session_id, SessionRecord { done: [false; NODE_COUNT], status: SessionStatus::Running });
        let start = SessionStart {
            session_id,
            function: f,
            listings,
            consumer_id: consumer,
            consumer_ek,
            requested_at: now,
        };
        let payload = start.to_canonical();
        let out = self
            .cfg
            .node_ids
            .iter()
            .map(|&to| Outgoing {
                to,
                envelope: seal(&self.cfg.params, &self.cfg.signing, msg::SESSION_START, Some(session_id), payload.clone(), &mut self.rng),
            })
            .collect();
        Ok((session_id, out))
    }

    fn node_report(&mut self, node: usize, sid: Digest, done: bool, reason: Option<String>, now: Timestamp) -> Result<(), MarketError> {
        let rec = self.sessions.get_mut(&sid).ok_or(MarketError::NotFound)?;
        if rec.status != SessionStatus::Running {
            return Ok(());
        }
        if done {
            rec.done[node] = true;
            if rec.done.iter().all(|d| *d) {
                rec.status = SessionStatus::Done;
                self.ledger.append(LedgerRecord::SessionCompleted { session_id: sid }, now)?;
            }
        } else {
            let reason = reason.unwrap_or_else(|| AbortReason::PeerAbort.code().to_owned());
            rec.status = SessionStatus::Aborted(reason.clone());
            self.ledger.append(LedgerRecord::SessionAborted { session_id: sid, reason }, now)?;
        }
        Ok(())
    }

    fn reply(&mut self, to: ActorId, msg_type: &str, sid: Option<Digest>, payload: CanonicalValue) -> Outgoing {
        let envelope = seal(&self.cfg.params, &self.cfg.signing, msg_type, sid, payload, &mut self.rng);
        Outgoing { to, envelope }
    }

    fn error(&mut self, to: ActorId, sid: Option<Digest>, e: &MarketError) -> Outgoing {
        let payload = Record::new().with("code", e.code()).with("detail", e.to_string().as_str()).build();
        self.reply(to, ERROR, sid, payload)
    }

    /// Handles one inbound envelope. Replies to requests are addressed to the
    /// sender; a started session also yields the `SESSION_START` envelopes.
    pub fn handle(&mut self, env: &Envelope, now: Timestamp) -> Vec<Outgoing> {
        self.message_log.push(env.to_bytes());
        let out = match open(&self.cfg.params, &self.cfg.directory, &mut self.guard, env) {
            Ok(payload) => self.dispatch(env, &payload, now),
            Err(_) => vec![],
        };
        for o in &out {
            self.message_log.push(o.envelope.to_bytes());
        }
        out
    }

    fn dispatch(&mut self, env: &Envelope, payload: &CanonicalValue, now: Timestamp) -> Vec<Outgoing> {
        let from = env.sender_id;
        let sid = env.session_id;
        let node = self.cfg.node_ids.iter().position(|n| *n == from);
        let result: Result<Vec<Outgoing>, MarketError> = match (env.msg_type.as_str(), node) {
            (REGISTER, None) => self.on_register(from, payload, now),
            (PUBLISH, None) => {
                let value = RecordReader::new(payload).and_then(|mut r| {
                    let v = r.field("listing")?.clone();
                    r.finish().map(|()| v)
                });
                value.map_err(MarketError::from).and_then(|v| self.publish_listing(&v, now)).map(|id| {
                    let p = Record::new().with("listing_id", CanonicalValue::bytes(id.to_vec())).build();
                    vec![self.reply(from, &format!("{PUBLISH}{OK_SUFFIX}"), None, p)]
                })
            }
            (QUERY_CATALOG, None) => {
                let listings = CanonicalValue::List(self.catalog.values().map(Canonical::to_canonical).collect());
                let p = Record::new().with("listings", listings).build();
                Ok(vec![self.reply(from, &format!("{QUERY_CATALOG}{OK_SUFFIX}"), None, p)])
            }
            (REQUEST_ANALYSIS, None) => self.on_request(from, payload, now),
            (SESSION_STATUS, Some(n)) => match (sid, msg::decode_status(payload)) {
                (Some(s), Ok((done, reason))) => self.node_report(n, s, done, reason, now).map(|()| vec![]),
                _ => Err(MarketError::Malformed("bad status report".into())),
            },
            (msg::ABORT, Some(n)) => match (sid, msg::decode_reason(payload)) {
                (Some(s), Ok(reason)) => self.node_report(n, s, false, Some(reason), now).map(|()| vec![]),
                _ => Err(MarketError::Malformed("bad abort".into())),
            },
            (SESSION_STATUS, None) => match sid.and_then(|s| self.sessions.get(&s).map(|r| r.status.clone())) {
                Some(status) => {
                    let p = match status {
                        SessionStatus::Running => Record::new().with("status", "RUNNING").build(),
                        SessionStatus::Done => msg::encode_status(true, None),
                        SessionStatus::Aborted(r) => msg::encode_status(false, Some(&r)),
                    };
                    Ok(vec![self.reply(from, &format!("{SESSION_STATUS}{OK_SUFFIX}"), sid, p)])
                }
                None => Err(MarketError::NotFound),
            },
            (other, _) => Err(MarketError::Malformed(format!("unexpected message {other}"))),
        };
        match result {
            Ok(out) => out,
            // nodes get no error replies; their reports are fire-and-forget
            Err(_) if node.is_some() => vec![],
            Err(e) => vec![self.error(from, sid, &e)],
        }
    }

    fn on_register(&mut self, from: ActorId, payload: &CanonicalValue, now: Timestamp) -> Result<Vec<Outgoing>, MarketError> {
        let params = self.cfg.params.clone();
        let mut r = RecordReader::new(payload)?;
        let credential = Credential::from_canonical(r.field("credential")?, &params)?;
        let role = r.field("role")?.as_text()?.to_owned();
        let ek = r.field("ek")?.as_group(&params)?;
        r.finish()?;
        let key = self.register_user(from, &credential, &role, now)?;
        let sealed = pke_encrypt(&params, &ek, &member_key_to_canonical(&key).encode(), &mut self.rng);
        let p = Record::new()
            .with("gpk", self.users.gpk())
            .with("member_key", sealed.to_canonical())
            .build();
        Ok(vec![self.reply(from, &format!("{REGISTER}{OK_SUFFIX}"), None, p)])
    }

    fn on_request(&mut self, from: ActorId, payload: &CanonicalValue, now: Timestamp) -> Result<Vec<Outgoing>, MarketError> {
        let params = self.cfg.params.clone();
        let mut r = RecordReader::new(payload)?;
        let ek = r.field("consumer_ek")?.as_group(&params)?;
        let f = FunctionDescriptor::from_canonical(r.field("function")?, &params)?;
        let ids = r
            .field("listing_ids")?
            .as_list()?
            .iter()
            .map(CanonicalValue::as_array)
            .collect::<Result<Vec<Digest>, _>>()?;
        r.finish()?;
        let (sid, mut out) = self.request_analysis(from, ek, f, &ids, now)?;
        let p = Record::new().with("session_id", CanonicalValue::bytes(sid.to_vec())).build();
        let reply = self.reply(from, &format!("{REQUEST_ANALYSIS}{OK_SUFFIX}"), Some(sid), p);
        out.insert(0, reply);
        Ok(out)
    }
}
