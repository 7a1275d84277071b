//! Cloud storage and the triple dealer as request/reply services, and the
//! node-side client that reaches them.

use std::collections::BTreeMap;

use kraken_core::crypto::hash::Digest;
use kraken_core::crypto::{pke_decrypt, pke_encrypt, EncKeyPair};
use kraken_core::market::{BlobStore, StorageError};
use kraken_core::math::GroupElement;
use kraken_core::mpc::{NodeServices, ServiceError};
use kraken_core::sharing::{TripleDealer, TripleShare};
use kraken_core::crypto::HybridCiphertext;
use kraken_core::market::broker::OK_SUFFIX;
use kraken_core::wire::{ActorId, Canonical, CanonicalValue, Envelope, FromCanonical, Record, RecordReader};

use crate::client::{Endpoint, Remote, Rpc, StorageApi, DELETE, GET, PUT, TRIPLES};
use crate::error::AppError;

fn ok(msg_type: &str) -> String {
    format!("{msg_type}{OK_SUFFIX}")
}

fn storage_code(e: &StorageError) -> &'static str {
    match e {
        StorageError::NotFound => "NotFound",
        StorageError::IntegrityError => "IntegrityError",
        StorageError::Io(_) => "IoError",
    }
}

/// Content-addressed blob storage behind the authenticated channel.
pub struct StorageService {
    endpoint: Endpoint,
    store: BlobStore,
    /// Blobs returned to this actor have one byte flipped.
    tamper_for: Option<ActorId>,
}

impl StorageService {
    pub fn new(endpoint: Endpoint, store: BlobStore) -> Self {
        StorageService { endpoint, store, tamper_for: None }
    }

    pub fn tamper_for(mut self, actor: Option<ActorId>) -> Self {
        self.tamper_for = actor;
        self
    }

    pub fn id(&self) -> ActorId {
        self.endpoint.id()
    }

    pub fn store(&self) -> &BlobStore {
        &self.store
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Reply to one request; `None` for envelopes that fail to open.
    pub fn handle(&mut self, request: &Envelope) -> Option<Envelope> {
        let payload = self.endpoint.open(request).ok()?;
        let sid = request.session_id;
        let result = self.dispatch(&request.msg_type, &payload, &request.sender_id);
        Some(match result {
            Ok(reply) => self.endpoint.seal(&ok(&request.msg_type), sid, reply),
            Err(AppError::Storage(e)) => self.endpoint.error_reply(sid, storage_code(&e), &e.to_string()),
            Err(e) => self.endpoint.error_reply(sid, "Malformed", &e.to_string()),
        })
    }

    fn dispatch(&mut self, msg_type: &str, payload: &CanonicalValue, from: &ActorId) -> Result<CanonicalValue, AppError> {
        let mut r = RecordReader::new(payload)?;
        match msg_type {
            PUT => {
                let bytes = r.field("bytes")?.as_bytes()?;
                r.finish()?;
                let id = self.store.put(bytes)?;
                Ok(Record::new().with("content_id", CanonicalValue::bytes(id.to_vec())).build())
            }
            GET => {
                let id: Digest = r.field("content_id")?.as_array()?;
                r.finish()?;
                let mut bytes = self.store.get(&id)?;
                if self.tamper_for.as_ref() == Some(from) {
                    if let Some(b) = bytes.last_mut() {
                        *b ^= 0x01;
                    }
                }
                Ok(Record::new().with("bytes", CanonicalValue::bytes(bytes)).build())
            }
            DELETE => {
                let id: Digest = r.field("content_id")?.as_array()?;
                r.finish()?;
                self.store.delete(&id)?;
                Ok(Record::new().build())
            }
            other => Err(AppError::UnexpectedReply(format!("unsupported request {other}"))),
        }
    }
}

/// Serves each node its triple shares for a session, encrypted to the
/// node's key.
pub struct DealerService {
    endpoint: Endpoint,
    dealer: TripleDealer,
    nodes: BTreeMap<ActorId, (u8, GroupElement)>,
}

impl DealerService {
    /// `nodes` maps each node's actor id to its index and encryption key.
    pub fn new(endpoint: Endpoint, seed: [u8; 32], nodes: BTreeMap<ActorId, (u8, GroupElement)>) -> Self {
        DealerService { endpoint, dealer: TripleDealer::new(seed), nodes }
    }

    pub fn id(&self) -> ActorId {
        self.endpoint.id()
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn handle(&mut self, request: &Envelope) -> Option<Envelope> {
        let payload = self.endpoint.open(request).ok()?;
        let sid = request.session_id;
        let result = self.dispatch(request, &payload);
        Some(match result {
            Ok(reply) => self.endpoint.seal(&ok(TRIPLES), sid, reply),
            Err(e) => self.endpoint.error_reply(sid, &e.code(), &e.to_string()),
        })
    }

    fn dispatch(&mut self, request: &Envelope, payload: &CanonicalValue) -> Result<CanonicalValue, AppError> {
        if request.msg_type != TRIPLES {
            return Err(AppError::UnexpectedReply(format!("unsupported request {}", request.msg_type)));
        }
        let (index, ek) = self.nodes.get(&request.sender_id).cloned().ok_or(AppError::NotAuthorized)?;
        let sid = request.session_id.ok_or_else(|| AppError::config("triples need a session id"))?;
        let mut r = RecordReader::new(payload)?;
        let count = r.field("count")?.as_usize()?;
        r.finish()?;
        let params = self.endpoint.params().clone();
        let shares = self.dealer.node_triples(params.scalars(), &sid, count, index);
        let plain = CanonicalValue::List(shares.iter().map(Canonical::to_canonical).collect()).encode();
        let ct = pke_encrypt(&params, &ek, &plain, self.endpoint.rng());
        Ok(Record::new().with("ciphertext", ct.to_canonical()).build())
    }
}

/// What a node uses to reach storage and the dealer.
pub struct NodeLink<'a> {
    pub endpoint: &'a mut Endpoint,
    pub encryption: &'a EncKeyPair,
    pub rpc: &'a mut dyn Rpc,
    pub storage: ActorId,
    pub dealer: ActorId,
}

fn service_error(e: AppError) -> ServiceError {
    ServiceError(e.to_string())
}

impl NodeServices for NodeLink<'_> {
    fn fetch_blob(&mut self, id: &Digest) -> Result<Vec<u8>, ServiceError> {
        Remote::new(self.endpoint, self.rpc, self.storage).get(id).map_err(service_error)
    }

    fn fetch_triples(&mut self, session_id: &Digest, count: usize) -> Result<Vec<TripleShare>, ServiceError> {
        let payload = Record::new().with("count", count as u64).build();
        let reply = self
            .endpoint
            .request(self.rpc, self.dealer, TRIPLES, Some(*session_id), payload)
            .map_err(service_error)?;
        let params = self.endpoint.params().clone();
        let decode = || -> Result<Vec<TripleShare>, AppError> {
            let mut r = RecordReader::new(&reply)?;
            let ct = HybridCiphertext::from_canonical(r.field("ciphertext")?, &params)?;
            r.finish()?;
            let plain = pke_decrypt(&params, self.encryption, &ct)?;
            let list = CanonicalValue::decode(&plain)?;
            Ok(list.as_list()?.iter().map(|t| TripleShare::from_canonical(t, &params)).collect::<Result<_, _>>()?)
        };
        decode().map_err(service_error)
    }
}
