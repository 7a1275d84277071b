//! Request/reply plumbing shared by every actor: an [`Endpoint`] seals and
//! opens envelopes, an [`Rpc`] carries one request to one service, and
//! [`Remote`] speaks the market and storage protocols on top of both.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use kraken_core::crypto::hash::Digest;
use kraken_core::crypto::{pke_decrypt, Credential, EncKeyPair, MemberKey, SigKeyPair};
use kraken_core::market::broker::{
    member_key_from_canonical, ERROR, OK_SUFFIX, PUBLISH, QUERY_CATALOG, REGISTER, REQUEST_ANALYSIS, SESSION_STATUS,
};
use kraken_core::market::Listing;
use kraken_core::crypto::HybridCiphertext;
use kraken_core::math::{GroupElement, GroupParams};
use kraken_core::policy::FunctionDescriptor;
use kraken_core::wire::envelope::actor_id;
use kraken_core::wire::{
    open, seal, ActorId, Canonical, CanonicalValue, Envelope, FromCanonical, KeyDirectory, Record, RecordReader,
    ReplayGuard,
};

use crate::error::AppError;

pub const PUT: &str = "PUT";
pub const GET: &str = "GET";
pub const DELETE: &str = "DELETE";
pub const TRIPLES: &str = "TRIPLES";

/// Carries one request envelope to `to` and returns its reply.
pub trait Rpc {
    fn call(&mut self, to: &ActorId, request: Envelope) -> Result<Envelope, AppError>;
}

/// One actor's view of the authenticated channel.
#[derive(Debug, Clone)]
pub struct Endpoint {
    params: GroupParams,
    signing: SigKeyPair,
    id: ActorId,
    directory: KeyDirectory,
    guard: ReplayGuard,
    rng: ChaCha20Rng,
}

impl Endpoint {
    pub fn new(params: GroupParams, signing: SigKeyPair, directory: KeyDirectory, seed: [u8; 32]) -> Self {
        let id = actor_id(&params, signing.public());
        Endpoint { params, signing, id, directory, guard: ReplayGuard::new(), rng: ChaCha20Rng::from_seed(seed) }
    }

    pub fn id(&self) -> ActorId {
        self.id
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn signing(&self) -> &SigKeyPair {
        &self.signing
    }

    pub fn directory(&self) -> &KeyDirectory {
        &self.directory
    }

    pub fn guard(&self) -> &ReplayGuard {
        &self.guard
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn seal(&mut self, msg_type: &str, session_id: Option<Digest>, payload: CanonicalValue) -> Envelope {
        seal(&self.params, &self.signing, msg_type, session_id, payload, &mut self.rng)
    }

    pub fn open(&mut self, envelope: &Envelope) -> Result<CanonicalValue, AppError> {
        Ok(open(&self.params, &self.directory, &mut self.guard, envelope)?)
    }

    pub fn error_reply(&mut self, session_id: Option<Digest>, code: &str, detail: &str) -> Envelope {
        let payload = Record::new().with("code", code).with("detail", detail).build();
        self.seal(ERROR, session_id, payload)
    }

    /// Sends a request and opens the reply. `ERROR` replies become
    /// [`AppError::Remote`]; anything but `<msg_type>_OK` is refused.
    pub fn request(
        &mut self,
        rpc: &mut dyn Rpc,
        to: ActorId,
        msg_type: &str,
        session_id: Option<Digest>,
        payload: CanonicalValue,
    ) -> Result<CanonicalValue, AppError> {
        let req = self.seal(msg_type, session_id, payload);
        let reply = rpc.call(&to, req)?;
        if reply.sender_id != to {
            return Err(AppError::UnexpectedReply("reply from a different actor".into()));
        }
        let payload = self.open(&reply)?;
        if reply.msg_type == ERROR {
            let mut r = RecordReader::new(&payload)?;
            let code = r.field("code")?.as_text()?.to_owned();
            let detail = r.field("detail")?.as_text()?.to_owned();
            return Err(AppError::Remote { code, detail });
        }
        if reply.msg_type != format!("{msg_type}{OK_SUFFIX}") {
            return Err(AppError::UnexpectedReply(reply.msg_type));
        }
        Ok(payload)
    }
}

pub trait MarketApi {
    /// Registers and returns the user group key and the delivered member key.
    fn register(
        &mut self,
        credential: &Credential,
        role: &str,
        ek: &EncKeyPair,
    ) -> Result<(GroupElement, MemberKey), AppError>;
    fn publish(&mut self, listing: CanonicalValue) -> Result<Digest, AppError>;
    fn catalog(&mut self) -> Result<Vec<Listing>, AppError>;
    fn request_analysis(
        &mut self,
        consumer_ek: &GroupElement,
        f: &FunctionDescriptor,
        listing_ids: &[Digest],
    ) -> Result<Digest, AppError>;
    /// `RUNNING`, `DONE` or `ABORTED:<reason>`.
    fn session_status(&mut self, session_id: Digest) -> Result<String, AppError>;
}

pub trait StorageApi {
    fn put(&mut self, bytes: &[u8]) -> Result<Digest, AppError>;
    fn get(&mut self, id: &Digest) -> Result<Vec<u8>, AppError>;
    fn delete(&mut self, id: &Digest) -> Result<(), AppError>;
}

/// A service reached through an endpoint and a carrier.
pub struct Remote<'a> {
    pub endpoint: &'a mut Endpoint,
    pub rpc: &'a mut dyn Rpc,
    pub to: ActorId,
}

impl<'a> Remote<'a> {
    pub fn new(endpoint: &'a mut Endpoint, rpc: &'a mut dyn Rpc, to: ActorId) -> Self {
        Remote { endpoint, rpc, to }
    }

    fn request(&mut self, msg_type: &str, sid: Option<Digest>, payload: CanonicalValue) -> Result<CanonicalValue, AppError> {
        self.endpoint.request(self.rpc, self.to, msg_type, sid, payload)
    }
}

fn digest_value(d: &Digest) -> CanonicalValue {
    CanonicalValue::bytes(d.to_vec())
}

impl MarketApi for Remote<'_> {
    fn register(
        &mut self,
        credential: &Credential,
        role: &str,
        ek: &EncKeyPair,
    ) -> Result<(GroupElement, MemberKey), AppError> {
        let payload = Record::new()
            .with("credential", credential.to_canonical())
            .with("ek", ek.public())
            .with("role", role)
            .build();
        let reply = self.request(REGISTER, None, payload)?;
        let params = self.endpoint.params().clone();
        let mut r = RecordReader::new(&reply)?;
        let gpk = r.field("gpk")?.as_group(&params)?;
        let sealed = HybridCiphertext::from_canonical(r.field("member_key")?, &params)?;
        r.finish()?;
        let plain = pke_decrypt(&params, ek, &sealed)?;
        let key = member_key_from_canonical(&CanonicalValue::decode(&plain)?, &params)?;
        Ok((gpk, key))
    }

    fn publish(&mut self, listing: CanonicalValue) -> Result<Digest, AppError> {
        let reply = self.request(PUBLISH, None, Record::new().with("listing", listing).build())?;
        let mut r = RecordReader::new(&reply)?;
        let id = r.field("listing_id")?.as_array()?;
        r.finish()?;
        Ok(id)
    }

    fn catalog(&mut self) -> Result<Vec<Listing>, AppError> {
        let reply = self.request(QUERY_CATALOG, None, Record::new().build())?;
        let params = self.endpoint.params().clone();
        let mut r = RecordReader::new(&reply)?;
        let listings = r
            .field("listings")?
            .as_list()?
            .iter()
            .map(|v| Listing::from_canonical(v, &params))
            .collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        Ok(listings)
    }

    fn request_analysis(
        &mut self,
        consumer_ek: &GroupElement,
        f: &FunctionDescriptor,
        listing_ids: &[Digest],
    ) -> Result<Digest, AppError> {
        let payload = Record::new()
            .with("consumer_ek", consumer_ek)
            .with("function", f.to_canonical())
            .with("listing_ids", CanonicalValue::List(listing_ids.iter().map(digest_value).collect()))
            .build();
        let reply = self.request(REQUEST_ANALYSIS, None, payload)?;
        let mut r = RecordReader::new(&reply)?;
        let sid = r.field("session_id")?.as_array()?;
        r.finish()?;
        Ok(sid)
    }

    fn session_status(&mut self, session_id: Digest) -> Result<String, AppError> {
        let reply = self.request(SESSION_STATUS, Some(session_id), Record::new().build())?;
        let mut r = RecordReader::new(&reply)?;
        let status = r.field("status")?.as_text()?.to_owned();
        let reason = r.optional("reason").map(|v| v.as_text().map(str::to_owned)).transpose()?;
        r.finish()?;
        Ok(match reason {
            Some(reason) => format!("{status}:{reason}"),
            None => status,
        })
    }
}

impl StorageApi for Remote<'_> {
    fn put(&mut self, bytes: &[u8]) -> Result<Digest, AppError> {
        let reply = self.request(PUT, None, Record::new().with("bytes", CanonicalValue::bytes(bytes)).build())?;
        let mut r = RecordReader::new(&reply)?;
        let id = r.field("content_id")?.as_array()?;
        r.finish()?;
        Ok(id)
    }

    fn get(&mut self, id: &Digest) -> Result<Vec<u8>, AppError> {
        let reply = self.request(GET, None, Record::new().with("content_id", digest_value(id)).build())?;
        let mut r = RecordReader::new(&reply)?;
        let bytes = r.field("bytes")?.as_bytes()?.to_vec();
        r.finish()?;
        Ok(bytes)
    }

    fn delete(&mut self, id: &Digest) -> Result<(), AppError> {
        self.request(DELETE, None, Record::new().with("content_id", digest_value(id)).build())?;
        Ok(())
    }
}
