//! Signed envelopes: per-message authentication with replay protection.
//!
//! Stands in for a TLS channel. Payloads travel in the clear; anything
//! confidential is end-to-end encrypted before it is put in an envelope.
//! Metadata (sender, sizes, timing) stays visible.

use std::collections::{BTreeMap, HashSet};

use rand::RngCore;

use super::canonical::{Canonical, CanonicalError, CanonicalValue, FromCanonical};
use super::WireError;
use crate::crypto::hash::{hash256, Digest};
use crate::crypto::schnorr::{schnorr_sign, schnorr_verify, SchnorrSignature, SigKeyPair};
use crate::math::{GroupElement, GroupParams};

pub const ENVELOPE_VERSION: u64 = 1;

/// 32-byte actor identifier, the digest of the actor's transport key.
pub type ActorId = Digest;

pub fn actor_id(params: &GroupParams, pk: &GroupElement) -> ActorId {
    hash256(&params.element_bytes(pk))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub version: u64,
    pub msg_type: String,
    pub sender_id: ActorId,
    pub session_id: Option<Digest>,
    pub nonce: [u8; 16],
    pub payload: CanonicalValue,
    pub signature: SchnorrSignature,
}

fn signed_part(
    version: u64,
    msg_type: &str,
    sender_id: &ActorId,
    session_id: Option<&Digest>,
    nonce: &[u8; 16],
    payload: &CanonicalValue,
) -> Vec<CanonicalValue> {
    vec![
        CanonicalValue::int(version),
        CanonicalValue::text(msg_type),
        CanonicalValue::bytes(sender_id.to_vec()),
        CanonicalValue::List(session_id.map(|s| CanonicalValue::bytes(s.to_vec())).into_iter().collect()),
        CanonicalValue::bytes(nonce.to_vec()),
        payload.clone(),
    ]
}

pub fn seal<R: RngCore + ?Sized>(
    params: &GroupParams,
    sender: &SigKeyPair,
    msg_type: &str,
    session_id: Option<Digest>,
    payload: CanonicalValue,
    rng: &mut R,
) -> Envelope {
    let sender_id = actor_id(params, sender.public());
    let mut nonce = [0u8; 16];
    rng.fill_bytes(&mut nonce);
    let body = CanonicalValue::List(signed_part(
        ENVELOPE_VERSION,
        msg_type,
        &sender_id,
        session_id.as_ref(),
        &nonce,
        &payload,
    ))
    .encode();
    let signature = schnorr_sign(params, sender, &body, rng);
    Envelope {
        version: ENVELOPE_VERSION,
        msg_type: msg_type.to_owned(),
        sender_id,
        session_id,
        nonce,
        payload,
        signature,
    }
}

impl Envelope {
    fn signed_bytes(&self) -> Vec<u8> {
        CanonicalValue::List(signed_part(
            self.version,
            &self.msg_type,
            &self.sender_id,
            self.session_id.as_ref(),
            &self.nonce,
            &self.payload,
        ))
        .encode()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.canonical_bytes()
    }

    pub fn from_bytes(bytes: &[u8], params: &GroupParams) -> Result<Self, WireError> {
        Ok(Self::from_canonical_bytes(bytes, params)?)
    }

    /// Digest of the full encoding, for transcripts.
    pub fn digest(&self) -> Digest {
        hash256(&self.to_bytes())
    }
}

impl Canonical for Envelope {
    fn to_canonical(&self) -> CanonicalValue {
        let mut items = signed_part(
            self.version,
            &self.msg_type,
            &self.sender_id,
            self.session_id.as_ref(),
            &self.nonce,
            &self.payload,
        );
        items.push(self.signature.to_canonical());
        CanonicalValue::List(items)
    }
}

impl FromCanonical for Envelope {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let [version, msg_type, sender, session, nonce, payload, signature] = value.as_list()? else {
            return Err(CanonicalError::schema("envelope must have seven fields"));
        };
        let version = version.as_u64()?;
        if version != ENVELOPE_VERSION {
            return Err(CanonicalError::schema(format!("unsupported envelope version {version}")));
        }
        let session_id = match session.as_list()? {
            [] => None,
            [id] => Some(id.as_array()?),
            _ => return Err(CanonicalError::schema("session id list has more than one entry")),
        };
        Ok(Envelope {
            version,
            msg_type: msg_type.as_text()?.to_owned(),
            sender_id: sender.as_array()?,
            session_id,
            nonce: nonce.as_array()?,
            payload: payload.clone(),
            signature: SchnorrSignature::from_canonical(signature, params)?,
        })
    }
}

/// Public transport keys of every actor in a deployment.
#[derive(Debug, Clone, Default)]
pub struct KeyDirectory {
    keys: BTreeMap<ActorId, GroupElement>,
}

impl KeyDirectory {
    pub fn new() -> Self {
        KeyDirectory::default()
    }

    pub fn register(&mut self, params: &GroupParams, pk: GroupElement) -> ActorId {
        let id = actor_id(params, &pk);
        self.keys.insert(id, pk);
        id
    }

    pub fn get(&self, id: &ActorId) -> Option<&GroupElement> {
        self.keys.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ActorId, &GroupElement)> {
        self.keys.iter()
    }
}

/// Per-recipient record of accepted `(sender, nonce)` pairs.
#[derive(Debug, Clone, Default)]
pub struct ReplayGuard {
    seen: HashSet<(ActorId, [u8; 16])>,
    accepted: Vec<(ActorId, [u8; 16])>,
}

impl ReplayGuard {
    pub fn new() -> Self {
        ReplayGuard::default()
    }

    /// Every pair accepted so far, in acceptance order.
    pub fn accepted(&self) -> &[(ActorId, [u8; 16])] {
        &self.accepted
    }
}

/// Verifies sender and signature, then rejects replays. Returns the payload.
pub fn open(
    params: &GroupParams,
    directory: &KeyDirectory,
    guard: &mut ReplayGuard,
    envelope: &Envelope,
) -> Result<CanonicalValue, WireError> {
    let pk = directory.get(&envelope.sender_id).ok_or(WireError::UnknownSender)?;
    if envelope.version != ENVELOPE_VERSION
        || !schnorr_verify(params, pk, &envelope.signed_bytes(), &envelope.signature)
    {
        return Err(WireError::AuthFailure);
    }
    let key = (envelope.sender_id, envelope.nonce);
    if !guard.seen.insert(key) {
        return Err(WireError::ReplayDetected);
    }
    guard.accepted.push(key);
    Ok(envelope.payload.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::canonical::Record;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn setup() -> (GroupParams, SigKeyPair, KeyDirectory, ChaCha20Rng) {
        let params = GroupParams::standard();
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let key = SigKeyPair::generate(&params, &mut rng);
        let mut dir = KeyDirectory::new();
        dir.register(&params, key.public().clone());
        (params, key, dir, rng)
    }

    fn payload() -> CanonicalValue {
        Record::new().with("hello", "world").build()
    }

    #[test]
    fn seal_open_round_trip() {
        let (params, key, dir, mut rng) = setup();
        let env = seal(&params, &key, "PING", Some([7; 32]), payload(), &mut rng);
        let wire = env.to_bytes();
        let received = Envelope::from_bytes(&wire, &params).unwrap();
        assert_eq!(received, env);
        let mut guard = ReplayGuard::new();
        assert_eq!(open(&params, &dir, &mut guard, &received).unwrap(), payload());
    }

    #[test]
    fn second_delivery_is_a_replay() {
        let (params, key, dir, mut rng) = setup();
        let env = seal(&params, &key, "PING", None, payload(), &mut rng);
        let mut guard = ReplayGuard::new();
        open(&params, &dir, &mut guard, &env).unwrap();
        assert_eq!(open(&params, &dir, &mut guard, &env), Err(WireError::ReplayDetected));
        assert_eq!(guard.accepted().len(), 1);
    }

    #[test]
    fn bit_flips_in_transit_are_rejected() {
        let (params, key, dir, mut rng) = setup();
        let env = seal(&params, &key, "PING", Some([1; 32]), payload(), &mut rng);
        let wire = env.to_bytes();
        for _ in 0..400 {
            let pos = rng.gen_range(0..wire.len() * 8);
            let mut bad = wire.clone();
            bad[pos / 8] ^= 1 << (pos % 8);
            let mut guard = ReplayGuard::new();
            if let Ok(parsed) = Envelope::from_bytes(&bad, &params) {
                let r = open(&params, &dir, &mut guard, &parsed);
                assert!(
                    matches!(r, Err(WireError::AuthFailure) | Err(WireError::UnknownSender)),
                    "flip at bit {pos} accepted"
                );
            }
        }
    }

    #[test]
    fn unknown_sender() {
        let (params, _, dir, mut rng) = setup();
        let stranger = SigKeyPair::generate(&params, &mut rng);
        let env = seal(&params, &stranger, "PING", None, payload(), &mut rng);
        assert_eq!(open(&params, &dir, &mut ReplayGuard::new(), &env), Err(WireError::UnknownSender));
    }

    #[test]
    fn field_order_on_the_wire() {
        let (params, key, _, mut rng) = setup();
        let env = seal(&params, &key, "T", None, CanonicalValue::int(5u64), &mut rng);
        let v = env.to_canonical();
        let items = v.as_list().unwrap();
        assert_eq!(items.len(), 7);
        assert_eq!(items[0], CanonicalValue::int(1u64));
        assert_eq!(items[1], CanonicalValue::text("T"));
        assert_eq!(items[3], CanonicalValue::List(vec![]));
        assert_eq!(items[5], CanonicalValue::int(5u64));
    }
}
