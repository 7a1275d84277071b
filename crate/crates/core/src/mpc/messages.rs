//! Payloads of the session protocol messages.

use crate::crypto::hash::Digest;
use crate::crypto::{Attestation, HybridCiphertext};
use crate::market::listing::Listing;
use crate::math::{FieldElement, GroupElement, GroupParams};
use crate::policy::{FunctionDescriptor, Timestamp};
use crate::wire::canonical::{
    field_list, group_list, parse_field_list, parse_group_list, Canonical, CanonicalError,
    CanonicalValue, FromCanonical, Record, RecordReader,
};
use crate::wire::envelope::ActorId;

use super::plan::OutputLabel;

pub const SESSION_START: &str = "SESSION_START";
pub const SHARE_FETCHED: &str = "SHARE_FETCHED";
pub const PARTIAL_COMMITMENT: &str = "PARTIAL_COMMITMENT";
pub const BEAVER_OPEN: &str = "BEAVER_OPEN";
pub const ABORT: &str = "ABORT";
pub const OUTPUT_READY: &str = "OUTPUT_READY";
/// Node to consumer: encrypted output shares plus attestation.
pub const RESULT: &str = "RESULT";
/// Node to marketplace: terminal status of a session.
pub const SESSION_STATUS: &str = "SESSION_STATUS";

fn digest(d: &Digest) -> CanonicalValue {
    CanonicalValue::bytes(d.to_vec())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionStart {
    pub session_id: Digest,
    pub function: FunctionDescriptor,
    pub listings: Vec<Listing>,
    pub consumer_id: ActorId,
    pub consumer_ek: GroupElement,
    pub requested_at: Timestamp,
}

impl Canonical for SessionStart {
    fn to_canonical(&self) -> CanonicalValue {
        Record::new()
            .with("consumer_ek", &self.consumer_ek)
            .with("consumer_id", digest(&self.consumer_id))
            .with("function", self.function.to_canonical())
            .with("listings", CanonicalValue::List(self.listings.iter().map(Canonical::to_canonical).collect()))
            .with("requested_at", self.requested_at)
            .with("session_id", digest(&self.session_id))
            .build()
    }
}

impl FromCanonical for SessionStart {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(value)?;
        let s = SessionStart {
            consumer_ek: r.field("consumer_ek")?.as_group(params)?,
            consumer_id: r.field("consumer_id")?.as_array()?,
            function: FunctionDescriptor::from_canonical(r.field("function")?, params)?,
            listings: r
                .field("listings")?
                .as_list()?
                .iter()
                .map(|l| Listing::from_canonical(l, params))
                .collect::<Result<_, _>>()?,
            requested_at: r.field("requested_at")?.as_u64()?,
            session_id: r.field("session_id")?.as_array()?,
        };
        r.finish()?;
        Ok(s)
    }
}

/// Opening stage of a `BEAVER_OPEN` message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenStage {
    /// The sender's masked shares `(d_i, e_i)` per gate.
    Share,
    /// The sender's reconstructed `(d, e)` per gate.
    Echo,
}

impl OpenStage {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpenStage::Share => "share",
            OpenStage::Echo => "echo",
        }
    }
}

pub fn encode_pairs(stage: OpenStage, pairs: &[(FieldElement, FieldElement)]) -> CanonicalValue {
    Record::new()
        .with("stage", stage.as_str())
        .with(
            "values",
            CanonicalValue::List(
                pairs.iter().map(|(d, e)| CanonicalValue::List(vec![d.into(), e.into()])).collect(),
            ),
        )
        .build()
}

pub fn decode_pairs(
    value: &CanonicalValue,
    params: &GroupParams,
) -> Result<(OpenStage, Vec<(FieldElement, FieldElement)>), CanonicalError> {
    let mut r = RecordReader::new(value)?;
    let stage = match r.field("stage")?.as_text()? {
        "share" => OpenStage::Share,
        "echo" => OpenStage::Echo,
        other => return Err(CanonicalError::schema(format!("unknown opening stage {other}"))),
    };
    let f = params.scalars();
    let pairs = r
        .field("values")?
        .as_list()?
        .iter()
        .map(|p| match p.as_list()? {
            [d, e] => Ok((d.as_field(f)?, e.as_field(f)?)),
            _ => Err(CanonicalError::schema("opening must be a pair")),
        })
        .collect::<Result<_, _>>()?;
    r.finish()?;
    Ok((stage, pairs))
}

pub fn encode_partials(partials: &[Vec<GroupElement>]) -> CanonicalValue {
    Record::new()
        .with("partials", CanonicalValue::List(partials.iter().map(|p| group_list(p)).collect()))
        .build()
}

pub fn decode_partials(value: &CanonicalValue, params: &GroupParams) -> Result<Vec<Vec<GroupElement>>, CanonicalError> {
    let mut r = RecordReader::new(value)?;
    let p = r
        .field("partials")?
        .as_list()?
        .iter()
        .map(|v| parse_group_list(v, params))
        .collect::<Result<_, _>>()?;
    r.finish()?;
    Ok(p)
}

pub fn encode_view(view: &Digest) -> CanonicalValue {
    Record::new().with("view", digest(view)).build()
}

pub fn decode_view(value: &CanonicalValue) -> Result<Digest, CanonicalError> {
    let mut r = RecordReader::new(value)?;
    let v = r.field("view")?.as_array()?;
    r.finish()?;
    Ok(v)
}

pub fn encode_reason(reason: &str) -> CanonicalValue {
    Record::new().with("reason", reason).build()
}

pub fn decode_reason(value: &CanonicalValue) -> Result<String, CanonicalError> {
    let mut r = RecordReader::new(value)?;
    let v = r.field("reason")?.as_text()?.to_owned();
    r.finish()?;
    Ok(v)
}

/// Terminal status reported to the marketplace.
pub fn encode_status(done: bool, reason: Option<&str>) -> CanonicalValue {
    Record::new()
        .with("status", if done { "DONE" } else { "ABORTED" })
        .with_opt("reason", reason.map(CanonicalValue::text))
        .build()
}

pub fn decode_status(value: &CanonicalValue) -> Result<(bool, Option<String>), CanonicalError> {
    let mut r = RecordReader::new(value)?;
    let done = match r.field("status")?.as_text()? {
        "DONE" => true,
        "ABORTED" => false,
        other => return Err(CanonicalError::schema(format!("unknown status {other}"))),
    };
    let reason = r.optional("reason").map(|v| v.as_text().map(str::to_owned)).transpose()?;
    r.finish()?;
    Ok((done, reason))
}

/// Plaintext of one node's encrypted output: its output shares and the
/// blinding used for the attested commitments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputShares {
    pub node_index: u8,
    pub labels: Vec<OutputLabel>,
    pub values: Vec<FieldElement>,
    pub blinding: Vec<FieldElement>,
}

impl Canonical for OutputShares {
    fn to_canonical(&self) -> CanonicalValue {
        Record::new()
            .with("blinding", field_list(&self.blinding))
            .with(
                "labels",
                CanonicalValue::List(self.labels.iter().map(|l| CanonicalValue::text(l.to_string())).collect()),
            )
            .with("node_index", u64::from(self.node_index))
            .with("values", field_list(&self.values))
            .build()
    }
}

impl FromCanonical for OutputShares {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(value)?;
        let o = OutputShares {
            blinding: parse_field_list(r.field("blinding")?, params.scalars())?,
            labels: r
                .field("labels")?
                .as_list()?
                .iter()
                .map(|l| {
                    let s = l.as_text()?;
                    OutputLabel::parse(s).ok_or_else(|| CanonicalError::schema(format!("unknown output label {s}")))
                })
                .collect::<Result<_, _>>()?,
            node_index: u8::try_from(r.field("node_index")?.as_u64()?)
                .map_err(|_| CanonicalError::schema("node_index out of range"))?,
            values: parse_field_list(r.field("values")?, params.scalars())?,
        };
        r.finish()?;
        if o.labels.len() != o.values.len() || o.values.len() != o.blinding.len() {
            return Err(CanonicalError::schema("output vectors differ in length"));
        }
        Ok(o)
    }
}

/// What each node delivers to the consumer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultMessage {
    pub attestation: Attestation,
    pub ciphertext: HybridCiphertext,
}

impl Canonical for ResultMessage {
    fn to_canonical(&self) -> CanonicalValue {
        Record::new()
            .with("attestation", self.attestation.to_canonical())
            .with("ciphertext", self.ciphertext.to_canonical())
            .build()
    }
}

impl FromCanonical for ResultMessage {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(value)?;
        let m = ResultMessage {
            attestation: Attestation::from_canonical(r.field("attestation")?, params)?,
            ciphertext: HybridCiphertext::from_canonical(r.field("ciphertext")?, params)?,
        };
        r.finish()?;
        Ok(m)
    }
}
