//! The three-node computation engine.
//!
//! Each node runs a deterministic state machine per session, driven by one
//! inbound envelope queue: fetch bundles, check the policy, decrypt, verify
//! authenticity jointly, evaluate with Beaver multiplications, encrypt the
//! output shares to the consumer and attest. Any failed check aborts the
//! session at every honest node.

pub mod driver;
pub mod eval;
pub mod messages;
pub mod plan;
pub mod session;
pub mod verify;

use std::fmt;

use crate::policy::PolicyViolation;

pub use driver::{run_session, SessionOutcome};
pub use eval::{eval_linear, mult_gate, EvalError, OpenedValue};
pub use messages::{OutputShares, ResultMessage, SessionStart};
pub use plan::{plan, EvalPlan, OutputLabel, PlanError};
pub use session::{Node, NodeBehavior, NodeConfig, NodeServices, Outgoing, Phase, ServiceError, SessionState};
pub use verify::{input_root, verify_inputs};

/// Default per-phase deadline.
pub const DEFAULT_PHASE_TIMEOUT_MS: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbortReason {
    PolicySignatureInvalid,
    Policy(PolicyViolation),
    /// Nodes disagree on what the session computes.
    FunctionMismatch,
    FetchFailure,
    DecryptFailure,
    DeviceSignatureInvalid,
    CommitmentMismatch,
    ConsistencyAbort,
    MalformedInput,
    /// A peer sent a message out of protocol.
    ProtocolViolation,
    /// Replayed or unauthenticated envelope for the session.
    ChannelViolation,
    Timeout,
    PeerAbort,
}

const SIMPLE: [AbortReason; 12] = [
    AbortReason::PolicySignatureInvalid,
    AbortReason::FunctionMismatch,
    AbortReason::FetchFailure,
    AbortReason::DecryptFailure,
    AbortReason::DeviceSignatureInvalid,
    AbortReason::CommitmentMismatch,
    AbortReason::ConsistencyAbort,
    AbortReason::MalformedInput,
    AbortReason::ProtocolViolation,
    AbortReason::ChannelViolation,
    AbortReason::Timeout,
    AbortReason::PeerAbort,
];

const VIOLATIONS: [PolicyViolation; 4] = [
    PolicyViolation::FunctionNotAllowed,
    PolicyViolation::CohortTooSmall,
    PolicyViolation::SelectorNotAllowed,
    PolicyViolation::Expired,
];

impl AbortReason {
    pub fn code(&self) -> &'static str {
        match self {
            AbortReason::PolicySignatureInvalid => "PolicySignatureInvalid",
            AbortReason::Policy(v) => v.as_str(),
            AbortReason::FunctionMismatch => "FunctionMismatch",
            AbortReason::FetchFailure => "FetchFailure",
            AbortReason::DecryptFailure => "DecryptFailure",
            AbortReason::DeviceSignatureInvalid => "DeviceSignatureInvalid",
            AbortReason::CommitmentMismatch => "CommitmentMismatch",
            AbortReason::ConsistencyAbort => "ConsistencyAbort",
            AbortReason::MalformedInput => "MalformedInput",
            AbortReason::ProtocolViolation => "ProtocolViolation",
            AbortReason::ChannelViolation => "ChannelViolation",
            AbortReason::Timeout => "Timeout",
            AbortReason::PeerAbort => "PeerAbort",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SIMPLE
            .into_iter()
            .chain(VIOLATIONS.into_iter().map(AbortReason::Policy))
            .find(|r| r.code() == s)
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}
