//! Canonical encoding, signed envelopes and transports.

pub mod canonical;
pub mod envelope;
pub mod transport;

pub use canonical::{Canonical, CanonicalError, CanonicalValue, FromCanonical, Record, RecordReader};
pub use envelope::{actor_id, open, seal, ActorId, Envelope, KeyDirectory, ReplayGuard};
pub use transport::{DeterministicBus, Delivery, MemoryHub, MemoryTransport, SocketTransport, Transport};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error(transparent)]
    Parse(#[from] CanonicalError),
    #[error("envelope authentication failed")]
    AuthFailure,
    #[error("replayed envelope")]
    ReplayDetected,
    #[error("unknown sender")]
    UnknownSender,
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error("connection closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for WireError {
    fn from(e: std::io::Error) -> Self {
        WireError::Io(e.to_string())
    }
}
