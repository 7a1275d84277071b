//! Hashing, signatures, hybrid encryption, group signatures, credentials
//! and attestations.

pub mod attestation;
pub mod credential;
pub mod group_sig;
pub mod hash;
pub mod pke;
pub mod schnorr;

pub use attestation::{attest, verify_attestations, Attestation};
pub use credential::{issue_credential, verify_credential, Credential, TrustedIssuers};
pub use group_sig::{gs_setup, gs_sign, gs_verify, GroupManager, GroupSignature, MemberId, MemberKey};
pub use hash::{hash256, Digest};
pub use pke::{pke_decrypt, pke_encrypt, EncKeyPair, HybridCiphertext};
pub use schnorr::{schnorr_sign, schnorr_verify, SchnorrSignature, SigKeyPair};

use crate::wire::canonical::CanonicalError;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("authentication failed")]
    AuthFailure,
    #[error("not authorized")]
    NotAuthorized,
    #[error("unknown credential issuer")]
    UnknownIssuer,
    #[error("issuance policy violated: {0}")]
    IssuancePolicy(String),
    #[error("attestation set incomplete")]
    IncompleteAttestation,
    #[error(transparent)]
    Parse(#[from] CanonicalError),
}
