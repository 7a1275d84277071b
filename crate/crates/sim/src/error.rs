use kraken_core::crypto::CryptoError;
use kraken_core::market::{MarketError, StorageError};
use kraken_core::wire::{CanonicalError, WireError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("remote error {code}: {detail}")]
    Remote { code: String, detail: String },
    #[error("unexpected reply {0}")]
    UnexpectedReply(String),
    #[error("not authorized")]
    NotAuthorized,
    #[error("result rejected: {0}")]
    ResultRejected(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl AppError {
    pub fn config(msg: impl Into<String>) -> Self {
        AppError::Config(msg.into())
    }

    /// Short code used in reports and CLI output.
    pub fn code(&self) -> String {
        match self {
            AppError::Config(_) => "ConfigError".into(),
            AppError::Remote { code, .. } => code.clone(),
            AppError::UnexpectedReply(_) => "UnexpectedReply".into(),
            AppError::NotAuthorized => "NotAuthorized".into(),
            AppError::ResultRejected(_) => "ResultRejected".into(),
            AppError::Wire(WireError::AuthFailure) | AppError::Crypto(CryptoError::AuthFailure) => {
                "AuthFailure".into()
            }
            AppError::Wire(_) => "WireError".into(),
            AppError::Crypto(_) => "CryptoError".into(),
            AppError::Market(e) => e.code().into(),
            AppError::Storage(StorageError::NotFound) => "NotFound".into(),
            AppError::Storage(StorageError::IntegrityError) => "IntegrityError".into(),
            AppError::Storage(_) => "StorageError".into(),
            AppError::Io(_) => "IoError".into(),
        }
    }
}

impl From<CanonicalError> for AppError {
    fn from(e: CanonicalError) -> Self {
        AppError::Wire(WireError::Parse(e))
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Config(e.to_string())
    }
}
