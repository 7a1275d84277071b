//! Marketplace broker, hash-chained ledger and content-addressed storage.

pub mod blob;
pub mod broker;
pub mod ledger;
pub mod listing;

pub use blob::{BlobStore, StorageError};
pub use broker::{MarketConfig, MarketError, Marketplace, SessionStatus};
pub use ledger::{ledger_verify, Ledger, LedgerEntry, LedgerRecord};
pub use listing::{Listing, ShareBundle};
