use std::fs;

use kraken_core::market::ledger::LedgerError;
use kraken_core::market::{BlobStore, Ledger, LedgerRecord, StorageError};

#[test]
fn ledger_survives_reopen_and_refuses_edits() {
    let dir = tempfile::tempdir().unwrap();
    {
        let mut l = Ledger::open(dir.path()).unwrap();
        l.append(LedgerRecord::ListingPublished { listing_id: [1; 32] }, 10).unwrap();
        l.append(LedgerRecord::SessionCompleted { session_id: [2; 32] }, 11).unwrap();
    }
    let l = Ledger::open(dir.path()).unwrap();
    assert_eq!(l.len(), 2);
    assert!(l.verify());
    let head = l.head();
    drop(l);

    let mut l = Ledger::open(dir.path()).unwrap();
    l.append(LedgerRecord::SessionCompleted { session_id: [3; 32] }, 12).unwrap();
    assert_ne!(l.head(), head);
    drop(l);

    let path = dir.path().join("ledger.log");
    let mut bytes = fs::read(&path).unwrap();
    let last_line = bytes.iter().rposition(|&b| b == b'\n').unwrap();
    bytes[last_line / 2] ^= 0x20;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(Ledger::open(dir.path()), Err(LedgerError::Corrupt(_))));
}

#[test]
fn blobs_live_under_their_content_id() {
    let dir = tempfile::tempdir().unwrap();
    let id = BlobStore::open(dir.path()).unwrap().put(b"share bundle bytes").unwrap();
    let file = dir.path().join("blobs").join(hex::encode(id));
    assert!(file.exists());

    let store = BlobStore::open(dir.path()).unwrap();
    assert_eq!(store.get(&id).unwrap(), b"share bundle bytes");
    fs::write(&file, b"share bundle bytez").unwrap();
    assert!(matches!(store.get(&id), Err(StorageError::IntegrityError)));
    store.delete(&id).unwrap();
    assert!(matches!(store.get(&id), Err(StorageError::NotFound)));
}
