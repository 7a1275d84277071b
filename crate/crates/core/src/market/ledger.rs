//! Single-writer hash-chained ledger.
//!
//! Each entry's hash covers `[index, prev_hash, timestamp, record]`; the first
//! entry links to 32 zero bytes. Persisted as one canonical encoding per line
//! in `data_dir/ledger.log`.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::crypto::hash::{hash256, Digest};
use crate::policy::Timestamp;
use crate::wire::canonical::{CanonicalError, CanonicalValue, Record, RecordReader};

pub const GENESIS_PREV: Digest = [0u8; 32];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("ledger file is corrupt at line {0}")]
    Corrupt(usize),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for LedgerError {
    fn from(e: io::Error) -> Self {
        LedgerError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LedgerRecord {
    UserRegistered { pseudonym: Digest, role: String },
    ListingPublished { listing_id: Digest },
    SessionRequested { session_id: Digest, function_id: Digest, listing_ids: Vec<Digest> },
    SessionCompleted { session_id: Digest },
    SessionAborted { session_id: Digest, reason: String },
}

fn bytes(d: &Digest) -> CanonicalValue {
    CanonicalValue::bytes(d.to_vec())
}

impl LedgerRecord {
    pub fn kind(&self) -> &'static str {
        match self {
            LedgerRecord::UserRegistered { .. } => "UserRegistered",
            LedgerRecord::ListingPublished { .. } => "ListingPublished",
            LedgerRecord::SessionRequested { .. } => "SessionRequested",
            LedgerRecord::SessionCompleted { .. } => "SessionCompleted",
            LedgerRecord::SessionAborted { .. } => "SessionAborted",
        }
    }

    pub fn to_canonical(&self) -> CanonicalValue {
        let r = Record::new().with("kind", self.kind());
        match self {
            LedgerRecord::UserRegistered { pseudonym, role } => {
                r.with("pseudonym", bytes(pseudonym)).with("role", role.as_str())
            }
            LedgerRecord::ListingPublished { listing_id } => r.with("listing_id", bytes(listing_id)),
            LedgerRecord::SessionRequested { session_id, function_id, listing_ids } => r
                .with("function_id", bytes(function_id))
                .with("listing_ids", CanonicalValue::List(listing_ids.iter().map(bytes).collect()))
                .with("session_id", bytes(session_id)),
            LedgerRecord::SessionCompleted { session_id } => r.with("session_id", bytes(session_id)),
            LedgerRecord::SessionAborted { session_id, reason } => {
                r.with("reason", reason.as_str()).with("session_id", bytes(session_id))
            }
        }
        .build()
    }

    pub fn from_value(v: &CanonicalValue) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(v)?;
        let rec = match r.field("kind")?.as_text()? {
            "UserRegistered" => LedgerRecord::UserRegistered {
                pseudonym: r.field("pseudonym")?.as_array()?,
                role: r.field("role")?.as_text()?.to_owned(),
            },
            "ListingPublished" => LedgerRecord::ListingPublished { listing_id: r.field("listing_id")?.as_array()? },
            "SessionRequested" => LedgerRecord::SessionRequested {
                function_id: r.field("function_id")?.as_array()?,
                listing_ids: r
                    .field("listing_ids")?
                    .as_list()?
                    .iter()
                    .map(CanonicalValue::as_array)
                    .collect::<Result<_, _>>()?,
                session_id: r.field("session_id")?.as_array()?,
            },
            "SessionCompleted" => LedgerRecord::SessionCompleted { session_id: r.field("session_id")?.as_array()? },
            "SessionAborted" => LedgerRecord::SessionAborted {
                reason: r.field("reason")?.as_text()?.to_owned(),
                session_id: r.field("session_id")?.as_array()?,
            },
            other => return Err(CanonicalError::schema(format!("unknown ledger record kind {other}"))),
        };
        r.finish()?;
        Ok(rec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub index: u64,
    pub prev_hash: Digest,
    pub timestamp: Timestamp,
    pub record: LedgerRecord,
    pub hash: Digest,
}

pub fn entry_hash(index: u64, prev_hash: &Digest, timestamp: Timestamp, record: &LedgerRecord) -> Digest {
    hash256(
        &CanonicalValue::List(vec![
            CanonicalValue::int(index),
            bytes(prev_hash),
            CanonicalValue::int(timestamp),
            record.to_canonical(),
        ])
        .encode(),
    )
}

impl LedgerEntry {
    pub fn to_line(&self) -> Vec<u8> {
        Record::new()
            .with("hash", bytes(&self.hash))
            .with("index", self.index)
            .with("prev_hash", bytes(&self.prev_hash))
            .with("record", self.record.to_canonical())
            .with("timestamp", self.timestamp)
            .build()
            .encode()
    }

    pub fn from_line(line: &[u8]) -> Result<Self, CanonicalError> {
        let v = CanonicalValue::decode(line)?;
        let mut r = RecordReader::new(&v)?;
        let e = LedgerEntry {
            hash: r.field("hash")?.as_array()?,
            index: r.field("index")?.as_u64()?,
            prev_hash: r.field("prev_hash")?.as_array()?,
            record: LedgerRecord::from_value(r.field("record")?)?,
            timestamp: r.field("timestamp")?.as_u64()?,
        };
        r.finish()?;
        Ok(e)
    }
}

/// True iff indices count up from 0, every hash recomputes and every entry
/// links to its predecessor (the first to [`GENESIS_PREV`]).
pub fn ledger_verify(entries: &[LedgerEntry]) -> bool {
    let mut prev = GENESIS_PREV;
    for (i, e) in entries.iter().enumerate() {
        if e.index != i as u64
            || e.prev_hash != prev
            || entry_hash(e.index, &e.prev_hash, e.timestamp, &e.record) != e.hash
        {
            return false;
        }
        prev = e.hash;
    }
    true
}

fn parse_lines(bytes: &[u8]) -> Result<Vec<LedgerEntry>, LedgerError> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").ok_or(LedgerError::Corrupt(0))?;
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| LedgerEntry::from_line(line).map_err(|_| LedgerError::Corrupt(i)))
        .collect()
}

/// Verifies persisted ledger bytes; any parse failure counts as tampering.
pub fn verify_persisted(bytes: &[u8]) -> bool {
    parse_lines(bytes).map(|e| ledger_verify(&e)).unwrap_or(false)
}

#[derive(Debug)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    file: Option<PathBuf>,
    persisted: Vec<u8>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Ledger { entries: Vec::new(), file: None, persisted: Vec::new() }
    }

    /// Loads `data_dir/ledger.log`, creating it if missing. A file that does
    /// not verify is refused.
    pub fn open(data_dir: &Path) -> Result<Self, LedgerError> {
        fs::create_dir_all(data_dir)?;
        let path = data_dir.join("ledger.log");
        let persisted = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let entries = parse_lines(&persisted)?;
        if !ledger_verify(&entries) {
            return Err(LedgerError::Corrupt(entries.len()));
        }
        Ok(Ledger { entries, file: Some(path), persisted })
    }

    pub fn append(&mut self, record: LedgerRecord, timestamp: Timestamp) -> Result<&LedgerEntry, LedgerError> {
        let index = self.entries.len() as u64;
        let prev_hash = self.head();
        let hash = entry_hash(index, &prev_hash, timestamp, &record);
        let entry = LedgerEntry { index, prev_hash, timestamp, record, hash };
        let mut line = entry.to_line();
        line.push(b'\n');
        if let Some(path) = &self.file {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(&line)?;
            f.sync_data()?;
        }
        self.persisted.extend_from_slice(&line);
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Hash of the last entry, or the genesis link when empty.
    pub fn head(&self) -> Digest {
        self.entries.last().map_or(GENESIS_PREV, |e| e.hash)
    }

    pub fn verify(&self) -> bool {
        ledger_verify(&self.entries)
    }

    /// The bytes as written to the log file.
    pub fn persisted_bytes(&self) -> &[u8] {
        &self.persisted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records() -> Vec<LedgerRecord> {
        vec![
            LedgerRecord::UserRegistered { pseudonym: [1; 32], role: "owner".into() },
            LedgerRecord::ListingPublished { listing_id: [2; 32] },
            LedgerRecord::SessionRequested { session_id: [3; 32], function_id: [4; 32], listing_ids: vec![[2; 32]] },
            LedgerRecord::SessionCompleted { session_id: [3; 32] },
            LedgerRecord::SessionAborted { session_id: [5; 32], reason: "Timeout".into() },
        ]
    }

    fn filled() -> Ledger {
        let mut l = Ledger::in_memory();
        for (i, r) in records().into_iter().enumerate() {
            l.append(r, 100 + i as u64).unwrap();
        }
        l
    }

    #[test]
    fn fresh_chain_verifies() {
        let l = filled();
        assert_eq!(l.len(), 5);
        assert!(l.verify());
        assert_eq!(l.entries()[0].prev_hash, [0u8; 32]);
        assert!(verify_persisted(l.persisted_bytes()));
    }

    #[test]
    fn mutated_record_breaks_chain() {
        let l = filled();
        let mut entries = l.entries().to_vec();
        entries[3].record = LedgerRecord::SessionCompleted { session_id: [6; 32] };
        assert!(!ledger_verify(&entries));
    }

    #[test]
    fn every_persisted_bit_flip_is_detected() {
        let mut l = Ledger::in_memory();
        for r in records().into_iter().take(3) {
            l.append(r, 7).unwrap();
        }
        let bytes = l.persisted_bytes().to_vec();
        for i in 0..bytes.len() {
            for bit in 0..8 {
                let mut bad = bytes.clone();
                bad[i] ^= 1 << bit;
                assert!(!verify_persisted(&bad), "flip at byte {i} bit {bit} undetected");
            }
        }
    }

    #[test]
    fn file_backed_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut l = Ledger::open(dir.path()).unwrap();
            for r in records() {
                l.append(r, 1).unwrap();
            }
        }
        let l = Ledger::open(dir.path()).unwrap();
        assert_eq!(l.len(), 5);
        assert!(l.verify());
        let on_disk = fs::read(dir.path().join("ledger.log")).unwrap();
        assert_eq!(on_disk, l.persisted_bytes());
        let mut bad = on_disk.clone();
        bad[10] ^= 1;
        fs::write(dir.path().join("ledger.log"), bad).unwrap();
        assert!(Ledger::open(dir.path()).is_err());
    }

    #[test]
    fn records_round_trip() {
        for r in records() {
            assert_eq!(LedgerRecord::from_value(&r.to_canonical()).unwrap(), r);
        }
    }
}
