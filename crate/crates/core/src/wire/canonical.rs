//! Canonical value encoding.
//!
//! A JSON-like text format with exactly one encoding per value:
//!
//! * integers: base 10, no leading zeros, no `-0`
//! * byte strings: `x"<lowercase hex>"`
//! * text: `"..."`, escaping only `"`, `\` and control characters (`\u00xx`)
//! * lists: `[a,b]`
//! * maps: `{"k":v}` with keys in strictly increasing byte order
//!
//! No whitespace anywhere. The decoder accepts only canonical input, so
//! `encode(decode(b)) == b` for every `b` it accepts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{ToPrimitive, Zero};

use crate::math::{FieldElement, GroupElement, GroupParams, ScalarField};

const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CanonicalError {
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: &'static str },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unexpected field {0:?}")]
    UnexpectedField(String),
}

impl CanonicalError {
    pub fn schema(msg: impl Into<String>) -> Self {
        CanonicalError::Schema(msg.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CanonicalValue {
    Int(BigInt),
    Bytes(Vec<u8>),
    Text(String),
    List(Vec<CanonicalValue>),
    Map(BTreeMap<String, CanonicalValue>),
}

impl CanonicalValue {
    pub fn int(v: impl Into<BigInt>) -> Self {
        CanonicalValue::Int(v.into())
    }

    pub fn text(s: impl Into<String>) -> Self {
        CanonicalValue::Text(s.into())
    }

    pub fn bytes(b: impl Into<Vec<u8>>) -> Self {
        CanonicalValue::Bytes(b.into())
    }

    /// Big integers are carried as lowercase hex text.
    pub fn hex_int(v: &BigUint) -> Self {
        CanonicalValue::Text(v.to_str_radix(16))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = String::new();
        self.write_to(&mut out);
        out.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CanonicalError> {
        let mut p = Parser { buf: bytes, pos: 0 };
        let v = p.value(0)?;
        if p.pos != bytes.len() {
            return Err(p.err("trailing bytes"));
        }
        Ok(v)
    }

    fn write_to(&self, out: &mut String) {
        match self {
            CanonicalValue::Int(i) => {
                let _ = write!(out, "{i}");
            }
            CanonicalValue::Bytes(b) => {
                out.push_str("x\"");
                out.push_str(&hex::encode(b));
                out.push('"');
            }
            CanonicalValue::Text(s) => write_text(s, out),
            CanonicalValue::List(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    item.write_to(out);
                }
                out.push(']');
            }
            CanonicalValue::Map(m) => {
                out.push('{');
                for (i, (k, v)) in m.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write_text(k, out);
                    out.push(':');
                    v.write_to(out);
                }
                out.push('}');
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CanonicalValue::Int(_) => "int",
            CanonicalValue::Bytes(_) => "bytes",
            CanonicalValue::Text(_) => "text",
            CanonicalValue::List(_) => "list",
            CanonicalValue::Map(_) => "map",
        }
    }

    pub fn as_int(&self) -> Result<&BigInt, CanonicalError> {
        match self {
            CanonicalValue::Int(i) => Ok(i),
            other => Err(type_error("int", other)),
        }
    }

    pub fn as_u64(&self) -> Result<u64, CanonicalError> {
        self.as_int()?
            .to_u64()
            .ok_or_else(|| CanonicalError::schema("integer out of u64 range"))
    }

    pub fn as_usize(&self) -> Result<usize, CanonicalError> {
        self.as_int()?
            .to_usize()
            .ok_or_else(|| CanonicalError::schema("integer out of usize range"))
    }

    pub fn as_bytes(&self) -> Result<&[u8], CanonicalError> {
        match self {
            CanonicalValue::Bytes(b) => Ok(b),
            other => Err(type_error("bytes", other)),
        }
    }

    pub fn as_array<const N: usize>(&self) -> Result<[u8; N], CanonicalError> {
        self.as_bytes()?
            .try_into()
            .map_err(|_| CanonicalError::schema(format!("expected {N} bytes")))
    }

    pub fn as_text(&self) -> Result<&str, CanonicalError> {
        match self {
            CanonicalValue::Text(s) => Ok(s),
            other => Err(type_error("text", other)),
        }
    }

    pub fn as_list(&self) -> Result<&[CanonicalValue], CanonicalError> {
        match self {
            CanonicalValue::List(l) => Ok(l),
            other => Err(type_error("list", other)),
        }
    }

    pub fn as_map(&self) -> Result<&BTreeMap<String, CanonicalValue>, CanonicalError> {
        match self {
            CanonicalValue::Map(m) => Ok(m),
            other => Err(type_error("map", other)),
        }
    }

    /// Parses a lowercase-hex big integer without leading zeros.
    pub fn as_hex_int(&self) -> Result<BigUint, CanonicalError> {
        let s = self.as_text()?;
        let well_formed = !s.is_empty()
            && s.bytes().all(|c| c.is_ascii_digit() || (b'a'..=b'f').contains(&c))
            && (s == "0" || !s.starts_with('0'));
        if !well_formed {
            return Err(CanonicalError::schema(format!("malformed hex integer {s:?}")));
        }
        BigUint::parse_bytes(s.as_bytes(), 16)
            .ok_or_else(|| CanonicalError::schema("malformed hex integer"))
    }

    pub fn as_field(&self, field: &ScalarField) -> Result<FieldElement, CanonicalError> {
        field
            .element(self.as_hex_int()?)
            .map_err(|e| CanonicalError::schema(e.to_string()))
    }

    pub fn as_group(&self, params: &GroupParams) -> Result<GroupElement, CanonicalError> {
        params
            .element(self.as_hex_int()?)
            .map_err(|e| CanonicalError::schema(e.to_string()))
    }
}

impl From<&FieldElement> for CanonicalValue {
    fn from(x: &FieldElement) -> Self {
        CanonicalValue::hex_int(x.value())
    }
}

impl From<&GroupElement> for CanonicalValue {
    fn from(x: &GroupElement) -> Self {
        CanonicalValue::hex_int(x.value())
    }
}

impl From<u64> for CanonicalValue {
    fn from(x: u64) -> Self {
        CanonicalValue::Int(x.into())
    }
}

impl From<&str> for CanonicalValue {
    fn from(s: &str) -> Self {
        CanonicalValue::Text(s.to_owned())
    }
}

fn type_error(want: &str, got: &CanonicalValue) -> CanonicalError {
    CanonicalError::Schema(format!("expected {want}, found {}", got.kind()))
}

fn write_text(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if (c as u32) < 0x20 || c as u32 == 0x7f => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

struct Parser<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, reason: &'static str) -> CanonicalError {
        CanonicalError::Parse { offset: self.pos, reason }
    }

    fn peek(&self) -> Option<u8> {
        self.buf.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8, reason: &'static str) -> Result<(), CanonicalError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(reason))
        }
    }

    fn value(&mut self, depth: usize) -> Result<CanonicalValue, CanonicalError> {
        if depth > MAX_DEPTH {
            return Err(self.err("nesting too deep"));
        }
        match self.peek() {
            Some(b'-') | Some(b'0'..=b'9') => self.int(),
            Some(b'x') => self.bytes(),
            Some(b'"') => Ok(CanonicalValue::Text(self.text()?)),
            Some(b'[') => self.list(depth),
            Some(b'{') => self.map(depth),
            Some(_) => Err(self.err("unexpected byte")),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn int(&mut self) -> Result<CanonicalValue, CanonicalError> {
        let negative = self.peek() == Some(b'-');
        if negative {
            self.pos += 1;
        }
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        let digits = &self.buf[start..self.pos];
        if digits.is_empty() {
            return Err(self.err("expected digits"));
        }
        if digits.len() > 1 && digits[0] == b'0' {
            return Err(self.err("leading zero"));
        }
        let magnitude = BigUint::parse_bytes(digits, 10).ok_or_else(|| self.err("bad integer"))?;
        if negative && magnitude.is_zero() {
            return Err(self.err("negative zero"));
        }
        let sign = if negative { Sign::Minus } else { Sign::Plus };
        Ok(CanonicalValue::Int(BigInt::from_biguint(sign, magnitude)))
    }

    fn bytes(&mut self) -> Result<CanonicalValue, CanonicalError> {
        self.expect(b'x', "expected byte string")?;
        self.expect(b'"', "expected quote")?;
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9') | Some(b'a'..=b'f')) {
            self.pos += 1;
        }
        let hex_digits = &self.buf[start..self.pos];
        if !hex_digits.len().is_multiple_of(2) {
            return Err(self.err("odd-length hex"));
        }
        self.expect(b'"', "expected closing quote on byte string")?;
        let decoded = hex::decode(hex_digits).map_err(|_| self.err("bad hex"))?;
        Ok(CanonicalValue::Bytes(decoded))
    }

    fn text(&mut self) -> Result<String, CanonicalError> {
        self.expect(b'"', "expected text")?;
        let mut out = Vec::new();
        loop {
            let c = self.peek().ok_or_else(|| self.err("unterminated text"))?;
            match c {
                b'"' => {
                    self.pos += 1;
                    break;
                }
                b'\\' => {
                    self.pos += 1;
                    match self.peek() {
                        Some(b'"') => out.push(b'"'),
                        Some(b'\\') => out.push(b'\\'),
                        Some(b'u') => {
                            let digits = self
                                .buf
                                .get(self.pos + 1..self.pos + 5)
                                .ok_or_else(|| self.err("short escape"))?;
                            if !digits.starts_with(b"00")
                                || !digits
                                    .iter()
                                    .all(|d| d.is_ascii_digit() || (b'a'..=b'f').contains(d))
                            {
                                return Err(self.err("bad escape"));
                            }
                            let code = u8::from_str_radix(
                                std::str::from_utf8(&digits[2..]).expect("ascii"),
                                16,
                            )
                            .map_err(|_| self.err("bad escape"))?;
                            if code >= 0x20 && code != 0x7f {
                                return Err(self.err("needless escape"));
                            }
                            out.push(code);
                            self.pos += 4;
                        }
                        _ => return Err(self.err("bad escape")),
                    }
                    self.pos += 1;
                }
                c if c < 0x20 || c == 0x7f => return Err(self.err("raw control character")),
                c => {
                    out.push(c);
                    self.pos += 1;
                }
            }
        }
        String::from_utf8(out).map_err(|_| self.err("invalid utf-8"))
    }

    fn list(&mut self, depth: usize) -> Result<CanonicalValue, CanonicalError> {
        self.expect(b'[', "expected list")?;
        let mut items = Vec::new();
        if self.peek() == Some(b']') {
            self.pos += 1;
            return Ok(CanonicalValue::List(items));
        }
        loop {
            items.push(self.value(depth + 1)?);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b']') => {
                    self.pos += 1;
                    return Ok(CanonicalValue::List(items));
                }
                _ => return Err(self.err("expected , or ]")),
            }
        }
    }

    fn map(&mut self, depth: usize) -> Result<CanonicalValue, CanonicalError> {
        self.expect(b'{', "expected map")?;
        let mut entries: BTreeMap<String, CanonicalValue> = BTreeMap::new();
        if self.peek() == Some(b'}') {
            self.pos += 1;
            return Ok(CanonicalValue::Map(entries));
        }
        let mut last: Option<String> = None;
        loop {
            let key_pos = self.pos;
            let key = self.text()?;
            if let Some(prev) = &last {
                if prev == &key {
                    return Err(CanonicalError::Parse { offset: key_pos, reason: "duplicate key" });
                }
                if prev.as_bytes() > key.as_bytes() {
                    return Err(CanonicalError::Parse { offset: key_pos, reason: "unsorted keys" });
                }
            }
            self.expect(b':', "expected :")?;
            let v = self.value(depth + 1)?;
            entries.insert(key.clone(), v);
            last = Some(key);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {
                    self.pos += 1;
                    return Ok(CanonicalValue::Map(entries));
                }
                _ => return Err(self.err("expected , or }")),
            }
        }
    }
}

/// Builder for map-shaped records.
#[derive(Debug, Default, Clone)]
pub struct Record(BTreeMap<String, CanonicalValue>);

impl Record {
    pub fn new() -> Self {
        Record::default()
    }

    pub fn with(mut self, key: &str, value: impl Into<CanonicalValue>) -> Self {
        self.0.insert(key.to_owned(), value.into());
        self
    }

    pub fn with_opt(self, key: &str, value: Option<CanonicalValue>) -> Self {
        match value {
            Some(v) => self.with(key, v),
            None => self,
        }
    }

    pub fn build(self) -> CanonicalValue {
        CanonicalValue::Map(self.0)
    }
}

impl From<Record> for CanonicalValue {
    fn from(r: Record) -> Self {
        r.build()
    }
}

impl From<Vec<CanonicalValue>> for CanonicalValue {
    fn from(v: Vec<CanonicalValue>) -> Self {
        CanonicalValue::List(v)
    }
}

/// Strict reader for map-shaped records: every key must be consumed.
pub struct RecordReader<'a> {
    map: &'a BTreeMap<String, CanonicalValue>,
    taken: Vec<&'a str>,
}

impl<'a> RecordReader<'a> {
    pub fn new(value: &'a CanonicalValue) -> Result<Self, CanonicalError> {
        Ok(RecordReader { map: value.as_map()?, taken: Vec::new() })
    }

    pub fn field(&mut self, key: &'a str) -> Result<&'a CanonicalValue, CanonicalError> {
        self.taken.push(key);
        self.map
            .get(key)
            .ok_or_else(|| CanonicalError::Schema(format!("missing field {key:?}")))
    }

    pub fn optional(&mut self, key: &'a str) -> Option<&'a CanonicalValue> {
        self.taken.push(key);
        self.map.get(key)
    }

    /// Fails on the first key that was never read.
    pub fn finish(self) -> Result<(), CanonicalError> {
        match self.map.keys().find(|k| !self.taken.contains(&k.as_str())) {
            Some(extra) => Err(CanonicalError::UnexpectedField(extra.clone())),
            None => Ok(()),
        }
    }
}

/// Types with a canonical record form.
pub trait Canonical: Sized {
    fn to_canonical(&self) -> CanonicalValue;

    fn canonical_bytes(&self) -> Vec<u8> {
        self.to_canonical().encode()
    }
}

/// Decoding counterpart of [`Canonical`] for types that need group parameters.
pub trait FromCanonical: Sized {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError>;

    fn from_canonical_bytes(bytes: &[u8], params: &GroupParams) -> Result<Self, CanonicalError> {
        Self::from_canonical(&CanonicalValue::decode(bytes)?, params)
    }
}

pub fn field_list(items: &[FieldElement]) -> CanonicalValue {
    CanonicalValue::List(items.iter().map(CanonicalValue::from).collect())
}

pub fn group_list(items: &[GroupElement]) -> CanonicalValue {
    CanonicalValue::List(items.iter().map(CanonicalValue::from).collect())
}

pub fn parse_field_list(
    value: &CanonicalValue,
    field: &ScalarField,
) -> Result<Vec<FieldElement>, CanonicalError> {
    value.as_list()?.iter().map(|v| v.as_field(field)).collect()
}

pub fn parse_group_list(
    value: &CanonicalValue,
    params: &GroupParams,
) -> Result<Vec<GroupElement>, CanonicalError> {
    value.as_list()?.iter().map(|v| v.as_group(params)).collect()
}
