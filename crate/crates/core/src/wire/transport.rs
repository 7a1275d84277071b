//! Transports deliver whole envelopes, in order per sender.
//!
//! * [`DeterministicBus`]: in-process, single-threaded; the interleaving of
//!   different senders is drawn from a seeded generator.
//! * [`SocketTransport`]: TCP, each envelope framed as a 4-byte big-endian
//!   length followed by its canonical bytes.
//! * [`MemoryHub`]: in-process channels for threaded tests.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::Rng;

use super::envelope::{ActorId, Envelope};
use super::WireError;
use crate::math::GroupParams;

/// Frames larger than this are refused.
pub const MAX_FRAME_LEN: usize = 64 << 20;

pub trait Transport {
    fn send(&mut self, to: &ActorId, envelope: &Envelope) -> Result<(), WireError>;

    /// Next inbound envelope, or `None` on timeout.
    fn recv(&mut self, timeout: Duration) -> Result<Option<Envelope>, WireError>;
}

pub fn write_frame<W: Write>(w: &mut W, bytes: &[u8]) -> Result<(), WireError> {
    if bytes.len() > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(bytes.len()));
    }
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn write_envelope<W: Write>(w: &mut W, envelope: &Envelope) -> Result<(), WireError> {
    write_frame(w, &envelope.to_bytes())
}

pub fn read_envelope<R: Read>(r: &mut R, params: &GroupParams) -> Result<Option<Envelope>, WireError> {
    read_frame(r)?.map(|b| Envelope::from_bytes(&b, params)).transpose()
}

/// One request frame, one reply frame.
pub fn call(addr: SocketAddr, request: &Envelope, params: &GroupParams, timeout: Duration) -> Result<Envelope, WireError> {
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    write_envelope(&mut stream, request)?;
    read_envelope(&mut stream, params)?.ok_or(WireError::Closed)
}

/// A message in flight on the bus.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub from: ActorId,
    pub to: ActorId,
    pub envelope: Envelope,
}

/// Single-threaded message bus with reproducible delivery order.
///
/// Messages between one (sender, recipient) pair stay FIFO; which pair is
/// served next is drawn from the caller's seeded generator. Every posted
/// envelope is kept in the transcript.
#[derive(Debug, Default)]
pub struct DeterministicBus {
    queues: BTreeMap<(ActorId, ActorId), VecDeque<Envelope>>,
    urgent: VecDeque<Delivery>,
    transcript: Vec<Delivery>,
}

impl DeterministicBus {
    pub fn new() -> Self {
        DeterministicBus::default()
    }

    pub fn post(&mut self, from: ActorId, to: ActorId, envelope: Envelope) {
        self.transcript.push(Delivery { from, to, envelope: envelope.clone() });
        self.queues.entry((from, to)).or_default().push_back(envelope);
    }

    /// Schedules `envelope` ahead of everything else, as a network adversary
    /// re-injecting a captured message would.
    pub fn inject(&mut self, from: ActorId, to: ActorId, envelope: Envelope) {
        let d = Delivery { from, to, envelope };
        self.transcript.push(d.clone());
        self.urgent.push_back(d);
    }

    /// Records traffic that was delivered synchronously (request/response).
    pub fn record(&mut self, from: ActorId, to: ActorId, envelope: &Envelope) {
        self.transcript.push(Delivery { from, to, envelope: envelope.clone() });
    }

    pub fn is_idle(&self) -> bool {
        self.urgent.is_empty() && self.queues.values().all(VecDeque::is_empty)
    }

    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<Delivery> {
        if let Some(d) = self.urgent.pop_front() {
            return Some(d);
        }
        let ready: Vec<(ActorId, ActorId)> = self
            .queues
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(k, _)| *k)
            .collect();
        if ready.is_empty() {
            return None;
        }
        let (from, to) = ready[rng.gen_range(0..ready.len())];
        let envelope = self.queues.get_mut(&(from, to))?.pop_front()?;
        Some(Delivery { from, to, envelope })
    }

    pub fn transcript(&self) -> &[Delivery] {
        &self.transcript
    }
}

/// TCP transport. A background thread accepts connections and feeds every
/// received envelope, from any peer, into one queue.
pub struct SocketTransport {
    params: GroupParams,
    peers: HashMap<ActorId, SocketAddr>,
    inbox: Receiver<Envelope>,
    local: SocketAddr,
}

impl SocketTransport {
    pub fn bind(addr: SocketAddr, params: GroupParams, peers: HashMap<ActorId, SocketAddr>) -> Result<Self, WireError> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let accept_params = params.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let tx = tx.clone();
                let params = accept_params.clone();
                thread::spawn(move || {
                    while let Ok(Some(env)) = read_envelope(&mut stream, &params) {
                        if tx.send(env).is_err() {
                            return;
                        }
                    }
                });
            }
        });
        Ok(SocketTransport { params, peers, inbox: rx, local })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn add_peer(&mut self, id: ActorId, addr: SocketAddr) {
        self.peers.insert(id, addr);
    }
}

impl Transport for SocketTransport {
    fn send(&mut self, to: &ActorId, envelope: &Envelope) -> Result<(), WireError> {
        let addr = self.peers.get(to).ok_or(WireError::UnknownSender)?;
        let mut stream = TcpStream::connect(addr)?;
        write_envelope(&mut stream, envelope)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Option<Envelope>, WireError> {
        let _ = &self.params;
        match self.inbox.recv_timeout(timeout) {
            Ok(env) => Ok(Some(env)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(WireError::Closed),
        }
    }
}

/// In-process channels keyed by actor id.
#[derive(Clone, Default)]
pub struct MemoryHub {
    senders: Arc<Mutex<HashMap<ActorId, Sender<Envelope>>>>,
}

pub struct MemoryTransport {
    hub: MemoryHub,
    inbox: Receiver<Envelope>,
}

impl MemoryHub {
    pub fn new() -> Self {
        MemoryHub::default()
    }

    pub fn endpoint(&self, id: ActorId) -> MemoryTransport {
        let (tx, rx) = mpsc::channel();
        self.senders.lock().expect("hub lock").insert(id, tx);
        MemoryTransport { hub: self.clone(), inbox: rx }
    }
}

impl Transport for MemoryTransport {
    fn send(&mut self, to: &ActorId, envelope: &Envelope) -> Result<(), WireError> {
        let senders = self.hub.senders.lock().expect("hub lock");
        let tx = senders.get(to).ok_or(WireError::UnknownSender)?;
        // a recipient that already exited is not an error for the sender
        let _ = tx.send(envelope.clone());
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<Option<Envelope>, WireError> {
        match self.inbox.recv_timeout(timeout) {
            Ok(env) => Ok(Some(env)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(WireError::Closed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::schnorr::SigKeyPair;
    use crate::wire::canonical::CanonicalValue;
    use crate::wire::envelope::{actor_id, seal};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn envelope(params: &GroupParams, rng: &mut ChaCha20Rng, n: u64) -> Envelope {
        let key = SigKeyPair::from_secret(params, params.scalars().from_u64(7));
        seal(params, &key, "T", None, CanonicalValue::int(n), rng)
    }

    #[test]
    fn frame_layout_is_length_prefixed() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"abc").unwrap();
        assert_eq!(buf, [0, 0, 0, 3, b'a', b'b', b'c']);
        let mut cursor = io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cursor).unwrap().unwrap(), b"abc");
        assert_eq!(read_frame(&mut cursor).unwrap(), None);
    }

    #[test]
    fn oversized_frame_refused() {
        let mut cursor = io::Cursor::new(vec![0xff, 0xff, 0xff, 0xff]);
        assert!(matches!(read_frame(&mut cursor), Err(WireError::FrameTooLarge(_))));
    }

    #[test]
    fn bus_preserves_per_pair_order_and_is_reproducible() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let run = |seed: u64, rng: &mut ChaCha20Rng| {
            let mut bus = DeterministicBus::new();
            for n in 0..20u64 {
                let from = [(n % 3) as u8; 32];
                let to = [9u8; 32];
                bus.post(from, to, envelope(&params, rng, n));
            }
            let mut order_rng = ChaCha20Rng::seed_from_u64(seed);
            let mut out = Vec::new();
            while let Some(d) = bus.next(&mut order_rng) {
                out.push((d.from[0], d.envelope.payload.as_u64().unwrap()));
            }
            out
        };
        let a = run(5, &mut rng);
        let mut rng2 = ChaCha20Rng::seed_from_u64(1);
        let b = run(5, &mut rng2);
        assert_eq!(a, b);
        for sender in 0..3u8 {
            let seq: Vec<u64> = a.iter().filter(|(s, _)| *s == sender).map(|(_, n)| *n).collect();
            assert!(seq.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(a.len(), 20);
    }

    #[test]
    fn injected_messages_go_first() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut bus = DeterministicBus::new();
        bus.post([1; 32], [2; 32], envelope(&params, &mut rng, 1));
        bus.inject([1; 32], [2; 32], envelope(&params, &mut rng, 2));
        let first = bus.next(&mut rng).unwrap();
        assert_eq!(first.envelope.payload.as_u64().unwrap(), 2);
        assert_eq!(bus.transcript().len(), 2);
    }

    #[test]
    fn socket_transport_delivers_frames() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a_id = actor_id(&params, params.g());
        let b_id = [2u8; 32];
        let mut a = SocketTransport::bind("127.0.0.1:0".parse().unwrap(), params.clone(), HashMap::new()).unwrap();
        let mut b = SocketTransport::bind("127.0.0.1:0".parse().unwrap(), params.clone(), HashMap::new()).unwrap();
        b.add_peer(a_id, a.local_addr());
        a.add_peer(b_id, b.local_addr());
        let env = envelope(&params, &mut rng, 42);
        b.send(&a_id, &env).unwrap();
        assert_eq!(a.recv(Duration::from_secs(5)).unwrap(), Some(env.clone()));
        a.send(&b_id, &env).unwrap();
        assert_eq!(b.recv(Duration::from_secs(5)).unwrap(), Some(env));
        assert_eq!(a.recv(Duration::from_millis(10)).unwrap(), None);
    }

    #[test]
    fn memory_hub_routes_by_id() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let hub = MemoryHub::new();
        let mut x = hub.endpoint([1; 32]);
        let mut y = hub.endpoint([2; 32]);
        let env = envelope(&params, &mut rng, 3);
        x.send(&[2; 32], &env).unwrap();
        assert_eq!(y.recv(Duration::from_secs(1)).unwrap(), Some(env));
        assert!(matches!(x.send(&[3; 32], &envelope(&params, &mut rng, 1)), Err(WireError::UnknownSender)));
    }
}
