//! Blocking driver for one node over a real transport.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::crypto::hash::Digest;
use crate::wire::transport::Transport;
use crate::wire::WireError;

use super::messages::ResultMessage;
use super::session::{Node, NodeServices, Outgoing, SessionState};

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub session_id: Digest,
    pub state: SessionState,
    pub result: Option<ResultMessage>,
}

pub fn wall_clock_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn flush<T: Transport + ?Sized>(transport: &mut T, out: Vec<Outgoing>) {
    for o in out {
        // an unreachable recipient shows up as a timeout on its side
        let _ = transport.send(&o.to, &o.envelope);
    }
}

/// Runs the node until one session reaches a terminal phase. Returns `None`
/// if no envelope arrives for `idle_limit` while no session is live.
pub fn run_session<T: Transport + ?Sized>(
    node: &mut Node,
    transport: &mut T,
    services: &mut dyn NodeServices,
    clock: &dyn Fn() -> u64,
    idle_limit: Duration,
) -> Result<Option<SessionOutcome>, WireError> {
    let mut idle_since = clock();
    loop {
        if let Some(sid) = node.take_finished().into_iter().next() {
            let state = node.session(&sid).expect("finished session exists").clone();
            let result = node.result(&sid).cloned();
            return Ok(Some(SessionOutcome { session_id: sid, state, result }));
        }
        let now = clock();
        let wait = match node.next_deadline() {
            Some(d) => d.saturating_sub(now).clamp(1, 200),
            None => {
                if now.saturating_sub(idle_since) >= idle_limit.as_millis() as u64 {
                    return Ok(None);
                }
                200
            }
        };
        if let Some(env) = transport.recv(Duration::from_millis(wait))? {
            idle_since = clock();
            let out = node.handle(&env, clock(), services);
            flush(transport, out);
        }
        let out = node.tick(clock());
        flush(transport, out);
    }
}
