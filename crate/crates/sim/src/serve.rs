//! Socket mode: each actor in its own process, reached over TCP with
//! length-prefixed envelope frames.
//!
//! Market, storage and the dealer answer one request per connection. Nodes
//! and the consumer listen on a [`SocketTransport`] and never reply on the
//! connection a message arrived on.

use std::collections::{BTreeMap, HashMap};
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use kraken_core::crypto::hash::Digest;
use kraken_core::market::broker::{ERROR, OK_SUFFIX};
use kraken_core::market::{BlobStore, Marketplace};
use kraken_core::math::GroupParams;
use kraken_core::mpc::driver::wall_clock_ms;
use kraken_core::mpc::messages as msg;
use kraken_core::mpc::{
    input_root, run_session, Node, NodeBehavior, NodeConfig, Outgoing, ResultMessage, SessionOutcome,
    DEFAULT_PHASE_TIMEOUT_MS,
};
use kraken_core::wire::transport::{call, read_envelope, write_envelope};
use kraken_core::wire::{ActorId, CanonicalValue, Envelope, FromCanonical, SocketTransport, Transport};

use crate::actors::{consumer_finalize, device_capture, owner_prepare_and_publish, Expectation, Finalized, Link, Published};
use crate::client::{Endpoint, MarketApi, Rpc};
use crate::deploy::{fresh_seed, node_key_name, owner_key_name, parse_element, Deployment, KeyFile};
use crate::error::AppError;
use crate::scenario::{FunctionSpec, PolicySpec};
use crate::services::{DealerService, NodeLink, StorageService};

/// How long a client waits for one reply.
pub const RPC_TIMEOUT: Duration = Duration::from_secs(30);

pub fn wall_clock_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Request/reply over one TCP connection per call.
pub struct SocketRpc {
    params: GroupParams,
    addrs: HashMap<ActorId, SocketAddr>,
    timeout: Duration,
}

impl SocketRpc {
    pub fn new(params: GroupParams, addrs: HashMap<ActorId, SocketAddr>) -> Self {
        SocketRpc { params, addrs, timeout: RPC_TIMEOUT }
    }
}

impl Rpc for SocketRpc {
    fn call(&mut self, to: &ActorId, request: Envelope) -> Result<Envelope, AppError> {
        let addr = self.addrs.get(to).ok_or_else(|| AppError::config("no address for recipient"))?;
        Ok(call(*addr, &request, &self.params, self.timeout)?)
    }
}

/// Separates the direct reply to `requester` from messages for others.
pub fn split_reply(mut out: Vec<Outgoing>, requester: &ActorId) -> (Option<Envelope>, Vec<Outgoing>) {
    let pos = out.iter().position(|o| {
        o.to == *requester && (o.envelope.msg_type == ERROR || o.envelope.msg_type.ends_with(OK_SUFFIX))
    });
    (pos.map(|p| out.remove(p).envelope), out)
}

/// Fire-and-forget delivery to listening actors.
pub fn deliver(addrs: &HashMap<ActorId, SocketAddr>, out: Vec<Outgoing>) {
    for o in out {
        let sent = addrs
            .get(&o.to)
            .ok_or_else(|| std::io::Error::new(ErrorKind::NotFound, "no address"))
            .and_then(TcpStream::connect)
            .map_err(AppError::from)
            .and_then(|mut s| Ok(write_envelope(&mut s, &o.envelope)?));
        if let Err(e) = sent {
            eprintln!("delivery of {} failed: {e}", o.envelope.msg_type);
        }
    }
}

/// Serves connections one at a time: one request frame in, at most one
/// reply frame out.
pub fn serve_requests<F>(listener: TcpListener, params: &GroupParams, mut handle: F) -> Result<(), AppError>
where
    F: FnMut(&Envelope) -> Option<Envelope>,
{
    for stream in listener.incoming() {
        let mut stream = match stream {
            Ok(s) => s,
            Err(e) => {
                eprintln!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_read_timeout(Some(RPC_TIMEOUT));
        let request = match read_envelope(&mut stream, params) {
            Ok(Some(env)) => env,
            Ok(None) => continue,
            Err(e) => {
                eprintln!("dropping malformed request: {e}");
                continue;
            }
        };
        if let Some(reply) = handle(&request) {
            if let Err(e) = write_envelope(&mut stream, &reply) {
                eprintln!("reply to {} failed: {e}", request.msg_type);
            }
        }
    }
    Ok(())
}

fn bind(addr: SocketAddr) -> Result<TcpListener, AppError> {
    Ok(TcpListener::bind(addr)?)
}

pub fn serve_market(d: &Deployment, keys: &KeyFile, data_dir: &Path, listener: Option<TcpListener>) -> Result<(), AppError> {
    let params = d.params()?;
    let addrs = d.addresses(&params)?;
    std::fs::create_dir_all(data_dir)?;
    let mut market = Marketplace::open(crate::deploy::market_config(d, keys)?, data_dir)?;
    if market.user_gpk().to_hex() != d.user_gpk {
        return Err(AppError::config("market seed does not match the deployment's user group key"));
    }
    let listener = match listener {
        Some(l) => l,
        None => bind(d.market.address()?)?,
    };
    serve_requests(listener, &params, |env| {
        let out = market.handle(env, wall_clock_secs());
        let (reply, rest) = split_reply(out, &env.sender_id);
        deliver(&addrs, rest);
        reply
    })
}

pub fn serve_storage(d: &Deployment, keys: &KeyFile, data_dir: &Path, listener: Option<TcpListener>) -> Result<(), AppError> {
    let params = d.params()?;
    let endpoint = Endpoint::new(params.clone(), keys.signing(&params)?, d.directory(&params)?, fresh_seed());
    let mut storage = StorageService::new(endpoint, BlobStore::open(data_dir)?);
    let listener = match listener {
        Some(l) => l,
        None => bind(d.storage.address()?)?,
    };
    serve_requests(listener, &params, |env| storage.handle(env))
}

pub fn serve_dealer(d: &Deployment, keys: &KeyFile, listener: Option<TcpListener>) -> Result<(), AppError> {
    let params = d.params()?;
    let endpoint = Endpoint::new(params.clone(), keys.signing(&params)?, d.directory(&params)?, fresh_seed());
    let mut nodes = BTreeMap::new();
    for i in 1..=3u8 {
        let n = d.node(i)?;
        nodes.insert(n.id(&params)?, (i, n.ek(&params)?));
    }
    let mut dealer = DealerService::new(endpoint, keys.seed()?, nodes);
    let listener = match listener {
        Some(l) => l,
        None => bind(d.dealer.address()?)?,
    };
    serve_requests(listener, &params, |env| dealer.handle(env))
}

/// Runs node `index` until `max_sessions` sessions have finished, or
/// forever when `None`. Each finished session is passed to `on_finish`.
pub fn serve_node(
    d: &Deployment,
    keys: &KeyFile,
    index: u8,
    max_sessions: Option<usize>,
    mut on_finish: impl FnMut(&SessionOutcome),
) -> Result<Vec<SessionOutcome>, AppError> {
    let params = d.params()?;
    let directory = d.directory(&params)?;
    let signing = keys.signing(&params)?;
    let encryption = keys.encryption(&params)?;
    let device_gpks = BTreeMap::from([(d.device_group_id.clone(), parse_element(&params, &d.device_gpk)?)]);
    let cfg = NodeConfig {
        index,
        params: params.clone(),
        signing: signing.clone(),
        encryption: encryption.clone(),
        directory: directory.clone(),
        market_id: d.market.id(&params)?,
        node_ids: d.node_ids(&params)?,
        user_gpk: parse_element(&params, &d.user_gpk)?,
        device_gpks,
        phase_timeout_ms: DEFAULT_PHASE_TIMEOUT_MS,
        behavior: NodeBehavior::default(),
    };
    let mut node = Node::new(cfg, keys.seed()?);
    let addrs = d.addresses(&params)?;
    let mut transport = SocketTransport::bind(d.node(index)?.address()?, params.clone(), addrs.clone())?;
    let mut endpoint = Endpoint::new(params.clone(), signing, directory, fresh_seed());
    let storage = d.storage.id(&params)?;
    let dealer = d.dealer.id(&params)?;
    let mut rpc = SocketRpc::new(params, addrs);
    let mut finished = Vec::new();
    while max_sessions.is_none_or(|m| finished.len() < m) {
        let mut services = NodeLink {
            endpoint: &mut endpoint,
            encryption: &encryption,
            rpc: &mut rpc,
            storage,
            dealer,
        };
        let outcome = run_session(&mut node, &mut transport, &mut services, &wall_clock_ms, Duration::from_secs(3600))?;
        if let Some(o) = outcome {
            on_finish(&o);
            finished.push(o);
        }
    }
    Ok(finished)
}

pub fn owner_publish(dir: &Path, d: &Deployment, index: usize, record: &[u64], policy: &PolicySpec) -> Result<Published, AppError> {
    let params = d.params()?;
    let name = owner_key_name(index);
    let mut keys = KeyFile::load(dir, &name)?;
    let encryption = keys.encryption(&params)?;
    let mut endpoint = Endpoint::new(params.clone(), keys.signing(&params)?, d.directory(&params)?, fresh_seed());
    let mut rpc = SocketRpc::new(params.clone(), d.addresses(&params)?);
    let mut link = Link {
        endpoint: &mut endpoint,
        rpc: &mut rpc,
        market: d.market.id(&params)?,
        storage: d.storage.id(&params)?,
    };
    let member_key = match keys.member_key(&params)? {
        Some(k) => k,
        None => {
            let (_, k) = link.register(&keys.credential(&params)?, "owner", &encryption)?;
            keys.set_member_key(&k);
            keys.save(dir, &name)?;
            k
        }
    };
    let device = keys.device_key(&params, &d.device_group_id)?;
    let values: Vec<_> = record.iter().map(|&x| params.scalars().from_u64(x)).collect();
    let mut rng = ChaCha20Rng::from_seed(fresh_seed());
    let captured = device_capture(&params, &device, &values, &mut rng);
    owner_prepare_and_publish(
        &params,
        Some(&member_key),
        &captured,
        &policy.to_policy()?,
        &d.node_eks(&params)?,
        &mut link,
        wall_clock_secs(),
        &mut rng,
    )
}

/// What the consumer keeps from a session: enough to re-verify offline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedResults {
    pub session_id: String,
    pub function: FunctionSpec,
    pub input_root: String,
    pub cohort: usize,
    /// Hex of each received RESULT payload in canonical form.
    pub results: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

fn digest_from_hex(s: &str) -> Result<Digest, AppError> {
    hex::decode(s).ok().and_then(|b| b.try_into().ok()).ok_or_else(|| AppError::config("malformed digest"))
}

/// Requests `function` over `listing_ids` (every listed record when `None`)
/// and waits up to `timeout` for the outcome.
pub fn consumer_analyze(
    dir: &Path,
    d: &Deployment,
    function: &FunctionSpec,
    listing_ids: Option<Vec<Digest>>,
    timeout: Duration,
) -> Result<SavedResults, AppError> {
    let params = d.params()?;
    let keys = KeyFile::load(dir, "consumer")?;
    let encryption = keys.encryption(&params)?;
    let f = function.to_descriptor(&params)?;
    let mut transport = SocketTransport::bind(d.consumer.address()?, params.clone(), HashMap::new())?;
    let mut endpoint = Endpoint::new(params.clone(), keys.signing(&params)?, d.directory(&params)?, fresh_seed());
    let mut rpc = SocketRpc::new(params.clone(), d.addresses(&params)?);
    let mut link = Link {
        endpoint: &mut endpoint,
        rpc: &mut rpc,
        market: d.market.id(&params)?,
        storage: d.storage.id(&params)?,
    };
    match link.register(&keys.credential(&params)?, "consumer", &encryption) {
        Ok(_) => {}
        Err(AppError::Remote { code, .. }) if code == "AlreadyRegistered" => {}
        Err(e) => return Err(e),
    }
    let catalog = link.catalog()?;
    let listings: Vec<_> = match &listing_ids {
        None => catalog,
        Some(ids) => ids
            .iter()
            .map(|id| catalog.iter().find(|l| l.listing_id == *id).cloned())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| AppError::config("requested listing is not in the catalog"))?,
    };
    let ids: Vec<Digest> = listings.iter().map(|l| l.listing_id).collect();
    let sid = link.request_analysis(encryption.public(), &f, &ids)?;

    let mut results = Vec::new();
    let mut abort_reason = None;
    let deadline = Instant::now() + timeout;
    while results.len() < 3 && abort_reason.is_none() {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            let status = link.session_status(sid)?;
            return Err(AppError::Remote { code: "Timeout".into(), detail: format!("session status {status}") });
        }
        let Some(env) = transport.recv(left.min(Duration::from_millis(200)))? else { continue };
        let Ok(payload) = link.endpoint.open(&env) else { continue };
        if env.session_id != Some(sid) {
            continue;
        }
        match env.msg_type.as_str() {
            msg::RESULT => results.push(hex::encode(payload.encode())),
            msg::ABORT => abort_reason = Some(msg::decode_reason(&payload).unwrap_or_else(|_| "unknown".into())),
            _ => {}
        }
    }
    Ok(SavedResults {
        session_id: hex::encode(sid),
        function: function.clone(),
        input_root: hex::encode(input_root(&listings)),
        cohort: listings.len(),
        results,
        abort_reason,
    })
}

/// Checks attestations and commitments of saved results and reconstructs
/// the statistics.
pub fn consumer_verify(dir: &Path, d: &Deployment, saved: &SavedResults) -> Result<Finalized, AppError> {
    let params = d.params()?;
    if let Some(reason) = &saved.abort_reason {
        return Err(AppError::Remote { code: reason.clone(), detail: "session aborted".into() });
    }
    let keys = KeyFile::load(dir, "consumer")?;
    let f = saved.function.to_descriptor(&params)?;
    let results = saved
        .results
        .iter()
        .map(|h| {
            let bytes = hex::decode(h).map_err(|_| AppError::config("malformed result"))?;
            Ok(ResultMessage::from_canonical(&CanonicalValue::decode(&bytes)?, &params)?)
        })
        .collect::<Result<Vec<_>, AppError>>()?;
    let node_pks = d.node_pks(&params)?;
    let expect = Expectation {
        session_id: digest_from_hex(&saved.session_id)?,
        function: &f,
        input_root: digest_from_hex(&saved.input_root)?,
        node_pks: &node_pks,
        cohort: saved.cohort,
    };
    consumer_finalize(&params, &keys.encryption(&params)?, &results, &expect)
}

pub fn node_keys(dir: &Path, index: u8) -> Result<KeyFile, AppError> {
    KeyFile::load(dir, &node_key_name(index))
}

impl SavedResults {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }
}
