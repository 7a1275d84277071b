use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use kraken_core::math::GroupProfile;
use kraken_sim::deploy::{init, node_key_name, Deployment, InitOptions, KeyFile};
use kraken_sim::scenario::{FunctionSpec, PolicySpec};
use kraken_sim::serve::{
    consumer_analyze, consumer_verify, owner_publish, serve_dealer, serve_market, serve_node, serve_storage,
    wall_clock_secs,
};
use kraken_sim::stats::render;

fn ephemeral() -> (TcpListener, SocketAddr) {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let a = l.local_addr().unwrap();
    (l, a)
}

fn free_port() -> SocketAddr {
    ephemeral().1
}

/// Starts every service of a fresh deployment in background threads.
fn start(dir: &Path, owners: usize) -> Deployment {
    let opts = InitOptions { profile: GroupProfile::Toy, owners, base: "127.0.0.1:1".parse().unwrap() };
    let mut d = init(dir, &opts, &mut ChaCha20Rng::seed_from_u64(11)).unwrap();
    let (market_l, market_a) = ephemeral();
    let (storage_l, storage_a) = ephemeral();
    let (dealer_l, dealer_a) = ephemeral();
    d.market.address = Some(market_a);
    d.storage.address = Some(storage_a);
    d.dealer.address = Some(dealer_a);
    for n in &mut d.nodes {
        n.address = Some(free_port());
    }
    d.consumer.address = Some(free_port());
    d.save(dir).unwrap();

    let spawn = |f: Box<dyn FnOnce() + Send>| {
        thread::spawn(f);
    };
    let (dm, ds, dd) = (d.clone(), d.clone(), d.clone());
    let (km, ks, kd) = (
        KeyFile::load(dir, "market").unwrap(),
        KeyFile::load(dir, "storage").unwrap(),
        KeyFile::load(dir, "dealer").unwrap(),
    );
    let (market_dir, storage_dir) = (dir.join("data/market"), dir.join("data/storage"));
    spawn(Box::new(move || serve_market(&dm, &km, &market_dir, Some(market_l)).unwrap()));
    spawn(Box::new(move || serve_storage(&ds, &ks, &storage_dir, Some(storage_l)).unwrap()));
    spawn(Box::new(move || serve_dealer(&dd, &kd, Some(dealer_l)).unwrap()));
    for i in 1..=3u8 {
        let (dn, kn) = (d.clone(), KeyFile::load(dir, &node_key_name(i)).unwrap());
        spawn(Box::new(move || {
            serve_node(&dn, &kn, i, None, |_| {}).unwrap();
        }));
    }
    // node listeners bind asynchronously
    thread::sleep(Duration::from_millis(200));
    d
}

fn policy(functions: &[&str]) -> PolicySpec {
    PolicySpec {
        allowed_function_ids: functions.iter().map(|s| s.to_string()).collect(),
        min_cohort: 3,
        allowed_selectors: None,
        expiry: wall_clock_secs() + 86_400,
    }
}

#[test]
fn variance_over_sockets() {
    let dir = tempfile::tempdir().unwrap();
    let d = start(dir.path(), 3);
    for (i, x) in [2u64, 3, 7].into_iter().enumerate() {
        let published = owner_publish(dir.path(), &d, i, &[x, 1], &policy(&["VARIANCE_MOMENTS"])).unwrap();
        assert!(published.warnings.is_empty());
    }
    let f = FunctionSpec { function_id: "VARIANCE_MOMENTS".into(), element_selector: vec![0], weights: vec![] };
    let saved = consumer_analyze(dir.path(), &d, &f, None, Duration::from_secs(60)).unwrap();
    assert_eq!(saved.abort_reason, None);
    assert_eq!(saved.results.len(), 3);
    let done = consumer_verify(dir.path(), &d, &saved).unwrap();
    let rendered = render(&done.stats);
    assert_eq!(rendered["MEAN[0]"], "4");
    assert_eq!(rendered["VARIANCE[0]"], "14/3");

    // a result altered after the fact no longer verifies
    let mut forged = saved.clone();
    forged.session_id = hex::encode([0u8; 32]);
    assert!(consumer_verify(dir.path(), &d, &forged).is_err());

    // a function outside every policy is refused by the market
    let sum = FunctionSpec { function_id: "SUM".into(), element_selector: vec![0], weights: vec![] };
    let refused = consumer_analyze(dir.path(), &d, &sum, None, Duration::from_secs(60));
    assert!(refused.is_err());
}
