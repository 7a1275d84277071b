//! Multi-process deployments: one public `deployment.json` naming every
//! actor's address and keys, and one secret key file per actor under
//! `keys/`.

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use num_bigint::BigUint;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use kraken_core::crypto::{gs_setup, Credential, EncKeyPair, MemberKey, SigKeyPair, TrustedIssuers};
use kraken_core::market::broker::{member_key_from_canonical, member_key_to_canonical};
use kraken_core::market::{MarketConfig, Marketplace};
use kraken_core::math::{FieldElement, GroupElement, GroupParams, GroupProfile};
use kraken_core::wire::{actor_id, ActorId, Canonical, CanonicalValue, FromCanonical, KeyDirectory};

use crate::actors::Issuer;
use crate::error::AppError;
use crate::simulator::DEVICE_GROUP_ID;

pub const DEPLOYMENT_FILE: &str = "deployment.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<SocketAddr>,
    pub pk: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ek: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deployment {
    pub group_profile: String,
    pub issuer_pk: String,
    pub device_group_id: String,
    pub device_gpk: String,
    pub user_gpk: String,
    pub market: ActorEntry,
    pub storage: ActorEntry,
    pub dealer: ActorEntry,
    pub nodes: Vec<ActorEntry>,
    pub consumer: ActorEntry,
    pub owners: Vec<ActorEntry>,
}

/// One actor's secrets. Fields an actor does not need are absent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyFile {
    pub sk: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dk: Option<String>,
    /// 32-byte hex seed for actors with deterministic state.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<String>,
    /// Hex of the canonical credential encoding.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub credential: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub device_key: Option<String>,
    /// Hex of the canonical market member key, stored after registration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub member_key: Option<String>,
}

fn bad(what: &str) -> AppError {
    AppError::config(format!("malformed {what} in deployment"))
}

pub fn parse_scalar(params: &GroupParams, hex: &str) -> Result<FieldElement, AppError> {
    let v = BigUint::parse_bytes(hex.as_bytes(), 16).ok_or_else(|| bad("scalar"))?;
    params.scalars().element(v).map_err(|_| bad("scalar"))
}

pub fn parse_element(params: &GroupParams, hex: &str) -> Result<GroupElement, AppError> {
    let v = BigUint::parse_bytes(hex.as_bytes(), 16).ok_or_else(|| bad("group element"))?;
    params.element(v).map_err(|_| bad("group element"))
}

pub fn parse_seed(hex: &str) -> Result<[u8; 32], AppError> {
    hex::decode(hex).ok().and_then(|b| b.try_into().ok()).ok_or_else(|| bad("seed"))
}

/// A fresh seed for endpoints whose nonces must differ across invocations.
pub fn fresh_seed() -> [u8; 32] {
    rand::thread_rng().gen()
}

impl ActorEntry {
    pub fn pk(&self, params: &GroupParams) -> Result<GroupElement, AppError> {
        parse_element(params, &self.pk)
    }

    pub fn id(&self, params: &GroupParams) -> Result<ActorId, AppError> {
        Ok(actor_id(params, &self.pk(params)?))
    }

    pub fn ek(&self, params: &GroupParams) -> Result<GroupElement, AppError> {
        parse_element(params, self.ek.as_deref().ok_or_else(|| bad("encryption key"))?)
    }

    pub fn address(&self) -> Result<SocketAddr, AppError> {
        self.address.ok_or_else(|| bad("address"))
    }
}

impl Deployment {
    pub fn load(dir: &Path) -> Result<Self, AppError> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(DEPLOYMENT_FILE))?)?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), AppError> {
        fs::write(dir.join(DEPLOYMENT_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn params(&self) -> Result<GroupParams, AppError> {
        let profile = GroupProfile::parse(&self.group_profile)
            .ok_or_else(|| AppError::config(format!("unknown group profile {:?}", self.group_profile)))?;
        Ok(GroupParams::make(profile))
    }

    fn actors(&self) -> impl Iterator<Item = &ActorEntry> {
        [&self.market, &self.storage, &self.dealer, &self.consumer]
            .into_iter()
            .chain(&self.nodes)
            .chain(&self.owners)
    }

    pub fn directory(&self, params: &GroupParams) -> Result<KeyDirectory, AppError> {
        let mut dir = KeyDirectory::new();
        for a in self.actors() {
            dir.register(params, a.pk(params)?);
        }
        Ok(dir)
    }

    /// Addresses of every actor that listens.
    pub fn addresses(&self, params: &GroupParams) -> Result<HashMap<ActorId, SocketAddr>, AppError> {
        self.actors()
            .filter_map(|a| a.address.map(|addr| a.id(params).map(|id| (id, addr))))
            .collect()
    }

    pub fn node(&self, index: u8) -> Result<&ActorEntry, AppError> {
        match index {
            1..=3 => self.nodes.get(usize::from(index) - 1).ok_or_else(|| bad("node list")),
            _ => Err(AppError::config(format!("node index {index} is not 1, 2 or 3"))),
        }
    }

    pub fn owner(&self, index: usize) -> Result<&ActorEntry, AppError> {
        self.owners.get(index).ok_or_else(|| AppError::config(format!("no owner {index} in deployment")))
    }

    pub fn node_ids(&self, params: &GroupParams) -> Result<[ActorId; 3], AppError> {
        Ok([self.node(1)?.id(params)?, self.node(2)?.id(params)?, self.node(3)?.id(params)?])
    }

    pub fn node_pks(&self, params: &GroupParams) -> Result<[GroupElement; 3], AppError> {
        Ok([self.node(1)?.pk(params)?, self.node(2)?.pk(params)?, self.node(3)?.pk(params)?])
    }

    pub fn node_eks(&self, params: &GroupParams) -> Result<[GroupElement; 3], AppError> {
        Ok([self.node(1)?.ek(params)?, self.node(2)?.ek(params)?, self.node(3)?.ek(params)?])
    }

    pub fn issuers(&self, params: &GroupParams) -> Result<TrustedIssuers, AppError> {
        Ok(TrustedIssuers::new([parse_element(params, &self.issuer_pk)?]))
    }
}

pub fn key_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("keys").join(format!("{name}.json"))
}

pub fn owner_key_name(index: usize) -> String {
    format!("owner-{index}")
}

pub fn node_key_name(index: u8) -> String {
    format!("node-{index}")
}

impl KeyFile {
    pub fn load(dir: &Path, name: &str) -> Result<Self, AppError> {
        let path = key_path(dir, name);
        let text = fs::read_to_string(&path)
            .map_err(|e| AppError::config(format!("cannot read key file {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<(), AppError> {
        fs::create_dir_all(dir.join("keys"))?;
        fs::write(key_path(dir, name), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn signing(&self, params: &GroupParams) -> Result<SigKeyPair, AppError> {
        Ok(SigKeyPair::from_secret(params, parse_scalar(params, &self.sk)?))
    }

    pub fn encryption(&self, params: &GroupParams) -> Result<EncKeyPair, AppError> {
        let dk = self.dk.as_deref().ok_or_else(|| AppError::config("key file has no decryption key"))?;
        Ok(EncKeyPair::from_secret(params, parse_scalar(params, dk)?))
    }

    pub fn seed(&self) -> Result<[u8; 32], AppError> {
        parse_seed(self.seed.as_deref().ok_or_else(|| AppError::config("key file has no seed"))?)
    }

    pub fn credential(&self, params: &GroupParams) -> Result<Credential, AppError> {
        let hex = self.credential.as_deref().ok_or_else(|| AppError::config("key file has no credential"))?;
        let bytes = hex::decode(hex).map_err(|_| bad("credential"))?;
        Ok(Credential::from_canonical(&CanonicalValue::decode(&bytes)?, params)?)
    }

    pub fn device_key(&self, params: &GroupParams, group_id: &str) -> Result<MemberKey, AppError> {
        let hex = self.device_key.as_deref().ok_or_else(|| AppError::config("key file has no device key"))?;
        Ok(MemberKey::from_secret(params, group_id, parse_scalar(params, hex)?))
    }

    pub fn member_key(&self, params: &GroupParams) -> Result<Option<MemberKey>, AppError> {
        self.member_key
            .as_deref()
            .map(|hex| {
                let bytes = hex::decode(hex).map_err(|_| bad("member key"))?;
                Ok(member_key_from_canonical(&CanonicalValue::decode(&bytes)?, params)?)
            })
            .transpose()
    }

    pub fn set_member_key(&mut self, key: &MemberKey) {
        self.member_key = Some(hex::encode(member_key_to_canonical(key).encode()));
    }
}

/// Options for [`init`].
#[derive(Debug, Clone)]
pub struct InitOptions {
    pub profile: GroupProfile,
    pub owners: usize,
    /// Ports are assigned upward from here: market, storage, dealer, nodes
    /// 1 to 3, consumer.
    pub base: SocketAddr,
}

/// Generates keys, credentials and device keys for a fresh deployment and
/// writes them under `dir`.
pub fn init<R: RngCore>(dir: &Path, opts: &InitOptions, rng: &mut R) -> Result<Deployment, AppError> {
    let params = GroupParams::make(opts.profile);
    let addr = |offset: u16| {
        let mut a = opts.base;
        a.set_port(opts.base.port() + offset);
        Some(a)
    };
    let mut seed = || {
        let mut s = [0u8; 32];
        rng.fill_bytes(&mut s);
        s
    };
    let mut issuer = Issuer::new(params.clone(), seed());
    let mut vendor = gs_setup(&params, DEVICE_GROUP_ID, &mut ChaCha20Rng::from_seed(seed()));
    let mut keygen = ChaCha20Rng::from_seed(seed());
    let mut enc_rng = ChaCha20Rng::from_seed(seed());
    let mut taken = std::collections::BTreeSet::new();
    let mut sig = || loop {
        let k = SigKeyPair::generate(&params, &mut keygen);
        if taken.insert(k.public().clone()) {
            return k;
        }
    };
    let entry = |address: Option<SocketAddr>, enc: Option<&EncKeyPair>, name: &str, sk: &SigKeyPair, extra: KeyFile| {
        let file = KeyFile { sk: sk.secret().to_hex(), dk: enc.map(|e| e.secret().to_hex()), ..extra };
        file.save(dir, name).map(|()| ActorEntry {
            address,
            pk: sk.public().to_hex(),
            ek: enc.map(|e| e.public().to_hex()),
        })
    };

    let market_key = sig();
    let market_seed = seed();
    let user_gpk = Marketplace::in_memory(MarketConfig {
        params: params.clone(),
        signing: market_key.clone(),
        issuers: TrustedIssuers::new([issuer.public().clone()]),
        directory: KeyDirectory::new(),
        node_ids: [[0; 32]; 3],
        seed: market_seed,
        precheck: true,
    })
    .user_gpk()
    .clone();
    let with_seed = |s: [u8; 32]| KeyFile { seed: Some(hex::encode(s)), ..KeyFile::default() };
    let market = entry(addr(0), None, "market", &market_key, with_seed(market_seed))?;
    let storage = entry(addr(1), None, "storage", &sig(), KeyFile::default())?;
    let dealer_seed = seed();
    let dealer = entry(addr(2), None, "dealer", &sig(), with_seed(dealer_seed))?;
    let mut nodes = Vec::with_capacity(3);
    for i in 1..=3u8 {
        let enc = EncKeyPair::generate(&params, &mut enc_rng);
        let node_seed = seed();
        nodes.push(entry(addr(2 + u16::from(i)), Some(&enc), &node_key_name(i), &sig(), with_seed(node_seed))?);
    }
    let credential = |c: Credential| Some(hex::encode(c.to_canonical().encode()));
    let consumer_enc = EncKeyPair::generate(&params, &mut enc_rng);
    let consumer_file = KeyFile { credential: credential(issuer.issue("consumer-0", "consumer")?), ..KeyFile::default() };
    let consumer = entry(addr(6), Some(&consumer_enc), "consumer", &sig(), consumer_file)?;
    let mut owners = Vec::with_capacity(opts.owners);
    for i in 0..opts.owners {
        let identity = owner_key_name(i);
        let device = seed();
        vendor.authorize(device);
        let device_key = vendor.join(device)?;
        let enc = EncKeyPair::generate(&params, &mut enc_rng);
        let file = KeyFile {
            credential: credential(issuer.issue(&identity, "owner")?),
            device_key: Some(device_key.secret().to_hex()),
            ..KeyFile::default()
        };
        owners.push(entry(None, Some(&enc), &identity, &sig(), file)?);
    }
    let deployment = Deployment {
        group_profile: opts.profile.as_str().to_owned(),
        issuer_pk: issuer.public().to_hex(),
        device_group_id: DEVICE_GROUP_ID.to_owned(),
        device_gpk: vendor.gpk().to_hex(),
        user_gpk: user_gpk.to_hex(),
        market,
        storage,
        dealer,
        nodes,
        consumer,
        owners,
    };
    deployment.save(dir)?;
    fs::create_dir_all(dir.join("data"))?;
    Ok(deployment)
}

/// Builds the market configuration for a deployment.
pub fn market_config(d: &Deployment, keys: &KeyFile) -> Result<MarketConfig, AppError> {
    let params = d.params()?;
    Ok(MarketConfig {
        signing: keys.signing(&params)?,
        issuers: d.issuers(&params)?,
        directory: d.directory(&params)?,
        node_ids: d.node_ids(&params)?,
        seed: keys.seed()?,
        precheck: true,
        params,
    })
}
