//! Scenario files: owners, their policies, the requested function and the
//! adversary toggles. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

use kraken_core::math::{GroupParams, GroupProfile};
use kraken_core::policy::{FunctionDescriptor, FunctionId, Policy};

use crate::error::AppError;

/// Simulated wall clock at the start of every run, in seconds.
pub const SIM_EPOCH_SECS: u64 = 1_700_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub allowed_function_ids: Vec<String>,
    pub min_cohort: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_selectors: Option<Vec<usize>>,
    pub expiry: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OwnerSpec {
    pub record: Vec<u64>,
    pub policy: PolicySpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub function_id: String,
    pub element_selector: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<u64>,
}

/// Misbehaviour toggles. Node positions are 1, 2 or 3; owners are indexed
/// from 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversaryConfig {
    pub node_tampers_share: Vec<u8>,
    pub node_wrong_function: Vec<u8>,
    pub node_skips_policy_check: Vec<u8>,
    pub node_inconsistent_opening: Vec<u8>,
    pub node_corrupts_output: Vec<u8>,
    pub owner_bad_device_signature: Option<usize>,
    /// Storage corrupts blobs it returns to this node.
    pub storage_tampers_blob: Option<u8>,
    /// `SESSION_START` is delivered to this node a second time.
    pub replay_envelope: Option<u8>,
    pub market_skips_precheck: bool,
}

impl AdversaryConfig {
    fn node_lists(&self) -> [&[u8]; 5] {
        [
            &self.node_tampers_share,
            &self.node_wrong_function,
            &self.node_skips_policy_check,
            &self.node_inconsistent_opening,
            &self.node_corrupts_output,
        ]
    }

    pub fn node_is_flagged(&self, node: u8) -> bool {
        self.node_lists().iter().any(|l| l.contains(&node))
    }

    pub fn is_clean(&self) -> bool {
        *self == AdversaryConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub group_profile: String,
    pub owners: Vec<OwnerSpec>,
    pub function: FunctionSpec,
    #[serde(default)]
    pub adversary: AdversaryConfig,
}

/// A scenario after validation, in core types.
#[derive(Debug, Clone)]
pub struct Validated {
    pub params: GroupParams,
    pub profile: GroupProfile,
    pub policies: Vec<Policy>,
    pub function: FunctionDescriptor,
}

fn function_id(s: &str) -> Result<FunctionId, AppError> {
    FunctionId::parse(s).ok_or_else(|| AppError::config(format!("unknown function id {s:?}")))
}

impl PolicySpec {
    pub fn to_policy(&self) -> Result<Policy, AppError> {
        let ids = self.allowed_function_ids.iter().map(|s| function_id(s)).collect::<Result<BTreeSet<_>, _>>()?;
        let selectors = self.allowed_selectors.as_ref().map(|s| s.iter().copied().collect());
        Policy::new(ids, self.min_cohort, selectors, self.expiry).map_err(|e| AppError::config(e.to_string()))
    }
}

impl FunctionSpec {
    pub fn to_descriptor(&self, params: &GroupParams) -> Result<FunctionDescriptor, AppError> {
        let weights = self.weights.iter().map(|&w| params.scalars().from_u64(w)).collect();
        FunctionDescriptor::new(function_id(&self.function_id)?, self.element_selector.clone(), weights)
            .map_err(|e| AppError::config(e.to_string()))
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, AppError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        Scenario::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<Validated, AppError> {
        let profile = GroupProfile::parse(&self.group_profile)
            .ok_or_else(|| AppError::config(format!("unknown group profile {:?}", self.group_profile)))?;
        let params = GroupParams::make(profile);
        if self.owners.is_empty() {
            return Err(AppError::config("no owners"));
        }
        let len = self.owners[0].record.len();
        if len == 0 || self.owners.iter().any(|o| o.record.len() != len) {
            return Err(AppError::config("records must be non-empty and of equal length"));
        }
        let policies = self.owners.iter().map(|o| o.policy.to_policy()).collect::<Result<Vec<_>, _>>()?;
        let function = self.function.to_descriptor(&params)?;
        if !function.fits_record(len) {
            return Err(AppError::config("element selector exceeds the record length"));
        }
        if self.function.weights.iter().any(|&w| BigUint::from(w) >= *params.q()) {
            return Err(AppError::config("weight exceeds the group order"));
        }
        self.check_bounds(&function, params.q())?;
        self.check_adversary()?;
        Ok(Validated { params, profile, policies, function })
    }

    /// Every output moment must stay below `q` so the rational finish is exact.
    fn check_bounds(&self, f: &FunctionDescriptor, q: &BigUint) -> Result<(), AppError> {
        let records: Vec<&[u64]> = self.owners.iter().map(|o| o.record.as_slice()).collect();
        let column = |j: usize, sq: bool| -> BigUint {
            records.iter().map(|r| BigUint::from(r[j]).pow(if sq { 2 } else { 1 })).sum()
        };
        let mut moments: Vec<BigUint> = vec![BigUint::from(records.len())];
        match f.function_id {
            FunctionId::Sum => moments.push(f.element_selector.iter().map(|&j| column(j, false)).sum()),
            FunctionId::WeightedSum => moments.push(
                f.element_selector
                    .iter()
                    .zip(&self.function.weights)
                    .map(|(&j, &w)| column(j, false) * w)
                    .sum(),
            ),
            FunctionId::MeanMoments => moments.extend(f.element_selector.iter().map(|&j| column(j, false))),
            FunctionId::VarianceMoments => {
                for &j in &f.element_selector {
                    moments.push(column(j, false));
                    moments.push(column(j, true));
                }
            }
        }
        if moments.iter().any(|m| m >= q) {
            return Err(AppError::config("record values would wrap around the group order"));
        }
        Ok(())
    }

    fn check_adversary(&self) -> Result<(), AppError> {
        let a = &self.adversary;
        let nodes = a.node_lists().into_iter().flatten().copied().chain(a.storage_tampers_blob).chain(a.replay_envelope);
        for n in nodes {
            if !(1..=3).contains(&n) {
                return Err(AppError::config(format!("node position {n} is not 1, 2 or 3")));
            }
        }
        if (1..=3).all(|n| a.node_is_flagged(n)) {
            return Err(AppError::config("at least one node must be honest"));
        }
        if a.owner_bad_device_signature.is_some_and(|o| o >= self.owners.len()) {
            return Err(AppError::config("owner_bad_device_signature names a missing owner"));
        }
        Ok(())
    }

    /// The scenario every example and determinism check starts from: three
    /// owners holding 2, 3 and 7, population variance requested.
    pub fn baseline(seed: u64) -> Self {
        let policy = PolicySpec {
            allowed_function_ids: vec!["VARIANCE_MOMENTS".into(), "MEAN_MOMENTS".into(), "SUM".into()],
            min_cohort: 3,
            allowed_selectors: None,
            expiry: SIM_EPOCH_SECS + 365 * 86_400,
        };
        Scenario {
            seed,
            group_profile: "toy".into(),
            owners: [2, 3, 7].iter().map(|&x| OwnerSpec { record: vec![x], policy: policy.clone() }).collect(),
            function: FunctionSpec {
                function_id: "VARIANCE_MOMENTS".into(),
                element_selector: vec![0],
                weights: vec![],
            },
            adversary: AdversaryConfig::default(),
        }
    }
}

/// A valid honest scenario with 3 to 10 owners, 1 to 16 elements and a
/// random function, with values small enough for `q`.
pub fn random_scenario<R: Rng + ?Sized>(rng: &mut R, profile: GroupProfile) -> Scenario {
    let params = GroupParams::make(profile);
    // values only need to stay below q; the standard group never binds
    let q = u64::try_from(params.q()).unwrap_or(u64::MAX);
    let owners = rng.gen_range(3..=10usize);
    let len = rng.gen_range(1..=16usize);
    let function_id = FunctionId::ALL[rng.gen_range(0..FunctionId::ALL.len())];
    let mut indices: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        indices.swap(i, rng.gen_range(0..=i));
    }
    let selector: Vec<usize> = indices[..rng.gen_range(1..=len)].to_vec();
    let weights: Vec<u64> = match function_id {
        FunctionId::WeightedSum => selector.iter().map(|_| rng.gen_range(1..=4)).collect(),
        _ => vec![],
    };
    let n = owners as u64;
    let budget = q.saturating_sub(1).min(1 << 40);
    let max = match function_id {
        FunctionId::Sum => budget / (n * selector.len() as u64),
        FunctionId::WeightedSum => budget / (n * weights.iter().sum::<u64>()),
        FunctionId::MeanMoments => budget / n,
        FunctionId::VarianceMoments => ((budget / n) as f64).sqrt() as u64,
    }
    .clamp(1, 1_000_000);
    let expiry = SIM_EPOCH_SECS + 365 * 86_400;
    let policy = PolicySpec {
        allowed_function_ids: vec![function_id.as_str().into()],
        min_cohort: rng.gen_range(1..=n),
        allowed_selectors: None,
        expiry,
    };
    Scenario {
        seed: rng.gen(),
        group_profile: profile.as_str().into(),
        owners: (0..owners)
            .map(|_| OwnerSpec {
                record: (0..len).map(|_| rng.gen_range(0..=max)).collect(),
                policy: policy.clone(),
            })
            .collect(),
        function: FunctionSpec {
            function_id: function_id.as_str().into(),
            element_selector: selector,
            weights,
        },
        adversary: AdversaryConfig::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn baseline_validates() {
        let v = Scenario::baseline(1).validate().unwrap();
        assert_eq!(v.policies.len(), 3);
        assert_eq!(v.function.function_id, FunctionId::VarianceMoments);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut json: serde_json::Value = serde_json::from_str(&Scenario::baseline(1).to_json()).unwrap();
        json["owner_email"] = "a@example.org".into();
        assert!(matches!(Scenario::from_json(&json.to_string()), Err(AppError::Config(_))));
        let mut json: serde_json::Value = serde_json::from_str(&Scenario::baseline(1).to_json()).unwrap();
        json["adversary"]["node_sleeps"] = serde_json::json!([1]);
        assert!(Scenario::from_json(&json.to_string()).is_err());
    }

    #[test]
    fn wraparound_rejected() {
        let mut s = Scenario::baseline(1);
        s.owners[0].record = vec![40];
        // 40^2 = 1600 exceeds the toy order 1019
        assert!(matches!(s.validate(), Err(AppError::Config(_))));
        s.function.function_id = "SUM".into();
        assert!(s.validate().is_ok());
    }

    #[test]
    fn all_nodes_flagged_rejected() {
        let mut s = Scenario::baseline(1);
        s.adversary.node_tampers_share = vec![1, 2];
        s.adversary.node_corrupts_output = vec![3];
        assert!(matches!(s.validate(), Err(AppError::Config(_))));
        s.adversary.node_corrupts_output = vec![2];
        assert!(s.validate().is_ok());
        s.adversary.replay_envelope = Some(4);
        assert!(s.validate().is_err());
    }

    #[test]
    fn shape_errors() {
        let mut s = Scenario::baseline(1);
        s.owners[1].record = vec![1, 2];
        assert!(s.validate().is_err());
        let mut s = Scenario::baseline(1);
        s.function.element_selector = vec![1];
        assert!(s.validate().is_err());
        let mut s = Scenario::baseline(1);
        s.group_profile = "huge".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn random_scenarios_validate() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..300 {
            let s = random_scenario(&mut rng, GroupProfile::Toy);
            s.validate().unwrap_or_else(|e| panic!("{e}: {}", s.to_json()));
            assert!((3..=10).contains(&s.owners.len()));
        }
    }

    #[test]
    fn json_round_trip() {
        let mut s = Scenario::baseline(9);
        s.adversary.node_wrong_function = vec![2];
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }
}
