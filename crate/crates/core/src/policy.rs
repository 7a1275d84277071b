//! Analysis functions, owner policies and eligibility.
//!
//! The function family is a closed set of aggregate statistics. Means and
//! variances are returned as integer moments and finished outside MPC.

use std::collections::BTreeSet;
use std::fmt;

use crate::crypto::hash::{hash256, Digest};
use crate::math::{FieldElement, GroupParams};
use crate::wire::canonical::{
    field_list, parse_field_list, Canonical, CanonicalError, CanonicalValue, FromCanonical,
    Record, RecordReader,
};

/// Below this cohort size an aggregate lets participants subtract each other out.
pub const SINGLETON_WARNING_THRESHOLD: u64 = 3;

/// Seconds since the Unix epoch (simulated in scenarios).
pub type Timestamp = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FunctionId {
    Sum,
    MeanMoments,
    VarianceMoments,
    WeightedSum,
}

impl FunctionId {
    pub const ALL: [FunctionId; 4] = [
        FunctionId::Sum,
        FunctionId::MeanMoments,
        FunctionId::VarianceMoments,
        FunctionId::WeightedSum,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FunctionId::Sum => "SUM",
            FunctionId::MeanMoments => "MEAN_MOMENTS",
            FunctionId::VarianceMoments => "VARIANCE_MOMENTS",
            FunctionId::WeightedSum => "WEIGHTED_SUM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str() == s)
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("malformed function descriptor: {0}")]
    MalformedFunction(&'static str),
    #[error("invalid policy: {0}")]
    InvalidPolicy(&'static str),
}

/// A requested analysis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionDescriptor {
    pub function_id: FunctionId,
    /// Record indices the function reads.
    pub element_selector: Vec<usize>,
    /// One weight per selected index; `WEIGHTED_SUM` only.
    pub weights: Vec<FieldElement>,
}

impl FunctionDescriptor {
    pub fn new(
        function_id: FunctionId,
        element_selector: Vec<usize>,
        weights: Vec<FieldElement>,
    ) -> Result<Self, PolicyError> {
        let f = FunctionDescriptor { function_id, element_selector, weights };
        f.check_shape()?;
        Ok(f)
    }

    /// Shape rules that do not depend on the record length.
    pub fn check_shape(&self) -> Result<(), PolicyError> {
        if self.element_selector.is_empty() {
            return Err(PolicyError::MalformedFunction("empty selector"));
        }
        let unique: BTreeSet<_> = self.element_selector.iter().collect();
        if unique.len() != self.element_selector.len() {
            return Err(PolicyError::MalformedFunction("duplicate selector index"));
        }
        match self.function_id {
            FunctionId::WeightedSum if self.weights.len() != self.element_selector.len() => {
                Err(PolicyError::MalformedFunction("weights must match selector length"))
            }
            FunctionId::WeightedSum => Ok(()),
            _ if !self.weights.is_empty() => {
                Err(PolicyError::MalformedFunction("weights are only valid for WEIGHTED_SUM"))
            }
            _ => Ok(()),
        }
    }

    pub fn fits_record(&self, record_len: usize) -> bool {
        self.element_selector.iter().all(|&i| i < record_len)
    }

    /// Digest of the canonical encoding; the identity attestations bind to.
    pub fn digest(&self) -> Digest {
        hash256(&self.canonical_bytes())
    }
}

impl Canonical for FunctionDescriptor {
    fn to_canonical(&self) -> CanonicalValue {
        Record::new()
            .with(
                "element_selector",
                CanonicalValue::List(
                    self.element_selector.iter().map(|&i| CanonicalValue::int(i as u64)).collect(),
                ),
            )
            .with("function_id", self.function_id.as_str())
            .with("weights", field_list(&self.weights))
            .build()
    }
}

impl FromCanonical for FunctionDescriptor {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(value)?;
        let element_selector = r
            .field("element_selector")?
            .as_list()?
            .iter()
            .map(CanonicalValue::as_usize)
            .collect::<Result<_, _>>()?;
        let name = r.field("function_id")?.as_text()?;
        let function_id = FunctionId::parse(name)
            .ok_or_else(|| CanonicalError::schema(format!("unknown function {name:?}")))?;
        let weights = parse_field_list(r.field("weights")?, params.scalars())?;
        r.finish()?;
        FunctionDescriptor::new(function_id, element_selector, weights)
            .map_err(|e| CanonicalError::schema(e.to_string()))
    }
}

/// An owner's acceptable family of functions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    allowed_function_ids: BTreeSet<FunctionId>,
    min_cohort: u64,
    allowed_selectors: Option<BTreeSet<usize>>,
    expiry: Timestamp,
}

impl Policy {
    pub fn new(
        allowed_function_ids: BTreeSet<FunctionId>,
        min_cohort: u64,
        allowed_selectors: Option<BTreeSet<usize>>,
        expiry: Timestamp,
    ) -> Result<Self, PolicyError> {
        if allowed_function_ids.is_empty() {
            return Err(PolicyError::InvalidPolicy("no allowed functions"));
        }
        if min_cohort == 0 {
            return Err(PolicyError::InvalidPolicy("min_cohort must be at least 1"));
        }
        Ok(Policy { allowed_function_ids, min_cohort, allowed_selectors, expiry })
    }

    pub fn allowed_function_ids(&self) -> &BTreeSet<FunctionId> {
        &self.allowed_function_ids
    }

    pub fn min_cohort(&self) -> u64 {
        self.min_cohort
    }

    pub fn allowed_selectors(&self) -> Option<&BTreeSet<usize>> {
        self.allowed_selectors.as_ref()
    }

    pub fn expiry(&self) -> Timestamp {
        self.expiry
    }

    pub fn digest(&self) -> Digest {
        policy_digest(self)
    }
}

impl Canonical for Policy {
    fn to_canonical(&self) -> CanonicalValue {
        let ids = self
            .allowed_function_ids
            .iter()
            .map(|f| CanonicalValue::text(f.as_str()))
            .collect::<Vec<_>>();
        let selectors = self.allowed_selectors.as_ref().map(|s| {
            CanonicalValue::List(s.iter().map(|&i| CanonicalValue::int(i as u64)).collect())
        });
        Record::new()
            .with("allowed_function_ids", CanonicalValue::List(ids))
            .with_opt("allowed_selectors", selectors)
            .with("expiry", self.expiry)
            .with("min_cohort", self.min_cohort)
            .build()
    }
}

impl Policy {
    pub fn from_value(value: &CanonicalValue) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(value)?;
        let allowed = r
            .field("allowed_function_ids")?
            .as_list()?
            .iter()
            .map(|v| {
                let s = v.as_text()?;
                FunctionId::parse(s).ok_or_else(|| CanonicalError::schema(format!("unknown function {s:?}")))
            })
            .collect::<Result<BTreeSet<_>, _>>()?;
        let selectors = r
            .optional("allowed_selectors")
            .map(|v| v.as_list()?.iter().map(CanonicalValue::as_usize).collect::<Result<BTreeSet<_>, _>>())
            .transpose()?;
        let expiry = r.field("expiry")?.as_u64()?;
        let min_cohort = r.field("min_cohort")?.as_u64()?;
        r.finish()?;
        Policy::new(allowed, min_cohort, selectors, expiry).map_err(|e| CanonicalError::schema(e.to_string()))
    }
}

impl FromCanonical for Policy {
    fn from_canonical(value: &CanonicalValue, _params: &GroupParams) -> Result<Self, CanonicalError> {
        Policy::from_value(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, thiserror::Error)]
pub enum PolicyViolation {
    #[error("function not allowed by policy")]
    FunctionNotAllowed,
    #[error("cohort below the policy minimum")]
    CohortTooSmall,
    #[error("selected element not allowed by policy")]
    SelectorNotAllowed,
    #[error("policy expired")]
    Expired,
}

impl PolicyViolation {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyViolation::FunctionNotAllowed => "FunctionNotAllowed",
            PolicyViolation::CohortTooSmall => "CohortTooSmall",
            PolicyViolation::SelectorNotAllowed => "SelectorNotAllowed",
            PolicyViolation::Expired => "Expired",
        }
    }
}

/// Checks, in order: function, selectors, expiry, cohort size.
pub fn eligible(
    policy: &Policy,
    f: &FunctionDescriptor,
    cohort_size: u64,
    now: Timestamp,
) -> Result<(), PolicyViolation> {
    if !policy.allowed_function_ids.contains(&f.function_id) {
        return Err(PolicyViolation::FunctionNotAllowed);
    }
    if let Some(allowed) = &policy.allowed_selectors {
        if !f.element_selector.iter().all(|i| allowed.contains(i)) {
            return Err(PolicyViolation::SelectorNotAllowed);
        }
    }
    if now >= policy.expiry {
        return Err(PolicyViolation::Expired);
    }
    if cohort_size < policy.min_cohort {
        return Err(PolicyViolation::CohortTooSmall);
    }
    Ok(())
}

pub fn policy_digest(policy: &Policy) -> Digest {
    hash256(&policy.canonical_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrivacyWarning {
    /// The policy admits aggregates over fewer than three owners.
    SingletonAggregate,
    /// The function passes one raw element through with unit weight.
    RawSelector,
}

impl PrivacyWarning {
    pub fn code(&self) -> &'static str {
        match self {
            PrivacyWarning::SingletonAggregate => "SINGLETON_AGGREGATE",
            PrivacyWarning::RawSelector => "RAW_SELECTOR",
        }
    }
}

/// Warnings that follow from the policy alone, before any function is known.
pub fn policy_warnings(policy: &Policy) -> Vec<PrivacyWarning> {
    if policy.min_cohort < SINGLETON_WARNING_THRESHOLD {
        vec![PrivacyWarning::SingletonAggregate]
    } else {
        vec![]
    }
}

/// Advisory risk indicators shown to the owner; never gates execution.
pub fn privacy_warning(policy: &Policy, f: &FunctionDescriptor) -> Vec<PrivacyWarning> {
    let mut out = policy_warnings(policy);
    let single = f.element_selector.len() == 1;
    let unit = match f.function_id {
        FunctionId::Sum => true,
        FunctionId::WeightedSum => f.weights.first().is_some_and(|w| w.value() == &1u32.into()),
        FunctionId::MeanMoments | FunctionId::VarianceMoments => false,
    };
    if single && unit {
        out.push(PrivacyWarning::RawSelector);
    }
    out
}
