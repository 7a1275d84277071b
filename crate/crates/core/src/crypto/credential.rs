//! Issuer-signed, pseudonymous registration credentials.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;

use super::hash::Digest;
use super::schnorr::{schnorr_sign, schnorr_verify, SchnorrSignature, SigKeyPair};
use super::CryptoError;
use crate::math::{GroupElement, GroupParams};
use crate::wire::canonical::{
    Canonical, CanonicalError, CanonicalValue, FromCanonical, Record, RecordReader,
};

/// The only attribute a registration needs.
pub const ROLE_ATTRIBUTE: &str = "role";
pub const ROLES: [&str; 2] = ["owner", "consumer"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credential {
    pub pseudonym: Digest,
    pub attributes: BTreeMap<String, String>,
    pub issuer_signature: SchnorrSignature,
}

fn statement(pseudonym: &Digest, attributes: &BTreeMap<String, String>) -> Vec<u8> {
    let attrs = attributes
        .iter()
        .map(|(k, v)| (k.clone(), CanonicalValue::text(v.clone())))
        .collect();
    Record::new()
        .with("attributes", CanonicalValue::Map(attrs))
        .with("pseudonym", CanonicalValue::bytes(pseudonym.to_vec()))
        .build()
        .encode()
}

fn check_minimal(attributes: &BTreeMap<String, String>) -> Result<(), CryptoError> {
    if let Some(extra) = attributes.keys().find(|k| k.as_str() != ROLE_ATTRIBUTE) {
        return Err(CryptoError::IssuancePolicy(format!("attribute {extra:?} is not issued")));
    }
    match attributes.get(ROLE_ATTRIBUTE) {
        Some(role) if ROLES.contains(&role.as_str()) => Ok(()),
        Some(role) => Err(CryptoError::IssuancePolicy(format!("unknown role {role:?}"))),
        None => Err(CryptoError::IssuancePolicy("missing role".into())),
    }
}

/// Signs `(pseudonym, attributes)`. Only the minimal attribute set is issued.
pub fn issue_credential<R: RngCore + ?Sized>(
    params: &GroupParams,
    issuer: &SigKeyPair,
    pseudonym: Digest,
    attributes: BTreeMap<String, String>,
    rng: &mut R,
) -> Result<Credential, CryptoError> {
    check_minimal(&attributes)?;
    let issuer_signature = schnorr_sign(params, issuer, &statement(&pseudonym, &attributes), rng);
    Ok(Credential { pseudonym, attributes, issuer_signature })
}

/// The set of issuer keys a verifier trusts.
#[derive(Debug, Clone, Default)]
pub struct TrustedIssuers {
    keys: BTreeSet<GroupElement>,
}

impl TrustedIssuers {
    pub fn new(keys: impl IntoIterator<Item = GroupElement>) -> Self {
        TrustedIssuers { keys: keys.into_iter().collect() }
    }

    pub fn add(&mut self, pk: GroupElement) {
        self.keys.insert(pk);
    }

    pub fn verify_credential(
        &self,
        params: &GroupParams,
        issuer_pk: &GroupElement,
        cred: &Credential,
    ) -> Result<bool, CryptoError> {
        if !self.keys.contains(issuer_pk) {
            return Err(CryptoError::UnknownIssuer);
        }
        Ok(verify_credential(params, issuer_pk, cred))
    }

    /// Tries every trusted key; the credential does not name its issuer.
    pub fn verify_any(&self, params: &GroupParams, cred: &Credential) -> bool {
        self.keys.iter().any(|pk| verify_credential(params, pk, cred))
    }
}

pub fn verify_credential(params: &GroupParams, issuer_pk: &GroupElement, cred: &Credential) -> bool {
    schnorr_verify(
        params,
        issuer_pk,
        &statement(&cred.pseudonym, &cred.attributes),
        &cred.issuer_signature,
    )
}

impl Credential {
    pub fn role(&self) -> Option<&str> {
        self.attributes.get(ROLE_ATTRIBUTE).map(String::as_str)
    }
}

impl Canonical for Credential {
    fn to_canonical(&self) -> CanonicalValue {
        let attrs = self
            .attributes
            .iter()
            .map(|(k, v)| (k.clone(), CanonicalValue::text(v.clone())))
            .collect();
        Record::new()
            .with("attributes", CanonicalValue::Map(attrs))
            .with("issuer_signature", self.issuer_signature.to_canonical())
            .with("pseudonym", CanonicalValue::bytes(self.pseudonym.to_vec()))
            .build()
    }
}

impl FromCanonical for Credential {
    fn from_canonical(value: &CanonicalValue, params: &GroupParams) -> Result<Self, CanonicalError> {
        let mut r = RecordReader::new(value)?;
        let attributes = r
            .field("attributes")?
            .as_map()?
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_text()?.to_owned())))
            .collect::<Result<_, CanonicalError>>()?;
        let cred = Credential {
            attributes,
            issuer_signature: SchnorrSignature::from_canonical(r.field("issuer_signature")?, params)?,
            pseudonym: r.field("pseudonym")?.as_array()?,
        };
        r.finish()?;
        Ok(cred)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn role(r: &str) -> BTreeMap<String, String> {
        BTreeMap::from([(ROLE_ATTRIBUTE.to_owned(), r.to_owned())])
    }

    #[test]
    fn issue_and_verify() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let issuer = SigKeyPair::generate(&params, &mut rng);
        let cred = issue_credential(&params, &issuer, [4; 32], role("owner"), &mut rng).unwrap();
        let trusted = TrustedIssuers::new([issuer.public().clone()]);
        assert_eq!(trusted.verify_credential(&params, issuer.public(), &cred), Ok(true));
        let decoded = Credential::from_canonical_bytes(&cred.canonical_bytes(), &params).unwrap();
        assert_eq!(decoded, cred);
    }

    #[test]
    fn mutated_attribute_fails() {
        let params = GroupParams::standard();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let issuer = SigKeyPair::generate(&params, &mut rng);
        let mut cred = issue_credential(&params, &issuer, [4; 32], role("owner"), &mut rng).unwrap();
        cred.attributes.insert(ROLE_ATTRIBUTE.into(), "consumer".into());
        assert!(!verify_credential(&params, issuer.public(), &cred));
    }

    #[test]
    fn extra_attributes_are_not_issued() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let issuer = SigKeyPair::generate(&params, &mut rng);
        let mut attrs = role("owner");
        attrs.insert("email".into(), "a@example.org".into());
        assert!(matches!(
            issue_credential(&params, &issuer, [4; 32], attrs, &mut rng),
            Err(CryptoError::IssuancePolicy(_))
        ));
        assert!(matches!(
            issue_credential(&params, &issuer, [4; 32], role("admin"), &mut rng),
            Err(CryptoError::IssuancePolicy(_))
        ));
    }

    #[test]
    fn unknown_issuer() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let issuer = SigKeyPair::generate(&params, &mut rng);
        let rogue = SigKeyPair::generate(&params, &mut rng);
        let cred = issue_credential(&params, &rogue, [4; 32], role("owner"), &mut rng).unwrap();
        let trusted = TrustedIssuers::new([issuer.public().clone()]);
        assert_eq!(
            trusted.verify_credential(&params, rogue.public(), &cred),
            Err(CryptoError::UnknownIssuer)
        );
    }
}
