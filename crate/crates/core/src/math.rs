//! Prime-order group and scalar-field arithmetic.
//!
//! Everything in the crate lives in the order-`q` subgroup of `Z_p^*` for a
//! safe prime `p = 2q + 1`. Scalars (shares, exponents, signature responses)
//! are elements of `Z_q`, so a share can be used directly as a Pedersen
//! commitment exponent.

use std::fmt;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// RFC 3526 2048-bit MODP group (group 14). A safe prime.
const MODP_2048_HEX: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1",
    "29024E088A67CC74020BBEA63B139B22514A08798E3404DD",
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245",
    "E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D",
    "C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F",
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D",
    "670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9",
    "DE2BCBF6955817183995497CEA956AE515D2261898FA0510",
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF",
);

/// Public nonce hashed into the subgroup to obtain the second Pedersen generator.
const BLINDING_GENERATOR_NONCE: &[u8] = b"kraken/pedersen-h/v1";

const MILLER_RABIN_ROUNDS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MathError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("value is not reduced modulo the field order")]
    OutOfRange,
    #[error("value is not a member of the prime-order subgroup")]
    NotInSubgroup,
    #[error("invalid group parameters: {0}")]
    InvalidParams(&'static str),
}

/// Which parameter set to instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupProfile {
    /// `p = 2039`, `q = 1019`. The discrete log of `h` is known (`h = g^2`),
    /// so this profile is for deterministic test vectors only.
    Toy,
    /// 2048-bit safe prime with a nothing-up-my-sleeve `h`.
    Standard,
}

impl GroupProfile {
    pub fn as_str(&self) -> &'static str {
        match self {
            GroupProfile::Toy => "toy",
            GroupProfile::Standard => "standard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "toy" => Some(GroupProfile::Toy),
            "standard" => Some(GroupProfile::Standard),
            _ => None,
        }
    }
}

/// An element of `Z_q`. Always reduced.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FieldElement(BigUint);

impl FieldElement {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn into_value(self) -> BigUint {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn to_hex(&self) -> String {
        self.0.to_str_radix(16)
    }
}

impl fmt::Debug for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fq({})", self.0)
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

/// A member of the order-`q` subgroup of `Z_p^*`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(BigUint);

impl GroupElement {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.to_str_radix(16)
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G({})", self.0)
    }
}

/// Arithmetic in `Z_q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalarField {
    order: BigUint,
    byte_len: usize,
}

impl ScalarField {
    pub fn new(order: BigUint) -> Self {
        let byte_len = order.bits().div_ceil(8) as usize;
        ScalarField { order, byte_len }
    }

    pub fn order(&self) -> &BigUint {
        &self.order
    }

    pub fn zero(&self) -> FieldElement {
        FieldElement(BigUint::zero())
    }

    pub fn one(&self) -> FieldElement {
        FieldElement(BigUint::one())
    }

    /// Reduces an arbitrary integer into the field.
    pub fn reduce(&self, v: &BigUint) -> FieldElement {
        FieldElement(v % &self.order)
    }

    pub fn from_u64(&self, v: u64) -> FieldElement {
        self.reduce(&BigUint::from(v))
    }

    /// Accepts `v` only if it is already reduced.
    pub fn element(&self, v: BigUint) -> Result<FieldElement, MathError> {
        if v < self.order {
            Ok(FieldElement(v))
        } else {
            Err(MathError::OutOfRange)
        }
    }

    /// Interprets a digest as a big-endian integer and reduces it.
    pub fn from_digest(&self, digest: &[u8]) -> FieldElement {
        self.reduce(&BigUint::from_bytes_be(digest))
    }

    /// Uniform sample by rejection.
    pub fn random<R: RngCore + ?Sized>(&self, rng: &mut R) -> FieldElement {
        random_below(&self.order, rng).map(FieldElement).expect("field order is positive")
    }

    pub fn add(&self, a: &FieldElement, b: &FieldElement) -> FieldElement {
        let s = &a.0 + &b.0;
        FieldElement(if s >= self.order { s - &self.order } else { s })
    }

    pub fn sub(&self, a: &FieldElement, b: &FieldElement) -> FieldElement {
        if a.0 >= b.0 {
            FieldElement(&a.0 - &b.0)
        } else {
            FieldElement(&self.order - (&b.0 - &a.0))
        }
    }

    pub fn neg(&self, a: &FieldElement) -> FieldElement {
        if a.0.is_zero() {
            a.clone()
        } else {
            FieldElement(&self.order - &a.0)
        }
    }

    pub fn mul(&self, a: &FieldElement, b: &FieldElement) -> FieldElement {
        FieldElement((&a.0 * &b.0) % &self.order)
    }

    pub fn pow(&self, a: &FieldElement, e: &BigUint) -> FieldElement {
        FieldElement(a.0.modpow(e, &self.order))
    }

    /// Multiplicative inverse via Fermat; `q` is prime.
    pub fn inv(&self, a: &FieldElement) -> Result<FieldElement, MathError> {
        if a.0.is_zero() {
            return Err(MathError::DivisionByZero);
        }
        let e = &self.order - BigUint::from(2u8);
        Ok(self.pow(a, &e))
    }

    pub fn sum<'a, I>(&self, items: I) -> FieldElement
    where
        I: IntoIterator<Item = &'a FieldElement>,
    {
        items.into_iter().fold(self.zero(), |acc, x| self.add(&acc, x))
    }

    /// Fixed-width big-endian encoding.
    pub fn to_bytes(&self, a: &FieldElement) -> Vec<u8> {
        fixed_width_be(&a.0, self.byte_len)
    }
}

/// Parameters of the commitment / signature group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupParams {
    p: BigUint,
    q: BigUint,
    g: GroupElement,
    h: GroupElement,
    scalars: ScalarField,
    byte_len: usize,
}

impl GroupParams {
    pub fn make(profile: GroupProfile) -> Self {
        match profile {
            GroupProfile::Toy => Self::toy(),
            GroupProfile::Standard => Self::standard(),
        }
    }

    /// The fixed test group `p = 2039, q = 1019, g = 4, h = 16`.
    ///
    /// `h = g^2`, so commitments are not binding against anyone who reads
    /// this comment. Test vectors only.
    pub fn toy() -> Self {
        Self::from_parts(
            BigUint::from(2039u32),
            BigUint::from(1019u32),
            BigUint::from(4u32),
            BigUint::from(16u32),
        )
    }

    /// RFC 3526 group 14 with `g = 2` and `h` hashed from a public nonce.
    pub fn standard() -> Self {
        let p = BigUint::parse_bytes(MODP_2048_HEX.as_bytes(), 16).expect("valid constant");
        let q: BigUint = (&p - 1u32) >> 1;
        let h = hash_to_subgroup(&p, BLINDING_GENERATOR_NONCE);
        Self::from_parts(p, q, BigUint::from(2u32), h)
    }

    /// Builds parameters without checking them; see [`GroupParams::validate`].
    pub fn from_parts(p: BigUint, q: BigUint, g: BigUint, h: BigUint) -> Self {
        let byte_len = p.bits().div_ceil(8) as usize;
        GroupParams {
            scalars: ScalarField::new(q.clone()),
            p,
            q,
            g: GroupElement(g),
            h: GroupElement(h),
            byte_len,
        }
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn g(&self) -> &GroupElement {
        &self.g
    }

    pub fn h(&self) -> &GroupElement {
        &self.h
    }

    pub fn scalars(&self) -> &ScalarField {
        &self.scalars
    }

    /// Byte length of fixed-width group element encodings.
    pub fn element_len(&self) -> usize {
        self.byte_len
    }

    /// Checks every structural invariant, including primality of `p` and `q`.
    pub fn validate(&self) -> Result<(), MathError> {
        if !is_probable_prime(&self.q) {
            return Err(MathError::InvalidParams("q is not prime"));
        }
        if !is_probable_prime(&self.p) {
            return Err(MathError::InvalidParams("p is not prime"));
        }
        if self.p != (&self.q << 1) + 1u32 {
            return Err(MathError::InvalidParams("p != 2q + 1"));
        }
        for (gen, name) in [(&self.g, "g"), (&self.h, "h")] {
            if gen.0.is_one() || gen.0.is_zero() || gen.0 >= self.p {
                return Err(MathError::InvalidParams(if name == "g" {
                    "g is degenerate"
                } else {
                    "h is degenerate"
                }));
            }
            if !gen.0.modpow(&self.q, &self.p).is_one() {
                return Err(MathError::InvalidParams(if name == "g" {
                    "g is not in the order-q subgroup"
                } else {
                    "h is not in the order-q subgroup"
                }));
            }
        }
        Ok(())
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement(BigUint::one())
    }

    /// Accepts `v` only if it lies in the order-`q` subgroup.
    pub fn element(&self, v: BigUint) -> Result<GroupElement, MathError> {
        // p = 2q + 1, so the order-q subgroup is exactly the quadratic residues.
        if v.is_zero() || v >= self.p || jacobi(&v, &self.p) != 1 {
            return Err(MathError::NotInSubgroup);
        }
        Ok(GroupElement(v))
    }

    pub fn mul(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        GroupElement((&a.0 * &b.0) % &self.p)
    }

    pub fn product<'a, I>(&self, items: I) -> GroupElement
    where
        I: IntoIterator<Item = &'a GroupElement>,
    {
        items
            .into_iter()
            .fold(self.identity(), |acc, x| self.mul(&acc, x))
    }

    pub fn invert(&self, a: &GroupElement) -> GroupElement {
        // a^(q-1) = a^-1 for subgroup members.
        let e = &self.q - 1u32;
        GroupElement(a.0.modpow(&e, &self.p))
    }

    /// `base^e mod p` by square-and-multiply. Not constant-time.
    pub fn exp(&self, base: &GroupElement, e: &FieldElement) -> GroupElement {
        GroupElement(base.0.modpow(&e.0, &self.p))
    }

    pub fn exp_g(&self, e: &FieldElement) -> GroupElement {
        self.exp(&self.g, e)
    }

    /// Fixed-width big-endian encoding used inside hashes.
    pub fn element_bytes(&self, a: &GroupElement) -> Vec<u8> {
        fixed_width_be(&a.0, self.byte_len)
    }
}

fn fixed_width_be(v: &BigUint, width: usize) -> Vec<u8> {
    let raw = v.to_bytes_be();
    let mut out = vec![0u8; width.saturating_sub(raw.len())];
    out.extend_from_slice(&raw);
    out
}

/// Maps a nonce to a subgroup element by expanding it with SHA-256 and squaring.
fn hash_to_subgroup(p: &BigUint, nonce: &[u8]) -> BigUint {
    let want = (p.bits() + 128).div_ceil(8) as usize;
    for attempt in 0u32.. {
        let mut wide = Vec::with_capacity(want + 32);
        let mut block = 0u32;
        while wide.len() < want {
            let mut hasher = Sha256::new();
            hasher.update(nonce);
            hasher.update(attempt.to_be_bytes());
            hasher.update(block.to_be_bytes());
            wide.extend_from_slice(&hasher.finalize());
            block += 1;
        }
        wide.truncate(want);
        let x = BigUint::from_bytes_be(&wide) % p;
        let h = (&x * &x) % p;
        if !h.is_zero() && !h.is_one() {
            return h;
        }
    }
    unreachable!("attempt counter exhausted")
}

/// Uniform integer in `[0, bound)`; `None` if `bound` is zero.
pub fn random_below<R: RngCore + ?Sized>(bound: &BigUint, rng: &mut R) -> Option<BigUint> {
    if bound.is_zero() {
        return None;
    }
    let bits = bound.bits();
    let len = bits.div_ceil(8) as usize;
    let excess = (len as u64 * 8 - bits) as u32;
    let mut buf = vec![0u8; len];
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xffu8 >> excess;
        let candidate = BigUint::from_bytes_be(&buf);
        if &candidate < bound {
            return Some(candidate);
        }
    }
}

const SMALL_PRIMES: [u32; 25] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

/// Miller–Rabin with bases drawn from a fixed-seed generator.
pub fn is_probable_prime(n: &BigUint) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for sp in SMALL_PRIMES {
        let sp = BigUint::from(sp);
        if n == &sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let mut d = n_minus_1.clone();
    let mut s = 0u32;
    while d.is_even() {
        d >>= 1;
        s += 1;
    }
    let mut rng = ChaCha20Rng::from_seed([7u8; 32]);
    let span = n - 3u32;
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = random_below(&span, &mut rng).expect("n > 3") + &two;
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Jacobi symbol `(a/n)` for odd `n`.
fn jacobi(a: &BigUint, n: &BigUint) -> i8 {
    let mut a = a % n;
    let mut n = n.clone();
    let mut sign = 1i8;
    while !a.is_zero() {
        let tz = a.trailing_zeros().unwrap_or(0);
        a >>= tz;
        let n_mod_8 = (&n % 8u32).to_u32_digits().first().copied().unwrap_or(0);
        if tz % 2 == 1 && (n_mod_8 == 3 || n_mod_8 == 5) {
            sign = -sign;
        }
        let a_mod_4 = (&a % 4u32).to_u32_digits().first().copied().unwrap_or(0);
        if a_mod_4 == 3 && n_mod_8 % 4 == 3 {
            sign = -sign;
        }
        std::mem::swap(&mut a, &mut n);
        a %= &n;
    }
    if n.is_one() { sign } else { 0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> GroupParams {
        GroupParams::toy()
    }

    /// Independent modular exponentiation by repeated multiplication.
    fn naive_pow(base: u64, e: u64, m: u64) -> u64 {
        (0..e).fold(1u64, |acc, _| acc * base % m)
    }

    fn trial_division_prime(n: u64) -> bool {
        n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| !n.is_multiple_of(d))
    }

    #[test]
    fn toy_field_vectors() {
        let f = toy().scalars().clone();
        assert_eq!(f.add(&f.from_u64(100), &f.from_u64(200)), f.from_u64(300));
        let expected = (5i64 - 300).rem_euclid(1019) as u64;
        assert_eq!(expected, 724);
        assert_eq!(f.sub(&f.from_u64(5), &f.from_u64(300)), f.from_u64(expected));
        assert_eq!(f.inv(&f.zero()), Err(MathError::DivisionByZero));
    }

    #[test]
    fn toy_group_exp_vectors() {
        let gp = toy();
        let four = gp.element(BigUint::from(4u32)).unwrap();
        let sixteen = gp.element(BigUint::from(16u32)).unwrap();
        let f = gp.scalars();
        assert_eq!(gp.exp(&four, &f.one()), four);
        let expected = naive_pow(16, 5, 2039);
        assert_eq!(expected, 530);
        assert_eq!(gp.exp(&sixteen, &f.from_u64(5)).value(), &BigUint::from(expected));
        // exponent q reduces to 0, which is the order of every element
        assert_eq!(gp.exp(gp.g(), &f.reduce(gp.q())), gp.identity());
        assert!(gp.g().value().modpow(gp.q(), gp.p()).is_one());
        assert!(gp.h().value().modpow(gp.q(), gp.p()).is_one());
    }

    #[test]
    fn toy_params_are_the_documented_group() {
        let gp = toy();
        assert_eq!(gp.p(), &BigUint::from(2039u32));
        assert_eq!(gp.q(), &BigUint::from(1019u32));
        assert_eq!(gp.g().value(), &BigUint::from(4u32));
        assert_eq!(gp.h().value(), &BigUint::from(16u32));
        assert!(trial_division_prime(2039));
        assert!(trial_division_prime(1019));
        // 4 = 2^2 and 16 = 4^2 are quadratic residues, hence of order q
        assert_eq!(naive_pow(4, 1019, 2039), 1);
        assert_eq!(naive_pow(16, 1019, 2039), 1);
        gp.validate().unwrap();
    }

    #[test]
    fn standard_params_validate() {
        let gp = GroupParams::standard();
        assert!(gp.p().bits() >= 2048);
        gp.validate().unwrap();
        assert_eq!(gp.exp_g(&gp.scalars().reduce(gp.q())), gp.identity());
    }

    #[test]
    fn validate_rejects_bad_params() {
        let bad = GroupParams::from_parts(
            BigUint::from(2039u32),
            BigUint::from(1019u32),
            BigUint::from(2039u32 - 1),
            BigUint::from(16u32),
        );
        assert!(bad.validate().is_err());
        let not_safe = GroupParams::from_parts(
            BigUint::from(2039u32),
            BigUint::from(1013u32),
            BigUint::from(4u32),
            BigUint::from(16u32),
        );
        assert!(not_safe.validate().is_err());
    }

    #[test]
    fn primality_matches_trial_division() {
        for n in 0u64..3000 {
            assert_eq!(is_probable_prime(&BigUint::from(n)), trial_division_prime(n), "n = {n}");
        }
    }

    #[test]
    fn subgroup_membership_check() {
        let gp = toy();
        // 2039 ≡ 7 mod 8 so 2 is a residue, but 2039 - 1 = -1 is not.
        assert!(gp.element(BigUint::from(2038u32)).is_err());
        assert!(gp.element(BigUint::from(0u32)).is_err());
        assert!(gp.element(BigUint::from(4u32)).is_ok());
    }

    #[test]
    fn exp_is_a_homomorphism() {
        let gp = toy();
        let f = gp.scalars();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a = f.random(&mut rng);
            let b = f.random(&mut rng);
            assert_eq!(
                gp.exp_g(&f.add(&a, &b)),
                gp.mul(&gp.exp_g(&a), &gp.exp_g(&b))
            );
        }
    }

    #[test]
    fn standard_exp_matches_binary_exp() {
        // right-to-left binary exponentiation as an independent reference
        let reference = |b: &BigUint, e: &BigUint, m: &BigUint| {
            let (mut acc, mut sq) = (BigUint::one(), b % m);
            for i in 0..e.bits() {
                if e.bit(i) {
                    acc = acc * &sq % m;
                }
                sq = &sq * &sq % m;
            }
            acc
        };
        let gp = GroupParams::standard();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..4 {
            let e = gp.scalars().random(&mut rng);
            assert_eq!(gp.exp_g(&e).value(), &reference(gp.g().value(), e.value(), gp.p()));
        }
    }

    #[test]
    fn inverse_in_group() {
        let gp = toy();
        let x = gp.exp_g(&gp.scalars().from_u64(77));
        assert_eq!(gp.mul(&x, &gp.invert(&x)), gp.identity());
    }

    proptest! {
        #[test]
        fn field_laws(a in 0u64..1019, b in 0u64..1019) {
            let f = toy().scalars().clone();
            let (a, b) = (f.from_u64(a), f.from_u64(b));
            for r in [f.add(&a, &b), f.sub(&a, &b), f.mul(&a, &b)] {
                prop_assert!(r.value() < f.order());
            }
            prop_assert_eq!(f.add(&a, &f.neg(&a)), f.zero());
            if !a.is_zero() {
                prop_assert_eq!(f.mul(&a, &f.inv(&a).unwrap()), f.one());
            }
        }

        #[test]
        fn subgroup_check_matches_euler(v in 1u64..2039) {
            let gp = toy();
            let v = BigUint::from(v);
            let euler = v.modpow(gp.q(), gp.p()).is_one();
            prop_assert_eq!(gp.element(v).is_ok(), euler);
        }

        #[test]
        fn subgroup_check_matches_euler_standard(seed in any::<[u8; 32]>()) {
            let gp = GroupParams::standard();
            let v = random_below(gp.p(), &mut ChaCha20Rng::from_seed(seed)).unwrap();
            let euler = !v.is_zero() && v.modpow(gp.q(), gp.p()).is_one();
            prop_assert_eq!(gp.element(v).is_ok(), euler);
        }
    }

    #[test]
    fn jacobi_vectors() {
        // (a/n) by Euler's criterion for prime n, and known composite values
        for (a, n, want) in [(2u32, 7u32, 1i8), (3, 7, -1), (14, 7, 0), (2, 15, 1), (7, 15, -1), (5, 21, 1), (1001, 9907, -1)] {
            assert_eq!(jacobi(&BigUint::from(a), &BigUint::from(n)), want, "({a}/{n})");
        }
    }
}
