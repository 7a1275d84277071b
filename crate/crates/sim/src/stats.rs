//! Exact rational finishing of reconstructed moments, and the plaintext
//! oracle the simulator compares against.

use std::collections::BTreeMap;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, Zero};

use kraken_core::mpc::OutputLabel;
use kraken_core::policy::{FunctionDescriptor, FunctionId};

use crate::error::AppError;

/// Final statistics keyed `SUM`, `MEAN[j]`, `VARIANCE[j]` and `COUNT`.
pub type Stats = BTreeMap<String, BigRational>;

fn rational(v: &BigUint) -> BigRational {
    BigRational::from_integer(BigInt::from(v.clone()))
}

/// Turns reconstructed moments into statistics. Population variance is
/// `SUMSQ/COUNT - (SUM/COUNT)^2`.
pub fn finish(f: &FunctionDescriptor, labels: &[OutputLabel], values: &[BigUint]) -> Result<Stats, AppError> {
    if labels.len() != values.len() {
        return Err(AppError::ResultRejected("label and value counts differ".into()));
    }
    let moments: BTreeMap<OutputLabel, BigRational> =
        labels.iter().copied().zip(values.iter().map(rational)).collect();
    let get = |l: OutputLabel| {
        moments.get(&l).cloned().ok_or_else(|| AppError::ResultRejected(format!("missing output {l}")))
    };
    let mut out = Stats::new();
    match f.function_id {
        FunctionId::Sum | FunctionId::WeightedSum => {
            out.insert("SUM".into(), get(OutputLabel::Sum(None))?);
        }
        FunctionId::MeanMoments | FunctionId::VarianceMoments => {
            let count = get(OutputLabel::Count)?;
            if count.is_zero() {
                return Err(AppError::ResultRejected("zero count".into()));
            }
            for &j in &f.element_selector {
                let mean = get(OutputLabel::Sum(Some(j)))? / &count;
                if f.function_id == FunctionId::VarianceMoments {
                    let var = get(OutputLabel::SumSq(j))? / &count - &mean * &mean;
                    out.insert(format!("VARIANCE[{j}]"), var);
                }
                out.insert(format!("MEAN[{j}]"), mean);
            }
            out.insert("COUNT".into(), count);
        }
    }
    Ok(out)
}

/// The statistics computed directly from the plaintext records, with the
/// variance taken as the mean squared deviation.
pub fn oracle(records: &[Vec<u64>], f: &FunctionDescriptor, weights: &[u64]) -> Stats {
    let int = |x: u64| BigRational::from_integer(BigInt::from(x));
    let mut out = Stats::new();
    match f.function_id {
        FunctionId::Sum => {
            let total = records.iter().flat_map(|r| f.element_selector.iter().map(|&j| int(r[j]))).sum();
            out.insert("SUM".into(), total);
        }
        FunctionId::WeightedSum => {
            let total = records
                .iter()
                .flat_map(|r| f.element_selector.iter().zip(weights).map(|(&j, &w)| int(r[j]) * int(w)))
                .sum();
            out.insert("SUM".into(), total);
        }
        FunctionId::MeanMoments | FunctionId::VarianceMoments => {
            let n = int(records.len() as u64);
            for &j in &f.element_selector {
                let mean = records.iter().map(|r| int(r[j])).sum::<BigRational>() / &n;
                if f.function_id == FunctionId::VarianceMoments {
                    let ss: BigRational = records
                        .iter()
                        .map(|r| {
                            let d = int(r[j]) - &mean;
                            &d * &d
                        })
                        .sum();
                    out.insert(format!("VARIANCE[{j}]"), ss / &n);
                }
                out.insert(format!("MEAN[{j}]"), mean);
            }
            out.insert("COUNT".into(), n);
        }
    }
    out
}

/// `"14/3"`, or `"4"` for integers.
pub fn render(stats: &Stats) -> BTreeMap<String, String> {
    stats
        .iter()
        .map(|(k, v)| {
            let s = if v.denom().is_one() { v.numer().to_string() } else { format!("{}/{}", v.numer(), v.denom()) };
            (k.clone(), s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use kraken_core::math::GroupParams;
    use proptest::prelude::*;

    fn f(id: FunctionId, sel: Vec<usize>) -> FunctionDescriptor {
        let weights = match id {
            FunctionId::WeightedSum => sel.iter().map(|_| GroupParams::toy().scalars().from_u64(2)).collect(),
            _ => vec![],
        };
        FunctionDescriptor::new(id, sel, weights).unwrap()
    }

    fn big(v: &[u64]) -> Vec<BigUint> {
        v.iter().map(|&x| BigUint::from(x)).collect()
    }

    #[test]
    fn two_three_seven() {
        let labels = [OutputLabel::Sum(Some(0)), OutputLabel::SumSq(0), OutputLabel::Count];
        let stats = finish(&f(FunctionId::VarianceMoments, vec![0]), &labels, &big(&[12, 62, 3])).unwrap();
        let r = render(&stats);
        assert_eq!(r["MEAN[0]"], "4");
        assert_eq!(r["VARIANCE[0]"], "14/3");
        assert_eq!(r["COUNT"], "3");
        let direct = oracle(&[vec![2], vec![3], vec![7]], &f(FunctionId::VarianceMoments, vec![0]), &[]);
        assert_eq!(direct, stats);
    }

    #[test]
    fn single_value_has_zero_variance() {
        let labels = [OutputLabel::Sum(Some(0)), OutputLabel::SumSq(0), OutputLabel::Count];
        let stats = finish(&f(FunctionId::VarianceMoments, vec![0]), &labels, &big(&[5, 25, 1])).unwrap();
        assert!(stats["VARIANCE[0]"].is_zero());
    }

    #[test]
    fn missing_label_rejected() {
        let r = finish(&f(FunctionId::MeanMoments, vec![0, 1]), &[OutputLabel::Sum(Some(0)), OutputLabel::Count], &big(&[1, 2]));
        assert!(matches!(r, Err(AppError::ResultRejected(_))));
    }

    proptest! {
        #[test]
        fn moments_finish_matches_oracle(
            records in prop::collection::vec(prop::collection::vec(0u64..1000, 3), 1..8),
            id in prop::sample::select(FunctionId::ALL.to_vec()),
        ) {
            let sel = vec![0, 2];
            let func = f(id, sel.clone());
            let col = |j: usize, sq: bool| records.iter().map(|r| if sq { r[j] * r[j] } else { r[j] }).sum::<u64>();
            let (labels, values): (Vec<_>, Vec<u64>) = match id {
                FunctionId::Sum => (vec![OutputLabel::Sum(None)], vec![col(0, false) + col(2, false)]),
                FunctionId::WeightedSum => (vec![OutputLabel::Sum(None)], vec![2 * (col(0, false) + col(2, false))]),
                FunctionId::MeanMoments => (
                    vec![OutputLabel::Sum(Some(0)), OutputLabel::Sum(Some(2)), OutputLabel::Count],
                    vec![col(0, false), col(2, false), records.len() as u64],
                ),
                FunctionId::VarianceMoments => (
                    vec![OutputLabel::Sum(Some(0)), OutputLabel::SumSq(0), OutputLabel::Sum(Some(2)), OutputLabel::SumSq(2), OutputLabel::Count],
                    vec![col(0, false), col(0, true), col(2, false), col(2, true), records.len() as u64],
                ),
            };
            let finished = finish(&func, &labels, &big(&values)).unwrap();
            prop_assert_eq!(finished, oracle(&records, &func, &[2, 2]));
        }
    }
}
