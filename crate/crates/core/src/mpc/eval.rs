//! Local share arithmetic: linear combinations and Beaver multiplication.

use crate::math::{FieldElement, ScalarField};
use crate::sharing::TripleShare;

use super::plan::{EvalPlan, InputRef, LinearTerm, MultGate, Operand};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("missing share for owner {} element {}", .0.owner, .0.element)]
    MissingShare(InputRef),
    #[error("missing output of gate {0}")]
    MissingGate(usize),
    #[error("missing triple {0}")]
    MissingTriple(usize),
    #[error("nodes opened different values for gate {gate}")]
    ConsistencyAbort { gate: usize },
}

/// A node's shares, indexed by owner and then by element.
pub type InputShares = [Vec<FieldElement>];

fn input(inputs: &InputShares, r: InputRef) -> Result<&FieldElement, EvalError> {
    inputs.get(r.owner).and_then(|v| v.get(r.element)).ok_or(EvalError::MissingShare(r))
}

pub fn eval_linear(
    field: &ScalarField,
    inputs: &InputShares,
    gate_outputs: &[FieldElement],
    terms: &[LinearTerm],
) -> Result<FieldElement, EvalError> {
    let mut acc = field.zero();
    for (operand, weight) in terms {
        let v = match operand {
            Operand::Input(r) => input(inputs, *r)?,
            Operand::Gate(g) => gate_outputs.get(*g).ok_or(EvalError::MissingGate(*g))?,
        };
        acc = field.add(&acc, &field.mul(v, weight));
    }
    Ok(acc)
}

/// The publicly opened masks `d = x - a` and `e = y - b` of one gate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenedValue {
    pub gate: usize,
    pub d: FieldElement,
    pub e: FieldElement,
}

/// This node's contribution `(x_i - a_i, y_i - b_i)` to the opening of `gate`.
pub fn masked_shares(
    field: &ScalarField,
    inputs: &InputShares,
    gate: &MultGate,
    triples: &[TripleShare],
) -> Result<(FieldElement, FieldElement), EvalError> {
    let t = triples.get(gate.triple).ok_or(EvalError::MissingTriple(gate.triple))?;
    let x = input(inputs, gate.left)?;
    let y = input(inputs, gate.right)?;
    Ok((field.sub(x, &t.a), field.sub(y, &t.b)))
}

/// Sums the three contributions into the opened value.
pub fn open(field: &ScalarField, gate: usize, contributions: &[(FieldElement, FieldElement)]) -> OpenedValue {
    OpenedValue {
        gate,
        d: field.sum(contributions.iter().map(|c| &c.0)),
        e: field.sum(contributions.iter().map(|c| &c.1)),
    }
}

/// `z_i = c_i + e*a_i + d*b_i`, plus `e*d` at node 1.
///
/// `views` holds the opening as computed by every node; they must agree.
pub fn mult_gate(
    field: &ScalarField,
    triple: &TripleShare,
    views: &[&OpenedValue],
    node_index: u8,
) -> Result<FieldElement, EvalError> {
    let Some(first) = views.first() else {
        return Err(EvalError::ConsistencyAbort { gate: usize::MAX });
    };
    if views.iter().any(|v| v != first) {
        return Err(EvalError::ConsistencyAbort { gate: first.gate });
    }
    let OpenedValue { d, e, .. } = first;
    let mut z = field.add(&triple.c, &field.add(&field.mul(e, &triple.a), &field.mul(d, &triple.b)));
    if node_index == 1 {
        z = field.add(&z, &field.mul(e, d));
    }
    Ok(z)
}

/// Output shares of one node once all gate outputs are known.
pub fn eval_outputs(
    field: &ScalarField,
    plan: &EvalPlan,
    inputs: &InputShares,
    gate_outputs: &[FieldElement],
    node_index: u8,
) -> Result<Vec<FieldElement>, EvalError> {
    plan.linear_terms
        .iter()
        .zip(&plan.constants)
        .map(|(terms, constant)| {
            let v = eval_linear(field, inputs, gate_outputs, terms)?;
            Ok(if node_index == 1 { field.add(&v, constant) } else { v })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::GroupParams;
    use crate::mpc::plan::plan;
    use crate::policy::{FunctionDescriptor, FunctionId};
    use crate::sharing::{deal_triples, reconstruct, share, ShareVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn field() -> ScalarField {
        GroupParams::toy().scalars().clone()
    }

    fn shared_inputs(field: &ScalarField, values: &[Vec<u64>], rng: &mut ChaCha20Rng) -> Vec<Vec<Vec<FieldElement>>> {
        // result[node][owner][element]
        let mut per_node = vec![Vec::new(), Vec::new(), Vec::new()];
        for record in values {
            let secret: Vec<_> = record.iter().map(|&v| field.from_u64(v)).collect();
            for s in share(field, &secret, rng).unwrap() {
                per_node[usize::from(s.node_index) - 1].push(s.elements);
            }
        }
        per_node
    }

    fn rebuild(field: &ScalarField, z: [FieldElement; 3]) -> FieldElement {
        let shares: Vec<ShareVector> = z
            .into_iter()
            .enumerate()
            .map(|(i, v)| ShareVector { node_index: i as u8 + 1, elements: vec![v], randomness_tag: [0; 16] })
            .collect();
        reconstruct(field, &shares).unwrap().remove(0)
    }

    fn run_linear(field: &ScalarField, values: &[u64], weights: &[u64], rng: &mut ChaCha20Rng) -> FieldElement {
        let records: Vec<Vec<u64>> = values.iter().map(|&v| vec![v]).collect();
        let nodes = shared_inputs(field, &records, rng);
        let terms: Vec<LinearTerm> = weights
            .iter()
            .enumerate()
            .map(|(k, &w)| (Operand::Input(InputRef { owner: k, element: 0 }), field.from_u64(w)))
            .collect();
        let z = [0, 1, 2].map(|i| eval_linear(field, &nodes[i], &[], &terms).unwrap());
        rebuild(field, z)
    }

    #[test]
    fn unit_weights_sum() {
        let f = field();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(run_linear(&f, &[2, 3, 7], &[1, 1, 1], &mut rng), f.from_u64(12));
        assert_eq!(run_linear(&f, &[2, 3, 7], &[0, 0, 0], &mut rng), f.zero());
    }

    #[test]
    fn single_weight_scales() {
        let f = field();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..100 {
            let w = rng.gen_range(0..1019u64);
            let x = rng.gen_range(0..1019u64);
            assert_eq!(run_linear(&f, &[x], &[w], &mut rng), f.from_u64(w * x % 1019));
        }
    }

    #[test]
    fn missing_share_reported() {
        let f = field();
        let terms = vec![(Operand::Input(InputRef { owner: 2, element: 0 }), f.one())];
        let inputs = vec![vec![f.one()]];
        assert_eq!(
            eval_linear(&f, &inputs, &[], &terms),
            Err(EvalError::MissingShare(InputRef { owner: 2, element: 0 }))
        );
        let gate_terms = vec![(Operand::Gate(0), f.one())];
        assert_eq!(eval_linear(&f, &inputs, &[], &gate_terms), Err(EvalError::MissingGate(0)));
    }

    fn beaver(f: &ScalarField, x: u64, y: u64, rng: &mut ChaCha20Rng) -> FieldElement {
        let nodes = shared_inputs(f, &[vec![x, y]], rng);
        let triple = deal_triples(f, 1, rng).remove(0);
        let gate = MultGate {
            left: InputRef { owner: 0, element: 0 },
            right: InputRef { owner: 0, element: 1 },
            triple: 0,
        };
        let contributions: Vec<_> = (0..3)
            .map(|i| masked_shares(f, &nodes[i], &gate, std::slice::from_ref(&triple.shares[i])).unwrap())
            .collect();
        let opened = open(f, 0, &contributions);
        let z = [0, 1, 2].map(|i| {
            mult_gate(f, &triple.shares[i], &[&opened, &opened, &opened], i as u8 + 1).unwrap()
        });
        rebuild(f, z)
    }

    #[test]
    fn beaver_multiplication_matches_oracle() {
        let f = field();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        assert_eq!(beaver(&f, 6, 7, &mut rng), f.from_u64(42));
        for _ in 0..100 {
            let x = rng.gen_range(0..1019u64);
            let y = rng.gen_range(0..1019u64);
            assert_eq!(beaver(&f, x, y, &mut rng), f.from_u64(x * y % 1019));
            assert_eq!(beaver(&f, 0, y, &mut rng), f.zero());
        }
    }

    #[test]
    fn inconsistent_opening_aborts() {
        let f = field();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let triple = deal_triples(&f, 1, &mut rng).remove(0);
        let honest = OpenedValue { gate: 0, d: f.from_u64(5), e: f.from_u64(9) };
        let skewed = OpenedValue { e: f.from_u64(10), ..honest.clone() };
        assert_eq!(
            mult_gate(&f, &triple.shares[0], &[&honest, &skewed, &honest], 1),
            Err(EvalError::ConsistencyAbort { gate: 0 })
        );
    }

    #[test]
    fn full_variance_plan_on_shares() {
        let f = field();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let records = vec![vec![2u64], vec![3], vec![7]];
        let nodes = shared_inputs(&f, &records, &mut rng);
        let fd = FunctionDescriptor::new(FunctionId::VarianceMoments, vec![0], vec![]).unwrap();
        let p = plan(&f, &fd, 3, 1).unwrap();
        let triples = deal_triples(&f, p.triple_count(), &mut rng);
        let node_triples: Vec<Vec<TripleShare>> =
            (0..3).map(|i| triples.iter().map(|t| t.shares[i].clone()).collect()).collect();
        let opened: Vec<OpenedValue> = p
            .mult_gates
            .iter()
            .enumerate()
            .map(|(g, gate)| {
                let c: Vec<_> = (0..3).map(|i| masked_shares(&f, &nodes[i], gate, &node_triples[i]).unwrap()).collect();
                open(&f, g, &c)
            })
            .collect();
        let outputs: Vec<Vec<FieldElement>> = (0..3)
            .map(|i| {
                let gates: Vec<_> = opened
                    .iter()
                    .zip(&node_triples[i])
                    .map(|(o, t)| mult_gate(&f, t, &[o], i as u8 + 1).unwrap())
                    .collect();
                eval_outputs(&f, &p, &nodes[i], &gates, i as u8 + 1).unwrap()
            })
            .collect();
        let result: Vec<FieldElement> = (0..p.outputs.len())
            .map(|o| rebuild(&f, [0, 1, 2].map(|i| outputs[i][o].clone())))
            .collect();
        assert_eq!(result, vec![f.from_u64(12), f.from_u64(62), f.from_u64(3)]);
    }
}
