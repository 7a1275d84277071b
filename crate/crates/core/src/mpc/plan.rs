//! Compilation of a function descriptor into share-level arithmetic.

use std::fmt;

use crate::math::{FieldElement, ScalarField};
use crate::policy::{FunctionDescriptor, FunctionId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("record length is zero")]
    EmptyRecord,
    #[error("selector index {index} out of range for record length {len}")]
    SelectorOutOfRange { index: usize, len: usize },
    #[error("malformed function: {0}")]
    Malformed(String),
}

/// One input element: element `element` of owner `owner`'s record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InputRef {
    pub owner: usize,
    pub element: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Input(InputRef),
    /// Output of the multiplication gate with this index.
    Gate(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultGate {
    pub left: InputRef,
    pub right: InputRef,
    pub triple: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OutputLabel {
    /// Total over the selection; `Some(j)` restricts it to element `j`.
    Sum(Option<usize>),
    SumSq(usize),
    Count,
}

impl fmt::Display for OutputLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputLabel::Sum(None) => f.write_str("SUM"),
            OutputLabel::Sum(Some(j)) => write!(f, "SUM[{j}]"),
            OutputLabel::SumSq(j) => write!(f, "SUMSQ[{j}]"),
            OutputLabel::Count => f.write_str("COUNT"),
        }
    }
}

impl OutputLabel {
    pub fn parse(s: &str) -> Option<Self> {
        let index = |rest: &str| -> Option<usize> {
            let digits = rest.strip_prefix('[')?.strip_suffix(']')?;
            if digits.is_empty() || (digits.len() > 1 && digits.starts_with('0')) {
                return None;
            }
            digits.parse().ok()
        };
        match s {
            "SUM" => Some(OutputLabel::Sum(None)),
            "COUNT" => Some(OutputLabel::Count),
            _ => {
                if let Some(rest) = s.strip_prefix("SUMSQ") {
                    index(rest).map(OutputLabel::SumSq)
                } else {
                    index(s.strip_prefix("SUM")?).map(|j| OutputLabel::Sum(Some(j)))
                }
            }
        }
    }
}

/// A weighted term of a linear combination.
pub type LinearTerm = (Operand, FieldElement);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPlan {
    pub outputs: Vec<OutputLabel>,
    /// One list per output.
    pub linear_terms: Vec<Vec<LinearTerm>>,
    /// Public constant per output, added by node 1 only.
    pub constants: Vec<FieldElement>,
    pub mult_gates: Vec<MultGate>,
}

impl EvalPlan {
    pub fn triple_count(&self) -> usize {
        self.mult_gates.len()
    }
}

pub fn plan(
    field: &ScalarField,
    f: &FunctionDescriptor,
    cohort: usize,
    record_len: usize,
) -> Result<EvalPlan, PlanError> {
    if cohort == 0 {
        return Err(PlanError::EmptyCohort);
    }
    if record_len == 0 {
        return Err(PlanError::EmptyRecord);
    }
    f.check_shape().map_err(|e| PlanError::Malformed(e.to_string()))?;
    if let Some(&index) = f.element_selector.iter().find(|&&j| j >= record_len) {
        return Err(PlanError::SelectorOutOfRange { index, len: record_len });
    }
    let one = field.one();
    let input = |owner, element| Operand::Input(InputRef { owner, element });
    let column = |j: usize| -> Vec<LinearTerm> { (0..cohort).map(|k| (input(k, j), one.clone())).collect() };

    let mut p = EvalPlan { outputs: vec![], linear_terms: vec![], constants: vec![], mult_gates: vec![] };
    let push = |p: &mut EvalPlan, label, terms, constant| {
        p.outputs.push(label);
        p.linear_terms.push(terms);
        p.constants.push(constant);
    };
    match f.function_id {
        FunctionId::Sum => {
            let terms = f.element_selector.iter().flat_map(|&j| column(j)).collect();
            push(&mut p, OutputLabel::Sum(None), terms, field.zero());
        }
        FunctionId::WeightedSum => {
            let terms = f
                .element_selector
                .iter()
                .zip(&f.weights)
                .flat_map(|(&j, w)| (0..cohort).map(move |k| (input(k, j), w.clone())))
                .collect();
            push(&mut p, OutputLabel::Sum(None), terms, field.zero());
        }
        FunctionId::MeanMoments | FunctionId::VarianceMoments => {
            let squares = f.function_id == FunctionId::VarianceMoments;
            for &j in &f.element_selector {
                push(&mut p, OutputLabel::Sum(Some(j)), column(j), field.zero());
                if squares {
                    let mut terms = Vec::with_capacity(cohort);
                    for k in 0..cohort {
                        let x = InputRef { owner: k, element: j };
                        let gate = p.mult_gates.len();
                        p.mult_gates.push(MultGate { left: x, right: x, triple: gate });
                        terms.push((Operand::Gate(gate), one.clone()));
                    }
                    push(&mut p, OutputLabel::SumSq(j), terms, field.zero());
                }
            }
            push(&mut p, OutputLabel::Count, vec![], field.from_u64(cohort as u64));
        }
    }
    Ok(p)
}
