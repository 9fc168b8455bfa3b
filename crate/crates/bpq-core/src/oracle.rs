//! Exact brute-force computations on small discrete graphs: joint
//! enumeration, expected cost, conditional Q values, gradients of the
//! enumerated sum, and finite differences. Every other module is checked
//! against these.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::dist::{self, DistributionSpec};
use crate::expr::{eval_on_tape, eval_value, Bindings, TapeBindings, TrackedValue, Value};
use crate::model::{CostId, NodeId, ParamStore, ValidatedScg};
use crate::tape::{GradMap, Tape, TapeId};

/// Default ceiling on the number of joint assignments.
pub const DEFAULT_CAP: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub enum OracleError {
    ContinuousNodePresent(NodeId),
    EnumerationTooLarge { size: u128, cap: u128 },
    ZeroProbabilityCondition,
    UnknownCost(CostId),
    Invalid(String),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::ContinuousNodePresent(n) => {
                write!(
                    f,
                    "node `{n}` is continuous; enumeration needs discrete nodes"
                )
            }
            OracleError::EnumerationTooLarge { size, cap } => {
                write!(f, "outcome space of {size} assignments exceeds cap {cap}")
            }
            OracleError::ZeroProbabilityCondition => {
                write!(f, "conditioning event has probability zero")
            }
            OracleError::UnknownCost(c) => write!(f, "unknown cost `{c}`"),
            OracleError::Invalid(s) => write!(f, "{s}"),
        }
    }
}

impl core::error::Error for OracleError {}

/// Every joint assignment of the stochastic nodes with its probability.
#[derive(Clone, Debug)]
pub struct EnumerationResult {
    pub assignments: Vec<(BTreeMap<NodeId, Value>, f64)>,
    pub total_probability: f64,
}

fn outcome_space_size(scg: &ValidatedScg) -> Result<u128, OracleError> {
    let mut size: u128 = 1;
    for n in scg.stochastic_nodes() {
        match scg.spec(n) {
            Some(DistributionSpec::Bernoulli { .. }) => size = size.saturating_mul(2),
            Some(DistributionSpec::Categorical { k, .. }) => size = size.saturating_mul(*k as u128),
            Some(DistributionSpec::Dirac { .. }) => {}
            Some(DistributionSpec::Gaussian { .. }) => {
                return Err(OracleError::ContinuousNodePresent(n.clone()))
            }
            None => unreachable!(),
        }
    }
    Ok(size)
}

/// Depth-first walk over every joint assignment, in sorted node/value
/// order so that summation order is fixed. The visitor receives the full
/// node-value map (deterministic nodes included) and the assignment
/// probability.
fn fold_assignments<F>(
    scg: &ValidatedScg,
    params: &ParamStore,
    cap: u128,
    visit: &mut F,
) -> Result<(), OracleError>
where
    F: FnMut(&BTreeMap<NodeId, Value>, f64) -> Result<(), OracleError>,
{
    let size = outcome_space_size(scg)?;
    if size > cap {
        return Err(OracleError::EnumerationTooLarge { size, cap });
    }
    let order = scg.topo_order().to_vec();
    let mut values: BTreeMap<NodeId, Value> = BTreeMap::new();
    descend(scg, params, &order, 0, &mut values, 1.0, visit)
}

fn descend<F>(
    scg: &ValidatedScg,
    params: &ParamStore,
    order: &[NodeId],
    idx: usize,
    values: &mut BTreeMap<NodeId, Value>,
    prob: f64,
    visit: &mut F,
) -> Result<(), OracleError>
where
    F: FnMut(&BTreeMap<NodeId, Value>, f64) -> Result<(), OracleError>,
{
    if idx == order.len() {
        return visit(values, prob);
    }
    let node = &order[idx];
    if let Some(expr) = scg.det_expr(node) {
        let v = eval_value(
            expr,
            &Bindings {
                nodes: values,
                params,
            },
        )
        .map_err(|e| OracleError::Invalid(format!("{node}: {e}")))?;
        values.insert(node.clone(), v);
        descend(scg, params, order, idx + 1, values, prob, visit)?;
        values.remove(node);
        return Ok(());
    }
    let spec = scg.spec(node).expect("declared");
    let p = dist::plain_params(
        spec,
        &Bindings {
            nodes: values,
            params,
        },
    )
    .map_err(|e| OracleError::Invalid(format!("{node}: {e}")))?;
    dist::plain_validate(&p).map_err(|e| OracleError::Invalid(format!("{node}: {e}")))?;
    let outs =
        dist::plain_outcomes(&p).ok_or_else(|| OracleError::ContinuousNodePresent(node.clone()))?;
    for (v, mass) in outs {
        values.insert(node.clone(), v);
        descend(scg, params, order, idx + 1, values, prob * mass, visit)?;
        values.remove(node);
    }
    Ok(())
}

pub fn enumerate_traces(
    scg: &ValidatedScg,
    params: &ParamStore,
) -> Result<EnumerationResult, OracleError> {
    enumerate_with_cap(scg, params, DEFAULT_CAP)
}

pub fn enumerate_with_cap(
    scg: &ValidatedScg,
    params: &ParamStore,
    cap: u128,
) -> Result<EnumerationResult, OracleError> {
    let mut assignments = Vec::new();
    let mut total = 0.0;
    fold_assignments(scg, params, cap, &mut |values, prob| {
        let assignment: BTreeMap<NodeId, Value> = values
            .iter()
            .filter(|(n, _)| scg.is_stochastic(n))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        assignments.push((assignment, prob));
        total += prob;
        Ok(())
    })?;
    Ok(EnumerationResult {
        assignments,
        total_probability: total,
    })
}

fn total_cost_of(
    scg: &ValidatedScg,
    params: &ParamStore,
    values: &BTreeMap<NodeId, Value>,
) -> Result<f64, OracleError> {
    let mut total = 0.0;
    for (f, cost) in scg.costs() {
        let v = eval_value(
            &cost.expr,
            &Bindings {
                nodes: values,
                params,
            },
        )
        .map_err(|e| OracleError::Invalid(format!("{f}: {e}")))?;
        total += v
            .as_scalar()
            .ok_or_else(|| OracleError::Invalid(format!("cost `{f}` is not scalar")))?;
    }
    Ok(total)
}

/// Exact expected total cost.
pub fn exact_expected_cost(scg: &ValidatedScg, params: &ParamStore) -> Result<f64, OracleError> {
    let mut j = 0.0;
    fold_assignments(scg, params, DEFAULT_CAP, &mut |values, prob| {
        j += prob * total_cost_of(scg, params, values)?;
        Ok(())
    })?;
    Ok(j)
}

/// Conditional expectation of one cost given a partial assignment, by
/// restricted enumeration.
pub fn exact_q(
    scg: &ValidatedScg,
    params: &ParamStore,
    condition: &BTreeMap<NodeId, Value>,
    f: &CostId,
) -> Result<f64, OracleError> {
    let cost = scg
        .cost(f)
        .ok_or_else(|| OracleError::UnknownCost(f.clone()))?
        .clone();
    let mut num = 0.0;
    let mut den = 0.0;
    fold_assignments(scg, params, DEFAULT_CAP, &mut |values, prob| {
        if condition
            .iter()
            .all(|(n, v)| values.get(n).map(|x| x == v).unwrap_or(false))
        {
            let cv = eval_value(
                &cost.expr,
                &Bindings {
                    nodes: values,
                    params,
                },
            )
            .map_err(|e| OracleError::Invalid(format!("{f}: {e}")))?
            .as_scalar()
            .ok_or_else(|| OracleError::Invalid(format!("cost `{f}` is not scalar")))?;
            num += prob * cv;
            den += prob;
        }
        Ok(())
    })?;
    if den <= 0.0 {
        return Err(OracleError::ZeroProbabilityCondition);
    }
    Ok(num / den)
}

/// Exact gradient of the expected total cost with respect to every
/// parameter, by differentiating the enumerated sum on a tape: the
/// probability of each assignment and its cost are both built as live
/// expressions of the parameter store.
pub fn exact_grad(scg: &ValidatedScg, params: &ParamStore) -> Result<GradMap, OracleError> {
    exact_cost_and_grad(scg, params).map(|(_, g)| g)
}

pub fn exact_cost_and_grad(
    scg: &ValidatedScg,
    params: &ParamStore,
) -> Result<(f64, GradMap), OracleError> {
    let size = outcome_space_size(scg)?;
    if size > DEFAULT_CAP {
        return Err(OracleError::EnumerationTooLarge {
            size,
            cap: DEFAULT_CAP,
        });
    }
    let mut tape = Tape::new();
    // Register every parameter so the gradient map is total.
    for (name, v) in params.iter() {
        for (i, &x) in v.iter().enumerate() {
            tape.param(name, i, x, v.len());
        }
    }
    let mut terms: Vec<TapeId> = Vec::new();
    let order = scg.topo_order().to_vec();
    let mut tracked: BTreeMap<NodeId, TrackedValue> = BTreeMap::new();
    build_terms(
        scg,
        params,
        &order,
        0,
        &mut tape,
        &mut tracked,
        None,
        &mut terms,
    )?;
    let j_id = tape.sum(&terms);
    let j = tape.value(j_id);
    Ok((j, tape.backward_scalar(j_id)))
}

/// Recursive enumeration that mirrors `descend` but keeps every quantity
/// on the tape. `mass` is the running product of outcome masses.
#[allow(clippy::too_many_arguments)]
fn build_terms(
    scg: &ValidatedScg,
    params: &ParamStore,
    order: &[NodeId],
    idx: usize,
    tape: &mut Tape,
    tracked: &mut BTreeMap<NodeId, TrackedValue>,
    mass: Option<TapeId>,
    terms: &mut Vec<TapeId>,
) -> Result<(), OracleError> {
    if idx == order.len() {
        let mut cost_ids = Vec::new();
        for (f, cost) in scg.costs() {
            let t = eval_on_tape(
                &cost.expr,
                tape,
                &TapeBindings {
                    nodes: tracked,
                    params,
                },
            )
            .map_err(|e| OracleError::Invalid(format!("{f}: {e}")))?;
            if t.ids.len() != 1 {
                return Err(OracleError::Invalid(format!("cost `{f}` is not scalar")));
            }
            cost_ids.push(t.ids[0]);
        }
        let cost_sum = tape.sum(&cost_ids);
        let term = match mass {
            Some(m) => tape.mul(m, cost_sum),
            None => cost_sum,
        };
        terms.push(term);
        return Ok(());
    }
    let node = &order[idx];
    if let Some(expr) = scg.det_expr(node) {
        let t = eval_on_tape(
            expr,
            tape,
            &TapeBindings {
                nodes: tracked,
                params,
            },
        )
        .map_err(|e| OracleError::Invalid(format!("{node}: {e}")))?;
        tracked.insert(node.clone(), t);
        build_terms(scg, params, order, idx + 1, tape, tracked, mass, terms)?;
        tracked.remove(node);
        return Ok(());
    }
    let spec = scg.spec(node).expect("declared");
    let b = TapeBindings {
        nodes: tracked,
        params,
    };
    match spec {
        DistributionSpec::Dirac { value } => {
            let t = eval_on_tape(value, tape, &b)
                .map_err(|e| OracleError::Invalid(format!("{node}: {e}")))?;
            tracked.insert(node.clone(), t);
            build_terms(scg, params, order, idx + 1, tape, tracked, mass, terms)?;
            tracked.remove(node);
        }
        DistributionSpec::Bernoulli { prob } => {
            let p = eval_on_tape(prob, tape, &b)
                .map_err(|e| OracleError::Invalid(format!("{node}: {e}")))?;
            let pv = p.value.as_scalar().ok_or_else(|| {
                OracleError::Invalid(format!("{node}: bernoulli prob not scalar"))
            })?;
            if !(pv > 0.0 && pv < 1.0) {
                return Err(OracleError::Invalid(format!(
                    "{node}: bernoulli probability {pv} outside (0, 1)"
                )));
            }
            for outcome in 0..2u8 {
                let m = if outcome == 1 {
                    p.ids[0]
                } else {
                    let one = tape.constant(1.0);
                    tape.sub(one, p.ids[0])
                };
                let new_mass = Some(match mass {
                    Some(acc) => tape.mul(acc, m),
                    None => m,
                });
                let v = Value::Scalar(f64::from(outcome));
                tracked.insert(node.clone(), TrackedValue::from_constants(tape, &v));
                build_terms(scg, params, order, idx + 1, tape, tracked, new_mass, terms)?;
                tracked.remove(node);
            }
        }
        DistributionSpec::Categorical { k, probs } => {
            let p = eval_on_tape(probs, tape, &b)
                .map_err(|e| OracleError::Invalid(format!("{node}: {e}")))?;
            if p.ids.len() != *k {
                return Err(OracleError::Invalid(format!(
                    "{node}: categorical expects {k} probabilities"
                )));
            }
            for outcome in 0..*k {
                let m = p.ids[outcome];
                let new_mass = Some(match mass {
                    Some(acc) => tape.mul(acc, m),
                    None => m,
                });
                let v = Value::Scalar(outcome as f64);
                tracked.insert(node.clone(), TrackedValue::from_constants(tape, &v));
                build_terms(scg, params, order, idx + 1, tape, tracked, new_mass, terms)?;
                tracked.remove(node);
            }
        }
        DistributionSpec::Gaussian { .. } => {
            return Err(OracleError::ContinuousNodePresent(node.clone()))
        }
    }
    Ok(())
}

/// Probability-weighted expectation of a per-trace estimator gradient:
/// for every joint assignment, builds the trace the forward pass would
/// have produced, lets `build` construct a surrogate scalar on its tape,
/// and accumulates the backward gradients weighted by the assignment
/// probability. Zero-probability assignments are skipped.
pub fn expected_estimator_grad<F>(
    scg: &ValidatedScg,
    params: &ParamStore,
    plan: &crate::sample::SamplePlan,
    mut build: F,
) -> Result<GradMap, OracleError>
where
    F: FnMut(&mut crate::sample::Trace) -> Result<TapeId, OracleError>,
{
    let e = enumerate_traces(scg, params)?;
    let mut acc: GradMap = GradMap::new();
    for (name, v) in params.iter() {
        acc.insert(name.clone(), alloc::vec![0.0; v.len()]);
    }
    for (assignment, prob) in &e.assignments {
        if *prob == 0.0 {
            continue;
        }
        let mut trace = crate::sample::trace_for_assignment(scg, params, assignment, plan)
            .map_err(|err| OracleError::Invalid(format!("{err}")))?;
        let objective = build(&mut trace)?;
        let g = trace.tape.backward_scalar(objective);
        for (name, grad) in g {
            if let Some(slot) = acc.get_mut(&name) {
                for (s, v) in slot.iter_mut().zip(&grad) {
                    *s += prob * v;
                }
            }
        }
    }
    Ok(acc)
}

/// Central finite differences of a black-box objective over every
/// coordinate of every parameter.
pub fn finite_diff<F>(mut j_fn: F, params: &ParamStore, h: f64) -> Result<GradMap, OracleError>
where
    F: FnMut(&ParamStore) -> Result<f64, OracleError>,
{
    let mut out = GradMap::new();
    for (name, v) in params.iter() {
        let mut grad = Vec::with_capacity(v.len());
        for i in 0..v.len() {
            let mut up = params.clone();
            up.get_mut(name).expect("iterated")[i] += h;
            let mut dn = params.clone();
            dn.get_mut(name).expect("iterated")[i] -= h;
            grad.push((j_fn(&up)? - j_fn(&dn)?) / (2.0 * h));
        }
        out.insert(name.clone(), grad);
    }
    Ok(out)
}

/// Extremes of the total cost over every structurally possible joint
/// assignment, ignoring current probabilities. For models whose
/// parameterization can realize any conditional table, the minimum is the
/// optimum of the expected cost over parameters.
pub fn cost_range(scg: &ValidatedScg, params: &ParamStore) -> Result<(f64, f64), OracleError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    fold_assignments(scg, params, DEFAULT_CAP, &mut |values, _prob| {
        let c = total_cost_of(scg, params, values)?;
        lo = lo.min(c);
        hi = hi.max(c);
        Ok(())
    })?;
    Ok((lo, hi))
}
