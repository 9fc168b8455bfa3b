//! Per-node differentiable surrogate objectives.
//!
//! Each family appends a scalar to the trace's tape whose backward pass
//! yields the node's gradient estimator. Score-term coefficients are
//! always detached data: differentiating a surrogate never sends
//! gradients into the learning signal itself.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::approx::{QApproximator, QError};
use crate::dist::{self, DistParams, DistributionSpec};
use crate::expr::{eval_on_tape, ExprError, TapeBindings, TrackedValue};
use crate::learn::{scope_assignment, LearnError, QMap};
use crate::model::{NodeId, ParamStore, ValidatedScg};
use crate::network::BpqNetwork;
use crate::sample::{NodePlan, SamplePlan, Trace};
use crate::tape::{Tape, TapeId};

/// A surrogate scalar on the trace's tape, with its component breakdown.
#[derive(Clone, Copy, Debug)]
pub struct SurrogateObjective {
    pub objective: TapeId,
    pub score: Option<TapeId>,
    pub pathwise: Option<TapeId>,
    pub correction: Option<TapeId>,
}

impl SurrogateObjective {
    fn score_only(id: TapeId) -> Self {
        SurrogateObjective {
            objective: id,
            score: Some(id),
            pathwise: None,
            correction: None,
        }
    }

    fn pathwise_only(id: TapeId) -> Self {
        SurrogateObjective {
            objective: id,
            score: None,
            pathwise: Some(id),
            correction: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EstimatorError {
    NotReparameterizable(NodeId),
    NotRelaxed(NodeId),
    TemperatureNonPositive(f64),
    NoAnalyticMean(NodeId),
    DegenerateVariance,
    MissingLogProb(NodeId),
    NotStochastic(NodeId),
    Learn(Box<LearnError>),
    Approx(QError),
    Expr(String),
}

impl fmt::Display for EstimatorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorError::NotReparameterizable(n) => {
                write!(f, "`{n}` was not sampled through a pathwise transform")
            }
            EstimatorError::NotRelaxed(n) => {
                write!(f, "`{n}` was not sampled with a relaxation")
            }
            EstimatorError::TemperatureNonPositive(t) => {
                write!(f, "temperature must be positive, got {t}")
            }
            EstimatorError::NoAnalyticMean(n) => write!(f, "`{n}` has no analytic mean"),
            EstimatorError::DegenerateVariance => {
                write!(f, "control-variate samples have zero variance")
            }
            EstimatorError::MissingLogProb(n) => {
                write!(f, "trace has no log-probability for `{n}`")
            }
            EstimatorError::NotStochastic(n) => write!(f, "`{n}` is not stochastic"),
            EstimatorError::Learn(e) => write!(f, "{e}"),
            EstimatorError::Approx(e) => write!(f, "{e}"),
            EstimatorError::Expr(s) => write!(f, "{s}"),
        }
    }
}

impl core::error::Error for EstimatorError {}

impl From<LearnError> for EstimatorError {
    fn from(e: LearnError) -> Self {
        EstimatorError::Learn(Box::new(e))
    }
}

impl From<QError> for EstimatorError {
    fn from(e: QError) -> Self {
        EstimatorError::Approx(e)
    }
}

fn log_prob_id(trace: &Trace, node: &NodeId) -> Result<TapeId, EstimatorError> {
    trace
        .log_prob_ids
        .get(node)
        .copied()
        .ok_or_else(|| EstimatorError::MissingLogProb(node.clone()))
}

/// Score-function estimator: backward yields `signal * grad(log p)` with
/// the signal detached.
pub fn reinforce(
    trace: &mut Trace,
    node: &NodeId,
    signal: f64,
) -> Result<SurrogateObjective, EstimatorError> {
    let lp = log_prob_id(trace, node)?;
    let id = trace.tape.scale(lp, signal);
    Ok(SurrogateObjective::score_only(id))
}

/// Score-function estimator with a baseline that does not depend on the
/// sampled value; the bias-correction term vanishes and is dropped.
pub fn baseline_cv(
    trace: &mut Trace,
    node: &NodeId,
    signal: f64,
    baseline: f64,
) -> Result<SurrogateObjective, EstimatorError> {
    reinforce(trace, node, signal - baseline)
}

/// What the linear Taylor control variate linearizes.
pub enum TaylorTarget<'a> {
    /// The sum of downstream costs, with every other stochastic node
    /// replaced by its conditional mean propagated in topological order.
    MeanFieldCosts,
    /// The node's own learned surrogate (continuous scopes only).
    OwnQ(&'a QApproximator),
}

/// Control variate `c(z) = f(mean) + f'(mean) (z - mean)`: the score
/// coefficient becomes `signal - c(z)` and the correction term `f(mean)`
/// rides the tape as a live function of the parameters.
pub fn taylor_cv(
    trace: &mut Trace,
    scg: &ValidatedScg,
    params: &ParamStore,
    node: &NodeId,
    signal: f64,
    target: TaylorTarget<'_>,
) -> Result<SurrogateObjective, EstimatorError> {
    let lp = log_prob_id(trace, node)?;
    let spec = scg
        .spec(node)
        .ok_or_else(|| EstimatorError::NotStochastic(node.clone()))?;
    if matches!(spec, DistributionSpec::Dirac { .. }) {
        return Err(EstimatorError::NoAnalyticMean(node.clone()));
    }

    // Conditional mean of the node, live through the parameters, with
    // parents at their sampled values.
    let parents_detached = detached_env(trace, scg, node);
    let dparams = dist_params_on(trace, scg, params, node, &parents_detached)?;
    let mean = dist::mean_on_tape(&mut trace.tape, &dparams)
        .map_err(|e| EstimatorError::Expr(format!("{e}")))?;
    if mean.ids.len() != 1 {
        return Err(EstimatorError::NoAnalyticMean(node.clone()));
    }

    // f(mean) as a probe subtree, used only to read off the value and
    // the slope at the mean.
    let probe = match target {
        TaylorTarget::MeanFieldCosts => mean_field_costs(trace, scg, params, node, &mean)?,
        TaylorTarget::OwnQ(q) => {
            let mut values = trace.values.clone();
            values.insert(node.clone(), mean.value.clone());
            let assignment = scope_assignment(&values, &q.scope)?;
            let live: BTreeMap<NodeId, Vec<TapeId>> =
                [(node.clone(), mean.ids.clone())].into_iter().collect();
            q.eval_on_tape(&mut trace.tape, &assignment, &live)?
        }
    };

    // f'(mean): adjoint of the mean input under the probe output.
    let adj = trace.tape.adjoints(&[(probe, 1.0)]);
    let fprime = adj[mean.ids[0].index()];
    let f_at_mean = trace.tape.value(probe);
    let mean_value = mean.value.as_scalar().expect("scalar mean");
    let z_value = trace
        .hard_value(node)
        .and_then(|v| v.as_scalar())
        .ok_or_else(|| EstimatorError::NoAnalyticMean(node.clone()))?;
    let c_at_z = f_at_mean + fprime * (z_value - mean_value);

    // The correction gradient flows through the mean alone:
    // f'(mean) * d(mean)/d(theta), with value E[c] = f(mean).
    let slope_term = trace.tape.scale(mean.ids[0], fprime);
    let correction = trace
        .tape
        .add_const(slope_term, f_at_mean - fprime * mean_value);

    let score = trace.tape.scale(lp, signal - c_at_z);
    let objective = trace.tape.add(score, correction);
    Ok(SurrogateObjective {
        objective,
        score: Some(score),
        pathwise: None,
        correction: Some(correction),
    })
}

/// Pure pathwise estimator: the surrogate is the differentiable signal
/// itself, reached through the node's recorded transform. No score term.
pub fn reparam(
    trace: &Trace,
    node: &NodeId,
    f_tape: TapeId,
) -> Result<SurrogateObjective, EstimatorError> {
    if !trace.pathwise.contains_key(node) {
        return Err(EstimatorError::NotReparameterizable(node.clone()));
    }
    Ok(SurrogateObjective::pathwise_only(f_tape))
}

/// Pathwise estimator through a temperature relaxation; biased, with the
/// bias vanishing in the low-temperature limit.
pub fn relaxed_reparam(
    trace: &Trace,
    node: &NodeId,
    f_tape: TapeId,
) -> Result<SurrogateObjective, EstimatorError> {
    if !trace.relaxed.contains_key(node) {
        return Err(EstimatorError::NotRelaxed(node.clone()));
    }
    Ok(SurrogateObjective::pathwise_only(f_tape))
}

/// Builds a differentiable scalar from live input ids.
pub type CvBuilder<'a> = dyn FnMut(&mut Tape, &[TapeId]) -> TapeId + 'a;

/// Score term with a sample-dependent control variate plus a pathwise
/// bias-correction path through the control variate itself:
/// `(signal - c(z)) grad(log p) + grad c(z(eps; theta))`.
pub fn cv_reparam(
    trace: &mut Trace,
    node: &NodeId,
    signal: f64,
    c: &mut CvBuilder<'_>,
) -> Result<SurrogateObjective, EstimatorError> {
    let lp = log_prob_id(trace, node)?;
    let z = trace
        .pathwise
        .get(node)
        .cloned()
        .ok_or_else(|| EstimatorError::NotReparameterizable(node.clone()))?;
    let c_live = c(&mut trace.tape, &z.ids);
    let c_value = trace.tape.value(c_live);
    let score = trace.tape.scale(lp, signal - c_value);
    let objective = trace.tape.add(score, c_live);
    Ok(SurrogateObjective {
        objective,
        score: Some(score),
        pathwise: Some(c_live),
        correction: None,
    })
}

/// Discrete counterpart of [`cv_reparam`] through a pair of relaxed
/// draws: the control variate is evaluated at the posterior draw (given
/// the hard outcome) inside the score coefficient and subtracted as a
/// pathwise term, while the unconditional draw adds the bias-correction
/// path. Unbiased in exact expectation for any control variate.
pub fn cv_reparam_relaxed(
    trace: &mut Trace,
    node: &NodeId,
    signal: f64,
    c: &mut CvBuilder<'_>,
) -> Result<SurrogateObjective, EstimatorError> {
    let lp = log_prob_id(trace, node)?;
    let relaxed = trace
        .relaxed
        .get(node)
        .cloned()
        .ok_or_else(|| EstimatorError::NotRelaxed(node.clone()))?;
    let z_post = relaxed
        .z_post
        .ok_or_else(|| EstimatorError::NotRelaxed(node.clone()))?;
    let c_post = c(&mut trace.tape, &z_post.ids);
    let c_prior = c(&mut trace.tape, &relaxed.z.ids);
    let c_post_value = trace.tape.value(c_post);
    let score = trace.tape.scale(lp, signal - c_post_value);
    let neg_post = trace.tape.neg(c_post);
    let partial = trace.tape.add(score, neg_post);
    let objective = trace.tape.add(partial, c_prior);
    Ok(SurrogateObjective {
        objective,
        score: Some(score),
        pathwise: Some(c_prior),
        correction: Some(neg_post),
    })
}

/// Return-based estimator with the learned surrogate as control variate:
/// `(R - a Q(z) - b) grad(log p) + a grad_z Q(z) grad_theta z`.
pub fn q_control_variate(
    trace: &mut Trace,
    node: &NodeId,
    actual_return: f64,
    q: &QApproximator,
    scale: f64,
    baseline: f64,
) -> Result<SurrogateObjective, EstimatorError> {
    let lp = log_prob_id(trace, node)?;
    let z = trace
        .pathwise
        .get(node)
        .cloned()
        .ok_or_else(|| EstimatorError::NotReparameterizable(node.clone()))?;
    let assignment = scope_assignment(&trace.values, &q.scope)?;
    let live: BTreeMap<NodeId, Vec<TapeId>> = [(node.clone(), z.ids.clone())].into_iter().collect();
    let q_live = q.eval_on_tape(&mut trace.tape, &assignment, &live)?;
    let q_value = trace.tape.value(q_live);
    let score = trace
        .tape
        .scale(lp, actual_return - scale * q_value - baseline);
    let path = trace.tape.scale(q_live, scale);
    let objective = trace.tape.add(score, path);
    Ok(SurrogateObjective {
        objective,
        score: Some(score),
        pathwise: Some(path),
        correction: None,
    })
}

/// Variance-minimizing scale and baseline from paired (return, Q)
/// samples: `a = Cov(R, Q) / Var(Q)`, `b = mean(R) - a mean(Q)`.
pub fn fit_scale_baseline(samples: &[(f64, f64)]) -> Result<(f64, f64), EstimatorError> {
    if samples.len() < 2 {
        return Err(EstimatorError::DegenerateVariance);
    }
    let n = samples.len() as f64;
    let mean_r = samples.iter().map(|(r, _)| r).sum::<f64>() / n;
    let mean_q = samples.iter().map(|(_, q)| q).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (r, q) in samples {
        cov += (r - mean_r) * (q - mean_q);
        var += (q - mean_q) * (q - mean_q);
    }
    if var <= 1e-300 {
        return Err(EstimatorError::DegenerateVariance);
    }
    let a = cov / var;
    Ok((a, mean_r - a * mean_q))
}

/// Clipped ratio objective (cost-minimization orientation):
/// `max(r q, clip(r, 1 - eps, 1 + eps) q)`.
pub fn ppo_clip_objective(ratio: f64, q_value: f64, eps_clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
    (ratio * q_value).max(clipped * q_value)
}

/// Tape version: gradient flows through the ratio on the unclipped
/// branch; the clipped branch blocks it outside the interval.
pub fn ppo_clip_on_tape(tape: &mut Tape, ratio: TapeId, q_value: f64, eps_clip: f64) -> TapeId {
    let q = tape.constant(q_value);
    let a = tape.mul(ratio, q);
    let clipped = tape.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip);
    let b = tape.mul(clipped, q);
    tape.max(a, b)
}

/// Estimator family per stochastic node.
#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    Reinforce,
    /// Score with a value-independent baseline.
    BaselineCv(BaselineKind),
    /// Linear Taylor control variate around the conditional mean.
    TaylorCv,
    /// Pure pathwise (continuous nodes).
    Reparam,
    /// Pathwise through a relaxation (discrete nodes); biased.
    RelaxedReparam {
        temperature: f64,
    },
    /// Score plus pathwise correction through the node's own surrogate.
    CvReparam,
    /// Discrete score plus paired-relaxation paths through the node's
    /// own surrogate extended to the soft simplex.
    CvReparamRelaxed {
        temperature: f64,
    },
    /// Return-centered score with the surrogate as control variate.
    QControlVariate {
        scale: f64,
        baseline: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaselineKind {
    Constant(f64),
    /// Running mean of the node's signal, maintained by the caller.
    RunningMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalSource {
    /// Sum of the node's learned Q values (plus directly-consumed costs).
    LearnedQ,
    /// Sum of downstream cost values on the trace.
    ActualReturn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeEstimator {
    pub family: Family,
    pub signal: SignalSource,
}

impl Default for NodeEstimator {
    fn default() -> Self {
        NodeEstimator {
            family: Family::Reinforce,
            signal: SignalSource::LearnedQ,
        }
    }
}

/// Which estimator each stochastic node uses; nodes not listed use the
/// default.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EstimatorConfig {
    pub nodes: BTreeMap<NodeId, NodeEstimator>,
    pub default: NodeEstimator,
}

impl EstimatorConfig {
    pub fn all(default: NodeEstimator) -> Self {
        EstimatorConfig {
            nodes: BTreeMap::new(),
            default,
        }
    }

    pub fn with(mut self, node: &str, est: NodeEstimator) -> Self {
        self.nodes.insert(NodeId::from(node), est);
        self
    }

    pub fn for_node(&self, node: &NodeId) -> &NodeEstimator {
        self.nodes.get(node).unwrap_or(&self.default)
    }

    /// The sampling plan the configured families require.
    pub fn sample_plan(&self, scg: &ValidatedScg) -> SamplePlan {
        let mut plan = SamplePlan::plain();
        for node in scg.stochastic_nodes() {
            let est = self.for_node(node);
            let node_plan = match (&est.family, est.signal) {
                (Family::Reparam, SignalSource::ActualReturn) => Some(NodePlan::Pathwise {
                    through_costs: true,
                }),
                (Family::Reparam, SignalSource::LearnedQ) => Some(NodePlan::Pathwise {
                    through_costs: false,
                }),
                (Family::RelaxedReparam { temperature }, SignalSource::ActualReturn) => {
                    Some(NodePlan::Relaxed {
                        temperature: *temperature,
                    })
                }
                (Family::RelaxedReparam { temperature }, SignalSource::LearnedQ) => {
                    Some(NodePlan::RelaxedSide {
                        temperature: *temperature,
                    })
                }
                (Family::CvReparam, _) | (Family::QControlVariate { .. }, _) => {
                    Some(NodePlan::Pathwise {
                        through_costs: false,
                    })
                }
                (Family::CvReparamRelaxed { temperature }, _) => Some(NodePlan::RelaxedPair {
                    temperature: *temperature,
                }),
                (Family::Reinforce | Family::BaselineCv(_) | Family::TaylorCv, _) => None,
            };
            if let Some(p) = node_plan {
                plan.set(node.clone(), p);
            }
        }
        plan
    }
}

/// The learning signal at a node: either the actual downstream return or
/// the sum of its learned Q values, with costs that no Q-node covers
/// added directly.
pub fn resolve_signal(
    scg: &ValidatedScg,
    net: &BpqNetwork,
    qs: &QMap,
    trace: &Trace,
    node: &NodeId,
    source: SignalSource,
) -> Result<f64, EstimatorError> {
    match source {
        SignalSource::ActualReturn => Ok(trace.downstream_cost(scg, node)),
        SignalSource::LearnedQ => {
            let mut covered: BTreeSet<&crate::model::CostId> = BTreeSet::new();
            let mut total = 0.0;
            for idx in net.owned_by(node) {
                total += crate::learn::q_value_at(net, qs, idx, trace)?;
                covered.extend(net.qnodes[idx].cost_sources.iter());
            }
            for f in scg.reachable_costs(node).into_iter().flatten() {
                if !covered.contains(f) {
                    total += trace.cost_values[f];
                }
            }
            Ok(total)
        }
    }
}

/// Own-Q of a node usable as a differentiable target on the tape, with
/// the node's coordinates live.
fn own_q_on_tape(
    trace: &mut Trace,
    node: &NodeId,
    q: &QApproximator,
    live_ids: &[TapeId],
) -> Result<TapeId, EstimatorError> {
    let assignment = scope_assignment(&trace.values, &q.scope)?;
    let live: BTreeMap<NodeId, Vec<TapeId>> =
        [(node.clone(), live_ids.to_vec())].into_iter().collect();
    Ok(q.eval_on_tape(&mut trace.tape, &assignment, &live)?)
}

/// Multilinear extension of a discrete node's Q onto the relaxed
/// simplex: mixes the Q values of each outcome by the softened weights,
/// so the result is differentiable through the relaxation. Other scope
/// members stay at their trace values.
pub fn q_soft_extension(
    trace: &mut Trace,
    scg: &ValidatedScg,
    node: &NodeId,
    q: &QApproximator,
    z_ids: &[TapeId],
    temperature: f64,
) -> Result<TapeId, EstimatorError> {
    let z_values: Vec<f64> = z_ids.iter().map(|&i| trace.tape.value(i)).collect();
    let soft = dist::soften(
        &mut trace.tape,
        &TrackedValue {
            value: crate::expr::Value::Vector(z_values),
            ids: z_ids.to_vec(),
        },
        temperature,
    );
    // Outcome weights: binary soft scalar s gives [1-s, s]; categorical
    // softmax gives the vector directly.
    let weights: Vec<TapeId> = if soft.ids.len() == 1 {
        let one = trace.tape.constant(1.0);
        let w0 = trace.tape.sub(one, soft.ids[0]);
        alloc::vec![w0, soft.ids[0]]
    } else {
        soft.ids.clone()
    };
    let card = scg
        .cardinality(node)
        .ok_or_else(|| EstimatorError::NotRelaxed(node.clone()))? as usize;
    if weights.len() != card {
        return Err(EstimatorError::NotRelaxed(node.clone()));
    }
    let mut acc = trace.tape.constant(0.0);
    for (outcome, &w) in weights.iter().enumerate() {
        let mut values = trace.values.clone();
        values.insert(node.clone(), crate::expr::Value::Scalar(outcome as f64));
        let assignment = scope_assignment(&values, &q.scope)?;
        let qv = q.eval(&assignment)?;
        let term = trace.tape.scale(w, qv);
        acc = trace.tape.add(acc, term);
    }
    Ok(acc)
}

/// Builds the combined surrogate for a whole trace: the per-node family
/// surrogates plus the recorded cost terms (which carry cost-parameter
/// gradients, direct deterministic routes, and the pathwise paths of
/// nodes whose plan exposes them to the costs). Shared and tied
/// parameters accumulate summed gradients through the shared tape
/// leaves.
pub fn build_surrogate(
    scg: &ValidatedScg,
    trace: &mut Trace,
    net: &BpqNetwork,
    qs: &QMap,
    params: &ParamStore,
    config: &EstimatorConfig,
    running_means: &BTreeMap<NodeId, f64>,
) -> Result<SurrogateObjective, EstimatorError> {
    let mut terms: Vec<TapeId> = Vec::new();
    let nodes: Vec<NodeId> = scg.stochastic_nodes().cloned().collect();
    for node in &nodes {
        if matches!(scg.spec(node), Some(DistributionSpec::Dirac { .. })) {
            continue; // log-probability identically zero
        }
        let est = config.for_node(node);
        let signal = resolve_signal(scg, net, qs, trace, node, est.signal)?;
        let own_q = net
            .owned_by(node)
            .first()
            .and_then(|&i| net.qnodes[i].key())
            .and_then(|k| qs.get(&k));
        let surrogate = match &est.family {
            Family::Reinforce => Some(reinforce(trace, node, signal)?),
            Family::BaselineCv(kind) => {
                let b = match kind {
                    BaselineKind::Constant(c) => *c,
                    BaselineKind::RunningMean => running_means.get(node).copied().unwrap_or(0.0),
                };
                Some(baseline_cv(trace, node, signal, b)?)
            }
            Family::TaylorCv => Some(taylor_cv(
                trace,
                scg,
                params,
                node,
                signal,
                TaylorTarget::MeanFieldCosts,
            )?),
            Family::Reparam => match est.signal {
                // actual return: the shared cost term is the estimator
                SignalSource::ActualReturn => {
                    if !trace.pathwise.contains_key(node) {
                        return Err(EstimatorError::NotReparameterizable(node.clone()));
                    }
                    None
                }
                SignalSource::LearnedQ => {
                    let q = own_q.ok_or_else(|| {
                        EstimatorError::Learn(Box::new(LearnError::MissingApproximator(
                            crate::network::QKey {
                                owner: node.clone(),
                                sources: BTreeSet::new(),
                            },
                        )))
                    })?;
                    let z = trace
                        .pathwise
                        .get(node)
                        .cloned()
                        .ok_or_else(|| EstimatorError::NotReparameterizable(node.clone()))?;
                    let q_live = own_q_on_tape(trace, node, q, &z.ids)?;
                    Some(reparam(trace, node, q_live)?)
                }
            },
            Family::RelaxedReparam { temperature } => match est.signal {
                SignalSource::ActualReturn => {
                    if !trace.relaxed.contains_key(node) {
                        return Err(EstimatorError::NotRelaxed(node.clone()));
                    }
                    None // costs already consume the softened value
                }
                SignalSource::LearnedQ => {
                    let q = own_q.ok_or_else(|| {
                        EstimatorError::Learn(Box::new(LearnError::MissingApproximator(
                            crate::network::QKey {
                                owner: node.clone(),
                                sources: BTreeSet::new(),
                            },
                        )))
                    })?;
                    let zctx = trace
                        .relaxed
                        .get(node)
                        .cloned()
                        .ok_or_else(|| EstimatorError::NotRelaxed(node.clone()))?;
                    let q_soft =
                        q_soft_extension(trace, scg, node, q, &z_ids_of(&zctx), *temperature)?;
                    Some(relaxed_reparam(trace, node, q_soft)?)
                }
            },
            Family::CvReparam => {
                let q = own_q
                    .ok_or_else(|| {
                        EstimatorError::Learn(Box::new(LearnError::MissingApproximator(
                            crate::network::QKey {
                                owner: node.clone(),
                                sources: BTreeSet::new(),
                            },
                        )))
                    })?
                    .clone();
                let z = trace
                    .pathwise
                    .get(node)
                    .cloned()
                    .ok_or_else(|| EstimatorError::NotReparameterizable(node.clone()))?;
                let lp = log_prob_id(trace, node)?;
                let c_live = own_q_on_tape(trace, node, &q, &z.ids)?;
                let c_value = trace.tape.value(c_live);
                let score = trace.tape.scale(lp, signal - c_value);
                let objective = trace.tape.add(score, c_live);
                Some(SurrogateObjective {
                    objective,
                    score: Some(score),
                    pathwise: Some(c_live),
                    correction: None,
                })
            }
            Family::CvReparamRelaxed { temperature } => {
                let q = own_q
                    .ok_or_else(|| {
                        EstimatorError::Learn(Box::new(LearnError::MissingApproximator(
                            crate::network::QKey {
                                owner: node.clone(),
                                sources: BTreeSet::new(),
                            },
                        )))
                    })?
                    .clone();
                let relaxed = trace
                    .relaxed
                    .get(node)
                    .cloned()
                    .ok_or_else(|| EstimatorError::NotRelaxed(node.clone()))?;
                let z_post = relaxed
                    .z_post
                    .clone()
                    .ok_or_else(|| EstimatorError::NotRelaxed(node.clone()))?;
                let lp = log_prob_id(trace, node)?;
                let c_post = q_soft_extension(trace, scg, node, &q, &z_post.ids, *temperature)?;
                let c_prior = q_soft_extension(trace, scg, node, &q, &relaxed.z.ids, *temperature)?;
                let c_post_value = trace.tape.value(c_post);
                let score = trace.tape.scale(lp, signal - c_post_value);
                let neg_post = trace.tape.neg(c_post);
                let partial = trace.tape.add(score, neg_post);
                let objective = trace.tape.add(partial, c_prior);
                Some(SurrogateObjective {
                    objective,
                    score: Some(score),
                    pathwise: Some(c_prior),
                    correction: Some(neg_post),
                })
            }
            Family::QControlVariate { scale, baseline } => {
                let q = own_q.ok_or_else(|| {
                    EstimatorError::Learn(Box::new(LearnError::MissingApproximator(
                        crate::network::QKey {
                            owner: node.clone(),
                            sources: BTreeSet::new(),
                        },
                    )))
                })?;
                Some(q_control_variate(
                    trace,
                    node,
                    signal,
                    &q.clone(),
                    *scale,
                    *baseline,
                )?)
            }
        };
        if let Some(s) = surrogate {
            terms.push(s.objective);
        }
    }
    // Cost terms: parameter gradients of the costs themselves plus any
    // pathwise routes the plan left open.
    let cost_ids: Vec<TapeId> = trace.cost_ids.values().copied().collect();
    let cost_term = trace.tape.sum(&cost_ids);
    terms.push(cost_term);
    let objective = trace.tape.sum(&terms);
    Ok(SurrogateObjective {
        objective,
        score: None,
        pathwise: None,
        correction: None,
    })
}

fn z_ids_of(r: &crate::sample::RelaxedDraw) -> Vec<TapeId> {
    r.z.ids.clone()
}

/// Mean-field pass: replaces the node by a live mean and every
/// downstream stochastic node by its conditional mean, evaluates the
/// reachable costs, and returns their sum on the tape.
fn mean_field_costs(
    trace: &mut Trace,
    scg: &ValidatedScg,
    params: &ParamStore,
    node: &NodeId,
    mean: &TrackedValue,
) -> Result<TapeId, EstimatorError> {
    let mut env: BTreeMap<NodeId, TrackedValue> = detached_env_full(trace, scg);
    env.insert(node.clone(), mean.clone());
    // Downstream of `node`: recompute deterministics, replace stochastic
    // nodes by conditional means, in topological order.
    let mut downstream: BTreeSet<NodeId> = BTreeSet::new();
    let mut stack = alloc::vec![node.clone()];
    while let Some(n) = stack.pop() {
        for c in scg.children(&n) {
            if downstream.insert(c.clone()) {
                stack.push(c.clone());
            }
        }
    }
    for n in scg.topo_order().to_vec() {
        if !downstream.contains(&n) {
            continue;
        }
        if let Some(expr) = scg.det_expr(&n) {
            let b = TapeBindings {
                nodes: &env,
                params,
            };
            let t = eval_on_tape(expr, &mut trace.tape, &b)
                .map_err(|e| EstimatorError::Expr(format!("{n}: {e}")))?;
            env.insert(n.clone(), t);
            continue;
        }
        let dparams = dist_params_on(trace, scg, params, &n, &env)?;
        let m = dist::mean_on_tape(&mut trace.tape, &dparams)
            .map_err(|e| EstimatorError::Expr(format!("{e}")))?;
        env.insert(n.clone(), m);
    }
    let reachable = scg.reachable_costs(node).cloned().unwrap_or_default();
    let mut ids = Vec::new();
    for f in &reachable {
        let cost = scg.cost(f).expect("validated");
        let b = TapeBindings {
            nodes: &env,
            params,
        };
        let t = eval_on_tape(&cost.expr, &mut trace.tape, &b)
            .map_err(|e| EstimatorError::Expr(format!("{f}: {e}")))?;
        ids.push(t.ids[0]);
    }
    Ok(trace.tape.sum(&ids))
}

/// Every trace value as a detached constant.
fn detached_env_full(trace: &mut Trace, scg: &ValidatedScg) -> BTreeMap<NodeId, TrackedValue> {
    scg.topo_order()
        .iter()
        .filter_map(|n| {
            trace.values.get(n).cloned().map(|v| {
                let t = TrackedValue::from_constants(&mut trace.tape, &v);
                (n.clone(), t)
            })
        })
        .collect()
}

/// The node's parents as detached constants (for re-deriving its
/// distribution parameters on the tape).
fn detached_env(
    trace: &mut Trace,
    scg: &ValidatedScg,
    node: &NodeId,
) -> BTreeMap<NodeId, TrackedValue> {
    scg.parents(node)
        .iter()
        .filter_map(|p| {
            trace.values.get(p).cloned().map(|v| {
                let t = TrackedValue::from_constants(&mut trace.tape, &v);
                (p.clone(), t)
            })
        })
        .collect()
}

fn dist_params_on(
    trace: &mut Trace,
    scg: &ValidatedScg,
    params: &ParamStore,
    node: &NodeId,
    env: &BTreeMap<NodeId, TrackedValue>,
) -> Result<DistParams, EstimatorError> {
    let spec = scg
        .spec(node)
        .ok_or_else(|| EstimatorError::NotStochastic(node.clone()))?;
    let b = TapeBindings { nodes: env, params };
    let wrap = |e: ExprError| EstimatorError::Expr(format!("{node}: {e}"));
    Ok(match spec {
        DistributionSpec::Bernoulli { prob } => DistParams::Bernoulli {
            prob: eval_on_tape(prob, &mut trace.tape, &b).map_err(wrap)?,
        },
        DistributionSpec::Categorical { probs, .. } => DistParams::Categorical {
            probs: eval_on_tape(probs, &mut trace.tape, &b).map_err(wrap)?,
        },
        DistributionSpec::Gaussian { mean, scale } => DistParams::Gaussian {
            mean: eval_on_tape(mean, &mut trace.tape, &b).map_err(wrap)?,
            scale: eval_on_tape(scale, &mut trace.tape, &b).map_err(wrap)?,
        },
        DistributionSpec::Dirac { value } => DistParams::Dirac {
            value: eval_on_tape(value, &mut trace.tape, &b).map_err(wrap)?,
        },
    })
}
