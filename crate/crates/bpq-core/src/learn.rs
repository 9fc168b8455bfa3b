//! Learning machinery for the Q-functions: one-step sample updates,
//! λ-return error propagation, graph-based experience replay,
//! slow-tracking target parameters and advantage values.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::approx::{QApproximator, QError};
use crate::expr::{eval_value, Bindings, Value};
use crate::model::{CostId, NodeId, ParamStore, ValidatedScg};
use crate::network::{BpqNetwork, QKey, QOwner};
use crate::rng::NodeStream;
use crate::sample::{sample_node_value, SampleError, Trace};

/// The learned approximators, one per non-root Q-node.
pub type QMap = BTreeMap<QKey, QApproximator>;

#[derive(Clone, Debug, PartialEq)]
pub enum LearnError {
    EmptyTargets,
    NonFiniteTarget(f64),
    EmptyBuffer,
    LayoutMismatch(String),
    MissingApproximator(QKey),
    MissingValue(NodeId),
    Approx(QError),
    Sample(SampleError),
    ExpectationUnavailable(NodeId),
}

impl fmt::Display for LearnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnError::EmptyTargets => write!(f, "no upstream targets to combine"),
            LearnError::NonFiniteTarget(v) => write!(f, "non-finite update target {v}"),
            LearnError::EmptyBuffer => write!(f, "replay buffer is empty"),
            LearnError::LayoutMismatch(s) => write!(f, "tuple layout mismatch: {s}"),
            LearnError::MissingApproximator(k) => write!(f, "no approximator for {k}"),
            LearnError::MissingValue(n) => write!(f, "trace has no value for `{n}`"),
            LearnError::Approx(e) => write!(f, "{e}"),
            LearnError::Sample(e) => write!(f, "{e}"),
            LearnError::ExpectationUnavailable(n) => {
                write!(f, "`{n}` has no enumerable outcomes for an expectation")
            }
        }
    }
}

impl core::error::Error for LearnError {}

impl From<QError> for LearnError {
    fn from(e: QError) -> Self {
        LearnError::Approx(e)
    }
}

impl From<SampleError> for LearnError {
    fn from(e: SampleError) -> Self {
        LearnError::Sample(e)
    }
}

/// Restricts a trace's downstream-visible values to a scope.
pub fn scope_assignment(
    values: &BTreeMap<NodeId, Value>,
    scope: &crate::scope::ScopeSet,
) -> Result<BTreeMap<NodeId, Value>, LearnError> {
    scope
        .members()
        .map(|n| {
            values
                .get(n)
                .map(|v| (n.clone(), v.clone()))
                .ok_or_else(|| LearnError::MissingValue(n.clone()))
        })
        .collect()
}

/// Mean within each cost-source label, sum across labels.
pub fn combine_upstream(targets: &[(BTreeSet<CostId>, f64)]) -> Result<f64, LearnError> {
    if targets.is_empty() {
        return Err(LearnError::EmptyTargets);
    }
    let mut groups: BTreeMap<&BTreeSet<CostId>, (f64, usize)> = BTreeMap::new();
    for (label, v) in targets {
        let e = groups.entry(label).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    Ok(groups.values().map(|(s, n)| s / *n as f64).sum())
}

/// One SGD step on the squared error toward `target`; the tabular case
/// reduces to moving a single cell toward the target.
pub fn sample_update(
    q: &mut QApproximator,
    target: f64,
    assignment: &BTreeMap<NodeId, Value>,
    alpha: f64,
) -> Result<(), LearnError> {
    if !target.is_finite() {
        return Err(LearnError::NonFiniteTarget(target));
    }
    let (value, grad) = q.eval_grad(assignment)?;
    q.apply_step(alpha, target - value, &grad);
    Ok(())
}

/// Evaluates the Q value at a network node on a trace: approximators for
/// owned nodes, recorded cost values for roots.
pub fn q_value_at(
    net: &BpqNetwork,
    qs: &QMap,
    idx: usize,
    trace: &Trace,
) -> Result<f64, LearnError> {
    let qnode = &net.qnodes[idx];
    match &qnode.owner {
        QOwner::Root(f) => trace
            .cost_values
            .get(f)
            .copied()
            .ok_or_else(|| LearnError::MissingValue(NodeId::from(f.as_str()))),
        QOwner::Node(_) => {
            let key = qnode.key().expect("non-root");
            let q = qs.get(&key).ok_or(LearnError::MissingApproximator(key))?;
            let a = scope_assignment(&trace.values, &q.scope)?;
            Ok(q.eval(&a)?)
        }
    }
}

/// Per-node λ-return errors on one trace, in a synchronous backward pass
/// from the roots: each node's error is its own TD error (against the
/// group-combined upstream values, discounted by γ) plus γλ times the
/// group-combined upstream errors.
pub fn lambda_return_deltas(
    net: &BpqNetwork,
    qs: &QMap,
    trace: &Trace,
    lambda: f64,
    gamma: f64,
) -> Result<BTreeMap<QKey, f64>, LearnError> {
    let order = net.topo_from_roots();
    let mut values = alloc::vec![0.0; net.qnodes.len()];
    let mut deltas = alloc::vec![0.0; net.qnodes.len()];
    for &i in &order {
        values[i] = q_value_at(net, qs, i, trace)?;
        if net.qnodes[i].is_root {
            deltas[i] = 0.0;
            continue;
        }
        let groups = net.incoming_groups(i);
        if groups.is_empty() {
            deltas[i] = 0.0;
            continue;
        }
        let mut target = 0.0;
        let mut upstream_err = 0.0;
        for (_, edges) in &groups {
            let n = edges.len() as f64;
            target += edges.iter().map(|e| values[e.from]).sum::<f64>() / n;
            upstream_err += edges.iter().map(|e| deltas[e.from]).sum::<f64>() / n;
        }
        deltas[i] = (gamma * target - values[i]) + gamma * lambda * upstream_err;
    }
    Ok(net
        .qnodes
        .iter()
        .enumerate()
        .filter_map(|(i, q)| q.key().map(|k| (k, deltas[i])))
        .collect())
}

/// λ-return critic sweep: computes all errors synchronously, then applies
/// `w += α δ ∇Q` at every owned node. Returns the errors.
pub fn apply_lambda_updates(
    net: &BpqNetwork,
    qs: &mut QMap,
    trace: &Trace,
    lambda: f64,
    gamma: f64,
    alpha: f64,
) -> Result<BTreeMap<QKey, f64>, LearnError> {
    let deltas = lambda_return_deltas(net, qs, trace, lambda, gamma)?;
    for (key, delta) in &deltas {
        let q = qs
            .get_mut(key)
            .ok_or_else(|| LearnError::MissingApproximator(key.clone()))?;
        let a = scope_assignment(&trace.values, &q.scope.clone())?;
        if !delta.is_finite() {
            return Err(LearnError::NonFiniteTarget(*delta));
        }
        let (_, grad) = q.eval_grad(&a)?;
        q.apply_step(alpha, *delta, &grad);
    }
    Ok(deltas)
}

/// What one replay update of a Q-node needs: the stored boundary values
/// and the descendant nodes to re-draw under the current parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TupleLayout {
    pub key: QKey,
    /// Node values captured into each tuple.
    pub stored: BTreeSet<NodeId>,
    /// Nodes re-drawn (stochastic) or recomputed (deterministic) per
    /// resample, in topological order.
    pub resample: Vec<NodeId>,
}

impl TupleLayout {
    /// Derives the layout from the network structure: the owner's scope
    /// is stored; every incoming edge's source scope splits into stored
    /// boundary values and descendants of the owner to resample.
    pub fn for_qnode(
        scg: &ValidatedScg,
        net: &BpqNetwork,
        idx: usize,
    ) -> Result<TupleLayout, LearnError> {
        let qnode = &net.qnodes[idx];
        let key = qnode
            .key()
            .ok_or_else(|| LearnError::LayoutMismatch("roots store no tuples".to_string()))?;
        let owner = key.owner.clone();
        let mut descendants: BTreeSet<NodeId> = BTreeSet::new();
        let mut stack = alloc::vec![owner.clone()];
        while let Some(n) = stack.pop() {
            for c in scg.children(&n) {
                if descendants.insert(c.clone()) {
                    stack.push(c.clone());
                }
            }
        }

        let mut stored: BTreeSet<NodeId> = qnode.scope.members().cloned().collect();
        let mut resample: BTreeSet<NodeId> = BTreeSet::new();
        let mut need: Vec<NodeId> = Vec::new();
        for e in net.incoming(idx) {
            let src = &net.qnodes[e.from];
            match &src.owner {
                QOwner::Node(_) => need.extend(src.scope.members().cloned()),
                QOwner::Root(f) => {
                    // the root target evaluates the cost expression
                    need.extend(scg.cost(f).expect("validated").scope.iter().cloned());
                }
            }
        }
        while let Some(n) = need.pop() {
            if n == owner || stored.contains(&n) || resample.contains(&n) {
                continue;
            }
            if descendants.contains(&n) {
                resample.insert(n.clone());
                need.extend(scg.parents(&n).iter().cloned());
            } else {
                stored.insert(n);
            }
        }
        let order: Vec<NodeId> = scg
            .topo_order()
            .iter()
            .filter(|n| resample.contains(*n))
            .cloned()
            .collect();
        Ok(TupleLayout {
            key,
            stored,
            resample: order,
        })
    }

    /// Captures a tuple from a trace, using hard values.
    pub fn capture(&self, trace: &Trace) -> Result<ExperienceTuple, LearnError> {
        let mut values = BTreeMap::new();
        for n in &self.stored {
            let v = trace
                .hard_value(n)
                .or_else(|| trace.values.get(n))
                .ok_or_else(|| LearnError::MissingValue(n.clone()))?;
            values.insert(n.clone(), v.clone());
        }
        Ok(ExperienceTuple {
            key: self.key.clone(),
            step: trace.step,
            values,
        })
    }
}

/// Stored values for one replay update of one Q-node.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperienceTuple {
    pub key: QKey,
    pub step: u64,
    pub values: BTreeMap<NodeId, Value>,
}

/// Fixed-capacity FIFO ring with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    layout: TupleLayout,
    capacity: usize,
    items: VecDeque<ExperienceTuple>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(layout: TupleLayout, capacity: usize) -> Self {
        ReplayBuffer {
            layout,
            capacity: capacity.max(1),
            items: VecDeque::new(),
            inserted: 0,
        }
    }

    pub fn layout(&self) -> &TupleLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn store(&mut self, t: ExperienceTuple) -> Result<(), LearnError> {
        if t.key != self.layout.key {
            return Err(LearnError::LayoutMismatch(format!(
                "tuple for {} stored in buffer for {}",
                t.key, self.layout.key
            )));
        }
        let keys: BTreeSet<&NodeId> = t.values.keys().collect();
        let want: BTreeSet<&NodeId> = self.layout.stored.iter().collect();
        if keys != want {
            return Err(LearnError::LayoutMismatch(format!(
                "tuple fields {keys:?} do not match layout {want:?}"
            )));
        }
        self.items.push_back(t);
        self.inserted += 1;
        if self.items.len() > self.capacity {
            self.items.pop_front();
        }
        Ok(())
    }

    pub fn sample(&self, stream: &mut NodeStream) -> Result<&ExperienceTuple, LearnError> {
        if self.items.is_empty() {
            return Err(LearnError::EmptyBuffer);
        }
        let idx = (stream.next_u64() % self.items.len() as u64) as usize;
        Ok(&self.items[idx])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExperienceTuple> {
        self.items.iter()
    }
}

/// One off-policy update: re-draws the layout's resample set `m` times
/// under the current parameters, forms the group-combined target from
/// the upstream Q-functions each time, and takes one gradient step on
/// the squared loss averaged over the resamples.
#[allow(clippy::too_many_arguments)]
pub fn replay_update(
    scg: &ValidatedScg,
    params: &ParamStore,
    net: &BpqNetwork,
    qs: &mut QMap,
    idx: usize,
    tuple: &ExperienceTuple,
    m: usize,
    alpha: f64,
    stream: &mut NodeStream,
) -> Result<f64, LearnError> {
    let layout = TupleLayout::for_qnode(scg, net, idx)?;
    if tuple.key != layout.key {
        return Err(LearnError::LayoutMismatch(format!(
            "tuple for {} used at {}",
            tuple.key, layout.key
        )));
    }
    let own_scope = net.qnodes[idx].scope.clone();
    let own_assignment = scope_assignment(&tuple.values, &own_scope)?;

    let mut target_sum = 0.0;
    for _ in 0..m.max(1) {
        let mut values = tuple.values.clone();
        for n in &layout.resample {
            let v = if let Some(expr) = scg.det_expr(n) {
                eval_value(
                    expr,
                    &Bindings {
                        nodes: &values,
                        params,
                    },
                )
                .map_err(|e| LearnError::LayoutMismatch(format!("{n}: {e}")))?
            } else {
                sample_node_value(scg, params, n, &values, stream)?
            };
            values.insert(n.clone(), v);
        }
        let mut targets: Vec<(BTreeSet<CostId>, f64)> = Vec::new();
        for e in net.incoming(idx) {
            let src = &net.qnodes[e.from];
            let v = match &src.owner {
                QOwner::Root(f) => {
                    let cost = scg.cost(f).expect("validated");
                    eval_value(
                        &cost.expr,
                        &Bindings {
                            nodes: &values,
                            params,
                        },
                    )
                    .map_err(|e| LearnError::LayoutMismatch(format!("{f}: {e}")))?
                    .as_scalar()
                    .ok_or(LearnError::NonFiniteTarget(f64::NAN))?
                }
                QOwner::Node(_) => {
                    let key = src.key().expect("non-root");
                    let q = qs.get(&key).ok_or(LearnError::MissingApproximator(key))?;
                    let a = scope_assignment(&values, &q.scope)?;
                    q.eval(&a)?
                }
            };
            targets.push((e.sources.clone(), v));
        }
        target_sum += combine_upstream(&targets)?;
    }
    let target = target_sum / m.max(1) as f64;

    let key = net.qnodes[idx].key().expect("non-root");
    let q = qs
        .get_mut(&key)
        .ok_or(LearnError::MissingApproximator(key))?;
    let (value, grad) = q.eval_grad(&own_assignment)?;
    if !target.is_finite() {
        return Err(LearnError::NonFiniteTarget(target));
    }
    q.apply_step(alpha, target - value, &grad);
    Ok(target - value)
}

/// Target parameters that slowly track the learned parameters. The
/// learned value is `target + residual` at all times.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetNetworkState {
    pub target: Vec<f64>,
    pub residual: Vec<f64>,
}

impl TargetNetworkState {
    pub fn new(initial_target: Vec<f64>) -> Self {
        let residual = alloc::vec![0.0; initial_target.len()];
        TargetNetworkState {
            target: initial_target,
            residual,
        }
    }

    pub fn learned(&self) -> Vec<f64> {
        self.target
            .iter()
            .zip(&self.residual)
            .map(|(t, d)| t + d)
            .collect()
    }
}

/// Accumulates a new increment into the residual, then lets the target
/// absorb a fraction of it: residual += Δ; target += α·residual;
/// residual *= (1 − α).
pub fn slow_track_update(state: &mut TargetNetworkState, increment: &[f64], alpha: f64) {
    for (d, inc) in state.residual.iter_mut().zip(increment) {
        *d += inc;
    }
    for (t, d) in state.target.iter_mut().zip(state.residual.iter_mut()) {
        *t += alpha * *d;
        *d *= 1.0 - alpha;
    }
}

/// How sibling branches are handled when computing an advantage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiblingHandling {
    /// Subtract the exact conditional expectation of the sibling Q
    /// (discrete siblings only).
    Expectation,
    /// Subtract the sibling Q evaluated at its sampled value.
    Sample,
}

/// Advantage of a Q-node on a trace: its Q value minus a baseline built
/// from its consumers' Q values. When a consumer's target sums several
/// source groups, the other groups' contributions are subtracted from
/// the consumer value before it serves as a baseline.
pub fn advantage(
    scg: &ValidatedScg,
    params: &ParamStore,
    net: &BpqNetwork,
    qs: &QMap,
    child: &QKey,
    trace: &Trace,
    mode: SiblingHandling,
) -> Result<f64, LearnError> {
    let child_idx = net
        .index_of(&QOwner::Node(child.owner.clone()), &child.sources)
        .ok_or_else(|| LearnError::MissingApproximator(child.clone()))?;
    let q_child = q_value_at(net, qs, child_idx, trace)?;

    let consumers: Vec<&crate::network::QEdge> = net.outgoing(child_idx).collect();
    if consumers.is_empty() {
        return Err(LearnError::EmptyTargets);
    }
    let mut baselines = Vec::with_capacity(consumers.len());
    for edge in consumers {
        let p = edge.to;
        let q_p = q_value_at(net, qs, p, trace)?;
        let mut sibling_contribution = 0.0;
        for (label, edges) in net.incoming_groups(p) {
            if label == edge.sources {
                continue;
            }
            let mut group_value = 0.0;
            for e in &edges {
                group_value += match mode {
                    SiblingHandling::Sample => q_value_at(net, qs, e.from, trace)?,
                    SiblingHandling::Expectation => {
                        expected_q_value(scg, params, net, qs, e.from, trace)?
                    }
                };
            }
            sibling_contribution += group_value / edges.len() as f64;
        }
        baselines.push(q_p - sibling_contribution);
    }
    let baseline = baselines.iter().sum::<f64>() / baselines.len() as f64;
    Ok(q_child - baseline)
}

/// E[Q_source | parents from the trace], by enumerating the source
/// owner's outcomes under its conditional distribution.
fn expected_q_value(
    scg: &ValidatedScg,
    params: &ParamStore,
    net: &BpqNetwork,
    qs: &QMap,
    idx: usize,
    trace: &Trace,
) -> Result<f64, LearnError> {
    let qnode = &net.qnodes[idx];
    let owner = match &qnode.owner {
        QOwner::Node(n) => n.clone(),
        QOwner::Root(f) => {
            // root value is a recorded constant on the trace
            return trace
                .cost_values
                .get(f)
                .copied()
                .ok_or_else(|| LearnError::MissingValue(NodeId::from(f.as_str())));
        }
    };
    let spec = scg
        .spec(&owner)
        .ok_or_else(|| LearnError::MissingValue(owner.clone()))?;
    let p = crate::dist::plain_params(
        spec,
        &Bindings {
            nodes: &trace.values,
            params,
        },
    )
    .map_err(|_| LearnError::ExpectationUnavailable(owner.clone()))?;
    let outcomes = crate::dist::plain_outcomes(&p)
        .ok_or_else(|| LearnError::ExpectationUnavailable(owner.clone()))?;
    let key = qnode.key().expect("non-root");
    let q = qs.get(&key).ok_or(LearnError::MissingApproximator(key))?;
    let mut acc = 0.0;
    for (v, mass) in outcomes {
        if mass == 0.0 {
            continue;
        }
        let mut values = trace.values.clone();
        values.insert(owner.clone(), v);
        let a = scope_assignment(&values, &q.scope)?;
        acc += mass * q.eval(&a)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::DistributionSpec;
    use crate::expr::Expr;
    use crate::model::ScgModel;
    use crate::network::build_percost_network;
    use crate::rng::RngContext;
    use crate::scope::ScopeSet;

    fn bern(p: f64) -> DistributionSpec {
        DistributionSpec::Bernoulli {
            prob: Expr::Const(p),
        }
    }

    fn bern_on(parent: &str) -> DistributionSpec {
        DistributionSpec::Bernoulli {
            prob: Expr::add(
                Expr::Const(0.2),
                Expr::mul(Expr::node(parent), Expr::Const(0.6)),
            ),
        }
    }

    fn label(names: &[&str]) -> BTreeSet<CostId> {
        names.iter().map(|n| CostId::from(*n)).collect()
    }

    #[test]
    fn combine_singleton_and_groups() {
        assert_eq!(combine_upstream(&[(label(&["f1"]), 2.0)]).unwrap(), 2.0);
        // mean within f2, sum across sources
        let targets = [
            (label(&["f1"]), 1.0),
            (label(&["f2"]), 3.0),
            (label(&["f2"]), 5.0),
        ];
        assert_eq!(combine_upstream(&targets).unwrap(), 5.0);
        let same = [(label(&["f1"]), 4.0), (label(&["f1"]), 4.0)];
        assert_eq!(combine_upstream(&same).unwrap(), 4.0);
        assert!(matches!(
            combine_upstream(&[]),
            Err(LearnError::EmptyTargets)
        ));
    }

    fn one_coin() -> ValidatedScg {
        ScgModel::new()
            .stochastic("x", &[], bern(0.5))
            .cost("f", &["x"], Expr::node("x"))
            .validate()
            .unwrap()
    }

    #[test]
    fn tabular_update_moves_one_cell() {
        let scg = one_coin();
        let scope = ScopeSet::from_iter([NodeId::from("x")]);
        let mut q = QApproximator::tabular(&scg, &NodeId::from("x"), &scope).unwrap();
        let mut a = BTreeMap::new();
        a.insert(NodeId::from("x"), Value::Scalar(1.0));
        sample_update(&mut q, 1.0, &a, 0.5).unwrap();
        assert_eq!(q.eval(&a).unwrap(), 0.5);
        // zero TD error leaves weights unchanged
        let before = q.weights().to_vec();
        sample_update(&mut q, 0.5, &a, 0.5).unwrap();
        assert_eq!(q.weights(), &before[..]);
        // geometric contraction toward a fixed target
        for _ in 0..200 {
            sample_update(&mut q, 2.0, &a, 0.3).unwrap();
        }
        assert!((q.eval(&a).unwrap() - 2.0).abs() < 1e-9);
        assert!(matches!(
            sample_update(&mut q, f64::NAN, &a, 0.1),
            Err(LearnError::NonFiniteTarget(_))
        ));
    }

    /// diamond: x1 -> y1, y2 -> z (collector) -> f
    fn diamond() -> ValidatedScg {
        ScgModel::new()
            .stochastic("x1", &[], bern(0.5))
            .stochastic("y1", &["x1"], bern_on("x1"))
            .stochastic("y2", &["x1"], bern_on("x1"))
            .stochastic(
                "z",
                &["y1", "y2"],
                DistributionSpec::Dirac {
                    value: Expr::Concat(alloc::vec![Expr::node("y1"), Expr::node("y2")]),
                },
            )
            .cost(
                "f",
                &["z"],
                Expr::add(
                    Expr::index(Expr::node("z"), 0),
                    Expr::index(Expr::node("z"), 1),
                ),
            )
            .validate()
            .unwrap()
    }

    fn tabular_qs(scg: &ValidatedScg, net: &BpqNetwork) -> QMap {
        net.qnodes
            .iter()
            .filter_map(|q| q.key().map(|k| (k, q)))
            .map(|(k, q)| {
                let approx = QApproximator::tabular(scg, &k.owner, &q.scope).unwrap();
                (k, approx)
            })
            .collect()
    }

    #[test]
    fn lambda_one_deltas_telescope_to_monte_carlo() {
        // On the diamond, with λ=1: δ at x1 is γ^3 Q̂_f − Q̂_{x1}
        // (averaged over the two equivalent middle rules, whose values
        // here coincide since the tables start at zero... use nonzero
        // tables to exercise the cancellation).
        let scg = diamond();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        let mut qs = tabular_qs(&scg, &net);
        // fill tables with arbitrary distinct values
        let mut c = 0.0;
        for q in qs.values_mut() {
            for w in q.weights_mut() {
                c += 0.37;
                *w = c;
            }
        }
        let tr = crate::sample::ancestral_sample(&scg, scg.params(), &RngContext::new(5)).unwrap();
        let gamma = 0.9;
        let deltas = lambda_return_deltas(&net, &qs, &tr, 1.0, gamma).unwrap();

        let key_x1 = QKey {
            owner: NodeId::from("x1"),
            sources: label(&["f"]),
        };
        let q_x1 = {
            let q = &qs[&key_x1];
            q.eval(&scope_assignment(&tr.values, &q.scope).unwrap())
                .unwrap()
        };
        let q_f = tr.cost_values[&CostId::from("f")];
        let want = gamma * gamma * gamma * q_f - q_x1;
        assert!(
            (deltas[&key_x1] - want).abs() < 1e-12,
            "{} vs {want}",
            deltas[&key_x1]
        );
    }

    #[test]
    fn lambda_zero_is_one_step_average() {
        let scg = diamond();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        let mut qs = tabular_qs(&scg, &net);
        let mut c = 0.0;
        for q in qs.values_mut() {
            for w in q.weights_mut() {
                c += 0.21;
                *w = c;
            }
        }
        let tr = crate::sample::ancestral_sample(&scg, scg.params(), &RngContext::new(8)).unwrap();
        let gamma = 0.8;
        let deltas = lambda_return_deltas(&net, &qs, &tr, 0.0, gamma).unwrap();
        let value_of = |name: &str| {
            let key = QKey {
                owner: NodeId::from(name),
                sources: label(&["f"]),
            };
            let q = &qs[&key];
            q.eval(&scope_assignment(&tr.values, &q.scope).unwrap())
                .unwrap()
        };
        let key_x1 = QKey {
            owner: NodeId::from("x1"),
            sources: label(&["f"]),
        };
        let want = gamma * (value_of("y1") + value_of("y2")) / 2.0 - value_of("x1");
        assert!((deltas[&key_x1] - want).abs() < 1e-12);
    }

    #[test]
    fn two_cost_chain_lambda_one_formula() {
        // x1 -> x2 -> x3 -> x4, fa on x3, fb on x4; merged network.
        let scg = ScgModel::new()
            .stochastic("x1", &[], bern(0.5))
            .stochastic("x2", &["x1"], bern_on("x1"))
            .stochastic("x3", &["x2"], bern_on("x2"))
            .stochastic("x4", &["x3"], bern_on("x3"))
            .cost("fa", &["x3"], Expr::node("x3"))
            .cost("fb", &["x4"], Expr::node("x4"))
            .validate()
            .unwrap();
        let nets = [
            build_percost_network(&scg, &CostId::from("fa")).unwrap(),
            build_percost_network(&scg, &CostId::from("fb")).unwrap(),
        ];
        let merged = crate::network::merge_networks(&scg, &nets);
        merged.check().unwrap();
        let mut qs = tabular_qs(&scg, &merged);
        let mut c = 0.0;
        for q in qs.values_mut() {
            for w in q.weights_mut() {
                c += 0.13;
                *w = c;
            }
        }
        let tr = crate::sample::ancestral_sample(&scg, scg.params(), &RngContext::new(2)).unwrap();
        let gamma = 0.95;

        // λ = 1: the x1 error telescopes to γ^3 fa + γ^4 fb − Q̂_{x1}
        let deltas = lambda_return_deltas(&merged, &qs, &tr, 1.0, gamma).unwrap();
        let key_x1 = QKey {
            owner: NodeId::from("x1"),
            sources: label(&["fa", "fb"]),
        };
        let q_x1 = {
            let q = &qs[&key_x1];
            q.eval(&scope_assignment(&tr.values, &q.scope).unwrap())
                .unwrap()
        };
        let fa = tr.cost_values[&CostId::from("fa")];
        let fb = tr.cost_values[&CostId::from("fb")];
        let want = gamma.powi(3) * fa + gamma.powi(4) * fb - q_x1;
        assert!(
            (deltas[&key_x1] - want).abs() < 1e-12,
            "{} vs {want}",
            deltas[&key_x1]
        );

        // λ = 0: one-step target through the merged chain
        let deltas0 = lambda_return_deltas(&merged, &qs, &tr, 0.0, gamma).unwrap();
        let key_x2 = QKey {
            owner: NodeId::from("x2"),
            sources: label(&["fa", "fb"]),
        };
        let q_x2 = {
            let q = &qs[&key_x2];
            q.eval(&scope_assignment(&tr.values, &q.scope).unwrap())
                .unwrap()
        };
        assert!((deltas0[&key_x1] - (gamma * q_x2 - q_x1)).abs() < 1e-12);
    }

    #[test]
    fn replay_buffer_fifo_and_uniform() {
        let scg = ScgModel::new()
            .stochastic("x1", &[], bern(0.5))
            .stochastic("x2", &["x1"], bern_on("x1"))
            .cost("f", &["x2"], Expr::node("x2"))
            .validate()
            .unwrap();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        let q1 = net.owned_by(&NodeId::from("x1"))[0];
        let layout = TupleLayout::for_qnode(&scg, &net, q1).unwrap();
        assert_eq!(
            layout.stored.iter().collect::<Vec<_>>(),
            [&NodeId::from("x1")]
        );
        assert_eq!(layout.resample, [NodeId::from("x2")]);

        let mut buf = ReplayBuffer::new(layout.clone(), 2);
        let mk = |x: f64, step| ExperienceTuple {
            key: layout.key.clone(),
            step,
            values: [(NodeId::from("x1"), Value::Scalar(x))]
                .into_iter()
                .collect(),
        };
        buf.store(mk(0.0, 0)).unwrap();
        buf.store(mk(1.0, 1)).unwrap();
        buf.store(mk(0.0, 2)).unwrap();
        assert_eq!(buf.len(), 2);
        let steps: Vec<u64> = buf.iter().map(|t| t.step).collect();
        assert_eq!(steps, [1, 2], "strict FIFO eviction");

        let mut stream = RngContext::new(77).stream("rb");
        let mut counts = [0u32; 2];
        for _ in 0..10_000 {
            let t = buf.sample(&mut stream).unwrap();
            counts[(t.step - 1) as usize] += 1;
        }
        for c in counts {
            let frac = f64::from(c) / 10_000.0;
            assert!((frac - 0.5).abs() < 0.05, "{frac}");
        }

        let empty = ReplayBuffer::new(layout, 2);
        assert!(matches!(
            empty.sample(&mut stream),
            Err(LearnError::EmptyBuffer)
        ));
    }

    #[test]
    fn replay_update_with_deterministic_child_matches_sample_update() {
        // x -> d (deterministic double) -> cost; Q at x has the root as
        // its only upstream, and the "resampling" is a deterministic
        // recomputation, so the replay target is exact.
        let scg = ScgModel::new()
            .stochastic("x", &[], bern(0.5))
            .deterministic("d", &["x"], Expr::mul(Expr::node("x"), Expr::Const(2.0)))
            .cost("f", &["d"], Expr::node("d"))
            .validate()
            .unwrap();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        let qx = net.owned_by(&NodeId::from("x"))[0];
        let mut qs = tabular_qs(&scg, &net);
        let layout = TupleLayout::for_qnode(&scg, &net, qx).unwrap();
        let tr = crate::sample::ancestral_sample(&scg, scg.params(), &RngContext::new(4)).unwrap();
        let tuple = layout.capture(&tr).unwrap();
        let mut stream = RngContext::new(9).stream("replay");
        let td = replay_update(
            &scg,
            scg.params(),
            &net,
            &mut qs,
            qx,
            &tuple,
            4,
            0.5,
            &mut stream,
        )
        .unwrap();
        let x = tr.values[&NodeId::from("x")].as_scalar().unwrap();
        assert!((td - 2.0 * x).abs() < 1e-12, "target is f(d(x)) exactly");
        let key = net.qnodes[qx].key().unwrap();
        let a = scope_assignment(&tr.values, &qs[&key].scope).unwrap();
        assert!((qs[&key].eval(&a).unwrap() - 0.5 * 2.0 * x).abs() < 1e-12);
    }

    #[test]
    fn replay_resampled_target_approaches_child_expectation() {
        let scg = ScgModel::new()
            .stochastic("x1", &[], bern(0.5))
            .stochastic("x2", &["x1"], bern_on("x1"))
            .cost("f", &["x2"], Expr::node("x2"))
            .validate()
            .unwrap();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        let q1 = net.owned_by(&NodeId::from("x1"))[0];
        let mut qs = tabular_qs(&scg, &net);
        // x2's Q table = exact cost values so targets are exact given x2
        let key2 = net.qnodes[net.owned_by(&NodeId::from("x2"))[0]]
            .key()
            .unwrap();
        {
            let q2 = qs.get_mut(&key2).unwrap();
            let mut a = BTreeMap::new();
            a.insert(NodeId::from("x2"), Value::Scalar(1.0));
            sample_update(q2, 1.0, &a, 1.0).unwrap();
        }
        let layout = TupleLayout::for_qnode(&scg, &net, q1).unwrap();
        let tuple = ExperienceTuple {
            key: layout.key.clone(),
            step: 0,
            values: [(NodeId::from("x1"), Value::Scalar(1.0))]
                .into_iter()
                .collect(),
        };
        // large m: the resampled mean approaches E[x2 | x1=1] = 0.8
        let mut stream = RngContext::new(123).stream("replay");
        let td = replay_update(
            &scg,
            scg.params(),
            &net,
            &mut qs,
            q1,
            &tuple,
            20_000,
            0.0,
            &mut stream,
        )
        .unwrap();
        // Q started at 0, so td is the mean target; 3 sigma of a
        // Bernoulli(0.8) mean over 20k draws is ~0.0085
        assert!((td - 0.8).abs() < 0.0125, "td {td}");
    }

    #[test]
    fn slow_tracking_sequence() {
        let mut s = TargetNetworkState {
            target: alloc::vec![0.0],
            residual: alloc::vec![1.0],
        };
        slow_track_update(&mut s, &[0.0], 0.1);
        assert!((s.target[0] - 0.1).abs() < 1e-15);
        assert!((s.residual[0] - 0.9).abs() < 1e-15);

        // fixed point at zero residual
        let mut s0 = TargetNetworkState::new(alloc::vec![2.0]);
        slow_track_update(&mut s0, &[0.0], 0.1);
        assert_eq!(s0.target, alloc::vec![2.0]);
        assert_eq!(s0.residual, alloc::vec![0.0]);

        // repeated zero increments: target absorbs the initial residual
        let mut s1 = TargetNetworkState {
            target: alloc::vec![0.0],
            residual: alloc::vec![1.0],
        };
        for _ in 0..400 {
            slow_track_update(&mut s1, &[0.0], 0.05);
        }
        assert!((s1.target[0] - 1.0).abs() < 1e-8);

        // ledger identity: target + residual == initial + sum of deltas
        let mut s2 = TargetNetworkState::new(alloc::vec![0.5]);
        let mut total = 0.5;
        let mut stream = RngContext::new(3).stream("st");
        for _ in 0..100 {
            let d = stream.uniform() - 0.5;
            total += d;
            slow_track_update(&mut s2, &[d], 0.07);
            let learned = s2.learned()[0];
            assert!((learned - total).abs() < 1e-12);
        }
    }

    #[test]
    fn advantage_single_parent_chain() {
        // x -> y -> f: A_y = Q_y(y) − Q_x(x), and with exact tables the
        // conditional mean of the advantage is zero.
        let scg = ScgModel::new()
            .stochastic("x", &[], bern(0.5))
            .stochastic("y", &["x"], bern_on("x"))
            .cost("f", &["y"], Expr::node("y"))
            .validate()
            .unwrap();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        let mut qs = tabular_qs(&scg, &net);
        // exact tables from the oracle
        for (key, q) in qs.iter_mut() {
            let scope = q.scope.clone();
            let size = q.weights().len();
            for idx in 0..size {
                // decode the table index back into an assignment
                let mut rem = idx;
                let mut a = BTreeMap::new();
                for n in scope.to_vec().iter().rev() {
                    let k = scg.cardinality(n).unwrap() as usize;
                    a.insert(n.clone(), Value::Scalar((rem % k) as f64));
                    rem /= k;
                }
                let exact =
                    crate::oracle::exact_q(&scg, scg.params(), &a, &CostId::from("f")).unwrap();
                sample_update(q, exact, &a, 1.0).unwrap();
            }
            let _ = key;
        }
        let key_y = QKey {
            owner: NodeId::from("y"),
            sources: label(&["f"]),
        };
        // E_{y|x}[A] = 0 for each x by enumeration
        for xv in [0.0, 1.0] {
            let mut acc = 0.0;
            for yv in [0.0, 1.0] {
                let mut forced = BTreeMap::new();
                forced.insert(NodeId::from("x"), Value::Scalar(xv));
                forced.insert(NodeId::from("y"), Value::Scalar(yv));
                let tr = crate::sample::trace_for_assignment(
                    &scg,
                    scg.params(),
                    &forced,
                    &crate::sample::SamplePlan::plain(),
                )
                .unwrap();
                let a = advantage(
                    &scg,
                    scg.params(),
                    &net,
                    &qs,
                    &key_y,
                    &tr,
                    SiblingHandling::Sample,
                )
                .unwrap();
                let p_y = if xv == 1.0 { 0.8 } else { 0.2 };
                let mass = if yv == 1.0 { p_y } else { 1.0 - p_y };
                acc += mass * a;
                // and the pointwise identity A = Q_y − Q_x
                let q_y = if yv == 1.0 { 1.0 } else { 0.0 };
                let q_x = p_y;
                assert!((a - (q_y - q_x)).abs() < 1e-10);
            }
            assert!(acc.abs() < 1e-10, "conditional mean {acc}");
        }
    }
}
