//! Ancestor, frontier and scope computations over a validated graph.
//!
//! The frontier of a set V toward a cost is the subset of V from which the
//! cost is reachable through stochastic nodes outside V; the scope of a
//! node is the frontier of the node together with its ancestors. Scopes
//! are the argument lists of Q-functions: conditioning on a scope makes
//! the remaining ancestors irrelevant to the cost.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{CostId, NodeId, ValidatedScg};

/// Sorted, duplicate-free set of stochastic nodes.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct ScopeSet(BTreeSet<NodeId>);

impl ScopeSet {
    pub fn new() -> Self {
        ScopeSet(BTreeSet::new())
    }

    pub fn members(&self) -> impl Iterator<Item = &NodeId> {
        self.0.iter()
    }

    pub fn contains(&self, n: &NodeId) -> bool {
        self.0.contains(n)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_set(&self) -> &BTreeSet<NodeId> {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<NodeId> {
        self.0.iter().cloned().collect()
    }
}

impl fmt::Display for ScopeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, n) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{n}")?;
        }
        write!(f, "}}")
    }
}

impl FromIterator<NodeId> for ScopeSet {
    fn from_iter<I: IntoIterator<Item = NodeId>>(iter: I) -> Self {
        ScopeSet(iter.into_iter().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScopeError {
    UnknownNode(NodeId),
    UnknownCost(CostId),
    /// The node has no directed path to the cost, so it holds no
    /// Q-function for it.
    CostUnreachable {
        node: NodeId,
        cost: CostId,
    },
    NotStochastic(NodeId),
}

impl fmt::Display for ScopeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScopeError::UnknownNode(n) => write!(f, "unknown node `{n}`"),
            ScopeError::UnknownCost(c) => write!(f, "unknown cost `{c}`"),
            ScopeError::CostUnreachable { node, cost } => {
                write!(f, "cost `{cost}` is not reachable from `{node}`")
            }
            ScopeError::NotStochastic(n) => write!(f, "node `{n}` is not stochastic"),
        }
    }
}

impl core::error::Error for ScopeError {}

/// All stochastic nodes with a directed path to `x`; paths may traverse
/// deterministic nodes. Excludes `x` itself.
pub fn ancestors(scg: &ValidatedScg, x: &NodeId) -> Result<BTreeSet<NodeId>, ScopeError> {
    if !scg.is_declared(x) {
        return Err(ScopeError::UnknownNode(x.clone()));
    }
    if !scg.is_stochastic(x) {
        return Err(ScopeError::NotStochastic(x.clone()));
    }
    let mut out = BTreeSet::new();
    let mut seen: BTreeSet<NodeId> = BTreeSet::new();
    let mut stack: Vec<NodeId> = scg.parents(x).to_vec();
    while let Some(n) = stack.pop() {
        if !seen.insert(n.clone()) {
            continue;
        }
        if scg.is_stochastic(&n) {
            out.insert(n.clone());
        }
        stack.extend(scg.parents(&n).iter().cloned());
    }
    Ok(out)
}

/// Members of `v` from which cost `f` is reachable through stochastic
/// nodes not in `v`. Deterministic intermediates never block.
pub fn frontier(
    scg: &ValidatedScg,
    v: &BTreeSet<NodeId>,
    f: &CostId,
) -> Result<ScopeSet, ScopeError> {
    let cost = scg
        .cost(f)
        .ok_or_else(|| ScopeError::UnknownCost(f.clone()))?;
    // Reverse reachability from the cost. A node joins when one of its
    // children is already reachable and is not a blocked intermediate
    // (stochastic and inside v).
    let mut reach: BTreeSet<NodeId> = BTreeSet::new();
    let mut stack: Vec<NodeId> = Vec::new();
    for s in &cost.scope {
        if reach.insert(s.clone()) {
            stack.push(s.clone());
        }
    }
    while let Some(n) = stack.pop() {
        let blocked = scg.is_stochastic(&n) && v.contains(&n);
        if blocked {
            continue;
        }
        for p in scg.parents(&n) {
            if reach.insert(p.clone()) {
                stack.push(p.clone());
            }
        }
    }
    Ok(v.iter().filter(|n| reach.contains(*n)).cloned().collect())
}

/// Scope of `x` toward cost `f`: the frontier of `ancestors(x) ∪ {x}`.
pub fn scope(scg: &ValidatedScg, x: &NodeId, f: &CostId) -> Result<ScopeSet, ScopeError> {
    if scg.cost(f).is_none() {
        return Err(ScopeError::UnknownCost(f.clone()));
    }
    let reachable = scg
        .reachable_costs(x)
        .ok_or_else(|| ScopeError::UnknownNode(x.clone()))?;
    if !reachable.contains(f) {
        return Err(ScopeError::CostUnreachable {
            node: x.clone(),
            cost: f.clone(),
        });
    }
    let mut v = ancestors(scg, x)?;
    v.insert(x.clone());
    frontier(scg, &v, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::DistributionSpec;
    use crate::expr::Expr;
    use crate::model::ScgModel;

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

    fn chain3() -> ValidatedScg {
        ScgModel::new()
            .stochastic("x1", &[], bern(0.5))
            .stochastic("x2", &["x1"], bern_on("x1"))
            .stochastic("x3", &["x2"], bern_on("x2"))
            .cost("f", &["x3"], Expr::node("x3"))
            .validate()
            .unwrap()
    }

    #[test]
    fn chain_ancestors_are_transitive() {
        let scg = chain3();
        let a = ancestors(&scg, &NodeId::from("x3")).unwrap();
        assert_eq!(a, ["x1", "x2"].map(NodeId::from).into_iter().collect());
        assert!(ancestors(&scg, &NodeId::from("x1")).unwrap().is_empty());
    }

    #[test]
    fn diamond_ancestors_union_paths() {
        let scg = ScgModel::new()
            .stochastic("x", &[], bern(0.5))
            .stochastic("y1", &["x"], bern_on("x"))
            .stochastic("y2", &["x"], bern_on("x"))
            .stochastic(
                "z",
                &["y1", "y2"],
                DistributionSpec::Dirac {
                    value: Expr::Concat(alloc::vec![Expr::node("y1"), Expr::node("y2")]),
                },
            )
            .cost("f", &["z"], Expr::index(Expr::node("z"), 0))
            .validate()
            .unwrap();
        let a = ancestors(&scg, &NodeId::from("z")).unwrap();
        assert_eq!(a, ["x", "y1", "y2"].map(NodeId::from).into_iter().collect());
    }

    #[test]
    fn chain_frontier_blocks_through_members() {
        let scg = chain3();
        let v: BTreeSet<NodeId> = ["x1", "x2"].map(NodeId::from).into_iter().collect();
        let fr = frontier(&scg, &v, &CostId::from("f")).unwrap();
        assert_eq!(fr, ScopeSet::from_iter([NodeId::from("x2")]));
        assert!(frontier(&scg, &BTreeSet::new(), &CostId::from("f"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn bypass_keeps_the_origin_in_the_frontier() {
        // a -> x -> y -> f and a -> y: from {a, x} the cost stays
        // reachable from `a` through y (y outside the set).
        let scg = ScgModel::new()
            .stochastic("a", &[], bern(0.5))
            .stochastic("x", &["a"], bern_on("a"))
            .stochastic(
                "y",
                &["x", "a"],
                DistributionSpec::Bernoulli {
                    prob: Expr::clip(
                        Expr::add(
                            Expr::mul(Expr::node("x"), Expr::Const(0.5)),
                            Expr::mul(Expr::node("a"), Expr::Const(0.3)),
                        ),
                        0.05,
                        0.95,
                    ),
                },
            )
            .cost("f", &["y"], Expr::node("y"))
            .validate()
            .unwrap();
        let v: BTreeSet<NodeId> = ["a", "x"].map(NodeId::from).into_iter().collect();
        let fr = frontier(&scg, &v, &CostId::from("f")).unwrap();
        assert_eq!(fr, ScopeSet::from_iter(["a", "x"].map(NodeId::from)));
        // and the scope of x is enlarged by the bypass
        let sc = scope(&scg, &NodeId::from("x"), &CostId::from("f")).unwrap();
        assert_eq!(sc, ScopeSet::from_iter(["a", "x"].map(NodeId::from)));
    }

    #[test]
    fn chain_scope_is_markov() {
        let scg = chain3();
        let sc = scope(&scg, &NodeId::from("x2"), &CostId::from("f")).unwrap();
        assert_eq!(sc, ScopeSet::from_iter([NodeId::from("x2")]));
    }

    #[test]
    fn upstream_cost_is_unreachable() {
        let scg = ScgModel::new()
            .stochastic("x1", &[], bern(0.5))
            .stochastic("x2", &["x1"], bern_on("x1"))
            .cost("f", &["x1"], Expr::node("x1"))
            .validate()
            .unwrap();
        assert!(matches!(
            scope(&scg, &NodeId::from("x2"), &CostId::from("f")),
            Err(ScopeError::CostUnreachable { .. })
        ));
    }
}
