//! The declared graph: stochastic, deterministic and cost nodes, the
//! parameter store, and validation into a query-ready form.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::dist::DistributionSpec;
use crate::expr::Expr;

/// Unique node identifier; ordering is total (lexicographic) and stable
/// across runs.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(String);

impl NodeId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        NodeId(s)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Unique cost identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CostId(String);

impl CostId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for CostId {
    fn from(s: &str) -> Self {
        CostId(s.to_string())
    }
}

impl From<String> for CostId {
    fn from(s: String) -> Self {
        CostId(s)
    }
}

impl fmt::Display for CostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Projection domain applied to a parameter after gradient steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamDomain {
    Free,
    /// Scalar probability clipped into [1e-4, 1 - 1e-4].
    UnitInterval,
    /// Probability vector: coordinates clipped to 1e-4 then renormalized.
    Simplex,
}

/// Named real vectors; lookup by name is total for registered names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Vec<f64>>,
    domains: BTreeMap<String, ParamDomain>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>) {
        self.entries.insert(name.to_string(), values);
        self.domains
            .entry(name.to_string())
            .or_insert(ParamDomain::Free);
    }

    pub fn insert_with_domain(&mut self, name: &str, values: Vec<f64>, domain: ParamDomain) {
        self.entries.insert(name.to_string(), values);
        self.domains.insert(name.to_string(), domain);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.entries.get_mut(name)
    }

    pub fn set(&mut self, name: &str, values: Vec<f64>) {
        self.entries.insert(name.to_string(), values);
    }

    pub fn shape(&self, name: &str) -> Option<usize> {
        self.entries.get(name).map(Vec::len)
    }

    pub fn domain(&self, name: &str) -> ParamDomain {
        self.domains.get(name).copied().unwrap_or(ParamDomain::Free)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.entries.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// A cost function with its declared argument set.
#[derive(Clone, Debug, PartialEq)]
pub struct CostSpec {
    pub scope: BTreeSet<NodeId>,
    pub expr: Expr,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    CycleDetected(NodeId),
    DanglingReference(String),
    InvalidDistributionParams { node: NodeId, reason: String },
    DuplicateName(String),
    TiedGroupInvalid(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::CycleDetected(n) => write!(f, "cycle through node `{n}`"),
            ModelError::DanglingReference(s) => write!(f, "dangling reference: {s}"),
            ModelError::InvalidDistributionParams { node, reason } => {
                write!(f, "invalid distribution on `{node}`: {reason}")
            }
            ModelError::DuplicateName(s) => write!(f, "duplicate name `{s}`"),
            ModelError::TiedGroupInvalid(s) => write!(f, "invalid tied group: {s}"),
        }
    }
}

impl core::error::Error for ModelError {}

/// The declared model, prior to validation. Built either programmatically
/// or from a model file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScgModel {
    pub stochastic: BTreeMap<NodeId, DistributionSpec>,
    pub deterministic: BTreeMap<NodeId, Expr>,
    pub costs: BTreeMap<CostId, CostSpec>,
    /// Parent lists per node (declared edges point parent -> node).
    pub parents: BTreeMap<NodeId, Vec<NodeId>>,
    pub params: ParamStore,
    /// Sets of parameter names constrained equal.
    pub tied: Vec<BTreeSet<String>>,
}

impl ScgModel {
    pub fn new() -> Self {
        ScgModel::default()
    }

    pub fn stochastic(mut self, name: &str, parents: &[&str], spec: DistributionSpec) -> Self {
        self.stochastic.insert(NodeId::from(name), spec);
        self.parents.insert(
            NodeId::from(name),
            parents.iter().map(|p| NodeId::from(*p)).collect(),
        );
        self
    }

    pub fn deterministic(mut self, name: &str, parents: &[&str], expr: Expr) -> Self {
        self.deterministic.insert(NodeId::from(name), expr);
        self.parents.insert(
            NodeId::from(name),
            parents.iter().map(|p| NodeId::from(*p)).collect(),
        );
        self
    }

    pub fn cost(mut self, name: &str, scope: &[&str], expr: Expr) -> Self {
        self.costs.insert(
            CostId::from(name),
            CostSpec {
                scope: scope.iter().map(|p| NodeId::from(*p)).collect(),
                expr,
            },
        );
        self
    }

    pub fn param(mut self, name: &str, init: Vec<f64>) -> Self {
        self.params.insert(name, init);
        self
    }

    pub fn param_in(mut self, name: &str, init: Vec<f64>, domain: ParamDomain) -> Self {
        self.params.insert_with_domain(name, init, domain);
        self
    }

    pub fn tie(mut self, names: &[&str]) -> Self {
        self.tied
            .push(names.iter().map(|s| s.to_string()).collect());
        self
    }

    /// Checks structure and computes the derived indexes used everywhere
    /// else: topological order with lexicographic tie-breaking, child
    /// lists, the stochastic skeleton, per-cost reachability and discrete
    /// cardinalities.
    pub fn validate(self) -> Result<ValidatedScg, ModelError> {
        ValidatedScg::build(self)
    }
}

/// A validated model with precomputed graph indexes. Immutable after
/// construction and safe to share across threads.
#[derive(Clone, Debug)]
pub struct ValidatedScg {
    model: ScgModel,
    topo: Vec<NodeId>,
    children: BTreeMap<NodeId, BTreeSet<NodeId>>,
    cost_children: BTreeMap<NodeId, BTreeSet<CostId>>,
    skeleton_parents: BTreeMap<NodeId, BTreeSet<NodeId>>,
    cost_skeleton_parents: BTreeMap<CostId, BTreeSet<NodeId>>,
    reachable_costs: BTreeMap<NodeId, BTreeSet<CostId>>,
    discrete_coords: BTreeMap<NodeId, Option<Vec<u64>>>,
}

impl ValidatedScg {
    fn build(model: ScgModel) -> Result<ValidatedScg, ModelError> {
        // Name uniqueness across node kinds.
        for n in model.stochastic.keys() {
            if model.deterministic.contains_key(n) {
                return Err(ModelError::DuplicateName(n.to_string()));
            }
        }
        for f in model.costs.keys() {
            let as_node = NodeId::from(f.as_str());
            if model.stochastic.contains_key(&as_node) || model.deterministic.contains_key(&as_node)
            {
                return Err(ModelError::DuplicateName(f.to_string()));
            }
        }

        let declared: BTreeSet<NodeId> = model
            .stochastic
            .keys()
            .chain(model.deterministic.keys())
            .cloned()
            .collect();

        // Every referenced name resolves.
        for (n, ps) in &model.parents {
            if !declared.contains(n) {
                return Err(ModelError::DanglingReference(format!(
                    "parent list for undeclared node `{n}`"
                )));
            }
            for p in ps {
                if !declared.contains(p) {
                    return Err(ModelError::DanglingReference(format!(
                        "node `{n}` lists undeclared parent `{p}`"
                    )));
                }
            }
        }
        let empty: Vec<NodeId> = Vec::new();
        let parents_of = |n: &NodeId| model.parents.get(n).unwrap_or(&empty);

        let check_expr = |owner: &str, expr: &Expr, allowed: &BTreeSet<NodeId>| {
            let mut nodes = BTreeSet::new();
            expr.node_refs(&mut nodes);
            for n in &nodes {
                if !allowed.contains(n) {
                    return Err(ModelError::DanglingReference(format!(
                        "`{owner}` references `{n}` which is not among its declared inputs"
                    )));
                }
            }
            let mut ps = BTreeSet::new();
            expr.param_refs(&mut ps);
            for p in &ps {
                if model.params.get(p).is_none() {
                    return Err(ModelError::DanglingReference(format!(
                        "`{owner}` references unknown parameter `{p}`"
                    )));
                }
            }
            Ok(())
        };

        for (n, spec) in &model.stochastic {
            let allowed: BTreeSet<NodeId> = parents_of(n).iter().cloned().collect();
            for e in spec.exprs() {
                check_expr(n.as_str(), e, &allowed)?;
            }
            if let DistributionSpec::Categorical { k, .. } = spec {
                if *k < 2 {
                    return Err(ModelError::InvalidDistributionParams {
                        node: n.clone(),
                        reason: format!("categorical needs k >= 2, got {k}"),
                    });
                }
            }
        }
        for (n, expr) in &model.deterministic {
            let allowed: BTreeSet<NodeId> = parents_of(n).iter().cloned().collect();
            check_expr(n.as_str(), expr, &allowed)?;
        }
        for (f, cost) in &model.costs {
            for s in &cost.scope {
                if !declared.contains(s) {
                    return Err(ModelError::DanglingReference(format!(
                        "cost `{f}` scope references undeclared node `{s}`"
                    )));
                }
            }
            check_expr(f.as_str(), &cost.expr, &cost.scope)?;
        }

        // Tied groups: existing names, pairwise-equal shapes and values,
        // disjoint across groups.
        let mut seen_tied: BTreeSet<String> = BTreeSet::new();
        for group in &model.tied {
            if group.len() < 2 {
                return Err(ModelError::TiedGroupInvalid(
                    "group needs at least two members".to_string(),
                ));
            }
            let mut shape: Option<usize> = None;
            let mut first: Option<&[f64]> = None;
            for name in group {
                let v = model.params.get(name).ok_or_else(|| {
                    ModelError::TiedGroupInvalid(format!("unknown parameter `{name}`"))
                })?;
                if !seen_tied.insert(name.clone()) {
                    return Err(ModelError::TiedGroupInvalid(format!(
                        "parameter `{name}` appears in two groups"
                    )));
                }
                match shape {
                    None => {
                        shape = Some(v.len());
                        first = Some(v);
                    }
                    Some(s) if s == v.len() => {
                        if first.map(|f| f != v).unwrap_or(false) {
                            return Err(ModelError::TiedGroupInvalid(format!(
                                "members of the group containing `{name}` start unequal"
                            )));
                        }
                    }
                    Some(s) => {
                        return Err(ModelError::TiedGroupInvalid(format!(
                            "shape mismatch in group: {s} vs {}",
                            v.len()
                        )))
                    }
                }
            }
        }

        // Children and topological order (Kahn, lexicographic frontier).
        let mut children: BTreeMap<NodeId, BTreeSet<NodeId>> = declared
            .iter()
            .map(|n| (n.clone(), BTreeSet::new()))
            .collect();
        let mut indegree: BTreeMap<NodeId, usize> =
            declared.iter().map(|n| (n.clone(), 0)).collect();
        for n in &declared {
            for p in parents_of(n) {
                children.get_mut(p).expect("declared").insert(n.clone());
                *indegree.get_mut(n).expect("declared") += 1;
            }
        }
        let mut frontier: BTreeSet<NodeId> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(n, _)| n.clone())
            .collect();
        let mut topo = Vec::with_capacity(declared.len());
        let mut remaining = indegree.clone();
        while let Some(n) = frontier.iter().next().cloned() {
            frontier.remove(&n);
            topo.push(n.clone());
            for c in &children[&n] {
                let d = remaining.get_mut(c).expect("declared");
                *d -= 1;
                if *d == 0 {
                    frontier.insert(c.clone());
                }
            }
        }
        if topo.len() != declared.len() {
            // Walk parents from any unresolved node until a repeat: that
            // repeat lies on a cycle.
            let start = remaining
                .iter()
                .find(|(n, d)| **d > 0 && !topo.contains(n))
                .map(|(n, _)| n.clone())
                .expect("cycle exists");
            let mut seen = BTreeSet::new();
            let mut cur = start;
            loop {
                if !seen.insert(cur.clone()) {
                    return Err(ModelError::CycleDetected(cur));
                }
                let next = parents_of(&cur)
                    .iter()
                    .find(|p| !topo.contains(*p))
                    .cloned()
                    .expect("unresolved node has unresolved parent");
                cur = next;
            }
        }

        // Costs hang off every node in their scope.
        let mut cost_children: BTreeMap<NodeId, BTreeSet<CostId>> = declared
            .iter()
            .map(|n| (n.clone(), BTreeSet::new()))
            .collect();
        for (f, cost) in &model.costs {
            for s in &cost.scope {
                cost_children.get_mut(s).expect("checked").insert(f.clone());
            }
        }

        // Stochastic skeleton: nearest stochastic influencers through
        // deterministic-only paths.
        let nearest_stochastic = |starts: &BTreeSet<NodeId>| -> BTreeSet<NodeId> {
            let mut out = BTreeSet::new();
            let mut stack: Vec<NodeId> = starts.iter().cloned().collect();
            let mut seen: BTreeSet<NodeId> = starts.clone();
            while let Some(n) = stack.pop() {
                if model.stochastic.contains_key(&n) {
                    out.insert(n);
                    continue;
                }
                for p in parents_of(&n) {
                    if seen.insert(p.clone()) {
                        stack.push(p.clone());
                    }
                }
            }
            out
        };
        let mut skeleton_parents = BTreeMap::new();
        for n in model.stochastic.keys() {
            let direct: BTreeSet<NodeId> = parents_of(n).iter().cloned().collect();
            skeleton_parents.insert(n.clone(), nearest_stochastic(&direct));
        }
        let mut cost_skeleton_parents = BTreeMap::new();
        for (f, cost) in &model.costs {
            cost_skeleton_parents.insert(f.clone(), nearest_stochastic(&cost.scope));
        }

        // Costs reachable from each node, by reverse topological sweep.
        let mut reachable_costs: BTreeMap<NodeId, BTreeSet<CostId>> = declared
            .iter()
            .map(|n| (n.clone(), BTreeSet::new()))
            .collect();
        for n in topo.iter().rev() {
            let mut acc: BTreeSet<CostId> = cost_children[n].clone();
            for c in &children[n] {
                acc.extend(reachable_costs[c].iter().cloned());
            }
            reachable_costs.insert(n.clone(), acc);
        }

        let mut scg = ValidatedScg {
            model,
            topo,
            children,
            cost_children,
            skeleton_parents,
            cost_skeleton_parents,
            reachable_costs,
            discrete_coords: BTreeMap::new(),
        };
        scg.discrete_coords = scg.compute_discrete_coords();
        Ok(scg)
    }

    /// Per-node discrete coordinate cardinalities: `[2]` for Bernoulli,
    /// `[k]` for categorical, the flattened component list for a dirac
    /// collector over discrete nodes, `None` otherwise.
    fn compute_discrete_coords(&self) -> BTreeMap<NodeId, Option<Vec<u64>>> {
        let mut out: BTreeMap<NodeId, Option<Vec<u64>>> = BTreeMap::new();
        for n in &self.topo {
            let entry = match self.model.stochastic.get(n) {
                Some(DistributionSpec::Bernoulli { .. }) => Some(alloc::vec![2]),
                Some(DistributionSpec::Categorical { k, .. }) => Some(alloc::vec![*k as u64]),
                Some(DistributionSpec::Gaussian { .. }) => None,
                Some(DistributionSpec::Dirac { value }) => collector_refs(value).and_then(|refs| {
                    let mut coords = Vec::new();
                    for r in refs {
                        match out.get(&r).and_then(|c| c.clone()) {
                            Some(c) => coords.extend(c),
                            None => return None,
                        }
                    }
                    Some(coords)
                }),
                None => None,
            };
            out.insert(n.clone(), entry);
        }
        out
    }

    /// Static per-coordinate layout of a stochastic node's value:
    /// `Some(card)` for a discrete coordinate, `None` for a continuous
    /// one. `None` overall when the layout cannot be derived (a dirac
    /// whose expression is not a pure collector).
    pub fn value_layout(&self, n: &NodeId) -> Option<Vec<Option<u64>>> {
        match self.model.stochastic.get(n)? {
            DistributionSpec::Bernoulli { .. } => Some(alloc::vec![Some(2)]),
            DistributionSpec::Categorical { k, .. } => Some(alloc::vec![Some(*k as u64)]),
            DistributionSpec::Gaussian { .. } => Some(alloc::vec![None]),
            DistributionSpec::Dirac { value } => {
                let refs = collector_refs(value)?;
                let mut coords = Vec::new();
                for r in refs {
                    coords.extend(self.value_layout(&r)?);
                }
                Some(coords)
            }
        }
    }

    pub fn model(&self) -> &ScgModel {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.model.params
    }

    /// All nodes (stochastic and deterministic) in topological order;
    /// ties are broken lexicographically by name.
    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub fn is_stochastic(&self, n: &NodeId) -> bool {
        self.model.stochastic.contains_key(n)
    }

    pub fn is_declared(&self, n: &NodeId) -> bool {
        self.model.stochastic.contains_key(n) || self.model.deterministic.contains_key(n)
    }

    pub fn stochastic_nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.model.stochastic.keys()
    }

    pub fn spec(&self, n: &NodeId) -> Option<&DistributionSpec> {
        self.model.stochastic.get(n)
    }

    pub fn det_expr(&self, n: &NodeId) -> Option<&Expr> {
        self.model.deterministic.get(n)
    }

    pub fn parents(&self, n: &NodeId) -> &[NodeId] {
        self.model.parents.get(n).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn children(&self, n: &NodeId) -> impl Iterator<Item = &NodeId> {
        self.children.get(n).into_iter().flatten()
    }

    pub fn costs(&self) -> &BTreeMap<CostId, CostSpec> {
        &self.model.costs
    }

    pub fn cost(&self, f: &CostId) -> Option<&CostSpec> {
        self.model.costs.get(f)
    }

    /// Costs whose declared scope contains `n`.
    pub fn costs_on(&self, n: &NodeId) -> impl Iterator<Item = &CostId> {
        self.cost_children.get(n).into_iter().flatten()
    }

    /// Nearest stochastic influencers of a stochastic node.
    pub fn skeleton_parents(&self, n: &NodeId) -> Option<&BTreeSet<NodeId>> {
        self.skeleton_parents.get(n)
    }

    /// Nearest stochastic influencers of a cost.
    pub fn cost_skeleton_parents(&self, f: &CostId) -> Option<&BTreeSet<NodeId>> {
        self.cost_skeleton_parents.get(f)
    }

    /// Costs reachable from a node through any directed path.
    pub fn reachable_costs(&self, n: &NodeId) -> Option<&BTreeSet<CostId>> {
        self.reachable_costs.get(n)
    }

    /// Total outcome count for a discrete node; `None` when continuous or
    /// not encodable.
    pub fn cardinality(&self, n: &NodeId) -> Option<u64> {
        self.discrete_coords
            .get(n)
            .and_then(|c| c.as_ref())
            .map(|coords| coords.iter().product())
    }

    pub fn discrete_coords(&self, n: &NodeId) -> Option<&[u64]> {
        self.discrete_coords.get(n).and_then(|c| c.as_deref())
    }
}

/// `Some(refs)` when the expression is a pure collector: a tree of
/// `Concat` over node references.
fn collector_refs(expr: &Expr) -> Option<Vec<NodeId>> {
    match expr {
        Expr::Node(n) => Some(alloc::vec![n.clone()]),
        Expr::Concat(es) => {
            let mut out = Vec::new();
            for e in es {
                out.extend(collector_refs(e)?);
            }
            Some(out)
        }
        _ => None,
    }
}


#[cfg(test)]
mod concurrency_tests {
    use super::*;

    #[test]
    fn validated_graphs_and_parameters_are_shareable() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<ValidatedScg>();
        assert_send_sync::<ParamStore>();
        assert_send_sync::<crate::network::BpqNetwork>();
    }
}
