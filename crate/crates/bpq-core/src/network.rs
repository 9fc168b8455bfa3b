//! Construction, merging and reduction of cost-propagation networks.
//!
//! The network is the reversed stochastic skeleton of the graph with one
//! Q-function node per (stochastic node, cost group) plus each cost as a
//! root. An edge `Q_child -> Q_parent` carries the free-variable set that
//! the parent's expectation update integrates out. Incoming edges group
//! by cost-source label: targets average within a group and sum across
//! groups, so each node receives each cost exactly once in expectation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{CostId, NodeId, ValidatedScg};
use crate::scope::{ancestors, scope, ScopeError, ScopeSet};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum QOwner {
    Node(NodeId),
    Root(CostId),
}

impl fmt::Display for QOwner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QOwner::Node(n) => write!(f, "Q[{n}]"),
            QOwner::Root(c) => write!(f, "cost[{c}]"),
        }
    }
}

/// Identity of a learned Q-function: its owner and the cost group it
/// accumulates.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct QKey {
    pub owner: NodeId,
    pub sources: BTreeSet<CostId>,
}

impl fmt::Display for QKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}^{{", self.owner)?;
        for (i, c) in self.sources.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "}}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QNode {
    pub owner: QOwner,
    pub scope: ScopeSet,
    pub cost_sources: BTreeSet<CostId>,
    pub is_root: bool,
}

impl QNode {
    pub fn key(&self) -> Option<QKey> {
        match &self.owner {
            QOwner::Node(n) => Some(QKey {
                owner: n.clone(),
                sources: self.cost_sources.clone(),
            }),
            QOwner::Root(_) => None,
        }
    }
}

/// Directed update-rule edge: the target at `to` queries the Q-function
/// at `from`, integrating out `free`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QEdge {
    pub from: usize,
    pub to: usize,
    pub sources: BTreeSet<CostId>,
    pub free: ScopeSet,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpqNetwork {
    pub qnodes: Vec<QNode>,
    pub edges: Vec<QEdge>,
}

impl BpqNetwork {
    pub fn index_of(&self, owner: &QOwner, sources: &BTreeSet<CostId>) -> Option<usize> {
        self.qnodes
            .iter()
            .position(|q| q.owner == *owner && q.cost_sources == *sources)
    }

    /// Indexes of all Q-nodes owned by a stochastic node.
    pub fn owned_by(&self, n: &NodeId) -> Vec<usize> {
        self.qnodes
            .iter()
            .enumerate()
            .filter(|(_, q)| q.owner == QOwner::Node(n.clone()))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn incoming(&self, idx: usize) -> impl Iterator<Item = &QEdge> {
        self.edges.iter().filter(move |e| e.to == idx)
    }

    pub fn outgoing(&self, idx: usize) -> impl Iterator<Item = &QEdge> {
        self.edges.iter().filter(move |e| e.from == idx)
    }

    /// Incoming edges grouped by cost-source label, sorted by label.
    /// Targets average within a group and sum across groups.
    pub fn incoming_groups(&self, idx: usize) -> Vec<(BTreeSet<CostId>, Vec<&QEdge>)> {
        let mut groups: BTreeMap<BTreeSet<CostId>, Vec<&QEdge>> = BTreeMap::new();
        for e in self.incoming(idx) {
            groups.entry(e.sources.clone()).or_default().push(e);
        }
        groups.into_iter().collect()
    }

    /// Indexes in an order where every edge source precedes its target
    /// (roots first).
    pub fn topo_from_roots(&self) -> Vec<usize> {
        let n = self.qnodes.len();
        let mut indeg = alloc::vec![0usize; n];
        for e in &self.edges {
            indeg[e.to] += 1;
        }
        let mut frontier: BTreeSet<usize> = (0..n).filter(|i| indeg[*i] == 0).collect();
        let mut out = Vec::with_capacity(n);
        while let Some(&i) = frontier.iter().next() {
            frontier.remove(&i);
            out.push(i);
            for e in self.edges.iter().filter(|e| e.from == i) {
                indeg[e.to] -= 1;
                if indeg[e.to] == 0 {
                    frontier.insert(e.to);
                }
            }
        }
        out
    }

    /// Structural invariants: acyclic, every non-root reaches a root
    /// against edge direction, and within a consumer the label groups are
    /// pairwise disjoint.
    pub fn check(&self) -> Result<(), String> {
        if self.topo_from_roots().len() != self.qnodes.len() {
            return Err(String::from("network has a cycle"));
        }
        let mut reached: BTreeSet<usize> = self
            .qnodes
            .iter()
            .enumerate()
            .filter(|(_, q)| q.is_root)
            .map(|(i, _)| i)
            .collect();
        let mut grew = true;
        while grew {
            grew = false;
            for e in &self.edges {
                if reached.contains(&e.from) && reached.insert(e.to) {
                    grew = true;
                }
            }
        }
        for (i, q) in self.qnodes.iter().enumerate() {
            if !q.is_root && !reached.contains(&i) {
                return Err(format!("{} does not reach any root", q.owner));
            }
        }
        for (i, _) in self.qnodes.iter().enumerate() {
            let groups = self.incoming_groups(i);
            for (a, _) in &groups {
                for (b, _) in &groups {
                    if a != b && a.intersection(b).next().is_some() {
                        return Err(format!(
                            "overlapping source labels at {}: {:?} vs {:?}",
                            self.qnodes[i].owner, a, b
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Hop distance of every node from the nearest root.
    pub fn root_distances(&self) -> Vec<usize> {
        let order = self.topo_from_roots();
        let mut dist = alloc::vec![usize::MAX; self.qnodes.len()];
        for &i in &order {
            if self.qnodes[i].is_root {
                dist[i] = 0;
            }
            for e in self.edges.iter().filter(|e| e.from == i) {
                if dist[i] != usize::MAX {
                    dist[e.to] = dist[e.to].min(dist[i] + 1);
                }
            }
        }
        dist
    }

    fn canonical(mut self) -> Self {
        let mut order: Vec<usize> = (0..self.qnodes.len()).collect();
        order.sort_by(|&a, &b| {
            let ka = (&self.qnodes[a].owner, &self.qnodes[a].cost_sources);
            let kb = (&self.qnodes[b].owner, &self.qnodes[b].cost_sources);
            ka.cmp(&kb)
        });
        let mut remap = alloc::vec![0usize; self.qnodes.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let mut nodes = Vec::with_capacity(self.qnodes.len());
        for &old in &order {
            nodes.push(self.qnodes[old].clone());
        }
        for e in &mut self.edges {
            e.from = remap[e.from];
            e.to = remap[e.to];
        }
        self.qnodes = nodes;
        self.edges.sort_by(|a, b| {
            (a.to, a.from, &a.sources, &a.free).cmp(&(b.to, b.from, &b.sources, &b.free))
        });
        self.edges.dedup();
        self
    }
}

/// Builds the single-cost network: one Q-node per stochastic node from
/// which the cost is reachable, plus the cost itself as the root. Every
/// equivalent update rule is kept as its own edge; rules with the same
/// source label average.
pub fn build_percost_network(scg: &ValidatedScg, f: &CostId) -> Result<BpqNetwork, ScopeError> {
    let root_scope: ScopeSet = scg
        .cost_skeleton_parents(f)
        .ok_or_else(|| ScopeError::UnknownCost(f.clone()))?
        .iter()
        .cloned()
        .collect();
    let mut qnodes = Vec::new();
    let mut index: BTreeMap<QOwner, usize> = BTreeMap::new();
    let singleton: BTreeSet<CostId> = [f.clone()].into_iter().collect();

    qnodes.push(QNode {
        owner: QOwner::Root(f.clone()),
        scope: root_scope.clone(),
        cost_sources: singleton.clone(),
        is_root: true,
    });
    index.insert(QOwner::Root(f.clone()), 0);

    let reachable: Vec<NodeId> = scg
        .stochastic_nodes()
        .filter(|n| {
            scg.reachable_costs(n)
                .map(|cs| cs.contains(f))
                .unwrap_or(false)
        })
        .cloned()
        .collect();
    for n in &reachable {
        let sc = scope(scg, n, f)?;
        index.insert(QOwner::Node(n.clone()), qnodes.len());
        qnodes.push(QNode {
            owner: QOwner::Node(n.clone()),
            scope: sc,
            cost_sources: singleton.clone(),
            is_root: false,
        });
    }

    let mut edges = Vec::new();
    let add_edge = |from: usize, to: usize, qnodes: &[QNode], edges: &mut Vec<QEdge>| {
        let to_owner = match &qnodes[to].owner {
            QOwner::Node(n) => n.clone(),
            QOwner::Root(_) => unreachable!("edges point away from roots"),
        };
        let mut blocked = ancestors(scg, &to_owner).expect("validated stochastic node");
        blocked.insert(to_owner);
        let free: ScopeSet = qnodes[from]
            .scope
            .members()
            .filter(|m| !blocked.contains(m))
            .cloned()
            .collect();
        edges.push(QEdge {
            from,
            to,
            sources: singleton.clone(),
            free,
        });
    };

    for y in &reachable {
        let from = index[&QOwner::Node(y.clone())];
        for x in scg.skeleton_parents(y).into_iter().flatten() {
            let to = index[&QOwner::Node(x.clone())];
            add_edge(from, to, &qnodes, &mut edges);
        }
    }
    for x in root_scope.members() {
        let to = index[&QOwner::Node(x.clone())];
        add_edge(0, to, &qnodes, &mut edges);
    }

    Ok(BpqNetwork { qnodes, edges }.canonical())
}

/// One incoming edge, as compared by the merge matching test: the source
/// owner (roots are interchangeable), its scope, and the free set.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct EdgeShape {
    source: Option<NodeId>,
    source_scope: ScopeSet,
    free: ScopeSet,
}

struct PerCostView<'a> {
    net: &'a BpqNetwork,
    by_owner: BTreeMap<NodeId, usize>,
}

impl<'a> PerCostView<'a> {
    fn new(net: &'a BpqNetwork) -> Self {
        let by_owner = net
            .qnodes
            .iter()
            .enumerate()
            .filter_map(|(i, q)| match &q.owner {
                QOwner::Node(n) => Some((n.clone(), i)),
                QOwner::Root(_) => None,
            })
            .collect();
        PerCostView { net, by_owner }
    }

    fn scope_of(&self, n: &NodeId) -> Option<&ScopeSet> {
        self.by_owner.get(n).map(|&i| &self.net.qnodes[i].scope)
    }

    fn incoming_shapes(&self, n: &NodeId) -> Option<BTreeSet<EdgeShape>> {
        let &i = self.by_owner.get(n)?;
        Some(
            self.net
                .incoming(i)
                .map(|e| {
                    let src = &self.net.qnodes[e.from];
                    EdgeShape {
                        source: match &src.owner {
                            QOwner::Node(n) => Some(n.clone()),
                            QOwner::Root(_) => None,
                        },
                        source_scope: src.scope.clone(),
                        free: e.free.clone(),
                    }
                })
                .collect(),
        )
    }
}

/// Merges per-cost networks. Q-nodes with the same owner and scope fuse
/// when their networks are structurally matched at every ancestor of the
/// owner: same incoming-edge shapes and same scopes, roots compared as
/// interchangeable. A fused node's update target sums the groups of its
/// distinct source labels and averages inside each, which reproduces the
/// per-cost targets summed per owner.
pub fn merge_networks(scg: &ValidatedScg, nets: &[BpqNetwork]) -> BpqNetwork {
    let views: BTreeMap<CostId, PerCostView<'_>> = nets
        .iter()
        .map(|net| {
            let root = net
                .qnodes
                .iter()
                .find(|q| q.is_root)
                .expect("per-cost network has a root");
            let f = root.cost_sources.iter().next().expect("singleton").clone();
            (f, PerCostView::new(net))
        })
        .collect();

    let mut memo: BTreeMap<(NodeId, CostId, CostId), bool> = BTreeMap::new();

    // Group the costs at each owner into matched classes. Matching is an
    // equality of per-ancestor structures, hence transitive; one
    // representative per group suffices.
    let mut owner_groups: BTreeMap<NodeId, Vec<BTreeSet<CostId>>> = BTreeMap::new();
    for n in scg.stochastic_nodes() {
        let present: Vec<CostId> = views
            .iter()
            .filter(|(_, v)| v.by_owner.contains_key(n))
            .map(|(f, _)| f.clone())
            .collect();
        let mut groups: Vec<BTreeSet<CostId>> = Vec::new();
        for f in present {
            let mut placed = false;
            for g in groups.iter_mut() {
                let rep = g.iter().next().expect("nonempty").clone();
                if matched(scg, &views, n, &f, &rep, &mut memo) {
                    g.insert(f.clone());
                    placed = true;
                    break;
                }
            }
            if !placed {
                let mut s = BTreeSet::new();
                s.insert(f.clone());
                groups.push(s);
            }
        }
        if !groups.is_empty() {
            owner_groups.insert(n.clone(), groups);
        }
    }
    let group_of = |n: &NodeId, f: &CostId| -> BTreeSet<CostId> {
        owner_groups
            .get(n)
            .and_then(|gs| gs.iter().find(|g| g.contains(f)))
            .cloned()
            .expect("cost present at owner")
    };

    let mut qnodes: Vec<QNode> = Vec::new();
    let mut index: BTreeMap<(QOwner, BTreeSet<CostId>), usize> = BTreeMap::new();
    for (f, view) in &views {
        let root = view.net.qnodes.iter().find(|q| q.is_root).expect("root");
        let key = (QOwner::Root(f.clone()), root.cost_sources.clone());
        index.insert(key, qnodes.len());
        qnodes.push(root.clone());
    }
    for (n, groups) in &owner_groups {
        for g in groups {
            let f = g.iter().next().expect("nonempty");
            let scope = views[f].scope_of(n).expect("present").clone();
            let key = (QOwner::Node(n.clone()), g.clone());
            index.insert(key, qnodes.len());
            qnodes.push(QNode {
                owner: QOwner::Node(n.clone()),
                scope,
                cost_sources: g.clone(),
                is_root: false,
            });
        }
    }

    let mut edges: BTreeMap<(usize, usize), QEdge> = BTreeMap::new();
    for (f, view) in &views {
        for e in &view.net.edges {
            let to_owner = match &view.net.qnodes[e.to].owner {
                QOwner::Node(n) => n.clone(),
                QOwner::Root(_) => unreachable!(),
            };
            let to_key = (QOwner::Node(to_owner.clone()), group_of(&to_owner, f));
            let (from_key, label) = match &view.net.qnodes[e.from].owner {
                QOwner::Node(s) => {
                    let g = group_of(s, f);
                    ((QOwner::Node(s.clone()), g.clone()), g)
                }
                QOwner::Root(r) => {
                    let single: BTreeSet<CostId> = [r.clone()].into_iter().collect();
                    ((QOwner::Root(r.clone()), single.clone()), single)
                }
            };
            let from = index[&from_key];
            let to = index[&to_key];
            let entry = edges.entry((from, to)).or_insert_with(|| QEdge {
                from,
                to,
                sources: BTreeSet::new(),
                free: e.free.clone(),
            });
            debug_assert_eq!(entry.free, e.free, "free sets agree within a merged edge");
            entry.sources.extend(label);
        }
    }

    BpqNetwork {
        qnodes,
        edges: edges.into_values().collect(),
    }
    .canonical()
}

fn matched(
    scg: &ValidatedScg,
    views: &BTreeMap<CostId, PerCostView<'_>>,
    x: &NodeId,
    f: &CostId,
    g: &CostId,
    memo: &mut BTreeMap<(NodeId, CostId, CostId), bool>,
) -> bool {
    let key = if f <= g {
        (x.clone(), f.clone(), g.clone())
    } else {
        (x.clone(), g.clone(), f.clone())
    };
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let vf = &views[f];
    let vg = &views[g];
    let ok = (|| {
        if vf.scope_of(x)? != vg.scope_of(x)? {
            return Some(false);
        }
        for a in ancestors(scg, x).ok()? {
            if vf.scope_of(&a)? != vg.scope_of(&a)? {
                return Some(false);
            }
            if vf.incoming_shapes(&a)? != vg.incoming_shapes(&a)? {
                return Some(false);
            }
        }
        Some(true)
    })()
    .unwrap_or(false);
    memo.insert(key, ok);
    ok
}

/// Tree-reduction strategy: which equivalent rule survives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceStrategy {
    /// Keep an edge on a minimum-hop path to the root.
    ShortestPath,
    /// Keep the edge whose source sits farthest from the root, favoring
    /// chain-shaped networks that share longer suffixes and merge better.
    Chain,
}

/// Keeps exactly one incoming edge per source label at every node, so
/// each node receives each cost exactly once. Ties break
/// lexicographically by source owner.
pub fn reduce_to_tree(net: &BpqNetwork, strategy: ReduceStrategy) -> BpqNetwork {
    let dist = net.root_distances();
    let mut kept: Vec<QEdge> = Vec::new();
    for idx in 0..net.qnodes.len() {
        for (_, group) in net.incoming_groups(idx) {
            let chosen = group
                .into_iter()
                .min_by_key(|e| {
                    let d = dist[e.from] as i64;
                    let rank = match strategy {
                        ReduceStrategy::ShortestPath => d,
                        ReduceStrategy::Chain => -d,
                    };
                    (
                        rank,
                        format!("{}", net.qnodes[e.from].owner),
                        e.free.clone(),
                    )
                })
                .expect("group is nonempty");
            kept.push(chosen.clone());
        }
    }
    BpqNetwork {
        qnodes: net.qnodes.clone(),
        edges: kept,
    }
    .canonical()
}

/// Removes Q-nodes that merely copy root costs: a non-root node whose
/// incoming edges are all root edges with empty free sets evaluates to a
/// sum of known cost values, so consumers can query the roots directly.
/// A node is only removed when each of its outgoing edges is the sole
/// member of its label group at the consumer, which keeps group
/// semantics intact.
pub fn inline_root_copies(scg: &ValidatedScg, net: &BpqNetwork) -> BpqNetwork {
    let mut current = net.clone();
    loop {
        let candidate = (0..current.qnodes.len()).find(|&i| {
            let q = &current.qnodes[i];
            if q.is_root {
                return false;
            }
            let incoming: Vec<&QEdge> = current.incoming(i).collect();
            if incoming.is_empty()
                || !incoming
                    .iter()
                    .all(|e| current.qnodes[e.from].is_root && e.free.is_empty())
            {
                return false;
            }
            current.outgoing(i).all(|out| {
                current
                    .incoming(out.to)
                    .filter(|e| e.sources == out.sources)
                    .count()
                    == 1
            })
        });
        let Some(i) = candidate else {
            return current;
        };
        let roots: Vec<usize> = current.incoming(i).map(|e| e.from).collect();
        let consumers: Vec<QEdge> = current.outgoing(i).cloned().collect();
        let mut edges: Vec<QEdge> = current
            .edges
            .iter()
            .filter(|e| e.from != i && e.to != i)
            .cloned()
            .collect();
        for out in &consumers {
            let to_owner = match &current.qnodes[out.to].owner {
                QOwner::Node(n) => n.clone(),
                QOwner::Root(_) => unreachable!(),
            };
            let mut blocked = ancestors(scg, &to_owner).expect("validated");
            blocked.insert(to_owner);
            for &r in &roots {
                let root = &current.qnodes[r];
                let free: ScopeSet = root
                    .scope
                    .members()
                    .filter(|m| !blocked.contains(m))
                    .cloned()
                    .collect();
                edges.push(QEdge {
                    from: r,
                    to: out.to,
                    sources: root.cost_sources.clone(),
                    free,
                });
            }
        }
        let mut qnodes = current.qnodes.clone();
        qnodes.remove(i);
        for e in &mut edges {
            if e.from > i {
                e.from -= 1;
            }
            if e.to > i {
                e.to -= 1;
            }
        }
        current = BpqNetwork { qnodes, edges }.canonical();
    }
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
            .cost("f", &["x2"], Expr::node("x2"))
            .validate()
            .unwrap()
    }

    fn diamond() -> ValidatedScg {
        // x -> y1, y2; z collects (y1, y2); cost on z
        ScgModel::new()
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

    #[test]
    fn chain_network_is_the_reversed_chain() {
        let scg = chain3();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        net.check().unwrap();
        assert_eq!(net.qnodes.len(), 3);
        let root = net
            .index_of(
                &QOwner::Root(CostId::from("f")),
                &[CostId::from("f")].into_iter().collect(),
            )
            .unwrap();
        let q2 = net.owned_by(&NodeId::from("x2"))[0];
        let q1 = net.owned_by(&NodeId::from("x1"))[0];
        let has = |from, to| net.edges.iter().any(|e| e.from == from && e.to == to);
        assert!(has(root, q2));
        assert!(has(q2, q1));
        assert_eq!(net.edges.len(), 2);
        let e_root = net.edges.iter().find(|e| e.from == root).unwrap();
        assert!(e_root.free.is_empty());
        let e_21 = net.edges.iter().find(|e| e.from == q2).unwrap();
        assert_eq!(e_21.free, ScopeSet::from_iter([NodeId::from("x2")]));
    }

    #[test]
    fn diamond_equivalent_rules_average() {
        let scg = diamond();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        net.check().unwrap();
        let qx = net.owned_by(&NodeId::from("x"))[0];
        let groups = net.incoming_groups(qx);
        assert_eq!(groups.len(), 1, "one cost source");
        assert_eq!(groups[0].1.len(), 2, "two equivalent rules marked average");
        let froms: BTreeSet<&QOwner> = groups[0]
            .1
            .iter()
            .map(|e| &net.qnodes[e.from].owner)
            .collect();
        assert!(froms.contains(&QOwner::Node(NodeId::from("y1"))));
        assert!(froms.contains(&QOwner::Node(NodeId::from("y2"))));
    }

    #[test]
    fn unreachable_node_gets_no_qnode() {
        let scg = ScgModel::new()
            .stochastic("a", &[], bern(0.5))
            .stochastic("b", &[], bern(0.5))
            .cost("f", &["a"], Expr::node("a"))
            .validate()
            .unwrap();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        assert!(net.owned_by(&NodeId::from("b")).is_empty());
        assert_eq!(net.qnodes.len(), 2);
    }

    #[test]
    fn single_network_merge_is_identity() {
        let scg = diamond();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        let merged = merge_networks(&scg, core::slice::from_ref(&net));
        assert_eq!(merged, net);
    }

    #[test]
    fn disjoint_costs_with_shared_ancestry_fuse_per_owner() {
        let scg = ScgModel::new()
            .stochastic("x1", &[], bern(0.5))
            .stochastic("x2", &["x1"], bern_on("x1"))
            .stochastic("x3", &["x2"], bern_on("x2"))
            .cost("fa", &["x3"], Expr::node("x3"))
            .cost("fb", &["x3"], Expr::sub(Expr::Const(1.0), Expr::node("x3")))
            .validate()
            .unwrap();
        let nets = [
            build_percost_network(&scg, &CostId::from("fa")).unwrap(),
            build_percost_network(&scg, &CostId::from("fb")).unwrap(),
        ];
        let merged = merge_networks(&scg, &nets);
        merged.check().unwrap();
        for n in ["x1", "x2", "x3"] {
            let owned = merged.owned_by(&NodeId::from(n));
            assert_eq!(owned.len(), 1, "{n} fused into one Q-node");
            assert_eq!(
                merged.qnodes[owned[0]].cost_sources,
                ["fa", "fb"].map(CostId::from).into_iter().collect()
            );
        }
        // The fused terminal node takes both root edges: sum across
        // sources, no averaging.
        let q3 = merged.owned_by(&NodeId::from("x3"))[0];
        let groups = merged.incoming_groups(q3);
        assert_eq!(groups.len(), 2);
        assert!(groups.iter().all(|(_, es)| es.len() == 1));
    }

    #[test]
    fn mismatched_scopes_stay_separate() {
        // fa sees x2 with scope {x2}; fb reaches x2 with a bypass from
        // x1, enlarging the scope, so the two cannot fuse at x2.
        let scg = ScgModel::new()
            .stochastic("x1", &[], bern(0.5))
            .stochastic("x2", &["x1"], bern_on("x1"))
            .stochastic(
                "z",
                &["x1", "x2"],
                DistributionSpec::Dirac {
                    value: Expr::Concat(alloc::vec![Expr::node("x1"), Expr::node("x2")]),
                },
            )
            .cost("fa", &["x2"], Expr::node("x2"))
            .cost(
                "fb",
                &["z"],
                Expr::mul(
                    Expr::index(Expr::node("z"), 0),
                    Expr::index(Expr::node("z"), 1),
                ),
            )
            .validate()
            .unwrap();
        let nets = [
            build_percost_network(&scg, &CostId::from("fa")).unwrap(),
            build_percost_network(&scg, &CostId::from("fb")).unwrap(),
        ];
        let merged = merge_networks(&scg, &nets);
        merged.check().unwrap();
        assert_eq!(merged.owned_by(&NodeId::from("x2")).len(), 2);
    }

    #[test]
    fn chain_already_tree() {
        let scg = chain3();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        let reduced = reduce_to_tree(&net, ReduceStrategy::ShortestPath);
        assert_eq!(reduced, net);
    }

    #[test]
    fn diamond_reduces_to_one_incoming_edge() {
        let scg = diamond();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        let reduced = reduce_to_tree(&net, ReduceStrategy::ShortestPath);
        reduced.check().unwrap();
        let qx = reduced.owned_by(&NodeId::from("x"))[0];
        assert_eq!(reduced.incoming(qx).count(), 1);
        // lexicographic tie-break keeps y1
        let e = reduced.incoming(qx).next().unwrap();
        assert_eq!(
            reduced.qnodes[e.from].owner,
            QOwner::Node(NodeId::from("y1"))
        );
    }

    #[test]
    fn inline_removes_pure_root_copies() {
        let scg = chain3();
        let net = build_percost_network(&scg, &CostId::from("f")).unwrap();
        let inlined = inline_root_copies(&scg, &net);
        inlined.check().unwrap();
        // Q at x2 was a copy of the cost; x1 now queries the root with
        // free set {x2}.
        assert!(inlined.owned_by(&NodeId::from("x2")).is_empty());
        let q1 = inlined.owned_by(&NodeId::from("x1"))[0];
        let e = inlined.incoming(q1).next().unwrap();
        assert!(inlined.qnodes[e.from].is_root);
        assert_eq!(e.free, ScopeSet::from_iter([NodeId::from("x2")]));
    }
}

#[cfg(test)]
mod strategy_tests {
    use super::*;
    use crate::dist::DistributionSpec;
    use crate::expr::Expr;
    use crate::model::ScgModel;

    #[test]
    fn chain_strategy_prefers_the_farther_rule() {
        // A multivariate cost over (x2, x3) gives Q at x2 two equivalent
        // rules: query the root directly, or go through Q at x3. The
        // shortest-path reduction keeps the root edge; the chain
        // reduction keeps the longer route.
        let scg = ScgModel::new()
            .stochastic(
                "x1",
                &[],
                DistributionSpec::Bernoulli {
                    prob: Expr::Const(0.5),
                },
            )
            .stochastic(
                "x2",
                &["x1"],
                DistributionSpec::Bernoulli {
                    prob: Expr::add(
                        Expr::Const(0.2),
                        Expr::mul(Expr::node("x1"), Expr::Const(0.6)),
                    ),
                },
            )
            .stochastic(
                "x3",
                &["x2"],
                DistributionSpec::Bernoulli {
                    prob: Expr::add(
                        Expr::Const(0.3),
                        Expr::mul(Expr::node("x2"), Expr::Const(0.4)),
                    ),
                },
            )
            .stochastic(
                "za",
                &["x2", "x3"],
                DistributionSpec::Dirac {
                    value: Expr::Concat(alloc::vec![Expr::node("x2"), Expr::node("x3")]),
                },
            )
            .cost(
                "fa",
                &["za"],
                Expr::mul(
                    Expr::index(Expr::node("za"), 0),
                    Expr::index(Expr::node("za"), 1),
                ),
            )
            .validate()
            .unwrap();
        let net = build_percost_network(&scg, &CostId::from("fa")).unwrap();
        let q2 = net.owned_by(&NodeId::from("x2"))[0];
        let rules: Vec<&QOwner> = net
            .incoming(q2)
            .map(|e| &net.qnodes[e.from].owner)
            .collect();
        assert_eq!(rules.len(), 2, "via the collector and via x3");

        // the collector's Q sits one hop from the root, x3's Q two hops
        let shortest = reduce_to_tree(&net, ReduceStrategy::ShortestPath);
        let q2s = shortest.owned_by(&NodeId::from("x2"))[0];
        let kept: Vec<&QOwner> = shortest
            .incoming(q2s)
            .map(|e| &shortest.qnodes[e.from].owner)
            .collect();
        assert_eq!(kept, [&QOwner::Node(NodeId::from("za"))]);

        let chain = reduce_to_tree(&net, ReduceStrategy::Chain);
        let q2c = chain.owned_by(&NodeId::from("x2"))[0];
        let kept: Vec<&QOwner> = chain
            .incoming(q2c)
            .map(|e| &chain.qnodes[e.from].owner)
            .collect();
        assert_eq!(kept, [&QOwner::Node(NodeId::from("x3"))]);
        chain.check().unwrap();
        shortest.check().unwrap();
    }
}
