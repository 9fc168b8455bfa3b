//! Shared fixtures: seeded random graph generation and an independent
//! path-enumeration oracle for frontier checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use bpq_core::dist::DistributionSpec;
use bpq_core::model::{CostId, NodeId, ScgModel, ValidatedScg};
use bpq_core::rng::RngContext;
use bpq_core::Expr;

#[derive(Clone, Debug)]
pub struct GenOpts {
    pub max_stoch: usize,
    pub n_costs: usize,
    /// Give every non-dirac node trainable parameters; otherwise the
    /// conditionals are constant expressions.
    pub parameterized: bool,
    pub allow_categorical: bool,
    pub allow_deterministic: bool,
    /// Allow a cost to sit on a fresh collector over two nodes.
    pub allow_collector_costs: bool,
}

impl Default for GenOpts {
    fn default() -> Self {
        GenOpts {
            max_stoch: 6,
            n_costs: 1,
            parameterized: true,
            allow_categorical: true,
            allow_deterministic: false,
            allow_collector_costs: true,
        }
    }
}

/// Logit expression `t[0] + sum_i t[i+1] * parent_i`.
fn affine_of_parents(param: &str, parents: &[String]) -> Expr {
    let mut e = Expr::index(Expr::param(param), 0);
    for (i, p) in parents.iter().enumerate() {
        e = Expr::add(
            e,
            Expr::mul(Expr::index(Expr::param(param), i + 1), Expr::node(p)),
        );
    }
    e
}

/// Constant-coefficient logit over the parents.
fn const_logit(stream: &mut bpq_core::rng::NodeStream, parents: &[String]) -> Expr {
    let mut e = Expr::Const(stream.uniform() * 2.0 - 1.0);
    for p in parents {
        e = Expr::add(
            e,
            Expr::mul(Expr::Const(stream.uniform() * 2.0 - 1.0), Expr::node(p)),
        );
    }
    e
}

/// Softmax over k affine logits read from one parameter vector laid out
/// as k blocks of (1 + #parents).
fn softmax_logits(param: &str, k: usize, parents: &[String]) -> Expr {
    let block = 1 + parents.len();
    let mut exps = Vec::with_capacity(k);
    for j in 0..k {
        let mut logit = Expr::index(Expr::param(param), j * block);
        for (i, p) in parents.iter().enumerate() {
            logit = Expr::add(
                logit,
                Expr::mul(
                    Expr::index(Expr::param(param), j * block + 1 + i),
                    Expr::node(p),
                ),
            );
        }
        exps.push(Expr::exp(logit));
    }
    let mut total = exps[0].clone();
    for e in exps.iter().skip(1) {
        total = Expr::add(total, e.clone());
    }
    Expr::Concat(
        exps.into_iter()
            .map(|e| Expr::div(e, total.clone()))
            .collect(),
    )
}

/// Seeded random discrete graph. Node values are Bernoulli or ternary
/// categorical; edges go from earlier to later names, so lexicographic
/// order is a valid topological order.
pub fn random_scg(seed: u64, opts: &GenOpts) -> ValidatedScg {
    let ctx = RngContext::new(seed);
    let mut s = ctx.stream("gen");
    let n = 2 + (s.next_u64() as usize) % (opts.max_stoch - 1);
    let names: Vec<String> = (0..n).map(|i| format!("x{i:02}")).collect();

    let mut model = ScgModel::new();
    let mut discrete: Vec<String> = Vec::new();
    for (i, name) in names.iter().enumerate() {
        // pick up to three parents among the earlier nodes
        let mut parents: Vec<String> = Vec::new();
        for cand in names.iter().take(i) {
            if parents.len() < 3 && s.uniform() < 0.45 {
                parents.push(cand.clone());
            }
        }
        let parent_refs: Vec<&str> = parents.iter().map(|p| p.as_str()).collect();
        let categorical = opts.allow_categorical && s.uniform() < 0.25;
        if categorical {
            let k = 3;
            if opts.parameterized {
                let pname = format!("t_{name}");
                let block = 1 + parents.len();
                let init: Vec<f64> = (0..k * block).map(|_| s.uniform() * 0.8 - 0.4).collect();
                model = model.param(&pname, init).stochastic(
                    name,
                    &parent_refs,
                    DistributionSpec::Categorical {
                        k,
                        probs: softmax_logits(&pname, k, &parents),
                    },
                );
            } else {
                // constant normalized masses
                let raw: Vec<f64> = (0..k).map(|_| 0.2 + s.uniform()).collect();
                let total: f64 = raw.iter().sum();
                model = model.stochastic(
                    name,
                    &parent_refs,
                    DistributionSpec::Categorical {
                        k,
                        probs: Expr::Concat(raw.iter().map(|r| Expr::Const(r / total)).collect()),
                    },
                );
            }
        } else if opts.parameterized {
            let pname = format!("t_{name}");
            let init: Vec<f64> = (0..1 + parents.len())
                .map(|_| s.uniform() * 0.8 - 0.4)
                .collect();
            model = model.param(&pname, init).stochastic(
                name,
                &parent_refs,
                DistributionSpec::Bernoulli {
                    prob: Expr::sigmoid(affine_of_parents(&pname, &parents)),
                },
            );
        } else {
            model = model.stochastic(
                name,
                &parent_refs,
                DistributionSpec::Bernoulli {
                    prob: Expr::sigmoid(const_logit(&mut s, &parents)),
                },
            );
        }
        discrete.push(name.clone());
    }

    if opts.allow_deterministic && s.uniform() < 0.6 {
        let src = &names[(s.next_u64() as usize) % names.len()];
        model = model.deterministic(
            "d00",
            &[src],
            Expr::tanh(Expr::mul(Expr::node(src), Expr::Const(1.3))),
        );
    }

    for c in 0..opts.n_costs {
        let fname = format!("f{c}");
        if opts.allow_collector_costs && discrete.len() >= 2 && s.uniform() < 0.4 {
            // multivariate cost through a collector node
            let i = (s.next_u64() as usize) % discrete.len();
            let mut j = (s.next_u64() as usize) % discrete.len();
            if j == i {
                j = (j + 1) % discrete.len();
            }
            let (a, b) = (discrete[i.min(j)].clone(), discrete[i.max(j)].clone());
            let zname = format!("z{c:02}");
            model = model
                .stochastic(
                    &zname,
                    &[&a, &b],
                    DistributionSpec::Dirac {
                        value: Expr::Concat(vec![Expr::node(&a), Expr::node(&b)]),
                    },
                )
                .cost(
                    &fname,
                    &[&zname],
                    Expr::add(
                        Expr::mul(
                            Expr::Const(s.uniform() + 0.2),
                            Expr::mul(
                                Expr::index(Expr::node(&zname), 0),
                                Expr::index(Expr::node(&zname), 1),
                            ),
                        ),
                        Expr::mul(
                            Expr::Const(s.uniform() - 0.5),
                            Expr::index(Expr::node(&zname), 0),
                        ),
                    ),
                );
        } else {
            let target = &discrete[(s.next_u64() as usize) % discrete.len()];
            let w = s.uniform() * 2.0 - 0.5;
            model = model.cost(
                &fname,
                &[target],
                Expr::add(
                    Expr::mul(Expr::Const(w), Expr::node(target)),
                    Expr::Const(s.uniform() * 0.5),
                ),
            );
        }
    }
    model.validate().expect("generated model validates")
}

/// Independent frontier oracle: enumerates every directed path from a
/// node to a cost and keeps the set of stochastic intermediates as a
/// bitmask; a member of V reaches the cost iff one of its paths avoids
/// V entirely.
pub struct PathOracle {
    /// (node, cost) -> unique intermediate masks over stochastic nodes
    masks: BTreeMap<(NodeId, CostId), BTreeSet<u64>>,
    pub stoch_index: BTreeMap<NodeId, usize>,
}

impl PathOracle {
    pub fn build(scg: &ValidatedScg) -> PathOracle {
        let stoch_index: BTreeMap<NodeId, usize> = scg
            .stochastic_nodes()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let mut masks: BTreeMap<(NodeId, CostId), BTreeSet<u64>> = BTreeMap::new();
        for start in scg.stochastic_nodes() {
            for f in scg.costs().keys() {
                let mut acc = BTreeSet::new();
                let mut path_mask = 0u64;
                walk(scg, start, f, &stoch_index, &mut path_mask, &mut acc, true);
                if !acc.is_empty() {
                    masks.insert((start.clone(), f.clone()), acc);
                }
            }
        }
        PathOracle { masks, stoch_index }
    }

    pub fn mask_of(&self, v: &BTreeSet<NodeId>) -> u64 {
        v.iter()
            .filter_map(|n| self.stoch_index.get(n))
            .fold(0u64, |m, &i| m | (1 << i))
    }

    /// Brute-force frontier of `v` toward `f`.
    pub fn frontier(&self, v: &BTreeSet<NodeId>, f: &CostId) -> BTreeSet<NodeId> {
        let vm = self.mask_of(v);
        v.iter()
            .filter(|n| {
                self.masks
                    .get(&((*n).clone(), f.clone()))
                    .map(|ms| ms.iter().any(|m| m & vm == 0))
                    .unwrap_or(false)
            })
            .cloned()
            .collect()
    }

    pub fn reaches(&self, n: &NodeId, f: &CostId) -> bool {
        self.masks.contains_key(&(n.clone(), f.clone()))
    }
}

fn walk(
    scg: &ValidatedScg,
    node: &NodeId,
    f: &CostId,
    stoch_index: &BTreeMap<NodeId, usize>,
    path_mask: &mut u64,
    acc: &mut BTreeSet<u64>,
    first: bool,
) {
    let own_bit = if !first {
        stoch_index.get(node).map(|&i| 1u64 << i).unwrap_or(0)
    } else {
        0
    };
    *path_mask |= own_bit;
    // a path ends as soon as it touches the cost's declared scope
    if scg.costs_on(node).any(|c| c == f) {
        acc.insert(*path_mask);
    }
    for child in scg.children(node) {
        walk(scg, child, f, stoch_index, path_mask, acc, false);
    }
    *path_mask &= !own_bit;
}

/// All subsets of the stochastic node set.
pub fn all_stochastic_subsets(scg: &ValidatedScg) -> Vec<BTreeSet<NodeId>> {
    let nodes: Vec<NodeId> = scg.stochastic_nodes().cloned().collect();
    let mut out = Vec::with_capacity(1 << nodes.len());
    for mask in 0u64..(1 << nodes.len()) {
        out.push(
            nodes
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, n)| n.clone())
                .collect(),
        );
    }
    out
}

/// Fully-connected layered graph with one cost per node; `layers` deep,
/// `width` wide.
pub fn layered_scg(layers: usize, width: usize) -> ValidatedScg {
    let mut model = ScgModel::new();
    let name = |l: usize, i: usize| format!("l{l}n{i}");
    for l in 0..layers {
        for i in 0..width {
            let parents: Vec<String> = if l == 0 {
                Vec::new()
            } else {
                (0..width).map(|j| name(l - 1, j)).collect()
            };
            let parent_refs: Vec<&str> = parents.iter().map(|p| p.as_str()).collect();
            let logit = {
                let mut e = Expr::Const(0.1 * (i as f64 + 1.0));
                for p in &parents {
                    e = Expr::add(e, Expr::mul(Expr::Const(0.4), Expr::node(p)));
                }
                e
            };
            let n = name(l, i);
            model = model.stochastic(
                &n,
                &parent_refs,
                DistributionSpec::Bernoulli {
                    prob: Expr::sigmoid(logit),
                },
            );
            model = model.cost(&format!("f_{n}"), &[&n], Expr::node(&n));
        }
    }
    model.validate().unwrap()
}

/// Exact Q value of a network node on a given full assignment: the sum
/// over the node's cost sources of the conditional expectation given its
/// scope, or the cost value itself at a root.
pub fn exact_q_value(
    scg: &ValidatedScg,
    net: &bpq_core::BpqNetwork,
    idx: usize,
    values: &BTreeMap<NodeId, bpq_core::Value>,
) -> f64 {
    use bpq_core::QOwner;
    let qnode = &net.qnodes[idx];
    match &qnode.owner {
        QOwner::Root(f) => {
            let cost = scg.cost(f).unwrap();
            bpq_core::expr::eval_value(
                &cost.expr,
                &bpq_core::expr::Bindings {
                    nodes: values,
                    params: scg.params(),
                },
            )
            .unwrap()
            .as_scalar()
            .unwrap()
        }
        QOwner::Node(_) => {
            let cond: BTreeMap<NodeId, bpq_core::Value> = qnode
                .scope
                .members()
                .map(|n| (n.clone(), values[n].clone()))
                .collect();
            qnode
                .cost_sources
                .iter()
                .map(|f| bpq_core::oracle::exact_q(scg, scg.params(), &cond, f).unwrap())
                .sum()
        }
    }
}

/// Expected group-combined update target of a network node under exact
/// Q values, by enumeration.
pub fn expected_update_target(scg: &ValidatedScg, net: &bpq_core::BpqNetwork, idx: usize) -> f64 {
    let e = bpq_core::oracle::enumerate_traces(scg, scg.params()).unwrap();
    let mut acc = 0.0;
    for (assignment, prob) in &e.assignments {
        if *prob == 0.0 {
            continue;
        }
        // recompute deterministic values for the full map
        let full = full_values(scg, assignment);
        let mut target = 0.0;
        for (_, edges) in net.incoming_groups(idx) {
            let sum: f64 = edges
                .iter()
                .map(|ed| exact_q_value(scg, net, ed.from, &full))
                .sum();
            target += sum / edges.len() as f64;
        }
        acc += prob * target;
    }
    acc
}

/// Assignment extended with deterministic node values.
pub fn full_values(
    scg: &ValidatedScg,
    assignment: &BTreeMap<NodeId, bpq_core::Value>,
) -> BTreeMap<NodeId, bpq_core::Value> {
    let mut values = assignment.clone();
    for n in scg.topo_order() {
        if let Some(expr) = scg.det_expr(n) {
            let v = bpq_core::expr::eval_value(
                expr,
                &bpq_core::expr::Bindings {
                    nodes: &values,
                    params: scg.params(),
                },
            )
            .unwrap();
            values.insert(n.clone(), v);
        }
    }
    values
}
