//! Network and model serialization: a JSON description listing Q-nodes,
//! scopes, edges and update patterns, plus DOT text for rendering.

use bpq_core::{BpqNetwork, QOwner, ValidatedScg};
use serde_json::{json, Value as Json};

fn owner_label(owner: &QOwner) -> String {
    match owner {
        QOwner::Node(n) => format!("Q[{n}]"),
        QOwner::Root(f) => format!("cost[{f}]"),
    }
}

pub fn network_json(net: &BpqNetwork) -> Json {
    let qnodes: Vec<Json> = net
        .qnodes
        .iter()
        .map(|q| {
            json!({
                "owner": owner_label(&q.owner),
                "scope": q.scope.members().map(|n| n.to_string()).collect::<Vec<_>>(),
                "cost_sources": q.cost_sources.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
                "is_root": q.is_root,
            })
        })
        .collect();
    let edges: Vec<Json> = net
        .edges
        .iter()
        .map(|e| {
            json!({
                "from": owner_label(&net.qnodes[e.from].owner),
                "to": owner_label(&net.qnodes[e.to].owner),
                "sources": e.sources.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
                "free": e.free.members().map(|n| n.to_string()).collect::<Vec<_>>(),
            })
        })
        .collect();
    // update pattern: per consumer, the groups that average internally
    // and sum across
    let patterns: Vec<Json> = net
        .qnodes
        .iter()
        .enumerate()
        .filter(|(i, q)| !q.is_root && net.incoming(*i).next().is_some())
        .map(|(i, q)| {
            let groups: Vec<Json> = net
                .incoming_groups(i)
                .into_iter()
                .map(|(label, edges)| {
                    json!({
                        "sources": label.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
                        "rule": if edges.len() > 1 { "average" } else { "single" },
                        "inputs": edges
                            .iter()
                            .map(|e| owner_label(&net.qnodes[e.from].owner))
                            .collect::<Vec<_>>(),
                    })
                })
                .collect();
            json!({
                "owner": owner_label(&q.owner),
                "combine": "sum over groups",
                "groups": groups,
            })
        })
        .collect();
    json!({
        "qnodes": qnodes,
        "edges": edges,
        "update_patterns": patterns,
        "dot": network_dot(net),
    })
}

pub fn network_dot(net: &BpqNetwork) -> String {
    let mut out = String::from("digraph bpq {\n  rankdir=LR;\n");
    for (i, q) in net.qnodes.iter().enumerate() {
        let shape = if q.is_root { "box" } else { "ellipse" };
        let label = match &q.owner {
            QOwner::Node(n) => format!("Q[{n}]({})", q.scope),
            QOwner::Root(f) => format!("{f}"),
        };
        out.push_str(&format!(
            "  n{i} [shape={shape}, label=\"{}\"];\n",
            label.replace('"', "'")
        ));
    }
    for e in &net.edges {
        let sources: Vec<String> = e.sources.iter().map(|c| c.to_string()).collect();
        let free: Vec<String> = e.free.members().map(|n| n.to_string()).collect();
        out.push_str(&format!(
            "  n{} -> n{} [label=\"{} | V={{{}}}\"];\n",
            e.from,
            e.to,
            sources.join(","),
            free.join(",")
        ));
    }
    out.push_str("}\n");
    out
}

pub fn model_summary_json(scg: &ValidatedScg) -> Json {
    let nodes: Vec<Json> = scg
        .topo_order()
        .iter()
        .map(|n| {
            let kind = scg
                .spec(n)
                .map(|s| s.kind_name())
                .unwrap_or("deterministic");
            json!({
                "name": n.to_string(),
                "kind": kind,
                "parents": scg.parents(n).iter().map(|p| p.to_string()).collect::<Vec<_>>(),
            })
        })
        .collect();
    let mut scopes = Vec::new();
    for x in scg.stochastic_nodes() {
        for f in scg.costs().keys() {
            if let Ok(sc) = bpq_core::scope::scope(scg, x, f) {
                scopes.push(json!({
                    "node": x.to_string(),
                    "cost": f.to_string(),
                    "scope": sc.members().map(|n| n.to_string()).collect::<Vec<_>>(),
                }));
            }
        }
    }
    json!({
        "topological_order": scg.topo_order().iter().map(|n| n.to_string()).collect::<Vec<_>>(),
        "nodes": nodes,
        "costs": scg.costs().keys().map(|f| f.to_string()).collect::<Vec<_>>(),
        "parameters": scg.params().iter().map(|(k, v)| json!({"name": k, "len": v.len()})).collect::<Vec<_>>(),
        "scopes": scopes,
    })
}
