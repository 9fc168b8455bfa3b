//! Versioned checkpoint files: parameters plus every Q-function's kind,
//! scope and weights as JSON arrays.

use anyhow::{bail, Context, Result};
use bpq_core::approx::{ApproxKind, QApproximator};
use bpq_core::learn::QMap;
use bpq_core::model::{CostId, NodeId, ParamStore};
use bpq_core::scope::ScopeSet;
use bpq_core::{QKey, ValidatedScg};
use serde_json::{json, Value as Json};

pub const CHECKPOINT_VERSION: u64 = 1;

pub fn checkpoint_json(params: &ParamStore, qs: &QMap) -> Json {
    let qs_json: Vec<Json> = qs
        .iter()
        .map(|(key, q)| {
            let (kind, sizes) = match q.kind() {
                ApproxKind::Tabular { .. } => ("tabular", None),
                ApproxKind::Linear { .. } => ("linear", None),
                ApproxKind::Mlp { sizes, .. } => ("mlp", Some(sizes.clone())),
            };
            let mut obj = json!({
                "owner": key.owner.to_string(),
                "sources": key.sources.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
                "scope": q.scope.members().map(|n| n.to_string()).collect::<Vec<_>>(),
                "kind": kind,
                "weights": q.weights(),
            });
            if let Some(sizes) = sizes {
                obj["sizes"] = json!(sizes);
            }
            obj
        })
        .collect();
    json!({
        "version": CHECKPOINT_VERSION,
        "params": params
            .iter()
            .map(|(k, v)| (k.clone(), json!(v)))
            .collect::<serde_json::Map<String, Json>>(),
        "qs": qs_json,
    })
}

pub fn load_checkpoint(scg: &ValidatedScg, text: &str) -> Result<(ParamStore, QMap)> {
    let doc: Json = serde_json::from_str(text).context("checkpoint is not valid JSON")?;
    let version = doc
        .get("version")
        .and_then(Json::as_u64)
        .context("checkpoint missing version")?;
    if version != CHECKPOINT_VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let mut params = scg.params().clone();
    for (name, values) in doc
        .get("params")
        .and_then(Json::as_object)
        .context("checkpoint missing params")?
    {
        let v: Vec<f64> = values
            .as_array()
            .context("param values must be arrays")?
            .iter()
            .map(|x| x.as_f64().context("param values must be numbers"))
            .collect::<Result<_>>()?;
        if params.get(name).is_none() {
            bail!("checkpoint parameter `{name}` is not in the model");
        }
        params.set(name, v);
    }
    let mut qs = QMap::new();
    for entry in doc
        .get("qs")
        .and_then(Json::as_array)
        .context("checkpoint missing qs")?
    {
        let owner = NodeId::from(
            entry
                .get("owner")
                .and_then(Json::as_str)
                .context("q entry missing owner")?,
        );
        let sources = entry
            .get("sources")
            .and_then(Json::as_array)
            .context("q entry missing sources")?
            .iter()
            .map(|s| Ok(CostId::from(s.as_str().context("sources must be strings")?)))
            .collect::<Result<_>>()?;
        let scope: ScopeSet = entry
            .get("scope")
            .and_then(Json::as_array)
            .context("q entry missing scope")?
            .iter()
            .map(|s| Ok(NodeId::from(s.as_str().context("scope must be strings")?)))
            .collect::<Result<_>>()?;
        let weights: Vec<f64> = entry
            .get("weights")
            .and_then(Json::as_array)
            .context("q entry missing weights")?
            .iter()
            .map(|x| x.as_f64().context("weights must be numbers"))
            .collect::<Result<_>>()?;
        let kind = match entry.get("kind").and_then(Json::as_str) {
            Some("tabular") => ApproxKind::Tabular { table: weights },
            Some("linear") => ApproxKind::Linear { weights },
            Some("mlp") => ApproxKind::Mlp {
                sizes: entry
                    .get("sizes")
                    .and_then(Json::as_array)
                    .context("mlp entry missing sizes")?
                    .iter()
                    .map(|x| Ok(x.as_u64().context("sizes must be integers")? as usize))
                    .collect::<Result<_>>()?,
                weights,
            },
            other => bail!("unknown approximator kind {other:?}"),
        };
        let q = QApproximator::from_parts(scg, &owner, &scope, kind)
            .map_err(|e| anyhow::anyhow!("q entry for `{owner}`: {e}"))?;
        qs.insert(QKey { owner, sources }, q);
    }
    Ok((params, qs))
}
