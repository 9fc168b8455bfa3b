//! Model file parsing: a JSON document with top-level keys `nodes`,
//! `edges`, `costs`, `params`, `tied` and an optional `estimators`
//! section. Schema violations report the offending path.

use std::collections::BTreeMap;
use std::fmt;

use bpq_core::dist::DistributionSpec;
use bpq_core::estimators::{BaselineKind, EstimatorConfig, Family, NodeEstimator, SignalSource};
use bpq_core::model::{ParamDomain, ScgModel};
use bpq_core::Expr;
use serde_json::Value as Json;

#[derive(Debug)]
pub enum ModelFileError {
    /// Malformed JSON; carries serde's line/column diagnostics.
    Parse(serde_json::Error),
    /// Well-formed JSON that violates the schema, with the field path.
    Schema { path: String, reason: String },
}

impl fmt::Display for ModelFileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelFileError::Parse(e) => write!(f, "parse error: {e}"),
            ModelFileError::Schema { path, reason } => {
                write!(f, "schema error at `{path}`: {reason}")
            }
        }
    }
}

impl std::error::Error for ModelFileError {}

fn schema(path: &str, reason: impl Into<String>) -> ModelFileError {
    ModelFileError::Schema {
        path: path.to_string(),
        reason: reason.into(),
    }
}

pub struct ParsedModel {
    pub model: ScgModel,
    pub estimators: Option<EstimatorConfig>,
}

pub fn parse_model_str(text: &str) -> Result<ParsedModel, ModelFileError> {
    let doc: Json = serde_json::from_str(text).map_err(ModelFileError::Parse)?;
    let obj = doc
        .as_object()
        .ok_or_else(|| schema("$", "document must be an object"))?;
    for key in ["nodes", "edges", "costs", "params", "tied"] {
        if !obj.contains_key(key) {
            return Err(schema("$", format!("missing required key `{key}`")));
        }
    }
    for key in obj.keys() {
        if !matches!(
            key.as_str(),
            "nodes" | "edges" | "costs" | "params" | "tied" | "estimators"
        ) {
            return Err(schema("$", format!("unknown key `{key}`")));
        }
    }

    let mut model = ScgModel::new();

    // params first: expressions may reference them
    let params = obj["params"]
        .as_object()
        .ok_or_else(|| schema("params", "must be an object"))?;
    for (name, spec) in params {
        let path = format!("params.{name}");
        let spec = spec
            .as_object()
            .ok_or_else(|| schema(&path, "must be an object with `init`"))?;
        let init = spec
            .get("init")
            .ok_or_else(|| schema(&path, "missing `init`"))?
            .as_array()
            .ok_or_else(|| schema(&path, "`init` must be an array of numbers"))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| schema(&path, "`init` must contain numbers"))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let domain = match spec.get("domain").and_then(Json::as_str) {
            None | Some("free") => ParamDomain::Free,
            Some("prob") => ParamDomain::UnitInterval,
            Some("simplex") => ParamDomain::Simplex,
            Some(other) => {
                return Err(schema(
                    &path,
                    format!("unknown domain `{other}` (free | prob | simplex)"),
                ))
            }
        };
        for key in spec.keys() {
            if !matches!(key.as_str(), "init" | "domain") {
                return Err(schema(&path, format!("unknown key `{key}`")));
            }
        }
        model = model.param_in(name, init, domain);
    }

    // edges: parent lists per child
    let mut parents: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let edges = obj["edges"]
        .as_array()
        .ok_or_else(|| schema("edges", "must be an array of [parent, child] pairs"))?;
    for (i, e) in edges.iter().enumerate() {
        let path = format!("edges[{i}]");
        let pair = e
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| schema(&path, "must be a [parent, child] pair"))?;
        let parent = pair[0]
            .as_str()
            .ok_or_else(|| schema(&path, "parent must be a string"))?;
        let child = pair[1]
            .as_str()
            .ok_or_else(|| schema(&path, "child must be a string"))?;
        parents
            .entry(child.to_string())
            .or_default()
            .push(parent.to_string());
    }

    let nodes = obj["nodes"]
        .as_array()
        .ok_or_else(|| schema("nodes", "must be an array"))?;
    let mut seen = std::collections::BTreeSet::new();
    for (i, node) in nodes.iter().enumerate() {
        let path = format!("nodes[{i}]");
        let node = node
            .as_object()
            .ok_or_else(|| schema(&path, "must be an object"))?;
        let name = node
            .get("name")
            .and_then(Json::as_str)
            .ok_or_else(|| schema(&path, "missing string `name`"))?;
        if !seen.insert(name.to_string()) {
            return Err(schema(&path, format!("duplicate node name `{name}`")));
        }
        let kind = node
            .get("kind")
            .and_then(Json::as_str)
            .ok_or_else(|| schema(&path, "missing string `kind`"))?;
        let node_parents: Vec<&str> = parents
            .get(name)
            .map(|v| v.iter().map(String::as_str).collect())
            .unwrap_or_default();
        let field = |key: &str| -> Result<Expr, ModelFileError> {
            let v = node
                .get(key)
                .ok_or_else(|| schema(&path, format!("kind `{kind}` needs `{key}`")))?;
            parse_expr(v, &format!("{path}.{key}"))
        };
        match kind {
            "bernoulli" => {
                model = model.stochastic(
                    name,
                    &node_parents,
                    DistributionSpec::Bernoulli { prob: field("prob")? },
                );
            }
            "categorical" => {
                let k = node
                    .get("k")
                    .and_then(Json::as_u64)
                    .ok_or_else(|| schema(&path, "categorical needs integer `k`"))?
                    as usize;
                model = model.stochastic(
                    name,
                    &node_parents,
                    DistributionSpec::Categorical {
                        k,
                        probs: field("probs")?,
                    },
                );
            }
            "gaussian" => {
                model = model.stochastic(
                    name,
                    &node_parents,
                    DistributionSpec::Gaussian {
                        mean: field("mean")?,
                        scale: field("scale")?,
                    },
                );
            }
            "dirac" => {
                model = model.stochastic(
                    name,
                    &node_parents,
                    DistributionSpec::Dirac { value: field("value")? },
                );
            }
            "deterministic" => {
                model = model.deterministic(name, &node_parents, field("expr")?);
            }
            other => {
                return Err(schema(
                    &path,
                    format!("unknown kind `{other}` (bernoulli | categorical | gaussian | dirac | deterministic)"),
                ))
            }
        }
    }

    let costs = obj["costs"]
        .as_array()
        .ok_or_else(|| schema("costs", "must be an array"))?;
    for (i, cost) in costs.iter().enumerate() {
        let path = format!("costs[{i}]");
        let cost = cost
            .as_object()
            .ok_or_else(|| schema(&path, "must be an object"))?;
        let name = cost
            .get("name")
            .and_then(Json::as_str)
            .ok_or_else(|| schema(&path, "missing string `name`"))?;
        if !seen.insert(name.to_string()) {
            return Err(schema(&path, format!("duplicate name `{name}`")));
        }
        let scope: Vec<&str> = cost
            .get("scope")
            .and_then(Json::as_array)
            .ok_or_else(|| schema(&path, "missing array `scope`"))?
            .iter()
            .map(|v| {
                v.as_str()
                    .ok_or_else(|| schema(&path, "`scope` must contain strings"))
            })
            .collect::<Result<_, _>>()?;
        let expr = parse_expr(
            cost.get("expr")
                .ok_or_else(|| schema(&path, "missing `expr`"))?,
            &format!("{path}.expr"),
        )?;
        model = model.cost(name, &scope, expr);
    }

    let tied = obj["tied"]
        .as_array()
        .ok_or_else(|| schema("tied", "must be an array of name groups"))?;
    for (i, group) in tied.iter().enumerate() {
        let path = format!("tied[{i}]");
        let names: Vec<&str> = group
            .as_array()
            .ok_or_else(|| schema(&path, "must be an array of parameter names"))?
            .iter()
            .map(|v| {
                v.as_str()
                    .ok_or_else(|| schema(&path, "group members must be strings"))
            })
            .collect::<Result<_, _>>()?;
        model = model.tie(&names);
    }

    let estimators = match obj.get("estimators") {
        None => None,
        Some(section) => Some(parse_estimators(section)?),
    };

    Ok(ParsedModel { model, estimators })
}

fn parse_expr(v: &Json, path: &str) -> Result<Expr, ModelFileError> {
    if let Some(n) = v.as_f64() {
        return Ok(Expr::Const(n));
    }
    let obj = v
        .as_object()
        .ok_or_else(|| schema(path, "expected an expression object or number"))?;
    if obj.len() != 1 {
        return Err(schema(path, "expression objects have exactly one key"));
    }
    let (op, arg) = obj.iter().next().expect("len checked");
    let sub = |i: usize| format!("{path}.{op}[{i}]");
    let two = |arg: &Json| -> Result<(Expr, Expr), ModelFileError> {
        let a = arg
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| schema(path, format!("`{op}` takes exactly two operands")))?;
        Ok((parse_expr(&a[0], &sub(0))?, parse_expr(&a[1], &sub(1))?))
    };
    Ok(match op.as_str() {
        "const" => Expr::Const(
            arg.as_f64()
                .ok_or_else(|| schema(path, "`const` takes a number"))?,
        ),
        "node" => Expr::node(
            arg.as_str()
                .ok_or_else(|| schema(path, "`node` takes a name"))?,
        ),
        "param" => Expr::param(
            arg.as_str()
                .ok_or_else(|| schema(path, "`param` takes a name"))?,
        ),
        "add" => {
            let (a, b) = two(arg)?;
            Expr::add(a, b)
        }
        "sub" => {
            let (a, b) = two(arg)?;
            Expr::sub(a, b)
        }
        "mul" => {
            let (a, b) = two(arg)?;
            Expr::mul(a, b)
        }
        "div" => {
            let (a, b) = two(arg)?;
            Expr::div(a, b)
        }
        "neg" => Expr::neg(parse_expr(arg, &sub(0))?),
        "exp" => Expr::exp(parse_expr(arg, &sub(0))?),
        "ln" => Expr::ln(parse_expr(arg, &sub(0))?),
        "tanh" => Expr::tanh(parse_expr(arg, &sub(0))?),
        "sigmoid" => Expr::sigmoid(parse_expr(arg, &sub(0))?),
        "affine" => {
            let o = arg
                .as_object()
                .ok_or_else(|| schema(path, "`affine` takes {weights, input, bias}"))?;
            let get = |k: &str| -> Result<Expr, ModelFileError> {
                parse_expr(
                    o.get(k)
                        .ok_or_else(|| schema(path, format!("`affine` missing `{k}`")))?,
                    &format!("{path}.affine.{k}"),
                )
            };
            Expr::Affine {
                weights: Box::new(get("weights")?),
                input: Box::new(get("input")?),
                bias: Box::new(get("bias")?),
            }
        }
        "concat" => {
            let items = arg
                .as_array()
                .ok_or_else(|| schema(path, "`concat` takes an array"))?;
            Expr::Concat(
                items
                    .iter()
                    .enumerate()
                    .map(|(i, e)| parse_expr(e, &sub(i)))
                    .collect::<Result<_, _>>()?,
            )
        }
        "index" => {
            let a = arg
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| schema(path, "`index` takes [expr, i]"))?;
            let i = a[1]
                .as_u64()
                .ok_or_else(|| schema(path, "`index` position must be an integer"))?;
            Expr::index(parse_expr(&a[0], &sub(0))?, i as usize)
        }
        "clip" => {
            let a = arg
                .as_array()
                .filter(|a| a.len() == 3)
                .ok_or_else(|| schema(path, "`clip` takes [expr, lo, hi]"))?;
            let lo = a[1]
                .as_f64()
                .ok_or_else(|| schema(path, "clip bounds must be numbers"))?;
            let hi = a[2]
                .as_f64()
                .ok_or_else(|| schema(path, "clip bounds must be numbers"))?;
            Expr::clip(parse_expr(&a[0], &sub(0))?, lo, hi)
        }
        "softmax_param" => {
            let a = arg
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| schema(path, "`softmax_param` takes [name, k]"))?;
            let name = a[0]
                .as_str()
                .ok_or_else(|| schema(path, "`softmax_param` name must be a string"))?;
            let k = a[1]
                .as_u64()
                .ok_or_else(|| schema(path, "`softmax_param` k must be an integer"))?;
            bpq_core::expr::softmax_of_param(name, k as usize)
        }
        other => return Err(schema(path, format!("unknown operation `{other}`"))),
    })
}

fn parse_estimators(section: &Json) -> Result<EstimatorConfig, ModelFileError> {
    let obj = section
        .as_object()
        .ok_or_else(|| schema("estimators", "must be an object"))?;
    let mut config = EstimatorConfig::default();
    for (name, spec) in obj {
        let est = parse_node_estimator(spec, &format!("estimators.{name}"))?;
        if name == "default" {
            config.default = est;
        } else {
            config
                .nodes
                .insert(bpq_core::NodeId::from(name.as_str()), est);
        }
    }
    Ok(config)
}

fn parse_node_estimator(spec: &Json, path: &str) -> Result<NodeEstimator, ModelFileError> {
    let obj = spec
        .as_object()
        .ok_or_else(|| schema(path, "must be an object"))?;
    let fname = obj
        .get("family")
        .and_then(Json::as_str)
        .ok_or_else(|| schema(path, "missing string `family`"))?;
    let get_f64 = |k: &str, default: f64| -> Result<f64, ModelFileError> {
        match obj.get(k) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| schema(path, format!("`{k}` must be a number"))),
        }
    };
    let family = match fname {
        "reinforce" => Family::Reinforce,
        "baseline_cv" => match obj.get("c") {
            Some(Json::String(s)) if s == "mean" => Family::BaselineCv(BaselineKind::RunningMean),
            Some(v) => Family::BaselineCv(BaselineKind::Constant(
                v.as_f64()
                    .ok_or_else(|| schema(path, "`c` must be a number or \"mean\""))?,
            )),
            None => Family::BaselineCv(BaselineKind::RunningMean),
        },
        "taylor_cv" => Family::TaylorCv,
        "reparam" => Family::Reparam,
        "relaxed_reparam" => Family::RelaxedReparam {
            temperature: get_f64("temperature", 0.5)?,
        },
        "cv_reparam" => Family::CvReparam,
        "cv_reparam_relaxed" => Family::CvReparamRelaxed {
            temperature: get_f64("temperature", 0.5)?,
        },
        "q_control_variate" => Family::QControlVariate {
            scale: get_f64("a", 1.0)?,
            baseline: get_f64("b", 0.0)?,
        },
        other => return Err(schema(path, format!("unknown family `{other}`"))),
    };
    let signal = match obj.get("signal").and_then(Json::as_str) {
        None | Some("learned_q") => SignalSource::LearnedQ,
        Some("actual_return") => SignalSource::ActualReturn,
        Some(other) => {
            return Err(schema(
                path,
                format!("unknown signal `{other}` (learned_q | actual_return)"),
            ))
        }
    };
    Ok(NodeEstimator { family, signal })
}

/// Parses one `--estimator` override: `node=family[:key=val,...]` where
/// node may be `default`.
pub fn parse_estimator_flag(s: &str) -> Result<(Option<String>, NodeEstimator), ModelFileError> {
    let (node, rest) = s
        .split_once('=')
        .ok_or_else(|| schema("--estimator", "expected node=family[:key=val,...]"))?;
    let (family, kvs) = match rest.split_once(':') {
        Some((f, kv)) => (f, kv),
        None => (rest, ""),
    };
    let mut obj = serde_json::Map::new();
    obj.insert("family".into(), Json::String(family.to_string()));
    for kv in kvs.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| schema("--estimator", format!("bad key=val `{kv}`")))?;
        let value = v
            .parse::<f64>()
            .map(|n| Json::Number(serde_json::Number::from_f64(n).expect("finite")))
            .unwrap_or_else(|_| Json::String(v.to_string()));
        obj.insert(k.to_string(), value);
    }
    let est = parse_node_estimator(&Json::Object(obj), "--estimator")?;
    let node = if node == "default" {
        None
    } else {
        Some(node.to_string())
    };
    Ok((node, est))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHAIN: &str = r#"{
        "nodes": [
            {"name": "x1", "kind": "bernoulli", "prob": {"sigmoid": {"param": "t1"}}},
            {"name": "x2", "kind": "bernoulli",
             "prob": {"add": [0.1, {"mul": [{"node": "x1"}, 0.8]}]}}
        ],
        "edges": [["x1", "x2"]],
        "costs": [{"name": "f", "scope": ["x2"], "expr": {"node": "x2"}}],
        "params": {"t1": {"init": [0.0]}},
        "tied": []
    }"#;

    #[test]
    fn chain_round_trip() {
        let parsed = parse_model_str(CHAIN).unwrap();
        let scg = parsed.model.validate().unwrap();
        assert_eq!(scg.stochastic_nodes().count(), 2);
        assert_eq!(scg.costs().len(), 1);
    }

    #[test]
    fn missing_costs_key_names_the_key() {
        let bad = CHAIN.replace("\"costs\"", "\"cost\"");
        let Err(err) = parse_model_str(&bad) else {
            panic!("expected a schema error")
        };
        let msg = format!("{err}");
        assert!(msg.contains("costs"), "{msg}");
    }

    #[test]
    fn duplicate_node_name_rejected() {
        let dup = CHAIN.replace("\"name\": \"x2\"", "\"name\": \"x1\"");
        let Err(err) = parse_model_str(&dup) else {
            panic!("expected a schema error")
        };
        assert!(format!("{err}").contains("duplicate"), "{err}");
    }

    #[test]
    fn estimator_flag_parsing() {
        let (node, est) = parse_estimator_flag("x1=q_control_variate:a=0.9,b=0.1").unwrap();
        assert_eq!(node.as_deref(), Some("x1"));
        assert!(matches!(
            est.family,
            Family::QControlVariate { scale, baseline } if scale == 0.9 && baseline == 0.1
        ));
        let (node, est) =
            parse_estimator_flag("default=baseline_cv:c=mean,signal=actual_return").unwrap();
        assert!(node.is_none());
        assert!(matches!(
            est.family,
            Family::BaselineCv(BaselineKind::RunningMean)
        ));
        assert_eq!(est.signal, SignalSource::ActualReturn);
    }
}
