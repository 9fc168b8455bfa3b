//! Ancestral sampling: one forward pass through the validated graph.
//!
//! Every node is assigned in topological order; log-probabilities, costs
//! and the full adjoint tape are recorded. Identical seeds produce
//! bit-identical traces.
//!
//! Liveness discipline on the tape: parameter references are always live
//! leaves; sampled stochastic values enter log-probabilities and child
//! distribution parameters as detached data. A node marked pathwise or
//! relaxed in the [`SamplePlan`] additionally records a transform whose
//! output is differentiable through its distribution parameters, and may
//! expose that live value to downstream computations.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::dist::{self, DistError, DistParams, DistributionSpec};
use crate::expr::{eval_on_tape, ExprError, TapeBindings, TrackedValue, Value};
use crate::model::{CostId, NodeId, ParamStore, ValidatedScg};
use crate::rng::{NodeStream, RngContext};
use crate::tape::{Tape, TapeId};

/// Per-node sampling mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NodePlan {
    /// Draw and record the value as data.
    Plain,
    /// Continuous pathwise transform. When `through_costs` the live value
    /// is what downstream deterministic nodes and costs consume;
    /// otherwise downstream sees detached data and the live transform is
    /// kept on the side for control-variate paths.
    Pathwise { through_costs: bool },
    /// Discrete node relaxed at a temperature; downstream consumes the
    /// softened value, which is live through the distribution parameters.
    Relaxed { temperature: f64 },
    /// Discrete node with a hard forward value; the relaxed draw is kept
    /// on the side for estimator paths only.
    RelaxedSide { temperature: f64 },
    /// Discrete node with a hard forward value plus a pair of relaxed
    /// draws: one unconditional, one conditioned on the hard outcome.
    RelaxedPair { temperature: f64 },
}

/// Sampling modes per node; nodes default to [`NodePlan::Plain`].
#[derive(Clone, Debug, Default)]
pub struct SamplePlan {
    plans: BTreeMap<NodeId, NodePlan>,
}

impl SamplePlan {
    pub fn plain() -> Self {
        SamplePlan::default()
    }

    pub fn with(mut self, node: &str, plan: NodePlan) -> Self {
        self.plans.insert(NodeId::from(node), plan);
        self
    }

    pub fn set(&mut self, node: NodeId, plan: NodePlan) {
        self.plans.insert(node, plan);
    }

    pub fn get(&self, node: &NodeId) -> NodePlan {
        self.plans.get(node).copied().unwrap_or(NodePlan::Plain)
    }

    fn any_live_downstream(&self) -> bool {
        self.plans.values().any(|p| {
            matches!(
                p,
                NodePlan::Pathwise {
                    through_costs: true
                } | NodePlan::Relaxed { .. }
            )
        })
    }
}

/// The relaxed draws kept for a node sampled under `Relaxed` or
/// `RelaxedPair`.
#[derive(Clone, Debug)]
pub struct RelaxedDraw {
    pub temperature: f64,
    pub hard: Value,
    /// Continuous variable, live through the distribution parameters.
    pub z: TrackedValue,
    /// Softened z.
    pub soft: TrackedValue,
    /// Conditional draw given the hard outcome (RelaxedPair only).
    pub z_post: Option<TrackedValue>,
}

/// One ancestral-sampling forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Downstream-visible values per node (the softened value for
    /// `Relaxed` nodes, the drawn value otherwise).
    pub values: BTreeMap<NodeId, Value>,
    /// Tape ids per coordinate of each downstream-visible value.
    pub value_ids: BTreeMap<NodeId, Vec<TapeId>>,
    /// Log-probability per stochastic node, of the drawn (hard) value.
    pub log_probs: BTreeMap<NodeId, f64>,
    pub log_prob_ids: BTreeMap<NodeId, TapeId>,
    pub cost_values: BTreeMap<CostId, f64>,
    pub cost_ids: BTreeMap<CostId, TapeId>,
    pub total_cost: f64,
    pub tape: Tape,
    /// Raw noise draws per node, present when reparameterized or relaxed.
    pub noise: BTreeMap<NodeId, Vec<f64>>,
    /// Live pathwise transforms for `Pathwise` nodes.
    pub pathwise: BTreeMap<NodeId, TrackedValue>,
    pub relaxed: BTreeMap<NodeId, RelaxedDraw>,
    pub step: u64,
}

impl Trace {
    /// Drawn (hard) value of a node, regardless of plan.
    pub fn hard_value(&self, n: &NodeId) -> Option<&Value> {
        if let Some(r) = self.relaxed.get(n) {
            Some(&r.hard)
        } else {
            self.values.get(n)
        }
    }

    /// Hard values of all stochastic nodes.
    pub fn assignment(&self, scg: &ValidatedScg) -> BTreeMap<NodeId, Value> {
        scg.stochastic_nodes()
            .filter_map(|n| self.hard_value(n).map(|v| (n.clone(), v.clone())))
            .collect()
    }

    /// Sum of cost values reachable from `x`: the actual return at `x`.
    pub fn downstream_cost(&self, scg: &ValidatedScg, x: &NodeId) -> f64 {
        scg.reachable_costs(x)
            .map(|fs| fs.iter().map(|f| self.cost_values[f]).sum())
            .unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleError {
    NumericalError { at: String, detail: String },
    Distribution { node: NodeId, source: DistError },
    Expression { at: String, source: ExprError },
}

impl fmt::Display for SampleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleError::NumericalError { at, detail } => {
                write!(f, "non-finite value at `{at}`: {detail}")
            }
            SampleError::Distribution { node, source } => {
                write!(f, "distribution error at `{node}`: {source}")
            }
            SampleError::Expression { at, source } => {
                write!(f, "expression error at `{at}`: {source}")
            }
        }
    }
}

impl core::error::Error for SampleError {}

/// Where a forward pass gets its randomness. Implementations may replay
/// forced values or noise for enumeration and quadrature.
pub trait DrawSource {
    /// Index draw over a finite mass vector.
    fn discrete(&mut self, node: &NodeId, probs: &[f64]) -> usize;
    /// `n` uniforms on (0, 1) for this node, consumed in order.
    fn uniforms(&mut self, node: &NodeId, n: usize) -> Vec<f64>;
    /// One standard normal for this node.
    fn gaussian_eps(&mut self, node: &NodeId) -> f64;
}

/// Seeded counter streams, one per node.
pub struct RngDraw {
    ctx: RngContext,
    streams: BTreeMap<NodeId, NodeStream>,
}

impl RngDraw {
    pub fn new(ctx: RngContext) -> Self {
        RngDraw {
            ctx,
            streams: BTreeMap::new(),
        }
    }

    fn stream(&mut self, node: &NodeId) -> &mut NodeStream {
        let ctx = self.ctx;
        self.streams
            .entry(node.clone())
            .or_insert_with(|| ctx.stream(node.as_str()))
    }
}

impl DrawSource for RngDraw {
    fn discrete(&mut self, node: &NodeId, probs: &[f64]) -> usize {
        let u = self.stream(node).uniform();
        dist::sample_index(probs, u)
    }

    fn uniforms(&mut self, node: &NodeId, n: usize) -> Vec<f64> {
        let s = self.stream(node);
        (0..n).map(|_| s.uniform()).collect()
    }

    fn gaussian_eps(&mut self, node: &NodeId) -> f64 {
        self.stream(node).gaussian()
    }
}

/// Forced draws for enumeration and quadrature; anything not forced falls
/// back to the seeded streams.
pub struct ForcedDraw {
    /// Forced discrete outcomes (index encoded in the value).
    pub values: BTreeMap<NodeId, Value>,
    /// Forced noise per node: uniforms for relaxed nodes (prior then
    /// posterior), the normal draw for pathwise Gaussians.
    pub noise: BTreeMap<NodeId, Vec<f64>>,
    cursor: BTreeMap<NodeId, usize>,
    fallback: RngDraw,
}

impl ForcedDraw {
    pub fn new(fallback_ctx: RngContext) -> Self {
        ForcedDraw {
            values: BTreeMap::new(),
            noise: BTreeMap::new(),
            cursor: BTreeMap::new(),
            fallback: RngDraw::new(fallback_ctx),
        }
    }

    pub fn force_value(&mut self, node: &str, v: Value) {
        self.values.insert(NodeId::from(node), v);
    }

    pub fn force_values(&mut self, values: BTreeMap<NodeId, Value>) {
        self.values.extend(values);
    }

    pub fn force_noise(&mut self, node: &str, noise: Vec<f64>) {
        self.noise.insert(NodeId::from(node), noise);
    }

    fn take_noise(&mut self, node: &NodeId, n: usize) -> Option<Vec<f64>> {
        let stored = self.noise.get(node)?;
        let cur = self.cursor.entry(node.clone()).or_insert(0);
        if *cur + n > stored.len() {
            return None;
        }
        let out = stored[*cur..*cur + n].to_vec();
        *cur += n;
        Some(out)
    }
}

impl DrawSource for ForcedDraw {
    fn discrete(&mut self, node: &NodeId, probs: &[f64]) -> usize {
        match self.values.get(node).and_then(Value::as_scalar) {
            Some(v) if v == libm::trunc(v) && v >= 0.0 && (v as usize) < probs.len() => v as usize,
            Some(_) => probs.len(), // out of range; caller reports support error
            None => self.fallback.discrete(node, probs),
        }
    }

    fn uniforms(&mut self, node: &NodeId, n: usize) -> Vec<f64> {
        self.take_noise(node, n)
            .unwrap_or_else(|| self.fallback.uniforms(node, n))
    }

    fn gaussian_eps(&mut self, node: &NodeId) -> f64 {
        self.take_noise(node, 1)
            .map(|v| v[0])
            .unwrap_or_else(|| self.fallback.gaussian_eps(node))
    }
}

/// Plain ancestral sampling at the context's (seed, step).
pub fn ancestral_sample(
    scg: &ValidatedScg,
    params: &ParamStore,
    ctx: &RngContext,
) -> Result<Trace, SampleError> {
    ancestral_sample_with(scg, params, ctx, &SamplePlan::plain())
}

/// Ancestral sampling with per-node pathwise/relaxed modes.
pub fn ancestral_sample_with(
    scg: &ValidatedScg,
    params: &ParamStore,
    ctx: &RngContext,
    plan: &SamplePlan,
) -> Result<Trace, SampleError> {
    let mut source = RngDraw::new(*ctx);
    sample_with_source(scg, params, plan, &mut source, ctx.step())
}

/// One draw of a single node's value given its parents' values, under the
/// current parameters. Used by replay updates and sibling expectations.
pub fn sample_node_value(
    scg: &ValidatedScg,
    params: &ParamStore,
    node: &NodeId,
    parent_values: &BTreeMap<NodeId, Value>,
    stream: &mut NodeStream,
) -> Result<Value, SampleError> {
    let spec = scg.spec(node).ok_or_else(|| SampleError::Distribution {
        node: node.clone(),
        source: DistError::InvalidParams(String::from("not a stochastic node")),
    })?;
    let b = crate::expr::Bindings {
        nodes: parent_values,
        params,
    };
    let p = dist::plain_params(spec, &b).map_err(|e| SampleError::Distribution {
        node: node.clone(),
        source: e,
    })?;
    dist::plain_validate(&p).map_err(|e| SampleError::Distribution {
        node: node.clone(),
        source: e,
    })?;
    Ok(dist::plain_sample(&p, stream))
}

/// The forward-pass engine shared by sampling, forced enumeration traces
/// and quadrature.
pub fn sample_with_source(
    scg: &ValidatedScg,
    params: &ParamStore,
    plan: &SamplePlan,
    source: &mut dyn DrawSource,
    step: u64,
) -> Result<Trace, SampleError> {
    let mut tape = Tape::new();
    // Downstream-visible tracked values.
    let mut visible: BTreeMap<NodeId, TrackedValue> = BTreeMap::new();
    // Score-side environment: stochastic values detached, deterministic
    // values recomputed so they carry only direct parameter liveness.
    let needs_score_env = plan.any_live_downstream();
    let mut score_env: BTreeMap<NodeId, TrackedValue> = BTreeMap::new();

    let mut trace_values = BTreeMap::new();
    let mut value_ids = BTreeMap::new();
    let mut log_probs = BTreeMap::new();
    let mut log_prob_ids = BTreeMap::new();
    let mut noise_map = BTreeMap::new();
    let mut pathwise_map = BTreeMap::new();
    let mut relaxed_map = BTreeMap::new();

    for node in scg.topo_order() {
        if let Some(expr) = scg.det_expr(node) {
            let t = {
                let b = TapeBindings {
                    nodes: &visible,
                    params,
                };
                eval_on_tape(expr, &mut tape, &b).map_err(|e| SampleError::Expression {
                    at: node.to_string(),
                    source: e,
                })?
            };
            if !t.value.is_finite() {
                return Err(SampleError::NumericalError {
                    at: node.to_string(),
                    detail: format!("{:?}", t.value),
                });
            }
            if needs_score_env {
                let b = TapeBindings {
                    nodes: &score_env,
                    params,
                };
                let s = eval_on_tape(expr, &mut tape, &b).map_err(|e| SampleError::Expression {
                    at: node.to_string(),
                    source: e,
                })?;
                score_env.insert(node.clone(), s);
            }
            trace_values.insert(node.clone(), t.value.clone());
            value_ids.insert(node.clone(), t.ids.clone());
            visible.insert(node.clone(), t);
            continue;
        }

        let spec = scg.spec(node).expect("topo order covers declared nodes");
        let env = if needs_score_env {
            &score_env
        } else {
            &visible
        };
        let dparams = eval_dist_params(spec, &mut tape, env, params, node)?;
        dist::check_params(spec, &dparams).map_err(|e| wrap_dist(node, e, spec))?;

        let node_plan = plan.get(node);
        let (vis, hard, lp_value): (TrackedValue, Value, Option<Value>) = match (spec, node_plan) {
            (DistributionSpec::Dirac { .. }, _) => {
                let DistParams::Dirac { value } = &dparams else {
                    unreachable!()
                };
                (value.clone(), value.value.clone(), None)
            }
            (_, NodePlan::Plain) => {
                let v = draw_plain(&dparams, node, source).map_err(|e| wrap_dist(node, e, spec))?;
                let t = TrackedValue::from_constants(&mut tape, &v);
                (t, v, None)
            }
            (_, NodePlan::Pathwise { through_costs }) => {
                let eps = source.gaussian_eps(node);
                let t = dist::gaussian_reparam(&mut tape, &dparams, eps)
                    .map_err(|e| wrap_dist(node, e, spec))?;
                noise_map.insert(node.clone(), alloc::vec![eps]);
                pathwise_map.insert(node.clone(), t.clone());
                let vis = if through_costs {
                    t.clone()
                } else {
                    t.detached(&mut tape)
                };
                (vis, t.value.clone(), None)
            }
            (_, NodePlan::Relaxed { temperature }) => {
                let n = dist::relaxed_noise_dim(&dparams).map_err(|e| wrap_dist(node, e, spec))?;
                let us = source.uniforms(node, n);
                let r = dist::relaxed_prior(&mut tape, &dparams, temperature, &us)
                    .map_err(|e| wrap_dist(node, e, spec))?;
                noise_map.insert(node.clone(), us);
                let hard = r.hard.clone();
                relaxed_map.insert(
                    node.clone(),
                    RelaxedDraw {
                        temperature,
                        hard: r.hard.clone(),
                        z: r.z.clone(),
                        soft: r.soft.clone(),
                        z_post: None,
                    },
                );
                (r.soft, hard.clone(), Some(hard))
            }
            (_, NodePlan::RelaxedSide { temperature }) => {
                let n = dist::relaxed_noise_dim(&dparams).map_err(|e| wrap_dist(node, e, spec))?;
                let us = source.uniforms(node, n);
                let r = dist::relaxed_prior(&mut tape, &dparams, temperature, &us)
                    .map_err(|e| wrap_dist(node, e, spec))?;
                noise_map.insert(node.clone(), us);
                let hard = r.hard.clone();
                relaxed_map.insert(
                    node.clone(),
                    RelaxedDraw {
                        temperature,
                        hard: r.hard.clone(),
                        z: r.z,
                        soft: r.soft,
                        z_post: None,
                    },
                );
                let t = TrackedValue::from_constants(&mut tape, &hard);
                (t, hard.clone(), Some(hard))
            }
            (_, NodePlan::RelaxedPair { temperature }) => {
                let n = dist::relaxed_noise_dim(&dparams).map_err(|e| wrap_dist(node, e, spec))?;
                let mut us = source.uniforms(node, n);
                let r = dist::relaxed_prior(&mut tape, &dparams, temperature, &us)
                    .map_err(|e| wrap_dist(node, e, spec))?;
                let vs = source.uniforms(node, n);
                let z_post = dist::relaxed_posterior(&mut tape, &dparams, &r.hard, &vs)
                    .map_err(|e| wrap_dist(node, e, spec))?;
                us.extend(vs);
                noise_map.insert(node.clone(), us);
                let hard = r.hard.clone();
                relaxed_map.insert(
                    node.clone(),
                    RelaxedDraw {
                        temperature,
                        hard: r.hard.clone(),
                        z: r.z,
                        soft: r.soft,
                        z_post: Some(z_post),
                    },
                );
                let t = TrackedValue::from_constants(&mut tape, &hard);
                (t, hard.clone(), Some(hard))
            }
        };

        if !vis.value.is_finite() || !hard.is_finite() {
            return Err(SampleError::NumericalError {
                at: node.to_string(),
                detail: format!("{:?}", vis.value),
            });
        }

        // Log-probability of the drawn (hard) value, differentiable in
        // the distribution parameters only.
        let lp_target = lp_value.as_ref().unwrap_or(&hard);
        let (lp, lp_id) = dist::log_prob_on_tape(&mut tape, &dparams, lp_target)
            .map_err(|e| wrap_dist(node, e, spec))?;
        if !lp.is_finite() {
            return Err(SampleError::NumericalError {
                at: node.to_string(),
                detail: format!("log-probability {lp}"),
            });
        }
        log_probs.insert(node.clone(), lp);
        log_prob_ids.insert(node.clone(), lp_id);

        if needs_score_env {
            // A value that rides a live transform into the costs also
            // stays live inside downstream distribution parameters, so
            // pathwise chains differentiate end to end. Everything else
            // enters downstream conditionals as data.
            let entry = match node_plan {
                NodePlan::Pathwise {
                    through_costs: true,
                }
                | NodePlan::Relaxed { .. } => vis.clone(),
                _ => vis.detached(&mut tape),
            };
            score_env.insert(node.clone(), entry);
        }
        trace_values.insert(node.clone(), vis.value.clone());
        value_ids.insert(node.clone(), vis.ids.clone());
        visible.insert(node.clone(), vis);
    }

    // Costs, on the downstream-visible environment.
    let mut cost_values = BTreeMap::new();
    let mut cost_ids = BTreeMap::new();
    let mut total = 0.0;
    for (f, cost) in scg.costs() {
        let t = {
            let b = TapeBindings {
                nodes: &visible,
                params,
            };
            eval_on_tape(&cost.expr, &mut tape, &b).map_err(|e| SampleError::Expression {
                at: f.to_string(),
                source: e,
            })?
        };
        let v = t
            .value
            .as_scalar()
            .ok_or_else(|| SampleError::NumericalError {
                at: f.to_string(),
                detail: String::from("cost is not scalar"),
            })?;
        if !v.is_finite() {
            return Err(SampleError::NumericalError {
                at: f.to_string(),
                detail: format!("cost {v}"),
            });
        }
        total += v;
        cost_values.insert(f.clone(), v);
        cost_ids.insert(f.clone(), t.ids[0]);
    }

    Ok(Trace {
        values: trace_values,
        value_ids,
        log_probs,
        log_prob_ids,
        cost_values,
        cost_ids,
        total_cost: total,
        tape,
        noise: noise_map,
        pathwise: pathwise_map,
        relaxed: relaxed_map,
        step,
    })
}

fn wrap_dist(node: &NodeId, e: DistError, _spec: &DistributionSpec) -> SampleError {
    SampleError::Distribution {
        node: node.clone(),
        source: e,
    }
}

fn eval_dist_params(
    spec: &DistributionSpec,
    tape: &mut Tape,
    nodes: &BTreeMap<NodeId, TrackedValue>,
    params: &ParamStore,
    node: &NodeId,
) -> Result<DistParams, SampleError> {
    let b = TapeBindings { nodes, params };
    let wrap = |e: ExprError| SampleError::Expression {
        at: node.to_string(),
        source: e,
    };
    Ok(match spec {
        DistributionSpec::Bernoulli { prob } => DistParams::Bernoulli {
            prob: eval_on_tape(prob, tape, &b).map_err(wrap)?,
        },
        DistributionSpec::Categorical { probs, .. } => DistParams::Categorical {
            probs: eval_on_tape(probs, tape, &b).map_err(wrap)?,
        },
        DistributionSpec::Gaussian { mean, scale } => DistParams::Gaussian {
            mean: eval_on_tape(mean, tape, &b).map_err(wrap)?,
            scale: eval_on_tape(scale, tape, &b).map_err(wrap)?,
        },
        DistributionSpec::Dirac { value } => DistParams::Dirac {
            value: eval_on_tape(value, tape, &b).map_err(wrap)?,
        },
    })
}

fn draw_plain(
    dparams: &DistParams,
    node: &NodeId,
    source: &mut dyn DrawSource,
) -> Result<Value, DistError> {
    match dparams.plain() {
        dist::PlainParams::Bernoulli(p) => {
            let idx = source.discrete(node, &[1.0 - p, p]);
            if idx > 1 {
                return Err(DistError::OutOfSupport(format!(
                    "forced value for `{node}` outside bernoulli support"
                )));
            }
            Ok(Value::Scalar(idx as f64))
        }
        dist::PlainParams::Categorical(pv) => {
            let idx = source.discrete(node, &pv);
            if idx >= pv.len() {
                return Err(DistError::OutOfSupport(format!(
                    "forced value for `{node}` outside categorical support"
                )));
            }
            Ok(Value::Scalar(idx as f64))
        }
        dist::PlainParams::Gaussian { mean, scale } => {
            let eps = source.gaussian_eps(node);
            Ok(Value::Scalar(mean + scale * eps))
        }
        dist::PlainParams::Dirac(v) => Ok(v),
    }
}

/// Builds the trace a forward pass would have produced for a fixed joint
/// assignment of the discrete stochastic nodes. The enumeration-based
/// estimator checks use this to weight per-trace quantities exactly.
pub fn trace_for_assignment(
    scg: &ValidatedScg,
    params: &ParamStore,
    assignment: &BTreeMap<NodeId, Value>,
    plan: &SamplePlan,
) -> Result<Trace, SampleError> {
    let mut source = ForcedDraw::new(RngContext::new(0));
    source.force_values(assignment.clone());
    sample_with_source(scg, params, plan, &mut source, 0)
}
