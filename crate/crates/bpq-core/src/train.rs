//! The outer training loop: forward sampling, critic updates in network
//! order, surrogate construction, one parameter step per iteration.
//! Fully deterministic given the seed.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::approx::{QApproximator, QError};
use crate::estimators::{
    build_surrogate, resolve_signal, BaselineKind, EstimatorConfig, EstimatorError, Family,
};
use crate::expr::Value;
use crate::learn::{
    apply_lambda_updates, replay_update, LearnError, QMap, ReplayBuffer, TupleLayout,
};
use crate::model::{NodeId, ParamDomain, ParamStore, ValidatedScg};
use crate::network::{BpqNetwork, QKey};
use crate::oracle::{self, OracleError};
use crate::rng::RngContext;
use crate::sample::{ancestral_sample_with, SampleError};
use crate::scope::ScopeSet;
use crate::tape::GradMap;

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    Config(String),
    NonFiniteGradient(String),
    NonFiniteParam(String),
    Estimator(Box<EstimatorError>),
    Learn(Box<LearnError>),
    Sample(Box<SampleError>),
    Oracle(Box<OracleError>),
    Approx(Box<QError>),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(s) => write!(f, "bad configuration: {s}"),
            TrainError::NonFiniteGradient(s) => write!(f, "non-finite gradient for `{s}`"),
            TrainError::NonFiniteParam(s) => write!(f, "non-finite parameter `{s}` after step"),
            TrainError::Estimator(e) => write!(f, "{e}"),
            TrainError::Learn(e) => write!(f, "{e}"),
            TrainError::Sample(e) => write!(f, "{e}"),
            TrainError::Oracle(e) => write!(f, "{e}"),
            TrainError::Approx(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<EstimatorError> for TrainError {
    fn from(e: EstimatorError) -> Self {
        TrainError::Estimator(Box::new(e))
    }
}

impl From<LearnError> for TrainError {
    fn from(e: LearnError) -> Self {
        TrainError::Learn(Box::new(e))
    }
}

impl From<SampleError> for TrainError {
    fn from(e: SampleError) -> Self {
        TrainError::Sample(Box::new(e))
    }
}

impl From<OracleError> for TrainError {
    fn from(e: OracleError) -> Self {
        TrainError::Oracle(Box::new(e))
    }
}

impl From<QError> for TrainError {
    fn from(e: QError) -> Self {
        TrainError::Approx(Box::new(e))
    }
}

/// How the critics learn each iteration.
#[derive(Clone, Debug, PartialEq)]
pub enum CriticMode {
    /// Synchronous λ-return sweep on the fresh trace.
    LambdaReturn,
    /// Graph-based experience replay: store tuples from the fresh trace,
    /// then update each Q from uniform resamples.
    Replay {
        capacity: usize,
        /// Fresh child draws per stored tuple.
        resamples: usize,
        /// Buffer updates per Q-node per iteration.
        updates_per_iter: usize,
    },
    /// Refresh tabular critics with exact conditional expectations each
    /// iteration (enumerable graphs; reference configuration).
    OracleExact,
    /// No critic learning (actual-return estimators only).
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Critic step size.
    pub alpha_q: f64,
    /// Parameter step size.
    pub alpha_theta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub estimators: EstimatorConfig,
    pub critic: CriticMode,
    /// Slow-tracking rate for target Q parameters; None disables.
    pub target_track: Option<f64>,
    pub seed: u64,
    /// Iterations during which only the critics update.
    pub warmup: usize,
    /// Metrics cadence.
    pub log_every: usize,
    /// Cadence for exact-cost evaluation on enumerable graphs.
    pub eval_exact_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            alpha_q: 0.1,
            alpha_theta: 0.01,
            lambda: 0.9,
            gamma: 1.0,
            estimators: EstimatorConfig::default(),
            critic: CriticMode::LambdaReturn,
            target_track: None,
            seed: 0,
            warmup: 500,
            log_every: 100,
            eval_exact_every: None,
        }
    }
}

/// One metrics row; append-only with a monotone iteration index.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub total_cost: f64,
    /// Absolute TD error per Q-function, from the latest critic sweep.
    pub td_abs: BTreeMap<String, f64>,
    /// L2 gradient norm per parameter.
    pub grad_norms: BTreeMap<String, f64>,
    /// Exact expected cost, when evaluated this iteration.
    pub exact_cost: Option<f64>,
}

/// Approximator kind selection for [`init_qs`].
#[derive(Clone, Debug, PartialEq)]
pub enum QKind {
    Tabular,
    Linear,
    Mlp(Vec<usize>),
}

/// One approximator per non-root Q-node of the network, keyed by owner
/// and cost group. Tabular and linear weights start at zero; MLP weights
/// draw from the seeded stream of the node's key.
pub fn init_qs(
    scg: &ValidatedScg,
    net: &BpqNetwork,
    kind: &QKind,
    seed: u64,
) -> Result<QMap, QError> {
    let ctx = RngContext::new(seed);
    let mut out = QMap::new();
    for q in &net.qnodes {
        let Some(key) = q.key() else { continue };
        let approx = match kind {
            QKind::Tabular => QApproximator::tabular(scg, &key.owner, &q.scope)?,
            QKind::Linear => QApproximator::linear(scg, &key.owner, &q.scope)?,
            QKind::Mlp(hidden) => {
                let mut stream = ctx.stream(&format!("init:{key}"));
                QApproximator::mlp(scg, &key.owner, &q.scope, hidden, &mut stream)?
            }
        };
        out.insert(key, approx);
    }
    Ok(out)
}

/// One gradient-descent step with projection: probability-domain
/// parameters clip into [1e-4, 1 - 1e-4] (simplex domains renormalize),
/// and tied groups move identically by their summed gradient.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &GradMap,
    alpha: f64,
    tied: &[BTreeSet<String>],
) -> Result<(), TrainError> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    // Tied groups: apply the summed gradient to every member.
    let mut effective: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for group in tied {
        let mut sum: Option<Vec<f64>> = None;
        for name in group {
            if let Some(g) = grads.get(name) {
                match &mut sum {
                    None => sum = Some(g.clone()),
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                }
            }
        }
        if let Some(sum) = sum {
            for name in group {
                effective.insert(name.clone(), sum.clone());
            }
        }
    }
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = effective.get(&name).or_else(|| grads.get(&name));
        let Some(g) = g else { continue };
        let domain = params.domain(&name);
        let v = params.get_mut(&name).expect("iterated");
        for (x, gi) in v.iter_mut().zip(g) {
            *x -= alpha * gi;
        }
        match domain {
            ParamDomain::Free => {}
            ParamDomain::UnitInterval => {
                for x in v.iter_mut() {
                    *x = x.clamp(1e-4, 1.0 - 1e-4);
                }
            }
            ParamDomain::Simplex => {
                let mut total = 0.0;
                for x in v.iter_mut() {
                    *x = x.max(1e-4);
                    total += *x;
                }
                for x in v.iter_mut() {
                    *x /= total;
                }
            }
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteParam(name));
        }
    }
    Ok(())
}

/// All joint value assignments of a scope (discrete members only).
pub fn enumerate_scope_assignments(
    scg: &ValidatedScg,
    scope: &ScopeSet,
) -> Result<Vec<BTreeMap<NodeId, Value>>, QError> {
    let mut per_member: Vec<(NodeId, Vec<Value>)> = Vec::new();
    for n in scope.members() {
        let layout = scg
            .value_layout(n)
            .ok_or_else(|| QError::UnsupportedScopeMember { node: n.clone() })?;
        let mut values: Vec<Vec<f64>> = alloc::vec![Vec::new()];
        for coord in &layout {
            let k = coord.ok_or_else(|| QError::NotTabular { node: n.clone() })?;
            let mut next = Vec::new();
            for prefix in &values {
                for digit in 0..k {
                    let mut v = prefix.clone();
                    v.push(digit as f64);
                    next.push(v);
                }
            }
            values = next;
        }
        let vals: Vec<Value> = values
            .into_iter()
            .map(|coords| {
                if layout.len() == 1 {
                    Value::Scalar(coords[0])
                } else {
                    Value::Vector(coords)
                }
            })
            .collect();
        per_member.push((n.clone(), vals));
    }
    let mut out: Vec<BTreeMap<NodeId, Value>> = alloc::vec![BTreeMap::new()];
    for (n, vals) in per_member {
        let mut next = Vec::with_capacity(out.len() * vals.len());
        for a in &out {
            for v in &vals {
                let mut b = a.clone();
                b.insert(n.clone(), v.clone());
                next.push(b);
            }
        }
        out = next;
    }
    Ok(out)
}

/// Overwrites every tabular critic with exact conditional expectations
/// under the current parameters; unreachable cells keep their value.
pub fn refresh_qs_from_oracle(
    scg: &ValidatedScg,
    net: &BpqNetwork,
    qs: &mut QMap,
    params: &ParamStore,
) -> Result<(), TrainError> {
    for q in &net.qnodes {
        let Some(key) = q.key() else { continue };
        let Some(approx) = qs.get_mut(&key) else {
            continue;
        };
        let assignments = enumerate_scope_assignments(scg, &q.scope)?;
        for a in assignments {
            let mut total = 0.0;
            let mut ok = true;
            for f in &key.sources {
                match oracle::exact_q(scg, params, &a, f) {
                    Ok(v) => total += v,
                    Err(OracleError::ZeroProbabilityCondition) => {
                        ok = false;
                        break;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if !ok {
                continue;
            }
            let idx = approx.schema().table_index(&a)?;
            approx.weights_mut()[idx] = total;
        }
    }
    Ok(())
}

/// Runs the training loop and returns the final parameters. Each
/// iteration: one ancestral-sampling forward pass, critic updates in
/// network order, then (after warmup) a surrogate build, backward sweep
/// and one parameter step. Metrics stream through `sink`.
pub fn train(
    scg: &ValidatedScg,
    net: &BpqNetwork,
    qs: &mut QMap,
    config: &TrainConfig,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<ParamStore, TrainError> {
    if config.iterations == 0 {
        return Err(TrainError::Config("iterations must be >= 1".to_string()));
    }
    if !(config.alpha_q > 0.0) || !(config.alpha_theta > 0.0) {
        return Err(TrainError::Config(
            "step sizes must be positive".to_string(),
        ));
    }
    if !(0.0..=1.0).contains(&config.lambda) || !(config.gamma > 0.0) {
        return Err(TrainError::Config(
            "lambda must lie in [0, 1] and gamma must be positive".to_string(),
        ));
    }
    let mut params = scg.params().clone();
    let plan = config.estimators.sample_plan(scg);
    let base = RngContext::new(config.seed);

    // Replay state.
    let mut buffers: BTreeMap<QKey, (usize, ReplayBuffer)> = BTreeMap::new();
    if let CriticMode::Replay { capacity, .. } = &config.critic {
        for (idx, q) in net.qnodes.iter().enumerate() {
            if q.key().is_some() {
                let layout = TupleLayout::for_qnode(scg, net, idx)?;
                buffers.insert(
                    layout.key.clone(),
                    (idx, ReplayBuffer::new(layout, *capacity)),
                );
            }
        }
    }

    // Target-network state per critic, when slow tracking is on.
    let mut targets: BTreeMap<QKey, crate::learn::TargetNetworkState> = BTreeMap::new();
    if config.target_track.is_some() {
        for (key, q) in qs.iter() {
            targets.insert(
                key.clone(),
                crate::learn::TargetNetworkState::new(q.weights().to_vec()),
            );
        }
    }

    // Running means for baseline estimators.
    let needs_means: Vec<NodeId> = scg
        .stochastic_nodes()
        .filter(|n| {
            matches!(
                config.estimators.for_node(n).family,
                Family::BaselineCv(BaselineKind::RunningMean)
            )
        })
        .cloned()
        .collect();
    let mut running_means: BTreeMap<NodeId, f64> = BTreeMap::new();
    let mut mean_counts: BTreeMap<NodeId, u64> = BTreeMap::new();

    for t in 0..config.iterations {
        let ctx = base.at_step(t as u64);
        let mut trace = ancestral_sample_with(scg, &params, &ctx, &plan)?;

        // Critic updates.
        let mut td_abs: BTreeMap<String, f64> = BTreeMap::new();
        match &config.critic {
            CriticMode::LambdaReturn => {
                let deltas = if let Some(rate) = config.target_track {
                    // Targets come from the slow-tracking copies.
                    let mut frozen = qs.clone();
                    for (key, state) in &targets {
                        if let Some(q) = frozen.get_mut(key) {
                            q.weights_mut().copy_from_slice(&state.target);
                        }
                    }
                    let deltas = crate::learn::lambda_return_deltas(
                        net,
                        &frozen,
                        &trace,
                        config.lambda,
                        config.gamma,
                    )?;
                    for (key, delta) in &deltas {
                        let q = qs
                            .get_mut(key)
                            .ok_or_else(|| LearnError::MissingApproximator(key.clone()))?;
                        let scope = q.scope.clone();
                        let a = crate::learn::scope_assignment(&trace.values, &scope)?;
                        let before = q.weights().to_vec();
                        let (_, grad) = q.eval_grad(&a)?;
                        q.apply_step(config.alpha_q, *delta, &grad);
                        let increment: Vec<f64> = q
                            .weights()
                            .iter()
                            .zip(&before)
                            .map(|(w, b)| w - b)
                            .collect();
                        if let Some(state) = targets.get_mut(key) {
                            crate::learn::slow_track_update(state, &increment, rate);
                        }
                    }
                    deltas
                } else {
                    apply_lambda_updates(
                        net,
                        qs,
                        &trace,
                        config.lambda,
                        config.gamma,
                        config.alpha_q,
                    )?
                };
                for (key, d) in &deltas {
                    td_abs.insert(key.to_string(), libm::fabs(*d));
                }
            }
            CriticMode::Replay {
                resamples,
                updates_per_iter,
                ..
            } => {
                for (key, (idx, buf)) in buffers.iter_mut() {
                    let tuple = buf.layout().capture(&trace)?;
                    buf.store(tuple)?;
                    let mut stream = ctx.stream(&format!("replay:{key}"));
                    for _ in 0..*updates_per_iter {
                        let sampled = buf.sample(&mut stream)?.clone();
                        let td = replay_update(
                            scg,
                            &params,
                            net,
                            qs,
                            *idx,
                            &sampled,
                            *resamples,
                            config.alpha_q,
                            &mut stream,
                        )?;
                        td_abs.insert(key.to_string(), libm::fabs(td));
                    }
                }
            }
            CriticMode::OracleExact => {
                refresh_qs_from_oracle(scg, net, qs, &params)?;
            }
            CriticMode::None => {}
        }

        // Parameter step after warmup.
        let mut grad_norms: BTreeMap<String, f64> = BTreeMap::new();
        if t >= config.warmup {
            let surrogate = build_surrogate(
                scg,
                &mut trace,
                net,
                qs,
                &params,
                &config.estimators,
                &running_means,
            )?;
            let grads = trace.tape.backward_scalar(surrogate.objective);
            for (name, g) in &grads {
                let norm = libm::sqrt(g.iter().map(|x| x * x).sum::<f64>());
                grad_norms.insert(name.clone(), norm);
            }
            sgd_step(&mut params, &grads, config.alpha_theta, &scg.model().tied)?;
        }

        // Maintain running-mean baselines from the observed signals.
        for node in &needs_means {
            let est = config.estimators.for_node(node);
            let signal = resolve_signal(scg, net, qs, &trace, node, est.signal)?;
            let count = mean_counts.entry(node.clone()).or_insert(0);
            *count += 1;
            let mean = running_means.entry(node.clone()).or_insert(0.0);
            *mean += (signal - *mean) / *count as f64;
        }

        let last = t + 1 == config.iterations;
        if t % config.log_every.max(1) == 0 || last {
            let exact_cost = match config.eval_exact_every {
                Some(every) if t % every.max(1) == 0 || last => {
                    oracle::exact_expected_cost(scg, &params).ok()
                }
                _ => None,
            };
            sink(&MetricsRecord {
                iteration: t as u64,
                total_cost: trace.total_cost,
                td_abs,
                grad_norms,
                exact_cost,
            });
        }
    }
    Ok(params)
}
