//! Conditional distributions attached to stochastic nodes.
//!
//! Distribution parameters are deterministic expressions of parent values
//! and named parameters, evaluated onto the tape so that log-probabilities
//! and pathwise transforms stay differentiable with respect to the
//! parameter store.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::expr::{Expr, TrackedValue, Value};
use crate::tape::{Tape, TapeId};

const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum DistributionSpec {
    Bernoulli {
        prob: Expr,
    },
    Categorical {
        k: usize,
        probs: Expr,
    },
    Gaussian {
        mean: Expr,
        scale: Expr,
    },
    /// Deterministic: exactly one outcome, log-probability zero. Used for
    /// the virtual node that collects a multivariate cost's arguments.
    Dirac {
        value: Expr,
    },
}

impl DistributionSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            DistributionSpec::Bernoulli { .. } => "bernoulli",
            DistributionSpec::Categorical { .. } => "categorical",
            DistributionSpec::Gaussian { .. } => "gaussian",
            DistributionSpec::Dirac { .. } => "dirac",
        }
    }

    pub fn exprs(&self) -> Vec<&Expr> {
        match self {
            DistributionSpec::Bernoulli { prob } => vec![prob],
            DistributionSpec::Categorical { probs, .. } => vec![probs],
            DistributionSpec::Gaussian { mean, scale } => vec![mean, scale],
            DistributionSpec::Dirac { value } => vec![value],
        }
    }
}

/// Distribution parameters evaluated on the tape for one node visit.
#[derive(Clone, Debug)]
pub enum DistParams {
    Bernoulli {
        prob: TrackedValue,
    },
    Categorical {
        probs: TrackedValue,
    },
    Gaussian {
        mean: TrackedValue,
        scale: TrackedValue,
    },
    Dirac {
        value: TrackedValue,
    },
}

impl DistParams {
    pub fn plain(&self) -> PlainParams {
        match self {
            DistParams::Bernoulli { prob } => {
                PlainParams::Bernoulli(prob.value.as_scalar().unwrap_or(f64::NAN))
            }
            DistParams::Categorical { probs } => {
                PlainParams::Categorical(probs.value.coords().to_vec())
            }
            DistParams::Gaussian { mean, scale } => PlainParams::Gaussian {
                mean: mean.value.as_scalar().unwrap_or(f64::NAN),
                scale: scale.value.as_scalar().unwrap_or(f64::NAN),
            },
            DistParams::Dirac { value } => PlainParams::Dirac(value.value.clone()),
        }
    }
}

/// Distribution parameters as bare values; the tape-free counterpart of
/// [`DistParams`] used by enumeration and replay resampling.
#[derive(Clone, Debug, PartialEq)]
pub enum PlainParams {
    Bernoulli(f64),
    Categorical(Vec<f64>),
    Gaussian { mean: f64, scale: f64 },
    Dirac(Value),
}

/// Evaluates a spec's parameter expressions without touching a tape.
pub fn plain_params(
    spec: &DistributionSpec,
    b: &crate::expr::Bindings<'_>,
) -> Result<PlainParams, DistError> {
    let ev = |e: &Expr| {
        crate::expr::eval_value(e, b).map_err(|err| DistError::InvalidParams(format!("{err}")))
    };
    Ok(match spec {
        DistributionSpec::Bernoulli { prob } => PlainParams::Bernoulli(
            ev(prob)?
                .as_scalar()
                .ok_or_else(|| DistError::InvalidParams(String::from("prob not scalar")))?,
        ),
        DistributionSpec::Categorical { probs, .. } => {
            PlainParams::Categorical(ev(probs)?.coords().to_vec())
        }
        DistributionSpec::Gaussian { mean, scale } => PlainParams::Gaussian {
            mean: ev(mean)?
                .as_scalar()
                .ok_or_else(|| DistError::InvalidParams(String::from("mean not scalar")))?,
            scale: ev(scale)?
                .as_scalar()
                .ok_or_else(|| DistError::InvalidParams(String::from("scale not scalar")))?,
        },
        DistributionSpec::Dirac { value } => PlainParams::Dirac(ev(value)?),
    })
}

/// Draws a value from plain parameters using one node stream.
pub fn plain_sample(params: &PlainParams, stream: &mut crate::rng::NodeStream) -> Value {
    match params {
        PlainParams::Bernoulli(p) => {
            let u = stream.uniform();
            Value::Scalar(if u < 1.0 - p { 0.0 } else { 1.0 })
        }
        PlainParams::Categorical(pv) => Value::Scalar(sample_index(pv, stream.uniform()) as f64),
        PlainParams::Gaussian { mean, scale } => Value::Scalar(mean + scale * stream.gaussian()),
        PlainParams::Dirac(v) => v.clone(),
    }
}

/// Analytic mean of plain parameters.
pub fn plain_mean(params: &PlainParams) -> Result<Value, DistError> {
    Ok(match params {
        PlainParams::Bernoulli(p) => Value::Scalar(*p),
        PlainParams::Categorical(pv) => {
            Value::Scalar(pv.iter().enumerate().map(|(i, p)| i as f64 * p).sum())
        }
        PlainParams::Gaussian { mean, .. } => Value::Scalar(*mean),
        PlainParams::Dirac(v) => v.clone(),
    })
}

/// Same validity checks as [`check_params`] on bare values.
pub fn plain_validate(params: &PlainParams) -> Result<(), DistError> {
    match params {
        PlainParams::Bernoulli(p) => {
            if !(*p > 0.0 && *p < 1.0) {
                return Err(DistError::InvalidParams(format!(
                    "bernoulli probability {p} outside (0, 1)"
                )));
            }
        }
        PlainParams::Categorical(pv) => {
            let mut sum = 0.0;
            for &p in pv {
                if !(p >= 0.0) {
                    return Err(DistError::InvalidParams(format!(
                        "categorical probability {p} negative"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(DistError::InvalidParams(format!(
                    "categorical probabilities sum to {sum}"
                )));
            }
        }
        PlainParams::Gaussian { mean, scale } => {
            if !mean.is_finite() || !scale.is_finite() || *scale < 0.0 {
                return Err(DistError::InvalidParams(format!(
                    "gaussian parameters mean={mean} scale={scale}"
                )));
            }
        }
        PlainParams::Dirac(v) => {
            if !v.is_finite() {
                return Err(DistError::InvalidParams(String::from(
                    "dirac value not finite",
                )));
            }
        }
    }
    Ok(())
}

/// All outcomes of plain parameters with probabilities; `None` when
/// continuous.
pub fn plain_outcomes(params: &PlainParams) -> Option<Vec<(Value, f64)>> {
    match params {
        PlainParams::Bernoulli(p) => Some(vec![
            (Value::Scalar(0.0), 1.0 - p),
            (Value::Scalar(1.0), *p),
        ]),
        PlainParams::Categorical(pv) => Some(
            pv.iter()
                .enumerate()
                .map(|(i, &p)| (Value::Scalar(i as f64), p))
                .collect(),
        ),
        PlainParams::Dirac(v) => Some(vec![(v.clone(), 1.0)]),
        PlainParams::Gaussian { .. } => None,
    }
}

/// Probability mass of a value under plain parameters; `None` when
/// continuous.
pub fn plain_mass(params: &PlainParams, value: &Value) -> Option<f64> {
    match params {
        PlainParams::Bernoulli(p) => match value.as_scalar()? {
            1.0 => Some(*p),
            0.0 => Some(1.0 - p),
            _ => Some(0.0),
        },
        PlainParams::Categorical(pv) => {
            let idx = value.as_scalar()?;
            if idx == libm::trunc(idx) && idx >= 0.0 && (idx as usize) < pv.len() {
                Some(pv[idx as usize])
            } else {
                Some(0.0)
            }
        }
        PlainParams::Dirac(v) => Some(if v == value { 1.0 } else { 0.0 }),
        PlainParams::Gaussian { .. } => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DistError {
    InvalidParams(String),
    OutOfSupport(String),
    NotReparameterizable(&'static str),
    TemperatureNonPositive(f64),
    NoAnalyticMean(&'static str),
}

impl fmt::Display for DistError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistError::InvalidParams(s) => write!(f, "invalid distribution parameters: {s}"),
            DistError::OutOfSupport(s) => write!(f, "value out of support: {s}"),
            DistError::NotReparameterizable(k) => {
                write!(
                    f,
                    "distribution kind `{k}` has no registered pathwise transform"
                )
            }
            DistError::TemperatureNonPositive(t) => {
                write!(f, "relaxation temperature must be positive, got {t}")
            }
            DistError::NoAnalyticMean(k) => {
                write!(f, "distribution kind `{k}` has no analytic mean")
            }
        }
    }
}

impl core::error::Error for DistError {}

/// Validates evaluated parameters: Bernoulli probability strictly inside
/// (0, 1), categorical mass nonnegative and normalized, Gaussian scale
/// finite and nonnegative (strict positivity is checked where a density
/// is required).
pub fn check_params(spec: &DistributionSpec, params: &DistParams) -> Result<(), DistError> {
    match (spec, params) {
        (DistributionSpec::Bernoulli { .. }, DistParams::Bernoulli { prob }) => {
            let p = prob.value.as_scalar().ok_or_else(|| {
                DistError::InvalidParams(String::from("bernoulli prob not scalar"))
            })?;
            if !(p > 0.0 && p < 1.0) {
                return Err(DistError::InvalidParams(format!(
                    "bernoulli probability {p} outside (0, 1)"
                )));
            }
        }
        (DistributionSpec::Categorical { k, .. }, DistParams::Categorical { probs }) => {
            let pv = probs.value.coords();
            if pv.len() != *k {
                return Err(DistError::InvalidParams(format!(
                    "categorical expects {k} probabilities, got {}",
                    pv.len()
                )));
            }
            let mut sum = 0.0;
            for &p in pv {
                if !(p >= 0.0) {
                    return Err(DistError::InvalidParams(format!(
                        "categorical probability {p} negative"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(DistError::InvalidParams(format!(
                    "categorical probabilities sum to {sum}"
                )));
            }
        }
        (DistributionSpec::Gaussian { .. }, DistParams::Gaussian { mean, scale }) => {
            let m = mean.value.as_scalar().ok_or_else(|| {
                DistError::InvalidParams(String::from("gaussian mean not scalar"))
            })?;
            let s = scale.value.as_scalar().ok_or_else(|| {
                DistError::InvalidParams(String::from("gaussian scale not scalar"))
            })?;
            if !m.is_finite() || !s.is_finite() || s < 0.0 {
                return Err(DistError::InvalidParams(format!(
                    "gaussian parameters mean={m} scale={s}"
                )));
            }
        }
        (DistributionSpec::Dirac { .. }, DistParams::Dirac { value }) => {
            if !value.value.is_finite() {
                return Err(DistError::InvalidParams(String::from(
                    "dirac value not finite",
                )));
            }
        }
        _ => {
            return Err(DistError::InvalidParams(String::from(
                "parameter kind does not match spec",
            )))
        }
    }
    Ok(())
}

/// Inverse-CDF draw over a finite mass vector.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// All outcomes with their probabilities; `None` for continuous kinds.
pub fn outcomes(params: &DistParams) -> Option<Vec<(Value, f64)>> {
    match params {
        DistParams::Bernoulli { prob } => {
            let p = prob.value.as_scalar()?;
            Some(vec![(Value::Scalar(0.0), 1.0 - p), (Value::Scalar(1.0), p)])
        }
        DistParams::Categorical { probs } => Some(
            probs
                .value
                .coords()
                .iter()
                .enumerate()
                .map(|(i, &p)| (Value::Scalar(i as f64), p))
                .collect(),
        ),
        DistParams::Dirac { value } => Some(vec![(value.value.clone(), 1.0)]),
        DistParams::Gaussian { .. } => None,
    }
}

/// Probability mass of a given discrete value; `None` for continuous.
pub fn mass_of(params: &DistParams, value: &Value) -> Option<f64> {
    match params {
        DistParams::Bernoulli { prob } => {
            let p = prob.value.as_scalar()?;
            match value.as_scalar()? {
                1.0 => Some(p),
                0.0 => Some(1.0 - p),
                _ => Some(0.0),
            }
        }
        DistParams::Categorical { probs } => {
            let idx = value.as_scalar()?;
            let coords = probs.value.coords();
            if idx == libm::trunc(idx) && idx >= 0.0 && (idx as usize) < coords.len() {
                Some(coords[idx as usize])
            } else {
                Some(0.0)
            }
        }
        DistParams::Dirac { value: v } => Some(if v.value == *value { 1.0 } else { 0.0 }),
        DistParams::Gaussian { .. } => None,
    }
}

/// Log-density/mass on the tape, differentiable through the distribution
/// parameters; the value itself enters as data, never as a tape input.
pub fn log_prob_on_tape(
    tape: &mut Tape,
    params: &DistParams,
    value: &Value,
) -> Result<(f64, TapeId), DistError> {
    match params {
        DistParams::Bernoulli { prob } => {
            let v = value.as_scalar().ok_or_else(|| {
                DistError::OutOfSupport(String::from("bernoulli value not scalar"))
            })?;
            let id = if v == 1.0 {
                tape.ln(prob.ids[0])
            } else if v == 0.0 {
                let one = tape.constant(1.0);
                let q = tape.sub(one, prob.ids[0]);
                tape.ln(q)
            } else {
                return Err(DistError::OutOfSupport(format!(
                    "bernoulli value {v} not in {{0, 1}}"
                )));
            };
            Ok((tape.value(id), id))
        }
        DistParams::Categorical { probs } => {
            let v = value.as_scalar().ok_or_else(|| {
                DistError::OutOfSupport(String::from("categorical value not scalar"))
            })?;
            if v != libm::trunc(v) || v < 0.0 || (v as usize) >= probs.ids.len() {
                return Err(DistError::OutOfSupport(format!(
                    "categorical index {v} not in 0..{}",
                    probs.ids.len()
                )));
            }
            let id = tape.ln(probs.ids[v as usize]);
            Ok((tape.value(id), id))
        }
        DistParams::Gaussian { mean, scale } => {
            let x = value.as_scalar().ok_or_else(|| {
                DistError::OutOfSupport(String::from("gaussian value not scalar"))
            })?;
            let s = scale.value.as_scalar().unwrap_or(f64::NAN);
            if !(s > 0.0) {
                return Err(DistError::InvalidParams(format!(
                    "gaussian scale {s} must be positive for a density"
                )));
            }
            // -0.5 ln(2 pi) - ln(scale) - (x - mean)^2 / (2 scale^2)
            let xid = tape.constant(x);
            let diff = tape.sub(xid, mean.ids[0]);
            let sq = tape.mul(diff, diff);
            let s2 = tape.mul(scale.ids[0], scale.ids[0]);
            let two_s2 = tape.scale(s2, 2.0);
            let quad = tape.div(sq, two_s2);
            let ln_s = tape.ln(scale.ids[0]);
            let c = tape.constant(-0.5 * libm::log(2.0 * core::f64::consts::PI));
            let t = tape.sub(c, ln_s);
            let id = tape.sub(t, quad);
            Ok((tape.value(id), id))
        }
        DistParams::Dirac { value: v } => {
            if v.value != *value {
                return Err(DistError::OutOfSupport(String::from(
                    "dirac value mismatch",
                )));
            }
            let id = tape.constant(0.0);
            Ok((0.0, id))
        }
    }
}

/// Analytic mean on the tape (categorical mean is the index expectation).
pub fn mean_on_tape(tape: &mut Tape, params: &DistParams) -> Result<TrackedValue, DistError> {
    match params {
        DistParams::Bernoulli { prob } => Ok(prob.clone()),
        DistParams::Categorical { probs } => {
            let mut acc = tape.constant(0.0);
            for (i, &pid) in probs.ids.iter().enumerate() {
                let term = tape.scale(pid, i as f64);
                acc = tape.add(acc, term);
            }
            Ok(TrackedValue::scalar(tape.value(acc), acc))
        }
        DistParams::Gaussian { mean, .. } => Ok(mean.clone()),
        DistParams::Dirac { value } => Ok(value.clone()),
    }
}

/// Pathwise transform for a Gaussian: value = mean + scale * eps, with the
/// output id differentiable through mean and scale.
pub fn gaussian_reparam(
    tape: &mut Tape,
    params: &DistParams,
    eps: f64,
) -> Result<TrackedValue, DistError> {
    match params {
        DistParams::Gaussian { mean, scale } => {
            let e = tape.constant(eps);
            let se = tape.mul(scale.ids[0], e);
            let id = tape.add(mean.ids[0], se);
            Ok(TrackedValue::scalar(tape.value(id), id))
        }
        DistParams::Bernoulli { .. } => Err(DistError::NotReparameterizable("bernoulli")),
        DistParams::Categorical { .. } => Err(DistError::NotReparameterizable("categorical")),
        DistParams::Dirac { .. } => Err(DistError::NotReparameterizable("dirac")),
    }
}

/// A relaxed draw of a discrete node: the hard outcome, the underlying
/// continuous variable differentiable through the distribution parameters,
/// and the temperature-softened surrogate.
#[derive(Clone, Debug)]
pub struct RelaxedSample {
    pub hard: Value,
    pub z: TrackedValue,
    pub soft: TrackedValue,
}

/// Number of uniforms one relaxed draw consumes.
pub fn relaxed_noise_dim(params: &DistParams) -> Result<usize, DistError> {
    match params {
        DistParams::Bernoulli { .. } => Ok(1),
        DistParams::Categorical { probs } => Ok(probs.ids.len()),
        DistParams::Gaussian { .. } => Err(DistError::NotReparameterizable("gaussian (relaxed)")),
        DistParams::Dirac { .. } => Err(DistError::NotReparameterizable("dirac (relaxed)")),
    }
}

/// Draws the continuous variable, thresholds it into the hard outcome and
/// softens it at the given temperature.
///
/// Binary case: z = ln(p/(1-p)) + ln(u/(1-u)), hard = [z > 0], soft =
/// sigmoid(z / temperature). Categorical case: z_i = ln(p_i) + g_i with
/// standard Gumbel g_i, hard = argmax, soft = softmax(z / temperature).
pub fn relaxed_prior(
    tape: &mut Tape,
    params: &DistParams,
    temperature: f64,
    uniforms: &[f64],
) -> Result<RelaxedSample, DistError> {
    if !(temperature > 0.0) {
        return Err(DistError::TemperatureNonPositive(temperature));
    }
    match params {
        DistParams::Bernoulli { prob } => {
            let u = uniforms[0];
            let logit_p = logit_on_tape(tape, prob.ids[0]);
            let noise = tape.constant(libm::log(u / (1.0 - u)));
            let z = tape.add(logit_p, noise);
            let hard = if tape.value(z) > 0.0 { 1.0 } else { 0.0 };
            let scaled = tape.scale(z, 1.0 / temperature);
            let soft = tape.sigmoid(scaled);
            Ok(RelaxedSample {
                hard: Value::Scalar(hard),
                z: TrackedValue::scalar(tape.value(z), z),
                soft: TrackedValue::scalar(tape.value(soft), soft),
            })
        }
        DistParams::Categorical { probs } => {
            let mut z_ids = Vec::with_capacity(probs.ids.len());
            for (i, &pid) in probs.ids.iter().enumerate() {
                let lp = tape.ln(pid);
                let g = tape.constant(-libm::log(-libm::log(uniforms[i])));
                z_ids.push(tape.add(lp, g));
            }
            let mut best = 0;
            for i in 1..z_ids.len() {
                if tape.value(z_ids[i]) > tape.value(z_ids[best]) {
                    best = i;
                }
            }
            let soft_ids = softmax_on_tape(tape, &z_ids, temperature);
            Ok(RelaxedSample {
                hard: Value::Scalar(best as f64),
                z: tracked_from_ids(tape, z_ids),
                soft: tracked_from_ids(tape, soft_ids),
            })
        }
        _ => Err(DistError::NotReparameterizable("continuous (relaxed)")),
    }
}

/// Draws the continuous variable conditioned on a known hard outcome, by
/// inverse-CDF restriction of the noise; differentiable through the
/// distribution parameters.
pub fn relaxed_posterior(
    tape: &mut Tape,
    params: &DistParams,
    hard: &Value,
    uniforms: &[f64],
) -> Result<TrackedValue, DistError> {
    match params {
        DistParams::Bernoulli { prob } => {
            let b = hard
                .as_scalar()
                .ok_or_else(|| DistError::OutOfSupport(String::from("hard value not scalar")))?;
            let v = tape.constant(uniforms[0]);
            let one = tape.constant(1.0);
            let q = tape.sub(one, prob.ids[0]); // 1 - p
                                                // u' = (1-p) v on {b=0}; u' = (1-p) + p v on {b=1}
            let uprime = if b == 0.0 {
                tape.mul(q, v)
            } else {
                let pv = tape.mul(prob.ids[0], v);
                tape.add(q, pv)
            };
            let logit_p = logit_on_tape(tape, prob.ids[0]);
            let lu = logit_id(tape, uprime);
            let zt = tape.add(logit_p, lu);
            Ok(TrackedValue::scalar(tape.value(zt), zt))
        }
        DistParams::Categorical { probs } => {
            let b = hard
                .as_scalar()
                .ok_or_else(|| DistError::OutOfSupport(String::from("hard value not scalar")))?
                as usize;
            if b >= probs.ids.len() {
                return Err(DistError::OutOfSupport(String::from(
                    "hard index out of range",
                )));
            }
            // Top coordinate: standard Gumbel; others truncated below it.
            let vb = uniforms[b];
            let zb = tape.constant(-libm::log(-libm::log(vb)));
            let mut ids = vec![zb; probs.ids.len()];
            for (i, &pid) in probs.ids.iter().enumerate() {
                if i == b {
                    continue;
                }
                let num = tape.constant(-libm::log(uniforms[i]));
                let frac = tape.div(num, pid);
                let tail = tape.constant(-libm::log(vb));
                let s = tape.add(frac, tail);
                let l = tape.ln(s);
                ids[i] = tape.neg(l);
            }
            Ok(tracked_from_ids(tape, ids))
        }
        _ => Err(DistError::NotReparameterizable("continuous (relaxed)")),
    }
}

/// Softened value of a continuous draw at a given temperature; binary uses
/// the scalar sigmoid, categorical the softmax.
pub fn soften(tape: &mut Tape, z: &TrackedValue, temperature: f64) -> TrackedValue {
    if z.ids.len() == 1 {
        let scaled = tape.scale(z.ids[0], 1.0 / temperature);
        let s = tape.sigmoid(scaled);
        TrackedValue::scalar(tape.value(s), s)
    } else {
        let ids = softmax_on_tape(tape, &z.ids, temperature);
        tracked_from_ids(tape, ids)
    }
}

fn logit_on_tape(tape: &mut Tape, p: TapeId) -> TapeId {
    let one = tape.constant(1.0);
    let q = tape.sub(one, p);
    let lp = tape.ln(p);
    let lq = tape.ln(q);
    tape.sub(lp, lq)
}

fn logit_id(tape: &mut Tape, u: TapeId) -> TapeId {
    let one = tape.constant(1.0);
    let q = tape.sub(one, u);
    let lu = tape.ln(u);
    let lq = tape.ln(q);
    tape.sub(lu, lq)
}

fn softmax_on_tape(tape: &mut Tape, z: &[TapeId], temperature: f64) -> Vec<TapeId> {
    let exps: Vec<TapeId> = z
        .iter()
        .map(|&id| {
            let s = tape.scale(id, 1.0 / temperature);
            tape.exp(s)
        })
        .collect();
    let total = tape.sum(&exps);
    exps.into_iter().map(|e| tape.div(e, total)).collect()
}

fn tracked_from_ids(tape: &mut Tape, ids: Vec<TapeId>) -> TrackedValue {
    let coords: Vec<f64> = ids.iter().map(|&id| tape.value(id)).collect();
    TrackedValue {
        value: Value::Vector(coords),
        ids,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bern_params(tape: &mut Tape, p: f64) -> DistParams {
        let id = tape.param("theta", 0, p, 1);
        DistParams::Bernoulli {
            prob: TrackedValue::scalar(p, id),
        }
    }

    #[test]
    fn bernoulli_log_mass() {
        let mut tape = Tape::new();
        let params = bern_params(&mut tape, 0.5);
        let (lp, _) = log_prob_on_tape(&mut tape, &params, &Value::Scalar(1.0)).unwrap();
        assert!((lp - libm::log(0.5)).abs() < 1e-15);
    }

    #[test]
    fn categorical_log_mass_lookup() {
        let mut tape = Tape::new();
        let ids = alloc::vec![tape.constant(0.2), tape.constant(0.3), tape.constant(0.5)];
        let params = DistParams::Categorical {
            probs: TrackedValue {
                value: Value::Vector(alloc::vec![0.2, 0.3, 0.5]),
                ids,
            },
        };
        let (lp, _) = log_prob_on_tape(&mut tape, &params, &Value::Scalar(2.0)).unwrap();
        assert!((lp - libm::log(0.5)).abs() < 1e-15);
        assert!(log_prob_on_tape(&mut tape, &params, &Value::Scalar(3.0)).is_err());
    }

    #[test]
    fn standard_normal_mode_density() {
        let mut tape = Tape::new();
        let mean = TrackedValue::scalar(0.0, tape.constant(0.0));
        let scale = TrackedValue::scalar(1.0, tape.constant(1.0));
        let params = DistParams::Gaussian { mean, scale };
        let (lp, _) = log_prob_on_tape(&mut tape, &params, &Value::Scalar(0.0)).unwrap();
        assert!((lp + 0.5 * libm::log(2.0 * core::f64::consts::PI)).abs() < 1e-15);
    }

    #[test]
    fn gaussian_logprob_gradient_wrt_mean() {
        // d/dmu log N(x; mu, s) = (x - mu) / s^2
        let mut tape = Tape::new();
        let mid = tape.param("mu", 0, 0.3, 1);
        let params = DistParams::Gaussian {
            mean: TrackedValue::scalar(0.3, mid),
            scale: TrackedValue::scalar(2.0, tape.constant(2.0)),
        };
        let (_, id) = log_prob_on_tape(&mut tape, &params, &Value::Scalar(1.5)).unwrap();
        let g = tape.backward_scalar(id);
        assert!((g["mu"][0] - (1.5 - 0.3) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn reparam_location_gradient_is_one() {
        let mut tape = Tape::new();
        let mid = tape.param("mu", 0, 1.0, 1);
        let params = DistParams::Gaussian {
            mean: TrackedValue::scalar(1.0, mid),
            scale: TrackedValue::scalar(0.5, tape.constant(0.5)),
        };
        let t = gaussian_reparam(&mut tape, &params, 0.7).unwrap();
        assert!((t.value.as_scalar().unwrap() - (1.0 + 0.5 * 0.7)).abs() < 1e-15);
        let g = tape.backward_scalar(t.ids[0]);
        assert_eq!(g["mu"][0], 1.0);
    }

    #[test]
    fn zero_scale_collapses_to_mean() {
        let mut tape = Tape::new();
        let params = DistParams::Gaussian {
            mean: TrackedValue::scalar(2.0, tape.constant(2.0)),
            scale: TrackedValue::scalar(0.0, tape.constant(0.0)),
        };
        let t = gaussian_reparam(&mut tape, &params, 1.234).unwrap();
        assert_eq!(t.value.as_scalar().unwrap(), 2.0);
    }

    #[test]
    fn bernoulli_not_pathwise() {
        let mut tape = Tape::new();
        let params = bern_params(&mut tape, 0.5);
        assert!(matches!(
            gaussian_reparam(&mut tape, &params, 0.0),
            Err(DistError::NotReparameterizable(_))
        ));
    }

    #[test]
    fn relaxed_threshold_limits() {
        // z = 0.5 fixed: soft -> 1 as temperature -> 0; z = -0.5: soft -> 0.
        let mut tape = Tape::new();
        for (z, want) in [(0.5, 1.0), (-0.5, 0.0)] {
            let zt = TrackedValue::scalar(z, tape.constant(z));
            let s = soften(&mut tape, &zt, 1e-4);
            assert!((s.value.as_scalar().unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn relaxed_prior_matches_bernoulli_law() {
        // Empirical check that the hard outcome follows Bernoulli(p).
        let mut hits = 0_u32;
        let n = 20_000;
        let ctx = crate::rng::RngContext::new(5);
        for i in 0..n {
            let mut tape = Tape::new();
            let params = bern_params(&mut tape, 0.3);
            let mut s = ctx.at_step(i).stream("b");
            let u = s.uniform();
            let r = relaxed_prior(&mut tape, &params, 0.5, &[u]).unwrap();
            if r.hard.as_scalar().unwrap() == 1.0 {
                hits += 1;
            }
        }
        let freq = f64::from(hits) / n as f64;
        assert!((freq - 0.3).abs() < 0.015, "freq {freq}");
    }

    #[test]
    fn relaxed_posterior_consistent_with_prior() {
        // Marginalizing the posterior draw over hard outcomes reproduces
        // the prior law of z: compare means empirically.
        let ctx = crate::rng::RngContext::new(17);
        let n = 40_000;
        let (mut prior_mean, mut post_mean) = (0.0, 0.0);
        for i in 0..n {
            let mut tape = Tape::new();
            let params = bern_params(&mut tape, 0.65);
            let mut s = ctx.at_step(i).stream("n");
            let u = s.uniform();
            let r = relaxed_prior(&mut tape, &params, 1.0, &[u]).unwrap();
            prior_mean += r.z.value.as_scalar().unwrap();
            let v = s.uniform();
            let zt = relaxed_posterior(&mut tape, &params, &r.hard, &[v]).unwrap();
            post_mean += zt.value.as_scalar().unwrap();
        }
        prior_mean /= n as f64;
        post_mean /= n as f64;
        assert!(
            (prior_mean - post_mean).abs() < 0.03,
            "prior {prior_mean} posterior {post_mean}"
        );
    }

    #[test]
    fn categorical_posterior_argmax_is_conditioned_outcome() {
        let ctx = crate::rng::RngContext::new(23);
        for step in 0..200 {
            let mut tape = Tape::new();
            let pv = alloc::vec![0.5, 0.2, 0.3];
            let ids = pv.iter().map(|&p| tape.constant(p)).collect::<Vec<_>>();
            let params = DistParams::Categorical {
                probs: TrackedValue {
                    value: Value::Vector(pv),
                    ids,
                },
            };
            let mut s = ctx.at_step(step).stream("c");
            let us: Vec<f64> = (0..3).map(|_| s.uniform()).collect();
            let r = relaxed_prior(&mut tape, &params, 0.7, &us).unwrap();
            let vs: Vec<f64> = (0..3).map(|_| s.uniform()).collect();
            let zt = relaxed_posterior(&mut tape, &params, &r.hard, &vs).unwrap();
            let hard = r.hard.as_scalar().unwrap() as usize;
            let argmax = zt
                .value
                .coords()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, hard, "step {step}");
        }
    }
}
