//! Q-function approximators: tabular, linear and small MLPs over a fixed
//! feature map of the scope.
//!
//! Features follow the sorted scope order: discrete coordinates expand to
//! one-hot blocks, continuous coordinates pass raw plus squared, and a
//! constant-one feature closes the vector. Tabular approximators index a
//! dense table by mixed radix instead.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::expr::Value;
use crate::model::{NodeId, ValidatedScg};
use crate::rng::NodeStream;
use crate::scope::ScopeSet;
use crate::tape::{Tape, TapeId};

#[derive(Clone, Debug, PartialEq)]
pub enum QError {
    ScopeMismatch {
        expected: ScopeSet,
        detail: alloc::string::String,
    },
    NotTabular {
        node: NodeId,
    },
    UnsupportedScopeMember {
        node: NodeId,
    },
    WeightShape {
        expected: usize,
        got: usize,
    },
}

impl fmt::Display for QError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QError::ScopeMismatch { expected, detail } => {
                write!(
                    f,
                    "assignment does not cover scope {expected} exactly: {detail}"
                )
            }
            QError::NotTabular { node } => {
                write!(f, "scope member `{node}` has no finite cardinality")
            }
            QError::UnsupportedScopeMember { node } => {
                write!(f, "scope member `{node}` has no static value layout")
            }
            QError::WeightShape { expected, got } => {
                write!(f, "weight vector of length {got}, expected {expected}")
            }
        }
    }
}

impl core::error::Error for QError {}

#[derive(Clone, Copy, Debug, PartialEq)]
struct CoordInfo {
    /// Discrete cardinality, or None for a continuous coordinate.
    card: Option<u64>,
}

/// Flattened coordinate layout of a scope in sorted member order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSchema {
    members: Vec<(NodeId, usize)>, // member and its coordinate count
    coords: Vec<CoordInfo>,
    scope: ScopeSet,
}

impl FeatureSchema {
    pub fn for_scope(scg: &ValidatedScg, scope: &ScopeSet) -> Result<Self, QError> {
        let mut members = Vec::new();
        let mut coords = Vec::new();
        for n in scope.members() {
            let layout = scg
                .value_layout(n)
                .ok_or_else(|| QError::UnsupportedScopeMember { node: n.clone() })?;
            members.push((n.clone(), layout.len()));
            coords.extend(layout.into_iter().map(|card| CoordInfo { card }));
        }
        Ok(FeatureSchema {
            members,
            coords,
            scope: scope.clone(),
        })
    }

    /// One-hot for discrete coordinates, raw plus square for continuous,
    /// plus a trailing constant one.
    pub fn feature_dim(&self) -> usize {
        self.coords
            .iter()
            .map(|c| c.card.map(|k| k as usize).unwrap_or(2))
            .sum::<usize>()
            + 1
    }

    pub fn table_size(&self) -> Result<usize, QError> {
        let mut size: usize = 1;
        for (c, (node, _)) in self.coords.iter().zip(self.members_per_coord()) {
            match c.card {
                Some(k) => size = size.saturating_mul(k as usize),
                None => return Err(QError::NotTabular { node: node.clone() }),
            }
        }
        Ok(size)
    }

    fn members_per_coord(&self) -> Vec<&(NodeId, usize)> {
        let mut out = Vec::with_capacity(self.coords.len());
        for m in &self.members {
            for _ in 0..m.1 {
                out.push(m);
            }
        }
        out
    }

    /// Flattened coordinate values in schema order.
    fn coord_values(&self, assignment: &BTreeMap<NodeId, Value>) -> Result<Vec<f64>, QError> {
        if assignment.len() != self.members.len() {
            return Err(QError::ScopeMismatch {
                expected: self.scope.clone(),
                detail: format!("{} values supplied", assignment.len()),
            });
        }
        let mut out = Vec::with_capacity(self.coords.len());
        for (n, dim) in &self.members {
            let v = assignment.get(n).ok_or_else(|| QError::ScopeMismatch {
                expected: self.scope.clone(),
                detail: format!("missing `{n}`"),
            })?;
            if v.dim() != *dim {
                return Err(QError::ScopeMismatch {
                    expected: self.scope.clone(),
                    detail: format!("`{n}` has dimension {}, expected {dim}", v.dim()),
                });
            }
            out.extend_from_slice(v.coords());
        }
        Ok(out)
    }

    pub fn features(&self, assignment: &BTreeMap<NodeId, Value>) -> Result<Vec<f64>, QError> {
        let vals = self.coord_values(assignment)?;
        let mut out = Vec::with_capacity(self.feature_dim());
        for (v, c) in vals.iter().zip(&self.coords) {
            match c.card {
                Some(k) => {
                    for slot in 0..k {
                        out.push(if *v == slot as f64 { 1.0 } else { 0.0 });
                    }
                }
                None => {
                    out.push(*v);
                    out.push(v * v);
                }
            }
        }
        out.push(1.0);
        Ok(out)
    }

    pub fn table_index(&self, assignment: &BTreeMap<NodeId, Value>) -> Result<usize, QError> {
        let vals = self.coord_values(assignment)?;
        let mut idx: usize = 0;
        for ((v, c), (node, _)) in vals.iter().zip(&self.coords).zip(self.members_per_coord()) {
            let k = c
                .card
                .ok_or_else(|| QError::NotTabular { node: node.clone() })?
                as usize;
            let digit = *v;
            if digit != libm::trunc(digit) || digit < 0.0 || digit as usize >= k {
                return Err(QError::ScopeMismatch {
                    expected: self.scope.clone(),
                    detail: format!("value {digit} outside 0..{k} for `{node}`"),
                });
            }
            idx = idx * k + digit as usize;
        }
        Ok(idx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ApproxKind {
    Tabular {
        table: Vec<f64>,
    },
    Linear {
        weights: Vec<f64>,
    },
    /// Fully-connected tanh net; `sizes` runs input..output (output 1).
    Mlp {
        sizes: Vec<usize>,
        weights: Vec<f64>,
    },
}

impl ApproxKind {
    pub fn name(&self) -> &'static str {
        match self {
            ApproxKind::Tabular { .. } => "tabular",
            ApproxKind::Linear { .. } => "linear",
            ApproxKind::Mlp { .. } => "mlp",
        }
    }
}

fn mlp_weight_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// A surrogate cost with a scope signature and a weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QApproximator {
    pub owner: NodeId,
    pub scope: ScopeSet,
    schema: FeatureSchema,
    kind: ApproxKind,
}

impl QApproximator {
    pub fn tabular(scg: &ValidatedScg, owner: &NodeId, scope: &ScopeSet) -> Result<Self, QError> {
        let schema = FeatureSchema::for_scope(scg, scope)?;
        let size = schema.table_size()?;
        Ok(QApproximator {
            owner: owner.clone(),
            scope: scope.clone(),
            schema,
            kind: ApproxKind::Tabular {
                table: vec![0.0; size],
            },
        })
    }

    pub fn linear(scg: &ValidatedScg, owner: &NodeId, scope: &ScopeSet) -> Result<Self, QError> {
        let schema = FeatureSchema::for_scope(scg, scope)?;
        let dim = schema.feature_dim();
        Ok(QApproximator {
            owner: owner.clone(),
            scope: scope.clone(),
            schema,
            kind: ApproxKind::Linear {
                weights: vec![0.0; dim],
            },
        })
    }

    /// MLP weights initialize uniformly in [-0.05, 0.05] from the given
    /// stream.
    pub fn mlp(
        scg: &ValidatedScg,
        owner: &NodeId,
        scope: &ScopeSet,
        hidden: &[usize],
        stream: &mut NodeStream,
    ) -> Result<Self, QError> {
        let schema = FeatureSchema::for_scope(scg, scope)?;
        let mut sizes = vec![schema.feature_dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let n = mlp_weight_count(&sizes);
        let weights = (0..n).map(|_| (stream.uniform() - 0.5) * 0.1).collect();
        Ok(QApproximator {
            owner: owner.clone(),
            scope: scope.clone(),
            schema,
            kind: ApproxKind::Mlp { sizes, weights },
        })
    }

    /// Rebuilds an approximator from serialized parts, re-deriving and
    /// checking the schema.
    pub fn from_parts(
        scg: &ValidatedScg,
        owner: &NodeId,
        scope: &ScopeSet,
        kind: ApproxKind,
    ) -> Result<Self, QError> {
        let schema = FeatureSchema::for_scope(scg, scope)?;
        let expected = match &kind {
            ApproxKind::Tabular { .. } => schema.table_size()?,
            ApproxKind::Linear { .. } => schema.feature_dim(),
            ApproxKind::Mlp { sizes, .. } => {
                if sizes.first() != Some(&schema.feature_dim()) || sizes.last() != Some(&1) {
                    return Err(QError::WeightShape {
                        expected: schema.feature_dim(),
                        got: *sizes.first().unwrap_or(&0),
                    });
                }
                mlp_weight_count(sizes)
            }
        };
        let got = match &kind {
            ApproxKind::Tabular { table } => table.len(),
            ApproxKind::Linear { weights } | ApproxKind::Mlp { weights, .. } => weights.len(),
        };
        if got != expected {
            return Err(QError::WeightShape { expected, got });
        }
        Ok(QApproximator {
            owner: owner.clone(),
            scope: scope.clone(),
            schema,
            kind,
        })
    }

    pub fn kind(&self) -> &ApproxKind {
        &self.kind
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn weights(&self) -> &[f64] {
        match &self.kind {
            ApproxKind::Tabular { table } => table,
            ApproxKind::Linear { weights } | ApproxKind::Mlp { weights, .. } => weights,
        }
    }

    pub fn weights_mut(&mut self) -> &mut Vec<f64> {
        match &mut self.kind {
            ApproxKind::Tabular { table } => table,
            ApproxKind::Linear { weights } | ApproxKind::Mlp { weights, .. } => weights,
        }
    }

    pub fn eval(&self, assignment: &BTreeMap<NodeId, Value>) -> Result<f64, QError> {
        Ok(self.eval_grad(assignment)?.0)
    }

    /// Value and gradient with respect to the weights.
    pub fn eval_grad(
        &self,
        assignment: &BTreeMap<NodeId, Value>,
    ) -> Result<(f64, Vec<f64>), QError> {
        match &self.kind {
            ApproxKind::Tabular { table } => {
                let idx = self.schema.table_index(assignment)?;
                let mut grad = vec![0.0; table.len()];
                grad[idx] = 1.0;
                Ok((table[idx], grad))
            }
            ApproxKind::Linear { weights } => {
                let phi = self.schema.features(assignment)?;
                let v = weights.iter().zip(&phi).map(|(w, x)| w * x).sum();
                Ok((v, phi))
            }
            ApproxKind::Mlp { sizes, weights } => {
                let phi = self.schema.features(assignment)?;
                let (v, grad_w, _) = mlp_forward_backward(sizes, weights, &phi);
                Ok((v, grad_w))
            }
        }
    }

    /// `w += alpha * delta * grad` where `grad` came from [`eval_grad`].
    pub fn apply_step(&mut self, alpha: f64, delta: f64, grad: &[f64]) {
        for (w, g) in self.weights_mut().iter_mut().zip(grad) {
            *w += alpha * delta * g;
        }
    }

    /// Evaluates on the tape so the output is differentiable with respect
    /// to any continuous coordinate supplied as a live id. Discrete
    /// coordinates and weights enter as constants. Tabular kinds produce
    /// a constant lookup.
    pub fn eval_on_tape(
        &self,
        tape: &mut Tape,
        assignment: &BTreeMap<NodeId, Value>,
        live: &BTreeMap<NodeId, Vec<TapeId>>,
    ) -> Result<TapeId, QError> {
        if let ApproxKind::Tabular { table } = &self.kind {
            let idx = self.schema.table_index(assignment)?;
            return Ok(tape.constant(table[idx]));
        }
        let vals = self.schema.coord_values(assignment)?;
        let mut flat_ids: Vec<Option<TapeId>> = Vec::with_capacity(vals.len());
        for (n, dim) in &self.schema.members {
            match live.get(n) {
                Some(ids) if ids.len() == *dim => {
                    flat_ids.extend(ids.iter().map(|&i| Some(i)));
                }
                _ => flat_ids.extend(core::iter::repeat_n(None, *dim)),
            }
        }
        let mut phi: Vec<TapeId> = Vec::with_capacity(self.schema.feature_dim());
        for ((v, c), id) in vals.iter().zip(&self.schema.coords).zip(&flat_ids) {
            match c.card {
                Some(k) => {
                    for slot in 0..k {
                        phi.push(tape.constant(if *v == slot as f64 { 1.0 } else { 0.0 }));
                    }
                }
                None => {
                    let raw = match id {
                        Some(i) => *i,
                        None => tape.constant(*v),
                    };
                    phi.push(raw);
                    phi.push(tape.mul(raw, raw));
                }
            }
        }
        phi.push(tape.constant(1.0));

        match &self.kind {
            ApproxKind::Linear { weights } => {
                let mut acc = tape.constant(0.0);
                for (w, x) in weights.iter().zip(&phi) {
                    let term = tape.scale(*x, *w);
                    acc = tape.add(acc, term);
                }
                Ok(acc)
            }
            ApproxKind::Mlp { sizes, weights } => {
                let mut layer: Vec<TapeId> = phi;
                let mut off = 0;
                for (li, w) in sizes.windows(2).enumerate() {
                    let (nin, nout) = (w[0], w[1]);
                    let mut next = Vec::with_capacity(nout);
                    for o in 0..nout {
                        let mut acc = tape.constant(weights[off + nin * nout + o]);
                        for (i, &x) in layer.iter().enumerate() {
                            let term = tape.scale(x, weights[off + o * nin + i]);
                            acc = tape.add(acc, term);
                        }
                        if li + 2 < sizes.len() {
                            acc = tape.tanh(acc);
                        }
                        next.push(acc);
                    }
                    off += nin * nout + nout;
                    layer = next;
                }
                Ok(layer[0])
            }
            ApproxKind::Tabular { .. } => unreachable!("handled above"),
        }
    }
}

/// Forward pass plus gradients with respect to weights and inputs.
/// Weight layout per layer: `nout x nin` row-major, then `nout` biases.
fn mlp_forward_backward(
    sizes: &[usize],
    weights: &[f64],
    input: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let layers = sizes.len() - 1;
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
    activations.push(input.to_vec());
    let mut off = 0;
    let mut offsets = Vec::with_capacity(layers);
    for (li, w) in sizes.windows(2).enumerate() {
        let (nin, nout) = (w[0], w[1]);
        offsets.push(off);
        let x = activations.last().expect("nonempty").clone();
        let mut out = Vec::with_capacity(nout);
        for o in 0..nout {
            let mut acc = weights[off + nin * nout + o];
            for (i, &xi) in x.iter().enumerate() {
                acc += weights[off + o * nin + i] * xi;
            }
            out.push(if li + 1 < layers {
                libm::tanh(acc)
            } else {
                acc
            });
        }
        off += nin * nout + nout;
        activations.push(out);
    }
    let value = activations[layers][0];

    let mut grad_w = vec![0.0; weights.len()];
    let mut delta = vec![1.0f64];
    for li in (0..layers).rev() {
        let (nin, nout) = (sizes[li], sizes[li + 1]);
        let off = offsets[li];
        let x = &activations[li];
        let y = &activations[li + 1];
        let dz: Vec<f64> = if li + 1 < layers {
            delta
                .iter()
                .zip(y)
                .map(|(d, a)| d * (1.0 - a * a))
                .collect()
        } else {
            delta.clone()
        };
        let mut dx = vec![0.0; nin];
        for o in 0..nout {
            grad_w[off + nin * nout + o] += dz[o];
            for i in 0..nin {
                grad_w[off + o * nin + i] += dz[o] * x[i];
                dx[i] += dz[o] * weights[off + o * nin + i];
            }
        }
        delta = dx;
    }
    (value, grad_w, delta)
}
