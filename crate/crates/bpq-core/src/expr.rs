//! Deterministic expressions over node values and parameters.
//!
//! The primitive set is closed: arithmetic, exp/ln/tanh/sigmoid, dot-plus-
//! bias affine, concat, index and clip. Values are scalars or small fixed
//! vectors; there is no implicit broadcasting, elementwise operations
//! require equal dimensions.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{NodeId, ParamStore};
use crate::tape::{Tape, TapeId};

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Value {
    pub fn scalar(v: f64) -> Self {
        Value::Scalar(v)
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Value::Vector(v)
    }

    pub fn dim(&self) -> usize {
        match self {
            Value::Scalar(_) => 1,
            Value::Vector(v) => v.len(),
        }
    }

    pub fn coords(&self) -> &[f64] {
        match self {
            Value::Scalar(v) => core::slice::from_ref(v),
            Value::Vector(v) => v.as_slice(),
        }
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.coords()[i]
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(v) => Some(*v),
            Value::Vector(v) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.coords().iter().all(|v| v.is_finite())
    }

    fn from_coords(coords: Vec<f64>, scalar: bool) -> Self {
        if scalar && coords.len() == 1 {
            Value::Scalar(coords[0])
        } else {
            Value::Vector(coords)
        }
    }
}

/// A value together with the tape position of each coordinate.
#[derive(Clone, Debug)]
pub struct TrackedValue {
    pub value: Value,
    pub ids: Vec<TapeId>,
}

impl TrackedValue {
    pub fn from_constants(tape: &mut Tape, value: &Value) -> Self {
        let ids = value.coords().iter().map(|&c| tape.constant(c)).collect();
        TrackedValue {
            value: value.clone(),
            ids,
        }
    }

    pub fn scalar(value: f64, id: TapeId) -> Self {
        TrackedValue {
            value: Value::Scalar(value),
            ids: alloc::vec![id],
        }
    }

    /// Same values re-entered as constants: gradients stop here.
    pub fn detached(&self, tape: &mut Tape) -> Self {
        TrackedValue::from_constants(tape, &self.value)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Value of a parent node.
    Node(NodeId),
    /// Named parameter vector from the store.
    Param(String),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Exp(Box<Expr>),
    Ln(Box<Expr>),
    Tanh(Box<Expr>),
    Sigmoid(Box<Expr>),
    /// Dot product of `weights` and `input` plus scalar `bias`.
    Affine {
        weights: Box<Expr>,
        input: Box<Expr>,
        bias: Box<Expr>,
    },
    Concat(Vec<Expr>),
    Index(Box<Expr>, usize),
    Clip(Box<Expr>, f64, f64),
}

#[allow(clippy::should_implement_trait)] // expression constructors, not operator overloads
impl Expr {
    pub fn node(name: &str) -> Expr {
        Expr::Node(NodeId::from(name))
    }

    pub fn param(name: &str) -> Expr {
        Expr::Param(String::from(name))
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        Expr::Div(Box::new(a), Box::new(b))
    }

    pub fn neg(a: Expr) -> Expr {
        Expr::Neg(Box::new(a))
    }

    pub fn exp(a: Expr) -> Expr {
        Expr::Exp(Box::new(a))
    }

    pub fn ln(a: Expr) -> Expr {
        Expr::Ln(Box::new(a))
    }

    pub fn tanh(a: Expr) -> Expr {
        Expr::Tanh(Box::new(a))
    }

    pub fn sigmoid(a: Expr) -> Expr {
        Expr::Sigmoid(Box::new(a))
    }

    pub fn index(a: Expr, i: usize) -> Expr {
        Expr::Index(Box::new(a), i)
    }

    pub fn clip(a: Expr, lo: f64, hi: f64) -> Expr {
        Expr::Clip(Box::new(a), lo, hi)
    }

    /// Every node referenced anywhere in the expression.
    pub fn node_refs(&self, out: &mut alloc::collections::BTreeSet<NodeId>) {
        match self {
            Expr::Node(n) => {
                out.insert(n.clone());
            }
            Expr::Const(_) | Expr::Param(_) => {}
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.node_refs(out);
                b.node_refs(out);
            }
            Expr::Neg(a)
            | Expr::Exp(a)
            | Expr::Ln(a)
            | Expr::Tanh(a)
            | Expr::Sigmoid(a)
            | Expr::Index(a, _)
            | Expr::Clip(a, _, _) => a.node_refs(out),
            Expr::Affine {
                weights,
                input,
                bias,
            } => {
                weights.node_refs(out);
                input.node_refs(out);
                bias.node_refs(out);
            }
            Expr::Concat(es) => {
                for e in es {
                    e.node_refs(out);
                }
            }
        }
    }

    /// Every parameter referenced anywhere in the expression.
    pub fn param_refs(&self, out: &mut alloc::collections::BTreeSet<String>) {
        match self {
            Expr::Param(p) => {
                out.insert(p.clone());
            }
            Expr::Const(_) | Expr::Node(_) => {}
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.param_refs(out);
                b.param_refs(out);
            }
            Expr::Neg(a)
            | Expr::Exp(a)
            | Expr::Ln(a)
            | Expr::Tanh(a)
            | Expr::Sigmoid(a)
            | Expr::Index(a, _)
            | Expr::Clip(a, _, _) => a.param_refs(out),
            Expr::Affine {
                weights,
                input,
                bias,
            } => {
                weights.param_refs(out);
                input.param_refs(out);
                bias.param_refs(out);
            }
            Expr::Concat(es) => {
                for e in es {
                    e.param_refs(out);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExprError {
    UnknownNode(NodeId),
    UnknownParam(String),
    ShapeMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    IndexOutOfBounds {
        index: usize,
        dim: usize,
    },
}

impl fmt::Display for ExprError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprError::UnknownNode(n) => write!(f, "expression references unknown node `{n}`"),
            ExprError::UnknownParam(p) => {
                write!(f, "expression references unknown parameter `{p}`")
            }
            ExprError::ShapeMismatch { op, left, right } => {
                write!(f, "shape mismatch in `{op}`: {left} vs {right}")
            }
            ExprError::IndexOutOfBounds { index, dim } => {
                write!(f, "index {index} out of bounds for dimension {dim}")
            }
        }
    }
}

impl core::error::Error for ExprError {}

/// Node values visible to a plain evaluation.
pub struct Bindings<'a> {
    pub nodes: &'a BTreeMap<NodeId, Value>,
    pub params: &'a ParamStore,
}

/// Evaluates without recording anything; used by the enumeration oracle.
pub fn eval_value(expr: &Expr, b: &Bindings<'_>) -> Result<Value, ExprError> {
    Ok(match expr {
        Expr::Const(c) => Value::Scalar(*c),
        Expr::Node(n) => b
            .nodes
            .get(n)
            .ok_or_else(|| ExprError::UnknownNode(n.clone()))?
            .clone(),
        Expr::Param(p) => {
            let v = b
                .params
                .get(p)
                .ok_or_else(|| ExprError::UnknownParam(p.clone()))?;
            Value::from_coords(v.to_vec(), v.len() == 1)
        }
        Expr::Add(a, c) => zip_plain("add", eval_value(a, b)?, eval_value(c, b)?, |x, y| x + y)?,
        Expr::Sub(a, c) => zip_plain("sub", eval_value(a, b)?, eval_value(c, b)?, |x, y| x - y)?,
        Expr::Mul(a, c) => zip_plain("mul", eval_value(a, b)?, eval_value(c, b)?, |x, y| x * y)?,
        Expr::Div(a, c) => zip_plain("div", eval_value(a, b)?, eval_value(c, b)?, |x, y| x / y)?,
        Expr::Neg(a) => map_plain(eval_value(a, b)?, |x| -x),
        Expr::Exp(a) => map_plain(eval_value(a, b)?, libm::exp),
        Expr::Ln(a) => map_plain(eval_value(a, b)?, libm::log),
        Expr::Tanh(a) => map_plain(eval_value(a, b)?, libm::tanh),
        Expr::Sigmoid(a) => map_plain(eval_value(a, b)?, crate::tape::sigmoid),
        Expr::Affine {
            weights,
            input,
            bias,
        } => {
            let w = eval_value(weights, b)?;
            let x = eval_value(input, b)?;
            let bias = eval_value(bias, b)?;
            if w.dim() != x.dim() {
                return Err(ExprError::ShapeMismatch {
                    op: "affine",
                    left: w.dim(),
                    right: x.dim(),
                });
            }
            let bias = bias.as_scalar().ok_or(ExprError::ShapeMismatch {
                op: "affine bias",
                left: 1,
                right: 0,
            })?;
            let dot: f64 = w.coords().iter().zip(x.coords()).map(|(a, b)| a * b).sum();
            Value::Scalar(dot + bias)
        }
        Expr::Concat(es) => {
            let mut out = Vec::new();
            for e in es {
                out.extend_from_slice(eval_value(e, b)?.coords());
            }
            Value::Vector(out)
        }
        Expr::Index(a, i) => {
            let v = eval_value(a, b)?;
            if *i >= v.dim() {
                return Err(ExprError::IndexOutOfBounds {
                    index: *i,
                    dim: v.dim(),
                });
            }
            Value::Scalar(v.coord(*i))
        }
        Expr::Clip(a, lo, hi) => map_plain(eval_value(a, b)?, |x| x.clamp(*lo, *hi)),
    })
}

fn zip_plain(
    op: &'static str,
    a: Value,
    b: Value,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Value, ExprError> {
    if a.dim() != b.dim() {
        return Err(ExprError::ShapeMismatch {
            op,
            left: a.dim(),
            right: b.dim(),
        });
    }
    let scalar = matches!((&a, &b), (Value::Scalar(_), Value::Scalar(_)));
    let coords = a
        .coords()
        .iter()
        .zip(b.coords())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Ok(Value::from_coords(coords, scalar))
}

fn map_plain(a: Value, f: impl Fn(f64) -> f64) -> Value {
    match a {
        Value::Scalar(v) => Value::Scalar(f(v)),
        Value::Vector(v) => Value::Vector(v.into_iter().map(f).collect()),
    }
}

/// Node values visible to an on-tape evaluation. Parameter references
/// become live leaves on the tape; node references use the ids recorded
/// here (constants when the caller detached them).
pub struct TapeBindings<'a> {
    pub nodes: &'a BTreeMap<NodeId, TrackedValue>,
    pub params: &'a ParamStore,
}

pub fn eval_on_tape(
    expr: &Expr,
    tape: &mut Tape,
    b: &TapeBindings<'_>,
) -> Result<TrackedValue, ExprError> {
    Ok(match expr {
        Expr::Const(c) => TrackedValue::scalar(*c, tape.constant(*c)),
        Expr::Node(n) => b
            .nodes
            .get(n)
            .ok_or_else(|| ExprError::UnknownNode(n.clone()))?
            .clone(),
        Expr::Param(p) => {
            let v = b
                .params
                .get(p)
                .ok_or_else(|| ExprError::UnknownParam(p.clone()))?;
            let len = v.len();
            let ids: Vec<TapeId> = v
                .iter()
                .enumerate()
                .map(|(i, &c)| tape.param(p, i, c, len))
                .collect();
            TrackedValue {
                value: Value::from_coords(v.to_vec(), len == 1),
                ids,
            }
        }
        Expr::Add(a, c) => {
            let (l, r) = (eval_on_tape(a, tape, b)?, eval_on_tape(c, tape, b)?);
            zip_tape("add", tape, l, r, Tape::add)?
        }
        Expr::Sub(a, c) => {
            let (l, r) = (eval_on_tape(a, tape, b)?, eval_on_tape(c, tape, b)?);
            zip_tape("sub", tape, l, r, Tape::sub)?
        }
        Expr::Mul(a, c) => {
            let (l, r) = (eval_on_tape(a, tape, b)?, eval_on_tape(c, tape, b)?);
            zip_tape("mul", tape, l, r, Tape::mul)?
        }
        Expr::Div(a, c) => {
            let (l, r) = (eval_on_tape(a, tape, b)?, eval_on_tape(c, tape, b)?);
            zip_tape("div", tape, l, r, Tape::div)?
        }
        Expr::Neg(a) => {
            let t = eval_on_tape(a, tape, b)?;
            map_tape(tape, t, Tape::neg)
        }
        Expr::Exp(a) => {
            let t = eval_on_tape(a, tape, b)?;
            map_tape(tape, t, Tape::exp)
        }
        Expr::Ln(a) => {
            let t = eval_on_tape(a, tape, b)?;
            map_tape(tape, t, Tape::ln)
        }
        Expr::Tanh(a) => {
            let t = eval_on_tape(a, tape, b)?;
            map_tape(tape, t, Tape::tanh)
        }
        Expr::Sigmoid(a) => {
            let t = eval_on_tape(a, tape, b)?;
            map_tape(tape, t, Tape::sigmoid)
        }
        Expr::Affine {
            weights,
            input,
            bias,
        } => {
            let w = eval_on_tape(weights, tape, b)?;
            let x = eval_on_tape(input, tape, b)?;
            let bias = eval_on_tape(bias, tape, b)?;
            if w.ids.len() != x.ids.len() {
                return Err(ExprError::ShapeMismatch {
                    op: "affine",
                    left: w.ids.len(),
                    right: x.ids.len(),
                });
            }
            if bias.ids.len() != 1 {
                return Err(ExprError::ShapeMismatch {
                    op: "affine bias",
                    left: 1,
                    right: bias.ids.len(),
                });
            }
            let mut acc = bias.ids[0];
            for (wi, xi) in w.ids.iter().zip(&x.ids) {
                let prod = tape.mul(*wi, *xi);
                acc = tape.add(acc, prod);
            }
            TrackedValue::scalar(tape.value(acc), acc)
        }
        Expr::Concat(es) => {
            let mut ids = Vec::new();
            let mut coords = Vec::new();
            for e in es {
                let t = eval_on_tape(e, tape, b)?;
                coords.extend_from_slice(t.value.coords());
                ids.extend_from_slice(&t.ids);
            }
            TrackedValue {
                value: Value::Vector(coords),
                ids,
            }
        }
        Expr::Index(a, i) => {
            let t = eval_on_tape(a, tape, b)?;
            if *i >= t.ids.len() {
                return Err(ExprError::IndexOutOfBounds {
                    index: *i,
                    dim: t.ids.len(),
                });
            }
            TrackedValue::scalar(t.value.coord(*i), t.ids[*i])
        }
        Expr::Clip(a, lo, hi) => {
            let t = eval_on_tape(a, tape, b)?;
            let scalar = matches!(t.value, Value::Scalar(_));
            let ids: Vec<TapeId> = t.ids.iter().map(|&id| tape.clip(id, *lo, *hi)).collect();
            let coords = ids.iter().map(|&id| tape.value(id)).collect();
            TrackedValue {
                value: Value::from_coords(coords, scalar),
                ids,
            }
        }
    })
}

fn zip_tape(
    op: &'static str,
    tape: &mut Tape,
    a: TrackedValue,
    b: TrackedValue,
    f: impl Fn(&mut Tape, TapeId, TapeId) -> TapeId,
) -> Result<TrackedValue, ExprError> {
    if a.ids.len() != b.ids.len() {
        return Err(ExprError::ShapeMismatch {
            op,
            left: a.ids.len(),
            right: b.ids.len(),
        });
    }
    let scalar = matches!((&a.value, &b.value), (Value::Scalar(_), Value::Scalar(_)));
    let ids: Vec<TapeId> = a
        .ids
        .iter()
        .zip(&b.ids)
        .map(|(&x, &y)| f(tape, x, y))
        .collect();
    let coords = ids.iter().map(|&id| tape.value(id)).collect();
    Ok(TrackedValue {
        value: Value::from_coords(coords, scalar),
        ids,
    })
}

fn map_tape(
    tape: &mut Tape,
    a: TrackedValue,
    f: impl Fn(&mut Tape, TapeId) -> TapeId,
) -> TrackedValue {
    let scalar = matches!(a.value, Value::Scalar(_));
    let ids: Vec<TapeId> = a.ids.iter().map(|&id| f(tape, id)).collect();
    let coords = ids.iter().map(|&id| tape.value(id)).collect();
    TrackedValue {
        value: Value::from_coords(coords, scalar),
        ids,
    }
}

/// Softmax of a k-vector parameter, spelled in primitives. Convenience
/// for building trainable categorical distributions.
pub fn softmax_of_param(name: &str, k: usize) -> Expr {
    let exps: Vec<Expr> = (0..k)
        .map(|i| Expr::exp(Expr::index(Expr::param(name), i)))
        .collect();
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
