//! Scalar reverse-mode differentiation over a recorded operation list.
//!
//! The tape hosts every differentiable quantity produced during a forward
//! pass: distribution parameters as expressions of the parameter store,
//! log-probabilities, reparameterized transforms, deterministic node
//! values, costs and estimator surrogates. A backward sweep visits the
//! operations in exact reverse order of recording and accumulates
//! adjoints into per-parameter gradient vectors.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

/// Index of a recorded scalar on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TapeId(u32);

impl TapeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Gradient vectors keyed by parameter name.
pub type GradMap = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Copy, Debug)]
enum Op {
    Const,
    /// Parameter leaf; the tape's leaf registry maps it back to a
    /// (name, coordinate) pair.
    Param,
    Add(TapeId, TapeId),
    Sub(TapeId, TapeId),
    Mul(TapeId, TapeId),
    Div(TapeId, TapeId),
    Neg(TapeId),
    Exp(TapeId),
    Ln(TapeId),
    Tanh(TapeId),
    Sigmoid(TapeId),
    /// Zero derivative outside the open interval (lo, hi).
    Clip {
        x: TapeId,
        lo: f64,
        hi: f64,
    },
    /// Ties resolve to the first operand.
    Max(TapeId, TapeId),
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    vals: Vec<f64>,
    ops: Vec<Op>,
    param_names: Vec<String>,
    param_lens: Vec<usize>,
    param_index: BTreeMap<String, u32>,
    leaves: BTreeMap<(u32, u32), TapeId>,
}

#[allow(clippy::should_implement_trait)] // builder methods, not operator overloads
impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: TapeId) -> f64 {
        self.vals[id.index()]
    }

    fn push(&mut self, op: Op, val: f64) -> TapeId {
        let id = TapeId(self.ops.len() as u32);
        self.ops.push(op);
        self.vals.push(val);
        id
    }

    pub fn constant(&mut self, v: f64) -> TapeId {
        self.push(Op::Const, v)
    }

    /// Leaf for one coordinate of a named parameter vector. Repeated
    /// requests for the same coordinate return the same id so adjoints
    /// accumulate across every use site.
    pub fn param(&mut self, name: &str, coord: usize, value: f64, len: usize) -> TapeId {
        let pidx = match self.param_index.get(name) {
            Some(&i) => i,
            None => {
                let i = self.param_names.len() as u32;
                self.param_names.push(name.to_string());
                self.param_lens.push(len);
                self.param_index.insert(name.to_string(), i);
                i
            }
        };
        if let Some(&id) = self.leaves.get(&(pidx, coord as u32)) {
            return id;
        }
        let id = self.push(Op::Param, value);
        self.leaves.insert((pidx, coord as u32), id);
        id
    }

    pub fn add(&mut self, a: TapeId, b: TapeId) -> TapeId {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: TapeId, b: TapeId) -> TapeId {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: TapeId, b: TapeId) -> TapeId {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: TapeId, b: TapeId) -> TapeId {
        let v = self.value(a) / self.value(b);
        self.push(Op::Div(a, b), v)
    }

    pub fn neg(&mut self, a: TapeId) -> TapeId {
        let v = -self.value(a);
        self.push(Op::Neg(a), v)
    }

    pub fn exp(&mut self, a: TapeId) -> TapeId {
        let v = libm::exp(self.value(a));
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: TapeId) -> TapeId {
        let v = libm::log(self.value(a));
        self.push(Op::Ln(a), v)
    }

    pub fn tanh(&mut self, a: TapeId) -> TapeId {
        let v = libm::tanh(self.value(a));
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: TapeId) -> TapeId {
        let v = sigmoid(self.value(a));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn clip(&mut self, x: TapeId, lo: f64, hi: f64) -> TapeId {
        let v = self.value(x).clamp(lo, hi);
        self.push(Op::Clip { x, lo, hi }, v)
    }

    pub fn max(&mut self, a: TapeId, b: TapeId) -> TapeId {
        let v = if self.value(a) >= self.value(b) {
            self.value(a)
        } else {
            self.value(b)
        };
        self.push(Op::Max(a, b), v)
    }

    /// `a + c` with a float constant.
    pub fn add_const(&mut self, a: TapeId, c: f64) -> TapeId {
        let cid = self.constant(c);
        self.add(a, cid)
    }

    /// `a * c` with a float constant.
    pub fn scale(&mut self, a: TapeId, c: f64) -> TapeId {
        let cid = self.constant(c);
        self.mul(a, cid)
    }

    /// Sum of a list of ids; zero constant when empty.
    pub fn sum(&mut self, ids: &[TapeId]) -> TapeId {
        match ids.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => {
                let mut acc = first;
                for &id in rest {
                    acc = self.add(acc, id);
                }
                acc
            }
        }
    }

    /// Recomputes every recorded value from the leaves forward.
    pub fn replay(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            let g = |id: TapeId| out[id.index()];
            out[i] = match *op {
                Op::Const | Op::Param => self.vals[i],
                Op::Add(a, b) => g(a) + g(b),
                Op::Sub(a, b) => g(a) - g(b),
                Op::Mul(a, b) => g(a) * g(b),
                Op::Div(a, b) => g(a) / g(b),
                Op::Neg(a) => -g(a),
                Op::Exp(a) => libm::exp(g(a)),
                Op::Ln(a) => libm::log(g(a)),
                Op::Tanh(a) => libm::tanh(g(a)),
                Op::Sigmoid(a) => sigmoid(g(a)),
                Op::Clip { x, lo, hi } => g(x).clamp(lo, hi),
                Op::Max(a, b) => {
                    if g(a) >= g(b) {
                        g(a)
                    } else {
                        g(b)
                    }
                }
            };
        }
        out
    }

    /// Adjoints of every tape position given seed adjoints on outputs.
    /// Missing seeds default to zero.
    pub fn adjoints(&self, seeds: &[(TapeId, f64)]) -> Vec<f64> {
        let mut adj = vec![0.0; self.ops.len()];
        for &(id, a) in seeds {
            adj[id.index()] += a;
        }
        for i in (0..self.ops.len()).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Const | Op::Param => {}
                Op::Add(a, b) => {
                    adj[a.index()] += g;
                    adj[b.index()] += g;
                }
                Op::Sub(a, b) => {
                    adj[a.index()] += g;
                    adj[b.index()] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a.index()] += g * self.vals[b.index()];
                    adj[b.index()] += g * self.vals[a.index()];
                }
                Op::Div(a, b) => {
                    let vb = self.vals[b.index()];
                    adj[a.index()] += g / vb;
                    adj[b.index()] -= g * self.vals[a.index()] / (vb * vb);
                }
                Op::Neg(a) => adj[a.index()] -= g,
                Op::Exp(a) => adj[a.index()] += g * self.vals[i],
                Op::Ln(a) => adj[a.index()] += g / self.vals[a.index()],
                Op::Tanh(a) => {
                    let t = self.vals[i];
                    adj[a.index()] += g * (1.0 - t * t);
                }
                Op::Sigmoid(a) => {
                    let s = self.vals[i];
                    adj[a.index()] += g * s * (1.0 - s);
                }
                Op::Clip { x, lo, hi } => {
                    let v = self.vals[x.index()];
                    if v > lo && v < hi {
                        adj[x.index()] += g;
                    }
                }
                Op::Max(a, b) => {
                    if self.vals[a.index()] >= self.vals[b.index()] {
                        adj[a.index()] += g;
                    } else {
                        adj[b.index()] += g;
                    }
                }
            }
        }
        adj
    }

    /// Gradients of the seeded outputs with respect to every parameter
    /// registered on the tape. Parameters never reached by an adjoint get
    /// a zero vector.
    pub fn backward(&self, seeds: &[(TapeId, f64)]) -> GradMap {
        let adj = self.adjoints(seeds);
        let mut grads: GradMap = GradMap::new();
        for (name, len) in self.param_names.iter().zip(self.param_lens.iter()) {
            grads.insert(name.clone(), vec![0.0; *len]);
        }
        for ((pidx, coord), id) in &self.leaves {
            let name = &self.param_names[*pidx as usize];
            grads.get_mut(name).expect("registered")[*coord as usize] = adj[id.index()];
        }
        grads
    }

    /// Gradient of a single scalar output.
    pub fn backward_scalar(&self, output: TapeId) -> GradMap {
        self.backward(&[(output, 1.0)])
    }
}
