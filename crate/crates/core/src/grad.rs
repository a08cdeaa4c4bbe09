//! Scalar reverse-mode differentiation over a flat tape.
//!
//! Every loss in this crate is built as a tape expression so that one
//! backward pass yields exact partials with respect to every registered
//! parameter. The tape carries a stop-gradient marker: forward identity,
//! zero backward flow. Finite-difference checking replays the tape with
//! stop-gradient blocks frozen at their recorded values, so checked and
//! analytic derivatives refer to the same function.

use std::collections::HashMap;

use thiserror::Error;

/// Errors from tape construction, differentiation, and checking.
#[derive(Debug, Error)]
pub enum GradError {
    #[error("node {node}: {op} domain error on operand value {value}")]
    Domain {
        node: usize,
        op: &'static str,
        value: f64,
    },
    #[error("node {node} ({op}) has non-finite value {value}")]
    NonFinite {
        node: usize,
        op: &'static str,
        value: f64,
    },
    #[error("parameter {id:?} registered twice with different values ({first} vs {second})")]
    ParamValueMismatch { id: ParamId, first: f64, second: f64 },
    #[error("gradient-check epsilon {0} outside (0, 1e-2]")]
    BadEpsilon(f64),
}

/// Identifier of an external trainable scalar: a policy logit or a value-table
/// raw entry, indexed densely within its table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Policy(u32),
    Value(u32),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeIdx(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    Add(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Tau(usize),
    Clip { x: usize, lo: f64, hi: f64 },
    Sum(Vec<usize>),
    // Operand retained for graph structure; both passes read the cached value.
    StopGrad(#[allow(dead_code)] usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tau(_) => "tau",
            Op::Clip { .. } => "clip",
            Op::Sum(_) => "sum",
            Op::StopGrad(_) => "stop_gradient",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: f64,
}

/// Append-only computation record. Operand indices always point at earlier
/// nodes, so a single reverse sweep propagates adjoints exactly.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached forward value of a node.
    pub fn value(&self, n: NodeIdx) -> f64 {
        self.nodes[n.0].value
    }

    /// Registered parameters and their leaf values, in sorted id order.
    pub fn registered_params(&self) -> Vec<(ParamId, f64)> {
        let mut out: Vec<(ParamId, f64)> = self
            .params
            .iter()
            .map(|(&id, &idx)| (id, self.nodes[idx].value))
            .collect();
        out.sort_by_key(|&(id, _)| id);
        out
    }

    fn push(&mut self, op: Op, value: f64) -> NodeIdx {
        self.nodes.push(Node { op, value });
        NodeIdx(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: f64) -> NodeIdx {
        self.push(Op::Const, value)
    }

    /// Register (or re-use) the leaf for an external parameter. Registering
    /// the same id twice returns the same node, so adjoints accumulate.
    pub fn param(&mut self, id: ParamId, value: f64) -> Result<NodeIdx, GradError> {
        if let Some(&idx) = self.params.get(&id) {
            let first = self.nodes[idx].value;
            if first.to_bits() != value.to_bits() {
                return Err(GradError::ParamValueMismatch {
                    id,
                    first,
                    second: value,
                });
            }
            return Ok(NodeIdx(idx));
        }
        let node = self.push(Op::Param(id), value);
        self.params.insert(id, node.0);
        Ok(node)
    }

    pub fn add(&mut self, a: NodeIdx, b: NodeIdx) -> NodeIdx {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a.0, b.0), v)
    }

    /// `a - b`, composed from add and neg.
    pub fn sub(&mut self, a: NodeIdx, b: NodeIdx) -> NodeIdx {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeIdx, b: NodeIdx) -> NodeIdx {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: NodeIdx, b: NodeIdx) -> Result<NodeIdx, GradError> {
        let denom = self.value(b);
        if denom == 0.0 {
            return Err(GradError::Domain {
                node: b.0,
                op: "div",
                value: denom,
            });
        }
        let v = self.value(a) / denom;
        Ok(self.push(Op::Div(a.0, b.0), v))
    }

    pub fn neg(&mut self, a: NodeIdx) -> NodeIdx {
        let v = -self.value(a);
        self.push(Op::Neg(a.0), v)
    }

    pub fn exp(&mut self, a: NodeIdx) -> NodeIdx {
        let v = self.value(a).exp();
        self.push(Op::Exp(a.0), v)
    }

    pub fn log(&mut self, a: NodeIdx) -> Result<NodeIdx, GradError> {
        let x = self.value(a);
        if x <= 0.0 {
            return Err(GradError::Domain {
                node: a.0,
                op: "log",
                value: x,
            });
        }
        Ok(self.push(Op::Log(a.0), x.ln()))
    }

    pub fn sigmoid(&mut self, a: NodeIdx) -> NodeIdx {
        let v = sigmoid(self.value(a));
        self.push(Op::Sigmoid(a.0), v)
    }

    /// The odds transform x / (x + 1), mapping [0, inf) into [0, 1).
    pub fn tau(&mut self, a: NodeIdx) -> Result<NodeIdx, GradError> {
        let x = self.value(a);
        if x == -1.0 {
            return Err(GradError::Domain {
                node: a.0,
                op: "tau",
                value: x,
            });
        }
        Ok(self.push(Op::Tau(a.0), x / (x + 1.0)))
    }

    pub fn clip(&mut self, x: NodeIdx, lo: f64, hi: f64) -> NodeIdx {
        let v = self.value(x).clamp(lo, hi);
        self.push(Op::Clip { x: x.0, lo, hi }, v)
    }

    pub fn sum(&mut self, terms: &[NodeIdx]) -> NodeIdx {
        let v = terms.iter().map(|n| self.value(*n)).sum();
        self.push(Op::Sum(terms.iter().map(|n| n.0).collect()), v)
    }

    /// Forward identity whose backward contribution is zero.
    pub fn stop_gradient(&mut self, a: NodeIdx) -> NodeIdx {
        let v = self.value(a);
        self.push(Op::StopGrad(a.0), v)
    }

    /// Re-evaluate the tape with some parameter leaves overridden. Stop-
    /// gradient nodes emit their originally recorded values, so the replayed
    /// function is exactly the one `backward` differentiates.
    pub fn replay(&self, root: NodeIdx, overrides: &[(ParamId, f64)]) -> Result<f64, GradError> {
        let mut vals = vec![0.0f64; root.0 + 1];
        for (i, node) in self.nodes.iter().take(root.0 + 1).enumerate() {
            let v = match &node.op {
                Op::Const => node.value,
                Op::Param(id) => overrides
                    .iter()
                    .find(|(o, _)| o == id)
                    .map(|&(_, v)| v)
                    .unwrap_or(node.value),
                Op::Add(a, b) => vals[*a] + vals[*b],
                Op::Mul(a, b) => vals[*a] * vals[*b],
                Op::Div(a, b) => {
                    if vals[*b] == 0.0 {
                        return Err(GradError::Domain {
                            node: *b,
                            op: "div",
                            value: 0.0,
                        });
                    }
                    vals[*a] / vals[*b]
                }
                Op::Neg(a) => -vals[*a],
                Op::Exp(a) => vals[*a].exp(),
                Op::Log(a) => {
                    if vals[*a] <= 0.0 {
                        return Err(GradError::Domain {
                            node: *a,
                            op: "log",
                            value: vals[*a],
                        });
                    }
                    vals[*a].ln()
                }
                Op::Sigmoid(a) => sigmoid(vals[*a]),
                Op::Tau(a) => vals[*a] / (vals[*a] + 1.0),
                Op::Clip { x, lo, hi } => vals[*x].clamp(*lo, *hi),
                Op::Sum(terms) => terms.iter().map(|&t| vals[t]).sum(),
                Op::StopGrad(_) => node.value,
            };
            if !v.is_finite() {
                return Err(GradError::NonFinite {
                    node: i,
                    op: node.op.name(),
                    value: v,
                });
            }
            vals[i] = v;
        }
        Ok(vals[root.0])
    }
}

/// Partial derivatives keyed by parameter id. Contains an entry for every
/// parameter registered on the tape, zero where the root does not depend on
/// it.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    grads: HashMap<ParamId, f64>,
}

impl GradMap {
    /// Partial derivative for `id`, zero when unregistered.
    pub fn get(&self, id: ParamId) -> f64 {
        self.grads.get(&id).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, f64)> + '_ {
        self.grads.iter().map(|(&id, &g)| (id, g))
    }

    /// Entries in sorted id order (for reproducible reporting).
    pub fn iter_sorted(&self) -> Vec<(ParamId, f64)> {
        let mut out: Vec<_> = self.iter().collect();
        out.sort_by_key(|&(id, _)| id);
        out
    }
}

/// Exact reverse-mode partials of a scalar root with respect to every
/// registered parameter. Clip passes the adjoint through when its operand
/// lies inside `[lo, hi]` and blocks it in the clipped region.
pub fn backward(tape: &Tape, root: NodeIdx) -> Result<GradMap, GradError> {
    for (i, node) in tape.nodes.iter().take(root.0 + 1).enumerate() {
        if !node.value.is_finite() {
            return Err(GradError::NonFinite {
                node: i,
                op: node.op.name(),
                value: node.value,
            });
        }
    }
    let mut adjoint = vec![0.0f64; root.0 + 1];
    adjoint[root.0] = 1.0;
    for i in (0..=root.0).rev() {
        let d = adjoint[i];
        if d == 0.0 {
            continue;
        }
        match &tape.nodes[i].op {
            Op::Const | Op::Param(_) | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                adjoint[*a] += d;
                adjoint[*b] += d;
            }
            Op::Mul(a, b) => {
                adjoint[*a] += d * tape.nodes[*b].value;
                adjoint[*b] += d * tape.nodes[*a].value;
            }
            Op::Div(a, b) => {
                let vb = tape.nodes[*b].value;
                adjoint[*a] += d / vb;
                adjoint[*b] -= d * tape.nodes[*a].value / (vb * vb);
            }
            Op::Neg(a) => adjoint[*a] -= d,
            Op::Exp(a) => adjoint[*a] += d * tape.nodes[i].value,
            Op::Log(a) => adjoint[*a] += d / tape.nodes[*a].value,
            Op::Sigmoid(a) => {
                let s = tape.nodes[i].value;
                adjoint[*a] += d * s * (1.0 - s);
            }
            Op::Tau(a) => {
                let x = tape.nodes[*a].value;
                let u = 1.0 + x;
                adjoint[*a] += d / (u * u);
            }
            Op::Clip { x, lo, hi } => {
                let v = tape.nodes[*x].value;
                if v >= *lo && v <= *hi {
                    adjoint[*x] += d;
                }
            }
            Op::Sum(terms) => {
                for &t in terms {
                    adjoint[t] += d;
                }
            }
        }
    }
    let mut grads = HashMap::with_capacity(tape.params.len());
    for (&id, &idx) in &tape.params {
        let g = if idx <= root.0 { adjoint[idx] } else { 0.0 };
        grads.insert(id, g);
    }
    Ok(GradMap { grads })
}

/// Compare [`backward`] against central finite differences over every
/// registered parameter and return the worst relative error
/// `|analytic - numeric| / max(1, |numeric|)`. Stop-gradient blocks are held
/// at their recorded values during the probes.
pub fn check_gradient(tape: &Tape, root: NodeIdx, eps: f64) -> Result<f64, GradError> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(GradError::BadEpsilon(eps));
    }
    let grads = backward(tape, root)?;
    let mut worst = 0.0f64;
    for (id, base) in tape.registered_params() {
        let plus = tape.replay(root, &[(id, base + eps)])?;
        let minus = tape.replay(root, &[(id, base - eps)])?;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(id);
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
