//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every scalar operation of a computation as a node in
//! an append-only list. Local partial derivatives are evaluated while the
//! primal is computed, so [`Tape::backward`] is a single reverse sweep of
//! multiply-accumulates over the recorded nodes.
//!
//! Two surfaces are provided:
//!
//! * the checked API ([`Tape::leaf`], [`Tape::apply`]) that rejects bad
//!   operands and domain violations without touching the tape;
//! * [`Var`], a copyable handle with operator overloading. Code written
//!   against the [`Real`] trait runs unchanged on plain `f64` or on a tape.
//!   Domain violations hit through `Var` are latched on the tape and
//!   surfaced by [`Tape::check`].
//!
//! Kink convention: `relu'(0) = 0`, `min`/`max` send the gradient to the
//! first operand on ties, `clamp` has zero gradient at and beyond its bounds,
//! and `sqrt'(0)` is taken as 0.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Index, Mul, Neg, Sub};

use thiserror::Error;

/// Index of a node on the [`Tape`] that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(u32);

impl VarId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, Error, PartialEq)]
pub enum AdError {
    #[error("non-finite leaf value {value}")]
    NonFiniteLeaf { value: f64 },
    #[error("division by zero at node {node}")]
    DivisionByZero { node: usize },
    #[error("square root of negative value {value} at node {node}")]
    SqrtDomain { node: usize, value: f64 },
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },
    #[error("operation {op:?} takes {expected} operands, got {got}")]
    Arity {
        op: OpKind,
        expected: usize,
        got: usize,
    },
    #[error("invalid variable id {id} on a tape of length {len}")]
    InvalidId { id: usize, len: usize },
}

/// Operation applied by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Tanh,
    Sigmoid,
    Relu,
    Square,
    Sqrt,
    Min,
    Max,
    /// Clamp to constant bounds `[lo, hi]`.
    Clamp {
        lo: f64,
        hi: f64,
    },
}

/// Kind of a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Tanh,
    Sigmoid,
    Relu,
    Square,
    Sqrt,
    Min,
    Max,
    Clamp,
}

impl Op {
    pub fn kind(self) -> OpKind {
        match self {
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::Neg => OpKind::Neg,
            Op::Sin => OpKind::Sin,
            Op::Cos => OpKind::Cos,
            Op::Tanh => OpKind::Tanh,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Relu => OpKind::Relu,
            Op::Square => OpKind::Square,
            Op::Sqrt => OpKind::Sqrt,
            Op::Min => OpKind::Min,
            Op::Max => OpKind::Max,
            Op::Clamp { .. } => OpKind::Clamp,
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Min | Op::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    kind: OpKind,
    arity: u8,
    args: [u32; 2],
    partials: [f64; 2],
    value: f64,
}

/// Primal value plus local partials of one operation.
struct Eval {
    value: f64,
    partials: [f64; 2],
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

/// Evaluates `op` on operand values. Domain errors carry the id the node would get.
fn eval(op: Op, x: &[f64], node: usize) -> Result<Eval, AdError> {
    let a = x[0];
    let b = if x.len() > 1 { x[1] } else { 0.0 };
    let e = |value, p0, p1| Eval {
        value,
        partials: [p0, p1],
    };
    Ok(match op {
        Op::Add => e(a + b, 1.0, 1.0),
        Op::Sub => e(a - b, 1.0, -1.0),
        Op::Mul => e(a * b, b, a),
        Op::Div => {
            if b == 0.0 {
                return Err(AdError::DivisionByZero { node });
            }
            let q = a / b;
            e(q, 1.0 / b, -q / b)
        }
        Op::Neg => e(-a, -1.0, 0.0),
        Op::Sin => e(a.sin(), a.cos(), 0.0),
        Op::Cos => e(a.cos(), -a.sin(), 0.0),
        Op::Tanh => {
            let t = a.tanh();
            e(t, 1.0 - t * t, 0.0)
        }
        Op::Sigmoid => {
            let s = sigmoid(a);
            e(s, s * (1.0 - s), 0.0)
        }
        Op::Relu => {
            if a > 0.0 {
                e(a, 1.0, 0.0)
            } else {
                e(0.0, 0.0, 0.0)
            }
        }
        Op::Square => e(a * a, 2.0 * a, 0.0),
        Op::Sqrt => {
            if a < 0.0 {
                return Err(AdError::SqrtDomain { node, value: a });
            }
            let r = a.sqrt();
            e(r, if r > 0.0 { 0.5 / r } else { 0.0 }, 0.0)
        }
        Op::Min => {
            if a <= b {
                e(a, 1.0, 0.0)
            } else {
                e(b, 0.0, 1.0)
            }
        }
        Op::Max => {
            if a >= b {
                e(a, 1.0, 0.0)
            } else {
                e(b, 0.0, 1.0)
            }
        }
        Op::Clamp { lo, hi } => {
            if a > lo && a < hi {
                e(a, 1.0, 0.0)
            } else {
                e(a.clamp(lo, hi), 0.0, 0.0)
            }
        }
    })
}

/// Append-only record of a scalar computation.
///
/// Operand ids of node `k` are always `< k`. A tape is meant to be used from
/// a single thread; it is `Send` but not `Sync`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    error: Cell<Option<AdError>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(capacity)),
            error: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all nodes and any latched error, keeping the allocation.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.error.set(None);
    }

    pub fn value(&self, id: VarId) -> f64 {
        self.nodes.borrow()[id.index()].value
    }

    pub fn kind(&self, id: VarId) -> OpKind {
        self.nodes.borrow()[id.index()].kind
    }

    /// Operand ids of a node, in order.
    pub fn operands(&self, id: VarId) -> Vec<VarId> {
        let nodes = self.nodes.borrow();
        let n = &nodes[id.index()];
        n.args[..n.arity as usize]
            .iter()
            .map(|&a| VarId(a))
            .collect()
    }

    /// First error latched by the operator-overloaded [`Var`] surface, if any.
    pub fn check(&self) -> Result<(), AdError> {
        match self.error.get() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn latch(&self, err: AdError) {
        if self.error.get().is_none() {
            self.error.set(Some(err));
        }
    }

    fn push(
        &self,
        kind: OpKind,
        arity: u8,
        args: [u32; 2],
        partials: [f64; 2],
        value: f64,
    ) -> VarId {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            kind,
            arity,
            args,
            partials,
            value,
        });
        VarId(id as u32)
    }

    /// Records an input value.
    pub fn leaf(&self, value: f64) -> Result<VarId, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFiniteLeaf { value });
        }
        Ok(self.push(OpKind::Leaf, 0, [0, 0], [0.0, 0.0], value))
    }

    /// Records `op` applied to `operands`. Nothing is recorded on error.
    pub fn apply(&self, op: Op, operands: &[VarId]) -> Result<VarId, AdError> {
        if operands.len() != op.arity() {
            return Err(AdError::Arity {
                op: op.kind(),
                expected: op.arity(),
                got: operands.len(),
            });
        }
        let len = self.len();
        let mut vals = [0.0; 2];
        let mut args = [0u32; 2];
        for (i, id) in operands.iter().enumerate() {
            if id.index() >= len {
                return Err(AdError::InvalidId {
                    id: id.index(),
                    len,
                });
            }
            vals[i] = self.value(*id);
            args[i] = id.0;
        }
        let ev = eval(op, &vals[..operands.len()], len)?;
        if !ev.value.is_finite() {
            return Err(AdError::NonFinite { node: len });
        }
        Ok(self.push(op.kind(), op.arity() as u8, args, ev.partials, ev.value))
    }

    /// Leaf wrapped as a [`Var`]. A non-finite value is latched as an error.
    pub fn var(&self, value: f64) -> Var<'_> {
        if !value.is_finite() {
            self.latch(AdError::NonFiniteLeaf { value });
        }
        let id = self.push(OpKind::Leaf, 0, [0, 0], [0.0, 0.0], value);
        Var {
            tape: self,
            id,
            value,
        }
    }

    fn record(&self, op: Op, a: Var<'_>, b: Option<Var<'_>>) -> Var<'_> {
        let node = self.len();
        let (vals, args, n) = match b {
            Some(b) => ([a.value, b.value], [a.id.0, b.id.0], 2),
            None => ([a.value, 0.0], [a.id.0, 0], 1),
        };
        let ev = match eval(op, &vals[..n], node) {
            Ok(ev) => {
                if !ev.value.is_finite() {
                    self.latch(AdError::NonFinite { node });
                }
                ev
            }
            Err(err) => {
                self.latch(err);
                Eval {
                    value: f64::NAN,
                    partials: [0.0, 0.0],
                }
            }
        };
        let id = self.push(op.kind(), n as u8, args, ev.partials, ev.value);
        Var {
            tape: self,
            id,
            value: ev.value,
        }
    }

    /// Reverse sweep from `output`. Cost is linear in the tape prefix up to `output`.
    pub fn backward(&self, output: VarId) -> Result<GradientMap, AdError> {
        let nodes = self.nodes.borrow();
        let out = output.index();
        if out >= nodes.len() {
            return Err(AdError::InvalidId {
                id: out,
                len: nodes.len(),
            });
        }
        let mut adj = vec![0.0; nodes.len()];
        adj[out] = 1.0;
        for k in (0..=out).rev() {
            let a = adj[k];
            if a == 0.0 {
                continue;
            }
            let n = &nodes[k];
            for i in 0..n.arity as usize {
                adj[n.args[i] as usize] += a * n.partials[i];
            }
        }
        Ok(GradientMap { adjoints: adj })
    }
}

/// Adjoints of every node of a tape with respect to one scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    adjoints: Vec<f64>,
}

impl GradientMap {
    pub fn get(&self, id: VarId) -> f64 {
        self.adjoints[id.index()]
    }

    pub fn len(&self) -> usize {
        self.adjoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjoints.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.adjoints
    }
}

impl Index<VarId> for GradientMap {
    type Output = f64;

    fn index(&self, id: VarId) -> &f64 {
        &self.adjoints[id.index()]
    }
}

/// Copyable handle to a node on a [`Tape`], carrying its primal value.
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: VarId,
    value: f64,
}

impl<'t> Var<'t> {
    pub fn id(self) -> VarId {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: Op) -> Self {
        self.tape.record(op, self, None)
    }

    fn binary(self, op: Op, rhs: Self) -> Self {
        debug_assert!(
            std::ptr::eq(self.tape, rhs.tape),
            "vars from different tapes"
        );
        self.tape.record(op, self, Some(rhs))
    }
}

/// Scalar arithmetic shared by plain `f64` evaluation and taped evaluation.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    /// A constant living in the same context as `self`.
    fn lift(self, c: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn relu(self) -> Self;
    fn square(self) -> Self;
    fn sqrt(self) -> Self;
    fn min(self, other: Self) -> Self;
    fn max(self, other: Self) -> Self;
    fn clamp(self, lo: f64, hi: f64) -> Self;
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lift(self, c: f64) -> Self {
        c
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn square(self) -> Self {
        self * self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        f64::clamp(self, lo, hi)
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.value
    }
    fn lift(self, c: f64) -> Self {
        self.tape.var(c)
    }
    fn sin(self) -> Self {
        self.unary(Op::Sin)
    }
    fn cos(self) -> Self {
        self.unary(Op::Cos)
    }
    fn tanh(self) -> Self {
        self.unary(Op::Tanh)
    }
    fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid)
    }
    fn relu(self) -> Self {
        self.unary(Op::Relu)
    }
    fn square(self) -> Self {
        self.unary(Op::Square)
    }
    fn sqrt(self) -> Self {
        self.unary(Op::Sqrt)
    }
    fn min(self, other: Self) -> Self {
        self.binary(Op::Min, other)
    }
    fn max(self, other: Self) -> Self {
        self.binary(Op::Max, other)
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        self.unary(Op::Clamp { lo, hi })
    }
}

macro_rules! var_binop {
    ($trait:ident, $method:ident, $op:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.binary($op, rhs)
            }
        }
        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                self.binary($op, self.tape.var(rhs))
            }
        }
        impl<'t> $trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                rhs.tape.var(self).binary($op, rhs)
            }
        }
    };
}

var_binop!(Add, add, Op::Add);
var_binop!(Sub, sub, Op::Sub);
var_binop!(Mul, mul, Op::Mul);
var_binop!(Div, div, Op::Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn leaf_adjoint_is_one() {
        let tape = Tape::new();
        let x = tape.leaf(3.0).unwrap();
        let g = tape.backward(x).unwrap();
        assert_eq!(g[x], 1.0);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn unreachable_leaf_has_zero_adjoint() {
        let tape = Tape::new();
        let unused = tape.leaf(0.0).unwrap();
        let x = tape.leaf(2.0).unwrap();
        let y = tape.apply(Op::Square, &[x]).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g[unused], 0.0);
        assert_eq!(g[y], 1.0);
    }

    #[test]
    fn nan_leaf_is_rejected() {
        let tape = Tape::new();
        assert!(matches!(
            tape.leaf(f64::NAN),
            Err(AdError::NonFiniteLeaf { .. })
        ));
        assert!(tape.leaf(f64::INFINITY).is_err());
        assert!(tape.is_empty());
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.leaf(3.0).unwrap();
        let y = tape.leaf(4.0).unwrap();
        let z = tape.apply(Op::Mul, &[x, y]).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(tape.value(z), 12.0);
        assert_eq!(g[x], 4.0);
        assert_eq!(g[y], 3.0);
    }

    #[test]
    fn tanh_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(0.0).unwrap();
        let y = tape.apply(Op::Tanh, &[x]).unwrap();
        assert_eq!(tape.value(y), 0.0);
        assert_eq!(tape.backward(y).unwrap()[x], 1.0);
    }

    #[test]
    fn x_squared_sin_x() {
        let f = |x: f64| x * x * x.sin();
        let closed = 2.0 * 1f64.sin() + 1f64.cos();
        let fd = central_diff(f, 1.0);
        assert!((closed - fd).abs() < 1e-8);
        assert!((closed - 2.2232442754).abs() < 1e-9);

        let tape = Tape::new();
        let x = tape.var(1.0);
        let y = x.square() * x.sin();
        let g = tape.backward(y.id()).unwrap();
        assert!((g[x.id()] - closed).abs() < 1e-14);
    }

    #[test]
    fn tanh_chain() {
        let closed = 2.0 * (1.0 - 1f64.tanh().powi(2));
        let fd = central_diff(|x| (2.0 * x).tanh(), 0.5);
        assert!((closed - fd).abs() < 1e-8);
        assert!((closed - 0.8399486832).abs() < 1e-9);

        let tape = Tape::new();
        let x = tape.var(0.5);
        let y = (x * 2.0).tanh();
        let g = tape.backward(y.id()).unwrap();
        assert!((g[x.id()] - closed).abs() < 1e-14);
    }

    #[test]
    fn operand_ids_precede_node() {
        let tape = Tape::new();
        let x = tape.var(0.3);
        let y = (x * x).sin() + x.cos() / (x + 2.0);
        for k in 0..tape.len() {
            for op in tape.operands(VarId(k as u32)) {
                assert!(op.index() < k);
            }
        }
        assert!(y.value().is_finite());
    }

    #[test]
    fn domain_errors_carry_node() {
        let tape = Tape::new();
        let x = tape.leaf(1.0).unwrap();
        let z = tape.leaf(0.0).unwrap();
        assert_eq!(
            tape.apply(Op::Div, &[x, z]),
            Err(AdError::DivisionByZero { node: 2 })
        );
        let n = tape.leaf(-1.0).unwrap();
        assert_eq!(
            tape.apply(Op::Sqrt, &[n]),
            Err(AdError::SqrtDomain {
                node: 3,
                value: -1.0
            })
        );
        assert!(matches!(
            tape.apply(Op::Add, &[x]),
            Err(AdError::Arity { .. })
        ));
        assert!(matches!(
            tape.apply(Op::Neg, &[VarId(99)]),
            Err(AdError::InvalidId { .. })
        ));
        assert!(tape.backward(VarId(99)).is_err());
    }

    #[test]
    fn var_surface_latches_first_error() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let zero = tape.var(0.0);
        let bad = x / zero;
        let _ = (-x).sqrt();
        assert!(bad.value().is_nan());
        assert_eq!(tape.check(), Err(AdError::DivisionByZero { node: 2 }));
    }

    #[test]
    fn kink_conventions() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        let r = x.relu();
        assert_eq!(tape.backward(r.id()).unwrap()[x.id()], 0.0);

        let a = tape.var(1.5);
        let b = tape.var(1.5);
        let m = a.min(b);
        let g = tape.backward(m.id()).unwrap();
        assert_eq!((g[a.id()], g[b.id()]), (1.0, 0.0));
        let m = a.max(b);
        let g = tape.backward(m.id()).unwrap();
        assert_eq!((g[a.id()], g[b.id()]), (1.0, 0.0));

        for (v, d) in [(-2.0, 0.0), (-1.0, 0.0), (0.5, 1.0), (1.0, 0.0), (3.0, 0.0)] {
            let c = tape.var(v);
            let y = c.clamp(-1.0, 1.0);
            assert_eq!(tape.backward(y.id()).unwrap()[c.id()], d, "clamp at {v}");
        }
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
        let tape = Tape::new();
        let x = tape.var(-800.0);
        let s = x.sigmoid();
        assert!(tape.check().is_ok());
        assert_eq!(tape.backward(s.id()).unwrap()[x.id()], 0.0);
    }

    #[test]
    fn backward_is_deterministic() {
        let tape = Tape::new();
        let x = tape.var(0.7);
        let y = tape.var(-1.3);
        let mut acc = x * y;
        for _ in 0..50 {
            acc = (acc * x).tanh() + y.sin() * acc;
        }
        let g1 = tape.backward(acc.id()).unwrap();
        let g2 = tape.backward(acc.id()).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn real_on_f64_matches_tape_primal() {
        fn f<R: Real>(x: R) -> R {
            (x.square() + 1.0).sqrt() * x.sigmoid() - x.relu().min(x.cos()) + x.clamp(-0.5, 0.5)
        }
        for &x in &[-1.7, -0.2, 0.4, 1.9] {
            let tape = Tape::new();
            let v = f(tape.var(x));
            assert_eq!(v.value(), f(x));
        }
    }
}
