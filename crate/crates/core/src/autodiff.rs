//! Minimal scalar reverse-mode tape. Slow but transparent; it backs the
//! unrolled reference gradient that the adjoint recursion is checked against.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

const NONE: usize = usize::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [(usize, f64); 2],
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    val: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, val: f64, a: (usize, f64), b: (usize, f64)) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: [a, b] });
        Var {
            tape: self,
            idx: nodes.len() - 1,
            val,
        }
    }

    /// Independent input (or constant: a leaf whose gradient is ignored).
    pub fn var(&self, val: f64) -> Var<'_> {
        self.push(val, (NONE, 0.0), (NONE, 0.0))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// d(out)/d(node) for every node on the tape.
    pub fn gradient(&self, out: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[out.idx] = 1.0;
        for i in (0..=out.idx).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            for &(p, w) in &nodes[i].parents {
                if p != NONE {
                    adj[p] += a * w;
                }
            }
        }
        adj
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.val
    }

    pub fn index(self) -> usize {
        self.idx
    }

    fn unary(self, val: f64, d: f64) -> Self {
        self.tape.push(val, (self.idx, d), (NONE, 0.0))
    }

    pub fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }

    pub fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }

    pub fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }

    pub fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }

    /// `x / (1 + exp(-x))`.
    pub fn silu(self) -> Self {
        let x = self.val;
        let s = 1.0 / (1.0 + (-x).exp());
        self.unary(x * s, s + x * s * (1.0 - s))
    }

    pub fn square(self) -> Self {
        self.unary(self.val * self.val, 2.0 * self.val)
    }

    pub fn scale(self, c: f64) -> Self {
        self.unary(self.val * c, c)
    }

    pub fn shift(self, c: f64) -> Self {
        self.unary(self.val + c, 1.0)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Self) -> Self {
        self.tape
            .push(self.val + o.val, (self.idx, 1.0), (o.idx, 1.0))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Self) -> Self {
        self.tape
            .push(self.val - o.val, (self.idx, 1.0), (o.idx, -1.0))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Self) -> Self {
        self.tape
            .push(self.val * o.val, (self.idx, o.val), (o.idx, self.val))
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Self) -> Self {
        let q = self.val / o.val;
        self.tape
            .push(q, (self.idx, 1.0 / o.val), (o.idx, -q / o.val))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Self {
        self.shift(c)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Self {
        self.scale(c)
    }
}
