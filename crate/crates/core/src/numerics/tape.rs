//! Reverse-mode gradient tape over dense matrices.
//!
//! Nodes hold `DMatrix<E>` values where `E` is either a real scalar or a
//! `Complex<T>`. The tape only differentiates real-valued scalar outputs. For
//! a node `X` the accumulated adjoint is `G = ∂f/∂Re X + i·∂f/∂Im X`, i.e. the
//! conjugate-Wirtinger gradient (twice `∂f/∂X̄`), which is the direction of
//! steepest ascent; for real tapes this is the ordinary gradient. With this
//! convention `df = Re tr(Gᴴ dX)` for every node.
//!
//! Nodes are appended in evaluation order, so operands always precede their
//! consumers and a single reverse sweep visits each node once.

use nalgebra::{ComplexField, DMatrix};
use num_traits::Zero;

use super::counter::record;
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<E: ComplexField> {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, E),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Adjoint(NodeId),
    Transpose(NodeId),
    Inverse(NodeId),
    RealPart(NodeId),
    Trace(NodeId),
    Sum(NodeId),
    Recip(NodeId),
    Relu(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Softplus(NodeId),
    Clamp(NodeId, E::RealField, E::RealField),
    DiagEmbed(NodeId),
    DiagExtract(NodeId),
}

#[derive(Clone, Debug)]
struct Node<E: ComplexField> {
    op: Op<E>,
    value: DMatrix<E>,
    needs_grad: bool,
}

/// Recording of primitive matrix operations for reverse-mode differentiation.
///
/// One tape per evaluation; tapes are not shared across threads.
#[derive(Clone, Debug, Default)]
pub struct GradTape<E: ComplexField> {
    nodes: Vec<Node<E>>,
    leaves: Vec<NodeId>,
}

impl<E: ComplexField> GradTape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf variables in creation order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn value(&self, id: NodeId) -> &DMatrix<E> {
        &self.nodes[id.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> E {
        self.nodes[id.0].value[(0, 0)].clone()
    }

    fn push(&mut self, op: Op<E>, value: DMatrix<E>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        let (x, y) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(x, y, "{what}: shape mismatch {x:?} vs {y:?}");
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: DMatrix<E>) -> NodeId {
        let id = self.push(Op::Leaf, value, true);
        self.leaves.push(id);
        id
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: DMatrix<E>) -> NodeId {
        self.push(Op::Const, value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.value(a);
        let ng = self.ng(&[a]);
        self.push(Op::Neg(a), v, ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same_shape(a, b, "mul");
        let v = self.value(a).component_mul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(Op::Hadamard(a, b), v, ng)
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: NodeId, c: E) -> NodeId {
        let v = self.value(a) * c.clone();
        let ng = self.ng(&[a]);
        self.push(Op::Scale(a, c), v, ng)
    }

    /// Adds a constant scalar to every entry.
    pub fn add_scalar(&mut self, a: NodeId, c: E) -> NodeId {
        let v = self.value(a).map(|x| x + c.clone());
        let ng = self.ng(&[a]);
        self.push(Op::AddScalar(a), v, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dimension mismatch");
        record((va.nrows() * va.ncols() * vb.ncols()) as u64);
        let v = va * vb;
        let ng = self.ng(&[a, b]);
        self.push(Op::MatMul(a, b), v, ng)
    }

    /// Conjugate transpose.
    pub fn adjoint(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).adjoint();
        let ng = self.ng(&[a]);
        self.push(Op::Adjoint(a), v, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(Op::Transpose(a), v, ng)
    }

    /// Matrix inverse; fails with `SingularNetwork` when not invertible.
    pub fn inverse(&mut self, a: NodeId, what: &'static str) -> Result<NodeId> {
        let v = super::linalg::inverse(self.value(a), what)?;
        let n = v.nrows() as u64;
        record(n * n * n);
        let ng = self.ng(&[a]);
        Ok(self.push(Op::Inverse(a), v, ng))
    }

    /// Entrywise real part.
    pub fn real_part(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| E::from_real(x.real()));
        let ng = self.ng(&[a]);
        self.push(Op::RealPart(a), v, ng)
    }

    pub fn trace(&mut self, a: NodeId) -> NodeId {
        let v = DMatrix::from_element(1, 1, self.value(a).trace());
        let ng = self.ng(&[a]);
        self.push(Op::Trace(a), v, ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self
            .value(a)
            .iter()
            .fold(E::zero(), |acc, x| acc + x.clone());
        let ng = self.ng(&[a]);
        self.push(Op::Sum(a), DMatrix::from_element(1, 1, s), ng)
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| E::one() / x);
        let ng = self.ng(&[a]);
        self.push(Op::Recip(a), v, ng)
    }

    /// `max(Re x, 0)` elementwise; subgradient 0 at the kink.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| {
            let r = x.real();
            E::from_real(if r > E::RealField::zero() {
                r
            } else {
                E::RealField::zero()
            })
        });
        let ng = self.ng(&[a]);
        self.push(Op::Relu(a), v, ng)
    }

    /// Elementwise natural logarithm.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.ln());
        let ng = self.ng(&[a]);
        self.push(Op::Ln(a), v, ng)
    }

    /// Elementwise principal square root.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.sqrt());
        let ng = self.ng(&[a]);
        self.push(Op::Sqrt(a), v, ng)
    }

    /// `ln(1 + e^{Re x})` elementwise.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| E::from_real(softplus(x.real())));
        let ng = self.ng(&[a]);
        self.push(Op::Softplus(a), v, ng)
    }

    /// Clamps the real part into `[lo, hi]`; zero gradient outside.
    pub fn clamp(&mut self, a: NodeId, lo: E::RealField, hi: E::RealField) -> NodeId {
        let v = self.value(a).map(|x| {
            let r = x.real();
            E::from_real(if r < lo.clone() {
                lo.clone()
            } else if r > hi.clone() {
                hi.clone()
            } else {
                r
            })
        });
        let ng = self.ng(&[a]);
        self.push(Op::Clamp(a, lo, hi), v, ng)
    }

    /// Column vector → diagonal matrix.
    pub fn diag_embed(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.ncols(), 1, "diag_embed expects a column vector");
        let v = DMatrix::from_diagonal(&va.column(0).into_owned());
        let ng = self.ng(&[a]);
        self.push(Op::DiagEmbed(a), v, ng)
    }

    /// Square matrix → column vector of its diagonal.
    pub fn diag(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(va.is_square(), "diag expects a square matrix");
        let v = DMatrix::from_column_slice(va.nrows(), 1, va.diagonal().as_slice());
        let ng = self.ng(&[a]);
        self.push(Op::DiagExtract(a), v, ng)
    }

    /// Gradients of the real scalar `output` with respect to `wrt`.
    ///
    /// Leaves that do not influence the output get a zero gradient.
    pub fn grad(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<DMatrix<E>>> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: out.nrows(),
                cols: out.ncols(),
            });
        }
        let mut adj: Vec<Option<DMatrix<E>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(DMatrix::from_element(1, 1, E::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.backprop(idx, &g, &mut adj);
            // keep leaf adjoints for the caller
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
            }
        }

        Ok(wrt
            .iter()
            .map(|id| {
                let shape = self.value(*id).shape();
                adj.get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1))
            })
            .collect())
    }

    fn acc(&self, adj: &mut [Option<DMatrix<E>>], id: NodeId, g: DMatrix<E>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut adj[id.0] {
            Some(cur) => *cur += g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, idx: usize, g: &DMatrix<E>, adj: &mut [Option<DMatrix<E>>]) {
        let conj = |m: &DMatrix<E>| m.map(|x| x.conjugate());
        let y = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.acc(adj, *a, g.clone());
                self.acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(adj, *a, g.clone());
                self.acc(adj, *b, -g);
            }
            Op::Neg(a) => self.acc(adj, *a, -g),
            Op::Hadamard(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.acc(adj, *a, g.component_mul(&conj(vb)));
                }
                if self.nodes[b.0].needs_grad {
                    self.acc(adj, *b, g.component_mul(&conj(va)));
                }
            }
            Op::Scale(a, c) => self.acc(adj, *a, g * c.clone().conjugate()),
            Op::AddScalar(a) => self.acc(adj, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    record((g.nrows() * g.ncols() * vb.nrows()) as u64);
                    self.acc(adj, *a, g * vb.adjoint());
                }
                if self.nodes[b.0].needs_grad {
                    record((va.ncols() * va.nrows() * g.ncols()) as u64);
                    self.acc(adj, *b, va.adjoint() * g);
                }
            }
            Op::Adjoint(a) => self.acc(adj, *a, g.adjoint()),
            Op::Transpose(a) => self.acc(adj, *a, g.transpose()),
            Op::Inverse(a) => {
                let yh = y.adjoint();
                self.acc(adj, *a, -(&yh * g * &yh));
            }
            Op::RealPart(a) => self.acc(adj, *a, g.map(|x| E::from_real(x.real()))),
            Op::Trace(a) => {
                let n = self.value(*a).nrows();
                self.acc(adj, *a, DMatrix::identity(n, n) * g[(0, 0)].clone());
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(adj, *a, DMatrix::from_element(r, c, g[(0, 0)].clone()));
            }
            Op::Recip(a) => {
                // d(1/x) = −dx/x² = −y² dx
                let d = y.map(|v| -(v.clone() * v).conjugate());
                self.acc(adj, *a, g.component_mul(&d));
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let d = g.zip_map(va, |gi, x| {
                    if x.real() > E::RealField::zero() {
                        E::from_real(gi.real())
                    } else {
                        E::zero()
                    }
                });
                self.acc(adj, *a, d);
            }
            Op::Ln(a) => {
                let d = self.value(*a).map(|x| (E::one() / x).conjugate());
                self.acc(adj, *a, g.component_mul(&d));
            }
            Op::Sqrt(a) => {
                let two = E::one() + E::one();
                let d = y.map(|v| (E::one() / (v * two.clone())).conjugate());
                self.acc(adj, *a, g.component_mul(&d));
            }
            Op::Softplus(a) => {
                let d = g.zip_map(self.value(*a), |gi, x| {
                    E::from_real(gi.real() * sigmoid(x.real()))
                });
                self.acc(adj, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_map(self.value(*a), |gi, x| {
                    let r = x.real();
                    if r < lo.clone() || r > hi.clone() {
                        E::zero()
                    } else {
                        E::from_real(gi.real())
                    }
                });
                self.acc(adj, *a, d);
            }
            Op::DiagEmbed(a) => {
                let n = g.nrows();
                let d = DMatrix::from_fn(n, 1, |i, _| g[(i, i)].clone());
                self.acc(adj, *a, d);
            }
            Op::DiagExtract(a) => {
                let n = g.nrows();
                let d = DMatrix::from_fn(
                    n,
                    n,
                    |i, j| if i == j { g[(i, 0)].clone() } else { E::zero() },
                );
                self.acc(adj, *a, d);
            }
        }
    }
}

fn softplus<R: nalgebra::RealField>(x: R) -> R {
    // ln(1+e^x) = max(x,0) + ln(1+e^{−|x|})
    let zero = R::zero();
    let m = if x > zero.clone() { x.clone() } else { zero };
    m + (R::one() + (-x.abs()).exp()).ln()
}

fn sigmoid<R: nalgebra::RealField>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}
