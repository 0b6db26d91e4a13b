//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Define-by-run: ops executed through a [`Tape`] record a backward closure;
//! `backward` walks the node list in reverse construction order, which is a
//! valid topological order by construction. The engine is generic over f32
//! (training) and f64 (oracle/gradient-check mode); finite-difference
//! tolerances below 1e-4 are unattainable in f32.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod scan;

/// Element type of the engine: f32 for training, f64 for oracle checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
}
impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }
    pub fn from_code(c: u8) -> Option<Dtype> {
        match c {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Shorthand for converting f64 literals into the generic scalar type.
#[inline]
pub fn sc<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("f64 -> scalar")
}

/// Dense n-dimensional tensor. Values are immutable; gradients live on the tape.
#[derive(Clone)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    node: Option<usize>,
}

impl<F: Scalar> Tensor<F> {
    /// Untracked tensor (a constant from the tape's point of view).
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn from_f64s(data: &[f64], shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(data.iter().map(|&x| sc(x)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![F::zero(); n]),
            node: None,
        }
    }

    pub fn scalar(x: F) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![x]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Same values, no tape history.
    pub fn detach(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn to_f64s(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.data)
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor{:?}{}",
            self.shape,
            if self.node.is_some() { " (tracked)" } else { "" }
        )?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

/// Backward closure: receives the output gradient, returns (parent-node,
/// gradient-contribution) pairs.
type BackFn<F> = Box<dyn Fn(&[F]) -> Vec<(usize, Vec<F>)>>;

struct Node<F> {
    len: usize,
    back: Option<BackFn<F>>,
}

/// Computation tape. Nodes are appended in construction order, so reverse
/// iteration visits each node exactly once in valid topological order.
/// A tape is confined to one thread; ops on untracked tensors are pure.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Tracked leaf; its gradient is retained and queryable after backward.
    pub fn leaf(&self, data: Vec<F>, shape: &[usize]) -> Result<Tensor<F>> {
        let mut t = Tensor::from_vec(data, shape)?;
        let id = self.push_node(t.numel(), None);
        t.node = Some(id);
        Ok(t)
    }

    pub fn leaf_from(&self, t: &Tensor<F>) -> Tensor<F> {
        let mut out = t.detach();
        let id = self.push_node(out.numel(), None);
        out.node = Some(id);
        out
    }

    fn push_node(&self, len: usize, back: Option<BackFn<F>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { len, back });
        nodes.len() - 1
    }

    /// Register an op output. If no parent is tracked the result stays untracked
    /// and `make_back` is never called.
    pub(crate) fn record<MB>(
        &self,
        data: Vec<F>,
        shape: Vec<usize>,
        parents: &[&Tensor<F>],
        make_back: MB,
    ) -> Tensor<F>
    where
        MB: FnOnce() -> BackFn<F>,
    {
        let tracked = parents.iter().any(|p| p.node.is_some());
        let mut out = Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        };
        if tracked {
            let id = self.push_node(out.numel(), Some(make_back()));
            out.node = Some(id);
        }
        out
    }

    /// Reverse pass from a scalar loss. Returns per-leaf gradients.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<Gradients<F>> {
        let root = loss
            .node
            .ok_or_else(|| Error::Contract("backward on an untracked tensor".into()))?;
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![F::one()]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &nodes[id].back {
                for (pid, contrib) in back(&g) {
                    debug_assert!(pid < id, "tape order violated");
                    let slot = &mut grads[pid];
                    match slot {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(&contrib) {
                                *a += *c;
                            }
                        }
                        None => *slot = Some(contrib),
                    }
                }
                // Interior gradients are dropped (taken above); only leaves kept.
            } else {
                grads[id] = Some(g); // leaf: retain
            }
        }
        // Leaves never reached get explicit zeros.
        for (id, node) in nodes.iter().enumerate() {
            if node.back.is_none() && grads[id].is_none() {
                grads[id] = Some(vec![F::zero(); node.len]);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward pass, addressed by leaf tensor.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, t: &Tensor<F>) -> Option<&[F]> {
        t.node
            .and_then(|id| self.grads.get(id))
            .and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip_and_scalar() {
        let tape: Tape<f64> = Tape::new();
        let t = tape.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert!(t.is_tracked());
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn from_vec_shape_mismatch() {
        let r = Tensor::<f64>::from_vec(vec![1.0; 5], &[2, 3]);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_on_nonscalar_is_contract_error() {
        let tape: Tape<f64> = Tape::new();
        let t = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(tape.backward(&t), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_sum_linearity() {
        // grad of (l1 + l2) equals grad(l1) + grad(l2), exactly in f64.
        let run = |mode: u8| -> Vec<f64> {
            let tape: Tape<f64> = Tape::new();
            let x = tape.leaf(vec![1.5, -2.0, 0.25], &[3]).unwrap();
            let sq = tape.mul(&x, &x).unwrap();
            let l1 = tape.sum_all(&sq).unwrap();
            let ex = tape.exp(&x).unwrap();
            let l2 = tape.sum_all(&ex).unwrap();
            let loss = match mode {
                0 => tape.add(&l1, &l2).unwrap(),
                1 => l1,
                _ => l2,
            };
            tape.backward(&loss).unwrap().wrt(&x).unwrap().to_vec()
        };
        let combined = run(0);
        let g1 = run(1);
        let g2 = run(2);
        for i in 0..3 {
            assert_eq!(combined[i], g1[i] + g2[i]);
        }
    }
}
