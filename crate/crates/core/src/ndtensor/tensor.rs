use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::{Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward rule of an op: receives the gradient of the op output and a
/// `needs_grad` flag per input, returns one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
    grad: Mutex<Option<Vec<f64>>>,
}

/// Dense row-major array that records the ops applied to it so gradients can
/// be propagated back to its leaves.
///
/// Cloning is cheap (shared node). Data is immutable after construction; the
/// only mutable state is the gradient accumulator of leaf tensors.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn,
            grad: Mutex::new(None),
        }))
    }

    fn checked(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::build(data, shape.to_vec(), requires_grad, None))
    }

    /// Constant tensor; gradients are never propagated into it.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::checked(data, shape, false)
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::checked(data, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::build(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![value], vec![], false, None)
    }

    /// Creates the output of a custom differentiable op.
    ///
    /// The backward rule is only retained when at least one input requires a
    /// gradient, so inference-only graphs carry no closures.
    pub fn from_op<F>(
        op: &'static str,
        data: Vec<f64>,
        shape: &[usize],
        inputs: Vec<Tensor>,
        backward: F,
    ) -> Result<Tensor>
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    {
        if numel(shape) != data.len() {
            return Err(TensorError::Invalid {
                op,
                msg: format!(
                    "produced {} values for shape {:?}",
                    data.len(),
                    shape.to_vec()
                ),
            });
        }
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            op,
            inputs,
            backward: Box::new(backward),
        });
        Ok(Tensor::build(data, shape.to_vec(), requires_grad, grad_fn))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the op that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Backpropagates from a single-element tensor with seed 1.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        self.backward_with(vec![1.0])
    }

    /// Backpropagates an arbitrary output gradient. Leaf gradients are
    /// accumulated (`+=`), never overwritten.
    pub fn backward_with(&self, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: self.shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let needs: Vec<bool> = gf.inputs.iter().map(Tensor::requires_grad).collect();
                    let input_grads = (gf.backward)(&g, &needs);
                    debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}", gf.op);
                    for ((input, ig), need) in gf.inputs.iter().zip(input_grads).zip(&needs) {
                        let (Some(ig), true) = (ig, *need) else {
                            continue;
                        };
                        debug_assert_eq!(ig.len(), input.numel(), "{}", gf.op);
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the grad-requiring subgraph: every node appears after
    /// all of its inputs, and exactly once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for input in gf.inputs.iter().rev() {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_length_is_checked() {
        assert!(matches!(
            Tensor::new(vec![1.0, 2.0], &[3]),
            Err(TensorError::DataLength { .. })
        ));
    }

    #[test]
    fn shared_node_is_visited_once() {
        // y = x*x + x reuses x three times through two paths.
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let sq = x.mul(&x).unwrap();
        let y = sq.add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
        assert_eq!(y.topo_order().len(), 3);
    }

    #[test]
    fn gradients_accumulate_across_passes() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        x.scale(3.0).sum().backward().unwrap();
        x.scale(3.0).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_needs_scalar_root() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            x.scale(2.0).backward(),
            Err(TensorError::NotScalar(_))
        ));
    }

    #[test]
    fn constants_carry_no_graph() {
        let a = Tensor::new(vec![1.0], &[1]).unwrap();
        let b = a.add(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(b.is_leaf());
    }
}
