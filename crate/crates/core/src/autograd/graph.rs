use std::cell::RefCell;
use std::sync::Arc;

use super::real::Real;

/// Immutable n-d array; cloning shares the buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::ZERO; n])
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value])
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(
            self.shape.len(),
            4,
            "expected NCHW tensor, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::new(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Self {
            shape,
            data: self.data.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        )
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Reverse-mode tape. Nodes are appended in execution order, so every
/// parent id is smaller than its child's.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a, T> {
    slots: &'a mut [Option<Vec<T>>],
    lens: &'a [usize],
    wants: &'a [bool],
}

impl<T: Real> GradSink<'_, T> {
    /// Whether `v` participates in differentiation at all.
    #[inline]
    pub fn wants(&self, v: Var) -> bool {
        self.wants[v.0]
    }

    /// Accumulate into the gradient buffer of `v` (allocated zeroed on first use).
    #[inline]
    pub fn add(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants[v.0] {
            return;
        }
        let len = self.lens[v.0];
        let slot = self.slots[v.0].get_or_insert_with(|| vec![T::ZERO; len]);
        f(slot);
    }
}

/// Gradients of leaf parameters after [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push_node(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_node(Node {
            value,
            requires_grad: false,
            backward: None,
        })
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push_node(Node {
            value,
            requires_grad: true,
            backward: None,
        })
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Record an operation. `backward` receives the output gradient and must
    /// accumulate parent gradients through the sink. It is dropped when no
    /// parent requires a gradient.
    pub fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&[T], &mut GradSink<'_, T>) + 'static,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push_node(Node {
            value,
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        })
    }

    /// Same value, no gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    /// Back-propagate from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.len(),
            1,
            "backward() needs a scalar loss"
        );
        let lens: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let wants: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(backward) = &nodes[i].backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let (before, _) = grads.split_at_mut(i);
            let mut sink = GradSink {
                slots: before,
                lens: &lens[..i],
                wants: &wants[..i],
            };
            backward(&g, &mut sink);
        }
        Gradients { grads }
    }
}
