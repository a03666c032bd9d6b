use super::ops::{self, Activation, BatchNormCache, ConvGeom, LossKind, LossTarget, Mode, RunningStats};
use super::{NnError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param(usize),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom, cols: Vec<T> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: BatchNormCache<T> },
    Activation { x: NodeId, kind: Activation },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Concat { a: NodeId, b: NodeId },
    Modulate { f: NodeId, gamma: NodeId, beta: NodeId },
    Reshape { x: NodeId },
    Sum { x: NodeId },
    Loss { pred: NodeId, target: LossTarget<T>, kind: LossKind },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Record of one forward pass; consumed by [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of parameter `param` summed over all of its uses on the tape.
    pub fn param(&self, param: usize) -> Option<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for &(p, id) in &self.params {
            if p != param {
                continue;
            }
            if let Some(g) = self.node(id) {
                match acc.as_mut() {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Leaf for trainable parameter number `index`.
    pub fn param(&mut self, index: usize, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Param(index))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId, NnError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geom = ops::conv_geometry(xv, wv, bv, stride, padding)?;
        let (out, cols) = ops::conv2d_forward_cached(xv, wv, bv, stride, padding)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }))
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<NodeId, NnError> {
        let (out, cache) = ops::batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), running, mode)?;
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, cache }))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId, NnError> {
        let out = ops::activation_forward(self.value(x), kind)?;
        Ok(self.push(out, Op::Activation { x, kind }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.activation(x, Activation::Softmax)
    }

    pub fn maxpool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId, NnError> {
        let (out, argmax) = ops::maxpool2d_forward(self.value(x), kernel, stride)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, NnError> {
        let out = ops::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let out = ops::concat_forward(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    /// `f * (1 + gamma) + beta`.
    pub fn modulate(&mut self, f: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, NnError> {
        let out = ops::modulate_forward(self.value(f), self.value(gamma), self.value(beta))?;
        Ok(self.push(out, Op::Modulate { f, gamma, beta }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NnError> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn loss(&mut self, pred: NodeId, target: LossTarget<T>, kind: LossKind) -> Result<NodeId, NnError> {
        let v = ops::loss(self.value(pred), &target, kind)?;
        if !v.is_finite() {
            return Err(NnError::NonFinite(format!("{kind:?} loss is {v}")));
        }
        Ok(self.push(Tensor::scalar(T::from_f64(v)), Op::Loss { pred, target, kind }))
    }

    /// Reverse-mode sweep from scalar node `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>, NnError> {
        if self.nodes.is_empty() {
            return Err(NnError::EmptyTape);
        }
        let Some(root_node) = self.nodes.get(root.0) else {
            return Err(NnError::Invalid(format!("node {} is not on this tape", root.0)));
        };
        if root_node.value.len() != 1 {
            return Err(NnError::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(root_node.value.shape(), vec![T::one()])?);

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
            match grads[id.0].as_mut() {
                Some(a) => a.add_assign(&g),
                None => grads[id.0] = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Conv2d { x, w, b, geom, cols } => {
                    let (dx, dw, db) = ops::conv2d_backward(geom, self.value(*w), cols, &gy);
                    let dx = dx.reshape(self.value(*x).shape())?;
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let (dx, dg, db) = ops::batchnorm_backward(cache, self.value(*gamma), &gy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                }
                Op::Activation { x, kind } => {
                    let dx = ops::activation_backward(self.value(*x), &node.value, &gy, *kind);
                    acc(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::maxpool2d_backward(self.value(*x).shape(), argmax, &gy);
                    acc(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &gy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = ops::concat_backward(self.value(*a).dim(1), &gy);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Modulate { f, gamma, beta } => {
                    let (df, dg, db) = ops::modulate_backward(self.value(*f), self.value(*gamma), &gy);
                    acc(&mut grads, *f, df);
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                }
                Op::Reshape { x } => {
                    let dx = gy.clone().reshape(self.value(*x).shape())?;
                    acc(&mut grads, *x, dx);
                }
                Op::Sum { x } => {
                    let g = gy.data()[0];
                    acc(&mut grads, *x, Tensor::full(self.value(*x).shape(), g));
                }
                Op::Loss { pred, target, kind } => {
                    let g = gy.data()[0];
                    let d = ops::loss_backward(self.value(*pred), target, *kind)?.map(|v| v * g);
                    acc(&mut grads, *pred, d);
                }
            }
            grads[i] = Some(gy);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.node(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::zeros(&[1]));
        let y = t.sigmoid(x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.node(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_on_empty_tape_errors() {
        let t = Tape::<f32>::new();
        assert!(matches!(t.backward(NodeId(0)), Err(NnError::EmptyTape)));
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut t = Tape::<f64>::new();
        let a = t.param(0, Tensor::new(&[1], vec![2.0]).unwrap());
        let b = t.param(0, Tensor::new(&[1], vec![2.0]).unwrap());
        let sa = t.sum(a);
        let c = t.concat_scalar_pair(sa, b);
        let g = t.backward(c).unwrap();
        assert_eq!(g.param(0).unwrap().data(), &[2.0]);
    }

    impl Tape<f64> {
        fn concat_scalar_pair(&mut self, a: NodeId, b: NodeId) -> NodeId {
            let a2 = self.reshape(a, &[1, 1]).unwrap();
            let b2 = self.reshape(b, &[1, 1]).unwrap();
            let c = self.concat(a2, b2).unwrap();
            self.sum(c)
        }
    }
}
