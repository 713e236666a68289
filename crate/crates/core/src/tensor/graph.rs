use super::kernels::{self, BatchNormCache};
use super::{ConvSpec, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, cache: BatchNormCache<T> },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        scale: Vec<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
        epsilon: f64,
    },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Concat { parts: Vec<Var>, channels: Vec<usize> },
    Softmax { x: Var },
    CrossEntropy { logits: Var, labels: Vec<u8>, ignore: u8, probs: Tensor<T>, count: usize },
    Sum { x: Var },
    Scale { x: Var, factor: T },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamically recorded computation graph.
///
/// Nodes are appended in evaluation order, so node indices are already a
/// topological order and backward simply walks them in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], one per `requires_grad` leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("graph values live until backward")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(y, Op::Conv2d { x, w, b, spec: *spec }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = kernels::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(y, Op::ConvTranspose2d { x, w, b, spec: *spec }, rg))
    }

    /// Batch normalisation using batch statistics. The cache is returned so
    /// the caller can update running statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<(Var, &BatchNormCache<T>)> {
        if epsilon <= 0.0 {
            return Err(Error::Config("batchnorm epsilon must be positive".into()));
        }
        let (y, cache) = kernels::batchnorm2d_train(self.value(x), self.value(gamma), self.value(beta), epsilon)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(y, Op::BatchNormTrain { x, gamma, beta, cache }, rg);
        let Op::BatchNormTrain { cache, .. } = &self.nodes[v.0].op else {
            unreachable!()
        };
        Ok((v, cache))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        epsilon: f64,
    ) -> Result<Var> {
        if epsilon <= 0.0 {
            return Err(Error::Config("batchnorm epsilon must be positive".into()));
        }
        let (y, scale) = kernels::batchnorm2d_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            epsilon,
        )?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                scale,
                running_mean: running_mean.clone(),
                running_var: running_var.clone(),
                epsilon,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2d(self.value(x), kernel, stride, padding)?;
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::MaxPool { x, argmax }, rg))
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = kernels::upsample_bilinear(self.value(x), out_h, out_w)?;
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::Upsample { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        let rg = self.requires_grad(x);
        self.push(y, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::sub(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::mul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = kernels::concat_channels(&tensors)?;
        let channels = tensors.iter().map(|t| t.shape()[1]).collect();
        let rg = self.any_grad(parts);
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                channels,
            },
            rg,
        ))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let y = kernels::softmax_channels(self.value(x))?;
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::Softmax { x }, rg))
    }

    /// Mean pixel-wise cross-entropy; `labels` is `N×H×W`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let (loss, probs, count) = kernels::cross_entropy(self.value(logits), labels, ignore)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(y, Op::Sum { x }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        let rg = self.requires_grad(x);
        self.push(y, Op::Scale { x, factor }, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the graph; the
    /// returned gradients cover every leaf created with `requires_grad`.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let contributions = self.node_backward(i, &dy)?;
            for (parent, g) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            // Node i has no remaining consumers.
            self.nodes[i].value = None;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.as_ref().unwrap().shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, i: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let need = [rg(*x), rg(*w), b.is_some_and(rg)];
                let g = kernels::conv2d_backward(self.value(*x), self.value(*w), spec, dy, need)?;
                push_opt(&mut out, *x, g.input);
                push_opt(&mut out, *w, g.weight);
                if let Some(b) = b {
                    push_opt(&mut out, *b, g.bias);
                }
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                let need = [rg(*x), rg(*w), b.is_some_and(rg)];
                let g = kernels::conv_transpose2d_backward(self.value(*x), self.value(*w), spec, dy, need)?;
                push_opt(&mut out, *x, g.input);
                push_opt(&mut out, *w, g.weight);
                if let Some(b) = b {
                    push_opt(&mut out, *b, g.bias);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, cache } => {
                let dims = self.value(*x).dims4("batchnorm2d")?;
                let (dx, dg, db) = kernels::batchnorm2d_train_backward(dims, self.value(*gamma), cache, dy);
                out.extend([(*x, dx), (*gamma, dg), (*beta, db)]);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                scale,
                running_mean,
                running_var,
                epsilon,
            } => {
                let (dx, dg, db) =
                    kernels::batchnorm2d_eval_backward(self.value(*x), scale, running_mean, running_var, *epsilon, dy);
                out.extend([(*x, dx), (*gamma, dg), (*beta, db)]);
            }
            Op::MaxPool { x, argmax } => {
                out.push((*x, kernels::maxpool2d_backward(self.value(*x).shape(), argmax, dy)));
            }
            Op::Upsample { x } => {
                out.push((*x, kernels::upsample_bilinear_backward(self.value(*x).shape(), dy)));
            }
            Op::Relu { x } => {
                let y = self.nodes[i].value.as_ref().unwrap();
                out.push((*x, kernels::relu_backward(y, dy)));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.map(|v| -v)));
            }
            Op::Mul { a, b } => {
                out.push((*a, kernels::mul(dy, self.value(*b))?));
                out.push((*b, kernels::mul(dy, self.value(*a))?));
            }
            Op::Concat { parts, channels } => {
                let pieces = kernels::concat_channels_backward(dy, channels);
                out.extend(parts.iter().copied().zip(pieces));
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.as_ref().unwrap();
                out.push((*x, kernels::softmax_channels_backward(y, dy)));
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                probs,
                count,
            } => {
                out.push((
                    *logits,
                    kernels::cross_entropy_backward(probs, labels, *ignore, *count, dy.data()[0]),
                ));
            }
            Op::Sum { x } => {
                out.push((*x, Tensor::full(self.value(*x).shape(), dy.data()[0])));
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                out.push((*x, dy.map(|v| v * f)));
            }
        }
        Ok(out)
    }
}

fn push_opt<T>(out: &mut Vec<(Var, Tensor<T>)>, v: Var, g: Option<Tensor<T>>) {
    if let Some(g) = g {
        out.push((v, g));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn add_passes_gradient_unchanged() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64), true);
        let b = g.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| -(i as f64)), true);
        let c = g.add(a, b).unwrap();
        let w = g.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| (i + 1) as f64), false);
        let d = g.mul(c, w).unwrap();
        let s = g.sum(d);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[3], 2.0), true);
        let unused = g.leaf(Tensor::full(&[2], 1.0), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }
}
