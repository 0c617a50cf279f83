//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes its output
//! immediately and appends a node. [`Graph::backward`] then walks the tape in
//! reverse, so node order is a valid topological order by construction.

use std::borrow::Cow;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ops::{self, ActivationKind, BatchNormCache, BatchStats, Mode, Padding, PoolKind};
use crate::tensor::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    },
    Pool {
        input: NodeId,
        kind: PoolKind,
        window: usize,
        stride: usize,
        padding: Padding,
        argmax: Option<Vec<usize>>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: T,
    },
    Sum {
        input: NodeId,
    },
    Activation {
        input: NodeId,
        kind: ActivationKind,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BatchNormCache<T>,
    },
    Dropout {
        input: NodeId,
        mask: Vec<T>,
    },
    Reshape {
        input: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    SelectColumn {
        input: NodeId,
        column: usize,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Parameter leaves may borrow their tensors for `'a`.
pub struct Graph<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
    params: Vec<(String, NodeId)>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Graph<'a, T> {
    /// `seed` drives dropout masks in train mode.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::State(format!(
                "node {} has not been evaluated (graph holds {} nodes)",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    /// Constant leaf; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (e.g. an image being attributed).
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Named trainable leaf borrowing its tensor.
    pub fn param(&mut self, name: impl Into<String>, value: &'a Tensor<T>) -> NodeId {
        let id = self.push(Cow::Borrowed(value), Op::Leaf, true);
        self.params.push((name.into(), id));
        id
    }

    /// Constant leaf borrowing its tensor (e.g. a frozen statistic).
    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernels),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, kernels];
        deps.extend(bias);
        Ok(self.push_op(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
            &deps,
        ))
    }

    pub fn pool2d(
        &mut self,
        input: NodeId,
        kind: PoolKind,
        window: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let pooled = ops::pool2d(self.value(input), kind, window, stride, padding)?;
        Ok(self.push_op(
            pooled.output,
            Op::Pool {
                input,
                kind,
                window,
                stride,
                padding,
                argmax: pooled.argmax,
            },
            &[input],
        ))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::global_avg_pool(self.value(input))?;
        Ok(self.push_op(out, Op::GlobalAvgPool { input }, &[input]))
    }

    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let out = ops::dense(self.value(input), self.value(weights), bias.map(|b| self.value(b)))?;
        let mut deps = vec![input, weights];
        deps.extend(bias);
        Ok(self.push_op(out, Op::Dense { input, weights, bias }, &deps))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::residual_add(self.value(a), self.value(b))?;
        Ok(self.push_op(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push_op(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> NodeId {
        let out = self.value(input).scale(factor);
        self.push_op(out, Op::Scale { input, factor }, &[input])
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = T::lit(self.value(input).sum_f64());
        self.push_op(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn activation(&mut self, input: NodeId, kind: ActivationKind) -> Result<NodeId> {
        let out = ops::activation(self.value(input), kind)?;
        Ok(self.push_op(out, Op::Activation { input, kind }, &[input]))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.activation(input, ActivationKind::Relu)
    }

    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        self.activation(input, ActivationKind::Softmax)
    }

    /// Batch normalisation in the graph's mode. Returns updated running statistics in train mode.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &BatchStats<T>,
        momentum: f64,
        epsilon: f64,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let out = ops::batchnorm(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running,
            self.mode,
            momentum,
            epsilon,
        )?;
        let id = self.push_op(
            out.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache: out.cache,
            },
            &[input, gamma, beta],
        );
        Ok((id, out.running))
    }

    /// Inverted dropout; identity in infer mode.
    pub fn dropout(&mut self, input: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                message: format!("probability {p} outside [0, 1)"),
            });
        }
        if self.mode == Mode::Infer || p == 0.0 {
            return Ok(input);
        }
        let mask = ops::dropout_mask::<T, _>(self.value(input).len(), p, &mut self.rng);
        let x = self.value(input);
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Dropout { input, mask }, &[input]))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape { input }, &[input]))
    }

    /// Collapse every axis after the first.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).shape();
        let b = s.first().copied().unwrap_or(1);
        let rest = self.value(input).len() / b;
        self.reshape(input, vec![b, rest])
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = ops::concat_channels(&values)?;
        Ok(self.push_op(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    /// Mean softmax cross-entropy of `logits` (`B x K`) against integer labels; scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = ops::cross_entropy_loss(self.value(logits), labels)?;
        Ok(self.push_op(
            Tensor::scalar(T::lit(loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Column `column` of a `B x K` node, as a length-`B` node.
    pub fn select_column(&mut self, input: NodeId, column: usize) -> Result<NodeId> {
        let x = self.value(input);
        x.expect_rank("select_column", 2)?;
        let k = x.shape()[1];
        if column >= k {
            return Err(TensorError::Invalid {
                op: "select_column",
                message: format!("column {column} outside [0, {k})"),
            });
        }
        let data: Vec<T> = x.data().chunks(k).map(|r| r[column]).collect();
        let out = Tensor::new([data.len()], data)?;
        Ok(self.push_op(out, Op::SelectColumn { input, column }, &[input]))
    }

    /// Fingerprint of every piecewise-linear branch decision (ReLU signs, max-pool winners).
    ///
    /// Two evaluations with equal fingerprints lie on the same linear piece, which is what
    /// finite-difference checks need to be meaningful.
    pub fn branch_fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Activation {
                    input,
                    kind: ActivationKind::Relu,
                } => {
                    for v in self.value(*input).data() {
                        feed((*v > T::zero()) as u64);
                    }
                }
                Op::Pool {
                    argmax: Some(idx), ..
                } => idx.iter().for_each(|&i| feed(i as u64)),
                _ => {}
            }
        }
        h
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Dimension {
                op: "backward",
                axis: "loss",
                expected: 1,
                actual: lv.len(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, i, g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, op: &Op<T>, at: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let rg = |id: &NodeId| self.nodes[id.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                let (di, dk, db) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*kernels),
                    &g,
                    *stride,
                    *padding,
                    rg(input),
                )?;
                if let Some(di) = di {
                    self.accumulate(grads, *input, di)?;
                }
                self.accumulate(grads, *kernels, dk)?;
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Pool {
                input,
                kind,
                window,
                stride,
                padding,
                argmax,
            } => {
                let di = ops::pool2d_backward(
                    self.value(*input).shape(),
                    *kind,
                    *window,
                    *stride,
                    *padding,
                    argmax.as_deref(),
                    &g,
                )?;
                self.accumulate(grads, *input, di)?;
            }
            Op::GlobalAvgPool { input } => {
                let di = ops::global_avg_pool_backward(self.value(*input).shape(), &g)?;
                self.accumulate(grads, *input, di)?;
            }
            Op::Dense { input, weights, bias } => {
                let (di, dw, db) = ops::dense_backward(self.value(*input), self.value(*weights), &g)?;
                self.accumulate(grads, *input, di)?;
                self.accumulate(grads, *weights, dw)?;
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g)?;
            }
            Op::Mul { a, b } => {
                let da = g.mul(self.value(*b))?;
                let db = g.mul(self.value(*a))?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, g.scale(*factor))?;
            }
            Op::Sum { input } => {
                let s = g.data()[0];
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, Tensor::full(shape, s))?;
            }
            Op::Activation { input, kind } => {
                let out = &self.nodes[at].value;
                let di = match kind {
                    ActivationKind::Relu => {
                        g.zip_map(self.value(*input), "relu backward", |d, x| if x > T::zero() { d } else { T::zero() })?
                    }
                    ActivationKind::Tanh => g.zip_map(out, "tanh backward", |d, y| d * (T::one() - y * y))?,
                    ActivationKind::Softmax => ops::softmax_backward(out, &g)?,
                };
                self.accumulate(grads, *input, di)?;
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (di, dg, db) = ops::batchnorm_backward(cache, self.value(*gamma), &g)?;
                self.accumulate(grads, *input, di)?;
                self.accumulate(grads, *gamma, dg)?;
                self.accumulate(grads, *beta, db)?;
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.accumulate(grads, *input, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::Reshape { input } => {
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, g.reshape(shape)?)?;
            }
            Op::Concat { inputs } => {
                let widths: Vec<usize> = inputs.iter().map(|&i| self.value(i).last_dim()).collect();
                for (id, part) in inputs.iter().zip(ops::concat_backward(&widths, &g)?) {
                    self.accumulate(grads, *id, part)?;
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let di = ops::cross_entropy_backward(probs, labels, g.data()[0]);
                self.accumulate(grads, *logits, di)?;
            }
            Op::SelectColumn { input, column } => {
                let x = self.value(*input);
                let k = x.shape()[1];
                let mut d = x.zeros_like();
                for (row, &gv) in d.data_mut().chunks_mut(k).zip(g.data()) {
                    row[*column] = gv;
                }
                self.accumulate(grads, *input, d)?;
            }
        }
        Ok(())
    }
}

/// Result of a backward pass.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, NodeId)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `id`; zeros when the node does not influence the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[id.0].clone()))
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| self.wrt(id))
    }

    /// Every named parameter's gradient, in registration order.
    pub fn named(&self) -> IndexMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(n, id)| (n.clone(), self.wrt(*id)))
            .collect()
    }

    /// Move the gradients out, keyed by parameter name.
    pub fn into_named(mut self) -> IndexMap<String, Tensor<T>> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|(n, id)| {
                let g = self.grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.shapes[id.0].clone()));
                (n, g)
            })
            .collect()
    }
}
