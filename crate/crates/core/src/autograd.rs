//! Reverse-mode gradients over the engine's operations.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and how it was produced. [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products, so a value consumed by several
//! operations receives the sum of their contributions.
//!
//! One graph per forward pass; graphs are not shared between threads.

use crate::error::{Error, Result};
use crate::ops::{self, BnMode, BnSaved};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        stride: (usize, usize),
        groups: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Silu(Var),
    Add(Var, Var),
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Gap(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    Resize(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients flow to it when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Batch mean and biased variance recorded by a training-mode batchnorm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { saved, .. } if saved.train => Some((&saved.mean, &saved.var)),
            _ => None,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, groups: usize) -> Result<Var> {
        let stride = (stride, stride);
        let y = ops::conv_forward(self.value(x), self.value(w), stride, groups)?;
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                stride,
                groups,
            },
            &[x, w],
        ))
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        mode: BnMode,
    ) -> Result<Var> {
        let (y, saved) = ops::batchnorm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            mode,
        )?;
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = ops::silu(self.value(x));
        self.push(y, Op::Silu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "cannot add {} and {}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut y = va.clone();
        y.set_requires_grad(false);
        y.data_mut()
            .iter_mut()
            .zip(vb.data())
            .for_each(|(o, &v)| *o += v);
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    /// Keeps the `h × w` window starting at `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let y = ops::crop(self.value(x), top, left, h, w)?;
        Ok(self.push(y, Op::Crop { x, top, left }, &[x]))
    }

    pub fn gap(&mut self, x: Var) -> Var {
        let y = ops::gap(self.value(x));
        self.push(y, Op::Gap(x), &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let y = ops::linear_forward(self.value(x), self.value(w), bias.as_deref())?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(y, Op::Linear { x, w, b }, &inputs))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = ops::softmax_rows(self.value(x));
        self.push(y, Op::Softmax(x), &[x])
    }

    pub fn resize(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let y = ops::resize_bilinear(self.value(x), target)?;
        Ok(self.push(y, Op::Resize(x), &[x]))
    }

    /// Propagates `seed` (the gradient of some scalar w.r.t. `output`) back
    /// to every node that requires a gradient.
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(Error::NoForward(format!(
                "node {} not on a tape of {} nodes",
                output.0,
                self.nodes.len()
            )));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::Shape(format!(
                "seed {} does not match output {}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let wants = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv {
                    x,
                    w,
                    stride,
                    groups,
                } => {
                    let (gx, gw) = ops::conv_backward(
                        self.value(*x),
                        self.value(*w),
                        *stride,
                        *groups,
                        &g,
                        wants(x),
                        wants(w),
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (gx, gg, gb) =
                        ops::batchnorm_backward(self.value(*x), self.value(*gamma).data(), saved, &g);
                    let cs = self.value(*gamma).shape();
                    accumulate(&mut grads, *x, wants(x).then_some(gx));
                    accumulate(&mut grads, *gamma, Some(from_vec(cs, gg)));
                    accumulate(&mut grads, *beta, Some(from_vec(cs, gb)));
                }
                Op::Silu(x) => {
                    let gx = ops::silu_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, Some(g.clone()));
                    accumulate(&mut grads, *a, Some(g));
                }
                Op::Crop { x, top, left } => {
                    let gx = ops::crop_backward(self.value(*x).shape(), *top, *left, &g);
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::Gap(x) => {
                    let gx = ops::gap_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, wants(x).then_some(gx));
                    accumulate(&mut grads, *w, Some(gw));
                    if let Some(b) = b {
                        let bs = self.value(*b).shape();
                        accumulate(&mut grads, *b, Some(from_vec(bs, gb)));
                    }
                }
                Op::Softmax(x) => {
                    let gx = ops::softmax_backward(&node.value, &g);
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::Resize(x) => {
                    let gx = ops::resize_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, Some(gx));
                }
            }
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.value.requires_grad() {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn from_vec<T: Real>(shape: Shape, data: Vec<T>) -> Tensor<T> {
    Tensor::from_vec(shape, data).expect("gradient shape")
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_empty_tape_errors() {
        let g = Graph::<f64>::new();
        let r = g.backward(Var(0), Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(matches!(r, Err(Error::NoForward(_))));
    }

    #[test]
    fn gap_gradient_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 2, 3, 5), 1.0).with_grad());
        let y = g.gap(x);
        let grads = g.backward(y, Tensor::full(Shape::new(1, 2, 1, 1), 1.0)).unwrap();
        let gx = grads.get(x).unwrap();
        assert!(gx.data().iter().all(|&v| (v - 1.0 / 15.0).abs() < 1e-15));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 3.0).with_grad());
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y, Tensor::full(Shape::new(1, 1, 2, 2), 1.0)).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn no_gradient_for_frozen_leaves() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let w = g.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 0.5).with_grad());
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let grads = g.backward(y, Tensor::full(Shape::new(1, 1, 1, 1), 1.0)).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
