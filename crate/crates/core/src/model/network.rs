//! Parameterized convolutional network built from an [`ArchSpec`].
//!
//! MBConv stages run expand 1×1 → BN → SiLU → depthwise k×k → BN → SiLU →
//! project 1×1 → BN. There is no squeeze-and-excitation: it pools the whole
//! map, so every location would depend on every pixel and the exact
//! location-to-patch mapping would be lost. A stride-1 MBConv that keeps its
//! width adds its input centre-cropped by `(k-1)/2` per side, which keeps
//! shortcut and main path aligned on the same input window.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchSpec, StageOp};
use super::params::ParamSet;
use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{BnMode, LinearLayer};
use crate::tensor::{Real, Shape, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
struct BnRef {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct ConvUnit {
    weight: usize,
    bn: BnRef,
    stride: usize,
    groups: usize,
    act: bool,
}

#[derive(Clone, Debug)]
enum Block {
    Plain(ConvUnit),
    MbConv {
        expand: Option<ConvUnit>,
        depthwise: ConvUnit,
        project: ConvUnit,
        /// Crop margin of the shortcut, when there is one.
        residual: Option<usize>,
    },
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: ArchSpec,
    params: ParamSet<T>,
    blocks: Vec<Block>,
    head: Option<ConvUnit>,
    fc_weight: usize,
    fc_bias: Option<usize>,
}

/// Handles into the graph produced by [`Network::forward`].
#[derive(Debug)]
pub struct ForwardPass {
    /// Feature map before pooling.
    pub features: Var,
    pub pooled: Var,
    pub logits: Var,
    param_vars: Vec<Option<Var>>,
    bn_nodes: Vec<(BnRef, Var)>,
}

impl ForwardPass {
    /// Gradient of parameter `idx`, if it was tracked.
    pub fn param_grad<'a, T: Real>(&self, grads: &'a Gradients<T>, idx: usize) -> Option<&'a Tensor<T>> {
        self.param_vars.get(idx).copied().flatten().and_then(|v| grads.get(v))
    }
}

struct Builder<'a, T> {
    params: ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn uniform(&mut self, shape: Shape, bound: f64) -> Tensor<T> {
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..shape.numel())
            .map(|_| T::of(dist.sample(self.rng)))
            .collect();
        Tensor::from_vec(shape, data).expect("init shape")
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnRef {
        let one = Tensor::full(Shape::new(1, c, 1, 1), T::one());
        let zero = Tensor::zeros(Shape::new(1, c, 1, 1));
        BnRef {
            gamma: self.params.add(format!("{prefix}.bn.gamma"), one.clone()),
            beta: self.params.add(format!("{prefix}.bn.beta"), zero.clone()),
            mean: self.params.add(format!("{prefix}.bn.running_mean"), zero),
            var: self.params.add(format!("{prefix}.bn.running_var"), one),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        act: bool,
    ) -> ConvUnit {
        let fan_in = (cin / groups) * k * k;
        // He-uniform
        let w = self.uniform(Shape::new(cout, cin / groups, k, k), (6.0 / fan_in as f64).sqrt());
        let weight = self.params.add(format!("{prefix}.conv.weight"), w);
        let bn = self.bn(prefix, cout);
        ConvUnit {
            weight,
            bn,
            stride,
            groups,
            act,
        }
    }
}

impl<T: Real> Network<T> {
    /// Builds the network with parameters drawn from `seed`.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamSet::new(),
            rng: &mut rng,
        };
        let mut blocks = Vec::with_capacity(spec.stages.len());
        let mut c = spec.in_channels;
        for (i, s) in spec.stages.iter().enumerate() {
            let p = format!("stage{i}");
            match s.op {
                StageOp::Conv => {
                    blocks.push(Block::Plain(b.conv(&p, c, s.out_channels, s.kernel, s.stride, 1, true)));
                }
                StageOp::MbConv => {
                    let mid = if s.has_expand() { s.expanded_width(c) } else { c };
                    let expand = s
                        .has_expand()
                        .then(|| b.conv(&format!("{p}.expand"), c, mid, 1, 1, 1, true));
                    let depthwise = b.conv(&format!("{p}.depthwise"), mid, mid, s.kernel, s.stride, mid, true);
                    let project = b.conv(&format!("{p}.project"), mid, s.out_channels, 1, 1, 1, false);
                    blocks.push(Block::MbConv {
                        expand,
                        depthwise,
                        project,
                        residual: s.has_residual(c).then_some((s.kernel - 1) / 2),
                    });
                }
            }
            c = s.out_channels;
        }
        let head = spec
            .head
            .expand_channels
            .map(|e| b.conv("head", c, e, 1, 1, 1, true));
        let features = spec.feature_channels();
        let classes = spec.head.num_classes;
        let bound = 1.0 / (features as f64).sqrt();
        let w = b.uniform(Shape::new(classes, features, 1, 1), bound);
        let fc_weight = b.params.add("classifier.weight".into(), w);
        let fc_bias = spec.head.classifier_bias.then(|| {
            let t = b.uniform(Shape::new(1, classes, 1, 1), bound);
            b.params.add("classifier.bias".into(), t)
        });
        Ok(Network {
            spec: spec.clone(),
            params: b.params,
            blocks,
            head,
            fc_weight,
            fc_bias,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.head.num_classes
    }

    pub fn classifier(&self) -> LinearLayer<T> {
        LinearLayer {
            weights: self.params.tensor(self.fc_weight).clone(),
            bias: self.fc_bias.map(|b| self.params.tensor(b).data().to_vec()),
        }
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            fc_weight: self.fc_weight,
            fc_bias: self.fc_bias,
        }
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "network takes {} channels, input has {}",
                self.spec.in_channels, s.c
            )));
        }
        let rf = self.spec.rf_state()?;
        if rf.rf() > s.h.min(s.w) {
            return Err(Error::RfConstraint {
                rf: rf.rf(),
                height: s.h,
                width: s.w,
            });
        }
        Ok(())
    }

    /// Records the forward pass of `input` on `g`.
    ///
    /// With `track_grads` every trainable parameter becomes a
    /// gradient-requiring leaf.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        input: Var,
        mode: BnMode,
        track_grads: bool,
    ) -> Result<ForwardPass> {
        self.check_input(g.value(input).shape())?;
        let mut param_vars = vec![None; self.params.len()];
        for (i, p) in self.params.iter().enumerate() {
            if p.kind.trainable() {
                let mut t = p.value.clone();
                t.set_requires_grad(track_grads);
                param_vars[i] = Some(g.leaf(t));
            }
        }
        let mut bn_nodes = Vec::new();
        let mut unit = |g: &mut Graph<T>, u: &ConvUnit, x: Var| -> Result<Var> {
            let w = param_vars[u.weight].expect("weight leaf");
            let y = g.conv2d(x, w, u.stride, u.groups)?;
            let stats = (mode == BnMode::Infer).then(|| {
                (
                    self.params.tensor(u.bn.mean).data(),
                    self.params.tensor(u.bn.var).data(),
                )
            });
            let gamma = param_vars[u.bn.gamma].expect("gamma leaf");
            let beta = param_vars[u.bn.beta].expect("beta leaf");
            let y = g.batchnorm(y, gamma, beta, stats, mode)?;
            bn_nodes.push((u.bn, y));
            Ok(if u.act { g.silu(y) } else { y })
        };

        let mut x = input;
        for block in &self.blocks {
            x = match block {
                Block::Plain(u) => unit(g, u, x)?,
                Block::MbConv {
                    expand,
                    depthwise,
                    project,
                    residual,
                } => {
                    let mut y = x;
                    if let Some(e) = expand {
                        y = unit(g, e, y)?;
                    }
                    y = unit(g, depthwise, y)?;
                    y = unit(g, project, y)?;
                    if let Some(m) = residual {
                        let s = g.value(y).shape();
                        let short = g.crop(x, *m, *m, s.h, s.w)?;
                        y = g.add(y, short)?;
                    }
                    y
                }
            };
        }
        if let Some(h) = &self.head {
            x = unit(g, h, x)?;
        }
        let features = x;
        let pooled = g.gap(features);
        let w = param_vars[self.fc_weight].expect("classifier leaf");
        let b = self.fc_bias.map(|b| param_vars[b].expect("bias leaf"));
        let logits = g.linear(pooled, w, b)?;
        Ok(ForwardPass {
            features,
            pooled,
            logits,
            param_vars,
            bn_nodes,
        })
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// estimates (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn update_running_stats(&mut self, g: &Graph<T>, pass: &ForwardPass) {
        let m = T::of(BN_MOMENTUM);
        for (bn, var) in &pass.bn_nodes {
            let Some((mean, bvar)) = g.batch_stats(*var) else {
                continue;
            };
            let s = g.value(*var).shape();
            let count = (s.n * s.plane()) as f64;
            let unbias = T::of(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
            let rm = self.params.get_mut(bn.mean).value.data_mut();
            for (r, &b) in rm.iter_mut().zip(mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            let rv = self.params.get_mut(bn.var).value.data_mut();
            for (r, &b) in rv.iter_mut().zip(bvar) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        }
    }

    /// Inference-mode feature map and logits for a batch.
    pub fn infer(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let x = g.leaf(images.clone());
        let pass = self.forward(&mut g, x, BnMode::Infer, false)?;
        Ok((g.value(pass.features).clone(), g.value(pass.logits).clone()))
    }

    /// Inference-mode logits, one row per sample.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let (_, logits) = self.infer(images)?;
        let k = self.num_classes();
        Ok(logits.data().chunks(k).map(<[T]>::to_vec).collect())
    }
}

/// Softmax of `f32`/`f64` logits evaluated in double precision.
pub fn probabilities<T: Real>(logits: &[T]) -> Vec<f64> {
    let l: Vec<f64> = logits.iter().map(|v| v.f64()).collect();
    crate::ops::softmax(&l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_names_are_unique() {
        let net = Network::<f32>::build(&ArchSpec::anchornet(4), 1).unwrap();
        let mut names: Vec<&str> = net.params().iter().map(|p| p.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(net.params().by_name("stage1.expand.conv.weight").is_none());
        assert!(net.params().by_name("stage2.expand.conv.weight").is_some());
        assert_eq!(
            net.params().by_name("stage6.expand.conv.weight").unwrap().value.shape(),
            Shape::new(144, 96, 1, 1)
        );
    }

    #[test]
    fn seeds_change_parameters() {
        let a = Network::<f32>::build(&ArchSpec::downstream(4), 1).unwrap();
        let b = Network::<f32>::build(&ArchSpec::downstream(4), 2).unwrap();
        let c = Network::<f32>::build(&ArchSpec::downstream(4), 1).unwrap();
        let w = |n: &Network<f32>| n.params().tensor(0).data().to_vec();
        assert_ne!(w(&a), w(&b));
        assert_eq!(w(&a), w(&c));
    }

    #[test]
    fn undersized_input_rejected() {
        let net = Network::<f32>::build(&ArchSpec::anchornet(4), 1).unwrap();
        let img = Tensor::zeros(Shape::new(1, 3, 94, 120));
        assert!(matches!(net.infer(&img), Err(Error::RfConstraint { .. })));
    }
}
