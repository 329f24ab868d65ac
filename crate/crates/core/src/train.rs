//! Two-stage training with momentum SGD.
//!
//! Stage I fits the proposal network on whole images. Stage II fits one
//! downstream network on resized images and a second one on the patches
//! the trained proposal network localizes.
//!
//! Losses are accumulated per batch as `Σ w_i · CE_i` over the batch's
//! inputs, divided by the number of images in the batch. The dataset loss is
//! the image-count-weighted mean of batch losses.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{probabilities, AnchorNetModel, DownstreamModel, Network};
use crate::ops::BnMode;
use crate::pipeline::{localize, resize_global};
use crate::rf::PatchBox;
use crate::select::{extract_patch, SelectionConfig};
use crate::seed;
use crate::tensor::Tensor;

/// Probability floor inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `(−ln p[label], p − onehot(label))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= probs.len() {
        return Err(Error::Invalid(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let loss = -probs[label].max(PROB_FLOOR).ln();
    let mut grad = probs.to_vec();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Schedule {
    /// Divide by 10 after 30%, 60% and 90% of the epochs.
    Step,
    Cosine,
}

/// Normalization of the whole-image finetuning loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GlobalNorm {
    /// Scale each term by `1/|X|`, `|X|` being the full sequence length.
    SequenceLength,
    /// Plain mean over images.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub global_norm: GlobalNorm,
    /// Sequence length used by [`GlobalNorm::SequenceLength`].
    pub sequence_length: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 0.1,
            schedule: Schedule::Step,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            global_norm: GlobalNorm::SequenceLength,
            sequence_length: 5,
        }
    }
}

impl TrainConfig {
    /// Defaults for Stage II: cosine decay from 0.01.
    pub fn finetune() -> Self {
        TrainConfig {
            lr: 0.01,
            schedule: Schedule::Cosine,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Invalid("momentum must lie in [0, 1), decay be non-negative".into()));
        }
        if self.sequence_length == 0 {
            return Err(Error::Invalid("sequence length must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Step => {
                let e = self.epochs as f64;
                let passed = [0.3, 0.6, 0.9]
                    .iter()
                    .filter(|&&f| epoch as f64 >= (f * e).round() && (f * e).round() > 0.0)
                    .count();
                self.lr * 0.1f64.powi(passed as i32)
            }
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// `1×3×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub object_box: Option<PatchBox>,
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub items: Vec<Sample>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(items: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if let Some(s) = items.iter().find(|s| s.label >= num_classes) {
            return Err(Error::Invalid(format!(
                "label {} out of range for {num_classes} classes",
                s.label
            )));
        }
        Ok(LabeledDataset { items, num_classes })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labeled_images(&self) -> Vec<(Tensor<f32>, usize)> {
        self.items.iter().map(|s| (s.image.clone(), s.label)).collect()
    }
}

/// One image's training inputs; each contributes `weight · CE(label)`.
#[derive(Clone, Debug)]
pub struct Group {
    pub inputs: Vec<Tensor<f32>>,
    pub label: usize,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Image-weighted mean loss in training mode.
    pub loss: f64,
    /// Fraction of inputs classified correctly in training mode.
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub curve: Vec<EpochStats>,
    /// Inputs skipped because their image produced none.
    pub empty_groups: usize,
}

/// SGD with momentum; decay applies to weights only.
struct Sgd {
    velocity: Vec<Option<Vec<f32>>>,
    momentum: f32,
    decay: f32,
}

impl Sgd {
    fn new(params: usize, momentum: f64, decay: f64) -> Self {
        Sgd {
            velocity: vec![None; params],
            momentum: momentum as f32,
            decay: decay as f32,
        }
    }

    fn step(&mut self, net: &mut Network<f32>, grads: &[Option<Tensor<f32>>], lr: f64) {
        let lr = lr as f32;
        for (idx, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = net.params_mut().get_mut(idx);
            let decay = if p.kind.decays() { self.decay } else { 0.0 };
            let v = self.velocity[idx].get_or_insert_with(|| vec![0.0; g.data().len()]);
            for ((w, gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + *gi + decay * *w;
                *w -= lr * *vi;
            }
        }
    }
}

struct BatchResult {
    /// `Σ w · CE` over the batch.
    weighted_loss: f64,
    correct: usize,
    inputs: usize,
}

fn flatten<'a>(batch: &[&'a Group]) -> (Vec<&'a Tensor<f32>>, Vec<(usize, f64)>) {
    let mut xs = Vec::new();
    let mut targets = Vec::new();
    for g in batch {
        for x in &g.inputs {
            xs.push(x);
            targets.push((g.label, g.weight));
        }
    }
    (xs, targets)
}

fn train_step(
    net: &mut Network<f32>,
    opt: &mut Sgd,
    batch: &[&Group],
    lr: f64,
    epoch: usize,
) -> Result<BatchResult> {
    let (xs, targets) = flatten(batch);
    let images = batch.len() as f64;
    let mut g = Graph::new();
    let x = g.leaf(Tensor::stack(&xs)?);
    let pass = net.forward(&mut g, x, BnMode::Train, true)?;
    let logits = g.value(pass.logits);
    let k = net.num_classes();
    let mut seed = Vec::with_capacity(targets.len() * k);
    let mut weighted_loss = 0.0;
    let mut correct = 0;
    for (row, &(label, w)) in logits.data().chunks(k).zip(&targets) {
        let p = probabilities(row);
        let (loss, grad) = cross_entropy(&p, label)?;
        weighted_loss += w * loss;
        correct += usize::from(crate::pipeline::argmax(&p) == label);
        seed.extend(grad.iter().map(|d| (w * d / images) as f32));
    }
    if !weighted_loss.is_finite() {
        return Err(Error::Diverged {
            epoch,
            loss: weighted_loss,
        });
    }
    let seed = Tensor::from_vec(logits.shape(), seed)?;
    let grads = g.backward(pass.logits, seed)?;
    let per_param: Vec<Option<Tensor<f32>>> = (0..net.params().len())
        .map(|i| pass.param_grad(&grads, i).cloned())
        .collect();
    net.update_running_stats(&g, &pass);
    opt.step(net, &per_param, lr);
    Ok(BatchResult {
        weighted_loss,
        correct,
        inputs: targets.len(),
    })
}

/// Trains `net` on `groups`; groups without inputs are skipped.
pub fn train_groups(
    net: &mut Network<f32>,
    groups: &[Group],
    cfg: &TrainConfig,
    stream: &str,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let live: Vec<&Group> = groups.iter().filter(|g| !g.inputs.is_empty()).collect();
    if live.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = seed::stream(cfg.seed, stream);
    let mut opt = Sgd::new(net.params().len(), cfg.momentum, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..live.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let (mut loss, mut correct, mut inputs) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Group> = chunk.iter().map(|&i| live[i]).collect();
            let r = train_step(net, &mut opt, &batch, lr, epoch)?;
            loss += r.weighted_loss;
            correct += r.correct;
            inputs += r.inputs;
        }
        let stats = EpochStats {
            epoch,
            lr,
            loss: loss / live.len() as f64,
            accuracy: correct as f64 / inputs as f64,
        };
        if !stats.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: stats.loss,
            });
        }
        curve.push(stats);
    }
    Ok(curve)
}

/// Dataset loss in inference mode, computed batch by batch in the order
/// given: `(1/|D|) Σ_batches Σ_inputs w · CE`.
pub fn dataset_loss(net: &Network<f32>, groups: &[Group], batch_size: usize) -> Result<f64> {
    if groups.is_empty() || batch_size == 0 {
        return Err(Error::Invalid("loss needs groups and a positive batch size".into()));
    }
    let mut total = 0.0;
    for chunk in groups.chunks(batch_size) {
        let refs: Vec<&Group> = chunk.iter().filter(|g| !g.inputs.is_empty()).collect();
        if refs.is_empty() {
            continue;
        }
        let (xs, targets) = flatten(&refs);
        let rows = net.logits(&Tensor::stack(&xs)?)?;
        let mut batch = 0.0;
        for (row, (label, w)) in rows.iter().zip(targets) {
            batch += w * cross_entropy(&probabilities(row), label)?.0;
        }
        total += batch;
    }
    Ok(total / groups.len() as f64)
}

fn check_input(ds: &LabeledDataset, classes: usize) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if ds.num_classes != classes {
        return Err(Error::Invalid(format!(
            "dataset has {} classes, model {classes}",
            ds.num_classes
        )));
    }
    Ok(())
}

pub fn anchornet_groups(ds: &LabeledDataset) -> Vec<Group> {
    ds.items
        .iter()
        .map(|s| Group {
            inputs: vec![s.image.clone()],
            label: s.label,
            weight: 1.0,
        })
        .collect()
}

/// Stage I: plain cross-entropy on whole images.
pub fn train_anchornet(
    mut model: AnchorNetModel,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Trained<AnchorNetModel>> {
    check_input(ds, model.num_classes())?;
    let curve = train_groups(model.network_mut(), &anchornet_groups(ds), cfg, "stage1.shuffle")?;
    model.mark_trained();
    Ok(Trained {
        model,
        curve,
        empty_groups: 0,
    })
}

pub fn global_groups(ds: &LabeledDataset, cfg: &TrainConfig) -> Result<Vec<Group>> {
    let weight = match cfg.global_norm {
        GlobalNorm::SequenceLength => 1.0 / cfg.sequence_length as f64,
        GlobalNorm::Mean => 1.0,
    };
    ds.items
        .iter()
        .map(|s| {
            Ok(Group {
                inputs: vec![resize_global(&s.image)?],
                label: s.label,
                weight,
            })
        })
        .collect()
}

/// Stage II, whole-image network: trained on 95×95 bilinear resizes.
pub fn finetune_global(
    mut f: DownstreamModel,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Trained<DownstreamModel>> {
    check_input(ds, f.num_classes())?;
    cfg.validate()?;
    let groups = global_groups(ds, cfg)?;
    let curve = train_groups(f.network_mut(), &groups, cfg, "stage2.global.shuffle")?;
    Ok(Trained {
        model: f,
        curve,
        empty_groups: 0,
    })
}

/// Patches the proposal network localizes in each image, each weighted by
/// one over the image's patch count.
pub fn local_groups(
    ds: &LabeledDataset,
    anchornet: &AnchorNetModel,
    sel: &SelectionConfig,
) -> Result<Vec<Group>> {
    if !anchornet.is_trained() {
        return Err(Error::Invalid(
            "patch finetuning needs a trained proposal network".into(),
        ));
    }
    ds.items
        .iter()
        .map(|s| {
            let loc = localize(&s.image, anchornet, sel)?;
            let inputs = loc
                .patches
                .iter()
                .map(|p| extract_patch(&s.image, &p.patch))
                .collect::<Result<Vec<_>>>()?;
            let weight = if inputs.is_empty() { 0.0 } else { 1.0 / inputs.len() as f64 };
            Ok(Group {
                inputs,
                label: s.label,
                weight,
            })
        })
        .collect()
}

/// Stage II, patch network.
pub fn finetune_local(
    f: DownstreamModel,
    ds: &LabeledDataset,
    anchornet: &AnchorNetModel,
    sel: &SelectionConfig,
    cfg: &TrainConfig,
) -> Result<Trained<DownstreamModel>> {
    check_input(ds, f.num_classes())?;
    cfg.validate()?;
    let groups = local_groups(ds, anchornet, sel)?;
    finetune_on_groups(f, &groups, cfg)
}

/// Patch finetuning on precomputed groups.
pub fn finetune_on_groups(
    mut f: DownstreamModel,
    groups: &[Group],
    cfg: &TrainConfig,
) -> Result<Trained<DownstreamModel>> {
    let empty_groups = groups.iter().filter(|g| g.inputs.is_empty()).count();
    let curve = train_groups(f.network_mut(), groups, cfg, "stage2.local.shuffle")?;
    Ok(Trained {
        model: f,
        curve,
        empty_groups,
    })
}

/// Accuracy of `f` over every input of `groups`.
pub fn group_accuracy(f: &DownstreamModel, groups: &[Group]) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for g in groups {
        if g.inputs.is_empty() {
            continue;
        }
        let refs: Vec<&Tensor<f32>> = g.inputs.iter().collect();
        for p in f.classify(&Tensor::stack(&refs)?)? {
            correct += usize::from(crate::pipeline::argmax(&p) == g.label);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Invalid("no inputs to evaluate".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Loss curve as CSV with header `epoch,loss,accuracy`.
pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss,accuracy\n");
    for e in curve {
        s.push_str(&format!("{},{},{}\n", e.epoch + 1, e.loss, e.accuracy));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_cases() {
        let (l, g) = cross_entropy(&[1.0, 0.0, 0.0], 0).unwrap();
        assert!(l.abs() < 1e-12);
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
        let (l, _) = cross_entropy(&[0.25; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (l, g) = cross_entropy(&[0.75, 0.25], 1).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert_eq!(g, vec![0.75, -0.75]);
        let (l, _) = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!((l - 1e-12f64.ln().abs()).abs() < 1e-9);
        assert!(cross_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn step_schedule_proportions() {
        let cfg = TrainConfig {
            epochs: 10,
            lr: 1.0,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..10).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs[2], 1.0);
        assert!((lrs[3] - 0.1).abs() < 1e-15);
        assert!((lrs[6] - 0.01).abs() < 1e-15);
        assert!((lrs[9] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn cosine_starts_at_base() {
        let cfg = TrainConfig {
            epochs: 4,
            ..TrainConfig::finetune()
        };
        assert_eq!(cfg.lr_at(0), 0.01);
        assert!((cfg.lr_at(2) - 0.005).abs() < 1e-15);
    }
}
