//! Finite-difference gradient checking shared by the test targets.
#![allow(dead_code)]

use anchornet::autograd::{Graph, Var};
use anchornet::model::{ArchSpec, Network};
use anchornet::ops::BnMode;
use anchornet::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;

pub fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error of `d(Σ r ⊙ f(inputs)) / d inputs` over all inputs.
pub fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let build = |inputs: &[Tensor<f64>], grad: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(grad);
                g.leaf(t)
            })
            .collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = build(&inputs, true);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let r = random(g.value(out).shape(), &mut rng);
    let objective = |inputs: &[Tensor<f64>]| {
        let (g, _, out) = build(inputs, false);
        g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let grads = g.backward(out, r.clone()).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; inputs[i].data().len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].data().len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            numeric.push((objective(&plus) - objective(&minus)) / (2.0 * H));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Every parameter of a miniature proposal network, through cross-entropy.
pub fn miniature_worst_error() -> (f64, usize) {
    let spec = ArchSpec::miniature(3);
    let mut net = Network::<f64>::build(&spec, 8).unwrap();
    // move batchnorm away from the identity so its gradients are exercised
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for i in 0..net.params().len() {
        let p = net.params_mut().get_mut(i);
        if p.name.ends_with("gamma") || p.name.ends_with("beta") {
            for v in p.value.data_mut() {
                *v += r.gen_range(-0.3..0.3);
            }
        }
    }
    let x = random(Shape::new(2, 3, 17, 17), &mut r);
    let labels = [0usize, 2];

    let loss = |net: &Network<f64>| -> f64 {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let pass = net.forward(&mut g, xv, BnMode::Train, false).unwrap();
        let p = g.softmax(pass.logits);
        let probs = g.value(p);
        labels.iter().enumerate().map(|(i, &l)| -probs.at(i, l, 0, 0).ln()).sum::<f64>() / 2.0
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let pass = net.forward(&mut g, xv, BnMode::Train, true).unwrap();
    let logits = g.value(pass.logits).clone();
    let mut seed = Tensor::zeros(logits.shape());
    for (i, &l) in labels.iter().enumerate() {
        let row: Vec<f64> = (0..3).map(|c| logits.at(i, c, 0, 0)).collect();
        let p = anchornet::ops::softmax(&row);
        for (c, &pc) in p.iter().enumerate() {
            let d = pc - f64::from(u8::from(c == l));
            seed.set(i, c, 0, 0, d / 2.0);
        }
    }
    let grads = g.backward(pass.logits, seed).unwrap();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for idx in 0..net.params().len() {
        if !net.params().get(idx).kind.trainable() {
            continue;
        }
        let analytic = pass.param_grad(&grads, idx).unwrap().data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let mut plus = net.clone();
            plus.params_mut().get_mut(idx).value.data_mut()[j] += H;
            let mut minus = net.clone();
            minus.params_mut().get_mut(idx).value.data_mut()[j] -= H;
            numeric.push((loss(&plus) - loss(&minus)) / (2.0 * H));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
        checked += 1;
    }
    (worst, checked)
}
