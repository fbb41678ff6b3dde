//! Finite-difference gradient verification.
//!
//! `numeric_gradient` estimates d(loss)/d(tensor) by central differences;
//! `check_all_layers` runs every layer kind against it with randomness pinned
//! (stochastic layers get fixed masks) and reports the worst relative error
//! per kind. The CLI's verification command runs this suite at runtime, so it
//! lives in the library rather than in test code.

use crate::layers::{BatchNorm, Conv2d, Dropout, Linear, MaskBatch, Mode, SbConv2d, SbLinear};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Central-difference estimate of the gradient of `f` at `x`:
/// g[i] = (f(x + h·e_i) - f(x - h·e_i)) / 2h.
pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Worst elementwise relative error, with the scale floored at 1 so that
/// near-zero entries are compared absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

fn rand_bits(rng: &mut Rng, shape: &[usize], keep: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| if rng.next_f64() < keep { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap()
}

/// Projection loss: sum of out ⊙ c. Its gradient wrt out is c, which makes
/// every layer's backward directly comparable to finite differences.
fn project(out: &Tensor, c: &Tensor) -> f64 {
    out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

const STEP: f64 = 1e-5;

fn check_linear(rng: &mut Rng) -> f64 {
    let w = rand_tensor(rng, &[4, 5], -1.0, 1.0);
    let b = rand_tensor(rng, &[4], -1.0, 1.0);
    let x = rand_tensor(rng, &[3, 5], -1.0, 1.0);
    let c = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let loss = |w0: &Tensor, b0: &Tensor, x0: &Tensor| {
        let mut l = Linear::new(w0.clone(), Some(b0.clone())).unwrap();
        project(&l.forward(x0, Mode::Eval).unwrap(), &c)
    };
    let mut layer = Linear::new(w.clone(), Some(b.clone())).unwrap();
    layer.forward(&x, Mode::Train).unwrap();
    let gx = layer.backward(&c).unwrap();
    let mut worst: f64 = 0.0;
    let num = numeric_gradient(&w, STEP, |t| loss(t, &b, &x));
    worst = worst.max(max_rel_err(layer.grad_weight.data(), num.data()));
    let num = numeric_gradient(&b, STEP, |t| loss(&w, t, &x));
    worst = worst.max(max_rel_err(layer.grad_bias.as_ref().unwrap().data(), num.data()));
    let num = numeric_gradient(&x, STEP, |t| loss(&w, &b, t));
    worst.max(max_rel_err(gx.data(), num.data()))
}

fn check_sb_linear(rng: &mut Rng) -> f64 {
    let n = 3;
    let branches: Vec<Tensor> = (0..n).map(|_| rand_tensor(rng, &[4, 5], -1.0, 1.0)).collect();
    let bias = rand_tensor(rng, &[4], -1.0, 1.0);
    let x = rand_tensor(rng, &[3, 5], -1.0, 1.0);
    let masks = MaskBatch::new(rand_bits(rng, &[3, 4, n], 0.6)).unwrap();
    let c = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let loss = |bs: &[Tensor], b0: &Tensor, x0: &Tensor| {
        let mut l = SbLinear::new(bs.to_vec(), vec![0.5; n], Some(b0.clone())).unwrap();
        project(&l.forward_train_with_masks(x0, masks.clone()).unwrap(), &c)
    };
    let mut layer = SbLinear::new(branches.clone(), vec![0.5; n], Some(bias.clone())).unwrap();
    layer.forward_train_with_masks(&x, masks.clone()).unwrap();
    let gx = layer.backward(&c).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let num = numeric_gradient(&branches[k], STEP, |t| {
            let mut bs = branches.clone();
            bs[k] = t.clone();
            loss(&bs, &bias, &x)
        });
        worst = worst.max(max_rel_err(layer.grad_branches[k].data(), num.data()));
    }
    let num = numeric_gradient(&bias, STEP, |t| loss(&branches, t, &x));
    worst = worst.max(max_rel_err(layer.grad_bias.as_ref().unwrap().data(), num.data()));
    let num = numeric_gradient(&x, STEP, |t| loss(&branches, &bias, t));
    worst.max(max_rel_err(gx.data(), num.data()))
}

fn check_conv2d(rng: &mut Rng) -> f64 {
    let w = rand_tensor(rng, &[2, 3, 3, 3], -0.5, 0.5);
    let b = rand_tensor(rng, &[2], -0.5, 0.5);
    let x = rand_tensor(rng, &[2, 3, 5, 5], -1.0, 1.0);
    let c = rand_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0);
    let loss = |w0: &Tensor, b0: &Tensor, x0: &Tensor| {
        let mut l = Conv2d::new(w0.clone(), Some(b0.clone()), 2, 1).unwrap();
        project(&l.forward(x0, Mode::Eval).unwrap(), &c)
    };
    let mut layer = Conv2d::new(w.clone(), Some(b.clone()), 2, 1).unwrap();
    layer.forward(&x, Mode::Train).unwrap();
    let gx = layer.backward(&c).unwrap();
    let mut worst: f64 = 0.0;
    let num = numeric_gradient(&w, STEP, |t| loss(t, &b, &x));
    worst = worst.max(max_rel_err(layer.grad_weight.data(), num.data()));
    let num = numeric_gradient(&b, STEP, |t| loss(&w, t, &x));
    worst = worst.max(max_rel_err(layer.grad_bias.as_ref().unwrap().data(), num.data()));
    let num = numeric_gradient(&x, STEP, |t| loss(&w, &b, t));
    worst.max(max_rel_err(gx.data(), num.data()))
}

fn check_sb_conv2d(rng: &mut Rng) -> f64 {
    let n = 2;
    let branches: Vec<Tensor> =
        (0..n).map(|_| rand_tensor(rng, &[2, 1, 2, 2], -1.0, 1.0)).collect();
    let bias = rand_tensor(rng, &[2], -0.5, 0.5);
    let x = rand_tensor(rng, &[2, 1, 3, 3], -1.0, 1.0);
    let masks = MaskBatch::new(rand_bits(rng, &[2, 2, n], 0.5)).unwrap();
    let c = rand_tensor(rng, &[2, 2, 2, 2], -1.0, 1.0);
    let loss = |bs: &[Tensor], b0: &Tensor, x0: &Tensor| {
        let mut l = SbConv2d::new(bs.to_vec(), vec![0.5; n], Some(b0.clone()), 1, 0).unwrap();
        project(&l.forward_train_with_masks(x0, masks.clone()).unwrap(), &c)
    };
    let mut layer =
        SbConv2d::new(branches.clone(), vec![0.5; n], Some(bias.clone()), 1, 0).unwrap();
    layer.forward_train_with_masks(&x, masks.clone()).unwrap();
    let gx = layer.backward(&c).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let num = numeric_gradient(&branches[k], STEP, |t| {
            let mut bs = branches.clone();
            bs[k] = t.clone();
            loss(&bs, &bias, &x)
        });
        worst = worst.max(max_rel_err(layer.grad_branches[k].data(), num.data()));
    }
    let num = numeric_gradient(&bias, STEP, |t| loss(&branches, t, &x));
    worst = worst.max(max_rel_err(layer.grad_bias.as_ref().unwrap().data(), num.data()));
    let num = numeric_gradient(&x, STEP, |t| loss(&branches, &bias, t));
    worst.max(max_rel_err(gx.data(), num.data()))
}

fn check_batch_norm(rng: &mut Rng) -> f64 {
    let x = rand_tensor(rng, &[6, 4], -2.0, 2.0);
    let c = rand_tensor(rng, &[6, 4], -1.0, 1.0);
    let gamma = rand_tensor(rng, &[4], 0.5, 1.5);
    let beta = rand_tensor(rng, &[4], -0.5, 0.5);
    let make = |g: &Tensor, b: &Tensor| {
        let mut bn = BatchNorm::new(4, 0.1, 1e-5).unwrap();
        bn.gamma = g.clone();
        bn.beta = b.clone();
        bn
    };
    let loss = |g: &Tensor, b: &Tensor, x0: &Tensor| {
        project(&make(g, b).forward(x0, Mode::Train).unwrap(), &c)
    };
    let mut layer = make(&gamma, &beta);
    layer.forward(&x, Mode::Train).unwrap();
    let gx = layer.backward(&c).unwrap();
    let mut worst: f64 = 0.0;
    let num = numeric_gradient(&gamma, STEP, |t| loss(t, &beta, &x));
    worst = worst.max(max_rel_err(layer.grad_gamma.data(), num.data()));
    let num = numeric_gradient(&beta, STEP, |t| loss(&gamma, t, &x));
    worst = worst.max(max_rel_err(layer.grad_beta.data(), num.data()));
    let num = numeric_gradient(&x, STEP, |t| loss(&gamma, &beta, t));
    worst.max(max_rel_err(gx.data(), num.data()))
}

fn check_dropout(rng: &mut Rng) -> f64 {
    let x = rand_tensor(rng, &[3, 6], -1.0, 1.0);
    let mask = rand_bits(rng, &[3, 6], 0.5);
    let c = rand_tensor(rng, &[3, 6], -1.0, 1.0);
    let loss = |x0: &Tensor| {
        let mut l = Dropout::new(0.5).unwrap();
        project(&l.forward_train_with_mask(x0, mask.clone()).unwrap(), &c)
    };
    let mut layer = Dropout::new(0.5).unwrap();
    layer.forward_train_with_mask(&x, mask.clone()).unwrap();
    let gx = layer.backward(&c).unwrap();
    let num = numeric_gradient(&x, STEP, loss);
    max_rel_err(gx.data(), num.data())
}

fn check_relu(rng: &mut Rng) -> f64 {
    // Keep inputs away from the kink at zero, where the finite difference
    // straddles the nondifferentiable point.
    let mut x = rand_tensor(rng, &[4, 5], 0.1, 1.0);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    let c = rand_tensor(rng, &[4, 5], -1.0, 1.0);
    let loss = |x0: &Tensor| {
        let mut l = crate::layers::Relu::new();
        project(&l.forward(x0, Mode::Train), &c)
    };
    let mut layer = crate::layers::Relu::new();
    layer.forward(&x, Mode::Train);
    let gx = layer.backward(&c).unwrap();
    let num = numeric_gradient(&x, STEP, loss);
    max_rel_err(gx.data(), num.data())
}

fn check_tanh(rng: &mut Rng) -> f64 {
    let x = rand_tensor(rng, &[4, 5], -2.0, 2.0);
    let c = rand_tensor(rng, &[4, 5], -1.0, 1.0);
    let loss = |x0: &Tensor| {
        let mut l = crate::layers::Tanh::new();
        project(&l.forward(x0, Mode::Train), &c)
    };
    let mut layer = crate::layers::Tanh::new();
    layer.forward(&x, Mode::Train);
    let gx = layer.backward(&c).unwrap();
    let num = numeric_gradient(&x, STEP, loss);
    max_rel_err(gx.data(), num.data())
}

/// Run the finite-difference check for every layer kind. Returns
/// (layer kind, worst relative error) per kind; callers decide the tolerance
/// (1e-6 is comfortable for f64 at step 1e-5).
pub fn check_all_layers(seed: u64) -> Vec<(&'static str, f64)> {
    let rng = Rng::new(seed);
    vec![
        ("linear", check_linear(&mut rng.fork("linear"))),
        ("sb_linear", check_sb_linear(&mut rng.fork("sb_linear"))),
        ("conv2d", check_conv2d(&mut rng.fork("conv2d"))),
        ("sb_conv2d", check_sb_conv2d(&mut rng.fork("sb_conv2d"))),
        ("batch_norm", check_batch_norm(&mut rng.fork("batch_norm"))),
        ("dropout", check_dropout(&mut rng.fork("dropout"))),
        ("relu", check_relu(&mut rng.fork("relu"))),
        ("tanh", check_tanh(&mut rng.fork("tanh"))),
    ]
}
