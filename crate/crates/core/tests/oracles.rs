//! Analytic gradients, curvature and corrections against the brute-force
//! oracles, which only see the loss as a black box.

use entrolab::datagen::sample_batch;
use entrolab::entropic::{phi1, EntropicConfig};
use entrolab::numerics::gaussian_matrix;
use entrolab::oracle::{fd_gradient, fd_hessian_trace};
use entrolab::trainer::sharpness_on;
use entrolab::{Activation, Architecture, Batch, DataModel, Network, ParamVector, Rng};

fn setup(arch: Architecture, dims: &[usize], seed: u64) -> (Network, Batch) {
    let mut rng = Rng::new(seed);
    let (dx, dy) = (dims[0], *dims.last().unwrap());
    let v = gaussian_matrix(&mut rng, dy, dx, None).unwrap();
    let dm = DataModel::isotropic(v, 0.3).unwrap();
    let net = Network::random(arch, dims, &mut rng, 0.8).unwrap();
    let batch = sample_batch(&dm, &mut rng, 16).unwrap();
    (net, batch)
}

fn loss_at<'a>(net: &'a Network, batch: &'a Batch) -> impl Fn(&[f64]) -> f64 + 'a {
    let layout = net.layout();
    move |theta: &[f64]| {
        let p = ParamVector::new(layout.clone(), theta.to_vec()).unwrap();
        net.with_params(&p).unwrap().loss(batch).unwrap()
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

#[test]
fn batch_gradient_matches_finite_differences_for_every_architecture() {
    let cases = [
        (Architecture::DeepLinear, vec![3, 4, 5, 2]),
        (Architecture::Mlp { activation: Activation::Tanh }, vec![3, 6, 2]),
        (Architecture::Mlp { activation: Activation::Relu }, vec![3, 6, 2]),
        (Architecture::Mlp { activation: Activation::Poly { degree: 2 } }, vec![3, 5, 1]),
        (Architecture::AttentionToy, vec![3, 1]),
        (Architecture::ScaleInvariantToy, vec![4, 1]),
    ];
    for (seed, (arch, dims)) in cases.into_iter().enumerate() {
        let (net, batch) = setup(arch, &dims, seed as u64 + 1);
        let analytic = net.batch_gradient(&batch).unwrap().flatten();
        let numeric = fd_gradient(loss_at(&net, &batch), &net.params().data, None).unwrap();
        let e = rel_err(&analytic.data, &numeric);
        assert!(e < 1e-6, "{arch:?}: relative error {e}");
    }
}

#[test]
fn hutchinson_trace_agrees_with_the_coordinate_loop() {
    let (net, batch) = setup(Architecture::DeepLinear, &[3, 4, 2], 7);
    let exact = fd_hessian_trace(loss_at(&net, &batch), &net.params().data, None).unwrap();
    let s = sharpness_on(&net, &batch, 2000, &Rng::new(8)).unwrap();
    let z = (s.trace.value - exact).abs() / s.trace.std_err;
    assert!(z < 3.0, "hutchinson {} ± {}, loop {exact}", s.trace.value, s.trace.std_err);
}

#[test]
fn hvp_matches_differenced_gradients() {
    let (net, batch) = setup(Architecture::Mlp { activation: Activation::Tanh }, &[3, 5, 2], 9);
    let layout = net.layout();
    let dir = ParamVector::new(layout.clone(), Rng::new(10).normal_vec(layout.len())).unwrap();
    let hv = net.hvp(&batch, &dir).unwrap();
    let h = 1e-5;
    let at = |s: f64| {
        let p = net.params().add_scaled(s, &dir);
        net.with_params(&p).unwrap().batch_gradient(&batch).unwrap().flatten()
    };
    let (up, down) = (at(h), at(-h));
    let fd: Vec<f64> = up.data.iter().zip(&down.data).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    assert!(rel_err(&hv.data, &fd) < 1e-6);
}

#[test]
fn phi1_is_a_quarter_of_the_scaled_squared_gradient() {
    let (net, batch) = setup(Architecture::DeepLinear, &[2, 3, 1], 11);
    let x = batch.x.row(0).to_vec();
    let y = batch.y.row(0).to_vec();
    let single = Batch::new(entrolab::Matrix::row_vector(&x), entrolab::Matrix::row_vector(&y)).unwrap();
    let g = fd_gradient(loss_at(&net, &single), &net.params().data, None).unwrap();
    let eta = 0.3;
    let expected = 0.25 * eta * g.iter().map(|v| v * v).sum::<f64>();
    let got = phi1(&net, &x, &y, &EntropicConfig::new(eta, 0.0, 1)).unwrap();
    assert!((got - expected).abs() < 1e-8 * expected.max(1.0));
}
