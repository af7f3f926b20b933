//! Statistical properties that need many samples.

use entrolab::closedform::{deep_linear_solution, direct_sharpness_two_layer, entropic_sharpness_reduced, Normalization};
use entrolab::entropic::{entropy, EntropicConfig};
use entrolab::numerics::gaussian_matrix;
use entrolab::stats::log_log_slope;
use entrolab::symmetry::{layer_balance_residual, GradientCovariance};
use entrolab::{Architecture, BatchSource, DataModel, Matrix, Network, Rng};

#[test]
fn label_noise_is_uncorrelated_with_inputs() {
    let mut rng = Rng::new(1);
    let v = gaussian_matrix(&mut rng, 2, 3, None).unwrap();
    let sx = Matrix::from_rows(&[vec![2.0, 0.3, 0.0], vec![0.3, 1.0, 0.2], vec![0.0, 0.2, 0.5]]).unwrap();
    let dm = DataModel::new(v.clone(), sx, Matrix::from_diag(&[0.5, 0.1])).unwrap();
    let n = 100_000;
    let b = dm.sample(&mut rng, n).unwrap();
    let mut resid = b.y.clone();
    resid -= &b.x.dot_tr(&v);
    let cross = resid.tr_dot(&b.x).scale(1.0 / n as f64);
    assert!(cross.max_abs() < 0.05, "{cross:?}");
}

#[test]
fn entropy_falls_with_batch_size() {
    let mut rng = Rng::new(2);
    let v = gaussian_matrix(&mut rng, 2, 3, None).unwrap();
    let dm = DataModel::isotropic(v, 0.5).unwrap();
    let net = Network::random(Architecture::DeepLinear, &[3, 4, 2], &mut rng, 0.7).unwrap();
    let s: Vec<f64> = [1, 10, 100]
        .iter()
        .map(|&b| {
            entropy(&net, &dm, &EntropicConfig::new(0.1, 0.0, b).with_batches(200), &Rng::new(3))
                .unwrap()
                .value
        })
        .collect();
    assert!(s[0] > s[1] && s[1] > s[2], "{s:?}");
}

#[test]
fn residual_error_bar_shrinks_as_inverse_root_k() {
    let mut rng = Rng::new(4);
    let v = gaussian_matrix(&mut rng, 2, 3, None).unwrap();
    let dm = DataModel::isotropic(v, 0.5).unwrap();
    let net = Network::random(Architecture::DeepLinear, &[3, 4, 2], &mut rng, 0.7).unwrap();
    let cfg = EntropicConfig::new(0.1, 0.0, 4);
    let ks = [250.0, 1000.0, 4000.0, 16000.0];
    let se: Vec<f64> = ks
        .iter()
        .map(|&k| {
            let g = GradientCovariance::estimate(&net, &dm, 4, k as usize, &Rng::new(5)).unwrap();
            layer_balance_residual(&g, net.weights(), 0, 1, &cfg).unwrap().std_err
        })
        .collect();
    let slope = log_log_slope(&ks, &se);
    assert!((slope + 0.5).abs() < 0.1, "slope {slope}, {se:?}");
}

#[test]
fn entropic_solution_interpolates_and_balances_gradients() {
    let mut rng = Rng::new(6);
    let v = gaussian_matrix(&mut rng, 2, 2, None).unwrap();
    let dm = DataModel::isotropic(v, 0.3).unwrap();
    let sol = deep_linear_solution(&dm, None, None, None, 3, &[3, 3], Normalization::Balanced, &mut rng).unwrap();
    let net = sol.network().unwrap();
    let (pop, _) = dm.population().unwrap();
    let g = net.batch_gradient(&pop).unwrap();
    assert!(g.norm_sq().sqrt() < 1e-10, "population gradient {}", g.norm_sq().sqrt());

    let grads = GradientCovariance::estimate(&net, &dm, 8, 20_000, &Rng::new(7)).unwrap();
    let traces = grads.layer_traces();
    let mean = traces.iter().sum::<f64>() / traces.len() as f64;
    for t in &traces {
        assert!((t - mean).abs() < 0.05 * mean, "{traces:?}");
    }
}

#[test]
fn two_layer_sharpness_is_twice_the_reduced_formula() {
    let mut rng = Rng::new(8);
    let v = gaussian_matrix(&mut rng, 2, 2, None).unwrap();
    for v in [Matrix::identity(2), v] {
        let dm = DataModel::new(v, Matrix::identity(2), Matrix::from_diag(&[1.0, 0.4])).unwrap();
        let sol = deep_linear_solution(&dm, None, None, None, 2, &[2], Normalization::TraceScaled, &mut rng).unwrap();
        let w = sol.network().unwrap().weights().to_vec();
        let direct = direct_sharpness_two_layer(&w[0], &w[1], dm.sigma_x(), 2).unwrap();
        let reduced = entropic_sharpness_reduced(&dm).unwrap();
        assert!((direct - 2.0 * reduced).abs() < 1e-8 * direct, "{direct} vs 2 x {reduced}");
    }
}
