//! Central finite-difference gradient checks.
//!
//! The numeric side only ever calls `forward`, so it stays independent of the
//! backprop path it verifies. Loss is a fixed random weighting of the output,
//! which exercises every output element.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{Layer, Mode};
use crate::network::Network;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

fn loss_weights(shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF00D);
    let dist = Normal::new(0.0, 1.0).unwrap();
    let mut w = Tensor::zeros(shape);
    for v in w.data_mut() {
        *v = dist.sample(&mut rng);
    }
    w
}

fn weighted(output: &Tensor, w: &Tensor) -> f64 {
    output
        .data()
        .iter()
        .zip(w.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Check one layer's input and parameter gradients against central
/// differences. Runs in `Probe` mode so repeated forwards are pure.
pub fn fd_check_layer(layer: &mut Layer, input: &Tensor, tol: f64) -> Result<GradCheckReport> {
    let name = layer.kind().to_string();
    let out = layer.forward(input, Mode::Probe)?;
    let w = loss_weights(out.shape());
    layer.zero_grads();
    let dx = layer.backward(&w, true)?;

    let mut max_err: f64 = 0.0;
    let mut checked = 0;

    // input gradient
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let lp = weighted(&layer.forward(&x, Mode::Probe)?, &w);
        x.data_mut()[i] = orig - FD_STEP;
        let lm = weighted(&layer.forward(&x, Mode::Probe)?, &w);
        x.data_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        max_err = max_err.max(rel_err(dx.data()[i], numeric));
        checked += 1;
    }

    // parameter gradients
    let n_params = layer.params().len();
    for pi in 0..n_params {
        let n = layer.params()[pi].1.len();
        for i in 0..n {
            let orig = layer.params_mut()[pi].1.data()[i];
            layer.params_mut()[pi].1.data_mut()[i] = orig + FD_STEP;
            let lp = weighted(&layer.forward(input, Mode::Probe)?, &w);
            layer.params_mut()[pi].1.data_mut()[i] = orig - FD_STEP;
            let lm = weighted(&layer.forward(input, Mode::Probe)?, &w);
            layer.params_mut()[pi].1.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let analytic = layer.params()[pi].2.data()[i];
            max_err = max_err.max(rel_err(analytic, numeric));
            checked += 1;
        }
    }
    // restore cache for the unperturbed input
    layer.forward(input, Mode::Probe)?;
    Ok(GradCheckReport {
        name,
        max_rel_err: max_err,
        checked,
        tol,
    })
}

/// End-to-end check of a whole network's parameter and input gradients.
pub fn fd_check_network(
    name: &str,
    net: &mut Network,
    input: &Tensor,
    tol: f64,
) -> Result<GradCheckReport> {
    net.mode = Mode::Probe;
    let out = net.forward(input)?;
    let w = loss_weights(out.shape());
    net.zero_grads();
    let dx = net.backward(&w)?;

    let mut max_err: f64 = 0.0;
    let mut checked = 0;

    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let lp = weighted(&net.forward(&x)?, &w);
        x.data_mut()[i] = orig - FD_STEP;
        let lm = weighted(&net.forward(&x)?, &w);
        x.data_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        max_err = max_err.max(rel_err(dx.data()[i], numeric));
        checked += 1;
    }

    let analytic_grads: Vec<Vec<f64>> = net
        .layers
        .iter()
        .flat_map(|l| l.params().into_iter().map(|(_, _, g)| g.data().to_vec()))
        .collect();
    let mut flat_idx = 0;
    for li in 0..net.layers.len() {
        let n_params = net.layers[li].params().len();
        for pi in 0..n_params {
            let n = net.layers[li].params()[pi].1.len();
            for i in 0..n {
                let orig = net.layers[li].params_mut()[pi].1.data()[i];
                net.layers[li].params_mut()[pi].1.data_mut()[i] = orig + FD_STEP;
                let lp = weighted(&net.forward(input)?, &w);
                net.layers[li].params_mut()[pi].1.data_mut()[i] = orig - FD_STEP;
                let lm = weighted(&net.forward(input)?, &w);
                net.layers[li].params_mut()[pi].1.data_mut()[i] = orig;
                let numeric = (lp - lm) / (2.0 * FD_STEP);
                max_err = max_err.max(rel_err(analytic_grads[flat_idx][i], numeric));
                checked += 1;
            }
            flat_idx += 1;
        }
    }
    net.forward(input)?;
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_err,
        checked,
        tol,
    })
}

/// Seeded random input tensor for checks.
pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0).unwrap();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = dist.sample(&mut rng);
    }
    t
}

/// Gradient checks over every layer kind on small seeded inputs.
pub fn standard_layer_checks(tol: f64) -> Result<Vec<GradCheckReport>> {
    use crate::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Dense};
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut reports = Vec::new();

    let mut conv = Layer::Conv2d(Conv2d::new(2, 3, 3, 2, 1, &mut rng));
    reports.push(fd_check_layer(&mut conv, &random_input(&[2, 2, 5, 5], 1), tol)?);

    let mut ct = Layer::ConvTranspose2d(ConvTranspose2d::new(2, 3, 4, 2, 1, &mut rng));
    reports.push(fd_check_layer(&mut ct, &random_input(&[2, 2, 3, 3], 2), tol)?);

    let mut bn = Layer::BatchNorm2d(BatchNorm2d::new(3, &mut rng));
    reports.push(fd_check_layer(&mut bn, &random_input(&[4, 3, 2, 2], 3), tol)?);

    let mut lrelu = Layer::leaky_relu(0.2);
    reports.push(fd_check_layer(&mut lrelu, &random_input(&[2, 7], 4), tol)?);

    let mut relu = Layer::relu();
    reports.push(fd_check_layer(&mut relu, &random_input(&[2, 7], 5), tol)?);

    let mut tanh = Layer::tanh();
    reports.push(fd_check_layer(&mut tanh, &random_input(&[2, 5], 6), tol)?);

    let mut sigmoid = Layer::sigmoid();
    reports.push(fd_check_layer(&mut sigmoid, &random_input(&[2, 5], 7), tol)?);

    let mut flatten = Layer::flatten();
    reports.push(fd_check_layer(&mut flatten, &random_input(&[2, 2, 3, 3], 8), tol)?);

    let mut dense = Layer::Dense(Dense::new(6, 4, &mut rng));
    reports.push(fd_check_layer(&mut dense, &random_input(&[3, 6], 9), tol)?);

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_kind_passes_finite_differences() {
        for report in standard_layer_checks(FD_TOL).unwrap() {
            assert!(
                report.pass(),
                "{} failed gradcheck: max rel err {:.3e} over {} grads",
                report.name,
                report.max_rel_err,
                report.checked
            );
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        use crate::layers::Dense;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut l = Layer::Dense(Dense::new(4, 3, &mut rng));
        let report = fd_check_layer(&mut l, &random_input(&[2, 4], 12), FD_TOL).unwrap();
        assert!(report.pass(), "max rel err {:.3e}", report.max_rel_err);
    }
}
