#![allow(dead_code)]

use nblend::models::Mlp;

/// Largest elementwise `|a - n| / max(|a| + |n|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

pub fn central_differences(net: &Mlp, xs: &[Vec<f64>], ys: &[usize], h: f64) -> Vec<f64> {
    let base = net.params();
    (0..base.len())
        .map(|i| {
            let mut probe = net.clone();
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.set_params(&p);
            let up = probe.loss_and_gradient(xs, ys).0;
            p[i] = base[i] - h;
            probe.set_params(&p);
            let down = probe.loss_and_gradient(xs, ys).0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Three samples, two classes.
pub fn toy() -> (Vec<Vec<f64>>, Vec<usize>) {
    (
        vec![vec![0.2, -0.4], vec![0.9, 0.3], vec![-0.5, 0.8]],
        vec![0, 1, 1],
    )
}

/// Max relative error of the analytic gradient on the toy problem.
pub fn toy_gradient_error(dims: &[usize], seed: u64) -> f64 {
    let (xs, ys) = toy();
    let net = Mlp::init(dims, seed);
    let (_, grad) = net.loss_and_gradient(&xs, &ys);
    max_relative_error(&grad.flatten(), &central_differences(&net, &xs, &ys, 1e-6))
}
