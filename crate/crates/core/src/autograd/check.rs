//! Finite-difference gradient verification.

use rand::Rng;

use super::graph::{Graph, Tensor, Var};

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor index, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with an absolute floor, so entries whose true gradient is
/// numerically zero do not divide by noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic gradients of `loss` with central differences at
/// `samples` randomly chosen coordinates across `params`.
pub fn check_gradients<R, F>(
    params: &[Tensor<f64>],
    loss: F,
    samples: usize,
    step: f64,
    floor: f64,
    rng: &mut R,
) -> GradCheckReport
where
    R: Rng,
    F: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut coords = Vec::with_capacity(samples);
    for _ in 0..if total == 0 { 0 } else { samples } {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= params[which].len() {
            flat -= params[which].len();
            which += 1;
        }
        coords.push((which, flat));
    }
    check_coordinates(params, loss, &coords, step, floor)
}

/// Like [`check_gradients`] but at `per_tensor` random entries of every tensor.
pub fn check_gradients_per_tensor<R, F>(
    params: &[Tensor<f64>],
    loss: F,
    per_tensor: usize,
    step: f64,
    floor: f64,
    rng: &mut R,
) -> GradCheckReport
where
    R: Rng,
    F: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let mut coords = Vec::new();
    for (i, p) in params.iter().enumerate() {
        for _ in 0..per_tensor.min(p.len()) {
            coords.push((i, rng.random_range(0..p.len())));
        }
    }
    check_coordinates(params, loss, &coords, step, floor)
}

/// Check the given `(tensor, element)` coordinates.
pub fn check_coordinates<F>(
    params: &[Tensor<f64>],
    loss: F,
    coords: &[(usize, usize)],
    step: f64,
    floor: f64,
) -> GradCheckReport
where
    F: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let l = loss(&g, &vars);
    let grads = g.backward(l);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let eval = |which: usize, idx: usize, delta: f64| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == which {
                    let mut d = p.data().to_vec();
                    d[idx] += delta;
                    g.constant(Tensor::new(p.shape().to_vec(), d))
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        let l = loss(&g, &vars);
        g.value(l).item()
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for &(which, flat) in coords {
        let numeric = (eval(which, flat, step) - eval(which, flat, -step)) / (2.0 * step);
        let a = analytic[which][flat];
        let err = relative_error(a, numeric, floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((which, flat, a, numeric));
        }
    }
    report
}
