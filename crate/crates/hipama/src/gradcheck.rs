//! Finite-difference gradient verification.
//!
//! The checker evaluates the loss function twice per input element (central
//! differences) and never touches the reverse-mode path, so it serves as an
//! independent oracle for `Tensor::backward`.

/// Central-difference gradients of `f` with respect to every element of
/// every input buffer. `f` must rebuild its computation from the raw values
/// on each call.
pub fn central_diff_grads(
    mut f: impl FnMut(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    h: f64,
) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for p in 0..inputs.len() {
        let mut g = vec![0.0; inputs[p].len()];
        for i in 0..inputs[p].len() {
            let mut plus = inputs.to_vec();
            plus[p][i] += h;
            let fp = f(&plus);
            let mut minus = inputs.to_vec();
            minus[p][i] -= h;
            let fm = f(&minus);
            g[i] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst per-element relative error between an analytic and a numeric
/// gradient. The denominator is floored so that near-zero pairs compare
/// absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Convenience: checks a whole set of (name, analytic, numeric) triples and
/// returns the worst offender.
pub fn worst_of<'a>(
    triples: impl IntoIterator<Item = (&'a str, Vec<f64>, Vec<f64>)>,
) -> (String, f64) {
    let mut worst = (String::new(), 0.0f64);
    for (name, a, n) in triples {
        let e = max_rel_err(&a, &n);
        if e >= worst.1 {
            worst = (name.to_string(), e);
        }
    }
    worst
}
