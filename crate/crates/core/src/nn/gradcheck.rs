//! Central finite-difference checks for the hand-written backward passes.

use super::{Grads, ParamStore};

/// Norms below this are compared absolutely. Biases that feed a batch
/// norm have an exactly zero gradient which differencing only resolves to
/// rounding noise.
pub const NORM_FLOOR: f64 = 1e-7;

/// `‖a − b‖ / max(‖a‖, ‖b‖, NORM_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(NORM_FLOOR)
}

/// Numerical gradient of `f` at `x` with step `h`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(&xs);
            xs[i] = orig - h;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Per-tensor relative error of `analytic` against finite differences of
/// `loss`, over every trainable entry of `store`.
pub fn check_params(
    store: &ParamStore<f64>,
    analytic: &Grads<f64>,
    h: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> Vec<(String, f64)> {
    let mut probe = store.clone();
    let mut out = Vec::new();
    for idx in 0..store.len() {
        let entry = &store.entries()[idx];
        if !entry.trainable {
            continue;
        }
        let base = entry.data.clone();
        let num = numeric_grad(&base, h, |v| {
            probe.entries_mut()[idx].data.copy_from_slice(v);
            loss(&probe)
        });
        probe.entries_mut()[idx].data.copy_from_slice(&base);
        out.push((
            entry.name.clone(),
            relative_error(&analytic.data[idx], &num),
        ));
    }
    out
}
