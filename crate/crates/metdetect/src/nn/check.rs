//! Finite-difference utilities used by gradient tests and the registration
//! metric's derivative cross-check.

/// Central finite-difference gradient of a scalar function of a flat
/// parameter vector.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative L2 error between two gradient vectors:
/// `||a - b|| / max(||a||, ||b||, eps)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut na = 0.0;
    let mut nb = 0.0;
    let mut nd = 0.0;
    for (x, y) in a.iter().zip(b) {
        na += x * x;
        nb += y * y;
        nd += (x - y) * (x - y);
    }
    nd.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}
