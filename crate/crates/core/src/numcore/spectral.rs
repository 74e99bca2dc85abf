//! Spectral-norm estimation and normalization.
//!
//! Training keeps one [`SpectralState`] per weight and advances it by one
//! power iteration per forward pass. The exact largest singular value from
//! [`sigma_max`] is used when a constraint has to be certified.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::tape::Matrix;

/// Warm-started left singular vector estimate for one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Array1<f64>,
    pub sigma_hat: f64,
}

impl SpectralState {
    pub fn new<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Self {
        let mut u: Array1<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        let n = u.dot(&u).sqrt();
        if n > 0.0 {
            u /= n;
        } else {
            u.fill(1.0 / (rows as f64).sqrt());
        }
        Self { u, sigma_hat: 0.0 }
    }
}

/// Runs `iters` power iterations on `w`, updating `state` in place, and
/// returns the new estimate. A zero matrix yields 0 and leaves `u` alone.
pub fn power_iteration(w: &Matrix, state: &mut SpectralState, iters: usize) -> f64 {
    assert!(iters >= 1, "power_iteration needs at least one iteration");
    assert_eq!(w.nrows(), state.u.len(), "u length must equal weight rows");
    if w.iter().all(|&x| x == 0.0) {
        state.sigma_hat = 0.0;
        return 0.0;
    }
    for _ in 0..iters {
        let mut v = w.t().dot(&state.u);
        let mut nv = v.dot(&v).sqrt();
        if nv == 0.0 {
            // u fell into the left null space; restart from the heaviest row
            let j = (0..w.nrows())
                .max_by(|&a, &b| {
                    let na = w.row(a).dot(&w.row(a));
                    let nb = w.row(b).dot(&w.row(b));
                    na.total_cmp(&nb).then(b.cmp(&a))
                })
                .unwrap_or(0);
            state.u.fill(0.0);
            state.u[j] = 1.0;
            v = w.t().dot(&state.u);
            nv = v.dot(&v).sqrt();
        }
        v /= nv;
        let wu = w.dot(&v);
        let sigma = wu.dot(&wu).sqrt();
        state.u = wu / sigma;
        state.sigma_hat = sigma;
    }
    state.sigma_hat
}

/// Multiplier `min(1, target / sigma)`; 1 when `sigma` is 0.
pub fn spectral_scale(sigma: f64, target: f64) -> f64 {
    if sigma <= 0.0 {
        1.0
    } else {
        (target / sigma).min(1.0)
    }
}

/// `w * min(1, target / sigma_hat)` using the current estimate in `state`.
pub fn spectral_normalize(w: &Matrix, target: f64, state: &SpectralState) -> Matrix {
    w * spectral_scale(state.sigma_hat, target)
}

/// Singular values in descending order via one-sided Jacobi rotations.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let mut b: Array2<f64> = if a.ncols() > a.nrows() {
        a.t().to_owned()
    } else {
        a.clone()
    };
    let n = b.ncols();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let cp = b.column(p);
                let cq = b.column(q);
                let alpha = cp.dot(&cp);
                let beta = cq.dot(&cq);
                let gamma = cp.dot(&cq);
                if gamma == 0.0 {
                    continue;
                }
                let scale = (alpha * beta).sqrt();
                if scale > 0.0 {
                    off = off.max(gamma.abs() / scale);
                }
                if gamma.abs() <= 1e-15 * scale {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..b.nrows() {
                    let x = b[[r, p]];
                    let y = b[[r, q]];
                    b[[r, p]] = c * x - s * y;
                    b[[r, q]] = s * x + c * y;
                }
            }
        }
        if off <= 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| b.column(j).dot(&b.column(j)).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Largest singular value; 0 for an empty matrix.
pub fn sigma_max(a: &Matrix) -> f64 {
    singular_values(a).first().copied().unwrap_or(0.0)
}
