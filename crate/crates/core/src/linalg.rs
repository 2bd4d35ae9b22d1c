//! Power-iteration spectral norms.
//!
//! The norm measures need the largest singular value of each layer's
//! matricized weights. Power iteration on the Gram matrix of the smaller side
//! gives it cheaply; the seeded start vector keeps results reproducible.

use crate::error::{CoreError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Outcome of a spectral-norm estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    /// Estimated largest singular value.
    pub value: f64,
    /// Whether successive Rayleigh-quotient estimates got within `tol`.
    pub converged: bool,
    /// Iterations actually run.
    pub iterations: usize,
}

/// Largest singular value of an r x c matrix by power iteration on the Gram
/// matrix of the smaller side. Deterministic given `rng`. Converges when
/// successive Rayleigh-quotient estimates differ by less than `tol`
/// relatively; stops at `max_iter` regardless and reports the last estimate.
///
/// An all-zero matrix yields 0 (converged).
pub fn spectral_norm(matrix: &Tensor, tol: f64, max_iter: usize, rng: &mut SeededRng) -> Result<SpectralNorm> {
    if matrix.rank() != 2 {
        return Err(CoreError::ShapeMismatch {
            op: "spectral_norm",
            detail: format!("expected rank-2 matrix, got shape {:?}", matrix.shape()),
        });
    }
    let (r, c) = (matrix.shape()[0], matrix.shape()[1]);
    if r == 0 || c == 0 {
        return Err(CoreError::ShapeMismatch {
            op: "spectral_norm",
            detail: format!("matrix extents must be >= 1, got {}x{}", r, c),
        });
    }
    if !(tol > 0.0) {
        return Err(CoreError::InvalidSpec {
            what: "spectral_norm tolerance",
            detail: format!("tol must be > 0, got {tol}"),
        });
    }

    let m: Vec<f64> = matrix.data().iter().map(|&v| v as f64).collect();
    if m.iter().all(|&v| v == 0.0) {
        return Ok(SpectralNorm { value: 0.0, converged: true, iterations: 0 });
    }

    // Gram matrix on the smaller side: B = M^T M (c x c) or M M^T (r x r).
    let n = r.min(c);
    let mut gram = vec![0f64; n * n];
    if c <= r {
        for row in m.chunks_exact(c) {
            for i in 0..c {
                let vi = row[i];
                if vi == 0.0 {
                    continue;
                }
                let g = &mut gram[i * c..][..c];
                for (gj, &vj) in g.iter_mut().zip(row) {
                    *gj += vi * vj;
                }
            }
        }
    } else {
        for i in 0..r {
            let ri = &m[i * c..][..c];
            for j in 0..r {
                let rj = &m[j * c..][..c];
                gram[i * r + j] = ri.iter().zip(rj).map(|(&a, &b)| a * b).sum();
            }
        }
    }

    let mut v = vec![0f64; n];
    let mut draws = rng.clone();
    loop {
        for x in v.iter_mut() {
            *x = draws.normal();
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            break;
        }
    }

    let mut bv = vec![0f64; n];
    let mut sigma_prev = -1.0f64;
    let mut sigma = 0.0f64;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        for (i, out) in bv.iter_mut().enumerate() {
            *out = gram[i * n..][..n].iter().zip(&v).map(|(&a, &b)| a * b).sum();
        }
        // Rayleigh quotient of the Gram matrix at unit v is v . Bv.
        let lambda: f64 = v.iter().zip(&bv).map(|(&a, &b)| a * b).sum();
        sigma = lambda.max(0.0).sqrt();
        let norm = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // v landed in the null space; restart from fresh draws.
            for x in v.iter_mut() {
                *x = draws.normal();
            }
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in v.iter_mut() {
                *x /= vn;
            }
            sigma_prev = -1.0;
            continue;
        }
        for (vi, &bvi) in v.iter_mut().zip(&bv) {
            *vi = bvi / norm;
        }
        if sigma_prev >= 0.0 && (sigma - sigma_prev).abs() <= tol * sigma.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        sigma_prev = sigma;
    }

    Ok(SpectralNorm { value: sigma, converged, iterations })
}
