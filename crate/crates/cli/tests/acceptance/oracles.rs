//! Independent reference implementations used only by the acceptance suite.
//! Nothing here may call into the code paths it checks.

/// One-sided Jacobi SVD: returns the singular values of an r x c matrix
/// (row-major), descending. Orthogonalizes column pairs of a working copy
/// until rotations vanish; the column norms are then the singular values.
pub fn jacobi_singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    assert_eq!(data.len(), rows * cols);
    // Work on the transpose when rows < cols so columns stay at most rows.
    if rows < cols {
        let mut t = vec![0f64; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = data[r * cols + c];
            }
        }
        return jacobi_singular_values(cols, rows, &t);
    }
    let m = rows;
    let n = cols;
    let mut a = data.to_vec(); // column access below
    let col = |a: &[f64], j: usize, i: usize| a[i * n + j];
    let eps = 1e-14;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut app, mut aqq, mut apq) = (0f64, 0f64, 0f64);
                for i in 0..m {
                    let (x, y) = (col(&a, p, i), col(&a, q, i));
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= eps * (app * aqq).sqrt().max(f64::MIN_POSITIVE) {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let x = col(&a, p, i);
                    let y = col(&a, q, i);
                    a[i * n + p] = c * x - s * y;
                    a[i * n + q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| col(&a, j, i).powi(2)).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).expect("finite singular values"));
    sv
}

/// Sum over all input-to-output paths of the product of squared weights of a
/// bias-free dense chain; weights[i] is d_i x d_{i+1} row-major.
pub fn path_enumeration_sum(dims: &[usize], weights: &[Vec<f64>]) -> f64 {
    assert_eq!(weights.len() + 1, dims.len());
    fn walk(dims: &[usize], weights: &[Vec<f64>], layer: usize, unit: usize) -> f64 {
        if layer == weights.len() {
            return 1.0;
        }
        let (din, dout) = (dims[layer], dims[layer + 1]);
        debug_assert_eq!(weights[layer].len(), din * dout);
        let mut total = 0.0;
        for next in 0..dout {
            let w = weights[layer][unit * dout + next];
            total += w * w * walk(dims, weights, layer + 1, next);
        }
        total
    }
    (0..dims[0]).map(|u| walk(dims, weights, 0, u)).sum()
}

/// Kendall's tau written directly from its definition: the average over
/// ordered pairs (h1 != h2) of sign(dmu) * sign(dg), normalizer n(n-1).
pub fn kendall_reference(mu: &[f64], g: &[f64]) -> f64 {
    let n = mu.len();
    assert!(n >= 2 && g.len() == n);
    let sgn = |x: f64| -> f64 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let mut total = 0f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += sgn(mu[i] - mu[j]) * sgn(g[i] - g[j]);
            }
        }
    }
    total / (n as f64 * (n as f64 - 1.0))
}

#[test]
fn jacobi_matches_hand_cases() {
    // diag(3, 1): singular values 3, 1.
    let sv = jacobi_singular_values(2, 2, &[3.0, 0.0, 0.0, 1.0]);
    assert!((sv[0] - 3.0).abs() < 1e-12 && (sv[1] - 1.0).abs() < 1e-12);
    // Rank-1 outer product [1,2]^T [3,4]: sigma = sqrt(5) * 5.
    let sv = jacobi_singular_values(2, 2, &[3.0, 4.0, 6.0, 8.0]);
    assert!((sv[0] - (5.0f64.sqrt() * 5.0)).abs() < 1e-10, "{sv:?}");
    assert!(sv[1].abs() < 1e-10);
    // Wide matrix goes through the transpose path.
    let sv = jacobi_singular_values(1, 3, &[2.0, 3.0, 6.0]);
    assert!((sv[0] - 7.0).abs() < 1e-12);
}

#[test]
fn path_enumeration_hand_case() {
    // 2 -> 2 -> 1 chain.
    let dims = [2, 2, 1];
    let w1 = vec![1.0, -2.0, 0.5, 3.0];
    let w2 = vec![2.0, -1.0];
    let total = path_enumeration_sum(&dims, &[w1, w2]);
    // paths: (1*2)^2 + (-2*-1)^2 + (0.5*2)^2 + (3*-1)^2 = 4 + 4 + 1 + 9.
    assert!((total - 18.0).abs() < 1e-12);
}

#[test]
fn kendall_reference_hand_case() {
    assert_eq!(kendall_reference(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
    let t = kendall_reference(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
    assert!((t - 4.0 / 6.0).abs() < 1e-15);
}
