//! Small dense helpers for 3x3 Jacobians.

use nalgebra::{Matrix3, SMatrix, SVector};

pub type Mat3 = [[f64; 3]; 3];

/// A root of the characteristic polynomial as (real, imaginary).
pub type Complex = (f64, f64);

/// Eigenvalues of a 3x3 matrix from its characteristic cubic
/// `λ³ − tr λ² + m λ − det = 0`.
pub fn eigenvalues(a: &Mat3) -> [Complex; 3] {
    let tr = a[0][0] + a[1][1] + a[2][2];
    let m = a[0][0] * a[1][1] - a[0][1] * a[1][0] + a[0][0] * a[2][2] - a[0][2] * a[2][0]
        + a[1][1] * a[2][2]
        - a[1][2] * a[2][1];
    let det = det3(a);
    cubic_roots(-tr, m, -det)
}

fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Roots of `x³ + p x² + q x + r`.
pub fn cubic_roots(p: f64, q: f64, r: f64) -> [Complex; 3] {
    // depressed cubic t³ + a t + b with x = t − p/3
    let shift = -p / 3.0;
    let a = q - p * p / 3.0;
    let b = 2.0 * p * p * p / 27.0 - p * q / 3.0 + r;
    let disc = (b / 2.0).powi(2) + (a / 3.0).powi(3);
    let scale = 1.0 + a.abs() + b.abs();
    let mut roots = if disc > 1e-14 * scale * scale {
        let sq = disc.sqrt();
        let u = (-b / 2.0 + sq).cbrt();
        let v = (-b / 2.0 - sq).cbrt();
        let re = -(u + v) / 2.0;
        let im = (u - v) * 3f64.sqrt() / 2.0;
        [(u + v, 0.0), (re, im), (re, -im)]
    } else if a.abs() < 1e-300 {
        let t = (-b).cbrt();
        [(t, 0.0), (t, 0.0), (t, 0.0)]
    } else {
        let m = 2.0 * (-a / 3.0).max(0.0).sqrt();
        let arg = if m == 0.0 { 0.0 } else { (3.0 * b / (a * m)).clamp(-1.0, 1.0) };
        let th = arg.acos() / 3.0;
        let tau = 2.0 * std::f64::consts::PI / 3.0;
        [(m * th.cos(), 0.0), (m * (th - tau).cos(), 0.0), (m * (th - 2.0 * tau).cos(), 0.0)]
    };
    for root in roots.iter_mut() {
        root.0 += shift;
        if root.1 == 0.0 {
            root.0 = polish(p, q, r, root.0);
        }
    }
    roots
}

fn polish(p: f64, q: f64, r: f64, mut x: f64) -> f64 {
    for _ in 0..3 {
        let f = ((x + p) * x + q) * x + r;
        let df = (3.0 * x + 2.0 * p) * x + q;
        if df == 0.0 {
            break;
        }
        let nx = x - f / df;
        if !nx.is_finite() || (nx - x).abs() > 1e-6 * (1.0 + x.abs()) {
            break;
        }
        x = nx;
    }
    x
}

pub fn max_real_part(eigs: &[Complex; 3]) -> f64 {
    eigs.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max)
}

fn to_na(a: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| a[i][j])
}

/// Eigenvalues from nalgebra's Schur decomposition, as a second route.
pub fn eigenvalues_reference(a: &Mat3) -> Vec<Complex> {
    to_na(a).complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect()
}

/// Solves `Jᵀ P + P J = −I` for symmetric `P`. Returns `None` when the
/// Kronecker system is singular.
pub fn lyapunov(j: &Mat3) -> Option<Mat3> {
    // vec(JᵀP + PJ) = (I ⊗ Jᵀ + Jᵀ ⊗ I) vec(P)
    let mut k = SMatrix::<f64, 9, 9>::zeros();
    for a in 0..3 {
        for b in 0..3 {
            let row = a * 3 + b;
            for c in 0..3 {
                // (JᵀP)_{ab} = Σ_c J_{ca} P_{cb}
                k[(row, c * 3 + b)] += j[c][a];
                // (PJ)_{ab} = Σ_c P_{ac} J_{cb}
                k[(row, a * 3 + c)] += j[c][b];
            }
        }
    }
    let mut rhs = SVector::<f64, 9>::zeros();
    for i in 0..3 {
        rhs[i * 3 + i] = -1.0;
    }
    let sol = k.lu().solve(&rhs)?;
    let mut p = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            p[a][b] = 0.5 * (sol[a * 3 + b] + sol[b * 3 + a]);
        }
    }
    Some(p)
}

/// `xᵀ P x`.
pub fn quad_form(p: &Mat3, x: &[f64; 3]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += x[i] * p[i][j] * x[j];
        }
    }
    s
}
