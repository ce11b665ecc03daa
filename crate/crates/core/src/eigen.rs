//! Closed-form eigen-decomposition of symmetric 3x3 matrices.
//!
//! Eigenvalues come from the trigonometric solution of the characteristic
//! polynomial. Eigenvectors are recovered for the best-separated eigenvalue
//! by cross products of the rows of `A - λI`; the remaining pair is solved as
//! a 2x2 problem in the orthogonal complement.

use std::f64::consts::PI;

use crate::types::SymmetricTensor;
use crate::{Mat3, Vec3};

/// Eigenvalues in descending order.
pub fn eigenvalues(t: &SymmetricTensor) -> [f64; 3] {
    let [xx, yy, zz, xy, xz, yz] = t.coeffs;
    let p1 = xy * xy + xz * xz + yz * yz;
    let q = (xx + yy + zz) / 3.0;
    let p2 = (xx - q).powi(2) + (yy - q).powi(2) + (zz - q).powi(2) + 2.0 * p1;
    if p2 <= f64::MIN_POSITIVE {
        return [q, q, q];
    }
    if p1 == 0.0 {
        let mut d = [xx, yy, zz];
        d.sort_by(|a, b| b.total_cmp(a));
        return d;
    }
    let p = (p2 / 6.0).sqrt();
    let b = (t.matrix() - Mat3::identity() * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let angle = r.acos() / 3.0;
    let e1 = q + 2.0 * p * angle.cos();
    let e3 = q + 2.0 * p * (angle + 2.0 * PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    [e1, e2, e3]
}

/// Flips `v` so that its first component with magnitude above `1e-12` is positive.
pub fn canonical_sign(v: Vec3) -> Vec3 {
    for c in v.iter() {
        if c.abs() > 1e-12 {
            return if *c < 0.0 { -v } else { v };
        }
    }
    v
}

/// Unit vector orthogonal to `v` (which must be non-zero).
fn any_orthogonal(v: &Vec3) -> Vec3 {
    let a = v.abs();
    let axis = if a.x <= a.y && a.x <= a.z {
        Vec3::x()
    } else if a.y <= a.z {
        Vec3::y()
    } else {
        Vec3::z()
    };
    v.cross(&axis).normalize()
}

/// Eigenvector for an eigenvalue of multiplicity one, or `None` when the
/// rows of `A - λI` do not determine one.
fn eigenvector(m: &Mat3, lambda: f64) -> Option<Vec3> {
    let a = m - Mat3::identity() * lambda;
    let rows = [
        a.row(0).transpose(),
        a.row(1).transpose(),
        a.row(2).transpose(),
    ];
    let crosses = [
        rows[0].cross(&rows[1]),
        rows[0].cross(&rows[2]),
        rows[1].cross(&rows[2]),
    ];
    let best = crosses
        .iter()
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))?;
    let scale = rows.iter().map(|r| r.norm_squared()).fold(0.0, f64::max);
    if best.norm_squared() <= 1e-24 * scale * scale || best.norm_squared() == 0.0 {
        return None;
    }
    Some(best.normalize())
}

/// Eigenvalues (descending) with orthonormal eigenvectors as matrix columns.
///
/// The eigenvalues are Rayleigh quotients of the computed vectors, which
/// keeps clustered eigenvalues accurate where the closed form loses digits.
pub fn eigen_decompose(t: &SymmetricTensor) -> ([f64; 3], Mat3) {
    let vals = eigenvalues(t);
    let m = t.matrix();
    if vals[0] - vals[2] <= 1e-15 * vals[0].abs().max(vals[2].abs()).max(f64::MIN_POSITIVE) {
        return (vals, Mat3::identity());
    }
    // Solve first for whichever extreme eigenvalue is better separated.
    let top_isolated = vals[0] - vals[1] >= vals[1] - vals[2];
    let (iso, rest) = if top_isolated { (0, [1, 2]) } else { (2, [0, 1]) };
    let v_iso = eigenvector(&m, vals[iso]).unwrap_or_else(|| {
        if top_isolated {
            Vec3::x()
        } else {
            Vec3::z()
        }
    });
    let u = any_orthogonal(&v_iso);
    let w = v_iso.cross(&u);
    // 2x2 symmetric problem in span{u, w}.
    let a = u.dot(&(m * u));
    let b = u.dot(&(m * w));
    let c = w.dot(&(m * w));
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    let (s, co) = theta.sin_cos();
    let e1 = u * co + w * s;
    let e2 = -u * s + w * co;
    let mid = 0.5 * (a + c);
    let radius = (0.5 * (a - c)).hypot(b);
    let (hi, lo) = if e1.dot(&(m * e1)) >= e2.dot(&(m * e2)) { (e1, e2) } else { (e2, e1) };
    let mut out = [0.0; 3];
    out[iso] = v_iso.dot(&(m * v_iso));
    out[rest[0]] = mid + radius;
    out[rest[1]] = mid - radius;
    let mut vecs = [Vec3::zeros(); 3];
    vecs[iso] = v_iso;
    vecs[rest[0]] = hi;
    vecs[rest[1]] = lo;
    (out, Mat3::from_columns(&vecs))
}

/// Largest eigenvalue and its unit eigenvector, sign-normalized.
///
/// When the top eigenvalue is repeated, the eigenspace is spanned by several
/// directions and the choice is a convention: for a fully isotropic tensor
/// the result is `(1, 0, 0)`.
pub fn dominant(t: &SymmetricTensor) -> (f64, Vec3) {
    let vals = eigenvalues(t);
    let m = t.matrix();
    let v = match eigenvector(&m, vals[0]) {
        Some(v) => v,
        None => {
            // Repeated top eigenvalue: pick within the eigenspace, which is
            // the orthogonal complement of the rows of `A - λI`.
            let a = m - Mat3::identity() * vals[0];
            let row = (0..3)
                .map(|i| a.row(i).transpose())
                .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))
                .unwrap();
            if row.norm_squared() <= 1e-24 * (1.0 + vals[0] * vals[0]) {
                Vec3::x()
            } else {
                let row = row.normalize();
                // Project the coordinate axes onto the eigenspace, keep the longest.
                [Vec3::x(), Vec3::y(), Vec3::z()]
                    .iter()
                    .map(|e| e - row * row.dot(e))
                    .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))
                    .unwrap()
                    .normalize()
            }
        }
    };
    (vals[0], canonical_sign(v))
}

/// Reconstructs the tensor with negative eigenvalues replaced by zero.
pub fn clamp_positive(t: &SymmetricTensor) -> SymmetricTensor {
    let (vals, vecs) = eigen_decompose(t);
    let mut m = Mat3::zeros();
    for (i, l) in vals.iter().enumerate() {
        let v = vecs.column(i);
        m += v * v.transpose() * l.max(0.0);
    }
    SymmetricTensor {
        valid: t.valid,
        ..SymmetricTensor::from_matrix(&m)
    }
}
