//! What an edge party can reconstruct from `W^D` alone.

use slip_core::linalg::{dot, svd, Matrix};

use crate::report::{AttackKind, AttackReport, Verdict};
use crate::RedteamError;

/// Singular values below this fraction of the largest count as zero when
/// measuring the complement of `W^D`'s column space.
pub const COMPLEMENT_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SubspaceRecovery {
    pub report: AttackReport,
    pub u_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
}

/// Recovers the hidden singular vectors of a `k = 1` split as the unit
/// vectors orthogonal to the column and row spaces of `W^D`, then scores them
/// against the true `(u₁, v₁)`.
pub fn subspace_attack_k1(w_d: &Matrix, u1: &[f64], v1: &[f64]) -> Result<SubspaceRecovery, RedteamError> {
    let n = w_d.rows();
    if n != w_d.cols() {
        return Err(RedteamError::Domain(format!("W^D is {}x{}, expected square", n, w_d.cols())));
    }
    if u1.len() != n || v1.len() != n {
        return Err(RedteamError::Domain("reference vectors do not match W^D".into()));
    }
    let s = svd(w_d)?;
    let top = s.sigma.first().copied().unwrap_or(0.0);
    let rank = s.sigma.iter().filter(|&&x| x > COMPLEMENT_TOL * top).count();
    let complement_dim = n - rank;
    if complement_dim != 1 {
        return Err(RedteamError::Degenerate { complement_dim, freedom: (n + 1).saturating_sub(complement_dim) });
    }
    // The zero singular value sorts last; its singular vectors span the complements.
    let u_hat = s.u.column(n - 1);
    let v_hat = s.v.column(n - 1);
    let cos_u = dot(&u_hat, u1).abs() / norm(u1);
    let cos_v = dot(&v_hat, v1).abs() / norm(v1);
    let metric = cos_u.min(cos_v).min(1.0);
    let verdict = if metric >= 1.0 - 1e-8 { Verdict::Broken } else { Verdict::Resisted };
    let report = AttackReport::new(AttackKind::SubspaceK1, metric, 0, verdict)
        .with_note(format!("|cos u| = {cos_u:.12}, |cos v| = {cos_v:.12}"));
    Ok(SubspaceRecovery { report, u_hat, v_hat })
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// `σ̂₁ = trace(W) − Σ eig(W^D)`.
///
/// Trace equals the sum of singular values only for symmetric positive
/// semidefinite matrices, so anything else is refused.
pub fn sigma1_trace_estimate(w_d: &Matrix, trace_full: f64) -> Result<f64, RedteamError> {
    let n = w_d.rows();
    if n != w_d.cols() {
        return Err(RedteamError::Domain("W^D is not square".into()));
    }
    let scale = w_d.max_abs().max(f64::MIN_POSITIVE);
    let tol = 1e-9 * scale * n as f64;
    for i in 0..n {
        for j in 0..i {
            if (w_d[(i, j)] - w_d[(j, i)]).abs() > tol {
                return Err(RedteamError::Domain(
                    "W^D is not symmetric; trace equals the singular-value sum only for symmetric PSD matrices".into(),
                ));
            }
        }
    }
    // For symmetric W^D each eigenvalue is ±σ with the sign of uᵀv.
    let s = svd(w_d)?;
    let mut sum = 0.0;
    for j in 0..s.sigma.len() {
        let sign = dot(&s.u.column(j), &s.v.column(j));
        let lambda = if sign < 0.0 { -s.sigma[j] } else { s.sigma[j] };
        if lambda < -tol {
            return Err(RedteamError::Domain(format!(
                "W^D has eigenvalue {lambda:.3e}; the trace identity needs a PSD matrix"
            )));
        }
        sum += lambda;
    }
    Ok(trace_full - sum)
}
