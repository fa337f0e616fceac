//! Preconditioned conjugate gradients over an abstract operator, in single
//! and fused multi-case form.
//!
//! Convergence is judged on the recurrence residual, but before a solve is
//! declared converged the residual is recomputed from scratch; if the
//! recomputed value misses the tolerance the iteration resumes from the true
//! residual. Every inner product uses a fixed blocked-pairwise summation
//! order, so solves are bit-reproducible run to run.
//!
//! The fused variant advances `r` independent cases through one shared
//! multi-RHS matvec. Each lane keeps its own scalars; lanes that converge
//! freeze their `x`, `r`, `p` while the remaining lanes keep iterating.

use thiserror::Error;

use crate::ebe::MultiVector;

#[derive(Debug, Error)]
pub enum CgError {
    #[error("numerical breakdown at iteration {iteration}: {quantity} = {value}")]
    Breakdown {
        iteration: usize,
        quantity: &'static str,
        value: f64,
    },
}

/// Outcome of one conjugate-gradient solve (or one lane of a fused solve).
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Iterations executed (for a fused lane: the global iteration index at
    /// which the lane last froze).
    pub iterations: usize,
    pub initial_relative_residual: f64,
    /// From-scratch `‖f − A x‖₂ / ‖f‖₂` of the returned iterate.
    pub final_relative_residual: f64,
    pub converged: bool,
}

/// Dot product with a fixed summation order: serial partial sums over
/// 64-element blocks, combined pairwise. The order never depends on thread
/// count or vector content, so repeated runs agree bit-for-bit.
pub fn det_dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    det_dot_strided(a, b, 0, 1, a.len())
}

pub fn det_norm(a: &[f64]) -> f64 {
    det_dot(a, a).sqrt()
}

/// Blocked-pairwise dot over one lane of interleaved storage: element `d` of
/// the lane lives at `d·r + lane`. With `r = 1`, this is exactly `det_dot`,
/// which keeps single-case and fused solves numerically identical.
fn det_dot_strided(a: &[f64], b: &[f64], lane: usize, r: usize, n: usize) -> f64 {
    const BLOCK: usize = 64;
    let mut partials = Vec::with_capacity(n.div_ceil(BLOCK));
    let mut d = 0;
    while d < n {
        let end = (d + BLOCK).min(n);
        let mut s = 0.0;
        for i in d..end {
            s += a[i * r + lane] * b[i * r + lane];
        }
        partials.push(s);
        d = end;
    }
    pairwise_sum(&partials)
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

fn lane_dot(a: &MultiVector, b: &MultiVector, lane: usize) -> f64 {
    det_dot_strided(&a.data, &b.data, lane, a.r, a.n_dofs)
}

fn lane_norm(a: &MultiVector, lane: usize) -> f64 {
    lane_dot(a, a, lane).sqrt()
}

fn check_finite(value: f64, quantity: &'static str, iteration: usize) -> Result<f64, CgError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CgError::Breakdown {
            iteration,
            quantity,
            value,
        })
    }
}

/// Solve `A x = f` by preconditioned CG from initial guess `x0`.
///
/// `apply_a(x, y)` must write `y = A x` for a symmetric positive definite
/// operator on the unconstrained subspace; `precond(r, z)` writes
/// `z = B⁻¹ r`. Returns the iterate and a report; `converged = false` after
/// `max_iter` iterations returns the best iterate found.
///
/// A zero right-hand side short-circuits to the zero solution.
pub fn pcg_solve(
    mut apply_a: impl FnMut(&[f64], &mut [f64]),
    mut precond: impl FnMut(&[f64], &mut [f64]),
    f: &[f64],
    x0: &[f64],
    epsilon: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport), CgError> {
    let n = f.len();
    assert_eq!(x0.len(), n);
    let f_norm = det_norm(f);
    if f_norm == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveReport {
                iterations: 0,
                initial_relative_residual: 0.0,
                final_relative_residual: 0.0,
                converged: true,
            },
        ));
    }

    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];

    // r = f − A x
    apply_a(&x, &mut q);
    for i in 0..n {
        r[i] = f[i] - q[i];
    }
    let mut rel = det_norm(&r) / f_norm;
    let initial_rel = rel;
    let mut rho_old = 0.0;
    let mut fresh = true; // next direction update uses β = 0
    let mut iterations = 0;
    let converged;

    loop {
        if rel < epsilon {
            // From-scratch recheck before declaring victory.
            apply_a(&x, &mut q);
            for i in 0..n {
                r[i] = f[i] - q[i];
            }
            let true_rel = det_norm(&r) / f_norm;
            if true_rel < epsilon {
                rel = true_rel;
                converged = true;
                break;
            }
            // Recurrence drifted: resume from the true residual.
            rel = true_rel;
            fresh = true;
        }
        if iterations >= max_iter {
            converged = false;
            break;
        }
        precond(&r, &mut z);
        let rho = check_finite(det_dot(&z, &r), "rho", iterations)?;
        if fresh {
            p.copy_from_slice(&z);
            fresh = false;
        } else {
            let beta = rho / rho_old;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        apply_a(&p, &mut q);
        let pq = check_finite(det_dot(&p, &q), "pᵀAp", iterations)?;
        if pq <= 0.0 {
            return Err(CgError::Breakdown {
                iteration: iterations,
                quantity: "pᵀAp",
                value: pq,
            });
        }
        let alpha = rho / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        rho_old = rho;
        iterations += 1;
        rel = check_finite(det_norm(&r) / f_norm, "residual", iterations)?;
    }

    // `rel` already holds a from-scratch value on the converged path; on the
    // max_iter path recompute it so the report is honest.
    let final_rel = if converged {
        rel
    } else {
        apply_a(&x, &mut q);
        for i in 0..n {
            r[i] = f[i] - q[i];
        }
        det_norm(&r) / f_norm
    };
    Ok((
        x,
        SolveReport {
            iterations,
            initial_relative_residual: initial_rel,
            final_relative_residual: final_rel,
            converged,
        },
    ))
}

/// Fused multi-case PCG: all lanes share each multi-RHS matvec; per-lane
/// scalars and updates are independent; converged lanes freeze.
///
/// With `r = 1` this performs exactly the same arithmetic as [`pcg_solve`].
pub fn pcg_solve_multi(
    mut apply_a: impl FnMut(&MultiVector, &mut MultiVector),
    mut precond: impl FnMut(&MultiVector, &mut MultiVector),
    f: &MultiVector,
    x0: &MultiVector,
    epsilon: f64,
    max_iter: usize,
) -> Result<(MultiVector, Vec<SolveReport>), CgError> {
    let (n, r_lanes) = (f.n_dofs, f.r);
    assert_eq!(x0.n_dofs, n);
    assert_eq!(x0.r, r_lanes);

    let mut x = x0.clone();
    let mut res = MultiVector::zeros(n, r_lanes);
    let mut z = MultiVector::zeros(n, r_lanes);
    let mut p = MultiVector::zeros(n, r_lanes);
    let mut q = MultiVector::zeros(n, r_lanes);

    let f_norm: Vec<f64> = (0..r_lanes).map(|l| lane_norm(f, l)).collect();
    // Zero-RHS lanes take the zero solution immediately.
    for (l, &fn_l) in f_norm.iter().enumerate() {
        if fn_l == 0.0 {
            for d in 0..n {
                x.data[d * r_lanes + l] = 0.0;
            }
        }
    }

    // res = f − A x
    apply_a(&x, &mut q);
    for i in 0..res.data.len() {
        res.data[i] = f.data[i] - q.data[i];
    }
    let mut rel = vec![0.0; r_lanes];
    let mut active = vec![false; r_lanes];
    let mut frozen_at = vec![0usize; r_lanes];
    let mut initial_rel = vec![0.0; r_lanes];
    for l in 0..r_lanes {
        if f_norm[l] == 0.0 {
            continue; // stays frozen with zero solution
        }
        rel[l] = lane_norm(&res, l) / f_norm[l];
        initial_rel[l] = rel[l];
        active[l] = true;
    }
    let mut rho_old = vec![0.0; r_lanes];
    let mut fresh = vec![true; r_lanes];
    let mut pending_recheck: Vec<bool> = (0..r_lanes).map(|l| f_norm[l] > 0.0).collect();
    let mut iterations = 0usize;
    let mut converged = vec![false; r_lanes];

    loop {
        // Per-lane convergence bookkeeping (mirrors the single-case loop).
        for l in 0..r_lanes {
            if active[l] && rel[l] < epsilon {
                active[l] = false;
                frozen_at[l] = iterations;
            }
        }
        if active.iter().all(|&a| !a) {
            // All lanes frozen: recheck every lane that still owes a
            // from-scratch residual; failing lanes resume.
            let mut any_pending = false;
            for l in 0..r_lanes {
                any_pending |= pending_recheck[l];
            }
            if !any_pending {
                break;
            }
            apply_a(&x, &mut q);
            let mut resumed = false;
            for l in 0..r_lanes {
                if !pending_recheck[l] {
                    continue;
                }
                for d in 0..n {
                    let i = d * r_lanes + l;
                    res.data[i] = f.data[i] - q.data[i];
                }
                let true_rel = lane_norm(&res, l) / f_norm[l];
                rel[l] = true_rel;
                if true_rel < epsilon {
                    converged[l] = true;
                    pending_recheck[l] = false;
                } else {
                    active[l] = true;
                    fresh[l] = true;
                    resumed = true;
                }
            }
            if !resumed {
                break;
            }
        }
        if iterations >= max_iter {
            break;
        }

        precond(&res, &mut z);
        for l in 0..r_lanes {
            if !active[l] {
                continue;
            }
            let rho = check_finite(lane_dot(&z, &res, l), "rho", iterations)?;
            if fresh[l] {
                for d in 0..n {
                    let i = d * r_lanes + l;
                    p.data[i] = z.data[i];
                }
                fresh[l] = false;
            } else {
                let beta = rho / rho_old[l];
                for d in 0..n {
                    let i = d * r_lanes + l;
                    p.data[i] = z.data[i] + beta * p.data[i];
                }
            }
            rho_old[l] = rho;
        }
        apply_a(&p, &mut q);
        for l in 0..r_lanes {
            if !active[l] {
                continue;
            }
            let pq = check_finite(lane_dot(&p, &q, l), "pᵀAp", iterations)?;
            if pq <= 0.0 {
                return Err(CgError::Breakdown {
                    iteration: iterations,
                    quantity: "pᵀAp",
                    value: pq,
                });
            }
            let alpha = rho_old[l] / pq;
            for d in 0..n {
                let i = d * r_lanes + l;
                x.data[i] += alpha * p.data[i];
                res.data[i] -= alpha * q.data[i];
            }
        }
        iterations += 1;
        for l in 0..r_lanes {
            if active[l] {
                rel[l] = check_finite(lane_norm(&res, l) / f_norm[l], "residual", iterations)?;
            }
        }
    }

    // Honest final residuals for lanes that never passed a recheck.
    if pending_recheck.iter().any(|&pending| pending) {
        apply_a(&x, &mut q);
        for l in 0..r_lanes {
            if pending_recheck[l] {
                for d in 0..n {
                    let i = d * r_lanes + l;
                    res.data[i] = f.data[i] - q.data[i];
                }
                rel[l] = lane_norm(&res, l) / f_norm[l];
                frozen_at[l] = iterations;
            }
        }
    }

    let reports = (0..r_lanes)
        .map(|l| SolveReport {
            iterations: frozen_at[l],
            initial_relative_residual: initial_rel[l],
            final_relative_residual: rel[l],
            converged: converged[l] || f_norm[l] == 0.0,
        })
        .collect();
    Ok((x, reports))
}
