//! Data-driven initial guesses for the per-step linear solves.
//!
//! Three pieces cooperate:
//!
//! 1. [`adams_bashforth`] — a four-step Adams–Bashforth extrapolation of the
//!    displacement field, cheap and always available once four velocity
//!    snapshots exist;
//! 2. the orthogonal-decomposition corrector ([`mgs_orthonormalize`] +
//!    [`od_predict`]) — per mesh region, the recent extrapolation errors are
//!    stored as input/output pairs, an orthonormal basis of the inputs is
//!    built with modified Gram–Schmidt, and the next error is predicted as a
//!    linear combination of the stored outputs;
//! 3. [`SController`] — a small feedback controller that grows or shrinks the
//!    history length `s` so that predictor and solver wall time stay roughly
//!    balanced.
//!
//! The corrector only supplies the *initial guess* of the iterative solver;
//! the converged solution is unchanged by construction, so a bad prediction
//! costs iterations but never accuracy.
//!
//! All routines here are deterministic: per-region work is embarrassingly
//! parallel (regions are disjoint), and the arithmetic inside a region is
//! serial with a fixed order.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::cg::{det_dot, det_norm};

/// Relative residual threshold below which a Gram–Schmidt column is treated
/// as linearly dependent and dropped from the basis.
pub const DEFAULT_DROP_TOL: f64 = 1e-12;
/// Controller dead band, lower edge: predictor cheaper than this fraction of
/// the solver time grows `s`.
pub const DEFAULT_THETA_LOW: f64 = 0.8;
/// Controller dead band, upper edge: predictor dearer than this fraction of
/// the solver time shrinks `s`.
pub const DEFAULT_THETA_HIGH: f64 = 1.1;
/// Number of recent (predictor, solver) timing samples the controller
/// averages before comparing phases.
pub const DEFAULT_TIMING_WINDOW: usize = 4;
/// Default history-length bounds for the dynamic controller.
pub const DEFAULT_S_RANGE: (usize, usize) = (8, 32);

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// Four-step Adams–Bashforth extrapolation of the displacement.
///
/// `v_hist` holds the four most recent velocity snapshots in step order,
/// oldest first: `[v⁻⁴, v⁻³, v⁻², v⁻¹]` relative to the step being
/// predicted. Returns
///
/// ```text
/// ū = u⁻¹ + dt/24 · (−9 v⁻⁴ + 37 v⁻³ − 59 v⁻² + 55 v⁻¹)
/// ```
///
/// The coefficients sum to 24, so constant velocity advances exactly by
/// `dt·v`; the rule integrates cubic velocity histories exactly.
pub fn adams_bashforth(u_prev: &[f64], v_hist: [&[f64]; 4], dt: f64) -> Vec<f64> {
    let n = u_prev.len();
    for v in &v_hist {
        debug_assert_eq!(v.len(), n);
    }
    let scale = dt / 24.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let weighted = -9.0 * v_hist[0][i] + 37.0 * v_hist[1][i] - 59.0 * v_hist[2][i]
            + 55.0 * v_hist[3][i];
        out.push(u_prev[i] + scale * weighted);
    }
    out
}

/// [`adams_bashforth`] when at least four velocity snapshots are available,
/// otherwise the zeroth-order hold `ū = u⁻¹`.
///
/// `v_hist` is in step order (oldest first); only the newest four entries are
/// used.
pub fn ab4_or_hold(u_prev: &[f64], v_hist: &[Vec<f64>], dt: f64) -> Vec<f64> {
    let m = v_hist.len();
    if m < 4 {
        return u_prev.to_vec();
    }
    adams_bashforth(
        u_prev,
        [
            &v_hist[m - 4],
            &v_hist[m - 3],
            &v_hist[m - 2],
            &v_hist[m - 1],
        ],
        dt,
    )
}

/// Orthonormal basis of a set of input snapshots together with the
/// coefficient matrix that maps inputs to the basis.
///
/// With the retained inputs gathered as columns of `X`, the invariant is
/// `P = X · U`: `p[k]` is the k-th orthonormal vector and `u[k]` its
/// coefficient column (one entry per *original* input, so dropped inputs keep
/// their row). `U` is upper triangular in the generalized sense that
/// `u[k][i] = 0` for every `i` greater than the original index of the k-th
/// kept column.
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    /// Orthonormal vectors, each of the region dimension.
    pub p: Vec<Vec<f64>>,
    /// Coefficient columns with `P = X·U`; `u[k].len() == n_inputs`.
    pub u: Vec<Vec<f64>>,
    /// Number of original input columns (the row count of `U`).
    pub n_inputs: usize,
}

impl OrthoBasis {
    /// True when every input column was dropped as degenerate.
    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Number of retained basis vectors.
    pub fn rank(&self) -> usize {
        self.p.len()
    }
}

/// Modified Gram–Schmidt orthonormalization with coefficient tracking.
///
/// Columns whose residual after projection falls below
/// `drop_tol · ‖original column‖` are dropped, shrinking the effective basis;
/// an all-degenerate input yields an empty basis. Each column is projected
/// against the accepted basis twice ("twice is enough"), which keeps
/// `PᵀP = I` at machine precision even for nearly dependent inputs. Every
/// update applied to the working vector is mirrored on its coefficient
/// column, so `P = X·U` holds to the same precision.
pub fn mgs_orthonormalize<V: AsRef<[f64]>>(x: &[V], drop_tol: f64) -> OrthoBasis {
    let s = x.len();
    let mut p: Vec<Vec<f64>> = Vec::with_capacity(s);
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(s);
    for (j, xj) in x.iter().enumerate() {
        let xj = xj.as_ref();
        let x_norm = det_norm(xj);
        let mut w = xj.to_vec();
        let mut coeff = vec![0.0; s];
        coeff[j] = 1.0;
        for _ in 0..2 {
            for (pi, ui) in p.iter().zip(&u) {
                let c = det_dot(pi, &w);
                axpy(-c, pi, &mut w);
                axpy(-c, ui, &mut coeff);
            }
        }
        let residual = det_norm(&w);
        if residual <= drop_tol * x_norm || residual == 0.0 {
            continue;
        }
        let inv = 1.0 / residual;
        for v in &mut w {
            *v *= inv;
        }
        for v in &mut coeff {
            *v *= inv;
        }
        p.push(w);
        u.push(coeff);
    }
    OrthoBasis { p, u, n_inputs: s }
}

/// Orthogonal-decomposition prediction: given the basis of the stored inputs
/// and the paired outputs `y`, estimate the output for `x_query` as
///
/// ```text
/// c = Pᵀ x_query,   y_pred = Y · (U · c)
/// ```
///
/// An empty basis returns the zero vector (the caller falls back to the
/// plain extrapolation). The prediction is linear in `x_query` and exact for
/// queries inside the span of the stored inputs whenever the pairs were
/// generated by a single linear map.
pub fn od_predict<V: AsRef<[f64]>>(basis: &OrthoBasis, y: &[V], x_query: &[f64]) -> Vec<f64> {
    let out_dim = y.first().map(|v| v.as_ref().len()).unwrap_or(x_query.len());
    let mut pred = vec![0.0; out_dim];
    if basis.is_empty() {
        return pred;
    }
    debug_assert_eq!(y.len(), basis.n_inputs);
    // c = Pᵀ x
    let c: Vec<f64> = basis.p.iter().map(|pk| det_dot(pk, x_query)).collect();
    // d = U·c, accumulated over the stored coefficient columns.
    let mut d = vec![0.0; basis.n_inputs];
    for (ck, ucol) in c.iter().zip(&basis.u) {
        axpy(*ck, ucol, &mut d);
    }
    // y_pred = Y·d
    for (dj, yj) in d.iter().zip(y) {
        if *dj != 0.0 {
            axpy(*dj, yj.as_ref(), &mut pred);
        }
    }
    pred
}

/// Per-region ring buffers of paired (input, output) snapshots.
///
/// Each pair is stored region-restricted: for region `r` only the entries at
/// `region_dofs(r)` are kept. Pushes are global (one pair per region per
/// step), so every region shares a single occupancy counter. Once
/// `s_max` pairs are held, the oldest pair is evicted on push.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    regions: Vec<Vec<u32>>,
    s_max: usize,
    occupancy: usize,
    pairs: Vec<VecDeque<(Vec<f64>, Vec<f64>)>>,
}

impl HistoryBuffer {
    /// Build from node-index regions (as produced by the mesh partitioner);
    /// each node contributes its three displacement components.
    pub fn from_node_regions(node_regions: &[Vec<u32>], s_max: usize) -> Self {
        let regions = node_regions
            .iter()
            .map(|nodes| {
                let mut dofs = Vec::with_capacity(nodes.len() * 3);
                for &n in nodes {
                    for d in 0..3u32 {
                        dofs.push(3 * n + d);
                    }
                }
                dofs
            })
            .collect();
        Self::from_dof_regions(regions, s_max)
    }

    /// Build from explicit degree-of-freedom regions.
    pub fn from_dof_regions(regions: Vec<Vec<u32>>, s_max: usize) -> Self {
        assert!(s_max >= 1, "history capacity must be at least 1");
        assert!(!regions.is_empty(), "at least one region is required");
        let pairs = regions
            .iter()
            .map(|_| VecDeque::with_capacity(s_max + 1))
            .collect();
        HistoryBuffer {
            regions,
            s_max,
            occupancy: 0,
            pairs,
        }
    }

    /// Number of regions.
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    /// Ring-buffer capacity.
    pub fn s_max(&self) -> usize {
        self.s_max
    }

    /// Number of pairs currently held (identical across regions).
    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    /// Degree-of-freedom indices belonging to `region`.
    pub fn region_dofs(&self, region: usize) -> &[u32] {
        &self.regions[region]
    }

    /// Extract the entries of `full` belonging to `region`, in region order.
    pub fn restrict(&self, region: usize, full: &[f64]) -> Vec<f64> {
        self.regions[region]
            .iter()
            .map(|&d| full[d as usize])
            .collect()
    }

    /// Push one (input, output) pair of full-length vectors; each region
    /// stores its own restriction. Evicts the oldest pair at capacity.
    pub fn push_pair(&mut self, x_full: &[f64], y_full: &[f64]) {
        for (region, ring) in self.regions.iter().zip(&mut self.pairs) {
            let x = region.iter().map(|&d| x_full[d as usize]).collect();
            let y = region.iter().map(|&d| y_full[d as usize]).collect();
            if ring.len() == self.s_max {
                ring.pop_front();
            }
            ring.push_back((x, y));
        }
        self.occupancy = (self.occupancy + 1).min(self.s_max);
    }

    /// Borrow the newest `s` pairs of a region in step order (oldest first).
    /// Returns fewer when the occupancy is below `s`.
    pub fn recent_pairs(&self, region: usize, s: usize) -> (Vec<&[f64]>, Vec<&[f64]>) {
        let ring = &self.pairs[region];
        let skip = ring.len().saturating_sub(s);
        let mut xs = Vec::with_capacity(ring.len() - skip);
        let mut ys = Vec::with_capacity(ring.len() - skip);
        for (x, y) in ring.iter().skip(skip) {
            xs.push(x.as_slice());
            ys.push(y.as_slice());
        }
        (xs, ys)
    }

    /// Drop all stored pairs.
    pub fn clear(&mut self) {
        for ring in &mut self.pairs {
            ring.clear();
        }
        self.occupancy = 0;
    }
}

/// Result of [`data_driven_initial_guess`]: the plain extrapolation is
/// returned alongside the corrected guess because the caller needs it to
/// form the next history pair.
#[derive(Debug, Clone)]
pub struct GuessResult {
    /// Plain Adams–Bashforth baseline (zeroth-order hold before four
    /// velocity snapshots exist).
    pub ab4: Vec<f64>,
    /// Corrected initial guess; equals `ab4` when no correction applied.
    pub guess: Vec<f64>,
    /// Whether the orthogonal-decomposition correction ran.
    pub corrected: bool,
}

/// Full data-driven initial guess for the next displacement.
///
/// First the Adams–Bashforth baseline `ū` is formed. The history stores, per
/// region, pairs `(x_j, y_j) = (δ^{j−1}, δ^j)` where `δ^j` is the baseline's
/// error at step `j` (true displacement minus baseline), so the learned map
/// advances the error one step. With `last_delta = δ⁻¹` as the query, each
/// region predicts its next error `δ̂` and the corrected guess is
/// `ū + δ̂`, assembled region by region.
///
/// Falls back to the plain baseline while fewer than `s` pairs are stored.
/// Region predictions run data-parallel; regions are disjoint so the result
/// does not depend on the thread count.
pub fn data_driven_initial_guess(
    u_prev: &[f64],
    v_hist: &[Vec<f64>],
    dt: f64,
    last_delta: &[f64],
    history: &HistoryBuffer,
    s: usize,
    drop_tol: f64,
) -> GuessResult {
    let ab4 = ab4_or_hold(u_prev, v_hist, dt);
    if s == 0 || history.occupancy() < s {
        let guess = ab4.clone();
        return GuessResult {
            ab4,
            guess,
            corrected: false,
        };
    }
    let corrections: Vec<Vec<f64>> = (0..history.n_regions())
        .into_par_iter()
        .map(|region| {
            let (xs, ys) = history.recent_pairs(region, s);
            let basis = mgs_orthonormalize(&xs, drop_tol);
            let query = history.restrict(region, last_delta);
            od_predict(&basis, &ys, &query)
        })
        .collect();
    let mut guess = ab4.clone();
    for (region, delta_hat) in corrections.iter().enumerate() {
        for (&dof, &v) in history.region_dofs(region).iter().zip(delta_hat) {
            guess[dof as usize] += v;
        }
    }
    GuessResult {
        ab4,
        guess,
        corrected: true,
    }
}

/// Push the newest error pair `(δ⁻¹, δ⁰)` into the history. Thin wrapper so
/// call sites read symmetrically with [`data_driven_initial_guess`].
pub fn update_history(history: &mut HistoryBuffer, prev_delta: &[f64], new_delta: &[f64]) {
    history.push_pair(prev_delta, new_delta);
}

/// Feedback controller for the history length `s`.
///
/// Each step the caller reports the elapsed predictor and solver phase
/// times. Both are smoothed over a short window; when the smoothed predictor
/// time drops below `θ_low ×` the smoothed solver time, `s` grows by one
/// (more history makes the predictor dearer and the solves cheaper), and when
/// it exceeds `θ_high ×` the solver time, `s` shrinks by one. Inside the dead
/// band `s` holds. `s` never leaves `[s_min, s_max]` and never moves by more
/// than one per adjustment.
#[derive(Debug, Clone)]
pub struct SController {
    s_min: usize,
    s_max: usize,
    s: usize,
    theta_low: f64,
    theta_high: f64,
    window_len: usize,
    window: VecDeque<(f64, f64)>,
}

impl SController {
    /// Controller with the default dead band and smoothing window, starting
    /// at `s_min`.
    pub fn new(s_min: usize, s_max: usize) -> Self {
        Self::with_params(
            s_min,
            s_max,
            DEFAULT_THETA_LOW,
            DEFAULT_THETA_HIGH,
            DEFAULT_TIMING_WINDOW,
        )
    }

    /// Fully parameterized constructor.
    pub fn with_params(
        s_min: usize,
        s_max: usize,
        theta_low: f64,
        theta_high: f64,
        window_len: usize,
    ) -> Self {
        assert!(s_min >= 1 && s_min <= s_max, "need 1 ≤ s_min ≤ s_max");
        assert!(
            theta_low > 0.0 && theta_low <= theta_high,
            "need 0 < θ_low ≤ θ_high"
        );
        assert!(window_len >= 1, "smoothing window must hold a sample");
        SController {
            s_min,
            s_max,
            s: s_min,
            theta_low,
            theta_high,
            window_len,
            window: VecDeque::with_capacity(window_len + 1),
        }
    }

    /// Current history length.
    pub fn s(&self) -> usize {
        self.s
    }

    /// The configured `(s_min, s_max)` bounds.
    pub fn bounds(&self) -> (usize, usize) {
        (self.s_min, self.s_max)
    }

    /// Force the current value (clamped to the bounds); used to seed the
    /// controller or to pin `s` in fixed-length mode.
    pub fn set_s(&mut self, s: usize) {
        self.s = s.clamp(self.s_min, self.s_max);
    }

    /// Report one step's phase timings (seconds, or any common unit) and get
    /// the updated history length.
    pub fn adjust(&mut self, predictor_elapsed: f64, solver_elapsed: f64) -> usize {
        debug_assert!(predictor_elapsed >= 0.0 && solver_elapsed >= 0.0);
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back((predictor_elapsed, solver_elapsed));
        let n = self.window.len() as f64;
        let (pred_sum, solve_sum) = self
            .window
            .iter()
            .fold((0.0, 0.0), |(p, q), &(a, b)| (p + a, q + b));
        let pred = pred_sum / n;
        let solve = solve_sum / n;
        if pred < self.theta_low * solve {
            self.s = (self.s + 1).min(self.s_max);
        } else if pred > self.theta_high * solve {
            self.s = self.s.max(self.s_min + 1) - 1;
        }
        self.s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn rel_err(got: &[f64], want: &[f64]) -> f64 {
        let denom = det_norm(want).max(1e-300);
        let diff: Vec<f64> = got.iter().zip(want).map(|(g, w)| g - w).collect();
        det_norm(&diff) / denom
    }

    // --- Adams–Bashforth -------------------------------------------------

    #[test]
    fn constant_velocity_advances_exactly() {
        // Coefficients sum to 24, and with v = 1 and dt a power of two every
        // intermediate is exact, so the displacement advances by exactly dt.
        let u = vec![0.25, -1.5, 2.0];
        let v = vec![1.0; 3];
        let dt = 0.75;
        let pred = adams_bashforth(&u, [&v, &v, &v, &v], dt);
        assert_eq!(pred, vec![0.25 + dt, -1.5 + dt, 2.0 + dt]);

        // General constant velocity: ū = u + dt·v̄ to roundoff.
        let v = vec![0.3127; 3];
        let dt = 0.01;
        let pred = adams_bashforth(&u, [&v, &v, &v, &v], dt);
        for (p, ui) in pred.iter().zip(&u) {
            assert!((p - (ui + dt * 0.3127)).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_velocity_holds_displacement() {
        let u = vec![1.0, -2.0, 0.5, 7.25];
        let z = vec![0.0; 4];
        let pred = adams_bashforth(&u, [&z, &z, &z, &z], 0.37);
        assert_eq!(pred, u);
    }

    #[test]
    fn cubic_velocity_is_integrated_exactly() {
        // v(t) cubic → the AB4 quadrature over [t₄, t₄+dt] is exact; compare
        // against the symbolic antiderivative.
        let cubics = [
            ([3.0, -2.0, 1.0, -5.0], 0.7),
            ([-1.0, 0.5, 2.0, 1.0], -0.3),
        ];
        let v = |c: [f64; 4], t: f64| c[0] * t * t * t + c[1] * t * t + c[2] * t + c[3];
        let antider = |c: [f64; 4], t: f64| {
            c[0] * t.powi(4) / 4.0 + c[1] * t * t * t / 3.0 + c[2] * t * t / 2.0 + c[3] * t
        };
        let dt = 0.3;
        let t4 = 1.2; // time of the newest snapshot = previous step
        let times = [t4 - 3.0 * dt, t4 - 2.0 * dt, t4 - dt, t4];
        let u_prev: Vec<f64> = cubics.iter().map(|&(_, u0)| u0).collect();
        let vh: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| cubics.iter().map(|&(c, _)| v(c, t)).collect())
            .collect();
        let pred = adams_bashforth(&u_prev, [&vh[0], &vh[1], &vh[2], &vh[3]], dt);
        for (k, &(c, u0)) in cubics.iter().enumerate() {
            let exact = u0 + antider(c, t4 + dt) - antider(c, t4);
            assert!(
                (pred[k] - exact).abs() <= 1e-12 * exact.abs().max(1.0),
                "component {k}: got {} want {exact}",
                pred[k]
            );
        }
    }

    #[test]
    fn short_history_falls_back_to_hold() {
        let u = vec![1.0, 2.0];
        let vh = vec![vec![5.0, 5.0]; 3]; // only three snapshots
        assert_eq!(ab4_or_hold(&u, &vh, 0.1), u);
        let vh4 = vec![vec![1.0, 1.0]; 4];
        let pred = ab4_or_hold(&u, &vh4, 0.5);
        assert_eq!(pred, vec![1.5, 2.5]);
    }

    // --- Modified Gram–Schmidt -------------------------------------------

    #[test]
    fn orthonormal_inputs_pass_through() {
        let inv = 1.0 / 2.0f64.sqrt();
        let x = vec![
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.0, inv, 0.0, 0.0, inv, 0.0],
            vec![0.0, inv, 0.0, 0.0, -inv, 0.0],
        ];
        let basis = mgs_orthonormalize(&x, DEFAULT_DROP_TOL);
        assert_eq!(basis.rank(), 4);
        assert_eq!(basis.n_inputs, 4);
        for (k, (pk, uk)) in basis.p.iter().zip(&basis.u).enumerate() {
            assert!(max_abs_diff(pk, &x[k]) <= 1e-12, "P ≠ X at column {k}");
            for (i, &ui) in uk.iter().enumerate() {
                let want = if i == k { 1.0 } else { 0.0 };
                assert!((ui - want).abs() <= 1e-12, "U ≠ I at ({i},{k})");
            }
        }
    }

    #[test]
    fn duplicate_column_is_dropped() {
        let mut rng = StdRng::seed_from_u64(101);
        let x0 = rand_vec(&mut rng, 10);
        let x2 = rand_vec(&mut rng, 10);
        let x = vec![x0.clone(), x0.clone(), x2];
        let basis = mgs_orthonormalize(&x, DEFAULT_DROP_TOL);
        assert_eq!(basis.rank(), 2);
        assert_eq!(basis.n_inputs, 3);
        // PᵀP = I still holds on the shrunken basis.
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((det_dot(&basis.p[i], &basis.p[j]) - want).abs() <= 1e-12);
            }
        }
        // And the coefficient columns still reconstruct: P = X·U.
        for (k, pk) in basis.p.iter().enumerate() {
            let mut rebuilt = vec![0.0; 10];
            for (j, xj) in x.iter().enumerate() {
                axpy(basis.u[k][j], xj, &mut rebuilt);
            }
            assert!(max_abs_diff(pk, &rebuilt) <= 1e-12, "column {k}");
        }
    }

    #[test]
    fn all_degenerate_inputs_give_empty_basis() {
        let x = vec![vec![0.0; 5], vec![0.0; 5]];
        let basis = mgs_orthonormalize(&x, DEFAULT_DROP_TOL);
        assert!(basis.is_empty());
        assert_eq!(basis.n_inputs, 2);
        let y = vec![vec![1.0; 5], vec![2.0; 5]];
        let pred = od_predict(&basis, &y, &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(pred, vec![0.0; 5]);
    }

    #[test]
    fn random_basis_is_orthonormal_and_reconstructs() {
        let mut rng = StdRng::seed_from_u64(13);
        let (s, dim) = (8, 60);
        let x: Vec<Vec<f64>> = (0..s).map(|_| rand_vec(&mut rng, dim)).collect();
        let basis = mgs_orthonormalize(&x, DEFAULT_DROP_TOL);
        assert_eq!(basis.rank(), s, "random columns should be independent");
        for i in 0..s {
            for j in 0..s {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = det_dot(&basis.p[i], &basis.p[j]);
                assert!((got - want).abs() <= 1e-10, "PᵀP − I at ({i},{j}): {got}");
            }
            // Strict upper triangularity: rows below the pivot untouched.
            for i_below in (i + 1)..s {
                assert_eq!(basis.u[i][i_below], 0.0);
            }
        }
        // P = X·U within 1e-10.
        for (k, pk) in basis.p.iter().enumerate() {
            let mut rebuilt = vec![0.0; dim];
            for (j, xj) in x.iter().enumerate() {
                axpy(basis.u[k][j], xj, &mut rebuilt);
            }
            assert!(max_abs_diff(pk, &rebuilt) <= 1e-10, "column {k}");
        }
    }

    // --- Orthogonal-decomposition prediction ------------------------------

    #[test]
    fn od_reproduces_stored_pairs_under_identity_map() {
        let mut rng = StdRng::seed_from_u64(17);
        let x: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 12)).collect();
        let basis = mgs_orthonormalize(&x, DEFAULT_DROP_TOL);
        // Y = X: the learned map is the identity on span(X).
        for k in 0..5 {
            let pred = od_predict(&basis, &x, &x[k]);
            assert!(rel_err(&pred, &x[k]) <= 1e-9, "pair {k}");
        }
    }

    #[test]
    fn od_query_orthogonal_to_span_gives_zero() {
        let mut rng = StdRng::seed_from_u64(19);
        // Inputs live on the first ten coordinates, the query on the last ten:
        // exactly orthogonal, so every projection coefficient is zero.
        let x: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut v = vec![0.0; 20];
                for e in v.iter_mut().take(10) {
                    *e = rng.gen_range(-1.0..1.0);
                }
                v
            })
            .collect();
        let y: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 20)).collect();
        let mut query = vec![0.0; 20];
        for e in query.iter_mut().skip(10) {
            *e = rng.gen_range(-1.0..1.0);
        }
        let basis = mgs_orthonormalize(&x, DEFAULT_DROP_TOL);
        let pred = od_predict(&basis, &y, &query);
        let y_scale = y.iter().map(|v| det_norm(v)).fold(0.0, f64::max);
        for p in &pred {
            assert!(p.abs() <= 1e-10 * y_scale);
        }
    }

    #[test]
    fn od_matches_generating_linear_map() {
        let mut rng = StdRng::seed_from_u64(23);
        let (s, dim) = (8, 20);
        let l: Vec<Vec<f64>> = (0..dim).map(|_| rand_vec(&mut rng, dim)).collect();
        let apply_l = |v: &[f64]| -> Vec<f64> {
            l.iter().map(|row| det_dot(row, v)).collect()
        };
        let x: Vec<Vec<f64>> = (0..s).map(|_| rand_vec(&mut rng, dim)).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|xj| apply_l(xj)).collect();
        // Query inside span(X): a random combination of the stored inputs.
        let mut query = vec![0.0; dim];
        for xj in &x {
            axpy(rng.gen_range(-1.0..1.0), xj, &mut query);
        }
        let basis = mgs_orthonormalize(&x, DEFAULT_DROP_TOL);
        let pred = od_predict(&basis, &y, &query);
        let want = apply_l(&query);
        assert!(rel_err(&pred, &want) <= 1e-8, "rel err {}", rel_err(&pred, &want));
    }

    #[test]
    fn od_is_linear_in_the_query() {
        let mut rng = StdRng::seed_from_u64(29);
        let x: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(&mut rng, 15)).collect();
        let y: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(&mut rng, 15)).collect();
        let basis = mgs_orthonormalize(&x, DEFAULT_DROP_TOL);
        let q1 = rand_vec(&mut rng, 15);
        let q2 = rand_vec(&mut rng, 15);
        let (a, b) = (0.7, -1.3);
        let combined: Vec<f64> = q1.iter().zip(&q2).map(|(p, q)| a * p + b * q).collect();
        let lhs = od_predict(&basis, &y, &combined);
        let p1 = od_predict(&basis, &y, &q1);
        let p2 = od_predict(&basis, &y, &q2);
        let rhs: Vec<f64> = p1.iter().zip(&p2).map(|(p, q)| a * p + b * q).collect();
        assert!(rel_err(&lhs, &rhs) <= 1e-12);
    }

    // --- History buffer ----------------------------------------------------

    #[test]
    fn history_saturates_and_evicts_oldest() {
        let mut h = HistoryBuffer::from_dof_regions(vec![vec![0, 1]], 3);
        assert_eq!(h.occupancy(), 0);
        for k in 0..5 {
            let kf = k as f64;
            h.push_pair(&[kf, kf + 0.5], &[kf + 1.0, kf + 1.5]);
            assert_eq!(h.occupancy(), (k + 1).min(3));
        }
        let (xs, ys) = h.recent_pairs(0, 3);
        assert_eq!(xs.len(), 3);
        // Oldest-first ordering with exactly the two oldest pushes evicted.
        for (i, k) in (2..5).enumerate() {
            let kf = k as f64;
            assert_eq!(xs[i], &[kf, kf + 0.5]);
            assert_eq!(ys[i], &[kf + 1.0, kf + 1.5]);
        }
        // Asking for fewer returns the newest ones.
        let (xs, _) = h.recent_pairs(0, 2);
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[0], &[3.0, 3.5]);
        h.clear();
        assert_eq!(h.occupancy(), 0);
    }

    #[test]
    fn node_regions_expand_to_dof_triples() {
        let h = HistoryBuffer::from_node_regions(&[vec![0, 2], vec![1]], 4);
        assert_eq!(h.n_regions(), 2);
        assert_eq!(h.region_dofs(0), &[0, 1, 2, 6, 7, 8]);
        assert_eq!(h.region_dofs(1), &[3, 4, 5]);
        let full = [10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0, 18.0];
        assert_eq!(h.restrict(1, &full), vec![13.0, 14.0, 15.0]);
    }

    // --- Full guess --------------------------------------------------------

    #[test]
    fn rest_state_predicts_rest() {
        let n = 6;
        let mut h = HistoryBuffer::from_dof_regions(vec![vec![0, 1, 2], vec![3, 4, 5]], 8);
        let zero = vec![0.0; n];
        for _ in 0..8 {
            h.push_pair(&zero, &zero);
        }
        let vh = vec![zero.clone(); 4];
        let out = data_driven_initial_guess(&zero, &vh, 0.01, &zero, &h, 8, DEFAULT_DROP_TOL);
        assert!(out.corrected);
        assert_eq!(out.guess, zero);
        assert_eq!(out.ab4, zero);
    }

    #[test]
    fn guess_falls_back_until_history_fills() {
        let mut rng = StdRng::seed_from_u64(31);
        let n = 6;
        let mut h = HistoryBuffer::from_dof_regions(vec![vec![0, 1, 2, 3, 4, 5]], 8);
        let u = rand_vec(&mut rng, n);
        let vh: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, n)).collect();
        let delta = rand_vec(&mut rng, n);
        for _ in 0..5 {
            h.push_pair(&rand_vec(&mut rng, n), &rand_vec(&mut rng, n));
        }
        // Occupancy 5 < s = 8: plain extrapolation, bitwise.
        let out = data_driven_initial_guess(&u, &vh, 0.02, &delta, &h, 8, DEFAULT_DROP_TOL);
        assert!(!out.corrected);
        assert_eq!(out.guess, out.ab4);
        assert_eq!(out.ab4, ab4_or_hold(&u, &vh, 0.02));
    }

    #[test]
    fn exact_extrapolation_leaves_guess_unchanged() {
        // When the true solution follows the extrapolation exactly, every
        // stored error pair is zero; the basis is empty and the correction
        // vanishes identically.
        let n = 9;
        let mut h =
            HistoryBuffer::from_dof_regions(vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7, 8]], 8);
        let zero = vec![0.0; n];
        for _ in 0..8 {
            h.push_pair(&zero, &zero);
        }
        let mut rng = StdRng::seed_from_u64(37);
        let u = rand_vec(&mut rng, n);
        let vh: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, n)).collect();
        let out = data_driven_initial_guess(&u, &vh, 0.05, &zero, &h, 8, DEFAULT_DROP_TOL);
        assert!(out.corrected);
        assert_eq!(out.guess, out.ab4);
    }

    #[test]
    fn synthetic_oscillation_beats_plain_extrapolation() {
        // Trajectory u(t) = Σ_k a_k sin(ω_k t) + b_k cos(ω_k t) with exact
        // velocities. The extrapolation error δ evolves by a fixed linear map
        // on a 2·m-dimensional subspace, so once the history spans it the
        // corrector should predict δ almost exactly.
        let mut rng = StdRng::seed_from_u64(41);
        let n = 12;
        let omegas = [1.3, 2.1, 3.7];
        let amps: Vec<(Vec<f64>, Vec<f64>)> = omegas
            .iter()
            .map(|_| (rand_vec(&mut rng, n), rand_vec(&mut rng, n)))
            .collect();
        let u_of = |t: f64| -> Vec<f64> {
            let mut u = vec![0.0; n];
            for (k, &w) in omegas.iter().enumerate() {
                axpy((w * t).sin(), &amps[k].0, &mut u);
                axpy((w * t).cos(), &amps[k].1, &mut u);
            }
            u
        };
        let v_of = |t: f64| -> Vec<f64> {
            let mut v = vec![0.0; n];
            for (k, &w) in omegas.iter().enumerate() {
                axpy(w * (w * t).cos(), &amps[k].0, &mut v);
                axpy(-w * (w * t).sin(), &amps[k].1, &mut v);
            }
            v
        };
        let dt = 0.05;
        let s = 8;
        let mut h = HistoryBuffer::from_dof_regions(
            vec![(0..6).collect(), (6..12).collect()],
            s,
        );
        let mut v_hist: Vec<Vec<f64>> = (0..4).map(|it| v_of(it as f64 * dt)).collect();
        let mut last_delta: Option<Vec<f64>> = None;
        let (mut wins, mut total) = (0usize, 0usize);
        for it in 4..=120 {
            let t = it as f64 * dt;
            let u_prev = u_of(t - dt);
            let u_true = u_of(t);
            let query = last_delta.clone().unwrap_or_else(|| vec![0.0; n]);
            let out =
                data_driven_initial_guess(&u_prev, &v_hist, dt, &query, &h, s, DEFAULT_DROP_TOL);
            let delta: Vec<f64> = u_true.iter().zip(&out.ab4).map(|(a, b)| a - b).collect();
            if let Some(prev) = &last_delta {
                update_history(&mut h, prev, &delta);
            }
            last_delta = Some(delta);
            if out.corrected {
                let e_guess: Vec<f64> =
                    out.guess.iter().zip(&u_true).map(|(a, b)| a - b).collect();
                let e_ab4: Vec<f64> =
                    out.ab4.iter().zip(&u_true).map(|(a, b)| a - b).collect();
                total += 1;
                if det_norm(&e_guess) < det_norm(&e_ab4) {
                    wins += 1;
                }
            }
            v_hist.push(v_of(t));
            if v_hist.len() > 4 {
                v_hist.remove(0);
            }
        }
        assert!(total >= 100, "expected ~107 corrected steps, got {total}");
        assert!(
            wins * 10 >= total * 9,
            "corrector beat the baseline on only {wins}/{total} steps"
        );
    }

    // --- Controller ---------------------------------------------------------

    #[test]
    fn controller_raises_s_when_predictor_is_cheap() {
        let mut c = SController::new(8, 32);
        assert_eq!(c.s(), 8);
        assert_eq!(c.adjust(1.0, 100.0), 9);
    }

    #[test]
    fn controller_lowers_s_when_predictor_is_expensive() {
        let mut c = SController::new(8, 32);
        c.set_s(32);
        assert_eq!(c.adjust(100.0, 1.0), 31);
    }

    #[test]
    fn controller_holds_inside_dead_band() {
        let mut c = SController::new(8, 32);
        c.set_s(20);
        // 0.8·100 = 80 < 95 < 110 = 1.1·100: no movement.
        assert_eq!(c.adjust(95.0, 100.0), 20);
        assert_eq!(c.adjust(100.0, 100.0), 20);
        assert_eq!(c.adjust(85.0, 100.0), 20);
    }

    #[test]
    fn controller_stays_in_bounds_and_steps_by_one() {
        let mut rng = StdRng::seed_from_u64(43);
        let mut c = SController::new(8, 32);
        c.set_s(20);
        let mut prev = c.s();
        for _ in 0..200 {
            let s = c.adjust(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
            assert!((8..=32).contains(&s));
            assert!(s.abs_diff(prev) <= 1);
            prev = s;
        }
        // Saturation at both ends.
        let mut c = SController::new(8, 32);
        c.set_s(32);
        for _ in 0..10 {
            assert_eq!(c.adjust(0.0, 1.0), 32);
        }
        let mut c = SController::new(8, 32);
        for _ in 0..10 {
            assert_eq!(c.adjust(1.0, 0.0), 8);
        }
    }

    #[test]
    fn controller_settles_in_dead_band_on_proportional_load() {
        // Predictor cost proportional to s (0.5 ms per unit), solver fixed at
        // 10 ms: the dead band is 16 ≤ s ≤ 22 and the controller must reach
        // it within 40 steps and then hold.
        let mut c = SController::new(8, 32);
        let mut trace = Vec::new();
        for _ in 0..40 {
            let s = c.s() as f64;
            trace.push(c.adjust(0.5 * s, 10.0));
        }
        let settled = *trace.last().unwrap();
        assert!((16..=22).contains(&settled), "settled at {settled}");
        for _ in 0..10 {
            let s = c.s() as f64;
            assert_eq!(c.adjust(0.5 * s, 10.0), settled, "controller drifted");
        }
    }

    #[test]
    #[should_panic(expected = "s_min")]
    fn controller_rejects_inverted_bounds() {
        let _ = SController::new(9, 8);
    }
}
