//! Matrix-free element-by-element (EBE) application of the global system
//! operator, in single and multi-right-hand-side form.
//!
//! The global matrix is never formed: each application gathers the element's
//! 30 (or 30·r) input values, applies `A_e = c_m·M_e + c_k·K_e` built on the
//! fly from the stored mass/stiffness blocks, and scatters the result back.
//! Elements are pre-partitioned into node-disjoint batches (greedy coloring)
//! so the parallel scatter needs no atomics: within a batch no two elements
//! write the same output entry, and batches run in a fixed order, making the
//! result bit-identical for any thread count.
//!
//! The multi-RHS variant carries `r` interleaved lanes per DOF, so each
//! element-matrix entry loaded from memory is reused across all lanes — the
//! point of batching several cases into one solve.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::elasticity::{system_operator_coeffs, ElementOperatorSet};

#[derive(Debug, Error)]
pub enum EbeError {
    #[error("vector length {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("lane count mismatch: {got} vs {expected}")]
    LaneMismatch { got: usize, expected: usize },
    #[error("constrained DOF {dof} out of range for {n_dofs} DOFs")]
    ConstraintOutOfRange { dof: usize, n_dofs: usize },
    #[error("element coloring needs more than {limit} colors")]
    TooManyColors { limit: usize },
}

/// `r` right-hand-side lanes interleaved per DOF: the values of DOF `d` for
/// all cases sit at `data[d·r .. d·r + r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiVector {
    pub r: usize,
    pub n_dofs: usize,
    pub data: Vec<f64>,
}

impl MultiVector {
    pub fn zeros(n_dofs: usize, r: usize) -> Self {
        assert!(r >= 1);
        MultiVector {
            r,
            n_dofs,
            data: vec![0.0; n_dofs * r],
        }
    }

    /// Pack separate case vectors into interleaved layout.
    pub fn from_lanes(lanes: &[impl AsRef<[f64]>]) -> Self {
        assert!(!lanes.is_empty());
        let n_dofs = lanes[0].as_ref().len();
        let r = lanes.len();
        let mut mv = MultiVector::zeros(n_dofs, r);
        for (l, lane) in lanes.iter().enumerate() {
            mv.set_lane(l, lane.as_ref());
        }
        mv
    }

    pub fn lane(&self, l: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_dofs];
        self.copy_lane_into(l, &mut out);
        out
    }

    pub fn copy_lane_into(&self, l: usize, out: &mut [f64]) {
        assert!(l < self.r);
        assert_eq!(out.len(), self.n_dofs);
        for (d, o) in out.iter_mut().enumerate() {
            *o = self.data[d * self.r + l];
        }
    }

    pub fn set_lane(&mut self, l: usize, values: &[f64]) {
        assert!(l < self.r);
        assert_eq!(values.len(), self.n_dofs);
        for (d, &v) in values.iter().enumerate() {
            self.data[d * self.r + l] = v;
        }
    }

    pub fn get(&self, dof: usize, lane: usize) -> f64 {
        self.data[dof * self.r + lane]
    }
}

/// Raw pointer wrapper that lets disjoint element scatters run in parallel.
/// Safety rests on the coloring invariant: within one batch, no two elements
/// share a node, so no two scatters touch the same index.
struct DisjointWriter(*mut f64);
unsafe impl Sync for DisjointWriter {}
impl DisjointWriter {
    #[inline]
    unsafe fn add(&self, idx: usize, v: f64) {
        *self.0.add(idx) += v;
    }
}

/// Element operators plus the scatter schedule and constraint mask needed to
/// act as the global system operator.
pub struct EbeOperator {
    pub ops: Arc<ElementOperatorSet>,
    /// Sorted DOFs emulating eliminated (unit-diagonal) rows.
    pub constrained_dofs: Vec<usize>,
    /// Per-DOF constraint flags (same content as `constrained_dofs`).
    constrained_mask: Vec<bool>,
    /// Node-disjoint element batches; batches are applied in order.
    pub batches: Vec<Vec<u32>>,
}

impl EbeOperator {
    pub fn new(
        ops: Arc<ElementOperatorSet>,
        mut constrained_dofs: Vec<usize>,
    ) -> Result<Self, EbeError> {
        let n_dofs = 3 * ops.n_nodes;
        constrained_dofs.sort_unstable();
        constrained_dofs.dedup();
        if let Some(&d) = constrained_dofs.last() {
            if d >= n_dofs {
                return Err(EbeError::ConstraintOutOfRange { dof: d, n_dofs });
            }
        }
        let batches = color_elements(&ops.node_map, ops.n_nodes)?;
        let mut constrained_mask = vec![false; n_dofs];
        for &d in &constrained_dofs {
            constrained_mask[d] = true;
        }
        Ok(EbeOperator {
            ops,
            constrained_dofs,
            constrained_mask,
            batches,
        })
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.ops.n_nodes
    }

    /// Single-vector sweep `y = Σ_e P_eᵀ (c_m M_e + c_k K_e) P_e x`, serial
    /// in schedule order. This is the reference path the batched kernel must
    /// reproduce bit-for-bit at r = 1.
    ///
    /// With `masked`, constrained entries of the gathered input read as zero
    /// — the column half of the in-place elimination.
    fn combination_single_into(
        &self,
        coeff: impl Fn(usize) -> (f64, f64),
        x: &[f64],
        y: &mut [f64],
        masked: bool,
    ) {
        assert_eq!(x.len(), self.n_dofs());
        assert_eq!(y.len(), self.n_dofs());
        y.fill(0.0);
        for batch in &self.batches {
            for &e in batch {
                let e = e as usize;
                let (cm, ck) = coeff(e);
                let me = self.ops.m_of(e);
                let ke = self.ops.k_of(e);
                let map = &self.ops.node_map[e];
                let mut xe = [0.0; 30];
                for (i, &n) in map.iter().enumerate() {
                    let g = 3 * n as usize;
                    for c in 0..3 {
                        xe[3 * i + c] = if masked && self.constrained_mask[g + c] {
                            0.0
                        } else {
                            x[g + c]
                        };
                    }
                }
                let mut ye = [0.0; 30];
                for i in 0..30 {
                    let row = i * 30;
                    for j in 0..30 {
                        let a = cm * me[row + j] + ck * ke[row + j];
                        ye[i] += a * xe[j];
                    }
                }
                for (i, &n) in map.iter().enumerate() {
                    let g = 3 * n as usize;
                    y[g] += ye[3 * i];
                    y[g + 1] += ye[3 * i + 1];
                    y[g + 2] += ye[3 * i + 2];
                }
            }
        }
    }

    /// Multi-RHS sweep: one pass over the element data serves all `r` lanes.
    /// Parallel over elements within each node-disjoint batch.
    ///
    /// Dispatches to a lane-count-monomorphized body so the per-lane inner
    /// loops unroll; one lane takes the single-vector sweep outright (an
    /// `r = 1` [`MultiVector`] has exactly the flat-vector layout, and both
    /// sweeps apply the same operations in the same order, so results are
    /// bitwise identical either way).
    fn combination_multi_into(
        &self,
        coeff: impl Fn(usize) -> (f64, f64) + Sync,
        x: &MultiVector,
        y: &mut MultiVector,
        masked: bool,
    ) {
        assert_eq!(x.n_dofs, self.n_dofs());
        assert_eq!(y.n_dofs, self.n_dofs());
        assert_eq!(x.r, y.r);
        match x.r {
            1 => self.combination_single_into(coeff, &x.data, &mut y.data, masked),
            2 => self.combination_multi_generic::<2>(coeff, x, y, masked),
            3 => self.combination_multi_generic::<3>(coeff, x, y, masked),
            4 => self.combination_multi_generic::<4>(coeff, x, y, masked),
            5 => self.combination_multi_generic::<5>(coeff, x, y, masked),
            6 => self.combination_multi_generic::<6>(coeff, x, y, masked),
            7 => self.combination_multi_generic::<7>(coeff, x, y, masked),
            8 => self.combination_multi_generic::<8>(coeff, x, y, masked),
            r => panic!("lane count {r} exceeds kernel buffer"),
        }
    }

    fn combination_multi_generic<const R: usize>(
        &self,
        coeff: impl Fn(usize) -> (f64, f64) + Sync,
        x: &MultiVector,
        y: &mut MultiVector,
        masked: bool,
    ) {
        y.data.fill(0.0);
        let writer = DisjointWriter(y.data.as_mut_ptr());
        let xdata = &x.data;
        for batch in &self.batches {
            let kernel = |&e: &u32| {
                let e = e as usize;
                let (cm, ck) = coeff(e);
                let me = self.ops.m_of(e);
                let ke = self.ops.k_of(e);
                let map = &self.ops.node_map[e];
                let mut xe = [0.0; 30 * MAX_LANES];
                for (i, &n) in map.iter().enumerate() {
                    let dof = 3 * n as usize;
                    for c in 0..3 {
                        let dst = (3 * i + c) * R;
                        if masked && self.constrained_mask[dof + c] {
                            xe[dst..dst + R].fill(0.0);
                        } else {
                            let src = (dof + c) * R;
                            xe[dst..dst + R].copy_from_slice(&xdata[src..src + R]);
                        }
                    }
                }
                let mut ye = [0.0; 30 * MAX_LANES];
                for i in 0..30 {
                    let row = i * 30;
                    for j in 0..30 {
                        let a = cm * me[row + j] + ck * ke[row + j];
                        for l in 0..R {
                            ye[i * R + l] += a * xe[j * R + l];
                        }
                    }
                }
                // SAFETY: elements within a batch touch disjoint nodes, so
                // these indices are written by exactly one element.
                unsafe {
                    for (i, &n) in map.iter().enumerate() {
                        let g = 3 * n as usize * R;
                        for k in 0..3 * R {
                            writer.add(g + k, ye[3 * i * R + k]);
                        }
                    }
                }
            };
            if batch.len() < 64 {
                batch.iter().for_each(kernel);
            } else {
                batch.par_iter().for_each(kernel);
            }
        }
    }

    /// `y = A·x` with `A_e = (4/dt²)M_e + (2/dt)C_e + K_e`, matching the
    /// assembled backend's in-place elimination: constrained input entries
    /// are treated as zero (column elimination) and constrained outputs pass
    /// `x` through (unit diagonal).
    pub fn matvec_into(&self, dt: f64, x: &[f64], y: &mut [f64]) {
        self.combination_single_into(
            |e| {
                let (alpha, beta) = self.ops.rayleigh[e];
                system_operator_coeffs(alpha, beta, dt)
            },
            x,
            y,
            true,
        );
        for &d in &self.constrained_dofs {
            y[d] = x[d];
        }
    }

    /// Lane-parallel version of [`EbeOperator::matvec_into`].
    pub fn matvec_multi_into(&self, dt: f64, x: &MultiVector, y: &mut MultiVector) {
        self.combination_multi_into(
            |e| {
                let (alpha, beta) = self.ops.rayleigh[e];
                system_operator_coeffs(alpha, beta, dt)
            },
            x,
            y,
            true,
        );
        let r = x.r;
        for &d in &self.constrained_dofs {
            for l in 0..r {
                y.data[d * r + l] = x.data[d * r + l];
            }
        }
    }

    /// Raw mass matvec `y = M·x` (no elimination) for right-hand sides.
    pub fn apply_mass_into(&self, x: &[f64], y: &mut [f64]) {
        self.combination_single_into(|_| (1.0, 0.0), x, y, false);
    }

    /// Raw damping matvec `y = C·x = Σ_e (α_e M_e + β_e K_e)·x`.
    pub fn apply_damping_into(&self, x: &[f64], y: &mut [f64]) {
        self.combination_single_into(|e| self.ops.rayleigh[e], x, y, false);
    }

    pub fn apply_mass_multi_into(&self, x: &MultiVector, y: &mut MultiVector) {
        self.combination_multi_into(|_| (1.0, 0.0), x, y, false);
    }

    pub fn apply_damping_multi_into(&self, x: &MultiVector, y: &mut MultiVector) {
        self.combination_multi_into(|e| self.ops.rayleigh[e], x, y, false);
    }
}

/// Largest lane count the stack-local element buffers support.
pub const MAX_LANES: usize = 8;

/// `y = A·x` through the element operators (never forming the matrix).
pub fn ebe_matvec(op: &EbeOperator, dt: f64, x: &[f64]) -> Result<Vec<f64>, EbeError> {
    if x.len() != op.n_dofs() {
        return Err(EbeError::LengthMismatch {
            got: x.len(),
            expected: op.n_dofs(),
        });
    }
    let mut y = vec![0.0; x.len()];
    op.matvec_into(dt, x, &mut y);
    Ok(y)
}

/// Multi-lane `Y = A·X`; lane `l` of the output equals `ebe_matvec` applied
/// to lane `l` of the input.
pub fn ebe_matvec_multi(
    op: &EbeOperator,
    dt: f64,
    x: &MultiVector,
) -> Result<MultiVector, EbeError> {
    if x.n_dofs != op.n_dofs() {
        return Err(EbeError::LengthMismatch {
            got: x.n_dofs,
            expected: op.n_dofs(),
        });
    }
    let mut y = MultiVector::zeros(x.n_dofs, x.r);
    op.matvec_multi_into(dt, x, &mut y);
    Ok(y)
}

/// Greedy node-disjoint coloring: each element gets the smallest color not
/// already used by any element sharing one of its nodes.
fn color_elements(node_map: &[[u32; 10]], n_nodes: usize) -> Result<Vec<Vec<u32>>, EbeError> {
    const LIMIT: usize = 128;
    let mut node_mask = vec![0u128; n_nodes];
    let mut color_of = vec![0u32; node_map.len()];
    let mut n_colors = 0usize;
    for (e, nodes) in node_map.iter().enumerate() {
        let mut forbidden = 0u128;
        for &n in nodes {
            forbidden |= node_mask[n as usize];
        }
        let color = (!forbidden).trailing_zeros() as usize;
        if color >= LIMIT {
            return Err(EbeError::TooManyColors { limit: LIMIT });
        }
        color_of[e] = color as u32;
        let bit = 1u128 << color;
        for &n in nodes {
            node_mask[n as usize] |= bit;
        }
        n_colors = n_colors.max(color + 1);
    }
    let mut batches = vec![Vec::new(); n_colors];
    for (e, &c) in color_of.iter().enumerate() {
        batches[c as usize].push(e as u32);
    }
    Ok(batches)
}
