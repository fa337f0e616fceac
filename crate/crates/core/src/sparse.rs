//! Assembled-matrix baseline backend: a 3×3-blocked compressed-sparse-row
//! matrix, its matvec, and the block-Jacobi preconditioner extracted from
//! its diagonal.
//!
//! Fixed (bottom-face) degrees of freedom are eliminated *in place*: their
//! rows and columns are zeroed and a unit diagonal entry is kept, so every
//! backend shares one DOF numbering and constrained entries simply pass
//! through the operator.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::ebe::MultiVector;
use crate::elasticity::{system_operator_coeffs, ElementOperatorSet};
use crate::mesh::Mesh;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("element set covers {ops_nodes} nodes / {ops_elems} elements, mesh has {mesh_nodes} / {mesh_elems}")]
    InconsistentSizes {
        ops_nodes: usize,
        ops_elems: usize,
        mesh_nodes: usize,
        mesh_elems: usize,
    },
    #[error("node count {0} exceeds the 32-bit column index space")]
    TooManyNodes(usize),
    #[error("vector length {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("diagonal block of node {node} is numerically singular (det {det})")]
    SingularDiagonalBlock { node: usize, det: f64 },
}

/// Symmetric sparse matrix of dense 3×3 blocks in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCSR3 {
    pub n_nodes: usize,
    /// Length `n_nodes + 1`; block row `i` occupies `row_ptr[i]..row_ptr[i+1]`.
    pub row_ptr: Vec<usize>,
    /// Block column indices, strictly ascending within each row.
    pub col_idx: Vec<u32>,
    /// Row-major dense 3×3 blocks, parallel to `col_idx`.
    pub blocks: Vec<[f64; 9]>,
    /// Sorted DOF indices eliminated to a unit diagonal.
    pub constrained_dofs: Vec<usize>,
}

impl BlockCSR3 {
    pub fn n_dofs(&self) -> usize {
        3 * self.n_nodes
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Index into `blocks` for block (i, j), if present.
    pub fn block_pos(&self, i: usize, j: usize) -> Option<usize> {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .binary_search(&(j as u32))
            .ok()
            .map(|k| range.start + k)
    }

    /// `y = A·x`. Rows are independent, so the row loop is data-parallel and
    /// the accumulation order within a row is fixed (ascending columns),
    /// keeping results identical for any thread count.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_dofs());
        assert_eq!(y.len(), self.n_dofs());
        y.par_chunks_mut(3).enumerate().for_each(|(i, yr)| {
            let mut acc = [0.0; 3];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k] as usize * 3;
                let b = &self.blocks[k];
                for r in 0..3 {
                    acc[r] += b[3 * r] * x[j] + b[3 * r + 1] * x[j + 1] + b[3 * r + 2] * x[j + 2];
                }
            }
            yr.copy_from_slice(&acc);
        });
    }

    /// Dense copy for debugging and small-system cross-checks.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n_dofs();
        let mut d = nalgebra::DMatrix::zeros(n, n);
        for i in 0..self.n_nodes {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k] as usize;
                for r in 0..3 {
                    for c in 0..3 {
                        d[(3 * i + r, 3 * j + c)] = self.blocks[k][3 * r + c];
                    }
                }
            }
        }
        d
    }
}

/// `y = A·x` as a standalone operation with length checking.
pub fn bsr_matvec(a: &BlockCSR3, x: &[f64]) -> Result<Vec<f64>, SparseError> {
    if x.len() != a.n_dofs() {
        return Err(SparseError::LengthMismatch {
            got: x.len(),
            expected: a.n_dofs(),
        });
    }
    let mut y = vec![0.0; x.len()];
    a.matvec_into(x, &mut y);
    Ok(y)
}

/// Assemble `A = Σ_e P_eᵀ A_e P_e` with
/// `A_e = (4/dt²)M_e + (2/dt)C_e + K_e`, then eliminate the mesh's
/// bottom-face DOFs in place.
pub fn assemble_system(
    mesh: &Mesh,
    ops: &ElementOperatorSet,
    dt: f64,
) -> Result<BlockCSR3, SparseError> {
    assert!(dt > 0.0, "time step must be positive");
    let constrained = mesh.bottom_dofs();
    assemble_combination(
        mesh,
        ops,
        |e| {
            let (alpha, beta) = ops.rayleigh[e];
            system_operator_coeffs(alpha, beta, dt)
        },
        &constrained,
    )
}

/// Assemble the raw (un-eliminated) global mass matrix.
pub fn assemble_mass(mesh: &Mesh, ops: &ElementOperatorSet) -> Result<BlockCSR3, SparseError> {
    assemble_combination(mesh, ops, |_| (1.0, 0.0), &[])
}

/// Assemble the raw global Rayleigh damping matrix `C = Σ_e α_e M_e + β_e K_e`.
pub fn assemble_damping(mesh: &Mesh, ops: &ElementOperatorSet) -> Result<BlockCSR3, SparseError> {
    assemble_combination(mesh, ops, |e| ops.rayleigh[e], &[])
}

/// Shared assembly core: per-element operator `c_m·M_e + c_k·K_e` scattered
/// into the global block structure, then symmetric in-place elimination of
/// `constrained_dofs` (unit diagonal retained).
fn assemble_combination(
    mesh: &Mesh,
    ops: &ElementOperatorSet,
    coeff: impl Fn(usize) -> (f64, f64),
    constrained_dofs: &[usize],
) -> Result<BlockCSR3, SparseError> {
    if ops.n_nodes != mesh.n_nodes() || ops.n_elements() != mesh.n_elements() {
        return Err(SparseError::InconsistentSizes {
            ops_nodes: ops.n_nodes,
            ops_elems: ops.n_elements(),
            mesh_nodes: mesh.n_nodes(),
            mesh_elems: mesh.n_elements(),
        });
    }
    let n = mesh.n_nodes();
    if n > u32::MAX as usize {
        return Err(SparseError::TooManyNodes(n));
    }

    // Symbolic pass: every (row, col) node pair touched by an element.
    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(ops.n_elements() * 100);
    for elem in &ops.node_map {
        for &a in elem {
            for &b in elem {
                pairs.push((a, b));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();

    let mut row_ptr = vec![0usize; n + 1];
    for &(i, _) in &pairs {
        row_ptr[i as usize + 1] += 1;
    }
    for i in 0..n {
        row_ptr[i + 1] += row_ptr[i];
    }
    let col_idx: Vec<u32> = pairs.iter().map(|&(_, j)| j).collect();
    let mut blocks = vec![[0.0; 9]; pairs.len()];

    let mut a = BlockCSR3 {
        n_nodes: n,
        row_ptr,
        col_idx,
        blocks: Vec::new(),
    constrained_dofs: Vec::new(),
    };

    // Numeric pass, serial in element order for determinism.
    for e in 0..ops.n_elements() {
        let (cm, ck) = coeff(e);
        let me = ops.m_of(e);
        let ke = ops.k_of(e);
        let map = &ops.node_map[e];
        for (li, &gi) in map.iter().enumerate() {
            for (lj, &gj) in map.iter().enumerate() {
                let pos = a
                    .block_pos(gi as usize, gj as usize)
                    .expect("symbolic structure covers all element pairs");
                let block = &mut blocks[pos];
                for r in 0..3 {
                    for c in 0..3 {
                        let idx = (3 * li + r) * 30 + 3 * lj + c;
                        block[3 * r + c] += cm * me[idx] + ck * ke[idx];
                    }
                }
            }
        }
    }
    a.blocks = blocks;

    if !constrained_dofs.is_empty() {
        let mut mask = vec![false; 3 * n];
        for &d in constrained_dofs {
            mask[d] = true;
        }
        for i in 0..n {
            for k in a.row_ptr[i]..a.row_ptr[i + 1] {
                let j = a.col_idx[k] as usize;
                for r in 0..3 {
                    for c in 0..3 {
                        if mask[3 * i + r] || mask[3 * j + c] {
                            a.blocks[k][3 * r + c] = 0.0;
                        }
                    }
                }
            }
        }
        for &d in constrained_dofs {
            let node = d / 3;
            let pos = a
                .block_pos(node, node)
                .expect("diagonal block exists for every node");
            a.blocks[pos][4 * (d % 3)] = 1.0;
        }
        let mut sorted: Vec<usize> = constrained_dofs.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        a.constrained_dofs = sorted;
    }
    Ok(a)
}

/// Inverse 3×3 diagonal blocks, one per node.
#[derive(Debug, Clone)]
pub struct BlockJacobi {
    pub inv_diag: Vec<[f64; 9]>,
}

/// Closed-form (adjugate) 3×3 inverse; `None` when numerically singular.
pub fn invert3(b: &[f64; 9]) -> Option<[f64; 9]> {
    let det = b[0] * (b[4] * b[8] - b[5] * b[7]) - b[1] * (b[3] * b[8] - b[5] * b[6])
        + b[2] * (b[3] * b[7] - b[4] * b[6]);
    let scale = b.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    if !(det.abs() > 1e-14 * scale * scale * scale) {
        return None;
    }
    let inv_det = 1.0 / det;
    Some([
        (b[4] * b[8] - b[5] * b[7]) * inv_det,
        (b[2] * b[7] - b[1] * b[8]) * inv_det,
        (b[1] * b[5] - b[2] * b[4]) * inv_det,
        (b[5] * b[6] - b[3] * b[8]) * inv_det,
        (b[0] * b[8] - b[2] * b[6]) * inv_det,
        (b[2] * b[3] - b[0] * b[5]) * inv_det,
        (b[3] * b[7] - b[4] * b[6]) * inv_det,
        (b[1] * b[6] - b[0] * b[7]) * inv_det,
        (b[0] * b[4] - b[1] * b[3]) * inv_det,
    ])
}

/// Extract and invert the diagonal blocks of `a`.
pub fn build_block_jacobi(a: &BlockCSR3) -> Result<BlockJacobi, SparseError> {
    let mut inv_diag = Vec::with_capacity(a.n_nodes);
    for i in 0..a.n_nodes {
        let pos = a.block_pos(i, i).ok_or(SparseError::SingularDiagonalBlock {
            node: i,
            det: 0.0,
        })?;
        let block = &a.blocks[pos];
        let inv = invert3(block).ok_or_else(|| {
            let det = block[0] * (block[4] * block[8] - block[5] * block[7])
                - block[1] * (block[3] * block[8] - block[5] * block[6])
                + block[2] * (block[3] * block[7] - block[4] * block[6]);
            SparseError::SingularDiagonalBlock { node: i, det }
        })?;
        inv_diag.push(inv);
    }
    Ok(BlockJacobi { inv_diag })
}

/// Build the block-Jacobi preconditioner of the time-integration operator
/// straight from the element matrices, without assembling the global matrix.
///
/// Accumulates only the 3×3 node-diagonal blocks (element order, then local
/// node order — the same order as the assembled path, so the result is
/// bit-identical to `build_block_jacobi(&assemble_system(..))`), applies the
/// symmetric constraint elimination to them, and inverts.
pub fn build_block_jacobi_from_elements(
    ops: &ElementOperatorSet,
    dt: f64,
    constrained_dofs: &[usize],
) -> Result<BlockJacobi, SparseError> {
    assert!(dt > 0.0, "time step must be positive");
    let n = ops.n_nodes;
    let mut diag = vec![[0.0_f64; 9]; n];
    for e in 0..ops.n_elements() {
        let (alpha, beta) = ops.rayleigh[e];
        let (cm, ck) = system_operator_coeffs(alpha, beta, dt);
        let me = ops.m_of(e);
        let ke = ops.k_of(e);
        for (li, &gi) in ops.node_map[e].iter().enumerate() {
            let block = &mut diag[gi as usize];
            for r in 0..3 {
                for c in 0..3 {
                    let idx = (3 * li + r) * 30 + 3 * li + c;
                    block[3 * r + c] += cm * me[idx] + ck * ke[idx];
                }
            }
        }
    }
    if !constrained_dofs.is_empty() {
        let mut mask = vec![false; 3 * n];
        for &d in constrained_dofs {
            mask[d] = true;
        }
        for (i, block) in diag.iter_mut().enumerate() {
            for r in 0..3 {
                for c in 0..3 {
                    if mask[3 * i + r] || mask[3 * i + c] {
                        block[3 * r + c] = 0.0;
                    }
                }
            }
            for d in 0..3 {
                if mask[3 * i + d] {
                    block[4 * d] = 1.0;
                }
            }
        }
    }
    let mut inv_diag = Vec::with_capacity(n);
    for (i, block) in diag.iter().enumerate() {
        let inv = invert3(block).ok_or_else(|| {
            let det = block[0] * (block[4] * block[8] - block[5] * block[7])
                - block[1] * (block[3] * block[8] - block[5] * block[6])
                + block[2] * (block[3] * block[7] - block[4] * block[6]);
            SparseError::SingularDiagonalBlock { node: i, det }
        })?;
        inv_diag.push(inv);
    }
    Ok(BlockJacobi { inv_diag })
}

/// `z = B⁻¹·r`, node by node.
pub fn apply_block_jacobi(b: &BlockJacobi, r: &[f64], z: &mut [f64]) {
    assert_eq!(r.len(), 3 * b.inv_diag.len());
    assert_eq!(z.len(), r.len());
    for (i, inv) in b.inv_diag.iter().enumerate() {
        let (ri, zi) = (&r[3 * i..3 * i + 3], &mut z[3 * i..3 * i + 3]);
        for row in 0..3 {
            zi[row] = inv[3 * row] * ri[0] + inv[3 * row + 1] * ri[1] + inv[3 * row + 2] * ri[2];
        }
    }
}

/// Lane-wise block-Jacobi application on interleaved multi-vectors.
pub fn apply_block_jacobi_multi(b: &BlockJacobi, r: &MultiVector, z: &mut MultiVector) {
    assert_eq!(r.n_dofs, 3 * b.inv_diag.len());
    assert_eq!(r.r, z.r);
    assert_eq!(r.n_dofs, z.n_dofs);
    let lanes = r.r;
    for (i, inv) in b.inv_diag.iter().enumerate() {
        let base = 3 * i * lanes;
        for lane in 0..lanes {
            let (r0, r1, r2) = (
                r.data[base + lane],
                r.data[base + lanes + lane],
                r.data[base + 2 * lanes + lane],
            );
            for row in 0..3 {
                z.data[base + row * lanes + lane] =
                    inv[3 * row] * r0 + inv[3 * row + 1] * r1 + inv[3 * row + 2] * r2;
            }
        }
    }
}

/// Dump the stored blocks as scalar triplets: a `% dofs <n> entries <m>`
/// header, then one `row col value` line per scalar entry of every stored
/// block (0-based DOF indices).
pub fn write_triplets<W: Write>(a: &BlockCSR3, mut out: W) -> std::io::Result<()> {
    writeln!(out, "% dofs {} entries {}", a.n_dofs(), 9 * a.n_blocks())?;
    for i in 0..a.n_nodes {
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            let j = a.col_idx[k] as usize;
            for r in 0..3 {
                for c in 0..3 {
                    writeln!(out, "{} {} {:.17e}", 3 * i + r, 3 * j + c, a.blocks[k][3 * r + c])?;
                }
            }
        }
    }
    Ok(())
}
