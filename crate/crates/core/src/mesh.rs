//! Structured layered-box meshes of 10-node (quadratic) tetrahedra.
//!
//! The box `[0, Lx] × [0, Ly] × [0, Lz]` is divided into a regular grid of
//! hexahedral cells; each cell is split into six tetrahedra that share the
//! cell's main diagonal, so neighbouring cells always agree on face
//! diagonals. Midside nodes are created once per geometric edge via a map
//! keyed by the sorted corner pair, which makes the connectivity fully
//! deterministic.
//!
//! A mesh carries a two-material layering: elements whose centroid lies at
//! or below an interface surface `z = h(x, y)` get material 0, the rest
//! material 1. The bottom face (`z = 0`) is the clamped boundary; the top
//! face (`z = Lz`) is the free surface where receivers live.

use std::collections::BTreeMap;
use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("extent_{axis} must be positive, got {value}")]
    NonPositiveExtent { axis: char, value: f64 },
    #[error("div_{axis} must be at least 1, got 0")]
    ZeroDivision { axis: char },
    #[error("layer interface height {value} at ({x}, {y}) lies outside [0, {extent_z}]")]
    InterfaceOutOfRange {
        value: f64,
        x: f64,
        y: f64,
        extent_z: f64,
    },
}

/// Interface surface `z = h(x, y)` separating material 0 (below or on the
/// surface) from material 1 (above).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerInterface {
    /// Flat interface at the given height.
    Constant(f64),
    /// Basin-like bump: `h = base + amplitude · sin(πx/Lx) · sin(πy/Ly)`.
    SineBasin { base: f64, amplitude: f64 },
}

impl LayerInterface {
    pub fn height(&self, x: f64, y: f64, extent: [f64; 3]) -> f64 {
        match *self {
            LayerInterface::Constant(h) => h,
            LayerInterface::SineBasin { base, amplitude } => {
                let sx = (std::f64::consts::PI * x / extent[0]).sin();
                let sy = (std::f64::consts::PI * y / extent[1]).sin();
                base + amplitude * sx * sy
            }
        }
    }
}

/// Parameters of a structured layered box mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxMeshSpec {
    /// Physical side lengths in meters.
    pub extent: [f64; 3],
    /// Cell counts per axis; each cell becomes six tetrahedra.
    pub div: [usize; 3],
    /// Material interface; elements with centroid z ≤ h get material 0.
    pub layer_interface: LayerInterface,
}

impl BoxMeshSpec {
    fn validate(&self) -> Result<(), MeshError> {
        for (axis, (&e, &d)) in ['x', 'y', 'z']
            .iter()
            .zip(self.extent.iter().zip(self.div.iter()))
        {
            if !(e > 0.0) {
                return Err(MeshError::NonPositiveExtent {
                    axis: *axis,
                    value: e,
                });
            }
            if d == 0 {
                return Err(MeshError::ZeroDivision { axis: *axis });
            }
        }
        Ok(())
    }
}

/// Second-order tetrahedral mesh.
///
/// Each element lists its four corner nodes first, then the six edge
/// midpoints in the order (0,1), (1,2), (0,2), (0,3), (1,3), (2,3) of the
/// corner pairs they bisect.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub node_coords: Vec<[f64; 3]>,
    pub elements: Vec<[u32; 10]>,
    pub element_material: Vec<u8>,
    /// Nodes on the clamped base plane z = 0.
    pub bottom_nodes: Vec<u32>,
    /// Nodes on the free surface z = extent_z.
    pub surface_nodes: Vec<u32>,
}

/// Corner pairs bisected by midside nodes 4..9, in element-local order.
pub const EDGE_PAIRS: [(usize, usize); 6] = [(0, 1), (1, 2), (0, 2), (0, 3), (1, 3), (2, 3)];

/// The six tetrahedra of a hexahedron split along the main diagonal
/// (local corner 0 to local corner 7, with corner id = dx + 2·dy + 4·dz).
/// All six have positive volume for a right-handed cell.
const HEX_TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
];

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Total number of displacement unknowns (3 per node).
    pub fn n_dofs(&self) -> usize {
        3 * self.node_coords.len()
    }

    /// Signed volume of an element's corner tetrahedron.
    pub fn corner_volume(&self, element: usize) -> f64 {
        let e = &self.elements[element];
        let p = |i: usize| self.node_coords[e[i] as usize];
        signed_tet_volume(p(0), p(1), p(2), p(3))
    }

    /// Degree-of-freedom indices clamped by the fixed base.
    pub fn bottom_dofs(&self) -> Vec<usize> {
        let mut dofs = Vec::with_capacity(3 * self.bottom_nodes.len());
        for &n in &self.bottom_nodes {
            for c in 0..3 {
                dofs.push(3 * n as usize + c);
            }
        }
        dofs
    }
}

pub fn signed_tet_volume(a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let w = [d[0] - a[0], d[1] - a[1], d[2] - a[2]];
    let det = u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
        + u[2] * (v[0] * w[1] - v[1] * w[0]);
    det / 6.0
}

/// Generate the structured mesh described by `spec`.
pub fn generate_box_mesh(spec: &BoxMeshSpec) -> Result<Mesh, MeshError> {
    spec.validate()?;
    let [dx, dy, dz] = spec.div;
    let [ex, ey, ez] = spec.extent;
    let (hx, hy, hz) = (ex / dx as f64, ey / dy as f64, ez / dz as f64);

    // Corner grid, x fastest.
    let corner_id = |i: usize, j: usize, k: usize| i + (dx + 1) * (j + (dy + 1) * k);
    let mut node_coords: Vec<[f64; 3]> =
        Vec::with_capacity((dx + 1) * (dy + 1) * (dz + 1));
    for k in 0..=dz {
        for j in 0..=dy {
            for i in 0..=dx {
                node_coords.push([i as f64 * hx, j as f64 * hy, k as f64 * hz]);
            }
        }
    }

    let mut midpoint_of: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    let mut elements = Vec::with_capacity(6 * dx * dy * dz);
    let mut element_material = Vec::with_capacity(6 * dx * dy * dz);

    for k in 0..dz {
        for j in 0..dy {
            for i in 0..dx {
                let mut cell = [0u32; 8];
                for (local, c) in cell.iter_mut().enumerate() {
                    let (di, dj, dk) = (local & 1, (local >> 1) & 1, (local >> 2) & 1);
                    *c = corner_id(i + di, j + dj, k + dk) as u32;
                }
                for tet in HEX_TETS {
                    let corners = [
                        cell[tet[0]],
                        cell[tet[1]],
                        cell[tet[2]],
                        cell[tet[3]],
                    ];
                    let mut elem = [0u32; 10];
                    elem[..4].copy_from_slice(&corners);
                    for (m, (a, b)) in EDGE_PAIRS.iter().enumerate() {
                        let key = sorted_pair(corners[*a], corners[*b]);
                        let id = *midpoint_of.entry(key).or_insert_with(|| {
                            let pa = node_coords[key.0 as usize];
                            let pb = node_coords[key.1 as usize];
                            node_coords.push([
                                0.5 * (pa[0] + pb[0]),
                                0.5 * (pa[1] + pb[1]),
                                0.5 * (pa[2] + pb[2]),
                            ]);
                            (node_coords.len() - 1) as u32
                        });
                        elem[4 + m] = id;
                    }
                    elements.push(elem);

                    let centroid = centroid4(&node_coords, corners);
                    let h = spec
                        .layer_interface
                        .height(centroid[0], centroid[1], spec.extent);
                    if !(0.0..=ez).contains(&h) {
                        return Err(MeshError::InterfaceOutOfRange {
                            value: h,
                            x: centroid[0],
                            y: centroid[1],
                            extent_z: ez,
                        });
                    }
                    element_material.push(if centroid[2] <= h { 0 } else { 1 });
                }
            }
        }
    }

    let tol = 1e-9 * ez;
    let mut bottom_nodes = Vec::new();
    let mut surface_nodes = Vec::new();
    for (id, p) in node_coords.iter().enumerate() {
        if p[2] <= tol {
            bottom_nodes.push(id as u32);
        } else if (p[2] - ez).abs() <= tol {
            surface_nodes.push(id as u32);
        }
    }

    Ok(Mesh {
        node_coords,
        elements,
        element_material,
        bottom_nodes,
        surface_nodes,
    })
}

fn sorted_pair(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn centroid4(coords: &[[f64; 3]], ids: [u32; 4]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for id in ids {
        let p = coords[id as usize];
        for (cc, pc) in c.iter_mut().zip(p) {
            *cc += 0.25 * pc;
        }
    }
    c
}

/// Split the node set into disjoint, spatially coherent index blocks for the
/// history-based predictor.
///
/// Nodes are sorted lexicographically by (z, y, x) and sliced into
/// `round(n / target_block_size)` nearly equal chunks, so every block size is
/// within a factor of two of the target (the final chunk may be smaller when
/// there are fewer nodes than the target).
pub fn partition_predictor_regions(mesh: &Mesh, target_block_size: usize) -> Vec<Vec<u32>> {
    assert!(target_block_size >= 1, "target block size must be >= 1");
    let n = mesh.n_nodes();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| {
        let pa = mesh.node_coords[a as usize];
        let pb = mesh.node_coords[b as usize];
        (pa[2], pa[1], pa[0], a)
            .partial_cmp(&(pb[2], pb[1], pb[0], b))
            .expect("mesh coordinates are finite")
    });

    let n_blocks = ((n as f64 / target_block_size as f64).round() as usize).max(1);
    let base = n / n_blocks;
    let extra = n % n_blocks;
    let mut blocks = Vec::with_capacity(n_blocks);
    let mut start = 0;
    for b in 0..n_blocks {
        let len = base + usize::from(b < extra);
        blocks.push(order[start..start + len].to_vec());
        start += len;
    }
    debug_assert_eq!(start, n);
    blocks
}

/// Write the mesh as a plain-text debug file.
///
/// Format: a header line `nodes <N> elements <E>`, then `N` lines of
/// `x y z`, then `E` lines of `material n0 n1 ... n9`.
pub fn write_mesh_text<W: Write>(mesh: &Mesh, mut out: W) -> std::io::Result<()> {
    writeln!(out, "nodes {} elements {}", mesh.n_nodes(), mesh.n_elements())?;
    for p in &mesh.node_coords {
        writeln!(out, "{:.17e} {:.17e} {:.17e}", p[0], p[1], p[2])?;
    }
    for (elem, mat) in mesh.elements.iter().zip(&mesh.element_material) {
        write!(out, "{mat}")?;
        for n in elem {
            write!(out, " {n}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
