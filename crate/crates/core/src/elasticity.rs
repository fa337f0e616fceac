//! Per-element dense operators for linear dynamic elasticity on 10-node
//! tetrahedra: consistent mass, stiffness, Rayleigh damping, and the
//! implicit time-step system operator they combine into.
//!
//! Element matrices are 30×30 (10 nodes × 3 displacement components, node
//! index major: dof = 3·local_node + component). Shape functions are the
//! standard quadratic barycentric set: corner `N = L(2L − 1)`, midside
//! `N = 4·La·Lb`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::mesh::{Mesh, EDGE_PAIRS};
use crate::quadrature::TetRule;

#[derive(Debug, Error)]
pub enum ElasticityError {
    #[error("density must be positive, got {0}")]
    BadDensity(f64),
    #[error("Young's modulus must be positive, got {0}")]
    BadYoungModulus(f64),
    #[error("Poisson ratio must lie in [0, 0.5), got {0}")]
    BadPoisson(f64),
    #[error("Rayleigh coefficients must be non-negative, got alpha={0}, beta={1}")]
    BadRayleigh(f64, f64),
    #[error("element {element} is degenerate: Jacobian determinant {det_j} at quadrature point {point}")]
    DegenerateElement {
        element: usize,
        det_j: f64,
        point: usize,
    },
    #[error("mesh references material {index} but only {count} materials were given")]
    MissingMaterial { index: usize, count: usize },
}

/// Isotropic linear-elastic material with Rayleigh damping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    /// Density ρ in kg/m³.
    pub density: f64,
    /// Young's modulus E in Pa.
    pub young_modulus: f64,
    /// Poisson ratio ν.
    pub poisson: f64,
    /// Mass-proportional damping coefficient α in 1/s.
    pub rayleigh_alpha: f64,
    /// Stiffness-proportional damping coefficient β in s.
    pub rayleigh_beta: f64,
}

impl Material {
    pub fn validate(&self) -> Result<(), ElasticityError> {
        if !(self.density > 0.0) {
            return Err(ElasticityError::BadDensity(self.density));
        }
        if !(self.young_modulus > 0.0) {
            return Err(ElasticityError::BadYoungModulus(self.young_modulus));
        }
        if !(0.0..0.5).contains(&self.poisson) {
            return Err(ElasticityError::BadPoisson(self.poisson));
        }
        if !(self.rayleigh_alpha >= 0.0 && self.rayleigh_beta >= 0.0) {
            return Err(ElasticityError::BadRayleigh(
                self.rayleigh_alpha,
                self.rayleigh_beta,
            ));
        }
        Ok(())
    }

    /// Lamé parameters (λ, μ).
    pub fn lame(&self) -> (f64, f64) {
        let e = self.young_modulus;
        let nu = self.poisson;
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        let mu = e / (2.0 * (1.0 + nu));
        (lambda, mu)
    }

    /// Shear wave speed √(μ/ρ).
    pub fn shear_wave_speed(&self) -> f64 {
        let (_, mu) = self.lame();
        (mu / self.density).sqrt()
    }

    /// 6×6 Voigt elasticity matrix (strain order: xx, yy, zz, xy, yz, zx;
    /// engineering shear strains).
    pub fn voigt(&self) -> [[f64; 6]; 6] {
        let (la, mu) = self.lame();
        let mut d = [[0.0; 6]; 6];
        for i in 0..3 {
            for j in 0..3 {
                d[i][j] = la;
            }
            d[i][i] = la + 2.0 * mu;
            d[i + 3][i + 3] = mu;
        }
        d
    }
}

/// Quadratic shape-function values at a barycentric point.
fn shape_values(l: [f64; 4]) -> [f64; 10] {
    let mut n = [0.0; 10];
    for i in 0..4 {
        n[i] = l[i] * (2.0 * l[i] - 1.0);
    }
    for (m, (a, b)) in EDGE_PAIRS.iter().enumerate() {
        n[4 + m] = 4.0 * l[*a] * l[*b];
    }
    n
}

/// Shape-function gradients with respect to the reference coordinates
/// ξ = (L2, L3, L4), using L1 = 1 − L2 − L3 − L4.
fn shape_dxi(l: [f64; 4]) -> [[f64; 3]; 10] {
    // Gradients with respect to all four barycentric coordinates first.
    let mut dl = [[0.0; 4]; 10];
    for i in 0..4 {
        dl[i][i] = 4.0 * l[i] - 1.0;
    }
    for (m, (a, b)) in EDGE_PAIRS.iter().enumerate() {
        dl[4 + m][*a] = 4.0 * l[*b];
        dl[4 + m][*b] = 4.0 * l[*a];
    }
    let mut dxi = [[0.0; 3]; 10];
    for i in 0..10 {
        for c in 0..3 {
            dxi[i][c] = dl[i][c + 1] - dl[i][0];
        }
    }
    dxi
}

struct QuadraturePoint {
    /// Shape values.
    n: [f64; 10],
    /// Physical-space gradients per node.
    grad: [[f64; 3]; 10],
    /// Integration weight already including |J|/6.
    dv: f64,
}

/// Geometry evaluation at every quadrature point; fails on non-positive
/// Jacobians.
fn geometry(
    coords: &[[f64; 3]; 10],
    rule: &TetRule,
    element: usize,
) -> Result<Vec<QuadraturePoint>, ElasticityError> {
    let mut points = Vec::with_capacity(rule.len());
    for (q, (&p, &w)) in rule.points.iter().zip(&rule.weights).enumerate() {
        let dxi = shape_dxi(p);
        // J[r][c] = Σ_nodes x_node[r] · dN_node/dξ_c
        let mut j = [[0.0; 3]; 3];
        for (x, d) in coords.iter().zip(&dxi) {
            for r in 0..3 {
                for c in 0..3 {
                    j[r][c] += x[r] * d[c];
                }
            }
        }
        let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
            - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
        if !(det > f64::MIN_POSITIVE) {
            return Err(ElasticityError::DegenerateElement {
                element,
                det_j: det,
                point: q,
            });
        }
        // Inverse transpose of J, times gradients.
        let inv_det = 1.0 / det;
        let mut jinv = [[0.0; 3]; 3];
        jinv[0][0] = (j[1][1] * j[2][2] - j[1][2] * j[2][1]) * inv_det;
        jinv[0][1] = (j[0][2] * j[2][1] - j[0][1] * j[2][2]) * inv_det;
        jinv[0][2] = (j[0][1] * j[1][2] - j[0][2] * j[1][1]) * inv_det;
        jinv[1][0] = (j[1][2] * j[2][0] - j[1][0] * j[2][2]) * inv_det;
        jinv[1][1] = (j[0][0] * j[2][2] - j[0][2] * j[2][0]) * inv_det;
        jinv[1][2] = (j[0][2] * j[1][0] - j[0][0] * j[1][2]) * inv_det;
        jinv[2][0] = (j[1][0] * j[2][1] - j[1][1] * j[2][0]) * inv_det;
        jinv[2][1] = (j[0][1] * j[2][0] - j[0][0] * j[2][1]) * inv_det;
        jinv[2][2] = (j[0][0] * j[1][1] - j[0][1] * j[1][0]) * inv_det;

        let mut grad = [[0.0; 3]; 10];
        for (g, d) in grad.iter_mut().zip(&dxi) {
            for r in 0..3 {
                // dN/dx_r = Σ_c (J^{-1})[c][r] · dN/dξ_c = (J^{-T} dξ)_r
                g[r] = jinv[0][r] * d[0] + jinv[1][r] * d[1] + jinv[2][r] * d[2];
            }
        }
        points.push(QuadraturePoint {
            n: shape_values(p),
            grad,
            dv: w * det / 6.0,
        });
    }
    Ok(points)
}

fn stiffness_with_rule(
    coords: &[[f64; 3]; 10],
    mat: &Material,
    rule: &TetRule,
    element: usize,
) -> Result<DMatrix<f64>, ElasticityError> {
    mat.validate()?;
    let d = mat.voigt();
    let mut k = DMatrix::zeros(30, 30);
    for qp in geometry(coords, rule, element)? {
        // Strain-displacement rows: xx, yy, zz, xy, yz, zx.
        let mut b = [[0.0; 30]; 6];
        for (i, g) in qp.grad.iter().enumerate() {
            let (c0, c1, c2) = (3 * i, 3 * i + 1, 3 * i + 2);
            b[0][c0] = g[0];
            b[1][c1] = g[1];
            b[2][c2] = g[2];
            b[3][c0] = g[1];
            b[3][c1] = g[0];
            b[4][c1] = g[2];
            b[4][c2] = g[1];
            b[5][c0] = g[2];
            b[5][c2] = g[0];
        }
        let mut db = [[0.0; 30]; 6];
        for r in 0..6 {
            for c in 0..30 {
                let mut s = 0.0;
                for t in 0..6 {
                    s += d[r][t] * b[t][c];
                }
                db[r][c] = s;
            }
        }
        for r in 0..30 {
            for c in 0..30 {
                let mut s = 0.0;
                for t in 0..6 {
                    s += b[t][r] * db[t][c];
                }
                k[(r, c)] += s * qp.dv;
            }
        }
    }
    Ok(k)
}

fn mass_with_rule(
    coords: &[[f64; 3]; 10],
    mat: &Material,
    rule: &TetRule,
    element: usize,
) -> Result<DMatrix<f64>, ElasticityError> {
    mat.validate()?;
    let mut m = DMatrix::zeros(30, 30);
    for qp in geometry(coords, rule, element)? {
        let scale = mat.density * qp.dv;
        for i in 0..10 {
            for j in 0..10 {
                let v = scale * qp.n[i] * qp.n[j];
                for c in 0..3 {
                    m[(3 * i + c, 3 * j + c)] += v;
                }
            }
        }
    }
    Ok(m)
}

/// Consistent element stiffness matrix.
pub fn element_stiffness(
    coords: &[[f64; 3]; 10],
    mat: &Material,
) -> Result<DMatrix<f64>, ElasticityError> {
    stiffness_with_rule(coords, mat, &TetRule::degree5(), 0)
}

/// Consistent element mass matrix.
pub fn element_mass(
    coords: &[[f64; 3]; 10],
    mat: &Material,
) -> Result<DMatrix<f64>, ElasticityError> {
    mass_with_rule(coords, mat, &TetRule::degree5(), 0)
}

/// Rayleigh damping `C = α·M + β·K`.
pub fn element_damping(k: &DMatrix<f64>, m: &DMatrix<f64>, mat: &Material) -> DMatrix<f64> {
    m * mat.rayleigh_alpha + k * mat.rayleigh_beta
}

/// Implicit-step system operator `A = (4/dt²)·M + (2/dt)·C + K` (average
/// acceleration; see the time-loop module for the matching right-hand side).
pub fn element_system_operator(
    k: &DMatrix<f64>,
    m: &DMatrix<f64>,
    c: &DMatrix<f64>,
    dt: f64,
) -> DMatrix<f64> {
    assert!(dt > 0.0, "time step must be positive");
    m * (4.0 / (dt * dt)) + c * (2.0 / dt) + k
}

/// Scalar multipliers (c_m, c_k) such that
/// `A_e = c_m·M_e + c_k·K_e` for an element with Rayleigh damping (α, β):
/// `c_m = 4/dt² + 2α/dt`, `c_k = 1 + 2β/dt`.
pub fn system_operator_coeffs(alpha: f64, beta: f64, dt: f64) -> (f64, f64) {
    (4.0 / (dt * dt) + 2.0 * alpha / dt, 1.0 + 2.0 * beta / dt)
}

/// Dense mass and stiffness blocks for every element of a mesh, plus the
/// index lists that scatter them into global vectors. This single structure
/// feeds both the assembled-matrix backend and the matrix-free backend.
pub struct ElementOperatorSet {
    pub n_nodes: usize,
    /// Global node indices per element (the gather/scatter map).
    pub node_map: Vec<[u32; 10]>,
    /// Per-element Rayleigh coefficients (α, β) from its material.
    pub rayleigh: Vec<(f64, f64)>,
    /// Row-major 30×30 stiffness blocks, element-contiguous.
    k: Vec<f64>,
    /// Row-major 30×30 mass blocks, element-contiguous.
    m: Vec<f64>,
}

impl ElementOperatorSet {
    pub fn n_elements(&self) -> usize {
        self.node_map.len()
    }

    pub fn k_of(&self, e: usize) -> &[f64] {
        &self.k[e * 900..(e + 1) * 900]
    }

    pub fn m_of(&self, e: usize) -> &[f64] {
        &self.m[e * 900..(e + 1) * 900]
    }

    /// Bytes of element-operator data touched by one full matrix-free sweep
    /// (both matrices plus the node maps).
    pub fn sweep_bytes(&self) -> usize {
        self.n_elements() * (2 * 900 * 8 + 10 * 4)
    }
}

/// Build mass and stiffness blocks for all elements.
pub fn build_element_operators(
    mesh: &Mesh,
    materials: &[Material],
) -> Result<ElementOperatorSet, ElasticityError> {
    for mat in materials {
        mat.validate()?;
    }
    let rule = TetRule::degree5();
    let ne = mesh.n_elements();
    let mut k = vec![0.0; ne * 900];
    let mut m = vec![0.0; ne * 900];
    let mut rayleigh = Vec::with_capacity(ne);
    for (e, elem) in mesh.elements.iter().enumerate() {
        let mat_idx = mesh.element_material[e] as usize;
        let mat = materials
            .get(mat_idx)
            .ok_or(ElasticityError::MissingMaterial {
                index: mat_idx,
                count: materials.len(),
            })?;
        let mut coords = [[0.0; 3]; 10];
        for (c, &n) in coords.iter_mut().zip(elem.iter()) {
            *c = mesh.node_coords[n as usize];
        }
        let ke = stiffness_with_rule(&coords, mat, &rule, e)?;
        let me = mass_with_rule(&coords, mat, &rule, e)?;
        for r in 0..30 {
            for c in 0..30 {
                k[e * 900 + r * 30 + c] = ke[(r, c)];
                m[e * 900 + r * 30 + c] = me[(r, c)];
            }
        }
        rayleigh.push((mat.rayleigh_alpha, mat.rayleigh_beta));
    }
    Ok(ElementOperatorSet {
        n_nodes: mesh.n_nodes(),
        node_map: mesh.elements.clone(),
        rayleigh,
        k,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_box_mesh, signed_tet_volume, BoxMeshSpec, LayerInterface};
    use nalgebra::DVector;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn soil() -> Material {
        Material {
            density: 1800.0,
            young_modulus: 2.0e8,
            poisson: 0.30,
            rayleigh_alpha: 0.2,
            rayleigh_beta: 0.001,
        }
    }

    /// A mildly distorted straight-edged tet10 with consistent midpoints.
    fn distorted_coords(rng: &mut StdRng) -> [[f64; 3]; 10] {
        loop {
            let mut corners = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [
                0.0, 0.0, 1.0,
            ]];
            for c in corners.iter_mut() {
                for x in c.iter_mut() {
                    *x += rng.gen_range(-0.15..0.15);
                }
            }
            if signed_tet_volume(corners[0], corners[1], corners[2], corners[3]) > 0.02 {
                return with_midpoints(corners);
            }
        }
    }

    fn with_midpoints(corners: [[f64; 3]; 4]) -> [[f64; 3]; 10] {
        let mut coords = [[0.0; 3]; 10];
        coords[..4].copy_from_slice(&corners);
        for (m, (a, b)) in EDGE_PAIRS.iter().enumerate() {
            for c in 0..3 {
                coords[4 + m][c] = 0.5 * (corners[*a][c] + corners[*b][c]);
            }
        }
        coords
    }

    fn reference_coords() -> [[f64; 3]; 10] {
        with_midpoints([
            [0.0, 0.0, 0.0],
            [1.2, 0.1, 0.0],
            [0.2, 1.1, -0.1],
            [0.0, 0.2, 0.9],
        ])
    }

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0_f64, |a, &v| a.max(v.abs()))
    }

    #[test]
    fn stiffness_is_symmetric() {
        let k = element_stiffness(&reference_coords(), &soil()).unwrap();
        let asym = max_abs(&(&k - k.transpose()));
        assert!(asym <= 1e-12 * max_abs(&k));
    }

    #[test]
    fn stiffness_annihilates_rigid_body_modes() {
        let coords = reference_coords();
        let k = element_stiffness(&coords, &soil()).unwrap();
        let scale = max_abs(&k);
        // Three translations.
        for c in 0..3 {
            let mut t = DVector::zeros(30);
            for i in 0..10 {
                t[3 * i + c] = 1.0;
            }
            let r = &k * &t;
            assert!(r.amax() <= 1e-9 * scale, "translation {c}: {}", r.amax());
        }
        // Three infinitesimal rotations u = ω × x.
        for axis in 0..3 {
            let mut t = DVector::zeros(30);
            for (i, x) in coords.iter().enumerate() {
                let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
                t[3 * i + a1] = -x[a2];
                t[3 * i + a2] = x[a1];
            }
            let r = &k * &t;
            assert!(r.amax() <= 1e-9 * scale * t.amax(), "rotation {axis}");
        }
    }

    #[test]
    fn stiffness_null_space_is_exactly_six_dimensional() {
        let k = element_stiffness(&reference_coords(), &soil()).unwrap();
        let eig = nalgebra::SymmetricEigen::new(k);
        let max = eig.eigenvalues.amax();
        let near_zero = eig
            .eigenvalues
            .iter()
            .filter(|&&l| l.abs() <= 1e-8 * max)
            .count();
        assert_eq!(near_zero, 6);
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-8 * max));
    }

    #[test]
    fn mass_row_sums_recover_element_mass() {
        let coords = reference_coords();
        let mat = soil();
        let m = element_mass(&coords, &mat).unwrap();
        let v = signed_tet_volume(coords[0], coords[1], coords[2], coords[3]);
        let expect = mat.density * v;
        // Partition of unity: summing the x-direction sub-block gives ρV.
        let mut sum = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                sum += m[(3 * i, 3 * j)];
            }
        }
        assert!((sum - expect).abs() <= 1e-10 * expect);

        // Kinetic-energy oracle: rigid x-translation t gives tᵀMt = ρV.
        let mut t = DVector::zeros(30);
        for i in 0..10 {
            t[3 * i] = 1.0;
        }
        let quad = (t.transpose() * &m * &t)[(0, 0)];
        assert!((quad - expect).abs() <= 1e-10 * expect);
    }

    #[test]
    fn mass_is_symmetric_positive_definite() {
        let m = element_mass(&reference_coords(), &soil()).unwrap();
        let asym = max_abs(&(&m - m.transpose()));
        assert!(asym <= 1e-12 * max_abs(&m));
        let eig = nalgebra::SymmetricEigen::new(m);
        assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn damping_is_the_rayleigh_combination() {
        let coords = reference_coords();
        let mut mat = soil();
        let k = element_stiffness(&coords, &mat).unwrap();
        let m = element_mass(&coords, &mat).unwrap();

        mat.rayleigh_alpha = 0.0;
        mat.rayleigh_beta = 0.0;
        assert_eq!(max_abs(&element_damping(&k, &m, &mat)), 0.0);

        mat.rayleigh_alpha = 1.0;
        let c = element_damping(&k, &m, &mat);
        assert_eq!(c, m);

        let mut rng = StdRng::seed_from_u64(7);
        mat.rayleigh_alpha = rng.gen_range(0.0..2.0);
        mat.rayleigh_beta = rng.gen_range(0.0..0.01);
        let c = element_damping(&k, &m, &mat);
        let asym = max_abs(&(&c - c.transpose()));
        assert!(asym <= 1e-12 * max_abs(&c));
    }

    #[test]
    fn system_operator_limits_and_exact_combination() {
        let coords = reference_coords();
        let mat = soil();
        let k = element_stiffness(&coords, &mat).unwrap();
        let m = element_mass(&coords, &mat).unwrap();
        let c = element_damping(&k, &m, &mat);

        // Huge dt: the operator degenerates to the stiffness matrix.
        let a = element_system_operator(&k, &m, &c, 1e9);
        assert!(max_abs(&(&a - &k)) <= 1e-6 * max_abs(&k));

        // No damping, dt = 1: exactly 4M + K.
        let zero = DMatrix::zeros(30, 30);
        let a = element_system_operator(&k, &m, &zero, 1.0);
        assert_eq!(a, &m * 4.0 + &k);
    }

    #[test]
    fn system_operator_is_positive_definite_on_random_elements() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..5 {
            let coords = distorted_coords(&mut rng);
            let mat = Material {
                density: rng.gen_range(500.0..3000.0),
                young_modulus: rng.gen_range(1e7..1e10),
                poisson: rng.gen_range(0.0..0.45),
                rayleigh_alpha: rng.gen_range(0.0..1.0),
                rayleigh_beta: rng.gen_range(0.0..0.01),
            };
            let k = element_stiffness(&coords, &mat).unwrap();
            let m = element_mass(&coords, &mat).unwrap();
            let c = element_damping(&k, &m, &mat);
            let a = element_system_operator(&k, &m, &c, rng.gen_range(1e-3..1.0));
            assert!(
                nalgebra::Cholesky::new(a).is_some(),
                "system operator not SPD"
            );
        }
    }

    #[test]
    fn doubling_quadrature_degree_leaves_operators_unchanged() {
        // Straight-edged elements: stiffness integrand is degree 2, mass is
        // degree 4, so the degree-5 rule is already exact and a degree-7
        // rule must reproduce both matrices to round-off.
        let coords = reference_coords();
        let mat = soil();
        let fine = TetRule::grundmann_moeller(3);
        let k5 = element_stiffness(&coords, &mat).unwrap();
        let k7 = stiffness_with_rule(&coords, &mat, &fine, 0).unwrap();
        assert!(max_abs(&(&k5 - &k7)) <= 1e-10 * max_abs(&k5));
        let m5 = element_mass(&coords, &mat).unwrap();
        let m7 = mass_with_rule(&coords, &mat, &fine, 0).unwrap();
        assert!(max_abs(&(&m5 - &m7)) <= 1e-10 * max_abs(&m5));
    }

    #[test]
    fn degenerate_elements_are_rejected() {
        // All four corners coplanar.
        let coords = with_midpoints([
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ]);
        assert!(matches!(
            element_stiffness(&coords, &soil()),
            Err(ElasticityError::DegenerateElement { .. })
        ));
    }

    #[test]
    fn invalid_materials_are_rejected() {
        let mut mat = soil();
        mat.poisson = 0.5;
        assert!(matches!(
            mat.validate(),
            Err(ElasticityError::BadPoisson(_))
        ));
        let mut mat = soil();
        mat.density = -1.0;
        assert!(matches!(
            mat.validate(),
            Err(ElasticityError::BadDensity(_))
        ));
        let mut mat = soil();
        mat.rayleigh_beta = -0.1;
        assert!(matches!(
            mat.validate(),
            Err(ElasticityError::BadRayleigh(..))
        ));
    }

    #[test]
    fn linear_patch_test_reaches_interior_equilibrium() {
        // One hexahedron split into six tets: the only node not on the cell
        // boundary is the midpoint of the shared main diagonal. Under a
        // linear displacement field (constant strain) the assembled internal
        // force at that node must vanish.
        let mesh = generate_box_mesh(&BoxMeshSpec {
            extent: [1.0, 1.0, 1.0],
            div: [1, 1, 1],
            layer_interface: LayerInterface::Constant(1.0),
        })
        .unwrap();
        let ops = build_element_operators(&mesh, &[soil()]).unwrap();

        let a = [[3e-4, 1e-4, -2e-4], [5e-5, -1e-4, 2e-4], [1e-4, 0.0, 4e-4]];
        let n = mesh.n_nodes();
        let mut u = vec![0.0; 3 * n];
        for (i, p) in mesh.node_coords.iter().enumerate() {
            for r in 0..3 {
                u[3 * i + r] = a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2];
            }
        }
        // Assemble r = Σ_e P_eᵀ K_e (P_e u) by direct gather/scatter.
        let mut r = vec![0.0; 3 * n];
        let mut k_norm = 0.0_f64;
        for e in 0..ops.n_elements() {
            let ke = ops.k_of(e);
            let map = ops.node_map[e];
            let mut ue = [0.0; 30];
            for (i, &node) in map.iter().enumerate() {
                for c in 0..3 {
                    ue[3 * i + c] = u[3 * node as usize + c];
                }
            }
            for row in 0..30 {
                let mut s = 0.0;
                for col in 0..30 {
                    s += ke[row * 30 + col] * ue[col];
                    k_norm = k_norm.max(ke[row * 30 + col].abs());
                }
                r[3 * map[row / 3] as usize + row % 3] += s;
            }
        }
        let u_max = u.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        let interior: Vec<usize> = (0..n)
            .filter(|&i| {
                let p = mesh.node_coords[i];
                p.iter().all(|&x| x > 1e-9 && x < 1.0 - 1e-9)
            })
            .collect();
        assert!(!interior.is_empty(), "expected the diagonal midpoint");
        for i in interior {
            for c in 0..3 {
                assert!(
                    r[3 * i + c].abs() <= 1e-8 * k_norm * u_max,
                    "interior residual {} at node {i}",
                    r[3 * i + c]
                );
            }
        }
    }

    #[test]
    fn element_set_respects_per_element_materials() {
        let mesh = generate_box_mesh(&BoxMeshSpec {
            extent: [2.0, 2.0, 2.0],
            div: [2, 2, 2],
            layer_interface: LayerInterface::Constant(1.0),
        })
        .unwrap();
        let soft = soil();
        let stiff = Material {
            density: 2400.0,
            young_modulus: 1.0e10,
            poisson: 0.25,
            rayleigh_alpha: 0.1,
            rayleigh_beta: 0.0005,
        };
        let ops = build_element_operators(&mesh, &[soft, stiff]).unwrap();
        for e in 0..ops.n_elements() {
            let mat = [soft, stiff][mesh.element_material[e] as usize];
            let v = mesh.corner_volume(e);
            let me = ops.m_of(e);
            let mut sum = 0.0;
            for i in 0..10 {
                for j in 0..10 {
                    sum += me[(3 * i) * 30 + 3 * j];
                }
            }
            assert!((sum - mat.density * v).abs() <= 1e-9 * mat.density * v);
            assert_eq!(ops.rayleigh[e], (mat.rayleigh_alpha, mat.rayleigh_beta));
        }
    }

    #[test]
    fn missing_material_index_is_an_error() {
        let mesh = generate_box_mesh(&BoxMeshSpec {
            extent: [1.0, 1.0, 1.0],
            div: [1, 1, 1],
            layer_interface: LayerInterface::Constant(0.2),
        })
        .unwrap();
        // Interface below the cell centroids → some elements are material 1.
        assert!(matches!(
            build_element_operators(&mesh, &[soil()]),
            Err(ElasticityError::MissingMaterial { .. })
        ));
    }
}
