//! Numerical quadrature over tetrahedra in barycentric coordinates.
//!
//! Rules are stored with weights normalised to sum to one, so
//! `rule.average(f)` approximates the *mean* of `f` over the element and a
//! physical integral is `mean * volume`. Two families are provided:
//!
//! * a hand-picked symmetric 14-point rule exact through total degree 5,
//!   with all-positive weights (used for element matrices), and
//! * the Grundmann–Möller construction of arbitrary odd degree (used as an
//!   independent cross-check; its weights are not all positive).

/// A quadrature rule on the reference tetrahedron.
///
/// Points are barycentric 4-tuples `(L1, L2, L3, L4)` with `ΣLi = 1`;
/// weights sum to 1 so that `Σ w_q f(p_q) ≈ (1/V) ∫ f dV`.
#[derive(Debug, Clone)]
pub struct TetRule {
    pub points: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
}

impl TetRule {
    /// Symmetric 14-point rule, exact for polynomials of total degree ≤ 5.
    ///
    /// Two orbits of four points (one coordinate `1 - 3b`, the rest `b`) and
    /// one orbit of six points (two coordinates `c`, two `d`). All weights
    /// are positive, which keeps quadrature-assembled mass matrices positive
    /// definite.
    pub fn degree5() -> TetRule {
        const B1: f64 = 0.310_885_919_263_300_5;
        const W1: f64 = 0.112_687_925_718_016_2;
        const B2: f64 = 0.092_735_250_310_891_2;
        const W2: f64 = 0.073_493_043_116_361_9;
        const D: f64 = 0.045_503_704_125_649_4;
        const W3: f64 = 0.042_546_020_777_081_2;

        let mut points = Vec::with_capacity(14);
        let mut weights = Vec::with_capacity(14);
        for (b, w) in [(B1, W1), (B2, W2)] {
            let a = 1.0 - 3.0 * b;
            for apex in 0..4 {
                let mut p = [b; 4];
                p[apex] = a;
                points.push(p);
                weights.push(w);
            }
        }
        let c = 0.5 - D;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let mut p = [D; 4];
                p[i] = c;
                p[j] = c;
                points.push(p);
                weights.push(W3);
            }
        }
        TetRule { points, weights }
    }

    /// Grundmann–Möller rule of index `s`, exact through degree `2s + 1`.
    ///
    /// Constructed directly from the closed form: for `d = 2s + 1` and the
    /// 3-simplex, level `i` contributes points `(2k + 1) / (d + 3 - 2i)` over
    /// all multi-indices `|k| = s - i`, with signed weights. The raw rule
    /// integrates over the unit simplex (volume 1/6); weights here are
    /// rescaled by 6 to the mean-value convention.
    pub fn grundmann_moeller(s: usize) -> TetRule {
        let d = 2 * s + 1;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for i in 0..=s {
            let denom = (d + 3 - 2 * i) as f64;
            // (-1)^i 2^{-2s} (d + 3 - 2i)^d / (i! (d + 3 - i)!)
            let mut w = 0.25_f64.powi(s as i32) * denom.powi(d as i32);
            w /= factorial(i) * factorial(d + 3 - i);
            if i % 2 == 1 {
                w = -w;
            }
            for k in compositions_of(s - i) {
                let p = [
                    (2.0 * k[0] as f64 + 1.0) / denom,
                    (2.0 * k[1] as f64 + 1.0) / denom,
                    (2.0 * k[2] as f64 + 1.0) / denom,
                    (2.0 * k[3] as f64 + 1.0) / denom,
                ];
                points.push(p);
                weights.push(6.0 * w);
            }
        }
        TetRule { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean of `f` over the reference tetrahedron.
    pub fn average(&self, mut f: impl FnMut([f64; 4]) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(&p, &w)| w * f(p))
            .sum()
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// All multi-indices `k ∈ N^4` with `|k| = m`, in lexicographic order.
fn compositions_of(m: usize) -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for k0 in 0..=m {
        for k1 in 0..=(m - k0) {
            for k2 in 0..=(m - k0 - k1) {
                out.push([k0, k1, k2, m - k0 - k1 - k2]);
            }
        }
    }
    out
}
