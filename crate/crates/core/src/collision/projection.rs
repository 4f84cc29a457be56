//! Macroscopic projection onto span{1, v, |v|²−3}√μ under the grid quadrature.

use serde::Serialize;

use crate::error::Result;
use crate::field::{Field, Repr};
use crate::grid::VelocityGrid;

/// Sum of `f(k)` over the grid, paired across the x, y and z sign flips in
/// that order. Any summand that is odd in one coordinate sums to exactly zero.
pub fn octant_sum(grid: &VelocityGrid, f: impl Fn(usize) -> f64) -> f64 {
    let n = grid.n_per_axis();
    let h = n / 2;
    let mut total = 0.0;
    for ix in 0..h {
        for iy in 0..h {
            for iz in 0..h {
                let (jx, jy, jz) = (n - 1 - ix, n - 1 - iy, n - 1 - iz);
                let xs = |y, z| f(grid.index(ix, y, z)) + f(grid.index(jx, y, z));
                let ys = |z| xs(iy, z) + xs(jy, z);
                total += ys(iz) + ys(jz);
            }
        }
    }
    total
}

/// Per-spatial-node coefficients of P₀g = [a + b·v + c(|v|²−3)]√μ.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MacroProjection {
    pub a: Vec<f64>,
    pub b: Vec<[f64; 3]>,
    pub c: Vec<f64>,
}

impl MacroProjection {
    pub fn coeffs(&self, j: usize) -> [f64; 5] {
        [self.a[j], self.b[j][0], self.b[j][1], self.b[j][2], self.c[j]]
    }
}

/// Discrete orthogonal projector onto the collision invariants.
#[derive(Debug, Clone)]
pub struct Projector {
    grid: VelocityGrid,
    /// basis[α][k] = φ_α(v_k)√μ(v_k)
    basis: [Vec<f64>; 5],
    gram: [[f64; 5]; 5],
}

/// Gaussian elimination without pivoting; the Gram matrix is SPD.
pub(crate) fn solve5(mut m: [[f64; 5]; 5], mut r: [f64; 5]) -> [f64; 5] {
    for p in 0..5 {
        for i in p + 1..5 {
            let f = m[i][p] / m[p][p];
            if f != 0.0 {
                for j in p..5 {
                    m[i][j] -= f * m[p][j];
                }
                r[i] -= f * r[p];
            }
        }
    }
    let mut x = [0.0; 5];
    for p in (0..5).rev() {
        let mut s = r[p];
        for j in p + 1..5 {
            s -= m[p][j] * x[j];
        }
        x[p] = s / m[p][p];
    }
    x
}

impl Projector {
    pub fn new(grid: &VelocityGrid, sqrt_mu: &[f64]) -> Self {
        let nodes = grid.nodes();
        let phi = |a: usize, v: [f64; 3]| match a {
            0 => 1.0,
            1..=3 => v[a - 1],
            _ => v[0] * v[0] + v[1] * v[1] + v[2] * v[2] - 3.0,
        };
        let basis: [Vec<f64>; 5] = std::array::from_fn(|a| {
            nodes
                .iter()
                .zip(sqrt_mu)
                .map(|(v, s)| phi(a, *v) * s)
                .collect()
        });
        let w = grid.weight();
        let mut gram = [[0.0; 5]; 5];
        for a in 0..5 {
            for b in 0..5 {
                gram[a][b] = w * octant_sum(grid, |k| basis[a][k] * basis[b][k]);
            }
        }
        Self {
            grid: grid.clone(),
            basis,
            gram,
        }
    }

    pub fn basis(&self, a: usize) -> &[f64] {
        &self.basis[a]
    }

    pub fn gram(&self) -> &[[f64; 5]; 5] {
        &self.gram
    }

    /// ⟨f, φ_α√μ⟩ for the five invariants.
    pub fn inner(&self, f: &[f64]) -> [f64; 5] {
        let w = self.grid.weight();
        std::array::from_fn(|a| w * octant_sum(&self.grid, |k| f[k] * self.basis[a][k]))
    }

    /// Coefficients (a, b₁, b₂, b₃, c) of P₀f for one velocity vector.
    pub fn coefficients(&self, f: &[f64]) -> [f64; 5] {
        solve5(self.gram, self.inner(f))
    }

    pub fn p0_vec(&self, f: &[f64]) -> Vec<f64> {
        let c = self.coefficients(f);
        (0..f.len())
            .map(|k| (0..5).map(|a| c[a] * self.basis[a][k]).sum())
            .collect()
    }

    /// f − P₀f in place.
    pub fn p1_in_place(&self, f: &mut [f64]) {
        let c = self.coefficients(f);
        for (k, x) in f.iter_mut().enumerate() {
            *x -= (0..5).map(|a| c[a] * self.basis[a][k]).sum::<f64>();
        }
    }

    pub fn project_p0(&self, f: &Field) -> Result<MacroProjection> {
        f.expect(Repr::Perturbation)?;
        let mut out = MacroProjection {
            a: Vec::with_capacity(f.n_y),
            b: Vec::with_capacity(f.n_y),
            c: Vec::with_capacity(f.n_y),
        };
        for j in 0..f.n_y {
            let c = self.coefficients(f.row(j));
            out.a.push(c[0]);
            out.b.push([c[1], c[2], c[3]]);
            out.c.push(c[4]);
        }
        Ok(out)
    }

    pub fn project_p1(&self, f: &Field) -> Result<Field> {
        f.expect(Repr::Perturbation)?;
        let mut g = f.clone();
        for j in 0..g.n_y {
            self.p1_in_place(g.row_mut(j));
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ReferenceTables;

    fn setup() -> (VelocityGrid, ReferenceTables, Projector) {
        let g = VelocityGrid::new(12, 6.0).unwrap();
        let t = ReferenceTables::new(&g, 0).unwrap();
        let p = Projector::new(&g, &t.sqrt_mu);
        (g, t, p)
    }

    #[test]
    fn maxwellian_coefficients() {
        let (_, t, p) = setup();
        let c = p.coefficients(&t.sqrt_mu);
        assert!((c[0] - 1.0).abs() < 1e-12);
        for x in &c[1..] {
            assert!(x.abs() < 1e-12);
        }
    }

    #[test]
    fn odd_in_vx_gives_exact_zeros() {
        let (g, t, p) = setup();
        let f: Vec<f64> = g
            .nodes()
            .iter()
            .zip(&t.sqrt_mu)
            .map(|(v, s)| (v[0] + v[0] * v[1] * v[1] + 0.3 * v[0] * v[2]) * s)
            .collect();
        let c = p.coefficients(&f);
        assert_eq!(c[0], 0.0);
        assert_eq!(c[2], 0.0);
        assert_eq!(c[3], 0.0);
        assert_eq!(c[4], 0.0);
        assert!(c[1] != 0.0);
    }

    #[test]
    fn p0_idempotent() {
        let (g, t, p) = setup();
        let f: Vec<f64> = g
            .nodes()
            .iter()
            .zip(&t.sqrt_mu)
            .map(|(v, s)| (1.0 + v[0] - 0.5 * v[1] * v[1] + v[2].powi(3)) * s)
            .collect();
        let p0 = p.p0_vec(&f);
        let p00 = p.p0_vec(&p0);
        for (a, b) in p0.iter().zip(&p00) {
            assert!((a - b).abs() < 1e-13);
        }
        let mut p1 = f.clone();
        p.p1_in_place(&mut p1);
        for x in p.inner(&p1) {
            assert!(x.abs() < 1e-13);
        }
    }
}
