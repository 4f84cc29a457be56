//! Spatial and velocity discretizations plus tabulated reference functions.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// (2π)^{-3/2}
pub const MU0: f64 = 0.063_493_635_934_240_97;

/// Global Maxwellian μ(v) = (2π)^{-3/2} exp(-|v|²/2).
#[inline]
pub fn maxwellian(v: [f64; 3]) -> f64 {
    MU0 * (-0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).exp()
}

/// One-axis factor of √μ, so that √μ(v) = r(v_x) r(v_y) r(v_z).
#[inline]
pub fn sqrt_mu_axis(x: f64) -> f64 {
    // (2π)^{-1/4}
    0.631_618_777_746_064_7 * (-0.25 * x * x).exp()
}

/// One-axis factor of μ.
#[inline]
pub fn mu_axis(x: f64) -> f64 {
    0.398_942_280_401_432_7 * (-0.5 * x * x).exp()
}

/// Truncated tensor velocity grid with midpoint-offset nodes.
///
/// Nodes are `-v_max + h (i + 1/2)` on each axis, so no node sits on a
/// coordinate plane and the node set is closed under every sign flip.
#[derive(Debug, Clone, Serialize)]
pub struct VelocityGrid {
    n: usize,
    v_max: f64,
    h: f64,
    axis: Vec<f64>,
    nodes: Vec<[f64; 3]>,
}

pub fn build_velocity_grid(n_per_axis: usize, v_max: f64) -> Result<VelocityGrid> {
    VelocityGrid::new(n_per_axis, v_max)
}

impl VelocityGrid {
    pub fn new(n: usize, v_max: f64) -> Result<Self> {
        if n % 2 != 0 {
            return Err(Error::Grid(format!(
                "n_per_axis = {n} is odd and would place nodes on v_y = 0"
            )));
        }
        if n == 0 {
            return Err(Error::Grid("n_per_axis must be positive".into()));
        }
        if !(v_max > 0.0) || !v_max.is_finite() {
            return Err(Error::Grid(format!("v_max = {v_max} must be positive")));
        }
        let h = 2.0 * v_max / n as f64;
        let axis: Vec<f64> = (0..n).map(|i| -v_max + h * (i as f64 + 0.5)).collect();
        let mut nodes = Vec::with_capacity(n * n * n);
        for &x in &axis {
            for &y in &axis {
                for &z in &axis {
                    nodes.push([x, y, z]);
                }
            }
        }
        Ok(Self {
            n,
            v_max,
            h,
            axis,
            nodes,
        })
    }

    pub fn n_per_axis(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// Node spacing per axis.
    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Uniform quadrature weight h³.
    pub fn weight(&self) -> f64 {
        self.h * self.h * self.h
    }

    pub fn quad_weights(&self) -> Vec<f64> {
        vec![self.weight(); self.len()]
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> [f64; 3] {
        self.nodes[k]
    }

    /// Always true for this construction; kept as an explicit flag for callers.
    pub fn symmetric(&self) -> bool {
        true
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.n + iy) * self.n + iz
    }

    #[inline]
    pub fn coords(&self, k: usize) -> [usize; 3] {
        let n = self.n;
        [k / (n * n), (k / n) % n, k % n]
    }

    /// Index of the node with v_x negated.
    #[inline]
    pub fn flip_x(&self, k: usize) -> usize {
        let [ix, iy, iz] = self.coords(k);
        self.index(self.n - 1 - ix, iy, iz)
    }

    /// Index of the node with v_y negated.
    #[inline]
    pub fn flip_y(&self, k: usize) -> usize {
        let [ix, iy, iz] = self.coords(k);
        self.index(ix, self.n - 1 - iy, iz)
    }

    #[inline]
    pub fn flip_z(&self, k: usize) -> usize {
        let [ix, iy, iz] = self.coords(k);
        self.index(ix, iy, self.n - 1 - iz)
    }

    /// Σ w μ over the grid; below one by the truncation and spacing error.
    pub fn maxwellian_mass(&self) -> f64 {
        // separable, so sum per axis to keep rounding low
        let s: f64 = self.axis.iter().map(|&x| mu_axis(x)).sum::<f64>() * self.h;
        s * s * s
    }

    /// Short content hash used to tag dumps and cache files.
    pub fn hash(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(b"velocity-grid");
        hasher.update((self.n as u64).to_le_bytes());
        hasher.update(self.v_max.to_bits().to_le_bytes());
        let out = hasher.finalize();
        u64::from_le_bytes(out[..8].try_into().unwrap())
    }
}

/// Uniform spatial nodes on [-1, 1], both walls included.
#[derive(Debug, Clone, Serialize)]
pub struct SpatialGrid {
    nodes: Vec<f64>,
    dy: f64,
}

impl SpatialGrid {
    pub fn new(n_y: usize) -> Result<Self> {
        if n_y < 8 {
            return Err(Error::Grid(format!("n_y = {n_y} must be at least 8")));
        }
        let dy = 2.0 / (n_y - 1) as f64;
        let mut nodes: Vec<f64> = (0..n_y).map(|j| -1.0 + dy * j as f64).collect();
        // pin the walls and the symmetry exactly
        nodes[0] = -1.0;
        nodes[n_y - 1] = 1.0;
        for j in 0..n_y / 2 {
            let m = 0.5 * (nodes[n_y - 1 - j] - nodes[j]);
            nodes[j] = -m;
            nodes[n_y - 1 - j] = m;
        }
        if n_y % 2 == 1 {
            nodes[n_y / 2] = 0.0;
        }
        Ok(Self { nodes, dy })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    /// Trapezoid weights, summing to 2.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.len();
        let mut w = vec![self.dy; n];
        w[0] *= 0.5;
        w[n - 1] *= 0.5;
        w
    }

    pub fn hash(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(b"spatial-grid");
        hasher.update((self.len() as u64).to_le_bytes());
        let out = hasher.finalize();
        u64::from_le_bytes(out[..8].try_into().unwrap())
    }
}

/// μ, √μ and w_q tabulated at every velocity node.
#[derive(Debug, Clone)]
pub struct ReferenceTables {
    pub q: u32,
    pub mu: Vec<f64>,
    pub sqrt_mu: Vec<f64>,
    pub w_q: Vec<f64>,
}

pub fn eval_reference(grid: &VelocityGrid, q: u32) -> Result<ReferenceTables> {
    ReferenceTables::new(grid, q)
}

impl ReferenceTables {
    pub fn new(grid: &VelocityGrid, q: u32) -> Result<Self> {
        let r2max = 3.0 * grid.v_max() * grid.v_max();
        if q as f64 * (1.0 + r2max).ln() > 700.0 {
            return Err(Error::Param(format!(
                "q = {q} with v_max = {} overflows the weight (1+|v|^2)^q",
                grid.v_max()
            )));
        }
        let axis = grid.axis();
        let ra: Vec<f64> = axis.iter().map(|&x| sqrt_mu_axis(x)).collect();
        let n = grid.n_per_axis();
        let mut sqrt_mu = Vec::with_capacity(grid.len());
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    sqrt_mu.push(ra[ix] * ra[iy] * ra[iz]);
                }
            }
        }
        let mu = sqrt_mu.iter().map(|s| s * s).collect();
        let w_q = grid
            .nodes()
            .iter()
            .map(|v| weight_q(*v, q))
            .collect();
        Ok(Self {
            q,
            mu,
            sqrt_mu,
            w_q,
        })
    }
}

/// w_q(v) = (1+|v|²)^q
#[inline]
pub fn weight_q(v: [f64; 3], q: u32) -> f64 {
    (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).powi(q as i32)
}
