use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre_on, integrate};

/// Maxwell-molecule kernel B₀(cosθ) = b_amp·|cosθ| with a product sphere rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionKernelSpec {
    pub b_amp: f64,
    /// Gauss–Legendre nodes in cosθ over [-1, 1] (even).
    pub n_polar: usize,
    /// Uniform azimuthal nodes.
    pub n_azimuth: usize,
}

impl Default for CollisionKernelSpec {
    fn default() -> Self {
        Self {
            b_amp: 1.0 / (2.0 * PI),
            n_polar: 16,
            n_azimuth: 16,
        }
    }
}

/// One direction of the hemisphere rule, in the frame of the relative velocity.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HalfNode {
    pub c: f64,
    pub sin: f64,
    pub cos_phi: f64,
    pub sin_phi: f64,
    /// Kernel-weighted quadrature weight, doubled for the antipodal direction.
    pub w: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct HalfRule {
    pub nodes: Vec<HalfNode>,
}

impl HalfRule {
    /// Σ W = ∫_{S²} B₀ dω.
    pub fn total(&self) -> f64 {
        self.nodes.iter().map(|n| n.w).sum()
    }
}

impl CollisionKernelSpec {
    pub fn new(b_amp: f64, n_polar: usize, n_azimuth: usize) -> Result<Self> {
        if !(b_amp > 0.0) {
            return Err(Error::Param(format!("b_amp = {b_amp} must be positive")));
        }
        if n_polar < 2 || n_polar % 2 != 0 {
            return Err(Error::Param(format!("n_polar = {n_polar} must be even and >= 2")));
        }
        if n_azimuth < 1 {
            return Err(Error::Param("n_azimuth must be positive".into()));
        }
        Ok(Self {
            b_amp,
            n_polar,
            n_azimuth,
        })
    }

    /// Parses "PxA", e.g. "16x16".
    pub fn parse_angles(s: &str) -> Result<(usize, usize)> {
        let bad = || Error::Param(format!("n_omega = {s:?} is not of the form PxA"));
        let (p, a) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        Ok((
            p.trim().parse().map_err(|_| bad())?,
            a.trim().parse().map_err(|_| bad())?,
        ))
    }

    pub fn n_omega(&self) -> usize {
        self.n_polar * self.n_azimuth
    }

    #[inline]
    pub fn kernel(&self, z: f64) -> f64 {
        self.b_amp * z.abs()
    }

    /// ∫_{S²} B₀ dω = 2π b_amp.
    pub fn kernel_total(&self) -> f64 {
        2.0 * PI * self.b_amp
    }

    /// Full-sphere product rule about the z axis (unit vectors, plain area weights).
    pub fn sphere_rule(&self) -> (Vec<[f64; 3]>, Vec<f64>) {
        let (cs, ws) = gauss_legendre_on(self.n_polar / 2, 0.0, 1.0);
        let dphi = 2.0 * PI / self.n_azimuth as f64;
        let mut nodes = Vec::with_capacity(self.n_omega());
        let mut weights = Vec::with_capacity(self.n_omega());
        for sign in [-1.0, 1.0] {
            for (c, w) in cs.iter().zip(&ws) {
                let c = sign * c;
                let s = (1.0 - c * c).sqrt();
                for m in 0..self.n_azimuth {
                    let phi = (m as f64 + 0.5) * dphi;
                    nodes.push([s * phi.cos(), s * phi.sin(), c]);
                    weights.push(w * dphi);
                }
            }
        }
        (nodes, weights)
    }

    pub(crate) fn half_rule(&self) -> HalfRule {
        let (cs, ws) = gauss_legendre_on(self.n_polar / 2, 0.0, 1.0);
        let dphi = 2.0 * PI / self.n_azimuth as f64;
        let mut nodes = Vec::with_capacity(self.n_omega() / 2);
        for (c, w) in cs.iter().zip(&ws) {
            for m in 0..self.n_azimuth {
                let phi = (m as f64 + 0.5) * dphi;
                nodes.push(HalfNode {
                    c: *c,
                    sin: (1.0 - c * c).sqrt(),
                    cos_phi: phi.cos(),
                    sin_phi: phi.sin(),
                    w: 2.0 * self.kernel(*c) * w * dphi,
                });
            }
        }
        HalfRule { nodes }
    }

    /// b₀ = 3π ∫_{-1}^{1} B₀(z) z²(1−z²) dz by adaptive quadrature.
    pub fn b0(&self) -> f64 {
        3.0 * PI * integrate(|z| self.kernel(z) * z * z * (1.0 - z * z), -1.0, 1.0, 1e-15)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_area() {
        let spec = CollisionKernelSpec::default();
        let (nodes, w) = spec.sphere_rule();
        assert!((w.iter().sum::<f64>() - 4.0 * PI).abs() < 1e-12);
        for v in nodes {
            assert!((v[0] * v[0] + v[1] * v[1] + v[2] * v[2] - 1.0).abs() < 1e-14);
        }
        let half = spec.half_rule();
        assert!((half.total() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn b0_quarter() {
        let spec = CollisionKernelSpec::default();
        assert!((spec.b0() - 0.25).abs() < 1e-10);
    }

    #[test]
    fn angles_parse() {
        assert_eq!(CollisionKernelSpec::parse_angles("16x8").unwrap(), (16, 8));
        assert!(CollisionKernelSpec::parse_angles("16").is_err());
        assert!(CollisionKernelSpec::new(1.0, 3, 4).is_err());
    }
}
