//! Norms, moments, wall fluxes, symmetry defects and the decay-rate fit.

use serde::Serialize;

use crate::collision::{MacroProjection, Projector};
use crate::error::{Error, Result};
use crate::field::{Field, Repr};
use crate::grid::{weight_q, SpatialGrid, VelocityGrid};

/// Which wall: y = −1 or y = +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Wall {
    Bottom,
    Top,
}

impl Wall {
    pub fn from_sign(s: f64) -> Self {
        if s < 0.0 {
            Wall::Bottom
        } else {
            Wall::Top
        }
    }

    pub fn y(self) -> f64 {
        match self {
            Wall::Bottom => -1.0,
            Wall::Top => 1.0,
        }
    }

    pub fn row(self, n_y: usize) -> usize {
        match self {
            Wall::Bottom => 0,
            Wall::Top => n_y - 1,
        }
    }

    /// Whether a velocity leaves the slab through this wall (v·n > 0).
    pub fn outgoing(self, vy: f64) -> bool {
        match self {
            Wall::Bottom => vy < 0.0,
            Wall::Top => vy > 0.0,
        }
    }
}

/// Discrete wall normalization 1/Σ_{v_y>0} w μ |v_y|, the grid value of √(2π).
///
/// Using it instead of √(2π) makes μ satisfy the discrete wall condition exactly.
pub fn wall_normalization(grid: &VelocityGrid, mu: &[f64]) -> f64 {
    let w = grid.weight();
    let s: f64 = grid
        .nodes()
        .iter()
        .zip(mu)
        .filter(|(v, _)| v[1] > 0.0)
        .map(|(v, m)| w * m * v[1])
        .sum();
    1.0 / s
}

/// ∫ F |v_y| dv over the velocities leaving through `wall`.
pub fn wall_flux(grid: &VelocityGrid, f: &Field, wall: Wall) -> Result<f64> {
    f.expect(Repr::Absolute)?;
    Ok(outgoing_flux(grid, f.row(wall.row(f.n_y)), wall))
}

/// Half-grid flux of one velocity vector, representation-agnostic.
pub fn outgoing_flux(grid: &VelocityGrid, row: &[f64], wall: Wall) -> f64 {
    let w = grid.weight();
    grid.nodes()
        .iter()
        .zip(row)
        .filter(|(v, _)| wall.outgoing(v[1]))
        .map(|(v, x)| w * x * v[1].abs())
        .sum()
}

/// sup over incoming nodes of |F(wall, v) − c_w μ(v) flux(F, wall)|.
pub fn bc_residual(grid: &VelocityGrid, mu: &[f64], f: &Field, wall: Wall) -> Result<f64> {
    let flux = wall_flux(grid, f, wall)?;
    let cw = wall_normalization(grid, mu);
    let row = f.row(wall.row(f.n_y));
    Ok(grid
        .nodes()
        .iter()
        .zip(row.iter().zip(mu))
        .filter(|(v, _)| !wall.outgoing(v[1]))
        .map(|(_, (x, m))| (x - cw * m * flux).abs())
        .fold(0.0, f64::max))
}

/// sup over incoming nodes of |f − P_γ f| for a perturbation field, where P_γ f
/// is the wall Maxwellian √μ scaled by the outgoing flux of √μ f.
pub fn p_gamma_defect(grid: &VelocityGrid, sqrt_mu: &[f64], f: &Field, wall: Wall) -> Result<f64> {
    f.expect(Repr::Perturbation)?;
    let mu: Vec<f64> = sqrt_mu.iter().map(|s| s * s).collect();
    let cw = wall_normalization(grid, &mu);
    let row = f.row(wall.row(f.n_y));
    let abs: Vec<f64> = row.iter().zip(sqrt_mu).map(|(x, s)| x * s).collect();
    let flux = outgoing_flux(grid, &abs, wall);
    Ok(grid
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, v)| !wall.outgoing(v[1]))
        .map(|(k, _)| (row[k] - cw * sqrt_mu[k] * flux).abs())
        .fold(0.0, f64::max))
}

/// sup |f(v) + f(−v_x, v_y, v_z)| over all nodes.
pub fn oddness_defect(grid: &VelocityGrid, f: &Field) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..f.n_y {
        let row = f.row(j);
        for k in 0..f.n_v {
            worst = worst.max((row[k] + row[grid.flip_x(k)]).abs());
        }
    }
    worst
}

/// Replaces f by its odd part in v_x.
pub fn symmetrize_odd_x(grid: &VelocityGrid, f: &mut Field) {
    let nv = f.n_v;
    for j in 0..f.n_y {
        let row = f.row_mut(j);
        for k in 0..nv {
            let m = grid.flip_x(k);
            if m > k {
                let d = 0.5 * (row[k] - row[m]);
                row[k] = d;
                row[m] = -d;
            }
        }
    }
}

/// Per-node (a, b, c) of a perturbation field.
pub fn moments(projector: &Projector, f: &Field) -> Result<MacroProjection> {
    projector.project_p0(f)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct NormReport {
    /// sup over (y, v) of w_q|f|
    pub sup_weighted: f64,
    /// (Σ_j W_j Σ_v w f²)^{1/2}
    pub l2: f64,
    /// Outgoing trace norm (Σ_walls Σ_{v·n>0} w|v_y| f²)^{1/2}
    pub trace_plus: f64,
    /// Incoming trace norm
    pub trace_minus: f64,
    /// (Σ_j W_j (a² + |b|² + c²))^{1/2}
    pub macro_l2: f64,
}

pub fn weighted_sup(grid: &VelocityGrid, f: &Field, q: u32) -> f64 {
    let wq: Vec<f64> = grid.nodes().iter().map(|v| weight_q(*v, q)).collect();
    let mut worst = 0.0f64;
    for j in 0..f.n_y {
        for (x, w) in f.row(j).iter().zip(&wq) {
            worst = worst.max((x * w).abs());
        }
    }
    worst
}

pub fn l2_norm(vgrid: &VelocityGrid, sgrid: &SpatialGrid, f: &Field) -> f64 {
    let w = vgrid.weight();
    let wy = sgrid.weights();
    (0..f.n_y)
        .map(|j| wy[j] * w * f.row(j).iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// (|f|_{2,+}, |f|_{2,−}) with measure |v_y| dv at both walls.
pub fn trace_norms(grid: &VelocityGrid, f: &Field) -> (f64, f64) {
    let w = grid.weight();
    let (mut plus, mut minus) = (0.0, 0.0);
    for wall in [Wall::Bottom, Wall::Top] {
        let row = f.row(wall.row(f.n_y));
        for (v, x) in grid.nodes().iter().zip(row) {
            let t = w * v[1].abs() * x * x;
            if wall.outgoing(v[1]) {
                plus += t;
            } else {
                minus += t;
            }
        }
    }
    (plus.sqrt(), minus.sqrt())
}

pub fn norm_report(
    vgrid: &VelocityGrid,
    sgrid: &SpatialGrid,
    projector: &Projector,
    f: &Field,
    q: u32,
) -> Result<NormReport> {
    let (trace_plus, trace_minus) = trace_norms(vgrid, f);
    let m = if f.repr == Repr::Perturbation {
        let p = projector.project_p0(f)?;
        let wy = sgrid.weights();
        (0..f.n_y)
            .map(|j| wy[j] * p.coeffs(j).iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    } else {
        f64::NAN
    };
    Ok(NormReport {
        sup_weighted: weighted_sup(vgrid, f, q),
        l2: l2_norm(vgrid, sgrid, f),
        trace_plus,
        trace_minus,
        macro_l2: m,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SymmetryReport {
    pub oddness: f64,
    pub bc_bottom: f64,
    pub bc_top: f64,
    pub p_gamma: f64,
}

/// Symmetry and wall defects of a perturbation field g, with the wall check
/// applied to μ + √μ g.
pub fn symmetry_report(grid: &VelocityGrid, sqrt_mu: &[f64], g: &Field) -> Result<SymmetryReport> {
    g.expect(Repr::Perturbation)?;
    let mu: Vec<f64> = sqrt_mu.iter().map(|s| s * s).collect();
    let mut abs = Field::zeros(Repr::Absolute, g.n_y, g.n_v);
    for j in 0..g.n_y {
        for k in 0..g.n_v {
            abs.data[j * g.n_v + k] = mu[k] + sqrt_mu[k] * g.at(j, k);
        }
    }
    Ok(SymmetryReport {
        oddness: oddness_defect(grid, g),
        bc_bottom: bc_residual(grid, &mu, &abs, Wall::Bottom)?,
        bc_top: bc_residual(grid, &mu, &abs, Wall::Top)?,
        p_gamma: p_gamma_defect(grid, sqrt_mu, g, Wall::Bottom)?
            .max(p_gamma_defect(grid, sqrt_mu, g, Wall::Top)?),
    })
}

/// Least-squares fit of log norm = intercept − λ₀ t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub lambda0: f64,
    pub intercept: f64,
    /// Fraction of the variance of log norm left unexplained by the line (1 − R²).
    pub residual: f64,
    /// RMS of the log residuals, i.e. the typical relative misfit of a single sample.
    pub rms_log_residual: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub points: usize,
}

pub const MIN_FIT_POINTS: usize = 10;

pub fn decay_rate_fit(series: &[(f64, f64)]) -> Result<DecayFit> {
    if series.len() < MIN_FIT_POINTS {
        return Err(Error::FitWindow {
            points: series.len(),
            needed: MIN_FIT_POINTS,
        });
    }
    if let Some((t, x)) = series.iter().find(|(_, x)| !(*x > 0.0)) {
        return Err(Error::Param(format!("norm {x} at t = {t} is not positive")));
    }
    let n = series.len() as f64;
    let tm = series.iter().map(|p| p.0).sum::<f64>() / n;
    let lm = series.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (mut stt, mut stl, mut sll) = (0.0, 0.0, 0.0);
    for (t, x) in series {
        stt += (t - tm) * (t - tm);
        stl += (t - tm) * (x.ln() - lm);
        sll += (x.ln() - lm).powi(2);
    }
    if stt == 0.0 {
        return Err(Error::Param("fit window has no time extent".into()));
    }
    let slope = stl / stt;
    let intercept = lm - slope * tm;
    let rss: f64 = series
        .iter()
        .map(|(t, x)| (x.ln() - intercept - slope * t).powi(2))
        .sum();
    Ok(DecayFit {
        lambda0: -slope,
        intercept,
        residual: if sll > 0.0 { rss / sll } else { 0.0 },
        rms_log_residual: (rss / n).sqrt(),
        t_lo: series[0].0,
        t_hi: series[series.len() - 1].0,
        points: series.len(),
    })
}

/// Fits on the window starting at the first time the norm is below `frac` of its initial value.
pub fn decay_fit_window(series: &[(f64, f64)], frac: f64) -> Result<DecayFit> {
    let Some(first) = series.first() else {
        return Err(Error::FitWindow { points: 0, needed: MIN_FIT_POINTS });
    };
    let start = series
        .iter()
        .position(|(_, x)| *x < frac * first.1)
        .unwrap_or(series.len());
    decay_rate_fit(&series[start..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ReferenceTables;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (VelocityGrid, SpatialGrid, ReferenceTables) {
        let g = VelocityGrid::new(12, 6.0).unwrap();
        let s = SpatialGrid::new(9).unwrap();
        let t = ReferenceTables::new(&g, 2).unwrap();
        (g, s, t)
    }

    #[test]
    fn maxwellian_flux_and_bc() {
        let (g, _, t) = setup();
        let f = Field::broadcast(Repr::Absolute, 9, &t.mu);
        let flux = wall_flux(&g, &f, Wall::Top).unwrap();
        let exact = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        // midpoint rule on u e^{-u²/2}: relative error about h²/24
        let h = g.spacing();
        assert!((flux - exact).abs() < h * h / 12.0 * exact);
        assert!((flux - wall_flux(&g, &f, Wall::Bottom).unwrap()).abs() < 1e-15);
        assert!(bc_residual(&g, &t.mu, &f, Wall::Top).unwrap() < 1e-16);
        let z = Field::zeros(Repr::Absolute, 9, g.len());
        assert_eq!(wall_flux(&g, &z, Wall::Top).unwrap(), 0.0);
    }

    #[test]
    fn exact_decay() {
        let s: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 * 0.5, (-(i as f64) * 0.5).exp())).collect();
        let fit = decay_rate_fit(&s).unwrap();
        assert!((fit.lambda0 - 1.0).abs() < 1e-12);
        let c: Vec<(f64, f64)> = (0..12).map(|i| (i as f64, 3.0)).collect();
        assert!(decay_rate_fit(&c).unwrap().lambda0.abs() < 1e-15);
        assert!(decay_rate_fit(&s[..5]).is_err());
    }

    #[test]
    fn noisy_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<(f64, f64)> = (0..100)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, (-t).exp() * (1.0 + 0.01 * rng.random_range(-1.0..1.0)))
            })
            .collect();
        let fit = decay_rate_fit(&s).unwrap();
        assert!((fit.lambda0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn trace_norms_split() {
        let (g, _, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Field::from_fn(Repr::Perturbation, 9, g.len(), |_, _| rng.random_range(-1.0..1.0));
        let (p, m) = trace_norms(&g, &f);
        let w = g.weight();
        let full: f64 = [0, 8]
            .iter()
            .map(|&j| {
                g.nodes()
                    .iter()
                    .zip(f.row(j))
                    .map(|(v, x)| w * v[1].abs() * x * x)
                    .sum::<f64>()
            })
            .sum();
        assert!((p * p + m * m - full).abs() < 1e-12 * full);
    }

    #[test]
    fn homogeneity_and_oddness() {
        let (g, s, t) = setup();
        let proj = Projector::new(&g, &t.sqrt_mu);
        let mut f = Field::from_fn(Repr::Perturbation, 9, g.len(), |j, k| {
            let v = g.node(k);
            (j as f64 + 1.0) * (v[0] + v[0] * v[1] + 0.3) * t.sqrt_mu[k]
        });
        let a = norm_report(&g, &s, &proj, &f, 2).unwrap();
        let mut f3 = f.clone();
        f3.scale(-3.0);
        let b = norm_report(&g, &s, &proj, &f3, 2).unwrap();
        assert!((b.l2 - 3.0 * a.l2).abs() < 1e-12 * b.l2);
        assert!((b.sup_weighted - 3.0 * a.sup_weighted).abs() < 1e-12 * b.sup_weighted);
        assert!(oddness_defect(&g, &f) > 0.1);
        symmetrize_odd_x(&g, &mut f);
        assert_eq!(oddness_defect(&g, &f), 0.0);
        let m = moments(&proj, &f).unwrap();
        for j in 0..9 {
            assert!(m.a[j].abs() < 1e-14 && m.c[j].abs() < 1e-14 && m.b[j][1].abs() < 1e-14);
        }
    }
}
