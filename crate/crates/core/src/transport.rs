//! Characteristics of v_y∂_y − αv_y∂_{v_x}: exit times, the steady transport
//! inverse, backward bounce cycles and their Monte Carlo measure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::{weight_q, SpatialGrid, VelocityGrid};

/// Straight characteristic with the sheared horizontal velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub t: f64,
    pub y: f64,
    pub v: [f64; 3],
    pub alpha: f64,
}

impl Trajectory {
    /// (Y(s), V(s)) for the path through (t, y, v).
    pub fn at(&self, s: f64) -> (f64, [f64; 3]) {
        let dt = self.t - s;
        (
            self.y - dt * self.v[1],
            [self.v[0] + self.alpha * dt * self.v[1], self.v[1], self.v[2]],
        )
    }
}

/// Backward exit time and the wall where the backward path leaves the slab.
///
/// A start on a wall whose backward path would leave at once instead crosses
/// the slab and exits through the opposite wall after 2/|v_y|.
pub fn backward_exit(y: f64, v: [f64; 3]) -> Result<(f64, f64)> {
    let vy = v[1];
    if vy == 0.0 || !vy.is_finite() {
        return Err(Error::Param(format!("v_y = {vy} lies on the grazing set")));
    }
    if !(-1.0..=1.0).contains(&y) {
        return Err(Error::Param(format!("y = {y} is outside [-1, 1]")));
    }
    let (tb, yb) = if vy > 0.0 { ((y + 1.0) / vy, -1.0) } else { ((y - 1.0) / vy, 1.0) };
    if tb > 0.0 {
        Ok((tb, yb))
    } else {
        Ok((2.0 / vy.abs(), -y))
    }
}

/// Inflow data for the steady transport inverse.
#[derive(Debug, Clone, PartialEq)]
pub enum Inflow {
    Zero,
    /// Full velocity vectors at y = −1 and y = +1; only incoming entries are read.
    Given { bottom: Vec<f64>, top: Vec<f64> },
}

/// Values at v_x + delta on every node, linear in v_x with zero extension.
pub fn shift_vx(grid: &VelocityGrid, src: &[f64], delta: f64, out: &mut [f64]) {
    let n = grid.n_per_axis();
    let plane = n * n;
    if delta == 0.0 {
        out.copy_from_slice(src);
        return;
    }
    let theta = delta / grid.spacing();
    let m = theta.floor();
    let frac = theta - m;
    let m = m as isize;
    for ix in 0..n {
        let a = ix as isize + m;
        let b = a + 1;
        let dst = &mut out[ix * plane..(ix + 1) * plane];
        let ok_a = a >= 0 && (a as usize) < n;
        let ok_b = b >= 0 && (b as usize) < n;
        match (ok_a, ok_b) {
            (true, true) => {
                let sa = &src[a as usize * plane..(a as usize + 1) * plane];
                let sb = &src[b as usize * plane..(b as usize + 1) * plane];
                for ((d, x), y) in dst.iter_mut().zip(sa).zip(sb) {
                    *d = (1.0 - frac) * x + frac * y;
                }
            }
            (true, false) => {
                let sa = &src[a as usize * plane..(a as usize + 1) * plane];
                for (d, x) in dst.iter_mut().zip(sa) {
                    *d = (1.0 - frac) * x;
                }
            }
            (false, true) => {
                let sb = &src[b as usize * plane..(b as usize + 1) * plane];
                for (d, y) in dst.iter_mut().zip(sb) {
                    *d = frac * y;
                }
            }
            (false, false) => dst.iter_mut().for_each(|d| *d = 0.0),
        }
    }
}

/// Per-node coefficients of one exponential step of length τ = Δy/|v_y|.
#[derive(Debug, Clone)]
struct StepCoeffs {
    e: Vec<f64>,
    a0: Vec<f64>,
    a1: Vec<f64>,
}

impl StepCoeffs {
    /// G_j = E Ĝ_{j−1} + A0 S_j + A1 (Ŝ_{j−1} − S_j): exact for a source linear
    /// between the two nodes.
    fn new(grid: &VelocityGrid, dy: f64, damping: f64) -> Self {
        let nv = grid.len();
        let mut e = vec![0.0; nv];
        let mut a0 = vec![0.0; nv];
        let mut a1 = vec![0.0; nv];
        for (k, v) in grid.nodes().iter().enumerate() {
            let tau = dy / v[1].abs();
            let x = damping * tau;
            let ek = (-x).exp();
            e[k] = ek;
            // expm1 keeps both weights accurate for small λτ
            let one_minus_e = -(-x).exp_m1();
            a0[k] = tau * if x > 1e-8 { one_minus_e / x } else { 1.0 - 0.5 * x };
            a1[k] = tau
                * if x > 1e-4 {
                    (one_minus_e - x * ek) / (x * x)
                } else {
                    0.5 - x / 3.0 + x * x / 8.0
                };
        }
        Self { e, a0, a1 }
    }
}

/// Solves v_y∂_yG − αv_y∂_{v_x}G + λG = S with the given inflow, node by node
/// along each characteristic.
pub fn transport_inverse(
    vgrid: &VelocityGrid,
    sgrid: &SpatialGrid,
    source: &Field,
    damping: f64,
    alpha: f64,
    inflow: &Inflow,
) -> Result<Field> {
    if !(damping > 0.0) {
        return Err(Error::Param(format!("damping = {damping} must be positive")));
    }
    let ny = sgrid.len();
    let nv = vgrid.len();
    if source.n_y != ny || source.n_v != nv {
        return Err(Error::Grid("source shape does not match the grids".into()));
    }
    let dy = sgrid.dy();
    let c = StepCoeffs::new(vgrid, dy, damping);
    let up: Vec<bool> = vgrid.nodes().iter().map(|v| v[1] > 0.0).collect();
    let mut out = Field::zeros(source.repr, ny, nv);
    if let Inflow::Given { bottom, top } = inflow {
        if bottom.len() != nv || top.len() != nv {
            return Err(Error::Grid("inflow vectors have the wrong length".into()));
        }
        for k in 0..nv {
            if up[k] {
                out.data[k] = bottom[k];
            } else {
                out.data[(ny - 1) * nv + k] = top[k];
            }
        }
    }
    let shift = alpha * dy;
    let mut g_hat = vec![0.0; nv];
    let mut s_hat = vec![0.0; nv];
    // v_y > 0 marches upward from y = −1
    for j in 1..ny {
        shift_vx(vgrid, out.row(j - 1), shift, &mut g_hat);
        shift_vx(vgrid, source.row(j - 1), shift, &mut s_hat);
        let s = source.row(j);
        let row = &mut out.data[j * nv..(j + 1) * nv];
        for k in 0..nv {
            if up[k] {
                row[k] = c.e[k] * g_hat[k] + c.a0[k] * s[k] + c.a1[k] * (s_hat[k] - s[k]);
            }
        }
    }
    // v_y < 0 marches downward from y = +1
    for j in (0..ny - 1).rev() {
        shift_vx(vgrid, out.row(j + 1), -shift, &mut g_hat);
        shift_vx(vgrid, source.row(j + 1), -shift, &mut s_hat);
        let s = source.row(j);
        let row = &mut out.data[j * nv..(j + 1) * nv];
        for k in 0..nv {
            if !up[k] {
                row[k] = c.e[k] * g_hat[k] + c.a0[k] * s[k] + c.a1[k] * (s_hat[k] - s[k]);
            }
        }
    }
    Ok(out)
}

/// Defect of one exponential step at every interior node, scaled by λ/(1−E)
/// so it carries the units of v_y∂_yG + λG − S. Inflow rows are zero.
pub fn transport_defect(
    vgrid: &VelocityGrid,
    sgrid: &SpatialGrid,
    g: &Field,
    source: &Field,
    damping: f64,
    alpha: f64,
) -> Field {
    let ny = sgrid.len();
    let nv = vgrid.len();
    let dy = sgrid.dy();
    let c = StepCoeffs::new(vgrid, dy, damping);
    let scale: Vec<f64> = c.e.iter().map(|e| damping / (1.0 - e)).collect();
    let up: Vec<bool> = vgrid.nodes().iter().map(|v| v[1] > 0.0).collect();
    let mut out = Field::zeros(g.repr, ny, nv);
    let shift = alpha * dy;
    let mut g_hat = vec![0.0; nv];
    let mut s_hat = vec![0.0; nv];
    for j in 1..ny {
        shift_vx(vgrid, g.row(j - 1), shift, &mut g_hat);
        shift_vx(vgrid, source.row(j - 1), shift, &mut s_hat);
        let (gj, s) = (g.row(j), source.row(j));
        for k in 0..nv {
            if up[k] {
                let pred = c.e[k] * g_hat[k] + c.a0[k] * s[k] + c.a1[k] * (s_hat[k] - s[k]);
                out.data[j * nv + k] = scale[k] * (gj[k] - pred);
            }
        }
    }
    for j in (0..ny - 1).rev() {
        shift_vx(vgrid, g.row(j + 1), -shift, &mut g_hat);
        shift_vx(vgrid, source.row(j + 1), -shift, &mut s_hat);
        let (gj, s) = (g.row(j), source.row(j));
        for k in 0..nv {
            if !up[k] {
                let pred = c.e[k] * g_hat[k] + c.a0[k] * s[k] + c.a1[k] * (s_hat[k] - s[k]);
                out.data[j * nv + k] = scale[k] * (gj[k] - pred);
            }
        }
    }
    out
}

/// Backward time cycle: (t_k, y_k, v_k) with y_k on a wall for k ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BounceCycle {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<[f64; 3]>,
    pub alpha: f64,
    /// Stopped by the bounce cap rather than by t_k ≤ 0.
    pub capped: bool,
}

impl BounceCycle {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Whether t_k > 0 for bounce index k (cycles that hit the cap count as alive).
    pub fn alive_at(&self, k: usize) -> bool {
        match self.t.get(k) {
            Some(&t) => t > 0.0,
            None => self.capped,
        }
    }
}

/// Velocity from √(2π)μ|v_y| on the half-space pointing back into the slab
/// from `wall` (v_y > 0 at y = +1, v_y < 0 at y = −1).
pub fn sample_wall_velocity(wall: f64, rng: &mut impl Rng) -> [f64; 3] {
    let vx: f64 = rng.sample(StandardNormal);
    let vz: f64 = rng.sample(StandardNormal);
    // Rayleigh by inverse CDF; 1 − U lies in (0, 1]
    let u: f64 = rng.random();
    let r = (-2.0 * (1.0 - u).ln()).sqrt();
    // r = 0 has probability zero but would land on the grazing set
    let r = if r > 0.0 { r } else { f64::MIN_POSITIVE };
    [vx, wall.signum() * r, vz]
}

pub fn sample_bounce_cycle(
    t: f64,
    y: f64,
    v: [f64; 3],
    alpha: f64,
    rng: &mut impl Rng,
    k_max: usize,
) -> Result<BounceCycle> {
    if k_max < 1 {
        return Err(Error::Param("k_max must be at least 1".into()));
    }
    let mut c = BounceCycle {
        t: vec![t],
        y: vec![y],
        v: vec![v],
        alpha,
        capped: false,
    };
    loop {
        let k = c.len() - 1;
        if c.t[k] <= 0.0 {
            break;
        }
        if k == k_max {
            c.capped = true;
            break;
        }
        let (tb, yb) = backward_exit(c.y[k], c.v[k])?;
        let vn = sample_wall_velocity(yb, rng);
        c.t.push(c.t[k] - tb);
        c.y.push(yb);
        c.v.push(vn);
    }
    Ok(c)
}

/// Starting point of the cycle study.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CycleStart {
    pub y: f64,
    pub v: [f64; 3],
}

impl Default for CycleStart {
    fn default() -> Self {
        Self {
            y: 0.0,
            v: [0.0, 1.0, 0.0],
        }
    }
}

/// One row of the survival table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurvivalRow {
    pub t0: f64,
    pub k: usize,
    pub n_samples: usize,
    pub survival: f64,
    pub stderr: f64,
}

const CHUNK: usize = 4096;

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Survival fractions 1{t_k > 0} for k = 1..=k_max from one set of sampled cycles,
/// so the column is nonincreasing by construction.
pub fn survival_table(
    t0: f64,
    k_max: usize,
    n_samples: usize,
    start: CycleStart,
    seed: u64,
) -> Result<Vec<SurvivalRow>> {
    if !(t0 > 0.0) {
        return Err(Error::Param(format!("T0 = {t0} must be positive")));
    }
    backward_exit(start.y, start.v)?;
    let n_chunks = n_samples.div_ceil(CHUNK);
    let counts = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c);
            let n = CHUNK.min(n_samples - c * CHUNK);
            let mut alive = vec![0u64; k_max + 1];
            for _ in 0..n {
                let cyc = sample_bounce_cycle(t0, start.y, start.v, 0.0, &mut rng, k_max)
                    .expect("start validated above");
                for (k, a) in alive.iter_mut().enumerate() {
                    if cyc.alive_at(k) {
                        *a += 1;
                    } else {
                        break;
                    }
                }
            }
            alive
        })
        .reduce(
            || vec![0u64; k_max + 1],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let n = n_samples as f64;
    Ok((1..=k_max)
        .map(|k| {
            let p = counts[k] as f64 / n;
            SurvivalRow {
                t0,
                k,
                n_samples,
                survival: p,
                stderr: (p * (1.0 - p) / n).sqrt(),
            }
        })
        .collect())
}

/// Monte Carlo estimate of the measure of cycles with t_k > 0.
pub fn estimate_cycle_survival(
    t0: f64,
    k: usize,
    n_samples: usize,
    start: CycleStart,
    seed: u64,
) -> Result<SurvivalRow> {
    if k < 1 {
        return Err(Error::Param("k must be at least 1".into()));
    }
    let table = survival_table(t0, k, n_samples, start, seed)?;
    Ok(table[k - 1])
}

/// max over bounces j ≥ 1 of w̃(v_j)/w̃(V^j(t_{j+1})) with w̃ = (√(2π) w_q √μ)⁻¹.
pub fn weight_ratio_check(cycle: &BounceCycle, q: u32) -> f64 {
    let mut worst: f64 = 1.0;
    for j in 1..cycle.len().saturating_sub(1) {
        let v = cycle.v[j];
        let dt = cycle.t[j] - cycle.t[j + 1];
        let big_v = [v[0] + cycle.alpha * dt * v[1], v[1], v[2]];
        let r2 = |a: [f64; 3]| a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
        let ratio =
            weight_q(big_v, q) / weight_q(v, q) * (0.25 * (r2(v) - r2(big_v))).exp();
        worst = worst.max(ratio);
    }
    worst
}

/// (1 + 4α²)^q e^{α²}
pub fn peetre_bound(alpha: f64, q: u32) -> f64 {
    (1.0 + 4.0 * alpha * alpha).powi(q as i32) * (alpha * alpha).exp()
}

/// Summary of the weight-ratio study over sampled cycles.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WeightRatioStudy {
    pub n_cycles: usize,
    pub max_ratio: f64,
    pub bound: f64,
    pub violations: usize,
}

pub fn weight_ratio_study(
    t0: f64,
    alpha: f64,
    q: u32,
    n_cycles: usize,
    k_max: usize,
    start: CycleStart,
    seed: u64,
) -> Result<WeightRatioStudy> {
    backward_exit(start.y, start.v)?;
    let bound = peetre_bound(alpha, q);
    let n_chunks = n_cycles.div_ceil(CHUNK);
    let (max_ratio, violations) = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed ^ 0x5eed, c);
            let n = CHUNK.min(n_cycles - c * CHUNK);
            let mut worst: f64 = 0.0;
            let mut bad = 0usize;
            for _ in 0..n {
                let cyc = sample_bounce_cycle(t0, start.y, start.v, alpha, &mut rng, k_max)
                    .expect("start validated above");
                let r = weight_ratio_check(&cyc, q);
                worst = worst.max(r);
                if r > bound {
                    bad += 1;
                }
            }
            (worst, bad)
        })
        .reduce(|| (0.0, 0), |a, b| (a.0.max(b.0), a.1 + b.1));
    Ok(WeightRatioStudy {
        n_cycles,
        max_ratio,
        bound,
        violations,
    })
}

/// Smallest C₁ on a grid of step 0.01 with survival(⌈C₁T₀^{5/4}⌉) ≤ 1/2 for every T₀.
pub fn fit_cycle_constant(
    t0s: &[f64],
    n_samples: usize,
    k_max: usize,
    start: CycleStart,
    seed: u64,
) -> Result<Option<f64>> {
    let tables: Vec<Vec<SurvivalRow>> = t0s
        .iter()
        .map(|&t0| survival_table(t0, k_max, n_samples, start, seed))
        .collect::<Result<_>>()?;
    for step in 1..=1000 {
        let c1 = step as f64 * 0.01;
        let ok = t0s.iter().zip(&tables).all(|(&t0, tab)| {
            let k = (c1 * t0.powf(1.25)).ceil() as usize;
            k >= 1 && k <= k_max && tab[k - 1].survival <= 0.5
        });
        if ok {
            return Ok(Some(c1));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Repr;

    #[test]
    fn exit_examples() {
        assert_eq!(backward_exit(0.5, [0.0, 1.0, 0.0]).unwrap(), (1.5, -1.0));
        assert_eq!(backward_exit(1.0, [0.0, -2.0, 0.0]).unwrap(), (1.0, -1.0));
        let a = backward_exit(0.0, [0.0, 0.7, 0.0]).unwrap();
        let b = backward_exit(0.0, [0.0, -0.7, 0.0]).unwrap();
        assert_eq!(a.0, b.0);
        assert!(backward_exit(0.0, [1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn exit_lands_on_wall() {
        let tr = Trajectory {
            t: 3.0,
            y: 0.3,
            v: [0.2, -0.9, 0.1],
            alpha: 0.1,
        };
        let (tb, yb) = backward_exit(tr.y, tr.v).unwrap();
        let (y, v) = tr.at(tr.t - tb);
        assert!((y - yb).abs() < 1e-15);
        assert_eq!(v[1], tr.v[1]);
    }

    #[test]
    fn constant_source_closed_form() {
        let vg = VelocityGrid::new(4, 2.0).unwrap();
        let sg = SpatialGrid::new(9).unwrap();
        let s = Field::from_fn(Repr::Perturbation, sg.len(), vg.len(), |_, _| 0.7);
        let g = transport_inverse(&vg, &sg, &s, 1.3, 0.0, &Inflow::Zero).unwrap();
        for (j, y) in sg.nodes().iter().enumerate() {
            for (k, v) in vg.nodes().iter().enumerate() {
                let d = if v[1] > 0.0 { y + 1.0 } else { y - 1.0 };
                let exact = 0.7 / 1.3 * (1.0 - (-1.3 * d / v[1]).exp());
                assert!((g.at(j, k) - exact).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_source_zero_inflow() {
        let vg = VelocityGrid::new(4, 2.0).unwrap();
        let sg = SpatialGrid::new(8).unwrap();
        let s = Field::zeros(Repr::Perturbation, 8, vg.len());
        let g = transport_inverse(&vg, &sg, &s, 1.0, 0.2, &Inflow::Zero).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(transport_inverse(&vg, &sg, &s, 0.0, 0.0, &Inflow::Zero).is_err());
    }

    #[test]
    fn defect_vanishes_on_solution() {
        let vg = VelocityGrid::new(6, 3.0).unwrap();
        let sg = SpatialGrid::new(11).unwrap();
        let s = Field::from_fn(Repr::Perturbation, sg.len(), vg.len(), |j, k| {
            (j as f64 * 0.3).sin() + vg.node(k)[0]
        });
        let g = transport_inverse(&vg, &sg, &s, 1.1, 0.05, &Inflow::Zero).unwrap();
        let d = transport_defect(&vg, &sg, &g, &s, 1.1, 0.05);
        assert!(d.max_abs() < 1e-12);
    }

    #[test]
    fn shift_by_whole_cells() {
        let vg = VelocityGrid::new(4, 2.0).unwrap();
        let src: Vec<f64> = (0..vg.len()).map(|k| k as f64).collect();
        let mut out = vec![0.0; vg.len()];
        shift_vx(&vg, &src, 1.0, &mut out);
        assert_eq!(out[vg.index(0, 1, 2)], src[vg.index(1, 1, 2)]);
        assert_eq!(out[vg.index(3, 1, 2)], 0.0);
        shift_vx(&vg, &src, 0.5, &mut out);
        let mid = 0.5 * (src[vg.index(1, 0, 0)] + src[vg.index(2, 0, 0)]);
        assert!((out[vg.index(1, 0, 0)] - mid).abs() < 1e-15);
    }

    #[test]
    fn cycle_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = sample_bounce_cycle(5.0, 0.2, [0.1, 0.8, 0.0], 0.1, &mut rng, 64).unwrap();
            for k in 1..c.len() {
                assert!(c.t[k] < c.t[k - 1]);
                // the sampled velocity points back into the slab from its wall
                assert!(c.v[k][1] * c.y[k] > 0.0);
            }
        }
    }

    #[test]
    fn wall_speed_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let s: f64 = (0..n).map(|_| sample_wall_velocity(1.0, &mut rng)[1]).sum();
        let mean = s / n as f64;
        let exact = (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean - exact).abs() < 0.01 * exact);
    }

    #[test]
    fn ratio_is_one_without_shear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = sample_bounce_cycle(20.0, 0.0, [0.0, 1.0, 0.0], 0.0, &mut rng, 64).unwrap();
        assert_eq!(weight_ratio_check(&c, 4), 1.0);
    }
}
