//! Steady Couette state F_st = μ + √μ(αG₁ + α²G_R).
//!
//! G₁ solves v_y∂_yG₁ + LG₁ = −v_xv_y√μ with zero inflow, reached by ε-damped
//! σ-continuation. The remainder is split as √μG_R = G_R1 + √μG_R2: G_R1 carries
//! the χ_M part of 𝒦 and the exponential growth term, G_R2 carries L and the
//! diffuse wall.

use serde::Serialize;

use crate::anderson::Anderson;
use crate::collision::CollisionOperators;
use crate::diagnostics::{oddness_defect, outgoing_flux, symmetrize_odd_x, wall_normalization, Wall};
use crate::error::{Error, Result};
use crate::field::{Field, Repr};
use crate::grid::{weight_q, SpatialGrid, VelocityGrid};
use crate::transport::{transport_defect, transport_inverse, Inflow};

/// Grids and operators shared by every steady solve.
pub struct Setup<'a> {
    pub vgrid: &'a VelocityGrid,
    pub sgrid: &'a SpatialGrid,
    pub ops: &'a CollisionOperators,
}

impl<'a> Setup<'a> {
    pub fn new(vgrid: &'a VelocityGrid, sgrid: &'a SpatialGrid, ops: &'a CollisionOperators) -> Self {
        Self { vgrid, sgrid, ops }
    }

    fn ny(&self) -> usize {
        self.sgrid.len()
    }

    fn nv(&self) -> usize {
        self.vgrid.len()
    }

    /// −v_xv_y√μ at every node.
    pub fn shear_source(&self) -> Field {
        let nodes = self.vgrid.nodes();
        Field::from_fn(Repr::Perturbation, self.ny(), self.nv(), |_, k| {
            -nodes[k][0] * nodes[k][1] * self.ops.sqrt_mu[k]
        })
    }

    fn weights_q(&self, q: u32) -> Vec<f64> {
        self.vgrid.nodes().iter().map(|v| weight_q(*v, q)).collect()
    }
}

/// sup over (y, v) of w_q|a − b|.
fn weighted_diff(wq: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let nv = wq.len();
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| wq[i % nv] * (x - y).abs())
        .fold(0.0, f64::max)
}

/// Convergence record of one continuation stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub stage: String,
    pub epsilon: f64,
    pub sigma: f64,
    pub iterations: usize,
    pub residual: f64,
}

struct FixedPoint<'a> {
    stage: String,
    tol: f64,
    max_iter: usize,
    wq: &'a [f64],
    depth: usize,
}

impl FixedPoint<'_> {
    /// Anderson-accelerated iteration of `map` from `x0`; returns T(x) at convergence.
    fn run(&self, x0: Vec<f64>, mut map: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<(Vec<f64>, usize, f64)> {
        let mut acc = Anderson::new(self.depth, 1.0);
        let mut x = x0;
        let mut prev = f64::INFINITY;
        let mut growth = 0;
        for it in 1..=self.max_iter {
            let tx = map(&x)?;
            let r = weighted_diff(self.wq, &tx, &x);
            if !r.is_finite() {
                return Err(Error::Divergence {
                    stage: self.stage.clone(),
                    iteration: it,
                    residual: r,
                });
            }
            if r <= self.tol {
                return Ok((tx, it, r));
            }
            if r > prev {
                growth += 1;
                if growth >= 5 {
                    return Err(Error::Divergence {
                        stage: self.stage.clone(),
                        iteration: it,
                        residual: r,
                    });
                }
            } else {
                growth = 0;
            }
            prev = r;
            x = acc.next(&x, &tx);
        }
        Err(Error::NoConvergence {
            stage: self.stage.clone(),
            iterations: self.max_iter,
            residual: prev,
        })
    }
}

fn check_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Param("epsilon schedule is empty".into()));
    }
    for w in schedule.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::Param(format!("epsilon schedule must decrease, found {} then {}", w[0], w[1])));
        }
    }
    if let Some(e) = schedule.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(Error::Param(format!("epsilon = {e} must be finite and nonnegative")));
    }
    Ok(())
}

/// Boundary setting of the G₁ problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum G1Mode {
    /// Slab with zero inflow at both walls.
    Slab,
    /// No transport: (ν₀+ε)G = σKG + 𝔉 at every node independently.
    Homogeneous,
}

#[derive(Debug, Clone, Serialize)]
pub struct G1Options {
    pub epsilon_schedule: Vec<f64>,
    pub sigma_steps: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Weight exponent of the convergence norm.
    pub q: u32,
    pub anderson_depth: usize,
    /// Linear extrapolation ε → 0 from the last two stages.
    pub richardson: bool,
    /// Forces σ = 0 (K disabled).
    pub disable_k: bool,
    pub mode: G1Mode,
}

impl Default for G1Options {
    fn default() -> Self {
        Self {
            epsilon_schedule: vec![1e-1, 1e-2, 1e-3],
            sigma_steps: 4,
            tol: 1e-10,
            max_iter: 500,
            q: 0,
            anderson_depth: 8,
            richardson: false,
            disable_k: false,
            mode: G1Mode::Slab,
        }
    }
}

#[derive(Debug, Clone)]
pub struct G1Solution {
    pub g1: Field,
    pub history: Vec<StageRecord>,
    pub epsilon: f64,
    pub sigma: f64,
    pub oddness_defect: f64,
    /// Σ_j W_j Σ_v w √μ G₁
    pub mass: f64,
}

/// Solves the G₁ problem for the shear source −v_xv_y√μ.
pub fn solve_g1(setup: &Setup, opts: &G1Options) -> Result<G1Solution> {
    solve_g1_with_source(setup, opts, &setup.shear_source())
}

/// Solves εG + v_y∂_yG + ν₀G = σKG + 𝔉 along the continuation schedule.
pub fn solve_g1_with_source(setup: &Setup, opts: &G1Options, source: &Field) -> Result<G1Solution> {
    check_schedule(&opts.epsilon_schedule)?;
    if opts.sigma_steps < 1 {
        return Err(Error::Param("sigma_steps must be at least 1".into()));
    }
    source.expect(Repr::Perturbation)?;
    let (ny, nv) = (setup.ny(), setup.nv());
    if source.n_y != ny || source.n_v != nv {
        return Err(Error::Grid("G1 source shape does not match the grids".into()));
    }
    let ops = setup.ops;
    let wq = setup.weights_q(opts.q);
    let sigmas: Vec<f64> = if opts.disable_k {
        vec![0.0]
    } else {
        (1..=opts.sigma_steps).map(|s| s as f64 / opts.sigma_steps as f64).collect()
    };
    let mut g = vec![0.0; ny * nv];
    let mut history = Vec::new();
    let mut prev_eps: Option<(f64, Vec<f64>)> = None;
    let mut last = (0.0, 0.0);
    for &eps in &opts.epsilon_schedule {
        let damping = ops.nu0 + eps;
        for &sigma in &sigmas {
            let fp = FixedPoint {
                stage: format!("G1 (eps = {eps:.1e}, sigma = {sigma:.3})"),
                tol: opts.tol,
                max_iter: opts.max_iter,
                wq: &wq,
                depth: opts.anderson_depth,
            };
            let map = |x: &[f64]| -> Result<Vec<f64>> {
                let xf = Field { repr: Repr::Perturbation, n_y: ny, n_v: nv, data: x.to_vec() };
                let mut s = source.clone();
                if sigma != 0.0 {
                    s.axpy(sigma, &ops.apply_k(&xf));
                }
                let mut out = match opts.mode {
                    G1Mode::Slab => transport_inverse(setup.vgrid, setup.sgrid, &s, damping, 0.0, &Inflow::Zero)?,
                    G1Mode::Homogeneous => {
                        s.scale(1.0 / damping);
                        s
                    }
                };
                symmetrize_odd_x(setup.vgrid, &mut out);
                Ok(out.data)
            };
            let (sol, iterations, residual) = fp.run(std::mem::take(&mut g), map)?;
            g = sol;
            history.push(StageRecord {
                stage: "G1".into(),
                epsilon: eps,
                sigma,
                iterations,
                residual,
            });
            last = (eps, sigma);
        }
        if let Some((pe, pg)) = &prev_eps {
            if opts.richardson && eps > 0.0 && eps == *opts.epsilon_schedule.last().unwrap() {
                let r = eps / (pe - eps);
                for (a, b) in g.iter_mut().zip(pg) {
                    *a += r * (*a - b);
                }
                last.0 = 0.0;
            }
        }
        prev_eps = Some((eps, g.clone()));
    }
    let mut g1 = Field { repr: Repr::Perturbation, n_y: ny, n_v: nv, data: g };
    symmetrize_odd_x(setup.vgrid, &mut g1);
    let mass = total_mass_pert(setup, &g1);
    Ok(G1Solution {
        oddness_defect: oddness_defect(setup.vgrid, &g1),
        g1,
        history,
        epsilon: last.0,
        sigma: last.1,
        mass,
    })
}

/// Σ_j W_j Σ_v w √μ g
fn total_mass_pert(setup: &Setup, g: &Field) -> f64 {
    let wy = setup.sgrid.weights();
    let w = setup.vgrid.weight();
    (0..g.n_y)
        .map(|j| wy[j] * w * g.row(j).iter().zip(&setup.ops.sqrt_mu).map(|(x, s)| x * s).sum::<f64>())
        .sum()
}

/// Centered difference in v_x with zero extension beyond the grid.
pub fn dvx_centered(grid: &VelocityGrid, src: &[f64], out: &mut [f64]) {
    let n = grid.n_per_axis();
    let plane = n * n;
    let inv = 0.5 / grid.spacing();
    for ix in 0..n {
        for r in 0..plane {
            let hi = if ix + 1 < n { src[(ix + 1) * plane + r] } else { 0.0 };
            let lo = if ix > 0 { src[(ix - 1) * plane + r] } else { 0.0 };
            out[ix * plane + r] = inv * (hi - lo);
        }
    }
}

/// v_y μ^{-1/2} D⁰_{v_x}(√μ g) at every node: the shear term in perturbation form.
fn shear_term(setup: &Setup, g: &Field) -> Field {
    let nv = setup.nv();
    let sm = &setup.ops.sqrt_mu;
    let nodes = setup.vgrid.nodes();
    let mut out = Field::zeros(Repr::Perturbation, g.n_y, nv);
    let mut prod = vec![0.0; nv];
    let mut d = vec![0.0; nv];
    for j in 0..g.n_y {
        for (p, (x, s)) in prod.iter_mut().zip(g.row(j).iter().zip(sm)) {
            *p = x * s;
        }
        dvx_centered(setup.vgrid, &prod, &mut d);
        for (k, o) in out.row_mut(j).iter_mut().enumerate() {
            *o = nodes[k][1] * d[k] / sm[k];
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct RemainderOptions {
    pub epsilon_schedule: Vec<f64>,
    /// Outer tolerance on sup w_q|Δ(√μG_R)|.
    pub tol: f64,
    pub inner_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub q: u32,
    pub anderson_depth: usize,
    /// Lag the diffuse inflow by one outer iteration (the classical splitting) instead
    /// of recomputing it every inner sweep.
    pub lag_boundary: bool,
    /// χ_M ≡ 1, which decouples G_R2 from 𝒦G_R1.
    pub force_chi_one: bool,
    /// Drop every source term, leaving the homogeneous system.
    pub zero_sources: bool,
}

impl Default for RemainderOptions {
    fn default() -> Self {
        Self {
            epsilon_schedule: vec![1e-1, 1e-2, 1e-3],
            tol: 1e-8,
            inner_tol: 1e-9,
            max_outer: 50,
            max_inner: 400,
            q: 0,
            anderson_depth: 10,
            lag_boundary: false,
            force_chi_one: false,
            zero_sources: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemainderSolution {
    /// Raw component, absolute scaling.
    pub gr1: Field,
    /// √μ-representation.
    pub gr2: Field,
    pub history: Vec<StageRecord>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub epsilon: f64,
}

impl RemainderSolution {
    /// √μG_R = G_R1 + √μG_R2 (absolute scaling).
    pub fn composed_abs(&self, sqrt_mu: &[f64]) -> Field {
        let mut h = self.gr1.clone();
        h.repr = Repr::Absolute;
        for j in 0..h.n_y {
            for (k, x) in h.row_mut(j).iter_mut().enumerate() {
                *x += sqrt_mu[k] * self.gr2.at(j, k);
            }
        }
        h
    }

    /// G_R in √μ-representation.
    pub fn composed(&self, sqrt_mu: &[f64]) -> Field {
        let mut g = self.composed_abs(sqrt_mu);
        g.repr = Repr::Perturbation;
        for j in 0..g.n_y {
            for (x, s) in g.row_mut(j).iter_mut().zip(sqrt_mu) {
                *x /= s;
            }
        }
        g
    }
}

/// min over nodes of ν₀ + ε + 2qα v_xv_y/(1+|v|²) must stay ≥ ν₀/2.
pub fn stability_margin(grid: &VelocityGrid, nu0: f64, eps: f64, q: u32, alpha: f64) -> f64 {
    grid.nodes()
        .iter()
        .map(|v| {
            let r2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            nu0 + eps + 2.0 * q as f64 * alpha * v[0] * v[1] / (1.0 + r2)
        })
        .fold(f64::INFINITY, f64::min)
        - 0.5 * nu0
}

pub fn solve_remainder(setup: &Setup, g1: &G1Solution, alpha: f64, opts: &RemainderOptions) -> Result<RemainderSolution> {
    check_schedule(&opts.epsilon_schedule)?;
    if !(alpha >= 0.0) {
        return Err(Error::Param(format!("alpha = {alpha} must be nonnegative")));
    }
    let ops = setup.ops;
    let eps_min = *opts.epsilon_schedule.last().unwrap();
    let margin = stability_margin(setup.vgrid, ops.nu0, eps_min, opts.q, alpha);
    if margin < 0.0 {
        return Err(Error::Stability(format!(
            "nu0 + eps + 2 q alpha v_x v_y / (1 + |v|^2) >= nu0 / 2 fails by {:.3e} (q = {}, alpha = {alpha})",
            -margin, opts.q
        )));
    }
    let (ny, nv) = (setup.ny(), setup.nv());
    let sm = &ops.sqrt_mu;
    let nodes = setup.vgrid.nodes();
    let chi: Vec<f64> = if opts.force_chi_one { vec![1.0; nv] } else { ops.chi.clone() };
    let growth: Vec<f64> = (0..nv).map(|k| 0.5 * alpha * sm[k] * nodes[k][0] * nodes[k][1]).collect();
    let cw = wall_normalization(setup.vgrid, &ops.mu);
    let wy = setup.sgrid.weights();
    let w = setup.vgrid.weight();
    let mu_mass: f64 = wy.iter().sum::<f64>() * w * ops.mu.iter().sum::<f64>();
    let wq = setup.weights_q(opts.q);
    let n = ny * nv;

    // v_y D⁰(√μG₁), the α-independent explicit source of G_R1 in absolute form
    let mut shear_g1 = shear_term(setup, &g1.g1);
    for j in 0..ny {
        for (x, s) in shear_g1.row_mut(j).iter_mut().zip(sm) {
            *x *= s;
        }
    }

    let split = |x: &[f64]| -> (Field, Field) {
        (
            Field { repr: Repr::CaflischRaw, n_y: ny, n_v: nv, data: x[..n].to_vec() },
            Field { repr: Repr::Perturbation, n_y: ny, n_v: nv, data: x[n..].to_vec() },
        )
    };
    let inflow_of = |r1: &Field, r2: &Field| -> Inflow {
        let mut walls = [vec![0.0; nv], vec![0.0; nv]];
        for (i, wall) in [Wall::Bottom, Wall::Top].into_iter().enumerate() {
            let j = wall.row(ny);
            let h: Vec<f64> = (0..nv).map(|k| r1.at(j, k) + sm[k] * r2.at(j, k)).collect();
            let flux = outgoing_flux(setup.vgrid, &h, wall);
            for k in 0..nv {
                if !wall.outgoing(nodes[k][1]) {
                    walls[i][k] = cw * sm[k] * flux;
                }
            }
        }
        let [bottom, top] = walls;
        Inflow::Given { bottom, top }
    };
    // removes the null mode: total mass of G_R1 + √μG_R2 is zero
    let project_mass = |r1: &Field, r2: &mut Field| {
        let mut m = 0.0;
        for j in 0..ny {
            let s: f64 = (0..nv).map(|k| r1.at(j, k) + sm[k] * r2.at(j, k)).sum();
            m += wy[j] * w * s;
        }
        let c = m / mu_mass;
        for j in 0..ny {
            for (x, s) in r2.row_mut(j).iter_mut().zip(sm) {
                *x -= c * s;
            }
        }
    };

    let mut state = vec![0.0; 2 * n];
    let mut history = Vec::new();
    let mut outer_total = 0;
    let mut inner_total = 0;
    for &eps in &opts.epsilon_schedule {
        let damping = ops.nu0 + eps;
        let mut converged = false;
        let mut last_change = f64::INFINITY;
        for outer in 1..=opts.max_outer {
            outer_total += 1;
            // frozen nonlinear source: P₁Γ(u, u) with u = G₁ + αG_R
            let (r1, r2) = split(&state);
            let f1 = if opts.zero_sources {
                Field::zeros(Repr::CaflischRaw, ny, nv)
            } else {
                let gr = RemainderSolution {
                    gr1: r1.clone(),
                    gr2: r2.clone(),
                    history: vec![],
                    outer_iterations: 0,
                    inner_iterations: 0,
                    epsilon: eps,
                }
                .composed(sm);
                let mut u = g1.g1.clone();
                u.axpy(alpha, &gr);
                let gam = ops.gamma_conservative(&u)?;
                let mut f1 = shear_g1.clone();
                f1.repr = Repr::CaflischRaw;
                for j in 0..ny {
                    let row = gam.row(j);
                    for (k, x) in f1.row_mut(j).iter_mut().enumerate() {
                        *x += sm[k] * row[k];
                    }
                }
                f1
            };
            let lagged = inflow_of(&r1, &r2);
            let fp = FixedPoint {
                stage: format!("G_R inner (eps = {eps:.1e}, outer {outer})"),
                tol: opts.inner_tol,
                max_iter: opts.max_inner,
                wq: &[],
                depth: opts.anderson_depth,
            };
            let map = |x: &[f64]| -> Result<Vec<f64>> {
                let (r1, r2) = split(x);
                let kr1 = ops.apply_kcal(&r1);
                let kr2 = ops.apply_k(&r2);
                let mut s1 = f1.clone();
                let mut s2 = Field::zeros(Repr::Perturbation, ny, nv);
                for j in 0..ny {
                    for k in 0..nv {
                        let i = j * nv + k;
                        s1.data[i] += chi[k] * kr1.data[i] - growth[k] * r2.data[i];
                        s2.data[i] = kr2.data[i] + (1.0 - chi[k]) * kr1.data[i] / sm[k];
                    }
                }
                let n1 = transport_inverse(setup.vgrid, setup.sgrid, &s1, damping, alpha, &Inflow::Zero)?;
                let inflow = if opts.lag_boundary { lagged.clone() } else { inflow_of(&r1, &r2) };
                let mut n2 = transport_inverse(setup.vgrid, setup.sgrid, &s2, damping, alpha, &inflow)?;
                project_mass(&n1, &mut n2);
                let mut out = n1.data;
                out.extend_from_slice(&n2.data);
                Ok(out)
            };
            // inner norm: w_q-weighted change of √μG_R
            let inner = FixedPointAbs { fp, wq: &wq, sm, n, nv };
            let (sol, its, _) = inner.run(state.clone(), map)?;
            inner_total += its;
            let change = abs_change(&wq, sm, n, nv, &sol, &state);
            state = sol;
            last_change = change;
            history.push(StageRecord {
                stage: "G_R outer".into(),
                epsilon: eps,
                sigma: 1.0,
                iterations: its,
                residual: change,
            });
            if change <= opts.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                stage: format!("G_R outer (eps = {eps:.1e})"),
                iterations: opts.max_outer,
                residual: last_change,
            });
        }
    }
    let (gr1, gr2) = split(&state);
    Ok(RemainderSolution {
        gr1,
        gr2,
        history,
        outer_iterations: outer_total,
        inner_iterations: inner_total,
        epsilon: eps_min,
    })
}

/// sup w_q |Δ(G_R1 + √μG_R2)| between two stacked states.
fn abs_change(wq: &[f64], sm: &[f64], n: usize, nv: usize, a: &[f64], b: &[f64]) -> f64 {
    (0..n)
        .map(|i| {
            let k = i % nv;
            wq[k] * ((a[i] - b[i]) + sm[k] * (a[n + i] - b[n + i])).abs()
        })
        .fold(0.0, f64::max)
}

/// Fixed-point driver measuring the residual on the composed √μG_R.
struct FixedPointAbs<'a> {
    fp: FixedPoint<'a>,
    wq: &'a [f64],
    sm: &'a [f64],
    n: usize,
    nv: usize,
}

impl FixedPointAbs<'_> {
    fn run(&self, x0: Vec<f64>, mut map: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<(Vec<f64>, usize, f64)> {
        let mut acc = Anderson::new(self.fp.depth, 1.0);
        let mut x = x0;
        let mut prev = f64::INFINITY;
        let mut growth = 0;
        for it in 1..=self.fp.max_iter {
            let tx = map(&x)?;
            let r = abs_change(self.wq, self.sm, self.n, self.nv, &tx, &x);
            if !r.is_finite() {
                return Err(Error::Divergence { stage: self.fp.stage.clone(), iteration: it, residual: r });
            }
            if r <= self.fp.tol {
                return Ok((tx, it, r));
            }
            if r > prev {
                growth += 1;
                if growth >= 5 {
                    return Err(Error::Divergence { stage: self.fp.stage.clone(), iteration: it, residual: r });
                }
            } else {
                growth = 0;
            }
            prev = r;
            x = acc.next(&x, &tx);
        }
        Err(Error::NoConvergence { stage: self.fp.stage.clone(), iterations: self.fp.max_iter, residual: prev })
    }
}

#[derive(Debug, Clone)]
pub struct SteadyState {
    pub f_st: Field,
    pub alpha: f64,
    pub min_value: f64,
    /// (1/2) Σ_j W_j Σ_v w F_st
    pub mass: f64,
    /// |mass − 1|, including the truncation deficit of μ
    pub mass_defect: f64,
}

impl SteadyState {
    /// g = (F_st − μ)/√μ.
    pub fn perturbation(&self, mu: &[f64], sqrt_mu: &[f64]) -> Field {
        let mut g = self.f_st.clone();
        g.repr = Repr::Perturbation;
        for j in 0..g.n_y {
            for (k, x) in g.row_mut(j).iter_mut().enumerate() {
                *x = (*x - mu[k]) / sqrt_mu[k];
            }
        }
        g
    }
}

pub fn compose_steady(setup: &Setup, g1: &Field, gr: Option<&RemainderSolution>, alpha: f64) -> SteadyState {
    let ops = setup.ops;
    let (ny, nv) = (setup.ny(), setup.nv());
    let h = gr.map(|r| r.composed_abs(&ops.sqrt_mu));
    let mut f = Field::zeros(Repr::Absolute, ny, nv);
    for j in 0..ny {
        for k in 0..nv {
            let mut x = ops.mu[k] + alpha * ops.sqrt_mu[k] * g1.at(j, k);
            if let Some(h) = &h {
                x += alpha * alpha * h.at(j, k);
            }
            f.data[j * nv + k] = x;
        }
    }
    let wy = setup.sgrid.weights();
    let w = setup.vgrid.weight();
    let mass = 0.5 * (0..ny).map(|j| wy[j] * w * f.row(j).iter().sum::<f64>()).sum::<f64>();
    SteadyState {
        min_value: f.data.iter().cloned().fold(f64::INFINITY, f64::min),
        f_st: f,
        alpha,
        mass,
        mass_defect: (mass - 1.0).abs(),
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResidualReport {
    pub sup: f64,
    pub l2: f64,
    /// max |Q(μ, μ)|, the equilibrium defect of the raw collision quadrature
    pub q_floor: f64,
}

/// Defect of v_y∂_yF − αv_y∂_{v_x}F − Q(F, F) at interior nodes.
///
/// The collision part uses the discrete linearization the solvers use,
/// Q(μ + √μg) ≈ Q(μ,μ) − √μ(ν₀ − K)g + √μP₁Γ(g,g), so the equilibrium defect
/// Q(μ,μ) is separated out as `q_floor` and the rest vanishes at α = 0.
/// ∂_y is the exponential upwind step of the transport solver; ∂_{v_x} is centered.
pub fn steady_residual(setup: &Setup, state: &SteadyState) -> Result<ResidualReport> {
    let ops = setup.ops;
    let alpha = state.alpha;
    let g = state.perturbation(&ops.mu, &ops.sqrt_mu);
    let mut s = ops.apply_k(&g);
    let gam = ops.gamma_conservative(&g)?;
    s.axpy(1.0, &gam);
    if alpha != 0.0 {
        s.axpy(alpha, &shear_term(setup, &g));
        s.axpy(alpha, &setup.shear_source());
    }
    let mut d = transport_defect(setup.vgrid, setup.sgrid, &g, &s, ops.nu0, 0.0);
    for j in 0..d.n_y {
        for (x, sm) in d.row_mut(j).iter_mut().zip(&ops.sqrt_mu) {
            *x *= sm;
        }
    }
    let q = ops.collider.apply_q(&ops.mu, &ops.mu);
    Ok(ResidualReport {
        sup: d.max_abs(),
        l2: crate::diagnostics::l2_norm(setup.vgrid, setup.sgrid, &d),
        q_floor: q.iter().fold(0.0f64, |m, x| m.max(x.abs())),
    })
}

/// Full result of the steady pipeline.
#[derive(Debug, Clone)]
pub struct SteadySolution {
    pub g1: G1Solution,
    pub remainder: RemainderSolution,
    pub state: SteadyState,
    pub residual: ResidualReport,
}

pub fn solve_steady(setup: &Setup, alpha: f64, g1_opts: &G1Options, gr_opts: &RemainderOptions) -> Result<SteadySolution> {
    let g1 = solve_g1(setup, g1_opts)?;
    solve_steady_from(setup, g1, alpha, gr_opts)
}

/// Steady pipeline reusing an already converged G₁ (which does not depend on α).
pub fn solve_steady_from(setup: &Setup, g1: G1Solution, alpha: f64, gr_opts: &RemainderOptions) -> Result<SteadySolution> {
    let remainder = solve_remainder(setup, &g1, alpha, gr_opts)?;
    let state = compose_steady(setup, &g1.g1, Some(&remainder), alpha);
    let residual = steady_residual(setup, &state)?;
    Ok(SteadySolution { g1, remainder, state, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{AssemblyOptions, CollisionKernelSpec};
    use crate::grid::ReferenceTables;

    fn ops(n: usize, v_max: f64) -> (VelocityGrid, SpatialGrid, CollisionOperators) {
        let g = VelocityGrid::new(n, v_max).unwrap();
        let t = ReferenceTables::new(&g, 0).unwrap();
        let s = CollisionKernelSpec::new(1.0 / (2.0 * std::f64::consts::PI), 4, 8).unwrap();
        let opts = AssemblyOptions { max_exit_fraction: 0.05, ..Default::default() };
        let o = CollisionOperators::assemble(&g, &t, &s, 0.8 * v_max, opts, None).unwrap();
        (g, SpatialGrid::new(9).unwrap(), o)
    }

    #[test]
    fn zero_source_gives_zero() {
        let (g, s, o) = ops(6, 4.0);
        let setup = Setup::new(&g, &s, &o);
        let z = Field::zeros(Repr::Perturbation, s.len(), g.len());
        let sol = solve_g1_with_source(&setup, &G1Options::default(), &z).unwrap();
        assert_eq!(sol.g1.max_abs(), 0.0);
    }

    #[test]
    fn g1_is_odd_and_mass_free() {
        let (g, s, o) = ops(6, 4.0);
        let setup = Setup::new(&g, &s, &o);
        let opts = G1Options { sigma_steps: 2, ..Default::default() };
        let sol = solve_g1(&setup, &opts).unwrap();
        assert_eq!(sol.oddness_defect, 0.0);
        assert!(sol.mass.abs() < 1e-15);
        assert!(sol.g1.max_abs() > 1e-3);
    }

    #[test]
    fn schedule_validation() {
        assert!(check_schedule(&[0.1, 0.01, 0.0]).is_ok());
        assert!(check_schedule(&[0.01, 0.1]).is_err());
        assert!(check_schedule(&[]).is_err());
        assert!(check_schedule(&[-0.1]).is_err());
    }

    #[test]
    fn equilibrium_composes_to_mu() {
        let (g, s, o) = ops(6, 4.0);
        let setup = Setup::new(&g, &s, &o);
        let z = Field::zeros(Repr::Perturbation, s.len(), g.len());
        let st = compose_steady(&setup, &z, None, 0.0);
        for j in 0..s.len() {
            assert_eq!(st.f_st.row(j), &o.mu[..]);
        }
        let r = steady_residual(&setup, &st).unwrap();
        assert_eq!(r.sup, 0.0);
    }

    #[test]
    fn stability_rejects_large_shear() {
        let (g, s, o) = ops(6, 4.0);
        let setup = Setup::new(&g, &s, &o);
        let z = Field::zeros(Repr::Perturbation, s.len(), g.len());
        let g1 = solve_g1_with_source(&setup, &G1Options::default(), &z).unwrap();
        let opts = RemainderOptions { q: 100, ..Default::default() };
        assert!(matches!(solve_remainder(&setup, &g1, 1.0, &opts), Err(Error::Stability(_))));
    }

    #[test]
    fn remainder_zero_sources() {
        let (g, s, o) = ops(6, 4.0);
        let setup = Setup::new(&g, &s, &o);
        let z = Field::zeros(Repr::Perturbation, s.len(), g.len());
        let g1 = solve_g1_with_source(&setup, &G1Options::default(), &z).unwrap();
        let opts = RemainderOptions { zero_sources: true, ..Default::default() };
        let r = solve_remainder(&setup, &g1, 0.01, &opts).unwrap();
        assert_eq!(r.gr1.max_abs(), 0.0);
        assert_eq!(r.gr2.max_abs(), 0.0);
    }
}
