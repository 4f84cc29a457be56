//! Time stepping of F = F_st + √μ f toward the steady state.
//!
//! Strang splitting C(dt/2) T(dt) C(dt/2). The transport step T is a
//! semi-Lagrangian backtrace in (y, v_x) acting on the absolute perturbation
//! u = √μ f, so the shear derivative and the growth term (α/2)v_xv_y f are both
//! carried by the characteristics. Backtraces leaving the slab read the wall
//! Maxwellian, scaled so that every wall re-injects exactly the mass it lost
//! during the step. The collision step integrates −ν₀ exactly and treats
//! K f + P₁[Γ(f,f) + Γ(g,f) + Γ(f,g)] explicitly, g = (F_st − μ)/√μ.

use serde::Serialize;

use crate::collision::CollisionOperators;
use crate::diagnostics::{decay_fit_window, DecayFit};
use crate::error::{Error, Result};
use crate::field::{Field, Repr};
use crate::grid::{maxwellian, weight_q, SpatialGrid, VelocityGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    /// Evolves f itself.
    Direct,
    /// Evolves √μ f = f₁ + √μ f₂ with f₂(0) = 0.
    Caflisch,
}

/// Exponential integrator of the collision substep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Integrator {
    /// First order: f ← e^{−ν₀τ}f + φ₁ N(f).
    ExponentialEuler,
    /// Second-order exponential Runge–Kutta (ETD2RK), needed for Strang order two.
    Etd2,
}

#[derive(Debug, Clone, Serialize)]
pub struct UnsteadyOptions {
    pub dt: f64,
    pub t_end: f64,
    /// Record norms every this many steps.
    pub record_every: usize,
    /// Weight exponent of the recorded sup norm.
    pub q: u32,
    /// Allowed Courant number dt·max|v_y|/Δy; the backtrace is exact for any
    /// value, this only bounds the interpolation error.
    pub cfl: f64,
    pub integrator: Integrator,
    /// Norm growth factor treated as an instability.
    pub max_growth: f64,
    /// Fraction of the initial norm that opens the decay-fit window.
    pub fit_fraction: f64,
}

impl Default for UnsteadyOptions {
    fn default() -> Self {
        Self {
            dt: 0.1,
            t_end: 20.0,
            record_every: 1,
            q: 0,
            cfl: 8.0,
            integrator: Integrator::Etd2,
            max_growth: 10.0,
            fit_fraction: 0.1,
        }
    }
}

/// One recorded time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Record {
    pub t: f64,
    /// sup w_q |F − F_st|
    pub sup_norm: f64,
    /// L² norm of F − F_st
    pub l2_norm: f64,
    /// Σ_j W_j Σ_v w F
    pub mass: f64,
    pub min_f: f64,
}

#[derive(Debug, Clone)]
pub struct UnsteadyState {
    pub scheme: Scheme,
    pub t: f64,
    /// Direct: f (√μ-representation). Caflisch: f₁ (raw, absolute scaling).
    pub f: Field,
    /// Caflisch only: f₂ (√μ-representation).
    pub f2: Option<Field>,
    pub history: Vec<Record>,
    pub steps: usize,
}

impl UnsteadyState {
    /// √μ f, the absolute deviation F − F_st.
    pub fn deviation(&self, sqrt_mu: &[f64]) -> Field {
        let mut u = self.f.clone();
        u.repr = Repr::Absolute;
        match self.scheme {
            Scheme::Direct => {
                for j in 0..u.n_y {
                    for (x, s) in u.row_mut(j).iter_mut().zip(sqrt_mu) {
                        *x *= s;
                    }
                }
            }
            Scheme::Caflisch => {
                let f2 = self.f2.as_ref().expect("caflisch state carries f2");
                for j in 0..u.n_y {
                    for (k, x) in u.row_mut(j).iter_mut().enumerate() {
                        *x += sqrt_mu[k] * f2.at(j, k);
                    }
                }
            }
        }
        u
    }

    /// f in √μ-representation.
    pub fn perturbation(&self, sqrt_mu: &[f64]) -> Field {
        let mut f = self.deviation(sqrt_mu);
        f.repr = Repr::Perturbation;
        for j in 0..f.n_y {
            for (x, s) in f.row_mut(j).iter_mut().zip(sqrt_mu) {
                *x /= s;
            }
        }
        f
    }
}

/// Backtrace of one (y_j, v_k) node over a step.
#[derive(Debug, Clone, Copy)]
enum Foot {
    /// Bilinear stencil: rows (j0, j0+1) with weight (1−a, a), v_x nodes (x0, x0+1) with (1−b, b).
    Inside { j0: usize, a: f64, x0: isize, b: f64 },
    /// Hits `wall` (0 bottom, 1 top).
    Wall { wall: usize },
}

/// Precomputed semi-Lagrangian step for one (dt, α).
struct SlTransport {
    feet: Vec<Foot>,
    nv: usize,
    n: usize,
    /// μ and √μ at the wall velocity of each wall foot (0 for inside feet)
    wall_mu: Vec<f64>,
    wall_sqrt_mu: Vec<f64>,
}

impl SlTransport {
    fn new(vgrid: &VelocityGrid, sgrid: &SpatialGrid, alpha: f64, dt: f64) -> Self {
        let ny = sgrid.len();
        let nv = vgrid.len();
        let n = vgrid.n_per_axis();
        let h = vgrid.spacing();
        let dy = sgrid.dy();
        let ys = sgrid.nodes();
        let mut feet = Vec::with_capacity(ny * nv);
        let mut wall_mu = vec![0.0; ny * nv];
        let mut wall_sqrt_mu = vec![0.0; ny * nv];
        for (j, &y) in ys.iter().enumerate() {
            for (k, v) in vgrid.nodes().iter().enumerate() {
                let ys_ = y - v[1] * dt;
                let foot = if (-1.0..=1.0).contains(&ys_) {
                    let p = ((ys_ + 1.0) / dy).clamp(0.0, (ny - 1) as f64);
                    let mut j0 = p.floor() as usize;
                    if j0 >= ny - 1 {
                        j0 = ny - 2;
                    }
                    let a = p - j0 as f64;
                    let ix = vgrid.coords(k)[0] as f64;
                    let px = ix + alpha * dt * v[1] / h;
                    let x0 = px.floor();
                    Foot::Inside { j0, a, x0: x0 as isize, b: px - x0 }
                } else {
                    let (wall, yw) = if v[1] > 0.0 { (0, -1.0) } else { (1, 1.0) };
                    let tau = (y - yw) / v[1];
                    let vw = [v[0] + alpha * tau * v[1], v[1], v[2]];
                    let m = maxwellian(vw);
                    wall_mu[j * nv + k] = m;
                    wall_sqrt_mu[j * nv + k] = m.sqrt();
                    Foot::Wall { wall }
                };
                feet.push(foot);
            }
        }
        Self { feet, nv, n, wall_mu, wall_sqrt_mu }
    }

    /// Interpolated values at inside feet, zero at wall feet.
    fn interior(&self, src: &Field) -> Field {
        let nv = self.nv;
        let plane = self.n * self.n;
        let n = self.n as isize;
        let mut out = Field::zeros(src.repr, src.n_y, nv);
        for (i, foot) in self.feet.iter().enumerate() {
            if let Foot::Inside { j0, a, x0, b } = *foot {
                let k = i % nv;
                let r = k % plane;
                let at = |jj: usize, xx: isize| -> f64 {
                    if xx < 0 || xx >= n {
                        0.0
                    } else {
                        src.data[jj * nv + xx as usize * plane + r]
                    }
                };
                let lo = (1.0 - b) * at(j0, x0) + b * at(j0, x0 + 1);
                let hi = (1.0 - b) * at(j0 + 1, x0) + b * at(j0 + 1, x0 + 1);
                out.data[i] = (1.0 - a) * lo + a * hi;
            }
        }
        out
    }

    /// Transport of one component whose wall distribution is C_w times `wall_shape`
    /// and whose physical mass density is `mass_factor`·value. Mass lost through each
    /// wall is re-injected there, so Σ W w mass_factor·value is conserved.
    fn step(
        &self,
        vgrid: &VelocityGrid,
        sgrid: &SpatialGrid,
        src: &Field,
        mass_factor: &[f64],
        wall_shape: &[f64],
        dt: f64,
    ) -> Field {
        let nv = self.nv;
        let ny = src.n_y;
        let w = vgrid.weight();
        let wy = sgrid.weights();
        let mass = |f: &Field| -> f64 {
            (0..ny)
                .map(|j| wy[j] * w * f.row(j).iter().zip(mass_factor).map(|(x, m)| x * m).sum::<f64>())
                .sum()
        };
        let mut out = self.interior(src);
        let lost = mass(src) - mass(&out);
        // split the loss between walls by their outgoing fluxes at step start
        let mut est = [0.0; 2];
        for (wi, j) in [(0usize, 0usize), (1, ny - 1)] {
            let row = src.row(j);
            est[wi] = dt
                * vgrid
                    .nodes()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| if wi == 0 { v[1] < 0.0 } else { v[1] > 0.0 })
                    .map(|(k, v)| w * v[1].abs() * row[k] * mass_factor[k])
                    .sum::<f64>();
        }
        let tot = est[0] + est[1];
        let share = if tot.abs() > 1e-300 { [est[0] / tot, est[1] / tot] } else { [0.5, 0.5] };
        let mut inject = [0.0; 2];
        for (i, foot) in self.feet.iter().enumerate() {
            if let Foot::Wall { wall, .. } = *foot {
                let j = i / nv;
                let k = i % nv;
                inject[wall] += wy[j] * w * wall_shape[i] * mass_factor[k];
            }
        }
        let c = [share[0] * lost / inject[0], share[1] * lost / inject[1]];
        for (i, foot) in self.feet.iter().enumerate() {
            if let Foot::Wall { wall, .. } = *foot {
                out.data[i] = c[wall] * wall_shape[i];
            }
        }
        out
    }
}

/// Time integrator bound to one background state and grid.
pub struct Stepper<'a> {
    pub vgrid: &'a VelocityGrid,
    pub sgrid: &'a SpatialGrid,
    pub ops: &'a CollisionOperators,
    pub alpha: f64,
    /// F_st (absolute).
    pub f_st: Field,
    /// g = (F_st − μ)/√μ
    g: Field,
    /// P₁Γ(g, g)
    gg: Field,
    pub opts: UnsteadyOptions,
    sl: SlTransport,
    ones: Vec<f64>,
    half_growth: Vec<f64>,
    /// μ at the wall velocity of every wall-hitting backtrace, zero elsewhere
    wall_pattern: Field,
    wall_mass: f64,
}

impl<'a> Stepper<'a> {
    /// `g` is the steady perturbation (F_st − μ)/√μ; zeros give F_st = μ.
    pub fn new(
        vgrid: &'a VelocityGrid,
        sgrid: &'a SpatialGrid,
        ops: &'a CollisionOperators,
        alpha: f64,
        g: Field,
        opts: UnsteadyOptions,
    ) -> Result<Self> {
        g.expect(Repr::Perturbation)?;
        if !(opts.dt > 0.0) || !(opts.t_end >= 0.0) || opts.record_every == 0 {
            return Err(Error::Param("dt must be positive, t_end nonnegative, record_every at least 1".into()));
        }
        let vy_max = vgrid.nodes().iter().map(|v| v[1].abs()).fold(0.0, f64::max);
        let limit = opts.cfl * sgrid.dy() / vy_max;
        if opts.dt > limit {
            return Err(Error::Cfl { dt: opts.dt, limit });
        }
        let nv = vgrid.len();
        let gg = ops.gamma_conservative(&g)?;
        let mut f_st = Field::zeros(Repr::Absolute, g.n_y, nv);
        for j in 0..g.n_y {
            for k in 0..nv {
                f_st.data[j * nv + k] = ops.mu[k] + ops.sqrt_mu[k] * g.at(j, k);
            }
        }
        let half_growth = vgrid
            .nodes()
            .iter()
            .zip(&ops.sqrt_mu)
            .map(|(v, s)| 0.5 * alpha * s * v[0] * v[1])
            .collect();
        let sl = SlTransport::new(vgrid, sgrid, alpha, opts.dt);
        let wall_pattern = Field { repr: Repr::CaflischRaw, n_y: g.n_y, n_v: nv, data: sl.wall_mu.clone() };
        let wy = sgrid.weights();
        let wall_mass = (0..g.n_y).map(|j| wy[j] * vgrid.weight() * wall_pattern.row(j).iter().sum::<f64>()).sum();
        Ok(Self {
            vgrid,
            sgrid,
            ops,
            alpha,
            f_st,
            g,
            gg,
            sl,
            wall_pattern,
            wall_mass,
            opts,
            ones: vec![1.0; nv],
            half_growth,
        })
    }

    pub fn initial_state(&self, scheme: Scheme, f0: &Field) -> Result<UnsteadyState> {
        f0.expect(Repr::Perturbation)?;
        let (f, f2) = match scheme {
            Scheme::Direct => (f0.clone(), None),
            Scheme::Caflisch => {
                let mut f1 = f0.clone();
                f1.repr = Repr::CaflischRaw;
                for j in 0..f1.n_y {
                    for (x, s) in f1.row_mut(j).iter_mut().zip(&self.ops.sqrt_mu) {
                        *x *= s;
                    }
                }
                (f1, Some(Field::zeros(Repr::Perturbation, f0.n_y, f0.n_v)))
            }
        };
        let mut st = UnsteadyState { scheme, t: 0.0, f, f2, history: vec![], steps: 0 };
        st.history.push(self.record(&st));
        Ok(st)
    }

    /// P₁[Γ(f,f) + Γ(g,f) + Γ(f,g)] by bilinearity from one evaluation at f + g.
    fn gamma_terms(&self, f: &Field) -> Result<Field> {
        let mut u = f.clone();
        u.axpy(1.0, &self.g);
        let mut out = self.ops.gamma_conservative(&u)?;
        out.axpy(-1.0, &self.gg);
        Ok(out)
    }

    /// Nonstiff collision part for the direct scheme.
    fn n_direct(&self, f: &Field) -> Result<Field> {
        let mut out = self.ops.apply_k(f);
        out.axpy(1.0, &self.gamma_terms(f)?);
        Ok(out)
    }

    /// Nonstiff collision parts (N₁, N₂) for the split scheme.
    fn n_split(&self, f1: &Field, f2: &Field) -> Result<(Field, Field)> {
        let sm = &self.ops.sqrt_mu;
        let chi = &self.ops.chi;
        let nv = f1.n_v;
        let mut f = f2.clone();
        for j in 0..f.n_y {
            for (k, x) in f.row_mut(j).iter_mut().enumerate() {
                *x += f1.at(j, k) / sm[k];
            }
        }
        let gam = self.gamma_terms(&f)?;
        let kf1 = self.ops.apply_kcal(f1);
        let mut n1 = Field::zeros(Repr::CaflischRaw, f1.n_y, nv);
        let mut n2 = self.ops.apply_k(f2);
        for j in 0..f1.n_y {
            for k in 0..nv {
                let i = j * nv + k;
                n1.data[i] = chi[k] * kf1.data[i] - self.half_growth[k] * f2.data[i] + sm[k] * gam.data[i];
                n2.data[i] += (1.0 - chi[k]) * kf1.data[i] / sm[k];
            }
        }
        Ok((n1, n2))
    }

    /// One exponential step of length τ for x' = −ν₀x + N(x) on a list of components.
    fn exp_step(&self, xs: Vec<Field>, tau: f64, n: impl Fn(&[Field]) -> Result<Vec<Field>>) -> Result<Vec<Field>> {
        let nu = self.ops.nu0;
        let e = (-nu * tau).exp();
        let phi1 = -(-nu * tau).exp_m1() / nu;
        let n0 = n(&xs)?;
        let mut a: Vec<Field> = xs
            .iter()
            .zip(&n0)
            .map(|(x, nx)| {
                let mut y = x.clone();
                y.scale(e);
                y.axpy(phi1, nx);
                y
            })
            .collect();
        if self.opts.integrator == Integrator::Etd2 {
            // (e^{−ν₀τ} − 1 + ν₀τ)/(ν₀²τ), written to avoid cancellation
            let x = nu * tau;
            let phi2 = if x > 1e-4 {
                ((-x).exp_m1() + x) / (nu * nu * tau)
            } else {
                tau * (0.5 - x / 6.0 + x * x / 24.0)
            };
            let na = n(&a)?;
            for ((y, nb), n0) in a.iter_mut().zip(&na).zip(&n0) {
                y.axpy(phi2, nb);
                y.axpy(-phi2, n0);
            }
        }
        Ok(a)
    }

    /// Collision substep of length τ alone.
    pub fn collide(&self, st: &mut UnsteadyState, tau: f64) -> Result<()> {
        match st.scheme {
            Scheme::Direct => {
                let f = std::mem::replace(&mut st.f, Field::zeros(Repr::Perturbation, 0, 0));
                let out = self.exp_step(vec![f], tau, |x| Ok(vec![self.n_direct(&x[0])?]))?;
                st.f = out.into_iter().next().unwrap();
            }
            Scheme::Caflisch => {
                let f1 = std::mem::replace(&mut st.f, Field::zeros(Repr::CaflischRaw, 0, 0));
                let f2 = st.f2.take().expect("caflisch state carries f2");
                let out = self.exp_step(vec![f1, f2], tau, |x| {
                    let (a, b) = self.n_split(&x[0], &x[1])?;
                    Ok(vec![a, b])
                })?;
                let mut it = out.into_iter();
                st.f = it.next().unwrap();
                st.f2 = it.next();
            }
        }
        Ok(())
    }

    fn transport(&self, st: &mut UnsteadyState) {
        let dt = self.opts.dt;
        let sm = &self.ops.sqrt_mu;
        match st.scheme {
            Scheme::Direct => {
                // move u = √μ f with the absolute wall Maxwellian
                let mut u = st.f.clone();
                for j in 0..u.n_y {
                    for (x, s) in u.row_mut(j).iter_mut().zip(sm) {
                        *x *= s;
                    }
                }
                let mut out = self.sl.step(self.vgrid, self.sgrid, &u, &self.ones, &self.sl.wall_mu, dt);
                for j in 0..out.n_y {
                    for (x, s) in out.row_mut(j).iter_mut().zip(sm) {
                        *x /= s;
                    }
                }
                out.repr = Repr::Perturbation;
                st.f = out;
            }
            Scheme::Caflisch => {
                st.f = self.sl.step(self.vgrid, self.sgrid, &st.f, &self.ones, &self.sl.wall_mu, dt);
                let f2 = st.f2.as_ref().unwrap();
                st.f2 = Some(self.sl.step(self.vgrid, self.sgrid, f2, sm, &self.sl.wall_sqrt_mu, dt));
            }
        }
    }

    /// One Strang step C(dt/2) T(dt) C(dt/2).
    pub fn step(&self, st: &mut UnsteadyState) -> Result<()> {
        let dt = self.opts.dt;
        let m0 = self.deviation_mass(st);
        self.collide(st, 0.5 * dt)?;
        self.transport(st);
        self.collide(st, 0.5 * dt)?;
        if st.scheme == Scheme::Caflisch {
            // The growth term carries mass out of f₁ that the f₂ shift returns only up
            // to interpolation error; put the mismatch back at the incoming wall nodes.
            let c = (m0 - self.deviation_mass(st)) / self.wall_mass;
            st.f.axpy(c, &self.wall_pattern);
        }
        st.t += dt;
        st.steps += 1;
        let finite = st.f.is_finite() && st.f2.as_ref().is_none_or(|f| f.is_finite());
        if !finite {
            return Err(Error::NonFinite { t: st.t });
        }
        Ok(())
    }

    fn deviation_mass(&self, st: &UnsteadyState) -> f64 {
        let u = st.deviation(&self.ops.sqrt_mu);
        let w = self.vgrid.weight();
        let wy = self.sgrid.weights();
        (0..u.n_y).map(|j| wy[j] * w * u.row(j).iter().sum::<f64>()).sum()
    }

    pub fn record(&self, st: &UnsteadyState) -> Record {
        let u = st.deviation(&self.ops.sqrt_mu);
        let w = self.vgrid.weight();
        let wy = self.sgrid.weights();
        let wq: Vec<f64> = self.vgrid.nodes().iter().map(|v| weight_q(*v, self.opts.q)).collect();
        let nv = u.n_v;
        let (mut sup, mut l2, mut mass, mut min_f) = (0.0f64, 0.0, 0.0, f64::INFINITY);
        for j in 0..u.n_y {
            for k in 0..nv {
                let x = u.data[j * nv + k];
                let big_f = self.f_st.data[j * nv + k] + x;
                sup = sup.max(wq[k] * x.abs());
                l2 += wy[j] * w * x * x;
                mass += wy[j] * w * big_f;
                min_f = min_f.min(big_f);
            }
        }
        Record { t: st.t, sup_norm: sup, l2_norm: l2.sqrt(), mass, min_f }
    }

    /// Steps to t_end, recording every `record_every` steps.
    pub fn run(&self, mut st: UnsteadyState) -> Result<UnsteadyState> {
        let n_steps = (self.opts.t_end / self.opts.dt).round() as usize;
        let initial = st.history.first().map(|r| r.sup_norm).unwrap_or(0.0);
        for s in 1..=n_steps {
            self.step(&mut st)?;
            if s % self.opts.record_every == 0 || s == n_steps {
                let r = self.record(&st);
                if initial > 0.0 && r.sup_norm > self.opts.max_growth * initial {
                    return Err(Error::Instability { t: st.t, ratio: r.sup_norm / initial });
                }
                st.history.push(r);
            }
        }
        Ok(st)
    }

    /// Absolute F₀ → perturbation f₀ with its mass defect against F_st removed as a
    /// multiple of μ; returns (f₀, removed coefficient).
    pub fn initial_perturbation(&self, f0_abs: &Field) -> Result<(Field, f64)> {
        f0_abs.expect(Repr::Absolute)?;
        let w = self.vgrid.weight();
        let wy = self.sgrid.weights();
        let nv = f0_abs.n_v;
        let (mut defect, mut mu_mass) = (0.0, 0.0);
        for j in 0..f0_abs.n_y {
            for k in 0..nv {
                defect += wy[j] * w * (f0_abs.at(j, k) - self.f_st.at(j, k));
                mu_mass += wy[j] * w * self.ops.mu[k];
            }
        }
        let c = defect / mu_mass;
        let f = Field::from_fn(Repr::Perturbation, f0_abs.n_y, nv, |j, k| {
            (f0_abs.at(j, k) - self.f_st.at(j, k) - c * self.ops.mu[k]) / self.ops.sqrt_mu[k]
        });
        Ok((f, c))
    }

    /// Direct scheme from F₀ to t_end with the decay fit on the sup norm.
    pub fn run_to_steady(&self, f0_abs: &Field) -> Result<(UnsteadyState, DecayFit)> {
        let (f0, _) = self.initial_perturbation(f0_abs)?;
        let st = self.run(self.initial_state(Scheme::Direct, &f0)?)?;
        let series: Vec<(f64, f64)> = st.history.iter().map(|r| (r.t, r.sup_norm)).collect();
        let fit = decay_fit_window(&series, self.opts.fit_fraction)?;
        Ok((st, fit))
    }

    /// Split scheme from the perturbation f₀ to t_end.
    pub fn run_caflisch(&self, f0: &Field) -> Result<UnsteadyState> {
        self.run(self.initial_state(Scheme::Caflisch, f0)?)
    }
}
