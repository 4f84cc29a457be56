//! Maxwell-molecule collision operator: Q, Γ, L = ν₀ − K, 𝓛 = ν₀ − 𝒦, cutoff χ_M,
//! macroscopic projections and numerical bound checks.

pub mod checks;
pub(crate) mod lattice;
pub mod projection;
pub mod sphere;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{Field, Repr};
use crate::grid::{weight_q, ReferenceTables, VelocityGrid};
use lattice::{Lattice, OffGrid};
pub use projection::{octant_sum, MacroProjection, Projector};
pub use sphere::CollisionKernelSpec;

/// Matrix-free collision integrals on one velocity grid.
#[derive(Debug, Clone)]
pub struct Collider {
    grid: VelocityGrid,
    spec: CollisionKernelSpec,
    lattice: Lattice,
    mu: Vec<f64>,
    sqrt_mu: Vec<f64>,
    s_b: f64,
}

/// Interleaves the rows of a field into node-major, batch-minor order.
fn to_batch(f: &Field) -> Vec<f64> {
    let (ny, nv) = (f.n_y, f.n_v);
    let mut out = vec![0.0; ny * nv];
    for j in 0..ny {
        for k in 0..nv {
            out[k * ny + j] = f.data[j * nv + k];
        }
    }
    out
}

fn from_batch(b: &[f64], repr: Repr, ny: usize, nv: usize) -> Field {
    Field::from_fn(repr, ny, nv, |j, k| b[k * ny + j])
}

impl Collider {
    pub fn new(grid: &VelocityGrid, spec: &CollisionKernelSpec) -> Self {
        let t = ReferenceTables::new(grid, 0).expect("q = 0 never overflows");
        let rule = spec.half_rule();
        let s_b = rule.total();
        Self {
            grid: grid.clone(),
            spec: *spec,
            lattice: Lattice::new(grid, rule),
            mu: t.mu,
            sqrt_mu: t.sqrt_mu,
            s_b,
        }
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }

    pub fn spec(&self) -> &CollisionKernelSpec {
        &self.spec
    }

    /// ∫ B₀ dω as realized by the sphere rule.
    pub fn kernel_total(&self) -> f64 {
        self.s_b
    }

    /// ν(v_i) = Σ_k w μ_k Σ_ω W, evaluated separately at every node.
    pub fn nu_per_node(&self) -> Vec<f64> {
        let w = self.grid.weight();
        (0..self.grid.len())
            .map(|_| {
                let mut s = 0.0;
                for m in &self.mu {
                    s += w * m * self.s_b;
                }
                s
            })
            .collect()
    }

    pub fn exit_fraction(&self) -> f64 {
        self.lattice.exit_fraction()
    }

    fn gain_weighted(&self, f1: &[f64], f2: Option<&[f64]>, m: &[f64], nb: usize) -> Vec<f64> {
        let nv = self.grid.len();
        let div = |f: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; f.len()];
            for k in 0..nv {
                for j in 0..nb {
                    out[k * nb + j] = f[k * nb + j] / m[k];
                }
            }
            out
        };
        let a = self.lattice.pad_batch(&div(f1), nb);
        let b = f2.map(|f| self.lattice.pad_batch(&div(f), nb));
        let mut g = self.lattice.bilinear_gain(&a, b.as_deref(), m, nb);
        let w = self.grid.weight();
        for k in 0..nv {
            for j in 0..nb {
                g[k * nb + j] *= w * m[k];
            }
        }
        g
    }

    fn loss(&self, f1: &[f64], f2: &[f64], nb: usize, out: &mut [f64]) {
        let nv = self.grid.len();
        let w = self.grid.weight();
        let mut mass = vec![0.0; nb];
        for k in 0..nv {
            for j in 0..nb {
                mass[j] += w * f1[k * nb + j];
            }
        }
        for k in 0..nv {
            for j in 0..nb {
                out[k * nb + j] -= self.s_b * mass[j] * f2[k * nb + j];
            }
        }
    }

    /// Q(F₁, F₂) for absolute densities given as single velocity vectors.
    ///
    /// Gain terms interpolate F/μ and use μ(v')μ(v'_*) = μ(v)μ(v_*), so Q(μ,μ)
    /// vanishes up to the mass lost through the truncation boundary.
    pub fn apply_q(&self, f1: &[f64], f2: &[f64]) -> Vec<f64> {
        let same = std::ptr::eq(f1, f2) || f1 == f2;
        let mut out = self.gain_weighted(f1, if same { None } else { Some(f2) }, &self.mu, 1);
        self.loss(f1, f2, 1, &mut out);
        out
    }

    /// Q(F₁, F₂) with the gain interpolating F/M for a Maxwellian reference M
    /// (any density, drift and temperature), using M(v')M(v'_*) = M(v)M(v_*).
    pub fn apply_q_ref(&self, f1: &[f64], f2: &[f64], m: &[f64]) -> Vec<f64> {
        let same = std::ptr::eq(f1, f2) || f1 == f2;
        let mut out = self.gain_weighted(f1, if same { None } else { Some(f2) }, m, 1);
        self.loss(f1, f2, 1, &mut out);
        out
    }

    /// Q(F, F) referenced to the local Maxwellian of F, so every grid Maxwellian is
    /// an exact equilibrium and the quadrature error scales with F − M.
    pub fn apply_q_local(&self, f: &[f64]) -> Result<Vec<f64>> {
        let m = local_maxwellian(&self.grid, f)?;
        Ok(self.apply_q_ref(f, f, &m))
    }

    /// Locally referenced Q(F, F) minus the multiple M(a + b·v + c|v|²) that cancels
    /// its five discrete moments; the correction is the quadrature defect itself.
    pub fn apply_q_conservative(&self, f: &[f64]) -> Result<Vec<f64>> {
        let m = local_maxwellian(&self.grid, f)?;
        let mut q = self.apply_q_ref(f, f, &m);
        let w = self.grid.weight();
        let phi = |v: &[f64; 3]| [1.0, v[0], v[1], v[2], v[0] * v[0] + v[1] * v[1] + v[2] * v[2]];
        let mut gram = [[0.0; 5]; 5];
        let mut rhs = [0.0; 5];
        for ((v, mk), qk) in self.grid.nodes().iter().zip(&m).zip(&q) {
            let p = phi(v);
            for a in 0..5 {
                rhs[a] += w * qk * p[a];
                for b in 0..5 {
                    gram[a][b] += w * mk * p[a] * p[b];
                }
            }
        }
        let c = projection::solve5(gram, rhs);
        for ((v, mk), qk) in self.grid.nodes().iter().zip(&m).zip(q.iter_mut()) {
            let p = phi(v);
            *qk -= mk * (0..5).map(|a| c[a] * p[a]).sum::<f64>();
        }
        Ok(q)
    }

    /// Q(F₁, F₂) at every spatial node of two absolute fields.
    pub fn apply_q_field(&self, f1: &Field, f2: &Field) -> Result<Field> {
        f1.expect(Repr::Absolute)?;
        f2.expect(Repr::Absolute)?;
        f1.same_shape(f2)?;
        let nb = f1.n_y;
        let a = to_batch(f1);
        let b = to_batch(f2);
        let same = f1.data == f2.data;
        let mut out = self.gain_weighted(&a, if same { None } else { Some(&b) }, &self.mu, nb);
        self.loss(&a, &b, nb, &mut out);
        Ok(from_batch(&out, Repr::Absolute, nb, f1.n_v))
    }

    /// Γ(f, g) with gain interpolating f/√μ and g/√μ, i.e. the ratios of √μf, √μg to μ.
    fn gamma_batch(&self, f: &[f64], g: Option<&[f64]>, nb: usize) -> Vec<f64> {
        let nv = self.grid.len();
        let ratio = |x: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            for k in 0..nv {
                for j in 0..nb {
                    out[k * nb + j] = x[k * nb + j] / self.sqrt_mu[k];
                }
            }
            out
        };
        let a = self.lattice.pad_batch(&ratio(f), nb);
        let b = g.map(|g| self.lattice.pad_batch(&ratio(g), nb));
        let mut out = self.lattice.bilinear_gain(&a, b.as_deref(), &self.mu, nb);
        let w = self.grid.weight();
        for k in 0..nv {
            for j in 0..nb {
                out[k * nb + j] *= w * self.sqrt_mu[k];
            }
        }
        let mut mass = vec![0.0; nb];
        for k in 0..nv {
            for j in 0..nb {
                mass[j] += w * self.sqrt_mu[k] * f[k * nb + j];
            }
        }
        let gg = g.unwrap_or(f);
        for k in 0..nv {
            for j in 0..nb {
                out[k * nb + j] -= self.s_b * mass[j] * gg[k * nb + j];
            }
        }
        out
    }

    /// Γ(f, g) = μ^{-1/2} Q(√μ f, √μ g) on perturbation fields.
    pub fn gamma_single(&self, f: &Field, g: &Field) -> Result<Field> {
        f.expect(Repr::Perturbation)?;
        g.expect(Repr::Perturbation)?;
        f.same_shape(g)?;
        let nb = f.n_y;
        let a = to_batch(f);
        let out = if f.data == g.data {
            self.gamma_batch(&a, None, nb)
        } else {
            let b = to_batch(g);
            self.gamma_batch(&a, Some(&b), nb)
        };
        Ok(from_batch(&out, Repr::Perturbation, nb, f.n_v))
    }

    /// Γ(f, g) + Γ(g, f).
    pub fn gamma_sym(&self, f: &Field, g: &Field) -> Result<Field> {
        let mut a = self.gamma_single(f, g)?;
        let b = self.gamma_single(g, f)?;
        a.axpy(1.0, &b);
        Ok(a)
    }

    /// Raw K g without assembling the matrix (√μ at off-grid points exact, g trilinear).
    pub fn k_matrix_free(&self, g: &[f64]) -> Vec<f64> {
        self.linear_matrix_free(g, OffGrid::SqrtMu)
    }

    /// Raw K g for g with known parity under each sign flip (`true` = odd),
    /// evaluating one octant and mirroring the rest.
    pub fn k_matrix_free_with_parity(&self, g: &[f64], odd: [bool; 3]) -> Vec<f64> {
        let h: Vec<f64> = g.iter().zip(&self.sqrt_mu).map(|(a, p)| a / p).collect();
        let p = self.lattice.pad_batch(&h, 1);
        let gain = self.lattice.linear_gain_octant(&p, &self.mu);
        let w = self.grid.weight();
        let mass: f64 = octant_sum(&self.grid, |k| w * g[k] * self.sqrt_mu[k]);
        let n = self.grid.n_per_axis();
        let half = n / 2;
        let mut out = vec![0.0; g.len()];
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    let src = [ix, iy, iz].map(|c| if c >= half { c } else { n - 1 - c });
                    let mut sign = 1.0;
                    for a in 0..3 {
                        if odd[a] && [ix, iy, iz][a] < half {
                            sign = -sign;
                        }
                    }
                    let k = self.grid.index(src[0], src[1], src[2]);
                    let v = w * self.sqrt_mu[k] * gain[k] - self.s_b * mass * self.sqrt_mu[k];
                    out[self.grid.index(ix, iy, iz)] = sign * v;
                }
            }
        }
        out
    }

    /// Raw 𝒦 f built directly in absolute form.
    pub fn kcal_matrix_free(&self, f: &[f64]) -> Vec<f64> {
        self.linear_matrix_free(f, OffGrid::Mu)
    }

    fn linear_matrix_free(&self, g: &[f64], kind: OffGrid) -> Vec<f64> {
        // φ is the off-grid factor, m̃ the pair factor: K has (√μ, √μ), 𝒦 has (μ, 1)
        let (phi, pair): (&[f64], Option<&[f64]>) = match kind {
            OffGrid::SqrtMu => (&self.sqrt_mu, Some(&self.sqrt_mu)),
            OffGrid::Mu => (&self.mu, None),
        };
        let h: Vec<f64> = g.iter().zip(phi).map(|(a, p)| a / p).collect();
        let p = self.lattice.pad_batch(&h, 1);
        // m̃_k φ_k = μ_k in both cases
        let mut out = self.lattice.linear_gain(&p, &self.mu, 1);
        let w = self.grid.weight();
        let mass: f64 = match pair {
            Some(m) => g.iter().zip(m).map(|(a, b)| w * a * b).sum(),
            None => g.iter().map(|a| w * a).sum(),
        };
        for (k, x) in out.iter_mut().enumerate() {
            *x = w * phi[k] * *x - self.s_b * mass * phi[k];
        }
        out
    }

    /// Dense raw matrix of K (or of 𝒦 in absolute form), row-major.
    fn linear_matrix(&self, kind: OffGrid) -> Vec<f64> {
        let nv = self.grid.len();
        let ones = vec![1.0; nv];
        let (m, lw) = match kind {
            OffGrid::SqrtMu => (&self.sqrt_mu, &self.sqrt_mu),
            OffGrid::Mu => (&ones, &self.mu),
        };
        let mut mat = self.lattice.linear_gain_matrix(m, kind);
        let w = self.grid.weight();
        mat.par_chunks_mut(nv).enumerate().for_each(|(i, row)| {
            for (j, x) in row.iter_mut().enumerate() {
                *x = w * *x - self.s_b * w * lw[i] * m[j];
            }
        });
        mat
    }
}

/// Smooth monotone step: 0 for x ≤ 0, 1 for x ≥ 1, C^∞ in between.
pub fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / x).exp();
        let b = (-1.0 / (1.0 - x)).exp();
        a / (a + b)
    }
}

/// χ_M(v): 0 for |v| ≤ M, 1 for |v| ≥ M + 1.
pub fn chi_m(v: [f64; 3], m: f64) -> f64 {
    smooth_step((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - m)
}

/// Options controlling assembly acceptance.
#[derive(Debug, Clone, Copy)]
pub struct AssemblyOptions {
    /// Largest tolerated √μ-weighted fraction of stencil weight outside the grid.
    pub max_exit_fraction: f64,
    /// Largest tolerated relative spread of the per-node collision frequency.
    pub max_nu_spread: f64,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            max_exit_fraction: 1e-3,
            max_nu_spread: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AssemblyReport {
    pub nu0: f64,
    pub nu_spread: f64,
    pub b0: f64,
    pub exit_fraction: f64,
    /// max |K − Kᵀ| / max |K| before symmetrization.
    pub raw_asymmetry: f64,
    /// max |K_h − K_hᵀ| of the matrix actually used.
    pub asymmetry: f64,
    pub kernel_total: f64,
}

/// Assembled linear operators plus the matrix-free nonlinear evaluators.
#[derive(Debug, Clone)]
pub struct CollisionOperators {
    pub nu0: f64,
    pub b0: f64,
    pub m_cut: f64,
    /// χ_M at every node.
    pub chi: Vec<f64>,
    /// Symmetric K with exact null space span{1, v, |v|²−3}√μ (row-major).
    pub k_matrix: Vec<f64>,
    pub report: AssemblyReport,
    pub collider: Collider,
    pub projector: Projector,
    pub mu: Vec<f64>,
    pub sqrt_mu: Vec<f64>,
    nv: usize,
}

/// Maxwellian with the discrete density, drift and temperature of F.
pub fn local_maxwellian(grid: &VelocityGrid, f: &[f64]) -> Result<Vec<f64>> {
    let w = grid.weight();
    let nodes = grid.nodes();
    let rho: f64 = f.iter().map(|x| w * x).sum();
    if !(rho > 0.0) {
        return Err(Error::Param(format!("density {rho} is not positive")));
    }
    let u: [f64; 3] = std::array::from_fn(|a| nodes.iter().zip(f).map(|(v, x)| w * x * v[a]).sum::<f64>() / rho);
    let temp = nodes
        .iter()
        .zip(f)
        .map(|(v, x)| w * x * (0..3).map(|a| (v[a] - u[a]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (3.0 * rho);
    if !(temp > 0.0) {
        return Err(Error::Param(format!("temperature {temp} is not positive")));
    }
    let norm = rho / (2.0 * std::f64::consts::PI * temp).powf(1.5);
    Ok(nodes
        .iter()
        .map(|v| norm * (-(0..3).map(|a| (v[a] - u[a]).powi(2)).sum::<f64>() / (2.0 * temp)).exp())
        .collect())
}

/// Raw K from a cache or by assembly.
pub fn assemble_raw_k(collider: &Collider) -> Vec<f64> {
    collider.linear_matrix(OffGrid::SqrtMu)
}

/// Raw absolute 𝒦, safe on wide grids where μ underflows.
pub fn assemble_raw_kcal(collider: &Collider) -> Vec<f64> {
    collider.linear_matrix(OffGrid::Mu)
}

pub fn assemble_operators(
    grid: &VelocityGrid,
    tables: &ReferenceTables,
    spec: &CollisionKernelSpec,
    m_cut: f64,
) -> Result<CollisionOperators> {
    CollisionOperators::assemble(grid, tables, spec, m_cut, AssemblyOptions::default(), None)
}

impl CollisionOperators {
    /// Builds the operators, reusing `raw_k` when given (for instance from the disk cache).
    pub fn assemble(
        grid: &VelocityGrid,
        tables: &ReferenceTables,
        spec: &CollisionKernelSpec,
        m_cut: f64,
        opts: AssemblyOptions,
        raw_k: Option<Vec<f64>>,
    ) -> Result<Self> {
        if !(m_cut < grid.v_max()) {
            return Err(Error::TailOutsideTruncation {
                m: m_cut,
                v_max: grid.v_max(),
            });
        }
        let collider = Collider::new(grid, spec);
        let nv = grid.len();
        let nu = collider.nu_per_node();
        let nu0 = nu[0];
        let nu_spread = nu.iter().map(|x| (x - nu0).abs()).fold(0.0, f64::max) / nu0;
        if nu_spread > opts.max_nu_spread {
            return Err(Error::Assembly(format!(
                "collision frequency varies by {nu_spread:.3e} across nodes"
            )));
        }
        let exit_fraction = collider.exit_fraction();
        if exit_fraction > opts.max_exit_fraction {
            return Err(Error::Assembly(format!(
                "{exit_fraction:.3e} of post-collision stencil weight leaves the grid (limit {:.1e}); increase v_max",
                opts.max_exit_fraction
            )));
        }
        let raw = match raw_k {
            Some(k) if k.len() == nv * nv => k,
            Some(_) => return Err(Error::Cache("cached matrix has the wrong size".into())),
            None => assemble_raw_k(&collider),
        };
        let kmax = raw.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut asym = 0.0f64;
        for i in 0..nv {
            for j in 0..i {
                asym = asym.max((raw[i * nv + j] - raw[j * nv + i]).abs());
            }
        }
        let raw_asymmetry = asym / kmax;

        let projector = Projector::new(grid, &tables.sqrt_mu);
        let k_matrix = project_kernel(&raw, &projector, nu0, grid.weight(), nv);
        let mut asymmetry = 0.0f64;
        for i in 0..nv {
            for j in 0..i {
                asymmetry = asymmetry.max((k_matrix[i * nv + j] - k_matrix[j * nv + i]).abs());
            }
        }
        let chi = grid.nodes().iter().map(|v| chi_m(*v, m_cut)).collect();
        let b0 = spec.b0();
        Ok(Self {
            nu0,
            b0,
            m_cut,
            chi,
            k_matrix,
            report: AssemblyReport {
                nu0,
                nu_spread,
                b0,
                exit_fraction,
                raw_asymmetry,
                asymmetry,
                kernel_total: collider.kernel_total(),
            },
            collider,
            projector,
            mu: tables.mu.clone(),
            sqrt_mu: tables.sqrt_mu.clone(),
            nv,
        })
    }

    pub fn n_v(&self) -> usize {
        self.nv
    }

    pub fn grid(&self) -> &VelocityGrid {
        self.collider.grid()
    }

    /// K g for one velocity vector.
    pub fn apply_k_vec(&self, g: &[f64]) -> Vec<f64> {
        let nv = self.nv;
        self.k_matrix
            .par_chunks(nv)
            .map(|row| row.iter().zip(g).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// 𝒦 f = √μ K(f/√μ).
    pub fn apply_kcal_vec(&self, f: &[f64]) -> Vec<f64> {
        let g: Vec<f64> = f.iter().zip(&self.sqrt_mu).map(|(a, s)| a / s).collect();
        let mut out = self.apply_k_vec(&g);
        out.iter_mut().zip(&self.sqrt_mu).for_each(|(x, s)| *x *= s);
        out
    }

    /// K applied at every spatial node.
    pub fn apply_k(&self, g: &Field) -> Field {
        let nv = self.nv;
        let ny = g.n_y;
        let b = to_batch(g);
        let mut out = vec![0.0; nv * ny];
        out.par_chunks_mut(ny).enumerate().for_each(|(i, o)| {
            let row = &self.k_matrix[i * nv..(i + 1) * nv];
            for (k, kv) in row.iter().enumerate() {
                let src = &b[k * ny..(k + 1) * ny];
                for j in 0..ny {
                    o[j] += kv * src[j];
                }
            }
        });
        from_batch(&out, g.repr, ny, nv)
    }

    /// 𝒦 applied at every spatial node (any representation tag is passed through).
    pub fn apply_kcal(&self, f: &Field) -> Field {
        let mut g = f.clone();
        for j in 0..g.n_y {
            for (x, s) in g.row_mut(j).iter_mut().zip(&self.sqrt_mu) {
                *x /= s;
            }
        }
        let mut out = self.apply_k(&g);
        for j in 0..out.n_y {
            for (x, s) in out.row_mut(j).iter_mut().zip(&self.sqrt_mu) {
                *x *= s;
            }
        }
        out
    }

    /// L f = ν₀ f − K f.
    pub fn apply_l(&self, f: &Field) -> Result<Field> {
        f.expect(Repr::Perturbation)?;
        let mut out = self.apply_k(f);
        for (o, x) in out.data.iter_mut().zip(&f.data) {
            *o = self.nu0 * x - *o;
        }
        Ok(out)
    }

    pub fn gamma_single(&self, f: &Field, g: &Field) -> Result<Field> {
        self.collider.gamma_single(f, g)
    }

    pub fn gamma_sym(&self, f: &Field, g: &Field) -> Result<Field> {
        self.collider.gamma_sym(f, g)
    }

    /// Γ(f, f) with its invariant moments removed, so √μ times it conserves
    /// mass, momentum and energy exactly under the grid quadrature.
    pub fn gamma_conservative(&self, f: &Field) -> Result<Field> {
        let mut g = self.collider.gamma_single(f, f)?;
        for j in 0..g.n_y {
            self.projector.p1_in_place(g.row_mut(j));
        }
        Ok(g)
    }

    /// Dense 𝒦 = D K D⁻¹ with D = diag √μ.
    pub fn kcal_matrix(&self) -> Vec<f64> {
        let nv = self.nv;
        let mut m = self.k_matrix.clone();
        for i in 0..nv {
            for j in 0..nv {
                m[i * nv + j] *= self.sqrt_mu[i] / self.sqrt_mu[j];
            }
        }
        m
    }

    pub fn project_p0(&self, f: &Field) -> Result<MacroProjection> {
        self.projector.project_p0(f)
    }

    pub fn project_p1(&self, f: &Field) -> Result<Field> {
        self.projector.project_p1(f)
    }

    /// Weighted tail norm of 𝒦 from the conjugated matrix (see [`tail_norm`]).
    pub fn weighted_kcal_tail_norm(&self, q: u32) -> Result<f64> {
        tail_norm(&self.kcal_matrix(), self.grid(), q, self.m_cut)
    }
}

/// K_h = ν₀P₀ + P₁ K_s P₁ with K_s = (K + Kᵀ)/2, then mirrored to exact symmetry.
fn project_kernel(raw: &[f64], proj: &Projector, nu0: f64, w: f64, nv: usize) -> Vec<f64> {
    let mut k = vec![0.0; nv * nv];
    for i in 0..nv {
        for j in 0..nv {
            k[i * nv + j] = 0.5 * (raw[i * nv + j] + raw[j * nv + i]);
        }
    }
    // Q = G⁻¹ Eᵀ so that P₀ = w E Q
    let ginv: Vec<[f64; 5]> = (0..5)
        .map(|b| {
            let mut e = [0.0; 5];
            e[b] = 1.0;
            projection::solve5(*proj.gram(), e)
        })
        .collect();
    let e = |a: usize, i: usize| proj.basis(a)[i];
    // X = K E (nv × 5)
    let x: Vec<[f64; 5]> = (0..nv)
        .into_par_iter()
        .map(|i| {
            let row = &k[i * nv..(i + 1) * nv];
            std::array::from_fn(|a| row.iter().enumerate().map(|(j, v)| v * e(a, j)).sum())
        })
        .collect();
    // Y = X G⁻¹ w, so K P₀ = Y Eᵀ and P₀ K = E Yᵀ
    let y: Vec<[f64; 5]> = x
        .iter()
        .map(|xi| std::array::from_fn(|b| w * (0..5).map(|a| xi[a] * ginv[a][b]).sum::<f64>()))
        .collect();
    // EᵀKE and the core C = w² G⁻¹ EᵀKE G⁻¹ so that P₀KP₀ = E C Eᵀ
    let mut ete = [[0.0; 5]; 5];
    for a in 0..5 {
        for b in 0..5 {
            ete[a][b] = (0..nv).map(|i| e(a, i) * x[i][b]).sum();
        }
    }
    let mut core = [[0.0; 5]; 5];
    for a in 0..5 {
        for b in 0..5 {
            let mut s = 0.0;
            for c in 0..5 {
                for d in 0..5 {
                    s += ginv[a][c] * ete[c][d] * ginv[d][b];
                }
            }
            core[a][b] = w * w * s;
        }
    }
    // ν₀P₀ = ν₀ w E G⁻¹ Eᵀ
    k.par_chunks_mut(nv).enumerate().for_each(|(i, row)| {
        let ei: [f64; 5] = std::array::from_fn(|a| e(a, i));
        let ec: [f64; 5] = std::array::from_fn(|b| (0..5).map(|a| ei[a] * core[a][b]).sum());
        let eg: [f64; 5] = std::array::from_fn(|b| (0..5).map(|a| ei[a] * ginv[a][b]).sum());
        for (j, v) in row.iter_mut().enumerate() {
            let mut corr = 0.0;
            for a in 0..5 {
                let ej = e(a, j);
                corr += -y[i][a] * ej - ei[a] * y[j][a] + ec[a] * ej + nu0 * w * eg[a] * ej;
            }
            *v += corr;
        }
    });
    for i in 0..nv {
        for j in 0..i {
            let s = 0.5 * (k[i * nv + j] + k[j * nv + i]);
            k[i * nv + j] = s;
            k[j * nv + i] = s;
        }
    }
    k
}

/// sup over rows |v_i| ≥ M of w_q(v_i) Σ_j |A_ij| / w_q(v_j).
pub fn tail_norm(a: &[f64], grid: &VelocityGrid, q: u32, m_cut: f64) -> Result<f64> {
    if !(m_cut < grid.v_max()) {
        return Err(Error::TailOutsideTruncation {
            m: m_cut,
            v_max: grid.v_max(),
        });
    }
    let nv = grid.len();
    let wq: Vec<f64> = grid.nodes().iter().map(|v| weight_q(*v, q)).collect();
    let nodes = grid.nodes();
    let best = (0..nv)
        .into_par_iter()
        .filter(|&i| {
            let v = nodes[i];
            (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() >= m_cut
        })
        .map(|i| {
            let row = &a[i * nv..(i + 1) * nv];
            wq[i] * row.iter().zip(&wq).map(|(x, w)| x.abs() / w).sum::<f64>()
        })
        .reduce(|| 0.0, f64::max);
    Ok(best)
}

/// Tail norm of 𝒦 assembled directly in absolute form, for grids too wide to conjugate.
pub fn weighted_kcal_tail_norm_direct(
    grid: &VelocityGrid,
    spec: &CollisionKernelSpec,
    q: u32,
    m_cut: f64,
) -> Result<f64> {
    let c = Collider::new(grid, spec);
    let kcal = assemble_raw_kcal(&c);
    tail_norm(&kcal, grid, q, m_cut)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (VelocityGrid, ReferenceTables, CollisionKernelSpec) {
        let g = VelocityGrid::new(8, 4.8).unwrap();
        let t = ReferenceTables::new(&g, 2).unwrap();
        let s = CollisionKernelSpec::new(1.0 / (2.0 * std::f64::consts::PI), 4, 8).unwrap();
        (g, t, s)
    }

    #[test]
    fn matrix_matches_matrix_free() {
        let (g, t, s) = small();
        let c = Collider::new(&g, &s);
        let nv = g.len();
        let raw = assemble_raw_k(&c);
        let f: Vec<f64> = g
            .nodes()
            .iter()
            .zip(&t.sqrt_mu)
            .map(|(v, sm)| (1.0 + v[0] - v[1] * v[2] + 0.2 * v[0] * v[0]) * sm)
            .collect();
        let mf = c.k_matrix_free(&f);
        for i in 0..nv {
            let d: f64 = (0..nv).map(|j| raw[i * nv + j] * f[j]).sum();
            assert!((d - mf[i]).abs() < 1e-13, "{i} {d} {}", mf[i]);
        }
        let odd: Vec<f64> = g.nodes().iter().zip(&t.sqrt_mu).map(|(v, sm)| v[0] * v[1] * (1.0 + v[2] * v[2]) * sm).collect();
        let full = c.k_matrix_free(&odd);
        let oct = c.k_matrix_free_with_parity(&odd, [true, true, false]);
        for (a, b) in full.iter().zip(&oct) {
            assert!((a - b).abs() < 1e-13);
        }
        let rk = assemble_raw_kcal(&c);
        let mf = c.kcal_matrix_free(&f);
        for i in 0..nv {
            let d: f64 = (0..nv).map(|j| rk[i * nv + j] * f[j]).sum();
            assert!((d - mf[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn kcal_matrix_is_conjugate_of_k() {
        let (g, t, s) = small();
        let ops = CollisionOperators::assemble(&g, &t, &s, 3.0, AssemblyOptions { max_exit_fraction: 1e-2, ..Default::default() }, None).unwrap();
        let nv = g.len();
        let kc = ops.kcal_matrix();
        let f: Vec<f64> = g.nodes().iter().zip(&t.mu).map(|(v, m)| (1.0 + v[0] * v[1]) * m).collect();
        let a = ops.apply_kcal_vec(&f);
        let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..nv {
            let d: f64 = (0..nv).map(|j| kc[i * nv + j] * f[j]).sum();
            assert!((d - a[i]).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn assembled_kernel_is_symmetric_with_exact_null_space() {
        let (g, t, s) = small();
        let ops = CollisionOperators::assemble(&g, &t, &s, 3.0, AssemblyOptions { max_exit_fraction: 1e-2, ..Default::default() }, None).unwrap();
        assert_eq!(ops.report.asymmetry, 0.0);
        assert!(ops.report.nu_spread == 0.0);
        let f = Field::broadcast(Repr::Perturbation, 1, &t.sqrt_mu);
        let lf = ops.apply_l(&f).unwrap();
        assert!(lf.max_abs() < 1e-13);
        let z = Field::zeros(Repr::Perturbation, 2, g.len());
        assert_eq!(ops.apply_k(&z).max_abs(), 0.0);
    }

    #[test]
    fn q_of_maxwellian_small() {
        let (g, t, s) = small();
        let c = Collider::new(&g, &s);
        let q = c.apply_q(&t.mu, &t.mu);
        let m = t.mu.iter().fold(0.0f64, |a, b| a.max(*b));
        assert!(q.iter().all(|x| x.abs() < 1e-3 * m));
    }

    #[test]
    fn gamma_zero_left() {
        let (g, t, s) = small();
        let c = Collider::new(&g, &s);
        let z = Field::zeros(Repr::Perturbation, 2, g.len());
        let f = Field::broadcast(Repr::Perturbation, 2, &t.sqrt_mu);
        assert_eq!(c.gamma_single(&z, &f).unwrap().max_abs(), 0.0);
        assert!(c.gamma_single(&Field::zeros(Repr::Absolute, 2, g.len()), &f).is_err());
    }

    #[test]
    fn smooth_cutoff() {
        assert_eq!(chi_m([1.0, 0.0, 0.0], 2.0), 0.0);
        assert_eq!(chi_m([3.5, 0.0, 0.0], 2.0), 1.0);
        let mut last = 0.0;
        for i in 0..=100 {
            let x = smooth_step(i as f64 / 100.0);
            assert!(x >= last);
            last = x;
        }
        assert!((smooth_step(0.5) - 0.5).abs() < 1e-15);
    }
}
