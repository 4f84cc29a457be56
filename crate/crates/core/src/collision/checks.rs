//! Numerical checks of the operator properties and bounds.

use rand::Rng;
use serde::Serialize;

use super::{CollisionOperators, Collider};
use crate::field::{Field, Repr};
use crate::grid::{maxwellian, weight_q, ReferenceTables};

/// One row of `kernel_checks.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct KernelCheck {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl KernelCheck {
    /// Passes when `value <= bound`.
    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound,
            pass: value <= bound,
        }
    }

    /// Passes when `value >= bound`.
    pub fn at_least(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound,
            pass: value >= bound,
        }
    }
}

/// Largest relative deviation of the per-node collision frequency from its mean.
pub fn nu_spread(collider: &Collider) -> (f64, f64) {
    let nu = collider.nu_per_node();
    let mean = nu.iter().sum::<f64>() / nu.len() as f64;
    let spread = nu.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max) / mean;
    (mean, spread)
}

/// Relative L² error of L(v_x v_y √μ) against 2b₀ v_x v_y √μ, using the raw
/// matrix-free K so no dense matrix is formed.
pub fn shear_eigen_error(collider: &Collider) -> f64 {
    let grid = collider.grid();
    let t = ReferenceTables::new(grid, 0).expect("q = 0");
    let b0 = collider.spec().b0();
    let f: Vec<f64> = grid
        .nodes()
        .iter()
        .zip(&t.sqrt_mu)
        .map(|(v, s)| v[0] * v[1] * s)
        .collect();
    let k = collider.k_matrix_free_with_parity(&f, [true, true, false]);
    let nu = collider.nu_per_node()[0];
    let (mut e2, mut n2) = (0.0, 0.0);
    for i in 0..f.len() {
        let target = 2.0 * b0 * f[i];
        e2 += (nu * f[i] - k[i] - target).powi(2);
        n2 += target * target;
    }
    (e2 / n2).sqrt()
}

/// Random bounded density: a mixture of up to three drifting Maxwellians.
pub fn random_mixture(grid: &crate::grid::VelocityGrid, rng: &mut impl Rng) -> Vec<f64> {
    let parts = rng.random_range(1..=3);
    let comps: Vec<(f64, [f64; 3], f64)> = (0..parts)
        .map(|_| {
            let c = rng.random_range(0.2..1.0);
            let u = [0; 3].map(|_| rng.random_range(-0.5..0.5));
            let temp = rng.random_range(0.8..1.2);
            (c, u, temp)
        })
        .collect();
    grid.nodes()
        .iter()
        .map(|v| {
            comps
                .iter()
                .map(|(c, u, temp)| {
                    let x = [0, 1, 2].map(|a| (v[a] - u[a]) / temp.sqrt());
                    c * maxwellian(x) / temp.powf(1.5)
                })
                .sum()
        })
        .collect()
}

/// max over φ ∈ {1, v_x, v_y, v_z, |v|²} of |Σ w Q φ| / Σ w F².
pub fn moment_defect(grid: &crate::grid::VelocityGrid, f: &[f64], q: &[f64]) -> f64 {
    let w = grid.weight();
    let norm2: f64 = f.iter().map(|x| w * x * x).sum();
    let mut m = [0.0f64; 5];
    for (v, qv) in grid.nodes().iter().zip(q) {
        let phi = [1.0, v[0], v[1], v[2], v[0] * v[0] + v[1] * v[1] + v[2] * v[2]];
        for a in 0..5 {
            m[a] += w * qv * phi[a];
        }
    }
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())) / norm2
}

/// Worst moment defect of the conservative Q(F, F) over random mixtures.
pub fn collision_invariant_defect(collider: &Collider, samples: usize, rng: &mut impl Rng) -> f64 {
    let grid = collider.grid();
    (0..samples)
        .map(|_| {
            let f = random_mixture(grid, rng);
            let q = collider.apply_q_conservative(&f).expect("mixtures have positive density");
            moment_defect(grid, &f, &q)
        })
        .fold(0.0, f64::max)
}

/// Worst moment defect of the uncorrected, locally referenced quadrature of Q(F, F),
/// i.e. the size of the conservation correction.
pub fn collision_quadrature_defect(collider: &Collider, samples: usize, rng: &mut impl Rng) -> f64 {
    let grid = collider.grid();
    (0..samples)
        .map(|_| {
            let f = random_mixture(grid, rng);
            let q = collider.apply_q_local(&f).expect("mixtures have positive density");
            moment_defect(grid, &f, &q)
        })
        .fold(0.0, f64::max)
}

fn random_perturbation(ops: &CollisionOperators, rng: &mut impl Rng) -> Vec<f64> {
    ops.grid()
        .nodes()
        .iter()
        .zip(&ops.sqrt_mu)
        .map(|(v, s)| {
            let p = rng.random_range(-1.0..1.0)
                + rng.random_range(-1.0..1.0) * v[0]
                + rng.random_range(-1.0..1.0) * v[1] * v[2]
                + rng.random_range(-1.0..1.0) * (v[0] * v[0] - 1.0);
            p * s + 0.1 * rng.random_range(-1.0..1.0) * s.sqrt()
        })
        .collect()
}

fn dot(w: f64, a: &[f64], b: &[f64]) -> f64 {
    w * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// max |⟨Lf,g⟩ − ⟨f,Lg⟩| / (‖f‖‖g‖) over random pairs.
pub fn self_adjoint_defect(ops: &CollisionOperators, samples: usize, rng: &mut impl Rng) -> f64 {
    let w = ops.grid().weight();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let f = random_perturbation(ops, rng);
        let g = random_perturbation(ops, rng);
        let lf = apply_l_vec(ops, &f);
        let lg = apply_l_vec(ops, &g);
        let d = (dot(w, &lf, &g) - dot(w, &f, &lg)).abs();
        worst = worst.max(d / (dot(w, &f, &f) * dot(w, &g, &g)).sqrt());
    }
    worst
}

fn apply_l_vec(ops: &CollisionOperators, f: &[f64]) -> Vec<f64> {
    let k = ops.apply_k_vec(f);
    f.iter().zip(&k).map(|(a, b)| ops.nu0 * a - b).collect()
}

/// min ⟨L P₁f, P₁f⟩ / ‖P₁f‖² over random samples.
pub fn spectral_gap(ops: &CollisionOperators, samples: usize, rng: &mut impl Rng) -> f64 {
    let w = ops.grid().weight();
    let mut best = f64::INFINITY;
    for _ in 0..samples {
        let mut f = random_perturbation(ops, rng);
        ops.projector.p1_in_place(&mut f);
        let lf = apply_l_vec(ops, &f);
        best = best.min(dot(w, &lf, &f) / dot(w, &f, &f));
    }
    best
}

/// sup_v (1+|v|) Σ_{v*} |K(v,v*)| w_q(v)/w_q(v*): the fitted constant of the row-sum bound.
pub fn kernel_rowsum_constant(ops: &CollisionOperators, q: u32) -> f64 {
    let nv = ops.n_v();
    let nodes = ops.grid().nodes();
    let wq: Vec<f64> = nodes.iter().map(|v| weight_q(*v, q)).collect();
    (0..nv)
        .map(|i| {
            let row = &ops.k_matrix[i * nv..(i + 1) * nv];
            let s: f64 = row.iter().zip(&wq).map(|(k, w)| k.abs() / w).sum::<f64>() * wq[i];
            let v = nodes[i];
            (1.0 + (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()) * s
        })
        .fold(0.0, f64::max)
}

/// max ‖w_qΓ(f,g)‖∞ / (‖w_qf‖∞‖w_qg‖∞) over random pairs with ‖w_q·‖∞ = 1.
pub fn gamma_weighted_constant(ops: &CollisionOperators, q: u32, samples: usize, rng: &mut impl Rng) -> f64 {
    let nodes = ops.grid().nodes();
    let nv = ops.n_v();
    let wq: Vec<f64> = nodes.iter().map(|v| weight_q(*v, q)).collect();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mk = |rng: &mut dyn rand::RngCore| -> Field {
            let d: Vec<f64> = (0..nv).map(|k| rng.random_range(-1.0..1.0) / wq[k]).collect();
            Field::broadcast(Repr::Perturbation, 1, &d)
        };
        let f = mk(rng);
        let g = mk(rng);
        let nf = f.data.iter().zip(&wq).map(|(x, w)| (x * w).abs()).fold(0.0, f64::max);
        let ng = g.data.iter().zip(&wq).map(|(x, w)| (x * w).abs()).fold(0.0, f64::max);
        let gam = ops.gamma_single(&f, &g).expect("matching tags");
        let nr = gam.data.iter().zip(&wq).map(|(x, w)| (x * w).abs()).fold(0.0, f64::max);
        worst = worst.max(nr / (nf * ng));
    }
    worst
}

/// Full list of operator checks written by `verify-kernel`.
pub fn run_all(ops: &CollisionOperators, q: u32, samples: usize, rng: &mut impl Rng) -> Vec<KernelCheck> {
    let (nu_mean, spread) = nu_spread(&ops.collider);
    let mut out = vec![
        KernelCheck::at_most("nu_spread", spread, 1e-10),
        KernelCheck::at_most("nu0_minus_one", (nu_mean - ops.collider.kernel_total()).abs().max((nu_mean - 1.0).abs()), 1e-3),
        KernelCheck::at_most("b0_minus_quarter", (ops.b0 - 0.25 * ops.collider.spec().b_amp * 2.0 * std::f64::consts::PI).abs(), 1e-10),
        KernelCheck::at_most("stencil_exit_fraction", ops.report.exit_fraction, 1e-3),
        KernelCheck::at_most("k_asymmetry", ops.report.asymmetry, 1e-10),
        KernelCheck::at_most("k_raw_asymmetry", ops.report.raw_asymmetry, f64::INFINITY),
    ];
    let mut rng_dyn = rng;
    out.push(KernelCheck::at_most(
        "self_adjoint_defect",
        self_adjoint_defect(ops, samples, &mut rng_dyn),
        1e-10,
    ));
    out.push(KernelCheck::at_least(
        "spectral_gap",
        spectral_gap(ops, samples, &mut rng_dyn),
        1e-12,
    ));
    out.push(KernelCheck::at_most(
        "collision_invariant_defect",
        collision_invariant_defect(&ops.collider, samples.min(20), &mut rng_dyn),
        1e-3,
    ));
    out.push(KernelCheck::at_most(
        "collision_quadrature_defect",
        collision_quadrature_defect(&ops.collider, samples.min(5), &mut rng_dyn),
        f64::INFINITY,
    ));
    let rowsum = kernel_rowsum_constant(ops, q);
    out.push(KernelCheck::at_most("kernel_rowsum_constant", rowsum, f64::INFINITY));
    let gam = gamma_weighted_constant(ops, q, samples, &mut rng_dyn);
    out.push(KernelCheck::at_most("gamma_weighted_constant", gam, f64::INFINITY));
    let l_null = {
        let lf = apply_l_vec(ops, &ops.sqrt_mu);
        lf.iter().fold(0.0f64, |m, x| m.max(x.abs())) / ops.sqrt_mu.iter().fold(0.0f64, |m, x| m.max(*x))
    };
    out.push(KernelCheck::at_most("l_sqrt_mu", l_null, 1e-12));
    out
}
