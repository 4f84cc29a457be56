//! Lattice-aligned evaluation of the collision integrals.
//!
//! On a uniform grid, with v = node i and v_* = node k = i + d (grid units), the
//! post-collision points are v' = i + s and v'_* = i + t where s = (d·ω)ω and
//! t = d − s do not depend on i. The trilinear stencil of v' therefore has the
//! same fractional weights for every i in the box of admissible pairs, and all
//! kernels below sweep that box with fixed offsets into a zero-padded copy of the
//! input. Unordered pairs are visited once: reversing (i, k) at fixed ω swaps
//! v' and v'_*.

use rayon::prelude::*;

use super::sphere::HalfRule;
use crate::grid::{mu_axis, sqrt_mu_axis, VelocityGrid};

/// Trilinear stencil and pair box for one (d, ω).
#[derive(Debug, Clone)]
pub(crate) struct Stencil {
    pub doff: isize,
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub s: [f64; 3],
    pub t: [f64; 3],
    pub s_off: isize,
    pub t_off: isize,
    pub sw: [f64; 8],
    pub tw: [f64; 8],
    /// Stencil weights premultiplied by the direction weight.
    pub sw_w: [f64; 8],
    pub tw_w: [f64; 8],
    pub w: f64,
}

/// Which off-grid factor a linear kernel multiplies the interpolated input by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum OffGrid {
    /// √μ at the partner point, with √μ_k pair factor: the operator K.
    SqrtMu,
    /// μ at the partner point, unit pair factor: the operator 𝒦.
    Mu,
}

#[derive(Default)]
struct Scratch {
    x1: Vec<f64>,
    x2: Vec<f64>,
    x3: Vec<f64>,
    x4: Vec<f64>,
    y1: Vec<f64>,
    y2: Vec<f64>,
}

impl Scratch {
    /// Zeroes the accumulators and makes every buffer at least `l` long.
    fn reset(&mut self, l: usize) {
        for x in [&mut self.x1, &mut self.x2, &mut self.x3, &mut self.x4] {
            if x.len() < l {
                x.resize(l, 0.0);
            }
        }
        for y in [&mut self.y1, &mut self.y2] {
            y.clear();
            y.resize(l, 0.0);
        }
    }
}

/// acc[i] += W m_k vi and acc[k] += W m_i vk along one row segment.
#[allow(clippy::too_many_arguments)]
#[inline]
fn scatter(acc: &mut [f64], i0: usize, k0: usize, len: usize, nb: usize, w: f64, m: &[f64], vi: &[f64], vk: &[f64]) {
    if nb == 1 {
        for ((a, mk), v) in acc[i0..i0 + len].iter_mut().zip(&m[k0..k0 + len]).zip(vi) {
            *a += w * mk * v;
        }
        for ((a, mi), v) in acc[k0..k0 + len].iter_mut().zip(&m[i0..i0 + len]).zip(vk) {
            *a += w * mi * v;
        }
    } else {
        for z in 0..len {
            let f = w * m[k0 + z];
            for (a, v) in acc[(i0 + z) * nb..(i0 + z + 1) * nb].iter_mut().zip(&vi[z * nb..(z + 1) * nb]) {
                *a += f * v;
            }
        }
        for z in 0..len {
            let f = w * m[i0 + z];
            for (a, v) in acc[(k0 + z) * nb..(k0 + z + 1) * nb].iter_mut().zip(&vk[z * nb..(z + 1) * nb]) {
                *a += f * v;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Lattice {
    pub n: usize,
    pub h: f64,
    pub v_max: f64,
    pub pad: usize,
    pub np: usize,
    pub rule: HalfRule,
    dlist: Vec<[i64; 3]>,
    corner: [isize; 8],
    real_of_pad: Vec<i32>,
}

fn trilinear(fr: [f64; 3]) -> [f64; 8] {
    let mut w = [0.0; 8];
    for (c, wc) in w.iter_mut().enumerate() {
        let bx = (c >> 2) & 1;
        let by = (c >> 1) & 1;
        let bz = c & 1;
        let f = |b: usize, x: f64| if b == 1 { x } else { 1.0 - x };
        *wc = f(bx, fr[0]) * f(by, fr[1]) * f(bz, fr[2]);
    }
    w
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn frame(u: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let ax = if u[0].abs() <= u[1].abs() && u[0].abs() <= u[2].abs() {
        [1.0, 0.0, 0.0]
    } else if u[1].abs() <= u[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let e1 = cross(u, ax);
    let l = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    let e1 = [e1[0] / l, e1[1] / l, e1[2] / l];
    (e1, cross(u, e1))
}

impl Lattice {
    pub fn new(grid: &VelocityGrid, rule: HalfRule) -> Self {
        let n = grid.n_per_axis();
        // v' lies on the sphere with diameter [v, v_*]; along one axis it leaves
        // the cube by at most (n-1)/√2
        let pad = ((n as f64 - 1.0) * std::f64::consts::FRAC_1_SQRT_2).ceil() as usize + 2;
        let np = n + 2 * pad;
        let ni = n as i64;
        let mut dlist = Vec::new();
        for dx in -(ni - 1)..ni {
            for dy in -(ni - 1)..ni {
                for dz in -(ni - 1)..ni {
                    let d = [dx, dy, dz];
                    if d > [0, 0, 0] {
                        dlist.push(d);
                    }
                }
            }
        }
        let npi = np as isize;
        let corner = [
            0,
            1,
            npi,
            npi + 1,
            npi * npi,
            npi * npi + 1,
            npi * npi + npi,
            npi * npi + npi + 1,
        ];
        let mut real_of_pad = vec![-1i32; np * np * np];
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    real_of_pad[((ix + pad) * np + iy + pad) * np + iz + pad] =
                        ((ix * n + iy) * n + iz) as i32;
                }
            }
        }
        Self {
            n,
            h: grid.spacing(),
            v_max: grid.v_max(),
            pad,
            np,
            rule,
            dlist,
            corner,
            real_of_pad,
        }
    }

    #[inline]
    pub fn pad_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ((ix + self.pad) * self.np + iy + self.pad) * self.np + iz + self.pad
    }

    pub fn padded_len(&self) -> usize {
        self.np * self.np * self.np
    }

    /// Velocity coordinate of a (possibly fractional) grid index.
    #[inline]
    pub fn coord(&self, p: f64) -> f64 {
        -self.v_max + self.h * (p + 0.5)
    }

    /// Copies `nb` interleaved vectors (node-major, batch-minor) into the padded layout.
    pub fn pad_batch(&self, src: &[f64], nb: usize) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; self.padded_len() * nb];
        for ix in 0..n {
            for iy in 0..n {
                let k0 = (ix * n + iy) * n;
                let p0 = self.pad_index(ix, iy, 0);
                out[p0 * nb..(p0 + n) * nb].copy_from_slice(&src[k0 * nb..(k0 + n) * nb]);
            }
        }
        out
    }

    fn stencil(&self, d: [i64; 3], c: f64, st: f64, cp: f64, sp: f64, w: f64, u: [f64; 3], e1: [f64; 3], e2: [f64; 3], dn: f64) -> Stencil {
        let n = self.n as i64;
        let np = self.np as isize;
        let mut s = [0.0; 3];
        let mut t = [0.0; 3];
        let mut sfl = [0i64; 3];
        let mut tfl = [0i64; 3];
        let mut sfr = [0.0; 3];
        let mut tfr = [0.0; 3];
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let om = c * u[a] + st * (cp * e1[a] + sp * e2[a]);
            s[a] = dn * c * om;
            t[a] = d[a] as f64 - s[a];
            sfl[a] = s[a].floor() as i64;
            tfl[a] = t[a].floor() as i64;
            sfr[a] = s[a] - sfl[a] as f64;
            tfr[a] = t[a] - tfl[a] as f64;
            lo[a] = (-d[a]).max(0) as usize;
            hi[a] = (n - d[a]).min(n) as usize;
        }
        let lin = |f: [i64; 3]| ((f[0] as isize * np) + f[1] as isize) * np + f[2] as isize;
        let nu = self.n as isize;
        Stencil {
            doff: ((d[0] as isize * nu) + d[1] as isize) * nu + d[2] as isize,
            lo,
            hi,
            s,
            t,
            s_off: lin(sfl),
            t_off: lin(tfl),
            sw: trilinear(sfr),
            tw: trilinear(tfr),
            sw_w: trilinear(sfr).map(|x| x * w),
            tw_w: trilinear(tfr).map(|x| x * w),
            w,
        }
    }

    /// All stencils of one unordered offset d.
    pub fn stencils(&self, d: [i64; 3], out: &mut Vec<Stencil>) {
        out.clear();
        let dn = ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64).sqrt();
        let u = [d[0] as f64 / dn, d[1] as f64 / dn, d[2] as f64 / dn];
        let (e1, e2) = frame(u);
        for node in &self.rule.nodes {
            out.push(self.stencil(d, node.c, node.sin, node.cos_phi, node.sin_phi, node.w, u, e1, e2, dn));
        }
    }

    fn chunk_len(&self) -> usize {
        (self.dlist.len() / (4 * rayon::current_num_threads()).max(1)).max(16)
    }

    /// Runs `body` on the stencils of every unordered offset, summing the
    /// per-thread accumulators of length `nacc`.
    fn sweep<F>(&self, nacc: usize, body: F) -> Vec<f64>
    where
        F: Fn(&[Stencil], &mut [f64], &mut Scratch) + Sync + Send,
    {
        self.dlist
            .par_chunks(self.chunk_len())
            .fold(
                || (vec![0.0; nacc], Vec::new(), Scratch::default()),
                |(mut acc, mut buf, mut scratch), ds| {
                    for &d in ds {
                        self.stencils(d, &mut buf);
                        body(&buf, &mut acc, &mut scratch);
                    }
                    (acc, buf, scratch)
                },
            )
            .map(|(acc, _, _)| acc)
            .reduce(
                || vec![0.0; nacc],
                |mut x, y| {
                    x.iter_mut().zip(&y).for_each(|(p, q)| *p += q);
                    x
                },
            )
    }

    /// out[e] += Σ_q w_q x[(base + c_q)·nb + e] over a contiguous row segment.
    #[inline]
    fn interp_row(&self, x: &[f64], base: usize, w: &[f64; 8], nb: usize, out: &mut [f64]) {
        let l = out.len();
        for q in 0..8 {
            let wq = w[q];
            if wq == 0.0 {
                continue;
            }
            let off = (base as isize + self.corner[q]) as usize * nb;
            for (o, s) in out.iter_mut().zip(&x[off..off + l]) {
                *o += wq * s;
            }
        }
    }

    /// Visits the (ix, iy) rows of a stencil box: (i0, k0, padded index of i0, row length).
    #[inline]
    fn rows(&self, st: &Stencil, mut f: impl FnMut(usize, usize, usize, usize)) {
        let n = self.n;
        let len = st.hi[2] - st.lo[2];
        if len == 0 {
            return;
        }
        for ix in st.lo[0]..st.hi[0] {
            for iy in st.lo[1]..st.hi[1] {
                let i0 = (ix * n + iy) * n + st.lo[2];
                let k0 = (i0 as isize + st.doff) as usize;
                f(i0, k0, self.pad_index(ix, iy, st.lo[2]), len);
            }
        }
    }

    /// Raw gain sums Σ_k m_k Σ_ω W a(v'_*) b(v') per node and batch column.
    ///
    /// `a` and `b` are padded batches from [`Lattice::pad_batch`]; `b = None`
    /// means b = a. The caller multiplies by the outer factors.
    pub fn bilinear_gain(&self, a: &[f64], b: Option<&[f64]>, m: &[f64], nb: usize) -> Vec<f64> {
        let nv = self.n * self.n * self.n;
        let mut out = self.sweep(nv * nb, |sts, acc, sc| {
            self.rows(&sts[0], |i0, k0, p0, len| {
                let l = len * nb;
                sc.reset(l);
                for st in sts {
                    let ps = (p0 as isize + st.s_off) as usize;
                    let pt = (p0 as isize + st.t_off) as usize;
                    sc.x1[..l].fill(0.0);
                    sc.x2[..l].fill(0.0);
                    match b {
                        None => {
                            self.interp_row(a, ps, &st.sw_w, nb, &mut sc.x1[..l]);
                            self.interp_row(a, pt, &st.tw, nb, &mut sc.x2[..l]);
                            for ((o, x), y) in sc.y1[..l].iter_mut().zip(&sc.x1[..l]).zip(&sc.x2[..l]) {
                                *o += x * y;
                            }
                        }
                        Some(b) => {
                            sc.x3[..l].fill(0.0);
                            sc.x4[..l].fill(0.0);
                            self.interp_row(a, ps, &st.sw_w, nb, &mut sc.x1[..l]);
                            self.interp_row(a, pt, &st.tw_w, nb, &mut sc.x2[..l]);
                            self.interp_row(b, ps, &st.sw, nb, &mut sc.x3[..l]);
                            self.interp_row(b, pt, &st.tw, nb, &mut sc.x4[..l]);
                            // pair (i,k): a at v'_*, b at v'; the reversed pair swaps the points
                            for e in 0..l {
                                sc.y1[e] += sc.x2[e] * sc.x3[e];
                                sc.y2[e] += sc.x1[e] * sc.x4[e];
                            }
                        }
                    }
                }
                let vk = if b.is_some() { &sc.y2[..l] } else { &sc.y1[..l] };
                scatter(acc, i0, k0, len, nb, 1.0, m, &sc.y1[..l], vk);
            });
        });
        // d = 0: v' = v'_* = v
        let s_b = self.rule.total();
        let bb = b.unwrap_or(a);
        self.for_nodes(|i, p| {
            for j in 0..nb {
                out[i * nb + j] += s_b * m[i] * a[p * nb + j] * bb[p * nb + j];
            }
        });
        out
    }

    fn for_nodes(&self, mut f: impl FnMut(usize, usize)) {
        let n = self.n;
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    f((ix * n + iy) * n + iz, self.pad_index(ix, iy, iz));
                }
            }
        }
    }

    /// Raw gain of a linear kernel applied to a padded batch `h`:
    /// Σ_k m_k Σ_ω W [h(v') + h(v'_*)]. With h = g/φ, m_k = m̃_k φ_k and the
    /// outer factor w φ_i this is the gain part of K (φ = √μ) or 𝒦 (φ = μ).
    pub fn linear_gain(&self, h: &[f64], m: &[f64], nb: usize) -> Vec<f64> {
        let nv = self.n * self.n * self.n;
        let mut out = self.sweep(nv * nb, |sts, acc, sc| {
            self.rows(&sts[0], |i0, k0, p0, len| {
                let l = len * nb;
                sc.reset(l);
                for st in sts {
                    let ps = (p0 as isize + st.s_off) as usize;
                    let pt = (p0 as isize + st.t_off) as usize;
                    self.interp_row(h, ps, &st.sw_w, nb, &mut sc.y1[..l]);
                    self.interp_row(h, pt, &st.tw_w, nb, &mut sc.y1[..l]);
                }
                scatter(acc, i0, k0, len, nb, 1.0, m, &sc.y1[..l], &sc.y1[..l]);
            });
        });
        let s_b = self.rule.total();
        self.for_nodes(|i, p| {
            for j in 0..nb {
                out[i * nb + j] += 2.0 * s_b * m[i] * h[p * nb + j];
            }
        });
        out
    }

    /// [`Lattice::linear_gain`] evaluated only on the octant v_x, v_y, v_z > 0,
    /// gathering over ordered pairs. Used when the output is known to have a
    /// sign-flip parity, at a quarter of the cost of the full sweep.
    pub fn linear_gain_octant(&self, h: &[f64], m: &[f64]) -> Vec<f64> {
        let n = self.n;
        let half = n / 2;
        let nv = n * n * n;
        let mut all: Vec<[i64; 3]> = self.dlist.clone();
        all.extend(self.dlist.iter().map(|d| [-d[0], -d[1], -d[2]]));
        let mut out = all
            .par_chunks(self.chunk_len())
            .fold(
                || (vec![0.0; nv], Vec::new(), Vec::new()),
                |(mut acc, mut buf, mut y), ds| {
                    for &d in ds {
                        self.stencils(d, &mut buf);
                        let st0 = &buf[0];
                        let lo = st0.lo.map(|x| x.max(half));
                        let hi = st0.hi;
                        if (0..3).any(|a| lo[a] >= hi[a]) {
                            continue;
                        }
                        let len = hi[2] - lo[2];
                        for ix in lo[0]..hi[0] {
                            for iy in lo[1]..hi[1] {
                                let i0 = (ix * n + iy) * n + lo[2];
                                let k0 = (i0 as isize + st0.doff) as usize;
                                let p0 = self.pad_index(ix, iy, lo[2]);
                                y.clear();
                                y.resize(len, 0.0);
                                for st in buf.iter() {
                                    let ps = (p0 as isize + st.s_off) as usize;
                                    let pt = (p0 as isize + st.t_off) as usize;
                                    self.interp_row(h, ps, &st.sw_w, 1, &mut y);
                                    self.interp_row(h, pt, &st.tw_w, 1, &mut y);
                                }
                                for ((a, mk), v) in acc[i0..i0 + len].iter_mut().zip(&m[k0..k0 + len]).zip(&y) {
                                    *a += mk * v;
                                }
                            }
                        }
                    }
                    (acc, buf, y)
                },
            )
            .map(|(acc, _, _)| acc)
            .reduce(
                || vec![0.0; nv],
                |mut x, y| {
                    x.iter_mut().zip(&y).for_each(|(p, q)| *p += q);
                    x
                },
            );
        let s_b = self.rule.total();
        self.for_nodes(|i, p| out[i] += 2.0 * s_b * m[i] * h[p]);
        out
    }

    /// Dense raw gain matrix (row-major, nv × nv) of
    /// g ↦ Σ_k m_k Σ_ω W [φ(v'_*) g(v') + φ(v') g(v'_*)], with g(v') = φ(v')·(trilinear g/φ).
    ///
    /// Ratios φ(v')/φ(v_j) are formed per axis from exponent differences, so the
    /// matrix stays finite on wide grids where φ itself underflows.
    pub fn linear_gain_matrix(&self, m: &[f64], kind: OffGrid) -> Vec<f64> {
        let n = self.n;
        let nv = n * n * n;
        let c = match kind {
            OffGrid::SqrtMu => 0.25,
            OffGrid::Mu => 0.5,
        };
        let phi = |x: f64| match kind {
            OffGrid::SqrtMu => sqrt_mu_axis(x),
            OffGrid::Mu => mu_axis(x),
        };
        let mut mat = vec![0.0; nv * nv];
        let mut buf = Vec::new();
        // per axis, per i_a: [lo corner weight, hi corner weight, partner factor]
        let mut ts: [Vec<[f64; 3]>; 3] = Default::default();
        let mut tt: [Vec<[f64; 3]>; 3] = Default::default();
        let mut cols = [0usize; 16];
        let mut vals = [0.0; 16];
        for &d in &self.dlist {
            self.stencils(d, &mut buf);
            for st in &buf {
                for a in 0..3 {
                    ts[a].resize(n, [0.0; 3]);
                    tt[a].resize(n, [0.0; 3]);
                    for i in st.lo[a]..st.hi[a] {
                        let axis_tab = |sh: f64, other: f64| {
                            let p = i as f64 + sh;
                            let fl = p.floor();
                            let fr = p - fl;
                            let x = self.coord(p);
                            let x0 = self.coord(fl);
                            let x1 = self.coord(fl + 1.0);
                            [
                                (1.0 - fr) * (-c * (x * x - x0 * x0)).exp(),
                                fr * (-c * (x * x - x1 * x1)).exp(),
                                phi(self.coord(i as f64 + other)),
                            ]
                        };
                        ts[a][i] = axis_tab(st.s[a], st.t[a]);
                        tt[a][i] = axis_tab(st.t[a], st.s[a]);
                    }
                }
                for ix in st.lo[0]..st.hi[0] {
                    for iy in st.lo[1]..st.hi[1] {
                        let p0 = self.pad_index(ix, iy, 0);
                        let i0 = (ix * n + iy) * n;
                        for iz in st.lo[2]..st.hi[2] {
                            let i = i0 + iz;
                            let k = (i as isize + st.doff) as usize;
                            let ps = (p0 + iz) as isize + st.s_off;
                            let pt = (p0 + iz) as isize + st.t_off;
                            let idx = [ix, iy, iz];
                            let mut nc = 0;
                            for (tab, base) in [(&ts, ps), (&tt, pt)] {
                                let part = tab[0][idx[0]][2] * tab[1][idx[1]][2] * tab[2][idx[2]][2];
                                for q in 0..8 {
                                    let r = self.real_of_pad[(base + self.corner[q]) as usize];
                                    if r < 0 {
                                        continue;
                                    }
                                    let v = part
                                        * tab[0][idx[0]][(q >> 2) & 1]
                                        * tab[1][idx[1]][(q >> 1) & 1]
                                        * tab[2][idx[2]][q & 1];
                                    if v != 0.0 {
                                        cols[nc] = r as usize;
                                        vals[nc] = v;
                                        nc += 1;
                                    }
                                }
                            }
                            for (row, f) in [(i, st.w * m[k]), (k, st.w * m[i])] {
                                let r = &mut mat[row * nv..(row + 1) * nv];
                                for q in 0..nc {
                                    r[cols[q]] += f * vals[q];
                                }
                            }
                        }
                    }
                }
            }
        }
        let s_b = self.rule.total();
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    let i = (ix * n + iy) * n + iz;
                    let ph = phi(self.coord(ix as f64)) * phi(self.coord(iy as f64)) * phi(self.coord(iz as f64));
                    mat[i * nv + i] += 2.0 * s_b * m[i] * ph;
                }
            }
        }
        mat
    }

    /// √μ_i√μ_k-weighted fraction of trilinear stencil weight that falls outside the grid.
    pub fn exit_fraction(&self) -> f64 {
        let n = self.n;
        let r: Vec<f64> = (0..n).map(|i| sqrt_mu_axis(self.coord(i as f64))).collect();
        let inside = |p: f64| -> f64 {
            let fl = p.floor();
            let fr = p - fl;
            let ok = |x: f64| x >= 0.0 && x <= (n - 1) as f64;
            (if ok(fl) { 1.0 - fr } else { 0.0 }) + (if ok(fl + 1.0) { fr } else { 0.0 })
        };
        let mut lost = 0.0;
        let mut total = 0.0;
        let mut buf = Vec::new();
        for &d in &self.dlist {
            self.stencils(d, &mut buf);
            for st in &buf {
                let mut all = 1.0;
                let mut ins = 1.0;
                let mut int = 1.0;
                for a in 0..3 {
                    let (mut sa, mut ss, mut stt) = (0.0, 0.0, 0.0);
                    for i in st.lo[a]..st.hi[a] {
                        let rr = r[i] * r[(i as i64 + d[a]) as usize];
                        sa += rr;
                        ss += rr * inside(i as f64 + st.s[a]);
                        stt += rr * inside(i as f64 + st.t[a]);
                    }
                    all *= sa;
                    ins *= ss;
                    int *= stt;
                }
                lost += st.w * (2.0 * all - ins - int);
                total += 2.0 * st.w * all;
            }
        }
        if total > 0.0 {
            lost / total
        } else {
            0.0
        }
    }
}
