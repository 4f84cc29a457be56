use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the stored values relate to the physical distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Repr {
    /// Absolute density F.
    Absolute,
    /// Perturbation f with F = μ + √μ f, or any √μ-weighted quantity.
    Perturbation,
    /// Unweighted component of a Caflisch split (absolute scaling).
    CaflischRaw,
}

impl Repr {
    pub fn tag(self) -> u32 {
        match self {
            Repr::Absolute => 0,
            Repr::Perturbation => 1,
            Repr::CaflischRaw => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Repr::Absolute),
            1 => Some(Repr::Perturbation),
            2 => Some(Repr::CaflischRaw),
            _ => None,
        }
    }
}

/// Values on (spatial node × velocity node), stored row-major as `[j * n_v + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub repr: Repr,
    pub n_y: usize,
    pub n_v: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(repr: Repr, n_y: usize, n_v: usize) -> Self {
        Self {
            repr,
            n_y,
            n_v,
            data: vec![0.0; n_y * n_v],
        }
    }

    pub fn from_fn(repr: Repr, n_y: usize, n_v: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n_y * n_v);
        for j in 0..n_y {
            for k in 0..n_v {
                data.push(f(j, k));
            }
        }
        Self { repr, n_y, n_v, data }
    }

    /// Same velocity profile at every spatial node.
    pub fn broadcast(repr: Repr, n_y: usize, profile: &[f64]) -> Self {
        let n_v = profile.len();
        let mut data = Vec::with_capacity(n_y * n_v);
        for _ in 0..n_y {
            data.extend_from_slice(profile);
        }
        Self { repr, n_y, n_v, data }
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_v..(j + 1) * self.n_v]
    }

    #[inline]
    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.n_v..(j + 1) * self.n_v]
    }

    #[inline]
    pub fn at(&self, j: usize, k: usize) -> f64 {
        self.data[j * self.n_v + k]
    }

    pub fn expect(&self, repr: Repr) -> Result<()> {
        if self.repr != repr {
            return Err(Error::Representation {
                expected: repr,
                found: self.repr,
            });
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Field) -> Result<()> {
        if self.n_y != other.n_y || self.n_v != other.n_v {
            return Err(Error::Grid(format!(
                "field shapes differ: {}x{} vs {}x{}",
                self.n_y, self.n_v, other.n_y, other.n_v
            )));
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    /// self += c * other
    pub fn axpy(&mut self, c: f64, other: &Field) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
