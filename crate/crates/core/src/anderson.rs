//! Anderson acceleration for fixed-point maps x = T(x).

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

/// Type-II Anderson mixing over the last `depth` residual differences.
#[derive(Debug, Clone)]
pub struct Anderson {
    depth: usize,
    beta: f64,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    df: VecDeque<Vec<f64>>,
    dg: VecDeque<Vec<f64>>,
}

impl Anderson {
    /// `depth = 0` gives damped Picard with relaxation `beta`.
    pub fn new(depth: usize, beta: f64) -> Self {
        Self {
            depth,
            beta,
            prev: None,
            df: VecDeque::new(),
            dg: VecDeque::new(),
        }
    }

    pub fn reset(&mut self) {
        self.prev = None;
        self.df.clear();
        self.dg.clear();
    }

    /// Next iterate from the current x and its image T(x).
    pub fn next(&mut self, x: &[f64], tx: &[f64]) -> Vec<f64> {
        let f: Vec<f64> = tx.iter().zip(x).map(|(a, b)| a - b).collect();
        let g = tx.to_vec();
        if self.depth > 0 {
            if let Some((fp, gp)) = &self.prev {
                self.df.push_back(f.iter().zip(fp).map(|(a, b)| a - b).collect());
                self.dg.push_back(g.iter().zip(gp).map(|(a, b)| a - b).collect());
                if self.df.len() > self.depth {
                    self.df.pop_front();
                    self.dg.pop_front();
                }
            }
        }
        let m = self.df.len();
        let mut out: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + self.beta * b).collect();
        if m > 0 {
            let n = f.len();
            let a = DMatrix::from_fn(n, m, |i, j| self.df[j][i]);
            let rhs = DVector::from_column_slice(&f);
            let gamma = a.svd(true, true).solve(&rhs, 1e-12);
            if let Ok(gamma) = gamma {
                if gamma.iter().all(|c| c.is_finite()) {
                    for j in 0..m {
                        let c = gamma[j];
                        for i in 0..n {
                            out[i] -= c * (self.dg[j][i] - (1.0 - self.beta) * self.df[j][i]);
                        }
                    }
                }
            }
        }
        self.prev = Some((f, g));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_converges_fast() {
        // x = A x + b with spectral radius 0.95
        let a = [[0.9, 0.05, 0.0], [0.0, 0.95, 0.0], [0.02, 0.0, 0.5]];
        let b = [1.0, -2.0, 0.5];
        let t = |x: &[f64]| -> Vec<f64> {
            (0..3).map(|i| (0..3).map(|j| a[i][j] * x[j]).sum::<f64>() + b[i]).collect()
        };
        let mut acc = Anderson::new(5, 1.0);
        let mut x = vec![0.0; 3];
        for _ in 0..15 {
            let tx = t(&x);
            x = acc.next(&x, &tx);
        }
        let r: f64 = t(&x).iter().zip(&x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(r < 1e-10);
    }
}
