use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_k = k T / K`, `k = 0..=K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::TimeGrid(format!("horizon must be > 0, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::TimeGrid("step count must be >= 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of intervals `K`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes `K + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }

    /// Interval index `k` and local fraction `s ∈ [0,1]` with `t = t_k + s·dt`.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let x = (t / self.dt()).clamp(0.0, self.steps as f64);
        let k = (x.floor() as usize).min(self.steps - 1);
        (k, x - k as f64)
    }

    /// Same horizon, `factor` times more intervals.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * factor,
        }
    }
}

/// Interpolation weights over consecutive grid nodes `start..start+len`.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub start: usize,
    pub len: usize,
    pub weights: [f64; 4],
}

impl Stencil {
    /// 4-point Lagrange stencil when `K >= 3`, linear otherwise. The stencil
    /// is shifted to stay inside `0..=K`; weights always sum to one.
    pub fn at(grid: &TimeGrid, t: f64) -> Self {
        let (k, s) = grid.locate(t);
        let steps = grid.steps();
        if s == 0.0 {
            return Self { start: k, len: 1, weights: [1.0, 0.0, 0.0, 0.0] };
        }
        if steps < 3 {
            return Self { start: k, len: 2, weights: [1.0 - s, s, 0.0, 0.0] };
        }
        let start = k.saturating_sub(1).min(steps - 3);
        let x = (k - start) as f64 + s;
        let mut weights = [0.0; 4];
        for (a, wa) in weights.iter_mut().enumerate() {
            let mut prod = 1.0;
            for b in 0..4 {
                if a != b {
                    prod *= (x - b as f64) / (a as f64 - b as f64);
                }
            }
            *wa = prod;
        }
        Self { start, len: 4, weights }
    }

    /// Weighted combination of `value(k)` over the stencil nodes.
    pub fn apply(&self, mut value: impl FnMut(usize) -> f64) -> f64 {
        (0..self.len).map(|a| self.weights[a] * value(self.start + a)).sum()
    }
}

/// Rows of a `(K+1) × n` trajectory evaluated between grid nodes.
pub fn interpolate_rows(grid: &TimeGrid, rows: &[Vec<f64>], t: f64, out: &mut [f64]) {
    let st = Stencil::at(grid, t);
    for (col, o) in out.iter_mut().enumerate() {
        *o = st.apply(|k| rows[k][col]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(3), 1.0);
        let ts = g.times();
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn locate_clamps() {
        let g = TimeGrid::new(2.0, 4).unwrap();
        assert_eq!(g.locate(0.0), (0, 0.0));
        assert_eq!(g.locate(2.0), (3, 1.0));
        let (k, s) = g.locate(1.25);
        assert_eq!(k, 2);
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cubic_interpolation_is_exact_on_cubics() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let f = |t: f64| 1.0 - 2.0 * t + 3.0 * t * t - t * t * t;
        let rows: Vec<Vec<f64>> = g.times().iter().map(|&t| vec![f(t), 2.0]).collect();
        let mut out = [0.0; 2];
        for t in [0.01, 0.33, 0.5, 0.87, 0.999] {
            interpolate_rows(&g, &rows, t, &mut out);
            assert!((out[0] - f(t)).abs() < 1e-13);
            assert!((out[1] - 2.0).abs() < 1e-13);
        }
    }

    #[test]
    fn linear_fallback_on_short_grids() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let rows = vec![vec![0.0], vec![1.0], vec![4.0]];
        let mut out = [0.0];
        interpolate_rows(&g, &rows, 0.75, &mut out);
        assert!((out[0] - 2.5).abs() < 1e-14);
    }
}
