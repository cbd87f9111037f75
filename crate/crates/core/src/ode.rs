//! Fixed-step classic Runge-Kutta.

use crate::error::Result;

/// Reusable stage buffers for RK4 on a state of fixed dimension.
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `y` from `t` to `t + h`; `h` may be negative.
    pub(crate) fn step<F>(&mut self, t: f64, h: f64, y: &mut [f64], mut rhs: F) -> Result<()>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    {
        let n = y.len();
        rhs(t, y, &mut self.k1)?;
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k1[i];
        }
        rhs(t + 0.5 * h, &self.tmp, &mut self.k2)?;
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k2[i];
        }
        rhs(t + 0.5 * h, &self.tmp, &mut self.k3)?;
        for i in 0..n {
            self.tmp[i] = y[i] + h * self.k3[i];
        }
        rhs(t + h, &self.tmp, &mut self.k4)?;
        for i in 0..n {
            y[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourth_order_on_exponential() {
        let err = |steps: usize| {
            let mut y = [1.0];
            let mut rk = Rk4::new(1);
            let h = 1.0 / steps as f64;
            for k in 0..steps {
                rk.step(k as f64 * h, h, &mut y, |_, y, d| {
                    d[0] = -y[0];
                    Ok(())
                })
                .unwrap();
            }
            (y[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(20) / err(40);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }
}
