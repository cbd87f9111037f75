//! Points of the probability simplex and Euclidean projection onto it.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|Σ m_i - 1|` accepted by [`SimplexPoint::new`].
pub const SUM_TOLERANCE: f64 = 1e-12;

/// A distribution of mass over the `N` nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Simplex("no coordinates".into()));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Simplex(format!(
                "coordinate {} is {} (must be finite and >= 0)",
                i + 1,
                coords[i]
            )));
        }
        let total = compensated_sum(&coords);
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Simplex(format!("coordinates sum to {total}, not 1")));
        }
        Ok(Self(coords))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn vertex(n: usize, node: usize) -> Self {
        let mut coords = vec![0.0; n];
        coords[node] = 1.0;
        Self(coords)
    }

    /// Uniform sample from the simplex (flat Dirichlet).
    pub fn sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total = compensated_sum(&draws);
        project_to_simplex(&draws.iter().map(|d| d / total).collect::<Vec<_>>())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for SimplexPoint {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexPoint> for Vec<f64> {
    fn from(p: SimplexPoint) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for SimplexPoint {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Euclidean projection onto `{m >= 0, Σ m = 1}` by sort-and-threshold.
///
/// Non-finite coordinates are treated as follows: `NaN` and `-inf` get no
/// mass, and if any coordinate is `+inf` the mass is split evenly among those.
pub fn project_to_simplex(x: &[f64]) -> SimplexPoint {
    let n = x.len();
    assert!(n > 0, "cannot project an empty vector");
    if x.contains(&f64::INFINITY) {
        let hits = x.iter().filter(|v| **v == f64::INFINITY).count() as f64;
        return SimplexPoint(
            x.iter()
                .map(|v| if *v == f64::INFINITY { 1.0 / hits } else { 0.0 })
                .collect(),
        );
    }
    let clean: Vec<f64> = x
        .iter()
        .map(|v| if v.is_finite() { *v } else { f64::MIN / 4.0 })
        .collect();

    let mut sorted = clean.clone();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut prefix = 0.0;
    let mut tau = 0.0;
    for (j, &v) in sorted.iter().enumerate() {
        prefix += v;
        let candidate = (prefix - 1.0) / (j + 1) as f64;
        if v - candidate > 0.0 {
            tau = candidate;
        } else {
            break;
        }
    }
    let mut m: Vec<f64> = clean.iter().map(|v| (v - tau).max(0.0)).collect();

    // Put the rounding residue on the largest coordinate so the sum is exact.
    let (imax, _) = m
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let others: Vec<f64> = m
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != imax)
        .map(|(_, v)| *v)
        .collect();
    m[imax] = (1.0 - compensated_sum(&others)).max(0.0);
    SimplexPoint(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Brute force over a fine grid of `P_2` for `min |x - m|^2`.
    fn brute_force_two(x: [f64; 2]) -> [f64; 2] {
        let steps = 1_000_000;
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for k in 0..=steps {
            let a = k as f64 / steps as f64;
            let d = (x[0] - a).powi(2) + (x[1] - (1.0 - a)).powi(2);
            if d < best.0 {
                best = (d, [a, 1.0 - a]);
            }
        }
        best.1
    }

    #[test]
    fn projection_examples() {
        assert!(close(project_to_simplex(&[0.5, 0.5]).as_slice(), &[0.5, 0.5], 1e-12));
        assert!(close(project_to_simplex(&[0.6, 0.6]).as_slice(), &[0.5, 0.5], 1e-12));
        let oracle = brute_force_two([1.2, -0.2]);
        assert!(close(&oracle, &[1.0, 0.0], 1e-6));
        assert!(close(project_to_simplex(&[1.2, -0.2]).as_slice(), &oracle, 1e-6));
    }

    #[test]
    fn projection_matches_brute_force_on_p2() {
        for x in [[0.3, 0.1], [2.0, 1.0], [-1.0, -3.0], [0.25, 0.95]] {
            let p = project_to_simplex(&x);
            assert!(close(p.as_slice(), &brute_force_two(x), 2e-6), "{x:?}");
        }
    }

    #[test]
    fn simplex_point_validation() {
        assert!(SimplexPoint::new(vec![0.5, 0.5]).is_ok());
        assert!(SimplexPoint::new(vec![0.5, 0.4]).is_err());
        assert!(SimplexPoint::new(vec![1.1, -0.1]).is_err());
        assert!(SimplexPoint::new(vec![f64::NAN, 1.0]).is_err());
        assert!(SimplexPoint::new(vec![]).is_err());
    }

    #[test]
    fn non_finite_inputs() {
        let p = project_to_simplex(&[f64::NAN, 0.3]);
        assert!(close(p.as_slice(), &[0.0, 1.0], 1e-15));
        let p = project_to_simplex(&[f64::INFINITY, 0.3, f64::INFINITY]);
        assert!(close(p.as_slice(), &[0.5, 0.0, 0.5], 1e-15));
    }

    #[test]
    fn idempotent_and_exact_sum_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.random_range(1..8);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = project_to_simplex(&x);
            let q = project_to_simplex(p.as_slice());
            assert!(close(p.as_slice(), q.as_slice(), 1e-12));
            assert!(p.as_slice().iter().all(|v| *v >= 0.0));
            assert!((compensated_sum(p.as_slice()) - 1.0).abs() <= 2.0 * f64::EPSILON);
        }
    }

    #[test]
    fn samples_are_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = SimplexPoint::sample(3, &mut rng);
            assert!(SimplexPoint::new(p.as_slice().to_vec()).is_ok());
        }
    }
}
