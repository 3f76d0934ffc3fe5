//! Cubic radial basis interpolant with a linear polynomial tail.

use nalgebra::{DMatrix, DVector};

/// Diagonal shift used when the plain interpolation system is singular.
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SurrogateError {
    #[error("need at least {needed} centers, got {got}")]
    TooFewCenters { needed: usize, got: usize },
    #[error("centers and targets disagree: {0}")]
    Shape(String),
    #[error("interpolation system is singular even with ridge regularization")]
    Singular,
}

/// Cubic kernel `phi(r) = r^3`.
pub fn phi(r: f64) -> f64 {
    r * r * r
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbfSurrogate {
    centers: Vec<Vec<f64>>,
    lambda: DVector<f64>,
    /// `[c_0, c_1, ..., c_d]`: constant then linear coefficients.
    tail: DVector<f64>,
    ridge: bool,
}

#[derive(Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        self.comp += if self.sum.abs() >= v.abs() {
            (self.sum - t) + v
        } else {
            (v - t) + self.sum
        };
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl RbfSurrogate {
    /// Solves `[[Psi, P], [P^T, 0]] [lambda; c] = [y; 0]`. If that system is
    /// singular (for example when the centers do not span the space) the
    /// diagonal is shifted by `RIDGE` and the fit retried.
    pub fn fit(centers: &[Vec<f64>], y: &[f64]) -> Result<Self, SurrogateError> {
        let n = centers.len();
        let d = centers.first().map_or(0, Vec::len);
        if n < d + 2 {
            return Err(SurrogateError::TooFewCenters { needed: d + 2, got: n });
        }
        if y.len() != n {
            return Err(SurrogateError::Shape(format!("{n} centers but {} targets", y.len())));
        }
        if centers.iter().any(|c| c.len() != d) {
            return Err(SurrogateError::Shape("centers differ in dimension".into()));
        }
        let m = n + d + 1;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in i + 1..n {
                let v = phi(distance(&centers[i], &centers[j]));
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
            a[(i, n)] = 1.0;
            a[(n, i)] = 1.0;
            for k in 0..d {
                a[(i, n + 1 + k)] = centers[i][k];
                a[(n + 1 + k, i)] = centers[i][k];
            }
        }
        let mut rhs = DVector::<f64>::zeros(m);
        rhs.rows_mut(0, n).copy_from_slice(y);

        // LU with a few rounds of iterative refinement; accept a solution
        // whose normwise backward error is small.
        let solve = |a: DMatrix<f64>| -> Option<DVector<f64>> {
            let lu = a.clone().lu();
            let mut x = lu.solve(&rhs)?;
            for _ in 0..3 {
                let r = &rhs - &a * &x;
                x += lu.solve(&r)?;
            }
            let residual = (&a * &x - &rhs).amax();
            let scale = a.abs().column_sum().amax() * x.amax() + rhs.amax();
            (x.iter().all(|v| v.is_finite()) && residual <= 1e-10 * scale).then_some(x)
        };
        let (x, ridge) = match solve(a.clone()) {
            Some(x) => (x, false),
            None => {
                for i in 0..n {
                    a[(i, i)] += RIDGE;
                }
                for i in n..m {
                    a[(i, i)] -= RIDGE;
                }
                (solve(a).ok_or(SurrogateError::Singular)?, true)
            }
        };
        Ok(RbfSurrogate {
            centers: centers.to_vec(),
            lambda: x.rows(0, n).into_owned(),
            tail: x.rows(n, d + 1).into_owned(),
            ridge,
        })
    }

    /// Evaluates the interpolant with compensated summation, since the
    /// weights of closely spaced centers cancel.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut sum = Neumaier::default();
        for (c, l) in self.centers.iter().zip(self.lambda.iter()) {
            sum.add(l * phi(distance(c, x)));
        }
        sum.add(self.tail[0]);
        for (a, b) in x.iter().zip(self.tail.iter().skip(1)) {
            sum.add(a * b);
        }
        sum.value()
    }

    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }

    /// Whether the ridge-regularized system was needed.
    pub fn used_ridge(&self) -> bool {
        self.ridge
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cubic_kernel() {
        assert_eq!(phi(2.0), 8.0);
        assert_eq!(phi(0.0), 0.0);
    }

    #[test]
    fn interpolates_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random()).collect()).collect();
        let y: Vec<f64> = centers.iter().map(|c| c[0].sin() + c[1] * c[2]).collect();
        let s = RbfSurrogate::fit(&centers, &y).unwrap();
        assert!(!s.used_ridge());
        for (c, v) in centers.iter().zip(&y) {
            assert!((s.predict(c) - v).abs() < 1e-8);
        }
    }

    #[test]
    fn reproduces_linear_functions_everywhere() {
        let centers: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let f = |x: &[f64]| 2.0 - x[0] + 3.0 * x[1];
        let y: Vec<f64> = centers.iter().map(|c| f(c)).collect();
        let s = RbfSurrogate::fit(&centers, &y).unwrap();
        assert!((s.predict(&[2.5, 0.7]) - f(&[2.5, 0.7])).abs() < 1e-9);
    }

    #[test]
    fn degenerate_centers_use_ridge() {
        // Collinear points in 2-D do not determine the linear tail.
        let centers: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, i as f64]).collect();
        let y = vec![0.0, 1.0, 4.0, 9.0, 16.0];
        let s = RbfSurrogate::fit(&centers, &y).unwrap();
        assert!(s.used_ridge());
        for (c, v) in centers.iter().zip(&y) {
            assert!((s.predict(c) - v).abs() < 1e-5);
        }
    }

    #[test]
    fn too_few_centers() {
        let err = RbfSurrogate::fit(&[vec![0.0, 0.0], vec![1.0, 0.0]], &[0.0, 1.0]).unwrap_err();
        assert_eq!(err, SurrogateError::TooFewCenters { needed: 4, got: 2 });
    }
}
