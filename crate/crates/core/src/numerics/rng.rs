//! Seedable, splittable random sampling.
//!
//! One generator (ChaCha8) is used everywhere; identical `Seed` values give
//! identical sample streams on a single worker. Sub-streams for task
//! batches are derived with [`SeedStream::split`] so generation order stays
//! well defined.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed(pub u64);

/// Supported sampling distributions, unit parameters unless noted.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Dist {
    Uniform(f64, f64),
    Normal,
    Exponential,
    Laplace,
}

#[derive(Clone, Debug)]
pub struct SeedStream {
    rng: ChaCha8Rng,
}

impl SeedStream {
    pub fn new(seed: Seed) -> Self {
        SeedStream {
            rng: ChaCha8Rng::seed_from_u64(seed.0),
        }
    }

    /// Derive an independent sub-stream, advancing this one.
    pub fn split(&mut self) -> SeedStream {
        SeedStream {
            rng: ChaCha8Rng::seed_from_u64(self.rng.next_u64()),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform_scalar(&mut self, a: f64, b: f64) -> f64 {
        a + (b - a) * self.rng.gen::<f64>()
    }

    pub fn normal_scalar(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn sample(&mut self, dist: Dist, rows: usize, cols: usize) -> Result<Matrix> {
        match dist {
            Dist::Uniform(a, b) if a >= b => {
                return Err(Error::InvalidParam(format!(
                    "uniform bounds require a < b, got [{a}, {b})"
                )))
            }
            _ => {}
        }
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = match dist {
                Dist::Uniform(a, b) => a + (b - a) * self.rng.gen::<f64>(),
                Dist::Normal => StandardNormal.sample(&mut self.rng),
                Dist::Exponential => Exp1.sample(&mut self.rng),
                Dist::Laplace => {
                    // inverse CDF of Laplace(0, 1)
                    let u: f64 = self.rng.gen::<f64>() - 0.5;
                    -u.signum() * (1.0 - 2.0 * u.abs()).ln()
                }
            };
        }
        Ok(m)
    }

    pub fn uniform(&mut self, a: f64, b: f64, rows: usize, cols: usize) -> Matrix {
        self.sample(Dist::Uniform(a, b), rows, cols).expect("a < b")
    }

    pub fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        self.sample(Dist::Normal, rows, cols).expect("no params")
    }

    /// Normal(0, std) truncated at ±2 std, by rejection.
    pub fn trunc_normal(&mut self, std: f64, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    *v = std * z;
                    break;
                }
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeedStream::new(Seed(7));
        let mut b = SeedStream::new(Seed(7));
        let ma = a.sample(Dist::Normal, 5, 5).unwrap();
        let mb = b.sample(Dist::Normal, 5, 5).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn split_streams_diverge() {
        let mut a = SeedStream::new(Seed(7));
        let mut s1 = a.split();
        let mut s2 = a.split();
        assert_ne!(
            s1.sample(Dist::Normal, 3, 3).unwrap(),
            s2.sample(Dist::Normal, 3, 3).unwrap()
        );
    }

    #[test]
    fn invalid_uniform_bounds_rejected() {
        let mut s = SeedStream::new(Seed(0));
        assert!(s.sample(Dist::Uniform(1.0, -1.0), 2, 2).is_err());
    }

    #[test]
    fn uniform_moments() {
        let mut s = SeedStream::new(Seed(42));
        let m = s.uniform(-1.0, 1.0, 1000, 1000);
        let mean = m.mean();
        let var = m.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / (m.data().len() - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0 / 3.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn normal_variance() {
        let mut s = SeedStream::new(Seed(43));
        let m = s.standard_normal(1000, 1000);
        let var = m.data().iter().map(|x| x * x).sum::<f64>() / m.data().len() as f64;
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn laplace_and_exponential_moments() {
        let mut s = SeedStream::new(Seed(44));
        let lap = s.sample(Dist::Laplace, 500, 1000).unwrap();
        let var = lap.data().iter().map(|x| x * x).sum::<f64>() / lap.data().len() as f64;
        assert!((var - 2.0).abs() < 0.05, "laplace var {var}");
        let exp = s.sample(Dist::Exponential, 500, 1000).unwrap();
        assert!((exp.mean() - 1.0).abs() < 0.01, "exp mean {}", exp.mean());
    }

    #[test]
    fn trunc_normal_bounded() {
        let mut s = SeedStream::new(Seed(45));
        let m = s.trunc_normal(0.002, 100, 100);
        assert!(m.max_abs() <= 0.004 + 1e-15);
    }
}
