//! Shifted and rotated benchmark families: `f(x) = base(R (x - o))`.

use super::{Landscape, ObjectiveError};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

const SCHWEFEL_OFFSET: f64 = 420.9687462275036;
const SCHWEFEL_PEAK: f64 = 418.9828872724338;
const LUNACEK_MU0: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    BentCigar,
    Zakharov,
    Rosenbrock,
    Rastrigin,
    ExpandedSchaffer,
    LunacekBiRastrigin,
    NonContinuousRastrigin,
    Levy,
    Schwefel,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::BentCigar,
        Family::Zakharov,
        Family::Rosenbrock,
        Family::Rastrigin,
        Family::ExpandedSchaffer,
        Family::LunacekBiRastrigin,
        Family::NonContinuousRastrigin,
        Family::Levy,
        Family::Schwefel,
    ];

    pub fn number(self) -> u32 {
        match self {
            Family::BentCigar => 1,
            Family::Zakharov => 3,
            Family::Rosenbrock => 4,
            Family::Rastrigin => 5,
            Family::ExpandedSchaffer => 6,
            Family::LunacekBiRastrigin => 7,
            Family::NonContinuousRastrigin => 8,
            Family::Levy => 9,
            Family::Schwefel => 10,
        }
    }

    pub fn from_number(k: u32) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.number() == k)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::BentCigar => "bent-cigar",
            Family::Zakharov => "zakharov",
            Family::Rosenbrock => "rosenbrock",
            Family::Rastrigin => "rastrigin",
            Family::ExpandedSchaffer => "expanded-schaffer",
            Family::LunacekBiRastrigin => "lunacek-bi-rastrigin",
            Family::NonContinuousRastrigin => "noncontinuous-rastrigin",
            Family::Levy => "levy",
            Family::Schwefel => "schwefel",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F{}", self.number())
    }
}

impl FromStr for Family {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || ObjectiveError::UnknownFamily(s.to_string());
        if let Some(k) = s.strip_prefix('F') {
            let k: u32 = k.parse().map_err(|_| unknown())?;
            return Family::from_number(k).ok_or_else(unknown);
        }
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(unknown)
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkInstance {
    family: Family,
    shift: DVector<f64>,
    rotation: DMatrix<f64>,
}

impl BenchmarkInstance {
    /// Seeded instance: shift uniform in `[-80, 80]^D`, rotation from the QR
    /// factor of a Gaussian matrix with column signs fixed by `diag(R) > 0`.
    pub fn new(family: Family, dim: usize, seed: u64) -> Result<Self, ObjectiveError> {
        if dim < 2 {
            return Err(ObjectiveError::Dimension {
                got: dim,
                reason: "benchmark families need at least 2 dimensions".into(),
            });
        }
        let stream = seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add((family.number() as u64) << 32 | dim as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let shift = DVector::from_fn(dim, |_, _| rng.random_range(-80.0..80.0));
        let gauss = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = gauss.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..dim {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        Ok(BenchmarkInstance {
            family,
            shift,
            rotation: q,
        })
    }

    /// Instance with an explicit shift and rotation.
    pub fn with_transform(family: Family, shift: Vec<f64>, rotation: DMatrix<f64>) -> Self {
        assert_eq!(rotation.nrows(), shift.len());
        assert_eq!(rotation.ncols(), shift.len());
        BenchmarkInstance {
            family,
            shift: DVector::from_vec(shift),
            rotation,
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn shift(&self) -> &[f64] {
        self.shift.as_slice()
    }

    pub fn rotation(&self) -> &DMatrix<f64> {
        &self.rotation
    }

    fn transform(&self, x: &[f64]) -> Result<DVector<f64>, ObjectiveError> {
        if x.len() != self.dim() {
            return Err(ObjectiveError::Arity {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(&self.rotation * (DVector::from_column_slice(x) - &self.shift))
    }

    fn base(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
        match self.family {
            Family::BentCigar => bent_cigar(z, grad),
            Family::Zakharov => zakharov(z, grad),
            Family::Rosenbrock => rosenbrock(z, grad),
            Family::Rastrigin => rastrigin(z, grad, false),
            Family::ExpandedSchaffer => expanded_schaffer(z, grad),
            Family::LunacekBiRastrigin => lunacek(z, self.shift.as_slice(), grad),
            Family::NonContinuousRastrigin => rastrigin(z, grad, true),
            Family::Levy => levy(z, grad),
            Family::Schwefel => schwefel(z, grad),
        }
    }
}

impl Landscape for BenchmarkInstance {
    fn value(&self, x: &[f64]) -> Result<f64, ObjectiveError> {
        let z = self.transform(x)?;
        Ok(self.base(z.as_slice(), None))
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        let z = self.transform(x)?;
        let mut gz = vec![0.0; z.len()];
        let f = self.base(z.as_slice(), Some(&mut gz));
        let gx = self.rotation.tr_mul(&DVector::from_vec(gz));
        Ok((f, gx.as_slice().to_vec()))
    }

    fn optimum(&self) -> Option<Vec<f64>> {
        Some(self.shift.as_slice().to_vec())
    }
}

fn bent_cigar(z: &[f64], grad: Option<&mut [f64]>) -> f64 {
    if let Some(g) = grad {
        for (i, (gi, zi)) in g.iter_mut().zip(z).enumerate() {
            *gi = if i == 0 { 2.0 * zi } else { 2e6 * zi };
        }
    }
    z[0] * z[0] + 1e6 * z[1..].iter().map(|v| v * v).sum::<f64>()
}

fn zakharov(z: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let s1: f64 = z.iter().map(|v| v * v).sum();
    let s2: f64 = z
        .iter()
        .enumerate()
        .map(|(i, v)| 0.5 * (i + 1) as f64 * v)
        .sum();
    if let Some(g) = grad {
        let outer = 2.0 * s2 + 4.0 * s2.powi(3);
        for (i, (gi, zi)) in g.iter_mut().zip(z).enumerate() {
            *gi = 2.0 * zi + outer * 0.5 * (i + 1) as f64;
        }
    }
    s1 + s2 * s2 + s2.powi(4)
}

fn rosenbrock(z: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let c = 2.048 / 100.0;
    let u: Vec<f64> = z.iter().map(|v| c * v + 1.0).collect();
    let mut f = 0.0;
    let mut gu = vec![0.0; u.len()];
    for i in 0..u.len() - 1 {
        let a = u[i] * u[i] - u[i + 1];
        let b = u[i] - 1.0;
        f += 100.0 * a * a + b * b;
        gu[i] += 400.0 * u[i] * a + 2.0 * b;
        gu[i + 1] -= 200.0 * a;
    }
    if let Some(g) = grad {
        for (gi, v) in g.iter_mut().zip(&gu) {
            *gi = c * v;
        }
    }
    f
}

fn rastrigin(z: &[f64], grad: Option<&mut [f64]>, rounded: bool) -> f64 {
    let c = 5.12 / 100.0;
    let mut f = 0.0;
    let mut g = grad;
    for (i, zi) in z.iter().enumerate() {
        let mut u = c * zi;
        let mut slope = c;
        if rounded && u.abs() > 0.5 {
            u = (2.0 * u).round() / 2.0;
            slope = 0.0;
        }
        f += u * u - 10.0 * (2.0 * PI * u).cos() + 10.0;
        if let Some(g) = g.as_deref_mut() {
            g[i] = slope * (2.0 * u + 20.0 * PI * (2.0 * PI * u).sin());
        }
    }
    f
}

fn expanded_schaffer(z: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let d = z.len();
    let mut f = 0.0;
    let mut g = grad;
    if let Some(g) = g.as_deref_mut() {
        g.fill(0.0);
    }
    for i in 0..d {
        let j = (i + 1) % d;
        let (a, b) = (z[i], z[j]);
        let s = a * a + b * b;
        let t = s.sqrt();
        let h = t.sin().powi(2);
        let q = 1.0 + 0.001 * s;
        f += 0.5 + (h - 0.5) / (q * q);
        if let Some(g) = g.as_deref_mut() {
            // d sin^2(sqrt s)/ds = sin(2 sqrt s) / (2 sqrt s)
            let dh = if t < 1e-8 {
                1.0 - 2.0 * s / 3.0
            } else {
                (2.0 * t).sin() / (2.0 * t)
            };
            let ds = dh / (q * q) - 0.002 * (h - 0.5) / (q * q * q);
            g[i] += ds * 2.0 * a;
            g[j] += ds * 2.0 * b;
        }
    }
    f
}

fn lunacek(z: &[f64], shift: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let d = z.len() as f64;
    let s = 1.0 - 1.0 / (2.0 * (d + 20.0).sqrt() - 8.2);
    let mu1 = -((LUNACEK_MU0 * LUNACEK_MU0 - 1.0) / s).sqrt();
    let c = 0.1;
    let mut t0 = 0.0;
    let mut t1 = 0.0;
    let mut ripple = 0.0;
    let xs: Vec<(f64, f64)> = z
        .iter()
        .zip(shift)
        .map(|(zi, oi)| {
            let sign = if *oi < 0.0 { -1.0 } else { 1.0 };
            (sign, 2.0 * sign * c * zi + LUNACEK_MU0)
        })
        .collect();
    for (zi, (_, xh)) in z.iter().zip(&xs) {
        t0 += (xh - LUNACEK_MU0).powi(2);
        t1 += (xh - mu1).powi(2);
        ripple += (4.0 * PI * c * zi).cos();
    }
    let t1 = d + s * t1;
    let use_first = t0 <= t1;
    if let Some(g) = grad {
        for (i, (zi, (sign, xh))) in z.iter().zip(&xs).enumerate() {
            let branch = if use_first {
                2.0 * (xh - LUNACEK_MU0)
            } else {
                2.0 * s * (xh - mu1)
            };
            g[i] = branch * 2.0 * sign * c + 40.0 * PI * c * (4.0 * PI * c * zi).sin();
        }
    }
    t0.min(t1) + 10.0 * (d - ripple)
}

fn levy(z: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let d = z.len();
    let w: Vec<f64> = z.iter().map(|v| 1.0 + v / 4.0).collect();
    let mut f = (PI * w[0]).sin().powi(2);
    let mut gw = vec![0.0; d];
    gw[0] = PI * (2.0 * PI * w[0]).sin();
    for i in 0..d - 1 {
        let a = w[i] - 1.0;
        let inner = PI * w[i] + 1.0;
        f += a * a * (1.0 + 10.0 * inner.sin().powi(2));
        gw[i] += 2.0 * a * (1.0 + 10.0 * inner.sin().powi(2)) + a * a * 10.0 * PI * (2.0 * inner).sin();
    }
    let last = w[d - 1] - 1.0;
    let arg = 2.0 * PI * w[d - 1];
    f += last * last * (1.0 + arg.sin().powi(2));
    gw[d - 1] += 2.0 * last * (1.0 + arg.sin().powi(2)) + last * last * 2.0 * PI * (2.0 * arg).sin();
    if let Some(g) = grad {
        for (gi, v) in g.iter_mut().zip(&gw) {
            *gi = v / 4.0;
        }
    }
    f
}

/// `t sin(sqrt|t|)` and its derivative.
fn schwefel_core(t: f64) -> (f64, f64) {
    let r = t.abs().sqrt();
    (t * r.sin(), r.sin() + 0.5 * r * r.cos())
}

fn schwefel(z: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let d = z.len() as f64;
    let c = 10.0;
    let mut total = 0.0;
    let mut g = grad;
    for (i, zi) in z.iter().enumerate() {
        let u = c * zi + SCHWEFEL_OFFSET;
        let (val, du) = if u > 500.0 {
            let m = 500.0 - u % 500.0;
            let (v, dv) = schwefel_core(m);
            let excess = u - 500.0;
            (v - excess * excess / (10000.0 * d), -dv - 2.0 * excess / (10000.0 * d))
        } else if u < -500.0 {
            let m = u.abs() % 500.0 - 500.0;
            let (v, dv) = schwefel_core(m);
            let excess = u + 500.0;
            (v - excess * excess / (10000.0 * d), -dv - 2.0 * excess / (10000.0 * d))
        } else {
            schwefel_core(u)
        };
        total += val;
        if let Some(g) = g.as_deref_mut() {
            g[i] = -c * du;
        }
    }
    SCHWEFEL_PEAK * d - total
}
