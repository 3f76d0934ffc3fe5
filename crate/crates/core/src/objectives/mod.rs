//! Differentiable objectives: shifted/rotated benchmark families, the planar
//! AB off-lattice protein energy, and two smooth quadratics used for smoke
//! tests and transfer experiments (not benchmark functions).
//!
//! Objectives are addressed by text ids: `F<k>:<D>:<seed>`, `sphere:<D>`,
//! `quad:<D>:<seed>` and `protein:<PDB-ID>`.

mod cec;
mod protein;

pub use cec::{BenchmarkInstance, Family};
pub use protein::{pair_coefficient, parse_table, protein_table, ProteinModel, Species};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("invalid objective id `{0}`")]
    BadId(String),
    #[error("unknown benchmark family `{0}`")]
    UnknownFamily(String),
    #[error("unknown protein `{0}`")]
    UnknownProtein(String),
    #[error("dimension {got} not allowed: {reason}")]
    Dimension { got: usize, reason: String },
    #[error("angle {value} at index {index} outside (-180, 180]")]
    Domain { index: usize, value: f64 },
    #[error("monomers {i} and {j} overlap; energy gradient unavailable")]
    Overlap { i: usize, j: usize },
    #[error("expected {expected} coordinates, got {got}")]
    Arity { expected: usize, got: usize },
}

/// Pure function with an analytic gradient.
pub trait Landscape: Send + Sync + fmt::Debug {
    fn value(&self, x: &[f64]) -> Result<f64, ObjectiveError>;
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError>;

    /// Known global minimizer, when the construction fixes one.
    fn optimum(&self) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ObjectiveSpec {
    Benchmark { family: Family, dim: usize, seed: u64 },
    Sphere { dim: usize },
    ShiftedQuadratic { dim: usize, seed: u64 },
    Protein { id: String },
}

impl ObjectiveSpec {
    /// Same problem family at another dimension. Proteins have a fixed size.
    pub fn with_dim(&self, dim: usize) -> Result<ObjectiveSpec, ObjectiveError> {
        Ok(match self {
            ObjectiveSpec::Benchmark { family, seed, .. } => ObjectiveSpec::Benchmark {
                family: *family,
                dim,
                seed: *seed,
            },
            ObjectiveSpec::Sphere { .. } => ObjectiveSpec::Sphere { dim },
            ObjectiveSpec::ShiftedQuadratic { seed, .. } => {
                ObjectiveSpec::ShiftedQuadratic { dim, seed: *seed }
            }
            ObjectiveSpec::Protein { .. } => {
                return Err(ObjectiveError::Dimension {
                    got: dim,
                    reason: "protein dimensions are fixed by the sequence".into(),
                })
            }
        })
    }

    pub fn build(&self) -> Result<Objective, ObjectiveError> {
        Objective::from_spec(self.clone())
    }
}

impl fmt::Display for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveSpec::Benchmark { family, dim, seed } => {
                write!(f, "F{}:{}:{}", family.number(), dim, seed)
            }
            ObjectiveSpec::Sphere { dim } => write!(f, "sphere:{dim}"),
            ObjectiveSpec::ShiftedQuadratic { dim, seed } => write!(f, "quad:{dim}:{seed}"),
            ObjectiveSpec::Protein { id } => write!(f, "protein:{id}"),
        }
    }
}

impl FromStr for ObjectiveSpec {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ObjectiveError::BadId(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| t.parse::<u64>().map_err(|_| bad());
        match parts.as_slice() {
            ["sphere", d] => Ok(ObjectiveSpec::Sphere {
                dim: num(d)? as usize,
            }),
            ["quad", d, seed] => Ok(ObjectiveSpec::ShiftedQuadratic {
                dim: num(d)? as usize,
                seed: num(seed)?,
            }),
            ["protein", id] => Ok(ObjectiveSpec::Protein { id: id.to_string() }),
            [fam, d, seed] if fam.starts_with('F') => Ok(ObjectiveSpec::Benchmark {
                family: fam.parse()?,
                dim: num(d)? as usize,
                seed: num(seed)?,
            }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ObjectiveSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ObjectiveSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A box-bounded objective with an evaluation counter.
///
/// The counter is atomic so concurrent trainers can share one objective.
#[derive(Debug)]
pub struct Objective {
    spec: ObjectiveSpec,
    lower: Vec<f64>,
    upper: Vec<f64>,
    landscape: Box<dyn Landscape>,
    evaluations: AtomicU64,
}

impl Objective {
    pub fn new(
        spec: ObjectiveSpec,
        lower: Vec<f64>,
        upper: Vec<f64>,
        landscape: Box<dyn Landscape>,
    ) -> Self {
        assert_eq!(lower.len(), upper.len());
        Objective {
            spec,
            lower,
            upper,
            landscape,
            evaluations: AtomicU64::new(0),
        }
    }

    pub fn from_spec(spec: ObjectiveSpec) -> Result<Self, ObjectiveError> {
        match &spec {
            ObjectiveSpec::Benchmark { family, dim, seed } => {
                let inst = BenchmarkInstance::new(*family, *dim, *seed)?;
                let d = *dim;
                Ok(Objective::new(
                    spec,
                    vec![-100.0; d],
                    vec![100.0; d],
                    Box::new(inst),
                ))
            }
            ObjectiveSpec::Sphere { dim } => {
                check_dim(*dim, 1)?;
                let d = *dim;
                Ok(Objective::new(
                    spec,
                    vec![-100.0; d],
                    vec![100.0; d],
                    Box::new(ShiftedQuadratic {
                        center: vec![0.0; d],
                    }),
                ))
            }
            ObjectiveSpec::ShiftedQuadratic { dim, seed } => {
                check_dim(*dim, 1)?;
                let (d, seed) = (*dim, *seed);
                Ok(Objective::new(
                    spec,
                    vec![-100.0; d],
                    vec![100.0; d],
                    Box::new(ShiftedQuadratic::seeded(d, seed)),
                ))
            }
            ObjectiveSpec::Protein { id } => {
                let model = ProteinModel::by_id(id)?;
                let d = model.num_angles();
                Ok(Objective::new(
                    spec,
                    vec![-180.0; d],
                    vec![180.0; d],
                    Box::new(model),
                ))
            }
        }
    }

    pub fn spec(&self) -> &ObjectiveSpec {
        &self.spec
    }

    pub fn id(&self) -> String {
        self.spec.to_string()
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn landscape(&self) -> &dyn Landscape {
        self.landscape.as_ref()
    }

    fn check_arity(&self, x: &[f64]) -> Result<(), ObjectiveError> {
        if x.len() != self.dim() {
            return Err(ObjectiveError::Arity {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Counted evaluation.
    pub fn value(&self, x: &[f64]) -> Result<f64, ObjectiveError> {
        self.check_arity(x)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.landscape.value(x)
    }

    /// Counted evaluation with the analytic gradient.
    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        self.check_arity(x)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.landscape.value_and_gradient(x)
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }
}

fn check_dim(dim: usize, min: usize) -> Result<(), ObjectiveError> {
    if dim < min {
        return Err(ObjectiveError::Dimension {
            got: dim,
            reason: format!("must be at least {min}"),
        });
    }
    Ok(())
}

/// `sum (x_i - c_i)^2`; with `c = 0` this is the sphere.
#[derive(Debug, Clone)]
pub struct ShiftedQuadratic {
    pub center: Vec<f64>,
}

impl ShiftedQuadratic {
    /// Centers drawn from one seeded stream, so lower-dimensional instances
    /// are coordinate prefixes of higher-dimensional ones.
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0bad_cafe);
        ShiftedQuadratic {
            center: (0..dim).map(|_| rng.random_range(-80.0..80.0)).collect(),
        }
    }
}

impl Landscape for ShiftedQuadratic {
    fn value(&self, x: &[f64]) -> Result<f64, ObjectiveError> {
        Ok(x.iter()
            .zip(&self.center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum())
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        let g = x
            .iter()
            .zip(&self.center)
            .map(|(a, c)| 2.0 * (a - c))
            .collect();
        Ok((self.value(x)?, g))
    }

    fn optimum(&self) -> Option<Vec<f64>> {
        Some(self.center.clone())
    }
}

/// Largest `|fd_i - g_i| / max(1, |g_i|)` over coordinates, using central
/// differences of step `h`. Uses the uncounted landscape.
pub fn finite_diff_oracle(
    landscape: &dyn Landscape,
    x: &[f64],
    h: f64,
) -> Result<f64, ObjectiveError> {
    let (_, g) = landscape.value_and_gradient(x)?;
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = landscape.value(&xp)?;
        xp[i] = x[i] - h;
        let down = landscape.value(&xp)?;
        xp[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1.0));
    }
    Ok(worst)
}
