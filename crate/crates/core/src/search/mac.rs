//! Surrogate-guided proposals: perturb the incumbent with gene-wise rates
//! proportional to learned feature weights and keep the trial the RBF
//! surrogate ranks best.

use super::rbf::RbfSurrogate;
use crate::space::{gene_alphabets, CanonicalKey, Genotype, PenaltyConfig, NUM_GENES};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacConfig {
    /// Trial genotypes scored by the surrogate per proposal.
    pub trials: usize,
    /// Expected number of mutated genes per trial.
    pub mutation_rate: f64,
    /// Share of uniform weight mixed into the feature weights so that no
    /// gene is frozen for good.
    pub floor: f64,
    /// Fraction of the evaluation budget spent on uniform warm-up proposals.
    pub warmup_fraction: f64,
    /// Largest surrogate fit; the cheapest records are kept.
    pub max_centers: usize,
}

impl Default for MacConfig {
    fn default() -> Self {
        MacConfig {
            trials: 10_000,
            mutation_rate: 1.0,
            floor: 0.05,
            warmup_fraction: 0.5,
            max_centers: 1000,
        }
    }
}

/// Nonnegative per-gene weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWeights(Vec<f64>);

impl FeatureWeights {
    pub fn uniform() -> Self {
        FeatureWeights(vec![1.0 / NUM_GENES as f64; NUM_GENES])
    }

    /// Normalizes `raw`; all-zero input gives uniform weights.
    pub fn from_raw(raw: Vec<f64>) -> Self {
        assert_eq!(raw.len(), NUM_GENES, "one weight per gene");
        assert!(raw.iter().all(|w| *w >= 0.0), "weights must be nonnegative");
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            FeatureWeights(raw.into_iter().map(|w| w / total).collect())
        } else {
            Self::uniform()
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Weights mixed with a uniform share `floor`.
    pub fn with_floor(&self, floor: f64) -> Self {
        let u = 1.0 / NUM_GENES as f64;
        FeatureWeights(self.0.iter().map(|w| (1.0 - floor) * w + floor * u).collect())
    }
}

/// Labels the lower-cost half of `samples` promising and weights each gene
/// by the absolute difference of its mean unit-scaled value between the
/// promising and non-promising halves. Fewer than four samples, identical
/// costs or identical distributions give uniform weights.
pub fn update_feature_weights(samples: &[(Genotype, f64)]) -> FeatureWeights {
    if samples.len() < 4 {
        return FeatureWeights::uniform();
    }
    let first = samples[0].1;
    if samples.iter().all(|(_, c)| *c == first) {
        return FeatureWeights::uniform();
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].1.total_cmp(&samples[b].1).then(a.cmp(&b)));
    let half = samples.len() / 2;
    let mean = |idx: &[usize]| {
        let mut m = vec![0.0; NUM_GENES];
        for &i in idx {
            for (acc, v) in m.iter_mut().zip(samples[i].0.to_unit_vector()) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= idx.len() as f64);
        m
    };
    let good = mean(&order[..half]);
    let bad = mean(&order[half..]);
    FeatureWeights::from_raw(good.iter().zip(&bad).map(|(a, b)| (a - b).abs()).collect())
}

/// Mutates each gene of `base` with probability `min(1, rate * w_g)`; a
/// mutated gene takes a different value uniformly. If no gene fires, one
/// gene drawn by weight is mutated so every trial differs from `base`.
pub fn perturb<R: Rng + ?Sized>(base: &Genotype, weights: &FeatureWeights, rate: f64, rng: &mut R) -> Genotype {
    let alphabets = gene_alphabets();
    let mut genes = base.genes();
    let w = weights.as_slice();
    let mut fired = false;
    for g in 0..NUM_GENES {
        if rng.random::<f64>() < (rate * w[g]).min(1.0) {
            genes[g] = mutate(genes[g], alphabets[g], rng);
            fired = true;
        }
    }
    if !fired {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = NUM_GENES - 1;
        for (g, wg) in w.iter().enumerate() {
            acc += wg;
            if u < acc {
                pick = g;
                break;
            }
        }
        genes[pick] = mutate(genes[pick], alphabets[pick], rng);
    }
    Genotype::from_genes(&genes).expect("mutation stays within alphabets")
}

fn mutate<R: Rng + ?Sized>(value: u8, alphabet: u8, rng: &mut R) -> u8 {
    let shift = rng.random_range(1..alphabet);
    (value + shift) % alphabet
}

/// Generates `cfg.trials` perturbations of `incumbent` and returns the valid
/// one with the lowest surrogate prediction whose canonical key is not in
/// `seen`, or `None` if there is no such trial.
pub fn mac_propose<R: Rng + ?Sized>(
    incumbent: &Genotype,
    surrogate: &RbfSurrogate,
    weights: &FeatureWeights,
    seen: &HashSet<CanonicalKey>,
    penalty: PenaltyConfig,
    cfg: &MacConfig,
    rng: &mut R,
) -> Option<Genotype> {
    let w = weights.with_floor(cfg.floor);
    let mut tried = HashSet::new();
    let mut scored: Vec<(f64, Genotype)> = Vec::new();
    for _ in 0..cfg.trials {
        let trial = perturb(incumbent, &w, cfg.mutation_rate, rng);
        if tried.insert(trial) && trial.decode().validate(&penalty).is_valid() {
            scored.push((surrogate.predict(&trial.to_unit_vector()), trial));
        }
    }
    // Stable sort keeps generation order among equal scores.
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    scored
        .into_iter()
        .map(|(_, g)| g)
        .find(|g| !seen.contains(&g.canonical_key()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_sum_to_one() {
        let w = FeatureWeights::from_raw((0..NUM_GENES).map(|g| g as f64).collect());
        assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let f = w.with_floor(0.3);
        assert!((f.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(FeatureWeights::from_raw(vec![0.0; NUM_GENES]), FeatureWeights::uniform());
    }

    #[test]
    fn equal_costs_give_uniform_weights() {
        let s: Vec<(Genotype, f64)> = (0..6).map(|k| (crate::space::sample_uniform(k), 2.0)).collect();
        assert_eq!(update_feature_weights(&s), FeatureWeights::uniform());
        assert_eq!(update_feature_weights(&s[..3]), FeatureWeights::uniform());
    }

    #[test]
    fn trials_always_differ_from_the_incumbent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = crate::space::sample_uniform(2);
        let w = FeatureWeights::uniform();
        for _ in 0..1000 {
            assert_ne!(perturb(&base, &w, 0.1, &mut rng), base);
        }
    }
}
