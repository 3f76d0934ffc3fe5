//! Architecture search: propose genotypes, train the new ones under a
//! shared evaluation budget, and feed the costs back to the strategy.

pub mod controller;
pub mod mac;
pub mod rbf;

use crate::network::{InputBatch, NetShape, Network, NetworkError};
use crate::objectives::Objective;
use crate::space::{CanonicalKey, Genotype, PenaltyConfig, INVALID_COST_OFFSET};
use crate::trainer::{budgeted_train, StopReason, TrainConfig, TrainError};
use controller::{reward, Controller, ControllerConfig};
use mac::{mac_propose, update_feature_weights, MacConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rbf::RbfSurrogate;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

pub const SEARCH_LOG_SCHEMA: &str = "# neuropt search-log v1";
const SEARCH_LOG_HEADER: &str = "iter,strategy,genotype,canonical_key,cost,evals_spent,cum_evals,best_cost";

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("bad search configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("resume log does not match this search: {0}")]
    Resume(String),
    #[error("search log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Random,
    Rl,
    Mac,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Random, StrategyKind::Rl, StrategyKind::Mac];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::Rl => "rl",
            StrategyKind::Mac => "mac",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = SearchError;
    fn from_str(s: &str) -> Result<Self, SearchError> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SearchError::Config(format!("unknown strategy {s:?} (random, rl, mac)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub strategy: StrategyKind,
    /// Total objective evaluations `T`.
    pub budget: u64,
    pub seed: u64,
    /// Proposals per iteration; they may be trained concurrently.
    pub batch: usize,
    /// Hard cap on iterations, guarding runs where every proposal is a
    /// duplicate or invalid.
    pub max_iterations: usize,
    /// Stop after this many consecutive proposals that train nothing, as
    /// when a converged controller keeps proposing known cells.
    pub max_stale_proposals: usize,
    pub shape: NetShape,
    pub train: TrainConfig,
    pub penalty: PenaltyConfig,
    pub controller: ControllerConfig,
    pub mac: MacConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            strategy: StrategyKind::Random,
            budget: 100_000,
            seed: 0,
            batch: 8,
            max_iterations: 100_000,
            max_stale_proposals: 20_000,
            shape: NetShape::default(),
            train: TrainConfig::default(),
            penalty: PenaltyConfig::default(),
            controller: ControllerConfig::default(),
            mac: MacConfig::default(),
        }
    }
}

impl SearchConfig {
    /// Evaluations in the first training rung of one candidate.
    pub fn rung_evals(&self) -> u64 {
        (self.train.initial_budget * self.shape.num_sol) as u64
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        self.train.validate()?;
        if self.batch == 0 || self.max_iterations == 0 || self.max_stale_proposals == 0 {
            return Err(SearchError::Config(
                "batch, max_iterations and max_stale_proposals must be >= 1".into(),
            ));
        }
        if self.budget < self.rung_evals() {
            return Err(SearchError::Config(format!(
                "budget {} is smaller than one training rung ({} evaluations)",
                self.budget,
                self.rung_evals()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Trained,
    /// Same canonical key as an earlier record; its cost is reused.
    Cached,
    /// Charged the invalid-genotype sentinel without training.
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    /// 1-based proposal index.
    pub iter: usize,
    pub strategy: StrategyKind,
    pub genotype: Genotype,
    pub canonical_key: CanonicalKey,
    pub cost: f64,
    pub evals_spent: u64,
    pub cum_evals: u64,
    pub best_cost: f64,
}

impl SearchRecord {
    pub fn kind(&self) -> RecordKind {
        if self.cost >= INVALID_COST_OFFSET {
            RecordKind::Invalid
        } else if self.evals_spent == 0 {
            RecordKind::Cached
        } else {
            RecordKind::Trained
        }
    }

    /// Epochs trained, counting a truncated final epoch.
    pub fn rung_reached(&self, num_sol: usize) -> u64 {
        self.evals_spent.div_ceil(num_sol.max(1) as u64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchHistory {
    records: Vec<SearchRecord>,
}

impl SearchHistory {
    pub fn records(&self) -> &[SearchRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn cum_evals(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cum_evals)
    }

    /// First record attaining the lowest cost.
    pub fn best(&self) -> Option<&SearchRecord> {
        self.records
            .iter()
            .fold(None, |b: Option<&SearchRecord>, r| match b {
                Some(b) if b.cost <= r.cost => Some(b),
                _ => Some(r),
            })
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub history: SearchHistory,
    pub best_genotype: Option<Genotype>,
    pub best_cost: f64,
    /// Trained network of the best record; `None` when that record was
    /// replayed from a log rather than trained in this run.
    pub best_network: Option<Network>,
}

/// 64-bit mix used to derive independent seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const INPUT_STREAM: u64 = 0x1_0000_0000;

/// Seed of the fixed input batch shared by every candidate of a search.
pub fn input_seed(search_seed: u64) -> u64 {
    mix_seed(search_seed, INPUT_STREAM)
}

/// Weight seed of the candidate proposed at 1-based index `iter`.
pub fn weight_seed(search_seed: u64, iter: usize) -> u64 {
    mix_seed(search_seed, iter as u64)
}

struct Context<'a> {
    records: &'a [SearchRecord],
    seen: &'a HashSet<CanonicalKey>,
    cum_evals: u64,
    budget: u64,
}

trait Strategy {
    fn propose(&mut self, ctx: &Context<'_>, n: usize, rng: &mut ChaCha8Rng) -> Vec<Genotype>;
    /// Costs of the last proposals in order; `None` for proposals that were
    /// dropped because the budget ran out.
    fn observe(&mut self, results: &[(Genotype, Option<f64>)]);
}

struct RandomStrategy;

impl Strategy for RandomStrategy {
    fn propose(&mut self, _: &Context<'_>, n: usize, rng: &mut ChaCha8Rng) -> Vec<Genotype> {
        (0..n).map(|_| Genotype::random(rng)).collect()
    }

    fn observe(&mut self, _: &[(Genotype, Option<f64>)]) {}
}

struct RlStrategy {
    controller: Controller,
    pending: Vec<Vec<u8>>,
}

impl Strategy for RlStrategy {
    fn propose(&mut self, _: &Context<'_>, n: usize, rng: &mut ChaCha8Rng) -> Vec<Genotype> {
        let samples: Vec<_> = (0..n).map(|_| self.controller.sample(rng)).collect();
        self.pending = samples.iter().map(|(_, t)| t.actions.clone()).collect();
        samples.into_iter().map(|(g, _)| g).collect()
    }

    fn observe(&mut self, results: &[(Genotype, Option<f64>)]) {
        let batch: Vec<(Vec<u8>, f64)> = self
            .pending
            .drain(..)
            .zip(results)
            .filter_map(|(a, (_, c))| c.map(|c| (a, reward(c))))
            .collect();
        self.controller.update(&batch);
    }
}

struct MacStrategy {
    cfg: MacConfig,
    penalty: PenaltyConfig,
}

/// `log10` of a cost, the surrogate's target scale.
fn surrogate_target(cost: f64) -> f64 {
    cost.max(1e-12).log10()
}

impl MacStrategy {
    fn surrogate_proposals(&self, ctx: &Context<'_>, n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Genotype>> {
        let mut distinct: Vec<(Genotype, f64)> = Vec::new();
        let mut index = HashMap::new();
        for r in ctx.records.iter().filter(|r| r.kind() != RecordKind::Invalid) {
            index.entry(r.genotype).or_insert_with(|| {
                distinct.push((r.genotype, r.cost));
                distinct.len() - 1
            });
        }
        if distinct.len() > self.cfg.max_centers {
            // Keep the cheapest centers; ties keep proposal order.
            distinct.sort_by(|a, b| a.1.total_cmp(&b.1));
            distinct.truncate(self.cfg.max_centers);
        }
        let centers: Vec<Vec<f64>> = distinct.iter().map(|(g, _)| g.to_unit_vector()).collect();
        let y: Vec<f64> = distinct.iter().map(|(_, c)| surrogate_target(*c)).collect();
        let surrogate = match RbfSurrogate::fit(&centers, &y) {
            Ok(s) => s,
            Err(e) => {
                log::debug!("surrogate unavailable: {e}");
                return None;
            }
        };
        let weights = update_feature_weights(&distinct);
        let incumbent = distinct
            .iter()
            .fold(None, |b: Option<&(Genotype, f64)>, r| match b {
                Some(b) if b.1 <= r.1 => Some(b),
                _ => Some(r),
            })?
            .0;
        let mut seen = ctx.seen.clone();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let g = mac_propose(&incumbent, &surrogate, &weights, &seen, self.penalty, &self.cfg, rng)
                .unwrap_or_else(|| Genotype::random(rng));
            seen.insert(g.canonical_key());
            out.push(g);
        }
        Some(out)
    }
}

impl Strategy for MacStrategy {
    fn propose(&mut self, ctx: &Context<'_>, n: usize, rng: &mut ChaCha8Rng) -> Vec<Genotype> {
        let warm = (ctx.cum_evals as f64) < self.cfg.warmup_fraction * ctx.budget as f64;
        if !warm {
            if let Some(p) = self.surrogate_proposals(ctx, n, rng) {
                return p;
            }
        }
        (0..n).map(|_| Genotype::random(rng)).collect()
    }

    fn observe(&mut self, _: &[(Genotype, Option<f64>)]) {}
}

fn make_strategy(cfg: &SearchConfig) -> Box<dyn Strategy> {
    match cfg.strategy {
        StrategyKind::Random => Box::new(RandomStrategy),
        StrategyKind::Rl => Box::new(RlStrategy {
            controller: Controller::for_genotypes(cfg.controller, mix_seed(cfg.seed, INPUT_STREAM + 1)),
            pending: Vec::new(),
        }),
        StrategyKind::Mac => Box::new(MacStrategy {
            cfg: cfg.mac,
            penalty: cfg.penalty,
        }),
    }
}

enum Slot {
    Invalid(f64),
    Cached(f64),
    /// Same key as an earlier slot of this iteration.
    SameAs(usize),
    Train,
}

struct Trained {
    cost: f64,
    evals: u64,
    network: Option<Network>,
}

/// Trains one candidate with at most `budget` evaluations.
fn train_candidate(
    genotype: &Genotype,
    objective: &Objective,
    inputs: &InputBatch,
    cfg: &SearchConfig,
    iter: usize,
    budget: u64,
) -> Result<Trained, SearchError> {
    let build = cfg.shape.config(objective.lower().to_vec(), objective.upper().to_vec());
    let mut net = match Network::build(genotype, &build) {
        Ok(n) => n,
        Err(NetworkError::Collapse(msg)) => {
            log::warn!("candidate {iter} cannot be built: {msg}");
            return Ok(Trained {
                cost: INVALID_COST_OFFSET,
                evals: 0,
                network: None,
            });
        }
        Err(e) => return Err(e.into()),
    };
    net.init_weights(weight_seed(cfg.seed, iter));
    let tc = TrainConfig {
        eval_budget: Some(cfg.train.eval_budget.map_or(budget, |b| b.min(budget))),
        ..cfg.train.clone()
    };
    let report = budgeted_train(&mut net, objective, inputs, &tc)?;
    if let StopReason::NumericFailure(msg) = &report.stop {
        log::warn!("candidate {iter} stopped early: {msg}");
    }
    let cost = if report.best_value.is_finite() {
        report.best_value
    } else {
        INVALID_COST_OFFSET
    };
    Ok(Trained {
        cost,
        evals: report.evals,
        network: Some(net),
    })
}

/// Retrains the network behind a logged trained record, for example when the
/// best record of a resumed search was replayed rather than trained. The
/// run stops at the logged evaluation count, so the weights and the cost
/// reproduce the original run; a differing cost is a resume error.
pub fn retrain_record(objective: &Objective, cfg: &SearchConfig, record: &SearchRecord) -> Result<Network, SearchError> {
    if record.kind() != RecordKind::Trained {
        return Err(SearchError::Resume(format!("record {} was not trained", record.iter)));
    }
    let build = cfg.shape.config(objective.lower().to_vec(), objective.upper().to_vec());
    let inputs = InputBatch::for_config(&build, input_seed(cfg.seed));
    let t = train_candidate(&record.genotype, objective, &inputs, cfg, record.iter, record.evals_spent)?;
    match t.network {
        Some(net) if t.cost == record.cost && t.evals == record.evals_spent => Ok(net),
        _ => Err(SearchError::Resume(format!(
            "record {} retrained to cost {} with {} evaluations, log says {} with {}",
            record.iter, t.cost, t.evals, record.cost, record.evals_spent
        ))),
    }
}

/// Runs a search. Records in `replay` (a previous run's log prefix) are
/// reused instead of retraining, which reproduces the strategy state
/// exactly; the search then continues. `on_record` sees every new record
/// in order. The outcome does not depend on `workers`.
pub fn run_search(
    objective: &Objective,
    cfg: &SearchConfig,
    workers: usize,
    replay: &[SearchRecord],
    on_record: impl FnMut(&SearchRecord) -> Result<(), SearchError>,
) -> Result<SearchOutcome, SearchError> {
    drive(objective, cfg, workers, replay, on_record, make_strategy(cfg))
}

fn drive(
    objective: &Objective,
    cfg: &SearchConfig,
    workers: usize,
    replay: &[SearchRecord],
    mut on_record: impl FnMut(&SearchRecord) -> Result<(), SearchError>,
    mut strategy: Box<dyn Strategy>,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    let build = cfg.shape.config(objective.lower().to_vec(), objective.upper().to_vec());
    build.validate()?;
    let inputs = InputBatch::for_config(&build, input_seed(cfg.seed));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SearchError::Config(format!("worker pool: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = SearchHistory::default();
    let mut costs: HashMap<CanonicalKey, f64> = HashMap::new();
    let mut seen: HashSet<CanonicalKey> = HashSet::new();
    let mut best_network: Option<Network> = None;
    let mut best_cost = f64::INFINITY;
    let mut stale = 0;

    for _ in 0..cfg.max_iterations {
        let cum = history.cum_evals();
        if cum >= cfg.budget {
            break;
        }
        if stale >= cfg.max_stale_proposals {
            log::warn!("stopping: {stale} proposals in a row had nothing new to train");
            break;
        }
        let ctx = Context {
            records: &history.records,
            seen: &seen,
            cum_evals: cum,
            budget: cfg.budget,
        };
        let proposals = strategy.propose(&ctx, cfg.batch, &mut rng);
        let keys: Vec<CanonicalKey> = proposals.iter().map(Genotype::canonical_key).collect();

        let mut slots = Vec::with_capacity(proposals.len());
        let mut first_in_batch: HashMap<&CanonicalKey, usize> = HashMap::new();
        for (k, (g, key)) in proposals.iter().zip(&keys).enumerate() {
            let report = g.decode().validate(&cfg.penalty);
            slots.push(if !report.is_valid() {
                Slot::Invalid(report.sentinel_cost())
            } else if let Some(&c) = costs.get(key) {
                Slot::Cached(c)
            } else if let Some(&j) = first_in_batch.get(key) {
                Slot::SameAs(j)
            } else {
                first_in_batch.insert(key, k);
                Slot::Train
            });
        }

        // Split what is left evenly over the candidates to train, so the
        // allocation is fixed before any training starts.
        let base = history.len();
        let to_train: Vec<usize> = (0..slots.len()).filter(|&k| matches!(slots[k], Slot::Train)).collect();
        let remaining = cfg.budget - cum;
        let n_train = to_train.len() as u64;
        let mut shares = vec![0u64; slots.len()];
        if n_train > 0 {
            let share = remaining / n_train;
            if share == 0 {
                shares[to_train[0]] = remaining;
            } else {
                for &k in &to_train {
                    shares[k] = share;
                }
            }
        }

        let jobs: Vec<usize> = to_train
            .iter()
            .copied()
            .filter(|&k| shares[k] > 0 && base + k >= replay.len())
            .collect();
        let trained: Vec<(usize, Result<Trained, SearchError>)> = pool.install(|| {
            jobs.par_iter()
                .map(|&k| {
                    let r = train_candidate(&proposals[k], objective, &inputs, cfg, base + k + 1, shares[k]);
                    (k, r)
                })
                .collect()
        });
        let mut results: HashMap<usize, Trained> = HashMap::new();
        for (k, r) in trained {
            results.insert(k, r?);
        }

        let mut observed = Vec::with_capacity(slots.len());
        let mut slot_costs: Vec<Option<f64>> = vec![None; slots.len()];
        let cum_at_start = cum;
        let mut cum = cum;
        for k in 0..slots.len() {
            let iter = base + k + 1;
            let replayed = replay.get(iter - 1);
            let (cost, evals) = match (&slots[k], replayed) {
                (Slot::Train, _) if shares[k] == 0 => {
                    observed.push((proposals[k], None));
                    continue;
                }
                (Slot::Train, Some(r)) => (r.cost, r.evals_spent),
                (Slot::Train, None) => {
                    let t = results.remove(&k).expect("trained slot has a result");
                    if t.cost < best_cost {
                        best_network = t.network;
                    }
                    (t.cost, t.evals)
                }
                (Slot::Invalid(c), _) | (Slot::Cached(c), _) => (*c, 0),
                (Slot::SameAs(j), _) => match slot_costs[*j] {
                    Some(c) => (c, 0),
                    None => {
                        observed.push((proposals[k], None));
                        continue;
                    }
                },
            };
            if let Some(r) = replayed {
                if r.genotype != proposals[k] || r.cost != cost || r.evals_spent != evals {
                    return Err(SearchError::Resume(format!(
                        "record {iter}: log has {} (cost {}, evals {}) but the search produced {} (cost {cost}, evals {evals})",
                        r.genotype, r.cost, r.evals_spent, proposals[k]
                    )));
                }
                if cost < best_cost {
                    best_network = None;
                }
            }
            slot_costs[k] = Some(cost);
            cum += evals;
            best_cost = best_cost.min(cost);
            if matches!(slots[k], Slot::Train) && cost < INVALID_COST_OFFSET {
                costs.insert(keys[k].clone(), cost);
            }
            seen.insert(keys[k].clone());
            let record = SearchRecord {
                iter,
                strategy: cfg.strategy,
                genotype: proposals[k],
                canonical_key: keys[k].clone(),
                cost,
                evals_spent: evals,
                cum_evals: cum,
                best_cost,
            };
            if replayed.is_none() {
                on_record(&record)?;
            }
            history.records.push(record);
            observed.push((proposals[k], Some(cost)));
        }
        strategy.observe(&observed);
        stale = if cum > cum_at_start { 0 } else { stale + proposals.len() };
    }

    if replay.len() > history.len() {
        return Err(SearchError::Resume(format!(
            "log has {} records but the search stops after {}",
            replay.len(),
            history.len()
        )));
    }
    let best_genotype = history.best().map(|r| r.genotype);
    Ok(SearchOutcome {
        history,
        best_genotype,
        best_cost,
        best_network,
    })
}

pub fn write_search_log_header<W: Write>(mut w: W) -> std::io::Result<()> {
    writeln!(w, "{SEARCH_LOG_SCHEMA}")?;
    writeln!(w, "{SEARCH_LOG_HEADER}")
}

pub fn write_search_record<W: Write>(mut w: W, r: &SearchRecord) -> std::io::Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{},{}",
        r.iter, r.strategy, r.genotype, r.canonical_key, r.cost, r.evals_spent, r.cum_evals, r.best_cost
    )
}

/// Parses a search log written by [`write_search_log_header`] and
/// [`write_search_record`]. A truncated final line is ignored.
pub fn read_search_log<R: BufRead>(r: R) -> Result<Vec<SearchRecord>, SearchError> {
    let mut lines = r.lines();
    let mut next = |what: &str| -> Result<String, SearchError> {
        lines
            .next()
            .ok_or_else(|| SearchError::Log(format!("missing {what}")))?
            .map_err(|e| SearchError::Log(e.to_string()))
    };
    if next("schema line")? != SEARCH_LOG_SCHEMA {
        return Err(SearchError::Log(format!("expected schema line {SEARCH_LOG_SCHEMA:?}")));
    }
    if next("header")? != SEARCH_LOG_HEADER {
        return Err(SearchError::Log(format!("expected header {SEARCH_LOG_HEADER:?}")));
    }
    let rows: Vec<String> = lines
        .collect::<Result<_, _>>()
        .map_err(|e| SearchError::Log(e.to_string()))?;
    let mut out = Vec::with_capacity(rows.len());
    for (n, line) in rows.iter().enumerate() {
        match parse_record(line) {
            Ok(r) => out.push(r),
            Err(_) if n + 1 == rows.len() => log::warn!("ignoring truncated last log line"),
            Err(e) => return Err(SearchError::Log(format!("line {}: {e}", n + 3))),
        }
    }
    Ok(out)
}

fn parse_record(line: &str) -> Result<SearchRecord, String> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 8 {
        return Err(format!("expected 8 fields, got {}", f.len()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
    let int = |s: &str| s.parse::<u64>().map_err(|e| format!("{s:?}: {e}"));
    let genotype: Genotype = f[2].parse().map_err(|e| format!("{e}"))?;
    let canonical_key = genotype.canonical_key();
    if canonical_key.as_str() != f[3] {
        return Err(format!("canonical key {} does not match genotype {}", f[3], f[2]));
    }
    Ok(SearchRecord {
        iter: int(f[0])? as usize,
        strategy: f[1].parse().map_err(|e| format!("{e}"))?,
        genotype,
        canonical_key,
        cost: num(f[4])?,
        evals_spent: int(f[5])?,
        cum_evals: int(f[6])?,
        best_cost: num(f[7])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("grid".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn seeds_are_distinct() {
        let a: HashSet<u64> = (1..1000).map(|i| weight_seed(7, i)).collect();
        assert_eq!(a.len(), 999);
        assert_ne!(input_seed(7), input_seed(8));
    }

    #[test]
    fn log_round_trip() {
        let g = crate::space::sample_uniform(4);
        let r = SearchRecord {
            iter: 3,
            strategy: StrategyKind::Mac,
            genotype: g,
            canonical_key: g.canonical_key(),
            cost: 0.1 + 0.2,
            evals_spent: 500,
            cum_evals: 1500,
            best_cost: 1e-17,
        };
        let mut buf = Vec::new();
        write_search_log_header(&mut buf).unwrap();
        write_search_record(&mut buf, &r).unwrap();
        write_search_record(&mut buf, &r).unwrap();
        buf.extend_from_slice(b"4,ma");
        let back = read_search_log(buf.as_slice()).unwrap();
        assert_eq!(back, vec![r.clone(), r]);
    }

    /// Proposes a fixed list of genotypes, `per_iter` at a time.
    struct Fixed(Vec<Genotype>, usize);

    impl Strategy for Fixed {
        fn propose(&mut self, _: &Context<'_>, _: usize, _: &mut ChaCha8Rng) -> Vec<Genotype> {
            let n = self.1.min(self.0.len());
            self.0.drain(..n).collect()
        }
        fn observe(&mut self, _: &[(Genotype, Option<f64>)]) {}
    }

    fn small_config(budget: u64) -> SearchConfig {
        SearchConfig {
            budget,
            shape: NetShape {
                cells: 1,
                channels: 2,
                num_sol: 10,
                input_size: 6,
            },
            train: TrainConfig {
                max_epochs: 4,
                max_budget: 4,
                initial_budget: 1,
                ..TrainConfig::default()
            },
            ..SearchConfig::default()
        }
    }

    #[test]
    fn isomorphic_proposals_are_not_retrained() {
        use crate::space::{BatchSize, CellOp::*};
        let a = Genotype::from_edges(&[(1, 2), (2, 7), (1, 3), (3, 7)], [Conv3x3, MaxPool3x3, Conv3x3, Conv3x3, Conv3x3], BatchSize::One);
        let b = Genotype::from_edges(&[(1, 3), (3, 7), (1, 2), (2, 7)], [MaxPool3x3, Conv3x3, Conv3x3, Conv3x3, Conv3x3], BatchSize::One);
        assert_ne!(a, b);
        assert_eq!(a.canonical_key(), b.canonical_key());
        let invalid = Genotype::from_edges(&[], [Conv3x3; 5], BatchSize::One);
        let obj = crate::objectives::ObjectiveSpec::Sphere { dim: 2 }.build().unwrap();
        let cfg = small_config(1000);
        // Same key inside one iteration, then again in a later one.
        let props = vec![a, b, invalid, a, b];
        let out = drive(&obj, &cfg, 1, &[], |_| Ok(()), Box::new(Fixed(props, 3))).unwrap();
        let r = out.history.records();
        assert_eq!(r.len(), 5);
        assert_eq!(r[0].kind(), RecordKind::Trained);
        assert_eq!(r[0].evals_spent, 40);
        for k in [1, 3, 4] {
            assert_eq!(r[k].kind(), RecordKind::Cached);
            assert_eq!(r[k].cost, r[0].cost);
        }
        assert_eq!(r[2].kind(), RecordKind::Invalid);
        assert!(r[2].cost >= INVALID_COST_OFFSET);
        assert_eq!(obj.evaluations(), 40);
        assert_eq!(out.history.cum_evals(), 40);
    }

    #[test]
    fn record_kinds() {
        let g = crate::space::sample_uniform(4);
        let mut r = SearchRecord {
            iter: 1,
            strategy: StrategyKind::Random,
            genotype: g,
            canonical_key: g.canonical_key(),
            cost: 2.0,
            evals_spent: 750,
            cum_evals: 750,
            best_cost: 2.0,
        };
        assert_eq!(r.kind(), RecordKind::Trained);
        assert_eq!(r.rung_reached(500), 2);
        r.evals_spent = 0;
        assert_eq!(r.kind(), RecordKind::Cached);
        r.cost = INVALID_COST_OFFSET + 6e6;
        assert_eq!(r.kind(), RecordKind::Invalid);
    }
}
