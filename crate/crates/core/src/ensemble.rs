//! Reusing trained networks on a new problem dimension: head retraining on a
//! frozen body (NAS-1), retraining from scratch (NAS-2), and three ensembles
//! over frozen-body members (bagging, stacking, hybrid).

use crate::network::{BuildConfig, Checkpoint, InputBatch, NetShape, Network, NetworkError};
use crate::objectives::{Objective, ObjectiveSpec};
use crate::search::mix_seed;
use crate::space::Genotype;
use crate::tensor::{Tape, Tensor};
use crate::trainer::{train, train_joint, StopReason, TrainConfig, TrainError, TrainReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const MANIFEST_SCHEMA: u32 = 1;

const HEAD_STREAM: u64 = 1 << 40;
const INPUT_STREAM: u64 = (1 << 40) + 1;
const WEIGHT_STREAM: u64 = (1 << 40) + 2;
const BLEND_SEED_STREAM: u64 = (1 << 40) + 3;

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("bad ensemble: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

/// Shared settings of transfer runs and ensemble fine-tunes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Evaluations per fine-tune pass; hybrid ensembles get `K` times this.
    pub cutoff: u64,
    pub seed: u64,
    /// Optimizer and epoch limits; the evaluation budget is set from `cutoff`.
    pub train: TrainConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            cutoff: 1000,
            seed: 0,
            train: TrainConfig {
                max_epochs: 100_000,
                max_budget: 100_000,
                ..TrainConfig::default()
            },
        }
    }
}

impl TransferConfig {
    fn train_config(&self, budget: u64) -> TrainConfig {
        TrainConfig {
            eval_budget: Some(budget),
            ..self.train.clone()
        }
    }

    pub fn head_seed(&self, member: usize) -> u64 {
        mix_seed(self.seed, HEAD_STREAM + ((member as u64) << 8))
    }

    pub fn input_seed(&self) -> u64 {
        mix_seed(self.seed, INPUT_STREAM)
    }

    pub fn weight_seed(&self) -> u64 {
        mix_seed(self.seed, WEIGHT_STREAM)
    }
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub report: TrainReport,
    pub network: Network,
}

/// Prepares a trained network for `objective`: fresh head at the target
/// dimension and bounds, frozen body, batch size one.
pub fn adapt(net: &Network, objective: &Objective, head_seed: u64) -> Result<Network> {
    let mut net = net.clone();
    net.replace_head(objective.lower().to_vec(), objective.upper().to_vec(), head_seed)?;
    net.freeze_body();
    net.set_batch_size(1);
    net.store_mut().reset_optimizer();
    Ok(net)
}

/// NAS-1: retrains only a new dense head on top of the frozen body.
pub fn transfer_nas1(checkpoint: &Checkpoint, objective: &Objective, cfg: &TransferConfig) -> Result<TransferOutcome> {
    let mut net = adapt(&checkpoint.network, objective, cfg.head_seed(0))?;
    let inputs = InputBatch::for_config(net.config(), cfg.input_seed());
    let report = train(&mut net, objective, &inputs, &cfg.train_config(cfg.cutoff))?;
    Ok(TransferOutcome { report, network: net })
}

/// NAS-2: builds the genotype for `objective` and trains every weight from a
/// fresh initialization.
pub fn transfer_nas2(
    genotype: &Genotype,
    shape: &NetShape,
    objective: &Objective,
    cfg: &TransferConfig,
) -> Result<TransferOutcome> {
    let build = shape.config(objective.lower().to_vec(), objective.upper().to_vec());
    let mut net = Network::build(genotype, &build)?;
    net.init_weights(cfg.weight_seed());
    net.set_batch_size(1);
    let inputs = InputBatch::for_config(&build, cfg.input_seed());
    let report = train(&mut net, objective, &inputs, &cfg.train_config(cfg.cutoff))?;
    Ok(TransferOutcome { report, network: net })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Bagging,
    Stacking,
    Hybrid,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Bagging, Scheme::Stacking, Scheme::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Bagging => "bagging",
            Scheme::Stacking => "stacking",
            Scheme::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = EnsembleError;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EnsembleError::Config(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub scheme: Scheme,
    /// Best candidate over every pass, with the total evaluations spent.
    pub report: TrainReport,
    /// Per-member fine-tune reports (bagging and stacking).
    pub member_reports: Vec<TrainReport>,
    /// Best of the ensemble's own candidates, when it has separate ones.
    pub ensemble_best: Option<f64>,
    pub members: Vec<Network>,
    /// Trained blend layer of a stacking ensemble.
    pub blend: Option<Network>,
}

/// Adapts every member to `objective`; all members must share an input size
/// so that they can see the same inputs.
pub fn adapt_members(members: &[Network], objective: &Objective, cfg: &TransferConfig) -> Result<Vec<Network>> {
    let Some(first) = members.first() else {
        return Err(EnsembleError::Config("an ensemble needs at least one member".into()));
    };
    let side = first.config().input_size;
    if let Some(m) = members.iter().find(|m| m.config().input_size != side) {
        return Err(EnsembleError::Config(format!(
            "members disagree on input size ({side} vs {})",
            m.config().input_size
        )));
    }
    let adapted = members
        .iter()
        .enumerate()
        .map(|(k, m)| adapt(m, objective, cfg.head_seed(k)))
        .collect::<Result<Vec<_>>>()?;
    for m in &adapted {
        if m.dim() != objective.dim() {
            return Err(EnsembleError::Config(format!(
                "member emits dimension {} but the target has {}",
                m.dim(),
                objective.dim()
            )));
        }
    }
    Ok(adapted)
}

fn shared_inputs(members: &[Network], cfg: &TransferConfig) -> InputBatch {
    InputBatch::for_config(members[0].config(), cfg.input_seed())
}

/// Fine-tunes each member's head independently and in parallel, one pass of
/// `cutoff` evaluations each.
fn fine_tune(members: &mut [Network], objective: &Objective, inputs: &InputBatch, cfg: &TransferConfig) -> Result<Vec<TrainReport>> {
    let tc = cfg.train_config(cfg.cutoff);
    members
        .par_iter_mut()
        .map(|m| train(m, objective, inputs, &tc).map_err(EnsembleError::from))
        .collect()
}

fn check_members(members: &[Network], min: usize) -> Result<()> {
    if members.len() < min {
        return Err(EnsembleError::Config(format!(
            "need at least {min} members, got {}",
            members.len()
        )));
    }
    Ok(())
}

fn forward_pair(net: &Network, input: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let (pre, out) = net.forward_with_logits(&mut tape, input.clone())?;
    Ok((tape.value(pre).clone(), tape.value(out).clone()))
}

fn mean_of(tensors: &[Tensor]) -> Tensor {
    let k = tensors.len() as f64;
    let mut acc = Tensor::zeros(tensors[0].shape().to_vec());
    for t in tensors {
        for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    acc.data_mut().iter_mut().for_each(|a| *a /= k);
    acc
}

/// Elementwise mean of the members' solutions `[b, D]`.
pub fn bagging_solutions(members: &[Network], input: &Tensor) -> Result<Tensor> {
    check_members(members, 1)?;
    let outs = members
        .iter()
        .map(|m| Ok(forward_pair(m, input)?.1))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(&outs))
}

/// Elementwise mean of the members' head outputs before the scaled tanh.
pub fn bagging_logits(members: &[Network], input: &Tensor) -> Result<Tensor> {
    check_members(members, 1)?;
    let outs = members
        .iter()
        .map(|m| Ok(forward_pair(m, input)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(&outs))
}

/// Members' pre-tanh outputs concatenated per sample: `[b, K*D, 1, 1]`,
/// member-major.
pub fn stacking_features(members: &[Network], input: &Tensor) -> Result<Tensor> {
    check_members(members, 1)?;
    let logits = members
        .iter()
        .map(|m| Ok(forward_pair(m, input)?.0))
        .collect::<Result<Vec<_>>>()?;
    let b = logits[0].shape()[0];
    let d = logits[0].shape()[1];
    let k = logits.len();
    let mut data = Vec::with_capacity(b * k * d);
    for i in 0..b {
        for l in &logits {
            data.extend_from_slice(l.row(i));
        }
    }
    Ok(Tensor::new(vec![b, k * d, 1, 1], data).expect("consistent shape"))
}

/// Dense `K*D -> D` blend followed by the scaled tanh of the target bounds,
/// initialized to the averaging matrix (each output is the mean of the
/// members' matching coordinates).
pub fn averaging_blend(k: usize, objective: &Objective, num_sol: usize) -> Result<Network> {
    let d = objective.dim();
    let cfg = BuildConfig {
        cells: 1,
        channels: 1,
        num_sol,
        input_size: 1,
        ..BuildConfig::new(objective.lower().to_vec(), objective.upper().to_vec())
    };
    let mut blend = Network::sequential(&cfg, k * d, &[])?;
    let head = *blend.head();
    let mut w = Tensor::zeros(vec![k * d, d]);
    for m in 0..k {
        for j in 0..d {
            w.data_mut()[(m * d + j) * d + j] = 1.0 / k as f64;
        }
    }
    blend.store_mut().replace(head.weight, w);
    blend.store_mut().replace(head.bias, Tensor::zeros(vec![d]));
    blend.set_batch_size(1);
    Ok(blend)
}

/// Joint objective of a hybrid ensemble on `input`: the mean over members of
/// each member's mean objective value.
pub fn joint_loss(members: &[Network], objective: &Objective, input: &Tensor) -> Result<f64> {
    check_members(members, 1)?;
    let mut total = 0.0;
    for m in members {
        let (_, xs) = forward_pair(m, input)?;
        let b = xs.shape()[0];
        let mut sum = 0.0;
        for i in 0..b {
            sum += objective.value(xs.row(i)).map_err(|e| EnsembleError::Config(e.to_string()))?;
        }
        total += sum / b as f64;
    }
    Ok(total / members.len() as f64)
}

fn best_of(reports: &[&TrainReport]) -> (f64, Vec<f64>) {
    let mut best = (f64::INFINITY, Vec::new());
    for r in reports {
        if r.best_value < best.0 {
            best = (r.best_value, r.best_solution.clone());
        }
    }
    best
}

fn combined_report(parts: &[&TrainReport], extra: Option<(f64, Vec<f64>, u64)>) -> TrainReport {
    let (mut best_value, mut best_solution) = best_of(parts);
    let mut evals: u64 = parts.iter().map(|r| r.evals).sum();
    if let Some((v, x, e)) = extra {
        evals += e;
        if v < best_value {
            best_value = v;
            best_solution = x;
        }
    }
    TrainReport {
        best_solution,
        best_value,
        evals,
        epochs: parts.iter().map(|r| r.epochs).max().unwrap_or(0),
        history: Vec::new(),
        stop: StopReason::Budget,
    }
}

/// Fine-tunes each member's head for `cutoff` evaluations, then evaluates the
/// averaged solution of every input once. The best is taken over member and
/// ensemble candidates.
pub fn bagging(members: &[Network], objective: &Objective, cfg: &TransferConfig) -> Result<EnsembleOutcome> {
    check_members(members, 2)?;
    let mut nets = adapt_members(members, objective, cfg)?;
    let inputs = shared_inputs(&nets, cfg);
    let member_reports = fine_tune(&mut nets, objective, &inputs, cfg)?;
    let avg = bagging_solutions(&nets, inputs.all())?;
    let mut ens = (f64::INFINITY, Vec::new());
    let mut evals = 0;
    for i in 0..avg.shape()[0] {
        let x = avg.row(i);
        let f = objective.value(x).map_err(|e| EnsembleError::Config(e.to_string()))?;
        evals += 1;
        if f < ens.0 {
            ens = (f, x.to_vec());
        }
    }
    let ensemble_best = Some(ens.0);
    let refs: Vec<&TrainReport> = member_reports.iter().collect();
    let report = combined_report(&refs, Some((ens.0, ens.1, evals)));
    Ok(EnsembleOutcome {
        scheme: Scheme::Bagging,
        report,
        member_reports,
        ensemble_best,
        members: nets,
        blend: None,
    })
}

/// Fine-tunes each member's head, freezes the members entirely and trains a
/// dense blend over their concatenated pre-tanh outputs for `cutoff`
/// evaluations.
pub fn stacking(members: &[Network], objective: &Objective, cfg: &TransferConfig) -> Result<EnsembleOutcome> {
    check_members(members, 2)?;
    let mut nets = adapt_members(members, objective, cfg)?;
    let inputs = shared_inputs(&nets, cfg);
    let member_reports = fine_tune(&mut nets, objective, &inputs, cfg)?;
    let features = stacking_features(&nets, inputs.all())?;
    let features = InputBatch::from_tensor(features, mix_seed(cfg.seed, BLEND_SEED_STREAM))?;
    let mut blend = averaging_blend(nets.len(), objective, inputs.len())?;
    let blend_report = train(&mut blend, objective, &features, &cfg.train_config(cfg.cutoff))?;
    let ensemble_best = Some(blend_report.best_value);
    let mut refs: Vec<&TrainReport> = member_reports.iter().collect();
    refs.push(&blend_report);
    let report = combined_report(&refs, None);
    Ok(EnsembleOutcome {
        scheme: Scheme::Stacking,
        report,
        member_reports,
        ensemble_best,
        members: nets,
        blend: Some(blend),
    })
}

/// Trains all member heads jointly on the mean of their objective values,
/// with `K * cutoff` evaluations in total.
pub fn hybrid(members: &[Network], objective: &Objective, cfg: &TransferConfig) -> Result<EnsembleOutcome> {
    check_members(members, 1)?;
    let mut nets = adapt_members(members, objective, cfg)?;
    let inputs = shared_inputs(&nets, cfg);
    let budget = cfg.cutoff * nets.len() as u64;
    let report = train_joint(&mut nets, objective, &inputs, &cfg.train_config(budget))?;
    Ok(EnsembleOutcome {
        scheme: Scheme::Hybrid,
        report,
        member_reports: Vec::new(),
        ensemble_best: None,
        members: nets,
        blend: None,
    })
}

pub fn run_ensemble(scheme: Scheme, members: &[Network], objective: &Objective, cfg: &TransferConfig) -> Result<EnsembleOutcome> {
    match scheme {
        Scheme::Bagging => bagging(members, objective, cfg),
        Scheme::Stacking => stacking(members, objective, cfg),
        Scheme::Hybrid => hybrid(members, objective, cfg),
    }
}

/// Ensemble description stored as TOML. Relative member paths resolve
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub schema: u32,
    pub scheme: Scheme,
    pub objective: ObjectiveSpec,
    pub members: Vec<PathBuf>,
    #[serde(default)]
    pub transfer: TransferConfig,
}

impl EnsembleManifest {
    pub fn new(scheme: Scheme, objective: ObjectiveSpec, members: Vec<PathBuf>, transfer: TransferConfig) -> Self {
        EnsembleManifest {
            schema: MANIFEST_SCHEMA,
            scheme,
            objective,
            members,
            transfer,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| EnsembleError::Manifest(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: EnsembleManifest = toml::from_str(text).map_err(|e| EnsembleError::Manifest(e.to_string()))?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(EnsembleError::Manifest(format!(
                "unsupported schema version {} (expected {MANIFEST_SCHEMA})",
                m.schema
            )));
        }
        if m.members.is_empty() {
            return Err(EnsembleError::Manifest("no members listed".into()));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EnsembleError::Manifest(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| EnsembleError::Manifest(format!("{}: {e}", path.display())))
    }

    /// Loads the member checkpoints, resolving relative paths against `base`.
    pub fn load_members(&self, base: &Path) -> Result<Vec<Network>> {
        self.members
            .iter()
            .map(|p| {
                let path = if p.is_relative() { base.join(p) } else { p.clone() };
                Ok(Checkpoint::load(&path)?.network)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("boosting".parse::<Scheme>().is_err());
    }

    #[test]
    fn seeds_differ_per_member() {
        let cfg = TransferConfig::default();
        assert_ne!(cfg.head_seed(0), cfg.head_seed(1));
        assert_ne!(cfg.input_seed(), cfg.weight_seed());
    }
}
