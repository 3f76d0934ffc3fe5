//! Training a network as an optimizer: the forward pass emits candidate
//! solutions, the loss is their mean objective gap, and Adam updates the
//! weights through the objective's analytic gradient.

use crate::network::{InputBatch, Network, NetworkError};
use crate::objectives::Objective;
use crate::tensor::{AdamConfig, Tape, TensorError};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub const EPOCH_LOG_SCHEMA: &str = "# neuropt epoch-log v1";
const EPOCH_LOG_HEADER: &str = "epoch,loss,best_f,evals";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("objective has dimension {objective} but the network emits {network}")]
    Dimension { objective: usize, network: usize },
    #[error("input batch is {got}x{got} but the network expects {expected}x{expected}")]
    InputSize { got: usize, expected: usize },
    #[error("bad training configuration: {0}")]
    Config(String),
    #[error("epoch log: {0}")]
    Log(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Network(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub adam: AdamConfig,
    /// Relative improvement threshold `psi` between epoch-level bests.
    pub psi: f64,
    /// Stop `train` as soon as an epoch improves by less than `psi`.
    pub early_stop: bool,
    /// First rung of the budget schedule, in epochs.
    pub initial_budget: usize,
    pub growth: usize,
    /// Largest rung `iota`.
    pub max_budget: usize,
    /// Reference value subtracted from reported losses.
    pub f_star: f64,
    /// Cap on objective evaluations for this run.
    pub eval_budget: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            adam: AdamConfig::default(),
            psi: 0.01,
            early_stop: false,
            initial_budget: 5,
            growth: 3,
            max_budget: 200,
            f_star: 0.0,
            eval_budget: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(1 <= self.initial_budget
            && self.initial_budget <= self.max_budget
            && self.max_budget <= self.max_epochs)
        {
            return bad("need 1 <= initial_budget <= max_budget <= max_epochs");
        }
        if self.growth < 2 {
            return bad("growth must be at least 2");
        }
        if !(self.psi >= 0.0) {
            return bad("psi must be >= 0");
        }
        self.adam.validate().map_err(TrainError::Config)
    }

    /// Rung caps `r, g r, g^2 r, ...`, ending at `iota`.
    pub fn rungs(&self) -> Vec<usize> {
        let mut caps = Vec::new();
        let mut r = self.initial_budget;
        while r < self.max_budget {
            caps.push(r);
            r = r.saturating_mul(self.growth);
        }
        caps.push(self.max_budget);
        caps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum StopReason {
    Budget,
    EarlyStop,
    MaxEpochs,
    NumericFailure(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of `f(x) - f*` over the epoch's evaluations.
    pub loss: f64,
    pub best_f: f64,
    /// Cumulative evaluations at the end of the epoch.
    pub evals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_solution: Vec<f64>,
    pub best_value: f64,
    pub evals: u64,
    pub epochs: usize,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// `true` when the latest epoch-level best improved on the previous one by
/// less than `psi`, relative to `max(1, |previous|)`.
pub fn early_stop_check(bests: &[f64], psi: f64) -> bool {
    match bests {
        [.., prev, curr] => (prev - curr) / prev.abs().max(1.0) < psi,
        _ => false,
    }
}

/// Training state across epochs; one run owns its networks. Several networks
/// train jointly on the mean of their losses.
struct Session<'a> {
    nets: Vec<&'a mut Network>,
    objective: &'a Objective,
    inputs: &'a InputBatch,
    cfg: &'a TrainConfig,
    best_value: f64,
    best_solution: Vec<f64>,
    evals: u64,
    history: Vec<EpochRecord>,
}

enum EpochEnd {
    Complete,
    Stopped(StopReason),
}

impl<'a> Session<'a> {
    fn new(
        nets: Vec<&'a mut Network>,
        objective: &'a Objective,
        inputs: &'a InputBatch,
        cfg: &'a TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let Some(first) = nets.first() else {
            return Err(TrainError::Config("no network to train".into()));
        };
        let batch = first.batch_size();
        for net in &nets {
            if objective.dim() != net.dim() {
                return Err(TrainError::Dimension {
                    objective: objective.dim(),
                    network: net.dim(),
                });
            }
            let expected = net.config().input_size;
            if inputs.side() != expected {
                return Err(TrainError::InputSize {
                    got: inputs.side(),
                    expected,
                });
            }
            if net.batch_size() != batch {
                return Err(TrainError::Config("jointly trained networks need one batch size".into()));
            }
        }
        Ok(Session {
            nets,
            objective,
            inputs,
            cfg,
            best_value: f64::INFINITY,
            best_solution: Vec::new(),
            evals: 0,
            history: Vec::new(),
        })
    }

    fn remaining(&self) -> Option<u64> {
        self.cfg.eval_budget.map(|b| b.saturating_sub(self.evals))
    }

    fn zero_grads(&mut self) {
        for net in self.nets.iter_mut() {
            net.store_mut().zero_grad();
        }
    }

    fn epoch(&mut self) -> Result<EpochEnd, TrainError> {
        let k = self.nets.len();
        let b = self.nets[0].batch_size();
        let d = self.nets[0].dim();
        let mut start = 0;
        let mut loss_sum = 0.0;
        let mut count = 0u64;
        let mut end = EpochEnd::Complete;
        while start < self.inputs.len() {
            let mut len = b.min(self.inputs.len() - start);
            if let Some(left) = self.remaining() {
                let per_net = left / k as u64;
                if per_net == 0 {
                    end = EpochEnd::Stopped(StopReason::Budget);
                    break;
                }
                len = len.min(per_net as usize);
            }
            let input = self.inputs.slice(start, len);
            let scale = len as f64 * k as f64;
            for n in 0..k {
                let mut tape = Tape::new();
                let out = self.nets[n].forward(&mut tape, input.clone())?;
                let xs = tape.value(out).clone();
                let mut coeffs = vec![0.0; len * d];
                let mut failure = None;
                for i in 0..len {
                    let x = xs.row(i);
                    let (f, g) = match self.objective.value_and_gradient(x) {
                        Ok(v) => v,
                        Err(e) => {
                            self.evals += 1;
                            failure = Some(e.to_string());
                            break;
                        }
                    };
                    self.evals += 1;
                    if f < self.best_value {
                        self.best_value = f;
                        self.best_solution = x.to_vec();
                    }
                    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                        failure = Some(format!("non-finite objective value {f} or gradient"));
                        break;
                    }
                    loss_sum += f - self.cfg.f_star;
                    count += 1;
                    for (c, gi) in coeffs[i * d..(i + 1) * d].iter_mut().zip(&g) {
                        *c = gi / scale;
                    }
                }
                if let Some(msg) = failure {
                    self.zero_grads();
                    self.record(loss_sum, count);
                    return Ok(EpochEnd::Stopped(StopReason::NumericFailure(msg)));
                }
                let loss = tape.dot_const(out, coeffs)?;
                tape.backward(loss, self.nets[n].store_mut())?;
            }
            for n in 0..k {
                if let Err(e) = self.nets[n].store_mut().adam_step(&self.cfg.adam) {
                    self.zero_grads();
                    self.record(loss_sum, count);
                    return Ok(EpochEnd::Stopped(StopReason::NumericFailure(e.to_string())));
                }
            }
            start += len;
        }
        if count > 0 {
            self.record(loss_sum, count);
        }
        Ok(end)
    }

    fn record(&mut self, loss_sum: f64, count: u64) {
        let loss = if count > 0 {
            loss_sum / count as f64
        } else {
            f64::NAN
        };
        self.history.push(EpochRecord {
            epoch: self.history.len() + 1,
            loss,
            best_f: self.best_value,
            evals: self.evals,
        });
    }

    fn bests(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.best_f).collect()
    }

    fn finish(self, stop: StopReason) -> TrainReport {
        TrainReport {
            best_solution: self.best_solution,
            best_value: self.best_value,
            evals: self.evals,
            epochs: self.history.len(),
            history: self.history,
            stop,
        }
    }

    fn run(mut self) -> Result<TrainReport, TrainError> {
        for _ in 0..self.cfg.max_epochs {
            if let EpochEnd::Stopped(reason) = self.epoch()? {
                return Ok(self.finish(reason));
            }
            if self.cfg.early_stop && early_stop_check(&self.bests(), self.cfg.psi) {
                return Ok(self.finish(StopReason::EarlyStop));
            }
        }
        Ok(self.finish(StopReason::MaxEpochs))
    }
}

/// Trains for up to `max_epochs` epochs, cycling through the fixed inputs in
/// order with the network's batch size.
pub fn train(
    net: &mut Network,
    objective: &Objective,
    inputs: &InputBatch,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    Session::new(vec![net], objective, inputs, cfg)?.run()
}

/// Trains all `nets` together on the mean of their batch losses. Every step
/// evaluates each network on the same inputs, so the evaluation budget is
/// shared by all of them. The best candidate is tracked across networks.
pub fn train_joint(
    nets: &mut [Network],
    objective: &Objective,
    inputs: &InputBatch,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    Session::new(nets.iter_mut().collect(), objective, inputs, cfg)?.run()
}

/// Successive rungs `r, 3r, 9r, ...` up to `iota`; after each rung short of
/// `iota` the run continues only if the last epoch improved by at least `psi`.
pub fn budgeted_train(
    net: &mut Network,
    objective: &Objective,
    inputs: &InputBatch,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let mut s = Session::new(vec![net], objective, inputs, cfg)?;
    let rungs = cfg.rungs();
    for (k, &cap) in rungs.iter().enumerate() {
        while s.history.len() < cap {
            if let EpochEnd::Stopped(reason) = s.epoch()? {
                return Ok(s.finish(reason));
            }
        }
        if k + 1 < rungs.len() && early_stop_check(&s.bests(), cfg.psi) {
            return Ok(s.finish(StopReason::EarlyStop));
        }
    }
    Ok(s.finish(StopReason::MaxEpochs))
}

pub fn write_epoch_log<W: Write>(mut w: W, records: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(w, "{EPOCH_LOG_SCHEMA}")?;
    writeln!(w, "{EPOCH_LOG_HEADER}")?;
    for r in records {
        writeln!(w, "{},{:e},{:e},{}", r.epoch, r.loss, r.best_f, r.evals)?;
    }
    Ok(())
}

pub fn read_epoch_log<R: BufRead>(r: R) -> Result<Vec<EpochRecord>, TrainError> {
    let bad = |m: String| TrainError::Log(m);
    let mut lines = r.lines();
    let mut next = || -> Result<Option<String>, TrainError> {
        lines.next().transpose().map_err(|e| bad(e.to_string()))
    };
    match next()? {
        Some(l) if l == EPOCH_LOG_SCHEMA => {}
        other => return Err(bad(format!("unsupported schema line {other:?}"))),
    }
    if next()?.as_deref() != Some(EPOCH_LOG_HEADER) {
        return Err(bad("missing header".into()));
    }
    let mut out = Vec::new();
    while let Some(line) = next()? {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("malformed row `{line}`")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
        out.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad(format!("bad epoch `{}`", f[0])))?,
            loss: num(f[1])?,
            best_f: num(f[2])?,
            evals: f[3].parse().map_err(|_| bad(format!("bad evals `{}`", f[3])))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_examples() {
        assert!(early_stop_check(&[10.0, 10.0], 0.01));
        assert!(!early_stop_check(&[10.0, 8.0], 0.01));
        assert!(!early_stop_check(&[10.0], 0.01));
        // Relative gain 0.0099 < 0.01 halts at the second epoch.
        let rate: f64 = 1.0 - 0.0099;
        let h: Vec<f64> = (0..5).map(|k| 100.0 * rate.powi(k)).collect();
        assert!(early_stop_check(&h[..2], 0.01));
        // Below 1 in magnitude the denominator is 1.
        assert!(early_stop_check(&[0.5, 0.495], 0.01));
    }

    #[test]
    fn rung_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.rungs(), vec![5, 15, 45, 135, 200]);
        let cfg = TrainConfig {
            initial_budget: 200,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.rungs(), vec![200]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            max_budget: 300,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            initial_budget: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn epoch_log_round_trip() {
        let recs = vec![
            EpochRecord {
                epoch: 1,
                loss: 12.5,
                best_f: 0.1 + 0.2,
                evals: 500,
            },
            EpochRecord {
                epoch: 2,
                loss: 1e-300,
                best_f: 1.0 / 3.0,
                evals: 1000,
            },
        ];
        let mut buf = Vec::new();
        write_epoch_log(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(EPOCH_LOG_SCHEMA));
        assert_eq!(read_epoch_log(&buf[..]).unwrap(), recs);
        let other = text.replace("v1", "v9");
        assert!(read_epoch_log(other.as_bytes()).is_err());
    }
}
