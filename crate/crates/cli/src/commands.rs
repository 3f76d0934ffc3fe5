//! Subcommand implementations. Each writes its human-facing output to `out`
//! and its artifacts under the chosen directory.

use crate::config::{ExperimentConfig, Report};
use crate::verify;
use anyhow::{bail, Context, Result};
use neuropt_core::ensemble::{run_ensemble, transfer_nas1, transfer_nas2, EnsembleManifest, Scheme, TransferConfig};
use neuropt_core::network::{Checkpoint, CheckpointMeta, InputBatch, NetShape, Network};
use neuropt_core::objectives::{Objective, ObjectiveSpec, ProteinModel};
use neuropt_core::search::{
    input_seed, read_search_log, retrain_record, run_search, weight_seed, write_search_log_header, write_search_record,
    SearchConfig, SearchError, SearchRecord, StrategyKind,
};
use neuropt_core::space::Genotype;
use neuropt_core::trainer::{train, write_epoch_log, TrainReport};
use serde::{Deserialize, Serialize};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const SEARCH_LOG: &str = "search.csv";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const SUMMARY: &str = "summary.json";
pub const RUN_CONFIG: &str = "config.toml";

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Clone, Default)]
pub struct SearchArgs {
    pub config: PathBuf,
    /// Runs only this seed instead of every seed in the config.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub resume: bool,
}

/// Settings that pin down one seed's run; stored next to its log so that a
/// resume with different settings is refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    objective: ObjectiveSpec,
    search: SearchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub objective: String,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub budget: u64,
    pub records: usize,
    pub evals: u64,
    pub best_cost: f64,
    pub best_iter: Option<usize>,
    pub best_genotype: Option<Genotype>,
}

/// Runs every selected seed; returns the per-seed output directories.
pub fn cmd_search(args: &SearchArgs, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let root = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .context("no output directory: pass --out or set `out` in the config")?;
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    let workers = args.workers.unwrap_or_else(default_workers).max(1);
    let objective = cfg.objective.build()?;
    let mut dirs = Vec::new();
    for seed in seeds {
        let dir = root.join(format!("seed-{seed}"));
        let run = RunConfig {
            objective: cfg.objective.clone(),
            search: cfg.search_for(seed),
        };
        let summary = search_one(&objective, &run, &dir, workers, args.resume)?;
        writeln!(
            out,
            "seed {seed}: best cost {:e} after {} records, {} evaluations -> {}",
            summary.best_cost,
            summary.records,
            summary.evals,
            dir.display()
        )?;
        dirs.push(dir);
    }
    Ok(dirs)
}

fn search_one(objective: &Objective, run: &RunConfig, dir: &Path, workers: usize, resume: bool) -> Result<SearchSummary> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let log_path = dir.join(SEARCH_LOG);
    let cfg_path = dir.join(RUN_CONFIG);
    let replay = if log_path.exists() {
        if !resume {
            bail!("{} exists; pass --resume to continue it", log_path.display());
        }
        let stored: RunConfig = toml::from_str(&fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?)
            .with_context(|| format!("parsing {}", cfg_path.display()))?;
        if &stored != run {
            bail!("{} was written with different settings; refusing to resume", log_path.display());
        }
        read_search_log(BufReader::new(File::open(&log_path)?))?
    } else {
        Vec::new()
    };
    write_file(&cfg_path, &toml::to_string(run)?)?;

    // Rewriting the replayed prefix drops a torn final line.
    let mut log = BufWriter::new(File::create(&log_path)?);
    write_search_log_header(&mut log)?;
    for r in &replay {
        write_search_record(&mut log, r)?;
    }
    log.flush()?;
    let mut log = BufWriter::new(OpenOptions::new().append(true).open(&log_path)?);
    let outcome = run_search(objective, &run.search, workers, &replay, |r| {
        write_search_record(&mut log, r)
            .and_then(|_| log.flush())
            .map_err(|e| SearchError::Log(e.to_string()))
    })?;
    drop(log);

    let best = outcome.history.best().cloned();
    if let Some(rec) = &best {
        let network = match outcome.best_network {
            Some(n) => n,
            None => retrain_record(objective, &run.search, rec)?,
        };
        best_checkpoint(network, objective, &run.search, rec).save(&dir.join(BEST_CHECKPOINT))?;
    }
    let summary = SearchSummary {
        objective: objective.id(),
        strategy: run.search.strategy,
        seed: run.search.seed,
        budget: run.search.budget,
        records: outcome.history.len(),
        evals: outcome.history.cum_evals(),
        best_cost: outcome.best_cost,
        best_iter: best.as_ref().map(|r| r.iter),
        best_genotype: outcome.best_genotype,
    };
    write_file(&dir.join(SUMMARY), &Report::new("search", &summary).to_json()?)?;
    Ok(summary)
}

fn best_checkpoint(network: Network, objective: &Objective, cfg: &SearchConfig, rec: &SearchRecord) -> Checkpoint {
    Checkpoint::new(
        network,
        CheckpointMeta {
            evals: rec.evals_spent,
            best_value: Some(rec.cost),
            objective: Some(objective.id()),
            weight_seed: Some(weight_seed(cfg.seed, rec.iter)),
            input_seed: Some(input_seed(cfg.seed)),
            ..CheckpointMeta::default()
        },
    )
}

fn optional_config(path: Option<&Path>, objective: &ObjectiveSpec) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::new(objective.clone())),
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub genotype: Genotype,
    pub objective: ObjectiveSpec,
    /// Source of `search.shape` and `search.train`; defaults otherwise.
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

/// Trains one genotype with the weights and inputs a search with `seed`
/// would give its first candidate.
pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<TrainReport> {
    let cfg = optional_config(args.config.as_deref(), &args.objective)?;
    let objective = args.objective.build()?;
    let build = cfg.search.shape.config(objective.lower().to_vec(), objective.upper().to_vec());
    let mut net = Network::build(&args.genotype, &build)?;
    let (ws, is) = (weight_seed(args.seed, 1), input_seed(args.seed));
    net.init_weights(ws);
    let inputs = InputBatch::for_config(&build, is);
    let report = train(&mut net, &objective, &inputs, &cfg.search.train)?;
    let json = Report::new("train", &report).to_json()?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_epoch_log(BufWriter::new(File::create(dir.join("epochs.csv"))?), &report.history)?;
        write_file(&dir.join("report.json"), &json)?;
        let meta = CheckpointMeta {
            epochs: report.epochs,
            evals: report.evals,
            best_value: Some(report.best_value),
            best_solution: Some(report.best_solution.clone()),
            objective: Some(objective.id()),
            weight_seed: Some(ws),
            input_seed: Some(is),
        };
        net.to_checkpoint(meta).save(&dir.join("checkpoint.json"))?;
    }
    writeln!(out, "{json}")?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Nas1,
    Nas2,
}

#[derive(Debug, Clone)]
pub struct TransferArgs {
    pub mode: TransferMode,
    pub checkpoint: Option<PathBuf>,
    pub genotype: Option<Genotype>,
    pub target: ObjectiveSpec,
    pub cutoff: Option<u64>,
    /// Source of `transfer` and, for NAS-2 from a genotype, `search.shape`.
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub mode: TransferMode,
    pub target: String,
    pub cutoff: u64,
    pub seed: u64,
    pub report: TrainReport,
}

/// NAS-1 needs a checkpoint. NAS-2 takes a genotype, or the genotype and
/// shape of a checkpoint.
pub fn cmd_transfer(args: &TransferArgs, out: &mut dyn Write) -> Result<TransferSummary> {
    let cfg = optional_config(args.config.as_deref(), &args.target)?;
    let tcfg = TransferConfig {
        cutoff: args.cutoff.unwrap_or(cfg.transfer.cutoff),
        seed: args.seed.unwrap_or(cfg.transfer.seed),
        ..cfg.transfer.clone()
    };
    let objective = args.target.build()?;
    let checkpoint = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let outcome = match (args.mode, &checkpoint, &args.genotype) {
        (TransferMode::Nas1, Some(ck), None) => transfer_nas1(ck, &objective, &tcfg)?,
        (TransferMode::Nas1, ..) => bail!("nas1 needs --checkpoint and no --genotype"),
        (TransferMode::Nas2, None, Some(g)) => transfer_nas2(g, &cfg.search.shape, &objective, &tcfg)?,
        (TransferMode::Nas2, Some(ck), None) => {
            let g = ck.network.genotype().context("checkpoint has no genotype")?;
            let c = ck.network.config();
            let shape = NetShape {
                cells: c.cells,
                channels: c.channels,
                num_sol: c.num_sol,
                input_size: c.input_size,
            };
            transfer_nas2(g, &shape, &objective, &tcfg)?
        }
        (TransferMode::Nas2, ..) => bail!("nas2 needs exactly one of --checkpoint and --genotype"),
    };
    let summary = TransferSummary {
        mode: args.mode,
        target: objective.id(),
        cutoff: tcfg.cutoff,
        seed: tcfg.seed,
        report: outcome.report,
    };
    let json = Report::new("transfer", &summary).to_json()?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_file(&dir.join("report.json"), &json)?;
        let meta = CheckpointMeta {
            epochs: summary.report.epochs,
            evals: summary.report.evals,
            best_value: Some(summary.report.best_value),
            best_solution: Some(summary.report.best_solution.clone()),
            objective: Some(objective.id()),
            ..CheckpointMeta::default()
        };
        outcome.network.to_checkpoint(meta).save(&dir.join("checkpoint.json"))?;
    }
    writeln!(out, "{json}")?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub scheme: Scheme,
    pub objective: String,
    pub members: usize,
    pub report: TrainReport,
    pub member_reports: Vec<TrainReport>,
    pub ensemble_best: Option<f64>,
}

pub fn cmd_ensemble(manifest: &Path, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<EnsembleSummary> {
    let m = EnsembleManifest::load(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let members = m.load_members(base)?;
    let objective = m.objective.build()?;
    let outcome = run_ensemble(m.scheme, &members, &objective, &m.transfer)?;
    let summary = EnsembleSummary {
        scheme: outcome.scheme,
        objective: objective.id(),
        members: members.len(),
        report: outcome.report,
        member_reports: outcome.member_reports,
        ensemble_best: outcome.ensemble_best,
    };
    let json = Report::new("ensemble", &summary).to_json()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_file(&dir.join("report.json"), &json)?;
    }
    writeln!(out, "{json}")?;
    Ok(summary)
}

/// Angles in degrees separated by whitespace or commas; `#` starts a comment.
pub fn parse_angles(text: &str) -> Result<Vec<f64>> {
    let mut angles = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("");
        for tok in body.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let v: f64 = tok.parse().with_context(|| format!("line {}: bad angle {tok:?}", n + 1))?;
            if !v.is_finite() {
                bail!("line {}: angle {tok:?} is not finite", n + 1);
            }
            angles.push(v);
        }
    }
    Ok(angles)
}

/// Energy of sequence `id` at the given angles, all zero when no file is
/// given.
pub fn cmd_protein(id: &str, angles: Option<&Path>, out: &mut dyn Write) -> Result<f64> {
    let model = ProteinModel::by_id(id)?;
    let angles = match angles {
        Some(p) => parse_angles(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => vec![0.0; model.num_angles()],
    };
    if angles.len() != model.num_angles() {
        bail!("{id} needs {} angles, got {}", model.num_angles(), angles.len());
    }
    let e = model.energy(&angles)?;
    writeln!(out, "{e:e}")?;
    Ok(e)
}

/// Prints one line per check; `true` when every check passed.
pub fn cmd_verify(out: &mut dyn Write) -> Result<bool> {
    let mut ok = true;
    for c in verify::run_all() {
        writeln!(out, "{c}")?;
        ok &= c.passed;
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_files_accept_commas_whitespace_and_comments() {
        let a = parse_angles("# header\n10, -20.5\t30 # tail\n\n1e1\n").unwrap();
        assert_eq!(a, vec![10.0, -20.5, 30.0, 10.0]);
        assert!(parse_angles("10 ten").unwrap_err().to_string().contains("line 1"));
        assert!(parse_angles("NaN").is_err());
    }
}
