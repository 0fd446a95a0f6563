//! Command-line front end.
//!
//! Every command reads an optional JSON config file (unknown keys rejected),
//! applies flag overrides, validates the result and only then touches data.
//! Reports are JSON documents stamped with [`SCHEMA_VERSION`].

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_csv, save_csv, CsvSchema, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::MiMode;
use crate::metrics::{ate_error, auuc, dlu, pehe, AuucGrid};
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::targeting::{policy_value, save_selection_csv, TargetingPolicy};
use crate::training::{fit, run_ablations, TrainConfig};
use crate::SCHEMA_VERSION;

pub const DATA_FILE: &str = "synthetic.csv";
pub const SIDECAR_FILE: &str = "synthetic.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const UPLIFT_FILE: &str = "uplift.csv";
pub const SELECTION_FILE: &str = "selection.csv";
pub const TARGET_REPORT_FILE: &str = "target_report.json";
pub const ABLATION_CSV_FILE: &str = "ablation.csv";
pub const ABLATION_JSON_FILE: &str = "ablation.json";

/// Parameters shared by all commands. Each command reads the keys it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Input dataset CSV; `ablate` falls back to generating `synthetic`.
    pub data: Option<PathBuf>,
    pub schema: CsvSchema,
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
    pub checkpoint: Option<PathBuf>,
    pub budget: Option<i64>,
    /// Write the uplift curve CSV in `eval`.
    pub curve: bool,
    pub grid: AuucGrid,
    /// Fail `eval` when the dataset has no potential outcomes.
    pub require_pehe: bool,
    /// Seeds for `ablate`.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            schema: CsvSchema::default(),
            synthetic: SyntheticSpec::default(),
            train: TrainConfig::default(),
            checkpoint: None,
            budget: None,
            curve: false,
            grid: AuucGrid::default(),
            require_pehe: false,
            seeds: (0..10).collect(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Validation("no dataset given (use --data or \"data\")".into()))
    }

    fn checkpoint_path(&self) -> Result<&Path> {
        self.checkpoint.as_deref().ok_or_else(|| {
            Error::Validation("no checkpoint given (use --checkpoint or \"checkpoint\")".into())
        })
    }

    fn budget(&self) -> Result<usize> {
        match self.budget {
            None => Err(Error::Validation(
                "no budget given (use --budget or \"budget\")".into(),
            )),
            Some(b) if b < 0 => Err(Error::Validation(format!("budget must be >= 0, got {b}"))),
            Some(b) => Ok(b as usize),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mimcfr",
    version,
    about = "Disentangled counterfactual regression toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Mutual-information term: mim, rlo or none.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<MiMode>,
    /// Use three separate representation stacks instead of the shared layer.
    #[arg(long)]
    pub no_sfd: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its sidecar.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit a model; writes a checkpoint and a training report.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the uplift curve as CSV.
        #[arg(long)]
        curve: bool,
        /// Fail when √PEHE cannot be computed.
        #[arg(long)]
        require_pehe: bool,
    },
    /// Select a treatment subgroup under a budget.
    Target {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        budget: Option<i64>,
    },
    /// Train every ablation variant over several seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Number of repetitions, using seeds 0..reps.
        #[arg(long, conflicts_with = "seeds")]
        reps: Option<u64>,
        /// Explicit comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<MiMode, String> {
    MiMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (expected mim, rlo or none)"))
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out.clone_from(out);
    }
    Ok(cfg)
}

fn apply_train_args(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(m) = args.mode {
        cfg.train.mode = m;
    }
    if args.no_sfd {
        cfg.train.sfd_enabled = false;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
}

/// Merges the config file with the flags of `command`.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    match command {
        Command::Generate { common, n } => {
            let mut cfg = base_config(common)?;
            if let Some(s) = common.seed {
                cfg.synthetic.seed = s;
            }
            if let Some(n) = n {
                cfg.synthetic.n = *n;
            }
            Ok(cfg)
        }
        Command::Train { common, train } => {
            let mut cfg = base_config(common)?;
            apply_train_args(&mut cfg, train);
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            Ok(cfg)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            curve,
            require_pehe,
        } => {
            let mut cfg = base_config(common)?;
            if let Some(d) = data {
                cfg.data = Some(d.clone());
            }
            if let Some(c) = checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
            cfg.curve |= curve;
            cfg.require_pehe |= require_pehe;
            Ok(cfg)
        }
        Command::Target {
            common,
            data,
            checkpoint,
            budget,
        } => {
            let mut cfg = base_config(common)?;
            if let Some(d) = data {
                cfg.data = Some(d.clone());
            }
            if let Some(c) = checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
            if budget.is_some() {
                cfg.budget = *budget;
            }
            Ok(cfg)
        }
        Command::Ablate {
            common,
            train,
            reps,
            seeds,
        } => {
            let mut cfg = base_config(common)?;
            apply_train_args(&mut cfg, train);
            if let Some(r) = reps {
                cfg.seeds = (0..*r).collect();
            }
            if let Some(s) = seeds {
                cfg.seeds.clone_from(s);
            }
            if let Some(s) = common.seed {
                cfg.synthetic.seed = s;
            }
            Ok(cfg)
        }
    }
}

/// Resolves the config and runs the command. Returns the written paths.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = resolve(&cli.command)?;
    match cli.command {
        Command::Generate { .. } => cmd_generate(&cfg),
        Command::Train { .. } => cmd_train(&cfg),
        Command::Eval { .. } => cmd_eval(&cfg),
        Command::Target { .. } => cmd_target(&cfg),
        Command::Ablate { .. } => cmd_ablate(&cfg),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    load_csv(cfg.data_path()?, &cfg.schema)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.synthetic.validate()?;
    let generated = generate_synthetic(&cfg.synthetic)?;
    prepare_out(&cfg.out)?;
    let csv_path = cfg.out.join(DATA_FILE);
    let json_path = cfg.out.join(SIDECAR_FILE);
    save_csv(&generated.dataset, &csv_path)?;
    write_json(&generated.sidecar(&cfg.synthetic), &json_path)?;
    log::info!(
        "wrote {} rows to {}",
        generated.dataset.n(),
        csv_path.display()
    );
    Ok(vec![csv_path, json_path])
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.train.validate()?;
    let ds = load_data(cfg)?;
    let (params, report) = fit(&ds, &cfg.train)?;
    log::info!(
        "trained {} epochs (best {}), {:.1}s",
        report.final_epoch,
        report.best_epoch,
        report.wall_clock_seconds
    );
    prepare_out(&cfg.out)?;
    let ckpt = cfg.out.join(CHECKPOINT_FILE);
    let rep = cfg.out.join(TRAIN_REPORT_FILE);
    save_checkpoint(&params, &ckpt)?;
    write_json(&report, &rep)?;
    Ok(vec![ckpt, rep])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pehe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate_error: Option<f64>,
    pub auuc_total: f64,
    pub auuc_normalized: Option<f64>,
    pub degenerate_prefix: bool,
    pub grid: AuucGrid,
}

fn load_model(cfg: &RunConfig, ds: &Dataset) -> Result<ModelParams> {
    let params = load_checkpoint(cfg.checkpoint_path()?)?;
    if params.config.input_dim != ds.d() {
        return Err(Error::Dimension(format!(
            "checkpoint expects {} covariates, dataset has {}",
            params.config.input_dim,
            ds.d()
        )));
    }
    Ok(params)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ds = load_data(cfg)?;
    let params = load_model(cfg, &ds)?;
    if cfg.require_pehe && !ds.has_potential_outcomes() {
        return Err(Error::Capability(
            "√PEHE requested but the dataset has no potential outcomes".into(),
        ));
    }
    let tau = params.predict_ite(&ds.x)?;
    let (pehe_v, ate_v) = if ds.has_potential_outcomes() {
        (Some(pehe(&tau, &ds)?), Some(ate_error(&tau, &ds)?))
    } else {
        (None, None)
    };
    let curve = auuc(&tau, &ds.t, &ds.y, cfg.grid)?;
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        n: ds.n(),
        pehe: pehe_v,
        ate_error: ate_v,
        auuc_total: curve.auuc_total,
        auuc_normalized: curve.auuc_normalized,
        degenerate_prefix: curve.degenerate_prefix,
        grid: cfg.grid,
    };
    prepare_out(&cfg.out)?;
    let mut written = Vec::new();
    if cfg.curve {
        let p = cfg.out.join(UPLIFT_FILE);
        curve.save_csv(&p)?;
        written.push(p);
    }
    let p = cfg.out.join(METRICS_FILE);
    write_json(&report, &p)?;
    written.push(p);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub schema_version: u32,
    pub n: usize,
    pub budget: usize,
    pub n_selected: usize,
    /// Value of the selection under the true potential outcomes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_value: Option<f64>,
    /// Value of treating nobody.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dlu: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dlu_uplift: Option<i64>,
}

pub fn cmd_target(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let budget = cfg.budget()?;
    let ds = load_data(cfg)?;
    let params = load_model(cfg, &ds)?;
    let tau = params.predict_ite(&ds.x)?;
    let policy = TargetingPolicy::greedy(&tau, budget);

    let mut report = TargetReport {
        schema_version: SCHEMA_VERSION,
        n: ds.n(),
        budget,
        n_selected: policy.selected.len(),
        policy_value: None,
        baseline_value: None,
        dlu: None,
        dlu_uplift: None,
    };
    if ds.has_potential_outcomes() {
        report.policy_value = Some(policy_value(&ds, &policy.selected)?);
        report.baseline_value = Some(policy_value(&ds, &[])?);
        if let (Ok(v), Ok(base)) = (dlu(&ds, &policy.selected), dlu(&ds, &[])) {
            report.dlu = Some(v);
            report.dlu_uplift = Some(v as i64 - base as i64);
        }
    }
    prepare_out(&cfg.out)?;
    let sel = cfg.out.join(SELECTION_FILE);
    let rep = cfg.out.join(TARGET_REPORT_FILE);
    save_selection_csv(&policy.selected, &sel)?;
    write_json(&report, &rep)?;
    Ok(vec![sel, rep])
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.train.validate()?;
    let ds = match &cfg.data {
        Some(p) => load_csv(p, &cfg.schema)?,
        None => generate_synthetic(&cfg.synthetic)?.dataset,
    };
    let table = run_ablations(&ds, &cfg.train, &cfg.seeds)?;
    prepare_out(&cfg.out)?;
    let csv_path = cfg.out.join(ABLATION_CSV_FILE);
    let json_path = cfg.out.join(ABLATION_JSON_FILE);
    let f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    table.write_csv(std::io::BufWriter::new(f))?;
    write_json(&table, &json_path)?;
    Ok(vec![csv_path, json_path])
}
