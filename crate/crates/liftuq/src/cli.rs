//! Experiment harness: config file parsing and the `gen-data`, `train`,
//! `uq`, `sweep`, and `render` subcommands.

use crate::calibmetrics::{
    band_from_sigma, evaluate_bands, fit_calibration_scale, mean_abs_normalization,
    metrics_csv_row, CalibrationResult, METRICS_CSV_HEADER,
};
use crate::darcy::{extract_sample, generate_dataset, CoefficientConfig};
use crate::error::{Error, Result};
use crate::operator_net::{
    input_with_coordinates, load_checkpoint, param_census, Activation, OperatorConfig,
    OperatorParams,
};
use crate::render::{write_ppm, ColorRange};
use crate::tensor_field::{read_dataset, DatasetContainer, Field, Grid2D};
use crate::train::{history_csv, train_model, TrainConfig};
use crate::uq::{
    mc_predict_scaled_lift, predict, prediction_from_container, predictions_to_container,
    McPrediction, PerturbSite, UqConfig, UqMethod,
};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA_VERSION: u64 = 1;

/// Environment variable controlling the rayon worker count; defaults to
/// machine parallelism when unset.
pub const WORKERS_ENV: &str = "LIFTUQ_WORKERS";

// ---------------------------------------------------------------------------
// Experiment configuration (TOML)
// ---------------------------------------------------------------------------

fn default_nx() -> usize {
    33
}
fn default_data_seed() -> u64 {
    1
}
fn default_n_train() -> usize {
    200
}
fn default_n_cal() -> usize {
    50
}
fn default_n_test() -> usize {
    50
}
fn default_solver_tol() -> f64 {
    1e-10
}
fn default_d_v() -> usize {
    32
}
fn default_layers() -> usize {
    4
}
fn default_k_max() -> usize {
    8
}
fn default_activation() -> Activation {
    Activation::Gelu
}
fn default_uq_method() -> UqMethod {
    UqMethod::LiftDropout
}
fn default_uq_site() -> PerturbSite {
    PerturbSite::Lift
}
fn default_uq_p() -> f64 {
    0.3
}
fn default_uq_t() -> usize {
    20
}
fn default_uq_seed() -> u64 {
    99
}
fn default_target_coverage() -> f64 {
    0.95
}
fn default_sweep_methods() -> Vec<UqMethod> {
    vec![UqMethod::LiftDropout, UqMethod::NaiveDropout]
}
fn default_sweep_sites() -> Vec<PerturbSite> {
    vec![PerturbSite::Lift]
}
fn default_sweep_p() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7, 0.9, 0.95]
}
fn default_sweep_t() -> Vec<usize> {
    vec![5, 20, 100]
}
fn default_shared_fit_p() -> f64 {
    0.3
}
fn default_shared_fit_t() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            nx: default_nx(),
            ny: default_nx(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub solver_tol: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seed: default_data_seed(),
            n_train: default_n_train(),
            n_cal: default_n_cal(),
            n_test: default_n_test(),
            solver_tol: default_solver_tol(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSection {
    pub d_v: usize,
    pub layers: usize,
    pub k_max: usize,
    pub activation: Activation,
}

impl Default for OperatorSection {
    fn default() -> Self {
        OperatorSection {
            d_v: default_d_v(),
            layers: default_layers(),
            k_max: default_k_max(),
            activation: default_activation(),
        }
    }
}

impl OperatorSection {
    pub fn to_operator_config(&self) -> OperatorConfig {
        OperatorConfig {
            d_a: 3,
            d_v: self.d_v,
            d_u: 1,
            layers: self.layers,
            k_max: self.k_max,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UqSection {
    pub method: UqMethod,
    pub site: PerturbSite,
    pub p: f64,
    pub t_samples: usize,
    pub seed: u64,
    pub target_coverage: f64,
}

impl Default for UqSection {
    fn default() -> Self {
        UqSection {
            method: default_uq_method(),
            site: default_uq_site(),
            p: default_uq_p(),
            t_samples: default_uq_t(),
            seed: default_uq_seed(),
            target_coverage: default_target_coverage(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub methods: Vec<UqMethod>,
    pub sites: Vec<PerturbSite>,
    pub p_values: Vec<f64>,
    pub t_values: Vec<usize>,
    /// The (p, T) cell whose calibration scale is shared across all
    /// lift-site cells of the lifting-restricted methods.
    pub shared_fit_p: f64,
    pub shared_fit_t: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            methods: default_sweep_methods(),
            sites: default_sweep_sites(),
            p_values: default_sweep_p(),
            t_values: default_sweep_t(),
            shared_fit_p: default_shared_fit_p(),
            shared_fit_t: default_shared_fit_t(),
        }
    }
}

fn default_train_section() -> TrainConfig {
    TrainConfig::default()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u64,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub coefficient: CoefficientConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub operator: OperatorSection,
    #[serde(default = "default_train_section")]
    pub train: TrainConfig,
    #[serde(default)]
    pub uq: UqSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            grid: GridSection::default(),
            coefficient: CoefficientConfig::default(),
            data: DataSection::default(),
            operator: OperatorSection::default(),
            train: TrainConfig::default(),
            uq: UqSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema_version {} (expected {})",
                self.schema_version, CONFIG_SCHEMA_VERSION
            )));
        }
        let grid = Grid2D::new(self.grid.nx, self.grid.ny)?;
        self.coefficient.validate(&grid)?;
        let op = self.operator.to_operator_config();
        op.validate()?;
        op.validate_for_grid(&grid)?;
        self.train.validate()?;
        UqConfig {
            method: self.uq.method,
            site: self.uq.site,
            p: self.uq.p,
            t_samples: self.uq.t_samples,
            seed: self.uq.seed,
            case_stream: 0,
        }
        .validate()?;
        if !(0.0 < self.uq.target_coverage && self.uq.target_coverage <= 1.0) {
            return Err(Error::Config("target_coverage must lie in (0,1]".into()));
        }
        if self.sweep.methods.is_empty()
            || self.sweep.sites.is_empty()
            || self.sweep.p_values.is_empty()
            || self.sweep.t_values.is_empty()
        {
            return Err(Error::Config("sweep lists must be nonempty".into()));
        }
        if self.data.solver_tol <= 0.0 {
            return Err(Error::Config("solver_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Parses and validates an experiment config from TOML text.
pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {}", e)))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_experiment_config(&text)
}

// ---------------------------------------------------------------------------
// Command-line surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "liftuq",
    about = "Darcy-flow neural operator workbench with lifting-restricted Monte Carlo uncertainty"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic Darcy dataset (train/cal/test splits)
    GenData(GenDataArgs),
    /// Train the operator (optionally an ensemble) and write checkpoints
    Train(TrainArgs),
    /// Run one UQ configuration: calibrate on the cal split, evaluate on test
    Uq(UqArgs),
    /// Evaluate a grid of (method, site, p, T) cells into one CSV
    Sweep(SweepArgs),
    /// Render a field from a dataset or prediction container to PPM
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Experiment config (TOML); defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the data-generation seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the three split containers
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory produced by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Override the training seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoint(s) and history CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Train this many ensemble members with distinct seeds
    #[arg(long)]
    pub ensemble: Option<usize>,
    /// Continue from an existing checkpoint (fresh optimizer state)
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UqArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint container; repeat for ensemble members
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub method: Option<UqMethod>,
    #[arg(long)]
    pub site: Option<PerturbSite>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long = "T")]
    pub t_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub target_coverage: Option<f64>,
    /// Execute Method A through column-scaled lifting weights instead of
    /// feature masks (identical predictions for the same seed)
    #[arg(long)]
    pub scaled_lift: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint container; repeat for ensemble members
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub target_coverage: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Prediction or dataset container to read from
    #[arg(long)]
    pub input: PathBuf,
    /// Which field to draw: mean|sigma|band|residual|coverage-mask|input|truth
    #[arg(long)]
    pub field: String,
    /// Sample index within the container
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Dataset container holding ground truth (residual/coverage-mask)
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Band multiplier for band/coverage-mask renders
    #[arg(long, default_value_t = 1.0)]
    pub k: f64,
    #[arg(long)]
    pub min: Option<f64>,
    #[arg(long)]
    pub max: Option<f64>,
    /// Output PPM path
    #[arg(long)]
    pub out: PathBuf,
}

/// Entry point used by the binary; maps errors to the documented exit codes
/// and `error:`-prefixed lines.
pub fn cli_main() -> i32 {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                // ignore failure if a pool already exists (e.g. tests)
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: {} must be a positive integer, got '{}'", WORKERS_ENV, v);
                return 1;
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version with success exits
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Uq(args) => cmd_uq(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Render(args) => cmd_render(args),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => load_experiment_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub const SPLIT_NAMES: [&str; 3] = ["train", "cal", "test"];

pub fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.data.seed);
    let grid = Grid2D::new(cfg.grid.nx, cfg.grid.ny)?;
    let splits = generate_dataset(
        seed,
        grid,
        &cfg.coefficient,
        cfg.data.n_train,
        cfg.data.n_cal,
        cfg.data.n_test,
        cfg.data.solver_tol,
    )?;
    ensure_dir(&args.out)?;
    for (name, split) in SPLIT_NAMES.iter().zip(splits.iter()) {
        split.write(&args.out.join(name))?;
    }
    // echo the effective config so the artifact is self-describing
    let echoed = ExperimentConfig {
        data: DataSection { seed, ..cfg.data },
        ..cfg
    };
    write_text(
        &args.out.join("config.toml"),
        &toml::to_string_pretty(&echoed)
            .map_err(|e| Error::Config(format!("config serialize: {}", e)))?,
    )?;
    println!(
        "wrote {} train / {} cal / {} test samples on {}x{} to {}",
        echoed.data.n_train,
        echoed.data.n_cal,
        echoed.data.n_test,
        grid.nx,
        grid.ny,
        args.out.display()
    );
    Ok(())
}

/// Loads one split as (network input, truth) pairs.
pub fn load_split(dir: &Path, name: &str) -> Result<Vec<(Field, Field)>> {
    let container = read_dataset(&dir.join(name))?;
    let n: usize = container.meta_parsed("samples")?;
    (0..n)
        .map(|m| {
            let s = extract_sample(&container, m)?;
            Ok((input_with_coordinates(&s.a)?, s.u))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn checkpoint_with_epochs(
    params: &OperatorParams,
    op: &OperatorConfig,
    epochs_completed: usize,
    path: &Path,
) -> Result<()> {
    let mut c = crate::operator_net::checkpoint_container(params, op)?;
    c.set_meta("epochs_completed", epochs_completed);
    c.write(path)
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let op = cfg.operator.to_operator_config();
    let mut tcfg = cfg.train;
    if let Some(s) = args.seed {
        tcfg.seed = s;
    }
    let train_data = load_split(&args.data, "train")?;
    let cal_data = load_split(&args.data, "cal")?;
    ensure_dir(&args.out)?;

    let members = args.ensemble.unwrap_or(1);
    if members == 0 {
        return Err(Error::Config("--ensemble must be at least 1".into()));
    }
    if args.resume.is_some() && members != 1 {
        return Err(Error::Config("--resume does not combine with --ensemble".into()));
    }

    for member in 0..members {
        let mut member_cfg = tcfg;
        member_cfg.seed = tcfg.seed + member as u64;
        let mut start_epoch = 0usize;
        let resumed = if let Some(ckpt) = &args.resume {
            let (params, ck_cfg) = load_checkpoint(ckpt)?;
            if ck_cfg != op {
                return Err(Error::Config(
                    "checkpoint architecture does not match config".into(),
                ));
            }
            let container = DatasetContainer::read(ckpt)?;
            start_epoch = container.meta_parsed("epochs_completed").unwrap_or(0);
            Some(params)
        } else {
            None
        };
        // resume keeps the epoch counter monotone by training only the
        // remaining budget; optimizer moments restart
        if start_epoch >= member_cfg.epochs {
            println!(
                "checkpoint already at epoch {} >= budget {}; nothing to do",
                start_epoch, member_cfg.epochs
            );
            return Ok(());
        }
        member_cfg.epochs -= start_epoch;
        let outcome = match resumed {
            Some(params) => crate::train::train_model_from(
                &train_data,
                &cal_data,
                &op,
                &member_cfg,
                params,
            )?,
            None => train_model(&train_data, &cal_data, &op, &member_cfg)?,
        };
        let name = if members == 1 {
            "checkpoint".to_string()
        } else {
            format!("member_{}", member)
        };
        let history_name = if members == 1 {
            "history.csv".to_string()
        } else {
            format!("history_member_{}.csv", member)
        };
        let mut history = outcome.history.clone();
        for row in &mut history {
            row.epoch += start_epoch;
        }
        write_text(&args.out.join(&history_name), &history_csv(&history))?;
        if let Some(reason) = outcome.diverged {
            return Err(Error::Numerical(format!(
                "training diverged ({}); history written to {}",
                reason, history_name
            )));
        }
        let final_epoch = start_epoch + history.len();
        checkpoint_with_epochs(
            &outcome.best_params,
            &op,
            final_epoch,
            &args.out.join(&name),
        )?;
        let census = param_census(&outcome.best_params);
        println!(
            "{}: best held-out rel L2 {:.4} after {} epochs; lifting holds {} of {} parameters",
            name,
            outcome.best_eval,
            final_epoch,
            census.lifting,
            census.total()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// uq
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct UqSettings {
    uq: UqConfig,
    target: f64,
}

fn resolve_uq_settings(cfg: &ExperimentConfig, args: &UqArgs) -> UqSettings {
    UqSettings {
        uq: UqConfig {
            method: args.method.unwrap_or(cfg.uq.method),
            site: args.site.unwrap_or(cfg.uq.site),
            p: args.p.unwrap_or(cfg.uq.p),
            t_samples: args.t_samples.unwrap_or(cfg.uq.t_samples),
            seed: args.seed.unwrap_or(cfg.uq.seed),
            case_stream: 0,
        },
        target: args.target_coverage.unwrap_or(cfg.uq.target_coverage),
    }
}

struct SplitPredictions {
    preds: Vec<McPrediction>,
    residuals: Vec<Field>,
}

/// Distinct `case_stream` ranges per split so no two cases anywhere share
/// Monte Carlo noise.
const CAL_STREAM_BASE: u64 = 0;
const TEST_STREAM_BASE: u64 = 1 << 32;

fn predict_split(
    data: &[(Field, Field)],
    params: &OperatorParams,
    op: &OperatorConfig,
    uq: &UqConfig,
    stream_base: u64,
    ensemble: &[OperatorParams],
    scaled_lift: bool,
) -> Result<SplitPredictions> {
    let mut preds = Vec::with_capacity(data.len());
    let mut residuals = Vec::with_capacity(data.len());
    for (case, (input, truth)) in data.iter().enumerate() {
        let uq = UqConfig {
            case_stream: stream_base + case as u64,
            ..*uq
        };
        let pred = if scaled_lift {
            mc_predict_scaled_lift(input, params, op, &uq)?
        } else {
            predict(input, params, op, &uq, ensemble)?
        };
        let mut r = pred.mean.clone();
        for (rv, tv) in r.values.iter_mut().zip(&truth.values) {
            *rv -= tv;
        }
        preds.push(pred);
        residuals.push(r);
    }
    Ok(SplitPredictions { preds, residuals })
}

/// Calibration fit that tolerates degenerate (sigma ≡ 0) estimators: falls
/// back to the smallest positive band and reports the regime instead of
/// failing, since the spec wants coverage reported even at p = 0.
fn fit_or_degenerate(
    residuals: &[Field],
    sigmas: &[Field],
    target: f64,
) -> Result<(CalibrationResult, Option<String>)> {
    match fit_calibration_scale(residuals, sigmas, target) {
        Ok(res) => Ok((res, None)),
        Err(Error::Numerical(msg)) if msg.contains("uncalibratable") => {
            let zero_sigma_misses = residuals
                .iter()
                .zip(sigmas)
                .flat_map(|(r, s)| r.values.iter().zip(&s.values))
                .filter(|(rv, sv)| **sv == 0.0 && **rv != 0.0)
                .count();
            Ok((
                CalibrationResult {
                    k: f64::MIN_POSITIVE,
                    target_coverage: target,
                    achieved_on_cal: 0.0,
                    zero_sigma_misses,
                },
                Some(msg),
            ))
        }
        Err(e) => Err(e),
    }
}

fn calibration_record(fit: &CalibrationResult, degenerate: &Option<String>) -> String {
    let mut s = format!(
        "k = {}\ntarget_coverage = {}\nachieved_on_cal = {}\nzero_sigma_misses = {}\n",
        fit.k, fit.target_coverage, fit.achieved_on_cal, fit.zero_sigma_misses
    );
    if let Some(d) = degenerate {
        s.push_str(&format!("degenerate = \"{}\"\n", d));
    }
    s
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<(OperatorParams, OperatorConfig, Vec<OperatorParams>)> {
    let (first, op) = load_checkpoint(&paths[0])?;
    let mut all = vec![first.clone()];
    for p in &paths[1..] {
        let (params, cfg) = load_checkpoint(p)?;
        if cfg != op {
            return Err(Error::Config(format!(
                "checkpoint {} architecture differs from {}",
                p.display(),
                paths[0].display()
            )));
        }
        all.push(params);
    }
    Ok((first, op, all))
}

pub fn cmd_uq(args: UqArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let settings = resolve_uq_settings(&cfg, &args);
    let uq = settings.uq;
    uq.validate()?;
    if !(0.0 < settings.target && settings.target <= 1.0) {
        return Err(Error::Config("target coverage must lie in (0,1]".into()));
    }
    if uq.method == UqMethod::Ensemble && args.checkpoint.len() < 2 {
        return Err(Error::Config(
            "ensemble method needs at least two --checkpoint paths".into(),
        ));
    }
    if args.scaled_lift && (uq.method != UqMethod::LiftDropout || uq.site != PerturbSite::Lift) {
        return Err(Error::Config(
            "--scaled-lift requires method lift-dropout at site lift".into(),
        ));
    }
    let (params, op, ensemble) = load_checkpoints(&args.checkpoint)?;
    let cal_data = load_split(&args.data, "cal")?;
    let test_data = load_split(&args.data, "test")?;
    ensure_dir(&args.out)?;

    let cal = predict_split(&cal_data, &params, &op, &uq, CAL_STREAM_BASE, &ensemble, args.scaled_lift)?;
    let cal_sigmas: Vec<Field> = cal.preds.iter().map(|p| p.sigma.clone()).collect();
    let (fit, fit_degenerate) = fit_or_degenerate(&cal.residuals, &cal_sigmas, settings.target)?;
    if let Some(d) = &fit_degenerate {
        eprintln!("warning: degenerate configuration: {}", d);
    }
    for pred in cal.preds.iter() {
        if let Some(d) = &pred.degenerate {
            eprintln!("warning: degenerate configuration: {}", d);
            break;
        }
    }
    let norm = mean_abs_normalization(
        &cal_data.iter().map(|(_, u)| u.clone()).collect::<Vec<_>>(),
    )?;

    let test = predict_split(&test_data, &params, &op, &uq, TEST_STREAM_BASE, &ensemble, args.scaled_lift)?;
    let bands: Vec<Field> = test
        .preds
        .iter()
        .map(|p| band_from_sigma(&p.sigma, fit.k))
        .collect::<Result<_>>()?;
    let report = evaluate_bands(&test.residuals, &bands, norm)?;

    // artifacts: calibration record, metrics CSV, prediction containers
    write_text(
        &args.out.join("calibration.txt"),
        &calibration_record(&fit, &fit_degenerate),
    )?;
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    csv.push_str(&metrics_csv_row(
        &uq.method.to_string(),
        &uq.site.to_string(),
        uq.p,
        uq.t_samples,
        fit.k,
        settings.target,
        &report,
    ));
    csv.push('\n');
    write_text(&args.out.join("metrics.csv"), &csv)?;
    predictions_to_container(&cal.preds, &uq)?.write(&args.out.join("predictions_cal"))?;
    predictions_to_container(&test.preds, &uq)?.write(&args.out.join("predictions_test"))?;
    println!(
        "{} site={} p={} T={}: k={:.6} avg_cr={:.4} total_cr={:.4} bw_all={:.4}",
        uq.method, uq.site, uq.p, uq.t_samples, fit.k, report.avg_cr, report.total_cr,
        report.bandwidth.bw_all
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// One sweep cell in the deterministic (method, site, p, T) order.
#[derive(Debug, Clone, Copy)]
pub struct SweepCell {
    pub method: UqMethod,
    pub site: PerturbSite,
    pub p: f64,
    pub t_samples: usize,
}

pub fn sweep_cells(sweep: &SweepSection) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &method in &sweep.methods {
        for &site in &sweep.sites {
            for &p in &sweep.p_values {
                for &t in &sweep.t_values {
                    cells.push(SweepCell {
                        method,
                        site,
                        p,
                        t_samples: t,
                    });
                }
            }
        }
    }
    cells
}

/// Methods whose calibration scale is shared across (p, T) cells from one
/// reference fit; the baselines recalibrate per cell.
fn uses_shared_k(method: UqMethod) -> bool {
    matches!(method, UqMethod::LiftDropout | UqMethod::LiftGaussian)
}

pub fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let target = args.target_coverage.unwrap_or(cfg.uq.target_coverage);
    let seed = args.seed.unwrap_or(cfg.uq.seed);
    let (params, op, ensemble) = load_checkpoints(&args.checkpoint)?;
    let cal_data = load_split(&args.data, "cal")?;
    let test_data = load_split(&args.data, "test")?;
    ensure_dir(&args.out)?;
    let norm = mean_abs_normalization(
        &cal_data.iter().map(|(_, u)| u.clone()).collect::<Vec<_>>(),
    )?;

    // shared calibration scales, one per (method, site) for the
    // lifting-restricted methods, fitted at the reference (p, T)
    let mut shared_k: std::collections::BTreeMap<(String, String), f64> =
        std::collections::BTreeMap::new();
    for &method in &cfg.sweep.methods {
        if !uses_shared_k(method) {
            continue;
        }
        for &site in &cfg.sweep.sites {
            let uq = UqConfig {
                method,
                site,
                p: cfg.sweep.shared_fit_p,
                t_samples: cfg.sweep.shared_fit_t,
                seed,
                case_stream: 0,
            };
            let cal = predict_split(&cal_data, &params, &op, &uq, CAL_STREAM_BASE, &ensemble, false)?;
            let sigmas: Vec<Field> = cal.preds.iter().map(|p| p.sigma.clone()).collect();
            let (fit, _) = fit_or_degenerate(&cal.residuals, &sigmas, target)?;
            shared_k.insert((method.to_string(), site.to_string()), fit.k);
        }
    }

    let cells = sweep_cells(&cfg.sweep);
    use rayon::prelude::*;
    let rows: Vec<String> = cells
        .par_iter()
        .map(|cell| {
            let uq = UqConfig {
                method: cell.method,
                site: cell.site,
                p: cell.p,
                t_samples: cell.t_samples,
                seed,
                case_stream: 0,
            };
            let run = || -> Result<String> {
                let k = match shared_k.get(&(cell.method.to_string(), cell.site.to_string())) {
                    Some(&k) => k,
                    None => {
                        let cal =
                            predict_split(&cal_data, &params, &op, &uq, CAL_STREAM_BASE, &ensemble, false)?;
                        let sigmas: Vec<Field> =
                            cal.preds.iter().map(|p| p.sigma.clone()).collect();
                        fit_or_degenerate(&cal.residuals, &sigmas, target)?.0.k
                    }
                };
                let test = predict_split(&test_data, &params, &op, &uq, TEST_STREAM_BASE, &ensemble, false)?;
                if let Some(d) = test.preds.iter().find_map(|p| p.degenerate.as_ref()) {
                    eprintln!(
                        "warning: degenerate cell {} {} p={} T={}: {}",
                        cell.method, cell.site, cell.p, cell.t_samples, d
                    );
                }
                if cell.p > 0.9 || cell.t_samples <= 5 {
                    eprintln!(
                        "warning: degenerate regime at {} {} p={} T={}",
                        cell.method, cell.site, cell.p, cell.t_samples
                    );
                }
                let bands: Vec<Field> = test
                    .preds
                    .iter()
                    .map(|p| band_from_sigma(&p.sigma, k))
                    .collect::<Result<_>>()?;
                let report = evaluate_bands(&test.residuals, &bands, norm)?;
                Ok(metrics_csv_row(
                    &cell.method.to_string(),
                    &cell.site.to_string(),
                    cell.p,
                    cell.t_samples,
                    k,
                    target,
                    &report,
                ))
            };
            match run() {
                Ok(row) => row,
                Err(e) => {
                    eprintln!(
                        "warning: sweep cell {} {} p={} T={} failed: {}",
                        cell.method, cell.site, cell.p, cell.t_samples, e
                    );
                    format!(
                        "{},{},{},{},NA,{},NA,NA,NA,NA,NA,NA",
                        cell.method, cell.site, cell.p, cell.t_samples, target
                    )
                }
            }
        })
        .collect();

    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    for row in rows {
        csv.push_str(&row);
        csv.push('\n');
    }
    write_text(&args.out.join("sweep.csv"), &csv)?;
    println!("wrote {} sweep rows to {}", cells.len(), args.out.join("sweep.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

fn range_from_args(args: &RenderArgs) -> Result<ColorRange> {
    match (args.min, args.max) {
        (Some(min), Some(max)) => Ok(ColorRange::Explicit { min, max }),
        (None, None) => Ok(ColorRange::Auto),
        _ => Err(Error::Config("--min and --max must be given together".into())),
    }
}

pub fn cmd_render(args: RenderArgs) -> Result<()> {
    let range = range_from_args(&args)?;
    let container = DatasetContainer::read(&args.input)?;
    let kind = container.meta("kind").unwrap_or("dataset").to_string();
    let load_truth_sample = |path: &Option<PathBuf>| -> Result<Field> {
        let p = path
            .as_ref()
            .ok_or_else(|| Error::Config("this field selector needs --truth".into()))?;
        let truth = read_dataset(p)?;
        Ok(extract_sample(&truth, args.index)?.u)
    };
    let field: Field = match args.field.as_str() {
        "input" | "truth" => {
            if kind != "dataset" {
                return Err(Error::Config(format!(
                    "field '{}' needs a dataset container, found kind '{}'",
                    args.field, kind
                )));
            }
            let s = extract_sample(&container, args.index)?;
            if args.field == "input" {
                s.a
            } else {
                s.u
            }
        }
        "mean" | "sigma" | "band" | "residual" | "coverage-mask" => {
            if kind != "prediction" {
                return Err(Error::Config(format!(
                    "field '{}' needs a prediction container, found kind '{}'",
                    args.field, kind
                )));
            }
            let (mean, sigma) = prediction_from_container(&container, args.index)?;
            match args.field.as_str() {
                "mean" => mean,
                "sigma" => sigma,
                "band" => band_from_sigma(&sigma, args.k)?,
                "residual" => {
                    let u = load_truth_sample(&args.truth)?;
                    let mut r = mean;
                    for (rv, tv) in r.values.iter_mut().zip(&u.values) {
                        *rv -= tv;
                    }
                    r
                }
                "coverage-mask" => {
                    let u = load_truth_sample(&args.truth)?;
                    let band = band_from_sigma(&sigma, args.k)?;
                    let mut mask = mean;
                    for i in 0..mask.values.len() {
                        let r = (mask.values[i] - u.values[i]).abs();
                        // 1 = missed (red), 0 = covered (blue)
                        mask.values[i] = if r <= band.values[i] { 0.0 } else { 1.0 };
                    }
                    mask
                }
                _ => unreachable!(),
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown field selector '{}' (expected mean|sigma|band|residual|coverage-mask|input|truth)",
                other
            )))
        }
    };
    // coverage masks always render on the fixed binary range
    let range = if args.field == "coverage-mask" {
        ColorRange::Explicit { min: 0.0, max: 1.0 }
    } else {
        range
    };
    write_ppm(&field, 0, range, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back = parse_experiment_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = parse_experiment_config(
            "schema_version = 1\n[grid]\nnx = 17\nny = 17\n[coefficient]\ncorrelation_length = 0.2\n[train]\nepochs = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.grid.nx, 17);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.operator.d_v, 32);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(parse_experiment_config("schema_version = 2\n").is_err());
        assert!(parse_experiment_config("not toml [").is_err());
        assert!(parse_experiment_config("schema_version = 1\n[grid]\nnx = 2\nny = 2\n").is_err());
        // unknown keys rejected so typos surface
        assert!(parse_experiment_config("schema_version = 1\n[grid]\nnx = 17\nny = 17\nblah = 3\n")
            .is_err());
        // k_max too large for the grid
        assert!(parse_experiment_config(
            "schema_version = 1\n[grid]\nnx = 9\nny = 9\n[operator]\nk_max = 8\n"
        )
        .is_err());
    }

    #[test]
    fn sweep_cell_order_is_method_site_p_t() {
        let sweep = SweepSection {
            methods: vec![UqMethod::LiftDropout, UqMethod::NaiveDropout],
            sites: vec![PerturbSite::Lift],
            p_values: vec![0.1, 0.3],
            t_values: vec![5, 20],
            shared_fit_p: 0.3,
            shared_fit_t: 20,
        };
        let cells = sweep_cells(&sweep);
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0].method, UqMethod::LiftDropout);
        assert_eq!((cells[0].p, cells[0].t_samples), (0.1, 5));
        assert_eq!((cells[1].p, cells[1].t_samples), (0.1, 20));
        assert_eq!((cells[2].p, cells[2].t_samples), (0.3, 5));
        assert_eq!(cells[4].method, UqMethod::NaiveDropout);
    }
}
