//! Command-line front end and the dataset-size scaling experiment.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad flags or config.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::depthsim::{self, PipelineConfig};
use crate::exec::Exec;
use crate::metrics::{self, Aggregate, CaseReport, WilcoxonResult};
use crate::net::{self, Arch};
use crate::phantom::{self, Manifest, MANIFEST_FILE};
use crate::train::{self, Sample, TrainConfig};
use crate::voldata::{self, Dims3, Spacing3, N_ORGANS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSection {
    pub n: usize,
    pub master_seed: u64,
    pub dims: [usize; 3],
    pub spacing_mm: f32,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let d = phantom::DEFAULT_DIMS;
        Self {
            n: 250,
            master_seed: 0,
            dims: [d.x, d.y, d.z],
            spacing_mm: phantom::DEFAULT_SPACING_MM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Leading share of the manifest used for training.
    pub train_fraction: f64,
    /// Trailing share of the manifest held out for evaluation.
    pub eval_fraction: f64,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            eval_fraction: 0.2,
            dataset_dir: PathBuf::from("data/depth"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub phantom: PhantomSection,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let (t, e) = (self.eval.train_fraction, self.eval.eval_fraction);
        if !(t > 0.0 && t < 1.0 && e > 0.0 && e < 1.0) || t + e > 1.0 + 1e-12 {
            bail!("split fractions must lie in (0, 1) and sum to at most 1");
        }
        self.pipeline.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the JSON form, truncated to 16 characters.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }
}

/// Training and evaluation index ranges for a manifest of `n` cases.
pub fn split_ranges(n: usize, eval: &EvalSection) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let n_train = (eval.train_fraction * n as f64).floor() as usize;
    let n_eval = (eval.eval_fraction * n as f64).floor() as usize;
    (0..n_train, n - n_eval..n)
}

// ---------------------------------------------------------------------------
// Experiment helpers

/// Builds phantoms `indices` of a cohort and simulates them in memory.
pub fn synthetic_samples(
    exec: Exec,
    master_seed: u64,
    indices: std::ops::Range<usize>,
    dims: Dims3,
    spacing: Spacing3,
    pipeline: &PipelineConfig,
) -> anyhow::Result<Vec<Sample>> {
    let start = indices.start;
    exec.map_range(indices.len(), |k| -> anyhow::Result<Sample> {
        let case = phantom::cohort_case(master_seed, start + k, dims, spacing)?;
        let (depth, masks) = depthsim::simulate_case(&case, pipeline)?;
        Ok(Sample {
            case_id: case.case_id,
            depth,
            masks,
        })
    })
    .into_iter()
    .collect()
}

pub fn evaluate_params(exec: Exec, params: &net::NetworkParams<f32>, samples: &[Sample]) -> anyhow::Result<metrics::Evaluation> {
    let depths: Vec<_> = samples.iter().map(|s| s.depth.clone()).collect();
    let preds = net::predict_all(exec, params, &depths)?;
    let gts: Vec<_> = samples.iter().map(|s| s.masks.clone()).collect();
    let ids: Vec<_> = samples.iter().map(|s| s.case_id.clone()).collect();
    Ok(metrics::evaluate_cases_with(exec, &ids, &preds, &gts)?)
}

#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub n_train: usize,
    pub aggregate: Aggregate,
    pub reports: Vec<CaseReport>,
    pub checkpoint: train::Checkpoint,
    /// Wall time of training plus evaluation.
    pub seconds: f64,
}

impl ScalingRow {
    pub fn per_case_dice(&self) -> Vec<f64> {
        self.reports.iter().map(CaseReport::mean_dice).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairTest {
    pub n_small: usize,
    pub n_large: usize,
    pub test: WilcoxonResult,
}

#[derive(Debug, Clone)]
pub struct ScalingResult {
    pub rows: Vec<ScalingRow>,
    pub tests: Vec<PairTest>,
}

/// Trains on nested prefixes of `train_pool` and evaluates each model on the
/// same `eval_set`. Consecutive sizes are compared with a Wilcoxon test on
/// per-case mean Dice.
pub fn run_scaling(
    exec: Exec,
    train_pool: &[Sample],
    eval_set: &[Sample],
    sizes: &[usize],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, &train::LogRow),
) -> anyhow::Result<ScalingResult> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        bail!("sizes must be non-empty and strictly increasing");
    }
    if *sizes.last().unwrap() > train_pool.len() {
        bail!("largest size {} exceeds the {} training cases", sizes.last().unwrap(), train_pool.len());
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let start = std::time::Instant::now();
        let outcome = train::train_with_progress(&train_pool[..n], cfg, exec, |r| progress(n, r))?;
        let ev = evaluate_params(exec, &outcome.checkpoint.params, eval_set)?;
        rows.push(ScalingRow {
            n_train: n,
            aggregate: ev.aggregate,
            reports: ev.reports,
            checkpoint: outcome.checkpoint,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let tests = rows
        .windows(2)
        .map(|w| -> anyhow::Result<PairTest> {
            Ok(PairTest {
                n_small: w[0].n_train,
                n_large: w[1].n_train,
                test: metrics::wilcoxon_signed_rank(&w[1].per_case_dice(), &w[0].per_case_dice())?,
            })
        })
        .collect::<anyhow::Result<_>>()?;
    Ok(ScalingResult { rows, tests })
}

#[derive(Debug, Serialize)]
struct ScalingCsvRow {
    n_train: usize,
    dice_mean: f64,
    dice_std: f64,
    assd_mean: Option<f64>,
    assd_std: Option<f64>,
    doe_p95: Option<f64>,
}

pub fn write_scaling_csv(result: &ScalingResult, path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &result.rows {
        let p = &r.aggregate.pooled;
        w.serialize(ScalingCsvRow {
            n_train: r.n_train,
            dice_mean: p.dice_mean,
            dice_std: p.dice_std,
            assd_mean: p.assd_mean_mm,
            assd_std: p.assd_std_mm,
            doe_p95: p.doe_p95_mm,
        })?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(name = "organloc", version, about = "Organ localization from simulated depth images")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic phantom cohorts.
    Phantom {
        #[command(subcommand)]
        cmd: PhantomCmd,
    },
    /// Depth-image simulation.
    Depth {
        #[command(subcommand)]
        cmd: DepthCmd,
    },
    /// Train a network on a simulated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out cases.
    Evaluate(EvalArgs),
    /// Train at several dataset sizes and compare.
    Scaling(ScalingArgs),
}

#[derive(Debug, Subcommand)]
enum PhantomCmd {
    /// Generate a cohort of phantoms and a manifest.
    Gen(GenArgs),
}

#[derive(Debug, Subcommand)]
enum DepthCmd {
    /// Simulate depth images and projected masks for a manifest.
    Sim(SimArgs),
}

fn parse_dims(s: &str) -> Result<Dims3, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected X,Y,Z".into());
    }
    let v: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if v.contains(&0) {
        return Err("dims must be positive".into());
    }
    Ok(Dims3::new(v[0], v[1], v[2]))
}

fn parse_spacing(s: &str) -> Result<f32, String> {
    let v: f32 = s.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
    if !(v > 0.0 && v.is_finite()) {
        return Err("spacing must be positive".into());
    }
    Ok(v)
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_dims)]
    dims: Option<Dims3>,
    #[arg(long, value_parser = parse_spacing)]
    spacing: Option<f32>,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    binarize_threshold: Option<f32>,
    #[arg(long)]
    far_suppress_threshold: Option<f32>,
    #[arg(long)]
    binary_opening_radius: Option<usize>,
    #[arg(long)]
    gray_opening_radius: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train on the first N cases of the training split.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Second ground-truth directory with `.dmsk` files for the same cases.
    #[arg(long)]
    gt_alt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also score the training split and warn if it is not easier.
    #[arg(long)]
    sanity: bool,
}

#[derive(Debug, Args)]
struct ScalingArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "50,200,800")]
    sizes: Vec<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Input errors map to exit code 2, everything else to 1.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e| UsageError(e).into()),
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Phantom { cmd: PhantomCmd::Gen(a) } => cmd_phantom_gen(a),
        Command::Depth { cmd: DepthCmd::Sim(a) } => cmd_depth_sim(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Scaling(a) => cmd_scaling(a),
    }
}

fn cmd_phantom_gen(a: GenArgs) -> anyhow::Result<()> {
    if a.n == 0 {
        return Err(UsageError(anyhow::anyhow!("--n must be at least 1")).into());
    }
    let dims = a.dims.unwrap_or(phantom::DEFAULT_DIMS);
    let spacing = Spacing3::isotropic(a.spacing.unwrap_or(phantom::DEFAULT_SPACING_MM));
    let manifest = phantom::generate_cohort(a.n, a.seed, dims, spacing, &a.out)?;
    println!("wrote {} cases to {}", manifest.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub binarize_threshold: f32,
    pub far_suppress_threshold: f32,
    pub binary_opening_radius: usize,
    pub gray_opening_radius: usize,
    pub config_digest: String,
    pub version: String,
}

pub const PIPELINE_FILE: &str = "pipeline.json";

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_depth_sim(a: SimArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let p = &mut cfg.pipeline;
    if let Some(v) = a.binarize_threshold {
        p.binarize_threshold = v;
    }
    if let Some(v) = a.far_suppress_threshold {
        p.far_suppress_threshold = v;
    }
    if let Some(v) = a.binary_opening_radius {
        p.binary_opening_radius = v;
    }
    if let Some(v) = a.gray_opening_radius {
        p.gray_opening_radius = v;
    }
    cfg.pipeline.validate().map_err(|e| UsageError(e.into()))?;
    let manifest = Manifest::read(&a.manifest)
        .with_context(|| format!("reading manifest {}", a.manifest.display()))?;
    let phantom_dir = a.manifest.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(&a.out)?;
    let failures = depthsim::simulate_dataset_with(Exec::default(), phantom_dir, &manifest, &a.out, &cfg.pipeline)?;
    manifest.write(a.out.join(MANIFEST_FILE))?;
    let p = cfg.pipeline;
    write_json(
        &PipelineRecord {
            binarize_threshold: p.binarize_threshold,
            far_suppress_threshold: p.far_suppress_threshold,
            binary_opening_radius: p.binary_opening_radius,
            gray_opening_radius: p.gray_opening_radius,
            config_digest: cfg.digest(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        &a.out.join(PIPELINE_FILE),
    )?;
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("{}: {}", f.case_id, f.message);
        }
        bail!("{} of {} cases failed", failures.len(), manifest.len());
    }
    println!("simulated {} cases into {}", manifest.len(), a.out.display());
    Ok(())
}

fn dataset_splits(cfg: &RunConfig, dir: &Path) -> anyhow::Result<(Vec<Sample>, Vec<Sample>)> {
    let samples = train::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let (tr, ev) = split_ranges(samples.len(), &cfg.eval);
    Ok((samples[tr].to_vec(), samples[ev].to_vec()))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.dckp";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    config: &'a RunConfig,
    config_digest: String,
    n_train: usize,
    case_ids: Vec<&'a str>,
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(Some(&a.config))?;
    if let Some(d) = a.data {
        cfg.eval.dataset_dir = d;
    }
    if let Some(o) = a.out {
        cfg.eval.out_dir = o;
    }
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.rng_seed = s;
    }
    cfg.validate().map_err(UsageError)?;
    let (mut pool, _) = dataset_splits(&cfg, &cfg.eval.dataset_dir)?;
    if let Some(n) = a.limit {
        if n > pool.len() {
            bail!("--limit {n} exceeds the {} training cases", pool.len());
        }
        pool.truncate(n);
    }
    let out = &cfg.eval.out_dir;
    fs::create_dir_all(out)?;
    let total = cfg.train.total_steps;
    let outcome = train::train_with_progress(&pool, &cfg.train, Exec::default(), |r| {
        if r.step % 100 == 0 || r.step + 1 == total {
            eprintln!("step {:>6} lr {:.6} loss {:.5}", r.step, r.lr, r.loss_total);
        }
    })?;
    train::save_checkpoint(&outcome.checkpoint, out.join(CHECKPOINT_FILE))?;
    train::write_log(&outcome.log, out.join(TRAIN_LOG_FILE))?;
    write_json(
        &RunRecord {
            config: &cfg,
            config_digest: cfg.digest(),
            n_train: pool.len(),
            case_ids: pool.iter().map(|s| s.case_id.as_str()).collect(),
        },
        &out.join(RUN_FILE),
    )?;
    println!("trained on {} cases; checkpoint at {}", pool.len(), out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_ALT_FILE: &str = "report_alt.csv";
pub const AGGREGATE_FILE: &str = "aggregate.json";

#[derive(Debug, Serialize)]
struct AggregateRecord {
    config_digest: String,
    checkpoint_digest: u64,
    n_cases: usize,
    primary: Aggregate,
    alt: Option<Aggregate>,
}

fn cmd_evaluate(a: EvalArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.eval.dataset_dir = d;
    }
    if let Some(o) = a.out {
        cfg.eval.out_dir = o;
    }
    let (train_split, eval_split) = dataset_splits(&cfg, &cfg.eval.dataset_dir)?;
    if eval_split.is_empty() {
        bail!("evaluation split is empty");
    }
    let first = &eval_split[0].depth;
    let expected = a
        .config
        .as_ref()
        .map(|_| Arch::new(cfg.train.channels.clone(), first.dims().h, first.dims().w, N_ORGANS));
    let ck = train::load_checkpoint(&a.checkpoint, expected.as_ref())
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let exec = Exec::default();
    let depths: Vec<_> = eval_split.iter().map(|s| s.depth.clone()).collect();
    let preds = net::predict_all(exec, &ck.params, &depths)?;
    let ids: Vec<String> = eval_split.iter().map(|s| s.case_id.clone()).collect();
    let gts: Vec<_> = eval_split.iter().map(|s| s.masks.clone()).collect();
    let primary = metrics::evaluate_cases_with(exec, &ids, &preds, &gts)?;
    let out = &cfg.eval.out_dir;
    fs::create_dir_all(out)?;
    metrics::write_case_reports(&primary.reports, &out.join(REPORT_FILE))?;
    let alt = match &a.gt_alt {
        None => None,
        Some(dir) => {
            let alt_gts = ids
                .iter()
                .map(|id| voldata::read_maskstack(depthsim::masks_path(dir, id)).with_context(|| format!("{id}: alternate ground truth")))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let ev = metrics::evaluate_cases_with(exec, &ids, &preds, &alt_gts)?;
            metrics::write_case_reports(&ev.reports, &out.join(REPORT_ALT_FILE))?;
            Some(ev.aggregate)
        }
    };
    if a.sanity && !train_split.is_empty() {
        let own = evaluate_params(exec, &ck.params, &train_split)?;
        if own.aggregate.pooled.dice_mean <= primary.aggregate.pooled.dice_mean {
            eprintln!(
                "warning: training-split Dice {:.4} is not above held-out Dice {:.4}",
                own.aggregate.pooled.dice_mean, primary.aggregate.pooled.dice_mean
            );
        }
    }
    let pooled = primary.aggregate.pooled.dice_mean;
    write_json(
        &AggregateRecord {
            config_digest: cfg.digest(),
            checkpoint_digest: ck.params.checksum(),
            n_cases: ids.len(),
            primary: primary.aggregate,
            alt,
        },
        &out.join(AGGREGATE_FILE),
    )?;
    println!("evaluated {} cases; mean Dice {:.4}", ids.len(), pooled);
    Ok(())
}

pub const SCALING_FILE: &str = "scaling.csv";
pub const WILCOXON_FILE: &str = "wilcoxon.json";

#[derive(Debug, Serialize)]
struct ScalingRecord<'a> {
    config_digest: String,
    sizes: &'a [usize],
    n_eval: usize,
    comparisons: &'a [PairTest],
    aggregates: Vec<&'a Aggregate>,
}

fn cmd_scaling(a: ScalingArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(Some(&a.config))?;
    if let Some(d) = a.data {
        cfg.eval.dataset_dir = d;
    }
    if let Some(o) = a.out {
        cfg.eval.out_dir = o;
    }
    let sizes = a.sizes;
    let (pool, eval_set) = dataset_splits(&cfg, &cfg.eval.dataset_dir)?;
    if eval_set.is_empty() {
        bail!("evaluation split is empty");
    }
    let total = cfg.train.total_steps;
    let result = run_scaling(Exec::default(), &pool, &eval_set, &sizes, &cfg.train, |n, r| {
        if r.step % 100 == 0 || r.step + 1 == total {
            eprintln!("n={n} step {:>6} loss {:.5}", r.step, r.loss_total);
        }
    })?;
    let out = &cfg.eval.out_dir;
    fs::create_dir_all(out)?;
    write_scaling_csv(&result, &out.join(SCALING_FILE))?;
    write_json(
        &ScalingRecord {
            config_digest: cfg.digest(),
            sizes: &sizes,
            n_eval: eval_set.len(),
            comparisons: &result.tests,
            aggregates: result.rows.iter().map(|r| &r.aggregate).collect(),
        },
        &out.join(WILCOXON_FILE),
    )?;
    for t in &result.tests {
        println!("n={} vs n={}: p = {:.4}", t.n_small, t.n_large, t.test.p_value);
    }
    Ok(())
}
