//! Command-line front end: `generate`, `train`, `eval`, `ablate` and `plot`.
//!
//! Settings resolve as defaults, then the `--config` preset or TOML file, then flags. Each
//! command writes the fully resolved settings as `resolved-config.toml` next to its outputs;
//! passing that file back through `--config` reproduces the run. Environment variables are
//! never consulted.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.

mod plot;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datasets::{self, DatasetError, DatasetHandle, Subject};
use crate::evaluator::{self, AblationConfig, EvalError};
use crate::model::{load_checkpoint, ModelConfig, ModelError};
use crate::phantoms::{self, CorpusOptions, PhantomError};
use crate::trainer::{TrainError, TrainOutputs, TrainSchedule, Trainer};

pub const RESOLVED_CONFIG: &str = "resolved-config.toml";

#[derive(Debug, Parser)]
#[command(name = "asl2pet", version, about = "Semi-supervised ASL/T1 to PET translation on synthetic phantoms")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a phantom corpus and its manifest.
    Generate(GenerateArgs),
    /// Train one network configuration.
    Train(TrainArgs),
    /// Score a checkpoint on the paired subjects of a manifest.
    Eval(EvalArgs),
    /// Cross-validate the ablation matrix and write the report.
    Ablate(AblateArgs),
    /// Render ASL / T1 / PET / prediction / error panels as PNG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Preset (`multi-task`, `single-task`, or a tag such as `M+T1+RA+DA`) or a TOML file.
    #[arg(long)]
    pub config: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long, overrides_with = "no_t1")]
    pub t1: bool,
    #[arg(long, overrides_with = "t1")]
    pub no_t1: bool,
    #[arg(long, overrides_with = "no_ra")]
    pub ra: bool,
    #[arg(long, overrides_with = "ra")]
    pub no_ra: bool,
    #[arg(long, overrides_with = "no_da")]
    pub da: bool,
    #[arg(long, overrides_with = "da")]
    pub no_da: bool,
    #[arg(long, overrides_with = "single_task")]
    pub multitask: bool,
    #[arg(long, overrides_with = "multitask")]
    pub single_task: bool,
    /// Width of the first resolution level.
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Comma-separated layers per dense block, e.g. `1,3,5,3,1`.
    #[arg(long, value_delimiter = ',')]
    pub dense_layout: Option<Vec<usize>>,
}

fn switch(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

impl ModelFlags {
    fn apply(&self, m: &mut ModelConfig) {
        if let Some(v) = switch(self.t1, self.no_t1) {
            m.use_t1 = v;
        }
        if let Some(v) = switch(self.ra, self.no_ra) {
            m.use_residual_attention = v;
        }
        if let Some(v) = switch(self.da, self.no_da) {
            m.use_disentanglement_attention = v;
        }
        if let Some(v) = switch(self.multitask, self.single_task) {
            m.multitask = v;
        }
        if let Some(b) = self.base_channels {
            m.base_channels = b;
        }
        if let Some(l) = &self.dense_layout {
            m.dense_layout = l.clone();
        }
    }
}

#[derive(Debug, Args)]
pub struct ScheduleFlags {
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dataset_block: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ScheduleFlags {
    fn apply(&self, s: &mut TrainSchedule) {
        if let Some(v) = self.iterations {
            s.total_iterations = v;
        }
        if let Some(v) = self.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = self.dataset_block {
            s.dataset_block = v;
        }
        if let Some(v) = self.lr {
            s.optimizer.lr = v;
        }
        if let Some(v) = self.checkpoint_every {
            s.checkpoint_every = v;
        }
        if let Some(v) = self.workers {
            s.workers = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub paired: Option<usize>,
    #[arg(long)]
    pub unpaired: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub tissue_classes: Option<usize>,
    /// Output directory (default `corpus`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub schedule: ScheduleFlags,
    /// Corpus manifest; its paired subjects train the PET branch.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Extra manifest whose subjects are used as unpaired data.
    #[arg(long)]
    pub unpaired_manifest: Option<PathBuf>,
    /// Resume from a checkpoint of the same run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Subjects to score (default: every paired subject).
    #[arg(long, value_delimiter = ',')]
    pub subjects: Option<Vec<u64>>,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub schedule: ScheduleFlags,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated configuration tags (default: all seven).
    #[arg(long, value_delimiter = ',')]
    pub configs: Option<Vec<String>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub subjects: Option<Vec<u64>>,
    /// Integer upscaling of every panel.
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
    #[arg(long, default_value = "plots")]
    pub out: PathBuf,
}

/// Corpus generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSettings {
    pub paired: usize,
    pub unpaired: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub tissue_classes: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        let o = CorpusOptions::default();
        Self {
            paired: 8,
            unpaired: 16,
            seed: 0,
            height: o.height,
            width: o.width,
            tissue_classes: o.tissue_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    pub k: usize,
    pub configs: Vec<String>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            k: 3,
            configs: AblationConfig::ALL.iter().map(ToString::to_string).collect(),
        }
    }
}

/// Every setting of a run; the content of `resolved-config.toml`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<String>,
    pub corpus: Option<CorpusSettings>,
    pub model: Option<ModelConfig>,
    pub schedule: Option<TrainSchedule>,
    pub ablation: Option<AblationSettings>,
    pub paths: BTreeMap<String, PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Io(d) => d.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::Checkpoint { .. } | ModelError::ShapeMismatch(_) | ModelError::InvalidMask => {
                CliError::Data(e.to_string())
            }
            ModelError::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::InvalidSchedule(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Data(d) => d.into(),
            EvalError::TooFewSubjects { .. } => CliError::Data(e.to_string()),
            EvalError::InvalidAblation(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Resolve `--config`: a preset name, an ablation tag, or a TOML file.
pub fn load_config(spec: Option<&str>) -> Result<RunConfig, CliError> {
    let Some(spec) = spec else {
        return Ok(RunConfig::default());
    };
    let preset = |a: AblationConfig| RunConfig {
        model: Some(a.model_config(&ModelConfig::default())),
        ..RunConfig::default()
    };
    match spec {
        "multi-task" | "multitask" | "default" => return Ok(preset(AblationConfig::REFERENCE)),
        "single-task" => return Ok(preset(AblationConfig::new(false, true, false, true))),
        _ => {}
    }
    if let Ok(tag) = spec.parse::<AblationConfig>() {
        return Ok(preset(tag));
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(CliError::Usage(format!("--config {spec:?} is neither a preset nor an existing file")));
    }
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_resolved(dir: &Path, config: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(RESOLVED_CONFIG);
    let text = toml::to_string(config).map_err(|e| CliError::Runtime(format!("serializing config: {e}")))?;
    fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    Ok(path)
}

fn pick_path(flag: &Option<PathBuf>, file: &RunConfig, key: &str, default: Option<&str>) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| file.paths.get(key).cloned())
        .or_else(|| default.map(PathBuf::from))
        .ok_or_else(|| CliError::Usage(format!("--{key} is required")))
}

fn resolve_model(file: &RunConfig, flags: &ModelFlags) -> Result<ModelConfig, CliError> {
    let mut m = file.model.clone().unwrap_or_default();
    flags.apply(&mut m);
    m.validate()?;
    Ok(m)
}

fn resolve_schedule(file: &RunConfig, flags: &ScheduleFlags) -> Result<TrainSchedule, CliError> {
    let mut s = file.schedule.clone().unwrap_or_default();
    flags.apply(&mut s);
    s.validate()?;
    Ok(s)
}

fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf, CliError> {
    let file = load_config(args.config.config.as_deref())?;
    let mut c = file.corpus.clone().unwrap_or_default();
    c.paired = args.paired.unwrap_or(c.paired);
    c.unpaired = args.unpaired.unwrap_or(c.unpaired);
    c.seed = args.seed.unwrap_or(c.seed);
    c.height = args.height.unwrap_or(c.height);
    c.width = args.width.unwrap_or(c.width);
    c.tissue_classes = args.tissue_classes.unwrap_or(c.tissue_classes);
    let out = pick_path(&args.out, &file, "out", Some("corpus"))?;
    let options = CorpusOptions {
        height: c.height,
        width: c.width,
        tissue_classes: c.tissue_classes,
    };
    let (manifest, path) = phantoms::generate_corpus(c.paired, c.unpaired, c.seed, &out, &options)?;
    let resolved = RunConfig {
        command: Some("generate".into()),
        corpus: Some(c),
        paths: BTreeMap::from([("out".into(), out.clone())]),
        ..RunConfig::default()
    };
    write_resolved(&out, &resolved)?;
    let paired = manifest.entries.iter().filter(|e| e.paired).count();
    println!("{} ({} subjects, {} paired)", path.display(), manifest.entries.len(), paired);
    Ok(path)
}

/// Unpaired training pool: the unpaired subjects of `main` plus every subject of `extra`,
/// the latter with any PET dropped.
fn unpaired_pool(main: &DatasetHandle, extra: Option<&DatasetHandle>) -> Result<DatasetHandle, CliError> {
    let mut subjects: Vec<Subject> = main.unpaired().cloned().collect();
    if let Some(x) = extra {
        subjects.extend(x.subjects().iter().cloned().map(|s| Subject { pet: None, ..s }));
    }
    Ok(DatasetHandle::from_subjects(subjects, main.digest())?)
}

fn cmd_train(args: &TrainArgs) -> Result<PathBuf, CliError> {
    let file = load_config(args.config.config.as_deref())?;
    let model = resolve_model(&file, &args.model)?;
    let schedule = resolve_schedule(&file, &args.schedule)?;
    let manifest = pick_path(&args.manifest, &file, "manifest", None)?;
    let out = pick_path(&args.out, &file, "out", Some("run"))?;
    let corpus = datasets::load_manifest(&manifest)?;
    let extra = match pick_path(&args.unpaired_manifest, &file, "unpaired_manifest", None) {
        Ok(p) => Some(datasets::load_manifest(&p)?),
        Err(_) => None,
    };
    let paired_ids: Vec<u64> = corpus.paired().map(|s| s.id).collect();
    let paired = corpus.subset(&paired_ids)?;
    let unpaired = unpaired_pool(&corpus, extra.as_ref())?;
    if !model.multitask && extra.is_some() {
        log::warn!("single-task configuration: --unpaired-manifest is ignored");
    }

    let mut paths = BTreeMap::from([("manifest".to_string(), manifest.clone()), ("out".to_string(), out.clone())]);
    if let Some(p) = &args.unpaired_manifest {
        paths.insert("unpaired_manifest".into(), p.clone());
    }
    let resolved = RunConfig {
        command: Some("train".into()),
        model: Some(model.clone()),
        schedule: Some(schedule.clone()),
        paths,
        ..RunConfig::default()
    };
    write_resolved(&out, &resolved)?;

    let mut trainer = match &args.resume {
        Some(ckpt) => Trainer::resume(ckpt, &schedule, &paired, Some(&unpaired))?,
        None => {
            let history = out.join("history.jsonl");
            if history.exists() {
                fs::remove_file(&history).map_err(|e| io_error(&history, e))?;
            }
            Trainer::new(&model, &schedule, &paired, Some(&unpaired))?
        }
    };
    if trainer.network().config() != &model {
        return Err(CliError::Data("checkpoint configuration differs from the requested model".into()));
    }
    trainer.run(&TrainOutputs {
        checkpoint_dir: Some(out.clone()),
        history: Some(out.join("history.jsonl")),
    })?;
    let final_ckpt = out.join("final.ckpt");
    let last = trainer.history().last().map_or(f64::NAN, |r| r.loss);
    println!("{} ({} iterations, final loss {last:.5})", final_ckpt.display(), schedule.total_iterations);
    Ok(final_ckpt)
}

fn cmd_eval(args: &EvalArgs) -> Result<PathBuf, CliError> {
    let corpus = datasets::load_manifest(&args.manifest)?;
    let (mut net, _) = load_checkpoint::<f32>(&args.checkpoint, None)?;
    let ids: Vec<u64> = match &args.subjects {
        Some(ids) => ids.clone(),
        None => corpus.paired().map(|s| s.id).collect(),
    };
    if ids.is_empty() {
        return Err(CliError::Data("no paired subjects to score".into()));
    }
    let records = evaluator::evaluate(&mut net, &corpus, &ids)?;
    let resolved = RunConfig {
        command: Some("eval".into()),
        model: Some(net.config().clone()),
        paths: BTreeMap::from([
            ("checkpoint".to_string(), args.checkpoint.clone()),
            ("manifest".to_string(), args.manifest.clone()),
            ("out".to_string(), args.out.clone()),
        ]),
        ..RunConfig::default()
    };
    write_resolved(&args.out, &resolved)?;
    let name = format!(
        "metrics-{}-{}.jsonl",
        &net.config().digest()[..12],
        &corpus.digest()[..corpus.digest().len().min(12)]
    );
    let path = args.out.join(name);
    let mut body = String::new();
    for r in &records {
        body.push_str(&serde_json::to_string(r).expect("record serializes"));
        body.push('\n');
    }
    fs::write(&path, body).map_err(|e| io_error(&path, e))?;
    let agg = evaluator::Aggregates::of(&records);
    println!(
        "{} SSIM {:.4}±{:.4} MSE {:.5} PSNR {:.2}",
        path.display(),
        agg.all.ssim.mean,
        agg.all.ssim.sd,
        agg.all.mse.mean,
        agg.all.psnr.mean
    );
    Ok(path)
}

fn cmd_ablate(args: &AblateArgs) -> Result<PathBuf, CliError> {
    let file = load_config(args.config.config.as_deref())?;
    let base = resolve_model(&file, &args.model)?;
    let schedule = resolve_schedule(&file, &args.schedule)?;
    let mut ablation = file.ablation.clone().unwrap_or_default();
    if let Some(k) = args.k {
        ablation.k = k;
    }
    if let Some(c) = &args.configs {
        ablation.configs = c.clone();
    }
    let configs = ablation
        .configs
        .iter()
        .map(|t| t.parse::<AblationConfig>())
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = pick_path(&args.manifest, &file, "manifest", None)?;
    let out = pick_path(&args.out, &file, "out", Some("ablation"))?;
    let corpus = datasets::load_manifest(&manifest)?;
    let resolved = RunConfig {
        command: Some("ablate".into()),
        model: Some(base.clone()),
        schedule: Some(schedule.clone()),
        ablation: Some(ablation.clone()),
        paths: BTreeMap::from([("manifest".to_string(), manifest), ("out".to_string(), out.clone())]),
        ..RunConfig::default()
    };
    write_resolved(&out, &resolved)?;
    let results = evaluator::ablate(&corpus, ablation.k, &configs, &base, &schedule)?;
    let report = evaluator::build_report(results, corpus.digest(), ablation.k, &base, &schedule)?;
    let files = evaluator::write_report(&out, &report)?;
    print!("{}", evaluator::report::render_table(&report));
    println!("{}", files.jsonl.display());
    Ok(files.jsonl)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

/// Parse `args` and run the command; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(drop),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Ablate(a) => cmd_ablate(a).map(drop),
        Command::Plot(a) => plot::cmd_plot(a).map(drop),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        let m = load_config(Some("single-task")).unwrap().model.unwrap();
        assert!(!m.multitask && !m.use_residual_attention);
        let m = load_config(Some("M-T1-RA-DA")).unwrap().model.unwrap();
        assert!(m.multitask && !m.use_t1);
        assert!(matches!(load_config(Some("no-such-preset")), Err(CliError::Usage(_))));
    }

    #[test]
    fn flags_override_file() {
        let file = load_config(Some("single-task")).unwrap();
        let cli = Cli::try_parse_from(["asl2pet", "train", "--multitask", "--no-t1", "--ra", "--no-ra"]).unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        let m = resolve_model(&file, &t.model).unwrap();
        assert!(m.multitask && !m.use_t1 && !m.use_residual_attention);
    }

    #[test]
    fn run_config_round_trips_through_toml() {
        let c = RunConfig {
            command: Some("ablate".into()),
            model: Some(ModelConfig::default()),
            schedule: Some(TrainSchedule::default()),
            ablation: Some(AblationSettings::default()),
            corpus: Some(CorpusSettings::default()),
            paths: BTreeMap::from([("manifest".to_string(), PathBuf::from("c/manifest.jsonl"))]),
        };
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
