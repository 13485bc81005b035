//! Command-line front end. Every command resolves a [`RunConfig`] from an
//! optional TOML file plus `--set key=value` overrides, validates it and
//! echoes it into the run directory before doing any work.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    assign_ids, blocking_stats, generate_synthetic, parse_pairs, read_catalog, write_catalog, write_pair_file,
    BlockingStats, DataError, Delimiter, OfferCatalog, SynthConfig,
};
use crate::encoder::{Backbone, Checkpoint, CheckpointError, ContrastiveModel, EncoderConfig, EncoderError, ProjectionConfig};
use crate::experiment::{
    run_ablation, three_way_split, AblationRow, AblationSpec, ExperimentError, PipelineConfig, Splits, ABLATION_FILE,
    PREDICTIONS_FILE, TEST_METRICS_FILE,
};
use crate::matching::{evaluate, write_predictions, Classifier, MatchError};
use crate::sampler::SamplerError;
use crate::train::{
    finetune, pretrain, run_id, FinetuneConfig, Phase, PretrainConfig, RunMetadata, TrainError, CLASSIFIER_CHECKPOINT,
    METRICS_FILE, PRETRAIN_CHECKPOINT,
};

pub const CONFIG_ECHO: &str = "config.toml";
pub const SPLIT_MANIFEST: &str = "split.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidFraction(_) | DataError::InvalidSynthConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MatchError> for CliError {
    fn from(e: MatchError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } | TrainError::NonFiniteGradient(_) => CliError::Divergence(e.to_string()),
            TrainError::Config(_) | TrainError::Sampler(SamplerError::InvalidConfig(_)) => {
                CliError::Config(e.to_string())
            }
            TrainError::Encoder(e) => e.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Data(e) => e.into(),
            ExperimentError::Encoder(e) => e.into(),
            ExperimentError::Train(e) => e.into(),
            ExperimentError::Match(e) => e.into(),
            ExperimentError::Spec(m) => CliError::Config(m),
            ExperimentError::Io { .. } => CliError::Data(e.to_string()),
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Prepared directory with `train/`, `val/` and `test/` catalogs. When
    /// absent, a synthetic catalog is generated from `synth` and split.
    pub catalog_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub delimiter: Delimiter,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            catalog_dir: None,
            synth: SynthConfig::default(),
            test_fraction: 0.2,
            val_fraction: 0.25,
            split_seed: 0,
            delimiter: Delimiter::Auto,
        }
    }
}

/// Every tunable of a run, one section per module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Routed to model init and both training phases.
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub projection: ProjectionConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub ablation: AblationSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            seed: 1,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            projection: ProjectionConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            ablation: AblationSpec::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// File (if any), then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        // Start from the serialized defaults so a partially given section
        // keeps the section's own defaults rather than those of its type.
        let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let file = toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            set_dotted(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projection.validate()?;
        self.pretrain.train.validate()?;
        self.pretrain
            .sampler
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.finetune.train.validate()?;
        if !(self.pretrain.loss.temperature > 0.0) {
            return Err(CliError::Config("pretrain.loss.temperature must be positive".into()));
        }
        for f in [self.data.test_fraction, self.data.val_fraction] {
            if !(f > 0.0 && f < 1.0) {
                return Err(CliError::Config(format!("split fraction {f} not in (0, 1)")));
            }
        }
        if let Some(dir) = &self.data.catalog_dir {
            for side in ["train", "val", "test"] {
                if !dir.join(side).is_dir() {
                    return Err(CliError::Config(format!(
                        "data.catalog_dir {} has no `{side}` directory",
                        dir.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            encoder: self.encoder,
            projection: self.projection,
            pretrain: self.pretrain,
            finetune: self.finetune,
        }
        .with_seed(self.seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn splits(&self) -> Result<Splits> {
        match &self.data.catalog_dir {
            Some(dir) => Ok(Splits {
                train: read_catalog(&dir.join("train"))?,
                val: read_catalog(&dir.join("val"))?,
                test: read_catalog(&dir.join("test"))?,
            }),
            None => {
                let catalog = generate_synthetic(&self.data.synth)?;
                Ok(three_way_split(
                    &catalog,
                    self.data.test_fraction,
                    self.data.val_fraction,
                    self.data.split_seed,
                )?)
            }
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pretrain.sampler.q=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Parser, Debug)]
#[command(name = "blockscl", version, about = "Contrastive pre-training with blocking-derived hard negatives for product matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled pair dataset.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive product and blocking ids from a pair file and split it.
    Prep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Pair file with title_left, title_right and label columns.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print blocking statistics of a pair file or a catalog directory.
    Stats {
        #[arg(long, conflicts_with = "catalog", required_unless_present = "catalog")]
        input: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Contrastive pre-training into `out_dir`.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the pair classifier on the frozen pre-trained backbone.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a split with the fine-tuned classifier.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Grid ablation over positives (k) and negatives (q) per anchor.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        qs: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    prepare_dir(dir)?;
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, cfg.to_toml()).map_err(io(&path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("plain record") + "\n").map_err(io(path))
}

fn write_sidecar(dir: &Path, name: &str, cfg: &RunConfig, phase: Phase, best_epoch: usize, epochs_run: usize, ckpt: &Checkpoint) -> Result<()> {
    let snapshot = cfg.to_toml();
    let meta = RunMetadata {
        run_id: run_id(&snapshot, &ckpt.to_bytes()),
        phase,
        best_epoch,
        epochs_run,
        config: serde_json::to_value(cfg).expect("config serializes"),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    write_json(&dir.join(name), &meta)
}

/// Drops stale metrics lines before a phase runs: pre-training starts a
/// fresh log, fine-tuning keeps only the pre-training lines.
fn reset_metrics(dir: &Path, phase: Phase) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Ok(());
    }
    if phase == Phase::Pretrain {
        return fs::remove_file(&path).map_err(io(&path));
    }
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let tag = format!("\"phase\":\"{phase}\"");
    let kept: String = text
        .lines()
        .filter(|l| !l.contains(&tag))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&path, kept).map_err(io(&path))
}

fn print_stats(stats: &BlockingStats) {
    println!("{}", serde_json::to_string_pretty(stats).expect("plain record"));
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<OfferCatalog> {
    echo_config(cfg, out)?;
    let catalog = generate_synthetic(&cfg.data.synth)?;
    write_catalog(&catalog, &out.join("catalog"))?;
    write_pair_file(&catalog, &out.join("pairs.tsv"))?;
    println!(
        "{} offers, {} products, {} blockings, {} pairs -> {}",
        catalog.offers.len(),
        catalog.product_count,
        catalog.blocking_count,
        catalog.pairs.len(),
        out.display()
    );
    Ok(catalog)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub sides: Vec<SplitSide>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSide {
    pub name: String,
    pub offers: usize,
    pub products: usize,
    pub blockings: usize,
    pub pairs: usize,
    pub positive_pairs: usize,
}

pub fn cmd_prep(cfg: &RunConfig, input: &Path, out: &Path) -> Result<Splits> {
    let records = parse_pairs(input, cfg.data.delimiter)?;
    let catalog = assign_ids(&records)?;
    let splits = three_way_split(&catalog, cfg.data.test_fraction, cfg.data.val_fraction, cfg.data.split_seed)?;
    echo_config(cfg, out)?;
    write_catalog(&catalog, &out.join("catalog"))?;
    let mut sides = Vec::new();
    for (name, c) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        write_catalog(c, &out.join(name))?;
        sides.push(SplitSide {
            name: name.to_string(),
            offers: c.offers.len(),
            products: c.product_count,
            blockings: c.blocking_count,
            pairs: c.pairs.len(),
            positive_pairs: c.pairs.iter().filter(|p| p.label).count(),
        });
    }
    write_json(
        &out.join(SPLIT_MANIFEST),
        &SplitManifest {
            seed: cfg.data.split_seed,
            test_fraction: cfg.data.test_fraction,
            val_fraction: cfg.data.val_fraction,
            sides,
        },
    )?;
    println!(
        "{} offers, {} products, {} blockings, {} pairs",
        catalog.offers.len(),
        catalog.product_count,
        catalog.blocking_count,
        catalog.pairs.len()
    );
    print_stats(&blocking_stats(&catalog));
    Ok(splits)
}

pub fn cmd_stats(input: Option<&Path>, catalog_dir: Option<&Path>) -> Result<BlockingStats> {
    let catalog = match (input, catalog_dir) {
        (Some(path), _) => assign_ids(&parse_pairs(path, Delimiter::Auto)?)?,
        (None, Some(dir)) => read_catalog(dir)?,
        (None, None) => return Err(CliError::Config("stats needs --input or --catalog".into())),
    };
    let stats = blocking_stats(&catalog);
    print_stats(&stats);
    Ok(stats)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.out_dir;
    echo_config(cfg, dir)?;
    reset_metrics(dir, Phase::Pretrain)?;
    let splits = cfg.splits()?;
    let p = cfg.pipeline();
    let model = ContrastiveModel::<f32>::new(p.encoder, p.projection)?;
    let out = pretrain(model, &splits.train, &splits.val, &p.pretrain, Some(dir))?;
    let ckpt = out.best.to_checkpoint();
    write_sidecar(dir, "pretrain.meta.json", cfg, Phase::Pretrain, out.best_epoch, out.records.len(), &ckpt)?;
    println!(
        "pretrain: {} epochs, best epoch {} (val loss {:.6}) -> {}",
        out.records.len(),
        out.best_epoch,
        out.best_val_loss,
        dir.join(PRETRAIN_CHECKPOINT).display()
    );
    Ok(())
}

fn load_backbone(dir: &Path, cfg: &RunConfig) -> Result<Backbone<f32>> {
    let ckpt = Checkpoint::load(&dir.join(PRETRAIN_CHECKPOINT))?;
    let backbone = Backbone::<f32>::from_checkpoint(&ckpt)?;
    if backbone.config.embed_dim != cfg.encoder.embed_dim
        || backbone.config.feature_vocab_size != cfg.encoder.feature_vocab_size
    {
        return Err(CliError::Config(format!(
            "checkpoint encoder {:?} does not match the configured encoder",
            backbone.config
        )));
    }
    Ok(backbone)
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.out_dir;
    let backbone = load_backbone(dir, cfg)?;
    echo_config(cfg, dir)?;
    reset_metrics(dir, Phase::Finetune)?;
    let splits = cfg.splits()?;
    let p = cfg.pipeline();
    let out = finetune(&backbone, &splits.train, &splits.val, &p.finetune, Some(dir))?;
    let ckpt = out.best.to_checkpoint(Default::default());
    write_sidecar(dir, "classifier.meta.json", cfg, Phase::Finetune, out.best_epoch, out.records.len(), &ckpt)?;
    println!(
        "finetune: {} epochs, best epoch {} (val F1 {:.2})",
        out.records.len(),
        out.best_epoch,
        100.0 * out.best_val_f1
    );
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, split: &str) -> Result<crate::matching::MatchMetrics> {
    let dir = &cfg.out_dir;
    let backbone = load_backbone(dir, cfg)?;
    let clf = Classifier::<f32>::from_checkpoint(&Checkpoint::load(&dir.join(CLASSIFIER_CHECKPOINT))?)?;
    let splits = cfg.splits()?;
    let catalog = match split {
        "train" => &splits.train,
        "val" => &splits.val,
        _ => &splits.test,
    };
    let eval = evaluate(catalog, &backbone, &clf, cfg.finetune.threshold)?;
    let (pred_name, metrics_name) = if split == "test" {
        (PREDICTIONS_FILE.to_string(), TEST_METRICS_FILE.to_string())
    } else {
        (format!("predictions_{split}.jsonl"), format!("{split}_metrics.json"))
    };
    write_predictions(&dir.join(pred_name), &eval.predictions)?;
    write_json(&dir.join(metrics_name), &eval.metrics)?;
    let m = &eval.metrics;
    println!(
        "{split}: F1 {:.2}  precision {:.2}  recall {:.2}  (tp {} fp {} fn {} tn {}){}",
        100.0 * m.f1,
        100.0 * m.precision,
        100.0 * m.recall,
        m.confusion.tp,
        m.confusion.fp,
        m.confusion.r#fn,
        m.confusion.tn,
        if m.degenerate { "  [degenerate: no positives predicted or labeled]" } else { "" }
    );
    Ok(eval.metrics)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("blocking  k   q   F1 (mean ± std)\n");
    for r in rows {
        let f1 = match &r.error {
            Some(e) => format!("failed: {e}"),
            None => format!("{:.2} ± {:.2}", r.f1_mean, r.f1_std),
        };
        let block = if r.blocking { "yes" } else { "no" };
        let q = if r.blocking { r.q.to_string() } else { "-".into() };
        s.push_str(&format!("{block:<9} {:<3} {q:<3} {f1}\n", r.k));
    }
    s
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    ks: Option<Vec<usize>>,
    qs: Option<Vec<usize>>,
    repeats: Option<usize>,
) -> Result<Vec<AblationRow>> {
    let mut spec = cfg.ablation.clone();
    if let Some(ks) = ks {
        spec.ks = ks;
    }
    if let Some(qs) = qs {
        spec.qs = qs;
    }
    if let Some(r) = repeats {
        spec.repeats = r;
    }
    let mut resolved = cfg.clone();
    resolved.ablation = spec.clone();
    let dir = &cfg.out_dir;
    echo_config(&resolved, dir)?;
    let splits = cfg.splits()?;
    let rows = run_ablation::<f32>(&splits, &cfg.pipeline(), &spec, Some(dir), |cell, seed, r| match r {
        Ok(s) => eprintln!("{} seed {seed}: test F1 {:.2}", cell.dir_name(), 100.0 * s.test.f1),
        Err(e) => eprintln!("{} seed {seed}: failed: {e}", cell.dir_name()),
    })?;
    print!("{}", format_table(&rows));
    println!("table -> {}", dir.join(ABLATION_FILE).display());
    Ok(rows)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => cmd_synth(&config.resolve()?, &out).map(|_| ()),
        Command::Prep { config, input, out } => cmd_prep(&config.resolve()?, &input, &out).map(|_| ()),
        Command::Stats { input, catalog } => cmd_stats(input.as_deref(), catalog.as_deref()).map(|_| ()),
        Command::Pretrain { config } => cmd_pretrain(&config.resolve()?),
        Command::Finetune { config } => cmd_finetune(&config.resolve()?),
        Command::Evaluate { config, split } => cmd_evaluate(&config.resolve()?, &split).map(|_| ()),
        Command::Ablate {
            config,
            ks,
            qs,
            repeats,
        } => cmd_ablate(&config.resolve()?, ks, qs, repeats).map(|_| ()),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::load(
            None,
            &[
                "pretrain.sampler.q=16".into(),
                "pretrain.sampler.blocking_mode=false".into(),
                "out_dir=runs/x".into(),
                "pretrain.loss.temperature=0.1".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pretrain.sampler.q, 16);
        assert!(!cfg.pretrain.sampler.blocking_mode);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/x"));
        assert_eq!(cfg.pretrain.loss.temperature, 0.1);
        let cfg = RunConfig::load(None, &["finetune.train.peak_lr=0.5".into()]).unwrap();
        assert_eq!(cfg.finetune.train.epochs, FinetuneConfig::default().train.epochs);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let e = RunConfig::load(None, &["pretrain.sampler.qq=1".into()]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_CONFIG);
        let e = RunConfig::load(None, &["encoder.feature_vocab_size=1000".into()]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_CONFIG);
        let e = RunConfig::load(None, &["data.catalog_dir=/nonexistent/dir".into()]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_CONFIG);
        assert!(RunConfig::load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
