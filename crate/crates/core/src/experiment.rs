//! End-to-end runs: split, pre-train, fine-tune, evaluate; and the grid
//! ablation over positives and negatives per anchor.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{split, DataError, OfferCatalog};
use crate::encoder::{ContrastiveModel, EncoderConfig, EncoderError, ProjectionConfig};
use crate::matching::{evaluate, write_predictions, MatchError, MatchMetrics};
use crate::scalar::Scalar;
use crate::train::{finetune, pretrain, EpochRecord, FinetuneConfig, PretrainConfig, TrainError};

pub const ABLATION_FILE: &str = "ablation.jsonl";
pub const TEST_METRICS_FILE: &str = "test_metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("invalid ablation spec: {0}")]
    Spec(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Blocking-disjoint train / validation / test catalogs.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: OfferCatalog,
    pub val: OfferCatalog,
    pub test: OfferCatalog,
}

/// Holds out `test_fraction` of the blockings, then `val_fraction` of the
/// remainder.
pub fn three_way_split(catalog: &OfferCatalog, test_fraction: f64, val_fraction: f64, seed: u64) -> Result<Splits> {
    let (rest, test) = split(catalog, test_fraction, seed)?;
    let (train, val) = split(&rest, val_fraction, seed.wrapping_add(1))?;
    Ok(Splits { train, val, test })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub projection: ProjectionConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl PipelineConfig {
    /// Routes one run seed to model init and both training phases.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.encoder.seed = seed;
        self.pretrain.train.seed = seed;
        self.finetune.train.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub test: MatchMetrics,
    pub pretrain_best_epoch: usize,
    pub finetune_best_epoch: usize,
    pub best_val_f1: f64,
    pub records: Vec<EpochRecord>,
}

/// Pre-trains, fine-tunes on the frozen backbone and scores the test split.
/// With `out_dir`, the metrics log, checkpoints, prediction dump and test
/// metrics are written there.
pub fn run_pipeline<T: Scalar>(splits: &Splits, config: &PipelineConfig, out_dir: Option<&Path>) -> Result<RunSummary> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let model = ContrastiveModel::<T>::new(config.encoder, config.projection)?;
    let pre = pretrain(model, &splits.train, &splits.val, &config.pretrain, out_dir)?;
    let backbone = pre.best.backbone();
    let fine = finetune(&backbone, &splits.train, &splits.val, &config.finetune, out_dir)?;
    let eval = evaluate(&splits.test, &backbone, &fine.best, config.finetune.threshold)?;
    if let Some(dir) = out_dir {
        write_predictions(&dir.join(PREDICTIONS_FILE), &eval.predictions)?;
        let path = dir.join(TEST_METRICS_FILE);
        fs::write(&path, serde_json::to_string_pretty(&eval.metrics).expect("plain record")).map_err(io_err(&path))?;
    }
    let mut records = pre.records;
    records.extend(fine.records);
    Ok(RunSummary {
        test: eval.metrics,
        pretrain_best_epoch: pre.best_epoch,
        finetune_best_epoch: fine.best_epoch,
        best_val_f1: fine.best_val_f1,
        records,
    })
}

/// Grid of `(k, q)` cells in blocking mode plus one no-blocking baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub ks: Vec<usize>,
    pub qs: Vec<usize>,
    /// Extra cells beyond the `ks x qs` grid, as `[k, q]`.
    pub extra_cells: Vec<[usize; 2]>,
    pub repeats: usize,
    /// Positives per anchor for the baseline row.
    pub baseline_k: usize,
    pub first_seed: u64,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            ks: vec![1, 2],
            qs: vec![2, 16],
            extra_cells: Vec::new(),
            repeats: 3,
            baseline_k: 2,
            first_seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub blocking: bool,
    pub k: usize,
    pub q: usize,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        if self.blocking {
            format!("blocking-k{}-q{}", self.k, self.q)
        } else {
            format!("vanilla-k{}", self.k)
        }
    }
}

impl AblationSpec {
    /// Baseline first, then the grid in `ks`-major order, then extra cells;
    /// duplicates are dropped.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        if self.repeats == 0 {
            return Err(ExperimentError::Spec("repeats must be at least 1".into()));
        }
        let mut cells = vec![Cell {
            blocking: false,
            k: self.baseline_k,
            q: 0,
        }];
        let grid = self.ks.iter().flat_map(|&k| self.qs.iter().map(move |&q| [k, q]));
        for [k, q] in grid.chain(self.extra_cells.iter().copied()) {
            let c = Cell { blocking: true, k, q };
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        Ok(cells)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.first_seed + i).collect()
    }
}

/// One row of the ablation table. F1 values are in percentage points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub blocking: bool,
    pub k: usize,
    pub q: usize,
    pub runs: Vec<f64>,
    pub f1_mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single run.
    pub f1_std: f64,
    /// Set when a run of the cell failed; the cell then has no statistics.
    pub error: Option<String>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every cell for every seed. A failing run marks its cell and the
/// sweep moves on. Rows are appended to `sweep_dir/ablation.jsonl` as
/// cells complete.
pub fn run_ablation<T: Scalar>(
    splits: &Splits,
    base: &PipelineConfig,
    spec: &AblationSpec,
    sweep_dir: Option<&Path>,
    mut progress: impl FnMut(&Cell, u64, &Result<RunSummary>),
) -> Result<Vec<AblationRow>> {
    let cells = spec.cells()?;
    if let Some(dir) = sweep_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let table = dir.join(ABLATION_FILE);
        if table.exists() {
            fs::remove_file(&table).map_err(io_err(&table))?;
        }
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut runs = Vec::new();
        let mut error = None;
        for seed in spec.seeds() {
            let mut cfg = base.with_seed(seed);
            cfg.pretrain.sampler.k = cell.k;
            cfg.pretrain.sampler.q = cell.q;
            cfg.pretrain.sampler.blocking_mode = cell.blocking;
            let run_dir: Option<PathBuf> = sweep_dir.map(|d| d.join(cell.dir_name()).join(format!("seed-{seed}")));
            if let Some(d) = &run_dir {
                if d.exists() {
                    fs::remove_dir_all(d).map_err(io_err(d))?;
                }
            }
            let result = run_pipeline::<T>(splits, &cfg, run_dir.as_deref());
            progress(cell, seed, &result);
            match result {
                Ok(summary) => runs.push(100.0 * summary.test.f1),
                Err(e) => {
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        let (f1_mean, f1_std) = if error.is_none() { mean_std(&runs) } else { (f64::NAN, f64::NAN) };
        let row = AblationRow {
            blocking: cell.blocking,
            k: cell.k,
            q: cell.q,
            runs,
            f1_mean,
            f1_std,
            error,
        };
        if let Some(dir) = sweep_dir {
            append_row(&dir.join(ABLATION_FILE), &row)?;
        }
        rows.push(row);
    }
    Ok(rows)
}

fn append_row(path: &Path, row: &AblationRow) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{}", serde_json::to_string(row).expect("plain record")).map_err(io_err(path))
}

/// Parses an ablation table written by [`run_ablation`].
pub fn read_ablation(path: &Path) -> Result<Vec<AblationRow>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                ExperimentError::Spec(format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_enumeration() {
        let spec = AblationSpec {
            ks: vec![1, 2],
            qs: vec![2, 16],
            extra_cells: vec![[1, 2], [3, 8]],
            repeats: 3,
            baseline_k: 1,
            first_seed: 5,
        };
        let cells = spec.cells().unwrap();
        assert_eq!(cells.len(), 6);
        assert!(!cells[0].blocking && cells[0].q == 0);
        assert_eq!(spec.seeds(), vec![5, 6, 7]);
        assert!(AblationSpec { repeats: 0, ..spec }.cells().is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
