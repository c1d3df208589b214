//! Optimization loop, model selection and multi-run protocols.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};
use crate::eval::{predict, Predictions};
use crate::features::{make_batch, AugmentedSequence, DatasetSplit};
use crate::model::{FlatFormer, ModelConfig, Variant};
use crate::numerics::{clip_grad_norm, AdamConfig, AdamState, Checkpoint, Graph};
use crate::Scalar;

pub const DEFAULT_BETAS: [f64; 5] = [0.01, 0.05, 0.1, 0.2, 0.5];
pub const DEFAULT_LR_GRID: [f64; 3] = [1e-3, 5e-4, 1e-4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub lr_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub betas: Vec<f64>,
    /// Batches drawn from groups of this many similar-length windows, to
    /// cut padding. 1 disables grouping.
    pub length_grouping: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            patience: 5,
            lr: 1e-3,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            seeds: (0..5).collect(),
            batch_size: 64,
            eval_batch_size: 64,
            clip_norm: 5.0,
            weight_decay: 1e-5,
            betas: DEFAULT_BETAS.to_vec(),
            length_grouping: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience >= self.epochs {
            return Err(config_err!("need 0 < patience < epochs, got patience {} and epochs {}", self.patience, self.epochs));
        }
        if self.seeds.is_empty() {
            return Err(config_err!("at least one seed is required"));
        }
        if !(self.lr > 0.0) || self.lr_grid.iter().any(|&l| !(l > 0.0)) {
            return Err(config_err!("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.length_grouping == 0 {
            return Err(config_err!("batch sizes and length_grouping must be positive"));
        }
        if !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(config_err!("clip_norm must be positive and weight_decay non-negative"));
        }
        if self.betas.iter().any(|&b| !(b >= 0.0)) {
            return Err(config_err!("betas must be non-negative"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_auc: Option<f64>,
    pub validation_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: Option<f64>,
    pub acc: f64,
    pub predictions: usize,
}

impl Metrics {
    pub fn of(p: &Predictions) -> Result<Self> {
        Ok(Metrics {
            auc: p.auc(),
            acc: p.acc()?,
            predictions: p.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub beta: f64,
    pub seed: u64,
    pub lr: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_validation_auc: Option<f64>,
    pub early_stopped: bool,
    pub test: Option<Metrics>,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn test_auc(&self) -> Option<f64> {
        self.test.as_ref().and_then(|m| m.auc)
    }
}

pub struct TrainedRun<T> {
    pub record: RunRecord,
    pub model: FlatFormer<T>,
}

/// Training order for one epoch: shuffled, then sorted by length inside
/// groups of `grouping` batches, then the batches themselves shuffled.
pub fn epoch_batches(lengths: &[usize], batch_size: usize, grouping: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for group in order.chunks(batch_size * grouping) {
        let mut g = group.to_vec();
        g.sort_by_key(|&i| lengths[i]);
        batches.extend(g.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

fn checkpoint_of<T: Scalar>(model: &FlatFormer<T>, seed: u64, meta: serde_json::Value) -> Checkpoint<T, ModelConfig> {
    Checkpoint {
        config: model.config.clone(),
        seed,
        params: model.params.clone(),
        meta,
    }
}

/// Mean BCE and gradient step over one batch. Returns the loss.
fn train_step<T: Scalar>(
    model: &mut FlatFormer<T>,
    adam: &mut AdamState<T>,
    seqs: &[&AugmentedSequence],
    clip: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let batch = make_batch(seqs);
    if batch.num_scored() == 0 {
        return Ok(f64::NAN);
    }
    let masks = model.masks(&batch)?;
    let mut g = Graph::train(dropout_seed);
    let p = model.params.bind(&mut g);
    let fwd = model.forward(&mut g, &p, &batch, &masks)?;
    let loss = model.loss(&mut g, &fwd, &batch)?;
    let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::Divergence(format!("loss became {value}")));
    }
    let mut raw = g.backward(loss)?;
    let mut grads = p.gradients(&model.params, &mut raw);
    clip_grad_norm(&mut grads, clip);
    adam.step(&mut model.params, &grads)?;
    Ok(value)
}

/// Train one model with early stopping on validation AUC.
///
/// With `out_dir`, the best parameters are kept in `best.ckpt.json` and one
/// JSON line per epoch is appended to `epochs.jsonl`. On divergence the
/// error is returned and the last good checkpoint stays on disk.
pub fn train<T: Scalar>(
    model_config: &ModelConfig,
    split: &DatasetSplit,
    config: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainedRun<T>> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(data_err!("training split is empty"));
    }
    let mut model: FlatFormer<T> = FlatFormer::new(model_config.clone(), seed)?;
    let mut adam = AdamState::new(&model.params, config.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
    let lengths: Vec<usize> = split.train.iter().map(|s| s.len()).collect();

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("epochs.jsonl");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let ckpt_path = out_dir.map(|d| d.join("best.ckpt.json"));

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, FlatFormer<T>)> = None;
    let mut since_best = 0;
    let mut early_stopped = false;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut loss_batches = 0;
        for idx in epoch_batches(&lengths, config.batch_size, config.length_grouping, &mut rng) {
            let seqs: Vec<&AugmentedSequence> = idx.iter().map(|&i| &split.train[i]).collect();
            let l = train_step(&mut model, &mut adam, &seqs, config.clip_norm, rng.next_u64())?;
            if l.is_finite() {
                loss_sum += l;
                loss_batches += 1;
            }
        }
        let train_loss = loss_sum / loss_batches.max(1) as f64;
        let val = if split.validation.is_empty() {
            None
        } else {
            Some(predict(&model, &split.validation, config.eval_batch_size)?).filter(|p| !p.is_empty())
        };
        let validation_auc = val.as_ref().and_then(|p| p.auc());
        let record = EpochRecord {
            epoch,
            train_loss,
            validation_auc,
            validation_acc: val.as_ref().map(|p| p.acc()).transpose()?,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some((f, path)) = log.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n").map_err(|e| Error::io(path.as_path(), e))?;
        }
        epochs.push(record);

        // Without a usable validation AUC, fall back to the training loss.
        let score = validation_auc.unwrap_or(-train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            if let Some(path) = &ckpt_path {
                let meta = serde_json::json!({ "epoch": epoch, "validation_auc": validation_auc });
                checkpoint_of(&model, seed, meta).save(path)?;
            }
            best = Some((score, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                early_stopped = true;
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    let test = if split.test.is_empty() {
        None
    } else {
        Some(Metrics::of(&predict(&model, &split.test, config.eval_batch_size)?)?)
    };
    Ok(TrainedRun {
        record: RunRecord {
            variant: model_config.variant,
            beta: model_config.effective_beta(),
            seed,
            lr: config.lr,
            best_validation_auc: epochs[best_epoch - 1].validation_auc,
            best_epoch,
            epochs,
            early_stopped,
            test,
            checkpoint: ckpt_path,
        },
        model,
    })
}

/// Train once per learning rate in the grid and keep the best run by
/// validation AUC.
pub fn select_lr<T: Scalar>(
    model_config: &ModelConfig,
    split: &DatasetSplit,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedRun<T>> {
    let mut best: Option<TrainedRun<T>> = None;
    for &lr in &config.lr_grid {
        let run = train::<T>(model_config, split, &TrainConfig { lr, ..config.clone() }, seed, None)?;
        let score = run.record.best_validation_auc.unwrap_or(f64::NEG_INFINITY);
        if best
            .as_ref()
            .is_none_or(|b| score > b.record.best_validation_auc.unwrap_or(f64::NEG_INFINITY))
        {
            best = Some(run);
        }
    }
    best.ok_or_else(|| config_err!("empty learning-rate grid"))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub beta: f64,
    pub runs: usize,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
}

fn summarize(variant: Variant, beta: f64, runs: &[&RunRecord]) -> SummaryRow {
    let aucs: Vec<f64> = runs.iter().filter_map(|r| r.test_auc()).collect();
    let accs: Vec<f64> = runs.iter().filter_map(|r| r.test.as_ref().map(|m| m.acc)).collect();
    let (mean_auc, std_auc) = mean_std(&aucs);
    let (mean_acc, std_acc) = mean_std(&accs);
    SummaryRow {
        variant,
        beta,
        runs: runs.len(),
        mean_auc,
        std_auc,
        mean_acc,
        std_acc,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

impl MatrixResult {
    pub fn row(&self, variant: Variant) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_runs_jsonl(&dir.join("runs.jsonl"), &self.runs)?;
        write_summary_csv(&dir.join("summary.csv"), &self.summary)
    }
}

/// Independent runs for every (variant, seed), executed in parallel.
/// Each run gets `out_dir/<variant>/seed<k>` when `out_dir` is set.
pub fn run_matrix<T: Scalar>(
    model_config: &ModelConfig,
    split: &DatasetSplit,
    variants: &[Variant],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<MatrixResult> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let mc = ModelConfig { variant, ..model_config.clone() };
            let dir = out_dir.map(|d| d.join(variant.as_str()).join(format!("seed{seed}")));
            train::<T>(&mc, split, config, seed, dir.as_deref()).map(|r| r.record)
        })
        .collect::<Result<_>>()?;
    let summary = variants
        .iter()
        .map(|&v| {
            let rs: Vec<&RunRecord> = runs.iter().filter(|r| r.variant == v).collect();
            let beta = ModelConfig { variant: v, ..model_config.clone() }.effective_beta();
            summarize(v, beta, &rs)
        })
        .collect();
    Ok(MatrixResult { runs, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaPoint {
    pub beta: f64,
    pub runs: usize,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub aucs: Vec<f64>,
}

/// Full-variant runs for each β and seed.
pub fn beta_sweep<T: Scalar>(
    model_config: &ModelConfig,
    split: &DatasetSplit,
    betas: &[f64],
    config: &TrainConfig,
) -> Result<(Vec<BetaPoint>, Vec<RunRecord>)> {
    if model_config.variant != Variant::Full {
        return Err(config_err!("the beta sweep runs the full variant, got {}", model_config.variant));
    }
    let jobs: Vec<(usize, u64)> = (0..betas.len())
        .flat_map(|i| config.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let mc = ModelConfig { beta: betas[i], ..model_config.clone() };
            train::<T>(&mc, split, config, seed, None).map(|r| r.record)
        })
        .collect::<Result<_>>()?;
    let points = betas
        .iter()
        .enumerate()
        .map(|(i, &beta)| {
            let aucs: Vec<f64> = runs
                .iter()
                .zip(&jobs)
                .filter(|(_, j)| j.0 == i)
                .filter_map(|(r, _)| r.test_auc())
                .collect();
            let (mean_auc, std_auc) = mean_std(&aucs);
            BetaPoint {
                beta,
                runs: aucs.len(),
                mean_auc,
                std_auc,
                aucs,
            }
        })
        .collect();
    Ok((points, runs))
}

pub fn write_runs_jsonl(path: &Path, runs: &[RunRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in runs {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "beta", "runs", "mean_auc", "std_auc", "mean_acc", "std_acc"])?;
    for r in rows {
        w.write_record(&[
            r.variant.to_string(),
            r.beta.to_string(),
            r.runs.to_string(),
            format!("{:.6}", r.mean_auc),
            format!("{:.6}", r.std_auc),
            format!("{:.6}", r.mean_acc),
            format!("{:.6}", r.std_acc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_curve_csv(path: &Path, points: &[BetaPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["beta", "runs", "mean_auc", "std_auc"])?;
    for p in points {
        w.write_record(&[
            p.beta.to_string(),
            p.runs.to_string(),
            format!("{:.6}", p.mean_auc),
            format!("{:.6}", p.std_auc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
