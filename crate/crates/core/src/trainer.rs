//! k-fold cross-validated training.
//!
//! Every fold trains an independent network from its own seed stream, so
//! folds can run concurrently without changing any result. Batch order is
//! drawn per `(seed, fold, epoch)` rather than from a running RNG.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageize::normalize;
use crate::ingest::{forward_fill_named, Dataset, DatasetManifest, SampleFrame};
use crate::metrics::{linreg_baseline, mae, Baselines, EpochRecord, FoldSummary, MetricsReport, Summary};
use crate::model::{save_checkpoint, ArchConfig, ArchKind, InputSignature, RegressionNet};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::plot::render_curves;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    L1,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "l1" => Ok(LossKind::L1),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected mse or l1)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub folds: usize,
    pub seed: u64,
    /// Copies of the normalized plane fed as input channels.
    pub channels: usize,
    pub optimizer: OptimizerConfig,
    pub arch: ArchConfig,
    /// Also fit the least-squares and mean-predictor baselines.
    pub baselines: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 1000,
            loss: LossKind::Mse,
            folds: 5,
            seed: 0,
            channels: 1,
            optimizer: OptimizerConfig::new(OptimizerKind::Sgd),
            arch: ArchConfig::preset(ArchKind::Tiny, 1),
            baselines: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, samples: usize) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.channels == 0 {
            return Err(Error::Config("batch size, epochs and channels must be at least 1".into()));
        }
        if self.folds < 2 || self.folds > samples {
            return Err(Error::Config(format!(
                "folds must be between 2 and the sample count ({samples}), got {}",
                self.folds
            )));
        }
        if self.arch.channels_in != self.channels {
            return Err(Error::Config(format!(
                "architecture expects {} input channels but {} were requested",
                self.arch.channels_in, self.channels
            )));
        }
        self.optimizer.validate()?;
        self.arch.validate()
    }
}

/// Fold index of every sample, in dataset order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub sample_ids: Vec<String>,
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.sample_ids
            .iter()
            .position(|s| s == sample_id)
            .map(|i| self.assignments[i])
    }

    /// `(train, validation)` sample indices for `fold`, each ascending.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.assignments.len()).partition(|&i| self.assignments[i] != fold)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.assignments.iter().for_each(|&f| sizes[f] += 1);
        sizes
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn make_folds(sample_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > sample_ids.len() {
        return Err(Error::Config(format!(
            "k must be between 2 and {} for {} samples, got {k}",
            sample_ids.len(),
            sample_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..sample_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; sample_ids.len()];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % k;
    }
    Ok(FoldPlan {
        k,
        sample_ids: sample_ids.to_vec(),
        assignments,
    })
}

/// SplitMix64 finaliser over a seed and a stream counter.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, fold as u64)
}

fn epoch_seed(seed: u64, fold: usize, epoch: usize) -> u64 {
    derive_seed(fold_seed(seed, fold), 1 + epoch as u64)
}

/// Normalized images of every sample packed as one `[N,C,H,W]` buffer.
struct ImageBank {
    sample_len: usize,
    shape: [usize; 3],
    data: Vec<f32>,
}

impl ImageBank {
    fn build(frames: &[SampleFrame], manifest: &DatasetManifest, channels: usize) -> Result<Self> {
        let shape = [channels, manifest.num_sensors(), manifest.time_steps];
        let sample_len = shape.iter().product();
        let mut data = Vec::with_capacity(sample_len * frames.len());
        for f in frames {
            let filled = forward_fill_named(f, manifest)?;
            normalize(&filled, manifest, channels)?.extend_batch(&mut data);
        }
        Ok(Self {
            sample_len,
            shape,
            data,
        })
    }

    fn sample(&self, i: usize) -> &[f32] {
        &self.data[i * self.sample_len..(i + 1) * self.sample_len]
    }

    fn batch(&self, idx: &[usize]) -> (Vec<usize>, Vec<f32>) {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        let [c, h, w] = self.shape;
        (vec![idx.len(), c, h, w], data)
    }

    /// Channel-0 plane of sample `i` as regression features.
    fn features(&self, i: usize) -> Vec<f64> {
        let plane = self.shape[1] * self.shape[2];
        self.sample(i)[..plane].iter().map(|v| *v as f64).collect()
    }
}

const EVAL_CHUNK: usize = 256;

fn predict_indices(net: &RegressionNet<f32>, bank: &ImageBank, idx: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (shape, data) = bank.batch(chunk);
        let y = net.forward(&Tensor::new(shape, data)?)?;
        out.extend(y.data().iter().map(|v| *v as f64));
    }
    Ok(out)
}

struct FoldResult {
    net: RegressionNet<f32>,
    records: Vec<EpochRecord>,
    best: FoldSummary,
}

fn train_fold(
    fold: usize,
    plan: &FoldPlan,
    bank: &ImageBank,
    targets: &[f64],
    config: &TrainConfig,
) -> Result<FoldResult> {
    let (train_idx, val_idx) = plan.split(fold);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(format!("fold {fold} has an empty partition")));
    }
    let val_targets: Vec<f64> = val_idx.iter().map(|&i| targets[i]).collect();
    let mut net = RegressionNet::<f32>::build(config.arch.clone(), fold_seed(config.seed, fold))?;
    let train_mean = train_idx.iter().map(|&i| targets[i]).sum::<f64>() / train_idx.len() as f64;
    net.set_output_bias(train_mean as f32);
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(FoldSummary, RegressionNet<f32>)> = None;

    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, fold, epoch)));
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (shape, data) = bank.batch(batch);
            let y: Vec<f32> = batch.iter().map(|&i| targets[i] as f32).collect();
            let loss = {
                let mut g = Graph::new();
                let x = g.input(shape, data)?;
                let t = g.input(vec![batch.len(), 1], y)?;
                let pred = net.forward_train(&mut g, x)?;
                let loss = match config.loss {
                    LossKind::Mse => g.mse_loss(pred, t)?,
                    LossKind::L1 => g.l1_loss(pred, t)?,
                };
                let value = g.value(loss)[0] as f64;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { fold, epoch });
                }
                g.backward(loss)?;
                value
            };
            opt.step(net.params_mut()).map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::NonFiniteLoss { fold, epoch },
                other => other,
            })?;
            net.zero_grad();
            loss_sum += loss * batch.len() as f64;
        }
        let pred = predict_indices(&net, bank, &val_idx)?;
        if pred.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss { fold, epoch });
        }
        let m = Summary::evaluate(&pred, &val_targets)?;
        records.push(EpochRecord {
            fold,
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_mae: m.mae,
            val_rmse: m.rmse,
            val_r2: m.r2,
        });
        if best.as_ref().map_or(true, |(b, _)| m.mae < b.metrics.mae) {
            best = Some((
                FoldSummary {
                    fold,
                    best_epoch: epoch,
                    metrics: m,
                },
                net.clone(),
            ));
        }
    }
    let (best, net) = best.expect("epochs >= 1");
    Ok(FoldResult { net, records, best })
}

pub struct TrainOutput {
    /// Best-validation-MAE network of each fold.
    pub nets: Vec<RegressionNet<f32>>,
    pub report: MetricsReport,
    pub plan: FoldPlan,
}

/// Cross-validated training on raw-unit targets. `jobs` caps how many folds
/// train concurrently; the result does not depend on it.
pub fn train(dataset: &Dataset, config: &TrainConfig, jobs: usize) -> Result<TrainOutput> {
    config.validate(dataset.frames.len())?;
    let targets = dataset
        .targets()
        .ok_or_else(|| Error::Config("every sample needs a target for training".into()))?;
    let bank = ImageBank::build(&dataset.frames, &dataset.manifest, config.channels)?;
    let ids: Vec<String> = dataset.frames.iter().map(|f| f.sample_id.clone()).collect();
    let plan = make_folds(&ids, config.folds, config.seed)?;

    let run = |fold| train_fold(fold, &plan, &bank, &targets, config);
    let results: Vec<FoldResult> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.min(config.folds))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..config.folds).into_par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        (0..config.folds).map(run).collect::<Result<Vec<_>>>()?
    };

    let baselines = if config.baselines {
        Some(baselines(&bank, &targets, &plan)?)
    } else {
        None
    };
    let folds: Vec<FoldSummary> = results.iter().map(|r| r.best).collect();
    let summary = Summary::mean(&folds.iter().map(|f| f.metrics).collect::<Vec<_>>()).expect("k >= 2");
    let mut records = Vec::with_capacity(config.folds * config.epochs);
    let mut nets = Vec::with_capacity(config.folds);
    for r in results {
        records.extend(r.records);
        nets.push(r.net);
    }
    Ok(TrainOutput {
        nets,
        report: MetricsReport {
            records,
            folds,
            summary,
            baselines,
        },
        plan,
    })
}

fn baselines(bank: &ImageBank, targets: &[f64], plan: &FoldPlan) -> Result<Baselines> {
    let features: Vec<Vec<f64>> = (0..targets.len()).map(|i| bank.features(i)).collect();
    match linreg_baseline(&features, targets, &plan.assignments, plan.k) {
        Ok(b) => Ok(b),
        Err(Error::Degenerate(_)) => {
            // still report the mean predictor
            let mut maes = Vec::with_capacity(plan.k);
            for fold in 0..plan.k {
                let (train, val) = plan.split(fold);
                let m = train.iter().map(|&i| targets[i]).sum::<f64>() / train.len() as f64;
                let t: Vec<f64> = val.iter().map(|&i| targets[i]).collect();
                maes.push(mae(&vec![m; t.len()], &t)?);
            }
            Ok(Baselines {
                mean_predictor_mae: maes.iter().sum::<f64>() / plan.k as f64,
                linreg_mae: f64::NAN,
                linreg_rmse: f64::NAN,
                linreg_r2: None,
            })
        }
        Err(e) => Err(e),
    }
}

/// Raw-unit predictions after forward fill and normalization.
pub fn predict(
    net: &RegressionNet<f32>,
    frames: &[SampleFrame],
    manifest: &DatasetManifest,
    signature: Option<&InputSignature>,
) -> Result<Vec<(String, f64)>> {
    let channels = net.config().channels_in;
    if let Some(sig) = signature {
        let names: Vec<&str> = manifest.sensors.iter().map(|s| s.name.as_str()).collect();
        if sig.sensors != names || sig.channels != channels {
            return Err(Error::Shape(format!(
                "checkpoint was trained on sensors {:?} with {} channels; data has {:?}",
                sig.sensors, sig.channels, names
            )));
        }
    }
    let bank = ImageBank::build(frames, manifest, channels)?;
    let idx: Vec<usize> = (0..frames.len()).collect();
    let pred = predict_indices(net, &bank, &idx)?;
    Ok(frames.iter().map(|f| f.sample_id.clone()).zip(pred).collect())
}

pub fn input_signature(manifest: &DatasetManifest, channels: usize) -> InputSignature {
    InputSignature {
        channels,
        sensors: manifest.sensors.iter().map(|s| s.name.clone()).collect(),
        time_steps: manifest.time_steps,
    }
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub jobs: usize,
    pub data: DataEcho,
    /// How summary metrics were obtained.
    pub evaluation: String,
    pub records: Vec<EpochRecord>,
    pub folds: Vec<FoldSummary>,
    pub summary: Summary,
    pub baselines: Option<Baselines>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataEcho {
    pub samples: usize,
    pub sensors: Vec<String>,
    pub time_steps: usize,
}

pub const EVALUATION_NOTE: &str =
    "k-fold cross-validation; summary is the mean over folds of each fold's best-validation-MAE epoch";

impl RunReport {
    pub fn new(dataset: &Dataset, config: &TrainConfig, jobs: usize, report: &MetricsReport) -> Self {
        Self {
            config: config.clone(),
            jobs,
            data: DataEcho {
                samples: dataset.frames.len(),
                sensors: dataset.manifest.sensors.iter().map(|s| s.name.clone()).collect(),
                time_steps: dataset.manifest.time_steps,
            },
            evaluation: EVALUATION_NOTE.into(),
            records: report.records.clone(),
            folds: report.folds.clone(),
            summary: report.summary,
            baselines: report.baselines,
        }
    }

    pub fn metrics(&self) -> MetricsReport {
        MetricsReport {
            records: self.records.clone(),
            folds: self.folds.clone(),
            summary: self.summary,
            baselines: self.baselines,
        }
    }
}

pub const REPORT_FILE: &str = "report.json";

/// Writes `report.json`, `metrics.csv`, the metric curves and one checkpoint
/// pair per fold into `out_dir`.
pub fn write_run(out_dir: &Path, dataset: &Dataset, config: &TrainConfig, jobs: usize, output: &TrainOutput) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report = RunReport::new(dataset, config, jobs, &output.report);
    let path = out_dir.join(REPORT_FILE);
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let sig = input_signature(&dataset.manifest, config.channels);
    for (i, net) in output.nets.iter().enumerate() {
        save_checkpoint(net, Some(&sig), &out_dir.join(format!("fold_{i}")))?;
    }
    render_curves(&output.report, out_dir)?;
    Ok(())
}
