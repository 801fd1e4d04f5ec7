//! Run configuration, the training loop, evaluation and the ablation sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataio::checkpoint::save_checkpoint;
use crate::dataio::image_io::write_bytes;
use crate::dataio::{tile, Dataset, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig};
use crate::metrics::{confusion, macro_average, scores, ConfusionCounts, Scores};
use crate::optim::{poly_lr, Sgd};
use crate::params::{ParamStore, Session};
use crate::rng::{Purpose, Rng};
use crate::roadnet::{predict_mask, Ablation, NetworkConfig, RoadNet};
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Poly,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub poly_power: f64,
    /// Random flips and 90-degree rotations of training tiles.
    pub augment: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 4,
            epochs: 200,
            schedule: Schedule::Poly,
            poly_power: 0.9,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory with a manifest; when absent, samples are
    /// synthesized in memory from `synth`.
    pub dir: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Number of synthetic samples (80/10/10 split by index).
    pub count: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            synth: SynthConfig::default(),
            count: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Probability at or above which a pixel counts as road.
    pub threshold: f64,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            threshold: 0.5,
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config("optim.lr must be positive and optim.momentum in [0, 1)".into()));
        }
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config("optim.batch_size and optim.epochs must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        if self.data.dir.is_none() {
            self.data.synth.validate()?;
            if self.data.synth.tile_size != self.network.tile_size {
                return Err(Error::Config(format!(
                    "data.synth.tile_size {} differs from network.tile_size {}",
                    self.data.synth.tile_size, self.network.tile_size
                )));
            }
        }
        Ok(())
    }

    /// Loads or synthesizes the dataset, cutting larger images into
    /// network-sized tiles.
    pub fn dataset(&self) -> Result<Dataset> {
        let d = match &self.data.dir {
            Some(dir) => Dataset::load(dir)?,
            None => Dataset::synth(&self.data.synth, self.data.count)?,
        };
        let t = self.network.tile_size;
        let fit = |v: Vec<Sample>| -> Result<Vec<Sample>> {
            let mut out = Vec::with_capacity(v.len());
            for s in v {
                if s.height() == t && s.width() == t {
                    out.push(s);
                } else {
                    out.extend(tile(&s, t, t)?);
                }
            }
            Ok(out)
        };
        Ok(Dataset {
            train: fit(d.train)?,
            val: fit(d.val)?,
            test: fit(d.test)?,
        })
    }
}

/// Stacks samples into `[B, 3, H, W]` images and `[B, 1, H, W]` targets.
pub fn batch_tensors<T: Scalar>(samples: &[&Sample]) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = (samples[0].height(), samples[0].width());
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut tgt = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        img.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
        tgt.extend(s.mask.data().iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
    let n = samples.len();
    (
        Tensor::new([n, 3, h, w], img).expect("stacked images"),
        Tensor::new([n, 1, h, w], tgt).expect("stacked masks"),
    )
}

/// One of the eight symmetries of the square, bit 0 = horizontal flip,
/// bit 1 = vertical flip, bit 2 = transpose.
pub fn dihedral(sample: &Sample, k: usize) -> Sample {
    let n = sample.height();
    let map = |r: usize, c: usize| {
        let (r, c) = if k & 4 != 0 { (c, r) } else { (r, c) };
        let c = if k & 1 != 0 { n - 1 - c } else { c };
        let r = if k & 2 != 0 { n - 1 - r } else { r };
        r * n + c
    };
    let image = Tensor::from_fn([3, n, n], |i| {
        let (ch, p) = (i / (n * n), i % (n * n));
        sample.image.data()[ch * n * n + map(p / n, p % n)]
    });
    let mask = (0..n * n).map(|p| sample.mask.data()[map(p / n, p % n)]).collect();
    Sample {
        id: sample.id.clone(),
        split: sample.split,
        image,
        mask: crate::metrics::BinaryMask::new([n, n], mask).expect("square mask"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Scores of the summed counts (headline numbers).
    pub micro: Scores,
    /// Mean of per-tile scores.
    pub macro_avg: Scores,
    pub counts: ConfusionCounts,
    pub tiles: Vec<ConfusionCounts>,
}

/// Probabilities for a batch of samples in eval mode.
pub fn predict_batch<T: Scalar>(net: &RoadNet, store: &mut ParamStore<T>, samples: &[&Sample]) -> Result<Tensor<T>> {
    let (x, _) = batch_tensors::<T>(samples);
    let mut s = Session::new(store, false);
    let xv = s.input(x);
    let p = net.forward(&mut s, xv)?;
    Ok(s.graph.value(p).clone())
}

pub fn evaluate<T: Scalar>(
    net: &RoadNet,
    store: &mut ParamStore<T>,
    samples: &[Sample],
    threshold: f64,
    batch: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Domain("evaluation over zero samples".into()));
    }
    let mut tiles = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let prob = predict_batch(net, store, &refs)?;
        let plane = chunk[0].height() * chunk[0].width();
        for (k, s) in chunk.iter().enumerate() {
            let p = Tensor::new(s.mask.shape().to_vec(), prob.data()[k * plane..(k + 1) * plane].to_vec())?;
            tiles.push(confusion(&predict_mask(&p, threshold)?, &s.mask)?);
        }
    }
    let counts: ConfusionCounts = tiles.iter().copied().sum();
    Ok(Evaluation {
        micro: scores(&counts)?,
        macro_avg: macro_average(&tiles)?,
        counts,
        tiles,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Scores,
    /// `exp(-s1)`, `exp(-s2)` at the end of the epoch.
    pub task_weights: (f64, f64),
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,val_precision,val_recall,val_f1,val_iou,val_oa,w_wbce,w_l2";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.val.precision,
            self.val.recall,
            self.val.f1,
            self.val.iou,
            self.val.oa,
            self.task_weights.0,
            self.task_weights.1
        )
    }
}

pub struct TrainOutcome<T> {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: Scores,
    /// Test scores of the best-validation parameters, when a test split exists.
    pub test: Option<Evaluation>,
    pub net: RoadNet,
    /// Parameters of the best-validation epoch.
    pub best: ParamStore<T>,
    pub elapsed: Duration,
}

/// Trains from scratch. With `out_dir`, writes `config.toml`,
/// `metrics.csv`, `last.ckpt` after every epoch and `best.ckpt` whenever
/// validation IoU improves.
pub fn train<T: Scalar>(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    if T::DTYPE != cfg.network.dtype {
        return Err(Error::Config(format!(
            "network.dtype is {:?} but training was requested in {:?}",
            cfg.network.dtype,
            T::DTYPE
        )));
    }
    let start = Instant::now();
    let mut store = ParamStore::<T>::new();
    let net = RoadNet::new(&mut store, &cfg.network, cfg.seed)?;
    loss::register_task_weights(&mut store)?;
    log::info!(
        "{}: {} tensors, {} scalars",
        cfg.network.ablation().name(),
        store.len(),
        store.num_scalars()
    );
    let mut opt = Sgd::new(&store, cfg.optim.momentum);
    let mut csv = String::from(EPOCH_CSV_HEADER);
    csv.push('\n');
    if let Some(dir) = out_dir {
        write_bytes(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
        save_checkpoint(&dir.join("last.ckpt"), &store, Some(&opt))?;
    }

    let bs = cfg.optim.batch_size;
    let steps_per_epoch = data.train.len().div_ceil(bs);
    let max_iter = (steps_per_epoch * cfg.optim.epochs) as u64;
    let mut shuffle = Rng::new(cfg.seed, Purpose::Shuffle);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.optim.epochs);
    let mut best: Option<(usize, Scores, ParamStore<T>)> = None;

    for epoch in 1..=cfg.optim.epochs {
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(bs) {
            let augmented: Vec<Sample>;
            let refs: Vec<&Sample> = if cfg.optim.augment {
                augmented = batch.iter().map(|&i| dihedral(&data.train[i], shuffle.below(8))).collect();
                augmented.iter().collect()
            } else {
                batch.iter().map(|&i| &data.train[i]).collect()
            };
            let lr = match cfg.optim.schedule {
                Schedule::Poly => poly_lr(cfg.optim.lr, opt.step, max_iter, cfg.optim.poly_power),
                Schedule::Constant => cfg.optim.lr,
            };
            let value = train_step(&net, &mut store, &refs, cfg.loss.alpha).map_err(|e| match e {
                Error::Domain(_) => Error::Diverged { epoch, loss: f64::NAN },
                other => other,
            })?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            opt.step(&mut store, lr);
            loss_sum += value;
        }
        let val = evaluate(&net, &mut store, &data.val, cfg.threshold, bs)?.micro;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val,
            task_weights: loss::task_weights(&store)?,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val f1 {:.4} iou {:.4}",
            log.train_loss,
            val.f1,
            val.iou
        );
        csv.push_str(&log.csv_row());
        csv.push('\n');
        history.push(log);
        let improved = best.as_ref().map_or(true, |(_, b, _)| val.iou > b.iou);
        if improved {
            best = Some((epoch, val, store.clone()));
        }
        if let Some(dir) = out_dir {
            write_bytes(&dir.join("metrics.csv"), csv.as_bytes())?;
            save_checkpoint(&dir.join("last.ckpt"), &store, Some(&opt))?;
            if improved {
                save_checkpoint(&dir.join("best.ckpt"), &store, None)?;
            }
        }
    }

    let (best_epoch, best_val, mut best_store) = best.expect("at least one epoch");
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&net, &mut best_store, &data.test, cfg.threshold, bs)?)
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val,
        test,
        net,
        best: best_store,
        elapsed: start.elapsed(),
    })
}

/// Forward, loss and backward on one batch; gradients are left in the store.
pub fn train_step<T: Scalar>(net: &RoadNet, store: &mut ParamStore<T>, batch: &[&Sample], alpha: f64) -> Result<f64> {
    let (x, target) = batch_tensors::<T>(batch);
    store.zero_grad();
    let mut s = Session::new(store, true);
    let xv = s.input(x);
    let p = net.forward(&mut s, xv)?;
    let w = loss::wbce(&mut s, p, &target, alpha)?;
    let l2 = loss::l2_penalty(&mut s)?;
    let (s1, s2) = (s.param(loss::S1)?, s.param(loss::S2)?);
    let total = loss::total_loss(&mut s, w, l2, s1, s2)?;
    let value = s.value(total).data()[0].as_f64();
    s.backward(total)?;
    Ok(value)
}

/// Rebuilds the network of `cfg` and strictly loads a checkpoint into it.
pub fn load_model<T: Scalar>(cfg: &NetworkConfig, checkpoint: &Path) -> Result<(RoadNet, ParamStore<T>)> {
    let mut store = ParamStore::<T>::new();
    let net = RoadNet::new(&mut store, cfg, 0)?;
    loss::register_task_weights(&mut store)?;
    crate::dataio::load_checkpoint(checkpoint, &mut store, None)?;
    Ok((net, store))
}

/// Dtype-independent summary of a run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: Scores,
    pub test: Option<Evaluation>,
    pub elapsed: Duration,
}

impl<T> From<TrainOutcome<T>> for RunSummary {
    fn from(o: TrainOutcome<T>) -> Self {
        Self {
            history: o.history,
            best_epoch: o.best_epoch,
            best_val: o.best_val,
            test: o.test,
            elapsed: o.elapsed,
        }
    }
}

/// Trains in the precision named by `cfg.network.dtype`.
pub fn train_any(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<RunSummary> {
    match cfg.network.dtype {
        DType::F32 => train::<f32>(cfg, data, out_dir).map(Into::into),
        DType::F64 => train::<f64>(cfg, data, out_dir).map(Into::into),
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub ablation: Ablation,
    pub seed: u64,
    pub summary: RunSummary,
}

/// Trains every ablation for every seed on the same data. Runs go to
/// `<out_dir>/<ablation>/seed<k>` when `write` is set.
pub fn ablate(base: &RunConfig, data: &Dataset, seeds: &[u64], write: bool) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for ablation in Ablation::ALL {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.network = cfg.network.clone().with_ablation(ablation);
            let dir = base.out_dir.join(ablation.name()).join(format!("seed{seed}"));
            cfg.out_dir = dir.clone();
            let summary = train_any(&cfg, data, write.then_some(dir.as_path()))?;
            log::info!(
                "{} seed {seed}: test f1 {:?} in {:?}",
                ablation.name(),
                summary.test.as_ref().map(|t| t.micro.f1),
                summary.elapsed
            );
            runs.push(AblationRun { ablation, seed, summary });
        }
    }
    Ok(runs)
}

/// Mean micro test scores per ablation, in `Ablation::ALL` order.
pub fn ablation_means(runs: &[AblationRun]) -> Vec<(Ablation, Scores)> {
    Ablation::ALL
        .iter()
        .filter_map(|&a| {
            let tests: Vec<Scores> = runs
                .iter()
                .filter(|r| r.ablation == a)
                .filter_map(|r| r.summary.test.as_ref().map(|t| t.micro))
                .collect();
            if tests.is_empty() {
                return None;
            }
            let n = tests.len() as f64;
            let mut m = Scores::default();
            for t in &tests {
                m.precision += t.precision / n;
                m.recall += t.recall / n;
                m.f1 += t.f1 / n;
                m.iou += t.iou / n;
                m.oa += t.oa / n;
                m.degenerate |= t.degenerate;
            }
            Some((a, m))
        })
        .collect()
}

/// Per-run table followed by the means.
pub fn ablation_report(runs: &[AblationRun]) -> String {
    let mut out = String::from("model,seed,epochs,best_epoch,precision,recall,f1,iou,oa,seconds\n");
    for r in runs {
        if let Some(t) = &r.summary.test {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.1}",
                r.ablation.name(),
                r.seed,
                r.summary.history.len(),
                r.summary.best_epoch,
                t.micro.precision,
                t.micro.recall,
                t.micro.f1,
                t.micro.iou,
                t.micro.oa,
                r.summary.elapsed.as_secs_f64()
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Split;

    #[test]
    fn config_roundtrips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let err = RunConfig::from_toml("seed = 1\ncolour = 3\n").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        let err = RunConfig::from_toml("[optim]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[network]\nwidths = [8, 16, 32]\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.network.widths, [8, 16, 32]);
        assert_eq!(cfg.network.window_size, 4);
        assert_eq!(cfg.optim.batch_size, 4);
    }

    #[test]
    fn mismatched_tile_sizes_rejected() {
        assert!(RunConfig::from_toml("[network]\ntile_size = 32\n").is_err());
    }

    #[test]
    fn dihedral_group_acts_on_image_and_mask_alike() {
        let s = crate::dataio::synth_sample(&SynthConfig::default(), 1);
        for k in 0..8 {
            let t = dihedral(&s, k);
            assert_eq!(t.mask.road_pixels(), s.mask.road_pixels());
            let road_mean = |x: &Sample| {
                let plane = x.height() * x.width();
                (0..plane).filter(|&p| x.mask.data()[p]).map(|p| x.image.data()[p] as f64).sum::<f64>()
            };
            assert!((road_mean(&t) - road_mean(&s)).abs() < 1e-9);
        }
        assert_eq!(dihedral(&s, 0), s);
        assert_eq!(dihedral(&dihedral(&s, 1), 1), s);
        assert_eq!(Split::Train, s.split);
    }
}
