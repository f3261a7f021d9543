//! Training loop with best-validation checkpoint selection, and batched inference.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::checkpoint::{Checkpoint, Provenance};
use super::model::{backward, bce_loss, forward, Mode};
use super::params::{Parameters, Section};
use super::spec::ModelSpec;
use super::tensor::Tensor;
use crate::raster::RasterImage;
use crate::rng;
use crate::{Error, Exec, Result};

const EVAL_BATCH: usize = 64;

/// Tiles already downscaled to the model input size, stored as 8-bit HWC.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TileDataset {
    pub input_size: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<f32>,
}

impl TileDataset {
    pub fn new(input_size: usize) -> Self {
        Self { input_size, pixels: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn item_len(&self) -> usize {
        self.input_size * self.input_size * 3
    }

    /// Adds a tile (any square size that is a multiple of the input size).
    pub fn push_tile(&mut self, tile: &RasterImage, label: f32) -> Result<()> {
        tile.box_downscale_into(self.input_size, &mut self.pixels)?;
        self.labels.push(label);
        Ok(())
    }

    /// Float batch in [0,1] for the given item indices.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let len = self.item_len();
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            data.extend(self.pixels[i * len..(i + 1) * len].iter().map(|&v| f32::from(v) / 255.0));
        }
        Tensor { shape: vec![idx.len(), self.input_size, self.input_size, 3], data }
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<f32> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y >= 0.5).count();
        (pos, self.len() - pos)
    }
}

/// Which validation quantity picks the saved epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Loss,
    ErrorRate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub selection: Selection,
    pub provenance: Provenance,
    pub source_digest: Option<String>,
    /// Keep conv tensors fixed (only the dense head learns).
    pub freeze_conv: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
            selection: Selection::Loss,
            provenance: Provenance::Scratch,
            source_digest: None,
            freeze_conv: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_error: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// 1-based index of the smallest value; the earliest epoch wins ties.
pub fn select_best_epoch(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// Mean eval-mode BCE and 0.5-threshold error rate over a dataset.
pub fn evaluate_dataset(spec: &ModelSpec, params: &Parameters<f32>, data: &TileDataset) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0f64;
    let mut wrong = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let probs = forward(spec, params, &data.batch(chunk), Mode::Eval, None)?;
        let labels = data.labels_of(chunk);
        loss_sum += f64::from(bce_loss(&probs, &labels)?) * chunk.len() as f64;
        wrong += probs.iter().zip(&labels).filter(|(&p, &y)| (p >= 0.5) != (y >= 0.5)).count();
    }
    let n = data.len() as f64;
    Ok((loss_sum / n, wrong as f64 / n))
}

/// Trains from `init` and returns the weights of the epoch with the lowest
/// validation metric. Single-threaded and bitwise deterministic in (data, cfg).
pub fn train(
    spec: &ModelSpec,
    init: Parameters<f32>,
    train_set: &TileDataset,
    val_set: &TileDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    spec.validate()?;
    init.check_against(spec)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    for d in [train_set, val_set] {
        if d.input_size != spec.input_size {
            return Err(Error::ShapeMismatch(format!(
                "dataset input size {} vs model {}",
                d.input_size, spec.input_size
            )));
        }
    }
    let (pos, neg) = train_set.class_counts();
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("training set must contain both classes".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
    }

    let mut params = init;
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut dropout_rng = rng::stream(cfg.seed, "train/dropout");
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs as usize);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::indexed_stream(cfg.seed, "train/shuffle", u64::from(epoch)));
        let mut loss_sum = 0.0f64;
        let mut diverged = false;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.batch(chunk);
            let labels = train_set.labels_of(chunk);
            let (loss, mut grads) =
                match backward(spec, &params, &batch, &labels, Mode::Train, Some(&mut dropout_rng)) {
                    Ok(v) => v,
                    Err(Error::NonFinite(_)) => {
                        diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
            if cfg.freeze_conv {
                for t in grads.tensors.iter_mut().filter(|t| t.section == Section::Conv) {
                    t.data.iter_mut().for_each(|g| *g = 0.0);
                }
            }
            if cfg.freeze_conv {
                let saved: Vec<Vec<f32>> =
                    params.tensors.iter().filter(|t| t.section == Section::Conv).map(|t| t.data.clone()).collect();
                adam_step(&mut params, &grads, &mut adam)?;
                for (t, s) in params.tensors.iter_mut().filter(|t| t.section == Section::Conv).zip(saved) {
                    t.data = s;
                }
            } else {
                adam_step(&mut params, &grads, &mut adam)?;
            }
            loss_sum += f64::from(loss) * chunk.len() as f64;
        }
        let evaluated = if diverged || !params.all_finite() {
            None
        } else {
            match evaluate_dataset(spec, &params, val_set) {
                Ok(v) if v.0.is_finite() => Some(v),
                Ok(_) | Err(Error::NonFinite(_)) => None,
                Err(e) => return Err(e),
            }
        };
        let Some((val_loss, val_error)) = evaluated else {
            log::warn!("training diverged in epoch {epoch}");
            return Err(match best {
                Some((_, ckpt)) => Error::Diverged { epoch, checkpoint: Box::new(ckpt) },
                None => Error::NonFinite(format!("training diverged in epoch {epoch} before any finite epoch")),
            });
        };
        let train_loss = loss_sum / train_set.len() as f64;
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} err {val_error:.4}");
        history.push(EpochRecord { epoch, train_loss, val_loss, val_error });
        let metric = match cfg.selection {
            Selection::Loss => val_loss,
            Selection::ErrorRate => val_error,
        };
        if best.as_ref().is_none_or(|(b, _)| metric < *b) {
            best = Some((
                metric,
                Checkpoint {
                    spec: spec.clone(),
                    params: params.clone(),
                    epoch,
                    val_loss,
                    provenance: cfg.provenance,
                    source_digest: cfg.source_digest.clone(),
                },
            ));
        }
    }
    let (_, checkpoint) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { checkpoint, history })
}

/// Eval-mode scores for a dataset, in order. Batches may run in parallel.
pub fn predict_dataset(spec: &ModelSpec, params: &Parameters<f32>, data: &TileDataset, exec: Exec) -> Result<Vec<f32>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_BATCH).collect();
    let parts = exec.map(&chunks, |c| forward(spec, params, &data.batch(c), Mode::Eval, None));
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Scores raw tiles: each is box-downscaled to the model input and scaled to [0,1].
pub fn predict(ckpt: &Checkpoint, tiles: &[RasterImage], tile_size: usize, exec: Exec) -> Result<Vec<f32>> {
    let mut data = TileDataset::new(ckpt.spec.input_size);
    for t in tiles {
        if t.width() != tile_size || t.height() != tile_size {
            return Err(Error::ShapeMismatch(format!(
                "expected {tile_size}x{tile_size} tiles, got {}x{}",
                t.width(),
                t.height()
            )));
        }
        data.push_tile(t, 0.0)?;
    }
    predict_dataset(&ckpt.spec, &ckpt.params, &data, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::params::init_params;

    #[test]
    fn best_epoch_rule() {
        assert_eq!(select_best_epoch(&[0.7, 0.5, 0.6]), Some(2));
        assert_eq!(select_best_epoch(&[0.5, 0.5]), Some(1));
        assert_eq!(select_best_epoch(&[]), None);
        assert_eq!(select_best_epoch(&[f64::NAN, 0.9]), Some(2));
    }

    fn toy(n: usize, seed: u64) -> TileDataset {
        use rand::Rng;
        let mut r = rng::stream(seed, "toy");
        let mut d = TileDataset::new(8);
        for i in 0..n {
            let pos = i % 2 == 0;
            let base: u8 = if pos { 170 } else { 60 };
            let img: Vec<u8> = (0..8 * 8 * 3).map(|_| base.saturating_add(r.random_range(0..40))).collect();
            d.push_tile(&RasterImage::new(8, 8, img).unwrap(), if pos { 1.0 } else { 0.0 }).unwrap();
        }
        d
    }

    #[test]
    fn rejects_degenerate_sets() {
        let spec = ModelSpec::with_channels(8, vec![2]);
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let empty = TileDataset::new(8);
        assert!(train(&spec, init_params(&spec, 0), &empty, &toy(4, 1), &cfg).is_err());
        let mut one_class = toy(4, 1);
        one_class.labels.iter_mut().for_each(|y| *y = 1.0);
        assert!(train(&spec, init_params(&spec, 0), &one_class, &toy(4, 1), &cfg).is_err());
    }

    #[test]
    fn frozen_conv_stays_fixed() {
        let spec = ModelSpec::with_channels(8, vec![2]);
        let init: Parameters<f32> = init_params(&spec, 4);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, lr: 1e-3, freeze_conv: true, ..TrainConfig::default() };
        let out = train(&spec, init.clone(), &toy(32, 1), &toy(8, 2), &cfg).unwrap();
        for (a, b) in out.checkpoint.params.tensors.iter().zip(&init.tensors) {
            if a.section == Section::Conv {
                assert_eq!(a.data, b.data);
            }
        }
    }

    #[test]
    fn predict_checks_tile_size() {
        let spec = ModelSpec::with_channels(8, vec![2]);
        let ckpt = Checkpoint {
            params: Parameters::zeros(&spec),
            spec,
            epoch: 0,
            val_loss: 0.0,
            provenance: Provenance::Scratch,
            source_digest: None,
        };
        let tiles = vec![RasterImage::filled(16, 16, [10, 20, 30]); 3];
        assert_eq!(predict(&ckpt, &tiles, 16, Exec::Parallel).unwrap(), vec![0.5; 3]);
        assert!(predict(&ckpt, &tiles, 32, Exec::Sequential).is_err());
    }
}
