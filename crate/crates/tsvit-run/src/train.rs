//! The training protocol: Adam with a constant learning rate, per-epoch
//! validation, best-checkpoint selection and learning-rate sweeps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsvit_core::peft::PeftSpec;
use tsvit_core::{Adam, Forward, Tensor, TsVit};

use crate::batch::{epoch_batches, load_split};
use crate::checkpoint::save_checkpoint;
use crate::error::{Result, RunError};
use crate::manifest::{DatasetManifest, Split};
use crate::metrics::{ConfusionAccumulator, Metrics};
use crate::tile::Tile;

fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HParams {
    pub lr: f32,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub peft: PeftSpec,
}

impl HParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(RunError::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(RunError::Invalid(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_iou: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub best_checkpoint: PathBuf,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,train_loss,val_f1,val_iou,is_best";

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out += &format!(
                "{},{:.6},{:.6},{:.6},{}\n",
                r.epoch, r.train_loss, r.val_f1, r.val_iou, r.is_best
            );
        }
        out
    }
}

/// One forward pass and pixel cross-entropy for a tile.
fn tile_loss(model: &TsVit, tile: &Tile) -> Result<(tsvit_core::Graph, Vec<(usize, tsvit_core::Var)>, f32)> {
    let labels: Vec<usize> = tile.labels.iter().map(|&l| l as usize).collect();
    let mut fwd = Forward::new(model);
    let logits = fwd.run(&tile.data, &tile.times)?;
    let rows = fwd.pixel_logits(logits)?;
    let loss = fwd.graph.cross_entropy(rows, &labels)?;
    let mut value = fwd.graph.value(loss).item();
    let (mut graph, leaves) = fwd.finish();
    graph.backward(loss)?;
    if !value.is_finite() {
        value = f32::NAN;
    }
    Ok((graph, leaves, value))
}

fn apply_grads(model: &mut TsVit, graph: &tsvit_core::Graph, leaves: &[(usize, tsvit_core::Var)], scale: f32) -> Result<()> {
    for &(id, var) in leaves {
        if !model.params.get(id).trainable {
            continue;
        }
        if let Some(g) = graph.grad(var) {
            let shape = model.params.get(id).tensor.shape().to_vec();
            let data: Vec<f32> = g.iter().map(|&v| v * scale).collect();
            let t = Tensor::new(&shape, data).map_err(RunError::Core)?;
            model.params.accumulate_grad(id, &t)?;
        }
    }
    Ok(())
}

/// Predict the class of every pixel of a (normalized) tile.
pub fn predict(model: &TsVit, tile: &Tile) -> Result<Vec<u8>> {
    let mut fwd = Forward::new(model);
    let logits = fwd.run(&tile.data, &tile.times)?;
    let rows = fwd.pixel_logits(logits)?;
    let values = fwd.graph.value(rows);
    let k = model.cfg.k;
    let mut out = Vec::with_capacity(values.numel() / k);
    for row in values.data().chunks_exact(k) {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        out.push(best as u8);
    }
    Ok(out)
}

/// Evaluate on already-loaded (normalized) tiles.
pub fn evaluate_tiles(model: &TsVit, tiles: &[Tile]) -> Result<Metrics> {
    let mut acc = ConfusionAccumulator::new(model.cfg.k);
    for tile in tiles {
        let preds = predict(model, tile)?;
        for (&truth, &pred) in tile.labels.iter().zip(&preds) {
            acc.add(truth as usize, pred as usize)?;
        }
    }
    Ok(acc.finish())
}

/// Evaluate a split referenced by the manifest.
pub fn evaluate(model: &TsVit, base: &Path, manifest: &DatasetManifest, split: Split) -> Result<Metrics> {
    let tiles = load_split(base, manifest, split)?;
    if tiles.is_empty() {
        return Err(RunError::Invalid(format!("split {split:?} is empty")));
    }
    evaluate_tiles(model, &tiles)
}

/// Train with Adam. Surgery must already be applied; only trainable
/// parameters move. The best-validation-F1 state (earliest epoch on ties)
/// is checkpointed to `out_dir/best.ptwt`.
pub fn train(
    model: &mut TsVit,
    base: &Path,
    manifest: &DatasetManifest,
    hp: &HParams,
    out_dir: &Path,
) -> Result<History> {
    hp.validate()?;
    let train_tiles = load_split(base, manifest, Split::Train)?;
    let val_tiles = load_split(base, manifest, Split::Val)?;
    if train_tiles.is_empty() || val_tiles.is_empty() {
        return Err(RunError::Invalid("train and val splits must be nonempty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("best.ptwt");

    let mut opt = Adam::new();
    let mut history = History {
        epochs: Vec::with_capacity(hp.epochs),
        best_epoch: 0,
        best_val_f1: f64::NEG_INFINITY,
        best_checkpoint: ckpt_path.clone(),
    };
    for epoch in 0..hp.epochs {
        let mut epoch_loss = 0.0f64;
        let mut batch_count = 0usize;
        for (batch_idx, batch) in
            epoch_batches(train_tiles.len(), hp.batch_size, hp.seed, epoch as u64)
                .into_iter()
                .enumerate()
        {
            model.params.zero_grads();
            let scale = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0f64;
            for &tile_idx in &batch {
                let (graph, leaves, loss) =
                    tile_loss(model, &train_tiles[tile_idx]).map_err(|e| match e {
                        RunError::Core(tsvit_core::CoreError::NonFinite { .. }) => {
                            RunError::NonFiniteLoss { epoch, batch: batch_idx }
                        }
                        other => other,
                    })?;
                if !loss.is_finite() {
                    return Err(RunError::NonFiniteLoss { epoch, batch: batch_idx });
                }
                batch_loss += f64::from(loss);
                apply_grads(model, &graph, &leaves, scale)?;
            }
            opt.step(&mut model.params, hp.lr)?;
            epoch_loss += batch_loss * f64::from(scale);
            batch_count += 1;
        }
        let train_loss = epoch_loss / batch_count as f64;
        let metrics = evaluate_tiles(model, &val_tiles)?;
        let is_best = metrics.val_f1 > history.best_val_f1;
        if is_best {
            history.best_val_f1 = metrics.val_f1;
            history.best_epoch = epoch;
            save_checkpoint(&model.params, &ckpt_path)?;
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_f1: metrics.val_f1,
            val_iou: metrics.val_iou,
            is_best,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lr: f32,
    pub method: String,
    pub best_val_f1: f64,
    pub test_f1: f64,
}

pub const SWEEP_CSV_HEADER: &str = "lr,method,best_val_f1,test_f1";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out += &format!("{},{},{:.6},{:.6}\n", r.lr, r.method, r.best_val_f1, r.test_f1);
    }
    out
}

/// The published learning-rate grid.
pub const DEFAULT_LR_GRID: [f32; 5] = [0.0001, 0.005, 0.01, 0.05, 0.1];

/// Independent training run per learning rate: fresh model and surgery
/// from the factory, identical seeds, evaluated on val (selection) and
/// test (report).
pub fn lr_sweep<F>(
    mut factory: F,
    base: &Path,
    manifest: &DatasetManifest,
    hp_template: &HParams,
    lrs: &[f32],
    out_dir: &Path,
) -> Result<Vec<SweepRow>>
where
    F: FnMut() -> Result<TsVit>,
{
    if lrs.is_empty() {
        return Err(RunError::Invalid("learning-rate list is empty".into()));
    }
    let mut rows = Vec::with_capacity(lrs.len());
    for (i, &lr) in lrs.iter().enumerate() {
        let mut model = factory()?;
        let hp = HParams {
            lr,
            ..hp_template.clone()
        };
        let run_dir = out_dir.join(format!("lr_{i}"));
        let history = train(&mut model, base, manifest, &hp, &run_dir)?;
        // Report test F1 of the best-validation state.
        let loaded = crate::checkpoint::load_checkpoint(&history.best_checkpoint)?;
        crate::checkpoint::restore_into(&mut model, &loaded)?;
        let test = evaluate(&model, base, manifest, Split::Test)?;
        rows.push(SweepRow {
            lr,
            method: hp.peft.name().to_string(),
            best_val_f1: history.best_val_f1,
            test_f1: test.val_f1,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_synthetic, SyntheticConfig};
    use tsvit_core::model::TsVitConfig;
    use tsvit_core::peft::apply_peft;
    use tsvit_core::Rng;

    pub(crate) fn small_model_cfg() -> TsVitConfig {
        TsVitConfig {
            t: 6,
            h: 12,
            w: 12,
            c: 3,
            k: 2,
            p: 3,
            d: 16,
            l_t: 1,
            l_s: 1,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn tiny_dataset(dir: &Path, tiles: usize) -> DatasetManifest {
        let cfg = SyntheticConfig {
            tiles,
            ..Default::default()
        };
        let path = generate_synthetic(&cfg, dir).unwrap();
        DatasetManifest::load(&path).unwrap()
    }

    #[test]
    fn history_is_deterministic_and_has_one_record_per_epoch() {
        let data_dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(data_dir.path(), 10);
        let hp = HParams {
            lr: 0.01,
            epochs: 2,
            batch_size: 4,
            seed: 0,
            peft: PeftSpec::HeadTune,
        };
        let run = |out: &Path| {
            let mut model = TsVit::new(small_model_cfg(), &mut Rng::new(3)).unwrap();
            apply_peft(&mut model, &hp.peft, true, &mut Rng::new(4)).unwrap();
            train(&mut model, data_dir.path(), &manifest, &hp, out).unwrap()
        };
        let o1 = tempfile::tempdir().unwrap();
        let o2 = tempfile::tempdir().unwrap();
        let h1 = run(o1.path());
        let h2 = run(o2.path());
        assert_eq!(h1.to_csv(), h2.to_csv());
        assert_eq!(h1.epochs.len(), 2);
        assert!(o1.path().join("best.ptwt").exists());
    }

    #[test]
    fn best_epoch_maximizes_val_f1_earliest_tie() {
        let data_dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(data_dir.path(), 10);
        let hp = HParams {
            lr: 0.005,
            epochs: 3,
            batch_size: 4,
            seed: 1,
            peft: PeftSpec::HeadTune,
        };
        let mut model = TsVit::new(small_model_cfg(), &mut Rng::new(3)).unwrap();
        apply_peft(&mut model, &hp.peft, true, &mut Rng::new(4)).unwrap();
        let out = tempfile::tempdir().unwrap();
        let h = train(&mut model, data_dir.path(), &manifest, &hp, out.path()).unwrap();
        let best = h
            .epochs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.val_f1 == h.best_val_f1)
            .map(|(i, _)| i)
            .min()
            .unwrap();
        assert_eq!(h.best_epoch, best);
    }

    #[test]
    fn checkpoint_reload_reproduces_val_metrics() {
        let data_dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(data_dir.path(), 10);
        let hp = HParams {
            lr: 0.01,
            epochs: 2,
            batch_size: 4,
            seed: 0,
            peft: PeftSpec::HeadTune,
        };
        let mut model = TsVit::new(small_model_cfg(), &mut Rng::new(3)).unwrap();
        apply_peft(&mut model, &hp.peft, true, &mut Rng::new(4)).unwrap();
        let out = tempfile::tempdir().unwrap();
        let h = train(&mut model, data_dir.path(), &manifest, &hp, out.path()).unwrap();

        let mut fresh = TsVit::new(small_model_cfg(), &mut Rng::new(99)).unwrap();
        apply_peft(&mut fresh, &hp.peft, true, &mut Rng::new(98)).unwrap();
        let loaded = crate::checkpoint::load_checkpoint(&h.best_checkpoint).unwrap();
        crate::checkpoint::restore_into(&mut fresh, &loaded).unwrap();
        let m = evaluate(&fresh, data_dir.path(), &manifest, Split::Val).unwrap();
        assert_eq!(m.val_f1, h.best_val_f1);
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        let data_dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(data_dir.path(), 8);
        let model = TsVit::new(small_model_cfg(), &mut Rng::new(3)).unwrap();
        let mut tiles = load_split(data_dir.path(), &manifest, Split::Train).unwrap();
        let a = evaluate_tiles(&model, &tiles).unwrap();
        tiles.reverse();
        let b = evaluate_tiles(&model, &tiles).unwrap();
        assert_eq!(a.val_f1, b.val_f1);
        assert_eq!(a.confusion.iter().sum::<u64>(), b.confusion.iter().sum::<u64>());
    }

    #[test]
    fn single_lr_sweep_equals_direct_train() {
        let data_dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(data_dir.path(), 10);
        let hp = HParams {
            lr: 0.01,
            epochs: 2,
            batch_size: 4,
            seed: 0,
            peft: PeftSpec::HeadTune,
        };
        let factory = || {
            let mut m = TsVit::new(small_model_cfg(), &mut Rng::new(3)).unwrap();
            apply_peft(&mut m, &hp.peft, true, &mut Rng::new(4)).unwrap();
            Ok(m)
        };
        let out = tempfile::tempdir().unwrap();
        let rows = lr_sweep(factory, data_dir.path(), &manifest, &hp, &[0.01], out.path()).unwrap();
        assert_eq!(rows.len(), 1);

        let mut model = TsVit::new(small_model_cfg(), &mut Rng::new(3)).unwrap();
        apply_peft(&mut model, &hp.peft, true, &mut Rng::new(4)).unwrap();
        let out2 = tempfile::tempdir().unwrap();
        let h = train(&mut model, data_dir.path(), &manifest, &hp, out2.path()).unwrap();
        assert_eq!(rows[0].best_val_f1, h.best_val_f1);
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
    }

    #[test]
    fn frozen_params_bitwise_stable_through_training() {
        let data_dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(data_dir.path(), 8);
        let hp = HParams {
            lr: 0.05,
            epochs: 2,
            batch_size: 4,
            seed: 2,
            peft: PeftSpec::TokenTune {
                mode: tsvit_core::peft::TokenMode::Full,
            },
        };
        let mut model = TsVit::new(small_model_cfg(), &mut Rng::new(3)).unwrap();
        apply_peft(&mut model, &hp.peft, true, &mut Rng::new(4)).unwrap();
        let frozen: Vec<(String, Vec<u32>)> = model
            .params
            .iter()
            .filter(|p| !p.trainable)
            .map(|p| (p.path.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let out = tempfile::tempdir().unwrap();
        train(&mut model, data_dir.path(), &manifest, &hp, out.path()).unwrap();
        for (path, bits) in frozen {
            let now: Vec<u32> = model
                .params
                .by_path(&path)
                .unwrap()
                .tensor
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(bits, now, "frozen `{path}` moved during training");
        }
    }
}
