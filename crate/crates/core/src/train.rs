//! Training loop: per-epoch shuffled minibatches, per-image forward through
//! encoder → trunk → heads, combined background-aware loss over the stacked
//! batch rows, Adam updates, per-epoch eval-mode metrics on the train and
//! val splits, best/final checkpoints, CSV history and SVG curves.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::anchors::{assign_targets, collect_raw_offsets, AnchorGrid, BBox, MinMaxScaler};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evalrun::MATCH_IOU_FLOOR;
use crate::loss::{combined_loss, LossConfig};
use crate::metrics::{accuracy_counts, match_predictions, mean_iou, modified_mae};
use crate::model::{boxes_from_output, Detector, PredictParams};
use crate::optim::Adam;
use crate::plot::{line_chart, Series};
use crate::rng::{chacha, mix};
use crate::synth::{augment, augment_seed, preprocess, SampleRecord, Split};
use crate::tensor::{Mode, Tape, Tensor};

/// One row of the metric history (all losses/metrics are eval-mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_cce: f64,
    pub train_mse: f64,
    pub val_loss: f64,
    pub val_cce: f64,
    pub val_mse: f64,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub train_mae: Option<f64>,
    pub val_mae: Option<f64>,
    pub train_mean_iou: Option<f64>,
    pub val_mean_iou: Option<f64>,
}

pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub history_csv: PathBuf,
}

struct PreparedSample {
    image: Tensor,
    gts: Vec<BBox>,
    class_onehot: Vec<f32>,
    offsets: Vec<f32>,
    /// Unique per-sample id feeding the dropout mask stream.
    uid: u64,
}

fn prepare_samples(
    records: &[&SampleRecord],
    grid: &AnchorGrid,
    scaler: &MinMaxScaler,
    cfg: &RunConfig,
    num_classes: usize,
) -> Result<Vec<PreparedSample>> {
    records
        .iter()
        .map(|rec| {
            let (image, gts) = preprocess(rec, cfg.model.image_size)?;
            let targets = assign_targets(
                grid,
                &gts,
                cfg.anchors.upper_iou,
                cfg.anchors.lower_iou,
                num_classes,
                scaler,
            )?;
            Ok(PreparedSample {
                image,
                gts,
                class_onehot: targets.class_onehot,
                offsets: targets.offsets,
                uid: rec.seed,
            })
        })
        .collect()
}

struct SplitMetrics {
    loss: f64,
    cce: f64,
    mse: f64,
    accuracy: Option<f64>,
    mae: Option<f64>,
    mean_iou: Option<f64>,
}

/// Eval-mode pass over a prepared split: losses with the reference
/// semantics, anchor accuracy, and box metrics through the full
/// prediction path.
fn eval_split(
    detector: &Detector,
    samples: &[PreparedSample],
    grid: &AnchorGrid,
    scaler: &MinMaxScaler,
    cfg: &RunConfig,
    num_classes: usize,
) -> Result<SplitMetrics> {
    let predict_params: PredictParams = cfg.predict_params();
    let loss_cfg = LossConfig {
        lambda: cfg.loss.lambda,
        normalize_cce: cfg.loss.normalize_cce,
    };
    let mut all_probs: Vec<f32> = Vec::new();
    let mut all_true_cls: Vec<f32> = Vec::new();
    let mut all_offsets: Vec<f32> = Vec::new();
    let mut all_true_off: Vec<f32> = Vec::new();
    let mut pairs = Vec::new();

    for s in samples {
        let tape = Tape::new();
        let out = detector.forward(&tape, &s.image, Mode::Eval)?;
        let probs = out.class_probs.to_vec();
        let offsets = out.offsets.to_vec();
        let (boxes, _diag) = boxes_from_output(&probs, &offsets, num_classes, grid, scaler, &predict_params);
        let matching = match_predictions(&s.gts, &boxes, MATCH_IOU_FLOOR);
        for pair in &matching.pairs {
            pairs.push((s.gts[pair.gt_index], boxes[pair.pred_index].bbox));
        }
        all_probs.extend_from_slice(&probs);
        all_offsets.extend_from_slice(&offsets);
        all_true_cls.extend_from_slice(&s.class_onehot);
        all_true_off.extend_from_slice(&s.offsets);
    }

    let rows = all_true_cls.len() / num_classes;
    let tape = Tape::new();
    let y_true_cls = Tensor::new(vec![rows, num_classes], all_true_cls.clone())?;
    let y_pred_cls = Tensor::new(vec![rows, num_classes], all_probs.clone())?;
    let y_true_off = Tensor::new(vec![rows, 4], all_true_off)?;
    let y_pred_off = Tensor::new(vec![rows, 4], all_offsets)?;
    let (_, report) = combined_loss(&tape, &y_true_cls, &y_pred_cls, &y_true_off, &y_pred_off, &loss_cfg)?;

    let (correct, total) = accuracy_counts(&all_true_cls, &all_probs, num_classes);
    Ok(SplitMetrics {
        loss: report.total,
        cce: report.cce,
        mse: report.mse,
        accuracy: if total > 0 {
            Some(correct as f64 / total as f64)
        } else {
            None
        },
        mae: modified_mae(&pairs),
        mean_iou: mean_iou(&pairs),
    })
}

fn opt_csv(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "undefined".to_string(),
    }
}

pub fn history_csv_string(history: &[EpochMetrics]) -> String {
    let mut out = String::from(
        "epoch,train_loss,train_cce,train_mse,val_loss,val_cce,val_mse,\
         train_accuracy,val_accuracy,train_mae,val_mae,train_mean_iou,val_mean_iou\n",
    );
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            m.epoch,
            m.train_loss,
            m.train_cce,
            m.train_mse,
            m.val_loss,
            m.val_cce,
            m.val_mse,
            opt_csv(m.train_accuracy),
            opt_csv(m.val_accuracy),
            opt_csv(m.train_mae),
            opt_csv(m.val_mae),
            opt_csv(m.train_mean_iou),
            opt_csv(m.val_mean_iou),
        ));
    }
    out
}

fn write_history_artifacts(history: &[EpochMetrics], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let csv_path = dir.join("history.csv");
    std::fs::write(&csv_path, history_csv_string(history))
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    let pick = |f: fn(&EpochMetrics) -> Option<(f64, f64)>| -> Vec<(f64, f64)> {
        history.iter().filter_map(f).collect()
    };
    let charts: [(&str, Vec<Series>); 4] = [
        (
            "loss",
            vec![
                Series {
                    name: "train".into(),
                    points: pick(|m| Some((m.epoch as f64, m.train_loss))),
                },
                Series {
                    name: "val".into(),
                    points: pick(|m| Some((m.epoch as f64, m.val_loss))),
                },
            ],
        ),
        (
            "accuracy",
            vec![
                Series {
                    name: "train".into(),
                    points: pick(|m| m.train_accuracy.map(|v| (m.epoch as f64, v))),
                },
                Series {
                    name: "val".into(),
                    points: pick(|m| m.val_accuracy.map(|v| (m.epoch as f64, v))),
                },
            ],
        ),
        (
            "mae",
            vec![
                Series {
                    name: "train".into(),
                    points: pick(|m| m.train_mae.map(|v| (m.epoch as f64, v))),
                },
                Series {
                    name: "val".into(),
                    points: pick(|m| m.val_mae.map(|v| (m.epoch as f64, v))),
                },
            ],
        ),
        (
            "mean_iou",
            vec![
                Series {
                    name: "train".into(),
                    points: pick(|m| m.train_mean_iou.map(|v| (m.epoch as f64, v))),
                },
                Series {
                    name: "val".into(),
                    points: pick(|m| m.val_mean_iou.map(|v| (m.epoch as f64, v))),
                },
            ],
        ),
    ];
    for (name, series) in charts {
        line_chart(name, &series, &dir.join(format!("{name}.svg")))?;
    }
    Ok(csv_path)
}

/// Better-than comparison for best-checkpoint selection: higher val
/// accuracy wins, ties by lower val loss.
fn is_better(candidate: &EpochMetrics, incumbent: &EpochMetrics) -> bool {
    let ca = candidate.val_accuracy.unwrap_or(f64::NEG_INFINITY);
    let ia = incumbent.val_accuracy.unwrap_or(f64::NEG_INFINITY);
    if ca != ia {
        return ca > ia;
    }
    candidate.val_loss < incumbent.val_loss
}

/// Runs (or resumes) training per `cfg` on `dataset`, writing artifacts
/// under `cfg.output_dir`: `best.ckpt`, `final.ckpt`, `history.csv`, and
/// one SVG curve per metric.
pub fn train(cfg: &RunConfig, dataset: &Dataset, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_dataset(&dataset.classes)?;
    let num_classes = cfg.num_classes();
    let grid = cfg.build_grid()?;

    let train_records = dataset.split(Split::Train);
    let val_records = dataset.split(Split::Val);
    if train_records.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }

    // scaler fit once on the training split, before epoch 1
    let scaler = match resume {
        Some(ckpt) => ckpt.scaler.clone(),
        None => {
            let mut all = Vec::new();
            for rec in &train_records {
                let (_, gts) = preprocess(rec, cfg.model.image_size)?;
                all.extend(collect_raw_offsets(
                    &grid,
                    &gts,
                    cfg.anchors.upper_iou,
                    cfg.anchors.lower_iou,
                )?);
            }
            MinMaxScaler::fit(&all)?
        }
    };

    let (detector, mut history, start_epoch) = match resume {
        Some(ckpt) => {
            let mut expected = ckpt.config.clone();
            expected.optimizer.epochs = cfg.optimizer.epochs;
            expected.output_dir = cfg.output_dir.clone();
            if expected != *cfg {
                return Err(Error::Config(
                    "resume config differs from checkpoint config (only epochs/output_dir may change)".into(),
                ));
            }
            let (det, _) = ckpt.build()?;
            (det, ckpt.history.clone(), ckpt.epoch)
        }
        None => {
            let det = Detector::init(
                cfg.vit_config(),
                cfg.head_config(grid.len()),
                cfg.encoder_kind(),
                cfg.seed,
            )?;
            (det, Vec::new(), 0)
        }
    };
    if start_epoch >= cfg.optimizer.epochs {
        return Err(Error::Config(format!(
            "checkpoint already at epoch {start_epoch}, nothing to train (epochs = {})",
            cfg.optimizer.epochs
        )));
    }

    let params = detector.params();
    let mut adam = Adam::new(cfg.adam_config(), &params);
    if let Some(ckpt) = resume {
        ckpt.restore_adam(&mut adam)?;
    }

    let base_train = prepare_samples(&train_records, &grid, &scaler, cfg, num_classes)?;
    let val_samples = prepare_samples(&val_records, &grid, &scaler, cfg, num_classes)?;

    let loss_cfg = LossConfig {
        lambda: cfg.loss.lambda,
        normalize_cce: cfg.loss.normalize_cce,
    };
    let out_dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");

    let mut best: Option<(usize, EpochMetrics)> = history
        .iter()
        .cloned()
        .enumerate()
        .fold(None, |acc, (i, m)| match acc {
            Some((_, ref b)) if !is_better(&m, b) => acc,
            _ => Some((i, m)),
        });

    for epoch in start_epoch..cfg.optimizer.epochs {
        // fresh augmented views of the training set, when enabled
        let augmented;
        let train_samples: &[PreparedSample] = if cfg.data.augment {
            let regen: Vec<SampleRecord> = train_records
                .iter()
                .map(|rec| {
                    let mut rng = chacha(augment_seed(cfg.seed, rec.seed, epoch as u64));
                    augment(rec, &mut rng)
                })
                .collect();
            let refs: Vec<&SampleRecord> = regen.iter().collect();
            augmented = prepare_samples(&refs, &grid, &scaler, cfg, num_classes)?;
            &augmented
        } else {
            &base_train
        };

        adam.cfg.lr = cfg.optimizer.lr * cfg.optimizer.lr_decay.powi(epoch as i32);

        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut chacha(mix(&[cfg.seed, 0x5f5f, epoch as u64])));

        for (batch_id, batch) in order.chunks(cfg.optimizer.batch_size).enumerate() {
            let tape = Tape::new();
            let step = adam.step_count();
            let mut probs_parts = Vec::with_capacity(batch.len());
            let mut offset_parts = Vec::with_capacity(batch.len());
            let mut true_cls = Vec::new();
            let mut true_off = Vec::new();
            for &idx in batch {
                let s = &train_samples[idx];
                let mode = Mode::Train {
                    seed: mix(&[cfg.seed, s.uid]),
                    step,
                };
                let out = detector.forward(&tape, &s.image, mode)?;
                probs_parts.push(out.class_probs);
                offset_parts.push(out.offsets);
                true_cls.extend_from_slice(&s.class_onehot);
                true_off.extend_from_slice(&s.offsets);
            }
            let y_pred_cls = tape.concat_rows(&probs_parts)?;
            let y_pred_off = tape.concat_rows(&offset_parts)?;
            let rows = y_pred_cls.shape()[0];
            let y_true_cls = Tensor::new(vec![rows, num_classes], true_cls)?;
            let y_true_off = Tensor::new(vec![rows, 4], true_off)?;
            let (total, report) =
                combined_loss(&tape, &y_true_cls, &y_pred_cls, &y_true_off, &y_pred_off, &loss_cfg)?;
            if !report.total.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_id} (lr {}): cce {}, mse {}",
                    cfg.optimizer.lr, report.cce, report.mse
                )));
            }
            tape.backward(&total)?;
            adam.step(&params)?;
        }

        let train_m = eval_split(&detector, train_samples, &grid, &scaler, cfg, num_classes)?;
        let val_m = eval_split(&detector, &val_samples, &grid, &scaler, cfg, num_classes)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: train_m.loss,
            train_cce: train_m.cce,
            train_mse: train_m.mse,
            val_loss: val_m.loss,
            val_cce: val_m.cce,
            val_mse: val_m.mse,
            train_accuracy: train_m.accuracy,
            val_accuracy: val_m.accuracy,
            train_mae: train_m.mae,
            val_mae: val_m.mae,
            train_mean_iou: train_m.mean_iou,
            val_mean_iou: val_m.mean_iou,
        };
        history.push(metrics.clone());

        let improved = match &best {
            Some((_, b)) => is_better(&metrics, b),
            None => true,
        };
        if improved {
            best = Some((history.len() - 1, metrics.clone()));
            Checkpoint::capture(cfg, &detector, &scaler, epoch + 1, &history, None).save(&best_path)?;
        }
    }

    Checkpoint::capture(cfg, &detector, &scaler, cfg.optimizer.epochs, &history, Some(&adam))
        .save(&final_path)?;
    let history_csv = write_history_artifacts(&history, &out_dir)?;

    let best_epoch = best.map(|(i, _)| history[i].epoch).unwrap_or(0);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        history_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_split;

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 3;
        cfg.output_dir = dir.to_path_buf();
        cfg.model.image_size = 32;
        cfg.model.patch_size = 8;
        cfg.model.embed_dim = 16;
        cfg.model.num_heads = 2;
        cfg.model.num_layers = 1;
        cfg.model.head.cnn_channels = vec![8, 8];
        cfg.model.head.mlp_hidden = vec![32];
        cfg.anchors.stride = 16;
        cfg.anchors.scales = vec![10.0, 18.0];
        cfg.anchors.ratios = vec![1.0];
        cfg.optimizer.epochs = 1;
        cfg.optimizer.batch_size = 4;
        cfg.data.generator.train = 8;
        cfg.data.generator.val = 2;
        cfg.data.generator.test = 0;
        cfg
    }

    fn tiny_dataset(cfg: &RunConfig) -> Dataset {
        let gen = cfg.gen_config();
        let mut records = generate_split(&gen, Split::Train, cfg.data.generator.train).unwrap();
        records.extend(generate_split(&gen, Split::Val, cfg.data.generator.val).unwrap());
        Dataset {
            classes: gen.classes.clone(),
            records,
        }
    }

    #[test]
    fn one_epoch_smoke_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let ds = tiny_dataset(&cfg);
        let outcome = train(&cfg, &ds, None).unwrap();
        assert_eq!(outcome.history.len(), 1);
        assert!(outcome.final_checkpoint.exists());
        assert!(outcome.best_checkpoint.exists());
        assert!(outcome.history_csv.exists());
        assert!(dir.path().join("loss.svg").exists());
        let m = &outcome.history[0];
        assert!(m.train_loss.is_finite());
        assert!(m.val_loss.is_finite());
    }

    #[test]
    fn determinism_identical_runs_identical_history() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg_a = tiny_cfg(dir_a.path());
        cfg_a.optimizer.epochs = 2;
        let mut cfg_b = tiny_cfg(dir_b.path());
        cfg_b.optimizer.epochs = 2;
        let ds = tiny_dataset(&cfg_a);
        let out_a = train(&cfg_a, &ds, None).unwrap();
        let out_b = train(&cfg_b, &ds, None).unwrap();
        assert_eq!(
            history_csv_string(&out_a.history),
            history_csv_string(&out_b.history)
        );
    }

    #[test]
    fn class_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let mut ds = tiny_dataset(&cfg);
        ds.classes = vec!["scratch".into()];
        assert!(matches!(train(&cfg, &ds, None), Err(Error::Config(_))));
    }
}
