//! Whole-split evaluation: runs the prediction path on every sample,
//! aggregates anchor-level accuracy plus box-level MAE / mean-IoU under
//! greedy matching, and writes `report.json` / `report.csv`.

use std::path::{Path, PathBuf};

use crate::anchors::{assign_targets, AnchorGrid, MinMaxScaler};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{accuracy_counts, match_predictions, mean_iou, modified_mae, ClassCounts, EvalReport};
use crate::model::{boxes_from_output, Detector, PredictParams};
use crate::synth::{preprocess, SampleRecord};
use crate::tensor::{Mode, Tape};

/// Minimum IoU for a prediction to match a ground truth in MAE / mean-IoU.
pub const MATCH_IOU_FLOOR: f64 = 0.3;

pub fn evaluate_records(
    detector: &Detector,
    grid: &AnchorGrid,
    scaler: &MinMaxScaler,
    config: &RunConfig,
    classes: &[String],
    records: &[&SampleRecord],
) -> Result<EvalReport> {
    let num_classes = classes.len() + 1;
    let predict_params: PredictParams = config.predict_params();
    let image_size = config.model.image_size;

    let mut report = EvalReport {
        samples: records.len(),
        ..Default::default()
    };
    for name in classes {
        report.per_class_counts.insert(name.clone(), ClassCounts::default());
    }
    let mut pairs = Vec::new();

    for record in records {
        let (image, gts) = preprocess(record, image_size)?;
        let targets = assign_targets(
            grid,
            &gts,
            config.anchors.upper_iou,
            config.anchors.lower_iou,
            num_classes,
            scaler,
        )?;
        let tape = Tape::new();
        let out = detector.forward(&tape, &image, Mode::Eval)?;
        let probs = out.class_probs.to_vec();
        let offsets = out.offsets.to_vec();

        let (correct, total) = accuracy_counts(&targets.class_onehot, &probs, num_classes);
        report.accuracy_correct += correct;
        report.accuracy_total += total;

        let (boxes, diag) = boxes_from_output(&probs, &offsets, num_classes, grid, scaler, &predict_params);
        report.invalid_box_drops += diag.invalid_boxes;

        for gt in &gts {
            if let Some(cid) = gt.class_id {
                if let Some(c) = report.per_class_counts.get_mut(&classes[cid]) {
                    c.ground_truths += 1;
                }
            }
        }
        for b in &boxes {
            if let Some(c) = report.per_class_counts.get_mut(&classes[b.class_id]) {
                c.predictions += 1;
            }
        }

        let matching = match_predictions(&gts, &boxes, MATCH_IOU_FLOOR);
        report.matched_pairs += matching.pairs.len();
        report.unmatched_ground_truths += matching.unmatched_gts.len();
        report.unmatched_predictions += matching.unmatched_preds.len();
        for pair in &matching.pairs {
            let gt = gts[pair.gt_index];
            let pred = boxes[pair.pred_index];
            pairs.push((gt, pred.bbox));
            if let Some(cid) = gt.class_id {
                if let Some(c) = report.per_class_counts.get_mut(&classes[cid]) {
                    c.matched += 1;
                    if pred.class_id == cid {
                        c.class_correct += 1;
                    }
                }
            }
        }
    }

    report.accuracy = if report.accuracy_total > 0 {
        Some(report.accuracy_correct as f64 / report.accuracy_total as f64)
    } else {
        None
    };
    report.mae = modified_mae(&pairs);
    report.mean_iou = mean_iou(&pairs);
    Ok(report)
}

fn opt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "undefined".to_string(),
    }
}

/// Writes `report.json` and `report.csv` into `dir`; returns the two paths.
pub fn write_report_files(report: &EvalReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let json_path = dir.join("report.json");
    let csv_path = dir.join("report.csv");

    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::parse(json_path.display().to_string(), e.to_string()))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;

    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("samples,{}\n", report.samples));
    csv.push_str(&format!("accuracy,{}\n", opt_metric(report.accuracy)));
    csv.push_str(&format!("accuracy_correct,{}\n", report.accuracy_correct));
    csv.push_str(&format!("accuracy_total,{}\n", report.accuracy_total));
    csv.push_str(&format!("mae,{}\n", opt_metric(report.mae)));
    csv.push_str(&format!("mean_iou,{}\n", opt_metric(report.mean_iou)));
    csv.push_str(&format!("matched_pairs,{}\n", report.matched_pairs));
    csv.push_str(&format!("unmatched_ground_truths,{}\n", report.unmatched_ground_truths));
    csv.push_str(&format!("unmatched_predictions,{}\n", report.unmatched_predictions));
    csv.push_str(&format!("invalid_box_drops,{}\n", report.invalid_box_drops));
    csv.push_str("class,ground_truths,predictions,matched,class_correct\n");
    for (name, c) in &report.per_class_counts {
        csv.push_str(&format!(
            "{name},{},{},{},{}\n",
            c.ground_truths, c.predictions, c.matched, c.class_correct
        ));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    Ok((json_path, csv_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::build_anchor_grid;
    use crate::model::EncoderKind;
    use crate::synth::{generate_split, GenConfig, Split};

    #[test]
    fn untrained_eval_produces_consistent_report() {
        let mut config = RunConfig::default();
        config.model.image_size = 32;
        config.model.patch_size = 8;
        config.anchors.stride = 16;
        config.anchors.scales = vec![12.0, 20.0];
        config.anchors.ratios = vec![1.0];
        config.data.generator.train = 0;
        let gen = GenConfig {
            image_size: 32,
            classes: config.data.generator.classes.clone(),
            defects_min: 1,
            defects_max: 2,
            overlap_allowed: true,
            noise_level: 0.03,
            seed: 5,
        };
        let records = generate_split(&gen, Split::Test, 4).unwrap();
        let refs: Vec<&SampleRecord> = records.iter().collect();
        let grid = build_anchor_grid(32, 16, &[12.0, 20.0], &[1.0]).unwrap();
        let det = Detector::init(
            config.vit_config(),
            config.head_config(grid.len()),
            EncoderKind::Vit,
            9,
        )
        .unwrap();
        let scaler = MinMaxScaler::fit(&[[-1.0; 4], [1.0; 4]]).unwrap();
        let report = evaluate_records(&det, &grid, &scaler, &config, &gen.classes, &refs).unwrap();
        assert_eq!(report.samples, 4);
        assert!(report.accuracy_total > 0);
        let acc = report.accuracy.unwrap();
        assert!((acc - report.accuracy_correct as f64 / report.accuracy_total as f64).abs() < 1e-15);

        let dir = tempfile::tempdir().unwrap();
        let (json_path, csv_path) = write_report_files(&report, dir.path()).unwrap();
        let parsed: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed.samples, report.samples);
        assert_eq!(parsed.accuracy, report.accuracy);
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert!(csv.contains("accuracy,"));
        assert!(csv.lines().count() >= 11);
    }

    #[test]
    fn empty_split_reports_undefined() {
        let config = RunConfig::default();
        let grid = config.build_grid().unwrap();
        let det = Detector::init(
            config.vit_config(),
            config.head_config(grid.len()),
            EncoderKind::Vit,
            1,
        )
        .unwrap();
        let scaler = MinMaxScaler::fit(&[[-1.0; 4], [1.0; 4]]).unwrap();
        let report =
            evaluate_records(&det, &grid, &scaler, &config, &config.data.generator.classes, &[]).unwrap();
        assert_eq!(report.samples, 0);
        assert_eq!(report.accuracy, None);
        assert_eq!(report.mae, None);
        assert_eq!(report.mean_iou, None);
        let dir = tempfile::tempdir().unwrap();
        let (_, csv_path) = write_report_files(&report, dir.path()).unwrap();
        let csv = std::fs::read_to_string(csv_path).unwrap();
        assert!(csv.contains("accuracy,undefined"));
    }
}
