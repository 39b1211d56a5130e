//! Loss and metric oracle equivalence, and the background-invariance
//! property that is the entire point of the modified losses: appending
//! background-true anchors with arbitrary predictions changes nothing,
//! bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use defectvit_core::anchors::BBox;
use defectvit_core::loss::{modified_cce, modified_mse};
use defectvit_core::metrics::{mean_iou, modified_accuracy, modified_mae};
use defectvit_core::rng::chacha;
use defectvit_core::tensor::{Tape, Tensor};
use defectvit_oracle::{loop_accuracy, loop_mae, loop_mean_iou, refmath};

fn random_onehot_rows(rng: &mut ChaCha8Rng, rows: usize, c: usize, background_frac: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * c];
    for r in 0..rows {
        let class = if rng.gen::<f32>() < background_frac {
            c - 1
        } else {
            rng.gen_range(0..c - 1)
        };
        out[r * c + class] = 1.0;
    }
    out
}

fn random_prob_rows(rng: &mut ChaCha8Rng, rows: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * c];
    for r in 0..rows {
        let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p = refmath::softmax_lastdim(&logits, c);
        for m in 0..c {
            out[r * c + m] = p[m] as f32;
        }
    }
    out
}

#[test]
fn cce_matches_f64_loop_reference_exactly() {
    let mut rng = chacha(11);
    for _ in 0..200 {
        let rows = rng.gen_range(1..40usize);
        let c = rng.gen_range(2..6usize);
        let y_true = random_onehot_rows(&mut rng, rows, c, 0.6);
        let y_pred = random_prob_rows(&mut rng, rows, c);
        let tape = Tape::new();
        let tt = Tensor::new(vec![rows, c], y_true.clone()).unwrap();
        let tp = Tensor::new(vec![rows, c], y_pred.clone()).unwrap();
        let got = modified_cce(&tape, &tt, &tp).unwrap().item();
        let t64: Vec<f64> = y_true.iter().map(|&v| v as f64).collect();
        let p64: Vec<f64> = y_pred.iter().map(|&v| v as f64).collect();
        let expected = refmath::modified_cce(&t64, &p64, c) as f32;
        assert_eq!(got, expected, "rows {rows} c {c}");
    }
}

#[test]
fn mse_matches_f64_loop_reference_exactly() {
    let mut rng = chacha(12);
    for _ in 0..200 {
        let rows = rng.gen_range(1..40usize);
        let mut y_true = vec![0.0f32; rows * 4];
        for r in 0..rows {
            if rng.gen::<f32>() < 0.5 {
                for m in 0..4 {
                    y_true[r * 4 + m] = rng.gen_range(0.05..0.95);
                }
            }
        }
        let y_pred: Vec<f32> = (0..rows * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let tape = Tape::new();
        let tt = Tensor::new(vec![rows, 4], y_true.clone()).unwrap();
        let tp = Tensor::new(vec![rows, 4], y_pred.clone()).unwrap();
        let got = modified_mse(&tape, &tt, &tp).unwrap().item();
        let t64: Vec<f64> = y_true.iter().map(|&v| v as f64).collect();
        let p64: Vec<f64> = y_pred.iter().map(|&v| v as f64).collect();
        let expected = refmath::modified_mse(&t64, &p64, 4) as f32;
        assert_eq!(got, expected);
    }
}

#[test]
fn mse_reduces_to_plain_mse_when_every_row_matched() {
    let mut rng = chacha(13);
    let rows = 16;
    let y_true: Vec<f32> = (0..rows * 4).map(|_| rng.gen_range(0.05..0.95)).collect();
    let y_pred: Vec<f32> = (0..rows * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
    let tape = Tape::new();
    let tt = Tensor::new(vec![rows, 4], y_true.clone()).unwrap();
    let tp = Tensor::new(vec![rows, 4], y_pred.clone()).unwrap();
    let got = modified_mse(&tape, &tt, &tp).unwrap().item();
    // plain row-mean of squared error sums, same accumulation order
    let mut plain = 0.0f64;
    for r in 0..rows {
        for m in 0..4 {
            let d = y_true[r * 4 + m] as f64 - y_pred[r * 4 + m] as f64;
            plain += d * d;
        }
    }
    plain /= rows as f64;
    assert_eq!(got, plain as f32);
}

#[test]
fn background_invariance_bit_exact_200_trials() {
    let mut rng = chacha(14);
    for trial in 0..200 {
        let rows = rng.gen_range(1..30usize);
        let c = rng.gen_range(2..6usize);
        let y_true = random_onehot_rows(&mut rng, rows, c, 0.5);
        let y_pred = random_prob_rows(&mut rng, rows, c);
        let mut off_true = vec![0.0f32; rows * 4];
        for r in 0..rows {
            if y_true[r * c + (c - 1)] == 0.0 {
                for m in 0..4 {
                    off_true[r * 4 + m] = rng.gen_range(0.05..0.95);
                }
            }
        }
        let off_pred: Vec<f32> = (0..rows * 4).map(|_| rng.gen_range(0.0..1.0)).collect();

        // baseline values
        let tape = Tape::new();
        let base_cce = modified_cce(
            &tape,
            &Tensor::new(vec![rows, c], y_true.clone()).unwrap(),
            &Tensor::new(vec![rows, c], y_pred.clone()).unwrap(),
        )
        .unwrap()
        .item();
        let base_mse = modified_mse(
            &tape,
            &Tensor::new(vec![rows, 4], off_true.clone()).unwrap(),
            &Tensor::new(vec![rows, 4], off_pred.clone()).unwrap(),
        )
        .unwrap()
        .item();
        let base_acc = modified_accuracy(&y_true, &y_pred, c);

        // append background rows with arbitrary predictions
        let extra = rng.gen_range(1..20usize);
        let mut y_true2 = y_true.clone();
        let mut y_pred2 = y_pred.clone();
        let mut off_true2 = off_true.clone();
        let mut off_pred2 = off_pred.clone();
        for _ in 0..extra {
            let mut row = vec![0.0f32; c];
            row[c - 1] = 1.0;
            y_true2.extend(row);
            y_pred2.extend(random_prob_rows(&mut rng, 1, c));
            off_true2.extend([0.0f32; 4]);
            off_pred2.extend((0..4).map(|_| rng.gen_range(0.0f32..1.0)));
        }
        let total = rows + extra;
        let cce2 = modified_cce(
            &tape,
            &Tensor::new(vec![total, c], y_true2.clone()).unwrap(),
            &Tensor::new(vec![total, c], y_pred2.clone()).unwrap(),
        )
        .unwrap()
        .item();
        let mse2 = modified_mse(
            &tape,
            &Tensor::new(vec![total, 4], off_true2).unwrap(),
            &Tensor::new(vec![total, 4], off_pred2).unwrap(),
        )
        .unwrap()
        .item();
        let acc2 = modified_accuracy(&y_true2, &y_pred2, c);

        assert_eq!(base_cce.to_bits(), cce2.to_bits(), "cce trial {trial}");
        assert_eq!(base_mse.to_bits(), mse2.to_bits(), "mse trial {trial}");
        assert_eq!(base_acc, acc2, "accuracy trial {trial}");
    }
}

#[test]
fn accuracy_matches_loop_oracle_on_100_instances() {
    let mut rng = chacha(15);
    for _ in 0..100 {
        let rows = rng.gen_range(1..50usize);
        let c = rng.gen_range(2..6usize);
        let y_true = random_onehot_rows(&mut rng, rows, c, 0.5);
        let y_pred = random_prob_rows(&mut rng, rows, c);
        assert_eq!(
            modified_accuracy(&y_true, &y_pred, c),
            loop_accuracy(&y_true, &y_pred, c)
        );
    }
}

#[test]
fn mae_and_mean_iou_match_loop_oracles() {
    let mut rng = chacha(16);
    for _ in 0..100 {
        let n = rng.gen_range(0..20usize);
        let pairs: Vec<(BBox, BBox)> = (0..n)
            .map(|_| {
                let mk = |rng: &mut ChaCha8Rng| {
                    let x1: f64 = rng.gen_range(0.0..50.0);
                    let y1: f64 = rng.gen_range(0.0..50.0);
                    let w: f64 = rng.gen_range(1.0..14.0);
                    let h: f64 = rng.gen_range(1.0..14.0);
                    BBox::new(x1, y1, x1 + w, y1 + h)
                };
                (mk(&mut rng), mk(&mut rng))
            })
            .collect();
        assert_eq!(modified_mae(&pairs), loop_mae(&pairs));
        assert_eq!(mean_iou(&pairs), loop_mean_iou(&pairs));
    }
}

#[test]
fn loss_gradients_vanish_exactly_on_background_rows() {
    let mut rng = chacha(17);
    for _ in 0..50 {
        let rows = rng.gen_range(2..20usize);
        let c = 4;
        let y_true = random_onehot_rows(&mut rng, rows, c, 0.5);
        let y_pred = random_prob_rows(&mut rng, rows, c);
        let tape = Tape::new();
        let tt = Tensor::new(vec![rows, c], y_true.clone()).unwrap();
        let tp = Tensor::param(vec![rows, c], y_pred).unwrap();
        let loss = modified_cce(&tape, &tt, &tp).unwrap();
        tape.backward(&loss).unwrap();
        let grad = tp.grad().unwrap();
        for r in 0..rows {
            if y_true[r * c + (c - 1)] == 1.0 {
                for m in 0..c {
                    assert_eq!(grad[r * c + m], 0.0, "background row {r} has gradient");
                }
            }
        }
    }
}
