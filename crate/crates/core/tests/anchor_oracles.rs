//! Anchor-engine oracle equivalence and roundtrip laws: rasterized IoU,
//! brute-force assignment, quadratic NMS, encode/decode and scaler
//! roundtrips, plus property tests for the module invariants.

use proptest::prelude::*;
use rand::Rng;

use defectvit_core::anchors::{
    assign_states, build_anchor_grid, decode_offsets, encode_offsets, iou, nms, AnchorGrid, BBox,
    MinMaxScaler, ScoredBox,
};
use defectvit_core::rng::chacha;
use defectvit_oracle::{brute_force_assign, nms_reference, raster_iou};

fn random_box(rng: &mut rand_chacha::ChaCha8Rng, max: f64) -> BBox {
    let x1 = rng.gen_range(0.0..max - 2.0);
    let y1 = rng.gen_range(0.0..max - 2.0);
    let x2 = rng.gen_range(x1 + 1.0..max);
    let y2 = rng.gen_range(y1 + 1.0..max);
    BBox::new(x1, y1, x2, y2)
}

fn random_int_box(rng: &mut rand_chacha::ChaCha8Rng, max: i64) -> BBox {
    let x1 = rng.gen_range(0..max - 1);
    let y1 = rng.gen_range(0..max - 1);
    let x2 = rng.gen_range(x1 + 1..max);
    let y2 = rng.gen_range(y1 + 1..max);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

#[test]
fn iou_matches_rasterization_on_integer_boxes() {
    let mut rng = chacha(1001);
    for _ in 0..500 {
        let a = random_int_box(&mut rng, 24);
        let b = random_int_box(&mut rng, 24);
        let analytic = iou(&a, &b);
        let counted = raster_iou(&a, &b);
        assert!(
            (analytic - counted).abs() < 1e-6,
            "analytic {analytic} vs raster {counted} for {a:?} {b:?}"
        );
    }
}

#[test]
fn assignment_matches_brute_force_on_random_instances() {
    // 1000 random instances: random anchors (as a degenerate grid) and GTs
    let mut rng = chacha(2002);
    for trial in 0..1000 {
        let num_anchors = 50;
        let num_gts = rng.gen_range(0..=5usize);
        let anchors: Vec<BBox> = (0..num_anchors).map(|_| random_box(&mut rng, 64.0)).collect();
        let gts: Vec<BBox> = (0..num_gts)
            .map(|_| {
                let mut b = random_box(&mut rng, 64.0);
                b.class_id = Some(0);
                b
            })
            .collect();
        let grid = AnchorGrid {
            anchors: anchors.clone(),
            image_size: 64,
            grid_stride: 0,
            scales: vec![],
            aspect_ratios: vec![],
        };
        let got = assign_states(&grid, &gts, 0.6, 0.3).unwrap();
        let expected = brute_force_assign(&anchors, &gts, 0.6, 0.3);
        assert_eq!(got, expected, "trial {trial} with {num_gts} gts");
    }
}

#[test]
fn assignment_states_partition_and_offsets_zero_iff_unassigned() {
    let grid = build_anchor_grid(64, 16, &[12.0, 24.0, 40.0], &[0.5, 1.0, 2.0]).unwrap();
    let scaler = MinMaxScaler {
        min: [-2.0; 4],
        max: [2.0; 4],
    };
    let mut rng = chacha(3003);
    for _ in 0..100 {
        let gts: Vec<BBox> = (0..rng.gen_range(1..=4usize))
            .map(|_| {
                let mut b = random_box(&mut rng, 64.0);
                b.class_id = Some(rng.gen_range(0..3));
                b
            })
            .collect();
        let targets =
            defectvit_core::anchors::assign_targets(&grid, &gts, 0.6, 0.3, 4, &scaler).unwrap();
        assert_eq!(targets.assignment_state.len(), grid.len());
        for (i, state) in targets.assignment_state.iter().enumerate() {
            let row = &targets.class_onehot[i * 4..(i + 1) * 4];
            assert_eq!(row.iter().sum::<f32>(), 1.0);
            let off = &targets.offsets[i * 4..(i + 1) * 4];
            let all_zero = off.iter().all(|&v| v == 0.0);
            match state {
                defectvit_core::anchors::AnchorState::Assigned { .. } => {
                    assert_eq!(row[3], 0.0, "assigned anchor must not be background");
                    assert!(!all_zero, "assigned anchor {i} has all-zero offsets");
                }
                _ => {
                    assert_eq!(row[3], 1.0);
                    assert!(all_zero, "unassigned anchor {i} has nonzero offsets");
                }
            }
        }
    }
}

#[test]
fn nms_matches_quadratic_reference() {
    let mut rng = chacha(4004);
    for trial in 0..1000 {
        let n = rng.gen_range(1..=64usize);
        let boxes: Vec<ScoredBox> = (0..n)
            .map(|_| ScoredBox {
                bbox: random_box(&mut rng, 48.0),
                class_id: rng.gen_range(0..3),
                score: (rng.gen_range(0..=20) as f64) / 20.0, // duplicate scores on purpose
            })
            .collect();
        let got = nms(&boxes, 0.5, 0.25);
        let expected = nms_reference(&boxes, 0.5, 0.25);
        assert_eq!(got, expected, "trial {trial} with {n} boxes");
    }
}

#[test]
fn nms_is_idempotent() {
    let mut rng = chacha(5005);
    for _ in 0..200 {
        let n = rng.gen_range(1..=32usize);
        let boxes: Vec<ScoredBox> = (0..n)
            .map(|_| ScoredBox {
                bbox: random_box(&mut rng, 48.0),
                class_id: rng.gen_range(0..2),
                score: rng.gen_range(0.0..1.0),
            })
            .collect();
        let once = nms(&boxes, 0.45, 0.2);
        let twice = nms(&once, 0.45, 0.2);
        assert_eq!(once, twice);
    }
}

#[test]
fn encode_decode_roundtrip_within_1e9() {
    let mut rng = chacha(6006);
    for _ in 0..10_000 {
        let anchor = random_box(&mut rng, 64.0);
        let gt = random_box(&mut rng, 64.0);
        let off = encode_offsets(&anchor, &gt);
        let back = decode_offsets(&anchor, &off);
        for (a, b) in [
            (back.x1, gt.x1),
            (back.y1, gt.y1),
            (back.x2, gt.x2),
            (back.y2, gt.y2),
        ] {
            assert!((a - b).abs() < 1e-9, "roundtrip drift {a} vs {b}");
        }
    }
}

#[test]
fn scaler_roundtrip_and_full_pipeline() {
    let mut rng = chacha(7007);
    // fit on a realistic population of offsets
    let mut population = Vec::new();
    for _ in 0..500 {
        let anchor = random_box(&mut rng, 64.0);
        let gt = random_box(&mut rng, 64.0);
        population.push(encode_offsets(&anchor, &gt));
    }
    let scaler = MinMaxScaler::fit(&population).unwrap();
    // apply/invert roundtrip within 1e-6 for in-range values
    for row in &population {
        let back = scaler.invert(&scaler.apply(row));
        for ch in 0..4 {
            assert!((back[ch] - row[ch]).abs() < 1e-6);
        }
    }
    // decode(anchor, invert(apply(encode(anchor, gt)))) == gt within 1e-5
    for _ in 0..2_000 {
        let anchor = random_box(&mut rng, 64.0);
        let gt = random_box(&mut rng, 64.0);
        let raw = encode_offsets(&anchor, &gt);
        if raw
            .iter()
            .enumerate()
            .any(|(ch, v)| *v < scaler.min[ch] || *v > scaler.max[ch])
        {
            continue; // out-of-range offsets clamp; the law is for in-range
        }
        let back = decode_offsets(&anchor, &scaler.invert(&scaler.apply(&raw)));
        for (a, b) in [
            (back.x1, gt.x1),
            (back.y1, gt.y1),
            (back.x2, gt.x2),
            (back.y2, gt.y2),
        ] {
            assert!((a - b).abs() < 1e-5, "pipeline drift {a} vs {b}");
        }
    }
}

proptest! {
    #[test]
    fn iou_symmetry_bounds_and_identity(
        ax1 in 0.0f64..60.0, ay1 in 0.0f64..60.0, aw in 0.5f64..20.0, ah in 0.5f64..20.0,
        bx1 in 0.0f64..60.0, by1 in 0.0f64..60.0, bw in 0.5f64..20.0, bh in 0.5f64..20.0,
    ) {
        let a = BBox::new(ax1, ay1, ax1 + aw, ay1 + ah);
        let b = BBox::new(bx1, by1, bx1 + bw, by1 + bh);
        let ab = iou(&a, &b);
        let ba = iou(&b, &a);
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encode_is_translation_invariant(
        ax in 0.0f64..40.0, ay in 0.0f64..40.0, aw in 1.0f64..20.0, ah in 1.0f64..20.0,
        gx in 0.0f64..40.0, gy in 0.0f64..40.0, gw in 1.0f64..20.0, gh in 1.0f64..20.0,
        tx in -15.0f64..15.0, ty in -15.0f64..15.0,
    ) {
        let anchor = BBox::new(ax, ay, ax + aw, ay + ah);
        let gt = BBox::new(gx, gy, gx + gw, gy + gh);
        let shifted_anchor = BBox::new(ax + tx, ay + ty, ax + aw + tx, ay + ah + ty);
        let shifted_gt = BBox::new(gx + tx, gy + ty, gx + gw + tx, gy + gh + ty);
        let a = encode_offsets(&anchor, &gt);
        let b = encode_offsets(&shifted_anchor, &shifted_gt);
        for ch in 0..4 {
            prop_assert!((a[ch] - b[ch]).abs() < 1e-9);
        }
    }
}
