//! Library results checked against independent reference implementations.

mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdet::anchors::{generate_anchors, LevelSpec};
use voxdet::annotation::{mask_to_boxes, Connectivity};
use voxdet::geometry::{self, Box3, Spacing, VolumeMeta};
use voxdet::io::{decode_boxes, encode_boxes, BoxDocument, BoxRecord};
use voxdet::matching::atss_match;
use voxdet::metrics::{
    self, average_recall, froc, match_detections, size_stratified, DetFlag, EvalConfig, EvalSet, GroundTruth,
    ScanDetections, ScanGroundTruth,
};
use voxdet::nms::{nms_indices, Detection};

fn bx(c: [f64; 6]) -> Box3 {
    Box3::from_corners(c).unwrap()
}

fn eval_set(scans: &[RefScan], spacing: Spacing) -> EvalSet {
    let dets = scans
        .iter()
        .enumerate()
        .map(|(i, s)| ScanDetections {
            scan_id: format!("s{i:03}"),
            detections: s.dets.iter().map(|&(b, sc, l)| Detection::new(b, sc, l).unwrap()).collect(),
        })
        .collect();
    let gts = scans
        .iter()
        .enumerate()
        .map(|(i, s)| ScanGroundTruth {
            scan_id: format!("s{i:03}"),
            spacing,
            boxes: s.gts.iter().map(|&(b, l)| GroundTruth::new(b, l)).collect(),
        })
        .collect();
    EvalSet::new(dets, gts).unwrap()
}

#[test]
fn hand_set_scene_matches_reference_matcher() {
    // gt0 = [0,4)^3, gt1 = [0,4)x[0,4)x[3,7)
    let gt0 = bx([0., 0., 0., 4., 4., 4.]);
    let gt1 = bx([0., 0., 3., 4., 4., 7.]);
    // d0 covers 3/4 of gt0, d1 half of it; d2 is gt1
    let d0 = bx([0., 0., 0., 4., 4., 3.]);
    let d1 = bx([0., 0., 0., 4., 4., 2.]);
    let d2 = gt1;
    assert_eq!(geometry::iou(&d0, &gt0), 0.75);
    let scan = RefScan {
        dets: vec![(d1, 0.8, 1), (d0, 0.9, 1), (d2, 0.7, 1)],
        gts: vec![(gt0, 1), (gt1, 1)],
    };
    let set = eval_set(std::slice::from_ref(&scan), Spacing::isotropic());
    let m = &match_detections(&set, 0.3).unwrap()[0];
    // d0 takes gt0, d1 has nothing left above 0.3, d2 takes gt1
    assert_eq!(m.order, vec![1, 0, 2]);
    assert_eq!(m.flags, vec![DetFlag::Tp(0), DetFlag::Fp, DetFlag::Tp(1)]);
    let reference: Vec<bool> = ref_match(&scan, 0.3).iter().map(|d| d.1).collect();
    assert_eq!(m.flags.iter().map(DetFlag::is_tp).collect::<Vec<_>>(), reference);
}

#[test]
fn truncation_oracle_for_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scans: Vec<RefScan> = (0..4)
        .map(|_| {
            let gts: Vec<_> = (0..6).map(|_| (int_box(&mut rng, 12), 1)).collect();
            let dets = gts
                .iter()
                .map(|&(b, l)| (b, rng.random_range(0.0..1.0), l))
                .collect();
            RefScan { dets, gts }
        })
        .collect();
    let set = eval_set(&scans, Spacing::isotropic());
    let m = match_detections(&set, 0.5).unwrap();
    let per_scan: Vec<_> = scans.iter().map(|s| ref_match(s, 0.5)).collect();
    for max_det in 0..8 {
        assert_eq!(average_recall(&m, max_det).unwrap(), ref_ar(&per_scan, 24, max_det));
    }
}

#[test]
fn two_scan_froc_by_threshold_enumeration() {
    let g = |z: f64| bx([z, 0., 0., z + 2., 2., 2.]);
    let far = bx([20., 20., 20., 21., 21., 21.]);
    let scans = vec![
        RefScan {
            dets: vec![(g(0.), 0.9, 1), (far, 0.8, 1), (g(5.), 0.4, 1)],
            gts: vec![(g(0.), 1), (g(5.), 1)],
        },
        RefScan {
            dets: vec![(far, 0.95, 1), (g(10.), 0.6, 1), (far, 0.3, 1)],
            gts: vec![(g(10.), 1), (g(15.), 1)],
        },
    ];
    let set = eval_set(&scans, Spacing::isotropic());
    let axis = [0.25, 0.5, 1.0, 1.5, 2.0];
    let c = froc(&match_detections(&set, 0.1).unwrap(), &axis).unwrap();
    // by hand: cut 0.95 -> (0.5, 0); 0.9 -> (0.5, .25); 0.8 -> (1, .25);
    // 0.6 -> (1, .5); 0.4 -> (1, .75); 0.3 -> (1.5, .75)
    let hand = [0.0, 0.25, 0.75, 0.75, 0.75];
    let got: Vec<f64> = c.at_fp.iter().map(|p| p.1).collect();
    assert_eq!(got, hand);
    let per_scan: Vec<_> = scans.iter().map(|s| ref_match(s, 0.1)).collect();
    assert_eq!(got, ref_froc(&ref_pool(&per_scan), 4, 2, &axis));
    assert_eq!(c.points.len(), 7);
}

/// Reference for one size group: candidates ordered in-group first, then by
/// IoU, then by index; out-of-group matches are dropped.
fn ref_group_counts(scan: &RefScan, in_group: &[bool], t: f64) -> (usize, usize, usize) {
    let mut order: Vec<usize> = (0..scan.dets.len()).collect();
    order.sort_by(|&a, &b| scan.dets[b].1.total_cmp(&scan.dets[a].1).then(a.cmp(&b)));
    let mut taken = vec![false; scan.gts.len()];
    let (mut tp, mut fp, mut ign) = (0, 0, 0);
    for &di in &order {
        let (b, _, l) = scan.dets[di];
        let mut cands: Vec<(bool, f64, usize)> = scan
            .gts
            .iter()
            .enumerate()
            .filter(|(gi, g)| !taken[*gi] && g.1 == l && geometry::iou(&b, &g.0) >= t)
            .map(|(gi, g)| (in_group[gi], geometry::iou(&b, &g.0), gi))
            .collect();
        cands.sort_by(|x, y| y.0.cmp(&x.0).then(y.1.total_cmp(&x.1)).then(x.2.cmp(&y.2)));
        match cands.first() {
            Some(&(inside, _, gi)) => {
                taken[gi] = true;
                if inside {
                    tp += 1
                } else {
                    ign += 1
                }
            }
            None => fp += 1,
        }
    }
    (tp, fp, ign)
}

#[test]
fn mixed_size_scene_matches_group_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spacing = Spacing::new([5.0, 0.8, 0.8]).unwrap();
    let cm3 = |b: &Box3| spacing.volume_cm3(b);
    let scans: Vec<RefScan> = (0..6)
        .map(|_| {
            let gts: Vec<_> = (0..8).map(|_| (int_box(&mut rng, 40), 1)).collect();
            let mut dets = Vec::new();
            for &(b, l) in &gts {
                if rng.random_bool(0.7) {
                    dets.push((b.translated([1.0, 0.0, 1.0]), rng.random_range(0.0..1.0), l));
                }
            }
            dets.extend((0..3).map(|_| (int_box(&mut rng, 40), rng.random_range(0.0..1.0), 1)));
            RefScan { dets, gts }
        })
        .collect();
    let set = eval_set(&scans, spacing);
    let config = EvalConfig::default();
    let groups = size_stratified(&set, &config).unwrap();
    let edges = [0.0, 1.0, 10.0, 50.0, f64::INFINITY];
    for (gi, g) in groups.iter().enumerate() {
        for (ti, &t) in config.iou_thresholds.iter().enumerate() {
            let (mut tp, mut fp, mut ign) = (0, 0, 0);
            for s in &scans {
                let in_group: Vec<bool> = s
                    .gts
                    .iter()
                    .map(|g| (edges[gi]..edges[gi + 1]).contains(&cm3(&g.0)))
                    .collect();
                let c = ref_group_counts(s, &in_group, t);
                tp += c.0;
                fp += c.1;
                ign += c.2;
            }
            let r = &g.thresholds[ti];
            assert_eq!((r.tp, r.fp, r.ignored), (tp, fp, ign), "group {} iou {t}", g.group.name);
        }
    }
}

#[test]
fn gt_of_half_a_cubic_centimetre_is_in_the_smallest_group() {
    let spacing = Spacing::new([5.0, 1.0, 1.0]).unwrap();
    let b = bx([0., 0., 0., 1., 10., 10.]); // 500 mm³
    assert_eq!(spacing.volume_cm3(&b), 0.5);
    let groups = metrics::size_groups(&metrics::DEFAULT_SIZE_BINS_CM3).unwrap();
    assert_eq!(groups[metrics::size_group_of(&groups, 0.5).unwrap()].name, "<1");
}

#[test]
fn blob_field_matches_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..10 {
        let map = random_label_map(&mut rng, [16, 16, 16], 2, 12, 30);
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let got = mask_to_boxes(&map, conn);
            let want = flood_fill(&map, conn);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                let expect = Box3::from_voxel_range(w.lo, [w.hi[0] + 1, w.hi[1] + 1, w.hi[2] + 1]).unwrap();
                assert_eq!(g.bbox, expect);
                assert_eq!(g.voxels, w.voxels.len());
                assert_eq!(g.label, w.label);
            }
        }
    }
}

#[test]
fn atss_and_nms_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let volume = VolumeMeta::new([6, 12, 12], [1.0; 3]).unwrap();
        let schedule = vec![
            LevelSpec { level: 2, stride: [1, 2, 2], anchor_shapes: vec![[2., 3., 3.], [1., 2., 4.]] },
            LevelSpec { level: 3, stride: [2, 4, 4], anchor_shapes: vec![[3., 6., 6.]] },
        ];
        let grid = generate_anchors(&schedule, &volume).unwrap();
        let gts: Vec<Box3> = (0..rng.random_range(0..5)).map(|_| int_box(&mut rng, 6)).collect();
        let top_k = rng.random_range(1..12);
        assert_eq!(atss_match(&grid, &gts, top_k).unwrap().labels, brute_atss(&grid, &gts, top_k));

        let dets: Vec<Detection> = (0..rng.random_range(0..20))
            .map(|_| {
                let score = (rng.random_range(0..10) as f64) / 10.0;
                Detection::new(int_box(&mut rng, 8), score, rng.random_range(0..2)).unwrap()
            })
            .collect();
        let t = rng.random_range(0.05..0.9);
        let cap = rng.random_range(1..25);
        assert_eq!(nms_indices(&dets, t, cap).unwrap(), brute_nms(&dets, t, cap));
    }
}

#[test]
fn thousand_boxes_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let boxes: Vec<BoxRecord> = (0..1000)
        .map(|_| {
            let lo: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1e3..1e3));
            let hi: [f64; 3] = std::array::from_fn(|i| lo[i] + rng.random_range(1e-9..1e3));
            BoxRecord {
                bbox: Box3::new(lo, hi).unwrap(),
                label: rng.random_range(-5..5),
                score: rng.random_bool(0.5).then(|| rng.random::<f64>()),
            }
        })
        .collect();
    let doc = BoxDocument {
        scan_id: "r".into(),
        spacing: Spacing::new([rng.random_range(0.1..5.0), 0.3, 0.3]).unwrap(),
        boxes,
    };
    let text = encode_boxes(std::slice::from_ref(&doc));
    let back = decode_boxes(&text, std::path::Path::new("mem")).unwrap();
    for (a, b) in back[0].boxes.iter().zip(&doc.boxes) {
        assert_eq!(a.bbox.corners().map(f64::to_bits), b.bbox.corners().map(f64::to_bits));
        assert_eq!(a.score.map(f64::to_bits), b.score.map(f64::to_bits));
    }
    assert_eq!(back, vec![doc]);
}
