//! Residual box encoding and anchor-to-ground-truth assignment.

use std::f64::consts::{FRAC_PI_2, PI};

use super::{normalize_angle, rotated_bev_iou, AnchorConfig, AnchorGrid, Box3, GroundTruthBox};
use crate::error::Result;

/// Wraps to [−π/2, π/2).
fn wrap_half(a: f64) -> f64 {
    (a + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2
}

/// (Δx, Δy, Δz, Δw, Δl, Δh, Δθ). Δθ is taken modulo π; the heading half is
/// carried by [`direction_bin`].
pub fn encode_box(anchor: &Box3, gt: &Box3) -> [f64; 7] {
    let d = anchor.size[0].hypot(anchor.size[1]);
    [
        (gt.center[0] - anchor.center[0]) / d,
        (gt.center[1] - anchor.center[1]) / d,
        (gt.center[2] - anchor.center[2]) / anchor.size[2],
        (gt.size[0] / anchor.size[0]).ln(),
        (gt.size[1] / anchor.size[1]).ln(),
        (gt.size[2] / anchor.size[2]).ln(),
        wrap_half(gt.yaw - anchor.yaw),
    ]
}

/// 1 when the heading lies in [0, π), else 0.
pub fn direction_bin(yaw: f64) -> usize {
    let y = normalize_angle(yaw);
    usize::from((0.0..PI).contains(&y))
}

pub fn decode_box(anchor: &Box3, r: &[f64; 7], dir: usize) -> Box3 {
    let d = anchor.size[0].hypot(anchor.size[1]);
    let base = (anchor.yaw + r[6]).rem_euclid(PI);
    let yaw = normalize_angle(if dir == 1 { base } else { base - PI });
    Box3 {
        center: [
            anchor.center[0] + r[0] * d,
            anchor.center[1] + r[1] * d,
            anchor.center[2] + r[2] * anchor.size[2],
        ],
        size: [anchor.size[0] * r[3].exp(), anchor.size[1] * r[4].exp(), anchor.size[2] * r[5].exp()],
        yaw,
    }
}

/// Training targets laid out like the head's prediction maps: anchor-major
/// per type, channel-major for multi-channel maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// 1 for positives, 0 otherwise; length A·h·w.
    pub labels: Vec<f64>,
    /// 1 for positives and negatives, 0 for ignored anchors.
    pub cls_weight: Vec<f64>,
    /// 7A·h·w residuals, nonzero only at positives.
    pub boxes: Vec<f64>,
    /// 2A·h·w.
    pub velocity: Vec<f64>,
    /// Direction bin per anchor.
    pub direction: Vec<usize>,
    pub positive: Vec<bool>,
    pub num_pos: usize,
    /// Ground-truth index matched to each positive anchor.
    pub matched: Vec<Option<usize>>,
}

impl Targets {
    pub fn num_neg(&self) -> usize {
        self.cls_weight.iter().zip(&self.positive).filter(|(&w, &p)| w > 0.0 && !p).count()
    }
}

/// Anchor is positive at IoU ≥ pos or when it is some gt's best anchor,
/// negative below neg, ignored otherwise. IoU is only taken within a class.
pub fn assign_targets(grid: &AnchorGrid, gts: &[GroundTruthBox], cfg: &AnchorConfig) -> Result<Targets> {
    let n = grid.len();
    let hw = grid.cells();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt: Vec<Option<usize>> = vec![None; n];
    let mut gt_best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gts.len()];
    for (gi, gt) in gts.iter().enumerate() {
        let gb = gt.bbox.bev();
        let reach_gt = gb.w.hypot(gb.l) / 2.0;
        for (ai, a) in grid.anchors.iter().enumerate() {
            if a.class != gt.class {
                continue;
            }
            let ab = a.bbox.bev();
            if (ab.x - gb.x).hypot(ab.y - gb.y) >= reach_gt + ab.w.hypot(ab.l) / 2.0 {
                continue;
            }
            let iou = rotated_bev_iou(&ab, &gb)?;
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                best_gt[ai] = Some(gi);
            }
            if iou > gt_best[gi].0 {
                gt_best[gi] = (iou, ai);
            }
        }
    }
    let mut positive: Vec<bool> = best_iou.iter().map(|&v| v >= cfg.pos_iou).collect();
    let mut matched: Vec<Option<usize>> = (0..n).map(|i| if positive[i] { best_gt[i] } else { None }).collect();
    for (gi, &(iou, ai)) in gt_best.iter().enumerate() {
        if iou > 0.0 {
            positive[ai] = true;
            matched[ai] = Some(gi);
        }
    }
    let mut t = Targets {
        labels: vec![0.0; n],
        cls_weight: vec![0.0; n],
        boxes: vec![0.0; 7 * n],
        velocity: vec![0.0; 2 * n],
        direction: vec![0; n],
        positive,
        num_pos: 0,
        matched,
    };
    for i in 0..n {
        let (a, cell) = (i / hw, i % hw);
        if t.positive[i] {
            let g = &gts[t.matched[i].expect("positive anchors are matched")];
            t.labels[i] = 1.0;
            t.cls_weight[i] = 1.0;
            t.num_pos += 1;
            let r = encode_box(&grid.anchors[i].bbox, &g.bbox);
            for (k, v) in r.iter().enumerate() {
                t.boxes[(a * 7 + k) * hw + cell] = *v;
            }
            for k in 0..2 {
                t.velocity[(a * 2 + k) * hw + cell] = g.velocity[k];
            }
            t.direction[i] = direction_bin(g.bbox.yaw);
        } else if best_iou[i] < cfg.neg_iou {
            t.cls_weight[i] = 1.0;
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::generate_anchors;
    use proptest::prelude::*;

    fn angle_dist(a: f64, b: f64) -> f64 {
        normalize_angle(a - b).abs()
    }

    fn gt(x: f64, y: f64, yaw: f64) -> GroundTruthBox {
        GroundTruthBox {
            bbox: Box3 {
                center: [x, y, -0.9],
                size: [1.9, 4.5, 1.6],
                yaw,
            },
            velocity: [1.5, -0.5],
            class: 0,
        }
    }

    #[test]
    fn gt_on_anchor_has_zero_residual() {
        let cfg = AnchorConfig::car();
        let grid = generate_anchors(&cfg, 4, 4, 4, 0.25, [-2.0, -2.0]);
        // anchor (type 1 = yaw π/2, row 2, col 1)
        let i = 16 + 2 * 4 + 1;
        let a = grid.anchors[i].bbox;
        let g = gt(a.center[0], a.center[1], a.yaw);
        let t = assign_targets(&grid, &[g], &cfg).unwrap();
        assert!(t.positive[i]);
        assert_eq!(t.labels[i], 1.0);
        for k in 0..7 {
            assert_eq!(t.boxes[(7 + k) * 16 + 9], 0.0);
        }
        assert_eq!(t.velocity[(2 + 0) * 16 + 9], 1.5);
        assert_eq!(t.direction[i], 1);
    }

    #[test]
    fn no_gts_means_all_negative() {
        let cfg = AnchorConfig::car();
        let grid = generate_anchors(&cfg, 3, 3, 4, 0.25, [0.0, 0.0]);
        let t = assign_targets(&grid, &[], &cfg).unwrap();
        assert_eq!(t.num_pos, 0);
        assert!(t.cls_weight.iter().all(|&w| w == 1.0));
        assert!(t.labels.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn every_gt_in_range_gets_an_anchor() {
        let cfg = AnchorConfig::car();
        let grid = generate_anchors(&cfg, 12, 12, 4, 0.25, [-6.0, -6.0]);
        let gts = [gt(0.3, 0.7, 0.4), gt(-3.1, 2.2, -2.0), gt(4.4, -4.0, 3.0)];
        let t = assign_targets(&grid, &gts, &cfg).unwrap();
        for gi in 0..gts.len() {
            assert!(t.matched.contains(&Some(gi)));
        }
    }

    #[test]
    fn direction_bins() {
        assert_eq!(direction_bin(0.0), 1);
        assert_eq!(direction_bin(1.0), 1);
        assert_eq!(direction_bin(-0.1), 0);
        assert_eq!(direction_bin(PI), 0);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            ax in -20.0f64..20.0, ay in -20.0f64..20.0, ayaw in prop::sample::select(vec![0.0, FRAC_PI_2]),
            gx in -3.0f64..3.0, gy in -3.0f64..3.0, gz in -1.0f64..1.0,
            gw in 0.3f64..4.0, gl in 0.3f64..8.0, gh in 0.3f64..3.0, gyaw in -3.14159f64..3.14159,
        ) {
            let anchor = Box3 { center: [ax, ay, -0.9], size: [1.9, 4.5, 1.6], yaw: ayaw };
            let g = Box3 { center: [ax + gx, ay + gy, gz], size: [gw, gl, gh], yaw: gyaw };
            let d = decode_box(&anchor, &encode_box(&anchor, &g), direction_bin(gyaw));
            for k in 0..3 {
                prop_assert!((d.center[k] - g.center[k]).abs() <= 1e-6);
                prop_assert!((d.size[k] - g.size[k]).abs() <= 1e-6);
            }
            prop_assert!(angle_dist(d.yaw, g.yaw) <= 1e-6);
            // decode ∘ encode on residuals
            let r = encode_box(&anchor, &g);
            let r2 = encode_box(&anchor, &d);
            for k in 0..7 {
                prop_assert!((r[k] - r2[k]).abs() <= 1e-6);
            }
        }
    }
}
