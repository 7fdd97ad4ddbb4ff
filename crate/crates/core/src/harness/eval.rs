//! Center-distance average precision.

use crate::head::{Detection, GroundTruthBox};

/// BEV center-distance thresholds, meters.
pub const DISTANCES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Detections and ground truth of one frame, in the same coordinates.
#[derive(Clone, Debug, Default)]
pub struct FrameResult {
    pub detections: Vec<Detection>,
    pub gts: Vec<GroundTruthBox>,
}

/// AP per distance threshold for one class, plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ApRow {
    pub class: usize,
    pub ap: Vec<(f64, f64)>,
    pub mean: f64,
}

impl ApRow {
    pub fn at(&self, distance: f64) -> Option<f64> {
        self.ap.iter().find(|(d, _)| *d == distance).map(|&(_, a)| a)
    }
}

fn dist(d: &Detection, g: &GroundTruthBox) -> f64 {
    (d.bbox.center[0] - g.bbox.center[0]).hypot(d.bbox.center[1] - g.bbox.center[1])
}

/// Greedy matching: detections by descending score (ties by frame, then
/// position) each take the nearest unmatched gt of their class within
/// `threshold`. Returns per-detection TP flags in that order, with scores,
/// and the matched flag of every gt.
fn greedy_match(frames: &[FrameResult], class: usize, threshold: f64) -> (Vec<(f64, bool)>, Vec<Vec<bool>>) {
    let mut dets: Vec<(f64, usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| {
            fr.detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class == class)
                .map(move |(i, d)| (d.score, f, i))
        })
        .collect();
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    let mut flags = Vec::with_capacity(dets.len());
    for (score, f, i) in dets {
        let d = &frames[f].detections[i];
        let best = frames[f]
            .gts
            .iter()
            .enumerate()
            .filter(|(j, g)| g.class == class && !taken[f][*j])
            .map(|(j, g)| (dist(d, g), j))
            .filter(|&(e, _)| e <= threshold)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((_, j)) = best {
            taken[f][j] = true;
        }
        flags.push((score, best.is_some()));
    }
    (flags, taken)
}

/// Mean interpolated precision at recalls 0.1, 0.2, …, 1.0, where precision
/// at r is the best precision reached at any recall ≥ r (0 when r is never
/// reached). `None` when the class has no ground truth.
pub fn average_precision(frames: &[FrameResult], class: usize, threshold: f64) -> Option<f64> {
    let n_gt = frames.iter().flat_map(|f| &f.gts).filter(|g| g.class == class).count();
    if n_gt == 0 {
        return None;
    }
    let (flags, _) = greedy_match(frames, class, threshold);
    let mut curve = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &(_, hit)) in flags.iter().enumerate() {
        tp += usize::from(hit);
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let ap = (1..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 10.0;
    Some(ap)
}

/// AP rows for every class that has ground truth.
pub fn evaluate(frames: &[FrameResult], distances: &[f64]) -> Vec<ApRow> {
    let mut classes: Vec<usize> = frames.iter().flat_map(|f| f.gts.iter().map(|g| g.class)).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|class| {
            let ap: Vec<(f64, f64)> = distances
                .iter()
                .map(|&d| (d, average_precision(frames, class, d).unwrap_or(0.0)))
                .collect();
            let mean = ap.iter().map(|a| a.1).sum::<f64>() / ap.len().max(1) as f64;
            ApRow { class, ap, mean }
        })
        .collect()
}

/// Mean over classes of the AP at `distance` (0 without ground truth).
pub fn mean_ap_at(frames: &[FrameResult], distance: f64) -> f64 {
    let rows = evaluate(frames, &[distance]);
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| r.mean).sum::<f64>() / rows.len() as f64
}

/// Mean over classes and the four distances.
pub fn mean_ap(frames: &[FrameResult]) -> f64 {
    let rows = evaluate(frames, &DISTANCES);
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| r.mean).sum::<f64>() / rows.len() as f64
}

/// Fraction of the gts selected by `subset[f][j]` that get matched at
/// `threshold` by detections scoring at least `min_score`. `None` when the
/// subset is empty.
pub fn subset_recall(frames: &[FrameResult], subset: &[Vec<bool>], threshold: f64, min_score: f64) -> Option<f64> {
    let filtered: Vec<FrameResult> = frames
        .iter()
        .map(|f| FrameResult {
            detections: f.detections.iter().filter(|d| d.score >= min_score).copied().collect(),
            gts: f.gts.clone(),
        })
        .collect();
    let mut classes: Vec<usize> = frames.iter().flat_map(|f| f.gts.iter().map(|g| g.class)).collect();
    classes.sort_unstable();
    classes.dedup();
    let (mut hit, mut total) = (0usize, 0usize);
    for class in classes {
        let (_, taken) = greedy_match(&filtered, class, threshold);
        for (f, fr) in filtered.iter().enumerate() {
            for (j, g) in fr.gts.iter().enumerate() {
                if g.class == class && subset[f].get(j).copied().unwrap_or(false) {
                    total += 1;
                    hit += usize::from(taken[f][j]);
                }
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Tab-separated table: one row per class, a column per distance, then the mean.
pub fn format_table(rows: &[ApRow]) -> String {
    let mut s = String::from("class");
    if let Some(r) = rows.first() {
        for (d, _) in &r.ap {
            s.push_str(&format!("\tAP@{d}m"));
        }
    }
    s.push_str("\tmean\n");
    for r in rows {
        s.push_str(&r.class.to_string());
        for (_, a) in &r.ap {
            s.push_str(&format!("\t{a:.4}"));
        }
        s.push_str(&format!("\t{:.4}\n", r.mean));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::Box3;

    fn gt(x: f64, y: f64) -> GroundTruthBox {
        GroundTruthBox {
            bbox: Box3 {
                center: [x, y, -0.9],
                size: [1.9, 4.5, 1.6],
                yaw: 0.0,
            },
            velocity: [0.0, 0.0],
            class: 0,
        }
    }

    fn det(x: f64, y: f64, score: f64) -> Detection {
        Detection {
            bbox: gt(x, y).bbox,
            velocity: [0.0, 0.0],
            class: 0,
            score,
        }
    }

    #[test]
    fn perfect_detector_scores_one() {
        let frames = vec![
            FrameResult {
                detections: vec![det(0.0, 0.0, 1.0), det(5.0, 5.0, 1.0)],
                gts: vec![gt(0.0, 0.0), gt(5.0, 5.0)],
            },
            FrameResult {
                detections: vec![det(-3.0, 1.0, 1.0)],
                gts: vec![gt(-3.0, 1.0)],
            },
        ];
        for r in evaluate(&frames, &DISTANCES) {
            assert!(r.ap.iter().all(|&(_, a)| a == 1.0));
            assert_eq!(r.mean, 1.0);
        }
    }

    #[test]
    fn no_detections_score_zero() {
        let frames = vec![FrameResult {
            detections: vec![],
            gts: vec![gt(0.0, 0.0)],
        }];
        assert_eq!(mean_ap(&frames), 0.0);
        assert_eq!(average_precision(&[FrameResult::default()], 0, 1.0), None);
    }

    /// Two gts at (0,0) and (10,0). Detections by score: A 0.9 at (0.3,0),
    /// B 0.8 at (20,0), C 0.7 at (10.6,0).
    /// At 1 m: A hit, B miss, C hit → (r, p) = (.5, 1), (.5, .5), (1, 2/3);
    /// recalls .1–.5 take 1, .6–1.0 take 2/3 → AP = (5 + 5·2/3)/10 = 5/6.
    /// At 0.5 m C misses → AP = 5/10 = 0.5. At 0.25 m nothing matches → 0.
    #[test]
    fn golden_three_detections_two_gts() {
        let frames = vec![FrameResult {
            detections: vec![det(20.0, 0.0, 0.8), det(0.3, 0.0, 0.9), det(10.6, 0.0, 0.7)],
            gts: vec![gt(0.0, 0.0), gt(10.0, 0.0)],
        }];
        assert!((average_precision(&frames, 0, 1.0).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!((average_precision(&frames, 0, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(average_precision(&frames, 0, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn one_match_per_gt() {
        let frames = vec![FrameResult {
            detections: vec![det(0.0, 0.0, 0.9), det(0.1, 0.0, 0.8)],
            gts: vec![gt(0.0, 0.0)],
        }];
        // (1, 1), (1, .5) → every recall level reaches precision 1
        assert_eq!(average_precision(&frames, 0, 1.0), Some(1.0));
        let (flags, _) = greedy_match(&frames, 0, 1.0);
        assert_eq!(flags, vec![(0.9, true), (0.8, false)]);
    }

    #[test]
    fn recall_on_a_subset() {
        let frames = vec![FrameResult {
            detections: vec![det(0.0, 0.0, 0.9), det(10.0, 0.0, 0.2)],
            gts: vec![gt(0.0, 0.0), gt(10.0, 0.0)],
        }];
        assert_eq!(subset_recall(&frames, &[vec![false, true]], 2.0, 0.3), Some(0.0));
        assert_eq!(subset_recall(&frames, &[vec![true, true]], 2.0, 0.1), Some(1.0));
        assert_eq!(subset_recall(&frames, &[vec![false, false]], 2.0, 0.1), None);
    }
}
