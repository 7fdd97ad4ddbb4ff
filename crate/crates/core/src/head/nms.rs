use super::{decode_box, rotated_bev_iou, AnchorGrid, Bev, Detection};
use crate::error::{Error, Result};
use crate::tensor::{kernels::sigmoid, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    /// Highest-scoring candidates kept per class before suppression.
    pub max_candidates: usize,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.1,
            iou_threshold: 0.5,
            max_candidates: 1000,
            max_detections: 100,
        }
    }
}

/// Greedy suppression. Boxes are visited by descending score, equal scores
/// by ascending index; a box is dropped when its IoU with an already kept box
/// exceeds `threshold`. Returns kept indices in visiting order.
pub fn nms(boxes: &[Bev], scores: &[f64], threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::InvalidInput(format!("{} boxes but {} scores", boxes.len(), scores.len())));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    'next: for i in order {
        for &k in &kept {
            if rotated_bev_iou(&boxes[i], &boxes[k])? > threshold {
                continue 'next;
            }
        }
        kept.push(i);
    }
    Ok(kept)
}

/// Scores, decodes and suppresses the prediction maps of one frame.
pub fn decode_and_nms<T: Real>(
    cls: &Tensor<T>,
    boxes: &Tensor<T>,
    vel: &Tensor<T>,
    dir: &Tensor<T>,
    grid: &AnchorGrid,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    let n = grid.len();
    let hw = grid.cells();
    if cls.numel() != n || boxes.numel() != 7 * n || vel.numel() != 2 * n || dir.numel() != 2 * n {
        return Err(Error::Shape(format!("prediction maps do not match {n} anchors")));
    }
    let classes = grid.anchors.iter().map(|a| a.class + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    for class in 0..classes {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&i| grid.anchors[i].class == class)
            .map(|i| (sigmoid(cls.data()[i]).to_f64(), i))
            .filter(|&(s, _)| s >= cfg.score_threshold)
            .collect();
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cand.truncate(cfg.max_candidates);
        let dets: Vec<Detection> = cand
            .iter()
            .map(|&(score, i)| {
                let (a, cell) = (i / hw, i % hw);
                let at = |per: usize, k: usize| (a * per + k) * hw + cell;
                let r: [f64; 7] = std::array::from_fn(|k| boxes.data()[at(7, k)].to_f64());
                let d = dir.data();
                let bin = usize::from(d[at(2, 1)] > d[at(2, 0)]);
                Detection {
                    bbox: decode_box(&grid.anchors[i].bbox, &r, bin),
                    velocity: [vel.data()[at(2, 0)].to_f64(), vel.data()[at(2, 1)].to_f64()],
                    class,
                    score,
                }
            })
            .collect();
        let bevs: Vec<Bev> = dets.iter().map(|d| d.bbox.bev()).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        for k in nms(&bevs, &scores, cfg.iou_threshold)? {
            out.push(dets[k]);
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.max_detections);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{generate_anchors, AnchorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bev(x: f64, y: f64, w: f64, l: f64, yaw: f64) -> Bev {
        Bev { x, y, w, l, yaw }
    }

    /// Exhaustive definition: i survives iff no higher-ranked survivor
    /// overlaps it above the threshold, resolved rank by rank.
    fn reference(boxes: &[Bev], scores: &[f64], th: f64) -> Vec<usize> {
        let n = boxes.len();
        let rank = |i: usize| (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
        let mut by_rank = vec![0; n];
        for i in 0..n {
            by_rank[rank(i)] = i;
        }
        let mut alive = vec![false; n];
        for &i in &by_rank {
            alive[i] = by_rank
                .iter()
                .take_while(|&&j| j != i)
                .all(|&j| !alive[j] || rotated_bev_iou(&boxes[i], &boxes[j]).unwrap() <= th);
        }
        by_rank.into_iter().filter(|&i| alive[i]).collect()
    }

    #[test]
    fn identical_pair_keeps_higher_score() {
        let b = bev(0.0, 0.0, 2.0, 4.0, 0.3);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5).unwrap(), vec![1]);
        assert_eq!(nms(&[b, b], &[0.9, 0.9], 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn matches_exhaustive_reference_on_200_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let boxes: Vec<Bev> = (0..200)
            .map(|_| bev(rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0), rng.gen_range(1.0..2.5), rng.gen_range(2.0..5.0), rng.gen_range(-3.1..3.1)))
            .collect();
        // coarse scores force ties
        let scores: Vec<f64> = (0..200).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
        let got = nms(&boxes, &scores, 0.5).unwrap();
        assert_eq!(got, reference(&boxes, &scores, 0.5));
        for (a, &i) in got.iter().enumerate() {
            for &j in &got[..a] {
                assert!(rotated_bev_iou(&boxes[i], &boxes[j]).unwrap() <= 0.5);
            }
        }
        for i in (0..200).filter(|i| !got.contains(i)) {
            assert!(got.iter().any(|&k| scores[k] >= scores[i] && rotated_bev_iou(&boxes[i], &boxes[k]).unwrap() > 0.5));
        }
    }

    #[test]
    fn low_scores_give_no_detections() {
        let grid = generate_anchors(&AnchorConfig::car(), 3, 3, 4, 0.25, [0.0, 0.0]);
        let n = grid.len();
        let cls = Tensor::<f32>::full(&[2, 3, 3], -10.0);
        let z = |c: usize| Tensor::<f32>::zeros(&[c, 3, 3]);
        let d = decode_and_nms(&cls, &z(14), &z(4), &z(4), &grid, &DecodeConfig::default()).unwrap();
        assert!(d.is_empty());
        let mut hot = cls.clone();
        hot.data_mut()[n - 1] = 5.0;
        let d = decode_and_nms(&hot, &z(14), &z(4), &z(4), &grid, &DecodeConfig::default()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox.center, grid.anchors[n - 1].bbox.center);
        assert!(d[0].score > 0.99 && d[0].score <= 1.0);
    }
}
