use super::{HeadOutput, Targets};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub boxes: f64,
    pub vel: f64,
    pub dir: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            boxes: 2.0,
            vel: 0.1,
            dir: 0.2,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_delta: 1.0,
        }
    }
}

/// Weighted loss terms, each already divided by max(N_pos, 1).
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub boxes: Var,
    pub vel: Var,
    pub dir: Var,
}

fn cast<T: Real>(v: &[f64], scale: f64) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x * scale)).collect()
}

/// Focal classification, smooth-L1 boxes, L1 velocity and two-bin direction
/// cross-entropy, all normalized by the positive count.
pub fn head_loss<T: Real>(tape: &mut Tape<T>, out: &HeadOutput, t: &Targets, w: &LossWeights) -> Result<LossParts> {
    let n = t.labels.len();
    let cls_shape = tape.shape(out.cls).to_vec();
    if cls_shape.iter().product::<usize>() != n {
        return Err(Error::Shape(format!("{n} anchors but class map {cls_shape:?}")));
    }
    let norm = 1.0 / t.num_pos.max(1) as f64;
    let pos: Vec<f64> = t.positive.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let hw = cls_shape[1] * cls_shape[2];
    let types = cls_shape[0];
    // expand per-anchor positives to the channel-major multi-channel layout
    let spread = |per: usize| -> Vec<f64> {
        let mut v = vec![0.0; per * n];
        for a in 0..types {
            for k in 0..per {
                v[(a * per + k) * hw..(a * per + k + 1) * hw].copy_from_slice(&pos[a * hw..(a + 1) * hw]);
            }
        }
        v
    };

    let cls = tape.sigmoid_focal(
        out.cls,
        &cast(&t.labels, 1.0),
        &cast(&t.cls_weight, w.cls * norm),
        T::from_f64(w.focal_alpha),
        T::from_f64(w.focal_gamma),
    )?;
    let boxes = tape.smooth_l1(
        out.boxes,
        &cast(&t.boxes, 1.0),
        &cast(&spread(7), w.boxes * norm),
        T::from_f64(w.smooth_l1_delta),
    )?;
    let vel = tape.l1(out.vel, &cast(&t.velocity, 1.0), &cast(&spread(2), w.vel * norm))?;
    let dir_logits = tape.reshape(out.dir, &[types, 2, cls_shape[1], cls_shape[2]])?;
    let dir = tape.softmax_ce(dir_logits, 1, &t.direction, &cast(&pos, w.dir * norm))?;
    let a = tape.add(cls, boxes)?;
    let b = tape.add(vel, dir)?;
    let total = tape.add(a, b)?;
    Ok(LossParts {
        total,
        cls,
        boxes,
        vel,
        dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, random_tensor, DEFAULT_EPS};
    use crate::head::{assign_targets, generate_anchors, AnchorConfig, Box3, GroundTruthBox};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> Targets {
        let cfg = AnchorConfig::car();
        let grid = generate_anchors(&cfg, 4, 4, 4, 0.25, [-2.0, -2.0]);
        let gts = [
            GroundTruthBox {
                bbox: Box3 {
                    center: [0.2, -0.3, -0.8],
                    size: [2.0, 4.4, 1.5],
                    yaw: -2.5,
                },
                velocity: [3.0, 0.5],
                class: 0,
            },
            GroundTruthBox {
                bbox: Box3 {
                    center: [-1.4, 1.2, -1.0],
                    size: [1.8, 4.7, 1.7],
                    yaw: 1.4,
                },
                velocity: [-1.0, 0.0],
                class: 0,
            },
        ];
        assign_targets(&grid, &gts, &cfg).unwrap()
    }

    fn maps(v: &[Var]) -> HeadOutput {
        HeadOutput {
            cls: v[0],
            boxes: v[1],
            vel: v[2],
            dir: v[3],
        }
    }

    #[test]
    fn total_loss_gradient() {
        let t = setup();
        assert!(t.num_pos >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = [
            random_tensor(&[2, 4, 4], -3.0, 3.0, &mut rng),
            random_tensor(&[14, 4, 4], -1.0, 1.0, &mut rng),
            random_tensor(&[4, 4, 4], -1.0, 1.0, &mut rng),
            random_tensor(&[4, 4, 4], -1.0, 1.0, &mut rng),
        ];
        let e = max_relative_error(&ins, DEFAULT_EPS, |tape, v| {
            let out = maps(v);
            Ok(head_loss(tape, &out, &t, &LossWeights::default())?.total)
        })
        .unwrap();
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn perfect_predictions_drive_loss_to_zero() {
        let t = setup();
        let big = 30.0;
        let logits: Vec<f64> = t.labels.iter().map(|&l| if l > 0.0 { big } else { -big }).collect();
        let mut dir = vec![0.0; 2 * t.labels.len()];
        let hw = 16;
        for i in 0..t.labels.len() {
            let (a, cell) = (i / hw, i % hw);
            dir[(a * 2 + t.direction[i]) * hw + cell] = big;
        }
        let mut tape = Tape::<f64>::new();
        let v = [
            tape.constant(Tensor::new(&[2, 4, 4], logits).unwrap()),
            tape.constant(Tensor::new(&[14, 4, 4], t.boxes.clone()).unwrap()),
            tape.constant(Tensor::new(&[4, 4, 4], t.velocity.clone()).unwrap()),
            tape.constant(Tensor::new(&[4, 4, 4], dir).unwrap()),
        ];
        let out = maps(&v);
        let parts = head_loss(&mut tape, &out, &t, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(parts.boxes).data()[0], 0.0);
        assert_eq!(tape.value(parts.vel).data()[0], 0.0);
        assert!(tape.value(parts.cls).data()[0] < 1e-12);
        assert!(tape.value(parts.dir).data()[0] < 1e-12);
        assert!(tape.value(parts.total).data()[0] >= 0.0);
    }
}
