//! Anchor-based detection head: 1×1 prediction maps, anchors, target
//! assignment, losses, rotated IoU, NMS and detection records.

pub mod anchors;
pub mod iou;
pub mod loss;
pub mod nms;
pub mod records;
pub mod targets;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use anchors::{generate_anchors, Anchor, AnchorConfig, AnchorGrid, ClassAnchor};
pub use iou::{rotated_bev_iou, Bev};
pub use loss::{head_loss, LossParts, LossWeights};
pub use nms::{decode_and_nms, nms, DecodeConfig};
pub use records::{format_g, parse_records, write_records, Record};
pub use targets::{assign_targets, decode_box, direction_bin, encode_box, Targets};

/// Oriented 3D box: center (m), size (w, l, h in m), yaw (rad). Length runs
/// along the heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3 {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3 {
    pub fn bev(&self) -> Bev {
        Bev {
            x: self.center[0],
            y: self.center[1],
            w: self.size[0],
            l: self.size[1],
            yaw: self.yaw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: Box3,
    pub velocity: [f64; 2],
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3,
    pub velocity: [f64; 2],
    pub class: usize,
    pub score: f64,
}

/// Wraps an angle to (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    if a > -PI && a <= PI {
        return a;
    }
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Prior probability behind the classification bias at initialization.
pub const CLS_PRIOR: f64 = 0.01;

/// Raw prediction maps for A anchor types on an h×w grid.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// A×h×w logits.
    pub cls: Var,
    /// 7A×h×w residuals.
    pub boxes: Var,
    /// 2A×h×w velocities.
    pub vel: Var,
    /// 2A×h×w direction logits.
    pub dir: Var,
}

pub fn init_params(store: &mut ParamStore, channels: usize, anchor_types: usize, rng: &mut ChaCha8Rng) {
    for (name, per) in [("cls", 1), ("box", 7), ("vel", 2), ("dir", 2)] {
        store.uniform(&format!("head.{name}.w"), &[per * anchor_types, channels, 1, 1], channels, rng);
        store.zeros(&format!("head.{name}.b"), &[per * anchor_types]);
    }
    let prior = (-((1.0 - CLS_PRIOR) / CLS_PRIOR).ln()) as f32;
    store.insert("head.cls.b", Tensor::full(&[anchor_types], prior));
}

pub fn head_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<HeadOutput> {
    let map = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
        let y = tape.conv2d(x, p.get(&format!("head.{name}.w"))?, 1, 0)?;
        tape.add_bias(y, p.get(&format!("head.{name}.b"))?, 0)
    };
    Ok(HeadOutput {
        cls: map(tape, "cls")?,
        boxes: map(tape, "box")?,
        vel: map(tape, "vel")?,
        dir: map(tape, "dir")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    #[test]
    fn angle_normalization() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_angle(0.3), 0.3);
    }

    #[test]
    fn head_maps_have_anchor_layout() {
        let mut s = ParamStore::new();
        init_params(&mut s, 5, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::<f32>::new();
        let p = s.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[5, 3, 4]));
        let out = head_forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(out.cls), &[2, 3, 4]);
        assert_eq!(tape.shape(out.boxes), &[14, 3, 4]);
        assert_eq!(tape.shape(out.vel), &[4, 3, 4]);
        assert_eq!(tape.shape(out.dir), &[4, 3, 4]);
        let sig = 1.0 / (1.0 + (-tape.value(out.cls).data()[0] as f64).exp());
        assert!((sig - CLS_PRIOR).abs() < 1e-6);
    }
}
