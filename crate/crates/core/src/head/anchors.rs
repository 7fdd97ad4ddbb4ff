use std::f64::consts::FRAC_PI_2;

use super::Box3;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAnchor {
    /// Mean (w, l, h), meters.
    pub size: [f64; 3],
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub classes: Vec<ClassAnchor>,
    pub yaws: Vec<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl AnchorConfig {
    /// One car-like class.
    pub fn car() -> Self {
        Self {
            classes: vec![ClassAnchor {
                size: [1.9, 4.5, 1.6],
                z: -0.9,
            }],
            yaws: vec![0.0, FRAC_PI_2],
            pos_iou: 0.6,
            neg_iou: 0.45,
        }
    }

    /// Anchor types per cell (classes × yaws).
    pub fn types(&self) -> usize {
        self.classes.len() * self.yaws.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 ≤ neg < pos ≤ 1, got {} / {}",
                self.neg_iou, self.pos_iou
            )));
        }
        if self.types() == 0 || self.classes.iter().any(|c| c.size.iter().any(|&s| s <= 0.0)) {
            return Err(Error::Config("anchor classes need positive sizes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: Box3,
    pub class: usize,
}

/// Anchors of an h×w feature map. Anchor `i` sits at type `i / (h·w)` and
/// cell `i % (h·w)` (row-major), so every prediction map indexes it the same
/// way.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub anchors: Vec<Anchor>,
    pub types: usize,
    pub h: usize,
    pub w: usize,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }
}

/// `stride` is the feature-map stride in pillars; `origin` the (x_min, y_min)
/// corner of the pillar grid.
pub fn generate_anchors(cfg: &AnchorConfig, h: usize, w: usize, stride: usize, pillar_size: f64, origin: [f64; 2]) -> AnchorGrid {
    let cell = stride as f64 * pillar_size;
    let mut anchors = Vec::with_capacity(cfg.types() * h * w);
    for (ci, class) in cfg.classes.iter().enumerate() {
        for &yaw in &cfg.yaws {
            for row in 0..h {
                for col in 0..w {
                    anchors.push(Anchor {
                        bbox: Box3 {
                            center: [origin[0] + (col as f64 + 0.5) * cell, origin[1] + (row as f64 + 0.5) * cell, class.z],
                            size: class.size,
                            yaw,
                        },
                        class: ci,
                    });
                }
            }
        }
    }
    AnchorGrid {
        anchors,
        types: cfg.types(),
        h,
        w,
    }
}
