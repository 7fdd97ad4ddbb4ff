//! LiDAR frames, rigid ego poses, alignment of a window onto its reference
//! frame, and discretization into pillars.

mod io;
mod pillars;

pub use io::{read_frames, read_frames_from, write_frames, write_frames_to, MAGIC as FRAME_MAGIC};
pub use pillars::{pillarize, PillarConfig, PillarSelection, PillarSet, POINT_DIM};

use crate::error::{Error, Result};

/// One return: position in meters, reflectance in [0, 1], and time lag to
/// the keyframe in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub dt: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, r: f64, dt: f64) -> Self {
        Self { x, y, z, r, dt }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn features(&self) -> [f32; POINT_DIM] {
        [self.x as f32, self.y as f32, self.z as f32, self.r as f32, self.dt as f32]
    }
}

/// Rigid sensor-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

const POSE_TOL: f64 = 1e-6;

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Planar pose: rotation by `yaw` about +z, then translation.
    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    /// Rotation from Z-Y-X Euler angles (yaw, pitch, roll).
    pub fn from_euler(yaw: f64, pitch: f64, roll: f64, translation: [f64; 3]) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sr, cr) = roll.sin_cos();
        Self {
            rotation: [
                [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
                [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
                [-sp, cp * sr, cp * cr],
            ],
            translation,
        }
    }

    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if r.iter().flatten().chain(&self.translation).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > POSE_TOL {
                    return Err(Error::InvalidPose(format!("RᵀR[{i}][{j}] = {dot}")));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > POSE_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}")));
        }
        Ok(())
    }

    /// `R·p + t`.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// `Rᵀ·(p - t)`.
    pub fn apply_inverse(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let d = [p[0] - self.translation[0], p[1] - self.translation[1], p[2] - self.translation[2]];
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Rotation only, for direction vectors such as velocities.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn rotate_inverse(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2],
            r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2],
            r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2],
        ]
    }

    /// The pose of `self` expressed in the frame of `reference`.
    pub fn relative_to(&self, reference: &Pose) -> Pose {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| reference.rotation[k][i] * self.rotation[k][j]).sum();
            }
        }
        Pose {
            rotation,
            translation: reference.apply_inverse(self.translation),
        }
    }
}

/// One LiDAR sweep with its sensor-to-world pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub points: Vec<LidarPoint>,
    pub pose: Pose,
    pub timestamp: f64,
}

/// Re-expresses `frame` in the sensor frame of `reference`:
/// `p ← R_refᵀ(R_f·p + t_f − t_ref)`. Reflectance and time lag are unchanged
/// and the returned frame's pose is `reference`.
pub fn align_to_reference(frame: &Frame, reference: &Pose) -> Result<Frame> {
    frame.pose.validate()?;
    reference.validate()?;
    let points = frame
        .points
        .iter()
        .map(|p| {
            let [x, y, z] = reference.apply_inverse(frame.pose.apply(p.xyz()));
            LidarPoint { x, y, z, ..*p }
        })
        .collect();
    Ok(Frame {
        points,
        pose: *reference,
        timestamp: frame.timestamp,
    })
}

/// Aligns every frame of a window onto the pose of its last frame.
pub fn align_window(frames: &[Frame]) -> Result<Vec<Frame>> {
    let Some(last) = frames.last() else {
        return Ok(Vec::new());
    };
    for w in frames.windows(2) {
        if w[1].timestamp <= w[0].timestamp {
            return Err(Error::InvalidInput(format!(
                "timestamps must increase ({} then {})",
                w[0].timestamp, w[1].timestamp
            )));
        }
    }
    let reference = last.pose;
    frames.iter().map(|f| align_to_reference(f, &reference)).collect()
}
