//! Synthetic LiDAR sequences: box-shaped objects moving at constant velocity,
//! a moving ego sensor and uniform ground clutter.

use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::{normalize_angle, Box3, GroundTruthBox};
use crate::pointcloud::{Frame, LidarPoint, Pose};

/// Height of the ground plane below the sensor, meters.
pub const GROUND_Z: f64 = -1.7;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    /// (w, l, h), meters.
    pub size: [f64; 3],
    /// World (x, y) of the box center at frame 0.
    pub spawn: [f64; 2],
    pub yaw: f64,
    /// World velocity, m/s.
    pub velocity: [f64; 2],
    /// Frame ranges in which the object returns no points.
    pub occluded: Vec<Range<usize>>,
    pub class: usize,
}

impl ObjectSpec {
    pub fn is_occluded(&self, frame: usize) -> bool {
        self.occluded.iter().any(|r| r.contains(&frame))
    }

    /// World box at time `t` seconds.
    pub fn world_box(&self, t: f64) -> Box3 {
        Box3 {
            center: [
                self.spawn[0] + self.velocity[0] * t,
                self.spawn[1] + self.velocity[1] * t,
                GROUND_Z + self.size[2] / 2.0,
            ],
            size: self.size,
            yaw: self.yaw,
        }
    }
}

/// Ego pose at a frame; poses between waypoints are not interpolated, each
/// frame takes the waypoint with its index (the last one repeats).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    /// Seconds between keyframes.
    pub frame_interval: f64,
    pub objects: Vec<ObjectSpec>,
    pub ego: Vec<Waypoint>,
    /// Object surface points per m².
    pub surface_density: f64,
    /// Ground clutter points per m².
    pub clutter_density: f64,
    /// Clutter covers the square of this half-extent around the ego.
    pub clutter_extent: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || !(self.frame_interval > 0.0) {
            return Err(Error::Config("a scene needs at least one frame and a positive interval".into()));
        }
        if !(self.surface_density >= 0.0 && self.clutter_density >= 0.0 && self.clutter_extent >= 0.0) {
            return Err(Error::Config("densities and extents must be non-negative".into()));
        }
        if self.ego.is_empty() {
            return Err(Error::Config("ego trajectory needs a waypoint".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.size.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(format!("object {i} has a non-positive size")));
            }
            if o.occluded.iter().any(|r| r.start > r.end || r.end > self.frames) {
                return Err(Error::Config(format!("object {i} has an occlusion interval outside the sequence")));
            }
        }
        Ok(())
    }

    pub fn ego_pose(&self, frame: usize) -> Pose {
        let w = self.ego[frame.min(self.ego.len() - 1)];
        Pose::from_yaw(w.yaw, [w.x, w.y, 0.0])
    }
}

/// A generated sequence. `gts[f]` and `visible[f]` follow `spec.objects`
/// order; boxes are in frame `f`'s sensor coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frames: Vec<Frame>,
    pub gts: Vec<Vec<GroundTruthBox>>,
    pub visible: Vec<Vec<bool>>,
    /// Points emitted by each object per frame.
    pub object_points: Vec<Vec<usize>>,
}

/// Samples `n ~ Poisson-like(area·density)` points uniformly on a rectangle
/// spanned from `origin` by `u` and `v`.
fn sample_face(rng: &mut ChaCha8Rng, origin: [f64; 3], u: [f64; 3], v: [f64; 3], density: f64, out: &mut Vec<[f64; 3]>) {
    let area = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt() * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let expect = area * density;
    let n = expect.floor() as usize + usize::from(rng.gen::<f64>() < expect.fract());
    for _ in 0..n {
        let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
        out.push(std::array::from_fn(|k| origin[k] + a * u[k] + b * v[k]));
    }
}

/// Points on the four sides and the top of a box, world coordinates.
fn box_surface(rng: &mut ChaCha8Rng, b: &Box3, density: f64) -> Vec<[f64; 3]> {
    let (s, c) = b.yaw.sin_cos();
    let [w, l, h] = b.size;
    let along = [c * l, s * l, 0.0];
    let across = [-s * w, c * w, 0.0];
    let up = [0.0, 0.0, h];
    let base = [
        b.center[0] - along[0] / 2.0 - across[0] / 2.0,
        b.center[1] - along[1] / 2.0 - across[1] / 2.0,
        b.center[2] - h / 2.0,
    ];
    let add = |p: [f64; 3], q: [f64; 3]| [p[0] + q[0], p[1] + q[1], p[2] + q[2]];
    let mut pts = Vec::new();
    sample_face(rng, base, along, up, density, &mut pts);
    sample_face(rng, add(base, across), along, up, density, &mut pts);
    sample_face(rng, base, across, up, density, &mut pts);
    sample_face(rng, add(base, along), across, up, density, &mut pts);
    sample_face(rng, add(base, up), along, across, density, &mut pts);
    pts
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scene = Scene {
        frames: Vec::with_capacity(spec.frames),
        gts: Vec::with_capacity(spec.frames),
        visible: Vec::with_capacity(spec.frames),
        object_points: Vec::with_capacity(spec.frames),
    };
    for f in 0..spec.frames {
        let t = f as f64 * spec.frame_interval;
        let pose = spec.ego_pose(f);
        let ego_yaw = pose.yaw();
        let mut points = Vec::new();
        let mut gts = Vec::with_capacity(spec.objects.len());
        let mut visible = Vec::with_capacity(spec.objects.len());
        let mut counts = Vec::with_capacity(spec.objects.len());
        for o in &spec.objects {
            let wb = o.world_box(t);
            let occluded = o.is_occluded(f);
            let surface = if occluded { Vec::new() } else { box_surface(&mut rng, &wb, spec.surface_density) };
            counts.push(surface.len());
            visible.push(!occluded && !surface.is_empty());
            for p in surface {
                let [x, y, z] = pose.apply_inverse(p);
                points.push(LidarPoint::new(x, y, z, rng.gen_range(0.6..0.9), 0.0));
            }
            let v = pose.rotate_inverse([o.velocity[0], o.velocity[1], 0.0]);
            gts.push(GroundTruthBox {
                bbox: Box3 {
                    center: pose.apply_inverse(wb.center),
                    size: wb.size,
                    yaw: normalize_angle(wb.yaw - ego_yaw),
                },
                velocity: [v[0], v[1]],
                class: o.class,
            });
        }
        let e = spec.clutter_extent;
        let expect = 4.0 * e * e * spec.clutter_density;
        let n = expect.floor() as usize + usize::from(rng.gen::<f64>() < expect.fract());
        let origin = pose.translation;
        for _ in 0..n {
            let wp = [
                origin[0] + rng.gen_range(-e..=e),
                origin[1] + rng.gen_range(-e..=e),
                GROUND_Z + rng.gen_range(0.0..0.3),
            ];
            let [x, y, z] = pose.apply_inverse(wp);
            points.push(LidarPoint::new(x, y, z, rng.gen_range(0.05..0.3), 0.0));
        }
        scene.frames.push(Frame { points, pose, timestamp: t });
        scene.gts.push(gts);
        scene.visible.push(visible);
        scene.object_points.push(counts);
    }
    Ok(scene)
}

/// Knobs for drawing random scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDistribution {
    pub frames: usize,
    pub frame_interval: f64,
    /// Inclusive object count range.
    pub objects: (usize, usize),
    /// Objects spawn with centers in the square of this half-extent.
    pub spawn_extent: f64,
    pub max_speed: f64,
    pub ego_speed: f64,
    pub surface_density: f64,
    pub clutter_density: f64,
    pub clutter_extent: f64,
    /// Probability that an object is hidden in the last frame only.
    pub occlude_last: f64,
}

impl SceneDistribution {
    /// Cars on a ±`half` m patch; the ego drives along +x.
    pub fn cars(frames: usize, half: f64) -> Self {
        Self {
            frames,
            frame_interval: 0.5,
            objects: (2, 4),
            spawn_extent: half - 3.0,
            max_speed: 2.0,
            ego_speed: 1.0,
            surface_density: 12.0,
            clutter_density: 0.25,
            clutter_extent: half,
            occlude_last: 0.0,
        }
    }

    pub fn draw(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(self.objects.0..=self.objects.1);
        let duration = (self.frames - 1) as f64 * self.frame_interval;
        let ego: Vec<Waypoint> = (0..self.frames)
            .map(|f| Waypoint {
                x: self.ego_speed * f as f64 * self.frame_interval,
                y: 0.0,
                yaw: 0.0,
            })
            .collect();
        let last = ego[self.frames - 1];
        let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
        let mut occluded_any = false;
        for _ in 0..50 * n.max(1) {
            if objects.len() == n {
                break;
            }
            let yaw = rng.gen_range(-PI..PI);
            let speed = rng.gen_range(0.0..=self.max_speed);
            let heading = if rng.gen_bool(0.5) { yaw } else { yaw + PI };
            let velocity = [speed * heading.cos(), speed * heading.sin()];
            let size = [rng.gen_range(1.7..2.1), rng.gen_range(4.0..5.0), rng.gen_range(1.4..1.8)];
            // place relative to the final ego position so the last frame sees it
            let end = [
                last.x + rng.gen_range(-self.spawn_extent..=self.spawn_extent),
                last.y + rng.gen_range(-self.spawn_extent..=self.spawn_extent),
            ];
            let spawn = [end[0] - velocity[0] * duration, end[1] - velocity[1] * duration];
            // keep footprints apart over the whole sequence
            let clear = objects.iter().all(|o| {
                (0..self.frames).all(|f| {
                    let t = f as f64 * self.frame_interval;
                    let a = o.world_box(t).center;
                    let b = [spawn[0] + velocity[0] * t, spawn[1] + velocity[1] * t];
                    (a[0] - b[0]).hypot(a[1] - b[1]) > 5.5
                })
            });
            if !clear {
                continue;
            }
            let mut occluded = Vec::new();
            if self.occlude_last > 0.0 && rng.gen::<f64>() < self.occlude_last {
                occluded.push(self.frames - 1..self.frames);
                occluded_any = true;
            }
            objects.push(ObjectSpec {
                size,
                spawn,
                yaw,
                velocity,
                occluded,
                class: 0,
            });
        }
        if self.occlude_last > 0.0 && !occluded_any {
            if let Some(o) = objects.first_mut() {
                o.occluded.push(self.frames - 1..self.frames);
            }
        }
        SceneSpec {
            frames: self.frames,
            frame_interval: self.frame_interval,
            objects,
            ego,
            surface_density: self.surface_density,
            clutter_density: self.clutter_density,
            clutter_extent: self.clutter_extent,
            seed: rng.gen(),
        }
    }
}
