use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Frame;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-point feature width: (x, y, z, r, dt).
pub const POINT_DIM: usize = 5;

/// How pillars are dropped when a frame has more than `max_pillars`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PillarSelection {
    /// Keep the densest pillars; ties by ascending cell index.
    Densest,
    /// Keep a seeded uniform sample.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PillarConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub pillar_size: f64,
    pub max_pillars: usize,
    pub max_points: usize,
    pub seed: u64,
    pub selection: PillarSelection,
}

impl PillarConfig {
    /// The full-range setting: 100 m × 100 m at 0.25 m, P = 16384, N = 60.
    pub fn full_range() -> Self {
        Self {
            x_range: (-50.0, 50.0),
            y_range: (-50.0, 50.0),
            z_range: (-5.0, 3.0),
            pillar_size: 0.25,
            max_pillars: 16384,
            max_points: 60,
            seed: 0,
            selection: PillarSelection::Densest,
        }
    }

    /// Desk scale: 24 m × 24 m (96 × 96 cells), P = 2048, N = 20.
    pub fn desk() -> Self {
        Self {
            x_range: (-12.0, 12.0),
            y_range: (-12.0, 12.0),
            max_pillars: 2048,
            max_points: 20,
            ..Self::full_range()
        }
    }

    fn cells(range: (f64, f64), size: f64) -> Result<usize> {
        let n = (range.1 - range.0) / size;
        if !(n >= 1.0) || (n - n.round()).abs() > 1e-9 {
            return Err(Error::Config(format!("range {range:?} is not a whole number of {size} m pillars")));
        }
        Ok(n.round() as usize)
    }

    /// Grid extent (W, H) in cells.
    pub fn grid(&self) -> Result<(usize, usize)> {
        if self.max_pillars == 0 || self.max_points == 0 {
            return Err(Error::Config("max_pillars and max_points must be ≥ 1".into()));
        }
        Ok((Self::cells(self.x_range, self.pillar_size)?, Self::cells(self.y_range, self.pillar_size)?))
    }
}

/// Non-empty pillars of one frame, in ascending cell order.
///
/// `buffers` is V×N×D for the V kept pillars; rows past `counts[i]` are zero
/// and `false` in `point_mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarSet {
    pub buffers: Tensor<f32>,
    /// (row, col) = (y cell, x cell).
    pub coords: Vec<(usize, usize)>,
    pub counts: Vec<usize>,
    /// V×N, true for real points.
    pub point_mask: Vec<bool>,
    /// Mean (x, y) of each pillar's kept points, meters.
    pub centroids: Vec<[f64; 2]>,
    pub grid_w: usize,
    pub grid_h: usize,
    pub max_points: usize,
}

impl PillarSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Discretizes `frame` onto the x-y grid of `cfg`. Points outside the range are
/// dropped; pillars over `max_points` are subsampled uniformly (seeded).
pub fn pillarize(frame: &Frame, cfg: &PillarConfig) -> Result<PillarSet> {
    let (gw, gh) = cfg.grid()?;
    let n_max = cfg.max_points;
    let mut cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in frame.points.iter().enumerate() {
        let inside = p.x >= cfg.x_range.0
            && p.x < cfg.x_range.1
            && p.y >= cfg.y_range.0
            && p.y < cfg.y_range.1
            && p.z >= cfg.z_range.0
            && p.z < cfg.z_range.1;
        if !inside {
            continue;
        }
        let col = ((p.x - cfg.x_range.0) / cfg.pillar_size).floor() as usize;
        let row = ((p.y - cfg.y_range.0) / cfg.pillar_size).floor() as usize;
        if col >= gw || row >= gh {
            continue;
        }
        cells.entry(row * gw + col).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen: Vec<(usize, Vec<usize>)> = cells.into_iter().collect();
    if chosen.len() > cfg.max_pillars {
        match cfg.selection {
            PillarSelection::Densest => {
                chosen.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
            }
            PillarSelection::Random => chosen.shuffle(&mut rng),
        }
        chosen.truncate(cfg.max_pillars);
        chosen.sort_by_key(|c| c.0);
    }
    let v = chosen.len();
    let mut buffers = vec![0f32; v * n_max * POINT_DIM];
    let mut point_mask = vec![false; v * n_max];
    let mut coords = Vec::with_capacity(v);
    let mut counts = Vec::with_capacity(v);
    let mut centroids = Vec::with_capacity(v);
    for (pi, (cell, idx)) in chosen.iter().enumerate() {
        let kept: Vec<usize> = if idx.len() > n_max {
            let mut pick = sample(&mut rng, idx.len(), n_max).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|k| idx[k]).collect()
        } else {
            idx.clone()
        };
        let (mut cx, mut cy) = (0.0, 0.0);
        for (slot, &k) in kept.iter().enumerate() {
            let p = &frame.points[k];
            let at = (pi * n_max + slot) * POINT_DIM;
            buffers[at..at + POINT_DIM].copy_from_slice(&p.features());
            point_mask[pi * n_max + slot] = true;
            cx += p.x;
            cy += p.y;
        }
        let n = kept.len() as f64;
        coords.push((cell / gw, cell % gw));
        counts.push(kept.len());
        centroids.push([cx / n, cy / n]);
    }
    Ok(PillarSet {
        buffers: Tensor::new(&[v, n_max, POINT_DIM], buffers)?,
        coords,
        counts,
        point_mask,
        centroids,
        grid_w: gw,
        grid_h: gh,
        max_points: n_max,
    })
}
