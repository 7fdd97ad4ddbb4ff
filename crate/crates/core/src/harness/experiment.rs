//! Dataset construction and train-then-evaluate runs shared by the CLI and
//! the acceptance suite.

use std::fmt::Write as _;

use super::config::RunConfig;
use super::eval::{evaluate, subset_recall, ApRow, FrameResult, DISTANCES};
use super::model::{prepare_scene, Model, ModelConfig, Sample};
use super::scene::{generate_scene, Scene, SceneDistribution};
use super::train::{detect, train, EpochStats, TrainOptions};
use crate::astgru::Temporal;
use crate::error::Result;
use crate::head::{DecodeConfig, LossWeights};

/// Scene distribution matching the pillar range of `run`.
pub fn distribution(run: &RunConfig) -> SceneDistribution {
    let half = (run.pillar.x_range.1 - run.pillar.x_range.0).min(run.pillar.y_range.1 - run.pillar.y_range.0) / 2.0;
    SceneDistribution {
        occlude_last: run.occlude_last,
        ..SceneDistribution::cars(run.frames, half)
    }
}

/// `count` scenes with seeds derived from `seed`.
pub fn scenes(dist: &SceneDistribution, count: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(&dist.draw(seed.wrapping_mul(10_007).wrapping_add(i as u64))))
        .collect()
}

pub fn samples(config: &ModelConfig, scenes: &[Scene], seq_len: usize, with_targets: bool) -> Result<Vec<Sample>> {
    let grid = config.anchor_grid()?;
    scenes
        .iter()
        .map(|s| prepare_scene(config, &grid, s, seq_len, with_targets))
        .collect()
}

pub fn train_options(run: &RunConfig) -> TrainOptions {
    TrainOptions {
        epochs: run.epochs,
        lr: run.lr,
        seed: run.seed,
        weights: LossWeights {
            cls: run.w_cls,
            boxes: run.w_box,
            vel: run.w_vel,
            dir: run.w_dir,
            ..LossWeights::default()
        },
    }
}

pub fn decode_config(run: &RunConfig) -> DecodeConfig {
    DecodeConfig {
        score_threshold: 0.05,
        iou_threshold: run.nms_iou,
        max_detections: run.max_detections,
        ..DecodeConfig::default()
    }
}

/// Detections on the last frame of each sample, paired with its ground truth.
pub fn infer(model: &Model, samples: &[Sample], decode: &DecodeConfig) -> Result<Vec<FrameResult>> {
    samples
        .iter()
        .map(|s| {
            Ok(FrameResult {
                detections: detect(model, s, decode)?,
                gts: s.last().gts.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub curve: Vec<EpochStats>,
    pub ap: Vec<ApRow>,
    pub mean_ap: f64,
    /// Recall at 2 m of last-frame objects that returned no points, at the
    /// run's score threshold.
    pub occluded_recall: Option<f64>,
    pub results: Vec<FrameResult>,
    pub model: Model,
}

impl Outcome {
    pub fn ap_at(&self, distance: f64) -> f64 {
        let v: Vec<f64> = self.ap.iter().filter_map(|r| r.at(distance)).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Trains a fresh model of `run` on `train_scenes` and evaluates it on the
/// last frame of each of `eval_scenes`.
pub fn run_experiment(run: &RunConfig, train_scenes: &[Scene], eval_scenes: &[Scene]) -> Result<Outcome> {
    let config = ModelConfig::from_run(run)?;
    let train_set = samples(&config, train_scenes, run.seq_len, true)?;
    let eval_set = samples(&config, eval_scenes, run.seq_len, false)?;
    let mut model = Model::new(config, run.seed);
    let curve = train(&mut model, &train_set, &train_options(run))?;
    let results = infer(&model, &eval_set, &decode_config(run))?;
    let ap = evaluate(&results, &DISTANCES);
    let mean_ap = if ap.is_empty() {
        0.0
    } else {
        ap.iter().map(|r| r.mean).sum::<f64>() / ap.len() as f64
    };
    let hidden: Vec<Vec<bool>> = eval_set.iter().map(|s| s.visible.iter().map(|v| !v).collect()).collect();
    let occluded_recall = subset_recall(&results, &hidden, 2.0, run.score_threshold);
    Ok(Outcome {
        curve,
        ap,
        mean_ap,
        occluded_recall,
        results,
        model,
    })
}

/// Name, message-passing steps and temporal mode of one ablation row.
pub type Variant = (&'static str, usize, Temporal);

/// Module on/off variants.
pub fn ablation_variants(steps: usize) -> [Variant; 5] {
    [
        ("pointpillars", 0, Temporal::None),
        ("+pmpnet", steps, Temporal::None),
        ("+convgru", 0, Temporal::ConvGru),
        ("+astgru", 0, Temporal::AstGru),
        ("full", steps, Temporal::AstGru),
    ]
}

/// Seed-averaged mean AP of each variant on held-out scenes. Seed `s` trains
/// on data drawn from `data_seed + s` and evaluates on a disjoint draw.
pub fn ablate(
    run: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    train_count: usize,
    eval_count: usize,
) -> Result<Vec<(String, f64)>> {
    let dist = distribution(run);
    let mut out = Vec::new();
    for &(name, steps, temporal) in variants {
        let mut total = 0.0;
        for &seed in seeds {
            let train_scenes = scenes(&dist, train_count, run.data_seed.wrapping_add(seed))?;
            let eval_scenes = scenes(&dist, eval_count, run.data_seed.wrapping_add(seed).wrapping_add(1 << 32))?;
            let cfg = RunConfig {
                steps,
                temporal,
                seed,
                ..run.clone()
            };
            total += run_experiment(&cfg, &train_scenes, &eval_scenes)?.mean_ap;
        }
        out.push((name.to_string(), total / seeds.len().max(1) as f64));
    }
    Ok(out)
}

pub fn format_ablation(rows: &[(String, f64)]) -> String {
    let mut s = String::from("variant\tmean_ap\n");
    for (n, ap) in rows {
        let _ = writeln!(s, "{n}\t{ap:.4}");
    }
    s
}

/// The reduced configuration the directional experiments run at: 16 m × 16 m
/// at 0.5 m pillars, an 8×8 feature map and narrow layers.
pub fn bench_config() -> RunConfig {
    let mut run = RunConfig::desk();
    run.pillar.x_range = (-8.0, 8.0);
    run.pillar.y_range = (-8.0, 8.0);
    run.pillar.pillar_size = 0.5;
    run.pillar.max_pillars = 1024;
    run.state_dim = 16;
    run.message_dim = 16;
    run.steps = 2;
    run.block_channels = [16, 32, 32];
    run.up_channels = 16;
    run.lr = 5e-4;
    run.epochs = 40;
    run
}
