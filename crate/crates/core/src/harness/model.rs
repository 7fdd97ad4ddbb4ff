use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::scene::Scene;
use crate::astgru::{self, AstGruConfig};
use crate::backbone::{self, BackboneConfig};
use crate::error::{Error, Result};
use crate::head::{self, assign_targets, generate_anchors, AnchorConfig, AnchorGrid, Box3, GroundTruthBox, HeadOutput, Targets};
use crate::params::{Bound, ParamStore};
use crate::pmpnet::{self, PillarGraph, PmpConfig};
use crate::pointcloud::{align_window, pillarize, Frame, PillarConfig, PillarSet, Pose};
use crate::tensor::{Real, Tape, Var};

/// Component configs derived from a [`RunConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub pillar: PillarConfig,
    pub pmp: PmpConfig,
    pub backbone: BackboneConfig,
    pub temporal: AstGruConfig,
    pub anchors: AnchorConfig,
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let pmp = PmpConfig {
            state_dim: cfg.state_dim,
            message_dim: cfg.message_dim,
            steps: cfg.steps,
            k: cfg.k,
        };
        let backbone = BackboneConfig {
            target_stride: cfg.target_stride,
            ..BackboneConfig::with_widths(cfg.state_dim, cfg.block_channels, cfg.up_channels)
        };
        backbone.validate()?;
        let mut temporal = AstGruConfig::new(backbone.out_channels());
        temporal.temporal = cfg.temporal;
        temporal.attn_budget = cfg.attn_budget;
        if cfg.embed > 0 {
            temporal.embed = cfg.embed;
        }
        let anchors = AnchorConfig::car();
        anchors.validate()?;
        Ok(Self {
            pillar: cfg.pillar.clone(),
            pmp,
            backbone,
            temporal,
            anchors,
        })
    }

    /// Feature-map (h, w) and the anchors laid on it.
    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        let (gw, gh) = self.pillar.grid()?;
        let [_, h, w] = self.backbone.output_shape(gh, gw)?;
        Ok(generate_anchors(
            &self.anchors,
            h,
            w,
            self.backbone.target_stride,
            self.pillar.pillar_size,
            [self.pillar.x_range.0, self.pillar.y_range.0],
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        pmpnet::init_params(&mut params, &config.pmp, &mut rng);
        backbone::init_params(&mut params, &config.backbone, &mut rng);
        astgru::init_params(&mut params, &config.temporal, &mut rng);
        head::init_params(&mut params, config.backbone.out_channels(), config.anchors.types(), &mut rng);
        Self { config, params }
    }

    /// Per-frame head outputs for an aligned window, oldest first.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, window: &[PreparedFrame]) -> Result<Vec<HeadOutput>> {
        Ok(self.forward_traced(tape, p, window)?.heads)
    }

    pub fn forward_traced<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, window: &[PreparedFrame]) -> Result<Trace> {
        let c = &self.config;
        let mut canvases = Vec::with_capacity(window.len());
        let mut features = Vec::with_capacity(window.len());
        for f in window {
            let pmp = f.pmp_config(&c.pmp);
            let canvas = pmpnet::encode_frame(tape, p, &f.pillars, f.graph.as_ref(), &pmp)?;
            canvases.push(canvas);
            features.push(backbone::backbone_forward(tape, p, &c.backbone, canvas)?);
        }
        let memory = astgru::run_sequence(tape, p, &c.temporal, &features)?;
        let heads = memory
            .iter()
            .map(|&h| head::head_forward(tape, p, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trace {
            canvases,
            features,
            memory,
            heads,
        })
    }
}

/// Intermediate values of one forward pass, kept for diagnostics.
pub struct Trace {
    pub canvases: Vec<Var>,
    pub features: Vec<Var>,
    pub memory: Vec<Var>,
    pub heads: Vec<HeadOutput>,
}

/// A frame already aligned to its window's reference pose, pillarized, with
/// its k-NN graph and training targets.
#[derive(Clone, Debug)]
pub struct PreparedFrame {
    pub pillars: PillarSet,
    /// K actually used; smaller than configured only on frames with too few
    /// pillars.
    pub k: usize,
    pub graph: Option<PillarGraph>,
    /// Ground truth in the reference frame.
    pub gts: Vec<GroundTruthBox>,
    pub targets: Option<Targets>,
}

impl PreparedFrame {
    fn pmp_config(&self, base: &PmpConfig) -> PmpConfig {
        PmpConfig {
            k: self.k,
            steps: if self.graph.is_some() { base.steps } else { 0 },
            ..*base
        }
    }
}

/// Expresses `g` (in `from`'s sensor frame) in the sensor frame of `to`.
pub fn transfer_box(g: &GroundTruthBox, from: &Pose, to: &Pose) -> GroundTruthBox {
    let rel = from.relative_to(to);
    let v = rel.rotate([g.velocity[0], g.velocity[1], 0.0]);
    GroundTruthBox {
        bbox: Box3 {
            center: rel.apply(g.bbox.center),
            size: g.bbox.size,
            yaw: head::normalize_angle(g.bbox.yaw + rel.yaw()),
        },
        velocity: [v[0], v[1]],
        class: g.class,
    }
}

fn in_range(cfg: &PillarConfig, g: &GroundTruthBox) -> bool {
    let [x, y, _] = g.bbox.center;
    x >= cfg.x_range.0 && x < cfg.x_range.1 && y >= cfg.y_range.0 && y < cfg.y_range.1
}

/// A training or evaluation window: the last `seq_len` frames of a scene.
#[derive(Clone, Debug)]
pub struct Sample {
    pub frames: Vec<PreparedFrame>,
    /// Per last-frame ground truth, whether the object returned points.
    pub visible: Vec<bool>,
}

impl Sample {
    pub fn last(&self) -> &PreparedFrame {
        self.frames.last().expect("samples are never empty")
    }
}

/// Aligns, pillarizes and labels the window of `seq_len` frames ending at
/// `end` (inclusive).
pub fn prepare_window(
    config: &ModelConfig,
    grid: &AnchorGrid,
    frames: &[Frame],
    gts: &[Vec<GroundTruthBox>],
    visible: &[Vec<bool>],
    end: usize,
    seq_len: usize,
    with_targets: bool,
) -> Result<Sample> {
    if end >= frames.len() || seq_len == 0 || seq_len > end + 1 {
        return Err(Error::InvalidInput(format!(
            "window of {seq_len} ending at {end} does not fit {} frames",
            frames.len()
        )));
    }
    let start = end + 1 - seq_len;
    let reference = frames[end].pose;
    let aligned = align_window(&frames[start..=end])?;
    let mut out = Vec::with_capacity(seq_len);
    for (i, frame) in aligned.iter().enumerate() {
        let f = start + i;
        let pillars = pillarize(frame, &config.pillar)?;
        let v = pillars.len();
        let k = config.pmp.k.min(v.saturating_sub(1));
        let graph = if config.pmp.steps > 0 && k > 0 {
            Some(pmpnet::build_knn(&pillars.centroids, k)?)
        } else {
            None
        };
        let boxes: Vec<GroundTruthBox> = gts
            .get(f)
            .map(|g| g.iter().map(|b| transfer_box(b, &frames[f].pose, &reference)).collect())
            .unwrap_or_default();
        let boxes: Vec<GroundTruthBox> = boxes.into_iter().filter(|g| in_range(&config.pillar, g)).collect();
        let targets = if with_targets {
            Some(assign_targets(grid, &boxes, &config.anchors)?)
        } else {
            None
        };
        out.push(PreparedFrame {
            pillars,
            k: if graph.is_some() { k } else { config.pmp.k },
            graph,
            gts: boxes,
            targets,
        });
    }
    let vis = gts
        .get(end)
        .map(|g| {
            g.iter()
                .zip(visible.get(end).map(|v| v.as_slice()).unwrap_or(&[]))
                .filter(|(b, _)| in_range(&config.pillar, b))
                .map(|(_, &v)| v)
                .collect()
        })
        .unwrap_or_default();
    Ok(Sample { frames: out, visible: vis })
}

/// The window ending at the last frame of `scene`.
pub fn prepare_scene(config: &ModelConfig, grid: &AnchorGrid, scene: &Scene, seq_len: usize, with_targets: bool) -> Result<Sample> {
    prepare_window(
        config,
        grid,
        &scene.frames,
        &scene.gts,
        &scene.visible,
        scene.frames.len().saturating_sub(1),
        seq_len,
        with_targets,
    )
}
