//! Run configuration as a flat `key = value` text file. Every field has a key;
//! `#` starts a comment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::astgru::Temporal;
use crate::error::{Error, Result};
use crate::pointcloud::{PillarConfig, PillarSelection};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub pillar: PillarConfig,
    /// PFN width L.
    pub state_dim: usize,
    /// Message width L'.
    pub message_dim: usize,
    /// Message-passing steps S.
    pub steps: usize,
    /// Neighbors per node K.
    pub k: usize,
    pub block_channels: [usize; 3],
    pub up_channels: usize,
    pub target_stride: usize,
    /// Attention embedding width c'; 0 means half the feature width.
    pub embed: usize,
    pub attn_budget: usize,
    pub temporal: Temporal,
    /// Sequence length T.
    pub seq_len: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub data_seed: u64,
    pub sequences: usize,
    /// Frames per generated sequence; at least `seq_len`.
    pub frames: usize,
    pub occlude_last: f64,
    pub w_cls: f64,
    pub w_box: f64,
    pub w_vel: f64,
    pub w_dir: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// 96×96 pillars over 24 m, L = L' = 64, S = 3, K = 8, c = 96.
    pub fn desk() -> Self {
        Self {
            pillar: PillarConfig::desk(),
            state_dim: 64,
            message_dim: 64,
            steps: 3,
            k: 8,
            block_channels: [32, 64, 128],
            up_channels: 32,
            target_stride: 4,
            embed: 0,
            attn_budget: 4096,
            temporal: Temporal::AstGru,
            seq_len: 3,
            lr: 2e-4,
            epochs: 50,
            seed: 0,
            data_seed: 1,
            sequences: 20,
            frames: 3,
            occlude_last: 0.0,
            w_cls: 1.0,
            w_box: 2.0,
            w_vel: 0.1,
            w_dir: 0.2,
            score_threshold: 0.3,
            nms_iou: 0.5,
            max_detections: 100,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.seq_len) {
            return Err(Error::Config(format!("seq_len must be in 1..=5, got {}", self.seq_len)));
        }
        if self.frames < self.seq_len {
            return Err(Error::Config(format!("frames ({}) < seq_len ({})", self.frames, self.seq_len)));
        }
        if self.state_dim == 0 || self.message_dim == 0 || self.k == 0 || self.up_channels == 0 {
            return Err(Error::Config("model widths and k must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.occlude_last) {
            return Err(Error::Config("lr must be ≥ 0 and occlude_last in [0, 1]".into()));
        }
        self.pillar.grid()?;
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn range(key: &str, v: &str) -> Result<(f64, f64)> {
            let (a, b) = v
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("{key}: expected lo,hi")))?;
            Ok((num(key, a.trim())?, num(key, b.trim())?))
        }
        let p = &mut self.pillar;
        match key {
            "x_range" => p.x_range = range(key, value)?,
            "y_range" => p.y_range = range(key, value)?,
            "z_range" => p.z_range = range(key, value)?,
            "pillar_size" => p.pillar_size = num(key, value)?,
            "max_pillars" => p.max_pillars = num(key, value)?,
            "max_points" => p.max_points = num(key, value)?,
            "pillar_seed" => p.seed = num(key, value)?,
            "pillar_selection" => {
                p.selection = match value {
                    "densest" => PillarSelection::Densest,
                    "random" => PillarSelection::Random,
                    _ => return Err(Error::Config(format!("{key}: expected densest or random"))),
                }
            }
            "state_dim" => self.state_dim = num(key, value)?,
            "message_dim" => self.message_dim = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "block_channels" => {
                let v: Vec<usize> = value.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
                self.block_channels = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three widths")))?;
            }
            "up_channels" => self.up_channels = num(key, value)?,
            "target_stride" => self.target_stride = num(key, value)?,
            "embed" => self.embed = num(key, value)?,
            "attn_budget" => self.attn_budget = num(key, value)?,
            "temporal" => self.temporal = value.parse()?,
            "seq_len" => self.seq_len = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "sequences" => self.sequences = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "occlude_last" => self.occlude_last = num(key, value)?,
            "w_cls" => self.w_cls = num(key, value)?,
            "w_box" => self.w_box = num(key, value)?,
            "w_vel" => self.w_vel = num(key, value)?,
            "w_dir" => self.w_dir = num(key, value)?,
            "score_threshold" => self.score_threshold = num(key, value)?,
            "nms_iou" => self.nms_iou = num(key, value)?,
            "max_detections" => self.max_detections = num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let p = &self.pillar;
        let sel = match p.selection {
            PillarSelection::Densest => "densest",
            PillarSelection::Random => "random",
        };
        let b = self.block_channels;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("x_range", format!("{},{}", p.x_range.0, p.x_range.1));
        kv("y_range", format!("{},{}", p.y_range.0, p.y_range.1));
        kv("z_range", format!("{},{}", p.z_range.0, p.z_range.1));
        kv("pillar_size", p.pillar_size.to_string());
        kv("max_pillars", p.max_pillars.to_string());
        kv("max_points", p.max_points.to_string());
        kv("pillar_seed", p.seed.to_string());
        kv("pillar_selection", sel.into());
        kv("state_dim", self.state_dim.to_string());
        kv("message_dim", self.message_dim.to_string());
        kv("steps", self.steps.to_string());
        kv("k", self.k.to_string());
        kv("block_channels", format!("{},{},{}", b[0], b[1], b[2]));
        kv("up_channels", self.up_channels.to_string());
        kv("target_stride", self.target_stride.to_string());
        kv("embed", self.embed.to_string());
        kv("attn_budget", self.attn_budget.to_string());
        kv("temporal", self.temporal.to_string());
        kv("seq_len", self.seq_len.to_string());
        kv("lr", self.lr.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("sequences", self.sequences.to_string());
        kv("frames", self.frames.to_string());
        kv("occlude_last", self.occlude_last.to_string());
        kv("w_cls", self.w_cls.to_string());
        kv("w_box", self.w_box.to_string());
        kv("w_vel", self.w_vel.to_string());
        kv("w_dir", self.w_dir.to_string());
        kv("score_threshold", self.score_threshold.to_string());
        kv("nms_iou", self.nms_iou.to_string());
        kv("max_detections", self.max_detections.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}
