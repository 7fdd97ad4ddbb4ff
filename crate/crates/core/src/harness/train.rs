use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{Model, Sample, Trace};
use crate::error::{Error, Result};
use crate::head::{decode_and_nms, head_loss, DecodeConfig, Detection, LossWeights};
use crate::params::Bound;
use crate::tensor::{AdamConfig, AdamState, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    /// Seeds the per-epoch sample order.
    pub seed: u64,
    pub weights: LossWeights,
}

/// Mean per-sample losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub cls: f64,
    pub boxes: f64,
    pub vel: f64,
    pub dir: f64,
}

/// Loss summed over every frame of the window, plus its parts as values.
pub fn window_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model,
    p: &Bound,
    sample: &Sample,
    weights: &LossWeights,
) -> Result<(Var, [f64; 5], Trace)> {
    let trace = model.forward_traced(tape, p, &sample.frames)?;
    let mut total: Option<Var> = None;
    let mut parts = [0.0; 5];
    for (out, frame) in trace.heads.iter().zip(&sample.frames) {
        let t = frame
            .targets
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("training sample prepared without targets".into()))?;
        let l = head_loss(tape, out, t, weights)?;
        for (acc, v) in parts.iter_mut().zip([l.total, l.cls, l.boxes, l.vel, l.dir]) {
            *acc += tape.value(v).data()[0].to_f64();
        }
        total = Some(match total {
            Some(s) => tape.add(s, l.total)?,
            None => l.total,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidInput("empty window".into()))?;
    Ok((total, parts, trace))
}

/// Names the first stage whose value is not finite.
fn diagnose<T: Real>(tape: &Tape<T>, model: &Model, trace: &Trace) -> String {
    if let Some(name) = model.params.first_non_finite() {
        return format!("parameter {name}");
    }
    let finite = |v: Var| tape.value(v).all_finite();
    for (t, &v) in trace.canvases.iter().enumerate() {
        if !finite(v) {
            return format!("pillar canvas of frame {t}");
        }
    }
    for (t, &v) in trace.features.iter().enumerate() {
        if !finite(v) {
            return format!("backbone features of frame {t}");
        }
    }
    for (t, &v) in trace.memory.iter().enumerate() {
        if !finite(v) {
            return format!("temporal memory at step {t}");
        }
    }
    for (t, h) in trace.heads.iter().enumerate() {
        for (name, v) in [("cls", h.cls), ("box", h.boxes), ("vel", h.vel), ("dir", h.dir)] {
            if !finite(v) {
                return format!("head {name} map of frame {t}");
            }
        }
    }
    "loss".into()
}

/// Adam over the samples, one window per step. Aborts with
/// [`Error::NonFinite`] on a NaN or infinite loss or gradient.
pub fn train(model: &mut Model, samples: &[Sample], opts: &TrainOptions) -> Result<Vec<EpochStats>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let shapes: Vec<Vec<usize>> = model.params.entries().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = AdamState::<f32>::new(
        AdamConfig {
            lr: opts.lr,
            ..AdamConfig::default()
        },
        &shape_refs,
    );
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        for &i in &order {
            let mut tape = Tape::<f32>::new();
            let p = model.params.bind(&mut tape);
            let (loss, parts, trace) = window_loss(&mut tape, model, &p, &samples[i], &opts.weights)?;
            if !parts[0].is_finite() || model.params.first_non_finite().is_some() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, sample {i}: loss is {}; first non-finite tensor: {}",
                    parts[0],
                    diagnose(&tape, model, &trace)
                )));
            }
            let grads = tape.backward(loss)?;
            let g = p.gradients(&grads);
            if let Some(k) = g.iter().position(|t| !t.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, sample {i}: gradient of parameter {}",
                    model.params.entries()[k].0
                )));
            }
            let grefs: Vec<&Tensor<f32>> = g.iter().collect();
            adam.step(&mut model.params.tensors_mut(), &grefs)?;
            for (s, v) in sums.iter_mut().zip(parts) {
                *s += v;
            }
        }
        let n = samples.len() as f64;
        curve.push(EpochStats {
            epoch,
            total: sums[0] / n,
            cls: sums[1] / n,
            boxes: sums[2] / n,
            vel: sums[3] / n,
            dir: sums[4] / n,
        });
    }
    Ok(curve)
}

/// Tab-separated loss curve.
pub fn format_curve(curve: &[EpochStats]) -> String {
    let mut s = String::from("epoch\tloss\tcls\tbox\tvel\tdir\n");
    for e in curve {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", e.epoch, e.total, e.cls, e.boxes, e.vel, e.dir);
    }
    s
}

/// Detections on the last frame of the window, in its sensor coordinates.
pub fn detect(model: &Model, sample: &Sample, decode: &DecodeConfig) -> Result<Vec<Detection>> {
    let grid = model.config.anchor_grid()?;
    let mut tape = Tape::<f32>::new();
    let p = model.params.bind(&mut tape);
    let heads = model.forward(&mut tape, &p, &sample.frames)?;
    let h = heads.last().ok_or_else(|| Error::InvalidInput("empty window".into()))?;
    decode_and_nms(
        tape.value(h.cls),
        tape.value(h.boxes),
        tape.value(h.vel),
        tape.value(h.dir),
        &grid,
        decode,
    )
}
