//! Three-block 2D convolutional backbone. Each block's output is resampled to
//! the target stride and the three maps are concatenated along channels.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub stride: usize,
    pub kernel: usize,
    pub channels: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub blocks: Vec<BlockConfig>,
    pub up_channels: usize,
    pub target_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::with_widths(64, [64, 128, 256], 128)
    }
}

impl BackboneConfig {
    /// Strides (2, 2, 2), depths (3, 5, 5), 3×3 kernels, target stride 4.
    pub fn with_widths(in_channels: usize, channels: [usize; 3], up_channels: usize) -> Self {
        let blocks = channels
            .iter()
            .zip([3, 5, 5])
            .map(|(&c, layers)| BlockConfig {
                stride: 2,
                kernel: 3,
                channels: c,
                layers,
            })
            .collect();
        Self {
            in_channels,
            blocks,
            up_channels,
            target_stride: 4,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.len() * self.up_channels
    }

    pub fn cumulative_strides(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(1, |s, b| {
                *s *= b.stride;
                Some(*s)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.up_channels == 0 {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        for (b, s) in self.blocks.iter().zip(self.cumulative_strides()) {
            if b.kernel % 2 == 0 || b.stride == 0 || b.layers == 0 || b.channels == 0 {
                return Err(Error::Config(format!("bad backbone block {b:?}")));
            }
            let ok = match s.cmp(&self.target_stride) {
                std::cmp::Ordering::Less => self.target_stride % s == 0,
                std::cmp::Ordering::Equal => true,
                std::cmp::Ordering::Greater => s == 2 * self.target_stride,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "cannot resample stride {s} to target stride {}",
                    self.target_stride
                )));
            }
        }
        Ok(())
    }

    /// Output (C, h, w) for an input of spatial size H×W.
    pub fn output_shape(&self, h: usize, w: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let deepest = *self.cumulative_strides().last().expect("non-empty");
        if h % deepest != 0 || w % deepest != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("{h}×{w} is not divisible by the backbone stride {deepest}")));
        }
        Ok([self.out_channels(), h / self.target_stride, w / self.target_stride])
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) {
    let mut cin = cfg.in_channels;
    for (i, (b, s)) in cfg.blocks.iter().zip(cfg.cumulative_strides()).enumerate() {
        for j in 0..b.layers {
            let fan = cin * b.kernel * b.kernel;
            store.uniform(&format!("backbone.b{i}.l{j}.w"), &[b.channels, cin, b.kernel, b.kernel], fan, rng);
            store.zeros(&format!("backbone.b{i}.l{j}.b"), &[b.channels]);
            cin = b.channels;
        }
        let shape = if s < cfg.target_stride {
            [cfg.up_channels, b.channels, b.kernel, b.kernel]
        } else {
            [b.channels, cfg.up_channels, b.kernel, b.kernel]
        };
        store.uniform(&format!("backbone.up{i}.w"), &shape, b.channels * b.kernel * b.kernel, rng);
        store.zeros(&format!("backbone.up{i}.b"), &[cfg.up_channels]);
    }
}

fn conv_relu<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
    let y = tape.conv2d(x, p.get(&format!("{name}.w"))?, stride, pad)?;
    let y = tape.add_bias(y, p.get(&format!("{name}.b"))?, 0)?;
    Ok(tape.relu(y))
}

/// Runs block `i` on `x` (the previous block's output), returning the block
/// output before resampling.
pub fn block_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &BackboneConfig, i: usize, x: Var) -> Result<Var> {
    let b = cfg.blocks[i];
    let mut y = x;
    for j in 0..b.layers {
        let stride = if j == 0 { b.stride } else { 1 };
        y = conv_relu(tape, p, y, &format!("backbone.b{i}.l{j}"), stride, b.kernel / 2)?;
    }
    Ok(y)
}

/// Brings block `i`'s output at cumulative stride `s` to the target stride.
pub fn resample<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &BackboneConfig, i: usize, x: Var) -> Result<Var> {
    let b = cfg.blocks[i];
    let s = cfg.cumulative_strides()[i];
    let name = format!("backbone.up{i}");
    let pad = b.kernel / 2;
    if s < cfg.target_stride {
        return conv_relu(tape, p, x, &name, cfg.target_stride / s, pad);
    }
    let stride = s / cfg.target_stride;
    let y = tape.conv_transpose2d(x, p.get(&format!("{name}.w"))?, stride, pad, stride - 1)?;
    let y = tape.add_bias(y, p.get(&format!("{name}.b"))?, 0)?;
    Ok(tape.relu(y))
}

/// L×H×W canvas → C×(H/t)×(W/t) features.
pub fn backbone_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &BackboneConfig, canvas: Var) -> Result<Var> {
    let s = tape.shape(canvas).to_vec();
    if s.len() != 3 || s[0] != cfg.in_channels {
        return Err(Error::Shape(format!("backbone expects {} input channels, got {s:?}", cfg.in_channels)));
    }
    cfg.output_shape(s[1], s[2])?;
    let mut x = canvas;
    let mut outs = Vec::with_capacity(cfg.blocks.len());
    for i in 0..cfg.blocks.len() {
        x = block_forward(tape, p, cfg, i, x)?;
        outs.push(resample(tape, p, cfg, i, x)?);
    }
    tape.concat(&outs, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, project, random_tensor, DEFAULT_EPS};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn params(cfg: &BackboneConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut s, cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    fn run(cfg: &BackboneConfig, s: &ParamStore, x: Tensor<f32>) -> Tensor<f32> {
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let x = tape.constant(x);
        let y = backbone_forward(&mut tape, &p, cfg, x).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn desk_shape() {
        let cfg = BackboneConfig::default();
        let s = params(&cfg, 0);
        let x = random_tensor(&[64, 96, 96], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).cast();
        assert_eq!(run(&cfg, &s, x).shape(), &[384, 24, 24]);
        assert_eq!(cfg.cumulative_strides(), vec![2, 4, 8]);
    }

    #[test]
    fn full_range_shape() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.output_shape(400, 400).unwrap(), [384, 100, 100]);
        let s = params(&cfg, 0);
        let y = run(&cfg, &s, Tensor::zeros(&[64, 400, 400]));
        assert_eq!(y.shape(), &[384, 100, 100]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_extent_is_shape_error() {
        let cfg = BackboneConfig::with_widths(4, [4, 4, 4], 2);
        let s = params(&cfg, 0);
        let mut tape = Tape::<f32>::new();
        let p = s.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[4, 20, 24]));
        assert!(matches!(backbone_forward(&mut tape, &p, &cfg, x), Err(Error::Shape(_))));
    }

    #[test]
    fn shift_by_deepest_stride_shifts_output() {
        // Wide strip so that the checked cells' receptive fields touch neither
        // image edge in either run.
        let cfg = BackboneConfig::with_widths(3, [4, 6, 8], 3);
        let s = params(&cfg, 2);
        let (h, w, shift) = (8, 192, 8);
        let base = random_tensor(&[3, h, w], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let mut moved = Tensor::<f64>::zeros(&[3, h, w]);
        for c in 0..3 {
            for y in 0..h {
                for x in shift..w {
                    let at = moved.offset(&[c, y, x]);
                    moved.data_mut()[at] = base.get(&[c, y, x - shift]);
                }
            }
        }
        let (a, b) = (run(&cfg, &s, base.cast()), run(&cfg, &s, moved.cast()));
        let d = shift / cfg.target_stride;
        for c in 0..9 {
            for y in 0..h / 4 {
                for x in 20..=24 {
                    assert!((a.get(&[c, y, x]) - b.get(&[c, y, x + d])).abs() < 1e-5, "{c} {y} {x}");
                }
            }
        }
    }

    #[test]
    fn block_and_resample_gradients() {
        let cfg = BackboneConfig {
            blocks: vec![
                BlockConfig { stride: 2, kernel: 3, channels: 3, layers: 2 },
                BlockConfig { stride: 2, kernel: 3, channels: 2, layers: 1 },
                BlockConfig { stride: 2, kernel: 3, channels: 2, layers: 1 },
            ],
            ..BackboneConfig::with_widths(2, [3, 2, 2], 2)
        };
        let s = params(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&[2, 8, 8], -1.0, 1.0, &mut rng);
        let names = ["backbone.b0.l0.w", "backbone.b0.l1.w", "backbone.up0.w", "backbone.up2.w", "backbone.b2.l0.b"];
        let mut ins = vec![x];
        ins.extend(names.iter().map(|n| s.get(n).unwrap().cast::<f64>()));
        let e = max_relative_error(&ins, DEFAULT_EPS, |t, v| {
            let mut p = s.bind(t);
            for (n, &var) in names.iter().zip(&v[1..]) {
                p.replace(n, var)?;
            }
            let y = backbone_forward(t, &p, &cfg, v[0])?;
            project(t, y, 6)
        })
        .unwrap();
        assert!(e <= 1e-5, "{e}");
    }
}
