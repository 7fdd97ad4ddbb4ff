//! Attentive spatiotemporal GRU over backbone feature maps.
//!
//! Each step applies spatial self-attention to the new input, warps the old
//! memory toward it with two deformable convolutions whose offsets come from
//! the memory and the motion map, and then runs a convolutional GRU cell.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// How consecutive frames are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Temporal {
    /// No memory: each frame's features go straight to the head.
    None,
    /// Plain convolutional GRU.
    ConvGru,
    /// Attention plus deformable alignment in front of the GRU.
    AstGru,
}

impl std::str::FromStr for Temporal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "convgru" => Ok(Self::ConvGru),
            "astgru" => Ok(Self::AstGru),
            _ => Err(Error::Config(format!("unknown temporal mode {s:?} (none, convgru, astgru)"))),
        }
    }
}

impl std::fmt::Display for Temporal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::ConvGru => "convgru",
            Self::AstGru => "astgru",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AstGruConfig {
    pub channels: usize,
    pub embed: usize,
    pub kernel: usize,
    /// Largest h·w the attention may run on.
    pub attn_budget: usize,
    pub temporal: Temporal,
}

impl AstGruConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            embed: (channels / 2).max(1),
            kernel: 3,
            attn_budget: 4096,
            temporal: Temporal::AstGru,
        }
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &AstGruConfig, rng: &mut ChaCha8Rng) {
    let (c, e, r) = (cfg.channels, cfg.embed, cfg.kernel);
    if cfg.temporal == Temporal::None {
        return;
    }
    if cfg.temporal == Temporal::AstGru {
        for n in ["q", "k", "v"] {
            store.uniform(&format!("sta.{n}.w"), &[e, c, 1, 1], c, rng);
        }
        store.uniform("sta.out.w", &[c, e, 1, 1], e, rng);
        for s in 1..=2 {
            store.zeros(&format!("tta.stage{s}.offset.w"), &[2 * r * r, 2 * c, r, r]);
            store.zeros(&format!("tta.stage{s}.offset.b"), &[2 * r * r]);
            store.uniform(&format!("tta.stage{s}.w"), &[c, c, r, r], c * r * r, rng);
        }
    }
    for g in ["z", "r", "h"] {
        store.uniform(&format!("gru.w{g}"), &[c, c, r, r], c * r * r, rng);
        store.uniform(&format!("gru.u{g}"), &[c, c, r, r], c * r * r, rng);
        store.zeros(&format!("gru.b{g}"), &[c]);
    }
}

/// X' = W_out * (softmax(Q Kᵀ) V) + X, softmax over keys for each query.
pub fn sta<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &AstGruConfig, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let l = s[1] * s[2];
    if l > cfg.attn_budget {
        return Err(Error::Config(format!(
            "attention over {l} positions exceeds the budget of {}",
            cfg.attn_budget
        )));
    }
    let embed = |tape: &mut Tape<T>, n: &str| -> Result<Var> {
        let y = tape.conv2d(x, p.get(&format!("sta.{n}.w"))?, 1, 0)?;
        let e = tape.shape(y)[0];
        tape.reshape(y, &[e, l])
    };
    let q = embed(tape, "q")?;
    let k = embed(tape, "k")?;
    let v = embed(tape, "v")?;
    let qt = tape.transpose(q)?;
    let logits = tape.matmul(qt, k)?;
    let attn = tape.softmax(logits, 1)?;
    let vt = tape.transpose(v)?;
    let mixed = tape.matmul(attn, vt)?;
    let mixed = tape.transpose(mixed)?;
    let e = tape.shape(mixed)[0];
    let mixed = tape.reshape(mixed, &[e, s[1], s[2]])?;
    let out = tape.conv2d(mixed, p.get("sta.out.w")?, 1, 0)?;
    tape.add(out, x)
}

/// Offsets Φ_R([H, H − X']) for TTA stage 1 or 2; 2r² channels.
pub fn predict_offsets<T: Real>(tape: &mut Tape<T>, p: &Bound, stage: usize, h: Var, x_att: Var) -> Result<Var> {
    if tape.shape(h) != tape.shape(x_att) {
        return Err(crate::error::dim_err("predict_offsets", tape.shape(h), tape.shape(x_att)));
    }
    let motion = tape.sub(h, x_att)?;
    let cat = tape.concat(&[h, motion], 0)?;
    let w = p.get(&format!("tta.stage{stage}.offset.w"))?;
    let r = tape.shape(w)[2];
    let off = tape.conv2d(cat, w, 1, r / 2)?;
    tape.add_bias(off, p.get(&format!("tta.stage{stage}.offset.b"))?, 0)
}

pub fn deformable_conv<T: Real>(tape: &mut Tape<T>, p: &Bound, stage: usize, h: Var, offsets: Var) -> Result<Var> {
    tape.deform_conv(h, offsets, p.get(&format!("tta.stage{stage}.w"))?)
}

/// Two stacked deformable alignments of the old memory toward `x_att`.
pub fn tta<T: Real>(tape: &mut Tape<T>, p: &Bound, h_prev: Var, x_att: Var) -> Result<Var> {
    let mut h = h_prev;
    for stage in 1..=2 {
        let off = predict_offsets(tape, p, stage, h, x_att)?;
        h = deformable_conv(tape, p, stage, h, off)?;
    }
    Ok(h)
}

pub fn conv_gru_cell<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, h: Var) -> Result<Var> {
    if tape.shape(h) != tape.shape(x) {
        return Err(crate::error::dim_err("conv_gru_cell", tape.shape(x), tape.shape(h)));
    }
    let gate = |tape: &mut Tape<T>, g: &str, state: Var| -> Result<Var> {
        let w = p.get(&format!("gru.w{g}"))?;
        let pad = tape.shape(w)[2] / 2;
        let a = tape.conv2d(x, w, 1, pad)?;
        let b = tape.conv2d(state, p.get(&format!("gru.u{g}"))?, 1, pad)?;
        let s = tape.add(a, b)?;
        tape.add_bias(s, p.get(&format!("gru.b{g}"))?, 0)
    };
    let z = gate(tape, "z", h)?;
    let z = tape.sigmoid(z);
    let r = gate(tape, "r", h)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h)?;
    let cand = gate(tape, "h", rh)?;
    let cand = tape.tanh(cand);
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

/// One recurrence step; returns H_t.
pub fn step<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &AstGruConfig, x: Var, h_prev: Var) -> Result<Var> {
    match cfg.temporal {
        Temporal::None => Ok(x),
        Temporal::ConvGru => conv_gru_cell(tape, p, x, h_prev),
        Temporal::AstGru => {
            let xa = sta(tape, p, cfg, x)?;
            let ha = tta(tape, p, h_prev, xa)?;
            conv_gru_cell(tape, p, xa, ha)
        }
    }
}

/// H_1..H_T from zero initial memory.
pub fn run_sequence<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &AstGruConfig, features: &[Var]) -> Result<Vec<Var>> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidInput("empty feature sequence".into()))?;
    let shape = tape.shape(*first).to_vec();
    let mut h = tape.constant(Tensor::zeros(&shape));
    let mut out = Vec::with_capacity(features.len());
    for &x in features {
        if tape.shape(x) != shape.as_slice() {
            return Err(crate::error::dim_err("run_sequence", &shape, tape.shape(x)));
        }
        h = step(tape, p, cfg, x, h)?;
        out.push(h);
    }
    Ok(out)
}
