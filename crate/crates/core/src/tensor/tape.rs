use super::kernels::{self, ConvGeom, Corner};
use super::{split_axis, Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddBias {
        x: Var,
        b: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        c_out: usize,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        c_in: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    Bilinear {
        map: Var,
        points: Var,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        chunk: usize,
        start: usize,
        len: usize,
    },
    Scatter {
        values: Var,
        cells: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
        row: usize,
    },
    DeformConv {
        x: Var,
        offsets: Var,
        w: Var,
        kernel: usize,
    },
    Sum(Var),
    Focal {
        logits: Var,
        labels: Vec<T>,
        weights: Vec<T>,
        alpha: T,
        gamma: T,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
        weights: Vec<T>,
        delta: T,
    },
    L1 {
        pred: Var,
        target: Vec<T>,
        weights: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        outer: usize,
        n: usize,
        inner: usize,
        target: Vec<usize>,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::AddBias { .. } => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Softmax { .. } => "softmax",
            Op::Max { .. } => "max",
            Op::Bilinear { .. } => "bilinear_sample",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Scatter { .. } => "scatter_rows",
            Op::Gather { .. } => "gather_rows",
            Op::DeformConv { .. } => "deform_conv",
            Op::Sum(_) => "sum",
            Op::Focal { .. } => "sigmoid_focal",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::L1 { .. } => "l1",
            Op::SoftmaxCe { .. } => "softmax_ce",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Affine(x, _) | Op::Sigmoid(x) | Op::Tanh(x) | Op::Relu(x) | Op::Transpose(x) | Op::Reshape(x) | Op::Sum(x) => {
                vec![*x]
            }
            Op::AddBias { x, b, .. } => vec![*x, *b],
            Op::Conv2d { x, k, .. } | Op::ConvTranspose2d { x, k, .. } => vec![*x, *k],
            Op::Softmax { x, .. } | Op::Max { x, .. } | Op::Narrow { x, .. } | Op::Gather { x, .. } => vec![*x],
            Op::Bilinear { map, points } => vec![*map, *points],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Scatter { values, .. } => vec![*values],
            Op::DeformConv { x, offsets, w, .. } => vec![*x, *offsets, *w],
            Op::Focal { logits, .. } | Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::SmoothL1 { pred, .. } | Op::L1 { pred, .. } => vec![*pred],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One recorded operation, as exposed for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Reverse-mode tape. Values are immutable once recorded; [`Tape::backward`]
/// replays the records in exact reverse order.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every tracked value on a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn max_abs(&self, v: Var) -> Option<T> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| g.iter().fold(T::zero(), |m, x| m.max(x.abs())))
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| OpRecord {
                op: n.op.name(),
                inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                output: i,
            })
            .collect()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A tracked leaf (parameter or input whose gradient is wanted).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (da, db) = (self.data(a), self.data(b));
        let out = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 {
            da.iter().map(|&x| f(x, db[0])).collect()
        } else if da.len() == 1 {
            db.iter().map(|&y| f(da[0], y)).collect()
        } else {
            return Err(dim_err(name, &sa, &sb));
        };
        let shape = if da.len() == 1 && db.len() != 1 { sb } else { sa };
        Ok((shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Tensor::new(&s, d)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Tensor::new(&s, d)?, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Tensor::new(&s, d)?, Op::Mul(a, b)))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x);
        let d = v.data().iter().map(|&e| scale * e + shift).collect();
        let t = Tensor::new(v.shape(), d).expect("same shape");
        self.push(t, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|&e| f(e)).collect()).expect("same shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.unary(x, kernels::sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.unary(x, |e| e.tanh());
        self.push(t, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |e| if e > T::zero() || e.is_nan() { e } else { T::zero() });
        self.push(t, Op::Relu(x))
    }

    // ---- linear algebra & layout -------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(false, false, m, k, n, self.data(a), self.data(b), &mut out, false);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Adds `b` (length = extent of `axis`) along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || self.value(b).numel() != sx[axis] {
            return Err(dim_err("add_bias", &sx, self.shape(b)));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let bd = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for (i, &bv) in bd.iter().enumerate() {
                let base = (o * n + i) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        Ok(self.push(Tensor::new(&sx, out)?, Op::AddBias { x, b, outer, n, inner }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut chunks = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(dim_err("concat", &first, s));
            }
            shape[axis] += s[axis];
            chunks.push(s[axis] * inner);
        }
        let total: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.data(p)[o * c..(o + 1) * c]);
            }
        }
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
        ))
    }

    /// The slice `start..start+len` of `x` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::Shape(format!("narrow {start}+{len} on axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let chunk = n * inner;
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[o * chunk + start * inner..o * chunk + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Narrow {
                x,
                outer,
                chunk,
                start: start * inner,
                len: len * inner,
            },
        ))
    }

    /// Splits `x` along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            out.push(self.narrow(x, axis, start, n)?);
            start += n;
        }
        Ok(out)
    }

    /// Selects rows of `x` along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let row: usize = s[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::InvalidInput(format!("gather index {bad} out of range for {s:?}")));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Gather {
                x,
                idx: idx.to_vec(),
                row,
            },
        ))
    }

    /// Writes row `i` of `values` (P×L) at cell `coords[i] = (y, x)` of an
    /// L×H×W canvas; every other cell is zero.
    pub fn scatter_rows(&mut self, values: Var, coords: &[(usize, usize)], h: usize, w: usize) -> Result<Var> {
        let s = self.shape(values).to_vec();
        if s.len() != 2 || s[0] != coords.len() {
            return Err(Error::Shape(format!("scatter_rows values {s:?} with {} coords", coords.len())));
        }
        let l = s[1];
        let mut seen = vec![false; h * w];
        let mut cells = Vec::with_capacity(coords.len());
        for &(y, x) in coords {
            if y >= h || x >= w {
                return Err(Error::InvalidInput(format!("scatter coord ({y},{x}) outside {h}x{w}")));
            }
            let c = y * w + x;
            if seen[c] {
                return Err(Error::InvalidInput(format!("duplicate scatter coord ({y},{x})")));
            }
            seen[c] = true;
            cells.push(c);
        }
        let d = self.data(values);
        let hw = h * w;
        let mut out = vec![T::zero(); l * hw];
        for (p, &c) in cells.iter().enumerate() {
            for ch in 0..l {
                out[ch * hw + c] = d[p * l + ch];
            }
        }
        Ok(self.push(Tensor::new(&[l, h, w], out)?, Op::Scatter { values, cells }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    // ---- convolution -------------------------------------------------

    /// Cross-correlation of `x` (C_in×H×W) with `k` (C_out×C_in×r×r), zero padding.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || sk[2] != sk[3] {
            return Err(dim_err("conv2d", &sx, &sk));
        }
        if sk[2] % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel must be odd, got {}", sk[2])));
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sk[2], stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d output empty for input {sx:?}, kernel {sk:?}, stride {stride}, pad {pad}")))?;
        let c_out = sk[0];
        let col = kernels::im2col(self.data(x), &geom);
        let n = geom.col_cols();
        let mut out = vec![T::zero(); c_out * n];
        kernels::gemm(false, false, c_out, geom.col_rows(), n, self.data(k), &col, &mut out, false);
        Ok(self.push(
            Tensor::new(&[c_out, geom.out_h, geom.out_w], out)?,
            Op::Conv2d { x, k, geom, c_out },
        ))
    }

    /// Adjoint of [`Tape::conv2d`]: `x` is C_in×H×W, `k` is C_in×C_out×r×r,
    /// output extent `(H-1)·stride - 2·pad + r + out_pad`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize, pad: usize, out_pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[0] != sx[0] || sk[2] != sk[3] {
            return Err(dim_err("conv_transpose2d", &sx, &sk));
        }
        if !(1..=2).contains(&stride) || out_pad >= stride {
            return Err(Error::Shape(format!("conv_transpose2d stride {stride}, out_pad {out_pad}")));
        }
        let r = sk[2];
        let (c_in, c_out) = (sx[0], sk[1]);
        let oh = ((sx[1] - 1) * stride + r + out_pad) as isize - 2 * pad as isize;
        let ow = ((sx[2] - 1) * stride + r + out_pad) as isize - 2 * pad as isize;
        if oh < 1 || ow < 1 {
            return Err(Error::Shape(format!("conv_transpose2d output extent < 1 for {sx:?}")));
        }
        let geom = ConvGeom::new(c_out, oh as usize, ow as usize, r, stride, pad)
            .filter(|g| g.out_h == sx[1] && g.out_w == sx[2])
            .ok_or_else(|| Error::Shape(format!("conv_transpose2d geometry mismatch for {sx:?}")))?;
        let n = sx[1] * sx[2];
        let mut col = vec![T::zero(); geom.col_rows() * n];
        kernels::gemm(true, false, geom.col_rows(), c_in, n, self.data(k), self.data(x), &mut col, false);
        let mut out = vec![T::zero(); c_out * geom.in_h * geom.in_w];
        kernels::col2im(&col, &geom, &mut out);
        Ok(self.push(
            Tensor::new(&[c_out, geom.in_h, geom.in_w], out)?,
            Op::ConvTranspose2d { x, k, geom, c_in },
        ))
    }

    /// Deformable r×r convolution at stride 1: tap `m` of query `q` reads
    /// `x` bilinearly at `q + p_m + Δp_m`, zero outside the map.
    pub fn deform_conv(&mut self, x: Var, offsets: Var, w: Var) -> Result<Var> {
        let (sx, so, sw) = (self.shape(x).to_vec(), self.shape(offsets).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(dim_err("deform_conv", &sx, &sw));
        }
        let r = sw[2];
        if so != [2 * r * r, sx[1], sx[2]] {
            return Err(dim_err("deform_conv", &sx, &so));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let col = kernels::deform_im2col(self.data(x), self.data(offsets), c, h, wd, r);
        let c_out = sw[0];
        let mut out = vec![T::zero(); c_out * h * wd];
        kernels::gemm(false, false, c_out, c * r * r, h * wd, self.data(w), &col, &mut out, false);
        Ok(self.push(
            Tensor::new(&[c_out, h, wd], out)?,
            Op::DeformConv {
                x,
                offsets,
                w,
                kernel: r,
            },
        ))
    }

    /// Samples `map` (C×H×W) at continuous (row, col) `points` (Q×2); output Q×C.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let (sm, sp) = (self.shape(map).to_vec(), self.shape(points).to_vec());
        if sm.len() != 3 || sp.len() != 2 || sp[1] != 2 {
            return Err(dim_err("bilinear_sample", &sm, &sp));
        }
        let (c, h, w) = (sm[0], sm[1], sm[2]);
        let q = sp[0];
        let (md, pd) = (self.data(map), self.data(points));
        let mut out = vec![T::zero(); q * c];
        let mut corners = [Corner {
            idx: 0,
            w: T::zero(),
            dw_dr: T::zero(),
            dw_dc: T::zero(),
        }; 4];
        for i in 0..q {
            let n = kernels::bilinear_corners(pd[2 * i], pd[2 * i + 1], h, w, &mut corners);
            for ch in 0..c {
                let plane = &md[ch * h * w..(ch + 1) * h * w];
                out[i * c + ch] = corners[..n].iter().fold(T::zero(), |acc, k| acc + k.w * plane[k.idx]);
            }
        }
        Ok(self.push(Tensor::new(&[q, c], out)?, Op::Bilinear { map, points }))
    }

    // ---- reductions --------------------------------------------------

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).fold(T::neg_infinity(), |m, j| m.max(out[at(j)]));
                let mut z = T::zero();
                for j in 0..n {
                    let e = (out[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        Ok(self.push(Tensor::new(&s, out)?, Op::Softmax { x, outer, n, inner }))
    }

    /// Maximum along `axis` (axis removed). `mask`, when given, has the shape
    /// of `x`; `false` entries are treated as -∞. Ties go to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("max axis {axis} out of range for {s:?}")));
        }
        if let Some(m) = mask {
            if m.len() != self.value(x).numel() {
                return Err(Error::Shape(format!("max mask has {} entries for {s:?}", m.len())));
            }
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best: Option<(usize, T)> = None;
                for j in 0..n {
                    let at = (o * n + j) * inner + i;
                    if mask.is_some_and(|m| !m[at]) {
                        continue;
                    }
                    if best.is_none_or(|(_, v)| d[at] > v) {
                        best = Some((at, d[at]));
                    }
                }
                let (at, v) = best.ok_or_else(|| Error::InvalidInput("max over a fully masked slice".into()))?;
                out.push(v);
                argmax.push(at);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::Max { x, argmax }))
    }

    // ---- losses (scalar outputs) ---------------------------------------

    fn check_len(&self, v: Var, n: usize, what: &'static str) -> Result<()> {
        if self.value(v).numel() != n {
            return Err(dim_err(what, self.shape(v), &[n]));
        }
        Ok(())
    }

    /// Σ wᵢ·FL(xᵢ, yᵢ) with FL the binary sigmoid focal loss.
    pub fn sigmoid_focal(&mut self, logits: Var, labels: &[T], weights: &[T], alpha: T, gamma: T) -> Result<Var> {
        self.check_len(logits, labels.len(), "sigmoid_focal")?;
        self.check_len(logits, weights.len(), "sigmoid_focal")?;
        let d = self.data(logits);
        let mut total = T::zero();
        for i in 0..d.len() {
            if weights[i] == T::zero() {
                continue;
            }
            total = total + weights[i] * focal_value(d[i], labels[i], alpha, gamma);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::Focal {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                alpha,
                gamma,
            },
        ))
    }

    /// Σ wᵢ·smoothL1_δ(predᵢ - targetᵢ).
    pub fn smooth_l1(&mut self, pred: Var, target: &[T], weights: &[T], delta: T) -> Result<Var> {
        self.check_len(pred, target.len(), "smooth_l1")?;
        self.check_len(pred, weights.len(), "smooth_l1")?;
        let half = T::from_f64(0.5);
        let total = self
            .data(pred)
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((&p, &t), &w)| {
                let a = (p - t).abs();
                let l = if a < delta { half * a * a / delta } else { a - half * delta };
                w * l
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
                delta,
            },
        ))
    }

    /// Σ wᵢ·|predᵢ - targetᵢ|.
    pub fn l1(&mut self, pred: Var, target: &[T], weights: &[T]) -> Result<Var> {
        self.check_len(pred, target.len(), "l1")?;
        self.check_len(pred, weights.len(), "l1")?;
        let total = self
            .data(pred)
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((&p, &t), &w)| w * (p - t).abs())
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::L1 {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Weighted cross-entropy of the softmax along `axis`. `target` and
    /// `weights` index the remaining (outer, inner) positions.
    pub fn softmax_ce(&mut self, logits: Var, axis: usize, target: &[usize], weights: &[T]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("softmax_ce axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        if target.len() != outer * inner || weights.len() != outer * inner {
            return Err(dim_err("softmax_ce", &s, &[target.len()]));
        }
        if target.iter().any(|&t| t >= n) {
            return Err(Error::InvalidInput("softmax_ce target class out of range".into()));
        }
        let d = self.data(logits);
        let mut total = T::zero();
        for o in 0..outer {
            for i in 0..inner {
                let pos = o * inner + i;
                if weights[pos] == T::zero() {
                    continue;
                }
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).fold(T::neg_infinity(), |m, j| m.max(d[at(j)]));
                let lse = (0..n).map(|j| (d[at(j)] - mx).exp()).sum::<T>().ln() + mx;
                total = total + weights[pos] * (lse - d[at(target[pos])]);
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxCe {
                logits,
                outer,
                n,
                inner,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    /// Gradient of a binary op input, reducing over a broadcast scalar.
    fn accum_bcast(&self, grads: &mut [Option<Vec<T>>], v: Var, g: impl Iterator<Item = T>) {
        let scalar = self.value(v).numel() == 1;
        self.accum(grads, v, |slot| {
            if scalar {
                let s: T = g.sum();
                slot[0] = slot[0] + s;
            } else {
                slot.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b);
            }
        });
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                let n = y.len();
                self.accum_bcast(grads, *a, (0..n).map(|i| g[i]));
                self.accum_bcast(grads, *b, (0..n).map(|i| sign * g[i]));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let pick = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let n = y.len();
                self.accum_bcast(grads, *a, (0..n).map(|i| g[i] * pick(db, i)));
                self.accum_bcast(grads, *b, (0..n).map(|i| g[i] * pick(da, i)));
            }
            Op::Affine(x, s) => self.accum(grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + *s * b);
            }),
            Op::Sigmoid(x) => self.accum(grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + g[i] * y[i] * (T::one() - y[i]);
                }
            }),
            Op::Tanh(x) => self.accum(grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + g[i] * (T::one() - y[i] * y[i]);
                }
            }),
            Op::Relu(x) => self.accum(grads, *x, |d| {
                for i in 0..d.len() {
                    if y[i] > T::zero() {
                        d[i] = d[i] + g[i];
                    }
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |d| kernels::gemm(false, true, m, n, k, g, db, d, true));
                self.accum(grads, *b, |d| kernels::gemm(true, false, k, m, n, da, g, d, true));
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                self.accum(grads, *x, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] = d[i * n + j] + g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accum(grads, *x, |d| add_into(d, g)),
            Op::AddBias { x, b, outer, n, inner } => {
                self.accum(grads, *x, |d| add_into(d, g));
                self.accum(grads, *b, |d| {
                    for o in 0..*outer {
                        for (i, di) in d.iter_mut().enumerate() {
                            let base = (o * n + i) * inner;
                            *di = *di + g[base..base + inner].iter().copied().sum();
                        }
                    }
                });
            }
            Op::Conv2d { x, k, geom, c_out } => {
                let n = geom.col_cols();
                let rows = geom.col_rows();
                if self.nodes[k.0].needs_grad {
                    let col = kernels::im2col(self.data(*x), geom);
                    self.accum(grads, *k, |d| kernels::gemm(false, true, *c_out, n, rows, g, &col, d, true));
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcol = vec![T::zero(); rows * n];
                    kernels::gemm(true, false, rows, *c_out, n, self.data(*k), g, &mut dcol, false);
                    self.accum(grads, *x, |d| kernels::col2im(&dcol, geom, d));
                }
            }
            Op::ConvTranspose2d { x, k, geom, c_in } => {
                // dy is the image of a conv2d with geometry `geom`.
                let col = kernels::im2col(g, geom);
                let n = geom.col_cols();
                let rows = geom.col_rows();
                let (dx, dk) = (self.data(*x), self.data(*k));
                self.accum(grads, *x, |d| kernels::gemm(false, false, *c_in, rows, n, dk, &col, d, true));
                self.accum(grads, *k, |d| kernels::gemm(false, true, *c_in, n, rows, dx, &col, d, true));
            }
            Op::DeformConv { x, offsets, w, kernel } => {
                let s = self.shape(*x);
                let (c, h, wd) = (s[0], s[1], s[2]);
                let r = *kernel;
                let c_out = self.shape(*w)[0];
                let rows = c * r * r;
                let hw = h * wd;
                let (dx, doff, dw) = (self.data(*x), self.data(*offsets), self.data(*w));
                if self.nodes[w.0].needs_grad {
                    let col = kernels::deform_im2col(dx, doff, c, h, wd, r);
                    self.accum(grads, *w, |d| kernels::gemm(false, true, c_out, hw, rows, g, &col, d, true));
                }
                let need_x = self.nodes[x.0].needs_grad;
                let need_o = self.nodes[offsets.0].needs_grad;
                if need_x || need_o {
                    let mut dcol = vec![T::zero(); rows * hw];
                    kernels::gemm(true, false, rows, c_out, hw, dw, g, &mut dcol, false);
                    let mut gx = need_x.then(|| vec![T::zero(); c * hw]);
                    let mut go = need_o.then(|| vec![T::zero(); 2 * r * r * hw]);
                    kernels::deform_col2im(&dcol, dx, doff, c, h, wd, r, gx.as_deref_mut(), go.as_deref_mut());
                    if let Some(gx) = gx {
                        self.accum(grads, *x, |d| add_into(d, &gx));
                    }
                    if let Some(go) = go {
                        self.accum(grads, *offsets, |d| add_into(d, &go));
                    }
                }
            }
            Op::Bilinear { map, points } => {
                let sm = self.shape(*map);
                let (c, h, w) = (sm[0], sm[1], sm[2]);
                let (md, pd) = (self.data(*map), self.data(*points));
                let q = pd.len() / 2;
                let mut corners = [Corner {
                    idx: 0,
                    w: T::zero(),
                    dw_dr: T::zero(),
                    dw_dc: T::zero(),
                }; 4];
                let mut gm = self.nodes[map.0].needs_grad.then(|| vec![T::zero(); md.len()]);
                let mut gp = vec![T::zero(); pd.len()];
                for i in 0..q {
                    let nc = kernels::bilinear_corners(pd[2 * i], pd[2 * i + 1], h, w, &mut corners);
                    for ch in 0..c {
                        let go = g[i * c + ch];
                        let base = ch * h * w;
                        for k in &corners[..nc] {
                            if let Some(gm) = gm.as_mut() {
                                gm[base + k.idx] = gm[base + k.idx] + go * k.w;
                            }
                            gp[2 * i] = gp[2 * i] + go * md[base + k.idx] * k.dw_dr;
                            gp[2 * i + 1] = gp[2 * i + 1] + go * md[base + k.idx] * k.dw_dc;
                        }
                    }
                }
                if let Some(gm) = gm {
                    self.accum(grads, *map, |d| add_into(d, &gm));
                }
                self.accum(grads, *points, |d| add_into(d, &gp));
            }
            Op::Softmax { x, outer, n, inner } => self.accum(grads, *x, |d| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..*n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*n {
                            d[at(j)] = d[at(j)] + y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }),
            Op::Max { x, argmax } => self.accum(grads, *x, |d| {
                for (k, &at) in argmax.iter().enumerate() {
                    d[at] = d[at] + g[k];
                }
            }),
            Op::Concat { parts, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut off = 0;
                for (&p, &c) in parts.iter().zip(chunks) {
                    self.accum(grads, p, |d| {
                        for o in 0..*outer {
                            add_into(&mut d[o * c..(o + 1) * c], &g[o * total + off..o * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::Narrow {
                x,
                outer,
                chunk,
                start,
                len,
            } => self.accum(grads, *x, |d| {
                for o in 0..*outer {
                    add_into(&mut d[o * chunk + start..o * chunk + start + len], &g[o * len..(o + 1) * len]);
                }
            }),
            Op::Gather { x, idx, row } => self.accum(grads, *x, |d| {
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut d[i * row..(i + 1) * row], &g[k * row..(k + 1) * row]);
                }
            }),
            Op::Scatter { values, cells } => {
                let l = self.shape(*values)[1];
                let hw = y.len() / l.max(1);
                self.accum(grads, *values, |d| {
                    for (p, &c) in cells.iter().enumerate() {
                        for ch in 0..l {
                            d[p * l + ch] = d[p * l + ch] + g[ch * hw + c];
                        }
                    }
                });
            }
            Op::Sum(x) => self.accum(grads, *x, |d| d.iter_mut().for_each(|v| *v = *v + g[0])),
            Op::Focal {
                logits,
                labels,
                weights,
                alpha,
                gamma,
            } => {
                let xd = self.data(*logits);
                self.accum(grads, *logits, |d| {
                    for i in 0..d.len() {
                        if weights[i] != T::zero() {
                            d[i] = d[i] + g[0] * weights[i] * focal_grad(xd[i], labels[i], *alpha, *gamma);
                        }
                    }
                });
            }
            Op::SmoothL1 {
                pred,
                target,
                weights,
                delta,
            } => {
                let pd = self.data(*pred);
                self.accum(grads, *pred, |d| {
                    for i in 0..d.len() {
                        let e = pd[i] - target[i];
                        let s = if e.abs() < *delta { e / *delta } else { e.signum() };
                        d[i] = d[i] + g[0] * weights[i] * s;
                    }
                });
            }
            Op::L1 { pred, target, weights } => {
                let pd = self.data(*pred);
                self.accum(grads, *pred, |d| {
                    for i in 0..d.len() {
                        let e = pd[i] - target[i];
                        let s = if e == T::zero() { T::zero() } else { e.signum() };
                        d[i] = d[i] + g[0] * weights[i] * s;
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                outer,
                n,
                inner,
                target,
                weights,
            } => {
                let xd = self.data(*logits);
                self.accum(grads, *logits, |d| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let pos = o * inner + i;
                            if weights[pos] == T::zero() {
                                continue;
                            }
                            let at = |j: usize| (o * n + j) * inner + i;
                            let mx = (0..*n).fold(T::neg_infinity(), |m, j| m.max(xd[at(j)]));
                            let z: T = (0..*n).map(|j| (xd[at(j)] - mx).exp()).sum();
                            for j in 0..*n {
                                let p = (xd[at(j)] - mx).exp() / z;
                                let t = if j == target[pos] { T::one() } else { T::zero() };
                                d[at(j)] = d[at(j)] + g[0] * weights[pos] * (p - t);
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Binary focal loss of one logit; `y` is 1 for positives, 0 for negatives.
pub(crate) fn focal_value<T: Real>(x: T, y: T, alpha: T, gamma: T) -> T {
    let p = kernels::sigmoid(x);
    let one = T::one();
    // log p = -softplus(-x), log(1-p) = -softplus(x)
    let pos = alpha * (one - p).powf(gamma) * kernels::softplus(-x);
    let neg = (one - alpha) * p.powf(gamma) * kernels::softplus(x);
    y * pos + (one - y) * neg
}

fn focal_grad<T: Real>(x: T, y: T, alpha: T, gamma: T) -> T {
    let p = kernels::sigmoid(x);
    let one = T::one();
    let log_p = -kernels::softplus(-x);
    let log_q = -kernels::softplus(x);
    let pos = alpha * (one - p).powf(gamma) * (gamma * p * log_p - (one - p));
    let neg = (one - alpha) * p.powf(gamma) * (p - gamma * (one - p) * log_q);
    y * pos + (one - y) * neg
}
