//! Minimal reverse-mode automatic differentiation on flat `f32` tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Forward methods record the
//! operation and its operands; [`Tape::backward`] replays the tape in reverse
//! to populate gradients. A tape and its tensors are confined to one thread;
//! independent tapes may run in parallel.

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Fixed bilinear resampling grid: for each output pixel, up to four input
/// taps (flat spatial index, weight). Weights of out-of-range taps are zero.
#[derive(Clone, Debug)]
pub struct SampleGrid {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub taps: Vec<[(u32, f32); 4]>,
}

impl SampleGrid {
    /// Grid mapping each output pixel to source coordinates `(sy, sx)` with
    /// bilinear weights; sources outside the image contribute zero (zero fill).
    pub fn from_source_coords(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        coords: impl Iterator<Item = (f32, f32)>,
    ) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for (sy, sx) in coords {
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let mut t = [(0u32, 0.0f32); 4];
            let mut i = 0;
            for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                    let yy = y0 as i64 + dy;
                    let xx = x0 as i64 + dx;
                    let wgt = wy * wx;
                    if yy >= 0 && (yy as usize) < in_h && xx >= 0 && (xx as usize) < in_w && wgt != 0.0
                    {
                        t[i] = ((yy as usize * in_w + xx as usize) as u32, wgt);
                    }
                    i += 1;
                }
            }
            taps.push(t);
        }
        SampleGrid {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, f32),
    MulScalar(Var, f32),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    TransposeConv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    BroadcastScale {
        x: Var,
        scale: Var,
        axis: usize,
    },
    BiasAdd {
        x: Var,
        bias: Var,
        axis: usize,
    },
    AvgPool2d {
        x: Var,
        k: usize,
    },
    NearestUpsample2d {
        x: Var,
        factor: usize,
    },
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    RoundSte(Var),
    SampleBilinear {
        x: Var,
        grid: std::rc::Rc<SampleGrid>,
    },
    BlockDct8 {
        x: Var,
        inverse: bool,
    },
    BceWithLogits {
        logits: Var,
        targets: Var,
    },
}

struct Node {
    data: Vec<f32>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Per-axis broadcast layout: (outer, axis_len, inner) for a flat tensor.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, data: Vec<f32>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} does not hold {} elements", shape, data.len()),
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<f32>, shape: &[usize]) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f32) -> Var {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call, if this var was reached.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite forward output"
        );
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let data: Vec<f32> = self.data(a).iter().map(|x| x + s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(data, shape, rg, Op::AddScalar(a, s)))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let data: Vec<f32> = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(data, shape, rg, Op::MulScalar(a, s)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(data, vec![m, n], rg, Op::Matmul(a, b)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?}, kernel {:?} (want (n,c,h,w) x (o,c,k,k))", sx, sw),
            });
        }
        let (n, c, h, w_) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || w_ + 2 * pad < k {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {} exceeds padded input {}x{}", k, h + 2 * pad, w_ + 2 * pad),
            });
        }
        let (oh, ow) = kernels::conv2d_out_dims(h, w_, k, stride, pad);
        let data = kernels::conv2d(self.data(x), n, c, h, w_, self.data(w), o, k, stride, pad);
        let rg = self.rg(&[x, w]);
        Ok(self.push(data, vec![n, o, oh, ow], rg, Op::Conv2d { x, w, stride, pad }))
    }

    pub fn transpose_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "transpose_conv2d",
                detail: format!("input {:?}, kernel {:?} (want (n,c,h,w) x (c,o,k,k))", sx, sw),
            });
        }
        let (n, c, h, w_) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[1], sw[2]);
        let oh = (h - 1) * stride + k;
        let ow = (w_ - 1) * stride + k;
        if oh < 2 * pad || ow < 2 * pad {
            return Err(Error::ShapeMismatch {
                op: "transpose_conv2d",
                detail: format!("padding {} too large for output {}x{}", pad, oh, ow),
            });
        }
        let data =
            kernels::transpose_conv2d(self.data(x), n, c, h, w_, self.data(w), o, k, stride, pad);
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            data,
            vec![n, o, oh - 2 * pad, ow - 2 * pad],
            rg,
            Op::TransposeConv2d { x, w, stride, pad },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f32> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(data, shape, rg, Op::Relu(x)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        let data: Vec<f32> = self
            .data(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(data, shape, rg, Op::LeakyRelu(x, slope)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f32> = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(data, shape, rg, Op::Sigmoid(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len() as f32;
        let s: f32 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s / n], vec![1], rg, Op::Mean(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f32 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s], vec![1], rg, Op::Sum(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(x), shape),
            });
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(data, shape.to_vec(), rg, Op::Reshape(x)))
    }

    /// Multiply by a per-`axis` scale vector, broadcast over all other axes.
    pub fn broadcast_scale(&mut self, x: Var, scale: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || self.data(scale).len() != sx[axis] {
            return Err(Error::ShapeMismatch {
                op: "broadcast_scale",
                detail: format!(
                    "scale of {} entries against axis {} of {:?}",
                    self.data(scale).len(),
                    axis,
                    sx
                ),
            });
        }
        let (outer, alen, inner) = axis_layout(&sx, axis);
        let mut data = self.data(x).to_vec();
        let sc = self.data(scale);
        for oi in 0..outer {
            for ai in 0..alen {
                let s = sc[ai];
                let base = (oi * alen + ai) * inner;
                for v in &mut data[base..base + inner] {
                    *v *= s;
                }
            }
        }
        let rg = self.rg(&[x, scale]);
        Ok(self.push(data, sx, rg, Op::BroadcastScale { x, scale, axis }))
    }

    /// Add a per-`axis` bias vector, broadcast over all other axes.
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || self.data(bias).len() != sx[axis] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                detail: format!(
                    "bias of {} entries against axis {} of {:?}",
                    self.data(bias).len(),
                    axis,
                    sx
                ),
            });
        }
        let (outer, alen, inner) = axis_layout(&sx, axis);
        let mut data = self.data(x).to_vec();
        let bs = self.data(bias);
        for oi in 0..outer {
            for ai in 0..alen {
                let b = bs[ai];
                let base = (oi * alen + ai) * inner;
                for v in &mut data[base..base + inner] {
                    *v += b;
                }
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(data, sx, rg, Op::BiasAdd { x, bias, axis }))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] % k != 0 || sx[3] % k != 0 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2d",
                detail: format!("window {} over {:?}", k, sx),
            });
        }
        let data = kernels::avg_pool2d(self.data(x), sx[0], sx[1], sx[2], sx[3], k);
        let rg = self.rg(&[x]);
        Ok(self.push(
            data,
            vec![sx[0], sx[1], sx[2] / k, sx[3] / k],
            rg,
            Op::AvgPool2d { x, k },
        ))
    }

    pub fn nearest_upsample2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || factor == 0 {
            return Err(Error::ShapeMismatch {
                op: "nearest_upsample2d",
                detail: format!("factor {} over {:?}", factor, sx),
            });
        }
        let data = kernels::nearest_upsample2d(self.data(x), sx[0], sx[1], sx[2], sx[3], factor);
        let rg = self.rg(&[x]);
        Ok(self.push(
            data,
            vec![sx[0], sx[1], sx[2] * factor, sx[3] * factor],
            rg,
            Op::NearestUpsample2d { x, factor },
        ))
    }

    /// Clamp to [lo, hi]. Backward is straight-through (identity), so
    /// gradients keep flowing through saturated values.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        let data: Vec<f32> = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(data, shape, rg, Op::Clamp { x, lo, hi }))
    }

    /// Round to nearest integer with a straight-through backward.
    pub fn round_ste(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f32> = self.data(x).iter().map(|v| v.round()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(data, shape, rg, Op::RoundSte(x)))
    }

    /// Bilinear gather along a fixed grid, applied per channel of (n,c,h,w).
    pub fn sample_bilinear(&mut self, x: Var, grid: std::rc::Rc<SampleGrid>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] != grid.in_h || sx[3] != grid.in_w {
            return Err(Error::ShapeMismatch {
                op: "sample_bilinear",
                detail: format!("grid {}x{} over {:?}", grid.in_h, grid.in_w, sx),
            });
        }
        let planes = sx[0] * sx[1];
        let in_sz = grid.in_h * grid.in_w;
        let out_sz = grid.out_h * grid.out_w;
        let mut data = vec![0.0f32; planes * out_sz];
        for p in 0..planes {
            let src = &self.data(x)[p * in_sz..(p + 1) * in_sz];
            for (pi, taps) in grid.taps.iter().enumerate() {
                let mut s = 0.0f32;
                for &(idx, w) in taps {
                    s += w * src[idx as usize];
                }
                data[p * out_sz + pi] = s;
            }
        }
        let shape = vec![sx[0], sx[1], grid.out_h, grid.out_w];
        let rg = self.rg(&[x]);
        Ok(self.push(data, shape, rg, Op::SampleBilinear { x, grid }))
    }

    /// Blockwise orthonormal 8x8 DCT (or its inverse) per channel of (n,c,h,w).
    pub fn block_dct8(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] % 8 != 0 || sx[3] % 8 != 0 {
            return Err(Error::ShapeMismatch {
                op: "block_dct8",
                detail: format!("{:?} must be (n,c,8a,8b)", sx),
            });
        }
        let data = kernels::block_dct8(self.data(x), sx[0] * sx[1], sx[2], sx[3], inverse);
        let rg = self.rg(&[x]);
        Ok(self.push(data, sx, rg, Op::BlockDct8 { x, inverse }))
    }

    /// Summed binary cross-entropy with logits: sum_i softplus(l_i) - t_i*l_i.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.same_shape("bce_with_logits", logits, targets)?;
        let s: f32 = self
            .data(logits)
            .iter()
            .zip(self.data(targets))
            .map(|(&l, &t)| kernels::softplus(l) - t * l)
            .sum();
        let rg = self.rg(&[logits, targets]);
        Ok(self.push(vec![s], vec![1], rg, Op::BceWithLogits { logits, targets }))
    }

    /// Reverse pass from a scalar loss; populates gradients of every
    /// `requires_grad` node reachable from it. Unreached leaves read as zero.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy);
            self.grads[i] = Some(gy);
        }
        // leaves that require grad but were never reached hold zeros
        for i in 0..n {
            if self.nodes[i].requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; self.nodes[i].data.len()]);
            }
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contrib: &[f32]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
        for (a, b) in g.iter_mut().zip(contrib) {
            *a += b;
        }
    }

    fn backprop_node(&mut self, i: usize, gy: &[f32]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, gy);
                self.accum(b, gy);
            }
            Op::Sub(a, b) => {
                self.accum(a, gy);
                let neg: Vec<f32> = gy.iter().map(|v| -v).collect();
                self.accum(b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f32> = gy.iter().zip(self.data(b)).map(|(g, v)| g * v).collect();
                let gb: Vec<f32> = gy.iter().zip(self.data(a)).map(|(g, v)| g * v).collect();
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            Op::AddScalar(a, _) => self.accum(a, gy),
            Op::MulScalar(a, s) => {
                let ga: Vec<f32> = gy.iter().map(|g| g * s).collect();
                self.accum(a, &ga);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].requires_grad {
                    // dA = dY * B^T
                    let bt = transpose2d(self.data(b), k, n);
                    let ga = kernels::matmul(gy, &bt, m, n, k);
                    self.accum(a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T * dY
                    let at = transpose2d(self.data(a), m, k);
                    let gb = kernels::matmul(&at, gy, k, m, n);
                    self.accum(b, &gb);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                let (n, c, h, w_) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, k) = (sw[0], sw[2]);
                let (oh, ow) = kernels::conv2d_out_dims(h, w_, k, stride, pad);
                let cols = oh * ow;
                let ckk = c * k * k;
                let plane = c * h * w_;
                let need_gx = self.nodes[x.0].requires_grad;
                let need_gw = self.nodes[w.0].requires_grad;
                let mut gx = if need_gx { vec![0.0f32; n * plane] } else { vec![] };
                let mut gw = if need_gw { vec![0.0f32; o * ckk] } else { vec![] };
                for ni in 0..n {
                    let gyi = &gy[ni * o * cols..(ni + 1) * o * cols];
                    if need_gw {
                        let col =
                            kernels::im2col(&self.data(x)[ni * plane..(ni + 1) * plane], c, h, w_, k, stride, pad);
                        // dW += dY (o x cols) * col^T (cols x ckk)
                        let colt = transpose2d(&col, ckk, cols);
                        let d = kernels::matmul(gyi, &colt, o, cols, ckk);
                        for (a, b) in gw.iter_mut().zip(&d) {
                            *a += b;
                        }
                    }
                    if need_gx {
                        // dcol = W^T (ckk x o) * dY (o x cols)
                        let wt = transpose2d(self.data(w), o, ckk);
                        let dcol = kernels::matmul(&wt, gyi, ckk, o, cols);
                        let dxi = kernels::col2im(&dcol, c, h, w_, k, stride, pad);
                        for (a, b) in gx[ni * plane..(ni + 1) * plane].iter_mut().zip(&dxi) {
                            *a += b;
                        }
                    }
                }
                if need_gx {
                    self.accum(x, &gx);
                }
                if need_gw {
                    self.accum(w, &gw);
                }
            }
            Op::TransposeConv2d { x, w, stride, pad } => {
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                let (n, c, h, w_) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, k) = (sw[1], sw[2]);
                let (oh, ow) = {
                    let s = self.shape(Var(i));
                    (s[2], s[3])
                };
                let need_gx = self.nodes[x.0].requires_grad;
                let need_gw = self.nodes[w.0].requires_grad;
                let mut gx = if need_gx { vec![0.0f32; n * c * h * w_] } else { vec![] };
                let mut gw = if need_gw { vec![0.0f32; c * o * k * k] } else { vec![] };
                for ni in 0..n {
                    for ci in 0..c {
                        for oi in 0..o {
                            let gyp = &gy[(ni * o + oi) * oh * ow..][..oh * ow];
                            let wp = &self.data(w)[(ci * o + oi) * k * k..][..k * k];
                            let xp = &self.data(x)[(ni * c + ci) * h * w_..][..h * w_];
                            for iy in 0..h {
                                for ix in 0..w_ {
                                    let xv = xp[iy * w_ + ix];
                                    let mut acc = 0.0f32;
                                    for ky in 0..k {
                                        let oy = (iy * stride + ky) as isize - pad as isize;
                                        if oy < 0 || oy >= oh as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ox = (ix * stride + kx) as isize - pad as isize;
                                            if ox < 0 || ox >= ow as isize {
                                                continue;
                                            }
                                            let g = gyp[oy as usize * ow + ox as usize];
                                            acc += g * wp[ky * k + kx];
                                            if need_gw {
                                                gw[(ci * o + oi) * k * k + ky * k + kx] += g * xv;
                                            }
                                        }
                                    }
                                    if need_gx {
                                        gx[(ni * c + ci) * h * w_ + iy * w_ + ix] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                if need_gx {
                    self.accum(x, &gx);
                }
                if need_gw {
                    self.accum(w, &gw);
                }
            }
            Op::Relu(a) => {
                let ga: Vec<f32> = gy
                    .iter()
                    .zip(self.data(a))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(a, &ga);
            }
            Op::LeakyRelu(a, slope) => {
                let ga: Vec<f32> = gy
                    .iter()
                    .zip(self.data(a))
                    .map(|(g, &v)| if v >= 0.0 { *g } else { g * slope })
                    .collect();
                self.accum(a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f32> = gy
                    .iter()
                    .zip(self.data(Var(i)))
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                self.accum(a, &ga);
            }
            Op::Mean(a) => {
                let n = self.data(a).len() as f32;
                let ga = vec![gy[0] / n; self.data(a).len()];
                self.accum(a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![gy[0]; self.data(a).len()];
                self.accum(a, &ga);
            }
            Op::Reshape(a) => self.accum(a, gy),
            Op::BroadcastScale { x, scale, axis } => {
                let sx = self.shape(x).to_vec();
                let (outer, alen, inner) = axis_layout(&sx, axis);
                if self.nodes[x.0].requires_grad {
                    let sc = self.data(scale).to_vec();
                    let mut gx = gy.to_vec();
                    for oi in 0..outer {
                        for ai in 0..alen {
                            let base = (oi * alen + ai) * inner;
                            for v in &mut gx[base..base + inner] {
                                *v *= sc[ai];
                            }
                        }
                    }
                    self.accum(x, &gx);
                }
                if self.nodes[scale.0].requires_grad {
                    let mut gs = vec![0.0f32; alen];
                    let xd = self.data(x);
                    for oi in 0..outer {
                        for ai in 0..alen {
                            let base = (oi * alen + ai) * inner;
                            let mut s = 0.0f32;
                            for t in 0..inner {
                                s += gy[base + t] * xd[base + t];
                            }
                            gs[ai] += s;
                        }
                    }
                    self.accum(scale, &gs);
                }
            }
            Op::BiasAdd { x, bias, axis } => {
                self.accum(x, gy);
                if self.nodes[bias.0].requires_grad {
                    let sx = self.shape(x).to_vec();
                    let (outer, alen, inner) = axis_layout(&sx, axis);
                    let mut gb = vec![0.0f32; alen];
                    for oi in 0..outer {
                        for ai in 0..alen {
                            let base = (oi * alen + ai) * inner;
                            for t in 0..inner {
                                gb[ai] += gy[base + t];
                            }
                        }
                    }
                    self.accum(bias, &gb);
                }
            }
            Op::AvgPool2d { x, k } => {
                let sx = self.shape(x).to_vec();
                let (n, c, h, w_) = (sx[0], sx[1], sx[2], sx[3]);
                let (oh, ow) = (h / k, w_ / k);
                let inv = 1.0 / (k * k) as f32;
                let mut gx = vec![0.0f32; n * c * h * w_];
                for p in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gy[p * oh * ow + oy * ow + ox] * inv;
                            for ky in 0..k {
                                for kx in 0..k {
                                    gx[p * h * w_ + (oy * k + ky) * w_ + ox * k + kx] += g;
                                }
                            }
                        }
                    }
                }
                self.accum(x, &gx);
            }
            Op::NearestUpsample2d { x, factor } => {
                let sx = self.shape(x).to_vec();
                let (n, c, h, w_) = (sx[0], sx[1], sx[2], sx[3]);
                let (oh, ow) = (h * factor, w_ * factor);
                let mut gx = vec![0.0f32; n * c * h * w_];
                for p in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gx[p * h * w_ + (oy / factor) * w_ + ox / factor] +=
                                gy[p * oh * ow + oy * ow + ox];
                        }
                    }
                }
                self.accum(x, &gx);
            }
            Op::Clamp { x, .. } => self.accum(x, gy), // straight-through
            Op::RoundSte(x) => self.accum(x, gy),     // straight-through
            Op::SampleBilinear { x, grid } => {
                let sx = self.shape(x).to_vec();
                let planes = sx[0] * sx[1];
                let in_sz = grid.in_h * grid.in_w;
                let out_sz = grid.out_h * grid.out_w;
                let mut gx = vec![0.0f32; planes * in_sz];
                for p in 0..planes {
                    for (pi, taps) in grid.taps.iter().enumerate() {
                        let g = gy[p * out_sz + pi];
                        for &(idx, w) in taps {
                            gx[p * in_sz + idx as usize] += g * w;
                        }
                    }
                }
                self.accum(x, &gx);
            }
            Op::BlockDct8 { x, inverse } => {
                // transform is orthonormal: grad is the opposite transform
                let sx = self.shape(x).to_vec();
                let gx = kernels::block_dct8(gy, sx[0] * sx[1], sx[2], sx[3], !inverse);
                self.accum(x, &gx);
            }
            Op::BceWithLogits { logits, targets } => {
                if self.nodes[logits.0].requires_grad {
                    let gl: Vec<f32> = self
                        .data(logits)
                        .iter()
                        .zip(self.data(targets))
                        .map(|(&l, &t)| gy[0] * (kernels::sigmoid(l) - t))
                        .collect();
                    self.accum(logits, &gl);
                }
            }
        }
    }

    /// Forward re-evaluation of the whole tape in `f64`, with some leaves
    /// overridden. Returns node values, a hash of all branch decisions taken
    /// by kink operations, and whether any kink op evaluated inside a
    /// saturated/flat region (where the recorded straight-through gradient is
    /// a surrogate, not the true derivative).
    pub(crate) fn replay_f64(
        &self,
        overrides: &std::collections::HashMap<usize, Vec<f64>>,
    ) -> ReplayEval {
        let n = self.nodes.len();
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut kink = false;
        let mix = |h: &mut u64, v: u64| {
            *h ^= v;
            *h = h.wrapping_mul(0x100000001b3);
        };
        for i in 0..n {
            let node = &self.nodes[i];
            let v: Vec<f64> = match &node.op {
                Op::Leaf => overrides
                    .get(&i)
                    .cloned()
                    .unwrap_or_else(|| node.data.iter().map(|&x| x as f64).collect()),
                Op::Add(a, b) => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x + y).collect(),
                Op::Sub(a, b) => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x - y).collect(),
                Op::Mul(a, b) => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x * y).collect(),
                Op::AddScalar(a, s) => vals[a.0].iter().map(|x| x + *s as f64).collect(),
                Op::MulScalar(a, s) => vals[a.0].iter().map(|x| x * *s as f64).collect(),
                Op::Matmul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let nn = self.shape(*b)[1];
                    kernels::matmul(&vals[a.0], &vals[b.0], m, k, nn)
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let sx = self.shape(*x);
                    let sw = self.shape(*w);
                    kernels::conv2d(
                        &vals[x.0], sx[0], sx[1], sx[2], sx[3], &vals[w.0], sw[0], sw[2], *stride,
                        *pad,
                    )
                }
                Op::TransposeConv2d { x, w, stride, pad } => {
                    let sx = self.shape(*x);
                    let sw = self.shape(*w);
                    let full = kernels::transpose_conv2d(
                        &vals[x.0], sx[0], sx[1], sx[2], sx[3], &vals[w.0], sw[1], sw[2], *stride,
                        *pad,
                    );
                    full
                }
                Op::Relu(a) => {
                    let mut out = Vec::with_capacity(vals[a.0].len());
                    for &x in &vals[a.0] {
                        mix(&mut hash, (x > 0.0) as u64);
                        if x.abs() < 1e-9 {
                            kink = true;
                        }
                        out.push(x.max(0.0));
                    }
                    out
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope as f64;
                    let mut out = Vec::with_capacity(vals[a.0].len());
                    for &x in &vals[a.0] {
                        mix(&mut hash, (x >= 0.0) as u64);
                        if x.abs() < 1e-9 {
                            kink = true;
                        }
                        out.push(if x >= 0.0 { x } else { s * x });
                    }
                    out
                }
                Op::Sigmoid(a) => vals[a.0].iter().map(|&x| kernels::sigmoid(x)).collect(),
                Op::Mean(a) => {
                    let s: f64 = vals[a.0].iter().sum();
                    vec![s / vals[a.0].len() as f64]
                }
                Op::Sum(a) => vec![vals[a.0].iter().sum()],
                Op::Reshape(a) => vals[a.0].clone(),
                Op::BroadcastScale { x, scale, axis } => {
                    let sx = self.shape(*x);
                    let (outer, alen, inner) = axis_layout(sx, *axis);
                    let mut out = vals[x.0].clone();
                    for oi in 0..outer {
                        for ai in 0..alen {
                            let s = vals[scale.0][ai];
                            let base = (oi * alen + ai) * inner;
                            for v in &mut out[base..base + inner] {
                                *v *= s;
                            }
                        }
                    }
                    out
                }
                Op::BiasAdd { x, bias, axis } => {
                    let sx = self.shape(*x);
                    let (outer, alen, inner) = axis_layout(sx, *axis);
                    let mut out = vals[x.0].clone();
                    for oi in 0..outer {
                        for ai in 0..alen {
                            let b = vals[bias.0][ai];
                            let base = (oi * alen + ai) * inner;
                            for v in &mut out[base..base + inner] {
                                *v += b;
                            }
                        }
                    }
                    out
                }
                Op::AvgPool2d { x, k } => {
                    let sx = self.shape(*x);
                    kernels::avg_pool2d(&vals[x.0], sx[0], sx[1], sx[2], sx[3], *k)
                }
                Op::NearestUpsample2d { x, factor } => {
                    let sx = self.shape(*x);
                    kernels::nearest_upsample2d(&vals[x.0], sx[0], sx[1], sx[2], sx[3], *factor)
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo as f64, *hi as f64);
                    let mut out = Vec::with_capacity(vals[x.0].len());
                    for &v in &vals[x.0] {
                        let region = if v < lo {
                            0u64
                        } else if v > hi {
                            2
                        } else {
                            1
                        };
                        mix(&mut hash, region);
                        if region != 1 {
                            kink = true;
                        }
                        out.push(v.clamp(lo, hi));
                    }
                    out
                }
                Op::RoundSte(x) => {
                    kink = true; // flat a.e.: straight-through by construction
                    let mut out = Vec::with_capacity(vals[x.0].len());
                    for &v in &vals[x.0] {
                        let r = v.round();
                        mix(&mut hash, r.to_bits());
                        out.push(r);
                    }
                    out
                }
                Op::SampleBilinear { x, grid } => {
                    let sx = self.shape(*x);
                    let planes = sx[0] * sx[1];
                    let in_sz = grid.in_h * grid.in_w;
                    let out_sz = grid.out_h * grid.out_w;
                    let mut out = vec![0.0f64; planes * out_sz];
                    for p in 0..planes {
                        let src = &vals[x.0][p * in_sz..(p + 1) * in_sz];
                        for (pi, taps) in grid.taps.iter().enumerate() {
                            let mut s = 0.0f64;
                            for &(idx, w) in taps {
                                s += w as f64 * src[idx as usize];
                            }
                            out[p * out_sz + pi] = s;
                        }
                    }
                    out
                }
                Op::BlockDct8 { x, inverse } => {
                    let sx = self.shape(*x);
                    kernels::block_dct8(&vals[x.0], sx[0] * sx[1], sx[2], sx[3], *inverse)
                }
                Op::BceWithLogits { logits, targets } => {
                    let s: f64 = vals[logits.0]
                        .iter()
                        .zip(&vals[targets.0])
                        .map(|(&l, &t)| kernels::softplus(l) - t * l)
                        .sum();
                    vec![s]
                }
            };
            vals.push(v);
        }
        ReplayEval {
            values: vals,
            branch_hash: hash,
            kink,
        }
    }
}

pub(crate) struct ReplayEval {
    pub values: Vec<Vec<f64>>,
    pub branch_hash: u64,
    pub kink: bool,
}

fn transpose2d(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(len: usize, seed: u64) -> Vec<f32> {
        // small deterministic LCG for test fixtures
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64 - 1.0) as f32
            })
            .collect()
    }

    #[test]
    fn conv2d_window_sum() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0; 9], &[1, 1, 3, 3], false).unwrap();
        let w = t.leaf(vec![1.0; 4], &[1, 1, 2, 2], false).unwrap();
        let y = t.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        assert_eq!(t.data(y), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0], &[1], false).unwrap();
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.data(y), &[0.5]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = seeded(12, 3);
        let b = seeded(8, 4);
        let mut expect = vec![0.0f32; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0f32;
                for k in 0..4 {
                    s += a[i * 4 + k] * b[k * 2 + j];
                }
                expect[i * 2 + j] = s;
            }
        }
        let mut t = Tape::new();
        let va = t.leaf(a, &[3, 4], false).unwrap();
        let vb = t.leaf(b, &[4, 2], false).unwrap();
        let y = t.matmul(va, vb).unwrap();
        for (got, want) in t.data(y).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], &[3], true).unwrap();
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_mean_of_square() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], &[3], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let l = t.mean(sq).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap();
        let want = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in g.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let y = t.mul(x, x).unwrap();
        assert!(matches!(
            t.backward(y),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0], &[1], true).unwrap();
        let unused = t.leaf(vec![5.0], &[1], true).unwrap();
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn conv2d_dirac_kernel_is_identity() {
        let x = seeded(25, 9);
        let mut t = Tape::new();
        let vx = t.leaf(x.clone(), &[1, 1, 5, 5], false).unwrap();
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0; // center of 3x3
        let vw = t.leaf(k, &[1, 1, 3, 3], false).unwrap();
        let y = t.conv2d(vx, vw, 1, 1).unwrap();
        assert_eq!(t.data(y), &x[..]);
    }

    #[test]
    fn shape_mismatch_names_op_and_dims() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        let b = t.leaf(vec![0.0; 6], &[3, 2], false).unwrap();
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(seeded(64, 7), &[1, 1, 8, 8], false).unwrap();
            let w = t.leaf(seeded(9, 8), &[1, 1, 3, 3], false).unwrap();
            let c = t.conv2d(x, w, 2, 1).unwrap();
            let s = t.sigmoid(c).unwrap();
            t.data(s).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn block_dct8_roundtrip() {
        let x = seeded(64, 11);
        let mut t = Tape::new();
        let v = t.leaf(x.clone(), &[1, 1, 8, 8], false).unwrap();
        let f = t.block_dct8(v, false).unwrap();
        let b = t.block_dct8(f, true).unwrap();
        for (a, e) in t.data(b).iter().zip(&x) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn bce_with_logits_ln2_at_zero() {
        let mut t = Tape::new();
        let l = t.leaf(vec![0.0], &[1], false).unwrap();
        let tg = t.leaf(vec![1.0], &[1], false).unwrap();
        let loss = t.bce_with_logits(l, tg).unwrap();
        assert!((t.data(loss)[0] - std::f32::consts::LN_2).abs() < 1e-6);
    }
}
