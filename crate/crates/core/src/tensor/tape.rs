//! Wengert-list reverse-mode autodiff.
//!
//! Every op appends one node holding its output value plus whatever it needs for
//! the reverse pass. [`Tape::backward`] consumes the tape and walks the nodes in
//! exact reverse order of execution.

use rand::Rng;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{DType, Tensor};
use crate::error::{bail, Error, Result};
use crate::metrics::ssim::{ssim_value_and_grad, SsimParams};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    /// Loss ops store d(loss)/d(input) computed during the forward pass.
    LossGrad {
        x: Var,
        grad: Vec<f64>,
    },
    SelectSum {
        x: Var,
        positions: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Statistics of one training-mode batchnorm call, used to update running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn dtype(&self, v: Var) -> DType {
        self.nodes[v.0].value.dtype()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            bail!(Numeric, "non-finite value produced by {}", op_name(&op));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (xd, wd) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if xd.len() != 4 || wd.len() != 4 {
            bail!(
                Dimension,
                "conv2d expects rank-4 input and weight, got {:?} and {:?}",
                xd,
                wd
            );
        }
        let (n, cin, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
        let (cout, cin_g, k) = (wd[0], wd[1], wd[2]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            bail!(
                Config,
                "groups {} must divide Cin {} and Cout {}",
                groups,
                cin,
                cout
            );
        }
        if cin_g != cin / groups || wd[3] != k {
            bail!(
                Dimension,
                "weight {:?} does not match Cin {} / groups {}",
                wd,
                cin,
                groups
            );
        }
        if let Some(b) = b {
            if self.dims(b) != [cout] {
                bail!(
                    Dimension,
                    "bias {:?} does not match Cout {}",
                    self.dims(b),
                    cout
                );
            }
        }
        let g = ConvGeom::new(cin_g, h, wi, k, stride, padding).ok_or_else(|| {
            Error::Dimension(format!(
                "kernel {} exceeds padded input {}x{} (pad {})",
                k, h, wi, padding
            ))
        })?;
        let cout_g = cout / groups;
        let hw = g.col_cols();
        let mut out = vec![0.0; n * cout * hw];
        let mut col = vec![0.0; g.col_rows() * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let wsz = cout_g * g.col_rows();
        for ni in 0..n {
            for gi in 0..groups {
                let img = &xv[(ni * cin + gi * cin_g) * h * wi..][..cin_g * h * wi];
                kernels::im2col(img, &g, &mut col);
                let dst = &mut out[(ni * cout + gi * cout_g) * hw..][..cout_g * hw];
                kernels::gemm(
                    cout_g,
                    g.col_rows(),
                    hw,
                    &wv[gi * wsz..][..wsz],
                    false,
                    &col,
                    false,
                    dst,
                    0.0,
                );
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, cout, hw);
        }
        let dtype = self.promote(&[Some(x), Some(w), b]);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_parts(vec![n, cout, g.hout, g.wout], out, dtype);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            },
            needs,
        )
    }

    /// Transposed convolution with weight layout `[Cin, Cout, K, K]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (xd, wd) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if xd.len() != 4 || wd.len() != 4 || wd[0] != xd[1] || wd[2] != wd[3] {
            bail!(
                Dimension,
                "conv_transpose2d shapes incompatible: input {:?}, weight {:?}",
                xd,
                wd
            );
        }
        if output_padding >= stride.max(1) {
            bail!(
                Config,
                "output padding {} must be smaller than stride {}",
                output_padding,
                stride
            );
        }
        let (n, cin, hin, win) = (xd[0], xd[1], xd[2], xd[3]);
        let (cout, k) = (wd[1], wd[2]);
        let hout = ((hin - 1) * stride + k + output_padding).checked_sub(2 * padding);
        let wout = ((win - 1) * stride + k + output_padding).checked_sub(2 * padding);
        let (hout, wout) = match (hout, wout) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => bail!(
                Dimension,
                "transposed conv output collapses for input {:?}",
                xd
            ),
        };
        let g = out_geom(cout, hout, wout, k, stride, padding, hin, win)?;
        let ckk = g.col_rows();
        let hw = hin * win;
        let mut out = vec![0.0; n * cout * hout * wout];
        let mut col = vec![0.0; ckk * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for ni in 0..n {
            kernels::gemm(
                ckk,
                cin,
                hw,
                wv,
                true,
                &xv[ni * cin * hw..][..cin * hw],
                false,
                &mut col,
                0.0,
            );
            kernels::col2im_add(
                &col,
                &g,
                &mut out[ni * cout * hout * wout..][..cout * hout * wout],
            );
        }
        if let Some(b) = b {
            if self.dims(b) != [cout] {
                bail!(
                    Dimension,
                    "bias {:?} does not match Cout {}",
                    self.dims(b),
                    cout
                );
            }
            add_channel_bias(&mut out, self.value(b).data(), n, cout, hout * wout);
        }
        let dtype = self.promote(&[Some(x), Some(w), b]);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_parts(vec![n, cout, hout, wout], out, dtype);
        self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            needs,
        )
    }

    /// `y = x Wᵀ + b` for `x: [N, Cin]`, `W: [Cout, Cin]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xd, wd) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[1] {
            bail!(
                Dimension,
                "linear: input {:?} incompatible with weight {:?}",
                xd,
                wd
            );
        }
        let (n, cin, cout) = (xd[0], xd[1], wd[0]);
        let mut out = vec![0.0; n * cout];
        kernels::gemm(
            n,
            cin,
            cout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            if self.dims(b) != [cout] {
                bail!(
                    Dimension,
                    "bias {:?} does not match Cout {}",
                    self.dims(b),
                    cout
                );
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let dtype = self.promote(&[Some(x), Some(w), b]);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::from_parts(vec![n, cout], out, dtype),
            Op::Linear { x, w, b },
            needs,
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(t.dims().to_vec(), data, t.dtype());
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.unary(x, |v| alpha * v, Op::Scale(x, alpha))
    }

    fn rows(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        match self.dims(x) {
            [r, c] => Ok((*r, *c)),
            d => bail!(Dimension, "{} requires a rank-2 input, got {:?}", what, d),
        }
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows(x, "softmax")?;
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(vec![r, c], data, t.dtype());
        let needs = self.needs(x);
        self.push(value, Op::SoftmaxRows(x), needs)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows(x, "log_softmax")?;
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            log_softmax_in_place(row);
        }
        let value = Tensor::from_parts(vec![r, c], data, t.dtype());
        let needs = self.needs(x);
        self.push(value, Op::LogSoftmaxRows(x), needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            bail!(
                Dimension,
                "{}: shapes {:?} and {:?} differ",
                what,
                self.dims(a),
                self.dims(b)
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let dtype = self.promote(&[Some(a), Some(b)]);
        let value = Tensor::from_parts(self.dims(a).to_vec(), data, dtype);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let dtype = self.promote(&[Some(a), Some(b)]);
        let value = Tensor::from_parts(self.dims(a).to_vec(), data, dtype);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    /// Adds a constant tensor of identical shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.dims(x) != c.dims() {
            bail!(
                Dimension,
                "add_const: shapes {:?} and {:?} differ",
                self.dims(x),
                c.dims()
            );
        }
        let t = self.value(x);
        let data = t.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::from_parts(t.dims().to_vec(), data, t.dtype());
        let needs = self.needs(x);
        self.push(value, Op::AddConst(x), needs)
    }

    fn nchw(&self, x: Var, what: &str) -> Result<[usize; 4]> {
        match self.dims(x) {
            [n, c, h, w] => Ok([*n, *c, *h, *w]),
            d => bail!(Dimension, "{} requires an NCHW input, got {:?}", what, d),
        }
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "max_pool2d")?;
        let g = PoolGeom::new(h, w, k, stride).ok_or_else(|| {
            Error::Dimension(format!("pool window {} larger than {}x{}", k, h, w))
        })?;
        let len = n * c * g.hout * g.wout;
        let (mut out, mut argmax) = (vec![0.0; len], vec![0usize; len]);
        kernels::max_pool(self.value(x).data(), n * c, &g, &mut out, &mut argmax);
        let value = Tensor::from_parts(vec![n, c, g.hout, g.wout], out, self.dtype(x));
        let needs = self.needs(x);
        self.push(value, Op::MaxPool { x, argmax }, needs)
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "avg_pool2d")?;
        let g = PoolGeom::new(h, w, k, stride).ok_or_else(|| {
            Error::Dimension(format!("pool window {} larger than {}x{}", k, h, w))
        })?;
        let mut out = vec![0.0; n * c * g.hout * g.wout];
        kernels::avg_pool(self.value(x).data(), n * c, &g, &mut out);
        let value = Tensor::from_parts(vec![n, c, g.hout, g.wout], out, self.dtype(x));
        let needs = self.needs(x);
        self.push(value, Op::AvgPool { x, k, stride }, needs)
    }

    /// Per-channel spatial mean, `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "global_avg_pool")?;
        let hw = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::from_parts(vec![n, c, 1, 1], out, self.dtype(x));
        let needs = self.needs(x);
        self.push(value, Op::GlobalAvgPool(x), needs)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "upsample")?;
        if factor == 0 {
            bail!(Config, "upsample factor must be positive");
        }
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(p * ho + y) * wo + xx] = src[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, ho, wo], out, self.dtype(x));
        let needs = self.needs(x);
        self.push(value, Op::Upsample { x, factor }, needs)
    }

    fn channel_layout(&self, x: Var) -> Result<(usize, usize, usize)> {
        match self.dims(x) {
            [n, c] => Ok((*n, *c, 1)),
            [n, c, h, w] => Ok((*n, *c, h * w)),
            d => bail!(
                Dimension,
                "batchnorm requires [N,C] or [N,C,H,W], got {:?}",
                d
            ),
        }
    }

    /// Training-mode batchnorm: normalizes with batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, hw) = self.channel_layout(x)?;
        self.check_affine(gamma, beta, c)?;
        let m = n * hw;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            // Shifted two-pass mean so constant channels give exactly zero deviation.
            let shift = xv[ch * hw];
            let mut s = 0.0;
            for ni in 0..n {
                s += xv[(ni * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| v - shift)
                    .sum::<f64>();
            }
            let mu = shift + s / m as f64;
            let mut ss = 0.0;
            for ni in 0..n {
                ss += xv[(ni * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = ss / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let unbiased = var
            .iter()
            .map(|v| {
                if m > 1 {
                    v * m as f64 / (m - 1) as f64
                } else {
                    *v
                }
            })
            .collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: unbiased,
        };
        let v = self.normalize(x, gamma, beta, &mean, inv_std, true)?;
        Ok((v, stats))
    }

    /// Inference-mode batchnorm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.channel_layout(x)?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            bail!(Dimension, "running statistics do not match {} channels", c);
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, running_mean, inv_std, false)
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            bail!(Dimension, "batchnorm affine params must have shape [{}]", c);
        }
        Ok(())
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, hw) = self.channel_layout(x)?;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let dtype = self.promote(&[Some(x), Some(gamma), Some(beta)]);
        let value = Tensor::from_parts(self.dims(x).to_vec(), out, dtype);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        )
    }

    /// Inverted dropout: kept units are scaled by `1/(1-rate)` so inference is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Config, "dropout rate {} outside [0, 1)", rate);
        }
        let keep = 1.0 - rate;
        let n = self.value(x).numel();
        let mask: Vec<f64> = if rate == 0.0 {
            vec![1.0; n]
        } else {
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(t.dims().to_vec(), data, t.dtype());
        let needs = self.needs(x);
        self.push(value, Op::Dropout { x, mask }, needs)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(dims)?;
        let needs = self.needs(x);
        self.push(value, Op::Reshape(x), needs)
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x);
        let n = d[0];
        let rest = d[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, rest])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(p) => self.dims(*p).to_vec(),
            None => bail!(Usage, "concat of zero tensors"),
        };
        if axis >= first.len() {
            bail!(
                Dimension,
                "concat axis {} out of range for {:?}",
                axis,
                first
            );
        }
        let mut total = 0;
        for p in parts {
            let d = self.dims(*p);
            if d.len() != first.len()
                || d.iter()
                    .enumerate()
                    .any(|(i, e)| i != axis && *e != first[i])
            {
                bail!(
                    Dimension,
                    "concat: {:?} incompatible with {:?} along axis {}",
                    d,
                    first,
                    axis
                );
            }
            total += d[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.dims(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut dims = first;
        dims[axis] = total;
        let dtype = self.promote(&parts.iter().map(|p| Some(*p)).collect::<Vec<_>>());
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            Tensor::from_parts(dims, out, dtype),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if axis >= d.len() || len == 0 || start + len > d[axis] {
            bail!(
                Dimension,
                "narrow {}..{} on axis {} out of range for {:?}",
                start,
                start + len,
                axis,
                d
            );
        }
        let outer: usize = d[..axis].iter().product();
        let inner: usize = d[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * d[axis] + start) * inner..][..len * inner]);
        }
        let mut dims = d;
        dims[axis] = len;
        let value = Tensor::from_parts(dims, out, self.dtype(x));
        let needs = self.needs(x);
        self.push(value, Op::Narrow { x, axis, start }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(
            Tensor::from_parts(vec![1], vec![s], self.dtype(x)),
            Op::Sum(x),
            needs,
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(x);
        self.push(
            Tensor::from_parts(vec![1], vec![s], self.dtype(x)),
            Op::Mean(x),
            needs,
        )
    }

    /// Sum of the elements at the given flat positions.
    pub fn select_sum(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(p) = positions.iter().find(|p| **p >= t.numel()) {
            bail!(Dimension, "position {} out of range for {:?}", p, t.dims());
        }
        let s = positions.iter().map(|p| t.data()[*p]).sum();
        let needs = self.needs(x);
        let op = Op::SelectSum {
            x,
            positions: positions.to_vec(),
        };
        self.push(
            Tensor::from_parts(vec![1], vec![s], self.dtype(x)),
            op,
            needs,
        )
    }

    fn loss_node(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        let needs = self.needs(x);
        let t = Tensor::from_parts(vec![1], vec![value], self.dtype(x));
        self.push(t, Op::LossGrad { x, grad }, needs)
    }

    /// Mean cross-entropy of row logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.rows(logits, "cross_entropy")?;
        if targets.len() != n {
            bail!(Dimension, "{} targets for {} rows", targets.len(), n);
        }
        if let Some(t) = targets.iter().find(|t| **t >= c) {
            bail!(Data, "class index {} out of range for {} classes", t, c);
        }
        let mut grad = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in grad.chunks_mut(c).zip(targets) {
            log_softmax_in_place(row);
            loss -= row[t];
            row.iter_mut().for_each(|v| *v = v.exp());
            row[t] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
        self.loss_node(logits, loss / n as f64, grad)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.dims(pred) != target.dims() {
            bail!(
                Dimension,
                "mse: prediction {:?} vs target {:?}",
                self.dims(pred),
                target.dims()
            );
        }
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let diff: Vec<f64> = p.iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let grad = diff.iter().map(|d| 2.0 * d / n).collect();
        self.loss_node(pred, loss, grad)
    }

    /// Mean windowed SSIM between `pred` and a constant target (differentiable in `pred`).
    pub fn ssim(&mut self, pred: Var, target: &Tensor, params: &SsimParams) -> Result<Var> {
        let (value, grad) = ssim_value_and_grad(self.value(pred), target, params)?;
        self.loss_node(pred, value, grad)
    }

    /// Mean over rows of `KL(softmax(teacher) || softmax(student))`.
    pub fn kl_div_logits(&mut self, student: Var, teacher: &Tensor) -> Result<Var> {
        let (n, c) = self.rows(student, "kl_div")?;
        if teacher.dims() != [n, c] {
            bail!(
                Dimension,
                "teacher logits {:?} vs student [{}, {}]",
                teacher.dims(),
                n,
                c
            );
        }
        let mut grad = self.value(student).data().to_vec();
        let mut lp = teacher.data().to_vec();
        let mut loss = 0.0;
        for (q, p) in grad.chunks_mut(c).zip(lp.chunks_mut(c)) {
            log_softmax_in_place(q);
            log_softmax_in_place(p);
            for j in 0..c {
                let pj = p[j].exp();
                loss += pj * (p[j] - q[j]);
                q[j] = (q[j].exp() - pj) / n as f64;
            }
        }
        self.loss_node(student, loss / n as f64, grad)
    }

    fn promote(&self, vars: &[Option<Var>]) -> DType {
        vars.iter()
            .flatten()
            .fold(DType::F32, |d, v| d.promote(self.dtype(*v)))
    }

    /// Reverse pass from a single-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            bail!(Usage, "backward on an empty tape");
        }
        if self.value(loss).numel() != 1 {
            bail!(
                Usage,
                "backward requires a scalar, got {:?}",
                self.dims(loss)
            );
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            propagate(&nodes, i, &g, &mut grads)?;
        }
        let leaves = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.needs_grad => Some(Tensor {
                    dims: n.value.dims().to_vec(),
                    dtype: n.value.dtype(),
                    data: g,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }
}

fn out_geom(
    cout: usize,
    hout: usize,
    wout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    hin: usize,
    win: usize,
) -> Result<ConvGeom> {
    match ConvGeom::new(cout, hout, wout, k, stride, padding) {
        Some(g) if g.hout == hin && g.wout == win => Ok(g),
        _ => bail!(
            Dimension,
            "transposed conv geometry inconsistent for {}x{}",
            hin,
            win
        ),
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], n: usize, c: usize, hw: usize) {
    for ni in 0..n {
        for (ch, b) in bias.iter().enumerate().take(c) {
            out[(ni * c + ch) * hw..][..hw]
                .iter_mut()
                .for_each(|v| *v += b);
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::Linear { .. } => "linear",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::SoftmaxRows(_) => "softmax",
        Op::LogSoftmaxRows(_) => "log_softmax",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddConst(_) => "add_const",
        Op::MaxPool { .. } => "max_pool",
        Op::AvgPool { .. } => "avg_pool",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::Upsample { .. } => "upsample",
        Op::BatchNorm { .. } => "batchnorm",
        Op::Dropout { .. } => "dropout",
        Op::Reshape(_) => "reshape",
        Op::Concat { .. } => "concat",
        Op::Narrow { .. } => "narrow",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::LossGrad { .. } => "loss",
        Op::SelectSum { .. } => "select_sum",
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    let dims = |v: Var| nodes[v.0].value.dims();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
            groups,
        } => {
            let (xd, wd) = (dims(*x), dims(*w));
            let (n, cin, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
            let (cout, cin_g, k) = (wd[0], wd[1], wd[2]);
            let g_geom =
                ConvGeom::new(cin_g, h, wi, k, *stride, *padding).expect("validated in forward");
            let cout_g = cout / groups;
            let hw = g_geom.col_cols();
            let rows = g_geom.col_rows();
            let wsz = cout_g * rows;
            let xv = val(*x);
            let wv = val(*w);
            let mut col = vec![0.0; rows * hw];
            let need_w = nodes[w.0].needs_grad;
            let need_x = nodes[x.0].needs_grad;
            let mut dw = vec![0.0; wv.len()];
            let mut dx = if need_x {
                vec![0.0; xv.len()]
            } else {
                Vec::new()
            };
            let mut dcol = vec![0.0; rows * hw];
            for ni in 0..n {
                for gi in 0..*groups {
                    let go = &g[(ni * cout + gi * cout_g) * hw..][..cout_g * hw];
                    if need_w {
                        let img = &xv[(ni * cin + gi * cin_g) * h * wi..][..cin_g * h * wi];
                        kernels::im2col(img, &g_geom, &mut col);
                        kernels::gemm(
                            cout_g,
                            hw,
                            rows,
                            go,
                            false,
                            &col,
                            true,
                            &mut dw[gi * wsz..][..wsz],
                            1.0,
                        );
                    }
                    if need_x {
                        kernels::gemm(
                            rows,
                            cout_g,
                            hw,
                            &wv[gi * wsz..][..wsz],
                            true,
                            go,
                            false,
                            &mut dcol,
                            0.0,
                        );
                        let dst = &mut dx[(ni * cin + gi * cin_g) * h * wi..][..cin_g * h * wi];
                        kernels::col2im_add(&dcol, &g_geom, dst);
                    }
                }
            }
            if need_x {
                accumulate(nodes, grads, *x, |d| add_into(d, &dx));
            }
            if need_w {
                accumulate(nodes, grads, *w, |d| add_into(d, &dw));
            }
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |d| channel_sum_into(d, g, n, cout, hw));
            }
        }
        Op::ConvTranspose2d {
            x,
            w,
            b,
            stride,
            padding,
        } => {
            let (xd, wd) = (dims(*x), dims(*w));
            let (n, cin, hin, win) = (xd[0], xd[1], xd[2], xd[3]);
            let (cout, k) = (wd[1], wd[2]);
            let od = node.value.dims();
            let (hout, wout) = (od[2], od[3]);
            let geom = out_geom(cout, hout, wout, k, *stride, *padding, hin, win)?;
            let ckk = geom.col_rows();
            let hw = hin * win;
            let xv = val(*x);
            let wv = val(*w);
            let mut col = vec![0.0; ckk * hw];
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; wv.len()];
            for ni in 0..n {
                kernels::im2col(
                    &g[ni * cout * hout * wout..][..cout * hout * wout],
                    &geom,
                    &mut col,
                );
                kernels::gemm(
                    cin,
                    ckk,
                    hw,
                    wv,
                    false,
                    &col,
                    false,
                    &mut dx[ni * cin * hw..][..cin * hw],
                    0.0,
                );
                kernels::gemm(
                    cin,
                    hw,
                    ckk,
                    &xv[ni * cin * hw..][..cin * hw],
                    false,
                    &col,
                    true,
                    &mut dw,
                    1.0,
                );
            }
            accumulate(nodes, grads, *x, |d| add_into(d, &dx));
            accumulate(nodes, grads, *w, |d| add_into(d, &dw));
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |d| {
                    channel_sum_into(d, g, n, cout, hout * wout)
                });
            }
        }
        Op::Linear { x, w, b } => {
            let (n, cin) = (dims(*x)[0], dims(*x)[1]);
            let cout = dims(*w)[0];
            if nodes[x.0].needs_grad {
                let mut dx = vec![0.0; n * cin];
                kernels::gemm(n, cout, cin, g, false, val(*w), false, &mut dx, 0.0);
                accumulate(nodes, grads, *x, |d| add_into(d, &dx));
            }
            accumulate(nodes, grads, *w, |d| {
                kernels::gemm(cout, n, cin, g, true, val(*x), false, d, 1.0)
            });
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |d| {
                    for row in g.chunks(cout) {
                        add_into(d, row);
                    }
                });
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            accumulate(nodes, grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            });
        }
        Op::Tanh(x) => {
            let y = node.value.data();
            accumulate(nodes, grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * (1.0 - y * y);
                }
            });
        }
        Op::SoftmaxRows(x) => {
            let c = dims(*x)[1];
            let y = node.value.data();
            accumulate(nodes, grads, *x, |d| {
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(x) => {
            let c = dims(*x)[1];
            let y = node.value.data();
            accumulate(nodes, grads, *x, |d| {
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        dr[j] += gr[j] - yr[j].exp() * s;
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| {
                for ((d, g), b) in d.iter_mut().zip(g).zip(bv) {
                    *d += g * b;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((d, g), a) in d.iter_mut().zip(g).zip(av) {
                    *d += g * a;
                }
            });
        }
        Op::Scale(x, alpha) => {
            accumulate(nodes, grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += alpha * g)
            });
        }
        Op::AddConst(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, |d| add_into(d, g)),
        Op::MaxPool { x, argmax } => {
            accumulate(nodes, grads, *x, |d| {
                for (g, &at) in g.iter().zip(argmax) {
                    d[at] += g;
                }
            });
        }
        Op::AvgPool { x, k, stride } => {
            let xd = dims(*x);
            let geom = PoolGeom::new(xd[2], xd[3], *k, *stride).expect("validated in forward");
            accumulate(nodes, grads, *x, |d| {
                kernels::avg_pool_backward(g, xd[0] * xd[1], &geom, d)
            });
        }
        Op::GlobalAvgPool(x) => {
            let xd = dims(*x);
            let hw = xd[2] * xd[3];
            accumulate(nodes, grads, *x, |d| {
                for (plane, g) in d.chunks_mut(hw).zip(g) {
                    plane.iter_mut().for_each(|v| *v += g / hw as f64);
                }
            });
        }
        Op::Upsample { x, factor } => {
            let xd = dims(*x);
            let (h, w) = (xd[2], xd[3]);
            let (ho, wo) = (h * factor, w * factor);
            accumulate(nodes, grads, *x, |d| {
                for p in 0..xd[0] * xd[1] {
                    for y in 0..ho {
                        for xx in 0..wo {
                            d[(p * h + y / factor) * w + xx / factor] += g[(p * ho + y) * wo + xx];
                        }
                    }
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let xd = dims(*x);
            let (n, c) = (xd[0], xd[1]);
            let hw: usize = xd[2..].iter().product();
            let m = (n * hw) as f64;
            let gv = val(*gamma);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for ni in 0..n {
                for ch in 0..c {
                    let base = (ni * c + ch) * hw;
                    for i in base..base + hw {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            accumulate(nodes, grads, *gamma, |d| add_into(d, &sum_gx));
            accumulate(nodes, grads, *beta, |d| add_into(d, &sum_g));
            accumulate(nodes, grads, *x, |d| {
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * hw;
                        let k = gv[ch] * inv_std[ch];
                        for i in base..base + hw {
                            d[i] += if *batch_stats {
                                k / m * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
            });
        }
        Op::Dropout { x, mask } => {
            accumulate(nodes, grads, *x, |d| {
                for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                    *d += g * m;
                }
            });
        }
        Op::Concat { parts, axis } => {
            let od = node.value.dims();
            let outer: usize = od[..*axis].iter().product();
            let inner: usize = od[axis + 1..].iter().product();
            let mut offset = 0;
            for p in parts {
                let len = dims(*p)[*axis] * inner;
                accumulate(nodes, grads, *p, |d| {
                    for o in 0..outer {
                        add_into(
                            &mut d[o * len..(o + 1) * len],
                            &g[o * od[*axis] * inner + offset..][..len],
                        );
                    }
                });
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xd = dims(*x);
            let len = node.value.dims()[*axis];
            let outer: usize = xd[..*axis].iter().product();
            let inner: usize = xd[axis + 1..].iter().product();
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    add_into(
                        &mut d[(o * xd[*axis] + start) * inner..][..len * inner],
                        &g[o * len * inner..][..len * inner],
                    );
                }
            });
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel() as f64;
            accumulate(nodes, grads, *x, |d| {
                d.iter_mut().for_each(|v| *v += g[0] / n)
            });
        }
        Op::LossGrad { x, grad } => {
            accumulate(nodes, grads, *x, |d| {
                d.iter_mut().zip(grad).for_each(|(d, l)| *d += g[0] * l)
            });
        }
        Op::SelectSum { x, positions } => {
            accumulate(nodes, grads, *x, |d| {
                positions.iter().for_each(|p| d[*p] += g[0])
            });
        }
    }
    Ok(())
}

fn channel_sum_into(d: &mut [f64], g: &[f64], n: usize, c: usize, hw: usize) {
    for ni in 0..n {
        for (ch, dv) in d.iter_mut().enumerate().take(c) {
            *dv += g[(ni * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
    }
}
