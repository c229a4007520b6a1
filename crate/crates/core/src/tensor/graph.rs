//! Reverse-mode autodiff over a tape of recorded ops.
//!
//! A [`Graph`] appends one node per op, so node order is already topological:
//! every input id is strictly smaller than the output id. [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients additively into
//! each node's `grad` buffer. Every forward op validates shapes up front and
//! rejects non-finite outputs instead of letting NaN propagate silently.

use super::kernels;
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node in one specific [`Graph`]. Ids are not transferable
/// between graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Activation> {
        match s {
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            other => Err(Error::Usage(format!(
                "unknown activation {other:?}; expected relu or leaky_relu"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
        }
    }
}

#[derive(Debug, Clone)]
struct BnSaved {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: VarId, b: VarId },
    Conv2d { x: VarId, w: VarId, stride: usize, pad: usize, cols: Option<Vec<f64>> },
    BatchNorm { x: VarId, gamma: VarId, beta: VarId, saved: BnSaved },
    // Slope is pre-resolved: 0 for plain ReLU, the configured value otherwise.
    Act { x: VarId, slope: f64 },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { x: VarId, c: f64 },
    Sum { x: VarId },
    MeanSpatial { x: VarId },
    AddRowBias { x: VarId, b: VarId },
    NormalizeRows { x: VarId, norms: Vec<f64> },
    NormalizeCols { x: VarId, norms: Vec<f64> },
    Clamp { x: VarId, lo: f64, hi: f64 },
    AngularMargin { x: VarId, labels: Vec<usize>, factors: Vec<f64> },
    Softmax { x: VarId },
    CrossEntropy { logits: VarId, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    op: Op,
    out: Tensor,
}

/// Tape of op records plus their output tensors.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    /// Inserts a leaf that participates in differentiation.
    pub fn var(&mut self, mut t: Tensor) -> Result<VarId> {
        t.requires_grad = true;
        t.grad = None;
        self.push(Op::Leaf, t, "leaf")
    }

    /// Inserts a leaf excluded from differentiation (inputs, frozen values).
    pub fn constant(&mut self, mut t: Tensor) -> Result<VarId> {
        t.requires_grad = false;
        t.grad = None;
        self.push(Op::Leaf, t, "leaf")
    }

    pub fn tensor(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0 as usize].out
    }

    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id.0 as usize].out.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, mut out: Tensor, name: &str) -> Result<VarId> {
        if !out.all_finite() {
            return Err(Error::Numeric(format!("non-finite values produced by {name}")));
        }
        if self.nodes.len() >= u32::MAX as usize {
            return Err(Error::Usage("graph node limit exceeded".into()));
        }
        out.grad = None;
        let id = VarId(self.nodes.len() as u32);
        self.nodes.push(Node { op, out });
        Ok(id)
    }

    fn requires(&self, id: VarId) -> bool {
        self.nodes[id.0 as usize].out.requires_grad
    }

    fn data(&self, id: VarId) -> &[f64] {
        &self.nodes[id.0 as usize].out.data
    }

    fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0 as usize].out.shape
    }

    // ---- forward ops ----

    /// `a[m,k] * b[k,n] -> [m,n]`
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Usage(format!(
                "matmul expects [m,k] x [k,n], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::mm_nn(&mut out, self.data(a), self.data(b), m, k, n);
        let mut t = Tensor::new(vec![m, n], out)?;
        t.requires_grad = self.requires(a) || self.requires(b);
        self.push(Op::Matmul { a, b }, t, "matmul")
    }

    /// 2-D cross-correlation: `x[b,c,h,w] * w[f,c,k,k] -> [b,f,h',w']` with
    /// `h' = (h + 2*pad - k) / stride + 1` (floor division).
    pub fn conv2d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::Usage(format!(
                "conv2d expects rank-4 input and weights, got {sx:?} and {sw:?}"
            )));
        }
        if sw[2] != sw[3] {
            return Err(Error::Usage(format!("conv2d kernels must be square, got {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(Error::Usage(format!(
                "conv2d channel mismatch: input {sx:?} vs weights {sw:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be at least 1".into()));
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, k) = (sw[0], sw[2]);
        let oh = kernels::conv_out_dim(h, k, stride, pad);
        let ow = kernels::conv_out_dim(wd, k, stride, pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(bb)) => (a, bb),
            _ => {
                return Err(Error::Usage(format!(
                    "conv2d output would be empty: input {h}x{wd}, kernel {k}, stride {stride}, pad {pad}"
                )))
            }
        };
        let ckk = c * k * k;
        let ncols = oh * ow;
        let needs_grad = self.requires(x) || self.requires(w);
        let mut out = vec![0.0; b * f * ncols];
        let wdata = self.data(w).to_vec();
        let xdata = self.data(x);

        let cols_ctx = if needs_grad {
            // Keep the unfolded patches for backward; desk-scale batches only.
            let mut cols = vec![0.0; b * ckk * ncols];
            for bi in 0..b {
                let xs = &xdata[bi * c * h * wd..(bi + 1) * c * h * wd];
                let cs = &mut cols[bi * ckk * ncols..(bi + 1) * ckk * ncols];
                kernels::im2col(cs, xs, c, h, wd, k, stride, pad, oh, ow);
                kernels::mm_nn(
                    &mut out[bi * f * ncols..(bi + 1) * f * ncols],
                    &wdata,
                    cs,
                    f,
                    ckk,
                    ncols,
                );
            }
            Some(cols)
        } else {
            // Inference path: bound the scratch buffer by chunking output rows
            // so large inputs never materialize the full patch matrix.
            let max_chunk_elems = 1 << 22;
            let rows_per_chunk = (max_chunk_elems / (ckk * ow).max(1)).clamp(1, oh);
            let mut cols = vec![0.0; ckk * rows_per_chunk * ow];
            let mut chunk_out = vec![0.0; f * rows_per_chunk * ow];
            for bi in 0..b {
                let xs = &xdata[bi * c * h * wd..(bi + 1) * c * h * wd];
                let mut oy = 0;
                while oy < oh {
                    let rows = rows_per_chunk.min(oh - oy);
                    let ccols = rows * ow;
                    kernels::im2col_rows(
                        &mut cols[..ckk * ccols],
                        xs,
                        c,
                        h,
                        wd,
                        k,
                        stride,
                        pad,
                        ow,
                        oy,
                        oy + rows,
                    );
                    let co = &mut chunk_out[..f * ccols];
                    co.fill(0.0);
                    kernels::mm_nn(co, &wdata, &cols[..ckk * ccols], f, ckk, ccols);
                    for fi in 0..f {
                        let dst = bi * f * ncols + fi * ncols + oy * ow;
                        out[dst..dst + ccols].copy_from_slice(&co[fi * ccols..(fi + 1) * ccols]);
                    }
                    oy += rows;
                }
            }
            None
        };

        let mut t = Tensor::new(vec![b, f, oh, ow], out)?;
        t.requires_grad = needs_grad;
        self.push(Op::Conv2d { x, w, stride, pad, cols: cols_ctx }, t, "conv2d")
    }

    /// Batch normalization over `(batch, height, width)` per channel, using
    /// batch statistics. Pass `running` to fold the batch stats into running
    /// averages (`new = (1 - momentum) * old + momentum * batch`); `None`
    /// leaves external state untouched, which keeps repeated evaluations of
    /// the same input pure.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mut running: Option<(&mut [f64], &mut [f64])>,
        eps: f64,
        momentum: f64,
    ) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        let c = self.check_bn_shapes(&sx, gamma, beta)?;
        let (b, h, w) = (sx[0], sx[2], sx[3]);
        let n = (b * h * w) as f64;
        let xdata = self.data(x);
        let plane = h * w;

        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for bi in 0..b {
                let s = &xdata[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                sum += s.iter().sum::<f64>();
            }
            let m = sum / n;
            let mut sq = 0.0;
            for bi in 0..b {
                let s = &xdata[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                sq += s.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = sq / n;
        }
        if let Some((rm, rv)) = running.as_mut() {
            if rm.len() != c || rv.len() != c {
                return Err(Error::Usage(format!(
                    "running stats length {} does not match {} channels",
                    rm.len(),
                    c
                )));
            }
            for ch in 0..c {
                rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mean[ch];
                rv[ch] = (1.0 - momentum) * rv[ch] + momentum * var[ch];
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, true)
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        let c = self.check_bn_shapes(&sx, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Usage(format!(
                "running stats length {} does not match {} channels",
                running_mean.len(),
                c
            )));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean.to_vec(), inv_std, false)
    }

    fn check_bn_shapes(&self, sx: &[usize], gamma: VarId, beta: VarId) -> Result<usize> {
        if sx.len() != 4 {
            return Err(Error::Usage(format!("batch norm expects rank-4 input, got {sx:?}")));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Usage(format!(
                "batch norm scale/shift must have shape [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(c)
    }

    fn bn_apply(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    ) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let plane = h * w;
        let xdata = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut out = vec![0.0; xdata.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                let scale = g[ch] * inv_std[ch];
                let shift = bt[ch] - mean[ch] * scale;
                for (o, &v) in out[off..off + plane].iter_mut().zip(&xdata[off..off + plane]) {
                    *o = v * scale + shift;
                }
            }
        }
        let mut t = Tensor::new(sx, out)?;
        t.requires_grad = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            Op::BatchNorm { x, gamma, beta, saved: BnSaved { mean, inv_std, train } },
            t,
            "batch_norm",
        )
    }

    /// Elementwise ReLU / leaky ReLU. `slope` scales the negative side and
    /// must lie in `[0, 1)`; at exactly 0 both the value and the derivative
    /// come from the positive side, so slope 0 reproduces plain ReLU bit for
    /// bit.
    pub fn activation(&mut self, x: VarId, kind: Activation, slope: f64) -> Result<VarId> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Usage(format!("negative slope must be in [0,1), got {slope}")));
        }
        let s = match kind {
            Activation::Relu => 0.0,
            Activation::LeakyRelu => slope,
        };
        let xdata = self.data(x);
        let out: Vec<f64> = xdata
            .iter()
            .map(|&v| if v >= 0.0 { v } else if s == 0.0 { 0.0 } else { s * v })
            .collect();
        let mut t = Tensor::new(self.shape(x).to_vec(), out)?;
        t.requires_grad = self.requires(x);
        self.push(Op::Act { x, slope: s }, t, "activation")
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(a, b, "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(a, b, "sub")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(a, b, "mul")
    }

    fn elementwise(&mut self, a: VarId, b: VarId, which: &str) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Usage(format!(
                "{which} expects matching shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = match which {
            "add" => da.iter().zip(db).map(|(x, y)| x + y).collect(),
            "sub" => da.iter().zip(db).map(|(x, y)| x - y).collect(),
            _ => da.iter().zip(db).map(|(x, y)| x * y).collect(),
        };
        let mut t = Tensor::new(self.shape(a).to_vec(), out)?;
        t.requires_grad = self.requires(a) || self.requires(b);
        let op = match which {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        self.push(op, t, which)
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> Result<VarId> {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let mut t = Tensor::new(self.shape(x).to_vec(), out)?;
        t.requires_grad = self.requires(x);
        self.push(Op::Scale { x, c }, t, "scale")
    }

    /// Full reduction to a scalar of shape `[1]`.
    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let s: f64 = self.data(x).iter().sum();
        let mut t = Tensor::scalar(s);
        t.requires_grad = self.requires(x);
        self.push(Op::Sum { x }, t, "sum")
    }

    /// Global average pool: `[b,c,h,w] -> [b,c]`.
    pub fn mean_spatial(&mut self, x: VarId) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Usage(format!("mean_spatial expects rank-4 input, got {sx:?}")));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let plane = (h * w) as f64;
        let xdata = self.data(x);
        let mut out = vec![0.0; b * c];
        for (i, o) in out.iter_mut().enumerate() {
            let s = &xdata[i * h * w..(i + 1) * h * w];
            *o = s.iter().sum::<f64>() / plane;
        }
        let mut t = Tensor::new(vec![b, c], out)?;
        t.requires_grad = self.requires(x);
        self.push(Op::MeanSpatial { x }, t, "mean_spatial")
    }

    /// `x[rows,n] + bias[n]`, broadcast down the rows.
    pub fn add_row_bias(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Usage(format!(
                "add_row_bias expects [rows,n] and [n], got {sx:?} and {sb:?}"
            )));
        }
        let n = sx[1];
        let bd = self.data(b).to_vec();
        let out: Vec<f64> =
            self.data(x).iter().enumerate().map(|(i, v)| v + bd[i % n]).collect();
        let mut t = Tensor::new(sx, out)?;
        t.requires_grad = self.requires(x) || self.requires(b);
        self.push(Op::AddRowBias { x, b }, t, "add_row_bias")
    }

    /// Scales each row of `x[rows,d]` to unit Euclidean length. Rows with
    /// norm below 1e-12 are rejected as degenerate.
    pub fn l2_normalize_rows(&mut self, x: VarId) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Usage(format!("l2_normalize_rows expects rank-2, got {sx:?}")));
        }
        let (rows, d) = (sx[0], sx[1]);
        let xdata = self.data(x);
        let mut norms = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let s = &xdata[r * d..(r + 1) * d];
            let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric(format!("row {r} has near-zero norm {norm:e}")));
            }
            norms[r] = norm;
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(s) {
                *o = v / norm;
            }
        }
        let mut t = Tensor::new(sx, out)?;
        t.requires_grad = self.requires(x);
        self.push(Op::NormalizeRows { x, norms }, t, "l2_normalize_rows")
    }

    /// Scales each column of `x[d,cols]` to unit Euclidean length.
    pub fn l2_normalize_cols(&mut self, x: VarId) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Usage(format!("l2_normalize_cols expects rank-2, got {sx:?}")));
        }
        let (d, cols) = (sx[0], sx[1]);
        let xdata = self.data(x);
        let mut norms = vec![0.0; cols];
        for j in 0..cols {
            let mut s = 0.0;
            for i in 0..d {
                let v = xdata[i * cols + j];
                s += v * v;
            }
            let norm = s.sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric(format!("column {j} has near-zero norm {norm:e}")));
            }
            norms[j] = norm;
        }
        let mut out = vec![0.0; d * cols];
        for i in 0..d {
            for j in 0..cols {
                out[i * cols + j] = xdata[i * cols + j] / norms[j];
            }
        }
        let mut t = Tensor::new(sx, out)?;
        t.requires_grad = self.requires(x);
        self.push(Op::NormalizeCols { x, norms }, t, "l2_normalize_cols")
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes through wherever the
    /// input already lay inside the interval and is zero where it was cut.
    pub fn clamp(&mut self, x: VarId, lo: f64, hi: f64) -> Result<VarId> {
        if !(lo < hi) {
            return Err(Error::Usage(format!("clamp bounds must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        let out: Vec<f64> = self.data(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        let mut t = Tensor::new(self.shape(x).to_vec(), out)?;
        t.requires_grad = self.requires(x);
        self.push(Op::Clamp { x, lo, hi }, t, "clamp")
    }

    /// Additive angular margin: for each row `i` of a cosine matrix, replaces
    /// the entry at `labels[i]` by `cos(theta + margin)` where
    /// `theta = acos(cos)`, with `theta + margin` clamped to `[0, pi]`. Other
    /// entries pass through unchanged. Inputs must already sit strictly inside
    /// `(-1, 1)` for `acos` to stay differentiable.
    pub fn angular_margin(&mut self, x: VarId, labels: &[usize], margin: f64) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Usage(format!("angular_margin expects rank-2, got {sx:?}")));
        }
        let (rows, n) = (sx[0], sx[1]);
        self.check_labels(labels, rows, n)?;
        if !(0.0..std::f64::consts::PI).contains(&margin) {
            return Err(Error::Usage(format!("margin must be in [0, pi), got {margin}")));
        }
        let xdata = self.data(x);
        let mut out = xdata.to_vec();
        let mut factors = vec![0.0; rows];
        for (i, &y) in labels.iter().enumerate() {
            let c = xdata[i * n + y];
            if !(-1.0..=1.0).contains(&c) {
                return Err(Error::Numeric(format!(
                    "angular_margin input {c} at row {i} lies outside [-1, 1]"
                )));
            }
            let theta = c.acos();
            let shifted = theta + margin;
            if shifted >= std::f64::consts::PI {
                out[i * n + y] = -1.0;
                factors[i] = 0.0;
            } else {
                out[i * n + y] = shifted.cos();
                let sin_theta = theta.sin();
                factors[i] = if sin_theta > 0.0 { shifted.sin() / sin_theta } else { 0.0 };
            }
        }
        let mut t = Tensor::new(sx, out)?;
        t.requires_grad = self.requires(x);
        self.push(Op::AngularMargin { x, labels: labels.to_vec(), factors }, t, "angular_margin")
    }

    /// Row softmax of `x[rows,n]`, computed against the row max for stability.
    pub fn softmax(&mut self, x: VarId) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Usage(format!("softmax expects rank-2, got {sx:?}")));
        }
        let (rows, n) = (sx[0], sx[1]);
        let xdata = self.data(x);
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let s = &xdata[r * n..(r + 1) * n];
            let o = &mut out[r * n..(r + 1) * n];
            softmax_row(s, o);
        }
        let mut t = Tensor::new(sx, out)?;
        t.requires_grad = self.requires(x);
        self.push(Op::Softmax { x }, t, "softmax")
    }

    /// Mean softmax cross-entropy of `logits[rows,n]` against integer labels,
    /// evaluated through a log-sum-exp so large logits cannot overflow.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let sx = self.shape(logits).to_vec();
        if sx.len() != 2 {
            return Err(Error::Usage(format!("cross_entropy expects rank-2 logits, got {sx:?}")));
        }
        let (rows, n) = (sx[0], sx[1]);
        self.check_labels(labels, rows, n)?;
        let xdata = self.data(logits);
        let mut probs = vec![0.0; rows * n];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let s = &xdata[r * n..(r + 1) * n];
            let o = &mut probs[r * n..(r + 1) * n];
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (&v, e) in s.iter().zip(o.iter_mut()) {
                *e = (v - max).exp();
                denom += *e;
            }
            for e in o.iter_mut() {
                *e /= denom;
            }
            // lse = max + ln(denom); per-row loss = lse - logit[y].
            loss += max + denom.ln() - s[y];
        }
        loss /= rows as f64;
        let mut t = Tensor::scalar(loss);
        t.requires_grad = self.requires(logits);
        self.push(Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, t, "cross_entropy")
    }

    fn check_labels(&self, labels: &[usize], rows: usize, classes: usize) -> Result<()> {
        if labels.len() != rows {
            return Err(Error::Usage(format!(
                "expected {rows} labels, got {}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Usage(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }

    // ---- backward ----

    /// Accumulates `d loss / d node` into every participating node's `grad`.
    /// `loss` must be a scalar that depends on at least one `var` leaf.
    /// Each call propagates a fresh unit seed through pass-local buffers and
    /// adds the result on top of whatever `grad` already holds, so a second
    /// call doubles the stored gradients.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        let idx = loss.0 as usize;
        if !self.nodes[idx].out.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[idx].out.shape
            )));
        }
        if !self.nodes[idx].out.requires_grad {
            return Err(Error::Usage(
                "loss does not depend on any differentiable leaf".into(),
            ));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[idx] = Some(vec![1.0]);
        for i in (0..=idx).rev() {
            // Taking the buffer frees it as the walk retreats; input ids are
            // strictly smaller than i, so nothing written later is lost.
            let Some(gout) = scratch[i].take() else { continue };
            backward_node(&self.nodes, i, &gout, &mut scratch)?;
            let out = &mut self.nodes[i].out;
            if out.requires_grad {
                let g = out.grad.get_or_insert_with(|| vec![0.0; gout.len()]);
                for (gv, &s) in g.iter_mut().zip(&gout) {
                    *gv += s;
                }
            }
        }
        Ok(())
    }
}

/// Stable softmax of one row into `out`.
fn softmax_row(s: &[f64], out: &mut [f64]) {
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (&v, e) in s.iter().zip(out.iter_mut()) {
        *e = (v - max).exp();
        denom += *e;
    }
    for e in out.iter_mut() {
        *e /= denom;
    }
}

/// Pass-local gradient buffer for `id`, created on demand. Returns `None`
/// for nodes outside the differentiation set so callers can skip the work
/// of computing that operand's gradient.
fn sbuf<'a>(
    scratch: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: VarId,
) -> Option<&'a mut [f64]> {
    let j = id.0 as usize;
    if !nodes[j].out.requires_grad {
        return None;
    }
    let n = nodes[j].out.data.len();
    Some(scratch[j].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

/// Routes `gout`, the gradient at node `i`, into the scratch buffers of that
/// node's inputs. Shared operands work without special cases because the two
/// accumulations land in the same buffer one after the other.
fn backward_node(
    nodes: &[Node],
    i: usize,
    gout: &[f64],
    scratch: &mut [Option<Vec<f64>>],
) -> Result<()> {
    let out_shape = &nodes[i].out.shape;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, n) = (out_shape[0], out_shape[1]);
            let k = nodes[a.0 as usize].out.shape[1];
            let adata = &nodes[a.0 as usize].out.data;
            let bdata = &nodes[b.0 as usize].out.data;
            if let Some(ga) = sbuf(scratch, nodes, *a) {
                // dA += dC * B^T
                kernels::mm_nt(ga, gout, bdata, m, n, k);
            }
            if let Some(gb) = sbuf(scratch, nodes, *b) {
                // dB += A^T * dC
                kernels::mm_tn(gb, adata, gout, k, m, n);
            }
        }
        Op::Conv2d { x, w, stride, pad, cols } => {
            let cols = cols.as_ref().expect("conv recorded without saved patches");
            let (b, f, oh, ow) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
            let ncols = oh * ow;
            let xs = &nodes[x.0 as usize].out.shape;
            let (c, h, wd) = (xs[1], xs[2], xs[3]);
            let k = nodes[w.0 as usize].out.shape[2];
            let ckk = c * k * k;
            if let Some(wgrad) = sbuf(scratch, nodes, *w) {
                for bi in 0..b {
                    kernels::mm_nt(
                        wgrad,
                        &gout[bi * f * ncols..(bi + 1) * f * ncols],
                        &cols[bi * ckk * ncols..(bi + 1) * ckk * ncols],
                        f,
                        ncols,
                        ckk,
                    );
                }
            }
            let wdata = &nodes[w.0 as usize].out.data;
            if let Some(xgrad) = sbuf(scratch, nodes, *x) {
                let mut dcols = vec![0.0; ckk * ncols];
                for bi in 0..b {
                    dcols.fill(0.0);
                    kernels::mm_tn(
                        &mut dcols,
                        wdata,
                        &gout[bi * f * ncols..(bi + 1) * f * ncols],
                        ckk,
                        f,
                        ncols,
                    );
                    kernels::col2im_add(
                        &mut xgrad[bi * c * h * wd..(bi + 1) * c * h * wd],
                        &dcols,
                        c,
                        h,
                        wd,
                        k,
                        *stride,
                        *pad,
                        oh,
                        ow,
                    );
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, saved } => {
            let (b, c, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
            let plane = h * w;
            let n = (b * plane) as f64;
            let gdata = &nodes[gamma.0 as usize].out.data;
            let xdata = &nodes[x.0 as usize].out.data;

            // Per-channel reductions shared by all three gradients.
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * plane;
                    let (m, inv) = (saved.mean[ch], saved.inv_std[ch]);
                    for i in 0..plane {
                        let g = gout[off + i];
                        sum_g[ch] += g;
                        sum_gx[ch] += g * (xdata[off + i] - m) * inv;
                    }
                }
            }
            if let Some(gb) = sbuf(scratch, nodes, *beta) {
                for ch in 0..c {
                    gb[ch] += sum_g[ch];
                }
            }
            if let Some(gg) = sbuf(scratch, nodes, *gamma) {
                for ch in 0..c {
                    gg[ch] += sum_gx[ch];
                }
            }
            if let Some(gx) = sbuf(scratch, nodes, *x) {
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        let (m, inv) = (saved.mean[ch], saved.inv_std[ch]);
                        let scale = gdata[ch] * inv;
                        if saved.train {
                            // Batch statistics depend on x, so the gradient
                            // removes the per-channel mean components.
                            let mg = sum_g[ch] / n;
                            let mgx = sum_gx[ch] / n;
                            for i in 0..plane {
                                let xhat = (xdata[off + i] - m) * inv;
                                gx[off + i] += scale * (gout[off + i] - mg - xhat * mgx);
                            }
                        } else {
                            for i in 0..plane {
                                gx[off + i] += scale * gout[off + i];
                            }
                        }
                    }
                }
            }
        }
        Op::Act { x, slope } => {
            let xdata = &nodes[x.0 as usize].out.data;
            if let Some(gx) = sbuf(scratch, nodes, *x) {
                for ((g, &v), &go) in gx.iter_mut().zip(xdata).zip(gout) {
                    *g += if v >= 0.0 { go } else { slope * go };
                }
            }
        }
        Op::Add { a, b } => {
            for id in [a, b] {
                if let Some(g) = sbuf(scratch, nodes, *id) {
                    for (gv, &go) in g.iter_mut().zip(gout) {
                        *gv += go;
                    }
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(g) = sbuf(scratch, nodes, *a) {
                for (gv, &go) in g.iter_mut().zip(gout) {
                    *gv += go;
                }
            }
            if let Some(g) = sbuf(scratch, nodes, *b) {
                for (gv, &go) in g.iter_mut().zip(gout) {
                    *gv -= go;
                }
            }
        }
        Op::Mul { a, b } => {
            let adata = &nodes[a.0 as usize].out.data;
            let bdata = &nodes[b.0 as usize].out.data;
            if let Some(ga) = sbuf(scratch, nodes, *a) {
                for ((gv, &v), &go) in ga.iter_mut().zip(bdata).zip(gout) {
                    *gv += v * go;
                }
            }
            if let Some(gb) = sbuf(scratch, nodes, *b) {
                for ((gv, &v), &go) in gb.iter_mut().zip(adata).zip(gout) {
                    *gv += v * go;
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(g) = sbuf(scratch, nodes, *x) {
                for (gv, &go) in g.iter_mut().zip(gout) {
                    *gv += c * go;
                }
            }
        }
        Op::Sum { x } => {
            let go = gout[0];
            if let Some(g) = sbuf(scratch, nodes, *x) {
                for gv in g.iter_mut() {
                    *gv += go;
                }
            }
        }
        Op::MeanSpatial { x } => {
            let xs = &nodes[x.0 as usize].out.shape;
            let plane = xs[2] * xs[3];
            let inv = 1.0 / plane as f64;
            if let Some(g) = sbuf(scratch, nodes, *x) {
                for (i, gv) in g.iter_mut().enumerate() {
                    *gv += gout[i / plane] * inv;
                }
            }
        }
        Op::AddRowBias { x, b } => {
            if let Some(g) = sbuf(scratch, nodes, *x) {
                for (gv, &go) in g.iter_mut().zip(gout) {
                    *gv += go;
                }
            }
            let n = nodes[b.0 as usize].out.data.len();
            if let Some(g) = sbuf(scratch, nodes, *b) {
                for (i, &go) in gout.iter().enumerate() {
                    g[i % n] += go;
                }
            }
        }
        Op::NormalizeRows { x, norms } => {
            let rows = out_shape[0];
            let d = out_shape[1];
            let ydata = &nodes[i].out.data;
            if let Some(g) = sbuf(scratch, nodes, *x) {
                for r in 0..rows {
                    let y = &ydata[r * d..(r + 1) * d];
                    let go = &gout[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                    let inv = 1.0 / norms[r];
                    for j in 0..d {
                        g[r * d + j] += (go[j] - y[j] * dot) * inv;
                    }
                }
            }
        }
        Op::NormalizeCols { x, norms } => {
            let d = out_shape[0];
            let cols = out_shape[1];
            let ydata = &nodes[i].out.data;
            if let Some(g) = sbuf(scratch, nodes, *x) {
                for j in 0..cols {
                    let mut dot = 0.0;
                    for r in 0..d {
                        dot += ydata[r * cols + j] * gout[r * cols + j];
                    }
                    let inv = 1.0 / norms[j];
                    for r in 0..d {
                        let idx = r * cols + j;
                        g[idx] += (gout[idx] - ydata[idx] * dot) * inv;
                    }
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            let xdata = &nodes[x.0 as usize].out.data;
            if let Some(g) = sbuf(scratch, nodes, *x) {
                for ((gv, &v), &go) in g.iter_mut().zip(xdata).zip(gout) {
                    if v >= *lo && v <= *hi {
                        *gv += go;
                    }
                }
            }
        }
        Op::AngularMargin { x, labels, factors } => {
            let n = out_shape[1];
            if let Some(g) = sbuf(scratch, nodes, *x) {
                for (j, gv) in g.iter_mut().enumerate() {
                    let row = j / n;
                    let col = j % n;
                    let f = if col == labels[row] { factors[row] } else { 1.0 };
                    *gv += f * gout[j];
                }
            }
        }
        Op::Softmax { x } => {
            let rows = out_shape[0];
            let n = out_shape[1];
            let p = &nodes[i].out.data;
            if let Some(g) = sbuf(scratch, nodes, *x) {
                for r in 0..rows {
                    let pr = &p[r * n..(r + 1) * n];
                    let go = &gout[r * n..(r + 1) * n];
                    let dot: f64 = pr.iter().zip(go).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        g[r * n + j] += pr[j] * (go[j] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let go = gout[0];
            let ln = nodes[logits.0 as usize].out.shape[1];
            let rows = labels.len() as f64;
            if let Some(g) = sbuf(scratch, nodes, *logits) {
                for (j, gv) in g.iter_mut().enumerate() {
                    let onehot = if j % ln == labels[j / ln] { 1.0 } else { 0.0 };
                    *gv += go * (probs[j] - onehot) / rows;
                }
            }
        }
    }
    Ok(())
}
