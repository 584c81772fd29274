//! Forward kernels and their reverse rules.
//!
//! Every [`Op`] has a forward implementation in [`forward`] and a reverse rule
//! in [`backward`]. The reverse rule receives the forward inputs, the cached
//! output, whatever the forward saved, and the upstream gradient, and returns
//! one gradient per input (or `None` where the input does not need one).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Operation kinds, without parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Dense,
    Relu,
    MaxPool2,
    GlobalAvgPool,
    BatchNormTrain,
    BatchNormEval,
    L2Normalize,
    PairwiseCosine,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Log,
    Exp,
    Sum,
    Mean,
    SumLastAxis,
    BilinearResize,
    GatherRows,
    ConcatRows,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::Dense,
        OpKind::Relu,
        OpKind::MaxPool2,
        OpKind::GlobalAvgPool,
        OpKind::BatchNormTrain,
        OpKind::BatchNormEval,
        OpKind::L2Normalize,
        OpKind::PairwiseCosine,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumLastAxis,
        OpKind::BilinearResize,
        OpKind::GatherRows,
        OpKind::ConcatRows,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Dense => "dense",
            OpKind::Relu => "relu",
            OpKind::MaxPool2 => "max-pool-2x2",
            OpKind::GlobalAvgPool => "global-average-pool",
            OpKind::BatchNormTrain => "batch-norm-2d-train",
            OpKind::BatchNormEval => "batch-norm-2d-eval",
            OpKind::L2Normalize => "l2-normalize",
            OpKind::PairwiseCosine => "pairwise-cosine-similarity",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add-scalar",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumLastAxis => "sum-last-axis",
            OpKind::BilinearResize => "bilinear-resize",
            OpKind::GatherRows => "gather-rows",
            OpKind::ConcatRows => "concat-rows",
            OpKind::Reshape => "reshape",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// An operation together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Op<F> {
    Leaf,
    /// `x[B,Ci,H,W] * w[Co,Ci,Kh,Kw] (+ b[Co])`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// `x[B,I] @ w[I,O] (+ b[O])`.
    Dense,
    Relu,
    MaxPool2,
    GlobalAvgPool,
    /// Inputs `x[B,C,H,W], scale[C], shift[C]`; normalizes with batch statistics.
    BatchNormTrain {
        eps: F,
    },
    /// Inputs as for training mode; normalizes with the given running statistics.
    BatchNormEval {
        mean: Vec<F>,
        var: Vec<F>,
        eps: F,
    },
    L2Normalize,
    PairwiseCosine,
    Add,
    Sub,
    Mul,
    Scale(F),
    AddScalar(F),
    Log,
    Exp,
    Sum,
    Mean,
    SumLastAxis,
    BilinearResize {
        height: usize,
        width: usize,
    },
    GatherRows(Vec<usize>),
    ConcatRows,
    Reshape(Vec<usize>),
}

impl<F: Real> Op<F> {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Dense => OpKind::Dense,
            Op::Relu => OpKind::Relu,
            Op::MaxPool2 => OpKind::MaxPool2,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::BatchNormTrain { .. } => OpKind::BatchNormTrain,
            Op::BatchNormEval { .. } => OpKind::BatchNormEval,
            Op::L2Normalize => OpKind::L2Normalize,
            Op::PairwiseCosine => OpKind::PairwiseCosine,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Log => OpKind::Log,
            Op::Exp => OpKind::Exp,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::SumLastAxis => OpKind::SumLastAxis,
            Op::BilinearResize { .. } => OpKind::BilinearResize,
            Op::GatherRows(_) => OpKind::GatherRows,
            Op::ConcatRows => OpKind::ConcatRows,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }

    pub fn cast<G: Real>(&self) -> Op<G> {
        let c = |x: F| G::of(x.to_f64_lossy());
        match self {
            Op::Leaf => Op::Leaf,
            Op::Conv2d { stride, padding } => Op::Conv2d { stride: *stride, padding: *padding },
            Op::Dense => Op::Dense,
            Op::Relu => Op::Relu,
            Op::MaxPool2 => Op::MaxPool2,
            Op::GlobalAvgPool => Op::GlobalAvgPool,
            Op::BatchNormTrain { eps } => Op::BatchNormTrain { eps: c(*eps) },
            Op::BatchNormEval { mean, var, eps } => Op::BatchNormEval {
                mean: mean.iter().map(|&x| c(x)).collect(),
                var: var.iter().map(|&x| c(x)).collect(),
                eps: c(*eps),
            },
            Op::L2Normalize => Op::L2Normalize,
            Op::PairwiseCosine => Op::PairwiseCosine,
            Op::Add => Op::Add,
            Op::Sub => Op::Sub,
            Op::Mul => Op::Mul,
            Op::Scale(s) => Op::Scale(c(*s)),
            Op::AddScalar(s) => Op::AddScalar(c(*s)),
            Op::Log => Op::Log,
            Op::Exp => Op::Exp,
            Op::Sum => Op::Sum,
            Op::Mean => Op::Mean,
            Op::SumLastAxis => Op::SumLastAxis,
            Op::BilinearResize { height, width } => Op::BilinearResize { height: *height, width: *width },
            Op::GatherRows(idx) => Op::GatherRows(idx.clone()),
            Op::ConcatRows => Op::ConcatRows,
            Op::Reshape(s) => Op::Reshape(s.clone()),
        }
    }
}

/// Forward-pass state kept for the reverse rule.
#[derive(Clone, Debug, Default)]
pub enum Saved<F> {
    #[default]
    Nothing,
    /// Flat input index chosen by each output element (max pooling).
    Indices(Vec<usize>),
    /// Per-row norms (l2-normalize, pairwise-cosine).
    Norms(Vec<F>),
    /// Normalized activations, per-channel inverse std, and batch statistics.
    Norm { xhat: Vec<F>, inv_std: Vec<F>, mean: Vec<F>, var: Vec<F> },
}

const NORM_FLOOR: f64 = 1e-12;

fn dims4<F: Real>(op: &'static str, t: &Tensor<F>) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::shape(op, format!("expected a 4-d tensor, got {s:?}"))),
    }
}

fn dims2<F: Real>(op: &'static str, t: &Tensor<F>) -> Result<[usize; 2]> {
    match *t.shape() {
        [r, c] => Ok([r, c]),
        ref s => Err(Error::shape(op, format!("expected a 2-d tensor, got {s:?}"))),
    }
}

fn arity<F: Real>(op: &Op<F>, inputs: &[&Tensor<F>], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(Error::shape(static_name(op.kind()), format!("expected {allowed:?} inputs, got {}", inputs.len())))
    }
}

fn static_name(kind: OpKind) -> &'static str {
    kind.name()
}

fn same_shape<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

// ── dense linear algebra helpers ─────────────────────────────────────

/// `c[m,n] += a[m,k] @ b[k,n]`
fn gemm_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ @ b[k,n]`
fn gemm_tn_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == F::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + api * bj;
            }
        }
    }
}

/// Dot product with eight independent lanes so the loop vectorizes.
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// `c[m,n] += a[m,k] @ b[n,k]ᵀ`
fn gemm_nt_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = c[i * n + j] + dot(arow, brow);
        }
    }
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<F: Real>(&self, x: &[F], col: &mut [F]) {
        let p = self.p();
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] =
                                if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                    x[(c * self.h + iy as usize) * self.w + ix as usize]
                                } else {
                                    F::zero()
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Real>(&self, col: &[F], dx: &mut [F]) {
        let p = self.p();
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            let d = &mut dx[(c * self.h + iy as usize) * self.w + ix as usize];
                            *d = *d + src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let [n, ci, h, wd] = dims4("conv2d", x)?;
    let [co, wci, kh, kw] = dims4("conv2d", w)?;
    if wci != ci {
        return Err(Error::shape("conv2d", format!("input has {ci} channels but kernel expects {wci}")));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be ≥ 1"));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}×{kw} larger than padded input {h}×{wd} (padding {pad})"),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [co] {
            return Err(Error::shape("conv2d", format!("bias {:?} vs {co} filters", b.shape())));
        }
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    Ok((n, co, ConvGeom { ci, h, w: wd, kh, kw, stride, pad, ho, wo }))
}

// ── bilinear resampling ──────────────────────────────────────────────

/// Source taps for one output coordinate under half-pixel centers.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of a single `h×w` plane. Usable outside any graph.
pub fn resize_plane<F: Real>(src: &[F], h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    if oh == h && ow == w {
        return src.to_vec();
    }
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ty {
        let fy = F::of(fy);
        for &(x0, x1, fx) in &tx {
            let fx = F::of(fx);
            let top = src[y0 * w + x0] * (F::one() - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (F::one() - fx) + src[y1 * w + x1] * fx;
            out.push(top * (F::one() - fy) + bot * fy);
        }
    }
    out
}

fn resize_plane_backward<F: Real>(gout: &[F], h: usize, w: usize, oh: usize, ow: usize, gin: &mut [F]) {
    if oh == h && ow == w {
        for (a, &b) in gin.iter_mut().zip(gout) {
            *a = *a + b;
        }
        return;
    }
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let fy = F::of(fy);
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let fx = F::of(fx);
            let g = gout[oy * ow + ox];
            let gt = g * (F::one() - fy);
            let gb = g * fy;
            gin[y0 * w + x0] = gin[y0 * w + x0] + gt * (F::one() - fx);
            gin[y0 * w + x1] = gin[y0 * w + x1] + gt * fx;
            gin[y1 * w + x0] = gin[y1 * w + x0] + gb * (F::one() - fx);
            gin[y1 * w + x1] = gin[y1 * w + x1] + gb * fx;
        }
    }
}

/// Bilinear resize of an `N×C×H×W` tensor, outside any graph.
pub fn bilinear_resize<F: Real>(x: &Tensor<F>, height: usize, width: usize) -> Result<Tensor<F>> {
    forward(&Op::BilinearResize { height, width }, &[x]).map(|(t, _)| t)
}

/// Eval-mode batch normalization outside any graph.
pub fn batch_norm_eval<F: Real>(
    x: &Tensor<F>,
    scale: &Tensor<F>,
    shift: &Tensor<F>,
    mean: &[F],
    var: &[F],
    eps: F,
) -> Result<Tensor<F>> {
    let op = Op::BatchNormEval { mean: mean.to_vec(), var: var.to_vec(), eps };
    forward(&op, &[x, scale, shift]).map(|(t, _)| t)
}

// ── forward ──────────────────────────────────────────────────────────

/// Evaluate one kernel.
pub fn forward<F: Real>(op: &Op<F>, inputs: &[&Tensor<F>]) -> Result<(Tensor<F>, Saved<F>)> {
    let none = Saved::Nothing;
    match op {
        Op::Leaf => Err(Error::invalid("leaf nodes have no forward kernel")),
        Op::Conv2d { stride, padding } => {
            arity(op, inputs, &[2, 3])?;
            let (x, w, b) = (inputs[0], inputs[1], inputs.get(2).copied());
            let (n, co, g) = conv_geom(x, w, b, *stride, *padding)?;
            let (k, p) = (g.k(), g.p());
            let in_sz = g.ci * g.h * g.w;
            let mut out = vec![F::zero(); n * co * p];
            let mut col = vec![F::zero(); k * p];
            for s in 0..n {
                g.im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &mut col);
                let o = &mut out[s * co * p..(s + 1) * co * p];
                if let Some(b) = b {
                    for (f, &bf) in b.data().iter().enumerate() {
                        o[f * p..(f + 1) * p].iter_mut().for_each(|v| *v = bf);
                    }
                }
                gemm_acc(w.data(), &col, o, co, k, p);
            }
            Ok((Tensor::new(vec![n, co, g.ho, g.wo], out)?, none))
        }
        Op::Dense => {
            arity(op, inputs, &[2, 3])?;
            let (x, w) = (inputs[0], inputs[1]);
            let [n, i] = dims2("dense", x)?;
            let [wi, o] = dims2("dense", w)?;
            if wi != i {
                return Err(Error::shape("dense", format!("input width {i} vs weight rows {wi}")));
            }
            let mut out = vec![F::zero(); n * o];
            if let Some(b) = inputs.get(2) {
                if b.shape() != [o] {
                    return Err(Error::shape("dense", format!("bias {:?} vs {o}", b.shape())));
                }
                for r in 0..n {
                    out[r * o..(r + 1) * o].copy_from_slice(b.data());
                }
            }
            gemm_acc(x.data(), w.data(), &mut out, n, i, o);
            Ok((Tensor::new(vec![n, o], out)?, none))
        }
        Op::Relu => {
            arity(op, inputs, &[1])?;
            Ok((inputs[0].map(|v| if v > F::zero() { v } else { F::zero() }), none))
        }
        Op::MaxPool2 => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let [n, c, h, w] = dims4("max-pool-2x2", x)?;
            if h < 2 || w < 2 {
                return Err(Error::shape("max-pool-2x2", format!("spatial size {h}×{w} < 2")));
            }
            let (ho, wo) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(n * c * ho * wo);
            let mut idx = Vec::with_capacity(n * c * ho * wo);
            let xd = x.data();
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = base + (2 * oy) * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if xd[j] > xd[best] {
                                best = j;
                            }
                        }
                        out.push(xd[best]);
                        idx.push(best);
                    }
                }
            }
            Ok((Tensor::new(vec![n, c, ho, wo], out)?, Saved::Indices(idx)))
        }
        Op::GlobalAvgPool => {
            arity(op, inputs, &[1])?;
            let [n, c, h, w] = dims4("global-average-pool", inputs[0])?;
            let hw = h * w;
            let inv = F::one() / F::of(hw as f64);
            let out = inputs[0].data().chunks(hw).map(|plane| plane.iter().copied().sum::<F>() * inv).collect();
            Ok((Tensor::new(vec![n, c], out)?, none))
        }
        Op::BatchNormTrain { eps } => {
            arity(op, inputs, &[3])?;
            let (x, scale, shift) = (inputs[0], inputs[1], inputs[2]);
            let [n, c, h, w] = dims4("batch-norm-2d", x)?;
            check_bn_affine(c, scale, shift)?;
            let hw = h * w;
            let m = F::of((n * hw) as f64);
            let xd = x.data();
            let mut mean = vec![F::zero(); c];
            let mut var = vec![F::zero(); c];
            for s in 0..n {
                for ch in 0..c {
                    let plane = &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    mean[ch] = mean[ch] + plane.iter().copied().sum::<F>();
                }
            }
            mean.iter_mut().for_each(|v| *v = *v / m);
            for s in 0..n {
                for ch in 0..c {
                    let plane = &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    let mu = mean[ch];
                    var[ch] = var[ch] + plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>();
                }
            }
            var.iter_mut().for_each(|v| *v = *v / m);
            let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + *eps).sqrt()).collect();
            let mut xhat = vec![F::zero(); xd.len()];
            let mut out = vec![F::zero(); xd.len()];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    let (g, b) = (scale.data()[ch], shift.data()[ch]);
                    for j in off..off + hw {
                        let xh = (xd[j] - mean[ch]) * inv_std[ch];
                        xhat[j] = xh;
                        out[j] = g * xh + b;
                    }
                }
            }
            Ok((Tensor::new(x.shape().to_vec(), out)?, Saved::Norm { xhat, inv_std, mean, var }))
        }
        Op::BatchNormEval { mean, var, eps } => {
            arity(op, inputs, &[3])?;
            let (x, scale, shift) = (inputs[0], inputs[1], inputs[2]);
            let [n, c, h, w] = dims4("batch-norm-2d", x)?;
            check_bn_affine(c, scale, shift)?;
            if mean.len() != c || var.len() != c {
                return Err(Error::shape(
                    "batch-norm-2d",
                    format!("running stats of length {} for {c} channels", mean.len()),
                ));
            }
            let hw = h * w;
            let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + *eps).sqrt()).collect();
            let xd = x.data();
            let mut xhat = vec![F::zero(); xd.len()];
            let mut out = vec![F::zero(); xd.len()];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    let (g, b) = (scale.data()[ch], shift.data()[ch]);
                    for j in off..off + hw {
                        let xh = (xd[j] - mean[ch]) * inv_std[ch];
                        xhat[j] = xh;
                        out[j] = g * xh + b;
                    }
                }
            }
            let saved = Saved::Norm { xhat, inv_std, mean: mean.clone(), var: var.clone() };
            Ok((Tensor::new(x.shape().to_vec(), out)?, saved))
        }
        Op::L2Normalize => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let d = *x.shape().last().expect("nonempty shape");
            let floor = F::of(NORM_FLOOR);
            let mut out = Vec::with_capacity(x.len());
            let mut norms = Vec::with_capacity(x.len() / d);
            for row in x.data().chunks(d) {
                let nrm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(floor);
                norms.push(nrm);
                out.extend(row.iter().map(|&v| v / nrm));
            }
            Ok((Tensor::new(x.shape().to_vec(), out)?, Saved::Norms(norms)))
        }
        Op::PairwiseCosine => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let [n, d] = dims2("pairwise-cosine-similarity", x)?;
            let floor = F::of(NORM_FLOOR);
            let mut unit = Vec::with_capacity(n * d);
            let mut norms = Vec::with_capacity(n);
            for row in x.data().chunks(d) {
                let nrm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(floor);
                norms.push(nrm);
                unit.extend(row.iter().map(|&v| v / nrm));
            }
            let mut out = vec![F::zero(); n * n];
            gemm_nt_acc(&unit, &unit, &mut out, n, d, n);
            Ok((Tensor::new(vec![n, n], out)?, Saved::Norms(norms)))
        }
        Op::Add | Op::Sub | Op::Mul => {
            arity(op, inputs, &[2])?;
            let name = op.kind().name();
            same_shape(name, inputs[0], inputs[1])?;
            let f = match op {
                Op::Add => |a: F, b: F| a + b,
                Op::Sub => |a: F, b: F| a - b,
                _ => |a: F, b: F| a * b,
            };
            Ok((inputs[0].zip_map(inputs[1], f), none))
        }
        Op::Scale(s) => {
            arity(op, inputs, &[1])?;
            Ok((inputs[0].map(|v| v * *s), none))
        }
        Op::AddScalar(s) => {
            arity(op, inputs, &[1])?;
            Ok((inputs[0].map(|v| v + *s), none))
        }
        Op::Log => {
            arity(op, inputs, &[1])?;
            Ok((inputs[0].map(|v| v.ln()), none))
        }
        Op::Exp => {
            arity(op, inputs, &[1])?;
            Ok((inputs[0].map(|v| v.exp()), none))
        }
        Op::Sum => {
            arity(op, inputs, &[1])?;
            Ok((Tensor::scalar(inputs[0].sum()), none))
        }
        Op::Mean => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            Ok((Tensor::scalar(x.sum() / F::of(x.len() as f64)), none))
        }
        Op::SumLastAxis => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let d = *x.shape().last().expect("nonempty shape");
            let mut shape = x.shape()[..x.shape().len() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            let out = x.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
            Ok((Tensor::new(shape, out)?, none))
        }
        Op::BilinearResize { height, width } => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let [n, c, h, w] = dims4("bilinear-resize", x)?;
            if *height == 0 || *width == 0 {
                return Err(Error::shape("bilinear-resize", "target size must be ≥ 1"));
            }
            let mut out = Vec::with_capacity(n * c * height * width);
            for plane in x.data().chunks(h * w) {
                out.extend(resize_plane(plane, h, w, *height, *width));
            }
            Ok((Tensor::new(vec![n, c, *height, *width], out)?, none))
        }
        Op::GatherRows(idx) => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            if idx.is_empty() {
                return Err(Error::shape("gather-rows", "empty index list"));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= x.shape()[0]) {
                return Err(Error::shape("gather-rows", format!("row {bad} out of range for {:?}", x.shape())));
            }
            Ok((x.select_rows(idx), none))
        }
        Op::ConcatRows => {
            if inputs.is_empty() {
                return Err(Error::shape("concat-rows", "no inputs"));
            }
            Ok((Tensor::concat_rows(inputs)?, none))
        }
        Op::Reshape(shape) => {
            arity(op, inputs, &[1])?;
            Ok((inputs[0].clone().reshape(shape.clone())?, none))
        }
    }
}

fn check_bn_affine<F: Real>(c: usize, scale: &Tensor<F>, shift: &Tensor<F>) -> Result<()> {
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(
            "batch-norm-2d",
            format!("scale {:?} / shift {:?} for {c} channels", scale.shape(), shift.shape()),
        ));
    }
    Ok(())
}

// ── reverse rules ────────────────────────────────────────────────────

/// Gradients of one kernel's inputs given the gradient of its output.
///
/// `needs[i]` tells the rule whether input `i` wants a gradient; rules may
/// skip work for inputs that do not.
pub fn backward<F: Real>(
    op: &Op<F>,
    inputs: &[&Tensor<F>],
    output: &Tensor<F>,
    saved: &Saved<F>,
    gout: &Tensor<F>,
    needs: &[bool],
) -> Vec<Option<Tensor<F>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { stride, padding } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs.get(2).copied());
            let (n, co, g) = conv_geom(x, w, b, *stride, *padding).expect("validated in forward");
            let (k, p) = (g.k(), g.p());
            let in_sz = g.ci * g.h * g.w;
            let mut dx = want(0).then(|| vec![F::zero(); x.len()]);
            let mut dw = vec![F::zero(); w.len()];
            let mut db = vec![F::zero(); co];
            let mut col = vec![F::zero(); k * p];
            let mut dcol = vec![F::zero(); k * p];
            for s in 0..n {
                let go = &gout.data()[s * co * p..(s + 1) * co * p];
                if want(1) {
                    g.im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &mut col);
                    gemm_nt_acc(go, &col, &mut dw, co, p, k);
                }
                if b.is_some() && want(2) {
                    for f in 0..co {
                        db[f] = db[f] + go[f * p..(f + 1) * p].iter().copied().sum::<F>();
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    dcol.iter_mut().for_each(|v| *v = F::zero());
                    gemm_tn_acc(w.data(), go, &mut dcol, co, k, p);
                    g.col2im(&dcol, &mut dx[s * in_sz..(s + 1) * in_sz]);
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape")),
                want(1).then(|| Tensor::new(w.shape().to_vec(), dw).expect("shape")),
            ];
            if b.is_some() {
                grads.push(want(2).then(|| Tensor::new(vec![co], db).expect("shape")));
            }
            grads
        }
        Op::Dense => {
            let (x, w) = (inputs[0], inputs[1]);
            let [n, i] = [x.shape()[0], x.shape()[1]];
            let o = w.shape()[1];
            let dx = want(0).then(|| {
                let mut d = vec![F::zero(); n * i];
                gemm_nt_acc(gout.data(), w.data(), &mut d, n, o, i);
                Tensor::new(vec![n, i], d).expect("shape")
            });
            let dw = want(1).then(|| {
                let mut d = vec![F::zero(); i * o];
                gemm_tn_acc(x.data(), gout.data(), &mut d, n, i, o);
                Tensor::new(vec![i, o], d).expect("shape")
            });
            let mut grads = vec![dx, dw];
            if inputs.len() == 3 {
                grads.push(want(2).then(|| {
                    let mut d = vec![F::zero(); o];
                    for r in gout.data().chunks(o) {
                        for (a, &b) in d.iter_mut().zip(r) {
                            *a = *a + b;
                        }
                    }
                    Tensor::new(vec![o], d).expect("shape")
                }));
            }
            grads
        }
        Op::Relu => {
            vec![Some(inputs[0].zip_map(gout, |x, g| if x > F::zero() { g } else { F::zero() }))]
        }
        Op::MaxPool2 => {
            let Saved::Indices(idx) = saved else { unreachable!("max-pool saves indices") };
            let mut d = Tensor::zeros(inputs[0].shape().to_vec());
            let dd = d.data_mut();
            for (&j, &g) in idx.iter().zip(gout.data()) {
                dd[j] = dd[j] + g;
            }
            vec![Some(d)]
        }
        Op::GlobalAvgPool => {
            let x = inputs[0];
            let hw = x.shape()[2] * x.shape()[3];
            let inv = F::one() / F::of(hw as f64);
            let mut d = Vec::with_capacity(x.len());
            for &g in gout.data() {
                d.extend(std::iter::repeat_n(g * inv, hw));
            }
            vec![Some(Tensor::new(x.shape().to_vec(), d).expect("shape"))]
        }
        Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => {
            let Saved::Norm { xhat, inv_std, .. } = saved else { unreachable!("batch norm saves normalized input") };
            let train = matches!(op, Op::BatchNormTrain { .. });
            let (x, scale) = (inputs[0], inputs[1]);
            let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
            let hw = h * w;
            let m = F::of((n * hw) as f64);
            let gd = gout.data();
            let mut dscale = vec![F::zero(); c];
            let mut dshift = vec![F::zero(); c];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    for j in off..off + hw {
                        dshift[ch] = dshift[ch] + gd[j];
                        dscale[ch] = dscale[ch] + gd[j] * xhat[j];
                    }
                }
            }
            let dx = want(0).then(|| {
                let mut d = vec![F::zero(); x.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        let k = scale.data()[ch] * inv_std[ch];
                        for j in off..off + hw {
                            d[j] =
                                if train { k * (gd[j] - dshift[ch] / m - xhat[j] * dscale[ch] / m) } else { k * gd[j] };
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), d).expect("shape")
            });
            vec![
                dx,
                want(1).then(|| Tensor::new(vec![c], dscale).expect("shape")),
                want(2).then(|| Tensor::new(vec![c], dshift).expect("shape")),
            ]
        }
        Op::L2Normalize => {
            let Saved::Norms(norms) = saved else { unreachable!("l2-normalize saves norms") };
            let d = *output.shape().last().expect("shape");
            let mut dx = Vec::with_capacity(output.len());
            for ((y, g), &nrm) in output.data().chunks(d).zip(gout.data().chunks(d)).zip(norms) {
                let dot: F = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                dx.extend(y.iter().zip(g).map(|(&yi, &gi)| (gi - yi * dot) / nrm));
            }
            vec![Some(Tensor::new(output.shape().to_vec(), dx).expect("shape"))]
        }
        Op::PairwiseCosine => {
            let Saved::Norms(norms) = saved else { unreachable!("cosine saves norms") };
            let x = inputs[0];
            let [n, d] = [x.shape()[0], x.shape()[1]];
            let unit: Vec<F> =
                x.data().chunks(d).zip(norms).flat_map(|(r, &nrm)| r.iter().map(move |&v| v / nrm)).collect();
            let g = gout.data();
            let mut sym = vec![F::zero(); n * n];
            for i in 0..n {
                for j in 0..n {
                    sym[i * n + j] = g[i * n + j] + g[j * n + i];
                }
            }
            let mut du = vec![F::zero(); n * d];
            gemm_acc(&sym, &unit, &mut du, n, n, d);
            let mut dx = Vec::with_capacity(n * d);
            for ((u, gu), &nrm) in unit.chunks(d).zip(du.chunks(d)).zip(norms) {
                let dot: F = u.iter().zip(gu).map(|(&a, &b)| a * b).sum();
                dx.extend(u.iter().zip(gu).map(|(&ui, &gi)| (gi - ui * dot) / nrm));
            }
            vec![Some(Tensor::new(vec![n, d], dx).expect("shape"))]
        }
        Op::Add => vec![want(0).then(|| gout.clone()), want(1).then(|| gout.clone())],
        Op::Sub => vec![want(0).then(|| gout.clone()), want(1).then(|| gout.map(|g| -g))],
        Op::Mul => vec![
            want(0).then(|| gout.zip_map(inputs[1], |g, b| g * b)),
            want(1).then(|| gout.zip_map(inputs[0], |g, a| g * a)),
        ],
        Op::Scale(s) => vec![Some(gout.map(|g| g * *s))],
        Op::AddScalar(_) => vec![Some(gout.clone())],
        Op::Log => vec![Some(gout.zip_map(inputs[0], |g, x| g / x))],
        Op::Exp => vec![Some(gout.zip_map(output, |g, y| g * y))],
        Op::Sum => vec![Some(Tensor::full(inputs[0].shape().to_vec(), gout.item()))],
        Op::Mean => {
            let x = inputs[0];
            let v = gout.item() / F::of(x.len() as f64);
            vec![Some(Tensor::full(x.shape().to_vec(), v))]
        }
        Op::SumLastAxis => {
            let x = inputs[0];
            let d = *x.shape().last().expect("shape");
            let mut dx = Vec::with_capacity(x.len());
            for &g in gout.data() {
                dx.extend(std::iter::repeat_n(g, d));
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx).expect("shape"))]
        }
        Op::BilinearResize { height, width } => {
            let x = inputs[0];
            let [h, w] = [x.shape()[2], x.shape()[3]];
            let mut d = Tensor::zeros(x.shape().to_vec());
            for (gin, go) in d.data_mut().chunks_mut(h * w).zip(gout.data().chunks(height * width)) {
                resize_plane_backward(go, h, w, *height, *width, gin);
            }
            vec![Some(d)]
        }
        Op::GatherRows(idx) => {
            let mut d = Tensor::zeros(inputs[0].shape().to_vec());
            for (r, &i) in idx.iter().enumerate() {
                let src = gout.row(r).to_vec();
                for (a, b) in d.row_mut(i).iter_mut().zip(src) {
                    *a = *a + b;
                }
            }
            vec![Some(d)]
        }
        Op::ConcatRows => {
            let mut offset = 0;
            let w = gout.len() / gout.shape()[0];
            inputs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let len = x.len();
                    let part = &gout.data()[offset * w..offset * w + len];
                    offset += x.shape()[0];
                    want(i).then(|| Tensor::new(x.shape().to_vec(), part.to_vec()).expect("shape"))
                })
                .collect()
        }
        Op::Reshape(_) => {
            vec![Some(gout.clone().reshape(inputs[0].shape().to_vec()).expect("shape"))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn relu_forward() {
        let (y, _) = forward(&Op::Relu, &[&t(&[2, 2], &[-1., 2., 0., 3.])]).unwrap();
        assert_eq!(y.data(), &[0., 2., 0., 3.]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let (y, _) = forward(&Op::L2Normalize, &[&t(&[2], &[3., 4.])]).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn conv_window_sums() {
        // 4×4 grid 1..16; 3×3 all-ones kernel; window sums by hand:
        // top-left 1+2+3+5+6+7+9+10+11 = 54, then 63, 90, 99.
        let x = t(&[1, 1, 4, 4], &(1..=16).map(f64::from).collect::<Vec<_>>());
        let w = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let (y, _) = forward(&Op::Conv2d { stride: 1, padding: 0 }, &[&x, &w]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[54., 63., 90., 99.]);
    }

    #[test]
    fn conv_output_arithmetic() {
        let x = Tensor::<f32>::zeros(vec![2, 3, 7, 7]);
        let w = Tensor::<f32>::zeros(vec![5, 3, 3, 3]);
        let (y, _) = forward(&Op::Conv2d { stride: 2, padding: 1 }, &[&x, &w]).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        let err = forward(&Op::Conv2d { stride: 1, padding: 0 }, &[&x, &w]).unwrap_err();
        assert!(err.to_string().contains("conv2d"), "{err}");
        let a = Tensor::<f32>::zeros(vec![2, 2]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        let err = forward(&Op::Add, &[&a, &b]).unwrap_err();
        assert!(err.to_string().contains("add") && err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!("softmax".parse::<OpKind>(), Err(Error::UnknownOp(_))));
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }

    #[test]
    fn resize_identity_is_exact() {
        let x = t(&[1, 2, 3, 5], &(0..30).map(|v| (v as f64).sin()).collect::<Vec<_>>());
        assert_eq!(bilinear_resize(&x, 3, 5).unwrap(), x);
    }

    #[test]
    fn resize_upsample_constant() {
        let x = Tensor::<f64>::full(vec![1, 1, 2, 2], 0.25);
        let y = bilinear_resize(&x, 7, 9).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn max_pool_picks_first_on_ties() {
        let x = t(&[1, 1, 2, 2], &[1., 1., 1., 1.]);
        let (_, saved) = forward(&Op::MaxPool2, &[&x]).unwrap();
        let Saved::Indices(i) = saved else { panic!() };
        assert_eq!(i, vec![0]);
    }

    #[test]
    fn batch_norm_eval_outside_graph() {
        let x = t(&[1, 1, 1, 2], &[1., 3.]);
        let y = batch_norm_eval(&x, &Tensor::ones(vec![1]), &Tensor::zeros(vec![1]), &[2.0], &[1.0], 0.0).unwrap();
        assert_eq!(y.data(), &[-1., 1.]);
    }
}
