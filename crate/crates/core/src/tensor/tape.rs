use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        col: Vec<f64>,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    LinearNoBias {
        input: Var,
        weights: Var,
    },
    SelectRow {
        input: Var,
        row: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum {
        inputs: Vec<Var>,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    NormMap(Var),
    ChannelDot {
        fmap: Var,
        weight: Var,
    },
    SimilarityMap {
        fmap: Var,
        weight: Var,
    },
    MinMaxNormalize {
        input: Var,
        inv_range: f64,
    },
    ChannelMean(Var),
    SpatialMask {
        input: Var,
        keep: Vec<bool>,
    },
    RegionContrast {
        input: Var,
        fg: Vec<usize>,
        bg: Vec<usize>,
    },
    AbsDiff {
        a: Var,
        b: Var,
        mean: bool,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Record of executed operations for one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of `len` when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; len])
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass buffers of at least m*k, k*n and m*n elements laid
    // out according to the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_len();
    let mut col = vec![0.0; g.patch_len() * p];
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - g.padding as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[oy * g.out_w + ox] = src[x as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - g.padding as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output spatial size of a convolution along one axis.
/// `(min, max)` of a slice; `(inf, -inf)` when empty.
pub fn extrema(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

pub(crate) fn conv_out_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Parameters use `requires_grad = true`.
    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let Tensor { shape, data } = tensor;
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, true)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    /// First element; intended for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Same values, cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    /// Cross-correlation of a `[C_in,H,W]` input with a `[C_out,C_in,kh,kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        if ishape.len() != 3 || kshape.len() != 4 || ishape[0] != kshape[1] {
            return Err(Error::shape("conv2d", &ishape, &kshape));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let (out_h, out_w) = match (
            conv_out_size(ishape[1], kshape[2], stride, padding),
            conv_out_size(ishape[2], kshape[3], stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::shape("conv2d", &ishape, &kshape)),
        };
        let geom = ConvGeom {
            in_channels: ishape[0],
            height: ishape[1],
            width: ishape[2],
            out_channels: kshape[0],
            kh: kshape[2],
            kw: kshape[3],
            stride,
            padding,
            out_h,
            out_w,
        };
        let col = im2col(self.value(input), &geom);
        let (m, k, n) = (geom.out_channels, geom.patch_len(), geom.out_len());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(kernel),
            (k as isize, 1),
            &col,
            (n as isize, 1),
            &mut out,
            false,
        );
        check_finite("conv2d", &out)?;
        let rg = self.needs(&[input, kernel]);
        Ok(self.push(
            vec![m, out_h, out_w],
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                geom,
                col,
            },
        ))
    }

    /// Adds `bias[c]` to every spatial location of channel `c`.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 3 || bshape != [ishape[0]] {
            return Err(Error::shape("channel_bias", &ishape, &bshape));
        }
        let plane = ishape[1] * ishape[2];
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(input)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i / plane])
            .collect();
        check_finite("channel_bias", &out)?;
        let rg = self.needs(&[input, bias]);
        Ok(self.push(ishape, out, rg, Op::ChannelBias { input, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out: Vec<f64> = self.value(input).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.needs(&[input]);
        self.push(shape, out, rg, Op::Relu(input))
    }

    /// Per-channel spatial mean of a `[D,H,W]` map.
    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("global_average_pool", &shape, &[0, 0, 0]));
        }
        let plane = shape[1] * shape[2];
        let out: Vec<f64> = self
            .value(input)
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.needs(&[input]);
        Ok(self.push(vec![shape[0]], out, rg, Op::GlobalAvgPool(input)))
    }

    /// `logits[c] = weights[c] · input`.
    pub fn linear_no_bias(&mut self, input: Var, weights: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weights).to_vec();
        if ishape.len() != 1 || wshape.len() != 2 || wshape[1] != ishape[0] {
            return Err(Error::shape("linear_no_bias", &ishape, &wshape));
        }
        let x = self.value(input);
        let out: Vec<f64> = self
            .value(weights)
            .chunks_exact(ishape[0])
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        check_finite("linear_no_bias", &out)?;
        let rg = self.needs(&[input, weights]);
        Ok(self.push(vec![wshape[0]], out, rg, Op::LinearNoBias { input, weights }))
    }

    /// Row `row` of a rank-2 tensor.
    pub fn select_row(&mut self, input: Var, row: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 || row >= shape[0] {
            return Err(Error::invalid(format!("select_row {row} out of range for {shape:?}")));
        }
        let d = shape[1];
        let out = self.value(input)[row * d..(row + 1) * d].to_vec();
        let rg = self.needs(&[input]);
        Ok(self.push(vec![d], out, rg, Op::SelectRow { input, row }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        check_finite("add", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        check_finite("mul", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(input).iter().map(|v| v * factor).collect();
        check_finite("scale", &out)?;
        let shape = self.shape(input).to_vec();
        let rg = self.needs(&[input]);
        Ok(self.push(shape, out, rg, Op::Scale(input, factor)))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.value(input).iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.needs(&[input]);
        Ok(self.push(vec![1], vec![s], rg, Op::Sum(input)))
    }

    /// `Σ weights[i] · inputs[i]` over scalar inputs.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: &[f64]) -> Result<Var> {
        if inputs.len() != weights.len() || inputs.is_empty() {
            return Err(Error::invalid("weighted_sum needs one weight per input"));
        }
        let mut total = 0.0;
        for (&v, &w) in inputs.iter().zip(weights) {
            if self.node(v).value.len() != 1 {
                return Err(Error::shape("weighted_sum", self.shape(v), &[1]));
            }
            total += w * self.scalar(v);
        }
        check_finite("weighted_sum", &[total])?;
        let rg = self.needs(inputs);
        Ok(self.push(
            vec![1],
            vec![total],
            rg,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// `-log softmax(logits)[label]`, evaluated with max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 1 {
            return Err(Error::shape("cross_entropy", &shape, &[0]));
        }
        if label >= shape[0] {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                shape[0]
            )));
        }
        let z = self.value(logits);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let loss = total.ln() - (z[label] - max);
        check_finite("cross_entropy", &[loss])?;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    fn map_dims(&self, op: &'static str, fmap: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(fmap);
        if s.len() != 3 {
            return Err(Error::shape(op, s, &[0, 0, 0]));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Per-location L2 norm over channels: `[D,H,W] -> [H,W]`.
    pub fn norm_map(&mut self, fmap: Var) -> Result<Var> {
        let (d, h, w) = self.map_dims("norm_map", fmap)?;
        let plane = h * w;
        let f = self.value(fmap);
        let mut sq = vec![0.0; plane];
        for ch in 0..d {
            for (acc, v) in sq.iter_mut().zip(&f[ch * plane..(ch + 1) * plane]) {
                *acc += v * v;
            }
        }
        let out: Vec<f64> = sq.into_iter().map(f64::sqrt).collect();
        check_finite("norm_map", &out)?;
        let rg = self.needs(&[fmap]);
        Ok(self.push(vec![h, w], out, rg, Op::NormMap(fmap)))
    }

    /// Per-location dot product with a `[D]` weight vector: `[D,H,W] -> [H,W]`.
    pub fn channel_dot(&mut self, fmap: Var, weight: Var) -> Result<Var> {
        let (d, h, w) = self.map_dims("channel_dot", fmap)?;
        if self.shape(weight) != [d] {
            return Err(Error::shape("channel_dot", self.shape(fmap), self.shape(weight)));
        }
        let plane = h * w;
        let f = self.value(fmap);
        let wv = self.value(weight);
        let mut out = vec![0.0; plane];
        for ch in 0..d {
            for (acc, v) in out.iter_mut().zip(&f[ch * plane..(ch + 1) * plane]) {
                *acc += wv[ch] * v;
            }
        }
        check_finite("channel_dot", &out)?;
        let rg = self.needs(&[fmap, weight]);
        Ok(self.push(vec![h, w], out, rg, Op::ChannelDot { fmap, weight }))
    }

    /// Per-location cosine similarity with a `[D]` weight vector.
    /// Locations with a zero feature vector get similarity 0.
    pub fn similarity_map(&mut self, fmap: Var, weight: Var) -> Result<Var> {
        let (d, h, w) = self.map_dims("similarity_map", fmap)?;
        if self.shape(weight) != [d] {
            return Err(Error::shape("similarity_map", self.shape(fmap), self.shape(weight)));
        }
        let wv = self.value(weight);
        let wnorm = wv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if wnorm == 0.0 {
            return Err(Error::invalid("similarity_map: zero weight vector"));
        }
        let plane = h * w;
        let f = self.value(fmap);
        let mut dot = vec![0.0; plane];
        let mut sq = vec![0.0; plane];
        for ch in 0..d {
            let fc = &f[ch * plane..(ch + 1) * plane];
            for u in 0..plane {
                dot[u] += wv[ch] * fc[u];
                sq[u] += fc[u] * fc[u];
            }
        }
        let out: Vec<f64> = dot
            .iter()
            .zip(&sq)
            .map(|(&a, &s)| {
                if s == 0.0 {
                    0.0
                } else {
                    (a / (wnorm * s.sqrt())).clamp(-1.0, 1.0)
                }
            })
            .collect();
        check_finite("similarity_map", &out)?;
        let rg = self.needs(&[fmap, weight]);
        Ok(self.push(vec![h, w], out, rg, Op::SimilarityMap { fmap, weight }))
    }

    /// `(v - min) / (max - min)` with the extrema treated as constants.
    /// A constant input maps to zeros.
    pub fn minmax_normalize(&mut self, input: Var) -> Var {
        let (lo, hi) = extrema(self.value(input));
        self.minmax_normalize_with(input, lo, hi)
    }

    /// `(v - lo) / (hi - lo)` with caller-supplied constant extrema; a
    /// non-positive range maps to zeros.
    pub fn minmax_normalize_with(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(input);
        let range = hi - lo;
        let inv_range = if range > 0.0 { 1.0 / range } else { 0.0 };
        let out: Vec<f64> = v.iter().map(|x| (x - lo) * inv_range).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.needs(&[input]);
        self.push(shape, out, rg, Op::MinMaxNormalize { input, inv_range })
    }

    /// Mean over channels: `[D,H,W] -> [H,W]`.
    pub fn channel_mean(&mut self, fmap: Var) -> Result<Var> {
        let (d, h, w) = self.map_dims("channel_mean", fmap)?;
        let plane = h * w;
        let f = self.value(fmap);
        let mut out = vec![0.0; plane];
        for ch in 0..d {
            for (acc, v) in out.iter_mut().zip(&f[ch * plane..(ch + 1) * plane]) {
                *acc += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= d as f64);
        let rg = self.needs(&[fmap]);
        Ok(self.push(vec![h, w], out, rg, Op::ChannelMean(fmap)))
    }

    /// Zeroes every channel at spatial locations where `keep` is false.
    pub fn spatial_mask(&mut self, fmap: Var, keep: &[bool]) -> Result<Var> {
        let (_, h, w) = self.map_dims("spatial_mask", fmap)?;
        if keep.len() != h * w {
            return Err(Error::shape("spatial_mask", self.shape(fmap), &[keep.len()]));
        }
        let plane = h * w;
        let out: Vec<f64> = self
            .value(fmap)
            .iter()
            .enumerate()
            .map(|(i, &v)| if keep[i % plane] { v } else { 0.0 })
            .collect();
        let shape = self.shape(fmap).to_vec();
        let rg = self.needs(&[fmap]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::SpatialMask {
                input: fmap,
                keep: keep.to_vec(),
            },
        ))
    }

    /// `-mean(x[fg]) + mean(x[bg])` over flat indices; an empty set adds 0.
    pub fn region_contrast(&mut self, input: Var, fg: &[usize], bg: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if let Some(&bad) = fg.iter().chain(bg).find(|&&i| i >= x.len()) {
            return Err(Error::invalid(format!(
                "region index {bad} out of range for {} locations",
                x.len()
            )));
        }
        let mean = |set: &[usize]| {
            if set.is_empty() {
                0.0
            } else {
                set.iter().map(|&i| x[i]).sum::<f64>() / set.len() as f64
            }
        };
        let out = -mean(fg) + mean(bg);
        check_finite("region_contrast", &[out])?;
        let rg = self.needs(&[input]);
        Ok(self.push(
            vec![1],
            vec![out],
            rg,
            Op::RegionContrast {
                input,
                fg: fg.to_vec(),
                bg: bg.to_vec(),
            },
        ))
    }

    /// Elementwise `|a - b|`, reduced by mean or by sum.
    pub fn abs_diff(&mut self, a: Var, b: Var, mean: bool) -> Result<Var> {
        self.same_shape("abs_diff", a, b)?;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y).abs())
            .sum();
        let out = if mean { s / self.value(a).len() as f64 } else { s };
        check_finite("abs_diff", &[out])?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![1], vec![out], rg, Op::AbsDiff { a, b, mean }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf with `requires_grad` gets an entry, zero-filled when the
    /// loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.len()]);
            }
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                col,
            } => {
                let (m, k, n) = (geom.out_channels, geom.patch_len(), geom.out_len());
                acc(*kernel, &|dk| {
                    // dK += dOut · colᵀ
                    gemm(m, n, k, g, (n as isize, 1), col, (1, n as isize), dk, true);
                });
                let kv = &nodes[kernel.0].value;
                acc(*input, &|dx| {
                    // dcol = Kᵀ · dOut, scattered back onto the input grid
                    let mut dcol = vec![0.0; k * n];
                    gemm(k, m, n, kv, (1, k as isize), g, (n as isize, 1), &mut dcol, false);
                    col2im(&dcol, geom, dx);
                });
            }
            Op::ChannelBias { input, bias } => {
                let plane = node.shape[1] * node.shape[2];
                acc(*input, &|dx| dx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                acc(*bias, &|db| {
                    for (c, chunk) in g.chunks_exact(plane).enumerate() {
                        db[c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(input) => {
                let x = &nodes[input.0].value;
                acc(*input, &|dx| {
                    for i in 0..dx.len() {
                        if x[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::GlobalAvgPool(input) => {
                let s = &nodes[input.0].shape;
                let plane = s[1] * s[2];
                acc(*input, &|dx| {
                    for (c, chunk) in dx.chunks_exact_mut(plane).enumerate() {
                        let v = g[c] / plane as f64;
                        chunk.iter_mut().for_each(|a| *a += v);
                    }
                });
            }
            Op::LinearNoBias { input, weights } => {
                let x = &nodes[input.0].value;
                let w = &nodes[weights.0].value;
                let d = x.len();
                acc(*input, &|dx| {
                    for (c, row) in w.chunks_exact(d).enumerate() {
                        for j in 0..d {
                            dx[j] += g[c] * row[j];
                        }
                    }
                });
                acc(*weights, &|dw| {
                    for (c, row) in dw.chunks_exact_mut(d).enumerate() {
                        for j in 0..d {
                            row[j] += g[c] * x[j];
                        }
                    }
                });
            }
            Op::SelectRow { input, row } => {
                let d = g.len();
                acc(*input, &|dx| {
                    dx[row * d..(row + 1) * d]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|dx| dx.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &|dx| dx.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &|dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &|dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(input, factor) => {
                acc(*input, &|dx| dx.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor));
            }
            Op::Sum(input) => {
                acc(*input, &|dx| dx.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::WeightedSum { inputs, weights } => {
                for (v, w) in inputs.iter().zip(weights) {
                    acc(*v, &|dx| dx[0] += g[0] * w);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                acc(*logits, &|dx| {
                    for (i, p) in probs.iter().enumerate() {
                        let t = if i == *label { 1.0 } else { 0.0 };
                        dx[i] += g[0] * (p - t);
                    }
                });
            }
            Op::NormMap(fmap) => {
                let f = &nodes[fmap.0].value;
                let norms = &node.value;
                let plane = norms.len();
                acc(*fmap, &|dx| {
                    for (i, a) in dx.iter_mut().enumerate() {
                        let u = i % plane;
                        if norms[u] > 0.0 {
                            *a += g[u] * f[i] / norms[u];
                        }
                    }
                });
            }
            Op::ChannelDot { fmap, weight } => {
                let f = &nodes[fmap.0].value;
                let w = &nodes[weight.0].value;
                let plane = g.len();
                acc(*fmap, &|dx| {
                    for (i, a) in dx.iter_mut().enumerate() {
                        *a += g[i % plane] * w[i / plane];
                    }
                });
                acc(*weight, &|dw| {
                    for (ch, a) in dw.iter_mut().enumerate() {
                        let fc = &f[ch * plane..(ch + 1) * plane];
                        *a += fc.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::SimilarityMap { fmap, weight } => {
                let f = &nodes[fmap.0].value;
                let w = &nodes[weight.0].value;
                let sim = &node.value;
                let plane = sim.len();
                let d = w.len();
                let wnorm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut fnorm = vec![0.0; plane];
                for ch in 0..d {
                    for u in 0..plane {
                        fnorm[u] += f[ch * plane + u] * f[ch * plane + u];
                    }
                }
                fnorm.iter_mut().for_each(|v| *v = v.sqrt());
                acc(*fmap, &|dx| {
                    for ch in 0..d {
                        for u in 0..plane {
                            if fnorm[u] == 0.0 {
                                continue;
                            }
                            let i = ch * plane + u;
                            let ds = w[ch] / (wnorm * fnorm[u]) - sim[u] * f[i] / (fnorm[u] * fnorm[u]);
                            dx[i] += g[u] * ds;
                        }
                    }
                });
                acc(*weight, &|dw| {
                    for u in 0..plane {
                        if fnorm[u] == 0.0 {
                            continue;
                        }
                        for ch in 0..d {
                            let ds = f[ch * plane + u] / (wnorm * fnorm[u]) - sim[u] * w[ch] / (wnorm * wnorm);
                            dw[ch] += g[u] * ds;
                        }
                    }
                });
            }
            Op::MinMaxNormalize { input, inv_range } => {
                acc(*input, &|dx| dx.iter_mut().zip(g).for_each(|(x, y)| *x += y * inv_range));
            }
            Op::ChannelMean(fmap) => {
                let plane = g.len();
                let d = nodes[fmap.0].shape[0] as f64;
                acc(*fmap, &|dx| {
                    for (i, a) in dx.iter_mut().enumerate() {
                        *a += g[i % plane] / d;
                    }
                });
            }
            Op::SpatialMask { input, keep } => {
                let plane = keep.len();
                acc(*input, &|dx| {
                    for (i, a) in dx.iter_mut().enumerate() {
                        if keep[i % plane] {
                            *a += g[i];
                        }
                    }
                });
            }
            Op::RegionContrast { input, fg, bg } => {
                acc(*input, &|dx| {
                    if !fg.is_empty() {
                        let v = g[0] / fg.len() as f64;
                        fg.iter().for_each(|&i| dx[i] -= v);
                    }
                    if !bg.is_empty() {
                        let v = g[0] / bg.len() as f64;
                        bg.iter().for_each(|&i| dx[i] += v);
                    }
                });
            }
            Op::AbsDiff { a, b, mean } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let scale = if *mean { g[0] / av.len() as f64 } else { g[0] };
                let sign = |i: usize| {
                    let d = av[i] - bv[i];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*a, &|dx| {
                    for i in 0..dx.len() {
                        dx[i] += scale * sign(i);
                    }
                });
                acc(*b, &|dx| {
                    for i in 0..dx.len() {
                        dx[i] -= scale * sign(i);
                    }
                });
            }
        }
    }
}
