//! Reverse-mode tape over dense tensors.
//!
//! Every op records its inputs and whatever it needs for the backward pass.
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid reverse topological order. Each op's vector-Jacobian product lives in
//! [`Graph::backward`].

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::arf;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Tanh(Var),
    Arf(Var, f64),
    SumLast(Var),
    SumAll(Var),
    KronSum(Var, Var),
    ConcatRows(Box<[Var]>),
    ConcatCols(Box<[Var]>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Upsample(Var),
    Downsample(Var, usize),
    Norm(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Which elementwise nonlinearity to apply; see [`Graph::activate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pointwise {
    Gelu,
    Tanh,
    Arf(f64),
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: Option<u64>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros if `v` does not influence the output.
    pub fn get_or_zeros(&self, v: Var, dims: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(dims))
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.dims() {
        [r, c] => Ok((*r, *c)),
        d => Err(Error::contract(
            op,
            alloc::format!("expected rank 2, got {d:?}"),
        )),
    }
}

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.dims() {
        [c, h, w] => Ok((*c, *h, *w)),
        d => Err(Error::contract(
            op,
            alloc::format!("expected rank 3, got {d:?}"),
        )),
    }
}

fn same_dims(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, a.dims(), b.dims()));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Side of the ARF clip (`x > 0`) for every input entry of every ARF node,
    /// in tape order. Two evaluations of the same computation with different
    /// patterns lie on different smooth pieces.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Arf(a, _) = node.op {
                out.extend(self.value(a).data().iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    /// A graph that counts multiply-accumulates performed by matrix products.
    pub fn with_mac_counter() -> Self {
        Graph {
            nodes: Vec::new(),
            macs: Some(0),
        }
    }

    /// Multiply-accumulates recorded so far by [`Graph::matmul`].
    pub fn macs(&self) -> Result<u64> {
        self.macs.ok_or(Error::Unsupported(
            "mac counting requires Graph::with_mac_counter",
        ))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_dims(x, y, "add")?;
        let out = x.axpy(1.0, y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_dims(x, y, "sub")?;
        let out = x.axpy(-1.0, y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_dims(x, y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.dims(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(dims)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (batch, r, c) = match x.dims() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            d => {
                return Err(Error::contract(
                    "transpose",
                    alloc::format!("expected rank 2 or 3, got {d:?}"),
                ))
            }
        };
        let mut data = Vec::with_capacity(x.len());
        for chunk in x.data().chunks(r * c) {
            data.extend(kernels::transpose2(chunk, r, c));
        }
        let dims: Vec<usize> = if x.rank() == 2 {
            vec![c, r]
        } else {
            vec![batch, c, r]
        };
        let out = Tensor::from_vec(&dims, data)?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(self.value(a), "matmul")?;
        let (k2, m) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[k, m], &[k2, m]));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        if let Some(count) = self.macs.as_mut() {
            *count += (n * k * m) as u64;
        }
        let out = Tensor::from_vec(&[n, m], data)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a vector along the last axis of a rank-2 tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = dims2(self.value(a), "add_bias")?;
        if self.dims(bias) != [c] {
            return Err(Error::shape("add_bias", &[c], self.dims(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    /// Same-padded convolution of a `c × h × w` map.
    ///
    /// Kernel spatial shapes are restricted to 1×1, 3×3, 3×1 and 1×3.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: (usize, usize),
    ) -> Result<Var> {
        let (c, h, w) = dims3(self.value(input), "conv2d")?;
        let wd = self.value(weight).dims().to_vec();
        let [out_c, in_c, kh, kw] = wd[..] else {
            return Err(Error::contract("conv2d", "weight must be rank 4"));
        };
        if in_c != c {
            return Err(Error::shape("conv2d", &[in_c], &[c]));
        }
        if !matches!((kh, kw), (1, 1) | (3, 3) | (3, 1) | (1, 3)) {
            return Err(Error::contract(
                "conv2d",
                alloc::format!("unsupported kernel {kh}x{kw}"),
            ));
        }
        if dilation.0 < 1 || dilation.1 < 1 {
            return Err(Error::contract("conv2d", "dilation must be >= 1"));
        }
        if let Some(b) = bias {
            if self.dims(b) != [out_c] {
                return Err(Error::shape("conv2d", &[out_c], self.dims(b)));
            }
        }
        let geom = ConvGeom {
            in_c,
            out_c,
            h,
            w,
            kh,
            kw,
            dil_h: dilation.0,
            dil_w: dilation.1,
        };
        let data = kernels::conv2d(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            geom,
        );
        let out = Tensor::from_vec(&[out_c, h, w], data)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Layer normalization over the last axis of a rank-2 tensor.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var) -> Result<Var> {
        let (_, d) = dims2(self.value(input), "layer_norm")?;
        for p in [gain, bias] {
            if self.dims(p) != [d] {
                return Err(Error::shape("layer_norm", &[d], self.dims(p)));
            }
        }
        let (xhat, rstd) = kernels::layer_norm_rows(self.value(input).data(), d);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let data: Vec<f64> = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((x, g), b)| x * g + b))
            .collect();
        let out = Tensor::from_vec(self.dims(input), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let last = *x.dims().last().expect("non-empty dims");
        let mut out = x.clone();
        kernels::softmax_rows(out.data_mut(), last);
        self.push(out, Op::Softmax(a))
    }

    pub fn activate(&mut self, a: Var, f: Pointwise) -> Var {
        let x = self.value(a);
        match f {
            Pointwise::Gelu => {
                let out = x.map(kernels::gelu);
                self.push(out, Op::Gelu(a))
            }
            Pointwise::Tanh => {
                let out = x.map(libm::tanh);
                self.push(out, Op::Tanh(a))
            }
            Pointwise::Arf(tau) => {
                let out = x.map(|v| arf::refine(v, tau));
                self.push(out, Op::Arf(a, tau))
            }
        }
    }

    /// Sums the last axis, keeping it with length 1.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let last = *x.dims().last().expect("non-empty dims");
        let data: Vec<f64> = x.data().chunks(last).map(|r| r.iter().sum()).collect();
        let mut dims = x.dims().to_vec();
        *dims.last_mut().unwrap() = 1;
        let out = Tensor::from_vec(&dims, data).expect("consistent dims");
        self.push(out, Op::SumLast(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Broadcast outer sum of `y: c×h×1` and `x: c×1×w` into `c×h×w`.
    pub fn kron_sum(&mut self, y: Var, x: Var) -> Result<Var> {
        let (cy, h, one_y) = dims3(self.value(y), "kron_sum")?;
        let (cx, one_x, w) = dims3(self.value(x), "kron_sum")?;
        if one_y != 1 || one_x != 1 || cy != cx {
            return Err(Error::shape(
                "kron_sum",
                &[cy, h, 1, cy, 1, w],
                &[cy, h, one_y, cx, one_x, w],
            ));
        }
        let yd = self.value(y).data();
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(cy * h * w);
        for ch in 0..cy {
            for i in 0..h {
                let yv = yd[ch * h + i];
                data.extend(xd[ch * w..(ch + 1) * w].iter().map(|xv| yv + xv));
            }
        }
        let out = Tensor::from_vec(&[cy, h, w], data)?;
        Ok(self.push(out, Op::KronSum(y, x)))
    }

    /// Stacks rank-2 tensors along the token axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows", "no inputs"))?;
        let (_, c) = dims2(self.value(*first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = dims2(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", &[r, c], &[r, pc]));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.into())))
    }

    /// Joins rank-2 tensors along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols", "no inputs"))?;
        let (r, _) = dims2(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", &[r, pc], &[pr, pc]));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&[r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.into())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::contract("slice_rows", "range out of bounds"));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_vec(&[len, c], data)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::contract("slice_cols", "range out of bounds"));
        }
        let src = self.value(a).data();
        let data: Vec<f64> = (0..r)
            .flat_map(|row| src[row * c + start..row * c + start + len].iter().copied())
            .collect();
        let out = Tensor::from_vec(&[r, len], data)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Nearest-neighbour 2× upsampling of a `c × h × w` map, cropped to
    /// `(out_h, out_w)`; output cell `(y, x)` reads input `(y / 2, x / 2)`.
    pub fn upsample(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = dims3(self.value(a), "upsample")?;
        if out_h == 0 || out_w == 0 || out_h > 2 * h || out_w > 2 * w {
            return Err(Error::contract(
                "upsample",
                "target must be within 2x of input",
            ));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for y in 0..out_h {
                let row = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                data.extend((0..out_w).map(|x| row[x / 2]));
            }
        }
        let out = Tensor::from_vec(&[c, out_h, out_w], data)?;
        Ok(self.push(out, Op::Upsample(a)))
    }

    /// Nearest-neighbour subsampling by `factor`: output `(y, x)` reads
    /// input `(factor·y, factor·x)`; output dims are `⌈h / factor⌉`.
    pub fn downsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = dims3(self.value(a), "downsample")?;
        if factor == 0 {
            return Err(Error::contract("downsample", "factor must be >= 1"));
        }
        let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    data.push(src[(ch * h + y * factor) * w + x * factor]);
                }
            }
        }
        let out = Tensor::from_vec(&[c, oh, ow], data)?;
        Ok(self.push(out, Op::Downsample(a, factor)))
    }

    /// Frobenius norm as a one-element tensor.
    pub fn norm(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(libm::sqrt(s)), Op::Norm(a))
    }

    /// Propagates `seed` (shaped like `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        same_dims(self.value(output), &seed, "backward")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.node_vjp(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn node_vjp(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = gd.iter().zip(y.data()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = gd.iter().zip(x.data()).map(|(g, x)| g * x).collect();
                acc(*a, Tensor::from_vec(x.dims(), ga)?);
                acc(*b, Tensor::from_vec(y.dims(), gb)?);
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::Reshape(a) => acc(*a, g.clone().reshaped(self.dims(*a))?),
            Op::Transpose(a) => {
                let src_dims = self.dims(*a);
                let (r, c) = (src_dims[src_dims.len() - 2], src_dims[src_dims.len() - 1]);
                let mut data = Vec::with_capacity(g.len());
                for chunk in gd.chunks(r * c) {
                    data.extend(kernels::transpose2(chunk, c, r));
                }
                acc(*a, Tensor::from_vec(src_dims, data)?);
            }
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.value(*a), "matmul")?;
                let (_, m) = dims2(self.value(*b), "matmul")?;
                let (da, db) = kernels::matmul_backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    gd,
                    n,
                    k,
                    m,
                );
                acc(*a, Tensor::from_vec(&[n, k], da)?);
                acc(*b, Tensor::from_vec(&[k, m], db)?);
            }
            Op::AddBias(a, bias) => {
                let c = self.dims(*bias)[0];
                let mut gb = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(*a, g.clone());
                acc(*bias, Tensor::from_vec(&[c], gb)?);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (din, dw, db) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gd,
                    *geom,
                );
                acc(*input, Tensor::from_vec(self.dims(*input), din)?);
                acc(*weight, Tensor::from_vec(self.dims(*weight), dw)?);
                if let Some(b) = bias {
                    acc(*b, Tensor::from_vec(&[geom.out_c], db)?);
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.dims(*gain)[0];
                let gain_v = self.value(*gain).data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (row, ((gr, xr), r)) in gd.chunks(d).zip(xhat.chunks(d)).zip(rstd).enumerate() {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gain_v[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xr[j];
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gain_v[j];
                        dx[row * d + j] = r * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
                acc(*input, Tensor::from_vec(self.dims(*input), dx)?);
                acc(*gain, Tensor::from_vec(&[d], dgain)?);
                acc(*bias, Tensor::from_vec(&[d], dbias)?);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let last = *node.value.dims().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(last).zip(gd.chunks(last)).zip(dx.chunks_mut(last)) {
                    let dotp: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dotp);
                    }
                }
                acc(*a, Tensor::from_vec(self.dims(*a), dx)?);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let dx = x
                    .iter()
                    .zip(gd)
                    .map(|(x, g)| g * kernels::gelu_grad(*x))
                    .collect();
                acc(*a, Tensor::from_vec(self.dims(*a), dx)?);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let dx = y.iter().zip(gd).map(|(y, g)| g * (1.0 - y * y)).collect();
                acc(*a, Tensor::from_vec(self.dims(*a), dx)?);
            }
            Op::Arf(a, tau) => {
                let x = self.value(*a).data();
                let dx = x
                    .iter()
                    .zip(gd)
                    .map(|(x, g)| g * arf::refine_grad(*x, *tau))
                    .collect();
                acc(*a, Tensor::from_vec(self.dims(*a), dx)?);
            }
            Op::SumLast(a) => {
                let last = *self.dims(*a).last().unwrap();
                let dx = gd
                    .iter()
                    .flat_map(|&v| core::iter::repeat_n(v, last))
                    .collect();
                acc(*a, Tensor::from_vec(self.dims(*a), dx)?);
            }
            Op::SumAll(a) => acc(*a, Tensor::full(self.dims(*a), gd[0])),
            Op::KronSum(y, x) => {
                let (c, h, _) = dims3(self.value(*y), "kron_sum")?;
                let w = self.dims(*x)[2];
                let mut dy = vec![0.0; c * h];
                let mut dxv = vec![0.0; c * w];
                for ch in 0..c {
                    for i in 0..h {
                        let row = &gd[(ch * h + i) * w..(ch * h + i + 1) * w];
                        dy[ch * h + i] = row.iter().sum();
                        for (d, v) in dxv[ch * w..(ch + 1) * w].iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                acc(*y, Tensor::from_vec(self.dims(*y), dy)?);
                acc(*x, Tensor::from_vec(self.dims(*x), dxv)?);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts.iter() {
                    let n = self.value(p).len();
                    acc(
                        p,
                        Tensor::from_vec(self.dims(p), gd[offset..offset + n].to_vec())?,
                    );
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims()[1];
                let mut start = 0;
                for &p in parts.iter() {
                    let (r, w) = dims2(self.value(p), "concat_cols")?;
                    let data = (0..r)
                        .flat_map(|row| {
                            gd[row * total + start..row * total + start + w]
                                .iter()
                                .copied()
                        })
                        .collect();
                    acc(p, Tensor::from_vec(&[r, w], data)?);
                    start += w;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.dims(*a)[1];
                let mut dx = Tensor::zeros(self.dims(*a));
                dx.data_mut()[start * c..start * c + gd.len()].copy_from_slice(gd);
                acc(*a, dx);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = dims2(self.value(*a), "slice_cols")?;
                let len = node.value.dims()[1];
                let mut dx = Tensor::zeros(&[r, c]);
                for row in 0..r {
                    dx.data_mut()[row * c + start..row * c + start + len]
                        .copy_from_slice(&gd[row * len..(row + 1) * len]);
                }
                acc(*a, dx);
            }
            Op::Upsample(a) => {
                let (c, h, w) = dims3(self.value(*a), "upsample")?;
                let (_, oh, ow) = dims3(&node.value, "upsample")?;
                let mut dx = Tensor::zeros(&[c, h, w]);
                let d = dx.data_mut();
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            d[(ch * h + y / 2) * w + x / 2] += gd[(ch * oh + y) * ow + x];
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::Downsample(a, factor) => {
                let (c, h, w) = dims3(self.value(*a), "downsample")?;
                let (_, oh, ow) = dims3(&node.value, "downsample")?;
                let mut dx = Tensor::zeros(&[c, h, w]);
                let d = dx.data_mut();
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            d[(ch * h + y * factor) * w + x * factor] += gd[(ch * oh + y) * ow + x];
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::Norm(a) => {
                let n = node.value.data()[0];
                let x = self.value(*a);
                // subgradient 0 at the origin
                let dx = if n > 0.0 {
                    x.map(|v| gd[0] * v / n)
                } else {
                    Tensor::zeros(x.dims())
                };
                acc(*a, dx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn mac_counter_is_opt_in() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[1.0; 6]));
        let b = g.leaf(t(&[3, 4], &[1.0; 12]));
        g.matmul(a, b).unwrap();
        assert!(matches!(g.macs(), Err(Error::Unsupported(_))));

        let mut g = Graph::with_mac_counter();
        let a = g.leaf(t(&[2, 3], &[1.0; 6]));
        let b = g.leaf(t(&[3, 4], &[1.0; 12]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.macs().unwrap(), 24);
    }

    #[test]
    fn shared_input_accumulates_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[3.0, -1.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[1.0]));
        let z = g.leaf(t(&[1], &[1.0]));
        let y = g.scale(x, 2.0);
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert!(grads.get(z).is_none());
        assert_eq!(grads.get_or_zeros(z, &[1]).data(), &[0.0]);
    }

    #[test]
    fn rank3_transpose_swaps_last_axes() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.transpose(x).unwrap();
        assert_eq!(g.dims(y), &[1, 3, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn upsample_then_downsample_round_trips() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let up = g.upsample(x, 3, 4).unwrap();
        assert_eq!(
            g.value(up).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]
        );
        let down = g.downsample(up, 2).unwrap();
        assert_eq!(g.value(down).data(), g.value(x).data());
    }

    #[test]
    fn conv_rejects_unsupported_kernels() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(g.conv2d(x, w, None, (1, 1)).is_err());
        let w = g.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(g.conv2d(x, w, None, (0, 1)).is_err());
        let w = g.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(matches!(
            g.conv2d(x, w, None, (1, 1)),
            Err(Error::ShapeMismatch { op: "conv2d", .. })
        ));
    }
}
