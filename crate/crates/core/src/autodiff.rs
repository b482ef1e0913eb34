//! A small reverse-mode tape over dense row-major matrices.
//!
//! Nodes are appended in evaluation order; `backward` walks them in reverse
//! and accumulates gradients with a fixed summation order, so gradients are
//! bit-reproducible. Matrix products split work by output row only, which
//! keeps them deterministic under any worker count.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::parallel;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} tensor", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

const PAR_MIN_WORK: usize = 1 << 15;

fn row_parallel(rows: usize, cols: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) -> Vec<f64> {
    if work < PAR_MIN_WORK || rows < 2 {
        let mut out = vec![0.0; rows * cols];
        for (r, chunk) in out.chunks_mut(cols.max(1)).enumerate().take(rows) {
            f(r, chunk);
        }
        return out;
    }
    let parts = parallel::map_indexed(rows, |r| {
        let mut row = vec![0.0; cols];
        f(r, &mut row);
        row
    });
    parts.concat()
}

/// `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape");
    let (k, c) = (a.cols, b.cols);
    let data = row_parallel(a.rows, c, a.rows * k * c, |r, out| {
        for kk in 0..k {
            let av = a.data[r * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * c..(kk + 1) * c];
            for (o, bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Tensor { rows: a.rows, cols: c, data }
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt shape");
    let k = a.cols;
    let data = row_parallel(a.rows, b.rows, a.rows * k * b.rows, |r, out| {
        let arow = &a.data[r * k..(r + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    Tensor { rows: a.rows, cols: b.rows, data }
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn shape");
    let (k, c) = (a.cols, b.cols);
    let data = row_parallel(k, c, a.rows * k * c, |kk, out| {
        for r in 0..a.rows {
            let av = a.data[r * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[r * c..(r + 1) * c];
            for (o, bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Tensor { rows: k, cols: c, data }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        match self.index(name) {
            Some(i) => self.entries[i].1 = t,
            None => self.entries.push((name.to_string(), t)),
        }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t).ok_or_else(|| Error::Shape(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t).ok_or_else(|| Error::Shape(format!("missing parameter '{name}'")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect()
    }

    /// Rounds every value to the nearest single-precision number.
    pub fn quantize(&mut self) {
        for (_, t) in &mut self.entries {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Anchor pooling modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    #[default]
    #[serde(alias = "average")]
    Avg,
    Max,
    Fifo,
}

impl std::str::FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" | "average" => Ok(Self::Avg),
            "max" => Ok(Self::Max),
            "fifo" => Ok(Self::Fifo),
            _ => Err(Error::Config(format!("unknown pooling mode '{s}' (expected avg, max or fifo)"))),
        }
    }
}

impl std::fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Avg => "avg",
            Self::Max => "max",
            Self::Fifo => "fifo",
        })
    }
}

/// Four bilinear taps `(row, weight)` into a stacked feature matrix.
pub type Taps = [(usize, f64); 4];

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RowSoftmax(Var),
    LayerNorm { x: Var, gain: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Im2Col { x: Var, h: usize, w: usize },
    AnchorPool { x: Var, taps: Vec<Vec<Taps>>, mode: PoolingMode, argmax: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.7978845608028654;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Output size of a 3×3, stride 2, padding 1 convolution.
pub fn conv_out(n: usize) -> usize {
    n.div_ceil(2)
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, Var>,
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    pub params: Vec<Tensor>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self.params.index(name).ok_or_else(|| Error::Shape(format!("missing parameter '{name}'")))?;
        if let Some(v) = self.param_nodes.get(&i) {
            return Ok(*v);
        }
        let v = self.push(self.params.tensor(i).clone(), Op::Param(i));
        self.param_nodes.insert(i, v);
        Ok(v)
    }

    fn shape_err(&self, what: &str, a: Var, b: Var) -> Error {
        Error::Shape(format!("{what}: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).cols != self.value(b).rows {
            return Err(self.shape_err("matmul", a, b));
        }
        let t = matmul(self.value(a), self.value(b));
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).cols != self.value(b).cols {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let t = matmul_nt(self.value(a), self.value(b));
        Ok(self.push(t, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows != 1 || bv.cols != av.cols {
            return Err(self.shape_err("add_row", a, b));
        }
        let mut t = av.clone();
        for row in t.data.chunks_mut(t.cols.max(1)) {
            for (x, y) in row.iter_mut().zip(&bv.data) {
                *x += y;
            }
        }
        Ok(self.push(t, Op::AddRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|v| *v *= s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.push(t, Op::Gelu(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for row in t.data.chunks_mut(t.cols.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(t, Op::RowSoftmax(a))
    }

    /// Row-wise normalization with a learned `1×c` gain and no bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.rows != 1 || gv.cols != xv.cols {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let c = xv.cols;
        let mut xhat = vec![0.0; xv.data.len()];
        let mut inv_std = vec![0.0; xv.rows];
        let mut out = Tensor::zeros(xv.rows, c);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out.data[r * c + j] = h * gv.data[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, xhat, inv_std }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        if parts.iter().any(|p| self.value(*p).rows != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut t = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                t.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols;
        if parts.iter().any(|p| self.value(*p).cols != cols) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.value(*p).data);
        }
        let rows = data.len() / cols.max(1);
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows {
            return Err(Error::Shape(format!("slice_rows {start}+{len} of {}", av.rows)));
        }
        let t = Tensor { rows: len, cols: av.cols, data: av.data[start * av.cols..(start + len) * av.cols].to_vec() };
        Ok(self.push(t, Op::SliceRows(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if idx.iter().any(|&i| i >= av.rows) {
            return Err(Error::Shape("gather_rows: index out of range".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * av.cols);
        for &i in idx {
            data.extend_from_slice(av.row(i));
        }
        let t = Tensor { rows: idx.len(), cols: av.cols, data };
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if av.data.len() != rows * cols {
            return Err(Error::Shape(format!("reshape {:?} to {rows}x{cols}", av.shape())));
        }
        let t = Tensor { rows, cols, data: av.data.clone() };
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Patches for a 3×3, stride 2, padding 1 convolution over an `h×w`
    /// image stored as `(h·w)×c`. Column order is `(ky, kx, channel)`.
    pub fn im2col(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows != h * w {
            return Err(Error::Shape(format!("im2col: {} rows for a {h}x{w} image", xv.rows)));
        }
        let c = xv.cols;
        let (oh, ow) = (conv_out(h), conv_out(w));
        let mut t = Tensor::zeros(oh * ow, 9 * c);
        for oy in 0..oh {
            for ox in 0..ow {
                let r = oy * ow + ox;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        let ix = (2 * ox + kx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c;
                        let dst = r * 9 * c + (ky * 3 + kx) * c;
                        t.data[dst..dst + c].copy_from_slice(&xv.data[src..src + c]);
                    }
                }
            }
        }
        Ok(self.push(t, Op::Im2Col { x, h, w }))
    }

    /// Pools bilinear samples per anchor. `taps[j]` holds one entry per
    /// visible view, in view order; anchors without taps get zeros.
    pub fn anchor_pool(&mut self, x: Var, taps: Vec<Vec<Taps>>, mode: PoolingMode) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols;
        if taps.iter().flatten().flatten().any(|(r, _)| *r >= xv.rows) {
            return Err(Error::Shape("anchor_pool: tap out of range".into()));
        }
        let sample = |t: &Taps, j: usize| t.iter().map(|(r, w)| w * xv.data[r * c + j]).sum::<f64>();
        let mut out = Tensor::zeros(taps.len(), c);
        let mut argmax = vec![0usize; taps.len() * c];
        for (a, views) in taps.iter().enumerate() {
            if views.is_empty() {
                continue;
            }
            for j in 0..c {
                out.data[a * c + j] = match mode {
                    PoolingMode::Avg => views.iter().map(|t| sample(t, j)).sum::<f64>() / views.len() as f64,
                    PoolingMode::Fifo => sample(&views[0], j),
                    PoolingMode::Max => {
                        let mut best = (0, sample(&views[0], j));
                        for (vi, t) in views.iter().enumerate().skip(1) {
                            let s = sample(t, j);
                            if s > best.1 {
                                best = (vi, s);
                            }
                        }
                        argmax[a * c + j] = best.0;
                        best.1
                    }
                };
            }
        }
        Ok(self.push(out, Op::AnchorPool { x, taps, mode, argmax }))
    }

    /// Reverse pass from the given seed gradients.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut g: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, t) in seeds {
            if self.value(*v).shape() != t.shape() {
                return Err(Error::Shape(format!("seed gradient {:?} for node {:?}", t.shape(), self.value(*v).shape())));
            }
            accumulate(&mut g, *v, t.clone());
        }
        let mut params = self.params.zeros_like();
        for i in (0..self.nodes.len()).rev() {
            let Some(gi) = g[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(p) => params[*p].add_assign(&gi),
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&gi, self.value(*b));
                    let gb = matmul_tn(self.value(*a), &gi);
                    accumulate(&mut g, *a, ga);
                    accumulate(&mut g, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = matmul(&gi, self.value(*b));
                    let gb = matmul_tn(&gi, self.value(*a));
                    accumulate(&mut g, *a, ga);
                    accumulate(&mut g, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, gi.clone());
                    accumulate(&mut g, *b, gi);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Tensor::zeros(1, gi.cols);
                    for row in gi.data.chunks(gi.cols.max(1)) {
                        for (s, v) in gb.data.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut g, *a, gi);
                    accumulate(&mut g, *b, gb);
                }
                Op::Scale(a, s) => {
                    let mut ga = gi;
                    ga.data.iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut g, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = gi;
                    for (v, x) in ga.data.iter_mut().zip(&self.value(*a).data) {
                        *v *= gelu_grad(*x);
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &self.nodes[i].value;
                    let mut ga = gi.clone();
                    let c = y.cols.max(1);
                    for (gr, yr) in ga.data.chunks_mut(c).zip(y.data.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::LayerNorm { x, gain, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let c = gv.cols;
                    let mut ggain = Tensor::zeros(1, c);
                    let mut gx = Tensor::zeros(gi.rows, c);
                    for r in 0..gi.rows {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..c {
                            let go = gi.data[r * c + j];
                            ggain.data[j] += go * xhat[r * c + j];
                            let gh = go * gv.data[j];
                            mean_g += gh;
                            mean_gx += gh * xhat[r * c + j];
                        }
                        mean_g /= c as f64;
                        mean_gx /= c as f64;
                        for j in 0..c {
                            let gh = gi.data[r * c + j] * gv.data[j];
                            gx.data[r * c + j] = inv_std[r] * (gh - mean_g - xhat[r * c + j] * mean_gx);
                        }
                    }
                    accumulate(&mut g, *x, gx);
                    accumulate(&mut g, *gain, ggain);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.value(*p).cols;
                        let mut gp = Tensor::zeros(gi.rows, pc);
                        for r in 0..gi.rows {
                            gp.data[r * pc..(r + 1) * pc].copy_from_slice(&gi.data[r * gi.cols + off..r * gi.cols + off + pc]);
                        }
                        off += pc;
                        accumulate(&mut g, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).data.len();
                        let (r, c) = self.value(*p).shape();
                        accumulate(&mut g, *p, Tensor { rows: r, cols: c, data: gi.data[off..off + n].to_vec() });
                        off += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    ga.data[start * av.cols..start * av.cols + gi.data.len()].copy_from_slice(&gi.data);
                    accumulate(&mut g, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let c = av.cols;
                    let mut ga = Tensor::zeros(av.rows, c);
                    for (k, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga.data[src * c + j] += gi.data[k * c + j];
                        }
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut g, *a, Tensor { rows: r, cols: c, data: gi.data });
                }
                Op::Im2Col { x, h, w } => {
                    let c = self.value(*x).cols;
                    let (oh, ow) = (conv_out(*h), conv_out(*w));
                    let mut gx = Tensor::zeros(h * w, c);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let r = oy * ow + ox;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (2 * oy + ky) as isize - 1;
                                    let ix = (2 * ox + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= *h as isize || ix >= *w as isize {
                                        continue;
                                    }
                                    let dst = (iy as usize * w + ix as usize) * c;
                                    let src = r * 9 * c + (ky * 3 + kx) * c;
                                    for j in 0..c {
                                        gx.data[dst + j] += gi.data[src + j];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut g, *x, gx);
                }
                Op::AnchorPool { x, taps, mode, argmax } => {
                    let xv = self.value(*x);
                    let c = xv.cols;
                    let mut gx = Tensor::zeros(xv.rows, c);
                    for (a, views) in taps.iter().enumerate() {
                        if views.is_empty() {
                            continue;
                        }
                        for j in 0..c {
                            let go = gi.data[a * c + j];
                            if go == 0.0 {
                                continue;
                            }
                            let mut spread = |t: &Taps, s: f64| {
                                for (r, w) in t {
                                    gx.data[r * c + j] += s * w;
                                }
                            };
                            match mode {
                                PoolingMode::Avg => {
                                    let s = go / views.len() as f64;
                                    views.iter().for_each(|t| spread(t, s));
                                }
                                PoolingMode::Fifo => spread(&views[0], go),
                                PoolingMode::Max => spread(&views[argmax[a * c + j]], go),
                            }
                        }
                    }
                    accumulate(&mut g, *x, gx);
                }
            }
        }
        Ok(Gradients { nodes: g, params })
    }
}

fn accumulate(g: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot => *slot = Some(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: usize, cols: usize, k: f64) -> Tensor {
        Tensor { rows, cols, data: (0..rows * cols).map(|i| ((i as f64 + 1.0) * k).sin()).collect() }
    }

    /// Checks d(sum(out ⊙ probe))/dparam against central differences.
    fn check(params: &ParamSet, build: impl Fn(&mut Graph) -> Var) {
        let mut gph = Graph::new(params);
        let out = build(&mut gph);
        let probe = seq(gph.value(out).rows, gph.value(out).cols, 0.37);
        let grads = gph.backward(&[(out, probe.clone())]).unwrap();
        let eval = |p: &ParamSet| {
            let mut gg = Graph::new(p);
            let o = build(&mut gg);
            gg.value(o).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>()
        };
        for pi in 0..params.len() {
            for e in 0..params.tensor(pi).data.len() {
                let h = 1e-6;
                let mut pp = params.clone();
                pp.tensor_mut(pi).data[e] += h;
                let mut pm = params.clone();
                pm.tensor_mut(pi).data[e] -= h;
                let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
                let an = grads.params[pi].data[e];
                assert!((fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()), "param {pi}[{e}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn dense_ops_gradients() {
        let mut p = ParamSet::new();
        p.insert("x", seq(4, 5, 0.7));
        p.insert("w", seq(5, 3, 1.3));
        p.insert("b", seq(1, 3, 2.1));
        p.insert("g", seq(1, 3, 0.4));
        check(&p, |g| {
            let x = g.param("x").unwrap();
            let w = g.param("w").unwrap();
            let b = g.param("b").unwrap();
            let gain = g.param("g").unwrap();
            let h = g.matmul(x, w).unwrap();
            let h = g.add_row(h, b).unwrap();
            let n = g.layer_norm(h, gain).unwrap();
            let a = g.gelu(n);
            let s = g.matmul_nt(a, h).unwrap();
            let s = g.scale(s, 0.5);
            let sm = g.row_softmax(s);
            let o = g.matmul(sm, a).unwrap();
            let o = g.add(o, h).unwrap();
            let c = g.concat_cols(&[o, n]).unwrap();
            let r = g.reshape(c, 6, 4).unwrap();
            let sl = g.slice_rows(r, 1, 4).unwrap();
            let ga = g.gather_rows(sl, &[3, 0, 0, 2]).unwrap();
            g.concat_rows(&[ga, sl]).unwrap()
        });
    }

    #[test]
    fn conv_and_pool_gradients() {
        let mut p = ParamSet::new();
        p.insert("img", seq(5 * 6, 2, 0.9));
        p.insert("k", seq(18, 3, 0.5));
        for mode in [PoolingMode::Avg, PoolingMode::Max, PoolingMode::Fifo] {
            check(&p, |g| {
                let x = g.param("img").unwrap();
                let cols = g.im2col(x, 5, 6).unwrap();
                let k = g.param("k").unwrap();
                let f = g.matmul(cols, k).unwrap();
                let taps = vec![
                    vec![[(0, 0.25), (1, 0.25), (3, 0.25), (4, 0.25)], [(5, 0.5), (2, 0.5), (0, 0.0), (0, 0.0)]],
                    vec![],
                    vec![[(8, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)]],
                ];
                g.anchor_pool(f, taps, mode).unwrap()
            });
        }
    }

    #[test]
    fn im2col_shapes() {
        let p = ParamSet::new();
        let mut g = Graph::new(&p);
        let x = g.input(Tensor::zeros(8 * 12, 10));
        let c = g.im2col(x, 8, 12).unwrap();
        assert_eq!(g.value(c).shape(), (4 * 6, 90));
    }

    #[test]
    fn pooling_modes_on_scalars() {
        let p = ParamSet::new();
        let mut g = Graph::new(&p);
        let x = g.input(Tensor::from_vec(2, 1, vec![1.0, 3.0]).unwrap());
        let taps = vec![vec![[(0, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)], [(1, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)]]];
        let avg = g.anchor_pool(x, taps.clone(), PoolingMode::Avg).unwrap();
        let max = g.anchor_pool(x, taps.clone(), PoolingMode::Max).unwrap();
        let fifo = g.anchor_pool(x, taps, PoolingMode::Fifo).unwrap();
        assert_eq!(g.value(avg).data, vec![2.0]);
        assert_eq!(g.value(max).data, vec![3.0]);
        assert_eq!(g.value(fifo).data, vec![1.0]);
    }
}
