//! Dense row-major tensors with a reverse-mode tape.
//!
//! Every operation the transformer needs is recorded on a [`Tape`] as it is
//! evaluated. [`Tape::backward`] replays the tape in reverse and accumulates
//! gradients into leaf nodes. Broadcasting is limited to row-wise bias
//! addition; every other op demands exact shape agreement.

use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Views the tensor as a matrix: the last axis is the column axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap();
        (self.data.len() / cols, cols)
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    CausalMask(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Gelu(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Mse(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of evaluated operations. Nodes are appended as they are
/// computed, so every input precedes its consumers.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn mat(&self, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape.len() != 2 {
            return Err(Error::Shape(format!("expected a matrix, got shape {:?}", t.shape)));
        }
        Ok((t.shape[0], t.shape[1]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a)?;
        let (k2, n) = self.mat(b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        Ok(self.push(Tensor { shape: vec![m, n], data: out, grad: None }, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a)?;
        let out = transpose_raw(&self.value(a).data, m, n);
        Ok(self.push(Tensor { shape: vec![n, m], data: out, grad: None }, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let x = self.value(a);
        let data = x.data.iter().zip(&self.value(b).data).map(|(p, q)| p + q).collect();
        let shape = x.shape.clone();
        Ok(self.push(Tensor { shape, data, grad: None }, Op::Add(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m×n` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(a).rows_cols();
        if self.value(bias).numel() != n {
            return Err(Error::Shape(format!(
                "row bias of {} for {n} columns",
                self.value(bias).numel()
            )));
        }
        let b = &self.value(bias).data;
        let x = self.value(a);
        let data = x
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = x.shape.clone();
        Ok(self.push(Tensor { shape, data, grad: None }, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|v| v * c).collect();
        let shape = x.shape.clone();
        self.push(Tensor { shape, data, grad: None }, Op::Scale(a, c))
    }

    /// Replaces entries above the diagonal of a square matrix with -inf.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a)?;
        if m != n {
            return Err(Error::Shape(format!("causal mask needs a square matrix, got {m}x{n}")));
        }
        let mut data = self.value(a).data.clone();
        for i in 0..m {
            for v in &mut data[i * n + i + 1..(i + 1) * n] {
                *v = f64::NEG_INFINITY;
            }
        }
        Ok(self.push(Tensor { shape: vec![m, n], data, grad: None }, Op::CausalMask(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (_, n) = x.rows_cols();
        let mut data = x.data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = x.shape.clone();
        self.push(Tensor { shape, data, grad: None }, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (_, n) = self.value(x).rows_cols();
        if n < 2 {
            return Err(Error::Shape("layer norm needs at least two features".into()));
        }
        if eps <= 0.0 {
            return Err(Error::Domain(format!("layer norm eps must be positive, got {eps}")));
        }
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::Shape(format!("layer norm affine params must have {n} entries")));
        }
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.data.len());
        for row in t.data.chunks(n) {
            let (mean, inv) = row_stats(row, eps);
            data.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]));
        }
        let shape = t.shape.clone();
        Ok(self.push(Tensor { shape, data, grad: None }, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|&v| gelu(v)).collect();
        let shape = x.shape.clone();
        self.push(Tensor { shape, data, grad: None }, Op::Gelu(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(a)?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!("column slice {start}..{} of {n}", start + len)));
        }
        let src = &self.value(a).data;
        let data = (0..m).flat_map(|i| src[i * n + start..i * n + start + len].iter().copied()).collect();
        Ok(self.push(Tensor { shape: vec![m, len], data, grad: None }, Op::SliceCols { x: a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (m, _) = self.mat(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.mat(p)?;
            if pm != m {
                return Err(Error::Shape(format!("concat rows {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor { shape: vec![m, total], data, grad: None }, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(a)?;
        if len == 0 || start + len > m {
            return Err(Error::Shape(format!("row slice {start}..{} of {m}", start + len)));
        }
        let data = self.value(a).data[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor { shape: vec![len, n], data, grad: None }, Op::SliceRows { x: a, start }))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(a)?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::Shape(format!("row selection {rows:?} out of {m}")));
        }
        let src = &self.value(a).data;
        let data = rows.iter().flat_map(|&r| src[r * n..(r + 1) * n].iter().copied()).collect();
        Ok(self.push(
            Tensor { shape: vec![rows.len(), n], data, grad: None },
            Op::SelectRows { x: a, rows: rows.to_vec() },
        ))
    }

    /// Mean squared error, a single-element node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let v = mse(&self.value(pred).data, &self.value(target).data);
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target)))
    }

    /// Reverse sweep from a single-element node. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    self.nodes[idx].value.accumulate_grad(&g);
                }
                op => {
                    for (input, contrib) in self.local_backward(op, &node.value, &g) {
                        add_into(&mut grads[input.0], contrib);
                    }
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, op: &Op, out: &Tensor, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = self.value(*b).shape[1];
                let bt = transpose_raw(&self.value(*b).data, k, n);
                let at = transpose_raw(&self.value(*a).data, m, k);
                vec![(*a, matmul_raw(g, &bt, m, n, k)), (*b, matmul_raw(&at, g, k, m, n))]
            }
            Op::Transpose(a) => {
                let (n, m) = (out.shape[0], out.shape[1]);
                vec![(*a, transpose_raw(g, n, m))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddRow(a, bias) => {
                let n = self.value(*bias).numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                vec![(*a, g.to_vec()), (*bias, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::CausalMask(a) => {
                let n = out.shape[1];
                let mut ga = g.to_vec();
                for i in 0..n {
                    ga[i * n + i + 1..(i + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                }
                vec![(*a, ga)]
            }
            Op::Softmax(a) => {
                let (_, n) = out.rows_cols();
                let mut ga = Vec::with_capacity(g.len());
                for (y, gy) in out.data.chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    ga.extend(y.iter().zip(gy).map(|(p, q)| p * (q - dot)));
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xt = self.value(*x);
                let (_, n) = xt.rows_cols();
                let gam = &self.value(*gamma).data;
                let mut gx = Vec::with_capacity(xt.data.len());
                let mut gg = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                let nf = n as f64;
                for (row, gy) in xt.data.chunks(n).zip(g.chunks(n)) {
                    let (mean, inv) = row_stats(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gy.iter().zip(gam).map(|(p, q)| p * q).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / nf;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(p, q)| p * q).sum::<f64>() / nf;
                    for j in 0..n {
                        gg[j] += gy[j] * xhat[j];
                        gbeta[j] += gy[j];
                        gx.push(inv * (dxhat[j] - mean_d - xhat[j] * mean_dx));
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::Gelu(a) => {
                let xs = &self.value(*a).data;
                vec![(*a, xs.iter().zip(g).map(|(&x, gv)| gv * gelu_grad(x)).collect())]
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                let len = out.shape[1];
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![(*x, gx)]
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (out.shape[0], out.shape[1]);
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).shape[1];
                    let mut gp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    res.push((p, gp));
                }
                res
            }
            Op::SliceRows { x, start } => {
                let n = out.shape[1];
                let mut gx = vec![0.0; self.value(*x).numel()];
                gx[start * n..start * n + g.len()].copy_from_slice(g);
                vec![(*x, gx)]
            }
            Op::SelectRows { x, rows } => {
                let n = out.shape[1];
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    gx[r * n..(r + 1) * n].iter_mut().zip(&g[k * n..(k + 1) * n]).for_each(|(d, v)| *d += v);
                }
                vec![(*x, gx)]
            }
            Op::Mse(p, t) => {
                let pd = &self.value(*p).data;
                let td = &self.value(*t).data;
                let s = 2.0 * g[0] / pd.len() as f64;
                let gp: Vec<f64> = pd.iter().zip(td).map(|(a, b)| s * (a - b)).collect();
                let gt = gp.iter().map(|v| -v).collect();
                vec![(*p, gp), (*t, gt)]
            }
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, v)| *b += v),
        None => *slot = Some(contrib),
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Tanh-form GeLU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64
}

/// Central finite differences of a scalar function, used as an independent
/// check of tape gradients.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest entrywise relative error; entries smaller than `floor` in both
/// vectors are compared against `floor` instead.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Builds a loss from a single leaf; returns (loss, tape gradient).
    fn tape_grad(shape: &[usize], x: &[f64], build: &dyn Fn(&mut Tape, Var) -> Var) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(shape.to_vec(), x.to_vec()).unwrap());
        let loss = build(&mut tape, v);
        tape.backward(loss).unwrap();
        (tape.value(loss).data()[0], tape.grad(v).unwrap().to_vec())
    }

    fn check_op(shape: &[usize], seeds: u64, build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
        let n: usize = shape.iter().product();
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, n);
            let (_, g) = tape_grad(shape, &x, build);
            let numeric = finite_difference(|p| tape_grad(shape, p, build).0, &x, 1e-5);
            worst = worst.max(max_relative_error(&g, &numeric, 1e-6));
        }
        worst
    }

    /// Projects onto a fixed random direction so every output entry matters.
    fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let shape = tape.value(y).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let target = Tensor::new(shape.clone(), random(&mut rng, tape.value(y).numel())).unwrap();
        let t = tape.leaf(target);
        tape.mse(y, t).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let id = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.matmul(id, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bdata = random(&mut rng, 8);
        let err = check_op(&[3, 4], 20, &|t, a| {
            let b = t.leaf(Tensor::matrix(4, 2, bdata.clone()).unwrap());
            let y = t.matmul(a, b).unwrap();
            weighted_sum(t, y, 1)
        });
        assert!(err <= 1e-6, "left operand rel err {err}");
        let adata = random(&mut rng, 12);
        let err = check_op(&[4, 2], 20, &|t, b| {
            let a = t.leaf(Tensor::matrix(3, 4, adata.clone()).unwrap());
            let y = t.matmul(a, b).unwrap();
            weighted_sum(t, y, 2)
        });
        assert!(err <= 1e-6, "right operand rel err {err}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![0.5, 0.5, 0.0, 3f64.ln()]).unwrap());
        let y = tape.softmax_rows(x);
        let d = tape.value(y).data();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
        assert!((d[2] - 0.25).abs() < 1e-12 && (d[3] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random(&mut rng, 15).iter().map(|v| v * 30.0).collect::<Vec<_>>();
            let c = rng.random_range(-100.0..100.0);
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::matrix(3, 5, x.clone()).unwrap());
            let b = tape.leaf(Tensor::matrix(3, 5, x.iter().map(|v| v + c).collect()).unwrap());
            let sa = tape.softmax_rows(a);
            let sb = tape.softmax_rows(b);
            for (p, q) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
                assert!((p - q).abs() < 1e-12);
                assert!(*p > 0.0 && *p < 1.0);
            }
            for row in tape.value(sa).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn softmax_and_mask_gradients() {
        let err = check_op(&[4, 4], 20, &|t, a| {
            let m = t.causal_mask(a).unwrap();
            let y = t.softmax_rows(m);
            weighted_sum(t, y, 3)
        });
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn causal_mask_zeroes_future_weights() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(3, 3, vec![1.0; 9]).unwrap());
        let m = tape.causal_mask(a).unwrap();
        let s = tape.softmax_rows(m);
        let d = tape.value(s).data();
        assert_eq!(&d[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&d[3..6], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let c = tape.leaf(Tensor::matrix(1, 2, vec![3.0, 3.0]).unwrap());
        let y = tape.layer_norm(c, g, b, LN_EPS).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
        let s = tape.leaf(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let y = tape.layer_norm(s, g, b, 1e-14).unwrap();
        for (p, q) in tape.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((p - q).abs() < 1e-12);
        }
        let one = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let g1 = tape.leaf(Tensor::scalar(1.0));
        assert!(tape.layer_norm(one, g1, g1, LN_EPS).is_err());
        assert!(tape.layer_norm(s, g, b, 0.0).is_err());
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 16;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(4, n, random(&mut rng, 4 * n).iter().map(|v| v * 5.0 + 2.0).collect()).unwrap());
        let g = tape.leaf(Tensor::new(vec![n], vec![1.0; n]).unwrap());
        let b = tape.leaf(Tensor::new(vec![n], vec![0.0; n]).unwrap());
        let y = tape.layer_norm(x, g, b, LN_EPS).unwrap();
        for row in tape.value(y).data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= LN_EPS);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gam: Vec<f64> = random(&mut rng, 6).iter().map(|v| 1.0 + 0.5 * v).collect();
        let bet = random(&mut rng, 6);
        let err = check_op(&[3, 6], 20, &|t, x| {
            let g = t.leaf(Tensor::new(vec![6], gam.clone()).unwrap());
            let b = t.leaf(Tensor::new(vec![6], bet.clone()).unwrap());
            let y = t.layer_norm(x, g, b, LN_EPS).unwrap();
            weighted_sum(t, y, 4)
        });
        assert!(err <= 1e-5, "input rel err {err}");
        let xdata = random(&mut rng, 18);
        let err = check_op(&[6], 20, &|t, g| {
            let x = t.leaf(Tensor::matrix(3, 6, xdata.clone()).unwrap());
            let b = t.leaf(Tensor::new(vec![6], bet.clone()).unwrap());
            let y = t.layer_norm(x, g, b, LN_EPS).unwrap();
            weighted_sum(t, y, 5)
        });
        assert!(err <= 1e-5, "gamma rel err {err}");
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() <= 1e-6);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)), evaluated with 50-digit arithmetic.
        assert!((gelu(1.0) - 0.841_191_990_608_276_7).abs() < 1e-12);
    }

    #[test]
    fn gelu_gradients() {
        let err = check_op(&[2, 5], 20, &|t, x| {
            let s = t.scale(x, 3.0);
            let y = t.gelu(s);
            weighted_sum(t, y, 6)
        });
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let t = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap());
        let l = tape.mse(p, t).unwrap();
        assert_eq!(tape.value(l).data(), &[5.0]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[-1.0, -3.0]);
        let same = tape.mse(t, t).unwrap();
        assert_eq!(tape.value(same).data(), &[0.0]);
        let q = tape.leaf(Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap());
        assert!(matches!(tape.mse(p, q), Err(Error::Shape(_))));

        let err = check_op(&[2, 3], 20, &|t, x| weighted_sum(t, x, 7));
        assert!(err <= 1e-6);
    }

    #[test]
    fn slicing_ops_gradients() {
        let err = check_op(&[4, 6], 10, &|t, x| {
            let a = t.slice_cols(x, 0, 2).unwrap();
            let b = t.slice_cols(x, 3, 3).unwrap();
            let c = t.concat_cols(&[b, a]).unwrap();
            let r = t.slice_rows(c, 1, 3).unwrap();
            let s = t.select_rows(r, &[2, 0, 2]).unwrap();
            let tr = t.transpose(s).unwrap();
            weighted_sum(t, tr, 8)
        });
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn backward_single_leaf_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.5));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_linear_in_subgraphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xd = random(&mut rng, 6);
        let build = |tape: &mut Tape, x: Var, which: u8| -> Var {
            let g = tape.gelu(x);
            let s = tape.softmax_rows(x);
            let lg = weighted_sum(tape, g, 10);
            let ls = weighted_sum(tape, s, 11);
            match which {
                0 => lg,
                1 => ls,
                _ => tape.add(lg, ls).unwrap(),
            }
        };
        let grads: Vec<Vec<f64>> = (0..3)
            .map(|w| {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::matrix(2, 3, xd.clone()).unwrap());
                let l = build(&mut tape, x, w);
                tape.backward(l).unwrap();
                tape.grad(x).unwrap().to_vec()
            })
            .collect();
        for ((a, b), c) in grads[0].iter().zip(&grads[1]).zip(&grads[2]) {
            assert!((a + b - c).abs() < 1e-14);
        }
    }

    #[test]
    fn two_layer_composite_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w2 = random(&mut rng, 5 * 3);
        let b1 = random(&mut rng, 5);
        for seed in 0..20u64 {
            let err = check_op(&[4, 5], 1, &|t, w1| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let x = t.leaf(Tensor::matrix(3, 4, random(&mut r, 12)).unwrap());
                let h = t.matmul(x, w1).unwrap();
                let bv = t.leaf(Tensor::new(vec![5], b1.clone()).unwrap());
                let h = t.add_row(h, bv).unwrap();
                let h = t.gelu(h);
                let w = t.leaf(Tensor::matrix(5, 3, w2.clone()).unwrap());
                let y = t.matmul(h, w).unwrap();
                weighted_sum(t, y, seed)
            });
            assert!(err <= 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn backward_replay_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(3, 3, random(&mut rng, 9)).unwrap());
            let y = tape.matmul(x, x).unwrap();
            let y = tape.softmax_rows(y);
            let l = weighted_sum(&mut tape, y, 0);
            tape.backward(l).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let t = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(t.rows_cols(), (2, 2));
        assert!(t.grad().is_none());
    }
}
