//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Values are computed eagerly. A node records a backward closure only when
//! one of its parents requires a gradient, so a tape built from constants is
//! a plain evaluator.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::attention::{self, SegmentMask};
use super::tensor::gemm;
use super::{NumericsError, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[Rc<Tensor>], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Component a forward FLOP is attributed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlopKind {
    Embed,
    AttnLinear,
    AttnMatmul,
    CrossAttn,
    Mlp,
    Deembed,
    Lora,
    Conditioning,
    /// Weight instantiation through fixed projections; not part of per-token compute.
    Projection,
    Other,
}

impl FlopKind {
    pub const ALL: [FlopKind; 10] = [
        FlopKind::Embed,
        FlopKind::AttnLinear,
        FlopKind::AttnMatmul,
        FlopKind::CrossAttn,
        FlopKind::Mlp,
        FlopKind::Deembed,
        FlopKind::Lora,
        FlopKind::Conditioning,
        FlopKind::Projection,
        FlopKind::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlopKind::Embed => "embed",
            FlopKind::AttnLinear => "attention_linear",
            FlopKind::AttnMatmul => "attention_matmul",
            FlopKind::CrossAttn => "cross_attention",
            FlopKind::Mlp => "mlp",
            FlopKind::Deembed => "deembed",
            FlopKind::Lora => "lora",
            FlopKind::Conditioning => "conditioning",
            FlopKind::Projection => "projection",
            FlopKind::Other => "other",
        }
    }
}

/// Instrumented forward FLOP counts (2 per multiply-add).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    counts: [u64; 10],
}

impl FlopCounter {
    pub fn add(&mut self, kind: FlopKind, flops: u64) {
        self.counts[kind as usize] += flops;
    }

    pub fn get(&self, kind: FlopKind) -> u64 {
        self.counts[kind as usize]
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }

    /// Total excluding weight projection.
    pub fn model_total(&self) -> u64 {
        FlopKind::ALL.iter().filter(|k| **k != FlopKind::Projection).map(|&k| self.get(k)).sum()
    }
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    flops: RefCell<FlopCounter>,
    kind: Cell<FlopKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Restores the previous FLOP attribution on drop.
pub struct KindGuard<'t> {
    tape: &'t Tape,
    prev: FlopKind,
}

impl Drop for KindGuard<'_> {
    fn drop(&mut self) {
        self.tape.kind.set(self.prev);
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros shaped like `v`.
    pub fn get_or_zero(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            flops: RefCell::new(FlopCounter::default()),
            kind: Cell::new(FlopKind::Other),
        }
    }

    /// Evaluation-only tape: leaves never require gradients.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops.borrow().clone()
    }

    pub fn reset_flops(&self) {
        *self.flops.borrow_mut() = FlopCounter::default();
    }

    pub fn scope(&self, kind: FlopKind) -> KindGuard<'_> {
        let prev = self.kind.replace(kind);
        KindGuard { tape: self, prev }
    }

    fn count(&self, flops: u64) {
        self.flops.borrow_mut().add(self.kind.get(), flops);
    }

    /// Record work done outside tape ops, e.g. masked positions of a dense kernel.
    pub fn add_flops(&self, kind: FlopKind, flops: u64) {
        self.flops.borrow_mut().add(kind, flops);
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad: requires_grad && self.grad_enabled,
            parents: Vec::new(),
            backward: None,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'_>],
        backward: BackwardFn,
    ) -> Result<Var<'_>, NumericsError> {
        value.ensure_finite(op)?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(backward) } else { None },
        });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, NumericsError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", root.value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_vals: Vec<Rc<Tensor>> = node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let pgrads = bw(&g, &parent_vals, &node.value);
            for (&pid, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn sum_rows_into(g: &Tensor, cols: usize) -> Tensor {
    let mut out = vec![0.0; cols];
    for row in g.data().chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_vec(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize), NumericsError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Copy of the value with no gradient connection.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let a = self.value();
        let b = other.value();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        self.tape.count(2 * (m * k * n) as u64);
        self.tape.push(
            "matmul",
            Tensor::new(&[m, n], out)?,
            &[*self, *other],
            Box::new(move |g, p, _| {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, p[1].data(), true, &mut da, 0.0);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, p[0].data(), true, g.data(), false, &mut db, 0.0);
                vec![
                    Some(Tensor::new(&[m, k], da).expect("shape")),
                    Some(Tensor::new(&[k, n], db).expect("shape")),
                ]
            }),
        )
    }

    fn binary(
        &self,
        other: &Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let out = a.zip_map(&b, f)?;
        self.tape.push(
            op,
            out,
            &[*self, *other],
            Box::new(move |g, p, _| {
                let ga = Tensor::from_fn(g.shape(), |i| g.data()[i] * da(p[0].data()[i], p[1].data()[i]));
                let gb = Tensor::from_fn(g.shape(), |i| g.data()[i] * db(p[0].data()[i], p[1].data()[i]));
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>, NumericsError> {
        let out = self.value().map(f);
        self.tape.push(
            op,
            out,
            &[*self],
            Box::new(move |g, p, y| {
                vec![Some(Tensor::from_fn(g.shape(), |i| g.data()[i] * df(p[0].data()[i], y.data()[i])))]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>, NumericsError> {
        self.unary("scale", |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>, NumericsError> {
        self.unary("add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Result<Var<'t>, NumericsError> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    /// Square root with a zero subgradient at 0.
    pub fn sqrt(&self) -> Result<Var<'t>, NumericsError> {
        self.unary("sqrt", f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn exp(&self) -> Result<Var<'t>, NumericsError> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn gelu(&self) -> Result<Var<'t>, NumericsError> {
        self.unary("gelu", gelu_scalar, |x, _| gelu_grad(x))
    }

    pub fn silu(&self) -> Result<Var<'t>, NumericsError> {
        self.unary("silu", |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    /// `[m,n] + [n]` row broadcast.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let b = bias.value();
        let n = x.row_len();
        if b.numel() != n {
            return Err(shape_err("add_row", format!("{:?} + {:?}", x.shape(), b.shape())));
        }
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] + b.data()[i % n]);
        let bshape = b.shape().to_vec();
        self.tape.push(
            "add_row",
            out,
            &[*self, *bias],
            Box::new(move |g, _, _| {
                let gb = sum_rows_into(g, n).reshape(&bshape).expect("shape");
                vec![Some(g.clone()), Some(gb)]
            }),
        )
    }

    /// `[m,n] * [n]` row broadcast.
    pub fn mul_row(&self, gamma: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let w = gamma.value();
        let n = x.row_len();
        if w.numel() != n {
            return Err(shape_err("mul_row", format!("{:?} * {:?}", x.shape(), w.shape())));
        }
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * w.data()[i % n]);
        let wshape = w.shape().to_vec();
        self.tape.push(
            "mul_row",
            out,
            &[*self, *gamma],
            Box::new(move |g, p, _| {
                let gx = Tensor::from_fn(g.shape(), |i| g.data()[i] * p[1].data()[i % n]);
                let prod = Tensor::from_fn(g.shape(), |i| g.data()[i] * p[0].data()[i]);
                let gw = sum_rows_into(&prod, n).reshape(&wshape).expect("shape");
                vec![Some(gx), Some(gw)]
            }),
        )
    }

    /// Normalize each row to zero mean and unit variance (no affine).
    pub fn normalize_rows(&self, eps: f64) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let d = x.row_len();
        if d == 0 {
            return Err(shape_err("layer_norm", "empty feature axis".into()));
        }
        let rows = x.numel() / d;
        let mut out = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        self.tape.push(
            "layer_norm",
            Tensor::new(x.shape(), out)?,
            &[*self],
            Box::new(move |g, _, y| {
                let mut gx = vec![0.0; g.numel()];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                vec![Some(Tensor::new(g.shape(), gx).expect("shape"))]
            }),
        )
    }

    /// Affine layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>, NumericsError> {
        self.normalize_rows(eps)?.mul_row(gamma)?.add_row(beta)
    }

    /// Select rows of a `[m, n]` (or `[m]`) tensor.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let m = x.rows();
        let n = x.row_len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {m}")));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            data.extend_from_slice(&x.data()[i * n..(i + 1) * n]);
        }
        let mut shape = x.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = idx.len();
        let xshape = x.shape().to_vec();
        self.tape.push(
            "gather_rows",
            Tensor::new(&shape, data)?,
            &[*self],
            Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&xshape);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        gx.data_mut()[i * n + j] += g.data()[k * n + j];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Row `k` of `self` is added into row `idx[k]` of a zero `[rows, n]` output.
    pub fn scatter_rows(&self, idx: Rc<Vec<usize>>, rows: usize) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let n = x.row_len();
        if idx.len() != x.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(shape_err("scatter_rows", format!("{} indices for {:?} into {rows}", idx.len(), x.shape())));
        }
        let mut out = vec![0.0; rows * n];
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..n {
                out[i * n + j] += x.data()[k * n + j];
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = rows;
        self.tape.push(
            "scatter_rows",
            Tensor::new(&shape, out)?,
            &[*self],
            Box::new(move |g, p, _| {
                let mut gx = Vec::with_capacity(idx.len() * n);
                for &i in idx.iter() {
                    gx.extend_from_slice(&g.data()[i * n..(i + 1) * n]);
                }
                vec![Some(Tensor::new(p[0].shape(), gx).expect("shape"))]
            }),
        )
    }

    /// Flat element gather: `out[i] = self[idx[i]]`, reshaped to `shape`.
    pub fn gather(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        if idx.len() != shape.iter().product::<usize>() || idx.iter().any(|&i| i >= x.numel()) {
            return Err(shape_err("gather", format!("{} indices into {:?} as {shape:?}", idx.len(), x.shape())));
        }
        let data = idx.iter().map(|&i| x.data()[i]).collect();
        self.tape.push(
            "gather",
            Tensor::new(shape, data)?,
            &[*self],
            Box::new(move |g, p, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                for (k, &i) in idx.iter().enumerate() {
                    gx.data_mut()[i] += g.data()[k];
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let out = x.reshaped(shape)?;
        let orig = x.shape().to_vec();
        self.tape.push(
            "reshape",
            out,
            &[*self],
            Box::new(move |g, _, _| vec![Some(g.reshaped(&orig).expect("shape"))]),
        )
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>, NumericsError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let tape = first.tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let tail = vals[0].shape()[1..].to_vec();
        let mut data = Vec::new();
        let mut rows = Vec::with_capacity(parts.len());
        for v in &vals {
            if v.shape()[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("{:?} vs {:?}", v.shape(), vals[0].shape())));
            }
            rows.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows.iter().sum()];
        shape.extend_from_slice(&tail);
        tape.push(
            "concat_rows",
            Tensor::new(&shape, data)?,
            parts,
            Box::new(move |g, p, _| {
                let mut off = 0;
                p.iter()
                    .map(|pv| {
                        let len = pv.numel();
                        let t = Tensor::new(pv.shape(), g.data()[off..off + len].to_vec()).expect("shape");
                        off += len;
                        Some(t)
                    })
                    .collect()
            }),
        )
    }

    /// Columns `[start, start+len)` of a `[m, n]` tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>, NumericsError> {
        let (m, n) = self.dims2("slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("[{start},{}) of {n}", start + len)));
        }
        let x = self.value();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&x.data()[r * n + start..r * n + start + len]);
        }
        self.tape.push(
            "slice_cols",
            Tensor::new(&[m, len], data)?,
            &[*self],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![Some(Tensor::new(&[m, n], gx).expect("shape"))]
            }),
        )
    }

    /// Multi-head attention with `self` as queries, rows laid out `[tokens, heads*d_h]`.
    pub fn attention(
        &self,
        k: &Var<'t>,
        v: &Var<'t>,
        heads: usize,
        mask: &SegmentMask,
    ) -> Result<Var<'t>, NumericsError> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let (out, cache) = attention::forward(&qv, &kv, &vv, heads, mask)?;
        self.tape.count(mask.flops(qv.shape()[1]));
        let mask = mask.clone();
        self.tape.push(
            "attention",
            out,
            &[*self, *k, *v],
            Box::new(move |g, p, _| {
                let (dq, dk, dv) = attention::backward(g, &p[0], &p[1], &p[2], heads, &mask, &cache);
                vec![Some(dq), Some(dk), Some(dv)]
            }),
        )
    }

    pub fn sum(&self) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(
            "sum",
            Tensor::scalar(x.sum()),
            &[*self],
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&self) -> Result<Var<'t>, NumericsError> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Per-row sums of a `[m, n]` tensor, shape `[m]`.
    pub fn sum_rows(&self) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let (m, n) = (x.rows(), x.row_len());
        let data = (0..m).map(|r| x.data()[r * n..(r + 1) * n].iter().sum()).collect();
        let shape = x.shape().to_vec();
        self.tape.push(
            "sum_rows",
            Tensor::new(&[m], data)?,
            &[*self],
            Box::new(move |g, _, _| vec![Some(Tensor::from_fn(&shape, |i| g.data()[i / n]))]),
        )
    }

    /// Squared euclidean distances between rows: `[n, D] x [m, D] -> [n, m]`.
    pub fn pairwise_sq_dists(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (n, dim) = self.dims2("pairwise_sq_dists")?;
        let (m, dim2) = other.dims2("pairwise_sq_dists")?;
        if dim != dim2 {
            return Err(shape_err("pairwise_sq_dists", format!("feature dims {dim} vs {dim2}")));
        }
        let a = self.value();
        let b = other.value();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = &a.data()[i * dim..(i + 1) * dim];
            for j in 0..m {
                let bj = &b.data()[j * dim..(j + 1) * dim];
                out[i * m + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        self.tape.push(
            "pairwise_sq_dists",
            Tensor::new(&[n, m], out)?,
            &[*self, *other],
            Box::new(move |g, p, _| {
                let (a, b) = (&p[0], &p[1]);
                let mut ga = vec![0.0; n * dim];
                let mut gb = vec![0.0; m * dim];
                for i in 0..n {
                    for j in 0..m {
                        let gij = 2.0 * g.data()[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..dim {
                            let diff = a.data()[i * dim + c] - b.data()[j * dim + c];
                            ga[i * dim + c] += gij * diff;
                            gb[j * dim + c] -= gij * diff;
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[n, dim], ga).expect("shape")),
                    Some(Tensor::new(&[m, dim], gb).expect("shape")),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::rng::SplitRng;

    fn rnd(rng: &mut SplitRng, shape: &[usize]) -> Tensor {
        rng.normal_tensor(shape)
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = SplitRng::new(1);
        let inputs = vec![rnd(&mut rng, &[3, 4]), rnd(&mut rng, &[4, 2])];
        check_gradients(&inputs, |_, v| v[0].matmul(&v[1])?.square()?.sum()).unwrap();
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = SplitRng::new(2);
        let inputs = vec![rnd(&mut rng, &[4, 4]), rnd(&mut rng, &[4, 4])];
        check_gradients(&inputs, |_, v| v[0].mul(&v[1])?.gelu()?.add(&v[0].silu()?)?.sub(&v[1])?.square()?.mean())
            .unwrap();
        check_gradients(&inputs, |_, v| v[0].scale(0.3)?.exp()?.add_scalar(1.0)?.sqrt()?.sum()).unwrap();
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = SplitRng::new(3);
        let inputs = vec![rnd(&mut rng, &[4, 8]), rnd(&mut rng, &[8]), rnd(&mut rng, &[8]), rnd(&mut rng, &[4, 8])];
        check_gradients(&inputs, |_, v| v[0].layer_norm(&v[1], &v[2], 1e-6)?.mul(&v[3])?.sum()).unwrap();
    }

    #[test]
    fn layer_norm_statistics() {
        let tape = Tape::new();
        let mut rng = SplitRng::new(4);
        let x = tape.constant(rnd(&mut rng, &[5, 16]).scale(3.0));
        let y = x.normalize_rows(0.0).unwrap().value();
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
        // constant rows normalize to zero through eps
        let c = tape.constant(Tensor::full(&[2, 4], 3.5));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(c.layer_norm(&g, &b, 1e-6).unwrap().value().data().iter().all(|&v| v == 0.0));
        // gamma = 0 gives beta everywhere
        let x = tape.constant(rnd(&mut rng, &[3, 4]));
        let g0 = tape.constant(Tensor::zeros(&[4]));
        let beta = tape.constant(Tensor::from_vec(vec![1.0, -2.0, 0.5, 4.0]));
        let y = x.layer_norm(&g0, &beta, 1e-6).unwrap().value();
        for r in 0..3 {
            assert_eq!(y.row(r), beta.value().data());
        }
    }

    #[test]
    fn indexing_gradients() {
        let mut rng = SplitRng::new(5);
        let inputs = vec![rnd(&mut rng, &[4, 3]), rnd(&mut rng, &[3]), rnd(&mut rng, &[2, 3])];
        check_gradients(&inputs, |_, v| {
            let g = v[0].gather_rows(Rc::new(vec![3, 0, 0, 2]))?;
            let s = v[2].scatter_rows(Rc::new(vec![1, 3]), 4)?;
            let cat = Var::concat_rows(&[g, s])?;
            let sl = cat.slice_cols(1, 2)?;
            let flat = v[0].gather(Rc::new(vec![11, 0, 5, 5]), &[2, 2])?;
            sl.mul_row(&v[1].gather(Rc::new(vec![0, 2]), &[2])?)?.square()?.sum()?.add(&flat.sum_rows()?.square()?.sum()?)
        })
        .unwrap();
    }

    #[test]
    fn attention_gradients() {
        let mut rng = SplitRng::new(6);
        let inputs = vec![rnd(&mut rng, &[7, 4]), rnd(&mut rng, &[7, 4]), rnd(&mut rng, &[7, 4]), rnd(&mut rng, &[7, 4])];
        let mask = SegmentMask::new(vec![3, 4]);
        check_gradients(&inputs, |_, v| v[0].attention(&v[1], &v[2], 2, &mask)?.mul(&v[3])?.sum()).unwrap();
        let cross = SegmentMask::cross(vec![3, 4], vec![2, 5]).unwrap();
        check_gradients(&inputs, |_, v| v[0].attention(&v[1], &v[2], 2, &cross)?.mul(&v[3])?.sum()).unwrap();
    }

    #[test]
    fn pairwise_distance_gradients() {
        let mut rng = SplitRng::new(7);
        let inputs = vec![rnd(&mut rng, &[3, 4]), rnd(&mut rng, &[5, 4])];
        check_gradients(&inputs, |_, v| v[0].pairwise_sq_dists(&v[1])?.scale(-0.2)?.exp()?.sum()).unwrap();
    }

    #[test]
    fn no_grad_tape_records_no_backward() {
        let tape = Tape::no_grad();
        let a = tape.param(Tensor::ones(&[2, 2]));
        assert!(!a.requires_grad());
        let y = a.matmul(&a).unwrap().sum().unwrap();
        assert!(!y.requires_grad());
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1], 1000.0));
        assert!(matches!(a.exp(), Err(NumericsError::NonFinite { op: "exp" })));
    }

    #[test]
    fn flop_attribution() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[3, 4]));
        let b = tape.constant(Tensor::ones(&[4, 5]));
        {
            let _g = tape.scope(FlopKind::Mlp);
            a.matmul(&b).unwrap();
        }
        a.matmul(&b).unwrap();
        assert_eq!(tape.flops().get(FlopKind::Mlp), 120);
        assert_eq!(tape.flops().get(FlopKind::Other), 120);
    }
}
