//! Tape-based reverse-mode differentiation.
//!
//! Every operation is eager: calling it computes the output immediately and
//! appends a node to the tape. Leading dimensions of a tensor are treated as a
//! batch of rows, so a dense layer applied to `[B, n_in]` runs as one GEMM.
//!
//! A tape borrows the [`ParamStore`] immutably. Parameters enter the tape either
//! as copied leaves ([`Tape::param`]) or through row lookups that read the store
//! directly ([`Tape::embedding`]), which keeps the hash table out of the node arena.

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Act { x: Var, kind: Activation },
    Softmax { x: Var },
    Concat { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { src: Var, idx: Vec<usize> },
    Embedding { table: ParamId, idx: Vec<usize> },
    WeightedSum { w: Var, feats: Var },
    Affine { x: Var, scale: T },
    Conv2d { x: Var, k: Var, b: Var, cols: Vec<T> },
    AvgPool { x: Var },
    Mse { pred: Var, target: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of the forward computation.
pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass: gradients for tape nodes and for parameters.
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: ParamGrads<T>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. a node, if the node was reached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }
}

fn dim_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: {a:?} vs {b:?}"))
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf holding external data. Gradients are tracked iff the tensor requires them.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        Ok(self.push(Tensor::new(shape, values)?, Op::Leaf, false))
    }

    /// Leaf whose gradient is tracked and returned by [`Tape::backward`].
    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        Ok(self.push(Tensor::new(shape, values)?, Op::Leaf, true))
    }

    /// Copies a stored parameter onto the tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        let src = self.params.get(id);
        let value = Tensor::new(src.shape().to_vec(), src.values().to_vec())
            .expect("stored parameter has a valid shape");
        self.push(value, Op::Param(id), true)
    }

    /// `out[.., i] = Σ_j W[i, j]·x[.., j] + b[i]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if ws.len() != 2 || bs.len() != 1 || bs[0] != ws[0] || xs.last() != Some(&ws[1]) {
            return Err(Error::Dimension(format!(
                "linear: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n_out;
        let (rows, _) = self.value(x).rows_cols();
        let mut out = Vec::with_capacity(rows * n_out);
        let bias = self.value(b).values();
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        T::gemm(
            rows,
            n_in,
            n_out,
            T::one(),
            self.value(x).values(),
            n_in as isize,
            1,
            self.value(w).values(),
            1,
            n_in as isize,
            T::one(),
            &mut out,
            n_out as isize,
            1,
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let src = self.value(x);
        let out: Vec<T> = src.values().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Act { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (rows, k) = src.rows_cols();
        let mut out = vec![T::zero(); rows * k];
        for (o, row) in out.chunks_mut(k).zip(src.values().chunks(k)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - m).exp();
                sum += *oi;
            }
            o.iter_mut().for_each(|v| *v = *v / sum);
        }
        let t = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Softmax { x }, rg)
    }

    /// Concatenation along the last axis; all parts must agree on the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rows = self.value(*first).rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if r != rows {
                return Err(dim_err("concat rows", self.value(*first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).values()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = self.value(*first).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Stacks row blocks `[r_i, C]` into `[Σ r_i, C]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let cols = self.value(*first).rows_cols().1;
        let mut out = Vec::new();
        for &p in parts {
            let (_, c) = self.value(p).rows_cols();
            if c != cols {
                return Err(dim_err("concat_rows cols", self.value(*first).shape(), self.value(p).shape()));
            }
            out.extend_from_slice(self.value(p).values());
        }
        let rows = out.len() / cols;
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Selects rows of `src` (`[R, C]`) by index, producing `[idx.len(), C]`.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.value(src).rows_cols();
        if idx.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!("gather row {bad} out of {rows}")));
        }
        let data = self.value(src).values();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            out.extend_from_slice(&data[i * cols..(i + 1) * cols]);
        }
        let n = idx.len();
        let rg = self.any_grad(&[src]);
        Ok(self.push(Tensor::new(vec![n, cols], out)?, Op::GatherRows { src, idx }, rg))
    }

    /// Row lookup straight from a stored `[T, F]` parameter table.
    pub fn embedding(&mut self, table: ParamId, idx: Vec<usize>) -> Result<Var> {
        let t = self.params.get(table);
        let (rows, cols) = t.rows_cols();
        if idx.is_empty() {
            return Err(Error::Contract("lookup of zero rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!("table row {bad} out of {rows}")));
        }
        let data = t.values();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            out.extend_from_slice(&data[i * cols..(i + 1) * cols]);
        }
        let n = idx.len();
        Ok(self.push(Tensor::new(vec![n, cols], out)?, Op::Embedding { table, idx }, true))
    }

    /// `out[b, :] = Σ_k w[b, k] · feats[b·K + k, :]` for weights `[B, K]` and features `[B·K, F]`.
    pub fn weighted_sum(&mut self, w: Var, feats: Var) -> Result<Var> {
        let (b, k) = self.value(w).rows_cols();
        let (fr, f) = self.value(feats).rows_cols();
        if fr != b * k {
            return Err(dim_err("weighted_sum", self.value(w).shape(), self.value(feats).shape()));
        }
        let wv = self.value(w).values();
        let fv = self.value(feats).values();
        let mut out = vec![T::zero(); b * f];
        for bi in 0..b {
            let o = &mut out[bi * f..(bi + 1) * f];
            for ki in 0..k {
                let wk = wv[bi * k + ki];
                let row = &fv[(bi * k + ki) * f..(bi * k + ki + 1) * f];
                for (oj, &fj) in o.iter_mut().zip(row) {
                    *oj += wk * fj;
                }
            }
        }
        let rg = self.any_grad(&[w, feats]);
        Ok(self.push(Tensor::new(vec![b, f], out)?, Op::WeightedSum { w, feats }, rg))
    }

    /// `scale · x + shift`, with an optional per-element constant shift.
    pub fn affine(&mut self, x: Var, scale: T, shift: Option<&[T]>) -> Result<Var> {
        let src = self.value(x);
        let mut out: Vec<T> = src.values().iter().map(|&v| v * scale).collect();
        if let Some(s) = shift {
            if s.len() != out.len() {
                return Err(Error::Dimension(format!(
                    "affine shift of {} values for {:?}",
                    s.len(),
                    src.shape()
                )));
            }
            out.iter_mut().zip(s).for_each(|(o, &si)| *o += si);
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Affine { x, scale }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, None).expect("no shift")
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1. `x: [C_in, H, W]`,
    /// `k: [C_out, C_in, 3, 3]`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (xs, ks, bs) = (self.value(x).shape(), self.value(k).shape(), self.value(b).shape());
        if xs.len() != 3 || ks.len() != 4 || ks[2] != 3 || ks[3] != 3 || ks[1] != xs[0] || bs != [ks[0]] {
            return Err(Error::Dimension(format!(
                "conv2d: input {xs:?}, kernels {ks:?}, bias {bs:?}"
            )));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let c_out = ks[0];
        let hw = h * w;
        let cols = im2col(self.value(x).values(), c_in, h, w);
        let mut out = Vec::with_capacity(c_out * hw);
        for &bias in self.value(b).values() {
            out.extend(std::iter::repeat(bias).take(hw));
        }
        T::gemm(
            c_out,
            c_in * 9,
            hw,
            T::one(),
            self.value(k).values(),
            (c_in * 9) as isize,
            1,
            &cols,
            hw as isize,
            1,
            T::one(),
            &mut out,
            hw as isize,
            1,
        );
        let rg = self.any_grad(&[x, k, b]);
        Ok(self.push(Tensor::new(vec![c_out, h, w], out)?, Op::Conv2d { x, k, b, cols }, rg))
    }

    /// Mean over the spatial extent of a `[C, H, W]` tensor, producing `[C]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("adaptive_avg_pool expects [C, H, W], got {xs:?}")));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = self
            .value(x)
            .values()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c], out)?, Op::AvgPool { x }, rg))
    }

    /// Mean of squared differences over every element.
    pub fn mse_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::Dimension(format!(
                "mse_loss: prediction {:?} vs {} target values",
                p.shape(),
                target.len()
            )));
        }
        let n = T::from_usize(target.len()).unwrap();
        let sum: T = p.values().iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let rg = self.any_grad(&[pred]);
        Ok(self.push(Tensor::scalar(sum / n), Op::Mse { pred, target: target.to_vec() }, rg))
    }

    /// Reverse pass seeded with `d loss / d loss = 1`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_from(&[(loss, &[T::one()])])
    }

    /// Reverse pass seeded with explicit upstream gradients for several nodes.
    pub fn backward_from(&self, seeds: &[(Var, &[T])]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut params = ParamGrads::empty(self.params.len());
        let mut last = None;
        for &(v, g) in seeds {
            if g.len() != self.value(v).len() {
                return Err(Error::Dimension(format!(
                    "seed of {} values for node of shape {:?}",
                    g.len(),
                    self.value(v).shape()
                )));
            }
            let slot = add_into(&mut grads[v.0], g.len());
            slot.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            last = last.max(Some(v.0));
        }

        for i in (0..last.map_or(0, |l| l + 1)).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads, &mut params);
            grads[i] = Some(gout);
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(
        &self,
        i: usize,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
        params: &mut ParamGrads<T>,
    ) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = params.slot(*id, gout.len());
                slot.iter_mut().zip(gout).for_each(|(a, &b)| *a += b);
            }
            Op::Linear { x, w, b } => {
                let ws = self.value(*w).shape();
                let (n_out, n_in) = (ws[0], ws[1]);
                let (rows, _) = self.value(*x).rows_cols();
                if self.wants(*x) {
                    let dx = add_into(&mut grads[x.0], rows * n_in);
                    T::gemm(
                        rows,
                        n_out,
                        n_in,
                        T::one(),
                        gout,
                        n_out as isize,
                        1,
                        self.value(*w).values(),
                        n_in as isize,
                        1,
                        T::one(),
                        dx,
                        n_in as isize,
                        1,
                    );
                }
                if self.wants(*w) {
                    let dw = add_into(&mut grads[w.0], n_out * n_in);
                    T::gemm(
                        n_out,
                        rows,
                        n_in,
                        T::one(),
                        gout,
                        1,
                        n_out as isize,
                        self.value(*x).values(),
                        n_in as isize,
                        1,
                        T::one(),
                        dw,
                        n_in as isize,
                        1,
                    );
                }
                if self.wants(*b) {
                    let db = add_into(&mut grads[b.0], n_out);
                    for row in gout.chunks(n_out) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                }
            }
            Op::Act { x, kind } => {
                if self.wants(*x) {
                    let y = node.value.values();
                    let dx = add_into(&mut grads[x.0], y.len());
                    for ((d, &g), &yi) in dx.iter_mut().zip(gout).zip(y) {
                        *d += g * kind.derivative_from_output(yi);
                    }
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let (_, k) = node.value.rows_cols();
                    let y = node.value.values();
                    let dx = add_into(&mut grads[x.0], y.len());
                    for ((d, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(gout.chunks(k)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((di, &yi), &gi) in d.iter_mut().zip(yr).zip(gr) {
                            *di += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let (rows, total) = node.value.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).rows_cols();
                    if self.wants(p) {
                        let dp = add_into(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            let src = &gout[r * total + offset..r * total + offset + w];
                            dp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let dp = add_into(&mut grads[p.0], n);
                        dp.iter_mut().zip(&gout[offset..offset + n]).for_each(|(a, &b)| *a += b);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { src, idx } => {
                if self.wants(*src) {
                    let (_, cols) = node.value.rows_cols();
                    let n = self.value(*src).len();
                    let ds = add_into(&mut grads[src.0], n);
                    for (r, &row) in idx.iter().enumerate() {
                        let g = &gout[r * cols..(r + 1) * cols];
                        ds[row * cols..(row + 1) * cols].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Embedding { table, idx } => {
                let t = self.params.get(*table);
                let (_, cols) = t.rows_cols();
                let dt = params.slot(*table, t.len());
                for (r, &row) in idx.iter().enumerate() {
                    let g = &gout[r * cols..(r + 1) * cols];
                    dt[row * cols..(row + 1) * cols].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::WeightedSum { w, feats } => {
                let (b, k) = self.value(*w).rows_cols();
                let (_, f) = self.value(*feats).rows_cols();
                let wv = self.value(*w).values();
                let fv = self.value(*feats).values();
                if self.wants(*w) {
                    let dw = add_into(&mut grads[w.0], b * k);
                    for bi in 0..b {
                        let g = &gout[bi * f..(bi + 1) * f];
                        for ki in 0..k {
                            let row = &fv[(bi * k + ki) * f..(bi * k + ki + 1) * f];
                            dw[bi * k + ki] += row.iter().zip(g).map(|(&a, &c)| a * c).sum::<T>();
                        }
                    }
                }
                if self.wants(*feats) {
                    let df = add_into(&mut grads[feats.0], b * k * f);
                    for bi in 0..b {
                        let g = &gout[bi * f..(bi + 1) * f];
                        for ki in 0..k {
                            let wk = wv[bi * k + ki];
                            let row = &mut df[(bi * k + ki) * f..(bi * k + ki + 1) * f];
                            row.iter_mut().zip(g).for_each(|(a, &c)| *a += wk * c);
                        }
                    }
                }
            }
            Op::Affine { x, scale } => {
                if self.wants(*x) {
                    let dx = add_into(&mut grads[x.0], gout.len());
                    dx.iter_mut().zip(gout).for_each(|(a, &g)| *a += g * *scale);
                }
            }
            Op::Conv2d { x, k, b, cols } => {
                let xs = self.value(*x).shape();
                let (c_in, h, w) = (xs[0], xs[1], xs[2]);
                let c_out = self.value(*k).shape()[0];
                let hw = h * w;
                if self.wants(*k) {
                    let dk = add_into(&mut grads[k.0], c_out * c_in * 9);
                    T::gemm(
                        c_out,
                        hw,
                        c_in * 9,
                        T::one(),
                        gout,
                        hw as isize,
                        1,
                        cols,
                        1,
                        hw as isize,
                        T::one(),
                        dk,
                        (c_in * 9) as isize,
                        1,
                    );
                }
                if self.wants(*b) {
                    let db = add_into(&mut grads[b.0], c_out);
                    for (d, ch) in db.iter_mut().zip(gout.chunks(hw)) {
                        *d += ch.iter().copied().sum::<T>();
                    }
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); c_in * 9 * hw];
                    T::gemm(
                        c_in * 9,
                        c_out,
                        hw,
                        T::one(),
                        self.value(*k).values(),
                        1,
                        (c_in * 9) as isize,
                        gout,
                        hw as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        hw as isize,
                        1,
                    );
                    let dx = add_into(&mut grads[x.0], c_in * hw);
                    col2im_add(&dcols, c_in, h, w, dx);
                }
            }
            Op::AvgPool { x } => {
                if self.wants(*x) {
                    let xs = self.value(*x).shape();
                    let hw = xs[1] * xs[2];
                    let inv = T::one() / T::from_usize(hw).unwrap();
                    let dx = add_into(&mut grads[x.0], xs[0] * hw);
                    for (ch, &g) in dx.chunks_mut(hw).zip(gout) {
                        ch.iter_mut().for_each(|a| *a += g * inv);
                    }
                }
            }
            Op::Mse { pred, target } => {
                if self.wants(*pred) {
                    let p = self.value(*pred).values();
                    let scale = gout[0] * T::from_f64_lossy(2.0) / T::from_usize(p.len()).unwrap();
                    let dp = add_into(&mut grads[pred.0], p.len());
                    for ((d, &pi), &ti) in dp.iter_mut().zip(p).zip(target) {
                        *d += scale * (pi - ti);
                    }
                }
            }
        }
    }
}

/// Unfolds 3×3 neighborhoods (zero padded) into a `[C·9, H·W]` matrix.
fn im2col<T: Real>(x: &[T], c_in: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); c_in * 9 * hw];
    for c in 0..c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    // dst[x] = src[x + kx - 1]
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], c_in: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for c in 0..c_in {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(a, &b)| *a += b),
                        1 => dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(a, &b)| *a += b),
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        ParamStore::new()
    }

    #[test]
    fn linear_identity_and_zero_weights() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let w = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y).values(), &[3.0, 4.0]);
        assert_eq!(t.value(y).shape(), &[2]);

        let w0 = t.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let b1 = t.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let y = t.linear(x, w0, b1).unwrap();
        assert_eq!(t.value(y).values(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_shapes() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.constant(vec![3], vec![0.0; 3]).unwrap();
        let w = t.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let b = t.constant(vec![2], vec![0.0; 2]).unwrap();
        let err = t.linear(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn activations() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = t.relu(x);
        assert_eq!(t.value(r).values(), &[0.0, 0.0, 2.0]);
        let z = t.constant(vec![1], vec![0.0]).unwrap();
        let th = t.tanh(z);
        let sg = t.sigmoid(z);
        assert_eq!(t.value(th).values(), &[0.0]);
        assert_eq!(t.value(sg).values(), &[0.5]);
        let big = t.constant(vec![2], vec![50.0, -50.0]).unwrap();
        let th = t.tanh(big);
        assert!(t.value(th).values().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn conv_identity_and_bias() {
        let s = store();
        let mut t = Tape::new(&s);
        let img: Vec<f32> = (0..25).map(|v| v as f32).collect();
        let x = t.constant(vec![1, 5, 5], img.clone()).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let k = t.constant(vec![1, 1, 3, 3], k).unwrap();
        let b = t.constant(vec![1], vec![0.0]).unwrap();
        let y = t.conv2d(x, k, b).unwrap();
        assert_eq!(t.value(y).values(), img.as_slice());

        let k0 = t.constant(vec![2, 1, 3, 3], vec![0.0; 18]).unwrap();
        let bc = t.constant(vec![2], vec![1.5, -0.5]).unwrap();
        let y = t.conv2d(x, k0, bc).unwrap();
        let v = t.value(y).values();
        assert!(v[..25].iter().all(|&a| a == 1.5) && v[25..].iter().all(|&a| a == -0.5));

        let bad = t.constant(vec![1, 2, 3, 3], vec![0.0; 18]).unwrap();
        assert!(t.conv2d(x, bad, b).is_err());
    }

    #[test]
    fn pool_and_softmax() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.constant(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.adaptive_avg_pool(x).unwrap();
        assert_eq!(t.value(p).values(), &[2.5]);
        let c = t.constant(vec![1, 3, 3], vec![7.0; 9]).unwrap();
        let p = t.adaptive_avg_pool(c).unwrap();
        assert_eq!(t.value(p).values(), &[7.0]);

        let u = t.constant(vec![4], vec![0.3; 4]).unwrap();
        let sm = t.softmax(u);
        assert!(t.value(sm).values().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let big = t.constant(vec![2], vec![1000.0, 0.0]).unwrap();
        let sm = t.softmax(big);
        assert_eq!(t.value(sm).values(), &[1.0, 0.0]);
    }

    #[test]
    fn mse_values() {
        let s = store();
        let mut t = Tape::new(&s);
        let p = t.constant(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let l = t.mse_loss(p, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.value(l).values(), &[0.0]);
        let l = t.mse_loss(p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.value(l).values(), &[1.0]);
        let q = t.constant(vec![3], vec![0.5, 0.0, 0.0]).unwrap();
        let l = t.mse_loss(q, &[0.0, 0.0, 0.0]).unwrap();
        assert!((t.value(l).values()[0] - 0.25 / 3.0).abs() < 1e-7);
        assert!(t.mse_loss(q, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn backward_scalar_cases() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.variable(vec![1], vec![3.0]).unwrap();
        let g = t.backward(x).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0]);

        // x² via mse against zero: loss = x², d/dx = 2x = 6
        let l = t.mse_loss(x, &[0.0]).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[6.0]);

        let v = t.variable(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(t.backward(v).is_err());
    }

    #[test]
    fn unreachable_nodes_get_no_gradient() {
        let s = store();
        let mut t = Tape::new(&s);
        let a = t.variable(vec![1], vec![1.0]).unwrap();
        let b = t.variable(vec![1], vec![2.0]).unwrap();
        let l = t.mse_loss(a, &[0.0]).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.wrt(b).is_none());
        assert_eq!(g.wrt(a).unwrap(), &[2.0]);
    }

    #[test]
    fn params_receive_gradients() {
        let mut s = store();
        let w = s.add("w", Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap()).unwrap();
        let b = s.add("b", Tensor::zeros(vec![1])).unwrap();
        let table = s.add("table", Tensor::new(vec![3, 1], vec![0.5, 1.0, 2.0]).unwrap()).unwrap();
        let grads = {
            let mut t = Tape::new(&s);
            let x = t.constant(vec![2], vec![2.0, 3.0]).unwrap();
            let (wv, bv) = (t.param(w), t.param(b));
            let y = t.linear(x, wv, bv).unwrap();
            let e = t.embedding(table, vec![2, 2]).unwrap();
            let e = t.concat_rows(&[e]).unwrap();
            let sum = t.concat(&[y]).unwrap();
            let l1 = t.mse_loss(sum, &[0.0]).unwrap();
            let _ = e;
            t.backward(l1).unwrap().into_params()
        };
        // y = 2 - 3 = -1, dl/dy = -2
        assert_eq!(grads.get(w).unwrap(), &[-4.0, -6.0]);
        assert_eq!(grads.get(b).unwrap(), &[-2.0]);
        assert!(grads.get(table).is_none());
        s.accumulate(&grads).unwrap();
        s.accumulate(&grads).unwrap();
        assert_eq!(s.get(b).grad().unwrap(), &[-4.0]);
    }

    #[test]
    fn weighted_sum_cases() {
        let s = store();
        let mut t = Tape::new(&s);
        let f = t.constant(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = t.constant(vec![1, 4], vec![0.25; 4]).unwrap();
        let v = t.weighted_sum(w, f).unwrap();
        assert_eq!(t.value(v).values(), &[2.5]);
        let one_hot = t.constant(vec![1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let v = t.weighted_sum(one_hot, f).unwrap();
        assert_eq!(t.value(v).values(), &[3.0]);
        let short = t.constant(vec![3, 1], vec![1.0; 3]).unwrap();
        assert!(t.weighted_sum(w, short).is_err());
    }
}
