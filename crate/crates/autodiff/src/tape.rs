use crate::error::{shape_err, AutodiffError};
use crate::gemm::{gemm, Mat};
use crate::real::Real;
use crate::tensor::{ParamId, ParamSet, Tensor};
use crate::Result;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Dense {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        n_in: usize,
        n_out: usize,
    },
    Conv1d {
        x: Var,
        k: Var,
        b: Var,
        batch: usize,
        c_in: usize,
        c_out: usize,
        width: usize,
        len: usize,
        /// im2col buffer, `(c_in·width) × (batch·len)` row-major.
        cols: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Reshape {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
    Mse {
        a: Var,
        b: Var,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    /// Empty for parameter nodes, whose values live in the [`ParamSet`].
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation over read-only parameters.
///
/// A tape is single-use: build the graph, call [`Tape::backward`] once per
/// scalar of interest, drop it. Any number of tapes may share one
/// `ParamSet` concurrently.
pub struct Tape<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a leaf created by [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into the matching tensor's buffer.
    pub fn accumulate_into(&self, params: &mut ParamSet<T>) -> Result<()> {
        for (i, g) in self.params.iter().enumerate() {
            if let Some(g) = g {
                params.get_mut(ParamId(i)).tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    /// Fingerprint of every piecewise choice made so far: ReLU on/off
    /// states and maxpool winners. Two forward passes with equal signatures
    /// ran on the same linear piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { .. } => node.value.iter().for_each(|&v| (v > T::zero()).hash(&mut h)),
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == numel(&shape));
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input; its gradient is available through [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Non-differentiable input (data).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Node for a parameter; repeated calls return the same node so every use
    /// accumulates into one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let shape = self.params.get(id).tensor.shape().to_vec();
        let v = self.push(shape, Vec::new(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).tensor.data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    /// Fully connected layer `y = W·x + b` over `[n_in]` or `[batch, n_in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if ws.len() != 2 {
            return Err(shape_err("dense", format!("weight must be 2-D, got {ws:?}")));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        let (batch, out_shape) = match xs.as_slice() {
            [n] if *n == n_in => (1, vec![n_out]),
            [bt, n] if *n == n_in => (*bt, vec![*bt, n_out]),
            _ => {
                return Err(shape_err(
                    "dense",
                    format!("input {xs:?} incompatible with weight {ws:?}"),
                ))
            }
        };
        if bs != [n_out] {
            return Err(shape_err("dense", format!("bias {bs:?} for {n_out} outputs")));
        }
        let mut out = vec![T::zero(); batch * n_out];
        {
            let bias = self.value(b);
            for row in out.chunks_mut(n_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            Mat::new(self.value(x), batch, n_in),
            Mat::new(self.value(w), n_out, n_in).t(),
            &mut out,
            true,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out_shape,
            out,
            Op::Dense {
                x,
                w,
                b,
                batch,
                n_in,
                n_out,
            },
            rg,
        ))
    }

    /// Stride-1 cross-correlation with "same" zero padding, over `[c_in, len]`
    /// or `[batch, c_in, len]`, kernel `[c_out, c_in, width]` with odd width.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let bs = self.shape(b).to_vec();
        if ks.len() != 3 || ks[2] % 2 == 0 {
            return Err(shape_err(
                "conv1d",
                format!("kernel must be [c_out, c_in, odd width], got {ks:?}"),
            ));
        }
        let (c_out, c_in, width) = (ks[0], ks[1], ks[2]);
        let (batch, len, batched) = match xs.as_slice() {
            [c, l] if *c == c_in => (1, *l, false),
            [bt, c, l] if *c == c_in => (*bt, *l, true),
            _ => {
                return Err(shape_err(
                    "conv1d",
                    format!("input {xs:?} incompatible with kernel {ks:?}"),
                ))
            }
        };
        if bs != [c_out] {
            return Err(shape_err("conv1d", format!("bias {bs:?} for {c_out} channels")));
        }
        let half = width / 2;
        let bl = batch * len;
        let rows = c_in * width;
        let mut cols = vec![T::zero(); rows * bl];
        {
            let xv = self.value(x);
            for ci in 0..c_in {
                for j in 0..width {
                    let row = &mut cols[(ci * width + j) * bl..(ci * width + j + 1) * bl];
                    for bi in 0..batch {
                        let src = &xv[(bi * c_in + ci) * len..(bi * c_in + ci + 1) * len];
                        let dst = &mut row[bi * len..(bi + 1) * len];
                        // dst[l] = src[l + j - half]
                        for (l, d) in dst.iter_mut().enumerate() {
                            let s = l + j;
                            if s >= half && s - half < len {
                                *d = src[s - half];
                            }
                        }
                    }
                }
            }
        }
        let mut tmp = vec![T::zero(); c_out * bl];
        gemm(
            Mat::new(self.value(k), c_out, rows),
            Mat::new(&cols, rows, bl),
            &mut tmp,
            false,
        );
        let bias = self.value(b);
        let mut out = vec![T::zero(); batch * c_out * len];
        for co in 0..c_out {
            for bi in 0..batch {
                let src = &tmp[co * bl + bi * len..co * bl + (bi + 1) * len];
                let dst = &mut out[(bi * c_out + co) * len..(bi * c_out + co + 1) * len];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[co];
                }
            }
        }
        let shape = if batched {
            vec![batch, c_out, len]
        } else {
            vec![c_out, len]
        };
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::Conv1d {
                x,
                k,
                b,
                batch,
                c_in,
                c_out,
                width,
                len,
                cols,
            },
            rg,
        ))
    }

    /// Window-2, stride-2 max pooling over the last axis; a trailing odd
    /// element is dropped. Ties route the gradient to the first maximum.
    pub fn maxpool1d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let len = *xs.last().unwrap_or(&0);
        if len < 2 {
            return Err(shape_err("maxpool1d", format!("length {len} < 2")));
        }
        let half = len / 2;
        let outer = numel(&xs) / len;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * half);
        let mut argmax = Vec::with_capacity(outer * half);
        for o in 0..outer {
            for i in 0..half {
                let base = o * len + 2 * i;
                let (a, b) = (xv[base], xv[base + 1]);
                // NaN wins so a poisoned input cannot vanish from the forward pass.
                if b > a || b.is_nan() {
                    out.push(b);
                    argmax.push(base + 1);
                } else {
                    out.push(a);
                    argmax.push(base);
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = half;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v < T::zero() { T::zero() } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Relu { x }, rg)
    }

    /// Concatenation along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err(
                    "concat",
                    format!("leading dimensions of {s:?} differ from {lead:?}"),
                ));
            }
            widths.push((p, s[s.len() - 1]));
        }
        let outer = numel(&lead);
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for &(p, w) in &widths {
                out.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: widths,
                outer,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> (Vec<usize>, Vec<T>, bool) {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        (self.shape(a).to_vec(), out, self.rg(a) || self.rg(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (s, v, rg) = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(s, v, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("subtract", a, b)?;
        let (s, v, rg) = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(s, v, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (s, v, rg) = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(s, v, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Scale { x, factor }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(shape_err(
                "reshape",
                format!("{:?} into {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape { x }, rg))
    }

    /// Collapses everything after the leading (batch) axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let lead = *s.first().ok_or_else(|| shape_err("flatten", "scalar input"))?;
        self.reshape(x, vec![lead, numel(&s[1..])])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::of(v.len() as f64);
        let m = v.iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(vec![1], vec![m], Op::Mean { x }, rg)
    }

    /// Mean softmax cross-entropy over `[classes]` or `[batch, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (batch, classes) = match s.as_slice() {
            [c] => (1, *c),
            [b, c] => (*b, *c),
            _ => return Err(shape_err("softmax_cross_entropy", format!("logits {s:?}"))),
        };
        if labels.len() != batch {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for batch of {batch}", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::LabelOutOfRange { label, classes });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); batch * classes];
        let mut total = T::zero();
        for (bi, &label) in labels.iter().enumerate() {
            let row = &lv[bi * classes..(bi + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            for (p, &z) in probs[bi * classes..(bi + 1) * classes].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            total += lse - row[label];
        }
        let loss = total / T::of(batch as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
                classes,
            },
            rg,
        ))
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let n = T::of(va.len() as f64);
        let m = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![m], Op::Mse { a, b }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(AutodiffError::NotScalar {
                op: "backward",
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Vec<T>>> = vec![None; self.params.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    let slot = add_into(&mut pgrads[id.0], g.len());
                    slot.iter_mut().zip(&g).for_each(|(a, &v)| *a += v);
                }
                Op::Dense {
                    x,
                    w,
                    b,
                    batch,
                    n_in,
                    n_out,
                } => {
                    let (batch, n_in, n_out) = (*batch, *n_in, *n_out);
                    if self.rg(*w) {
                        let dw = add_into(&mut grads[w.0], n_out * n_in);
                        gemm(
                            Mat::new(&g, batch, n_out).t(),
                            Mat::new(self.value(*x), batch, n_in),
                            dw,
                            true,
                        );
                    }
                    if self.rg(*b) {
                        let db = add_into(&mut grads[b.0], n_out);
                        for row in g.chunks(n_out) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    }
                    if self.rg(*x) {
                        let dx = add_into(&mut grads[x.0], batch * n_in);
                        gemm(
                            Mat::new(&g, batch, n_out),
                            Mat::new(self.value(*w), n_out, n_in),
                            dx,
                            true,
                        );
                    }
                }
                Op::Conv1d {
                    x,
                    k,
                    b,
                    batch,
                    c_in,
                    c_out,
                    width,
                    len,
                    cols,
                } => {
                    let (batch, c_in, c_out, width, len) = (*batch, *c_in, *c_out, *width, *len);
                    let bl = batch * len;
                    let rows = c_in * width;
                    let mut gp = vec![T::zero(); c_out * bl];
                    for bi in 0..batch {
                        for co in 0..c_out {
                            let src = &g[(bi * c_out + co) * len..(bi * c_out + co + 1) * len];
                            gp[co * bl + bi * len..co * bl + (bi + 1) * len].copy_from_slice(src);
                        }
                    }
                    if self.rg(*k) {
                        let dk = add_into(&mut grads[k.0], c_out * rows);
                        gemm(Mat::new(&gp, c_out, bl), Mat::new(cols, rows, bl).t(), dk, true);
                    }
                    if self.rg(*b) {
                        let db = add_into(&mut grads[b.0], c_out);
                        for (co, d) in db.iter_mut().enumerate() {
                            *d += gp[co * bl..(co + 1) * bl].iter().copied().sum::<T>();
                        }
                    }
                    if self.rg(*x) {
                        let mut dcols = vec![T::zero(); rows * bl];
                        gemm(
                            Mat::new(self.value(*k), c_out, rows).t(),
                            Mat::new(&gp, c_out, bl),
                            &mut dcols,
                            false,
                        );
                        let half = width / 2;
                        let dx = add_into(&mut grads[x.0], batch * c_in * len);
                        for ci in 0..c_in {
                            for j in 0..width {
                                let row = &dcols[(ci * width + j) * bl..(ci * width + j + 1) * bl];
                                for bi in 0..batch {
                                    let dst = &mut dx[(bi * c_in + ci) * len..(bi * c_in + ci + 1) * len];
                                    for (l, &v) in row[bi * len..(bi + 1) * len].iter().enumerate() {
                                        let s = l + j;
                                        if s >= half && s - half < len {
                                            dst[s - half] += v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let n = numel(self.shape(*x));
                    let dx = add_into(&mut grads[x.0], n);
                    for (&src, &v) in argmax.iter().zip(&g) {
                        dx[src] += v;
                    }
                }
                Op::Relu { x } => {
                    let dx = add_into(&mut grads[x.0], g.len());
                    for ((d, &v), &y) in dx.iter_mut().zip(&g).zip(&node.value) {
                        if y > T::zero() {
                            *d += v;
                        }
                    }
                }
                Op::Concat { parts, outer } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(p, w) in parts {
                        if self.rg(p) {
                            let dp = add_into(&mut grads[p.0], outer * w);
                            for o in 0..*outer {
                                let src = &g[o * total + offset..o * total + offset + w];
                                dp[o * w..(o + 1) * w]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, &v)| *a += v);
                            }
                        }
                        offset += w;
                    }
                }
                Op::Add { a, b } | Op::Sub { a, b } => {
                    let neg = matches!(node.op, Op::Sub { .. });
                    if self.rg(*a) {
                        let da = add_into(&mut grads[a.0], g.len());
                        da.iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                    }
                    if self.rg(*b) {
                        let db = add_into(&mut grads[b.0], g.len());
                        if neg {
                            db.iter_mut().zip(&g).for_each(|(d, &v)| *d -= v);
                        } else {
                            db.iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.rg(*a) {
                        let vb = self.value(*b);
                        let da = add_into(&mut grads[a.0], g.len());
                        for ((d, &v), &y) in da.iter_mut().zip(&g).zip(vb) {
                            *d += v * y;
                        }
                    }
                    if self.rg(*b) {
                        let va = self.value(*a);
                        let db = add_into(&mut grads[b.0], g.len());
                        for ((d, &v), &y) in db.iter_mut().zip(&g).zip(va) {
                            *d += v * y;
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    let dx = add_into(&mut grads[x.0], g.len());
                    dx.iter_mut().zip(&g).for_each(|(d, &v)| *d += v * *factor);
                }
                Op::Reshape { x } => {
                    let dx = add_into(&mut grads[x.0], g.len());
                    dx.iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                }
                Op::Mean { x } => {
                    let n = numel(self.shape(*x));
                    let share = g[0] / T::of(n as f64);
                    let dx = add_into(&mut grads[x.0], n);
                    dx.iter_mut().for_each(|d| *d += share);
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                    classes,
                } => {
                    let scale = g[0] / T::of(labels.len() as f64);
                    let dl = add_into(&mut grads[logits.0], probs.len());
                    for (bi, &label) in labels.iter().enumerate() {
                        for c in 0..*classes {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            dl[bi * classes + c] += scale * (probs[bi * classes + c] - onehot);
                        }
                    }
                }
                Op::Mse { a, b } => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let scale = g[0] * T::of(2.0) / T::of(va.len() as f64);
                    if self.rg(*a) {
                        let da = add_into(&mut grads[a.0], va.len());
                        for ((d, &x), &y) in da.iter_mut().zip(va).zip(vb) {
                            *d += scale * (x - y);
                        }
                    }
                    if self.rg(*b) {
                        let db = add_into(&mut grads[b.0], va.len());
                        for ((d, &x), &y) in db.iter_mut().zip(va).zip(vb) {
                            *d -= scale * (x - y);
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: pgrads,
        })
    }
}
