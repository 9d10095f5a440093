use super::{gelu_scalar, softmax_in_place, Float, Tensor, RMS_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention block inside a packed batch: query rows
/// `q_start..q_start+q_len` attend to key rows `k_start..k_start+k_len`.
///
/// Under a causal mask, query `r` sees keys `0..=r + (k_len - q_len)`, so a
/// query block shorter than its key block is aligned to the end of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

enum Op<F> {
    Leaf,
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: F,
    },
    Sum {
        x: usize,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<F>,
    },
    Gelu {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    Rotate {
        x: usize,
        head_dim: usize,
        cos: Vec<F>,
        sin: Vec<F>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        n_heads: usize,
        segments: Vec<AttnSegment>,
        prob_offsets: Vec<usize>,
        probs: Vec<F>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<F>,
        count: usize,
    },
}

struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op<F>,
}

impl<F> Node<F> {
    fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.value.len() / cols.max(1), cols)
    }
}

/// Ordered record of executed operations. [`Tape::backward`] sweeps it once
/// in reverse, accumulating gradients additively where values fan out.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

/// Gradients produced by one reverse sweep, indexed by leaf [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of a leaf that required grad; zero-filled if it was unreachable.
    pub fn get(&self, var: Var) -> Option<&[F]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into the tensor's grad buffer.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<F>) {
        if let Some(g) = self.get(var) {
            tensor.accumulate_grad(g);
        }
    }
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn zeros_like<F: Float>(n: usize) -> Vec<F> {
    vec![F::zero(); n]
}

fn grad_slot<'g, F: Float>(nodes: &[Node<F>], grads: &'g mut [Option<Vec<F>>], idx: usize) -> Option<&'g mut Vec<F>> {
    if !nodes[idx].needs_grad {
        return None;
    }
    let n = nodes[idx].value.len();
    Some(grads[idx].get_or_insert_with(|| zeros_like(n)))
}

impl<F: Float> Tape<F> {
    /// A tape that records everything needed for a reverse sweep.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that only computes values; nothing on it requires grad.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are well-formed")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, inputs: &[usize], op: Op<F>) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            shape,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].rows_cols()
    }

    /// Records a leaf holding a copy of `t`. It requires grad iff `t` does.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        let needs_grad = self.grad_enabled && t.requires_grad;
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            needs_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.leaf(&t))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::Empty("gather ids"));
        }
        let src = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    what: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        Ok(self.push(
            out,
            vec![ids.len(), cols],
            &[table.0],
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = zeros_like(m * n);
        F::gemm(
            m,
            k,
            n,
            F::one(),
            (self.value(a), k as isize, 1),
            (self.value(b), n as isize, 1),
            F::zero(),
            (&mut out, n as isize, 1),
        );
        Ok(self.push(out, vec![m, n], &[a.0, b.0], Op::MatMul { a: a.0, b: b.0 }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, &[a.0, b.0], Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, &[a.0, b.0], Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, &[x.0], Op::Scale { x: x.0, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        self.push(vec![total], vec![1], &[x.0], Op::Sum { x: x.0 })
    }

    /// Each row divided by `sqrt(mean(row^2) + eps)`, then scaled by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.nodes[gain.0].value.len() != cols {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = F::cast_from(RMS_EPS);
        let n = F::cast_from(cols as f64);
        let xs = self.value(x);
        let g = self.value(gain);
        let mut out = Vec::with_capacity(rows * cols);
        let mut inv_rms = Vec::with_capacity(rows);
        for row in xs.chunks_exact(cols) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / n;
            let r = F::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(&v, &gg)| v * r * gg));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            out,
            shape,
            &[x.0, gain.0],
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                inv_rms,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| F::cast_from(gelu_scalar(v.as_f64()).0))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, &[x.0], Op::Gelu { x: x.0 })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = self.dims(x);
        let mut out = self.value(x).to_vec();
        out.chunks_exact_mut(cols).for_each(softmax_in_place);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, &[x.0], Op::Softmax { x: x.0 })
    }

    /// Rotates consecutive feature pairs `(2t, 2t+1)` inside every
    /// `head_dim`-wide head. `cos`/`sin` hold `head_dim / 2` entries per row
    /// and are shared by all heads of that row.
    pub fn rotate_pairs(&mut self, x: Var, head_dim: usize, cos: Vec<F>, sin: Vec<F>) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let half = head_dim / 2;
        if head_dim == 0 || head_dim % 2 != 0 || cols % head_dim != 0 {
            return Err(Error::Shape {
                op: "rotate_pairs",
                lhs: self.shape(x).to_vec(),
                rhs: vec![head_dim],
            });
        }
        if cos.len() != rows * half || sin.len() != rows * half {
            return Err(Error::Shape {
                op: "rotate_pairs",
                lhs: vec![rows, half],
                rhs: vec![cos.len()],
            });
        }
        let xs = self.value(x);
        let mut out = vec![F::zero(); xs.len()];
        for r in 0..rows {
            let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
            let src = &xs[r * cols..(r + 1) * cols];
            let dst = &mut out[r * cols..(r + 1) * cols];
            for (hs, hd) in src.chunks_exact(head_dim).zip(dst.chunks_exact_mut(head_dim)) {
                for t in 0..half {
                    let (a, b) = (hs[2 * t], hs[2 * t + 1]);
                    hd[2 * t] = a * c[t] - b * s[t];
                    hd[2 * t + 1] = a * s[t] + b * c[t];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            out,
            shape,
            &[x.0],
            Op::Rotate {
                x: x.0,
                head_dim,
                cos,
                sin,
            },
        ))
    }

    /// Fused multi-head scaled dot-product attention over packed segments.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segments: &[AttnSegment],
        causal: bool,
    ) -> Result<Var> {
        let (nq, width) = self.dims(q);
        let (nk, kw) = self.dims(k);
        let (nv, vw) = self.dims(v);
        if kw != width || vw != width || nk != nv || n_heads == 0 || width % n_heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        let dh = width / n_heads;
        let scale = F::cast_from(1.0 / (dh as f64).sqrt());
        let mut prob_offsets = Vec::with_capacity(segments.len());
        let mut total = 0;
        for seg in segments {
            if seg.q_start + seg.q_len > nq || seg.k_start + seg.k_len > nk || seg.k_len == 0 {
                return Err(Error::invalid(format!("attention segment {seg:?} out of bounds")));
            }
            if causal && seg.k_len < seg.q_len {
                return Err(Error::invalid("causal segment needs k_len >= q_len"));
            }
            prob_offsets.push(total);
            total += n_heads * seg.q_len * seg.k_len;
        }
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![F::zero(); total];
        let mut out = vec![F::zero(); nq * width];
        for (seg, &base) in segments.iter().zip(&prob_offsets) {
            let offset = seg.k_len - seg.q_len.min(seg.k_len);
            for h in 0..n_heads {
                let lo = h * dh;
                for r in 0..seg.q_len {
                    let visible = if causal { r + offset + 1 } else { seg.k_len };
                    let qrow = &qs[(seg.q_start + r) * width + lo..][..dh];
                    let p = &mut probs[base + (h * seg.q_len + r) * seg.k_len..][..visible];
                    for (c, pc) in p.iter_mut().enumerate() {
                        let krow = &ks[(seg.k_start + c) * width + lo..][..dh];
                        *pc = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    }
                    softmax_in_place(p);
                    let orow = &mut out[(seg.q_start + r) * width + lo..][..dh];
                    for (c, &pc) in p.iter().enumerate() {
                        let vrow = &vs[(seg.k_start + c) * width + lo..][..dh];
                        orow.iter_mut().zip(vrow).for_each(|(o, &b)| *o += pc * b);
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![nq, width],
            &[q.0, k.0, v.0],
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                n_heads,
                segments: segments.to_vec(),
                prob_offsets,
                probs,
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if len == 0 || start + len > rows {
            return Err(Error::OutOfRange {
                what: "row slice",
                index: start + len,
                bound: rows,
            });
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(out, vec![len, cols], &[x.0], Op::SliceRows { x: x.0, start }))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, classes) = self.dims(logits);
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![rows, classes],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::OutOfRange {
                what: "target class",
                index: t,
                bound: classes,
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Empty("cross_entropy mask selects no positions"));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_exact_mut(classes).enumerate() {
            if !mask[r] {
                row.iter_mut().for_each(|x| *x = F::zero());
                continue;
            }
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
            total += (lse - row[targets[r]]).as_f64();
            softmax_in_place(row);
        }
        let loss = F::cast_from(total / count as f64);
        Ok(self.push(
            vec![loss],
            vec![1],
            &[logits.0],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            let is_grad_leaf = node.needs_grad && matches!(node.op, Op::Leaf);
            if !is_grad_leaf {
                *g = None;
            } else if g.is_none() {
                *g = Some(zeros_like(node.value.len()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        
        match &node.op {
            Op::Leaf => {}
            Op::Gather { table, ids } => {
                let cols = nodes[*table].rows_cols().1;
                if let Some(dt) = grad_slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        dt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = nodes[*a].rows_cols();
                let n = nodes[*b].rows_cols().1;
                if let Some(da) = grad_slot(nodes, grads, *a) {
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        (g, n as isize, 1),
                        (&nodes[*b].value, 1, n as isize),
                        F::one(),
                        (da, k as isize, 1),
                    );
                }
                if let Some(db) = grad_slot(nodes, grads, *b) {
                    F::gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        (&nodes[*a].value, 1, k as isize),
                        (g, n as isize, 1),
                        F::one(),
                        (db, n as isize, 1),
                    );
                }
            }
            Op::Add { a, b } => {
                for idx in [*a, *b] {
                    if let Some(d) = grad_slot(nodes, grads, idx) {
                        d.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if let Some(da) = grad_slot(nodes, grads, *a) {
                    for ((d, &s), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                }
                if let Some(db) = grad_slot(nodes, grads, *b) {
                    for ((d, &s), &o) in db.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *factor);
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let cols = nodes[*x].rows_cols().1;
                let n = F::cast_from(cols as f64);
                let xv = &nodes[*x].value;
                let gv = &nodes[*gain].value;
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: F = xr.iter().zip(gr).zip(gv).map(|((&a, &b), &c)| a * b * c).sum();
                        let coef = ir * ir * ir * dot / n;
                        let dr = &mut dx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dr[j] += ir * gv[j] * gr[j] - coef * xr[j];
                        }
                    }
                }
                if let Some(dg) = grad_slot(nodes, grads, *gain) {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dg[j] += gr[j] * xr[j] * ir;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = &nodes[*x].value;
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for ((d, &s), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += s * F::cast_from(gelu_scalar(v.as_f64()).1);
                    }
                }
            }
            Op::Softmax { x } => {
                let cols = node.rows_cols().1;
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for ((dr, gr), yr) in dx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(node.value.chunks_exact(cols))
                    {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Rotate {
                x,
                head_dim,
                cos,
                sin,
            } => {
                let cols = node.rows_cols().1;
                let half = head_dim / 2;
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for (r, (dr, gr)) in dx.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).enumerate() {
                        let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
                        for (dh, gh) in dr.chunks_exact_mut(*head_dim).zip(gr.chunks_exact(*head_dim)) {
                            for t in 0..half {
                                let (a, b) = (gh[2 * t], gh[2 * t + 1]);
                                dh[2 * t] += a * c[t] + b * s[t];
                                dh[2 * t + 1] += b * c[t] - a * s[t];
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                segments,
                prob_offsets,
                probs,
            } => self.attention_backward(
                g,
                (*q, *k, *v),
                *n_heads,
                segments,
                prob_offsets,
                probs,
                grads,
            ),
            Op::SliceRows { x, start } => {
                let cols = node.rows_cols().1;
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    dx[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &s)| *d += s);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let classes = nodes[*logits].rows_cols().1;
                let coef = g[0] / F::cast_from(*count as f64);
                if let Some(dl) = grad_slot(nodes, grads, *logits) {
                    for (r, (dr, pr)) in dl
                        .chunks_exact_mut(classes)
                        .zip(probs.chunks_exact(classes))
                        .enumerate()
                    {
                        if !mask[r] {
                            continue;
                        }
                        dr.iter_mut().zip(pr).for_each(|(d, &p)| *d += coef * p);
                        dr[targets[r]] -= coef;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[F],
        (q, k, v): (usize, usize, usize),
        n_heads: usize,
        segments: &[AttnSegment],
        prob_offsets: &[usize],
        probs: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let nodes = &self.nodes;
        let width = nodes[q].rows_cols().1;
        let dh = width / n_heads;
        let scale = F::cast_from(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);

        let mut dq = zeros_like::<F>(qs.len());
        let mut dk = zeros_like::<F>(ks.len());
        let mut dv = zeros_like::<F>(vs.len());
        let mut dp: Vec<F> = Vec::new();

        for (seg, &base) in segments.iter().zip(prob_offsets) {
            // Masked entries hold exact zeros and contribute nothing.
            for h in 0..n_heads {
                let lo = h * dh;
                for r in 0..seg.q_len {
                    let p = &probs[base + (h * seg.q_len + r) * seg.k_len..][..seg.k_len];
                    let qi = (seg.q_start + r) * width + lo;
                    let grow = &g[qi..qi + dh];
                    dp.clear();
                    let mut weighted = F::zero();
                    for (c, &pc) in p.iter().enumerate() {
                        let vrow = &vs[(seg.k_start + c) * width + lo..][..dh];
                        let d: F = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                        dp.push(d);
                        weighted += pc * d;
                    }
                    for (c, &pc) in p.iter().enumerate() {
                        if pc == F::zero() {
                            continue;
                        }
                        let ki = (seg.k_start + c) * width + lo;
                        let dvrow = &mut dv[ki..ki + dh];
                        dvrow.iter_mut().zip(grow).for_each(|(d, &s)| *d += pc * s);
                        let ds = pc * (dp[c] - weighted) * scale;
                        for t in 0..dh {
                            dq[qi + t] += ds * ks[ki + t];
                            dk[ki + t] += ds * qs[qi + t];
                        }
                    }
                }
            }
        }

        for (idx, d) in [(q, dq), (k, dk), (v, dv)] {
            if !nodes[idx].needs_grad {
                continue;
            }
            match &mut grads[idx] {
                Some(buf) => buf.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        }
    }
}
