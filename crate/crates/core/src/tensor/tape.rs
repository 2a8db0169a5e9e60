use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MeanRows(Var),
    WeightedSum(Var, Vec<f64>),
    L2Normalize { x: Var, epsilon: f64, norms: Vec<f64> },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    FillDiagonal(Var),
    Reshape(Var),
    Conv2d3x3 { x: Var, kernels: Var },
    MaxPool2x2 { x: Var, argmax: Vec<usize> },
    SpatialMean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Dynamic computation tape. Ops are recorded in execution order and
/// replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for i in 0..rows {
        let out_row = &mut out[i * cols..(i + 1) * cols];
        for p in 0..inner {
            let av = a[i * inner + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * cols..(p + 1) * cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor. With `requires_grad`, [`Tape::backward`]
    /// accumulates into its gradient buffer.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of a leaf, or zeros if backward never reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    /// Distance of the recorded computation from its nearest kink: the
    /// smallest `|input|` seen by a ReLU, or the smallest gap between the
    /// two largest entries of a max-pool window. Infinite if neither op was
    /// recorded. Finite differences are only meaningful when this exceeds
    /// the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool2x2 { x, argmax } => {
                    let src = self.value(*x);
                    let s = src.shape();
                    let (h, w) = (s[2], s[3]);
                    for (o, &best) in argmax.iter().enumerate() {
                        let plane = o / ((h / 2) * (w / 2));
                        let (oy, ox) = ((o / (w / 2)) % (h / 2), o % (w / 2));
                        let base = plane * h * w + 2 * oy * w + 2 * ox;
                        for idx in [base, base + 1, base + w, base + w + 1] {
                            if idx != best {
                                margin = margin.min(src.data()[best] - src.data()[idx]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(dim_err(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.rank2(a, "matmul")?;
        let (k2, c) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; r * c];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, r, k, c);
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rank2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    /// Adds a length-`c` bias to every row of an `n x c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.rank2(x, "add_bias")?;
        if self.shape(bias) != [c] {
            return Err(dim_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Column means of an `n x m` matrix, as a `1 x m` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.rank2(x, "mean_rows")?;
        if n == 0 {
            return Err(TensorError::Invalid("mean_rows of an empty matrix".into()));
        }
        let mut out = vec![0.0; m];
        for row in self.value(x).data().chunks(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![1, m], out)?;
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    /// `sum_i weights[i] * x[i]` over the flattened tensor, as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(dim_err("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(x, weights), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        self.weighted_sum(x, vec![1.0; n]).expect("matching length")
    }

    /// Divides each row by `max(||row||, epsilon)`.
    pub fn l2_normalize(&mut self, x: Var, epsilon: f64) -> Result<Var> {
        let (n, m) = self.rank2(x, "l2_normalize")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * m];
        let mut norms = Vec::with_capacity(n);
        for (row, dst) in src.chunks(m).zip(out.chunks_mut(m)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(epsilon);
            for (d, v) in dst.iter_mut().zip(row) {
                *d = v / denom;
            }
            norms.push(norm);
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::L2Normalize { x, epsilon, norms }, &[x]))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.rank2(logits, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(dim_err("softmax_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if n == 0 {
            return Err(TensorError::Invalid("cross entropy over zero rows".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (i, (row, p)) in src.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            // log-sum-exp form keeps the loss exact when p[label] underflows
            total += z.ln() - (row[labels[i]] - max);
        }
        let loss = Tensor::scalar(total / n as f64);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(loss, op, &[logits]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.rank2(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(dim_err("gather_rows", self.shape(x), &[bad]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            out.extend_from_slice(src.row(r));
        }
        let value = Tensor::new(vec![rows.len(), m], out)?;
        Ok(self.push(value, Op::GatherRows(x, rows.to_vec()), &[x]))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let (_, m) = self.rank2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rank2(p, "concat_rows")?;
            if c != m {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, m], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Replaces the diagonal of a square matrix with a constant. No gradient
    /// flows through the replaced entries.
    pub fn fill_diagonal(&mut self, x: Var, fill: f64) -> Result<Var> {
        let (n, m) = self.rank2(x, "fill_diagonal")?;
        if n != m {
            return Err(dim_err("fill_diagonal", self.shape(x), &[n, n]));
        }
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            out[i * n + i] = fill;
        }
        let value = Tensor::new(vec![n, n], out)?;
        Ok(self.push(value, Op::FillDiagonal(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// `x` is `[batch, c_in, h, w]`, `kernels` is `[c_out, c_in, 3, 3]`.
    pub fn conv2d_3x3(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[2] != 3 || ks[3] != 3 || ks[1] != xs[1] {
            return Err(dim_err("conv2d_3x3", &xs, &ks));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ks[0];
        let xd = self.value(x).data();
        let kd = self.value(kernels).data();
        let mut out = vec![0.0; b * cout * h * w];
        for bi in 0..b {
            for co in 0..cout {
                let dst = &mut out[(bi * cout + co) * h * w..(bi * cout + co + 1) * h * w];
                for ci in 0..cin {
                    let src = &xd[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                    let k = &kd[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let kv = k[ky * 3 + kx];
                            conv_tap(src, dst, h, w, ky, kx, kv);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, cout, h, w], out)?;
        Ok(self.push(value, Op::Conv2d3x3 { x, kernels }, &[x, kernels]))
    }

    /// 2x2 max pooling with stride 2. Height and width must be even.
    pub fn maxpool_2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(dim_err("maxpool_2x2", &xs, &[0, 0, 2, 2]));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2x2 { x, argmax }, &[x]))
    }

    /// Mean over the spatial axes: `[b, c, h, w] -> [b, c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] * xs[3] == 0 {
            return Err(dim_err("spatial_mean", &xs, &[0, 0, 1, 1]));
        }
        let hw = xs[2] * xs[3];
        let inv = 1.0 / hw as f64;
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() * inv)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(value, Op::SpatialMean(x), &[x]))
    }

    /// Accumulates `d loss / d leaf` into every `requires_grad` leaf.
    /// Repeated calls add to the existing gradients; see [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            if node.requires_grad {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let c = out_shape[1];
                if self.nodes[a.0].needs_grad {
                    // dA = dC . B^T
                    let bd = self.value(*b).data();
                    let mut da = vec![0.0; r * k];
                    for ii in 0..r {
                        let grow = &g[ii * c..(ii + 1) * c];
                        for p in 0..k {
                            let brow = &bd[p * c..(p + 1) * c];
                            da[ii * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(adj, *a, da, self);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T . dC
                    let ad = self.value(*a).data();
                    let mut db = vec![0.0; k * c];
                    for ii in 0..r {
                        let grow = &g[ii * c..(ii + 1) * c];
                        for p in 0..k {
                            let av = ad[ii * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * c..(p + 1) * c].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    accumulate(adj, *b, db, self);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                for ii in 0..r {
                    for j in 0..c {
                        dx[ii * c + j] = g[j * r + ii];
                    }
                }
                accumulate(adj, *x, dx, self);
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(adj, *x, dx, self);
            }
            Op::AddBias(x, bias) => {
                accumulate(adj, *x, g.to_vec(), self);
                if self.nodes[bias.0].needs_grad {
                    let c = out_shape[1];
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(adj, *bias, db, self);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(av).map(|(x, y)| x * y).collect();
                accumulate(adj, *a, da, self);
                accumulate(adj, *b, db, self);
            }
            Op::Scale(x, f) => {
                accumulate(adj, *x, g.iter().map(|v| v * f).collect(), self);
            }
            Op::MeanRows(x) => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                let inv = 1.0 / n as f64;
                let mut dx = Vec::with_capacity(n * m);
                for _ in 0..n {
                    dx.extend(g.iter().map(|v| v * inv));
                }
                accumulate(adj, *x, dx, self);
            }
            Op::WeightedSum(x, w) => {
                accumulate(adj, *x, w.iter().map(|v| v * g[0]).collect(), self);
            }
            Op::L2Normalize { x, epsilon, norms } => {
                // y = x / n with n = ||x||: dx = (g - y (y . g)) / n.
                // Below the epsilon floor the denominator is constant: dx = g / eps.
                let m = out_shape[1];
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * m..(r + 1) * m;
                    let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                    let dr = &mut dx[span];
                    if norm > *epsilon {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dr[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..m {
                            dr[j] = gr[j] / epsilon;
                        }
                    }
                }
                accumulate(adj, *x, dx, self);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / n as f64;
                let mut dx = probs.clone();
                for (row, &label) in dx.chunks_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(adj, *logits, dx, self);
            }
            Op::GatherRows(x, rows) => {
                let m = out_shape[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (o, &r) in rows.iter().enumerate() {
                    for j in 0..m {
                        dx[r * m + j] += g[o * m + j];
                    }
                }
                accumulate(adj, *x, dx, self);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    accumulate(adj, *p, g[offset..offset + len].to_vec(), self);
                    offset += len;
                }
            }
            Op::FillDiagonal(x) => {
                let n = out_shape[0];
                let mut dx = g.to_vec();
                for ii in 0..n {
                    dx[ii * n + ii] = 0.0;
                }
                accumulate(adj, *x, dx, self);
            }
            Op::Reshape(x) => accumulate(adj, *x, g.to_vec(), self),
            Op::Conv2d3x3 { x, kernels } => {
                let xs = self.shape(*x);
                let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = out_shape[1];
                let xd = self.value(*x).data();
                let kd = self.value(*kernels).data();
                let want_x = self.nodes[x.0].needs_grad;
                let want_k = self.nodes[kernels.0].needs_grad;
                let mut dx = vec![0.0; if want_x { xd.len() } else { 0 }];
                let mut dk = vec![0.0; if want_k { kd.len() } else { 0 }];
                for bi in 0..b {
                    for co in 0..cout {
                        let gp = &g[(bi * cout + co) * h * w..(bi * cout + co + 1) * h * w];
                        for ci in 0..cin {
                            let plane = (bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w;
                            let kbase = (co * cin + ci) * 9;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    if want_x {
                                        let kv = kd[kbase + ky * 3 + kx];
                                        let dxp = &mut dx[plane.clone()];
                                        conv_tap_transpose(gp, dxp, h, w, ky, kx, kv);
                                    }
                                    if want_k {
                                        let src = &xd[plane.clone()];
                                        dk[kbase + ky * 3 + kx] +=
                                            conv_tap_kernel_grad(src, gp, h, w, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    accumulate(adj, *x, dx, self);
                }
                if want_k {
                    accumulate(adj, *kernels, dk, self);
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                accumulate(adj, *x, dx, self);
            }
            Op::SpatialMean(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = 1.0 / hw as f64;
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                accumulate(adj, *x, dx, self);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], target: Var, contribution: Vec<f64>, tape: &Tape) {
    if !tape.nodes[target.0].needs_grad {
        return;
    }
    match &mut adj[target.0] {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}

/// Output rows (or columns) of a padded 3x3 conv for which kernel offset
/// `k` reads an in-bounds input pixel.
#[inline]
fn tap_range(len: usize, k: usize) -> std::ops::Range<usize> {
    match k {
        0 => 1.min(len)..len,
        2 => 0..len.saturating_sub(1),
        _ => 0..len,
    }
}

/// `dst[y, x] += k * src[y + ky - 1, x + kx - 1]` over one kernel tap.
#[inline]
fn conv_tap(src: &[f64], dst: &mut [f64], h: usize, w: usize, ky: usize, kx: usize, k: f64) {
    if k == 0.0 {
        return;
    }
    for y in tap_range(h, ky) {
        let row = (y + ky - 1) * w;
        for xx in tap_range(w, kx) {
            dst[y * w + xx] += k * src[row + xx + kx - 1];
        }
    }
}

/// Adjoint of [`conv_tap`] with respect to `src`.
#[inline]
fn conv_tap_transpose(g: &[f64], dx: &mut [f64], h: usize, w: usize, ky: usize, kx: usize, k: f64) {
    if k == 0.0 {
        return;
    }
    for y in tap_range(h, ky) {
        let row = (y + ky - 1) * w;
        for xx in tap_range(w, kx) {
            dx[row + xx + kx - 1] += k * g[y * w + xx];
        }
    }
}

/// Adjoint of [`conv_tap`] with respect to the kernel value.
#[inline]
fn conv_tap_kernel_grad(src: &[f64], g: &[f64], h: usize, w: usize, ky: usize, kx: usize) -> f64 {
    let mut acc = 0.0;
    for y in tap_range(h, ky) {
        let row = (y + ky - 1) * w;
        for xx in tap_range(w, kx) {
            acc += g[y * w + xx] * src[row + xx + kx - 1];
        }
    }
    acc
}
