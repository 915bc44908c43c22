//! Reverse-mode automatic differentiation on a flat computation tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass in append
//! order, which is a topological order by construction; [`Tape::backward`]
//! walks it once in reverse. Tapes are cheap and disposable: the training
//! loop records a fresh tape per optimization step, harvests leaf gradients,
//! and drops it.

use crate::error::{CoreError, Result};
use crate::tensor::{r, Real, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-normalization running statistics, owned by the layer (not the tape).
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics and fold them into the running stats.
    Train,
    /// Normalize by batch statistics without touching the running stats
    /// (key-branch forwards: its running stats follow the EMA instead).
    TrainNoUpdate,
    /// Normalize by the stored running statistics.
    Eval,
}

const BN_EPS: f64 = 1e-5;
const BN_STAT_FACTOR: f64 = 0.1;

enum Op<T> {
    Leaf,
    /// C[m,n] = A[m,k] B[k,n]
    MatMul { a: usize, b: usize },
    /// C[m,n] = A[m,k] B[n,k]^T
    MatMulNt { a: usize, b: usize },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        /// im2col buffers, one [C*9 x P] block per sample; empty when no
        /// gradient is required.
        cols: Vec<T>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        /// Normalized activations.
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// True when batch statistics were used (train modes).
        batch_stats: bool,
    },
    Relu { x: usize },
    GlobalAvgPool { x: usize },
    AddRowBias { x: usize, b: usize },
    SoftmaxXent {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L2NormalizeRows { x: usize, inv_norms: Vec<T> },
    Scale { x: usize, c: T },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    SumAll { x: usize },
    RowDot { a: usize, b: usize },
    ConcatCols { parts: Vec<usize> },
    Reshape { x: usize },
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn value_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(CoreError::DimensionMismatch(format!(
                "{what}: expected a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    // ---- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(CoreError::DimensionMismatch(format!(
                "matmul inner dimensions {ka} vs {kb}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut out,
            m,
            ka,
            n,
        );
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// `a[m,k] * b[n,k]^T -> [m,n]`. Used for query-against-queue similarity.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul_nt lhs")?;
        let (n, kb) = self.dims2(b, "matmul_nt rhs")?;
        if ka != kb {
            return Err(CoreError::DimensionMismatch(format!(
                "matmul_nt inner dimensions {ka} vs {kb}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut out,
            m,
            ka,
            n,
        );
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(out, vec![m, n], rg, Op::MatMulNt { a: a.0, b: b.0 }))
    }

    /// 3x3 cross-correlation with zero padding 1 and stride 1 or 2.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(CoreError::DimensionMismatch(format!(
                "conv2d expects NCHW input and FC33 weights, got {xs:?} and {ws:?}"
            )));
        }
        if ws[2] != 3 || ws[3] != 3 {
            return Err(CoreError::DimensionMismatch(format!(
                "conv2d kernels are fixed at 3x3, got {}x{}",
                ws[2], ws[3]
            )));
        }
        if xs[1] != ws[1] {
            return Err(CoreError::DimensionMismatch(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                xs[1], ws[1]
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(CoreError::DimensionMismatch(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        if h < 3 || wd < 3 {
            return Err(CoreError::DimensionMismatch(format!(
                "conv2d spatial dims must be >= 3, got {h}x{wd}"
            )));
        }
        let f = ws[0];
        let ho = (h + 2 - 3) / stride + 1;
        let wo = (wd + 2 - 3) / stride + 1;
        let p = ho * wo;
        let k9 = c * 9;

        let rg = self.needs_grad(&[x.0, w.0]);
        let mut out = vec![T::zero(); n * f * p];
        let mut saved_cols = if rg { vec![T::zero(); n * k9 * p] } else { Vec::new() };
        let mut scratch = vec![T::zero(); k9 * p];
        for s in 0..n {
            let ximg = &self.nodes[x.0].data[s * c * h * wd..(s + 1) * c * h * wd];
            im2col(ximg, c, h, wd, stride, ho, wo, &mut scratch);
            gemm_nn(
                &self.nodes[w.0].data,
                &scratch,
                &mut out[s * f * p..(s + 1) * f * p],
                f,
                k9,
                p,
            );
            if rg {
                saved_cols[s * k9 * p..(s + 1) * k9 * p].copy_from_slice(&scratch);
            }
        }
        Ok(self.push(
            out,
            vec![n, f, ho, wo],
            rg,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                cols: saved_cols,
            },
        ))
    }

    /// Batch normalization over NCHW (per channel) or NxD (per column) input.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        mode: BnMode,
    ) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let (n, c, spatial) = match xs.len() {
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            2 => (xs[0], xs[1], 1),
            _ => {
                return Err(CoreError::DimensionMismatch(format!(
                    "batchnorm expects NCHW or NxD input, got {xs:?}"
                )))
            }
        };
        if self.nodes[gamma.0].data.len() != c
            || self.nodes[beta.0].data.len() != c
            || stats.mean.len() != c
        {
            return Err(CoreError::DimensionMismatch(format!(
                "batchnorm parameter length does not match {c} channels"
            )));
        }
        let batch_stats = mode != BnMode::Eval;
        if batch_stats && n < 2 {
            return Err(CoreError::DegenerateBatch(n));
        }
        let m = n * spatial;
        let inv_m = r::<T>(1.0 / m as f64);
        let eps = r::<T>(BN_EPS);

        let (mean, var) = if batch_stats {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for s in 0..n {
                    let base = (s * c + ch) * spatial;
                    for i in 0..spatial {
                        acc = acc + self.nodes[x.0].data[base + i];
                    }
                }
                mean[ch] = acc * inv_m;
                let mut vacc = T::zero();
                for s in 0..n {
                    let base = (s * c + ch) * spatial;
                    for i in 0..spatial {
                        let d = self.nodes[x.0].data[base + i] - mean[ch];
                        vacc = vacc + d * d;
                    }
                }
                var[ch] = vacc * inv_m;
            }
            if mode == BnMode::Train {
                let f = r::<T>(BN_STAT_FACTOR);
                let keep = T::one() - f;
                for ch in 0..c {
                    stats.mean[ch] = keep * stats.mean[ch] + f * mean[ch];
                    stats.var[ch] = keep * stats.var[ch] + f * var[ch];
                }
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); n * c * spatial];
        let mut out = vec![T::zero(); n * c * spatial];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                let (mu, is) = (mean[ch], inv_std[ch]);
                let (g, b) = (self.nodes[gamma.0].data[ch], self.nodes[beta.0].data[ch]);
                for i in 0..spatial {
                    let xh = (self.nodes[x.0].data[base + i] - mu) * is;
                    xhat[base + i] = xh;
                    out[base + i] = g * xh + b;
                }
            }
        }
        let rg = self.needs_grad(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            out,
            xs,
            rg,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat: if rg { xhat } else { Vec::new() },
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Elementwise max(x, 0); the subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(data, shape, rg, Op::Relu { x: x.0 })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(CoreError::DimensionMismatch(format!(
                "global_avg_pool expects NCHW input, got {xs:?}"
            )));
        }
        let (n, c, spatial) = (xs[0], xs[1], xs[2] * xs[3]);
        let inv = r::<T>(1.0 / spatial as f64);
        let mut out = vec![T::zero(); n * c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                let mut acc = T::zero();
                for i in 0..spatial {
                    acc = acc + self.nodes[x.0].data[base + i];
                }
                out[s * c + ch] = acc * inv;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, vec![n, c], rg, Op::GlobalAvgPool { x: x.0 }))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "add_row_bias input")?;
        if self.nodes[b.0].data.len() != d {
            return Err(CoreError::DimensionMismatch(format!(
                "bias length {} does not match row width {d}",
                self.nodes[b.0].data.len()
            )));
        }
        let mut out = self.nodes[x.0].data.clone();
        for row in 0..n {
            for j in 0..d {
                out[row * d + j] = out[row * d + j] + self.nodes[b.0].data[j];
            }
        }
        let rg = self.needs_grad(&[x.0, b.0]);
        Ok(self.push(out, vec![n, d], rg, Op::AddRowBias { x: x.0, b: b.0 }))
    }

    /// Affine layer: `x[N,in] * w[in,out] + bias`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row_bias(h, b)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// row-max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(logits, "softmax_cross_entropy logits")?;
        if labels.len() != n {
            return Err(CoreError::DimensionMismatch(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        for &l in labels {
            if l >= c {
                return Err(CoreError::LabelOutOfRange { label: l, classes: c });
            }
        }
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for row in 0..n {
            let xs = &self.nodes[logits.0].data[row * c..(row + 1) * c];
            let mut mx = xs[0];
            for &v in &xs[1..] {
                mx = mx.max(v);
            }
            let mut denom = T::zero();
            for j in 0..c {
                let e = (xs[j] - mx).exp();
                probs[row * c + j] = e;
                denom = denom + e;
            }
            for j in 0..c {
                probs[row * c + j] = probs[row * c + j] / denom;
            }
            loss = loss - ((xs[labels[row]] - mx) - denom.ln());
        }
        loss = loss * r::<T>(1.0 / n as f64);
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![loss],
            vec![],
            rg,
            Op::SoftmaxXent {
                logits: logits.0,
                labels: labels.to_vec(),
                probs: if rg { probs } else { Vec::new() },
            },
        ))
    }

    /// Scale each row of `x[N,d]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "l2_normalize_rows input")?;
        let mut out = vec![T::zero(); n * d];
        let mut inv_norms = vec![T::zero(); n];
        for row in 0..n {
            let xs = &self.nodes[x.0].data[row * d..(row + 1) * d];
            let mut sq = T::zero();
            for &v in xs {
                sq = sq + v * v;
            }
            let norm = sq.sqrt();
            if !(norm > T::zero()) {
                return Err(CoreError::ZeroNormRow(row));
            }
            let inv = T::one() / norm;
            inv_norms[row] = inv;
            for j in 0..d {
                out[row * d + j] = xs[j] * inv;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            out,
            vec![n, d],
            rg,
            Op::L2NormalizeRows {
                x: x.0,
                inv_norms,
            },
        ))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(data, shape, rg, Op::Scale { x: x.0, c })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::DimensionMismatch(format!(
                "add: shapes {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(data, shape, rg, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::DimensionMismatch(format!(
                "mul: shapes {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(data, shape, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in &self.nodes[x.0].data {
            acc = acc + v;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![acc], vec![], rg, Op::SumAll { x: x.0 })
    }

    /// Per-row dot product of two `[N,d]` matrices, yielding `[N,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, da) = self.dims2(a, "row_dot lhs")?;
        let (nb, db) = self.dims2(b, "row_dot rhs")?;
        if na != nb || da != db {
            return Err(CoreError::DimensionMismatch(format!(
                "row_dot: {na}x{da} vs {nb}x{db}"
            )));
        }
        let mut out = vec![T::zero(); na];
        for row in 0..na {
            let mut acc = T::zero();
            for j in 0..da {
                acc = acc + self.nodes[a.0].data[row * da + j] * self.nodes[b.0].data[row * da + j];
            }
            out[row] = acc;
        }
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(out, vec![na, 1], rg, Op::RowDot { a: a.0, b: b.0 }))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    /// Zero-width parts are allowed (an empty negative block).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, dp) = self.dims2(p, "concat_cols part")?;
            if np != n {
                return Err(CoreError::DimensionMismatch(format!(
                    "concat_cols row counts {n} vs {np}"
                )));
            }
            widths.push(dp);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); n * total];
        for row in 0..n {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let d = widths[pi];
                out[row * total + off..row * total + off + d]
                    .copy_from_slice(&self.nodes[p.0].data[row * d..(row + 1) * d]);
                off += d;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(out, vec![n, total], rg, Op::ConcatCols { parts: ids }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "reshape to {:?} from {} elements",
                shape,
                self.nodes[x.0].data.len()
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, shape, rg, Op::Reshape { x: x.0 }))
    }

    // ---- backward -----------------------------------------------------------

    /// Run one backward pass from a scalar loss, accumulating gradients into
    /// every `requires_grad` node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(CoreError::DimensionMismatch(
                "backward requires a scalar loss".into(),
            ));
        }
        let mut grads: Vec<Vec<T>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    vec![T::zero(); n.data.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        if !self.nodes[loss.0].requires_grad {
            // Nothing upstream requires gradients; a backward pass is a no-op.
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0][0] = T::one();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.backprop_node(i, &g, &mut grads);
            grads[i] = g;
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Vec<T>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].requires_grad {
                    // dA = dC * B^T
                    gemm_nt(g, &self.nodes[*b].data, &mut grads[*a], m, n, k);
                }
                if self.nodes[*b].requires_grad {
                    // dB = A^T * dC
                    gemm_tn(&self.nodes[*a].data, g, &mut grads[*b], m, k, n);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[0];
                if self.nodes[*a].requires_grad {
                    // dA = dC * B
                    gemm_nn(g, &self.nodes[*b].data, &mut grads[*a], m, n, k);
                }
                if self.nodes[*b].requires_grad {
                    // dB = dC^T * A
                    gemm_tn(g, &self.nodes[*a].data, &mut grads[*b], m, n, k);
                }
            }
            Op::Conv2d { x, w, stride, cols } => {
                let xs = &self.nodes[*x].shape;
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let f = self.nodes[*w].shape[0];
                let (ho, wo) = (node.shape[2], node.shape[3]);
                let p = ho * wo;
                let k9 = c * 9;
                let mut col_t = vec![T::zero(); p * k9];
                let mut dcols = vec![T::zero(); k9 * p];
                for s in 0..n {
                    let dout = &g[s * f * p..(s + 1) * f * p];
                    let scols = &cols[s * k9 * p..(s + 1) * k9 * p];
                    if self.nodes[*w].requires_grad {
                        // dW += dout[F,P] * cols[K9,P]^T
                        transpose(scols, &mut col_t, k9, p);
                        gemm_nn(dout, &col_t, &mut grads[*w], f, p, k9);
                    }
                    if self.nodes[*x].requires_grad {
                        for v in dcols.iter_mut() {
                            *v = T::zero();
                        }
                        // dcols = W^T[K9,F] * dout[F,P]
                        gemm_tn(&self.nodes[*w].data, dout, &mut dcols, f, k9, p);
                        col2im(
                            &dcols,
                            c,
                            h,
                            wd,
                            *stride,
                            ho,
                            wo,
                            &mut grads[*x][s * c * h * wd..(s + 1) * c * h * wd],
                        );
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = &self.nodes[*x].shape;
                let (n, c, spatial) = match xs.len() {
                    4 => (xs[0], xs[1], xs[2] * xs[3]),
                    _ => (xs[0], xs[1], 1),
                };
                let m = n * spatial;
                let inv_m = r::<T>(1.0 / m as f64);
                for ch in 0..c {
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * spatial;
                        for idx in 0..spatial {
                            let dy = g[base + idx];
                            sum_dy = sum_dy + dy;
                            sum_dy_xhat = sum_dy_xhat + dy * xhat[base + idx];
                        }
                    }
                    if self.nodes[*gamma].requires_grad {
                        grads[*gamma][ch] = grads[*gamma][ch] + sum_dy_xhat;
                    }
                    if self.nodes[*beta].requires_grad {
                        grads[*beta][ch] = grads[*beta][ch] + sum_dy;
                    }
                    if self.nodes[*x].requires_grad {
                        let gam = self.nodes[*gamma].data[ch];
                        let is = inv_std[ch];
                        if *batch_stats {
                            let mean_dy = sum_dy * inv_m;
                            let mean_dy_xhat = sum_dy_xhat * inv_m;
                            for s in 0..n {
                                let base = (s * c + ch) * spatial;
                                for idx in 0..spatial {
                                    let dy = g[base + idx];
                                    let dx =
                                        gam * is * (dy - mean_dy - xhat[base + idx] * mean_dy_xhat);
                                    grads[*x][base + idx] = grads[*x][base + idx] + dx;
                                }
                            }
                        } else {
                            for s in 0..n {
                                let base = (s * c + ch) * spatial;
                                for idx in 0..spatial {
                                    grads[*x][base + idx] =
                                        grads[*x][base + idx] + g[base + idx] * gam * is;
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.nodes[*x].requires_grad {
                    for (idx, &v) in node.data.iter().enumerate() {
                        if v > T::zero() {
                            grads[*x][idx] = grads[*x][idx] + g[idx];
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.nodes[*x].requires_grad {
                    let xs = &self.nodes[*x].shape;
                    let (n, c, spatial) = (xs[0], xs[1], xs[2] * xs[3]);
                    let inv = r::<T>(1.0 / spatial as f64);
                    for s in 0..n {
                        for ch in 0..c {
                            let gv = g[s * c + ch] * inv;
                            let base = (s * c + ch) * spatial;
                            for idx in 0..spatial {
                                grads[*x][base + idx] = grads[*x][base + idx] + gv;
                            }
                        }
                    }
                }
            }
            Op::AddRowBias { x, b } => {
                let d = self.nodes[*b].data.len();
                let n = node.data.len() / d;
                if self.nodes[*x].requires_grad {
                    for (idx, &gv) in g.iter().enumerate() {
                        grads[*x][idx] = grads[*x][idx] + gv;
                    }
                }
                if self.nodes[*b].requires_grad {
                    for row in 0..n {
                        for j in 0..d {
                            grads[*b][j] = grads[*b][j] + g[row * d + j];
                        }
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                if self.nodes[*logits].requires_grad {
                    let n = labels.len();
                    let c = self.nodes[*logits].shape[1];
                    let gv = g[0] * r::<T>(1.0 / n as f64);
                    for row in 0..n {
                        for j in 0..c {
                            let onehot = if labels[row] == j { T::one() } else { T::zero() };
                            grads[*logits][row * c + j] =
                                grads[*logits][row * c + j] + gv * (probs[row * c + j] - onehot);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, inv_norms } => {
                if self.nodes[*x].requires_grad {
                    let (n, d) = (node.shape[0], node.shape[1]);
                    for row in 0..n {
                        let y = &node.data[row * d..(row + 1) * d];
                        let gr = &g[row * d..(row + 1) * d];
                        let mut ydotg = T::zero();
                        for j in 0..d {
                            ydotg = ydotg + y[j] * gr[j];
                        }
                        let inv = inv_norms[row];
                        for j in 0..d {
                            grads[*x][row * d + j] =
                                grads[*x][row * d + j] + (gr[j] - y[j] * ydotg) * inv;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.nodes[*x].requires_grad {
                    for (idx, &gv) in g.iter().enumerate() {
                        grads[*x][idx] = grads[*x][idx] + gv * *c;
                    }
                }
            }
            Op::Add { a, b } => {
                for &inp in &[*a, *b] {
                    if self.nodes[inp].requires_grad {
                        for (idx, &gv) in g.iter().enumerate() {
                            grads[inp][idx] = grads[inp][idx] + gv;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    for (idx, &gv) in g.iter().enumerate() {
                        grads[*a][idx] = grads[*a][idx] + gv * self.nodes[*b].data[idx];
                    }
                }
                if self.nodes[*b].requires_grad {
                    for (idx, &gv) in g.iter().enumerate() {
                        grads[*b][idx] = grads[*b][idx] + gv * self.nodes[*a].data[idx];
                    }
                }
            }
            Op::SumAll { x } => {
                if self.nodes[*x].requires_grad {
                    let gv = g[0];
                    for v in grads[*x].iter_mut() {
                        *v = *v + gv;
                    }
                }
            }
            Op::RowDot { a, b } => {
                let (n, d) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                for row in 0..n {
                    let gv = g[row];
                    if self.nodes[*a].requires_grad {
                        for j in 0..d {
                            grads[*a][row * d + j] =
                                grads[*a][row * d + j] + gv * self.nodes[*b].data[row * d + j];
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        for j in 0..d {
                            grads[*b][row * d + j] =
                                grads[*b][row * d + j] + gv * self.nodes[*a].data[row * d + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let n = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let d = self.nodes[p].shape[1];
                    if self.nodes[p].requires_grad {
                        for row in 0..n {
                            for j in 0..d {
                                grads[p][row * d + j] =
                                    grads[p][row * d + j] + g[row * total + off + j];
                            }
                        }
                    }
                    off += d;
                }
            }
            Op::Reshape { x } => {
                if self.nodes[*x].requires_grad {
                    for (idx, &gv) in g.iter().enumerate() {
                        grads[*x][idx] = grads[*x][idx] + gv;
                    }
                }
            }
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        if self.nodes[v.0].requires_grad && !self.grads.is_empty() {
            Some(&self.grads[v.0])
        } else {
            None
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn has_grads(&self) -> bool {
        !self.grads.is_empty()
    }
}

// ---- dense kernels ---------------------------------------------------------

/// C[m,n] += A[m,k] B[k,n]. Accumulation order over `l` is fixed, so results
/// are bit-deterministic.
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] B[n,k]^T, computed by transposing B first.
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::zero(); k * n];
    transpose(b, &mut bt, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// C[k,n] += A[m,k]^T B[m,n].
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let crow = &mut c[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

fn transpose<T: Real>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let krow = (ch * 9 + ky * 3 + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    let in_y = iy >= 0 && (iy as usize) < h;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        cols[krow + oy * wo + ox] = if in_y && ix >= 0 && (ix as usize) < w {
                            x[ch * h * w + iy as usize * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    dcols: &[T],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let p = ho * wo;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let krow = (ch * 9 + ky * 3 + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let di = ch * h * w + iy as usize * w + ix as usize;
                        dx[di] = dx[di] + dcols[krow + oy * wo + ox];
                    }
                }
            }
        }
    }
}
