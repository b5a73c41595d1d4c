//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every primitive appends one record to the [`Tape`]; inputs always
//! precede outputs, so [`Tape::backward`] is a single reverse sweep over
//! the record list. A tape is built for one forward pass and dropped
//! afterwards.
//!
//! ```
//! use splm::autodiff::Tape;
//! use splm::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad_tensor(x).data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions a query may attend to.
///
/// Masked entries get probability exactly zero, so padding and future
/// positions cannot leak into the output.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub batch: usize,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    /// `batch × keys`, `true` for real (non-pad) keys.
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

impl AttentionMask {
    #[inline]
    fn allowed(&self, bh: usize, q: usize, s: usize) -> bool {
        self.key_valid[(bh / self.heads) * self.keys + s] && (!self.causal || s <= q)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<u32>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient after [`Tape::backward`]; `None` when `v` was unreachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the value; zeros when unreachable.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// `a · b` where `a` is `[..., k]` (leading dims flattened into rows)
    /// and `b` is `[k, n]`, or `[n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        if ash.is_empty() || bsh.len() != 2 {
            return Err(Error::dim("matmul", ash, bsh));
        }
        let k = *ash.last().unwrap();
        let (bk, n) = if trans_b { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
        if k != bk {
            return Err(Error::dim("matmul", ash, bsh));
        }
        let m = self.value(a).rows();
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(Error::dim("batch_matmul", ash, bsh));
        }
        let (batch, m, k) = (ash[0], ash[1], ash[2]);
        let (bk, n) = if trans_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        if k != bk {
            return Err(Error::dim("batch_matmul", ash, bsh));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        if ash != bsh {
            return Err(Error::dim(op, ash, bsh));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Adds a `[d]` vector to every row of `[..., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).shape() != [d] {
            return Err(Error::dim("add_bias", self.value(x).shape(), self.value(bias).shape()));
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for row in data.chunks_mut(d) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    /// Per-row normalisation over the last dimension followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(Error::dim("layer_norm", self.value(x).shape(), self.value(p).shape()));
            }
        }
        let rows = self.value(x).rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let xv = self.value(x).data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g[j] + b[j];
                }
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None).expect("unmasked softmax")
    }

    /// Softmax over attention scores `[B·H, queries, keys]` with masking.
    /// A row whose keys are all masked yields all-zero probabilities.
    pub fn masked_softmax(&mut self, x: Var, mask: AttentionMask) -> Result<Var> {
        let sh = self.value(x).shape();
        if sh != [mask.batch * mask.heads, mask.queries, mask.keys]
            || mask.key_valid.len() != mask.batch * mask.keys
        {
            return Err(Error::dim(
                "masked_softmax",
                sh,
                &[mask.batch * mask.heads, mask.queries, mask.keys],
            ));
        }
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<AttentionMask>) -> Result<Var> {
        let d = self.value(x).last_dim();
        let rows = self.value(x).rows();
        let mut out = vec![0.0; rows * d];
        {
            let xv = self.value(x).data();
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let o = &mut out[r * d..(r + 1) * d];
                let allowed = |s: usize| match &mask {
                    None => true,
                    Some(m) => m.allowed(r / m.queries, r % m.queries, s),
                };
                let mut max = f64::NEG_INFINITY;
                for (s, &v) in row.iter().enumerate() {
                    if allowed(s) && v > max {
                        max = v;
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for s in 0..d {
                    if allowed(s) {
                        let e = (row[s] - max).exp();
                        o[s] = e;
                        sum += e;
                    }
                }
                let inv = 1.0 / sum;
                o.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Gathers rows of a `[rows, d]` table: output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let sh = self.value(table).shape();
        if sh.len() != 2 {
            return Err(Error::dim("embedding", sh, &[0, 0]));
        }
        let (rows, d) = (sh[0], sh[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= rows) {
            return Err(Error::Contract(format!(
                "embedding id {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i as usize * d..(i as usize + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.ng(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// `[B·T, H·dh]` → `[B·H, T, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        let d = self.value(x).last_dim();
        if self.value(x).rows() != batch * seq || d % heads != 0 {
            return Err(Error::dim("split_heads", &sh, &[batch * seq, heads]));
        }
        let dh = d / heads;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + t) * d + h * dh;
                    let dst = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let tensor = Tensor::new(vec![batch * heads, seq, dh], out)?;
        let ng = self.ng(x);
        Ok(self.push(
            tensor,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            ng,
        ))
    }

    /// `[B·H, T, dh]` → `[B·T, H·dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 3 || sh[0] != batch * heads {
            return Err(Error::dim("merge_heads", &sh, &[batch * heads]));
        }
        let (seq, dh) = (sh[1], sh[2]);
        let d = heads * dh;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let dst = (b * seq + t) * d + h * dh;
                    let src = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let tensor = Tensor::new(vec![batch * seq, d], out)?;
        let ng = self.ng(x);
        Ok(self.push(
            tensor,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood over rows of `[N, V]` logits whose
    /// target is `Some`. Returns a scalar; zero when every row is ignored.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var> {
        let v = self.value(logits).last_dim();
        let n = self.value(logits).rows();
        if targets.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                self.value(logits).shape(),
                &[targets.len()],
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t as usize >= v) {
            return Err(Error::Contract(format!("target {bad} outside [0, {v})")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut sum = 0.0;
            for (o, &z) in p.iter_mut().zip(row) {
                *o = (z - max).exp();
                sum += *o;
            }
            p.iter_mut().for_each(|o| *o /= sum);
            total += sum.ln() + max - row[*t as usize];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::dim("dropout", self.value(x).shape(), &[keep.len()]));
        }
        let inv = 1.0 / (1.0 - p);
        let scale: Vec<f64> = keep.iter().map(|&k| if k { inv } else { 0.0 }).collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&scale)
            .map(|(v, s)| v * s)
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Dropout { x, scale }, ng))
    }

    /// Picks rows of `[..., d]` into `[rows.len(), d]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let d = self.value(x).last_dim();
        let n = self.value(x).rows();
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::Contract(format!("row index out of range for {n} rows")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Propagates d(loss)/d(·) to every record reachable from `loss`.
    ///
    /// Records are visited in exact reverse order of creation, so the
    /// result is bitwise reproducible for an identical tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let want = |v: Var| nodes[v.0].needs_grad;
        let slot = |v: Var| nodes[v.0].value.len();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = slot(v);
                grads[v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
            } => {
                if want(a) {
                    let ga = acc!(a);
                    gemm(m, n, k, g, false, val(b), !trans_b, ga, true);
                }
                if want(b) {
                    let gb = acc!(b);
                    if trans_b {
                        gemm(n, m, k, g, true, val(a), false, gb, true);
                    } else {
                        gemm(k, m, n, val(a), true, g, false, gb, true);
                    }
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (val(a), val(b));
                if want(a) {
                    let ga = acc!(a);
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &bv[t * k * n..(t + 1) * k * n],
                            !trans_b,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            true,
                        );
                    }
                }
                if want(b) {
                    let gb = acc!(b);
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let as_ = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gs, true, as_, false, out, true);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, out, true);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if want(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            &Op::AddBias(x, bias) => {
                if want(x) {
                    acc!(x).iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if want(bias) {
                    let gb = acc!(bias);
                    let d = gb.len();
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if want(a) {
                    let bv = val(b);
                    acc!(a)
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(o, (gg, y))| *o += gg * y);
                }
                if want(b) {
                    let av = val(a);
                    acc!(b)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(o, (gg, x))| *o += gg * x);
                }
            }
            &Op::Scale(x, c) => {
                acc!(x).iter_mut().zip(g).for_each(|(o, v)| *o += v * c);
            }
            &Op::Gelu(x) => {
                let xv = val(x);
                acc!(x)
                    .iter_mut()
                    .zip(g.iter().zip(xv))
                    .for_each(|(o, (gg, &v))| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += gg * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = rstd.first().map_or(0, |_| xhat.len() / rstd.len());
                if want(*gain) {
                    let gg = acc!(*gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if want(*bias) {
                    let gb = acc!(*bias);
                    for grow in g.chunks(d) {
                        gb.iter_mut().zip(grow).for_each(|(o, v)| *o += v);
                    }
                }
                if want(*x) {
                    let gain_v = val(*gain);
                    let gx = acc!(*x);
                    let mut dh = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dh[j] = grow[j] * gain_v[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rs * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let d = nodes[i].value.last_dim();
                let gx = acc!(x);
                for ((grow, yrow), orow) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        orow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[i].value.last_dim();
                let gt = acc!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                    dst.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(o, v)| *o += v);
                }
            }
            &Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let d = nodes[x.0].value.last_dim();
                let dh = d / heads;
                let gx = acc!(x);
                for b in 0..batch {
                    for t in 0..seq {
                        for h in 0..heads {
                            let xo = (b * seq + t) * d + h * dh;
                            let yo = ((b * heads + h) * seq + t) * dh;
                            for j in 0..dh {
                                gx[xo + j] += g[yo + j];
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = nodes[x.0].value.last_dim();
                let d = heads * dh;
                let gx = acc!(x);
                for b in 0..batch {
                    for t in 0..seq {
                        for h in 0..heads {
                            let yo = (b * seq + t) * d + h * dh;
                            let xo = ((b * heads + h) * seq + t) * dh;
                            for j in 0..dh {
                                gx[xo + j] += g[yo + j];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    // Still materialise a zero gradient for the logits.
                    let _ = acc!(*logits);
                    return;
                }
                let v = nodes[logits.0].value.last_dim();
                let scale = g[0] / *count as f64;
                let gl = acc!(*logits);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let p = &probs[r * v..(r + 1) * v];
                    let o = &mut gl[r * v..(r + 1) * v];
                    for j in 0..v {
                        o[j] += scale * p[j];
                    }
                    o[*t as usize] -= scale;
                }
            }
            &Op::Sum(x) => {
                let s = g[0];
                acc!(x).iter_mut().for_each(|o| *o += s);
            }
            Op::Dropout { x, scale } => {
                acc!(*x)
                    .iter_mut()
                    .zip(g.iter().zip(scale))
                    .for_each(|(o, (gg, s))| *o += gg * s);
            }
            Op::SelectRows { x, rows } => {
                let d = nodes[i].value.last_dim();
                let gx = acc!(*x);
                for (k, &r) in rows.iter().enumerate() {
                    gx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[k * d..(k + 1) * d])
                        .for_each(|(o, v)| *o += v);
                }
            }
            &Op::Reshape(x) => {
                acc!(x).iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, GradcheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_gradcheck<F>(params: &[Tensor], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let rep = gradcheck::check(params, f, GradcheckOptions::default()).unwrap();
        assert!(
            rep.max_relative_error <= 1e-5,
            "relative error {} at {:?}",
            rep.max_relative_error,
            rep.worst
        );
    }

    // Weighted sum so every output coordinate has a distinct sensitivity.
    fn weighted_sum(t: &mut Tape, x: Var) -> Result<Var> {
        let shape = t.value(x).shape().to_vec();
        let n = t.value(x).len();
        let w = t.constant(
            Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect())
                .unwrap(),
        );
        let p = t.mul(x, w)?;
        Ok(t.sum(p))
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let eye = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = t.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let ai = t.matmul(a, eye, false).unwrap();
        assert_eq!(t.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = t.matmul(a, b, false).unwrap();
        assert_eq!(t.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b, false).unwrap_err() {
            Error::Dimension { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn grad_of_sum_matmul_is_ones_times_bt() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = rand_tensor(&mut rng, &[3, 4]);
        let b0 = rand_tensor(&mut rng, &[4, 2]);
        let mut t = Tape::new();
        let a = t.leaf(a0.clone());
        let b = t.constant(b0.clone());
        let c = t.matmul(a, b, false).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        let g = t.grad_tensor(a);
        // ones(3x2) · Bᵀ: each row equals the row sums of B.
        for i in 0..3 {
            for k in 0..4 {
                let want: f64 = b0.row(k).iter().sum();
                assert!((g.data()[i * 4 + k] - want).abs() < 1e-12);
            }
        }
        assert_gradcheck(&[a0, b0], |t, v| {
            let c = t.matmul(v[0], v[1], false)?;
            Ok(t.sum(c))
        });
    }

    #[test]
    fn gradcheck_matmul_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = vec![
            rand_tensor(&mut rng, &[2, 3, 4]),
            rand_tensor(&mut rng, &[5, 4]),
        ];
        assert_gradcheck(&ps, |t, v| {
            let c = t.matmul(v[0], v[1], true)?;
            weighted_sum(t, c)
        });
        let ps = vec![
            rand_tensor(&mut rng, &[3, 2, 4]),
            rand_tensor(&mut rng, &[3, 4, 5]),
            rand_tensor(&mut rng, &[3, 5, 4]),
        ];
        assert_gradcheck(&ps, |t, v| {
            let c = t.batch_matmul(v[0], v[1], false)?;
            let d = t.batch_matmul(v[0], v[2], true)?;
            let e = t.mul(c, d)?;
            weighted_sum(t, e)
        });
    }

    #[test]
    fn gradcheck_elementwise_and_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = vec![
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        assert_gradcheck(&ps, |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.add_bias(a, v[2])?;
            let c = t.gelu(b);
            let d = t.mul(c, v[0])?;
            let e = t.scale(d, 0.7);
            weighted_sum(t, e)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rand_tensor(&mut rng, &[5, 7]);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let y = t.softmax(x);
        for r in 0..5 {
            let s: f64 = t.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        assert_gradcheck(&[x0], |t, v| {
            let y = t.softmax(v[0]);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_tensor(&mut rng, &[2 * 2, 3, 3]);
        let mask = AttentionMask {
            batch: 2,
            heads: 2,
            queries: 3,
            keys: 3,
            key_valid: vec![true, true, false, true, true, true],
            causal: true,
        };
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let y = t.masked_softmax(x, mask.clone()).unwrap();
        let yv = t.value(y).data();
        // batch 0, head 0, query 2: key 2 is padding.
        assert_eq!(yv[2 * 3 + 2], 0.0);
        // causal: query 0 sees only key 0.
        assert_eq!(yv[0], 1.0);
        assert_gradcheck(&[x0], move |t, v| {
            let y = t.masked_softmax(v[0], mask.clone())?;
            weighted_sum(t, y)
        });
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros(&[1, 100]));
        let ce = t.softmax_cross_entropy(l, &[Some(17)]).unwrap();
        assert!((t.value(ce).data()[0] - 100f64.ln()).abs() < 1e-12);

        let mut sat = vec![0.0; 10];
        sat[3] = 1000.0;
        let l = t.leaf(Tensor::new(vec![1, 10], sat).unwrap());
        let ce = t.softmax_cross_entropy(l, &[Some(3)]).unwrap();
        assert!(t.value(ce).data()[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::full(&[2, 4], 0.3));
        let ce = t.softmax_cross_entropy(l, &[None, None]).unwrap();
        t.backward(ce).unwrap();
        assert_eq!(t.value(ce).data()[0], 0.0);
        assert!(t.grad_tensor(l).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_gradcheck_with_ignored_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_tensor(&mut rng, &[3, 5]);
        assert_gradcheck(&[x0.clone()], |t, v| {
            t.softmax_cross_entropy(v[0], &[Some(1), Some(4), Some(0)])
        });
        let mut t = Tape::new();
        let x = t.leaf(x0);
        let ce = t.softmax_cross_entropy(x, &[Some(1), None, Some(0)]).unwrap();
        t.backward(ce).unwrap();
        assert!(t.grad_tensor(x).row(1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn layer_norm_examples_and_gradcheck() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let c = t.leaf(Tensor::full(&[1, 2], 3.0));
        let y = t.layer_norm(c, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, -1.0]]));
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, -1.0]);

        let bad = t.constant(Tensor::zeros(&[3]));
        assert!(t.layer_norm(x, bad, b, 1e-5).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ps = vec![
            rand_tensor(&mut rng, &[4, 8]),
            rand_tensor(&mut rng, &[8]),
            rand_tensor(&mut rng, &[8]),
        ];
        assert_gradcheck(&ps, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y)
        });
    }

    #[test]
    fn gradcheck_embedding_heads_select_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ps = vec![rand_tensor(&mut rng, &[6, 4])];
        assert_gradcheck(&ps, |t, v| {
            let e = t.embedding(v[0], &[0, 3, 3, 5, 1, 2])?;
            let s = t.split_heads(e, 2, 3, 2)?;
            let m = t.merge_heads(s, 2, 2)?;
            let r = t.select_rows(m, &[0, 2, 2, 5])?;
            let q = t.reshape(r, &[2, 8])?;
            weighted_sum(t, q)
        });
    }

    #[test]
    fn split_then_merge_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_tensor(&mut rng, &[2 * 5, 6]);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let s = t.split_heads(x, 2, 5, 3).unwrap();
        let m = t.merge_heads(s, 2, 3).unwrap();
        assert_eq!(t.value(m), &x0);
    }

    #[test]
    fn backward_basic_examples() {
        let x0 = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad_tensor(x).data(), &[1.0; 4]);

        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        let want: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(t.grad_tensor(x).data(), &want[..]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zeroes_unreachable() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[3]));
        let unused = t.leaf(Tensor::full(&[2], 1.0));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.grad(unused).is_none());
        assert_eq!(t.grad_tensor(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ps = vec![rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[6, 6])];
        let run = || {
            let mut t = Tape::new();
            let a = t.leaf(ps[0].clone());
            let b = t.leaf(ps[1].clone());
            let c = t.matmul(a, b, false).unwrap();
            let d = t.gelu(c);
            let e = t.softmax(d);
            let l = t.softmax_cross_entropy(e, &[Some(0), Some(1), None, Some(5)]).unwrap();
            t.backward(l).unwrap();
            (t.grad_tensor(a), t.grad_tensor(b))
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.data().iter().zip(b2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
