use super::kernels::{self, ConvGeometry};
use super::{gemm, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Silu(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MulChannel(Var, Var),
    SumChannels(Var),
    BroadcastChannels(Var),
    Reshape(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool2 {
        x: Var,
        arg: Vec<usize>,
    },
    AvgPool2(Var),
    Resize(Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    ChannelStandardize {
        x: Var,
        inv_std: Vec<T>,
    },
    GlobalAvgPool(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape
/// order is already a topological order for the backward sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// `None` when the node does not depend on any gradient-carrying leaf.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "elementwise op on mismatched shapes");
        let shape = sa.to_vec();
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::new(&shape, data), op, ng)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let ng = self.any_grad(&[a]);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    /// `ln sigmoid(x)`, finite for every finite `x`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), |x| x.min(T::zero()) - (T::one() + (-x.abs()).exp()).ln())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s: T = d.iter().copied().sum();
        let m = s / T::of(d.len() as f64);
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// `op(a) * op(b)` for 2-D operands; `ta`/`tb` transpose the operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects 2-D operands");
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dimensions differ: {sa:?} x {sb:?}");
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), ta, self.data(b), tb, &mut out, false);
        let ng = self.any_grad(&[a, b]);
        self.push(
            Tensor::new(&[m, n], out),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            ng,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b));
        assert!(sx.len() == 2 && sb == [sx[1]], "row bias shape mismatch");
        let n = sx[1];
        let bias = self.data(b).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let ng = self.any_grad(&[x, b]);
        self.push(Tensor::new(&sx, data), Op::AddRowBias(x, b), ng)
    }

    /// `[C, ...] + [C]` broadcast over trailing axes.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(self.shape(b), [sx[0]], "channel bias shape mismatch");
        let per = self.value(x).len() / sx[0];
        let bias = self.data(b).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i / per])
            .collect();
        let ng = self.any_grad(&[x, b]);
        self.push(Tensor::new(&sx, data), Op::AddChannelBias(x, b), ng)
    }

    /// `[C, ...] * [C]` broadcast over trailing axes.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(self.shape(s), [sx[0]], "channel scale shape mismatch");
        let per = self.value(x).len() / sx[0];
        let sc = self.data(s).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sc[i / per])
            .collect();
        let ng = self.any_grad(&[x, s]);
        self.push(Tensor::new(&sx, data), Op::MulChannel(x, s), ng)
    }

    /// Sums over axis 0: `[C, ...] -> [...]`.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let c = sx[0];
        let rest: Vec<usize> = if sx.len() > 1 { sx[1..].to_vec() } else { vec![1] };
        let per = self.value(x).len() / c;
        let d = self.data(x);
        let mut out = vec![T::zero(); per];
        for ch in 0..c {
            for (o, &v) in out.iter_mut().zip(&d[ch * per..(ch + 1) * per]) {
                *o = *o + v;
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(&rest, out), Op::SumChannels(x), ng)
    }

    /// Repeats `x` along a new leading axis of length `channels`.
    pub fn broadcast_channels(&mut self, x: Var, channels: usize) -> Var {
        let mut shape = vec![channels];
        shape.extend_from_slice(self.shape(x));
        let d = self.data(x);
        let mut out = Vec::with_capacity(d.len() * channels);
        for _ in 0..channels {
            out.extend_from_slice(d);
        }
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(&shape, out), Op::BroadcastChannels(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "transpose expects 2-D");
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(&[c, r], out), Op::Transpose(x), ng)
    }

    /// Softmax along the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "softmax_rows expects 2-D");
        let n = s[1];
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(&s, out), Op::SoftmaxRows(x), ng)
    }

    /// 2-D convolution of `x: [Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 3, "conv2d input must be [C, H, W], got {sx:?}");
        assert_eq!(sw.len(), 4, "conv2d weight must be [Cout, Cin, k, k]");
        assert_eq!(sx[0], sw[1], "conv2d channel mismatch: input {sx:?}, weight {sw:?}");
        assert_eq!(sw[2], sw[3], "conv2d expects square kernels");
        let geom = ConvGeometry {
            in_channels: sx[0],
            height: sx[1],
            width: sx[2],
            kernel: sw[2],
            stride,
            padding,
            dilation,
        };
        let cout = sw[0];
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let n = ho * wo;
        let kk = geom.patch_len();
        let mut out = vec![T::zero(); cout * n];
        if geom.is_pointwise() {
            gemm(cout, kk, n, self.data(w), false, self.data(x), false, &mut out, false);
        } else {
            let mut cols = vec![T::zero(); kk * n];
            kernels::im2col(self.data(x), &geom, &mut cols);
            gemm(cout, kk, n, self.data(w), false, &cols, false, &mut out, false);
        }
        if let Some(b) = b {
            assert_eq!(self.shape(b), [cout], "conv2d bias shape");
            let bias = self.data(b);
            for (c, plane) in out.chunks_mut(n).enumerate() {
                plane.iter_mut().for_each(|v| *v = *v + bias[c]);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any_grad(&deps);
        self.push(
            Tensor::new(&[cout, ho, wo], out),
            Op::Conv2d { x, w, b, geom },
            ng,
        )
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[1] % 2 == 0 && s[2] % 2 == 0, "max_pool2 needs even [C, H, W]");
        let (out, arg) = kernels::max_pool2(self.data(x), s[0], s[1], s[2]);
        let ng = self.any_grad(&[x]);
        self.push(
            Tensor::new(&[s[0], s[1] / 2, s[2] / 2], out),
            Op::MaxPool2 { x, arg },
            ng,
        )
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[1] % 2 == 0 && s[2] % 2 == 0, "avg_pool2 needs even [C, H, W]");
        let out = kernels::avg_pool2(self.data(x), s[0], s[1], s[2]);
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(&[s[0], s[1] / 2, s[2] / 2], out), Op::AvgPool2(x), ng)
    }

    /// Bilinear resampling (half-pixel centres) of `[C, H, W]` to `[C, oh, ow]`.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "resize expects [C, H, W]");
        if s[1] == oh && s[2] == ow {
            return x;
        }
        let out = kernels::resize_bilinear(self.data(x), s[0], (s[1], s[2]), (oh, ow));
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(&[s[0], oh, ow], out), Op::Resize(x), ng)
    }

    /// Concatenation along axis 0; trailing shapes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(&s[1..], tail.as_slice(), "concat trailing shape mismatch");
            lead += s[0];
            data.extend_from_slice(self.data(x));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = self.any_grad(xs);
        self.push(Tensor::new(&shape, data), Op::Concat(xs.to_vec()), ng)
    }

    /// Slice `[start, start + len)` along axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[0], "narrow out of range");
        let per: usize = s[1..].iter().product();
        let data = self.data(x)[start * per..(start + len) * per].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(&shape, data), Op::Narrow { x, start }, ng)
    }

    /// Standardises each position across axis 0 (zero mean, unit variance
    /// over channels).
    pub fn channel_standardize(&mut self, x: Var, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let c = s[0];
        let per = self.value(x).len() / c;
        let d = self.data(x);
        let inv_c = T::of(1.0 / c as f64);
        let eps = T::of(eps);
        let mut out = vec![T::zero(); d.len()];
        let mut inv_std = vec![T::zero(); per];
        for p in 0..per {
            let mut mu = T::zero();
            for ch in 0..c {
                mu = mu + d[ch * per + p];
            }
            mu = mu * inv_c;
            let mut var = T::zero();
            for ch in 0..c {
                let z = d[ch * per + p] - mu;
                var = var + z * z;
            }
            var = var * inv_c;
            let is = T::one() / (var + eps).sqrt();
            inv_std[p] = is;
            for ch in 0..c {
                out[ch * per + p] = (d[ch * per + p] - mu) * is;
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(&s, out), Op::ChannelStandardize { x, inv_std }, ng)
    }

    /// `[C, H, W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let c = s[0];
        let per = self.value(x).len() / c;
        let inv = T::of(1.0 / per as f64);
        let out = self
            .data(x)
            .chunks(per)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(&[c], out), Op::GlobalAvgPool(x), ng)
    }

    /// Selects rows of a 2-D table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let s = self.shape(table).to_vec();
        assert_eq!(s.len(), 2, "gather_rows expects a 2-D table");
        let d = s[1];
        let src = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < s[0], "gather index {i} out of range {}", s[0]);
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.any_grad(&[table]);
        self.push(
            Tensor::new(&[idx.len(), d], out),
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`, seeded with `d loss = 1`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Grads { grads };
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, T::one()));
                self.acc(grads, *b, |d| axpy(d, g, T::one()));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, T::one()));
                self.acc(grads, *b, |d| axpy(d, g, -T::one()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vb) {
                        *d = *d + g * v;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(va) {
                        *d = *d + g * v;
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = self.data(*b);
                self.acc(grads, *a, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vb) {
                        *d = *d + g / v;
                    }
                });
                // d(a/b)/db = -y / b
                self.acc(grads, *b, |d| {
                    for (((d, &g), &v), &y) in d.iter_mut().zip(g).zip(vb).zip(y) {
                        *d = *d - g * y / v;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| axpy(d, g, *c)),
            Op::AddScalar(a) => self.acc(grads, *a, |d| axpy(d, g, T::one())),
            Op::Sigmoid(a) => self.acc(grads, *a, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                    *d = *d + g * y * (T::one() - y);
                }
            }),
            Op::Silu(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(x);
                        *d = *d + g * s * (T::one() + x * (T::one() - s));
                    }
                })
            }
            Op::LogSigmoid(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d = *d + g * sigmoid(-x);
                    }
                })
            }
            Op::Log(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d = *d + g / x;
                    }
                })
            }
            Op::Exp(a) => self.acc(grads, *a, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                    *d = *d + g * y;
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let x = self.data(*a);
                self.acc(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        if x >= *lo && x <= *hi {
                            *d = *d + g;
                        }
                    }
                })
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(a) => {
                let n = T::of(self.value(*a).len() as f64);
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d = *d + g[0] / n))
            }
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    if !*ta {
                        // dA = dC * op(B)^T
                        gemm(m, n, k, g, false, vb, !*tb, d, true);
                    } else {
                        // stored A^T: d = op(B) * dC^T
                        gemm(k, n, m, vb, *tb, g, true, d, true);
                    }
                });
                self.acc(grads, *b, |d| {
                    if !*tb {
                        // dB = op(A)^T * dC
                        gemm(k, m, n, va, !*ta, g, false, d, true);
                    } else {
                        // stored B^T: d = dC^T * op(A)
                        gemm(n, m, k, g, true, va, *ta, d, true);
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let n = self.shape(*b)[0];
                self.acc(grads, *x, |d| axpy(d, g, T::one()));
                self.acc(grads, *b, |d| {
                    for row in g.chunks(n) {
                        axpy(d, row, T::one());
                    }
                });
            }
            Op::AddChannelBias(x, b) => {
                let per = g.len() / self.shape(*b)[0];
                self.acc(grads, *x, |d| axpy(d, g, T::one()));
                self.acc(grads, *b, |d| {
                    for (dc, plane) in d.iter_mut().zip(g.chunks(per)) {
                        *dc = *dc + plane.iter().copied().sum();
                    }
                });
            }
            Op::MulChannel(x, s) => {
                let per = g.len() / self.shape(*s)[0];
                let (vx, vs) = (self.data(*x), self.data(*s));
                self.acc(grads, *x, |d| {
                    for (i, (d, &g)) in d.iter_mut().zip(g).enumerate() {
                        *d = *d + g * vs[i / per];
                    }
                });
                self.acc(grads, *s, |d| {
                    for (c, dc) in d.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for p in c * per..(c + 1) * per {
                            acc = acc + g[p] * vx[p];
                        }
                        *dc = *dc + acc;
                    }
                });
            }
            Op::SumChannels(x) => self.acc(grads, *x, |d| {
                for plane in d.chunks_mut(g.len()) {
                    axpy(plane, g, T::one());
                }
            }),
            Op::BroadcastChannels(x) => self.acc(grads, *x, |d| {
                for plane in g.chunks(d.len()) {
                    axpy(d, plane, T::one());
                }
            }),
            Op::Reshape(x) => self.acc(grads, *x, |d| axpy(d, g, T::one())),
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                self.acc(grads, *x, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = d[i * c + j] + g[j * r + i];
                        }
                    }
                })
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.shape()[1];
                self.acc(grads, *x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + y * (g - dot);
                        }
                    }
                })
            }
            Op::Conv2d { x, w, b, geom } => {
                let cout = node.value.shape()[0];
                let n = geom.out_height() * geom.out_width();
                let kk = geom.patch_len();
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                let cols_owned;
                let cols: &[T] = if geom.is_pointwise() {
                    self.data(*x)
                } else if need_w {
                    let mut c = vec![T::zero(); kk * n];
                    kernels::im2col(self.data(*x), geom, &mut c);
                    cols_owned = c;
                    &cols_owned
                } else {
                    &[]
                };
                if need_w {
                    self.acc(grads, *w, |d| gemm(cout, n, kk, g, false, cols, true, d, true));
                }
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for (dc, plane) in d.iter_mut().zip(g.chunks(n)) {
                            *dc = *dc + plane.iter().copied().sum();
                        }
                    });
                }
                if need_x {
                    let vw = self.data(*w);
                    if geom.is_pointwise() {
                        self.acc(grads, *x, |d| gemm(kk, cout, n, vw, true, g, false, d, true));
                    } else {
                        let mut dcols = vec![T::zero(); kk * n];
                        gemm(kk, cout, n, vw, true, g, false, &mut dcols, false);
                        self.acc(grads, *x, |d| kernels::col2im_add(&dcols, geom, d));
                    }
                }
            }
            Op::MaxPool2 { x, arg } => self.acc(grads, *x, |d| {
                for (&gi, &a) in g.iter().zip(arg) {
                    d[a] = d[a] + gi;
                }
            }),
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let q = T::of(0.25);
                self.acc(grads, *x, |d| {
                    for c in 0..s[0] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(c * oh + oy) * ow + ox] * q;
                                let i = c * h * w + 2 * oy * w + 2 * ox;
                                for j in [i, i + 1, i + w, i + w + 1] {
                                    d[j] = d[j] + gv;
                                }
                            }
                        }
                    }
                })
            }
            Op::Resize(x) => {
                let s = self.shape(*x).to_vec();
                let o = node.value.shape();
                let (oh, ow) = (o[1], o[2]);
                self.acc(grads, *x, |d| {
                    kernels::resize_bilinear_backward(g, s[0], (s[1], s[2]), (oh, ow), d)
                })
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for x in xs {
                    let len = self.value(*x).len();
                    let part = &g[off..off + len];
                    self.acc(grads, *x, |d| axpy(d, part, T::one()));
                    off += len;
                }
            }
            Op::Narrow { x, start } => {
                let per: usize = self.shape(*x)[1..].iter().product();
                let off = start * per;
                self.acc(grads, *x, |d| axpy(&mut d[off..off + g.len()], g, T::one()))
            }
            Op::ChannelStandardize { x, inv_std } => {
                let c = node.value.shape()[0];
                let per = g.len() / c;
                let inv_c = T::of(1.0 / c as f64);
                self.acc(grads, *x, |d| {
                    for p in 0..per {
                        let mut mg = T::zero();
                        let mut mgy = T::zero();
                        for ch in 0..c {
                            mg = mg + g[ch * per + p];
                            mgy = mgy + g[ch * per + p] * y[ch * per + p];
                        }
                        mg = mg * inv_c;
                        mgy = mgy * inv_c;
                        for ch in 0..c {
                            let j = ch * per + p;
                            d[j] = d[j] + inv_std[p] * (g[j] - mg - y[j] * mgy);
                        }
                    }
                })
            }
            Op::GlobalAvgPool(x) => {
                let per = self.value(*x).len() / g.len();
                let inv = T::of(1.0 / per as f64);
                self.acc(grads, *x, |d| {
                    for (plane, &gc) in d.chunks_mut(per).zip(g) {
                        plane.iter_mut().for_each(|v| *v = *v + gc * inv);
                    }
                })
            }
            Op::GatherRows { table, idx } => {
                let dim = self.shape(*table)[1];
                self.acc(grads, *table, |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut d[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim], T::one());
                    }
                })
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(buf);
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn axpy<T: Scalar>(d: &mut [T], g: &[T], a: T) {
    debug_assert_eq!(d.len(), g.len());
    for (d, &g) in d.iter_mut().zip(g) {
        *d = *d + a * g;
    }
}
