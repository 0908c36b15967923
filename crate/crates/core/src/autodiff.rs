//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node to a [`Graph`] holding the forward value and
//! enough information to push cotangents back to its inputs. Nodes only refer
//! to earlier nodes, so walking the tape backwards is a valid reverse
//! topological order.
//!
//! Fused losses (dice, cross-entropy, Gaussian KL) compute their local
//! gradient during the forward pass and cache it on the node; backward just
//! scales it by the incoming cotangent.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding mode for [`Graph::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` so the output keeps the input size.
    Same,
    /// No padding.
    Valid,
}

/// Probability floor used by the cross-entropy loss.
pub const CE_PROB_FLOOR: f64 = 1e-7;

/// Volume floor in the generalized dice class weights.
pub const DICE_EPS: f64 = 1e-6;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        pad: usize,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    Softmax(Var),
    GatherBatch {
        input: Var,
        index: Vec<usize>,
    },
    Stack(Vec<Var>),
    BroadcastSpatial(Var),
    LowerCholesky(Var),
    MatVec {
        matrix: Var,
        vector: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Vec<Var>),
    /// Scalar loss whose gradients w.r.t. the listed inputs were computed
    /// during the forward pass.
    Fused(Vec<(Var, Tensor<T>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulated cotangents, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Positive map applied to the Cholesky diagonal, `ln(1 + e^x)`.
pub fn positive_diag(x: f64) -> f64 {
    softplus(x)
}

/// Inverse of [`positive_diag`]; `y` must be positive.
pub fn positive_diag_inv(y: f64) -> f64 {
    // ln(e^y - 1) computed stably for large y
    y + (-(-y).exp_m1()).ln()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// 2-d cross-correlation (no kernel flip) with per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let (n, cin, h, w) = x.dims4("conv2d")?;
        let (cout, kcin, kh, kw) = k.dims4("conv2d")?;
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel spatial dims must be odd, got {kh}x{kw}"),
            ));
        }
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias shape {:?} does not match {cout} output channels",
                    b.shape()
                ),
            ));
        }
        let pad = match padding {
            Padding::Same => {
                if kh != kw {
                    return Err(Error::shape("conv2d", "same padding needs a square kernel"));
                }
                kh / 2
            }
            Padding::Valid => 0,
        };
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        };
        let plane = geom.oh * geom.ow;
        let rows = geom.rows();
        let mut out = vec![T::zero(); n * cout * plane];
        let mut col = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * plane]
        };
        let xd = x.data();
        for i in 0..n {
            let xi = &xd[i * cin * h * w..(i + 1) * cin * h * w];
            let src: &[T] = if geom.is_pointwise() {
                xi
            } else {
                geom.im2col(xi, &mut col);
                &col
            };
            let oi = &mut out[i * cout * plane..(i + 1) * cout * plane];
            T::gemm(
                cout,
                rows,
                plane,
                k.data(),
                rows as isize,
                1,
                src,
                plane as isize,
                1,
                T::zero(),
                oi,
                plane as isize,
                1,
            );
            for (co, chunk) in oi.chunks_mut(plane).enumerate() {
                let bv = b.data()[co];
                for v in chunk {
                    *v = *v + bv;
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        let value = Tensor::from_parts(vec![n, cout, geom.oh, geom.ow], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                pad,
            },
            rg,
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// 2x2 max pooling with stride 2. Ties go to the first maximal element in
    /// row-major order within the window.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "max_pool2",
                format!("spatial dims {h}x{w} must be even"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let d = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, Op::MaxPool2 { input: x, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4("upsample_nearest2x")?;
        let d = xv.data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                let src = &d[plane * h * w + (y / 2) * w..][..w];
                let dst = &mut out[plane * oh * ow + y * ow..][..ow];
                for (xo, v) in dst.iter_mut().enumerate() {
                    *v = src[xo / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::Upsample2(x),
            rg,
        ))
    }

    /// Concatenates along the channel axis: channels of `a`, then `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, ca, h, w) = av.dims4("concat_channels")?;
        let (nb, cb, hb, wb) = bv.dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("batch/spatial dims differ: [{n},_,{h},{w}] vs [{nb},_,{hb},{wb}]"),
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&av.data()[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&bv.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![n, ca + cb, h, w], out),
            Op::Concat(a, b),
            rg,
        ))
    }

    /// Per-pixel softmax over the channel axis, stabilized by max subtraction.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let xv = self.value(logits);
        let (n, c, h, w) = xv.dims4("softmax_channels")?;
        if c < 2 {
            return Err(Error::shape(
                "softmax_channels",
                format!("need >= 2 channels, got {c}"),
            ));
        }
        if !xv.is_finite() {
            return Err(Error::NonFinite("softmax_channels input".into()));
        }
        let plane = h * w;
        let d = xv.data();
        let mut out = vec![T::zero(); d.len()];
        let mut buf = vec![0f64; c];
        for i in 0..n {
            let base = i * c * plane;
            for p in 0..plane {
                let mut mx = f64::NEG_INFINITY;
                for (ch, b) in buf.iter_mut().enumerate() {
                    *b = d[base + ch * plane + p].as_f64();
                    mx = mx.max(*b);
                }
                let mut total = 0.0;
                for b in buf.iter_mut() {
                    *b = (*b - mx).exp();
                    total += *b;
                }
                for (ch, b) in buf.iter().enumerate() {
                    out[base + ch * plane + p] = T::from_f64(b / total);
                }
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::Softmax(logits),
            rg,
        ))
    }

    /// Selects (and possibly repeats) batch elements: `out[j] = x[index[j]]`.
    pub fn gather_batch(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.shape()[0];
        if index.is_empty() {
            return Err(Error::InvalidArgument(
                "gather_batch needs at least one index".into(),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather_batch",
                format!("index {bad} out of range for batch of {n}"),
            ));
        }
        let per = xv.numel() / n;
        let mut out = Vec::with_capacity(per * index.len());
        for &i in index {
            out.extend_from_slice(&xv.data()[i * per..(i + 1) * per]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = index.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherBatch {
                input: x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks equally sized vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack needs at least one row".into()))?;
        let d = self.value(*first).numel();
        let mut out = Vec::with_capacity(d * rows.len());
        for &r in rows {
            let v = self.value(r);
            if v.numel() != d {
                return Err(Error::shape(
                    "stack",
                    format!("row lengths differ: {} vs {d}", v.numel()),
                ));
            }
            out.extend_from_slice(v.data());
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), d], out),
            Op::Stack(rows.to_vec()),
            rg,
        ))
    }

    /// Tiles an `[N, D]` matrix to an `[N, D, H, W]` feature map.
    pub fn broadcast_spatial(&mut self, z: Var, h: usize, w: usize) -> Result<Var> {
        let zv = self.value(z);
        let (n, d) = match zv.shape() {
            &[n, d] => (n, d),
            s => {
                return Err(Error::shape(
                    "broadcast_spatial",
                    format!("expected [N,D], got {s:?}"),
                ))
            }
        };
        let plane = h * w;
        let mut out = Vec::with_capacity(n * d * plane);
        for &v in zv.data() {
            out.extend(std::iter::repeat(v).take(plane));
        }
        let rg = self.rg(z);
        Ok(self.push(
            Tensor::from_parts(vec![n, d, h, w], out),
            Op::BroadcastSpatial(z),
            rg,
        ))
    }

    /// Maps an unconstrained `[D, D]` matrix to a lower-triangular factor:
    /// entries above the diagonal are zeroed and the diagonal goes through
    /// [`positive_diag`].
    pub fn lower_cholesky(&mut self, raw: Var) -> Result<Var> {
        let rv = self.value(raw);
        let d = match rv.shape() {
            &[a, b] if a == b => a,
            s => {
                return Err(Error::shape(
                    "lower_cholesky",
                    format!("expected a square matrix, got {s:?}"),
                ))
            }
        };
        let mut out = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..i {
                out[i * d + j] = rv.data()[i * d + j];
            }
            out[i * d + i] = T::from_f64(positive_diag(rv.data()[i * d + i].as_f64()));
        }
        let rg = self.rg(raw);
        Ok(self.push(
            Tensor::from_parts(vec![d, d], out),
            Op::LowerCholesky(raw),
            rg,
        ))
    }

    /// Matrix-vector product `[M, K] x [K] -> [M]`.
    pub fn matvec(&mut self, matrix: Var, vector: Var) -> Result<Var> {
        let a = self.value(matrix);
        let x = self.value(vector);
        let (m, k) = match a.shape() {
            &[m, k] => (m, k),
            s => {
                return Err(Error::shape(
                    "matvec",
                    format!("expected a matrix, got {s:?}"),
                ))
            }
        };
        if x.numel() != k {
            return Err(Error::shape(
                "matvec",
                format!("matrix has {k} columns, vector has {} entries", x.numel()),
            ));
        }
        let out: Vec<T> = (0..m)
            .map(|i| {
                let row = &a.data()[i * k..(i + 1) * k];
                T::from_f64(
                    row.iter()
                        .zip(x.data())
                        .map(|(p, q)| p.as_f64() * q.as_f64())
                        .sum(),
                )
            })
            .collect();
        let rg = self.rg(matrix) || self.rg(vector);
        Ok(self.push(
            Tensor::from_parts(vec![m], out),
            Op::MatVec { matrix, vector },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let value = self.value(a).map(|v| v * f);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Sum of all elements (accumulated in f64).
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_f64();
        let rg = self.rg(a);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(a), rg)
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("mean of an empty list".into()));
        }
        let mut s = 0.0;
        for &x in xs {
            let v = self.value(x);
            if v.numel() != 1 {
                return Err(Error::shape(
                    "mean",
                    format!("expected scalars, got {:?}", v.shape()),
                ));
            }
            s += v.item().as_f64();
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::scalar(T::from_f64(s / xs.len() as f64)),
            Op::Mean(xs.to_vec()),
            rg,
        ))
    }

    fn fused(&mut self, value: f64, parts: Vec<(Var, Tensor<T>)>) -> Var {
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        self.push(Tensor::scalar(T::from_f64(value)), Op::Fused(parts), rg)
    }

    /// `KL(N(mu, L L^T) || N(0, prior_var * I))` for a mean vector and a
    /// lower-triangular factor with positive diagonal.
    pub fn kl_gaussian(&mut self, mu: Var, chol: Var, prior_var: f64) -> Result<Var> {
        let m = self.value(mu);
        let l = self.value(chol);
        let d = m.numel();
        if l.shape() != [d, d] {
            return Err(Error::shape(
                "kl_gaussian",
                format!("mean has {d} entries but factor is {:?}", l.shape()),
            ));
        }
        let (value, gm, gl) = kl_with_grads(
            &m.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            &l.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            prior_var,
        )?;
        let gm = Tensor::from_parts(vec![d], gm.into_iter().map(T::from_f64).collect());
        let gl = Tensor::from_parts(vec![d, d], gl.into_iter().map(T::from_f64).collect());
        Ok(self.fused(value, vec![(mu, gm), (chol, gl)]))
    }

    /// Generalized dice loss per batch element, averaged over the batch.
    ///
    /// `target` must be one-hot per pixel; an all-zero pixel marks an
    /// unannotated pixel and is excluded from every sum. Class weights are
    /// `1 / (eps + volume^2)` for classes present in the element's target;
    /// absent classes get weight zero. An element without any annotated
    /// pixel contributes zero loss.
    pub fn generalized_dice(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(probs);
        let (n, c, h, w) = p.dims4("generalized_dice")?;
        if target.shape() != p.shape() {
            return Err(Error::shape(
                "generalized_dice",
                format!("probs {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let valid = one_hot_validity(target, "generalized_dice")?;
        let plane = h * w;
        let mut grad = vec![T::zero(); p.numel()];
        let mut total = 0.0;
        for i in 0..n {
            let vmask = &valid[i * plane..(i + 1) * plane];
            let mut inter = vec![0f64; c];
            let mut vol_t = vec![0f64; c];
            let mut vol_p = vec![0f64; c];
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for (px, &ok) in vmask.iter().enumerate() {
                    if ok {
                        let pv = p.data()[off + px].as_f64();
                        let tv = target.data()[off + px].as_f64();
                        inter[ch] += pv * tv;
                        vol_t[ch] += tv;
                        vol_p[ch] += pv;
                    }
                }
            }
            let Some(weights) = dice_weights(&vol_t) else {
                continue;
            };
            let num: f64 = (0..c).map(|ch| weights[ch] * inter[ch]).sum();
            let den: f64 = (0..c).map(|ch| weights[ch] * (vol_p[ch] + vol_t[ch])).sum();
            total += 1.0 - 2.0 * num / den;
            let scale = n as f64 * den * den;
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let wc = weights[ch];
                if wc == 0.0 {
                    continue;
                }
                for (px, &ok) in vmask.iter().enumerate() {
                    if ok {
                        let tv = target.data()[off + px].as_f64();
                        grad[off + px] = T::from_f64(-2.0 * wc * (tv * den - num) / scale);
                    }
                }
            }
        }
        let grad = Tensor::from_parts(p.shape().to_vec(), grad);
        Ok(self.fused(total / n as f64, vec![(probs, grad)]))
    }

    /// Mean over annotated pixels of `-ln max(p_true, 1e-7)`.
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(probs);
        let (n, c, h, w) = p.dims4("cross_entropy")?;
        if target.shape() != p.shape() {
            return Err(Error::shape(
                "cross_entropy",
                format!("probs {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let valid = one_hot_validity(target, "cross_entropy")?;
        let count = valid.iter().filter(|&&v| v).count();
        let plane = h * w;
        let mut grad = vec![T::zero(); p.numel()];
        let mut total = 0.0;
        if count > 0 {
            for i in 0..n {
                for px in 0..plane {
                    if !valid[i * plane + px] {
                        continue;
                    }
                    for ch in 0..c {
                        let idx = (i * c + ch) * plane + px;
                        if target.data()[idx] > T::zero() {
                            let pv = p.data()[idx].as_f64();
                            if pv > CE_PROB_FLOOR {
                                total -= pv.ln();
                                grad[idx] = T::from_f64(-1.0 / (pv * count as f64));
                            } else {
                                total -= CE_PROB_FLOOR.ln();
                            }
                        }
                    }
                }
            }
            total /= count as f64;
        }
        let grad = Tensor::from_parts(p.shape().to_vec(), grad);
        Ok(self.fused(total, vec![(probs, grad)]))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let seed = self.value(loss);
        if seed.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(seed.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                pad,
            } => {
                let (dx, dk, db) = self.conv2d_backward(*input, *kernel, *pad, g);
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *kernel, dk);
                self.accumulate(grads, *bias, db);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src as usize] = d[src as usize] + gv;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Upsample2(x) => {
                let shape = self.value(*x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = Tensor::zeros(&shape);
                let d = dx.data_mut();
                let gd = g.data();
                for plane in 0..shape[0] * shape[1] {
                    for y in 0..oh {
                        let src = &gd[plane * oh * ow + y * ow..][..ow];
                        let dst = &mut d[plane * h * w + (y / 2) * w..][..w];
                        for (xo, &gv) in src.iter().enumerate() {
                            dst[xo / 2] = dst[xo / 2] + gv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let plane = sa[2] * sa[3];
                let (ca, cb) = (sa[1], sb[1]);
                let mut da = Vec::with_capacity(sa.iter().product());
                let mut db = Vec::with_capacity(sb.iter().product());
                for i in 0..sa[0] {
                    let base = i * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[base..base + ca * plane]);
                    db.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(sa, da));
                self.accumulate(grads, *b, Tensor::from_parts(sb, db));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (n, c, h, w) = y.dims4("softmax_channels")?;
                let plane = h * w;
                let mut dx = vec![T::zero(); y.numel()];
                for i in 0..n {
                    let base = i * c * plane;
                    for p in 0..plane {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            let idx = base + ch * plane + p;
                            dot += y.data()[idx].as_f64() * g.data()[idx].as_f64();
                        }
                        for ch in 0..c {
                            let idx = base + ch * plane + p;
                            let yv = y.data()[idx].as_f64();
                            dx[idx] = T::from_f64(yv * (g.data()[idx].as_f64() - dot));
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::GatherBatch { input, index } => {
                let shape = self.value(*input).shape().to_vec();
                let per: usize = shape[1..].iter().product();
                let mut dx = Tensor::zeros(&shape);
                let d = dx.data_mut();
                for (j, &i) in index.iter().enumerate() {
                    let src = &g.data()[j * per..(j + 1) * per];
                    for (a, &b) in d[i * per..(i + 1) * per].iter_mut().zip(src) {
                        *a = *a + b;
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Stack(rows) => {
                let d = g.shape()[1];
                for (i, &r) in rows.iter().enumerate() {
                    let shape = self.value(r).shape().to_vec();
                    let part = g.data()[i * d..(i + 1) * d].to_vec();
                    self.accumulate(grads, r, Tensor::from_parts(shape, part));
                }
            }
            Op::BroadcastSpatial(z) => {
                let shape = self.value(*z).shape().to_vec();
                let plane = g.shape()[2] * g.shape()[3];
                let data = g
                    .data()
                    .chunks(plane)
                    .map(|c| T::from_f64(c.iter().map(|v| v.as_f64()).sum()))
                    .collect();
                self.accumulate(grads, *z, Tensor::from_parts(shape, data));
            }
            Op::LowerCholesky(raw) => {
                let rv = self.value(*raw);
                let d = rv.shape()[0];
                let mut dr = vec![T::zero(); d * d];
                for i in 0..d {
                    for j in 0..i {
                        dr[i * d + j] = g.data()[i * d + j];
                    }
                    let s = sigmoid(rv.data()[i * d + i].as_f64());
                    dr[i * d + i] = T::from_f64(g.data()[i * d + i].as_f64() * s);
                }
                self.accumulate(grads, *raw, Tensor::from_parts(vec![d, d], dr));
            }
            Op::MatVec { matrix, vector } => {
                let a = self.value(*matrix);
                let x = self.value(*vector);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let mut da = vec![T::zero(); m * k];
                let mut dxv = vec![0f64; k];
                for i in 0..m {
                    let gi = g.data()[i];
                    for j in 0..k {
                        da[i * k + j] = gi * x.data()[j];
                        dxv[j] += a.data()[i * k + j].as_f64() * gi.as_f64();
                    }
                }
                self.accumulate(grads, *matrix, Tensor::from_parts(vec![m, k], da));
                let dx = dxv.into_iter().map(T::from_f64).collect();
                self.accumulate(grads, *vector, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = g
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&p, &q)| p * q)
                    .collect();
                let db = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&p, &q)| p * q)
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::Scale(a, f) => {
                let f = T::from_f64(*f);
                self.accumulate(grads, *a, g.map(|v| v * f));
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(xs) => {
                let gv = T::from_f64(g.item().as_f64() / xs.len() as f64);
                for &x in xs {
                    self.accumulate(grads, x, Tensor::scalar(gv));
                }
            }
            Op::Fused(parts) => {
                let gv = g.item();
                for (v, local) in parts {
                    self.accumulate(grads, *v, local.map(|x| x * gv));
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        pad: usize,
        g: &Tensor<T>,
    ) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
        let x = self.value(input);
        let k = self.value(kernel);
        let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            pad,
            oh: g.shape()[2],
            ow: g.shape()[3],
        };
        let plane = geom.oh * geom.ow;
        let rows = geom.rows();
        let want_dx = self.rg(input);
        let mut dk = vec![T::zero(); cout * rows];
        let mut db = vec![T::zero(); cout];
        let mut dx = if want_dx {
            vec![T::zero(); x.numel()]
        } else {
            Vec::new()
        };
        let mut col = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * plane]
        };
        let mut dcol = if geom.is_pointwise() || !want_dx {
            Vec::new()
        } else {
            vec![T::zero(); rows * plane]
        };
        let in_len = cin * h * w;
        for i in 0..n {
            let gi = &g.data()[i * cout * plane..(i + 1) * cout * plane];
            for (co, chunk) in gi.chunks(plane).enumerate() {
                let s: f64 = chunk.iter().map(|v| v.as_f64()).sum();
                db[co] = db[co] + T::from_f64(s);
            }
            let xi = &x.data()[i * in_len..(i + 1) * in_len];
            let src: &[T] = if geom.is_pointwise() {
                xi
            } else {
                geom.im2col(xi, &mut col);
                &col
            };
            // dK += dOut * col^T
            T::gemm(
                cout,
                plane,
                rows,
                gi,
                plane as isize,
                1,
                src,
                1,
                plane as isize,
                T::one(),
                &mut dk,
                rows as isize,
                1,
            );
            if want_dx {
                // dcol = K^T * dOut
                let dst: &mut [T] = if geom.is_pointwise() {
                    &mut dx[i * in_len..(i + 1) * in_len]
                } else {
                    &mut dcol
                };
                T::gemm(
                    rows,
                    cout,
                    plane,
                    k.data(),
                    1,
                    rows as isize,
                    gi,
                    plane as isize,
                    1,
                    T::zero(),
                    dst,
                    plane as isize,
                    1,
                );
                if !geom.is_pointwise() {
                    geom.col2im(&dcol, &mut dx[i * in_len..(i + 1) * in_len]);
                }
            }
        }
        let dx = want_dx.then(|| Tensor::from_parts(x.shape().to_vec(), dx));
        (
            dx,
            Tensor::from_parts(k.shape().to_vec(), dk),
            Tensor::from_parts(vec![cout], db),
        )
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    /// Output columns `ox` whose source column `ox + kj - pad` is in range.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.ow);
        (lo, hi.max(lo))
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let plane = self.oh * self.ow;
        for ci in 0..self.cin {
            let xc = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let iy = (oy + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        let sx = lo + kj - self.pad;
                        out[lo..hi].copy_from_slice(&src[sx..sx + (hi - lo)]);
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let plane = self.oh * self.ow;
        for ci in 0..self.cin {
            let xc = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let iy = (oy + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let s = &src[oy * self.ow + lo..oy * self.ow + hi];
                        let sx = lo + kj - self.pad;
                        let d = &mut xc[iy as usize * self.w + sx..][..hi - lo];
                        for (a, &b) in d.iter_mut().zip(s) {
                            *a = *a + b;
                        }
                    }
                }
            }
        }
    }
}

/// Per-pixel validity of a one-hot target: `true` for one-hot pixels,
/// `false` for all-zero (unannotated) pixels; anything else is an error.
fn one_hot_validity<T: Scalar>(target: &Tensor<T>, op: &'static str) -> Result<Vec<bool>> {
    let (n, c, h, w) = target.dims4(op)?;
    let plane = h * w;
    let mut valid = vec![false; n * plane];
    for i in 0..n {
        for px in 0..plane {
            let mut ones = 0;
            for ch in 0..c {
                let v = target.data()[(i * c + ch) * plane + px];
                if v == T::one() {
                    ones += 1;
                } else if v != T::zero() {
                    return Err(Error::InvalidArgument(format!(
                        "{op}: target is not one-hot (value {v} at batch {i}, class {ch}, pixel {px})"
                    )));
                }
            }
            match ones {
                0 => {}
                1 => valid[i * plane + px] = true,
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "{op}: target is not one-hot ({ones} classes set at batch {i}, pixel {px})"
                    )))
                }
            }
        }
    }
    Ok(valid)
}

/// Class weights for the generalized dice loss, or `None` when the target
/// has no annotated pixel.
fn dice_weights(volumes: &[f64]) -> Option<Vec<f64>> {
    if volumes.iter().all(|&v| v <= 0.0) {
        return None;
    }
    Some(
        volumes
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    1.0 / (DICE_EPS + v * v)
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

/// KL divergence and its gradients (w.r.t. mean and factor) in f64.
pub(crate) fn kl_with_grads(
    mu: &[f64],
    chol: &[f64],
    prior_var: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let d = mu.len();
    let mut trace = 0.0;
    let mut log_det = 0.0;
    let mut gl = vec![0.0; d * d];
    for i in 0..d {
        let lii = chol[i * d + i];
        if !(lii > 0.0) {
            return Err(Error::Numerical(format!(
                "Cholesky diagonal entry {i} is not positive ({lii})"
            )));
        }
        log_det += 2.0 * lii.ln();
        for j in 0..=i {
            let v = chol[i * d + j];
            trace += v * v;
            gl[i * d + j] = v / prior_var;
        }
        gl[i * d + i] -= 1.0 / lii;
    }
    let mm: f64 = mu.iter().map(|v| v * v).sum();
    let df = d as f64;
    let value = 0.5 * (trace / prior_var + mm / prior_var - df + df * prior_var.ln() - log_det);
    let gm = mu.iter().map(|v| v / prior_var).collect();
    Ok((value, gm, gl))
}
