//! Recording tape and reverse-mode adjoints.
//!
//! Each primitive appends one node holding its forward value plus whatever it
//! needs for its adjoint (im2col buffers, normalised activations). `backward`
//! walks the nodes once in reverse; nothing is recomputed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::param::{ParamId, ParamStore};
use crate::numcore::tensor::{Real, Tensor};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        cols: Option<Vec<T>>,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Silu(Var),
    BroadcastChannels(Var),
    NarrowCols {
        x: Var,
        start: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not require
    /// gradients. Reachability is not required: unreachable leaves get zeros.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.shapes.get(v.0)?.clone();
        match &self.grads[v.0] {
            Some(g) => Some(Tensor::new(shape, g.clone()).expect("grad shape")),
            None => None,
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; parameters enter as constants and no
    /// adjoint buffers are kept.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records parameter `id` once per tape; later calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_leaves.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// Multiplies batch item `b` of `x` by the constant `coeffs[b]`.
    pub fn scale_rows(&mut self, x: Var, coeffs: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if coeffs.len() != xv.batch() {
            return Err(Error::shape("scale_rows", xv.shape(), &[coeffs.len()]));
        }
        let per = xv.numel() / xv.batch();
        let mut data = xv.data().to_vec();
        for (chunk, &c) in data.chunks_mut(per).zip(coeffs) {
            chunk.iter_mut().for_each(|v| *v *= c);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::ScaleRows(x, coeffs.to_vec()), ng))
    }

    /// Dense affine map `x·Wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::shape("affine", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("affine bias", ws, bs));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut data = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            data.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            batch,
            inp,
            out,
            T::one(),
            self.value(x).data(),
            (inp as isize, 1),
            self.value(w).data(),
            (1, inp as isize),
            T::one(),
            &mut data,
        );
        let value = Tensor::new(vec![batch, out], data)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Affine { x, w, b }, ng))
    }

    /// 2-D convolution with an odd square kernel, stride 1 and zero padding
    /// that preserves spatial extent. `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`,
    /// `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d bias", ws, bs));
        }
        let geo = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k: ws[2],
        };
        let keep_cols = self.grad_enabled && self.needs(w);
        let (kk, hw) = (geo.kdim(), geo.h * geo.w);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); geo.batch * geo.cout * hw];
        let mut cols_all = if keep_cols {
            vec![T::zero(); geo.batch * kk * hw]
        } else {
            Vec::new()
        };
        let mut scratch = vec![T::zero(); kk * hw];
        for bi in 0..geo.batch {
            let cols: &mut [T] = if keep_cols {
                &mut cols_all[bi * kk * hw..(bi + 1) * kk * hw]
            } else {
                &mut scratch
            };
            im2col(&xv[bi * geo.cin * hw..(bi + 1) * geo.cin * hw], &geo, cols);
            let ob = &mut out[bi * geo.cout * hw..(bi + 1) * geo.cout * hw];
            for (co, row) in ob.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[co]);
            }
            T::gemm(
                geo.cout,
                kk,
                hw,
                T::one(),
                wv,
                (kk as isize, 1),
                cols,
                (hw as isize, 1),
                T::one(),
                ob,
            );
        }
        let value = Tensor::new(vec![geo.batch, geo.cout, geo.h, geo.w], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        let cols = keep_cols.then_some(cols_all);
        Ok(self.push(value, Op::Conv { x, w, b, cols }, ng))
    }

    /// Layer normalisation across the channel axis (axis 1) at every batch item
    /// and spatial position, without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() < 2 {
            return Err(Error::shape("layer_norm", xv.shape(), &[]));
        }
        let (batch, c) = (xv.shape()[0], xv.shape()[1]);
        let s = xv.numel() / (batch * c);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); batch * s];
        let mut mean = vec![0f64; s];
        let mut var = vec![0f64; s];
        for bi in 0..batch {
            let xb = &xv.data()[bi * c * s..(bi + 1) * c * s];
            mean.iter_mut().for_each(|m| *m = 0.0);
            var.iter_mut().for_each(|m| *m = 0.0);
            for plane in xb.chunks(s) {
                for (m, &v) in mean.iter_mut().zip(plane) {
                    *m += v.as_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= c as f64);
            for plane in xb.chunks(s) {
                for ((acc, &v), &m) in var.iter_mut().zip(plane).zip(&mean) {
                    let d = v.as_f64() - m;
                    *acc += d * d;
                }
            }
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v / c as f64 + LN_EPS).sqrt()).collect();
            for (p, &iv) in inv.iter().enumerate() {
                inv_std[bi * s + p] = T::from_f64(iv);
            }
            let hb = &mut xhat[bi * c * s..(bi + 1) * c * s];
            for (hp, xp) in hb.chunks_mut(s).zip(xb.chunks(s)) {
                for p in 0..s {
                    hp[p] = T::from_f64((xp[p].as_f64() - mean[p]) * inv[p]);
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), xhat.clone())?;
        let ng = self.needs(x);
        let (xhat, inv_std) = if ng { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(value, Op::LayerNorm { x, xhat, inv_std }, ng))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.needs(x);
        self.push(value, Op::Silu(x), ng)
    }

    /// Broadcasts `x: [B, C]` to `[B, C, h, w]`.
    pub fn broadcast_channels(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::shape("broadcast_channels", xv.shape(), &[h, w]));
        }
        let (batch, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(batch * c * h * w);
        for &v in xv.data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let value = Tensor::new(vec![batch, c, h, w], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::BroadcastChannels(x), ng))
    }

    /// Columns `start..start+len` of `x: [B, N]`.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + len > xv.shape()[1] || len == 0 {
            return Err(Error::shape("narrow_cols", xv.shape(), &[start, len]));
        }
        let n = xv.shape()[1];
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![xv.shape()[0], len], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::NarrowCols { x, start }, ng))
    }

    /// 2×2 average pooling with stride 2 on `[B, C, H, W]` (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape("avg_pool2", s, &[2, 2]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut data = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    dst[y * ow + x] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::AvgPool2(x), ng))
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample2", s, &[4]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Upsample2(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|v| v.as_f64()).sum();
        let m = s / xv.numel() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(T::from_f64(m)), Op::Mean(x), ng)
    }

    /// Mean squared error `mean((a - b)²)`, accumulated in `f64`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s: f64 = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        let m = s / av.len() as f64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(T::from_f64(m)), Op::Mse(a, b), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        // leaves that require grad always report a gradient, zero if unreachable
        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        if self.nodes[loss.0].needs_grad {
            let g = grads[loss.0].get_or_insert_with(|| vec![T::zero()]);
            g[0] += T::one();
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(node, &g, &mut grads);
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Runs [`backward`](Self::backward) and writes parameter gradients into
    /// `store`. Parameters not recorded on this tape get zero gradients.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Grads<T>> {
        let grads = self.backward(loss)?;
        store.zero_grad();
        for (&id, &v) in &self.param_leaves {
            if let Some(g) = &grads.grads[v.0] {
                store.get_mut(id).grad.data_mut().copy_from_slice(g);
            }
        }
        Ok(grads)
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn adjoint(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let other_b = self.value(*b).data();
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(other_b) {
                        *d += g * o;
                    }
                }
                let other_a = self.value(*a).data();
                if let Some(d) = self.slot(grads, *b) {
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(other_a) {
                        *d += g * o;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s);
                }
            }
            Op::ScaleRows(x, coeffs) => {
                let per = g.len() / coeffs.len();
                if let Some(d) = self.slot(grads, *x) {
                    for ((dc, gc), &c) in d.chunks_mut(per).zip(g.chunks(per)).zip(coeffs) {
                        dc.iter_mut().zip(gc).for_each(|(d, &g)| *d += g * c);
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let (batch, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[0];
                if let Some(d) = self.slot(grads, *x) {
                    T::gemm(
                        batch,
                        out,
                        inp,
                        T::one(),
                        g,
                        (out as isize, 1),
                        self.value(*w).data(),
                        (inp as isize, 1),
                        T::one(),
                        d,
                    );
                }
                if let Some(d) = self.slot(grads, *w) {
                    T::gemm(
                        out,
                        batch,
                        inp,
                        T::one(),
                        g,
                        (1, out as isize),
                        self.value(*x).data(),
                        (inp as isize, 1),
                        T::one(),
                        d,
                    );
                }
                if let Some(d) = self.slot(grads, *b) {
                    for row in g.chunks(out) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Conv { x, w, b, cols } => {
                let xs = self.shape(*x);
                let geo = ConvGeom {
                    batch: xs[0],
                    cin: xs[1],
                    h: xs[2],
                    w: xs[3],
                    cout: self.shape(*w)[0],
                    k: self.shape(*w)[2],
                };
                let (kk, hw) = (geo.kdim(), geo.h * geo.w);
                if let Some(d) = self.slot(grads, *b) {
                    for gb in g.chunks(geo.cout * hw) {
                        for (co, row) in gb.chunks(hw).enumerate() {
                            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
                            d[co] += T::from_f64(s);
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *w) {
                    let cols = cols.as_ref().expect("conv weight grad without im2col buffer");
                    // a contiguous [hw, kk] operand keeps the GEMM on its fast path
                    let mut cols_t = vec![T::zero(); kk * hw];
                    for bi in 0..geo.batch {
                        transpose(&cols[bi * kk * hw..(bi + 1) * kk * hw], kk, hw, &mut cols_t);
                        T::gemm(
                            geo.cout,
                            hw,
                            kk,
                            T::one(),
                            &g[bi * geo.cout * hw..(bi + 1) * geo.cout * hw],
                            (hw as isize, 1),
                            &cols_t,
                            (kk as isize, 1),
                            T::one(),
                            d,
                        );
                    }
                }
                let wv = self.value(*w).data();
                if let Some(d) = self.slot(grads, *x) {
                    let mut dcols = vec![T::zero(); kk * hw];
                    for bi in 0..geo.batch {
                        T::gemm(
                            kk,
                            geo.cout,
                            hw,
                            T::one(),
                            wv,
                            (1, kk as isize),
                            &g[bi * geo.cout * hw..(bi + 1) * geo.cout * hw],
                            (hw as isize, 1),
                            T::zero(),
                            &mut dcols,
                        );
                        col2im_add(&dcols, &geo, &mut d[bi * geo.cin * hw..(bi + 1) * geo.cin * hw]);
                    }
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let xs = self.shape(*x);
                let (batch, c) = (xs[0], xs[1]);
                let s = g.len() / (batch * c);
                if let Some(d) = self.slot(grads, *x) {
                    let mut gm = vec![0f64; s];
                    let mut gxm = vec![0f64; s];
                    for bi in 0..batch {
                        let range = bi * c * s..(bi + 1) * c * s;
                        let (gb, hb) = (&g[range.clone()], &xhat[range.clone()]);
                        gm.iter_mut().for_each(|v| *v = 0.0);
                        gxm.iter_mut().for_each(|v| *v = 0.0);
                        for (gp, hp) in gb.chunks(s).zip(hb.chunks(s)) {
                            for p in 0..s {
                                gm[p] += gp[p].as_f64();
                                gxm[p] += gp[p].as_f64() * hp[p].as_f64();
                            }
                        }
                        let db = &mut d[range];
                        for ((dp, gp), hp) in db.chunks_mut(s).zip(gb.chunks(s)).zip(hb.chunks(s)) {
                            for p in 0..s {
                                let iv = inv_std[bi * s + p].as_f64();
                                let v = iv * (gp[p].as_f64() - gm[p] / c as f64 - hp[p].as_f64() * gxm[p] / c as f64);
                                dp[p] += T::from_f64(v);
                            }
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(v);
                        *d += g * s * (T::one() + v * (T::one() - s));
                    }
                }
            }
            Op::BroadcastChannels(x) => {
                let spatial = g.len() / self.value(*x).numel();
                if let Some(d) = self.slot(grads, *x) {
                    for (d, gc) in d.iter_mut().zip(g.chunks(spatial)) {
                        let s: f64 = gc.iter().map(|v| v.as_f64()).sum();
                        *d += T::from_f64(s);
                    }
                }
            }
            Op::NarrowCols { x, start } => {
                let n = self.shape(*x)[1];
                let len = node.value.shape()[1];
                if let Some(d) = self.slot(grads, *x) {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(len)) {
                        drow[*start..start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                if let Some(d) = self.slot(grads, *x) {
                    for (dp, gp) in d.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = gp[y * ow + xx] * quarter;
                                let i = 2 * y * w + 2 * xx;
                                dp[i] += v;
                                dp[i + 1] += v;
                                dp[i + w] += v;
                                dp[i + w + 1] += v;
                            }
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let ow = 2 * w;
                if let Some(d) = self.slot(grads, *x) {
                    for (dp, gp) in d.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                        for (y, grow) in gp.chunks(ow).enumerate() {
                            for (xx, &gv) in grow.iter().enumerate() {
                                dp[(y / 2) * w + xx / 2] += gv;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).numel() as f64);
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let c = g[0] * T::from_f64(2.0 / av.len() as f64);
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *d += c * (x - y);
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((d, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *d -= c * (x - y);
                    }
                }
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
}

impl ConvGeom {
    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Row `(ci·k + ky)·k + kx`, column `y·W + x` holds `x[ci, y+ky-pad, x+kx-pad]`.
/// Writes the transpose of the row-major `rows × cols` matrix `src` into `dst`.
fn transpose<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], geo: &ConvGeom, cols: &mut [T]) {
    let (h, w, k) = (geo.h, geo.w, geo.k);
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..geo.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].iter_mut().for_each(|v| *v = T::zero());
                    dst[x1..].iter_mut().for_each(|v| *v = T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], geo: &ConvGeom, dx_out: &mut [T]) {
    let (h, w, k) = (geo.h, geo.w, geo.k);
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..geo.cin {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x1 - x0];
                    dst.iter_mut()
                        .zip(&row[y * w + x0..y * w + x1])
                        .for_each(|(d, &v)| *d += v);
                }
            }
        }
    }
}
