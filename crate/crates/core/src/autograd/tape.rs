use super::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        // im2col buffers, one per batch item (empty for 1x1 kernels).
        cols: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Relu(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Reshape(Var),
    Transpose12(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SoftmaxChannels(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    DepthToSpace {
        x: Var,
        p: usize,
    },
    Sum(Var),
    Weighted(Vec<(Var, T)>),
    Fused {
        x: Var,
        grad: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a computation. Cheap to create; build one per step.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` means the root does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient data, zeros if the root does not depend on `v`.
    pub fn dense(&self, v: Var, len: usize) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.data.clone(),
            None => vec![T::zero(); len],
        }
    }
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        [b, c, h, w] => Ok([*b, *c, *h, *w]),
        _ => Err(Error::Shape(format!("expected 4-d tensor, got {shape:?}"))),
    }
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, g) in src.iter().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += *g;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Same-padded convolution with a 1x1 or 3x3 kernel.
    /// `x: [B, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [bn, ci, h, wd] = dims4(self.shape(x))?;
        let [co, wci, k, k2] = dims4(self.shape(w))?;
        if wci != ci || k != k2 || !(k == 1 || k == 3) || self.shape(b) != [co] {
            return Err(Error::Shape(format!(
                "conv input {:?} with weight {:?} and bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let hw = h * wd;
        let ck = ci * k * k;
        let mut cols = if k == 3 { vec![T::zero(); bn * ck * hw] } else { Vec::new() };
        let mut out = vec![T::zero(); bn * co * hw];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            let bv = &self.value(b).data;
            for n in 0..bn {
                let xi = &xv[n * ci * hw..(n + 1) * ci * hw];
                let col: &[T] = if k == 3 {
                    let c = &mut cols[n * ck * hw..(n + 1) * ck * hw];
                    im2col(xi, ci, h, wd, c);
                    c
                } else {
                    xi
                };
                let o = &mut out[n * co * hw..(n + 1) * co * hw];
                for (c, row) in o.chunks_mut(hw).enumerate() {
                    row.fill(bv[c]);
                }
                T::gemm(false, false, co, hw, ck, T::one(), wv, col, T::one(), o);
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![bn, co, h, wd],
                data: out,
            },
            Op::Conv { x, w, b, k, cols },
            needs,
        ))
    }

    /// Affine map over the last axis. `x: [.., Din]`, `w: [Din, Dout]`, `b: [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (din, dout) = match self.shape(w) {
            [a, c] => (*a, *c),
            s => return Err(Error::Shape(format!("linear weight {s:?}"))),
        };
        if xs.last() != Some(&din) || self.shape(b) != [dout] {
            return Err(Error::Shape(format!(
                "linear input {xs:?} with weight [{din}, {dout}]"
            )));
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(&self.value(b).data);
        }
        T::gemm(
            false,
            false,
            rows,
            dout,
            din,
            T::one(),
            &self.value(x).data,
            &self.value(w).data,
            T::one(),
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = dout;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor { shape, data: out }, Op::Linear { x, w, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(p, q)| *p + *q)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a.max(T::zero())).collect(),
        };
        let needs = self.needs(x);
        self.push(t, Op::Relu(x), needs)
    }

    /// 2x2 average pooling of `[B, C, H, W]`; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("pool of odd plane {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let v = &self.value(x).data;
        let mut out = vec![T::zero(); b * c * ho * wo];
        for p in 0..b * c {
            let src = &v[p * h * w..];
            let dst = &mut out[p * ho * wo..];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, c, ho, wo],
                data: out,
            },
            Op::AvgPool2(x),
            needs,
        ))
    }

    /// Nearest-neighbor 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.shape(x))?;
        let (ho, wo) = (2 * h, 2 * w);
        let v = &self.value(x).data;
        let mut out = vec![T::zero(); b * c * ho * wo];
        for p in 0..b * c {
            let src = &v[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, c, ho, wo],
                data: out,
            },
            Op::Upsample2(x),
            needs,
        ))
    }

    /// Channel concatenation of two `[B, _, H, W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = dims4(self.shape(a))?;
        let [n2, cb, h2, w2] = dims4(self.shape(b))?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::Shape(format!(
                "concat {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data[i * cb * hw..(i + 1) * cb * hw]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, ca + cb, h, w],
                data: out,
            },
            Op::Concat(a, b),
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: self.value(x).data.clone(),
        };
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// `[B, M, N] -> [B, N, M]`.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let (b, m, n) = match self.shape(x) {
            [b, m, n] => (*b, *m, *n),
            s => return Err(Error::Shape(format!("transpose of {s:?}"))),
        };
        let v = &self.value(x).data;
        let mut out = vec![T::zero(); v.len()];
        transpose_into(v, &mut out, b, m, n);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, n, m],
                data: out,
            },
            Op::Transpose12(x),
            needs,
        ))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!("layer norm of {:?}", self.shape(x))));
        }
        let v = &self.value(x).data;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let rows = v.len() / d;
        let mut xhat = vec![T::zero(); v.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.len()];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let xs = &v[r * d..(r + 1) * d];
            let mean = xs.iter().fold(T::zero(), |a, b| a + *b) * inv_d;
            let var = xs.iter().fold(T::zero(), |a, b| a + (*b - mean) * (*b - mean)) * inv_d;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (xs[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + bt[i];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Softmax over axis 1 of `[B, C, ...]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("softmax of {s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        let plane: usize = s[2..].iter().product();
        let v = &self.value(x).data;
        let mut out = vec![T::zero(); v.len()];
        for n in 0..b {
            let base = n * c * plane;
            for p in 0..plane {
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(v[base + k * plane + p]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    let e = (v[base + k * plane + p] - m).exp();
                    out[base + k * plane + p] = e;
                    z += e;
                }
                for k in 0..c {
                    out[base + k * plane + p] = out[base + k * plane + p] / z;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape: s, data: out }, Op::SoftmaxChannels(x), needs))
    }

    /// Unit-length rows along the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&1);
        let v = &self.value(x).data;
        let mut out = vec![T::zero(); v.len()];
        let mut norms = Vec::with_capacity(v.len() / d.max(1));
        for (src, dst) in v.chunks(d).zip(out.chunks_mut(d)) {
            let n = src.iter().fold(T::zero(), |a, b| a + *b * *b).sqrt().max(T::of(NORM_EPS));
            norms.push(n);
            for (o, a) in dst.iter_mut().zip(src) {
                *o = *a / n;
            }
        }
        let needs = self.needs(x);
        self.push(Tensor { shape: s, data: out }, Op::L2Normalize { x, norms }, needs)
    }

    /// Token grid to image: `[B, h*w, C*p*p] -> [B, C, h*p, w*p]`.
    pub fn depth_to_space(&mut self, x: Var, h: usize, w: usize, p: usize) -> Result<Var> {
        let (b, t, d) = match self.shape(x) {
            [b, t, d] => (*b, *t, *d),
            s => return Err(Error::Shape(format!("depth_to_space of {s:?}"))),
        };
        if t != h * w || d % (p * p) != 0 {
            return Err(Error::Shape(format!(
                "depth_to_space of [{b}, {t}, {d}] onto {h}x{w} patches of {p}"
            )));
        }
        let c = d / (p * p);
        let v = &self.value(x).data;
        let mut out = vec![T::zero(); v.len()];
        for_each_d2s(b, h, w, p, c, |src, dst| out[dst] = v[src]);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, c, h * p, w * p],
                data: out,
            },
            Op::DepthToSpace { x, p },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().fold(T::zero(), |a, b| a + *b);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// `sum_i w_i * x_i` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for (v, w) in terms {
            if self.value(*v).len() != 1 {
                return Err(Error::Shape(format!(
                    "weighted sum of non-scalar {:?}",
                    self.shape(*v)
                )));
            }
            s += self.value(*v).item() * *w;
        }
        let needs = terms.iter().any(|(v, _)| self.needs(*v));
        Ok(self.push(Tensor::scalar(s), Op::Weighted(terms.to_vec()), needs))
    }

    /// Scalar `value` of `x` whose gradient `d value / d x` was computed by
    /// the caller.
    pub fn fused_scalar(&mut self, x: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "fused gradient of length {} for {:?}",
                grad.len(),
                self.shape(x)
            )));
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(value), Op::Fused { x, grad }, needs))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(&self.value(root).shape, T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g.data, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&self.nodes[v.0].value.shape));
            f(&mut slot.data);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, k, cols } => {
                let [bn, ci, h, wd] = dims4(self.shape(*x)).expect("checked");
                let co = node.value.shape[1];
                let hw = h * wd;
                let ck = ci * k * k;
                let xv = &self.value(*x).data;
                let col_of = |n: usize| -> &[T] {
                    if *k == 3 {
                        &cols[n * ck * hw..(n + 1) * ck * hw]
                    } else {
                        &xv[n * ci * hw..(n + 1) * ci * hw]
                    }
                };
                acc(*w, &mut |dw| {
                    for n in 0..bn {
                        let gn = &g[n * co * hw..(n + 1) * co * hw];
                        T::gemm(false, true, co, ck, hw, T::one(), gn, col_of(n), T::one(), dw);
                    }
                });
                acc(*b, &mut |db| {
                    for n in 0..bn {
                        for (c, row) in g[n * co * hw..(n + 1) * co * hw].chunks(hw).enumerate() {
                            db[c] += row.iter().fold(T::zero(), |a, v| a + *v);
                        }
                    }
                });
                let wv = &self.value(*w).data;
                acc(*x, &mut |dx| {
                    let mut dcol = vec![T::zero(); ck * hw];
                    for n in 0..bn {
                        let gn = &g[n * co * hw..(n + 1) * co * hw];
                        let dxn = &mut dx[n * ci * hw..(n + 1) * ci * hw];
                        if *k == 3 {
                            T::gemm(true, false, ck, hw, co, T::one(), wv, gn, T::zero(), &mut dcol);
                            col2im(&dcol, ci, h, wd, dxn);
                        } else {
                            T::gemm(true, false, ck, hw, co, T::one(), wv, gn, T::one(), dxn);
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (din, dout) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = g.len() / dout;
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                acc(*x, &mut |dx| {
                    T::gemm(false, true, rows, din, dout, T::one(), g, wv, T::one(), dx)
                });
                acc(*w, &mut |dw| {
                    T::gemm(true, false, din, dout, rows, T::one(), xv, g, T::one(), dw)
                });
                acc(*b, &mut |db| {
                    for row in g.chunks(dout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, &mut |d| add_into(d, g));
                }
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                acc(*x, &mut |d| {
                    for ((d, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        if *xi > T::zero() {
                            *d += *gi;
                        }
                    }
                });
            }
            Op::AvgPool2(x) => {
                let [bn, c, h, w] = dims4(self.shape(*x)).expect("checked");
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                acc(*x, &mut |d| {
                    for p in 0..bn * c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let gi = g[p * ho * wo + y * wo + xx] * quarter;
                                let i = p * h * w + 2 * y * w + 2 * xx;
                                d[i] += gi;
                                d[i + 1] += gi;
                                d[i + w] += gi;
                                d[i + w + 1] += gi;
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let [bn, c, h, w] = dims4(self.shape(*x)).expect("checked");
                let (ho, wo) = (2 * h, 2 * w);
                acc(*x, &mut |d| {
                    for p in 0..bn * c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                d[p * h * w + (y / 2) * w + xx / 2] += g[p * ho * wo + y * wo + xx];
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = dims4(self.shape(*a)).expect("checked");
                let cb = self.shape(*b)[1];
                let hw = h * w;
                acc(*a, &mut |d| {
                    for i in 0..n {
                        add_into(
                            &mut d[i * ca * hw..(i + 1) * ca * hw],
                            &g[i * (ca + cb) * hw..(i * (ca + cb) + ca) * hw],
                        );
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..n {
                        add_into(
                            &mut d[i * cb * hw..(i + 1) * cb * hw],
                            &g[(i * (ca + cb) + ca) * hw..(i + 1) * (ca + cb) * hw],
                        );
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Transpose12(x) => {
                let s = self.shape(*x);
                let (b, m, n) = (s[0], s[1], s[2]);
                let mut t = vec![T::zero(); g.len()];
                transpose_into(g, &mut t, b, n, m);
                acc(*x, &mut |d| add_into(d, &t));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gv = &self.value(*gamma).data;
                acc(*gamma, &mut |dg| {
                    for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            dg[i] += row[i] * hrow[i];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                });
                let inv_d = T::one() / T::of(d as f64);
                acc(*x, &mut |dx| {
                    for (r, (row, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for i in 0..d {
                            let dh = row[i] * gv[i];
                            m1 += dh;
                            m2 += dh * hrow[i];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for i in 0..d {
                            let dh = row[i] * gv[i];
                            dx[r * d + i] += rstd[r] * (dh - m1 - hrow[i] * m2);
                        }
                    }
                });
            }
            Op::SoftmaxChannels(x) => {
                let s = &node.value.shape;
                let (b, c) = (s[0], s[1]);
                let plane: usize = s[2..].iter().product();
                let y = &node.value.data;
                acc(*x, &mut |dx| {
                    for n in 0..b {
                        let base = n * c * plane;
                        for p in 0..plane {
                            let mut dot = T::zero();
                            for k in 0..c {
                                let i = base + k * plane + p;
                                dot += g[i] * y[i];
                            }
                            for k in 0..c {
                                let i = base + k * plane + p;
                                dx[i] += y[i] * (g[i] - dot);
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.value.shape.last().unwrap_or(&1);
                let y = &node.value.data;
                acc(*x, &mut |dx| {
                    for (r, n) in norms.iter().enumerate() {
                        let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let dot = gr.iter().zip(yr).fold(T::zero(), |a, (p, q)| a + *p * *q);
                        for i in 0..d {
                            dx[r * d + i] += (gr[i] - yr[i] * dot) / *n;
                        }
                    }
                });
            }
            Op::DepthToSpace { x, p } => {
                let s = &node.value.shape;
                let (b, c) = (s[0], s[1]);
                let (h, w) = (s[2] / p, s[3] / p);
                acc(*x, &mut |dx| for_each_d2s(b, h, w, *p, c, |src, dst| dx[src] += g[dst]));
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::Weighted(terms) => {
                for (v, w) in terms {
                    let gw = g[0] * *w;
                    acc(*v, &mut |d| d[0] += gw);
                }
            }
            Op::Fused { x, grad } => {
                let g0 = g[0];
                acc(*x, &mut |d| {
                    for (di, gi) in d.iter_mut().zip(grad) {
                        *di += g0 * *gi;
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    for (a, b) in d.iter_mut().zip(g) {
        *a += *b;
    }
}

fn transpose_into<T: Real>(src: &[T], dst: &mut [T], b: usize, m: usize, n: usize) {
    for k in 0..b {
        let s = &src[k * m * n..(k + 1) * m * n];
        let d = &mut dst[k * m * n..(k + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
}

/// Visits `(token index, pixel index)` pairs of the patch unshuffle.
fn for_each_d2s(b: usize, h: usize, w: usize, p: usize, c: usize, mut f: impl FnMut(usize, usize)) {
    let (hh, ww) = (h * p, w * p);
    let d = c * p * p;
    for n in 0..b {
        for ty in 0..h {
            for tx in 0..w {
                let tok = (n * h * w + ty * w + tx) * d;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let src = tok + ch * p * p + dy * p + dx;
                            let dst = ((n * c + ch) * hh + ty * p + dy) * ww + tx * p + dx;
                            f(src, dst);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::check_gradient;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    // Weighted readout so every output element carries a distinct gradient.
    fn readout(tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> Var {
        let n = tape.value(y).len();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let yv = tape.value(y).data.clone();
        let value = yv.iter().zip(&r).map(|(a, b)| a * b).sum();
        tape.fused_scalar(y, value, r).unwrap()
    }

    fn check_op(
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) -> f64 {
        let report = check_gradient(&inputs, 1e-5, usize::MAX, 3, |tape, vars| {
            let y = f(tape, vars);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            readout(tape, y, &mut rng)
        })
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn conv3_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            random(&[2, 2, 4, 5], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
        ];
        let e = check_op(inputs, |t, v| t.conv(v[0], v[1], v[2]).unwrap());
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn conv1_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            random(&[2, 3, 2, 2], &mut rng),
            random(&[4, 3, 1, 1], &mut rng),
            random(&[4], &mut rng),
        ];
        assert!(check_op(inputs, |t, v| t.conv(v[0], v[1], v[2]).unwrap()) < 1e-6);
        let inputs = vec![
            random(&[2, 3, 4], &mut rng),
            random(&[4, 5], &mut rng),
            random(&[5], &mut rng),
        ];
        assert!(check_op(inputs, |t, v| t.linear(v[0], v[1], v[2]).unwrap()) < 1e-6);
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[2, 2, 4, 4], &mut rng);
        let b = random(&[2, 1, 4, 4], &mut rng);
        let e = check_op(vec![a.clone(), b], |t, v| {
            let p = t.avg_pool2(v[0]).unwrap();
            let u = t.upsample2(p).unwrap();
            let s = t.add(u, v[0]).unwrap();
            let c = t.concat_channels(s, v[1]).unwrap();
            let r = t.reshape(c, &[2, 3, 16]).unwrap();
            t.transpose12(r).unwrap()
        });
        assert!(e < 1e-6, "{e}");
        let tok = random(&[2, 4, 8], &mut rng);
        let e = check_op(vec![tok], |t, v| t.depth_to_space(v[0], 2, 2, 2).unwrap());
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn normalization_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![
            random(&[3, 2, 5], &mut rng),
            random(&[5], &mut rng),
            random(&[5], &mut rng),
        ];
        assert!(check_op(inputs, |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap()) < 1e-5);
        let x = random(&[2, 3, 2, 2], &mut rng);
        assert!(check_op(vec![x], |t, v| t.softmax_channels(v[0]).unwrap()) < 1e-6);
        let x = random(&[4, 6], &mut rng);
        assert!(check_op(vec![x], |t, v| t.l2_normalize(v[0])) < 1e-6);
    }

    #[test]
    fn relu_sum_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Keep away from the kink.
        let mut x = random(&[10], &mut rng);
        x.data.iter_mut().for_each(|v| *v += v.signum() * 0.1);
        let e = check_op(vec![x], |t, v| {
            let r = t.relu(v[0]);
            let s = t.sum(r);
            let s2 = t.sum(v[0]);
            t.weighted_sum(&[(s, 0.7), (s2, -1.3)]).unwrap()
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn detached_and_constant_get_nothing() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = t.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let d = t.detach(a);
        let s1 = t.add(a, c).unwrap();
        let s2 = t.add(s1, d).unwrap();
        let root = t.sum(s2);
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(a).unwrap().data, vec![1.0, 1.0]);
        assert!(g.get(c).is_none());
        assert!(g.get(d).is_none());
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = t.param(Tensor::zeros(&[3, 1, 3, 3]));
        let b = t.param(Tensor::zeros(&[3]));
        assert!(t.conv(x, w, b).is_err());
        let y = t.constant(Tensor::zeros(&[3]));
        assert!(t.add(b, y).is_ok());
        assert!(t.backward(x).is_err());
    }
}
