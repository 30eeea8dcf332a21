//! Reverse-mode automatic differentiation over rank-3 activations.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape; parameters are borrowed from a [`ParamStore`] so building a tape never
//! copies weights. [`Tape::backward`] walks the record in reverse and returns
//! gradients for parameters and for any input created with
//! [`Tape::input_with_grad`].

use super::gemm::{matmul, matmul_at, matmul_bt};
use super::params::{GradStore, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Silu {
        x: Var,
        sig: Vec<f64>,
    },
    Sigmoid(Var),
    Concat(Vec<Var>),
    Shuffle {
        x: Var,
        groups: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvg(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Gradients {
    pub params: GradStore,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a tape variable, if one reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same-padded stride-1 convolution with zero padding.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Var {
        let out = conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            groups,
        );
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv { x, w, b, groups }, ng)
    }

    /// Convolution with parameters looked up by id.
    pub fn conv_p(&mut self, x: Var, w: ParamId, b: Option<ParamId>, groups: usize) -> Var {
        let w = self.param(w);
        let b = b.map(|b| self.param(b));
        self.conv(x, w, b, groups)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let sig: Vec<f64> = t.data().iter().map(|&v| sigmoid(v)).collect();
        let data = t.data().iter().zip(&sig).map(|(v, s)| v * s).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("sized");
        let ng = self.needs(x);
        self.push(out, Op::Silu { x, sig }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let (_, h, w) = self.value(xs[0]).dims3();
        let mut c_total = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            let (c, th, tw) = t.dims3();
            assert_eq!((th, tw), (h, w), "concat spatial mismatch");
            c_total += c;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::chw(c_total, h, w, data).expect("sized");
        let ng = xs.iter().any(|&x| self.needs(x));
        self.push(out, Op::Concat(xs.to_vec()), ng)
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Var {
        let t = self.value(x);
        let (c, _, _) = t.dims3();
        let perm = shuffle_permutation(c, groups);
        let out = permute_channels(t, &perm);
        let ng = self.needs(x);
        self.push(out, Op::Shuffle { x, groups }, ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.dims3();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let src = t.data();
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[ch * oh * ow + y * ow + xx] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let out = Tensor::chw(c, oh, ow, out).expect("sized");
        let ng = self.needs(x);
        self.push(out, Op::AvgPool2(x), ng)
    }

    /// Bilinear ×2 upsampling (half-pixel centres, edge clamped).
    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = upsample2_forward(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Upsample2(x), ng)
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.dims3();
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(t.channel(ch)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= c as f64);
        let out = Tensor::chw(1, h, w, out).expect("sized");
        let ng = self.needs(x);
        self.push(out, Op::ChannelMean(x), ng)
    }

    pub fn channel_max(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.dims3();
        let hw = h * w;
        let mut out = t.channel(0).to_vec();
        let mut argmax = vec![0usize; hw];
        for ch in 1..c {
            for (p, v) in t.channel(ch).iter().enumerate() {
                if *v > out[p] {
                    out[p] = *v;
                    argmax[p] = ch;
                }
            }
        }
        let out = Tensor::chw(1, h, w, out).expect("sized");
        let ng = self.needs(x);
        self.push(out, Op::ChannelMax { x, argmax }, ng)
    }

    pub fn global_avg(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.dims3();
        let n = (h * w) as f64;
        let out: Vec<f64> = (0..c)
            .map(|ch| t.channel(ch).iter().sum::<f64>() / n)
            .collect();
        let out = Tensor::chw(c, 1, 1, out).expect("sized");
        let ng = self.needs(x);
        self.push(out, Op::GlobalAvg(x), ng)
    }

    /// Backpropagate `seed` (d loss / d out) through the recorded graph.
    pub fn backward(&self, out: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(out).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads = self.params.zero_grads();
        grads[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            // Input gradients stay in place for `Gradients::wrt`.
            if !node.needs_grad || matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => pgrads.accumulate(*id, &g),
                Op::Conv { x, w, b, groups } => {
                    let (dx, dw, db) =
                        conv_backward(self.value(*x), self.value(*w), &g, *groups, self.needs(*x));
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, reduce_to(&g, self.value(*a).shape()));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, reduce_to(&g, self.value(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let full = broadcast_binary(&g, vb, |x, y| x * y);
                        acc(&mut grads, *a, reduce_to(&full, va.shape()));
                    }
                    if self.needs(*b) {
                        let full = broadcast_binary(&g, va, |x, y| x * y);
                        acc(&mut grads, *b, reduce_to(&full, vb.shape()));
                    }
                }
                Op::Silu { x, sig } => {
                    let vx = self.value(*x);
                    let mut d = g;
                    for ((gi, &xi), &s) in d.data_mut().iter_mut().zip(vx.data()).zip(sig) {
                        *gi *= s * (1.0 + xi * (1.0 - s));
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().expect("value");
                    let mut d = g;
                    for (gi, &yi) in d.data_mut().iter_mut().zip(y.data()) {
                        *gi *= yi * (1.0 - yi);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Concat(xs) => {
                    let (_, h, w) = g.dims3();
                    let mut off = 0;
                    for &x in xs {
                        let (c, _, _) = self.value(x).dims3();
                        let n = c * h * w;
                        if self.needs(x) {
                            let part = Tensor::chw(c, h, w, g.data()[off..off + n].to_vec())
                                .expect("sized");
                            acc(&mut grads, x, part);
                        }
                        off += n;
                    }
                }
                Op::Shuffle { x, groups } => {
                    let (c, _, _) = g.dims3();
                    let perm = shuffle_permutation(c, *groups);
                    let mut inv = vec![0; c];
                    for (dst, &src) in perm.iter().enumerate() {
                        inv[src] = dst;
                    }
                    acc(&mut grads, *x, permute_channels(&g, &inv));
                }
                Op::AvgPool2(x) => {
                    let (c, h, w) = self.value(*x).dims3();
                    let (oh, ow) = (h / 2, w / 2);
                    let mut d = vec![0.0; c * h * w];
                    let gd = g.data();
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = 0.25 * gd[ch * oh * ow + y * ow + xx];
                                let base = ch * h * w + 2 * y * w + 2 * xx;
                                d[base] += v;
                                d[base + 1] += v;
                                d[base + w] += v;
                                d[base + w + 1] += v;
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::chw(c, h, w, d).expect("sized"));
                }
                Op::Upsample2(x) => {
                    let (c, h, w) = self.value(*x).dims3();
                    acc(&mut grads, *x, upsample2_backward(&g, c, h, w));
                }
                Op::ChannelMean(x) => {
                    let (c, h, w) = self.value(*x).dims3();
                    let mut d = Vec::with_capacity(c * h * w);
                    for _ in 0..c {
                        d.extend(g.data().iter().map(|v| v / c as f64));
                    }
                    acc(&mut grads, *x, Tensor::chw(c, h, w, d).expect("sized"));
                }
                Op::ChannelMax { x, argmax } => {
                    let (c, h, w) = self.value(*x).dims3();
                    let hw = h * w;
                    let mut d = vec![0.0; c * hw];
                    for (p, &ch) in argmax.iter().enumerate() {
                        d[ch * hw + p] = g.data()[p];
                    }
                    acc(&mut grads, *x, Tensor::chw(c, h, w, d).expect("sized"));
                }
                Op::GlobalAvg(x) => {
                    let (c, h, w) = self.value(*x).dims3();
                    let n = (h * w) as f64;
                    let mut d = Vec::with_capacity(c * h * w);
                    for ch in 0..c {
                        let v = g.data()[ch] / n;
                        d.extend(std::iter::repeat_n(v, h * w));
                    }
                    acc(&mut grads, *x, Tensor::chw(c, h, w, d).expect("sized"));
                }
            }
        }
        Gradients {
            params: pgrads,
            nodes: grads,
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output channel `dst` takes input channel `perm[dst]`.
pub fn shuffle_permutation(c: usize, groups: usize) -> Vec<usize> {
    assert!(
        groups > 0 && c.is_multiple_of(groups),
        "channels not divisible by groups"
    );
    let per = c / groups;
    // View channels as [groups, per], transpose to [per, groups], flatten.
    (0..c)
        .map(|dst| {
            let i = dst / groups;
            let g = dst % groups;
            g * per + i
        })
        .collect()
}

fn permute_channels(t: &Tensor, perm: &[usize]) -> Tensor {
    let (c, h, w) = t.dims3();
    let mut data = Vec::with_capacity(c * h * w);
    for &src in perm {
        data.extend_from_slice(t.channel(src));
    }
    Tensor::chw(c, h, w, data).expect("sized")
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), 3, "broadcast expects rank-3");
    assert_eq!(b.len(), 3, "broadcast expects rank-3");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(
                x == y || x == 1 || y == 1,
                "incompatible shapes {a:?} {b:?}"
            );
            x.max(y)
        })
        .collect()
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data).expect("sized");
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let (c, h, w) = (out_shape[0], out_shape[1], out_shape[2]);
    let sa = strides_for(a.shape());
    let sb = strides_for(b.shape());
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let ia = ch * sa[0] + y * sa[1] + x * sa[2];
                let ib = ch * sb[0] + y * sb[1] + x * sb[2];
                data.push(f(a.data()[ia], b.data()[ib]));
            }
        }
    }
    Tensor::new(out_shape, data).expect("sized")
}

/// Strides with zeros on broadcast (size-1) axes.
fn strides_for(shape: &[usize]) -> [usize; 3] {
    let (h, w) = (shape[1], shape[2]);
    [
        if shape[0] == 1 { 0 } else { h * w },
        if h == 1 { 0 } else { w },
        if w == 1 { 0 } else { 1 },
    ]
}

/// Sum a full-shape gradient down onto a (possibly broadcast) operand shape.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let (c, h, w) = g.dims3();
    let s = strides_for(shape);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let gd = g.data();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                od[ch * s[0] + y * s[1] + x * s[2]] += gd[(ch * h + y) * w + x];
            }
        }
    }
    out
}

fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    let (c, h, w) = x.dims3();
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![0.0; c * k * k * hw];
    let src = x.data();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let dx = kx as isize - p;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = ch * hw + sy as usize * w;
                    let srow = &src[(s as isize + x0 as isize + dx) as usize
                        ..(s as isize + x1 as isize + dx) as usize];
                    col[row + y * w + x0..row + y * w + x1].copy_from_slice(srow);
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let dx = kx as isize - p;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = ((ch * hw + sy as usize * w + x0) as isize + dx) as usize;
                    let dst = &mut out[s..s + (x1 - x0)];
                    for (d, c) in dst.iter_mut().zip(&col[row + y * w + x0..row + y * w + x1]) {
                        *d += c;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, groups: usize) -> Tensor {
    let (ci, h, wd) = x.dims3();
    let ws = w.shape();
    let (co, cig, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ws[3], k, "square kernels only");
    assert_eq!(k % 2, 1, "odd kernels only");
    assert_eq!(
        ci,
        cig * groups,
        "conv input channels {ci} vs weight {cig}x{groups}"
    );
    assert_eq!(co % groups, 0, "output channels not divisible by groups");
    let cog = co / groups;
    let hw = h * wd;
    let kk = cig * k * k;
    let mut out = vec![0.0; co * hw];
    let col_storage;
    let col: &[f64] = if k == 1 {
        x.data()
    } else {
        col_storage = im2col(x, k);
        &col_storage
    };
    for g in 0..groups {
        matmul(
            cog,
            kk,
            hw,
            &w.data()[g * cog * kk..(g + 1) * cog * kk],
            &col[g * kk * hw..(g + 1) * kk * hw],
            &mut out[g * cog * hw..(g + 1) * cog * hw],
            0.0,
        );
    }
    if let Some(b) = b {
        for (ch, bias) in b.data().iter().enumerate() {
            out[ch * hw..(ch + 1) * hw]
                .iter_mut()
                .for_each(|v| *v += bias);
        }
    }
    Tensor::chw(co, h, wd, out).expect("sized")
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    groups: usize,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (ci, h, wd) = x.dims3();
    let ws = w.shape();
    let (co, cig, k) = (ws[0], ws[1], ws[2]);
    let cog = co / groups;
    let hw = h * wd;
    let kk = cig * k * k;
    let col_storage;
    let col: &[f64] = if k == 1 {
        x.data()
    } else {
        col_storage = im2col(x, k);
        &col_storage
    };
    let gd = g.data();
    let mut dw = vec![0.0; w.len()];
    for grp in 0..groups {
        matmul_bt(
            cog,
            hw,
            kk,
            &gd[grp * cog * hw..(grp + 1) * cog * hw],
            &col[grp * kk * hw..(grp + 1) * kk * hw],
            &mut dw[grp * cog * kk..(grp + 1) * cog * kk],
            0.0,
        );
    }
    let db: Vec<f64> = (0..co)
        .map(|ch| gd[ch * hw..(ch + 1) * hw].iter().sum())
        .collect();
    let dx = want_dx.then(|| {
        let mut dcol = vec![0.0; ci * k * k * hw];
        for grp in 0..groups {
            matmul_at(
                kk,
                cog,
                hw,
                &w.data()[grp * cog * kk..(grp + 1) * cog * kk],
                &gd[grp * cog * hw..(grp + 1) * cog * hw],
                &mut dcol[grp * kk * hw..(grp + 1) * kk * hw],
                0.0,
            );
        }
        let data = if k == 1 {
            dcol
        } else {
            col2im(&dcol, ci, h, wd, k)
        };
        Tensor::chw(ci, h, wd, data).expect("sized")
    });
    (
        dx,
        Tensor::new(ws.to_vec(), dw).expect("sized"),
        Tensor::new(vec![co], db).expect("sized"),
    )
}

/// Source taps for output index `o` of a ×2 bilinear upsample of length `n`.
fn up_taps(o: usize, n: usize) -> (usize, usize, f64, f64) {
    let i = o / 2;
    if o.is_multiple_of(2) {
        let lo = i.saturating_sub(1);
        (lo, i, 0.25, 0.75)
    } else {
        let hi = (i + 1).min(n - 1);
        (i, hi, 0.75, 0.25)
    }
}

fn upsample2_forward(t: &Tensor) -> Tensor {
    let (c, h, w) = t.dims3();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    let src = t.data();
    let xt: Vec<_> = (0..ow).map(|o| up_taps(o, w)).collect();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = up_taps(oy, h);
            for (ox, &(x0, x1, wx0, wx1)) in xt.iter().enumerate() {
                let v = wy0 * (wx0 * src[base + y0 * w + x0] + wx1 * src[base + y0 * w + x1])
                    + wy1 * (wx0 * src[base + y1 * w + x0] + wx1 * src[base + y1 * w + x1]);
                out[ch * oh * ow + oy * ow + ox] = v;
            }
        }
    }
    Tensor::chw(c, oh, ow, out).expect("sized")
}

fn upsample2_backward(g: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
    let (oh, ow) = (2 * h, 2 * w);
    let mut d = vec![0.0; c * h * w];
    let gd = g.data();
    let xt: Vec<_> = (0..ow).map(|o| up_taps(o, w)).collect();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = up_taps(oy, h);
            for (ox, &(x0, x1, wx0, wx1)) in xt.iter().enumerate() {
                let v = gd[ch * oh * ow + oy * ow + ox];
                d[base + y0 * w + x0] += wy0 * wx0 * v;
                d[base + y0 * w + x1] += wy0 * wx1 * v;
                d[base + y1 * w + x0] += wy1 * wx0 * v;
                d[base + y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    Tensor::chw(c, h, w, d).expect("sized")
}
