//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward evaluation together
//! with a closure computing the vector-Jacobian product for its inputs.
//! Calling [`Graph::backward`] walks the record in reverse. Tensors use the
//! channels-last convention `[batch, height, width, channels]` for the
//! convolution operators, so that the im2col matrices map directly onto
//! GEMM outputs without transposition.
//!
//! Nodes that do not depend on any trainable leaf never store a backward
//! closure, which keeps inference passes cheap.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Backward = Box<dyn Fn(&Tensor, &[Node]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
}

/// Gradients of a scalar output with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; `None` when `v` does not
    /// influence the output through differentiable paths.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Geometry of a 2-D convolution in channels-last layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution; `None` when the kernel does not
    /// fit the padded input.
    pub fn conv(
        batch: usize,
        (in_h, in_w, in_c): (usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Option<Self> {
        let ph = in_h + 2 * pad.0;
        let pw = in_w + 2 * pad.1;
        if ph < kh || pw < kw || stride.0 == 0 || stride.1 == 0 {
            return None;
        }
        Some(Self {
            batch,
            in_h,
            in_w,
            in_c,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride.0 + 1,
            out_w: (pw - kw) / stride.1 + 1,
        })
    }

    fn cols_width(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds `x` (`[b, h, w, c]`) into `[b * out_h * out_w, kh * kw * c]`.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.cols_width();
    let mut cols = vec![0.0; g.rows() * width];
    let c = g.in_c;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * width;
                for i in 0..g.kh {
                    let iy = (oy * g.stride.0 + i) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for j in 0..g.kw {
                        let ix = (ox * g.stride.1 + j) as isize - g.pad.1 as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * c;
                        let dst = row + (i * g.kw + j) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters and accumulates columns back into an
/// input-shaped buffer.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.cols_width();
    let c = g.in_c;
    let mut x = vec![0.0; g.batch * g.in_h * g.in_w * c];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * width;
                for i in 0..g.kh {
                    let iy = (oy * g.stride.0 + i) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for j in 0..g.kw {
                        let ix = (ox * g.stride.1 + j) as isize - g.pad.1 as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * c;
                        let src = row + (i * g.kw + j) * c;
                        for (d, s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `out = a · b` (optionally with either operand transposed), both given
/// as row-major slices.
fn gemm(
    a: &[f64],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[f64],
    (br, bc): (usize, usize),
    tb: bool,
) -> Vec<f64> {
    let av = ArrayView2::from_shape((ar, ac), a).expect("gemm lhs shape");
    let bv = ArrayView2::from_shape((br, bc), b).expect("gemm rhs shape");
    let av = if ta { av.reversed_axes() } else { av };
    let bv = if tb { bv.reversed_axes() } else { bv };
    let (m, n) = (av.nrows(), bv.ncols());
    let mut out = vec![0.0; m * n];
    {
        let mut ov = ArrayViewMut2::from_shape((m, n), &mut out[..]).expect("gemm out shape");
        general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
    }
    out
}

fn contiguous(t: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("tensor shape")
}

/// Number of trailing-dimension groups (`rows`) and their size (`last`).
fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let total: usize = shape.iter().product();
    (if last == 0 { 0 } else { total / last }, last)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a zero-dimensional (or single element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.len(), 1, "scalar() on a tensor of {} elements", t.len());
        *t.iter().next().unwrap()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Backward) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: vec![], backward: None, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that accumulates a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: vec![], backward: None, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Backpropagates from a single-element output.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let out_shape = self.nodes[out.0].value.raw_dim();
        grads[out.0] = Some(Tensor::ones(out_shape));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            let Some(back) = node.backward.as_ref() else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let parent_grads = back(&g, &self.nodes);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => *acc += &pg,
                    None => grads[p] = Some(pg),
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, vec![a.0, b.0], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, vec![a.0, b.0], Box::new(|g, _| vec![Some(g.clone()), Some(-g)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            vec![ai, bi],
            Box::new(move |g, n| {
                let ga = n[ai].requires_grad.then(|| g * &n[bi].value);
                let gb = n[bi].requires_grad.then(|| g * &n[ai].value);
                vec![ga, gb]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div: shape mismatch");
        let value = self.value(a) / self.value(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            vec![ai, bi],
            Box::new(move |g, n| {
                let bv = &n[bi].value;
                let ga = n[ai].requires_grad.then(|| g / bv);
                let gb = n[bi].requires_grad.then(|| {
                    let mut t = g * &n[ai].value;
                    t.zip_mut_with(bv, |t, &b| *t = -*t / (b * b));
                    t
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, vec![a.0], Box::new(move |g, _| vec![Some(g * c)]))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, vec![a.0], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let ai = a.0;
        self.push(
            value,
            vec![ai],
            Box::new(move |g, n| {
                let mut t = g.clone();
                t.zip_mut_with(&n[ai].value, |t, &x| *t *= 2.0 * x);
                vec![Some(t)]
            }),
        )
    }

    /// `log2(1 + a)`.
    pub fn log2_1p(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.ln_1p() / std::f64::consts::LN_2);
        let ai = a.0;
        self.push(
            value,
            vec![ai],
            Box::new(move |g, n| {
                let mut t = g.clone();
                t.zip_mut_with(&n[ai].value, |t, &x| *t /= (1.0 + x) * std::f64::consts::LN_2);
                vec![Some(t)]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let ai = a.0;
        self.push(
            value,
            vec![ai],
            Box::new(move |g, n| {
                let mut t = g.clone();
                t.zip_mut_with(&n[ai].value, |t, &x| {
                    if x <= 0.0 {
                        *t *= slope
                    }
                });
                vec![Some(t)]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    // ----- reductions and shape ----------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem(IxDyn(&[]), self.value(a).sum());
        let shape = self.value(a).raw_dim();
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| {
                let s = *g.iter().next().unwrap();
                vec![Some(Tensor::from_elem(shape.clone(), s))]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = self.value(a).sum_axis(Axis(shape.len() - 1));
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| {
                let last = *shape.last().unwrap();
                let gv = contiguous(g);
                let mut out = Vec::with_capacity(gv.len() * last);
                for &x in gv.iter() {
                    out.extend(std::iter::repeat_n(x, last));
                }
                vec![Some(from_vec(&shape, out))]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.shape(a).to_vec();
        let data = contiguous(self.value(a)).into_owned();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            old,
            shape
        );
        let value = from_vec(shape, data);
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| vec![Some(from_vec(&old, contiguous(g).into_owned()))]),
        )
    }

    /// Reorders axes; `axes[i]` names the input axis placed at position `i`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| {
                vec![Some(g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned())]
            }),
        )
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let full = self.shape(a).to_vec();
        let value = self
            .value(a)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| {
                let mut out = Tensor::zeros(IxDyn(&full));
                out.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len)).assign(g);
                vec![Some(out)]
            }),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shapes")
            .as_standard_layout()
            .into_owned();
        let lens: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.push(
            value,
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |g, _| {
                let mut start = 0;
                lens.iter()
                    .map(|&l| {
                        let s = g
                            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + l))
                            .as_standard_layout()
                            .into_owned();
                        start += l;
                        Some(s)
                    })
                    .collect()
            }),
        )
    }

    // ----- linear algebra ------------------------------------------------

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (_, last) = split_last(self.shape(x));
        assert_eq!(self.shape(b), [last], "add_bias: bias length");
        let mut value = self.value(x).to_owned();
        let bv = self.value(b).clone();
        let last_axis = Axis(value.ndim() - 1);
        for mut lane in value.lanes_mut(last_axis) {
            lane += &bv;
        }
        self.push(
            value,
            vec![x.0, b.0],
            Box::new(move |g, _| {
                let (rows, last) = split_last(g.shape());
                let gv = contiguous(g);
                let mut gb = vec![0.0; last];
                for r in 0..rows {
                    for (acc, v) in gb.iter_mut().zip(&gv[r * last..(r + 1) * last]) {
                        *acc += v;
                    }
                }
                vec![Some(g.clone()), Some(from_vec(&[last], gb))]
            }),
        )
    }

    /// `x · w` with `x` of shape `[.., in]` and `w` of shape `[in, out]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "matmul: weight must be 2-D");
        let (rows, inner) = split_last(&xs);
        assert_eq!(inner, ws[0], "matmul: inner dimension {:?} x {:?}", xs, ws);
        let out = gemm(
            &contiguous(self.value(x)),
            (rows, inner),
            false,
            &contiguous(self.value(w)),
            (ws[0], ws[1]),
            false,
        );
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = ws[1];
        let (xi, wi) = (x.0, w.0);
        self.push(
            from_vec(&oshape, out),
            vec![xi, wi],
            Box::new(move |g, n| {
                let gv = contiguous(g);
                let gx = n[xi].requires_grad.then(|| {
                    let wv = contiguous(&n[wi].value);
                    from_vec(&xs, gemm(&gv, (rows, ws[1]), false, &wv, (ws[0], ws[1]), true))
                });
                let gw = n[wi].requires_grad.then(|| {
                    let xv = contiguous(&n[xi].value);
                    from_vec(&ws, gemm(&xv, (rows, inner), true, &gv, (rows, ws[1]), false))
                });
                vec![gx, gw]
            }),
        )
    }

    /// Batched product `a[g] · b[g]` (or `a[g] · b[g]ᵀ` with `transpose_b`)
    /// for `a: [G, m, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        assert!(as_.len() == 3 && bs.len() == 3 && as_[0] == bs[0], "bmm shapes {:?} {:?}", as_, bs);
        let (groups, m, k) = (as_[0], as_[1], as_[2]);
        let n = if transpose_b { bs[1] } else { bs[2] };
        assert_eq!(if transpose_b { bs[2] } else { bs[1] }, k, "bmm inner dimension");
        let av = contiguous(self.value(a)).into_owned();
        let bv = contiguous(self.value(b)).into_owned();
        let bsz = bs[1] * bs[2];
        let mut out = vec![0.0; groups * m * n];
        for gi in 0..groups {
            let prod = gemm(
                &av[gi * m * k..(gi + 1) * m * k],
                (m, k),
                false,
                &bv[gi * bsz..(gi + 1) * bsz],
                (bs[1], bs[2]),
                transpose_b,
            );
            out[gi * m * n..(gi + 1) * m * n].copy_from_slice(&prod);
        }
        let (ai, bi) = (a.0, b.0);
        self.push(
            from_vec(&[groups, m, n], out),
            vec![ai, bi],
            Box::new(move |g, nodes| {
                let gv = contiguous(g);
                let need_a = nodes[ai].requires_grad;
                let need_b = nodes[bi].requires_grad;
                let mut ga = need_a.then(|| vec![0.0; groups * m * k]);
                let mut gb = need_b.then(|| vec![0.0; groups * bsz]);
                for gi in 0..groups {
                    let gg = &gv[gi * m * n..(gi + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        // ga = g · bᵀ   (or g · b when b was transposed)
                        let p = gemm(gg, (m, n), false, &bv[gi * bsz..(gi + 1) * bsz], (bs[1], bs[2]), !transpose_b);
                        ga[gi * m * k..(gi + 1) * m * k].copy_from_slice(&p);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let aa = &av[gi * m * k..(gi + 1) * m * k];
                        let p = if transpose_b {
                            gemm(gg, (m, n), true, aa, (m, k), false)
                        } else {
                            gemm(aa, (m, k), true, gg, (m, n), false)
                        };
                        gb[gi * bsz..(gi + 1) * bsz].copy_from_slice(&p);
                    }
                }
                vec![ga.map(|v| from_vec(&as_, v)), gb.map(|v| from_vec(&bs, v))]
            }),
        )
    }

    // ----- convolutions ------------------------------------------------

    /// 2-D convolution. `x: [b, h, w, c]`, `w: [kh, kw, c, o]`, `bias: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && ws[2] == xs[3], "conv2d shapes {:?} {:?}", xs, ws);
        let geom = ConvGeom::conv(xs[0], (xs[1], xs[2], xs[3]), (ws[0], ws[1]), stride, pad)
            .expect("conv2d: kernel larger than padded input");
        let o = ws[3];
        let cols = im2col(&contiguous(self.value(x)), &geom);
        let mut out = gemm(&cols, (geom.rows(), geom.cols_width()), false, &contiguous(self.value(w)), (geom.cols_width(), o), false);
        let bv = contiguous(self.value(bias)).into_owned();
        for row in out.chunks_mut(o) {
            for (v, b) in row.iter_mut().zip(&bv) {
                *v += b;
            }
        }
        let (xi, wi) = (x.0, w.0);
        self.push(
            from_vec(&[geom.batch, geom.out_h, geom.out_w, o], out),
            vec![xi, wi, bias.0],
            Box::new(move |g, n| {
                let gv = contiguous(g);
                let rows = geom.rows();
                let width = geom.cols_width();
                let gx = n[xi].requires_grad.then(|| {
                    let wv = contiguous(&n[wi].value);
                    let dcols = gemm(&gv, (rows, o), false, &wv, (width, o), true);
                    from_vec(&xs, col2im(&dcols, &geom))
                });
                let gw = n[wi].requires_grad.then(|| {
                    let cols = im2col(&contiguous(&n[xi].value), &geom);
                    from_vec(&ws, gemm(&cols, (rows, width), true, &gv, (rows, o), false))
                });
                let mut gb = vec![0.0; o];
                for row in gv.chunks(o) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![gx, gw, Some(from_vec(&[o], gb))]
            }),
        )
    }

    /// Transposed 2-D convolution (the adjoint of a strided convolution).
    /// `x: [b, h, w, c]`, `w: [kh, kw, o, c]`, `bias: [o]`; the output has
    /// spatial size `((h - 1) * sh - 2 * ph + kh, (w - 1) * sw - 2 * pw + kw)`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && ws[3] == xs[3], "conv_transpose2d shapes {:?} {:?}", xs, ws);
        let (kh, kw, o, c) = (ws[0], ws[1], ws[2], ws[3]);
        let out_h = (xs[1] - 1) * stride.0 + kh - 2 * pad.0;
        let out_w = (xs[2] - 1) * stride.1 + kw - 2 * pad.1;
        // the adjoint convolution maps [b, out_h, out_w, o] -> [b, h, w, c]
        let geom = ConvGeom::conv(xs[0], (out_h, out_w, o), (kh, kw), stride, pad)
            .expect("conv_transpose2d geometry");
        assert_eq!((geom.out_h, geom.out_w), (xs[1], xs[2]), "conv_transpose2d: inconsistent geometry");
        let rows = geom.rows();
        let width = geom.cols_width();
        let dcols = gemm(&contiguous(self.value(x)), (rows, c), false, &contiguous(self.value(w)), (width, c), true);
        let mut out = col2im(&dcols, &geom);
        let bv = contiguous(self.value(bias)).into_owned();
        for px in out.chunks_mut(o) {
            for (v, b) in px.iter_mut().zip(&bv) {
                *v += b;
            }
        }
        let oshape = [xs[0], out_h, out_w, o];
        let (xi, wi) = (x.0, w.0);
        self.push(
            from_vec(&oshape, out),
            vec![xi, wi, bias.0],
            Box::new(move |g, n| {
                let gv = contiguous(g);
                let gcols = im2col(&gv, &geom);
                let gx = n[xi].requires_grad.then(|| {
                    let wv = contiguous(&n[wi].value);
                    from_vec(&xs, gemm(&gcols, (rows, width), false, &wv, (width, c), false))
                });
                let gw = n[wi].requires_grad.then(|| {
                    let xv = contiguous(&n[xi].value);
                    from_vec(&ws, gemm(&gcols, (rows, width), true, &xv, (rows, c), false))
                });
                let mut gb = vec![0.0; o];
                for px in gv.chunks(o) {
                    for (acc, v) in gb.iter_mut().zip(px) {
                        *acc += v;
                    }
                }
                vec![gx, gw, Some(from_vec(&[o], gb))]
            }),
        )
    }

    // ----- normalizations ------------------------------------------------

    /// Per-sample normalization over every non-batch element followed by a
    /// per-channel (last axis) affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        let batch = xs[0];
        let per = xs.iter().skip(1).product::<usize>();
        let xv = contiguous(self.value(x)).into_owned();
        let gm = contiguous(self.value(gamma)).into_owned();
        let bt = contiguous(self.value(beta)).into_owned();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; batch];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            let s = &xv[b * per..(b + 1) * per];
            let mean = s.iter().sum::<f64>() / per as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[b] = is;
            for i in 0..per {
                let xh = (s[i] - mean) * is;
                xhat[b * per + i] = xh;
                out[b * per + i] = gm[i % c] * xh + bt[i % c];
            }
        }
        let (xi, gi) = (x.0, gamma.0);
        self.push(
            from_vec(&xs, out),
            vec![xi, gi, beta.0],
            Box::new(move |g, n| {
                let gv = contiguous(g);
                let gm = contiguous(&n[gi].value);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; gv.len()];
                for b in 0..batch {
                    let range = b * per..(b + 1) * per;
                    let gs = &gv[range.clone()];
                    let xh = &xhat[range.clone()];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for i in 0..per {
                        let d = gs[i] * gm[i % c];
                        mean_d += d;
                        mean_dx += d * xh[i];
                        dgamma[i % c] += gs[i] * xh[i];
                        dbeta[i % c] += gs[i];
                    }
                    mean_d /= per as f64;
                    mean_dx /= per as f64;
                    for i in 0..per {
                        let d = gs[i] * gm[i % c];
                        dx[b * per + i] = inv_std[b] * (d - mean_d - xh[i] * mean_dx);
                    }
                }
                vec![Some(from_vec(&xs, dx)), Some(from_vec(&[c], dgamma)), Some(from_vec(&[c], dbeta))]
            }),
        )
    }

    /// Scales each contiguous group of `group` elements so that its sum of
    /// squares equals `target`. All-zero groups are left at zero.
    pub fn power_normalize(&mut self, x: Var, group: usize, target: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let xv = contiguous(self.value(x)).into_owned();
        assert!(group > 0 && xv.len() % group == 0, "power_normalize: group size");
        let groups = xv.len() / group;
        let mut scales = vec![0.0; groups];
        let mut sums = vec![0.0; groups];
        let mut out = xv.clone();
        for gi in 0..groups {
            let s: f64 = xv[gi * group..(gi + 1) * group].iter().map(|v| v * v).sum();
            sums[gi] = s;
            let c = if s > 0.0 { (target / s).sqrt() } else { 0.0 };
            scales[gi] = c;
            for v in &mut out[gi * group..(gi + 1) * group] {
                *v *= c;
            }
        }
        self.push(
            from_vec(&xs, out),
            vec![x.0],
            Box::new(move |g, _| {
                let gv = contiguous(g);
                let mut dx = vec![0.0; gv.len()];
                for gi in 0..groups {
                    if sums[gi] <= 0.0 {
                        continue;
                    }
                    let r = gi * group..(gi + 1) * group;
                    let xgr = &xv[r.clone()];
                    let ggr = &gv[r.clone()];
                    let dot: f64 = xgr.iter().zip(ggr).map(|(a, b)| a * b).sum();
                    let c = scales[gi];
                    for ((d, &xi), &gi_) in dx[r].iter_mut().zip(xgr).zip(ggr) {
                        *d = c * gi_ - c * dot / sums[gi] * xi;
                    }
                }
                vec![Some(from_vec(&xs, dx))]
            }),
        )
    }

    /// Softmax over the last axis restricted to entries where `allow` is
    /// true. Rows without any allowed entry produce zeros.
    pub fn masked_softmax(&mut self, x: Var, allow: &ArrayD<bool>) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(allow.shape(), &xs[..], "masked_softmax: mask shape");
        let (rows, last) = split_last(&xs);
        let xv = contiguous(self.value(x)).into_owned();
        let av: Vec<bool> = allow.iter().copied().collect();
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let range = r * last..(r + 1) * last;
            let max = xv[range.clone()]
                .iter()
                .zip(&av[range.clone()])
                .filter(|(_, &a)| a)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for i in range.clone() {
                if av[i] {
                    out[i] = (xv[i] - max).exp();
                    total += out[i];
                }
            }
            for v in &mut out[range] {
                *v /= total;
            }
        }
        let y = out.clone();
        self.push(
            from_vec(&xs, out),
            vec![x.0],
            Box::new(move |g, _| {
                let gv = contiguous(g);
                let mut dx = vec![0.0; gv.len()];
                for r in 0..rows {
                    let range = r * last..(r + 1) * last;
                    let dot: f64 = y[range.clone()].iter().zip(&gv[range.clone()]).map(|(a, b)| a * b).sum();
                    for i in range {
                        dx[i] = y[i] * (gv[i] - dot);
                    }
                }
                vec![Some(from_vec(&xs, dx))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central finite differences of `f` with respect to every entry of
    /// every input, compared against the tape gradient.
    fn check<F>(inputs: Vec<Tensor>, f: F) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|v| g.variable(v.clone())).collect();
            let out = f(&mut g, &vars);
            let s = g.sum_all(out);
            g.scalar(s)
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|v| g.variable(v.clone())).collect();
        let out = f(&mut g, &vars);
        let s = g.sum_all(out);
        let grads = g.backward(s);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].raw_dim()));
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[i] += h;
                let mut minus = inputs.clone();
                minus[k].as_slice_mut().unwrap()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]).mapv(|v| v + 3.0);
        let err = check(vec![a, b], |g, v| {
            let m = g.mul(v[0], v[1]);
            let d = g.div(m, v[1]);
            let s = g.square(d);
            let l = g.log2_1p(s);
            let k = g.leaky_relu(v[0], 0.3);
            let q = g.sub(l, k);
            let q = g.scale(q, 1.7);
            let q = g.offset(q, 0.2);
            g.add(q, v[1])
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let w = rand_tensor(&mut rng, &[2, 3, 4]);
        let err = check(vec![a, w], |g, v| {
            let p = g.permute(v[0], &[2, 0, 1]);
            let r = g.reshape(p, &[4, 6]);
            let s1 = g.slice_axis(r, 1, 1, 3);
            let s2 = g.slice_axis(r, 1, 0, 2);
            let c = g.concat(1, &[s1, s2]);
            let q = g.square(c);
            let sl = g.sum_last(q);
            let wp = g.reshape(v[1], &[4, 6]);
            let ww = g.mul(wp, r);
            let t = g.sum_last(ww);
            g.mul(sl, t)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_and_bmm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5]);
        let err = check(vec![x.clone(), w, b], |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.add_bias(y, v[2]);
            g.square(y)
        });
        assert!(err < 1e-6, "{err}");
        let y = rand_tensor(&mut rng, &[2, 4, 3]);
        let z = rand_tensor(&mut rng, &[2, 5, 4]);
        let err = check(vec![x, y, z], |g, v| {
            let p = g.bmm(v[0], v[1], false);
            let q = g.bmm(v[0], v[2], true);
            let pp = g.square(p);
            let qq = g.square(q);
            let a = g.sum_last(pp);
            let b = g.sum_last(qq);
            g.mul(a, b)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 5, 4, 3]);
        let w = rand_tensor(&mut rng, &[3, 3, 3, 2]);
        let b = rand_tensor(&mut rng, &[2]);
        let err = check(vec![x.clone(), w, b.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], (2, 1), (1, 1));
            g.square(y)
        });
        assert!(err < 1e-6, "{err}");
        let wt = rand_tensor(&mut rng, &[4, 3, 2, 3]);
        let err = check(vec![x, wt, b], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], v[2], (2, 1), (1, 1));
            assert_eq!(g.shape(y), &[2, 10, 4, 2]);
            g.square(y)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for shared weights and zero bias.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 8, 3, 2]);
        let wk = rand_tensor(&mut rng, &[4, 3, 2, 5]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(wk.clone());
        let zb = g.constant(Tensor::zeros(IxDyn(&[5])));
        let y = g.conv2d(xv, wv, zb, (2, 1), (1, 1));
        let yshape = g.shape(y).to_vec();
        let probe = rand_tensor(&mut rng, &yshape);
        let lhs: f64 = (g.value(y) * &probe).sum();
        // conv weights [kh, kw, c, o] are exactly the transposed-conv layout [kh, kw, o', c'] with o'=c, c'=o
        let pv = g.constant(probe);
        let zb2 = g.constant(Tensor::zeros(IxDyn(&[2])));
        let xt = g.conv_transpose2d(pv, wv, zb2, (2, 1), (1, 1));
        let rhs: f64 = (g.value(xt) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn normalization_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 3]);
        let gm = rand_tensor(&mut rng, &[3]);
        let bt = rand_tensor(&mut rng, &[3]);
        let probe = rand_tensor(&mut rng, &[2, 3, 2, 3]);
        let err = check(vec![x.clone(), gm, bt], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            let p = g.constant(probe.clone());
            g.mul(y, p)
        });
        assert!(err < 1e-5, "{err}");
        let err = check(vec![x.clone()], |g, v| {
            let y = g.power_normalize(v[0], 6, 2.0);
            let p = g.constant(probe.clone());
            g.mul(y, p)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn masked_softmax_gradients_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 3, 3]);
        let allow = ArrayD::from_shape_fn(IxDyn(&[2, 3, 3]), |ix| !(ix[1] == 2 || ix[2] == 2));
        let probe = rand_tensor(&mut rng, &[2, 3, 3]);
        let err = check(vec![x.clone()], |g, v| {
            let y = g.masked_softmax(v[0], &allow);
            let p = g.constant(probe.clone());
            g.mul(y, p)
        });
        assert!(err < 1e-6, "{err}");
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.masked_softmax(xv, &allow);
        let yv = g.value(y);
        for b in 0..2 {
            let row: f64 = (0..3).map(|j| yv[[b, 0, j]]).sum();
            assert!((row - 1.0).abs() < 1e-12);
            assert_eq!(yv[[b, 0, 2]], 0.0);
            assert!((0..3).all(|j| yv[[b, 2, j]] == 0.0));
        }
    }

    #[test]
    fn constants_carry_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(IxDyn(&[2])));
        let v = g.variable(Tensor::ones(IxDyn(&[2])));
        let m = g.mul(c, v);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap().as_slice().unwrap(), &[1.0, 1.0]);
    }
}
