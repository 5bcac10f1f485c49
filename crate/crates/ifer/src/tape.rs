//! Reverse-mode automatic differentiation on dynamically shaped f64 arrays.
//!
//! A `Graph` is a flat tape of nodes in topological (insertion) order. Each op
//! records its parents and a backward closure that maps the output gradient to
//! parent gradients. Training code builds a fresh graph per step, calls
//! `backward` on a scalar loss node and reads gradients off leaf nodes.

use ndarray::{concatenate, Array2, Array4, ArrayD, Axis, IxDyn, Slice};

pub type Arr = ArrayD<f64>;

/// Handle to a node in a `Graph`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Id(pub usize);

type BackwardFn = Box<dyn Fn(&Arr, &[&Arr]) -> Vec<Arr>>;

struct Node {
    value: Arr,
    parents: Vec<Id>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `g` down to `shape` (undo numpy-style broadcasting).
fn reduce_to_shape(g: &Arr, shape: &[usize]) -> Arr {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            let summed = out.sum_axis(Axis(ax));
            out = summed.insert_axis(Axis(ax));
        }
    }
    out.as_standard_layout().to_owned()
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

    pub fn value(&self, id: Id) -> &Arr {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar_value(&self, id: Id) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: Arr, parents: Vec<Id>, backward: Option<BackwardFn>) -> Id {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Id(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arr) -> Id {
        self.push(value, vec![], None)
    }

    pub fn scalar(&mut self, v: f64) -> Id {
        self.leaf(Arr::from_elem(IxDyn(&[]), v))
    }

    /// Stop-gradient: a fresh leaf holding a copy of `a`'s value.
    pub fn detach(&mut self, a: Id) -> Id {
        let v = self.value(a).clone();
        self.leaf(v)
    }

    // ---- elementwise / broadcasting ----

    fn binary_bc(
        &mut self,
        a: Id,
        b: Id,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Id {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let shape = broadcast_shape(&sa, &sb);
        let va = self.value(a).broadcast(IxDyn(&shape)).unwrap().to_owned();
        let vb = self.value(b).broadcast(IxDyn(&shape)).unwrap().to_owned();
        let mut out = va.clone();
        out.zip_mut_with(&vb, |x, &y| *x = f(*x, y));
        let shape2 = shape.clone();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, pv| {
                let va = pv[0].broadcast(IxDyn(&shape2)).unwrap().to_owned();
                let vb = pv[1].broadcast(IxDyn(&shape2)).unwrap().to_owned();
                let mut ga = Arr::zeros(IxDyn(&shape2));
                let mut gb = Arr::zeros(IxDyn(&shape2));
                for (((ga_e, gb_e), (&x, &y)), &gv) in ga
                    .iter_mut()
                    .zip(gb.iter_mut())
                    .zip(va.iter().zip(vb.iter()))
                    .zip(g.iter())
                {
                    *ga_e = gv * dfa(x, y);
                    *gb_e = gv * dfb(x, y);
                }
                vec![
                    reduce_to_shape(&ga, pv[0].shape()),
                    reduce_to_shape(&gb, pv[1].shape()),
                ]
            })),
        )
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        self.binary_bc(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        self.binary_bc(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        self.binary_bc(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&mut self, a: Id, b: Id) -> Id {
        self.binary_bc(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    fn unary(
        &mut self,
        a: Id,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Id {
        let out = self.value(a).mapv(f);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, pv| {
                let mut ga = g.clone();
                ga.zip_mut_with(pv[0], |gv, &x| *gv *= df(x));
                vec![ga]
            })),
        )
    }

    pub fn neg(&mut self, a: Id) -> Id {
        self.unary(a, |x| -x, |_| -1.0)
    }

    pub fn scale(&mut self, a: Id, c: f64) -> Id {
        self.unary(a, move |x| c * x, move |_| c)
    }

    pub fn add_scalar(&mut self, a: Id, c: f64) -> Id {
        self.unary(a, move |x| x + c, |_| 1.0)
    }

    pub fn square(&mut self, a: Id) -> Id {
        self.unary(a, |x| x * x, |x| 2.0 * x)
    }

    /// Elementwise power; callers must keep the base positive for fractional `p`.
    pub fn powf(&mut self, a: Id, p: f64) -> Id {
        self.unary(a, move |x| x.powf(p), move |x| p * x.powf(p - 1.0))
    }

    pub fn ln(&mut self, a: Id) -> Id {
        self.unary(a, |x| x.ln(), |x| 1.0 / x)
    }

    pub fn exp(&mut self, a: Id) -> Id {
        self.unary(a, |x| x.exp(), |x| x.exp())
    }

    pub fn leaky_relu(&mut self, a: Id, slope: f64) -> Id {
        self.unary(
            a,
            move |x| if x >= 0.0 { x } else { slope * x },
            move |x| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    pub fn relu(&mut self, a: Id) -> Id {
        self.leaky_relu(a, 0.0)
    }

    /// Hard clamp; zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Id, lo: f64, hi: f64) -> Id {
        self.unary(
            a,
            move |x| x.clamp(lo, hi),
            move |x| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Id) -> Id {
        let s = self.value(a).sum();
        let shape = self.value(a).shape().to_vec();
        self.push(
            Arr::from_elem(IxDyn(&[]), s),
            vec![a],
            Some(Box::new(move |g, _| {
                let gv = *g.iter().next().unwrap();
                vec![Arr::from_elem(IxDyn(&shape), gv)]
            })),
        )
    }

    /// Sum of all elements, accumulated in sorted value order so the result
    /// is invariant under any permutation of the input elements.
    pub fn sum_all_sorted(&mut self, a: Id) -> Id {
        let mut vals: Vec<f64> = self.value(a).iter().cloned().collect();
        vals.sort_by(f64::total_cmp);
        let s: f64 = vals.iter().sum();
        let shape = self.value(a).shape().to_vec();
        self.push(
            Arr::from_elem(IxDyn(&[]), s),
            vec![a],
            Some(Box::new(move |g, _| {
                let gv = *g.iter().next().unwrap();
                vec![Arr::from_elem(IxDyn(&shape), gv)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Id) -> Id {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, keeping it as a length-1 dim (broadcast-friendly).
    pub fn sum_axis_keep(&mut self, a: Id, axis: usize) -> Id {
        let v = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let dim = self.value(a).shape()[axis];
        self.push(
            v.as_standard_layout().to_owned(),
            vec![a],
            Some(Box::new(move |g, pv| {
                let mut ga = Arr::zeros(pv[0].raw_dim());
                let gb = g.broadcast(pv[0].raw_dim()).unwrap();
                ga.zip_mut_with(&gb.to_owned(), |o, &x| *o = x);
                let _ = dim;
                vec![ga]
            })),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Id, shape: &[usize]) -> Id {
        let v = self
            .value(a)
            .as_standard_layout()
            .to_owned()
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, pv| {
                vec![g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape(pv[0].raw_dim())
                    .unwrap()]
            })),
        )
    }

    pub fn permute(&mut self, a: Id, axes: &[usize]) -> Id {
        let axes_v = axes.to_vec();
        let v = self
            .value(a)
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inv = vec![0usize; axes_v.len()];
        for (i, &ax) in axes_v.iter().enumerate() {
            inv[ax] = i;
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _| {
                vec![g
                    .clone()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    pub fn concat(&mut self, parts: &[Id], axis: usize) -> Id {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[axis]).collect();
        self.push(
            v.as_standard_layout().to_owned(),
            parts.to_vec(),
            Some(Box::new(move |g, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &s in &sizes {
                    let sl = g.slice_axis(Axis(axis), Slice::from(off..off + s));
                    out.push(sl.as_standard_layout().to_owned());
                    off += s;
                }
                out
            })),
        )
    }

    pub fn slice_axis(&mut self, a: Id, axis: usize, start: usize, len: usize) -> Id {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, pv| {
                let mut ga = Arr::zeros(pv[0].raw_dim());
                ga.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![ga]
            })),
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let va = to2(self.value(a));
        let vb = to2(self.value(b));
        let out = va.dot(&vb);
        self.push(
            out.into_dyn(),
            vec![a, b],
            Some(Box::new(move |g, pv| {
                let g2 = to2(g);
                let va = to2(pv[0]);
                let vb = to2(pv[1]);
                let ga = g2.dot(&vb.t());
                let gb = va.t().dot(&g2);
                vec![ga.into_dyn(), gb.into_dyn()]
            })),
        )
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Id, b: Id) -> Id {
        let va = self.value(a);
        let vb = self.value(b);
        let (bsz, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let n = vb.shape()[2];
        assert_eq!(vb.shape()[0], bsz);
        assert_eq!(vb.shape()[1], k);
        let mut out = Arr::zeros(IxDyn(&[bsz, m, n]));
        for i in 0..bsz {
            let ai = to2(&va.index_axis(Axis(0), i).to_owned());
            let bi = to2(&vb.index_axis(Axis(0), i).to_owned());
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, pv| {
                let mut ga = Arr::zeros(pv[0].raw_dim());
                let mut gb = Arr::zeros(pv[1].raw_dim());
                for i in 0..bsz {
                    let gi = to2(&g.index_axis(Axis(0), i).to_owned());
                    let ai = to2(&pv[0].index_axis(Axis(0), i).to_owned());
                    let bi = to2(&pv[1].index_axis(Axis(0), i).to_owned());
                    ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                vec![ga, gb]
            })),
        )
    }

    // ---- softmax family ----

    pub fn softmax_last(&mut self, a: Id) -> Id {
        let v = softmax_last_arr(self.value(a));
        let out = v.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _| {
                // dx = p * (g - sum(g*p))
                let mut ga = g * &v;
                let last = v.ndim() - 1;
                let dot = ga.sum_axis(Axis(last)).insert_axis(Axis(last));
                let dotb = dot.broadcast(v.raw_dim()).unwrap().to_owned();
                ga = &v * &(g - &dotb);
                vec![ga.as_standard_layout().to_owned()]
            })),
        )
    }

    pub fn log_softmax_last(&mut self, a: Id) -> Id {
        let p = softmax_last_arr(self.value(a));
        let out = p.mapv(f64::ln);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _| {
                let last = p.ndim() - 1;
                let gsum = g.sum_axis(Axis(last)).insert_axis(Axis(last));
                let gsumb = gsum.broadcast(p.raw_dim()).unwrap().to_owned();
                let ga = g - &(&p * &gsumb);
                vec![ga.as_standard_layout().to_owned()]
            })),
        )
    }

    // ---- image ops (NCHW) ----

    /// 2-D convolution, input `[N,Cin,H,W]`, weight `[Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Id, w: Id, stride: usize, pad: usize) -> Id {
        let xv = to4(self.value(x));
        let wv = to4(self.value(w));
        let (n, cin, h, wd) = xv.dim();
        let (cout, cin_w, kh, kw) = wv.dim();
        assert_eq!(
            cin, cin_w,
            "conv2d: input has {} channels but kernel expects {}",
            cin, cin_w
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let cols = im2col(&xv, kh, kw, stride, pad, ho, wo); // [Cin*kh*kw, N*ho*wo]
        let w2 = wv
            .to_owned()
            .into_shape((cout, cin * kh * kw))
            .unwrap();
        let y2 = w2.dot(&cols); // [Cout, N*ho*wo]
        let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
        for i in 0..n {
            for c in 0..cout {
                for a in 0..ho {
                    for b in 0..wo {
                        out[[i, c, a, b]] = y2[[c, i * ho * wo + a * wo + b]];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x, w],
            Some(Box::new(move |g, pv| {
                let gv = to4(g);
                let wv = to4(pv[1]);
                let mut g2 = Array2::<f64>::zeros((cout, n * ho * wo));
                for i in 0..n {
                    for c in 0..cout {
                        for a in 0..ho {
                            for b in 0..wo {
                                g2[[c, i * ho * wo + a * wo + b]] = gv[[i, c, a, b]];
                            }
                        }
                    }
                }
                let w2 = wv.to_owned().into_shape((cout, cin * kh * kw)).unwrap();
                let gw2 = g2.dot(&cols.t()); // [Cout, Cin*kh*kw]
                let gcols = w2.t().dot(&g2); // [Cin*kh*kw, N*ho*wo]
                let gx = col2im(&gcols, n, cin, h, wd, kh, kw, stride, pad, ho, wo);
                let gw = gw2.into_shape((cout, cin, kh, kw)).unwrap();
                vec![gx.into_dyn(), gw.into_dyn()]
            })),
        )
    }

    /// 2x2 max-pool with stride 2.
    pub fn maxpool2(&mut self, x: Id) -> Id {
        let xv = to4(self.value(x));
        let (n, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even sides");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((n, c, ho, wo));
        let mut arg = vec![0u8; n * c * ho * wo];
        let mut idx = 0;
        for i in 0..n {
            for ch in 0..c {
                for a in 0..ho {
                    for b in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut off = 0u8;
                        for (o, (da, db)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                            let v = xv[[i, ch, 2 * a + da, 2 * b + db]];
                            if v > best {
                                best = v;
                                off = o as u8;
                            }
                        }
                        out[[i, ch, a, b]] = best;
                        arg[idx] = off;
                        idx += 1;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g, pv| {
                let gv = to4(g);
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                let mut idx = 0;
                for i in 0..n {
                    for ch in 0..c {
                        for a in 0..ho {
                            for b in 0..wo {
                                let off = arg[idx] as usize;
                                idx += 1;
                                let (da, db) = (off / 2, off % 2);
                                gx[[i, ch, 2 * a + da, 2 * b + db]] += gv[[i, ch, a, b]];
                            }
                        }
                    }
                }
                let _ = pv;
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Nearest-neighbour 2x upsample.
    pub fn upsample2(&mut self, x: Id) -> Id {
        let xv = to4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for i in 0..n {
            for ch in 0..c {
                for a in 0..2 * h {
                    for b in 0..2 * w {
                        out[[i, ch, a, b]] = xv[[i, ch, a / 2, b / 2]];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g, _| {
                let gv = to4(g);
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        for a in 0..2 * h {
                            for b in 0..2 * w {
                                gx[[i, ch, a / 2, b / 2]] += gv[[i, ch, a, b]];
                            }
                        }
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Id) -> Id {
        let xv = to4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let mut out = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                out[[i, ch]] = xv
                    .index_axis(Axis(0), i)
                    .index_axis(Axis(0), ch)
                    .mean()
                    .unwrap();
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g, _| {
                let g2 = to2(g);
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                let inv = 1.0 / (h * w) as f64;
                for i in 0..n {
                    for ch in 0..c {
                        let gv = g2[[i, ch]] * inv;
                        gx.index_axis_mut(Axis(0), i)
                            .index_axis_mut(Axis(0), ch)
                            .fill(gv);
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Spatial gather on a `[C,H,W]` map: `out[c,i,j] = x[c, src[i*ow+j].0, src[i*ow+j].1]`.
    /// Covers flips, crops and nearest-neighbour resizes in one differentiable op.
    pub fn gather_hw(&mut self, x: Id, src: Vec<(usize, usize)>, oh: usize, ow: usize) -> Id {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "gather_hw expects [C,H,W]");
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(src.len(), oh * ow);
        let mut out = Arr::zeros(IxDyn(&[c, oh, ow]));
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let (si, sj) = src[i * ow + j];
                    out[[ch, i, j]] = xv[[ch, si, sj]];
                }
            }
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _| {
                let mut gx = Arr::zeros(IxDyn(&[c, h, w]));
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let (si, sj) = src[i * ow + j];
                            gx[[ch, si, sj]] += g[[ch, i, j]];
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    // ---- backprop ----

    /// Gradients of scalar node `root` w.r.t. every node; `None` where no path.
    pub fn backward(&self, root: Id) -> Vec<Option<Arr>> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(f) = &self.nodes[id].backward {
                let pvals: Vec<&Arr> = self.nodes[id]
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect();
                let pgrads = f(&g, &pvals);
                assert_eq!(pgrads.len(), self.nodes[id].parents.len());
                for (p, pg) in self.nodes[id].parents.clone().into_iter().zip(pgrads) {
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        grads
    }
}

fn softmax_last_arr(a: &Arr) -> Arr {
    let last = a.ndim() - 1;
    let mx = a.map_axis(Axis(last), |row| {
        row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    });
    let mxb = mx.insert_axis(Axis(last));
    let mut e = a - &mxb.broadcast(a.raw_dim()).unwrap().to_owned();
    e.mapv_inplace(f64::exp);
    // denominators accumulate in sorted order so a permutation of the lane
    // produces a bitwise-permuted result
    let s = e
        .map_axis(Axis(last), |row| {
            let mut v: Vec<f64> = row.iter().cloned().collect();
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>()
        })
        .insert_axis(Axis(last));
    let sb = s.broadcast(a.raw_dim()).unwrap().to_owned();
    (&e / &sb).as_standard_layout().to_owned()
}

fn to2(a: &Arr) -> Array2<f64> {
    a.as_standard_layout()
        .to_owned()
        .into_dimensionality()
        .expect("expected 2-d array")
}

fn to4(a: &Arr) -> Array4<f64> {
    a.as_standard_layout()
        .to_owned()
        .into_dimensionality()
        .expect("expected 4-d array")
}

fn im2col(
    x: &Array4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (n, cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, n * ho * wo));
    for i in 0..n {
        for c in 0..cin {
            for ka in 0..kh {
                for kb in 0..kw {
                    let row = c * kh * kw + ka * kw + kb;
                    for a in 0..ho {
                        let sa = (a * stride + ka) as isize - pad as isize;
                        if sa < 0 || sa >= h as isize {
                            continue;
                        }
                        for b in 0..wo {
                            let sb = (b * stride + kb) as isize - pad as isize;
                            if sb < 0 || sb >= w as isize {
                                continue;
                            }
                            cols[[row, i * ho * wo + a * wo + b]] =
                                x[[i, c, sa as usize, sb as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let mut x = Array4::<f64>::zeros((n, cin, h, w));
    for i in 0..n {
        for c in 0..cin {
            for ka in 0..kh {
                for kb in 0..kw {
                    let row = c * kh * kw + ka * kw + kb;
                    for a in 0..ho {
                        let sa = (a * stride + ka) as isize - pad as isize;
                        if sa < 0 || sa >= h as isize {
                            continue;
                        }
                        for b in 0..wo {
                            let sb = (b * stride + kb) as isize - pad as isize;
                            if sb < 0 || sb >= w as isize {
                                continue;
                            }
                            x[[i, c, sa as usize, sb as usize]] +=
                                cols[[row, i * ho * wo + a * wo + b]];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-10..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    /// Central finite differences against the analytic gradient of `build`'s
    /// scalar output w.r.t. each leaf.
    fn grad_check(leaves: &[Arr], build: impl Fn(&mut Graph, &[Id]) -> Id, tol: f64) {
        let mut g = Graph::new();
        let ids: Vec<Id> = leaves.iter().map(|l| g.leaf(l.clone())).collect();
        let root = build(&mut g, &ids);
        let grads = g.backward(root);
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let ga = grads[ids[li].0]
                .clone()
                .unwrap_or_else(|| Arr::zeros(leaf.raw_dim()));
            for flat in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let ids2: Vec<Id> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, l)| {
                            let mut v = l.clone();
                            if j == li {
                                *v.iter_mut().nth(flat).unwrap() += delta;
                            }
                            g2.leaf(v)
                        })
                        .collect();
                    let r = build(&mut g2, &ids2);
                    g2.scalar_value(r)
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = *ga.iter().nth(flat).unwrap();
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "grad mismatch leaf {li} idx {flat}: analytic {an}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4]);
        grad_check(&[a, b], |g, ids| {
            let m = g.mul(ids[0], ids[1]);
            let s = g.add(m, ids[0]);
            let e = g.square(s);
            g.mean_all(e)
        }, 1e-6);
    }

    #[test]
    fn matmul_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5, 4]);
        grad_check(&[a, b], |g, ids| {
            let y = g.matmul(ids[0], ids[1]);
            let p = g.softmax_last(y);
            let lp = g.ln(p);
            g.sum_all(lp)
        }, 1e-5);
    }

    #[test]
    fn bmm_permute_reshape_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[2, 4, 3]);
        grad_check(&[a, b], |g, ids| {
            let y = g.bmm(ids[0], ids[1]);
            let p = g.permute(y, &[1, 0, 2]);
            let r = g.reshape(p, &[18]);
            let sq = g.square(r);
            g.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn conv_pool_upsample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let w = randn(&mut rng, &[2, 3, 3, 3]);
        grad_check(&[x, w], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 1, 1);
            let u = g.upsample2(y);
            let p = g.maxpool2(u);
            let p2 = g.maxpool2(p);
            let a = g.leaky_relu(p2, 0.2);
            let gp = g.global_avg_pool(a);
            let s = g.square(gp);
            g.sum_all(s)
        }, 1e-5);
    }

    #[test]
    fn strided_conv_matches_dense_oracle() {
        // stride-2 conv vs direct summation
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[1, 2, 6, 6]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let wi = g.leaf(w.clone());
        let y = g.conv2d(xi, wi, 2, 1);
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[1, 3, 3, 3]);
        for c in 0..3 {
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ka in 0..3 {
                            for kb in 0..3 {
                                let sa = (2 * a + ka) as isize - 1;
                                let sb = (2 * b + kb) as isize - 1;
                                if sa >= 0 && sa < 6 && sb >= 0 && sb < 6 {
                                    acc += x[[0, ci, sa as usize, sb as usize]]
                                        * w[[c, ci, ka, kb]];
                                }
                            }
                        }
                    }
                    assert!((yv[[0, c, a, b]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn concat_slice_gather_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, &[2, 3, 3]);
        let b = randn(&mut rng, &[1, 3, 3]);
        grad_check(&[a, b], |g, ids| {
            let c = g.concat(&[ids[0], ids[1]], 0);
            let s = g.slice_axis(c, 0, 1, 2);
            let first = g.slice_axis(s, 0, 0, 1);
            let map = g.reshape(first, &[1, 3, 3]);
            // horizontal flip via gather
            let mut src = Vec::new();
            for i in 0..3 {
                for j in 0..3 {
                    src.push((i, 2 - j));
                }
            }
            let f = g.gather_hw(map, src, 3, 3);
            let sq = g.square(f);
            g.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Arr::from_elem(IxDyn(&[2]), 3.0));
        let d = g.detach(a);
        let m = g.mul(a, d);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        // d(a*const)/da = const = 3, and nothing flows to a through d
        let ga = grads[a.0].as_ref().unwrap();
        assert!(ga.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn log_softmax_and_sum_axis_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randn(&mut rng, &[4, 7]);
        grad_check(&[a], |g, ids| {
            let lp = g.log_softmax_last(ids[0]);
            let s = g.sum_axis_keep(lp, 1);
            let sq = g.square(s);
            g.mean_all(sq)
        }, 1e-5);
    }
}
