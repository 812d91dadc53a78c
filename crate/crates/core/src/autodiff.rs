//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records every operation applied to [`Var`]s. Calling
//! [`Tape::gradients`] walks the record backwards and returns the gradient of a
//! scalar with respect to every node that was created from a trainable leaf.
//! Nodes built only from constants carry no backward closure, so inference
//! through large frozen networks stays cheap.
//!
//! Image tensors use NCHW layout throughout.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayD, ArrayView2, Axis, Ix2, Ix4, IxDyn, ShapeBuilder};

pub type Tensor = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Operation record. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::gradients`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn push_leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Arc::new(value), true)
    }

    /// Constant leaf; no gradient is tracked through it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Arc::new(value), false)
    }

    /// Constant leaf sharing storage with a frozen parameter.
    pub fn constant_arc(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn leaf_arc(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_leaf(value, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Backpropagates from a scalar (single-element) output.
    pub fn gradients(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let out = &nodes[output.id];
        assert_eq!(out.value.len(), 1, "gradients() needs a scalar output");
        grads[output.id] = Some(Tensor::ones(out.value.raw_dim()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    match grads[p].as_mut() {
                        Some(acc) => *acc += &pg,
                        None => grads[p] = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn to4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view().into_dimensionality::<Ix4>().expect("expected a 4-D tensor")
}

fn to2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected a 2-D tensor")
}

fn matmul(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut c);
    c
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        *v.iter().next().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = x.mapv(f);
        let yc = Arc::new(y.clone());
        let xc = x.clone();
        self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out)
                    .and(&*xc)
                    .and(&*yc)
                    .for_each(|o, &x, &y| *o *= df(x, y));
                vec![Some(out)]
            }),
        )
    }

    // ---- elementwise ----

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let y = &*a + &*b;
        self.tape.push(
            y,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let y = &*a - &*b;
        self.tape.push(
            y,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(-g)]),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let y = &*a * &*b;
        self.tape.push(
            y,
            &[self, other],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g * &*b),
                    need[1].then(|| g * &*a),
                ]
            }),
        )
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(self, c: &Tensor) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape(), "add_const: shape mismatch");
        let y = &*a + c;
        self.tape
            .push(y, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// Multiplies elementwise by a constant tensor of the same shape.
    pub fn mul_const(self, c: Tensor) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape(), "mul_const: shape mismatch");
        let y = &*a * &c;
        self.tape
            .push(y, &[self], Box::new(move |g, _| vec![Some(g * &c)]))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let y = self.value().mapv(|v| v * c);
        self.tape
            .push(y, &[self], Box::new(move |g, _| vec![Some(g * c)]))
    }

    /// Multiplies every entry by a single-element variable.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1, "scale_by needs a single-element factor");
        let k = *sv.iter().next().unwrap();
        let y = x.mapv(|v| v * k);
        let sshape = sv.raw_dim();
        self.tape.push(
            y,
            &[self, s],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g * k),
                    need[1].then(|| Tensor::from_elem(sshape.clone(), (g * &*x).sum())),
                ]
            }),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let y = self.value().mapv(|v| v + c);
        self.tape
            .push(y, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x >= 0.0 { x } else { x * slope },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    /// Clamps to `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    // ---- reductions ----

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.raw_dim();
        let y = Tensor::from_elem(IxDyn(&[]), x.sum());
        self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let gv = *g.iter().next().unwrap();
                vec![Some(Tensor::from_elem(shape.clone(), gv))]
            }),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Euclidean norm of all entries; the subgradient at zero is taken as zero.
    pub fn norm2(self) -> Var<'t> {
        let x = self.value();
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y = Tensor::from_elem(IxDyn(&[]), n);
        self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let gv = *g.iter().next().unwrap();
                if n > 0.0 {
                    vec![Some(x.mapv(|v| gv * v / n))]
                } else {
                    vec![Some(Tensor::zeros(x.raw_dim()))]
                }
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&old))
                        .unwrap(),
                )]
            }),
        )
    }

    /// Flattens everything after the first axis.
    pub fn flatten(self) -> Var<'t> {
        let s = self.shape();
        let rest: usize = s[1..].iter().product();
        self.reshape(&[s[0], rest])
    }

    /// Row `i` of a 2-D tensor as a `1 × D` tensor.
    pub fn row(self, i: usize) -> Var<'t> {
        let x = self.value();
        let x2 = to2(&x);
        let (r, d) = x2.dim();
        assert!(i < r, "row index out of range");
        let y = x2.slice(ndarray::s![i..i + 1, ..]).to_owned().into_dyn();
        self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut out = Array2::<f64>::zeros((r, d));
                out.row_mut(i).assign(&to2(g).row(0));
                vec![Some(out.into_dyn())]
            }),
        )
    }

    /// Repeats a `1 × D` tensor into `n × D`.
    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        let x = self.value();
        let x2 = to2(&x);
        assert_eq!(x2.nrows(), 1, "broadcast_rows needs a single row");
        let d = x2.ncols();
        let y = x2.broadcast((n, d)).unwrap().to_owned().into_dyn();
        self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                vec![Some(to2(g).sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn())]
            }),
        )
    }

    /// Replicates a single-channel NCHW tensor to `c` channels.
    pub fn repeat_channels(self, c: usize) -> Var<'t> {
        let x = self.value();
        let x4 = to4(&x);
        let (n, c0, h, w) = x4.dim();
        assert_eq!(c0, 1, "repeat_channels needs one input channel");
        let y = x4.broadcast((n, c, h, w)).unwrap().to_owned().into_dyn();
        self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    to4(g).sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn(),
                )]
            }),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let y = matmul(&to2(&a), &to2(&b)).into_dyn();
        self.tape.push(
            y,
            &[self, other],
            Box::new(move |g, need| {
                let g2 = to2(g);
                vec![
                    need[0].then(|| matmul(&g2, &to2(&b).t()).into_dyn()),
                    need[1].then(|| matmul(&to2(&a).t(), &g2).into_dyn()),
                ]
            }),
        )
    }

    /// Adds a length-D bias to every row of an `N × D` tensor.
    pub fn add_row_bias(self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let x2 = to2(&x);
        let b1 = b
            .view()
            .into_shape_with_order(x2.ncols())
            .expect("bias length mismatch");
        let y = (&x2 + &b1).into_dyn();
        self.tape.push(
            y,
            &[self, bias],
            Box::new(|g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| to2(g).sum_axis(Axis(0)).into_dyn()),
                ]
            }),
        )
    }

    /// `x · Wᵀ + b` for `x: N × in`, `W: out × in`, `b: out`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let y = matmul(&to2(&x), &to2(&w).t()).into_dyn();
        let out = self.tape.push(
            y,
            &[self, weight],
            Box::new(move |g, need| {
                let g2 = to2(g);
                vec![
                    need[0].then(|| matmul(&g2, &to2(&w)).into_dyn()),
                    need[1].then(|| matmul(&g2.t(), &to2(&x)).into_dyn()),
                ]
            }),
        );
        match bias {
            Some(b) => out.add_row_bias(b),
            None => out,
        }
    }

    // ---- per-channel (NCHW) ----

    /// Adds a per-channel bias of length C.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let x4 = to4(&x);
        let c = x4.dim().1;
        let b4 = b
            .view()
            .into_shape_with_order((1, c, 1, 1))
            .expect("channel bias length mismatch");
        let y = (&x4 + &b4).into_dyn();
        self.tape.push(
            y,
            &[self, bias],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| {
                        to4(g)
                            .sum_axis(Axis(3))
                            .sum_axis(Axis(2))
                            .sum_axis(Axis(0))
                            .into_dyn()
                    }),
                ]
            }),
        )
    }

    /// Multiplies each channel by a factor. `s` is either `C` (shared across the
    /// batch) or `N × C`.
    pub fn scale_channels(self, s: Var<'t>) -> Var<'t> {
        let (x, sv) = (self.value(), s.value());
        let x4 = to4(&x);
        let (n, c, _, _) = x4.dim();
        let per_sample = sv.ndim() == 2;
        let s4 = if per_sample {
            assert_eq!(sv.shape(), &[n, c], "scale_channels: shape mismatch");
            sv.view().into_shape_with_order((n, c, 1, 1)).unwrap()
        } else {
            assert_eq!(sv.len(), c, "scale_channels: shape mismatch");
            sv.view().into_shape_with_order((1, c, 1, 1)).unwrap()
        };
        let y = (&x4 * &s4).into_dyn();
        let s_shape = sv.shape().to_vec();
        self.tape.push(
            y,
            &[self, s],
            Box::new(move |g, need| {
                let g4 = to4(g);
                let gx = need[0].then(|| {
                    let s4 = if per_sample {
                        sv.view().into_shape_with_order((n, c, 1, 1)).unwrap()
                    } else {
                        sv.view().into_shape_with_order((1, c, 1, 1)).unwrap()
                    };
                    (&g4 * &s4).into_dyn()
                });
                let gs = need[1].then(|| {
                    let prod = &g4 * &to4(&x);
                    let per = prod.sum_axis(Axis(3)).sum_axis(Axis(2));
                    if per_sample {
                        per.into_dyn()
                    } else {
                        per.sum_axis(Axis(0))
                            .into_shape_with_order(IxDyn(&s_shape))
                            .unwrap()
                    }
                });
                vec![gx, gs]
            }),
        )
    }

    /// `(x - shift_c) * mul_c` with constant per-channel coefficients.
    pub fn affine_channels_const(self, mul: &[f64], shift: &[f64]) -> Var<'t> {
        let x = self.value();
        let x4 = to4(&x);
        let c = x4.dim().1;
        assert!(mul.len() == c && shift.len() == c, "affine_channels_const: length mismatch");
        let mut y = x4.to_owned();
        for ch in 0..c {
            let (m, s) = (mul[ch], shift[ch]);
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - s) * m);
        }
        let mul = mul.to_vec();
        self.tape.push(
            y.into_dyn(),
            &[self],
            Box::new(move |g, _| {
                let mut out = to4(g).to_owned();
                for (ch, &m) in mul.iter().enumerate() {
                    out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * m);
                }
                vec![Some(out.into_dyn())]
            }),
        )
    }

    /// Training-mode batch normalization without affine parameters. Statistics
    /// run over every axis except 1 (channels / features). Returns the
    /// normalized tensor and the biased batch mean and variance.
    pub fn batch_norm(self, eps: f64) -> (Var<'t>, Vec<f64>, Vec<f64>) {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(shape.len() == 2 || shape.len() == 4, "batch_norm: 2-D or 4-D input");
        let c = shape[1];
        let m = x.len() / c;
        // Move channels to axis 0 so each channel is a contiguous lane.
        let lanes = channel_lanes(&x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut xhat = Array2::<f64>::zeros((c, m));
        for ch in 0..c {
            let lane = lanes.row(ch);
            let mu = lane.sum() / m as f64;
            let v = lane.iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>() / m as f64;
            mean[ch] = mu;
            var[ch] = v;
            let inv = 1.0 / (v + eps).sqrt();
            xhat.row_mut(ch).assign(&lane.mapv(|a| (a - mu) * inv));
        }
        let y = from_channel_lanes(&xhat, &shape);
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let gl = channel_lanes(g);
                let mut dx = Array2::<f64>::zeros((c, m));
                for ch in 0..c {
                    let gr = gl.row(ch);
                    let xr = xhat.row(ch);
                    let sg = gr.sum();
                    let sgx = gr.dot(&xr);
                    let k = invstd[ch] / m as f64;
                    ndarray::Zip::from(dx.row_mut(ch))
                        .and(&gr)
                        .and(&xr)
                        .for_each(|d, &gv, &xv| *d = k * (m as f64 * gv - sg - xv * sgx));
                }
                vec![Some(from_channel_lanes(&dx, &shape))]
            }),
        );
        (out, mean, var)
    }

    // ---- spatial (NCHW) ----

    /// 2-D cross-correlation with symmetric zero padding.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::new(to4(&x).dim(), to4(&w).dim(), stride, pad);
        let y = conv_forward(&to4(&x), &to4(&w), &geom).into_dyn();
        self.tape.push(
            y,
            &[self, weight],
            Box::new(move |g, need| {
                let (gx, gw) = conv_backward(&to4(&x), &to4(&w), &to4(g), &geom, need[0], need[1]);
                vec![gx.map(|a| a.into_dyn()), gw.map(|a| a.into_dyn())]
            }),
        )
    }

    /// Max pooling with `-inf` padding. Ties resolve to the first element in
    /// scan order.
    pub fn max_pool2d(self, k: usize, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        let x4 = to4(&x);
        let (n, c, h, w) = x4.dim();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut y = Array4::<f64>::zeros((n, c, oh, ow));
        let mut arg = vec![0usize; n * c * oh * ow];
        let xs = x4.as_standard_layout();
        let xsl = xs.as_slice().unwrap();
        let ysl = y.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if bi == usize::MAX || xsl[idx] > best {
                                best = xsl[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = nc * oh * ow + oy * ow + ox;
                    ysl[o] = best;
                    arg[o] = bi;
                }
            }
        }
        let dims = (n, c, h, w);
        self.tape.push(
            y.into_dyn(),
            &[self],
            Box::new(move |g, _| {
                let mut dx = Array4::<f64>::zeros(dims);
                let dsl = dx.as_slice_mut().unwrap();
                let gs = g.as_standard_layout();
                for (o, &gv) in gs.iter().enumerate() {
                    dsl[arg[o]] += gv;
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Mean over the spatial axes: `N×C×H×W → N×C`.
    pub fn global_avg_pool(self) -> Var<'t> {
        let x = self.value();
        let x4 = to4(&x);
        let (n, c, h, w) = x4.dim();
        let hw = (h * w) as f64;
        let y = x4.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v / hw).into_dyn();
        self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let g2 = to2(g);
                let gb = g2
                    .mapv(|v| v / hw)
                    .into_shape_with_order((n, c, 1, 1))
                    .unwrap();
                vec![Some(gb.broadcast((n, c, h, w)).unwrap().to_owned().into_dyn())]
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, f: usize) -> Var<'t> {
        let x = self.value();
        let x4 = to4(&x);
        let (n, c, h, w) = x4.dim();
        let y = Array4::from_shape_fn((n, c, h * f, w * f), |(a, b, i, j)| x4[[a, b, i / f, j / f]]);
        self.tape.push(
            y.into_dyn(),
            &[self],
            Box::new(move |g, _| {
                let g4 = to4(g);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ((a, b, i, j), &v) in g4.indexed_iter() {
                    dx[[a, b, i / f, j / f]] += v;
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Inserts a zero after every sample along both spatial axes:
    /// `H×W → 2H×2W` with the input at even positions.
    pub fn zero_upsample2(self) -> Var<'t> {
        let x = self.value();
        let x4 = to4(&x);
        let (n, c, h, w) = x4.dim();
        let mut y = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        y.slice_mut(ndarray::s![.., .., ..;2, ..;2]).assign(&x4);
        self.tape.push(
            y.into_dyn(),
            &[self],
            Box::new(|g, _| {
                vec![Some(to4(g).slice(ndarray::s![.., .., ..;2, ..;2]).to_owned().into_dyn())]
            }),
        )
    }

    /// Zero padding on the spatial axes.
    pub fn pad2d(self, top: usize, bottom: usize, left: usize, right: usize) -> Var<'t> {
        let x = self.value();
        let x4 = to4(&x);
        let (n, c, h, w) = x4.dim();
        let mut y = Array4::<f64>::zeros((n, c, h + top + bottom, w + left + right));
        y.slice_mut(ndarray::s![.., .., top..top + h, left..left + w]).assign(&x4);
        self.tape.push(
            y.into_dyn(),
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    to4(g)
                        .slice(ndarray::s![.., .., top..top + h, left..left + w])
                        .to_owned()
                        .into_dyn(),
                )]
            }),
        )
    }

    /// Valid cross-correlation of every channel with the same constant 2-D
    /// kernel.
    pub fn depthwise_fir(self, kernel: &Array2<f64>) -> Var<'t> {
        let x = self.value();
        let x4 = to4(&x);
        let (n, c, h, w) = x4.dim();
        let (kh, kw) = kernel.dim();
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let xs = x4.as_standard_layout();
        let xsl = xs.as_slice().unwrap();
        let ks: Vec<f64> = kernel.iter().copied().collect();
        let mut y = Array4::<f64>::zeros((n, c, oh, ow));
        {
            let ysl = y.as_slice_mut().unwrap();
            for nc in 0..n * c {
                let xb = &xsl[nc * h * w..(nc + 1) * h * w];
                let yb = &mut ysl[nc * oh * ow..(nc + 1) * oh * ow];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = ks[ky * kw + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let xr = &xb[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                            let yr = &mut yb[oy * ow..(oy + 1) * ow];
                            for (yv, xv) in yr.iter_mut().zip(xr) {
                                *yv += kv * xv;
                            }
                        }
                    }
                }
            }
        }
        self.tape.push(
            y.into_dyn(),
            &[self],
            Box::new(move |g, _| {
                let gs = g.as_standard_layout();
                let gsl = gs.as_slice().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let dsl = dx.as_slice_mut().unwrap();
                for nc in 0..n * c {
                    let gb = &gsl[nc * oh * ow..(nc + 1) * oh * ow];
                    let db = &mut dsl[nc * h * w..(nc + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kv = ks[ky * kw + kx];
                            if kv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let dr = &mut db[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                                let gr = &gb[oy * ow..(oy + 1) * ow];
                                for (dv, gv) in dr.iter_mut().zip(gr) {
                                    *dv += kv * gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Separable linear resampling `y[n,c] = R_h · x[n,c] · R_wᵀ`.
    pub fn resample(self, rh: Arc<Array2<f64>>, rw: Arc<Array2<f64>>) -> Var<'t> {
        let x = self.value();
        let x4 = to4(&x);
        let (n, c, h, w) = x4.dim();
        assert_eq!(rh.ncols(), h, "resample: row matrix mismatch");
        assert_eq!(rw.ncols(), w, "resample: column matrix mismatch");
        let (oh, ow) = (rh.nrows(), rw.nrows());
        let mut y = Array4::<f64>::zeros((n, c, oh, ow));
        for a in 0..n {
            for b in 0..c {
                let t = matmul(&rh.view(), &x4.slice(ndarray::s![a, b, .., ..]));
                let r = matmul(&t.view(), &rw.t());
                y.slice_mut(ndarray::s![a, b, .., ..]).assign(&r);
            }
        }
        self.tape.push(
            y.into_dyn(),
            &[self],
            Box::new(move |g, _| {
                let g4 = to4(g);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for a in 0..n {
                    for b in 0..c {
                        let t = matmul(&rh.t(), &g4.slice(ndarray::s![a, b, .., ..]));
                        let r = matmul(&t.view(), &rw.view());
                        dx.slice_mut(ndarray::s![a, b, .., ..]).assign(&r);
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }
}

fn channel_lanes(x: &Tensor) -> Array2<f64> {
    let shape = x.shape();
    let c = shape[1];
    let m = x.len() / c;
    let mut perm: Vec<usize> = (0..shape.len()).collect();
    perm.swap(0, 1);
    let moved = x.view().permuted_axes(IxDyn(&perm));
    let owned = moved.as_standard_layout().into_owned();
    owned.into_shape_with_order((c, m)).unwrap()
}

fn from_channel_lanes(lanes: &Array2<f64>, shape: &[usize]) -> Tensor {
    let mut moved_shape = shape.to_vec();
    moved_shape.swap(0, 1);
    let t = lanes
        .clone()
        .into_shape_with_order(IxDyn(&moved_shape))
        .unwrap();
    let mut perm: Vec<usize> = (0..shape.len()).collect();
    perm.swap(0, 1);
    t.permuted_axes(IxDyn(&perm)).as_standard_layout().into_owned()
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(
        (n, c, h, w): (usize, usize, usize, usize),
        (o, wc, kh, kw): (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Self {
        assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvGeom { n, c, h, w, o, kh, kw, stride, pad, oh, ow }
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Output rows per im2col chunk, bounding the column buffer.
    fn rows_per_chunk(&self) -> usize {
        const BUDGET: usize = 1 << 22;
        (BUDGET / (self.ckk() * self.ow).max(1)).clamp(1, self.oh)
    }
}

fn im2col(x: &[f64], g: &ConvGeom, r0: usize, r1: usize, cols: &mut Array2<f64>) {
    let npos = (r1 - r0) * g.ow;
    let dst = cols.as_slice_mut().unwrap();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let out = &mut dst[row * npos..(row + 1) * npos];
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let seg = &mut out[(oy - r0) * g.ow..(oy - r0 + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, s) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *s = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &Array2<f64>, g: &ConvGeom, r0: usize, r1: usize, dx: &mut [f64]) {
    let npos = (r1 - r0) * g.ow;
    let src = cols.as_slice().unwrap();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let inp = &src[row * npos..(row + 1) * npos];
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let seg = &inp[(oy - r0) * g.ow..(oy - r0 + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in seg.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(
    x: &ndarray::ArrayView4<'_, f64>,
    w: &ndarray::ArrayView4<'_, f64>,
    g: &ConvGeom,
) -> Array4<f64> {
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let ws = w.as_standard_layout();
    let w2 = ws.view().into_shape_with_order((g.o, g.ckk())).unwrap();
    let mut y = Array4::<f64>::zeros((g.n, g.o, g.oh, g.ow));
    let chunk = g.rows_per_chunk();
    let plane_in = g.c * g.h * g.w;
    for n in 0..g.n {
        let xn = &xsl[n * plane_in..(n + 1) * plane_in];
        let mut r0 = 0;
        while r0 < g.oh {
            let r1 = (r0 + chunk).min(g.oh);
            let npos = (r1 - r0) * g.ow;
            let mut cols = Array2::<f64>::zeros((g.ckk(), npos));
            im2col(xn, g, r0, r1, &mut cols);
            let out = matmul(&w2, &cols.view());
            for o in 0..g.o {
                let dst = y.slice_mut(ndarray::s![n, o, r0..r1, ..]);
                let src = out.row(o);
                let src = src.into_shape_with_order((r1 - r0, g.ow)).unwrap();
                let mut dst = dst;
                dst.assign(&src);
            }
            r0 = r1;
        }
    }
    y
}

fn conv_backward(
    x: &ndarray::ArrayView4<'_, f64>,
    w: &ndarray::ArrayView4<'_, f64>,
    gy: &ndarray::ArrayView4<'_, f64>,
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Array4<f64>>, Option<Array4<f64>>) {
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let ws = w.as_standard_layout();
    let w2 = ws.view().into_shape_with_order((g.o, g.ckk())).unwrap();
    let mut dx = need_x.then(|| Array4::<f64>::zeros((g.n, g.c, g.h, g.w)));
    let mut dw2 = need_w.then(|| Array2::<f64>::zeros((g.o, g.ckk())));
    let chunk = g.rows_per_chunk();
    let plane_in = g.c * g.h * g.w;
    for n in 0..g.n {
        let xn = &xsl[n * plane_in..(n + 1) * plane_in];
        let mut r0 = 0;
        while r0 < g.oh {
            let r1 = (r0 + chunk).min(g.oh);
            let npos = (r1 - r0) * g.ow;
            let mut gchunk = Array2::<f64>::zeros((g.o, npos).f());
            for o in 0..g.o {
                let src = gy.slice(ndarray::s![n, o, r0..r1, ..]);
                let flat: Vec<f64> = src.iter().copied().collect();
                gchunk
                    .row_mut(o)
                    .assign(&ndarray::ArrayView1::from(&flat[..]));
            }
            if let Some(dw2) = dw2.as_mut() {
                let mut cols = Array2::<f64>::zeros((g.ckk(), npos));
                im2col(xn, g, r0, r1, &mut cols);
                general_mat_mul(1.0, &gchunk, &cols.t(), 1.0, dw2);
            }
            if let Some(dx) = dx.as_mut() {
                let dcols = matmul(&w2.t(), &gchunk.view());
                let dcols = dcols.as_standard_layout().into_owned();
                let dsl = dx.as_slice_mut().unwrap();
                col2im(&dcols, g, r0, r1, &mut dsl[n * plane_in..(n + 1) * plane_in]);
            }
            r0 = r1;
        }
    }
    let dw = dw2.map(|d| d.into_shape_with_order((g.o, g.c, g.kh, g.kw)).unwrap());
    (dx, dw)
}

/// Bilinear interpolation matrix `out × in` with half-pixel centres and edge
/// clamping. Equal sizes give the identity.
pub fn bilinear_matrix(out: usize, inp: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((out, inp));
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let lam = src - i0 as f64;
        let lam = if i0 == inp - 1 { 0.0 } else { lam };
        m[[i, i0]] += 1.0 - lam;
        m[[i, i1]] += lam;
    }
    m
}
