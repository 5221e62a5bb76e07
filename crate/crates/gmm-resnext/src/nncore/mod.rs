//! Minimal reverse-mode autodiff over dense arrays: just the operator set the
//! embedding network needs (1-D convolution incl. depthwise, batch norm,
//! pointwise nonlinearities, pooling, concatenation, and the loss head).
//!
//! A `Tape` records one forward pass; `backward` walks it in reverse and
//! accumulates parameter gradients into the `ParamTree`. The engine is
//! generic over `f32`/`f64` so gradient checks can run entirely at f64.

pub mod gradcheck;
pub mod params;

use std::rc::Rc;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn};

pub use params::{Leaf, ParamTree};

pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<ArrayD<T>>>;

struct Node<T> {
    value: Rc<ArrayD<T>>,
    parents: Vec<usize>,
    backward: Option<BackFn<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<ArrayD<T>>>,
    /// (node id, parameter name) for gradient write-back.
    bindings: Vec<(usize, String)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<T>, parents: Vec<usize>, backward: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected a scalar node");
        *val.iter().next().unwrap()
    }

    /// Gradient of the last `backward` call w.r.t. `v` (None if unreachable).
    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, vec![], None)
    }

    /// Put a named parameter on the tape; its gradient flows back into the
    /// tree on `backward`.
    pub fn param(&mut self, tree: &ParamTree<T>, name: &str) -> Var {
        let v = self.push(tree.get(name).value.clone(), vec![], None);
        self.bindings.push((v.0, name.to_string()));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &*self.nodes[a.0].value + &*self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &*self.nodes[a.0].value - &*self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), g.mapv(|v| -v)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let av = Rc::clone(&self.nodes[a.0].value);
        let bv = Rc::clone(&self.nodes[b.0].value);
        let value = &*av * &*bv;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![g * &*bv, g * &*av])),
        )
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * k);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| vec![g.mapv(|v| v * k)])),
        )
    }

    /// Broadcast-add a 1-D bias along axis 1 (channels of B x C x T, or
    /// features of B x F).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let b = self.value(bias).clone().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xs[1], b.len(), "bias length must match axis 1");
        let mut value = (*self.nodes[x.0].value).clone();
        for mut lane in value.axis_iter_mut(Axis(1)) {
            let _ = &mut lane;
        }
        // manual broadcast along axis 1
        for (c, bv) in b.iter().enumerate() {
            value.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + *bv);
        }
        let ndim = xs.len();
        self.push(
            value,
            vec![x.0, bias.0],
            Some(Box::new(move |g| {
                let mut db = ArrayD::zeros(IxDyn(&[g.shape()[1]]));
                for c in 0..g.shape()[1] {
                    db[c] = g.index_axis(Axis(1), c).iter().cloned().sum::<T>();
                }
                let _ = ndim;
                vec![g.clone(), db]
            })),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = Rc::clone(&self.nodes[x.0].value);
        let value = xv.mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(&*xv).for_each(|d, &v| {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                });
                vec![dx]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0]
            .value
            .mapv(|v| T::one() / (T::one() + (-v).exp()));
        let out = Rc::new(value);
        let out_c = Rc::clone(&out);
        self.nodes.push(Node {
            value: out,
            parents: vec![x.0],
            backward: Some(Box::new(move |g| {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(&*out_c).for_each(|d, &y| {
                    *d = *d * y * (T::one() - y);
                });
                vec![dx]
            })),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let xv = Rc::clone(&self.nodes[x.0].value);
        let value = xv.mapv(|v| v * v);
        let two = T::from_f64(2.0);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g| vec![g * &xv.mapv(|v| v * two)])),
        )
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.sqrt());
        let out = Rc::new(value);
        let out_c = Rc::clone(&out);
        let half = T::from_f64(0.5);
        self.nodes.push(Node {
            value: out,
            parents: vec![x.0],
            backward: Some(Box::new(move |g| {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(&*out_c).for_each(|d, &y| {
                    *d = *d * half / y;
                });
                vec![dx]
            })),
        });
        Var(self.nodes.len() - 1)
    }

    /// Elementwise max(x, floor); gradient passes only where x > floor.
    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        let xv = Rc::clone(&self.nodes[x.0].value);
        let value = xv.mapv(|v| v.max(floor));
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(&*xv).for_each(|d, &v| {
                    if v <= floor {
                        *d = T::zero();
                    }
                });
                vec![dx]
            })),
        )
    }

    /// (B x F) . (F x G) -> B x G
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = Rc::clone(&self.nodes[a.0].value);
        let bv = Rc::clone(&self.nodes[b.0].value);
        let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
        let value = a2.dot(&b2).into_dyn();
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    g2.dot(&b2.t()).into_dyn(),
                    a2.t().dot(&g2).into_dyn(),
                ]
            })),
        )
    }

    /// (B x F) . (K x F)^T -> B x K
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = Rc::clone(&self.nodes[a.0].value);
        let bv = Rc::clone(&self.nodes[b.0].value);
        let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
        let value = a2.dot(&b2.t()).into_dyn();
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&b2).into_dyn(), g2.t().dot(&a2).into_dyn()]
            })),
        )
    }

    /// Cross-correlation over time. x: B x Cin x T, w: Cout x (Cin/groups) x K.
    /// Depthwise is groups == Cin with Cout == Cin.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Var {
        let xv = Rc::clone(&self.nodes[x.0].value);
        let wv = Rc::clone(&self.nodes[w.0].value);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let w3 = wv.view().into_dimensionality::<Ix3>().unwrap();
        let (bsz, cin, t) = x3.dim();
        let (cout, cin_g, k) = w3.dim();
        assert_eq!(cin % groups, 0, "Cin not divisible by groups");
        assert_eq!(cout % groups, 0, "Cout not divisible by groups");
        assert_eq!(cin_g, cin / groups, "weight in-channel shape mismatch");
        assert!(t + 2 * padding >= k, "kernel larger than padded input");
        let t_out = (t + 2 * padding - k) / stride + 1;
        let cout_g = cout / groups;

        let value = conv1d_value(&x3.to_owned(), &w3.to_owned(), stride, padding, groups);
        let conv = self.push(
            value.into_dyn(),
            vec![x.0, w.0],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
                let w3 = wv.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((bsz, cin, t));
                let mut dw = ndarray::Array3::<T>::zeros((cout, cin_g, k));
                for b in 0..bsz {
                    for gi in 0..groups {
                        // dw[o] += sum_t g[o,t] * x[c, t*stride + kk - p]
                        for og in 0..cout_g {
                            let o = gi * cout_g + og;
                            for cg in 0..cin_g {
                                let c = gi * cin_g + cg;
                                for kk in 0..k {
                                    let mut acc = T::zero();
                                    for to in 0..t_out {
                                        let ti = to * stride + kk;
                                        if ti < padding || ti - padding >= t {
                                            continue;
                                        }
                                        acc = acc + g3[[b, o, to]] * x3[[b, c, ti - padding]];
                                    }
                                    dw[[o, cg, kk]] = dw[[o, cg, kk]] + acc;
                                }
                            }
                        }
                        // dx[c, ti] += sum_o,kk w[o,c,kk] * g[o, to] where ti = to*stride+kk-p
                        for og in 0..cout_g {
                            let o = gi * cout_g + og;
                            for cg in 0..cin_g {
                                let c = gi * cin_g + cg;
                                for to in 0..t_out {
                                    let gv = g3[[b, o, to]];
                                    for kk in 0..k {
                                        let ti = to * stride + kk;
                                        if ti < padding || ti - padding >= t {
                                            continue;
                                        }
                                        dx[[b, c, ti - padding]] =
                                            dx[[b, c, ti - padding]] + w3[[o, cg, kk]] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx.into_dyn(), dw.into_dyn()]
            })),
        );
        match bias {
            Some(b) => self.add_bias(conv, b),
            None => conv,
        }
    }

    /// Batch normalization over (batch, time) per channel for B x C x T input.
    /// Train mode uses batch statistics and updates the running buffers in
    /// place; eval mode reads the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut ArrayD<T>,
        running_var: &mut ArrayD<T>,
        mode: Mode,
        eps: T,
        momentum: T,
    ) -> Var {
        let xv = Rc::clone(&self.nodes[x.0].value);
        let gv = Rc::clone(&self.nodes[gamma.0].value);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let (bsz, c, t) = x3.dim();
        let n = T::from_f64((bsz * t) as f64);

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let lane = x3.index_axis(Axis(1), ci);
                    let m: T = lane.iter().cloned().sum::<T>() / n;
                    let v: T = lane.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
                    mean[ci] = m;
                    var[ci] = v;
                }
                for ci in 0..c {
                    running_mean[ci] =
                        (T::one() - momentum) * running_mean[ci] + momentum * mean[ci];
                    running_var[ci] = (T::one() - momentum) * running_var[ci] + momentum * var[ci];
                }
                (mean, var)
            }
            Mode::Eval => (
                (0..c).map(|ci| running_mean[ci]).collect(),
                (0..c).map(|ci| running_var[ci]).collect(),
            ),
        };
        let sigma: Vec<T> = var.iter().map(|&v| (v + eps).sqrt()).collect();

        let mut xhat = ndarray::Array3::<T>::zeros((bsz, c, t));
        for ci in 0..c {
            let lane = x3.index_axis(Axis(1), ci);
            let mut out = xhat.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut out).and(&lane).for_each(|o, &v| {
                *o = (v - mean[ci]) / sigma[ci];
            });
        }
        let xhat = Rc::new(xhat);
        let beta_v = Rc::clone(&self.nodes[beta.0].value);
        let mut value = ndarray::Array3::<T>::zeros((bsz, c, t));
        for ci in 0..c {
            let ga = gv[ci];
            let be = beta_v[ci];
            let lane = xhat.index_axis(Axis(1), ci);
            let mut out = value.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut out).and(&lane).for_each(|o, &v| {
                *o = ga * v + be;
            });
        }

        let xhat_c = Rc::clone(&xhat);
        let gv_c = Rc::clone(&gv);
        self.push(
            value.into_dyn(),
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((bsz, c, t));
                let mut dgamma = ArrayD::zeros(IxDyn(&[c]));
                let mut dbeta = ArrayD::zeros(IxDyn(&[c]));
                for ci in 0..c {
                    let gl = g3.index_axis(Axis(1), ci);
                    let xh = xhat_c.index_axis(Axis(1), ci);
                    let mut dg = T::zero();
                    let mut db = T::zero();
                    for (a, b) in gl.iter().zip(xh.iter()) {
                        dg = dg + *a * *b;
                        db = db + *a;
                    }
                    dgamma[ci] = dg;
                    dbeta[ci] = db;
                    let ga = gv_c[ci];
                    let mut out = dx.index_axis_mut(Axis(1), ci);
                    match mode {
                        Mode::Train => {
                            // dx = gamma/sigma * (g - mean(g) - xhat * mean(g*xhat))
                            let mean_g = db / n;
                            let mean_gx = dg / n;
                            ndarray::Zip::from(&mut out)
                                .and(&gl)
                                .and(&xh)
                                .for_each(|o, &gvv, &xhv| {
                                    *o = ga / sigma[ci] * (gvv - mean_g - xhv * mean_gx);
                                });
                        }
                        Mode::Eval => {
                            ndarray::Zip::from(&mut out).and(&gl).for_each(|o, &gvv| {
                                *o = ga / sigma[ci] * gvv;
                            });
                        }
                    }
                }
                vec![dx.into_dyn(), dgamma, dbeta]
            })),
        )
    }

    /// Softmax over the time axis of a B x C x T tensor.
    pub fn softmax_time(&mut self, x: Var) -> Var {
        let x3 = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .to_owned();
        let (bsz, c, t) = x3.dim();
        let mut y = ndarray::Array3::<T>::zeros((bsz, c, t));
        for b in 0..bsz {
            for ci in 0..c {
                let lane = x3.slice(ndarray::s![b, ci, ..]);
                let m = lane.iter().cloned().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = lane.iter().map(|&v| (v - m).exp()).collect();
                let z: T = exps.iter().cloned().sum();
                for (ti, e) in exps.iter().enumerate() {
                    y[[b, ci, ti]] = *e / z;
                }
            }
        }
        let y = Rc::new(y.into_dyn());
        let y_c = Rc::clone(&y);
        self.nodes.push(Node {
            value: y,
            parents: vec![x.0],
            backward: Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let y3 = y_c.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((bsz, c, t));
                for b in 0..bsz {
                    for ci in 0..c {
                        let mut dot = T::zero();
                        for ti in 0..t {
                            dot = dot + g3[[b, ci, ti]] * y3[[b, ci, ti]];
                        }
                        for ti in 0..t {
                            dx[[b, ci, ti]] = y3[[b, ci, ti]] * (g3[[b, ci, ti]] - dot);
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        });
        Var(self.nodes.len() - 1)
    }

    /// Mean over time: B x C x T -> B x C.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let t = self.value(x).shape()[2];
        let s = self.sum_time(x);
        self.scale(s, T::one() / T::from_f64(t as f64))
    }

    /// Sum over time: B x C x T -> B x C.
    pub fn sum_time(&mut self, x: Var) -> Var {
        let x3 = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .to_owned();
        let (bsz, c, t) = x3.dim();
        let value = x3.sum_axis(Axis(2)).into_dyn();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((bsz, c, t));
                for b in 0..bsz {
                    for ci in 0..c {
                        let gv = g2[[b, ci]];
                        for ti in 0..t {
                            dx[[b, ci, ti]] = gv;
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Elementwise product of B x C x T with per-channel gates B x C.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let xv = Rc::clone(&self.nodes[x.0].value);
        let sv = Rc::clone(&self.nodes[s.0].value);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let s2 = sv.view().into_dimensionality::<Ix2>().unwrap();
        let (bsz, c, t) = x3.dim();
        assert_eq!(s2.dim(), (bsz, c));
        let mut value = ndarray::Array3::<T>::zeros((bsz, c, t));
        for b in 0..bsz {
            for ci in 0..c {
                let gate = s2[[b, ci]];
                for ti in 0..t {
                    value[[b, ci, ti]] = x3[[b, ci, ti]] * gate;
                }
            }
        }
        self.push(
            value.into_dyn(),
            vec![x.0, s.0],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
                let s2 = sv.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((bsz, c, t));
                let mut ds = ndarray::Array2::<T>::zeros((bsz, c));
                for b in 0..bsz {
                    for ci in 0..c {
                        let gate = s2[[b, ci]];
                        let mut acc = T::zero();
                        for ti in 0..t {
                            dx[[b, ci, ti]] = g3[[b, ci, ti]] * gate;
                            acc = acc + g3[[b, ci, ti]] * x3[[b, ci, ti]];
                        }
                        ds[[b, ci]] = acc;
                    }
                }
                vec![dx.into_dyn(), ds.into_dyn()]
            })),
        )
    }

    /// Elementwise product of B x C x T with per-frame weights B x 1 x T.
    pub fn scale_frames(&mut self, x: Var, a: Var) -> Var {
        let xv = Rc::clone(&self.nodes[x.0].value);
        let av = Rc::clone(&self.nodes[a.0].value);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
        let (bsz, c, t) = x3.dim();
        assert_eq!(a3.dim(), (bsz, 1, t));
        let mut value = ndarray::Array3::<T>::zeros((bsz, c, t));
        for b in 0..bsz {
            for ci in 0..c {
                for ti in 0..t {
                    value[[b, ci, ti]] = x3[[b, ci, ti]] * a3[[b, 0, ti]];
                }
            }
        }
        self.push(
            value.into_dyn(),
            vec![x.0, a.0],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((bsz, c, t));
                let mut da = ndarray::Array3::<T>::zeros((bsz, 1, t));
                for b in 0..bsz {
                    for ti in 0..t {
                        let w = a3[[b, 0, ti]];
                        let mut acc = T::zero();
                        for ci in 0..c {
                            dx[[b, ci, ti]] = g3[[b, ci, ti]] * w;
                            acc = acc + g3[[b, ci, ti]] * x3[[b, ci, ti]];
                        }
                        da[[b, 0, ti]] = acc;
                    }
                }
                vec![dx.into_dyn(), da.into_dyn()]
            })),
        )
    }

    /// Concatenate along axis 1 (channels for 3-D, features for 2-D).
    pub fn concat_axis1(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty());
        let views: Vec<ArrayViewD<T>> = inputs.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        let widths: Vec<usize> = inputs.iter().map(|v| self.value(*v).shape()[1]).collect();
        let parents: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(
            value,
            parents,
            Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    out.push(
                        g.slice_axis(Axis(1), ndarray::Slice::from(off..off + w))
                            .to_owned(),
                    );
                    off += w;
                }
                out
            })),
        )
    }

    /// Row-wise L2 normalization of a B x F matrix.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = Rc::clone(&self.nodes[x.0].value);
        let x2 = xv.view().into_dimensionality::<Ix2>().unwrap();
        let (bsz, f) = x2.dim();
        let mut norms = vec![T::zero(); bsz];
        let mut value = ndarray::Array2::<T>::zeros((bsz, f));
        for b in 0..bsz {
            let n: T = x2.row(b).iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[b] = n;
            for j in 0..f {
                value[[b, j]] = x2[[b, j]] / n;
            }
        }
        let y = Rc::new(value.into_dyn());
        let y_c = Rc::clone(&y);
        self.nodes.push(Node {
            value: y,
            parents: vec![x.0],
            backward: Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let y2 = y_c.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array2::<T>::zeros((bsz, f));
                for b in 0..bsz {
                    let dot: T = g2.row(b).iter().zip(y2.row(b).iter()).map(|(&a, &c)| a * c).sum();
                    for j in 0..f {
                        dx[[b, j]] = (g2[[b, j]] - y2[[b, j]] * dot) / norms[b];
                    }
                }
                vec![dx.into_dyn()]
            })),
        });
        Var(self.nodes.len() - 1)
    }

    /// Replace each row's target logit cos(theta) with cos(theta + m),
    /// falling back to cos(theta) - m*sin(m) once theta + m would pass pi.
    pub fn aam_margin(&mut self, logits: Var, labels: &[usize], m: T) -> Var {
        let lv = Rc::clone(&self.nodes[logits.0].value);
        let l2 = lv.view().into_dimensionality::<Ix2>().unwrap();
        let (bsz, _k) = l2.dim();
        assert_eq!(labels.len(), bsz);
        let cos_m = m.cos();
        let sin_m = m.sin();
        let guard = (T::from_f64(std::f64::consts::PI) - m).cos();
        let eps = T::from_f64(1e-7);
        let mut value = l2.to_owned();
        for (b, &lab) in labels.iter().enumerate() {
            let c = l2[[b, lab]].min(T::one() - eps).max(-T::one() + eps);
            value[[b, lab]] = if c > guard {
                c * cos_m - (T::one() - c * c).sqrt() * sin_m
            } else {
                c - m * sin_m
            };
        }
        let labels_owned = labels.to_vec();
        self.push(
            value.into_dyn(),
            vec![logits.0],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let l2 = lv.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = g2.to_owned();
                for (b, &lab) in labels_owned.iter().enumerate() {
                    let c = l2[[b, lab]].min(T::one() - eps).max(-T::one() + eps);
                    let d = if c > guard {
                        cos_m + c * sin_m / (T::one() - c * c).sqrt()
                    } else {
                        T::one()
                    };
                    dx[[b, lab]] = dx[[b, lab]] * d;
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Mean cross-entropy of logits (B x K) against class indices. Scalar out.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = Rc::clone(&self.nodes[logits.0].value);
        let l2 = lv.view().into_dimensionality::<Ix2>().unwrap();
        let (bsz, k) = l2.dim();
        assert_eq!(labels.len(), bsz);
        let mut loss = T::zero();
        let mut probs = ndarray::Array2::<T>::zeros((bsz, k));
        for (b, &lab) in labels.iter().enumerate() {
            let row = l2.row(b);
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[[b, j]] = (row[j] - mx).exp() / z;
            }
            loss = loss - (row[lab] - mx - z.ln());
        }
        let n = T::from_f64(bsz as f64);
        loss = loss / n;
        let labels_owned = labels.to_vec();
        let probs = Rc::new(probs);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![logits.0],
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                let mut dx = (*probs).clone();
                for (b, &lab) in labels_owned.iter().enumerate() {
                    dx[[b, lab]] = dx[[b, lab]] - T::one();
                }
                dx.mapv_inplace(|v| v * gs / n);
                vec![dx.into_dyn()]
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let shape = self.value(x).raw_dim();
        let total: T = self.value(x).iter().cloned().sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            vec![x.0],
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(shape.clone(), gs)]
            })),
        )
    }

    /// Reverse pass from a scalar loss; parameter gradients accumulate into
    /// the tree the parameters were taken from.
    pub fn backward(&mut self, loss: Var, tree: &mut ParamTree<T>) {
        let lv = self.value(loss);
        assert_eq!(lv.len(), 1, "loss must be a scalar");
        assert!(lv.iter().next().unwrap().is_finite(), "loss is not finite");
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].backward {
                let parent_grads = back(&g);
                let parents = self.nodes[i].parents.clone();
                assert_eq!(parent_grads.len(), parents.len());
                for (p, pg) in parents.into_iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => *acc = &*acc + &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        for (node, name) in &self.bindings {
            if let Some(g) = &grads[*node] {
                let leaf = tree.get_mut(name);
                leaf.grad = &leaf.grad + g;
            }
        }
        self.grads = grads;
    }
}

fn conv1d_value<T: Scalar>(
    x: &ndarray::Array3<T>,
    w: &ndarray::Array3<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> ndarray::Array3<T> {
    let (bsz, _cin, t) = x.dim();
    let (cout, cin_g, k) = w.dim();
    let t_out = (t + 2 * padding - k) / stride + 1;
    let cout_g = cout / groups;
    let mut y = ndarray::Array3::<T>::zeros((bsz, cout, t_out));
    for b in 0..bsz {
        for gi in 0..groups {
            for og in 0..cout_g {
                let o = gi * cout_g + og;
                for to in 0..t_out {
                    let mut acc = T::zero();
                    for cg in 0..cin_g {
                        let c = gi * cin_g + cg;
                        for kk in 0..k {
                            let ti = to * stride + kk;
                            if ti < padding || ti - padding >= t {
                                continue;
                            }
                            acc = acc + w[[o, cg, kk]] * x[[b, c, ti - padding]];
                        }
                    }
                    y[[b, o, to]] = acc;
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rnd3(shape: (usize, usize, usize), seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0)).into_dyn()
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rnd3((2, 3, 5), 1));
        // K=1 identity over channels
        let mut w = Array3::<f64>::zeros((3, 3, 1));
        for c in 0..3 {
            w[[c, c, 0]] = 1.0;
        }
        let wv = tape.constant(w.into_dyn());
        let y = tape.conv1d(x, wv, None, 1, 0, 1);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv1d_impulse_response() {
        let mut tape = Tape::<f64>::new();
        let mut x = Array3::<f64>::zeros((1, 1, 7));
        x[[0, 0, 3]] = 1.0;
        let xv = tape.constant(x.into_dyn());
        let kernel = [0.25, 0.5, -1.0];
        let mut w = Array3::<f64>::zeros((1, 1, 3));
        for (i, &v) in kernel.iter().enumerate() {
            w[[0, 0, i]] = v;
        }
        let wv = tape.constant(w.into_dyn());
        let y = tape.conv1d(xv, wv, None, 1, 1, 1);
        let yv = tape.value(y);
        // cross-correlation: y[t] = sum_k w[k] x[t + k - 1], so the impulse
        // at t0 = 3 reproduces the kernel reversed around t0
        assert_eq!(yv.shape(), &[1, 1, 7]);
        assert_eq!(yv[[0, 0, 2]], -1.0);
        assert_eq!(yv[[0, 0, 3]], 0.5);
        assert_eq!(yv[[0, 0, 4]], 0.25);
    }

    #[test]
    fn conv1d_matches_naive_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let (bsz, cin, cout, t, k, p) = (2, 4, 6, 8, 3, 1);
        let x = Array3::from_shape_fn((bsz, cin, t), |_| rng.gen_range(-1.0..1.0));
        let w = Array3::from_shape_fn((cout, cin, k), |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone().into_dyn());
        let wv = tape.constant(w.clone().into_dyn());
        let y = tape.conv1d(xv, wv, None, 1, p, 1);
        // six nested loops, straight from the definition
        for b in 0..bsz {
            for o in 0..cout {
                for to in 0..t {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for kk in 0..k {
                            let ti = to as isize + kk as isize - p as isize;
                            if ti >= 0 && (ti as usize) < t {
                                acc += w[[o, c, kk]] * x[[b, c, ti as usize]];
                            }
                        }
                    }
                    let got = tape.value(y)[[b, o, to]];
                    assert!((got - acc).abs() < 1e-6, "b={b} o={o} t={to}");
                }
            }
        }
    }

    #[test]
    fn grouped_conv_equals_channel_shards() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (bsz, cin, cout, t, k, groups) = (2, 6, 6, 5, 3, 3);
        let x = Array3::from_shape_fn((bsz, cin, t), |_| rng.gen_range(-1.0..1.0));
        let w = Array3::from_shape_fn((cout, cin / groups, k), |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone().into_dyn());
        let wv = tape.constant(w.clone().into_dyn());
        let y = tape.conv1d(xv, wv, None, 1, 1, groups);
        // per-group independent convs
        for g in 0..groups {
            let xs = x.slice(ndarray::s![.., g * 2..(g + 1) * 2, ..]).to_owned();
            let ws = w.slice(ndarray::s![g * 2..(g + 1) * 2, .., ..]).to_owned();
            let mut t2 = Tape::<f64>::new();
            let xv2 = t2.constant(xs.into_dyn());
            let wv2 = t2.constant(ws.into_dyn());
            let y2 = t2.conv1d(xv2, wv2, None, 1, 1, 1);
            for b in 0..bsz {
                for o in 0..2 {
                    for ti in 0..t {
                        assert_eq!(
                            tape.value(y)[[b, g * 2 + o, ti]],
                            t2.value(y2)[[b, o, ti]]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn batchnorm_train_standardizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rnd3((3, 4, 6), 2));
        let gamma = tape.constant(ArrayD::from_elem(IxDyn(&[4]), 1.0));
        let beta = tape.constant(ArrayD::zeros(IxDyn(&[4])));
        let mut rm = ArrayD::zeros(IxDyn(&[4]));
        let mut rv = ArrayD::from_elem(IxDyn(&[4]), 1.0);
        let y = tape.batchnorm(x, gamma, beta, &mut rm, &mut rv, Mode::Train, 1e-5, 0.1);
        let y3 = tape.value(y).view().into_dimensionality::<Ix3>().unwrap();
        for c in 0..4 {
            let lane = y3.index_axis(Axis(1), c);
            let mean: f64 = lane.iter().sum::<f64>() / 18.0;
            let var: f64 = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_eval_matches_train_when_stats_equal() {
        let xd = rnd3((3, 2, 5), 9);
        let x3 = xd.view().into_dimensionality::<Ix3>().unwrap();
        let mut mean = ArrayD::zeros(IxDyn(&[2]));
        let mut var = ArrayD::zeros(IxDyn(&[2]));
        for c in 0..2 {
            let lane = x3.index_axis(Axis(1), c);
            let m: f64 = lane.iter().sum::<f64>() / 15.0;
            mean[c] = m;
            var[c] = lane.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / 15.0;
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xd.clone());
        let gamma = tape.constant(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let beta = tape.constant(ArrayD::zeros(IxDyn(&[2])));
        let mut rm0 = ArrayD::zeros(IxDyn(&[2]));
        let mut rv0 = ArrayD::from_elem(IxDyn(&[2]), 1.0);
        let y_train = tape.batchnorm(x, gamma, beta, &mut rm0, &mut rv0, Mode::Train, 1e-5, 0.1);
        let y_eval = tape.batchnorm(x, gamma, beta, &mut mean, &mut var, Mode::Eval, 1e-5, 0.1);
        for (a, b) in tape.value(y_train).iter().zip(tape.value(y_eval).iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_linear_case() {
        // loss = sum(w * x) => grad w = x
        let mut tree = ParamTree::<f64>::new();
        let xd = rnd3((1, 2, 3), 4);
        tree.insert("w", ArrayD::from_elem(xd.raw_dim(), 0.5), true, true);
        let mut tape = Tape::new();
        let w = tape.param(&tree, "w");
        let x = tape.constant(xd.clone());
        let prod = tape.mul(w, x);
        let loss = tape.sum_all(prod);
        tape.backward(loss, &mut tree);
        assert_eq!(tree.get("w").grad, xd);
    }

    #[test]
    fn relu_dead_region_zero_grad() {
        let mut tree = ParamTree::<f64>::new();
        tree.insert("x", ArrayD::from_elem(IxDyn(&[4]), -1.0), true, true);
        let mut tape = Tape::new();
        let x = tape.param(&tree, "x");
        let r = tape.relu(x);
        let loss = tape.sum_all(r);
        tape.backward(loss, &mut tree);
        assert!(tree.get("x").grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn concat_splits_gradient_exactly() {
        let mut tree = ParamTree::<f64>::new();
        tree.insert("a", rnd3((1, 2, 3), 6), true, true);
        tree.insert("b", rnd3((1, 3, 3), 7), true, true);
        let mut tape = Tape::new();
        let a = tape.param(&tree, "a");
        let b = tape.param(&tree, "b");
        let cat = tape.concat_axis1(&[a, b]);
        assert_eq!(tape.value(cat).shape(), &[1, 5, 3]);
        let sq = tape.square(cat);
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut tree);
        let ga = &tree.get("a").grad;
        let gb = &tree.get("b").grad;
        assert_eq!(ga.shape(), &[1, 2, 3]);
        assert_eq!(gb.shape(), &[1, 3, 3]);
        for (g, v) in ga.iter().zip(tree.get("a").value.iter()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
        for (g, v) in gb.iter().zip(tree.get("b").value.iter()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_time_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rnd3((2, 3, 7), 8));
        let y = tape.softmax_time(x);
        let y3 = tape.value(y).view().into_dimensionality::<Ix3>().unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let s: f64 = y3.slice(ndarray::s![b, c, ..]).iter().sum();
                assert!((s - 1.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(rnd3((2, 4, 6), 3));
            let w = tape.constant(rnd3((4, 4, 3), 4).into_dimensionality::<Ix3>().unwrap().into_dyn());
            let y = tape.conv1d(x, w, None, 1, 1, 1);
            let r = tape.relu(y);
            let s = tape.sum_all(r);
            tape.scalar_value(s)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn cross_entropy_hand_case() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(array![[2.0, 0.0], [0.0, 2.0]].into_dyn());
        let loss = tape.cross_entropy_mean(logits, &[0, 1]);
        let expected = -(2.0f64.exp() / (2.0f64.exp() + 1.0)).ln();
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-12);
    }
}
