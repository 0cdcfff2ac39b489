//! Define-by-run tape. Each forward pass builds a fresh [`Graph`] over an
//! immutable [`ParamStore`]; [`Graph::backward`] accumulates into a separate
//! [`Gradients`] buffer, so several graphs can share one store.

use crate::kernels::{self, pooled_dims};
use crate::{gemm, Float, Gradients, NnError, ParamId, ParamStore, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: [usize; 3],
        dilation: [usize; 3],
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Pool {
        x: Var,
        window: [usize; 3],
        alpha: Option<(Var, T)>,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        factor: [usize; 3],
    },
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<'a, T: Float> {
    params: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
}

pub const NORM_EPS: f64 = 1e-5;

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'a, T: Float> Graph<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Stride-1 convolution with "same" zero padding. `w` is
    /// `[Cout, Cin, kd, kh, kw]`, odd kernel sizes only.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, dilation: [usize; 3]) -> Result<Var> {
        let (cin, dims) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        let [cout, wcin, kd, kh, kw] = ws[..] else {
            return Err(NnError::Shape(format!("conv weight must be rank 5, got {ws:?}")));
        };
        if wcin != cin {
            return Err(NnError::Shape(format!("conv expects {wcin} input channels, got {cin}")));
        }
        let kernel = [kd, kh, kw];
        if kernel.iter().any(|k| k % 2 == 0) || dilation.contains(&0) {
            return Err(NnError::Shape(format!(
                "conv kernel {kernel:?} must be odd and dilation {dilation:?} positive"
            )));
        }
        let vol: usize = dims.iter().product();
        let kv: usize = kernel.iter().product();
        let mut out = vec![T::zero(); cout * vol];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            if kv == 1 {
                gemm(cout, cin, vol, wv, false, xv, false, &mut out, false);
            } else {
                let mut col = vec![T::zero(); cin * kv * vol];
                kernels::im2col(xv, cin, dims, kernel, dilation, &mut col);
                gemm(cout, cin * kv, vol, wv, false, &col, false, &mut out, false);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != cout {
                return Err(NnError::Shape("conv bias length".into()));
            }
            for (co, chunk) in out.chunks_mut(vol).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let t = Tensor::from_vec(&[cout, dims[0], dims[1], dims[2]], out)?;
        Ok(self.push(
            t,
            Op::Conv {
                x,
                w,
                b,
                kernel,
                dilation,
            },
        ))
    }

    /// Per-channel normalization over the spatial extent, with affine `gamma`, `beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, dims) = self.value(x).dims4()?;
        let vol: usize = dims.iter().product();
        let n = T::from_f64(vol as f64);
        let eps = T::from_f64(NORM_EPS);
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        if g.len() != c || bt.len() != c {
            return Err(NnError::Shape("instance norm affine length".into()));
        }
        let mut out = vec![T::zero(); c * vol];
        let mut means = Vec::with_capacity(c);
        let mut inv = Vec::with_capacity(c);
        let xv = self.value(x).data();
        for ch in 0..c {
            let s = &xv[ch * vol..(ch + 1) * vol];
            let mean = s.iter().copied().sum::<T>() / n;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in out[ch * vol..(ch + 1) * vol].iter_mut().zip(s) {
                *o = g[ch] * (v - mean) * is + bt[ch];
            }
            means.push(mean);
            inv.push(is);
        }
        let t = Tensor::from_vec(self.value(x).shape(), out)?;
        Ok(self.push(
            t,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn max_pool(&mut self, x: Var, window: [usize; 3]) -> Result<Var> {
        self.pool(x, window, None)
    }

    /// Mixed pooling; the blend weight is `sigmoid(alpha_logit)`, where
    /// `alpha_logit` is a one-element parameter node.
    pub fn mixed_pool(&mut self, x: Var, alpha_logit: Var, window: [usize; 3]) -> Result<Var> {
        self.pool(x, window, Some(alpha_logit))
    }

    fn pool(&mut self, x: Var, window: [usize; 3], alpha_logit: Option<Var>) -> Result<Var> {
        let (c, dims) = self.value(x).dims4()?;
        let od = pooled_dims(dims, window)
            .ok_or_else(|| NnError::Shape(format!("spatial dims {dims:?} not divisible by pool window {window:?}")))?;
        let xv = self.value(x).data();
        let (mx, arg) = kernels::max_pool(xv, c, dims, window);
        let (out, alpha) = match alpha_logit {
            None => (mx, None),
            Some(a) => {
                let alpha = sigmoid(self.value(a).data()[0]);
                let av = kernels::avg_pool(xv, c, dims, window);
                let out = mx
                    .iter()
                    .zip(&av)
                    .map(|(&m, &v)| alpha * m + (T::one() - alpha) * v)
                    .collect();
                (out, Some((a, alpha)))
            }
        };
        let t = Tensor::from_vec(&[c, od[0], od[1], od[2]], out)?;
        Ok(self.push(
            t,
            Op::Pool {
                x,
                window,
                alpha,
                argmax: arg,
            },
        ))
    }

    /// Separable linear upsampling by integer factors (half-pixel centres).
    pub fn upsample(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let (c, dims) = self.value(x).dims4()?;
        if factor.contains(&0) {
            return Err(NnError::Shape("upsample factor must be positive".into()));
        }
        let mut cur = self.value(x).data().to_vec();
        let mut d = dims;
        for axis in 0..3 {
            if factor[axis] == 1 {
                continue;
            }
            cur = kernels::resize_axis(&cur, c, d, axis, d[axis] * factor[axis]);
            d[axis] *= factor[axis];
        }
        let t = Tensor::from_vec(&[c, d[0], d[1], d[2]], cur)?;
        Ok(self.push(t, Op::Upsample { x, factor }))
    }

    /// Channel concatenation of rank-4 activations with equal spatial dims.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, dims) = self.value(parts[0]).dims4()?;
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let (c, d) = self.value(p).dims4()?;
            if d != dims {
                return Err(NnError::Shape(format!("concat dims {d:?} vs {dims:?}")));
            }
            channels += c;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::from_vec(&[channels, dims[0], dims[1], dims[2]], data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    /// Reverse-mode sweep seeded with `d loss / d output` for each output.
    /// Parameter gradients are added into `grads`.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>, grads: &mut Gradients<T>) -> Result<()> {
        let mut g: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        fn acc<T: Float>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
            match slot {
                Some(s) => s.add_assign(&t),
                None => *slot = Some(t),
            }
        }
        for (v, t) in seeds {
            if t.shape() != self.value(v).shape() {
                return Err(NnError::Shape(format!(
                    "seed gradient {:?} vs value {:?}",
                    t.shape(),
                    self.value(v).shape()
                )));
            }
            acc(&mut g[v.0], t);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.get_mut(*id).add_assign(&dy),
                Op::Conv {
                    x,
                    w,
                    b,
                    kernel,
                    dilation,
                } => {
                    let xt = self.value(*x);
                    let (cin, dims) = xt.dims4()?;
                    let wt = self.value(*w);
                    let cout = wt.shape()[0];
                    let vol: usize = dims.iter().product();
                    let kv: usize = kernel.iter().product();
                    let dyv = dy.data();
                    let mut dw = vec![T::zero(); cout * cin * kv];
                    let mut dx = vec![T::zero(); cin * vol];
                    if kv == 1 {
                        gemm(cout, vol, cin, dyv, false, xt.data(), true, &mut dw, false);
                        gemm(cin, cout, vol, wt.data(), true, dyv, false, &mut dx, false);
                    } else {
                        let mut col = vec![T::zero(); cin * kv * vol];
                        kernels::im2col(xt.data(), cin, dims, *kernel, *dilation, &mut col);
                        gemm(cout, vol, cin * kv, dyv, false, &col, true, &mut dw, false);
                        gemm(cin * kv, cout, vol, wt.data(), true, dyv, false, &mut col, false);
                        kernels::col2im(&col, cin, dims, *kernel, *dilation, &mut dx);
                    }
                    acc(&mut g[w.0], Tensor::from_vec(wt.shape(), dw)?);
                    if let Some(b) = b {
                        let db = dyv.chunks(vol).map(|c| c.iter().copied().sum()).collect();
                        acc(&mut g[b.0], Tensor::from_vec(&[cout], db)?);
                    }
                    acc(&mut g[x.0], Tensor::from_vec(xt.shape(), dx)?);
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let xt = self.value(*x);
                    let (c, dims) = xt.dims4()?;
                    let vol: usize = dims.iter().product();
                    let n = T::from_f64(vol as f64);
                    let gv = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); c * vol];
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for ch in 0..c {
                        let xs = &xt.data()[ch * vol..(ch + 1) * vol];
                        let ds = &dy.data()[ch * vol..(ch + 1) * vol];
                        let (mu, is) = (mean[ch], inv_std[ch]);
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for (&xv, &d) in xs.iter().zip(ds) {
                            let xh = (xv - mu) * is;
                            sum_d += d;
                            sum_dx += d * xh;
                        }
                        dg[ch] = sum_dx;
                        db[ch] = sum_d;
                        // d xhat = dy * gamma
                        let k = gv[ch] * is / n;
                        for ((o, &xv), &d) in dx[ch * vol..(ch + 1) * vol].iter_mut().zip(xs).zip(ds) {
                            let xh = (xv - mu) * is;
                            *o = k * (n * d - sum_d - xh * sum_dx);
                        }
                    }
                    acc(&mut g[gamma.0], Tensor::from_vec(&[c], dg)?);
                    acc(&mut g[beta.0], Tensor::from_vec(&[c], db)?);
                    acc(&mut g[x.0], Tensor::from_vec(xt.shape(), dx)?);
                }
                Op::Relu(x) => {
                    let out = node.value.data();
                    let dx = dy
                        .data()
                        .iter()
                        .zip(out)
                        .map(|(&d, &o)| if o > T::zero() { d } else { T::zero() })
                        .collect();
                    acc(&mut g[x.0], Tensor::from_vec(node.value.shape(), dx)?);
                }
                Op::Sigmoid(x) => {
                    let out = node.value.data();
                    let dx = dy
                        .data()
                        .iter()
                        .zip(out)
                        .map(|(&d, &o)| d * o * (T::one() - o))
                        .collect();
                    acc(&mut g[x.0], Tensor::from_vec(node.value.shape(), dx)?);
                }
                Op::Pool {
                    x,
                    window,
                    alpha,
                    argmax,
                } => {
                    let xt = self.value(*x);
                    let (c, dims) = xt.dims4()?;
                    let mut dx = vec![T::zero(); xt.len()];
                    match alpha {
                        None => {
                            kernels::pool_backward(dy.data(), argmax, c, dims, *window, T::one(), T::zero(), &mut dx)
                        }
                        Some((a, alpha)) => {
                            kernels::pool_backward(
                                dy.data(),
                                argmax,
                                c,
                                dims,
                                *window,
                                *alpha,
                                T::one() - *alpha,
                                &mut dx,
                            );
                            let av = kernels::avg_pool(xt.data(), c, dims, *window);
                            let xd = xt.data();
                            let dalpha: T = dy
                                .data()
                                .iter()
                                .zip(argmax)
                                .zip(&av)
                                .map(|((&d, &am), &v)| d * (xd[am as usize] - v))
                                .sum();
                            let dlogit = dalpha * *alpha * (T::one() - *alpha);
                            acc(&mut g[a.0], Tensor::from_vec(&[1], vec![dlogit])?);
                        }
                    }
                    acc(&mut g[x.0], Tensor::from_vec(xt.shape(), dx)?);
                }
                Op::Upsample { x, factor } => {
                    let xt = self.value(*x);
                    let (c, dims) = xt.dims4()?;
                    let mut full = dims;
                    for a in 0..3 {
                        full[a] *= factor[a];
                    }
                    let mut cur = dy.data().to_vec();
                    let mut d = full;
                    for axis in (0..3).rev() {
                        if factor[axis] == 1 {
                            continue;
                        }
                        let mut src = d;
                        src[axis] = dims[axis];
                        cur = kernels::resize_axis_backward(&cur, c, src, axis, d[axis]);
                        d = src;
                    }
                    acc(&mut g[x.0], Tensor::from_vec(xt.shape(), cur)?);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pt = self.value(*p);
                        let n = pt.len();
                        let part = dy.data()[off..off + n].to_vec();
                        off += n;
                        acc(&mut g[p.0], Tensor::from_vec(pt.shape(), part)?);
                    }
                }
            }
        }
        Ok(())
    }
}
