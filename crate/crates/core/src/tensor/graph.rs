use super::kernels::{self, ConvGeom, ConvTransposeGeom};
use super::{numel, strides, Element, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvTransposeGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        din: usize,
        dout: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Standardize {
        x: Var,
        inv_std: Vec<T>,
    },
    ScaleShift {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
    },
    SumAll(Var),
    SumLast(Var),
    LogClamped {
        x: Var,
        floor: T,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of every value produced during one forward pass. Creation order is a
/// topological order, so the adjoint sweep simply walks the tape backwards.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, n, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides(shape);
    let walk: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            src += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= walk[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn gelu<T: Element>(x: T) -> (T, T) {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let one = T::one();
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + three * a * x * x);
    (y, dy)
}

impl<T: Element> Graph<T> {
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

    /// Leaf that gradients flow into (parameters, inputs under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (data, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        parents: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_vector(&self, op: &'static str, v: Var, len: usize) -> Result<()> {
        if self.shape(v) != [len] {
            return shape_err(
                op,
                format!("expected vector of length {len}, got {:?}", self.shape(v)),
            );
        }
        Ok(())
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        self.check_vector("conv3d", b, geom.cout)?;
        let out = kernels::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(geom.out_shape(), out)?;
        self.push("conv3d", value, Op::Conv3d { x, w, b, geom }, &[x, w, b])
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let geom = ConvTransposeGeom::new(self.shape(x), self.shape(w), stride)?;
        self.check_vector("conv_transpose3d", b, geom.cout)?;
        let out = kernels::conv_transpose3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(geom.out_shape(), out)?;
        self.push(
            "conv_transpose3d",
            value,
            Op::ConvTranspose3d { x, w, b, geom },
            &[x, w, b],
        )
    }

    /// Affine map over the last axis: `x W^T + b` with `W: [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap_or(&1);
        if xs.is_empty() || ws.len() != 2 || ws[1] != din {
            return shape_err(
                "linear",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            );
        }
        let dout = ws[0];
        self.check_vector("linear", b, dout)?;
        let rows = numel(&xs) / din;
        let out = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            rows,
            din,
            dout,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        self.push(
            "linear",
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            &[x, w, b],
        )
    }

    /// Batched matrix product over the trailing two axes; leading axes must
    /// agree. `ta`/`tb` transpose the trailing axes of either operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return shape_err("matmul", format!("incompatible operands {sa:?} and {sb:?}"));
        }
        let r = sa.len();
        let (m, k) = if ta {
            (sa[r - 1], sa[r - 2])
        } else {
            (sa[r - 2], sa[r - 1])
        };
        let (kb, n) = if tb {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return shape_err("matmul", format!("inner extents differ: {sa:?} x {sb:?}"));
        }
        let batch = numel(&sa[..r - 2]);
        let out = kernels::batched_matmul(
            self.value(a).data(),
            self.value(b).data(),
            batch,
            m,
            k,
            n,
            ta,
            tb,
        );
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            },
            &[a, b],
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let v = self.value(x).map(|e| e * c);
        self.push("scale", v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let v = self.value(x).map(|e| e + c);
        self.push("add_scalar", v, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self
            .value(x)
            .map(|e| if e > T::zero() { e } else { T::zero() });
        self.push("relu", v, Op::Relu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| gelu(e).0);
        self.push("gelu", v, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err("softmax", format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    max = max.max(src[base + j * inner]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= total;
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        self.push("softmax", v, Op::Softmax { x, axis }, &[x])
    }

    /// Zero-mean, unit-variance normalization over the last axis (population
    /// variance, `eps` added before the square root).
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let src = self.value(x).data();
        let rows = src.len() / n;
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(eps);
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &e) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (e - mean) * inv;
            }
            inv_std.push(inv);
        }
        let v = Tensor::new(shape, out)?;
        self.push("standardize", v, Op::Standardize { x, inv_std }, &[x])
    }

    /// `x * gamma[i] + beta[i]` where `i` indexes `axis`.
    pub fn scale_shift(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(
                "scale_shift",
                format!("axis {axis} out of range for {shape:?}"),
            );
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        self.check_vector("scale_shift", gamma, n)?;
        self.check_vector("scale_shift", beta, n)?;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(src.len());
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                out.extend(src[base..base + inner].iter().map(|&e| e * g[j] + b[j]));
            }
        }
        let v = Tensor::new(shape, out)?;
        self.push(
            "scale_shift",
            v,
            Op::ScaleShift {
                x,
                gamma,
                beta,
                axis,
            },
            &[x, gamma, beta],
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        let z = self.standardize(x, eps)?;
        self.scale_shift(z, gamma, beta, axis)
    }

    /// Per-channel normalization of a `[C, W, H, D]` volume over its spatial
    /// axes, built on the same machinery as [`Graph::layer_norm`].
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        let flat = self.reshape(x, &[c, numel(&shape[1..])])?;
        let z = self.standardize(flat, eps)?;
        let z = self.scale_shift(z, gamma, beta, 0)?;
        self.reshape(z, &shape)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum_all", v, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return shape_err("sum_last", "scalar input");
        }
        let n = shape[shape.len() - 1];
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|row| row.iter().copied().sum())
            .collect();
        let v = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        self.push("sum_last", v, Op::SumLast(x), &[x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let floor = T::from_f64(floor);
        let v = self.value(x).map(|e| e.max(floor).ln());
        self.push("log_clamped", v, Op::LogClamped { x, floor }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return shape_err(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                );
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        self.push(
            "concat",
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return shape_err(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", shape.len()),
            );
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        let v = Tensor::new(out_shape, data)?;
        self.push(
            "permute",
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            );
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(out_shape, data)?;
        self.push("slice", v, Op::Slice { x, axis, start }, &[x])
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.adjoint(&node.op, &node.value, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn adjoint(
        &self,
        op: &Op<T>,
        y: &Tensor<T>,
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                let g = kernels::conv3d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    geom,
                    self.needs(*x),
                );
                if let Some(dx) = g.input {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, g.kernel);
                self.accumulate(grads, *b, g.bias);
            }
            Op::ConvTranspose3d { x, w, b, geom } => {
                let g = kernels::conv_transpose3d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    geom,
                    self.needs(*x),
                );
                if let Some(dx) = g.input {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, g.kernel);
                self.accumulate(grads, *b, g.bias);
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let g = kernels::linear_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    *rows,
                    *din,
                    *dout,
                    self.needs(*x),
                );
                if let Some(dx) = g.input {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, g.weight);
                self.accumulate(grads, *b, g.bias);
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // C = A B  =>  dA = dC B^T, dB = A^T dC (with stored layouts honoured)
                if self.needs(*a) {
                    let da = if *ta {
                        kernels::batched_matmul(bv, dy, *batch, *k, *n, *m, *tb, true)
                    } else {
                        kernels::batched_matmul(dy, bv, *batch, *m, *n, *k, false, !*tb)
                    };
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = if *tb {
                        kernels::batched_matmul(dy, av, *batch, *n, *m, *k, true, *ta)
                    } else {
                        kernels::batched_matmul(av, dy, *batch, *k, *m, *n, !*ta, false)
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    self.accumulate(grads, *a, dy.iter().zip(bv).map(|(&g, &e)| g * e).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, dy.iter().zip(av).map(|(&g, &e)| g * e).collect());
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    self.accumulate(grads, *a, dy.iter().zip(bv).map(|(&g, &e)| g / e).collect());
                }
                if self.needs(*b) {
                    let yv = y.data();
                    let db = dy
                        .iter()
                        .zip(yv)
                        .zip(bv)
                        .map(|((&g, &q), &e)| -g * q / e)
                        .collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, dy.iter().map(|&g| g * *c).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, dy.to_vec()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &e)| if e > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = dy.iter().zip(xv).map(|(&g, &e)| g * gelu(e).1).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let yv = y.data();
                let mut dx = vec![T::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: T = (0..n)
                            .map(|j| dy[base + j * inner] * yv[base + j * inner])
                            .sum();
                        for j in 0..n {
                            let at = base + j * inner;
                            dx[at] = yv[at] * (dy[at] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Standardize { x, inv_std } => {
                let n = *y.shape().last().unwrap_or(&1);
                let nf = T::from_f64(n as f64);
                let yv = y.data();
                let mut dx = vec![T::zero(); yv.len()];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let rows = r * n..(r + 1) * n;
                    let g = &dy[rows.clone()];
                    let yr = &yv[rows.clone()];
                    let mean_g = g.iter().copied().sum::<T>() / nf;
                    let mean_gy = g.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for ((d, &gi), &yi) in dx[rows].iter_mut().zip(g).zip(yr) {
                        *d = inv * (gi - mean_g - yi * mean_gy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ScaleShift {
                x,
                gamma,
                beta,
                axis,
            } => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for t in base..base + inner {
                            dx[t] = dy[t] * gv[j];
                            dg[j] += dy[t] * xv[t];
                            db[j] += dy[t];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![dy[0]; n]);
            }
            Op::SumLast(x) => {
                let xs = self.shape(*x);
                let n = xs[xs.len() - 1];
                let dx = dy.iter().flat_map(|&g| std::iter::repeat_n(g, n)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LogClamped { x, floor } => {
                let xv = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &e)| if e > *floor { g / e } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            dp.extend_from_slice(&dy[from..from + n * inner]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, dy.to_vec()),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, dx) = permute_data(dy, y.shape(), &inverse);
                self.accumulate(grads, *x, dx);
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = y.shape()[*axis];
                let mut dx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    let from = o * len * inner;
                    dx[to..to + len * inner].copy_from_slice(&dy[from..from + len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `v`; all zeros when `v` did not reach the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
