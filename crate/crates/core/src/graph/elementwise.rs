use super::{Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out`; broadcast dims get stride 0.
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast shape.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // increment the outer multi-index
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape()).expect("shapes validated at forward time");
    let (sa, sb) = (view_strides(a.shape(), &out), view_strides(b.shape(), &out));
    let mut res = Tensor::zeros(&out);
    let (ad, bd) = (a.data(), b.data());
    let rd = res.data_mut();
    for_each_broadcast(&out, &sa, &sb, |o, i, j| rd[o] = f(ad[i], bd[j]));
    res
}

/// Sums `g` down to `shape`, the adjoint of broadcasting.
pub(crate) fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape().to_vec();
    let st = view_strides(shape, &out);
    let ident = strides_of(&out);
    let mut res = Tensor::zeros(shape);
    let gd = g.data();
    let rd = res.data_mut();
    for_each_broadcast(&out, &ident, &st, |_, i, j| rd[j] += gd[i]);
    res
}

pub(crate) fn broadcast_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let sg = view_strides(g.shape(), shape);
    let ident = strides_of(shape);
    let mut res = Tensor::zeros(shape);
    let gd = g.data();
    let rd = res.data_mut();
    for_each_broadcast(shape, &ident, &sg, |o, _, j| rd[o] = gd[j]);
    res
}

pub(crate) fn split<T: Scalar>(
    g: &Tensor<T>,
    axis: usize,
    sizes: impl Iterator<Item = usize>,
) -> Vec<Tensor<T>> {
    let shape = g.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total_axis = shape[axis];
    let mut start = 0;
    let mut parts = Vec::new();
    for size in sizes {
        let mut s = shape.to_vec();
        s[axis] = size;
        let mut data = Vec::with_capacity(outer * size * inner);
        for o in 0..outer {
            let base = (o * total_axis + start) * inner;
            data.extend_from_slice(&g.data()[base..base + size * inner]);
        }
        parts.push(Tensor::from_vec(&s, data).expect("split sizes are consistent"));
        start += size;
    }
    parts
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        broadcast_shape(self.shape(a), self.shape(b))?;
        let v = broadcast_zip(self.value(a), self.value(b), f);
        Ok(self.push_op(v, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push_op(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push_op(v, Op::AddScalar(a), &[a])
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -T::one());
        self.add_scalar(n, T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x < T::zero() { T::zero() } else { x });
        self.push_op(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push_op(v, Op::Sigmoid(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push_op(v, Op::Ln(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        self.push_op(v, Op::Clamp(a, lo, hi), &[a])
    }

    /// Sums over every axis where `shape` has extent 1 (numpy-style keepdims reduction).
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = broadcast_shape(self.shape(a), shape)?;
        if out != self.shape(a) {
            return shape_err(format!(
                "cannot reduce {:?} to {shape:?}",
                self.shape(a)
            ));
        }
        let v = reduce_to(self.value(a), shape);
        Ok(self.push_op(v, Op::SumTo(a), &[a]))
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = broadcast_shape(self.shape(a), shape)?;
        if out != shape {
            return shape_err(format!("cannot broadcast {:?} to {shape:?}", self.shape(a)));
        }
        let v = broadcast_to(self.value(a), shape);
        Ok(self.push_op(v, Op::Broadcast(a), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, Op::SumTo(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).expect("count fits");
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push_op(v, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return shape_err(format!("concat along {axis}: {base:?} vs {s:?}"));
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push_op(value, Op::Concat(inputs.to_vec(), axis), inputs))
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
