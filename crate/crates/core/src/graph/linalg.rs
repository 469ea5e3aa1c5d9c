use super::{Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

pub(crate) fn permute_tensor<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let src = t.data();
    for _ in 0..n {
        data.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&out_shape, data).expect("permutation preserves size")
}

pub(crate) fn permute_backward<T: Scalar>(g: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    permute_tensor(g, &inv)
}

/// Batched `a @ b` for `a: [B, M, K]`, `b: [B or 1, K, N]`.
fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bb, n) = (b.shape()[0], b.shape()[2]);
    let mut out = Tensor::zeros(&[bt, m, n]);
    for i in 0..bt {
        let bi = if bb == 1 { 0 } else { i };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[i * m * k..(i + 1) * m * k],
            (k as isize, 1),
            &b.data()[bi * k * n..(bi + 1) * k * n],
            (n as isize, 1),
            T::zero(),
            &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            (n as isize, 1),
        );
    }
    out
}

pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bb, n) = (b.shape()[0], b.shape()[2]);
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    for i in 0..bt {
        let bi = if bb == 1 { 0 } else { i };
        let gi = &g.data()[i * m * n..(i + 1) * m * n];
        // ga = g @ b^T
        T::gemm(
            m,
            n,
            k,
            T::one(),
            gi,
            (n as isize, 1),
            &b.data()[bi * k * n..(bi + 1) * k * n],
            (1, n as isize),
            T::zero(),
            &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
            (k as isize, 1),
        );
        // gb += a^T @ g
        T::gemm(
            k,
            m,
            n,
            T::one(),
            &a.data()[i * m * k..(i + 1) * m * k],
            (1, k as isize),
            gi,
            (n as isize, 1),
            T::one(),
            &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n],
            (n as isize, 1),
        );
    }
    (ga, gb)
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("softmax of a scalar");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().expect("softmax of a scalar");
    let mut out = Tensor::zeros(y.shape());
    for ((o, yr), gr) in out
        .data_mut()
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(g.data().chunks(n))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *ov = yv * (gv - dot);
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let nd = self.shape(a).len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("invalid permutation {perm:?} for rank {nd}"));
        }
        let v = permute_tensor(self.value(a), perm);
        Ok(self.push_op(v, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Batched matrix product of `[B, M, K]` and `[B, K, N]` (or `[1, K, N]`, shared).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[2] != sb[1] || (sb[0] != 1 && sb[0] != sa[0]) {
            return shape_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let v = matmul_forward(self.value(a), self.value(b));
        Ok(self.push_op(v, Op::Matmul(a, b), &[a, b]))
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push_op(v, Op::Softmax(a), &[a])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_inverse_roundtrip() {
        let t = Tensor::<f64>::from_vec(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute_tensor(&t, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), t.at(&[1, 2, 3]));
        assert_eq!(permute_backward(&p, &[2, 0, 1]), t);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 700.0]).unwrap();
        let s = softmax_rows(&t);
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
