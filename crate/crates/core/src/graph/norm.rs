use super::{Graph, Op, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn row_norm_backward<T: Scalar>(xhat: &Tensor<T>, inv_std: &[T], g: &Tensor<T>) -> Tensor<T> {
    let n = *xhat.shape().last().expect("row norm of a scalar");
    let nf = T::from_usize(n).expect("count fits");
    let mut out = Tensor::zeros(xhat.shape());
    for (r, ((o, xr), gr)) in out
        .data_mut()
        .chunks_mut(n)
        .zip(xhat.data().chunks(n))
        .zip(g.data().chunks(n))
        .enumerate()
    {
        let sum_g: T = gr.iter().copied().sum();
        let sum_gx: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
        for ((ov, &xv), &gv) in o.iter_mut().zip(xr).zip(gr) {
            *ov = inv_std[r] / nf * (nf * gv - sum_g - xv * sum_gx);
        }
    }
    out
}

pub(crate) fn channel_norm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    g: &Tensor<T>,
) -> Tensor<T> {
    let [b, c, h, w] = xhat.dims4().expect("channel norm input is 4-d");
    let hw = h * w;
    let nf = T::from_usize(b * hw).expect("count fits");
    let mut out = Tensor::zeros(xhat.shape());
    let (xd, gd) = (xhat.data(), g.data());
    let od = out.data_mut();
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in base..base + hw {
                sum_g += gd[i];
                sum_gx += gd[i] * xd[i];
            }
        }
        let k = inv_std[ch] / nf;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in base..base + hw {
                od[i] = k * (nf * gd[i] - sum_g - xd[i] * sum_gx);
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Zero-mean, unit-variance normalization over the last axis (no affine part).
    pub fn row_norm(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().expect("row norm of a scalar");
        let nf = T::from_usize(n).expect("count fits");
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.numel() / n.max(1));
        for row in xhat.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push_op(
            xhat.clone(),
            Op::RowNorm {
                input: a,
                xhat,
                inv_std,
            },
            &[a],
        )
    }

    /// Per-channel batch normalization of an NCHW tensor using batch statistics.
    /// Returns the normalized tensor with the batch mean and unbiased variance.
    pub fn channel_norm(&mut self, a: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let x = self.value(a);
        let [b, c, h, w] = x.dims4()?;
        let hw = h * w;
        let n = b * hw;
        let nf = T::from_usize(n).expect("count fits");
        let mut xhat = x.clone();
        let mut means = Vec::with_capacity(c);
        let mut vars = Vec::with_capacity(c);
        let mut inv_std = Vec::with_capacity(c);
        let xd = xhat.data_mut();
        for ch in 0..c {
            let idx = (0..b).flat_map(|bi| {
                let base = (bi * c + ch) * hw;
                base..base + hw
            });
            let mean = idx.clone().map(|i| xd[i]).sum::<T>() / nf;
            let ss = idx.clone().map(|i| (xd[i] - mean) * (xd[i] - mean)).sum::<T>();
            let var = ss / nf;
            let is = T::one() / (var + eps).sqrt();
            for i in idx {
                xd[i] = (xd[i] - mean) * is;
            }
            means.push(mean);
            vars.push(if n > 1 {
                ss / T::from_usize(n - 1).expect("count fits")
            } else {
                var
            });
            inv_std.push(is);
        }
        let v = self.push_op(
            xhat.clone(),
            Op::ChannelNorm {
                input: a,
                xhat,
                inv_std,
            },
            &[a],
        );
        Ok((v, means, vars))
    }
}
