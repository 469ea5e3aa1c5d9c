use super::{Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source taps of one output coordinate under half-pixel bilinear sampling.
#[derive(Debug, Clone, Copy)]
struct Taps<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

fn axis_taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<Taps<T>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            Taps {
                i0,
                i1,
                w0: T::lit(1.0 - frac),
                w1: T::lit(frac),
            }
        })
        .collect()
}

/// Bilinear resampling of an NCHW tensor with half-pixel centers (no corner alignment).
pub fn resize_bilinear_tensor<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return shape_err(format!("cannot resize {h}x{w} to {oh}x{ow}"));
    }
    if (oh, ow) == (h, w) {
        return Ok(x.clone());
    }
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let od = out.data_mut();
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut od[plane * oh * ow..(plane + 1) * oh * ow];
        for (y, ry) in ty.iter().enumerate() {
            let r0 = &src[ry.i0 * w..(ry.i0 + 1) * w];
            let r1 = &src[ry.i1 * w..(ry.i1 + 1) * w];
            for (xx, rx) in tx.iter().enumerate() {
                let top = r0[rx.i0] * rx.w0 + r0[rx.i1] * rx.w1;
                let bot = r1[rx.i0] * rx.w0 + r1[rx.i1] * rx.w1;
                dst[y * ow + xx] = top * ry.w0 + bot * ry.w1;
            }
        }
    }
    Ok(out)
}

pub(crate) fn resize_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let [b, c, oh, ow] = g.dims4().expect("resize output is 4-d");
    let (h, w) = (in_shape[2], in_shape[3]);
    if (oh, ow) == (h, w) {
        return g.clone();
    }
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let mut gx = Tensor::zeros(in_shape);
    let gxd = gx.data_mut();
    for plane in 0..b * c {
        let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut gxd[plane * h * w..(plane + 1) * h * w];
        for (y, ry) in ty.iter().enumerate() {
            for (xx, rx) in tx.iter().enumerate() {
                let gv = src[y * ow + xx];
                let (a, bb) = (gv * ry.w0, gv * ry.w1);
                dst[ry.i0 * w + rx.i0] += a * rx.w0;
                dst[ry.i0 * w + rx.i1] += a * rx.w1;
                dst[ry.i1 * w + rx.i0] += bb * rx.w0;
                dst[ry.i1 * w + rx.i1] += bb * rx.w1;
            }
        }
    }
    gx
}

pub(crate) fn avg_pool_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], k: usize) -> Tensor<T> {
    let [b, c, oh, ow] = g.dims4().expect("pool output is 4-d");
    let (h, w) = (in_shape[2], in_shape[3]);
    let inv = T::one() / T::from_usize(k * k).expect("count fits");
    let mut gx = Tensor::zeros(in_shape);
    let gxd = gx.data_mut();
    for plane in 0..b * c {
        for y in 0..h {
            for x in 0..w {
                gxd[plane * h * w + y * w + x] = g.data()[plane * oh * ow + (y / k) * ow + x / k] * inv;
            }
        }
    }
    gx
}

impl<T: Scalar> Graph<T> {
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xt = self.value(x);
        let [b, c, h, w] = xt.dims4()?;
        if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
            return shape_err(format!("max pool k={kernel} s={stride} on {h}x{w}"));
        }
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        let xd = xt.data();
        let od = out.data_mut();
        for plane in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = None;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = plane * h * w + iy as usize * w + ix as usize;
                            if best_i.is_none() || xd[i] > best || xd[i].is_nan() {
                                best = xd[i];
                                best_i = Some(i);
                            }
                        }
                    }
                    od[plane * oh * ow + oy * ow + ox] = best;
                    argmax.push(best_i.expect("window overlaps the input"));
                }
            }
        }
        Ok(self.push_op(out, Op::MaxPool { input: x, argmax }, &[x]))
    }

    /// Non-overlapping `k x k` average pooling; spatial dims must be multiples of `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xt = self.value(x);
        let [b, c, h, w] = xt.dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return shape_err(format!("avg pool k={k} does not tile {h}x{w}"));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::from_usize(k * k).expect("count fits");
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let xd = xt.data();
        let od = out.data_mut();
        for plane in 0..b * c {
            for y in 0..h {
                for x in 0..w {
                    od[plane * oh * ow + (y / k) * ow + x / k] += xd[plane * h * w + y * w + x];
                }
            }
        }
        for v in od.iter_mut() {
            *v *= inv;
        }
        Ok(self.push_op(out, Op::AvgPool(x, k), &[x]))
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let v = resize_bilinear_tensor(self.value(x), oh, ow)?;
        Ok(self.push_op(v, Op::Resize(x), &[x]))
    }
}
