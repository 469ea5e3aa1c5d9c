use super::{Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// Border handling for fixed 3x3 filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Out-of-range taps read the nearest edge pixel.
    Replicate,
}

struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cg: usize,
    og: usize,
}

fn geometry(x: &[usize], w: &[usize], spec: &Conv2dSpec) -> Result<Geometry> {
    let (&[b, c, h, wd], &[o, cg, kh, kw]) = (x, w) else {
        return shape_err(format!("conv2d expects 4-d input and weight, got {x:?} and {w:?}"));
    };
    let g = spec.groups;
    if g == 0 || spec.stride == 0 || c % g != 0 || o % g != 0 || cg != c / g {
        return shape_err(format!(
            "conv2d: input {x:?}, weight {w:?}, groups {g}, stride {}",
            spec.stride
        ));
    }
    if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
        return shape_err(format!("conv2d: kernel {kh}x{kw} larger than padded input {x:?}"));
    }
    let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let ow = (wd + 2 * spec.padding - kw) / spec.stride + 1;
    Ok(Geometry {
        b,
        c,
        h,
        w: wd,
        o,
        kh,
        kw,
        oh,
        ow,
        cg,
        og: o / g,
    })
}

fn is_pointwise(geo: &Geometry, spec: &Conv2dSpec) -> bool {
    geo.kh == 1 && geo.kw == 1 && spec.stride == 1 && spec.padding == 0
}

/// Unfolds one group of one image into `[cg*kh*kw, oh*ow]`.
fn im2col<T: Scalar>(x: &[T], geo: &Geometry, spec: &Conv2dSpec, cols: &mut [T]) {
    let l = geo.oh * geo.ow;
    let p = spec.padding as isize;
    for ci in 0..geo.cg {
        let plane = &x[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (ci * geo.kh + ky) * geo.kw + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..geo.oh {
                    let iy = (oy * spec.stride + ky) as isize - p;
                    let out_row = &mut dst[oy * geo.ow..(oy + 1) * geo.ow];
                    if iy < 0 || iy >= geo.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - p;
                        *v = if ix < 0 || ix >= geo.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], geo: &Geometry, spec: &Conv2dSpec, dx: &mut [T]) {
    let l = geo.oh * geo.ow;
    let p = spec.padding as isize;
    for ci in 0..geo.cg {
        let plane = &mut dx[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (ci * geo.kh + ky) * geo.kw + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..geo.oh {
                    let iy = (oy * spec.stride + ky) as isize - p;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    for ox in 0..geo.ow {
                        let ix = (ox * spec.stride + kx) as isize - p;
                        if ix >= 0 && ix < geo.w as isize {
                            dst[ix as usize] += src[oy * geo.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Result<Tensor<T>> {
    let geo = geometry(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [geo.o] {
            return shape_err(format!("conv2d bias {:?} for {} outputs", b.shape(), geo.o));
        }
    }
    let l = geo.oh * geo.ow;
    let ck = geo.cg * geo.kh * geo.kw;
    let mut out = Tensor::zeros(&[geo.b, geo.o, geo.oh, geo.ow]);
    let pointwise = is_pointwise(&geo, spec);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { ck * l }];
    for bi in 0..geo.b {
        for gi in 0..spec.groups {
            let xs = &x.data()[(bi * geo.c + gi * geo.cg) * geo.h * geo.w..][..geo.cg * geo.h * geo.w];
            let src: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, &geo, spec, &mut cols);
                &cols
            };
            let wg = &w.data()[gi * geo.og * ck..(gi + 1) * geo.og * ck];
            let dst = &mut out.data_mut()[(bi * geo.o + gi * geo.og) * l..][..geo.og * l];
            T::gemm(
                geo.og,
                ck,
                l,
                T::one(),
                wg,
                (ck as isize, 1),
                src,
                (l as isize, 1),
                T::zero(),
                dst,
                (l as isize, 1),
            );
        }
        if let Some(b) = bias {
            for (oc, &bv) in b.data().iter().enumerate() {
                for v in &mut out.data_mut()[(bi * geo.o + oc) * l..][..l] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    spec: &Conv2dSpec,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let geo = geometry(x.shape(), w.shape(), spec).expect("validated at forward time");
    let l = geo.oh * geo.ow;
    let ck = geo.cg * geo.kh * geo.kw;
    let pointwise = is_pointwise(&geo, spec);
    let mut gw = Tensor::zeros(w.shape());
    let mut gx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![T::zero(); if pointwise { 0 } else { ck * l }];
    let mut dcols = vec![T::zero(); ck * l];
    for bi in 0..geo.b {
        for gi in 0..spec.groups {
            let x_off = (bi * geo.c + gi * geo.cg) * geo.h * geo.w;
            let xs = &x.data()[x_off..][..geo.cg * geo.h * geo.w];
            let src: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, &geo, spec, &mut cols);
                &cols
            };
            let gs = &g.data()[(bi * geo.o + gi * geo.og) * l..][..geo.og * l];
            // gw_g += g_g @ cols^T
            T::gemm(
                geo.og,
                l,
                ck,
                T::one(),
                gs,
                (l as isize, 1),
                src,
                (1, l as isize),
                T::one(),
                &mut gw.data_mut()[gi * geo.og * ck..(gi + 1) * geo.og * ck],
                (ck as isize, 1),
            );
            if let Some(gx) = gx.as_mut() {
                let wg = &w.data()[gi * geo.og * ck..(gi + 1) * geo.og * ck];
                let dx = &mut gx.data_mut()[x_off..][..geo.cg * geo.h * geo.w];
                if pointwise {
                    T::gemm(
                        ck,
                        geo.og,
                        l,
                        T::one(),
                        wg,
                        (1, ck as isize),
                        gs,
                        (l as isize, 1),
                        T::one(),
                        dx,
                        (l as isize, 1),
                    );
                } else {
                    T::gemm(
                        ck,
                        geo.og,
                        l,
                        T::one(),
                        wg,
                        (1, ck as isize),
                        gs,
                        (l as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (l as isize, 1),
                    );
                    col2im(&dcols, &geo, spec, dx);
                }
            }
        }
    }
    (gx, gw)
}

pub(crate) fn bias_backward<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let [b, o, h, w] = g.dims4().expect("conv output is 4-d");
    let mut gb = Tensor::zeros(&[o]);
    for bi in 0..b {
        for oc in 0..o {
            let s: T = g.data()[(bi * o + oc) * h * w..][..h * w].iter().copied().sum();
            gb.data_mut()[oc] += s;
        }
    }
    gb
}

fn tap(i: isize, n: usize, padding: Padding) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match padding {
        Padding::Zero => None,
        Padding::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
    }
}

/// Same-size cross-correlation of every channel with one fixed 3x3 kernel.
pub(crate) fn fixed3x3_forward<T: Scalar>(x: &Tensor<T>, k: &[T; 9], padding: Padding) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if h == 0 || w == 0 {
        return shape_err(format!("3x3 filter needs a non-empty map, got {h}x{w}"));
    }
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
                for dy in 0..3 {
                    let Some(iy) = tap(y as isize + dy as isize - 1, h, padding) else { continue };
                    for dx in 0..3 {
                        let kv = k[dy * 3 + dx];
                        if kv == T::zero() {
                            continue;
                        }
                        let Some(ix) = tap(xx as isize + dx as isize - 1, w, padding) else { continue };
                        acc += kv * xd[base + iy * w + ix];
                    }
                }
                od[base + y * w + xx] = acc;
            }
        }
    }
    Ok(out)
}

pub(crate) fn fixed3x3_backward<T: Scalar>(g: &Tensor<T>, k: &[T; 9], padding: Padding) -> Tensor<T> {
    let [b, c, h, w] = g.dims4().expect("filter output is 4-d");
    let mut gx = Tensor::zeros(g.shape());
    let gd = g.data();
    let xd = gx.data_mut();
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..h {
            for xx in 0..w {
                let gv = gd[base + y * w + xx];
                for dy in 0..3 {
                    let Some(iy) = tap(y as isize + dy as isize - 1, h, padding) else { continue };
                    for dx in 0..3 {
                        let kv = k[dy * 3 + dx];
                        let Some(ix) = tap(xx as isize + dx as isize - 1, w, padding) else { continue };
                        xd[base + iy * w + ix] += kv * gv;
                    }
                }
            }
        }
    }
    gx
}

impl<T: Scalar> Graph<T> {
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let v = conv2d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), &spec)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push_op(
            v,
            Op::Conv2d {
                input: x,
                weight,
                bias,
                spec,
            },
            &parents,
        ))
    }

    /// Applies a constant 3x3 kernel to every channel independently. The kernel
    /// is part of the operation, not a graph node, so it never receives a gradient.
    pub fn fixed_depthwise3x3(&mut self, x: Var, kernel: [T; 9], padding: Padding) -> Result<Var> {
        let v = fixed3x3_forward(self.value(x), &kernel, padding)?;
        Ok(self.push_op(
            v,
            Op::FixedDepthwise3x3 {
                input: x,
                kernel,
                padding,
            },
            &[x],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &Conv2dSpec) -> Tensor<f64> {
        let geo = geometry(x.shape(), w.shape(), spec).unwrap();
        let mut out = Tensor::zeros(&[geo.b, geo.o, geo.oh, geo.ow]);
        for b in 0..geo.b {
            for o in 0..geo.o {
                let g = o / geo.og;
                for oy in 0..geo.oh {
                    for ox in 0..geo.ow {
                        let mut acc = 0.0;
                        for ci in 0..geo.cg {
                            for ky in 0..geo.kh {
                                for kx in 0..geo.kw {
                                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= geo.h as isize || ix >= geo.w as isize {
                                        continue;
                                    }
                                    acc += x.at(&[b, g * geo.cg + ci, iy as usize, ix as usize])
                                        * w.at(&[o, ci, ky, kx]);
                                }
                            }
                        }
                        out.set(&[b, o, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (spec, wshape) in [
            (Conv2dSpec { stride: 1, padding: 1, groups: 1 }, [6, 4, 3, 3]),
            (Conv2dSpec { stride: 2, padding: 1, groups: 2 }, [4, 2, 3, 3]),
            (Conv2dSpec { stride: 1, padding: 0, groups: 1 }, [5, 4, 1, 1]),
            (Conv2dSpec { stride: 2, padding: 0, groups: 1 }, [3, 4, 1, 1]),
        ] {
            let x = Tensor::<f64>::uniform(&[2, 4, 7, 6], -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(&wshape, -1.0, 1.0, &mut rng);
            let fast = conv2d_forward(&x, &w, None, &spec).unwrap();
            let slow = naive_conv(&x, &w, &spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_mismatched_channels() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, &Conv2dSpec::default()).is_err());
    }
}
