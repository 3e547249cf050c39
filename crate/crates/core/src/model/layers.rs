//! Convolution, pooling and activation with hand-written backward passes.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Dims4, Tensor4};

/// 3×3 convolution, stride 1, zero padding 1, no bias (a normalization layer
/// always follows it).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(out, in, 3, 3)` row-major.
    pub weight: Vec<f64>,
}

impl Conv3x3 {
    /// He-normal initialization.
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let std = (2.0 / (in_channels * 9) as f64).sqrt();
        let weight = (0..out_channels * in_channels * 9)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            in_channels,
            out_channels,
            weight,
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    fn check(&self, x: &Tensor4) -> Result<()> {
        if x.dims().c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.dims()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check(x)?;
        let d = x.dims();
        let (h, w) = (d.h, d.w);
        let mut out = Tensor4::zeros(Dims4::new(d.n, self.out_channels, h, w));
        for n in 0..d.n {
            for o in 0..self.out_channels {
                let mut acc = vec![0.0; h * w];
                for i in 0..self.in_channels {
                    let src = x.plane(n, i);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let k = self.w(o, i, ky, kx);
                            for_each_tap(h, w, ky, kx, |oy, iy, x0, x1, shift| {
                                let dst = &mut acc[oy * w + x0..oy * w + x1];
                                let s = &src[iy * w + (x0 as isize + shift) as usize..];
                                for (a, &b) in dst.iter_mut().zip(s) {
                                    *a += k * b;
                                }
                            });
                        }
                    }
                }
                out.plane_mut(n, o).copy_from_slice(&acc);
            }
        }
        Ok(out)
    }

    /// Returns `(dL/dx, dL/dweight)`.
    pub fn backward(&self, x: &Tensor4, grad_out: &Tensor4) -> Result<(Tensor4, Vec<f64>)> {
        self.check(x)?;
        let d = x.dims();
        if grad_out.dims() != Dims4::new(d.n, self.out_channels, d.h, d.w) {
            return Err(Error::Shape(format!(
                "conv gradient {} does not match input {d}",
                grad_out.dims()
            )));
        }
        let (h, w) = (d.h, d.w);
        let mut grad_in = Tensor4::zeros(d);
        let mut grad_w = vec![0.0; self.weight.len()];
        for n in 0..d.n {
            for o in 0..self.out_channels {
                let g = grad_out.plane(n, o);
                for i in 0..self.in_channels {
                    let src = x.plane(n, i);
                    let base = (o * self.in_channels + i) * 9;
                    let mut dsrc = vec![0.0; h * w];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let k = self.w(o, i, ky, kx);
                            let mut acc = 0.0;
                            for_each_tap(h, w, ky, kx, |oy, iy, x0, x1, shift| {
                                let gs = &g[oy * w + x0..oy * w + x1];
                                let start = iy * w + (x0 as isize + shift) as usize;
                                let s = &src[start..start + gs.len()];
                                for (&a, &b) in gs.iter().zip(s) {
                                    acc += a * b;
                                }
                                for (dv, &a) in dsrc[start..start + gs.len()].iter_mut().zip(gs) {
                                    *dv += k * a;
                                }
                            });
                            grad_w[base + ky * 3 + kx] += acc;
                        }
                    }
                    for (a, b) in grad_in.plane_mut(n, i).iter_mut().zip(&dsrc) {
                        *a += b;
                    }
                }
            }
        }
        Ok((grad_in, grad_w))
    }
}

/// Visits, for kernel tap `(ky, kx)`, every output row together with the input
/// row it reads and the valid output column range `[x0, x1)`; input column =
/// output column + `shift`.
#[inline]
fn for_each_tap(
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize, usize, usize, isize),
) {
    let dy = ky as isize - 1;
    let dx = kx as isize - 1;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for oy in 0..h {
        let iy = oy as isize + dy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        f(oy, iy as usize, x0, x1, dx);
    }
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor4) -> Result<Tensor4> {
    let d = x.dims();
    if !d.h.is_multiple_of(2) || !d.w.is_multiple_of(2) {
        return Err(Error::Shape(format!("2x2 pooling needs even spatial dims, got {d}")));
    }
    let (oh, ow) = (d.h / 2, d.w / 2);
    let mut out = Tensor4::zeros(Dims4::new(d.n, d.c, oh, ow));
    for n in 0..d.n {
        for c in 0..d.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..oh {
                for xx in 0..ow {
                    let a = 2 * y * d.w + 2 * xx;
                    dst[y * ow + xx] = 0.25 * (src[a] + src[a + 1] + src[a + d.w] + src[a + d.w + 1]);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(grad_out: &Tensor4, input_dims: Dims4) -> Tensor4 {
    let od = grad_out.dims();
    let mut grad_in = Tensor4::zeros(input_dims);
    for n in 0..od.n {
        for c in 0..od.c {
            let g = grad_out.plane(n, c);
            let dst = grad_in.plane_mut(n, c);
            for y in 0..od.h {
                for xx in 0..od.w {
                    let v = 0.25 * g[y * od.w + xx];
                    let a = 2 * y * input_dims.w + 2 * xx;
                    dst[a] = v;
                    dst[a + 1] = v;
                    dst[a + input_dims.w] = v;
                    dst[a + input_dims.w + 1] = v;
                }
            }
        }
    }
    grad_in
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its pre-activation input.
pub fn relu_backward(pre: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let mut g = grad_out.clone();
    for (v, &p) in g.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *v = 0.0;
        }
    }
    g
}
