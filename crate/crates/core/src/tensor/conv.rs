//! 2-D cross-correlation via im2col + GEMM.

use super::real::matmul_into;
use super::tape::{acc_grad, ConvGeom, Node, Op, Tape, Var};
use super::Real;
use crate::error::{Error, Result};

/// Output extent of one spatial axis, or `None` when the kernel does not fit.
pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = size + 2 * pad;
    if stride == 0 || span < k {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Column matrix `[c_in*k*k, h_out*w_out]` for sample `x` (`[c_in,h,w]`).
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw_out = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..g.h_out {
                    let d = &mut dst[oh * g.w_out..][..g.w_out];
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        d.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.w..][..g.w];
                    for (ow, slot) in d.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *slot = if iw >= 0 && iw < g.w as isize {
                            src_row[iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw_out = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * g.w..][..g.w];
                    let s = &src[oh * g.w_out..][..g.w_out];
                    for (ow, &v) in s.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst_row[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `[C,H,W]` or `[N,C,H,W]` input with
    /// `[C_out,C_in,k,k]` kernels, zero padding, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let batched = match sx.len() {
            3 => false,
            4 => true,
            _ => return Err(Error::shape("conv2d", format!("input must be rank 3 or 4, got {sx:?}"))),
        };
        let (n, c_in, h, wd) = if batched {
            (sx[0], sx[1], sx[2], sx[3])
        } else {
            (1, sx[0], sx[1], sx[2])
        };
        if sw.len() != 4 || sw[1] != c_in || sw[2] != sw[3] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let k = sw[2];
        let (Some(h_out), Some(w_out)) = (
            conv_out_size(h, k, stride, pad),
            conv_out_size(wd, k, stride, pad),
        ) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} stride {stride} padding {pad} does not fit {h}x{wd}"),
            ));
        };
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out: sw[0],
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        let hw_out = h_out * w_out;
        let ckk = c_in * k * k;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![T::zero(); n * geom.c_out * hw_out];
        let pointwise = is_pointwise(&geom);
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * hw_out] };
        for b in 0..n {
            let xb = &xv[b * c_in * h * wd..][..c_in * h * wd];
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, &geom, &mut cols);
                &cols
            };
            let ob = &mut out[b * geom.c_out * hw_out..][..geom.c_out * hw_out];
            matmul_into(geom.c_out, ckk, hw_out, wv, false, src, false, ob, false);
        }
        let shape = if batched {
            vec![n, geom.c_out, h_out, w_out]
        } else {
            vec![geom.c_out, h_out, w_out]
        };
        let rg = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad;
        Ok(self.push(shape, out, rg, Op::Conv2d { x, w, geom }))
    }
}

pub(crate) fn conv2d_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    x: Var,
    w: Var,
    geom: &ConvGeom,
    g: &[T],
) {
    let hw_out = geom.h_out * geom.w_out;
    let ckk = geom.c_in * geom.k * geom.k;
    let in_len = geom.c_in * geom.h * geom.w;
    let out_len = geom.c_out * hw_out;
    let pointwise = is_pointwise(geom);
    let xv = &nodes[x.0].value;
    let wv = &nodes[w.0].value;
    let need_w = nodes[w.0].requires_grad;
    let need_x = nodes[x.0].requires_grad;
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * hw_out] };
    let mut dcols = vec![T::zero(); if pointwise { 0 } else { ckk * hw_out }];
    let mut dw = if need_w { vec![T::zero(); wv.len()] } else { Vec::new() };
    let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
    for b in 0..geom.n {
        let gb = &g[b * out_len..][..out_len];
        let xb = &xv[b * in_len..][..in_len];
        if need_w {
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, geom, &mut cols);
                &cols
            };
            matmul_into(geom.c_out, hw_out, ckk, gb, false, src, true, &mut dw, true);
        }
        if need_x {
            let dxb = &mut dx[b * in_len..][..in_len];
            if pointwise {
                matmul_into(ckk, geom.c_out, hw_out, wv, true, gb, false, dxb, true);
            } else {
                matmul_into(ckk, geom.c_out, hw_out, wv, true, gb, false, &mut dcols, false);
                col2im_add(&dcols, geom, dxb);
            }
        }
    }
    if need_w {
        acc_grad(nodes, grads, w, |d| d.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b));
    }
    if need_x {
        acc_grad(nodes, grads, x, |d| d.iter_mut().zip(&dx).for_each(|(a, &b)| *a += b));
    }
}
