//! Stride-1 zero-padded 2-D convolution via im2col + sgemm, plus its two adjoints.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            self.h + 2 * self.pad + 1 - self.kernel,
            self.w + 2 * self.pad + 1 - self.kernel,
        )
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.pad == 0
    }
}

/// Output columns `oj` whose source column `oj + kj − pad` lies inside `0..w`.
fn valid_cols(g: &ConvGeometry, wo: usize, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(wo);
    let hi = (g.w + g.pad).saturating_sub(kj).min(wo).max(lo);
    (lo, hi)
}

fn im2col(x: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let k = g.kernel;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, wo, kj);
                for oi in 0..ho {
                    let ii = oi as isize + ki as isize - g.pad as isize;
                    let out_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let s0 = lo + kj - g.pad;
                    out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], g: &ConvGeometry, x: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let k = g.kernel;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, wo, kj);
                if lo == hi {
                    continue;
                }
                let d0 = lo + kj - g.pad;
                for oi in 0..ho {
                    let ii = oi as isize + ki as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w + d0..ii as usize * g.w + d0 + (hi - lo)];
                    for (d, s) in dst.iter_mut().zip(&src[oi * wo + lo..oi * wo + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `C[m×n] = alpha·A·B + beta·C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every operand slice covers the index range implied by its dims and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn geometry(x: &Tensor, w: &Tensor, pad: usize) -> ConvGeometry {
    let [_, ci, h, wd] = x.shape();
    let [_, wci, kh, kw] = w.shape();
    assert_eq!(ci, wci, "conv input has {ci} channels, weight expects {wci}");
    assert_eq!(kh, kw, "only square kernels are supported");
    assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel larger than padded input");
    ConvGeometry {
        c_in: ci,
        h,
        w: wd,
        kernel: kh,
        pad,
    }
}

/// `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let g = geometry(x, w, pad);
    let n = x.shape()[0];
    let co = w.shape()[0];
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.rows();
    let mut out = vec![0f32; n * co * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0f32; kk * p] };
    for i in 0..n {
        let xs = x.sample(i);
        let b: &[f32] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        gemm(
            co,
            kk,
            p,
            w.data(),
            (kk as isize, 1),
            b,
            (p as isize, 1),
            0.0,
            &mut out[i * co * p..(i + 1) * co * p],
        );
    }
    Tensor::from_vec([n, co, ho, wo], out)
}

/// Adjoint of [`conv2d`] in its input: maps an output-shaped gradient to input shape.
pub fn conv2d_backward_data(gy: &Tensor, w: &Tensor, pad: usize, in_hw: (usize, usize)) -> Tensor {
    let [n, co, ho, wo] = gy.shape();
    let [wco, ci, k, _] = w.shape();
    assert_eq!(co, wco);
    let g = ConvGeometry {
        c_in: ci,
        h: in_hw.0,
        w: in_hw.1,
        kernel: k,
        pad,
    };
    assert_eq!(g.out_hw(), (ho, wo), "gradient shape does not match conv geometry");
    let p = ho * wo;
    let kk = g.rows();
    let per_in = ci * g.h * g.w;
    let mut gx = vec![0f32; n * per_in];
    let mut cols = vec![0f32; kk * p];
    for i in 0..n {
        let dst = &mut gx[i * per_in..(i + 1) * per_in];
        if g.is_pointwise() {
            gemm(kk, co, p, w.data(), (1, kk as isize), gy.sample(i), (p as isize, 1), 0.0, dst);
        } else {
            gemm(kk, co, p, w.data(), (1, kk as isize), gy.sample(i), (p as isize, 1), 0.0, &mut cols);
            col2im_add(&cols, &g, dst);
        }
    }
    Tensor::from_vec([n, ci, g.h, g.w], gx)
}

/// Adjoint of [`conv2d`] in its weight.
pub fn conv2d_backward_weight(x: &Tensor, gy: &Tensor, pad: usize, kernel: usize) -> Tensor {
    let [n, ci, h, wd] = x.shape();
    let [gn, co, ho, wo] = gy.shape();
    assert_eq!(n, gn);
    let g = ConvGeometry {
        c_in: ci,
        h,
        w: wd,
        kernel,
        pad,
    };
    assert_eq!(g.out_hw(), (ho, wo));
    let p = ho * wo;
    let kk = g.rows();
    let mut gw = vec![0f32; co * kk];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0f32; kk * p] };
    for i in 0..n {
        let xs = x.sample(i);
        let b: &[f32] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        // gw[Co×K] += gy_i[Co×P] · cols[K×P]^T
        gemm(co, p, kk, gy.sample(i), (p as isize, 1), b, (1, p as isize), 1.0, &mut gw);
    }
    Tensor::from_vec([co, ci, kernel, kernel], gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
        let [n, ci, h, wd] = x.shape();
        let [co, _, k, _] = w.shape();
        let ho = h + 2 * pad + 1 - k;
        let wo = wd + 2 * pad + 1 - k;
        let mut out = vec![0f32; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = 0.0f64;
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ii = i as isize + ki as isize - pad as isize;
                                    let jj = j as isize + kj as isize - pad as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                        s += x.at(b, c, ii as usize, jj as usize) as f64
                                            * w.at(o, c, ki, kj) as f64;
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * ho + i) * wo + j] = s as f32;
                    }
                }
            }
        }
        Tensor::from_vec([n, co, ho, wo], out)
    }

    fn pseudo(shape: [usize; 4], seed: u32) -> Tensor {
        Tensor::from_fn(shape, |i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 500.0 - 1.0)
    }

    #[test]
    fn matches_naive_for_common_kernels() {
        for &(k, pad, h) in &[(3, 1, 5), (1, 0, 4), (4, 0, 4), (3, 0, 6)] {
            let x = pseudo([2, 3, h, h], 7);
            let w = pseudo([4, 3, k, k], 11);
            let fast = conv2d(&x, &w, pad);
            let slow = naive_conv(&x, &w, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-4, "k={k} pad={pad}");
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        for &(k, pad, h) in &[(3, 1, 5), (1, 0, 4), (4, 0, 4)] {
            let x = pseudo([2, 3, h, h], 1);
            let w = pseudo([4, 3, k, k], 2);
            let y = conv2d(&x, &w, pad);
            let gy = pseudo(y.shape(), 3);
            let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| (a * b) as f64).sum();
            let gx = conv2d_backward_data(&gy, &w, pad, (h, h));
            let via_x: f64 = gx.data().iter().zip(x.data()).map(|(a, b)| (a * b) as f64).sum();
            let gw = conv2d_backward_weight(&x, &gy, pad, k);
            let via_w: f64 = gw.data().iter().zip(w.data()).map(|(a, b)| (a * b) as f64).sum();
            assert!((lhs - via_x).abs() < 1e-3 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-3 * lhs.abs().max(1.0));
        }
    }
}
