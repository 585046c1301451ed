//! Convolution kernels lowered to GEMM through im2col.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub len_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv1dGeom {
    pub fn len_out(&self) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = self.len_in + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel
    }
}

fn im2col_1d<T: Scalar>(g: &Conv1dGeom, lout: usize, x: &[T], cols: &mut [T]) {
    for c in 0..g.c_in {
        let xc = &x[c * g.len_in..(c + 1) * g.len_in];
        for k in 0..g.kernel {
            let row = &mut cols[(c * g.kernel + k) * lout..(c * g.kernel + k + 1) * lout];
            let off = (k * g.dilation) as isize - g.padding as isize;
            for (t, slot) in row.iter_mut().enumerate() {
                let i = (t * g.stride) as isize + off;
                *slot = if i >= 0 && (i as usize) < g.len_in {
                    xc[i as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

fn col2im_1d<T: Scalar>(g: &Conv1dGeom, lout: usize, cols: &[T], dx: &mut [T]) {
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.len_in..(c + 1) * g.len_in];
        for k in 0..g.kernel {
            let row = &cols[(c * g.kernel + k) * lout..(c * g.kernel + k + 1) * lout];
            let off = (k * g.dilation) as isize - g.padding as isize;
            for (t, &v) in row.iter().enumerate() {
                let i = (t * g.stride) as isize + off;
                if i >= 0 && (i as usize) < g.len_in {
                    dxc[i as usize] += v;
                }
            }
        }
    }
}

/// `x: [N, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]` -> `[N, Cout, Lout]`.
pub fn conv1d_forward<T: Scalar>(g: &Conv1dGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let lout = g.len_out().expect("validated geometry");
    let rows = g.rows();
    let mut cols = vec![T::zero(); rows * lout];
    let mut out = vec![T::zero(); g.batch * g.c_out * lout];
    for n in 0..g.batch {
        let xn = &x[n * g.c_in * g.len_in..(n + 1) * g.c_in * g.len_in];
        im2col_1d(g, lout, xn, &mut cols);
        let on = &mut out[n * g.c_out * lout..(n + 1) * g.c_out * lout];
        if let Some(b) = b {
            for (co, chunk) in on.chunks_mut(lout).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.c_out, rows, lout, T::one(), w, rows as isize, 1, &cols, lout as isize, 1, beta, on,
            lout as isize, 1,
        );
    }
    out
}

/// Returns `(dx, dw, db)` given upstream `dy: [N, Cout, Lout]`.
pub fn conv1d_backward<T: Scalar>(
    g: &Conv1dGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let lout = g.len_out().expect("validated geometry");
    let rows = g.rows();
    let mut cols = vec![T::zero(); rows * lout];
    let mut dcols = vec![T::zero(); rows * lout];
    let mut dx = if need_dx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.c_out];
    for n in 0..g.batch {
        let xn = &x[n * g.c_in * g.len_in..(n + 1) * g.c_in * g.len_in];
        let dyn_ = &dy[n * g.c_out * lout..(n + 1) * g.c_out * lout];
        for (co, chunk) in dyn_.chunks(lout).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        im2col_1d(g, lout, xn, &mut cols);
        // dW += dY @ cols^T
        T::gemm(
            g.c_out, lout, rows, T::one(), dyn_, lout as isize, 1, &cols, 1, lout as isize,
            T::one(), &mut dw, rows as isize, 1,
        );
        if need_dx {
            // dcols = W^T @ dY
            T::gemm(
                rows, g.c_out, lout, T::one(), w, 1, rows as isize, dyn_, lout as isize, 1,
                T::zero(), &mut dcols, lout as isize, 1,
            );
            let dxn = &mut dx[n * g.c_in * g.len_in..(n + 1) * g.c_in * g.len_in];
            col2im_1d(g, lout, &dcols, dxn);
        }
    }
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let ph = self.h_in + 2 * self.padding;
        let pw = self.w_in + 2 * self.padding;
        if ph < self.kh || pw < self.kw || self.stride == 0 {
            return None;
        }
        Some((
            (ph - self.kh) / self.stride + 1,
            (pw - self.kw) / self.stride + 1,
        ))
    }

    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

fn im2col_2d<T: Scalar>(g: &Conv2dGeom, ho: usize, wo: usize, x: &[T], cols: &mut [T]) {
    let plane = g.h_in * g.w_in;
    let ncols = ho * wo;
    let pad = g.padding as isize;
    for c in 0..g.c_in {
        let xc = &x[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    let dst = &mut row[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii as usize >= g.h_in {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ii as usize * g.w_in..(ii as usize + 1) * g.w_in];
                    for (oj, slot) in dst.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        *slot = if jj >= 0 && (jj as usize) < g.w_in {
                            src[jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_2d<T: Scalar>(g: &Conv2dGeom, ho: usize, wo: usize, cols: &[T], dx: &mut [T]) {
    let plane = g.h_in * g.w_in;
    let ncols = ho * wo;
    let pad = g.padding as isize;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii as usize >= g.h_in {
                        continue;
                    }
                    let base = ii as usize * g.w_in;
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        if jj >= 0 && (jj as usize) < g.w_in {
                            dxc[base + jj as usize] += row[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [N, Cin, H, W]`, `w: [Cout, Cin, KH, KW]` -> `[N, Cout, Ho, Wo]`.
pub fn conv2d_forward<T: Scalar>(g: &Conv2dGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    let rows = g.rows();
    let ncols = ho * wo;
    let in_sz = g.c_in * g.h_in * g.w_in;
    let out_sz = g.c_out * ncols;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); g.batch * out_sz];
    for n in 0..g.batch {
        im2col_2d(g, ho, wo, &x[n * in_sz..(n + 1) * in_sz], &mut cols);
        let on = &mut out[n * out_sz..(n + 1) * out_sz];
        if let Some(b) = b {
            for (co, chunk) in on.chunks_mut(ncols).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.c_out, rows, ncols, T::one(), w, rows as isize, 1, &cols, ncols as isize, 1, beta,
            on, ncols as isize, 1,
        );
    }
    out
}

pub fn conv2d_backward<T: Scalar>(
    g: &Conv2dGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    let rows = g.rows();
    let ncols = ho * wo;
    let in_sz = g.c_in * g.h_in * g.w_in;
    let out_sz = g.c_out * ncols;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dcols = vec![T::zero(); rows * ncols];
    let mut dx = if need_dx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.c_out];
    for n in 0..g.batch {
        let dyn_ = &dy[n * out_sz..(n + 1) * out_sz];
        for (co, chunk) in dyn_.chunks(ncols).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        im2col_2d(g, ho, wo, &x[n * in_sz..(n + 1) * in_sz], &mut cols);
        T::gemm(
            g.c_out, ncols, rows, T::one(), dyn_, ncols as isize, 1, &cols, 1, ncols as isize,
            T::one(), &mut dw, rows as isize, 1,
        );
        if need_dx {
            T::gemm(
                rows, g.c_out, ncols, T::one(), w, 1, rows as isize, dyn_, ncols as isize, 1,
                T::zero(), &mut dcols, ncols as isize, 1,
            );
            col2im_2d(g, ho, wo, &dcols, &mut dx[n * in_sz..(n + 1) * in_sz]);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop reference for conv1d.
    fn naive_conv1d(g: &Conv1dGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let lout = g.len_out().unwrap();
        let mut out = vec![0.0; g.batch * g.c_out * lout];
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for t in 0..lout {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for k in 0..g.kernel {
                            let i = (t * g.stride + k * g.dilation) as isize - g.padding as isize;
                            if i >= 0 && (i as usize) < g.len_in {
                                acc += w[(co * g.c_in + ci) * g.kernel + k]
                                    * x[(n * g.c_in + ci) * g.len_in + i as usize];
                            }
                        }
                    }
                    out[(n * g.c_out + co) * lout + t] = acc;
                }
            }
        }
        out
    }

    fn naive_conv2d(g: &Conv2dGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (ho, wo) = g.out_hw().unwrap();
        let mut out = vec![0.0; g.batch * g.c_out * ho * wo];
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..g.c_in {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                                    let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                                    if ii >= 0
                                        && jj >= 0
                                        && (ii as usize) < g.h_in
                                        && (jj as usize) < g.w_in
                                    {
                                        acc += w[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj]
                                            * x[((n * g.c_in + ci) * g.h_in + ii as usize)
                                                * g.w_in
                                                + jj as usize];
                                    }
                                }
                            }
                        }
                        out[((n * g.c_out + co) * ho + oi) * wo + oj] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * k).sin() * 3.0).fract()).collect()
    }

    #[test]
    fn conv1d_matches_direct_loops() {
        let g = Conv1dGeom {
            batch: 2,
            c_in: 3,
            len_in: 17,
            c_out: 4,
            kernel: 3,
            stride: 2,
            dilation: 3,
            padding: 3,
        };
        let x = seq(2 * 3 * 17, 0.7);
        let w = seq(4 * 3 * 3, 1.3);
        let got = conv1d_forward(&g, &x, &w, None);
        let want = naive_conv1d(&g, &x, &w);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let g = Conv2dGeom {
            batch: 2,
            c_in: 2,
            h_in: 7,
            w_in: 6,
            c_out: 3,
            kh: 3,
            kw: 3,
            stride: 2,
            padding: 1,
        };
        let x = seq(2 * 2 * 7 * 6, 0.37);
        let w = seq(3 * 2 * 9, 1.1);
        let got = conv2d_forward(&g, &x, &w, None);
        let want = naive_conv2d(&g, &x, &w);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
