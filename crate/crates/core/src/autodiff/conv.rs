//! im2col lowering for NCHW convolutions.
//!
//! Samples are processed in fixed-size chunks so that every GEMM has at
//! least `MIN_COLS` columns; the chunking depends only on the geometry, which
//! keeps results independent of scheduling.

use super::tensor::{gemm, MatLayout, Real};
use crate::error::{Error, Result};

const MIN_COLS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::invalid(format!(
                "conv2d expects NCHW input and OIKK weight, got {input:?} and {weight:?}"
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, wi, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wi != c {
            return Err(Error::invalid(format!(
                "conv2d weight expects {wi} input channels, input has {c}"
            )));
        }
        if kh != kw || kh == 0 {
            return Err(Error::invalid(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid(format!(
                "conv2d kernel {kh} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(ConvGeom {
            batch: n,
            in_ch: c,
            height: h,
            width: w,
            out_ch: o,
            kernel: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Kernel covers the whole unpadded input: the convolution is a plain
    /// matrix product with the flattened samples.
    fn is_dense(&self) -> bool {
        self.pad == 0 && self.kernel == self.height && self.kernel == self.width
    }

    /// Stride 1 with output the size of the input: each column row is the
    /// input plane shifted by a constant offset, out-of-range entries zero.
    fn is_same_stride1(&self) -> bool {
        self.stride == 1 && self.out_h == self.height && self.out_w == self.width
    }

    fn chunk(&self) -> usize {
        (MIN_COLS / self.positions()).clamp(1, self.batch.max(1))
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad` lies
/// inside the row.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let first = g.pad.saturating_sub(kj).div_ceil(g.stride);
    // largest ox with ox·stride + kj − pad ≤ width − 1
    let limit = g.width + g.pad;
    let last = if limit > kj { (limit - kj - 1) / g.stride + 1 } else { 0 };
    (first.min(g.out_w), last.min(g.out_w).max(first.min(g.out_w)))
}

/// For the shift of kernel tap `(ki, kj)` in a same-size stride-1
/// convolution: the flat offset `δ`, the block `[lo, hi)` of positions whose
/// source `p + δ` lies in the plane, and the column shift.
fn shifted_block(g: &ConvGeom, ki: usize, kj: usize) -> (isize, usize, usize, isize) {
    let p = g.positions() as isize;
    let (dy, dx) = (ki as isize - g.pad as isize, kj as isize - g.pad as isize);
    let delta = dy * g.width as isize + dx;
    let lo = (-delta).clamp(0, p) as usize;
    let hi = (p - delta).clamp(0, p) as usize;
    (delta, lo, hi.max(lo), dx)
}

/// Positions of a row whose column `ox + dx` falls outside the plane.
fn for_each_edge(g: &ConvGeom, dx: isize, mut f: impl FnMut(usize)) {
    let w = g.width as isize;
    let cols = if dx < 0 { 0..(-dx).min(w) } else { (w - dx).max(0)..w };
    for oy in 0..g.out_h {
        for ox in cols.clone() {
            f(oy * g.out_w + ox as usize);
        }
    }
}

/// Writes the columns of one sample into `col` (row stride `ncols`) starting at `col_off`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T], ncols: usize, col_off: usize) {
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * ncols + col_off..row * ncols + col_off + g.positions()];
                if g.is_same_stride1() {
                    let (delta, lo, hi, dx) = shifted_block(g, ki, kj);
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo < hi {
                        let s0 = (lo as isize + delta) as usize;
                        dst[lo..hi].copy_from_slice(&plane[s0..s0 + hi - lo]);
                    }
                    for_each_edge(g, dx, |i| dst[i] = T::zero());
                    continue;
                }
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let x0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (t, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[x0 + t * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into one sample's input gradient.
/// Clobbers the edge entries of `col`.
fn col2im<T: Real>(col: &mut [T], g: &ConvGeom, ncols: usize, col_off: usize, dx: &mut [T]) {
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                if g.is_same_stride1() {
                    let src = &mut col[row * ncols + col_off..row * ncols + col_off + g.positions()];
                    let (delta, lo, hi, dxs) = shifted_block(g, ki, kj);
                    for_each_edge(g, dxs, |i| src[i] = T::zero());
                    if lo < hi {
                        let d0 = (lo as isize + delta) as usize;
                        for (d, &v) in plane[d0..d0 + hi - lo].iter_mut().zip(&src[lo..hi]) {
                            *d = *d + v;
                        }
                    }
                    continue;
                }
                let src = &col[row * ncols + col_off..row * ncols + col_off + g.positions()];
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                let x0 = lo * g.stride + kj - g.pad;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[x0..x0 + hi - lo].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (t, &v) in line.iter().enumerate() {
                            let d = &mut dst[x0 + t * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

pub fn forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, kk) = (g.positions(), g.patch_len());
    if g.is_dense() {
        // Y = X·Wᵀ
        let mut out = vec![T::zero(); g.batch * g.out_ch];
        gemm(
            T::one(),
            x,
            MatLayout::row_major(g.batch, kk),
            w,
            MatLayout::row_major(g.out_ch, kk).t(),
            T::zero(),
            &mut out,
        );
        return out;
    }
    let in_len = g.in_ch * g.height * g.width;
    let out_len = g.out_ch * p;
    let mut out = vec![T::zero(); g.batch * out_len];
    let chunk = g.chunk();
    let mut col = vec![T::zero(); kk * chunk * p];
    let mut res = vec![T::zero(); g.out_ch * chunk * p];
    let mut n0 = 0;
    while n0 < g.batch {
        let nc = chunk.min(g.batch - n0);
        let ncols = nc * p;
        for s in 0..nc {
            let n = n0 + s;
            im2col(&x[n * in_len..(n + 1) * in_len], g, &mut col, ncols, s * p);
        }
        gemm(
            T::one(),
            w,
            MatLayout::row_major(g.out_ch, kk),
            &col[..kk * ncols],
            MatLayout::row_major(kk, ncols),
            T::zero(),
            &mut res[..g.out_ch * ncols],
        );
        for s in 0..nc {
            let dst = &mut out[(n0 + s) * out_len..(n0 + s + 1) * out_len];
            for o in 0..g.out_ch {
                dst[o * p..(o + 1) * p].copy_from_slice(&res[o * ncols + s * p..o * ncols + (s + 1) * p]);
            }
        }
        n0 += nc;
    }
    out
}

/// Returns `(dx, dw)`; either may be skipped.
pub fn backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (p, kk) = (g.positions(), g.patch_len());
    let in_len = g.in_ch * g.height * g.width;
    let out_len = g.out_ch * p;
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.out_ch * kk]);
    if g.is_dense() {
        if let Some(dw) = dw.as_mut() {
            // dW = dYᵀ·X
            gemm(
                T::one(),
                dy,
                MatLayout::row_major(g.batch, g.out_ch).t(),
                x,
                MatLayout::row_major(g.batch, kk),
                T::zero(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dX = dY·W
            gemm(
                T::one(),
                dy,
                MatLayout::row_major(g.batch, g.out_ch),
                w,
                MatLayout::row_major(g.out_ch, kk),
                T::zero(),
                dx,
            );
        }
        return (dx, dw);
    }
    let chunk = g.chunk();
    let mut col = vec![T::zero(); kk * chunk * p];
    let mut dyc = vec![T::zero(); g.out_ch * chunk * p];
    let mut n0 = 0;
    while n0 < g.batch {
        let nc = chunk.min(g.batch - n0);
        let ncols = nc * p;
        for s in 0..nc {
            let src = &dy[(n0 + s) * out_len..(n0 + s + 1) * out_len];
            for o in 0..g.out_ch {
                dyc[o * ncols + s * p..o * ncols + (s + 1) * p].copy_from_slice(&src[o * p..(o + 1) * p]);
            }
        }
        if let Some(dw) = dw.as_mut() {
            for s in 0..nc {
                let n = n0 + s;
                im2col(&x[n * in_len..(n + 1) * in_len], g, &mut col, ncols, s * p);
            }
            // dW += dY · colᵀ
            gemm(
                T::one(),
                &dyc[..g.out_ch * ncols],
                MatLayout::row_major(g.out_ch, ncols),
                &col[..kk * ncols],
                MatLayout::row_major(kk, ncols).t(),
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · dY
            gemm(
                T::one(),
                w,
                MatLayout::row_major(g.out_ch, kk).t(),
                &dyc[..g.out_ch * ncols],
                MatLayout::row_major(g.out_ch, ncols),
                T::zero(),
                &mut col[..kk * ncols],
            );
            for s in 0..nc {
                let n = n0 + s;
                col2im(&mut col, g, ncols, s * p, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
        n0 += nc;
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as the reference.
    fn naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
        for n in 0..g.batch {
            for o in 0..g.out_ch {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..g.in_ch {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.in_ch + c) * g.height + iy as usize) * g.width + ix as usize]
                                        * w[((o * g.in_ch + c) * g.kernel + ki) * g.kernel + kj];
                                }
                            }
                        }
                        out[((n * g.out_ch + o) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn lowering_matches_direct_loops() {
        for &(n, c, h, o, k, s, p) in &[
            (3, 2, 7, 4, 3, 1, 1),
            (2, 3, 8, 2, 3, 2, 1),
            (5, 2, 4, 3, 4, 1, 0),
            (1, 1, 5, 1, 5, 1, 0),
            (20, 3, 4, 5, 4, 1, 0),
            (2, 2, 9, 3, 3, 2, 0),
            (2, 2, 6, 3, 5, 1, 2),
            (2, 1, 2, 2, 3, 1, 1),
            (1, 2, 1, 1, 3, 1, 1),
        ] {
            let g = ConvGeom::new(&[n, c, h, h], &[o, c, k, k], s, p).unwrap();
            let x: Vec<f64> = (0..n * c * h * h).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
            let w: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 17 % 7) as f64 - 3.0) / 2.0).collect();
            let fast = forward(&x, &w, &g);
            let slow = naive(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    /// ⟨dy, conv(x, w)⟩ is bilinear, so the adjoints must satisfy
    /// ⟨dy, conv(dx_probe, w)⟩ = ⟨backward_x(dy), dx_probe⟩ and likewise for w.
    #[test]
    fn backward_is_the_adjoint() {
        for &(n, c, h, o, k, s, p) in &[
            (3, 2, 7, 4, 3, 1, 1),
            (2, 3, 8, 2, 3, 2, 1),
            (5, 2, 4, 3, 4, 1, 0),
            (20, 3, 4, 5, 4, 1, 0),
            (2, 2, 9, 3, 3, 2, 0),
            (2, 2, 6, 3, 5, 1, 2),
            (2, 1, 2, 2, 3, 1, 1),
            (1, 2, 1, 1, 3, 1, 1),
        ] {
            let g = ConvGeom::new(&[n, c, h, h], &[o, c, k, k], s, p).unwrap();
            let x: Vec<f64> = (0..n * c * h * h).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
            let w: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 17 % 7) as f64 - 3.0) / 2.0).collect();
            let dy: Vec<f64> = (0..n * o * g.out_h * g.out_w).map(|i| ((i * 13 % 5) as f64 - 2.0) / 4.0).collect();
            let (dx, dw) = backward(&x, &w, &dy, &g, true, true);
            let (dx, dw) = (dx.unwrap(), dw.unwrap());
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let lhs = dot(&dy, &naive(&x, &w, &g));
            assert!((lhs - dot(&dx, &x)).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - dot(&dw, &w)).abs() < 1e-9 * lhs.abs().max(1.0));
            // per-coordinate: unit probes
            for i in (0..x.len()).step_by(7) {
                let mut e = vec![0.0; x.len()];
                e[i] = 1.0;
                assert!((dot(&dy, &naive(&e, &w, &g)) - dx[i]).abs() < 1e-12);
            }
            for i in 0..w.len() {
                let mut e = vec![0.0; w.len()];
                e[i] = 1.0;
                assert!((dot(&dy, &naive(&x, &e, &g)) - dw[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(ConvGeom::new(&[1, 2, 8, 8], &[4, 3, 3, 3], 1, 1).is_err());
        assert!(ConvGeom::new(&[1, 2, 8, 8], &[4, 2, 3, 3], 3, 1).is_err());
        assert!(ConvGeom::new(&[1, 2, 2, 2], &[4, 2, 5, 5], 1, 0).is_err());
        assert!(ConvGeom::new(&[1, 2, 8], &[4, 2, 3, 3], 1, 0).is_err());
    }
}
