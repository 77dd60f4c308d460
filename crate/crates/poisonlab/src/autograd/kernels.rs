//! Raw compute kernels behind the tape operations.
//!
//! Every output element is accumulated by exactly one thread in a fixed
//! sequential order, so results are bit-identical for any thread count.

use rayon::prelude::*;

/// Work size below which parallel dispatch is not worth it.
const PAR_THRESHOLD: usize = 1 << 16;

/// C = op(A) @ op(B) where op transposes when the flag is set.
/// A is `m x k` (or `k x m` if `ta`), B is `k x n` (or `n x k` if `tb`).
/// `ta && tb` is not used by any VJP and is unimplemented.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let big = m * n * k >= PAR_THRESHOLD;
    match (ta, tb) {
        (false, false) => {
            let body = |i: usize, row: &mut [f64]| {
                for p in 0..k {
                    let av = a[i * k + p];
                    if av != 0.0 {
                        let brow = &b[p * n..(p + 1) * n];
                        for (cv, bv) in row.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            };
            apply_rows(&mut c, n, big, body);
        }
        (false, true) => {
            let body = |i: usize, row: &mut [f64]| {
                let arow = &a[i * k..(i + 1) * k];
                for (j, cv) in row.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for (av, bv) in arow.iter().zip(brow) {
                        acc += av * bv;
                    }
                    *cv = acc;
                }
            };
            apply_rows(&mut c, n, big, body);
        }
        (true, false) => {
            // A is k x m; C[i, :] = sum_p A[p, i] * B[p, :]
            let body = |i: usize, row: &mut [f64]| {
                for p in 0..k {
                    let av = a[p * m + i];
                    if av != 0.0 {
                        let brow = &b[p * n..(p + 1) * n];
                        for (cv, bv) in row.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            };
            apply_rows(&mut c, n, big, body);
        }
        (true, true) => unimplemented!("matmul with both sides transposed"),
    }
    c
}

fn apply_rows(c: &mut [f64], n: usize, parallel: bool, body: impl Fn(usize, &mut [f64]) + Sync) {
    if parallel {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// Spatial output size of a stride-1 convolution.
pub fn conv_out_dim(h: usize, k: usize, pad: usize) -> usize {
    (h + 2 * pad).saturating_sub(k - 1)
}

pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn oh(&self) -> usize {
        conv_out_dim(self.h, self.k, self.pad)
    }
    pub fn ow(&self) -> usize {
        conv_out_dim(self.w, self.k, self.pad)
    }
}

/// Unfold one image into a `(cin * k * k) x (oh * ow)` patch matrix.
fn im2col(img: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let (h, w, k, pad) = (d.h, d.w, d.k, d.pad);
    let (oh, ow) = (d.oh(), d.ow());
    for ci in 0..d.cin {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    // valid ox range: 0 <= ox + kx - pad < w
                    let lo = pad.saturating_sub(kx);
                    let hi = (w + pad - kx).min(ow);
                    dst[..lo.min(ow)].fill(0.0);
                    if hi > lo {
                        let src = iy as usize * w + lo + kx - pad;
                        dst[lo..hi].copy_from_slice(&plane[src..src + hi - lo]);
                    }
                    if hi < ow {
                        dst[hi..].fill(0.0);
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the image (adds into `img`).
fn col2im(cols: &[f64], d: &ConvDims, img: &mut [f64]) {
    let (h, w, k, pad) = (d.h, d.w, d.k, d.pad);
    let (oh, ow) = (d.oh(), d.ow());
    for ci in 0..d.cin {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let lo = pad.saturating_sub(kx);
                    let hi = (w + pad - kx).min(ow);
                    if hi > lo {
                        let base = iy as usize * w + kx + lo - pad;
                        for (off, v) in row[oy * ow + lo..oy * ow + hi].iter().enumerate() {
                            plane[base + off] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution, stride 1: `x [b, cin, h, w]`, `wgt [cout, cin, k, k]`.
pub fn conv2d_fwd(x: &[f64], wgt: &[f64], d: &ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.oh(), d.ow());
    let per_out = d.cout * oh * ow;
    let per_in = d.cin * d.h * d.w;
    let ckk = d.cin * d.k * d.k;
    let mut out = vec![0.0; d.batch * per_out];
    let run = |(bi, dst): (usize, &mut [f64])| {
        let mut cols = vec![0.0; ckk * oh * ow];
        im2col(&x[bi * per_in..(bi + 1) * per_in], d, &mut cols);
        let prod = matmul(wgt, &cols, d.cout, ckk, oh * ow, false, false);
        dst.copy_from_slice(&prod);
    };
    if d.batch > 1 && d.batch * per_out * ckk >= PAR_THRESHOLD {
        out.par_chunks_mut(per_out).enumerate().for_each(run);
    } else {
        out.chunks_mut(per_out).enumerate().for_each(run);
    }
    out
}

/// Gradient of the convolution output w.r.t. its input.
pub fn conv2d_igrad(gout: &[f64], wgt: &[f64], d: &ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.oh(), d.ow());
    let per_out = d.cout * oh * ow;
    let per_in = d.cin * d.h * d.w;
    let ckk = d.cin * d.k * d.k;
    let mut dx = vec![0.0; d.batch * per_in];
    let run = |(bi, dst): (usize, &mut [f64])| {
        let g = &gout[bi * per_out..(bi + 1) * per_out];
        let dcols = matmul(wgt, g, ckk, d.cout, oh * ow, true, false);
        col2im(&dcols, d, dst);
    };
    if d.batch > 1 && d.batch * per_out * ckk >= PAR_THRESHOLD {
        dx.par_chunks_mut(per_in).enumerate().for_each(run);
    } else {
        dx.chunks_mut(per_in).enumerate().for_each(run);
    }
    dx
}

/// Gradient of the convolution output w.r.t. the weights.
/// Per-image partials are summed in batch order, keeping the result
/// independent of the parallel schedule.
pub fn conv2d_wgrad(x: &[f64], gout: &[f64], d: &ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.oh(), d.ow());
    let per_out = d.cout * oh * ow;
    let per_in = d.cin * d.h * d.w;
    let ckk = d.cin * d.k * d.k;
    let partial = |bi: usize| -> Vec<f64> {
        let mut cols = vec![0.0; ckk * oh * ow];
        im2col(&x[bi * per_in..(bi + 1) * per_in], d, &mut cols);
        matmul(&gout[bi * per_out..(bi + 1) * per_out], &cols, d.cout, oh * ow, ckk, false, true)
    };
    let partials: Vec<Vec<f64>> = if d.batch > 1 && d.batch * per_out * ckk >= PAR_THRESHOLD {
        (0..d.batch).into_par_iter().map(partial).collect()
    } else {
        (0..d.batch).map(partial).collect()
    };
    let mut dw = vec![0.0; d.cout * ckk];
    for p in partials {
        for (acc, v) in dw.iter_mut().zip(p) {
            *acc += v;
        }
    }
    dw
}

/// Max pooling with `stride == size`; trailing rows/cols that do not fill a
/// window are dropped. Ties resolve to the lowest flat index.
/// Returns the pooled values and the flat argmax index of each output.
pub fn maxpool_fwd(
    x: &[f64],
    batch_chans: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / size, w / size);
    let mut out = vec![0.0; batch_chans * ho * wo];
    let mut idx = vec![0usize; out.len()];
    for bc in 0..batch_chans {
        let plane = bc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0usize;
                for dy in 0..size {
                    let base = plane + (oy * size + dy) * w + ox * size;
                    for dx in 0..size {
                        let v = x[base + dx];
                        if v > best {
                            best = v;
                            best_at = base + dx;
                        }
                    }
                }
                let o = bc * ho * wo + oy * wo + ox;
                out[o] = best;
                idx[o] = best_at;
            }
        }
    }
    (out, idx)
}

/// Scatter pooled gradients back to the argmax positions.
pub fn pool_scatter(g: &[f64], idx: &[usize], in_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; in_len];
    for (v, &at) in g.iter().zip(idx) {
        dx[at] += v;
    }
    dx
}

/// Gather values at the recorded argmax positions (adjoint of `pool_scatter`).
pub fn pool_gather(u: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&at| u[at]).collect()
}

/// Per-image flip / fractional-translation parameters for grid resampling.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ResampleSpec {
    pub flip: bool,
    pub dx: f64,
    pub dy: f64,
}

/// Bilinear grid resampling of `x [b, c, h, w]`: horizontal flip followed by
/// translation with zero padding. Linear in the input pixels.
pub fn resample_fwd(x: &[f64], params: &[ResampleSpec], c: usize, h: usize, w: usize) -> Vec<f64> {
    let per = c * h * w;
    let mut out = vec![0.0; x.len()];
    for (bi, p) in params.iter().enumerate() {
        let img = &x[bi * per..(bi + 1) * per];
        let dst = &mut out[bi * per..(bi + 1) * per];
        for y in 0..h {
            let ys = y as f64 - p.dy;
            for xo in 0..w {
                let xs = if p.flip { (w - 1 - xo) as f64 + p.dx } else { xo as f64 - p.dx };
                let mut taps = [(0isize, 0isize, 0.0); 4];
                bilinear_taps(ys, xs, &mut taps);
                for ci in 0..c {
                    let plane = &img[ci * h * w..(ci + 1) * h * w];
                    let mut acc = 0.0;
                    for &(ty, tx, wt) in &taps {
                        if wt != 0.0 && ty >= 0 && ty < h as isize && tx >= 0 && tx < w as isize {
                            acc += wt * plane[ty as usize * w + tx as usize];
                        }
                    }
                    dst[ci * h * w + y * w + xo] = acc;
                }
            }
        }
    }
    out
}

/// Adjoint of `resample_fwd` under the same parameters.
pub fn resample_transpose(
    g: &[f64],
    params: &[ResampleSpec],
    c: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let per = c * h * w;
    let mut dx = vec![0.0; g.len()];
    for (bi, p) in params.iter().enumerate() {
        let gi = &g[bi * per..(bi + 1) * per];
        let dst = &mut dx[bi * per..(bi + 1) * per];
        for y in 0..h {
            let ys = y as f64 - p.dy;
            for xo in 0..w {
                let xs = if p.flip { (w - 1 - xo) as f64 + p.dx } else { xo as f64 - p.dx };
                let mut taps = [(0isize, 0isize, 0.0); 4];
                bilinear_taps(ys, xs, &mut taps);
                for ci in 0..c {
                    let gv = gi[ci * h * w + y * w + xo];
                    if gv == 0.0 {
                        continue;
                    }
                    let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
                    for &(ty, tx, wt) in &taps {
                        if wt != 0.0 && ty >= 0 && ty < h as isize && tx >= 0 && tx < w as isize {
                            plane[ty as usize * w + tx as usize] += wt * gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn bilinear_taps(ys: f64, xs: f64, taps: &mut [(isize, isize, f64); 4]) {
    let y0 = ys.floor();
    let x0 = xs.floor();
    let wy = ys - y0;
    let wx = xs - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    *taps = [
        (y0, x0, (1.0 - wy) * (1.0 - wx)),
        (y0, x0 + 1, (1.0 - wy) * wx),
        (y0 + 1, x0, wy * (1.0 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    ];
}

/// Row-stable softmax of `x [m, n]`.
pub fn softmax_rows(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let dst = &mut out[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, v) in dst.iter_mut().zip(row) {
            *d = (v - mx).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Softmax cross-entropy over rows, fused as log-sum-exp with max
/// subtraction. Returns the summed loss; the caller divides for a mean.
pub fn cross_entropy_sum(logits: &[f64], labels: &[usize], n: usize) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let nn = matmul(&a, &b, 2, 2, 2, false, false);
        assert_eq!(nn, vec![19.0, 22.0, 43.0, 50.0]);
        // A @ B^T with B^T stored as B rows
        let bt = [5.0, 7.0, 6.0, 8.0];
        assert_eq!(matmul(&a, &bt, 2, 2, 2, false, true), nn);
        let at = [1.0, 3.0, 2.0, 4.0];
        assert_eq!(matmul(&at, &b, 2, 2, 2, true, false), nn);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let d = ConvDims { batch: 1, cin: 1, h: 3, w: 3, cout: 1, k: 1, pad: 0 };
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        assert_eq!(conv2d_fwd(&x, &[1.0], &d), x);
    }

    #[test]
    fn conv_igrad_is_adjoint_of_fwd() {
        // <C(x, w), g> == <x, C^T(g, w)> for random-ish data.
        let d = ConvDims { batch: 2, cin: 2, h: 5, w: 4, cout: 3, k: 3, pad: 1 };
        let xn = d.batch * d.cin * d.h * d.w;
        let wn = d.cout * d.cin * d.k * d.k;
        let x: Vec<f64> = (0..xn).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let wgt: Vec<f64> = (0..wn).map(|i| ((i * 53 % 13) as f64 - 6.0) / 9.0).collect();
        let y = conv2d_fwd(&x, &wgt, &d);
        let g: Vec<f64> = (0..y.len()).map(|i| ((i * 29 % 7) as f64 - 3.0) / 5.0).collect();
        let dx = conv2d_igrad(&g, &wgt, &d);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn maxpool_breaks_ties_to_lowest_index() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let (out, idx) = maxpool_fwd(&x, 1, 2, 2, 2);
        assert_eq!(out, vec![1.0]);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn maxpool_drops_partial_windows() {
        // 32 -> 10 -> 3 is the pooling chain used by the conv stack.
        assert_eq!(32 / 3, 10);
        assert_eq!(10 / 3, 3);
    }

    #[test]
    fn resample_integer_shift_is_exact() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let p = [ResampleSpec { flip: false, dx: 1.0, dy: 0.0 }];
        let out = resample_fwd(&x, &p, 1, 4, 4);
        // column 0 becomes zero padding, columns shift right by one
        assert_eq!(&out[0..4], &[0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn resample_transpose_is_adjoint() {
        let x: Vec<f64> = (0..48).map(|i| ((i * 31 % 17) as f64 - 8.0) / 9.0).collect();
        let p = [ResampleSpec { flip: true, dx: 0.7, dy: -1.3 }];
        let y = resample_fwd(&x, &p, 3, 4, 4);
        let g: Vec<f64> = (0..48).map(|i| ((i * 13 % 9) as f64 - 4.0) / 3.0).collect();
        let dx = resample_transpose(&g, &p, 3, 4, 4);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
