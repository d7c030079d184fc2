//! Raw numeric kernels on flat buffers. Convolutions go through im2col and a
//! single GEMM per call; all reductions run in a fixed order.

use crate::error::{Error, Result};

/// Geometry of a 2-D convolution, described from the side of its (larger)
/// input map. The transposed convolution and the weight gradient reuse the
/// same description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// Spatial extent `(H, W)` of the convolution input.
    pub input: (usize, usize),
}

impl ConvGeom {
    pub fn new(
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        input: (usize, usize),
    ) -> Result<Self> {
        let geom = Self {
            kernel,
            stride,
            padding,
            input,
        };
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv", format!("degenerate geometry {geom:?}")));
        }
        if input.0 + 2 * padding.0 < kernel.0 || input.1 + 2 * padding.1 < kernel.1 {
            return Err(Error::shape(
                "conv",
                format!("kernel larger than padded input in {geom:?}"),
            ));
        }
        Ok(geom)
    }

    pub fn output(&self) -> (usize, usize) {
        (
            (self.input.0 + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1,
            (self.input.1 + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }
}

/// `a · b` with optional transposed views of `a`/`b`. `a` is logically
/// `m×k`, `b` is `k×n`; the result is `m×n` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_transposed: bool, b: &[f32], b_transposed: bool) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let mut c: Vec<f32> = Vec::with_capacity(m * n);
    // SAFETY: the asserts keep every strided read inside `a` and `b`; with
    // beta = 0 sgemm writes all m·n outputs without reading them, so the
    // buffer is fully initialized before `set_len`.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

/// Output columns `lo..hi` whose tap `q` lands inside a row of width `w`.
#[inline]
fn valid_cols(q: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if q >= pad { 0 } else { (pad - q).div_ceil(stride) };
    let hi = if w + pad > q {
        ((w + pad - q - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds `x: [B, C, H, W]` into `[C·kh·kw, B·Ho·Wo]`.
pub(crate) fn im2col(x: &[f32], batch: usize, channels: usize, geom: &ConvGeom) -> Vec<f32> {
    let (h, w) = geom.input;
    let (ho, wo) = geom.output();
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let plane = ho * wo;
    let ncols = batch * plane;
    let mut cols = vec![0.0f32; channels * kh * kw * ncols];
    for c in 0..channels {
        for p in 0..kh {
            for q in 0..kw {
                let row = (c * kh + p) * kw + q;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(q, pw, sw, w, wo);
                for b in 0..batch {
                    let src = &x[(b * channels + c) * h * w..(b * channels + c + 1) * h * w];
                    for i in 0..ho {
                        let ii = (i * sh + p) as isize - ph as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src_row = &src[ii as usize * w..(ii as usize + 1) * w];
                        let dst = &mut dst_row[b * plane + i * wo..b * plane + (i + 1) * wo];
                        if sw == 1 {
                            let s0 = lo + q - pw;
                            dst[lo..hi].copy_from_slice(&src_row[s0..s0 + hi - lo]);
                        } else {
                            for j in lo..hi {
                                dst[j] = src_row[j * sw + q - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds `[C·kh·kw, B·Ho·Wo]` back to `[B, C, H, W]`,
/// summing overlapping taps.
fn col2im(cols: &[f32], batch: usize, channels: usize, geom: &ConvGeom) -> Vec<f32> {
    let (h, w) = geom.input;
    let (ho, wo) = geom.output();
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let plane = ho * wo;
    let ncols = batch * plane;
    let mut x = vec![0.0f32; batch * channels * h * w];
    for c in 0..channels {
        for p in 0..kh {
            for q in 0..kw {
                let row = (c * kh + p) * kw + q;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let dst = &mut x[(b * channels + c) * h * w..(b * channels + c + 1) * h * w];
                    for i in 0..ho {
                        let ii = (i * sh + p) as isize - ph as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ii as usize * w..(ii as usize + 1) * w];
                        let src = &src_row[b * plane + i * wo..b * plane + (i + 1) * wo];
                        let (lo, hi) = valid_cols(q, pw, sw, w, wo);
                        for j in lo..hi {
                            dst_row[j * sw + q - pw] += src[j];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[B, O, P] -> [O, B·P]`
fn batch_major_to_channel_major(g: &[f32], batch: usize, chans: usize, plane: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(g.len());
    for o in 0..chans {
        for b in 0..batch {
            out.extend_from_slice(&g[(b * chans + o) * plane..(b * chans + o + 1) * plane]);
        }
    }
    out
}

/// `[O, B·P] -> [B, O, P]`
fn channel_major_to_batch_major(g: &[f32], batch: usize, chans: usize, plane: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(g.len());
    for b in 0..batch {
        for o in 0..chans {
            let start = o * batch * plane + b * plane;
            out.extend_from_slice(&g[start..start + plane]);
        }
    }
    out
}

#[cfg(test)]
/// Cross-correlation `x: [B, C, H, W]`, `w: [O, C, kh, kw]` -> `[B, O, Ho, Wo]`.
pub(crate) fn conv2d(
    x: &[f32],
    batch: usize,
    in_ch: usize,
    w: &[f32],
    out_ch: usize,
    geom: &ConvGeom,
) -> Vec<f32> {
    conv2d_cols(&im2col(x, batch, in_ch, geom), batch, w, out_ch, in_ch, geom)
}

/// [`conv2d`] on an input already unfolded by [`im2col`].
pub(crate) fn conv2d_cols(
    cols: &[f32],
    batch: usize,
    w: &[f32],
    out_ch: usize,
    in_ch: usize,
    geom: &ConvGeom,
) -> Vec<f32> {
    let (ho, wo) = geom.output();
    let plane = ho * wo;
    let out = gemm(out_ch, in_ch * geom.taps(), batch * plane, w, false, cols, false);
    channel_major_to_batch_major(&out, batch, out_ch, plane)
}

/// Adjoint of [`conv2d`] in its input: `g: [B, O, Ho, Wo]` -> `[B, C, H, W]`.
pub(crate) fn conv_transpose2d(
    g: &[f32],
    batch: usize,
    out_ch: usize,
    w: &[f32],
    in_ch: usize,
    geom: &ConvGeom,
) -> Vec<f32> {
    let (ho, wo) = geom.output();
    let plane = ho * wo;
    let gm = batch_major_to_channel_major(g, batch, out_ch, plane);
    let taps = in_ch * geom.taps();
    let cols = gemm(taps, out_ch, batch * plane, w, true, &gm, false);
    col2im(&cols, batch, in_ch, geom)
}

#[cfg(test)]
/// Adjoint of [`conv2d`] in its weight: `x: [B, C, H, W]`, `g: [B, O, Ho, Wo]`
/// -> `[O, C, kh, kw]`.
pub(crate) fn conv2d_weight_grad(
    x: &[f32],
    batch: usize,
    in_ch: usize,
    g: &[f32],
    out_ch: usize,
    geom: &ConvGeom,
) -> Vec<f32> {
    conv2d_weight_grad_cols(&im2col(x, batch, in_ch, geom), batch, in_ch, g, out_ch, geom)
}

/// [`conv2d_weight_grad`] on an input already unfolded by [`im2col`].
pub(crate) fn conv2d_weight_grad_cols(
    cols: &[f32],
    batch: usize,
    in_ch: usize,
    g: &[f32],
    out_ch: usize,
    geom: &ConvGeom,
) -> Vec<f32> {
    let (ho, wo) = geom.output();
    let plane = ho * wo;
    let gm = batch_major_to_channel_major(g, batch, out_ch, plane);
    let taps = in_ch * geom.taps();
    gemm(out_ch, batch * plane, taps, &gm, false, cols, true)
}

pub(crate) fn transpose2d(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(a.len());
    for c in 0..cols {
        out.extend((0..rows).map(|r| a[r * cols + c]));
    }
    out
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Strides into `target` for every element of `source`, zero along the
/// broadcast axes.
pub(crate) fn broadcast_strides(source: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if source.len() != target.len() {
        return Err(Error::shape(
            "broadcast",
            format!("rank mismatch {source:?} vs {target:?}"),
        ));
    }
    let strides = row_major_strides(target);
    source
        .iter()
        .zip(target)
        .zip(&strides)
        .map(|((&s, &t), &st)| match (s, t) {
            _ if s == t => Ok(if t == 1 { 0 } else { st }),
            (_, 1) => Ok(0),
            _ => Err(Error::shape(
                "broadcast",
                format!("{source:?} incompatible with {target:?}"),
            )),
        })
        .collect()
}

/// Merges the axes of `big` into maximal runs that are either all kept or
/// all broadcast (size 1 in `small`). Axes of length 1 vanish.
fn collapse_runs(big: &[usize], small: &[usize]) -> Vec<(usize, bool)> {
    let mut runs: Vec<(usize, bool)> = Vec::with_capacity(big.len());
    for (&b, &s) in big.iter().zip(small) {
        if b == 1 {
            continue;
        }
        let broadcast = s == 1;
        match runs.last_mut() {
            Some((len, r)) if *r == broadcast => *len *= b,
            _ => runs.push((b, broadcast)),
        }
    }
    runs
}

fn sum_runs(x: &[f32], runs: &[(usize, bool)], out: &mut [f32]) {
    let Some((&(n, reduced), rest)) = runs.split_first() else {
        out[0] += x[0];
        return;
    };
    if rest.is_empty() {
        if reduced {
            let mut acc = out[0];
            for &v in x {
                acc += v;
            }
            out[0] = acc;
        } else {
            for (o, &v) in out.iter_mut().zip(x) {
                *o += v;
            }
        }
        return;
    }
    let inner_x = x.len() / n;
    let inner_out = if reduced { out.len() } else { out.len() / n };
    for i in 0..n {
        let xs = &x[i * inner_x..(i + 1) * inner_x];
        let os = if reduced {
            &mut out[..]
        } else {
            &mut out[i * inner_out..(i + 1) * inner_out]
        };
        sum_runs(xs, rest, os);
    }
}

fn broadcast_runs(x: &[f32], runs: &[(usize, bool)], out: &mut Vec<f32>) {
    let Some((&(n, repeated), rest)) = runs.split_first() else {
        out.push(x[0]);
        return;
    };
    if rest.is_empty() {
        if repeated {
            out.resize(out.len() + n, x[0]);
        } else {
            out.extend_from_slice(x);
        }
        return;
    }
    let inner_x = if repeated { x.len() } else { x.len() / n };
    for i in 0..n {
        let xs = if repeated {
            x
        } else {
            &x[i * inner_x..(i + 1) * inner_x]
        };
        broadcast_runs(xs, rest, out);
    }
}

/// Sums `x` (shape `from`) down to `to`, where each axis of `to` equals the
/// one in `from` or is 1. Elements are accumulated in row-major order.
pub(crate) fn sum_to(x: &[f32], from: &[usize], to: &[usize]) -> Result<Vec<f32>> {
    broadcast_strides(from, to)?;
    let mut out = vec![0.0f32; to.iter().product()];
    if !x.is_empty() {
        sum_runs(x, &collapse_runs(from, to), &mut out);
    }
    Ok(out)
}

/// Inverse direction of [`sum_to`]: repeats `x` (shape `from`) along the axes
/// where `from` is 1 and `to` is not.
pub(crate) fn broadcast_to(x: &[f32], from: &[usize], to: &[usize]) -> Result<Vec<f32>> {
    broadcast_strides(to, from)?;
    let n: usize = to.iter().product();
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        broadcast_runs(x, &collapse_runs(to, from), &mut out);
    }
    Ok(out)
}

/// `true` when no entry is NaN or infinite.
pub(crate) fn all_finite(data: &[f32]) -> bool {
    // Non-finite values are exactly those whose magnitude bits reach the
    // all-ones exponent; an integer max-reduction vectorizes well.
    data.chunks(4096)
        .all(|c| c.iter().fold(0u32, |m, v| m.max(v.to_bits() & 0x7fff_ffff)) < 0x7f80_0000)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f32],
        batch: usize,
        cin: usize,
        w: &[f32],
        cout: usize,
        g: &ConvGeom,
    ) -> Vec<f32> {
        let (h, wd) = g.input;
        let (ho, wo) = g.output();
        let mut out = vec![0.0; batch * cout * ho * wo];
        for b in 0..batch {
            for o in 0..cout {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0f64;
                        for c in 0..cin {
                            for p in 0..g.kernel.0 {
                                for q in 0..g.kernel.1 {
                                    let ii = (i * g.stride.0 + p) as isize - g.padding.0 as isize;
                                    let jj = (j * g.stride.1 + q) as isize - g.padding.1 as isize;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                        continue;
                                    }
                                    let xv = x[((b * cin + c) * h + ii as usize) * wd + jj as usize];
                                    let wv = w[((o * cin + c) * g.kernel.0 + p) * g.kernel.1 + q];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        out[((b * cout + o) * ho + i) * wo + j] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 37 % 17) as f32 - 8.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeom::new((3, 3), (2, 1), (1, 1), (5, 6)).unwrap();
        let x = ramp(2 * 3 * 5 * 6, 0.1);
        let w = ramp(4 * 3 * 9, 0.05);
        let fast = conv2d(&x, 2, 3, &w, 4, &g);
        let slow = naive_conv(&x, 2, 3, &w, 4, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn adjoint_identities_hold() {
        // <g, conv(x, w)> == <x, convT(g, w)> == <w, wgrad(x, g)>
        let g = ConvGeom::new((3, 2), (2, 2), (1, 0), (6, 5)).unwrap();
        let (ho, wo) = g.output();
        let x = ramp(2 * 3 * 30, 0.1);
        let w = ramp(4 * 3 * 6, 0.07);
        let gy = ramp(2 * 4 * ho * wo, 0.03);
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(p, q)| (p * q) as f64).sum::<f64>();
        let y = conv2d(&x, 2, 3, &w, 4, &g);
        let xt = conv_transpose2d(&gy, 2, 4, &w, 3, &g);
        let wg = conv2d_weight_grad(&x, 2, 3, &gy, 4, &g);
        let b1 = dot(&gy, &y);
        assert!((b1 - dot(&x, &xt)).abs() < 1e-4);
        assert!((b1 - dot(&w, &wg)).abs() < 1e-4);
    }

    #[test]
    fn sum_and_broadcast_are_adjoint() {
        let from = [2, 3, 4];
        let to = [2, 1, 4];
        let x = ramp(24, 1.0);
        let s = sum_to(&x, &from, &to).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s[0], x[0] + x[4] + x[8]);
        let b = broadcast_to(&s, &to, &from).unwrap();
        assert_eq!(b[4], s[0]);
        assert!(sum_to(&x, &from, &[3, 1, 4]).is_err());
    }
}
