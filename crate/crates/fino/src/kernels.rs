//! Plain (non-taped) numeric kernels: convolution, Haar analysis and
//! synthesis, patch extraction. The tape ops in `ops.rs` wrap these for
//! both their forward and backward passes.

use crate::error::{FinoError, Result};
use crate::tensor::Tensor;

/// Cross-correlation with stride 1 and symmetric zero padding.
/// Requires odd kernel and padding = (k-1)/2 so the spatial size is kept.
pub fn conv2d_fwd(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Result<Tensor> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if wcin != cin {
        return Err(FinoError::shape(
            "conv2d",
            format!("input has {cin} channels but weight expects {wcin}"),
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(FinoError::shape(
            "conv2d",
            format!("kernel must be odd and square, got {kh}x{kw}"),
        ));
    }
    if pad != (kh - 1) / 2 {
        return Err(FinoError::Invalid(format!(
            "conv2d: padding {pad} does not preserve spatial size for kernel {kh} (need {})",
            (kh - 1) / 2
        )));
    }
    if b.shape() != [cout] {
        return Err(FinoError::shape(
            "conv2d",
            format!("bias shape {:?} vs {cout} output channels", b.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let os = out.data_mut();
    let hw = h * wd;
    if kh == 3 && h >= 2 && wd >= 2 {
        conv3x3_fwd(xs, ws, bs, os, n, cin, cout, h, wd);
        return Ok(out);
    }
    for ni in 0..n {
        for co in 0..cout {
            let obase = (ni * cout + co) * hw;
            os[obase..obase + hw].fill(bs[co]);
            for ci in 0..cin {
                let ibase = (ni * cin + ci) * hw;
                for dh in 0..kh {
                    for dw in 0..kw {
                        let alpha = ws[((co * cin + ci) * kh + dh) * kw + dw];
                        if alpha == 0.0 {
                            continue;
                        }
                        // oh + dh - pad in [0, h)
                        let oh_lo = pad.saturating_sub(dh);
                        let oh_hi = (h + pad - dh).min(h);
                        let ow_lo = pad.saturating_sub(dw);
                        let ow_hi = (wd + pad - dw).min(wd);
                        for oh in oh_lo..oh_hi {
                            let ih = oh + dh - pad;
                            let orow = obase + oh * wd;
                            let irow = ibase + ih * wd;
                            let shift = dw as isize - pad as isize;
                            let dst = &mut os[orow + ow_lo..orow + ow_hi];
                            let src_start = (irow + ow_lo) as isize + shift;
                            let src = &xs[src_start as usize..src_start as usize + dst.len()];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += alpha * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 3x3 path with the taps of one kernel row fused into a single pass,
/// so each output row is touched 3 times per input channel instead of 9.
/// The row widths here are small (8-32), where loop overhead dominates.
#[allow(clippy::too_many_arguments)]
fn conv3x3_fwd(
    xs: &[f64],
    ws: &[f64],
    bs: &[f64],
    os: &mut [f64],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) {
    let hw = h * wd;
    let pw = wd + 2;
    // One zero-padded input plane, rebuilt per (image, in-channel) and
    // reused across all out-channels; the interior loops then run full
    // rows with no edge branches, which is what lets them vectorize.
    let mut pad = vec![0.0f64; (h + 2) * pw];
    for ni in 0..n {
        for ci in 0..cin {
            let ibase = (ni * cin + ci) * hw;
            for y in 0..h {
                pad[(y + 1) * pw + 1..(y + 1) * pw + 1 + wd]
                    .copy_from_slice(&xs[ibase + y * wd..ibase + (y + 1) * wd]);
            }
            for co in 0..cout {
                let obase = (ni * cout + co) * hw;
                if ci == 0 {
                    os[obase..obase + hw].fill(bs[co]);
                }
                let w = &ws[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                for oh in 0..h {
                    let r0 = &pad[oh * pw..oh * pw + wd + 2];
                    let r1 = &pad[(oh + 1) * pw..(oh + 1) * pw + wd + 2];
                    let r2 = &pad[(oh + 2) * pw..(oh + 2) * pw + wd + 2];
                    let dst = &mut os[obase + oh * wd..obase + (oh + 1) * wd];
                    for j in 0..wd {
                        dst[j] += w[0] * r0[j] + w[1] * r0[j + 1] + w[2] * r0[j + 2]
                            + w[3] * r1[j] + w[4] * r1[j + 1] + w[5] * r1[j + 2]
                            + w[6] * r2[j] + w[7] * r2[j + 1] + w[8] * r2[j + 2];
                    }
                }
            }
        }
    }
}

/// Backward counterpart of `conv3x3_fwd`: per kernel row, one fused pass
/// produces the input-gradient row and the three weight-gradient dots.
#[allow(clippy::too_many_arguments)]
fn conv3x3_bwd(
    xs: &[f64],
    ws: &[f64],
    gs: &[f64],
    gxs: &mut [f64],
    gws: &mut [f64],
    gbs: &mut [f64],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) {
    let hw = h * wd;
    let pw = wd + 2;
    // Zero-padded plane of grad_out, rebuilt per (image, out-channel)
    // and reused across in-channels; see `conv3x3_fwd` for why.
    let mut gpad = vec![0.0f64; (h + 2) * pw];
    for ni in 0..n {
        for co in 0..cout {
            let obase = (ni * cout + co) * hw;
            gbs[co] += gs[obase..obase + hw].iter().sum::<f64>();
            for y in 0..h {
                gpad[(y + 1) * pw + 1..(y + 1) * pw + 1 + wd]
                    .copy_from_slice(&gs[obase + y * wd..obase + (y + 1) * wd]);
            }
            for ci in 0..cin {
                let ibase = (ni * cin + ci) * hw;
                let wbase = (co * cin + ci) * 9;
                let w = &ws[wbase..wbase + 9];
                let mut wacc = [0.0f64; 9];
                for ih in 0..h {
                    // Rows of padded grad_out around input row ih: gpad
                    // row ih+1 is grad row ih.
                    let g0 = &gpad[ih * pw..ih * pw + wd + 2];
                    let g1 = &gpad[(ih + 1) * pw..(ih + 1) * pw + wd + 2];
                    let g2 = &gpad[(ih + 2) * pw..(ih + 2) * pw + wd + 2];
                    // out[oh][ow] += w[dh][dw]·x[oh+dh-1][ow+dw-1]
                    // transposes to a correlation of grad_out with the
                    // 180°-flipped kernel.
                    let gx_row = &mut gxs[ibase + ih * wd..ibase + (ih + 1) * wd];
                    for j in 0..wd {
                        gx_row[j] += w[8] * g0[j] + w[7] * g0[j + 1] + w[6] * g0[j + 2]
                            + w[5] * g1[j] + w[4] * g1[j + 1] + w[3] * g1[j + 2]
                            + w[2] * g2[j] + w[1] * g2[j + 1] + w[0] * g2[j + 2];
                    }
                    // Weight gradient: wacc[dh·3+dw] = Σ g[oh]·x[oh+dh-1],
                    // gathered per x row; grad row ih-dh+1 pairs with dh,
                    // so g2 feeds dh=0 and g0 feeds dh=2.
                    let x_row = &xs[ibase + ih * wd..ibase + (ih + 1) * wd];
                    for (row, base) in [(g2, 0usize), (g1, 3), (g0, 6)] {
                        let mut a0 = 0.0;
                        let mut a1 = 0.0;
                        let mut a2 = 0.0;
                        for j in 0..wd {
                            // row[j+1] is grad col j; dw=0 pairs x[j] with
                            // grad col j+1, dw=2 with grad col j-1.
                            a0 += row[j + 2] * x_row[j];
                            a1 += row[j + 1] * x_row[j];
                            a2 += row[j] * x_row[j];
                        }
                        wacc[base] += a0;
                        wacc[base + 1] += a1;
                        wacc[base + 2] += a2;
                    }
                }
                for (k, a) in wacc.iter().enumerate() {
                    gws[wbase + k] += a;
                }
            }
        }
    }
}

/// Gradients of `conv2d_fwd` w.r.t. input, weight, and bias.
pub fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, wd) = x.dims4().expect("rank-4 input");
    let (cout, _, kh, kw) = w.dims4().expect("rank-4 weight");
    let hw = h * wd;
    let xs = x.data();
    let ws = w.data();
    let gs = grad_out.data();

    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let gxs = gx.data_mut();
    let gws = gw.data_mut();
    let gbs = gb.data_mut();

    if kh == 3 && h >= 2 && wd >= 2 {
        conv3x3_bwd(xs, ws, gs, gxs, gws, gbs, n, cin, cout, h, wd);
        return (gx, gw, gb);
    }
    for ni in 0..n {
        for co in 0..cout {
            let obase = (ni * cout + co) * hw;
            gbs[co] += gs[obase..obase + hw].iter().sum::<f64>();
            for ci in 0..cin {
                let ibase = (ni * cin + ci) * hw;
                for dh in 0..kh {
                    for dw in 0..kw {
                        let widx = ((co * cin + ci) * kh + dh) * kw + dw;
                        let alpha = ws[widx];
                        let oh_lo = pad.saturating_sub(dh);
                        let oh_hi = (h + pad - dh).min(h);
                        let ow_lo = pad.saturating_sub(dw);
                        let ow_hi = (wd + pad - dw).min(wd);
                        let mut wacc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh + dh - pad;
                            let orow = obase + oh * wd;
                            let irow = ibase + ih * wd;
                            let shift = dw as isize - pad as isize;
                            let src_start = (irow + ow_lo) as isize + shift;
                            let len = ow_hi - ow_lo;
                            let g_row = &gs[orow + ow_lo..orow + ow_hi];
                            let x_row = &xs[src_start as usize..src_start as usize + len];
                            for (gv, xv) in g_row.iter().zip(x_row) {
                                wacc += gv * xv;
                            }
                            let gx_row =
                                &mut gxs[src_start as usize..src_start as usize + len];
                            for (gxv, gv) in gx_row.iter_mut().zip(g_row) {
                                *gxv += alpha * gv;
                            }
                        }
                        gws[widx] += wacc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Orthonormal 2x2 Haar analysis: N×C×H×W -> N×4C×H/2×W/2, the C
/// low-frequency channels first, then the 3C detail channels grouped
/// by subband.
pub fn haar_fwd(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(FinoError::shape(
            "haar_forward",
            format!("spatial extents must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, 4 * c, oh, ow]);
    let xs = x.data();
    let os = out.data_mut();
    let ihw = h * w;
    let ohw = oh * ow;
    for ni in 0..n {
        for ci in 0..c {
            let ibase = (ni * c + ci) * ihw;
            let ll = (ni * 4 * c + ci) * ohw;
            let lh = (ni * 4 * c + c + ci) * ohw;
            let hl = (ni * 4 * c + 2 * c + ci) * ohw;
            let hh = (ni * 4 * c + 3 * c + ci) * ohw;
            for y in 0..oh {
                for xw in 0..ow {
                    let a = xs[ibase + (2 * y) * w + 2 * xw];
                    let b = xs[ibase + (2 * y) * w + 2 * xw + 1];
                    let cc = xs[ibase + (2 * y + 1) * w + 2 * xw];
                    let d = xs[ibase + (2 * y + 1) * w + 2 * xw + 1];
                    let o = y * ow + xw;
                    os[ll + o] = 0.5 * (a + b + cc + d);
                    os[lh + o] = 0.5 * (a - b + cc - d);
                    os[hl + o] = 0.5 * (a + b - cc - d);
                    os[hh + o] = 0.5 * (a - b - cc + d);
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`haar_fwd`]: N×4C×H×W -> N×C×2H×2W.
pub fn haar_inv(u: &Tensor) -> Result<Tensor> {
    let (n, c4, h, w) = u.dims4()?;
    if c4 % 4 != 0 {
        return Err(FinoError::shape(
            "haar_inverse",
            format!("channel count {c4} not divisible by 4"),
        ));
    }
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let us = u.data();
    let os = out.data_mut();
    let ihw = h * w;
    let ohw = oh * ow;
    for ni in 0..n {
        for ci in 0..c {
            let ll = (ni * c4 + ci) * ihw;
            let lh = (ni * c4 + c + ci) * ihw;
            let hl = (ni * c4 + 2 * c + ci) * ihw;
            let hh = (ni * c4 + 3 * c + ci) * ihw;
            let obase = (ni * c + ci) * ohw;
            for y in 0..h {
                for xw in 0..w {
                    let i = y * w + xw;
                    let (l, m, p, q) = (us[ll + i], us[lh + i], us[hl + i], us[hh + i]);
                    os[obase + (2 * y) * ow + 2 * xw] = 0.5 * (l + m + p + q);
                    os[obase + (2 * y) * ow + 2 * xw + 1] = 0.5 * (l - m + p - q);
                    os[obase + (2 * y + 1) * ow + 2 * xw] = 0.5 * (l + m - p - q);
                    os[obase + (2 * y + 1) * ow + 2 * xw + 1] = 0.5 * (l - m - p + q);
                }
            }
        }
    }
    Ok(out)
}

/// Number of sliding positions along one axis.
pub fn patch_positions(extent: usize, patch: usize, stride: usize) -> usize {
    (extent - patch) / stride + 1
}

/// Vectorize overlapping patches: N×C×H×W -> m×M with m = patch_edge²
/// and M = N·C·positions (channels treated as independent realizations).
/// Column order: (n, c, py, px) outer to inner; rows are patch pixels
/// row-major.
pub fn extract_patches_fwd(x: &Tensor, patch_edge: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if patch_edge > h.min(w) {
        return Err(FinoError::Invalid(format!(
            "extract_patches: patch {patch_edge} larger than image {h}x{w}"
        )));
    }
    if stride == 0 {
        return Err(FinoError::Invalid("extract_patches: stride must be >= 1".into()));
    }
    let nh = patch_positions(h, patch_edge, stride);
    let nw = patch_positions(w, patch_edge, stride);
    let m_rows = patch_edge * patch_edge;
    let m_cols = n * c * nh * nw;
    let mut out = Tensor::zeros(&[m_rows, m_cols]);
    let xs = x.data();
    let os = out.data_mut();
    let hw = h * w;
    let mut col = 0;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for py in 0..nh {
                for px in 0..nw {
                    for dy in 0..patch_edge {
                        let src = base + (py * stride + dy) * w + px * stride;
                        for dx in 0..patch_edge {
                            os[(dy * patch_edge + dx) * m_cols + col] = xs[src + dx];
                        }
                    }
                    col += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Scatter-add patch-matrix gradients back to overlapping source pixels.
pub fn extract_patches_bwd(
    input_shape: &[usize],
    grad: &Tensor,
    patch_edge: usize,
    stride: usize,
) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let (n, c, h, w) = gx.dims4().expect("rank-4");
    let nh = patch_positions(h, patch_edge, stride);
    let nw = patch_positions(w, patch_edge, stride);
    let m_cols = n * c * nh * nw;
    let gs = grad.data();
    let gxs = gx.data_mut();
    let hw = h * w;
    let mut col = 0;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for py in 0..nh {
                for px in 0..nw {
                    for dy in 0..patch_edge {
                        let dst = base + (py * stride + dy) * w + px * stride;
                        for dx in 0..patch_edge {
                            gxs[dst + dx] += gs[(dy * patch_edge + dx) * m_cols + col];
                        }
                    }
                    col += 1;
                }
            }
        }
    }
    gx
}

/// Mean of column outer products: V (m×M) -> (1/M) V Vᵀ (m×m).
pub fn gram_mean_fwd(v: &Tensor) -> Result<Tensor> {
    let [m, cols] = v.shape() else {
        return Err(FinoError::shape(
            "gram_mean",
            format!("expected rank 2, got {:?}", v.shape()),
        ));
    };
    let (m, cols) = (*m, *cols);
    let mut out = Tensor::zeros(&[m, m]);
    let vs = v.data();
    let os = out.data_mut();
    for a in 0..m {
        for b in a..m {
            let mut acc = 0.0;
            let ra = &vs[a * cols..(a + 1) * cols];
            let rb = &vs[b * cols..(b + 1) * cols];
            for (x, y) in ra.iter().zip(rb) {
                acc += x * y;
            }
            acc /= cols as f64;
            os[a * m + b] = acc;
            os[b * m + a] = acc;
        }
    }
    Ok(out)
}

/// dL/dV = (1/M) (G + Gᵀ) V for Σ = (1/M) V Vᵀ.
pub fn gram_mean_bwd(v: &Tensor, grad: &Tensor) -> Tensor {
    let m = v.shape()[0];
    let cols = v.shape()[1];
    let vs = v.data();
    let gs = grad.data();
    let mut gv = Tensor::zeros(&[m, cols]);
    let gvs = gv.data_mut();
    for a in 0..m {
        for b in 0..m {
            let coeff = (gs[a * m + b] + gs[b * m + a]) / cols as f64;
            if coeff == 0.0 {
                continue;
            }
            let src = &vs[b * cols..(b + 1) * cols];
            let dst = &mut gvs[a * cols..(a + 1) * cols];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += coeff * s;
            }
        }
    }
    gv
}
