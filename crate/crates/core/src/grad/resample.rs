//! Bilinear resampling with the align-corners-false convention.
//!
//! Output pixel `i` samples source coordinate `(i + 0.5) * in / out - 0.5`,
//! clamped to the valid range so borders replicate the edge pixel. Resizing
//! to the same size is the identity.

/// Source taps for one output coordinate: `(i0, i1, w1)` with weight
/// `1 - w1` on `i0` and `w1` on `i1`.
#[inline]
pub fn taps(out_index: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_index as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Resizes an HWC buffer.
pub fn resize(
    data: &[f64],
    (in_h, in_w, c): (usize, usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w * c];
    let xtaps: Vec<_> = (0..out_w).map(|x| taps(x, in_w, out_w)).collect();
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, in_h, out_h);
        for (x, &(x0, x1, fx)) in xtaps.iter().enumerate() {
            for ch in 0..c {
                let p = |yy: usize, xx: usize| data[(yy * in_w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(y * out_w + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize`]: scatters output gradients back onto the source grid.
pub fn resize_adjoint(
    grad_out: &[f64],
    (in_h, in_w, c): (usize, usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f64> {
    let mut g = vec![0.0; in_h * in_w * c];
    let xtaps: Vec<_> = (0..out_w).map(|x| taps(x, in_w, out_w)).collect();
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, in_h, out_h);
        for (x, &(x0, x1, fx)) in xtaps.iter().enumerate() {
            for ch in 0..c {
                let go = grad_out[(y * out_w + x) * c + ch];
                let mut put = |yy: usize, xx: usize, w: f64| g[(yy * in_w + xx) * c + ch] += w * go;
                put(y0, x0, (1.0 - fy) * (1.0 - fx));
                put(y0, x1, (1.0 - fy) * fx);
                put(y1, x0, fy * (1.0 - fx));
                put(y1, x1, fy * fx);
            }
        }
    }
    g
}

/// Samples an HWC buffer at a fractional position; outside the grid returns `fill`.
pub fn sample_or(
    data: &[f64],
    (h, w, c): (usize, usize, usize),
    sy: f64,
    sx: f64,
    ch: usize,
    fill: f64,
) -> f64 {
    if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
        return fill;
    }
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let p = |yy: usize, xx: usize| data[(yy * w + xx) * c + ch];
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}
