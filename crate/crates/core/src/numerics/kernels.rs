//! Raw forward/backward kernels for the spatial ops. Layout is C×H×W.

/// Unfolds a 3×3, stride-1, zero-padded neighbourhood per output pixel into
/// a `(c·9) × (h·w)` matrix.
pub(crate) fn im2col3(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    // valid x range such that 0 <= x + kx - 1 < w
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for x in x0..x1 {
                        dst_row[x] = src_row[x + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: scatters column gradients back onto the input.
pub(crate) fn col2im3(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                let src = &cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &src[y * w..(y + 1) * w];
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for x in x0..x1 {
                        dst_row[x + kx - 1] += src_row[x];
                    }
                }
            }
        }
    }
    out
}

/// Per-output-coordinate interpolation taps `(lo, hi, weight_hi)` for
/// half-pixel-centre bilinear resampling along one axis.
fn bilinear_taps(len_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len_in - 1);
            let hi = (lo + 1).min(len_in - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub(crate) fn upsample_bilinear(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                // lerp form keeps constant maps exactly constant
                let (a, b) = (src[y0 * w + x0], src[y0 * w + x1]);
                let top = a + (b - a) * fx;
                let (a, b) = (src[y1 * w + x0], src[y1 * w + x1]);
                let bot = a + (b - a) * fx;
                dst[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample_bilinear_backward(
    grad_out: &[f64],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut grad = vec![0.0; c * h * w];
    for ch in 0..c {
        let g_out = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let g_in = &mut grad[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = g_out[oy * ow + ox];
                g_in[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                g_in[y0 * w + x1] += g * (1.0 - fy) * fx;
                g_in[y1 * w + x0] += g * fy * (1.0 - fx);
                g_in[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    grad
}

/// 2×2 average pooling with stride 2; `h` and `w` must be even.
pub(crate) fn avg_pool2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = (2 * oy, 2 * ox);
                let s = src[y * w + x]
                    + src[y * w + x + 1]
                    + src[(y + 1) * w + x]
                    + src[(y + 1) * w + x + 1];
                out[ch * oh * ow + oy * ow + ox] = 0.25 * s;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut grad = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                grad[ch * h * w + y * w + x] = 0.25 * grad_out[ch * oh * ow + (y / 2) * ow + x / 2];
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 3, 4);
        let x: Vec<f64> = (0..c * h * w).map(|v| (v as f64).sin()).collect();
        let y: Vec<f64> = (0..c * 9 * h * w).map(|v| (v as f64 * 0.3).cos()).collect();
        let lhs: f64 = im2col3(&x, c, h, w)
            .iter()
            .zip(&y)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x.iter().zip(col2im3(&y, c, h, w)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let (c, h, w, f) = (1, 3, 2, 4);
        let x: Vec<f64> = (0..c * h * w).map(|v| (v as f64 * 1.7).sin()).collect();
        let g: Vec<f64> = (0..c * h * w * f * f)
            .map(|v| (v as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = upsample_bilinear(&x, c, h, w, f)
            .iter()
            .zip(&g)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .iter()
            .zip(upsample_bilinear_backward(&g, c, h, w, f))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
