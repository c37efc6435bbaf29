//! Single-image tensor kernels in channel-major `(C, H, W)` layout, each
//! with its backward pass.

use crate::linalg::gemm;

/// Unfolds a zero-padded 3×3 neighborhood: `col` is `(cin·9, h·w)`.
pub(crate) fn im2col3(input: &[f32], cin: usize, h: usize, w: usize, col: &mut Vec<f32>) {
    let hw = h * w;
    col.clear();
    col.resize(cin * 9 * hw, 0.0);
    for c in 0..cin {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates column gradients into `dinput`.
pub(crate) fn col2im3(dcol: &[f32], cin: usize, h: usize, w: usize, dinput: &mut [f32]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dinput[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcol[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// `out (cout, hw) = weight (cout, cin·9) · col + bias`.
pub(crate) fn conv3_forward(col: &[f32], weight: &[f32], bias: &[f32], cout: usize, hw: usize, out: &mut [f32]) {
    let k = col.len() / hw;
    for (co, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(bias[co]);
    }
    gemm(cout, k, hw, 1.0, weight, false, col, false, 1.0, out);
}

/// Accumulates weight and bias gradients and returns the column gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3_backward(
    col: &[f32],
    weight: &[f32],
    dout: &[f32],
    cout: usize,
    hw: usize,
    dweight: &mut [f32],
    dbias: &mut [f32],
    dcol: &mut Vec<f32>,
) {
    let k = col.len() / hw;
    gemm(cout, hw, k, 1.0, dout, false, col, true, 1.0, dweight);
    for (co, row) in dout.chunks_exact(hw).enumerate() {
        dbias[co] += row.iter().sum::<f32>();
    }
    dcol.clear();
    dcol.resize(k * hw, 0.0);
    gemm(k, cout, hw, 1.0, weight, true, dout, false, 0.0, dcol);
}

pub(crate) fn relu_inplace(x: &mut [f32]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradients where the post-activation output is not positive.
pub(crate) fn relu_backward(out: &[f32], grad: &mut [f32]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling; returns the pooled map and the flat argmax of each cell
/// (first maximum on ties).
pub(crate) fn maxpool2(input: &[f32], c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = ch * h * w;
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                let o = ch * oh * ow + y * ow + x;
                out[o] = input[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(dout: &[f32], arg: &[u32], dinput: &mut [f32]) {
    for (g, &i) in dout.iter().zip(arg) {
        dinput[i as usize] += g;
    }
}

/// Stride-2 2×2 transposed convolution. `weight` is `(cout·4, cin)` with
/// rows ordered `(co, dy, dx)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn upconv2_forward(
    input: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    bias: &[f32],
    cout: usize,
    scratch: &mut Vec<f32>,
) -> Vec<f32> {
    let hw = h * w;
    scratch.clear();
    scratch.resize(cout * 4 * hw, 0.0);
    gemm(cout * 4, cin, hw, 1.0, weight, false, input, false, 0.0, scratch);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let row = &scratch[(co * 4 + d) * hw..][..hw];
            for y in 0..h {
                for x in 0..w {
                    out[co * oh * ow + (2 * y + dy) * ow + 2 * x + dx] = row[y * w + x] + bias[co];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn upconv2_backward(
    input: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    cout: usize,
    dout: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
    scratch: &mut Vec<f32>,
) -> Vec<f32> {
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    scratch.clear();
    scratch.resize(cout * 4 * hw, 0.0);
    for co in 0..cout {
        let plane = &dout[co * oh * ow..][..oh * ow];
        dbias[co] += plane.iter().sum::<f32>();
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let row = &mut scratch[(co * 4 + d) * hw..][..hw];
            for y in 0..h {
                for x in 0..w {
                    row[y * w + x] = plane[(2 * y + dy) * ow + 2 * x + dx];
                }
            }
        }
    }
    gemm(cout * 4, hw, cin, 1.0, scratch, false, input, true, 1.0, dweight);
    let mut dinput = vec![0.0; cin * hw];
    gemm(cin, cout * 4, hw, 1.0, weight, true, scratch, false, 0.0, &mut dinput);
    dinput
}
