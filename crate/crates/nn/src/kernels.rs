//! Raw spatial kernels over `[C, D, H, W]` buffers. The graph wires these
//! into forward/backward pairs; they are public so that tests and callers can
//! use the pooling primitives directly.

use crate::Float;

fn same_pad(kernel: [usize; 3], dilation: [usize; 3]) -> [isize; 3] {
    [0, 1, 2].map(|a| (dilation[a] * (kernel[a] - 1) / 2) as isize)
}

/// Valid output range `[lo, hi)` along an axis of length `n` for tap offset `off`.
#[inline]
fn valid_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfolds a stride-1 "same"-padded convolution input into a
/// `[C * kd * kh * kw, D * H * W]` column matrix.
pub fn im2col<T: Float>(
    x: &[T],
    channels: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
    dilation: [usize; 3],
    col: &mut [T],
) {
    let [d, h, w] = dims;
    let vol = d * h * w;
    let pad = same_pad(kernel, dilation);
    let mut row = 0;
    for c in 0..channels {
        let src = &x[c * vol..(c + 1) * vol];
        for kz in 0..kernel[0] {
            let oz = (kz * dilation[0]) as isize - pad[0];
            for ky in 0..kernel[1] {
                let oy = (ky * dilation[1]) as isize - pad[1];
                for kx in 0..kernel[2] {
                    let ox = (kx * dilation[2]) as isize - pad[2];
                    let dst = &mut col[row * vol..(row + 1) * vol];
                    let (xlo, xhi) = valid_range(w, ox);
                    for z in 0..d {
                        let zi = z as isize + oz;
                        for y in 0..h {
                            let yi = y as isize + oy;
                            let out = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            if zi < 0 || zi >= d as isize || yi < 0 || yi >= h as isize {
                                out.fill(T::zero());
                                continue;
                            }
                            let base = (zi as usize * h + yi as usize) * w;
                            if xlo == xhi {
                                out.fill(T::zero());
                                continue;
                            }
                            out[..xlo].fill(T::zero());
                            out[xhi..].fill(T::zero());
                            let s0 = (base as isize + xlo as isize + ox) as usize;
                            out[xlo..xhi].copy_from_slice(&src[s0..s0 + (xhi - xlo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im<T: Float>(
    col: &[T],
    channels: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
    dilation: [usize; 3],
    x: &mut [T],
) {
    let [d, h, w] = dims;
    let vol = d * h * w;
    let pad = same_pad(kernel, dilation);
    let mut row = 0;
    for c in 0..channels {
        let dst = &mut x[c * vol..(c + 1) * vol];
        for kz in 0..kernel[0] {
            let oz = (kz * dilation[0]) as isize - pad[0];
            for ky in 0..kernel[1] {
                let oy = (ky * dilation[1]) as isize - pad[1];
                for kx in 0..kernel[2] {
                    let ox = (kx * dilation[2]) as isize - pad[2];
                    let src = &col[row * vol..(row + 1) * vol];
                    let (xlo, xhi) = valid_range(w, ox);
                    if xlo == xhi {
                        row += 1;
                        continue;
                    }
                    for z in 0..d {
                        let zi = z as isize + oz;
                        if zi < 0 || zi >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let yi = y as isize + oy;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            let base = (zi as usize * h + yi as usize) * w;
                            let s = &src[(z * h + y) * w..(z * h + y + 1) * w];
                            let t0 = (base as isize + xlo as isize + ox) as usize;
                            for (o, &g) in dst[t0..t0 + (xhi - xlo)].iter_mut().zip(&s[xlo..xhi]) {
                                *o += g;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Iterates pooling windows: calls `f(out_index, in_indices)` for every
/// output cell. `dims` must be divisible by `window`.
fn for_each_window(channels: usize, dims: [usize; 3], window: [usize; 3], mut f: impl FnMut(usize, &[usize])) {
    let [d, h, w] = dims;
    let od = [d / window[0], h / window[1], w / window[2]];
    let mut idx = Vec::with_capacity(window.iter().product());
    let mut o = 0;
    for c in 0..channels {
        for z in 0..od[0] {
            for y in 0..od[1] {
                for x in 0..od[2] {
                    idx.clear();
                    for a in 0..window[0] {
                        for b in 0..window[1] {
                            let row = ((c * d + z * window[0] + a) * h + y * window[1] + b) * w;
                            for e in 0..window[2] {
                                idx.push(row + x * window[2] + e);
                            }
                        }
                    }
                    f(o, &idx);
                    o += 1;
                }
            }
        }
    }
}

pub fn pooled_dims(dims: [usize; 3], window: [usize; 3]) -> Option<[usize; 3]> {
    if (0..3).any(|a| window[a] == 0 || !dims[a].is_multiple_of(window[a])) {
        return None;
    }
    Some([0, 1, 2].map(|a| dims[a] / window[a]))
}

/// Max pooling with stride equal to the window. Returns the pooled values and
/// the flat input index of each window's (first) maximum.
pub fn max_pool<T: Float>(x: &[T], channels: usize, dims: [usize; 3], window: [usize; 3]) -> (Vec<T>, Vec<u32>) {
    let n = x.len() / window.iter().product::<usize>();
    let mut out = vec![T::zero(); n];
    let mut arg = vec![0u32; n];
    for_each_window(channels, dims, window, |o, idx| {
        let mut best = idx[0];
        for &i in &idx[1..] {
            if x[i] > x[best] {
                best = i;
            }
        }
        out[o] = x[best];
        arg[o] = best as u32;
    });
    (out, arg)
}

pub fn avg_pool<T: Float>(x: &[T], channels: usize, dims: [usize; 3], window: [usize; 3]) -> Vec<T> {
    let wn: usize = window.iter().product();
    let scale = T::one() / T::from_f64(wn as f64);
    let mut out = vec![T::zero(); x.len() / wn];
    for_each_window(channels, dims, window, |o, idx| {
        let s: T = idx.iter().map(|&i| x[i]).sum();
        out[o] = s * scale;
    });
    out
}

/// `alpha * maxpool + (1 - alpha) * avgpool` with `alpha` in `[0, 1]`.
pub fn mixed_pool<T: Float>(x: &[T], channels: usize, dims: [usize; 3], window: [usize; 3], alpha: T) -> Vec<T> {
    let (mx, _) = max_pool(x, channels, dims, window);
    let av = avg_pool(x, channels, dims, window);
    mx.iter()
        .zip(&av)
        .map(|(&m, &a)| alpha * m + (T::one() - alpha) * a)
        .collect()
}

/// Scatters pooled gradients back to the input: `max_w` goes to the argmax
/// cell, `avg_w / |window|` to every cell of the window.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pool_backward<T: Float>(
    dy: &[T],
    arg: &[u32],
    channels: usize,
    dims: [usize; 3],
    window: [usize; 3],
    max_w: T,
    avg_w: T,
    dx: &mut [T],
) {
    let wn = T::from_f64(window.iter().product::<usize>() as f64);
    let share = avg_w / wn;
    for_each_window(channels, dims, window, |o, idx| {
        let g = dy[o];
        if avg_w != T::zero() {
            for &i in idx {
                dx[i] += g * share;
            }
        }
        if max_w != T::zero() {
            dx[arg[o] as usize] += g * max_w;
        }
    });
}

/// Linear interpolation table for resizing an axis of length `n` to `m`
/// with half-pixel centres and edge clamping.
fn lerp_table(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Linear resize of one axis (0 = D, 1 = H, 2 = W) of a `[C, D, H, W]` buffer.
pub fn resize_axis<T: Float>(x: &[T], channels: usize, dims: [usize; 3], axis: usize, new_len: usize) -> Vec<T> {
    let n = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer = channels * dims[..axis].iter().product::<usize>();
    let table = lerp_table(n, new_len);
    let mut out = vec![T::zero(); outer * new_len * inner];
    for o in 0..outer {
        let src = &x[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * new_len * inner..(o + 1) * new_len * inner];
        for (j, &(i0, i1, t)) in table.iter().enumerate() {
            let t = T::from_f64(t);
            let u = T::one() - t;
            let a = &src[i0 * inner..(i0 + 1) * inner];
            let b = &src[i1 * inner..(i1 + 1) * inner];
            for ((d, &va), &vb) in dst[j * inner..(j + 1) * inner].iter_mut().zip(a).zip(b) {
                *d = u * va + t * vb;
            }
        }
    }
    out
}

/// Adjoint of [`resize_axis`]; `dy` has `new_len` along `axis`, result has `dims[axis]`.
pub(crate) fn resize_axis_backward<T: Float>(
    dy: &[T],
    channels: usize,
    dims: [usize; 3],
    axis: usize,
    new_len: usize,
) -> Vec<T> {
    let n = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer = channels * dims[..axis].iter().product::<usize>();
    let table = lerp_table(n, new_len);
    let mut dx = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let g = &dy[o * new_len * inner..(o + 1) * new_len * inner];
        let dst = &mut dx[o * n * inner..(o + 1) * n * inner];
        for (j, &(i0, i1, t)) in table.iter().enumerate() {
            let t = T::from_f64(t);
            let u = T::one() - t;
            let gj = &g[j * inner..(j + 1) * inner];
            for (k, &gv) in gj.iter().enumerate() {
                dst[i0 * inner + k] += u * gv;
                dst[i1 * inner + k] += t * gv;
            }
        }
    }
    dx
}
