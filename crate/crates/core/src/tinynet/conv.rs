//! Same-padded 3x3 and 1x1 convolutions on `Map3`, forward and backward.
//!
//! Weights are laid out `[out][in][ky][kx]`.

use crate::tensor::Map3;

/// Lane width of the blocked kernels. Partial sums are kept per lane and
/// folded in a fixed order, so results do not depend on the target's SIMD.
const LANES: usize = 4;
/// Output channels computed together in the forward kernel.
const OUT_BLOCK: usize = 4;

/// Zero-padded copy with a one-pixel border and `LANES` trailing zeros so
/// full-width loads near the right edge stay in bounds.
fn pad(input: &Map3) -> Vec<f64> {
    let (c, h, w) = input.dims();
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let mut out = vec![0.0; c * plane + LANES];
    for i in 0..c {
        let src = input.channel(i);
        for y in 0..h {
            let dst = i * plane + (y + 1) * pw + 1;
            out[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    out
}

#[inline(always)]
fn lanes(s: &[f64]) -> [f64; LANES] {
    s[..LANES].try_into().expect("slice holds a full lane group")
}

fn fold(acc: &[f64; LANES]) -> f64 {
    acc.iter().sum()
}

/// `Σ a·b` with per-lane partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0; LANES];
    let full = n - n % LANES;
    for (ca, cb) in a[..full].chunks_exact(LANES).zip(b[..full].chunks_exact(LANES)) {
        for t in 0..LANES {
            acc[t] += ca[t] * cb[t];
        }
    }
    for t in full..n {
        acc[t - full] += a[t] * b[t];
    }
    fold(&acc)
}

fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let full = a.len() - a.len() % LANES;
    for c in a[..full].chunks_exact(LANES) {
        for t in 0..LANES {
            acc[t] += c[t];
        }
    }
    for (t, v) in a[full..].iter().enumerate() {
        acc[t] += v;
    }
    fold(&acc)
}

/// `OB` output channels starting at `o0`; `wt` is `[in][tap][out]`.
#[allow(clippy::too_many_arguments)]
fn conv_block<const OB: usize>(
    padded: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    c_out: usize,
    o0: usize,
    bias: &[f64],
    out: &mut [f64],
) {
    let pw = w + 2;
    let plane = (h + 2) * pw;
    for y in 0..h {
        let mut x = 0;
        while x < w {
            let xb = LANES.min(w - x);
            let mut acc = [[0.0; LANES]; OB];
            for (j, a) in acc.iter_mut().enumerate() {
                *a = [bias[o0 + j]; LANES];
            }
            for i in 0..c_in {
                for ky in 0..3 {
                    let row = &padded[i * plane + (y + ky) * pw + x..];
                    for kx in 0..3 {
                        let s = lanes(&row[kx..]);
                        let wv = &wt[(i * 9 + ky * 3 + kx) * c_out + o0..][..OB];
                        for j in 0..OB {
                            for t in 0..LANES {
                                acc[j][t] += wv[j] * s[t];
                            }
                        }
                    }
                }
            }
            for (j, a) in acc.iter().enumerate() {
                let dst = (o0 + j) * h * w + y * w + x;
                out[dst..dst + xb].copy_from_slice(&a[..xb]);
            }
            x += LANES;
        }
    }
}

fn conv3x3_transposed(input: &Map3, wt: &[f64], bias: &[f64]) -> Map3 {
    let (c_in, h, w) = input.dims();
    let c_out = bias.len();
    let padded = pad(input);
    let mut out = Map3::zeros(c_out, h, w);
    let data = out.data_mut();
    let mut o0 = 0;
    while o0 < c_out {
        if c_out - o0 >= OUT_BLOCK {
            conv_block::<OUT_BLOCK>(&padded, c_in, h, w, wt, c_out, o0, bias, data);
            o0 += OUT_BLOCK;
        } else {
            conv_block::<1>(&padded, c_in, h, w, wt, c_out, o0, bias, data);
            o0 += 1;
        }
    }
    out
}

/// Same-padded 3x3 convolution. Each output is `bias + Σ_(i,ky,kx) w·x`,
/// summed in that order.
pub fn conv3x3(input: &Map3, weight: &[f64], bias: &[f64]) -> Map3 {
    let c_in = input.channels();
    let c_out = bias.len();
    debug_assert_eq!(weight.len(), c_out * c_in * 9);
    let mut wt = vec![0.0; weight.len()];
    for o in 0..c_out {
        for i in 0..c_in {
            for k in 0..9 {
                wt[(i * 9 + k) * c_out + o] = weight[(o * c_in + i) * 9 + k];
            }
        }
    }
    conv3x3_transposed(input, &wt, bias)
}

/// Accumulates weight and bias gradients into `dweight`/`dbias`; returns the
/// input gradient when `want_input` is set.
pub fn conv3x3_backward(
    input: &Map3,
    weight: &[f64],
    dout: &Map3,
    dweight: &mut [f64],
    dbias: &mut [f64],
    want_input: bool,
) -> Option<Map3> {
    let (c_in, h, w) = input.dims();
    let c_out = dout.channels();
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let padded = pad(input);
    for o in 0..c_out {
        let g = dout.channel(o);
        dbias[o] += sum(g);
        for i in 0..c_in {
            let mut acc = [[0.0; LANES]; 9];
            for y in 0..h {
                let mut x = 0;
                while x < w {
                    let xb = LANES.min(w - x);
                    let mut gv = [0.0; LANES];
                    gv[..xb].copy_from_slice(&g[y * w + x..y * w + x + xb]);
                    for ky in 0..3 {
                        let row = &padded[i * plane + (y + ky) * pw + x..];
                        for kx in 0..3 {
                            let s = lanes(&row[kx..]);
                            let a = &mut acc[ky * 3 + kx];
                            for t in 0..LANES {
                                a[t] += gv[t] * s[t];
                            }
                        }
                    }
                    x += LANES;
                }
            }
            for (k, a) in acc.iter().enumerate() {
                dweight[(o * c_in + i) * 9 + k] += fold(a);
            }
        }
    }
    if !want_input {
        return None;
    }
    // the input gradient is a same-padded convolution of `dout` with the
    // kernel flipped in both axes and in/out swapped
    let mut wt = vec![0.0; weight.len()];
    for o in 0..c_out {
        for i in 0..c_in {
            for k in 0..9 {
                wt[(o * 9 + (8 - k)) * c_in + i] = weight[(o * c_in + i) * 9 + k];
            }
        }
    }
    Some(conv3x3_transposed(dout, &wt, &vec![0.0; c_in]))
}

pub fn conv1x1(input: &Map3, weight: &[f64], bias: &[f64]) -> Map3 {
    let (c_in, h, w) = input.dims();
    let c_out = bias.len();
    let mut out = Map3::zeros(c_out, h, w);
    for o in 0..c_out {
        let plane = out.channel_mut(o);
        plane.fill(bias[o]);
        for i in 0..c_in {
            let wv = weight[o * c_in + i];
            for (d, v) in plane.iter_mut().zip(input.channel(i)) {
                *d += wv * v;
            }
        }
    }
    out
}

/// Accumulates gradients of a 1x1 convolution and adds its input gradient
/// into `din`.
pub fn conv1x1_backward(
    input: &Map3,
    weight: &[f64],
    dout: &Map3,
    dweight: &mut [f64],
    dbias: &mut [f64],
    din: &mut Map3,
) {
    let c_in = input.channels();
    for o in 0..dout.channels() {
        let g = dout.channel(o);
        dbias[o] += sum(g);
        for i in 0..c_in {
            dweight[o * c_in + i] += dot(g, input.channel(i));
            let wv = weight[o * c_in + i];
            for (d, gv) in din.channel_mut(i).iter_mut().zip(g) {
                *d += wv * gv;
            }
        }
    }
}

pub fn relu_in_place(map: &mut Map3) {
    for v in map.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the post-activation value is not positive.
pub fn relu_mask(grad: &mut Map3, activation: &Map3) {
    for (g, a) in grad.data_mut().iter_mut().zip(activation.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}
